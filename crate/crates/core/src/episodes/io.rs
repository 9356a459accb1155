//! Dataset directories.
//!
//! ```text
//! <dir>/images/<id>.ppm   binary P6, maxval 255
//! <dir>/masks/<id>.pgm    binary P5, maxval 255, foreground >= 128
//! <dir>/split.txt         `<class_id> train|test` per line
//! <dir>/index.txt         `<id> <class_id>` per line
//! ```
//!
//! Blank lines and lines starting with `#` are ignored in both manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::netpbm::{
    encode_pgm, encode_ppm, parse_pgm, parse_ppm, raster_to_image, raster_to_mask,
};
use super::{ClassSplit, Dataset, Sample, Side};
use crate::error::{Error, IngestionError, Result};
use crate::numerics::Tensor;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` under `dir`, creating it if needed. Sample ids are the
/// zero-padded dataset indices.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut index = String::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        let id = format!("{i:06}");
        write_file(&images.join(format!("{id}.ppm")), &encode_ppm(&s.image))?;
        write_file(&masks.join(format!("{id}.pgm")), &encode_pgm(&s.mask))?;
        index.push_str(&format!("{id} {}\n", s.class_id));
    }
    let mut split = String::new();
    for side in [Side::Train, Side::Test] {
        for c in dataset.split().classes(side) {
            split.push_str(&format!("{c} {side}\n"));
        }
    }
    write_file(&dir.join("split.txt"), split.as_bytes())?;
    write_file(&dir.join("index.txt"), index.as_bytes())
}

/// Non-comment lines as (1-based line number, whitespace-separated fields).
fn manifest_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| {
        Error::ingestion(
            path,
            IngestionError::MalformedLine {
                line: 0,
                reason: "not valid UTF-8".into(),
            },
        )
    })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| (i + 1, l.split_whitespace().map(str::to_owned).collect()))
        .collect())
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::ingestion(
        path,
        IngestionError::MalformedLine {
            line,
            reason: reason.into(),
        },
    )
}

fn parse_class(path: &Path, line: usize, field: &str) -> Result<u32> {
    field
        .parse()
        .map_err(|_| malformed(path, line, format!("`{field}` is not a class id")))
}

fn load_split(path: &Path) -> Result<ClassSplit> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (line, fields) in manifest_lines(path)? {
        let [class, side] = &fields[..] else {
            return Err(malformed(path, line, "expected `<class_id> train|test`"));
        };
        let class = parse_class(path, line, class)?;
        let side: Side = side
            .parse()
            .map_err(|_| malformed(path, line, format!("unknown side `{side}`")))?;
        match side {
            Side::Train => train.insert(class),
            Side::Test => test.insert(class),
        };
        if train.contains(&class) && test.contains(&class) {
            return Err(Error::ingestion(path, IngestionError::SplitOverlap(class)));
        }
    }
    ClassSplit::new(train, test)
}

fn load_sample(dir: &Path, id: &str, class_id: u32) -> Result<Sample> {
    let image_path = dir.join("images").join(format!("{id}.ppm"));
    let mask_path = dir.join("masks").join(format!("{id}.pgm"));
    read_sample(&image_path, &mask_path, class_id)
}

/// Reads a binary PPM as an RGB image in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let raster = parse_ppm(&read_file(path)?).map_err(|k| Error::ingestion(path, k))?;
    Ok(raster_to_image(&raster))
}

/// Reads an image/mask pair; the mask must match the image size and have
/// foreground.
pub fn read_sample(image_path: &Path, mask_path: &Path, class_id: u32) -> Result<Sample> {
    let image = parse_ppm(&read_file(image_path)?).map_err(|k| Error::ingestion(image_path, k))?;
    let mask = parse_pgm(&read_file(mask_path)?).map_err(|k| Error::ingestion(mask_path, k))?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::ingestion(
            mask_path,
            IngestionError::SizeMismatch {
                image_w: image.width,
                image_h: image.height,
                mask_w: mask.width,
                mask_h: mask.height,
            },
        ));
    }
    let mask = raster_to_mask(&mask);
    if !mask.has_foreground() {
        return Err(Error::ingestion(mask_path, IngestionError::EmptyMask));
    }
    Sample::new(raster_to_image(&image), mask, class_id)
}

/// Reads a dataset directory. Errors name the offending file.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let split = load_split(&dir.join("split.txt"))?;
    let index_path = dir.join("index.txt");
    let mut samples = Vec::new();
    for (line, fields) in manifest_lines(&index_path)? {
        let [id, class] = &fields[..] else {
            return Err(malformed(&index_path, line, "expected `<id> <class_id>`"));
        };
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(malformed(
                &index_path,
                line,
                format!("invalid sample id `{id}`"),
            ));
        }
        let class_id = parse_class(&index_path, line, class)?;
        if split.side_of(class_id).is_none() {
            return Err(Error::ingestion(
                &index_path,
                IngestionError::UnsplitClass(class_id),
            ));
        }
        samples.push(load_sample(dir, id, class_id)?);
    }
    Dataset::new(samples, split)
}

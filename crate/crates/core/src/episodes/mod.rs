//! Samples, class-split datasets and episodic sampling.

mod io;
pub mod netpbm;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

pub use io::{load_dataset, read_image, read_sample, write_dataset};
pub use synthetic::{
    generate_synthetic_dataset, render_sample, Shape, ShapeFamily, SyntheticConfig,
};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Mask, Tensor};
use crate::seed;

/// One annotated image: `H × W × 3` RGB in `[0, 1]` and a binary mask for
/// `class_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
    pub class_id: u32,
}

impl Sample {
    pub fn new(image: Tensor, mask: Mask, class_id: u32) -> Result<Self> {
        let (h, w, c) = image.dims3()?;
        if c != 3 {
            return Err(Error::InvalidShape(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::InvalidShape(format!(
                "image is {h}x{w} but mask is {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        if !mask.has_foreground() {
            return Err(Error::EmptyMask(format!(
                "sample of class {class_id} has an empty mask"
            )));
        }
        Ok(Sample {
            image,
            mask,
            class_id,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Which half of the class split an episode is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Train,
    Test,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Train => "train",
            Side::Test => "test",
        })
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Side::Train),
            "test" => Ok(Side::Test),
            other => Err(Error::Config(format!("unknown split side `{other}`"))),
        }
    }
}

/// Disjoint partition of class ids into training and test classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    train: BTreeSet<u32>,
    test: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn new(train: BTreeSet<u32>, test: BTreeSet<u32>) -> Result<Self> {
        if let Some(&c) = train.intersection(&test).next() {
            return Err(Error::Config(format!(
                "class {c} is in both the train and test split"
            )));
        }
        Ok(ClassSplit { train, test })
    }

    pub fn classes(&self, side: Side) -> &BTreeSet<u32> {
        match side {
            Side::Train => &self.train,
            Side::Test => &self.test,
        }
    }

    pub fn side_of(&self, class_id: u32) -> Option<Side> {
        if self.train.contains(&class_id) {
            Some(Side::Train)
        } else if self.test.contains(&class_id) {
            Some(Side::Test)
        } else {
            None
        }
    }
}

/// Samples plus the class split; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    split: ClassSplit,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split: ClassSplit) -> Result<Self> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if split.side_of(s.class_id).is_none() {
                return Err(Error::Config(format!(
                    "sample {i} has class {} which is in neither split",
                    s.class_id
                )));
            }
            by_class.entry(s.class_id).or_default().push(i);
        }
        Ok(Dataset {
            samples,
            split,
            by_class,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self) -> &ClassSplit {
        &self.split
    }

    /// Indices of the samples of one class, in dataset order.
    pub fn class_samples(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    /// Classes of `side` that have at least `needed` samples.
    pub fn eligible_classes(&self, side: Side, needed: usize) -> Vec<u32> {
        self.split
            .classes(side)
            .iter()
            .copied()
            .filter(|&c| self.class_samples(c).len() >= needed)
            .collect()
    }
}

/// One few-shot task: `K` supports and `N` queries of a single class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: u32,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    /// Dataset indices of `support` followed by those of `query`.
    pub sample_ids: Vec<usize>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// Draws a class uniformly from the classes of `side` with at least `k + n`
/// samples, then `k + n` distinct samples of it without replacement.
pub fn sample_episode(
    dataset: &Dataset,
    side: Side,
    k: usize,
    n: usize,
    rng_seed: u64,
) -> Result<Episode> {
    if k == 0 || n == 0 {
        return Err(Error::EpisodeSampling(format!(
            "episodes need K >= 1 and N >= 1, got K={k}, N={n}"
        )));
    }
    let eligible = dataset.eligible_classes(side, k + n);
    if eligible.is_empty() {
        return Err(Error::EpisodeSampling(format!(
            "no {side} class has the {} samples a {k}-shot episode with {n} queries needs",
            k + n
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let class_id = eligible[rng.random_range(0..eligible.len())];
    let pool = dataset.class_samples(class_id);
    let picks: Vec<usize> = index::sample(&mut rng, pool.len(), k + n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let take = |ids: &[usize]| {
        ids.iter()
            .map(|&i| dataset.samples[i].clone())
            .collect::<Vec<_>>()
    };
    Ok(Episode {
        class_id,
        support: take(&picks[..k]),
        query: take(&picks[k..]),
        sample_ids: picks,
    })
}

/// Rotates every pixel's color by `angle` radians about the gray axis of the
/// RGB cube, clamping to `[0, 1]`. Grays are fixed; for saturated colors this
/// is close to a hue shift of `angle / 2π` turns.
pub fn rotate_hue(image: &Tensor, angle: f64) -> Tensor {
    let (c, s) = (angle.cos(), angle.sin());
    let a = c + (1.0 - c) / 3.0;
    let b = (1.0 - c) / 3.0 - s / 3f64.sqrt();
    let d = (1.0 - c) / 3.0 + s / 3f64.sqrt();
    let m = [[a, b, d], [d, a, b], [b, d, a]];
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let rgb = [px[0], px[1], px[2]];
        for (o, row) in px.iter_mut().zip(&m) {
            *o = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Downsamples a binary mask to `h × w`: bilinear resize of the 0/1 values,
/// then a `>= 0.5` threshold. If that erases all foreground of a non-empty
/// input, the cell containing the input's foreground centroid is kept.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    let (src_h, src_w) = (mask.height(), mask.width());
    if (src_h, src_w) == (h, w) {
        return mask.clone();
    }
    let values = Tensor::new(
        vec![src_h, src_w, 1],
        mask.as_slice()
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("mask dimensions are positive");
    let resized = bilinear_resize(&values, h, w).expect("target size is positive");
    let data: Vec<bool> = resized.data().iter().map(|&v| v >= 0.5).collect();
    let mut out = Mask::new(h, w, data).expect("resize keeps the requested size");
    if !out.has_foreground() {
        if let Some((cy, cx)) = mask.centroid() {
            let y = ((cy * h as f64 / src_h as f64) as usize).min(h - 1);
            let x = ((cx * w as f64 / src_w as f64) as usize).min(w - 1);
            out.set(y, x, true);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        let mut samples = Vec::new();
        for class_id in 0..4u32 {
            for i in 0..5 {
                let image = Tensor::filled(&[4, 4, 3], (class_id * 10 + i) as f64 / 100.0);
                let mask = Mask::from_fn(4, 4, |y, x| y == x);
                samples.push(Sample::new(image, mask, class_id).unwrap());
            }
        }
        let split = ClassSplit::new([0, 1, 2].into(), [3].into()).unwrap();
        Dataset::new(samples, split).unwrap()
    }

    #[test]
    fn hue_rotation_fixes_grays_and_cycles_primaries() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.4, 0.4, 0.4, 1.0, 0.0, 0.0]).unwrap();
        let third = rotate_hue(&img, 2.0 * std::f64::consts::PI / 3.0);
        let want = [0.4, 0.4, 0.4, 0.0, 1.0, 0.0];
        for (a, b) in third.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", third.data());
        }
        assert!(rotate_hue(&img, 0.0).bitwise_eq(&img));
    }

    #[test]
    fn one_shot_one_query_has_two_distinct_samples() {
        let ds = toy_dataset();
        let ep = sample_episode(&ds, Side::Train, 1, 1, 11).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.len(), 1);
        assert_ne!(ep.sample_ids[0], ep.sample_ids[1]);
        assert_eq!(ep.support[0].class_id, ep.query[0].class_id);
    }

    #[test]
    fn test_side_draws_test_classes() {
        let ds = toy_dataset();
        for s in 0..20 {
            let ep = sample_episode(&ds, Side::Test, 2, 3, s).unwrap();
            assert_eq!(ep.class_id, 3);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = toy_dataset();
        let a = sample_episode(&ds, Side::Train, 2, 2, 99).unwrap();
        let b = sample_episode(&ds, Side::Train, 2, 2, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_samples_is_an_error() {
        let ds = toy_dataset();
        assert!(matches!(
            sample_episode(&ds, Side::Test, 3, 3, 0),
            Err(Error::EpisodeSampling(_))
        ));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        assert!(ClassSplit::new([1, 3].into(), [3].into()).is_err());
    }

    #[test]
    fn downsample_constant_and_identity() {
        let ones = Mask::ones(16, 12);
        assert_eq!(downsample_mask(&ones, 4, 3), Mask::ones(4, 3));
        let m = Mask::from_fn(8, 8, |y, x| (y * x) % 3 == 1);
        assert_eq!(downsample_mask(&m, 8, 8), m);
    }

    #[test]
    fn downsample_block_matches_area_fraction() {
        let m = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let d = downsample_mask(&m, 4, 4);
        for cy in 0..4 {
            for cx in 0..4 {
                let mut covered = 0;
                for y in 2 * cy..2 * cy + 2 {
                    for x in 2 * cx..2 * cx + 2 {
                        covered += usize::from(m.get(y, x));
                    }
                }
                assert_eq!(d.get(cy, cx), covered as f64 / 4.0 >= 0.5, "cell {cy},{cx}");
            }
        }
        assert_eq!(d.count(), 4);
        assert!(d.get(1, 1) && d.get(2, 2));
    }

    #[test]
    fn downsample_rescues_thin_structures() {
        let m = Mask::from_fn(32, 32, |y, x| y == 13 && (10..14).contains(&x));
        let d = downsample_mask(&m, 8, 8);
        assert_eq!(d.count(), 1);
        assert!(d.get(3, 3));
    }
}

//! Parametric-shape datasets with analytic ground truth.
//!
//! Each class is one shape family. A sample draws the target shape at a random
//! position, size and color over a textured noise background, with up to two
//! distractor shapes of other classes on the same side of the split
//! underneath it. Hues are drawn from a band owned by the class. The mask is the target's
//! analytic predicate evaluated at pixel centers, so it is exact.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClassSplit, Dataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Mask, Tensor};
use crate::seed;

/// Foreground fraction bounds; samples outside are redrawn.
const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Ellipse,
    Diamond,
    Frame,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Disc,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Ellipse,
        ShapeFamily::Diamond,
        ShapeFamily::Frame,
    ];

    pub fn for_class(class_id: u32) -> Option<ShapeFamily> {
        Self::ALL.get(class_id as usize).copied()
    }
}

/// A placed shape. `radius` is the half-extent; `aux` is the family's second
/// parameter (inner-radius ratio, arm ratio or axis ratio) and is ignored by
/// families without one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub family: ShapeFamily,
    pub center_y: f64,
    pub center_x: f64,
    pub radius: f64,
    pub aux: f64,
    /// Ellipses only: long axis vertical instead of horizontal.
    pub vertical: bool,
}

impl Shape {
    /// Whether the point `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx, r) = (y - self.center_y, x - self.center_x, self.radius);
        match self.family {
            ShapeFamily::Disc => dy * dy + dx * dx <= r * r,
            ShapeFamily::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeFamily::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            ShapeFamily::Ring => {
                let d2 = dy * dy + dx * dx;
                let inner = r * self.aux;
                d2 <= r * r && d2 >= inner * inner
            }
            ShapeFamily::Cross => {
                let arm = r * self.aux;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            ShapeFamily::Ellipse => {
                let (a, b) = if self.vertical {
                    (r * self.aux, r)
                } else {
                    (r, r * self.aux)
                };
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
            ShapeFamily::Diamond => dy.abs() + dx.abs() <= r,
            ShapeFamily::Frame => {
                let inner = r * self.aux;
                dy.abs() <= r && dx.abs() <= r && (dy.abs() > inner || dx.abs() > inner)
            }
        }
    }

    /// Rasterizes the shape at pixel centers of a `size × size` grid.
    pub fn mask(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |y, x| {
            self.contains(y as f64 + 0.5, x as f64 + 0.5)
        })
    }

    fn random(family: ShapeFamily, size: usize, rng: &mut ChaCha8Rng) -> Shape {
        let s = size as f64;
        let radius = rng.random_range(0.13..0.27) * s;
        let center_y = rng.random_range(radius..s - radius);
        let center_x = rng.random_range(radius..s - radius);
        let aux = match family {
            ShapeFamily::Ring => rng.random_range(0.45..0.6),
            ShapeFamily::Cross => rng.random_range(0.28..0.38),
            ShapeFamily::Ellipse => rng.random_range(0.45..0.6),
            ShapeFamily::Frame => rng.random_range(0.45..0.6),
            _ => 1.0,
        };
        Shape {
            family,
            center_y,
            center_x,
            radius,
            aux,
            vertical: rng.random_bool(0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Number of classes held out for testing: the last `test_classes` ids.
    pub test_classes: usize,
}

impl SyntheticConfig {
    /// Holds out a third of the classes (at least one) for testing.
    pub fn new(classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        SyntheticConfig {
            classes,
            samples_per_class,
            image_size,
            seed,
            test_classes: (classes / 3).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 4 {
            return Err(Error::Config(format!(
                "need at least 4 classes, got {}",
                self.classes
            )));
        }
        if self.classes > ShapeFamily::ALL.len() {
            return Err(Error::Config(format!(
                "{} classes requested but only {} shape families exist",
                self.classes,
                ShapeFamily::ALL.len()
            )));
        }
        if self.samples_per_class < 8 {
            return Err(Error::Config(format!(
                "need at least 8 samples per class, got {}",
                self.samples_per_class
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.test_classes == 0 || self.test_classes >= self.classes {
            return Err(Error::Config(format!(
                "test_classes must be in 1..{}, got {}",
                self.classes, self.test_classes
            )));
        }
        Ok(())
    }

    /// Class ids on the same side of the train/test split as `class_id`.
    pub fn side_of(&self, class_id: u32) -> std::ops::Range<u32> {
        let first_test = (self.classes - self.test_classes) as u32;
        if class_id < first_test {
            0..first_test
        } else {
            first_test..self.classes as u32
        }
    }

    /// Center of the hue band of `class_id`. Bands tile the wheel; held-out
    /// classes get bands spread between the training bands.
    pub fn hue_center(&self, class_id: u32) -> f64 {
        let n = self.classes;
        let t = self.test_classes;
        let test_slots: Vec<usize> = (0..t).map(|j| (2 * j + 1) * n / (2 * t)).collect();
        let first_test = (n - t) as u32;
        let slot = if class_id >= first_test {
            test_slots[(class_id - first_test) as usize]
        } else {
            (0..n)
                .filter(|s| !test_slots.contains(s))
                .nth(class_id as usize)
                .expect("train slot")
        };
        slot as f64 / n as f64
    }
}

/// Builds the dataset; a pure function of `config`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let classes = config.classes as u32;
    let first_test = classes - config.test_classes as u32;
    let mut samples = Vec::with_capacity(config.classes * config.samples_per_class);
    for class_id in 0..classes {
        for i in 0..config.samples_per_class {
            samples.push(render_sample(config, class_id, i).0);
        }
    }
    let train: BTreeSet<u32> = (0..first_test).collect();
    let test: BTreeSet<u32> = (first_test..classes).collect();
    Dataset::new(samples, ClassSplit::new(train, test)?)
}

/// Renders sample `index` of `class_id`; also returns the placed target shape.
/// Draws are repeated until the foreground fraction lies in (0.01, 0.9).
pub fn render_sample(config: &SyntheticConfig, class_id: u32, index: usize) -> (Sample, Shape) {
    let size = config.image_size;
    let mut rng = seed::rng(seed::derive(
        config.seed,
        &[u64::from(class_id), index as u64],
    ));
    let family = ShapeFamily::for_class(class_id).expect("class id within the shape families");
    loop {
        let target = Shape::random(family, size, &mut rng);
        let mask = target.mask(size);
        let frac = mask.foreground_fraction();
        let mut image = background(size, &mut rng);
        let others: Vec<u32> = config
            .side_of(class_id)
            .filter(|&c| c != class_id)
            .collect();
        let distractors = rng.random_range(0..=2usize);
        for _ in 0..distractors {
            let Some(&other) = others.get(rng.random_range(0..others.len().max(1))) else {
                break;
            };
            let shape = Shape::random(
                ShapeFamily::for_class(other).expect("valid class"),
                size,
                &mut rng,
            );
            paint(
                &mut image,
                &shape,
                class_color(config, other, &mut rng),
                &mut rng,
            );
        }
        paint(
            &mut image,
            &target,
            class_color(config, class_id, &mut rng),
            &mut rng,
        );
        if frac > MIN_FOREGROUND && frac < MAX_FOREGROUND {
            let sample = Sample::new(image, mask, class_id).expect("rendered sample is consistent");
            return (sample, target);
        }
    }
}

/// Hue drawn anywhere in the class band, random saturation and value.
fn class_color(config: &SyntheticConfig, class_id: u32, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let half = 0.5 / config.classes as f64;
    let hue = (config.hue_center(class_id) + rng.random_range(-half..half)).rem_euclid(1.0);
    hsv_to_rgb(
        hue,
        rng.random_range(0.55..0.95),
        rng.random_range(0.6..0.95),
    )
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Low-saturation base color, two random sinusoidal bands and pixel noise.
fn background(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let gray = rng.random_range(0.25..0.75);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.09),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let texture: f64 = waves
                .iter()
                .map(|&(freq, angle, phase, amp)| {
                    amp * ((x as f64 * angle.cos() + y as f64 * angle.sin()) * freq + phase).sin()
                })
                .sum();
            for t in tint {
                let noise = rng.random_range(-0.06..0.06);
                data.push((gray + t + texture + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("background dimensions")
}

/// Fills the shape with `color`, shaded by a linear brightness ramp along a
/// random direction.
fn paint(image: &mut Tensor, shape: &Shape, color: [f64; 3], rng: &mut ChaCha8Rng) {
    let size = image.shape()[0];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dir_y, dir_x) = (angle.sin(), angle.cos());
    let strength = rng.random_range(0.1..0.3);
    let data = image.data_mut();
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if !shape.contains(py, px) {
                continue;
            }
            let along =
                ((py - shape.center_y) * dir_y + (px - shape.center_x) * dir_x) / shape.radius;
            let shade = 1.0 + strength * along.clamp(-1.0, 1.0);
            for (c, &base) in color.iter().enumerate() {
                data[(y * size + x) * 3 + c] = (base * shade).clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig::new(4, 8, 32, 7);
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a.samples().len(), 32);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert!(x.image.bitwise_eq(&y.image));
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.class_id, y.class_id);
        }
    }

    #[test]
    fn foreground_fraction_within_bounds() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(8, 10, 32, 3)).unwrap();
        for s in ds.samples() {
            let f = s.mask.foreground_fraction();
            assert!(f > 0.0 && f < 0.9, "fraction {f}");
        }
    }

    #[test]
    fn hue_bands_interleave_held_out_classes() {
        let config = SyntheticConfig::new(6, 8, 32, 0);
        let centers: Vec<f64> = (0..6).map(|c| config.hue_center(c) * 6.0).collect();
        assert_eq!(centers, vec![0.0, 2.0, 3.0, 5.0, 1.0, 4.0]);
        let one = SyntheticConfig::new(4, 8, 32, 0);
        let mut slots: Vec<f64> = (0..4).map(|c| one.hue_center(c) * 4.0).collect();
        assert_eq!(slots[3], 2.0);
        slots.sort_by(f64::total_cmp);
        assert_eq!(slots, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn disc_mask_is_the_radius_predicate() {
        let (sample, shape) = render_sample(&SyntheticConfig::new(6, 8, 48, 1234), 0, 3);
        assert_eq!(shape.family, ShapeFamily::Disc);
        for y in 0..48 {
            for x in 0..48 {
                let (dy, dx) = (
                    y as f64 + 0.5 - shape.center_y,
                    x as f64 + 0.5 - shape.center_x,
                );
                let inside = (dy * dy + dx * dx).sqrt() <= shape.radius;
                assert_eq!(sample.mask.get(y, x), inside, "pixel {y},{x}");
            }
        }
    }

    #[test]
    fn split_holds_out_last_classes() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(6, 8, 32, 0)).unwrap();
        let train: Vec<u32> = ds
            .split()
            .classes(super::super::Side::Train)
            .iter()
            .copied()
            .collect();
        let test: Vec<u32> = ds
            .split()
            .classes(super::super::Side::Test)
            .iter()
            .copied()
            .collect();
        assert_eq!(train, vec![0, 1, 2, 3]);
        assert_eq!(test, vec![4, 5]);
    }

    #[test]
    fn too_many_classes_is_a_config_error() {
        let cfg = SyntheticConfig::new(9, 8, 32, 0);
        assert!(matches!(
            generate_synthetic_dataset(&cfg),
            Err(Error::Config(_))
        ));
        let cfg = SyntheticConfig::new(4, 8, 31, 0);
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn image_values_in_unit_range() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(4, 8, 32, 5)).unwrap();
        for s in ds.samples() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

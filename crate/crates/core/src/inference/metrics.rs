//! IoU metrics and the episodic evaluation protocol.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{average_fuse_prepared, cgm_fuse_prepared, Segmenter};
use crate::episodes::{netpbm, sample_episode, Dataset, Episode, Side};
use crate::error::{Error, Result};
use crate::numerics::Mask;
use crate::seed;

/// `|A ∧ B| / |A ∨ B|`; 1 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Writes a mask as binary PGM, foreground 255.
pub fn write_mask_pgm(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, netpbm::encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

/// Pooled pixel counts: per-class foreground intersection and union, and
/// foreground/background intersection and union over all classes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricAccumulator {
    per_class: BTreeMap<u32, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
}

impl MetricAccumulator {
    pub fn add(&mut self, class_id: u32, predicted: &Mask, truth: &Mask) -> Result<()> {
        predicted.check_same_shape(truth)?;
        let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in predicted.as_slice().iter().zip(truth.as_slice()) {
            fi += u64::from(p && t);
            fu += u64::from(p || t);
            bi += u64::from(!p && !t);
            bu += u64::from(!p || !t);
        }
        let e = self.per_class.entry(class_id).or_default();
        e.0 += fi;
        e.1 += fu;
        self.fg.0 += fi;
        self.fg.1 += fu;
        self.bg.0 += bi;
        self.bg.1 += bu;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (&c, &(i, u)) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.0 += i;
            e.1 += u;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
    }

    fn ratio((i, u): (u64, u64)) -> f64 {
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    pub fn class_iou(&self) -> BTreeMap<u32, f64> {
        self.per_class
            .iter()
            .map(|(&c, &iu)| (c, Self::ratio(iu)))
            .collect()
    }

    /// Unweighted mean of the per-class IoUs; 0 when nothing was added.
    pub fn mean_iou(&self) -> f64 {
        let ious = self.class_iou();
        if ious.is_empty() {
            0.0
        } else {
            ious.values().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn foreground_iou(&self) -> f64 {
        Self::ratio(self.fg)
    }

    pub fn background_iou(&self) -> f64 {
        Self::ratio(self.bg)
    }

    pub fn fb_iou(&self) -> f64 {
        (self.foreground_iou() + self.background_iou()) / 2.0
    }
}

/// Evaluation results. Per-class IoU is the mean over the seeds in which the
/// class occurred; `mIoU` is the mean of `per_class_iou`; `FB_IoU` is the mean
/// over seeds of each seed's pooled FB-IoU. `num_episodes` counts episodes
/// over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<u32, f64>,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "FB_IoU")]
    pub fb_iou: f64,
    pub num_episodes: usize,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    /// Combines per-seed accumulators.
    pub fn from_seeds(per_seed: &[(u64, MetricAccumulator)], episodes_per_seed: usize) -> Self {
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut fb = 0.0;
        for (_, acc) in per_seed {
            for (c, v) in acc.class_iou() {
                let e = sums.entry(c).or_default();
                e.0 += v;
                e.1 += 1;
            }
            fb += acc.fb_iou();
        }
        let per_class_iou: BTreeMap<u32, f64> = sums
            .into_iter()
            .map(|(c, (s, n))| (c, s / n as f64))
            .collect();
        let miou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        MetricsReport {
            per_class_iou,
            miou,
            fb_iou: if per_seed.is_empty() {
                0.0
            } else {
                fb / per_seed.len() as f64
            },
            num_episodes: episodes_per_seed * per_seed.len(),
            seeds: per_seed.iter().map(|(s, _)| *s).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Predicts the query masks of an episode. Query ground truth must not be
/// used; it is available only so oracle predictors can be written for tests.
pub trait QueryPredictor: Sync {
    fn predict(&self, episode: &Episode) -> Result<Vec<Mask>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Average,
    Cgm,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Fusion::Average),
            "cgm" => Ok(Fusion::Cgm),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}`, expected avg or cgm"
            ))),
        }
    }
}

/// Adapts a [`Segmenter`] to episodes with the chosen K-shot fusion.
pub struct ModelPredictor<'a, S> {
    pub segmenter: &'a S,
    pub fusion: Fusion,
}

impl<S: Segmenter> QueryPredictor for ModelPredictor<'_, S> {
    fn predict(&self, episode: &Episode) -> Result<Vec<Mask>> {
        let seg = self.segmenter;
        let prepared = episode
            .support
            .iter()
            .map(|s| seg.prepare_support(s))
            .collect::<Result<Vec<_>>>()?;
        let weights = match self.fusion {
            Fusion::Average => None,
            Fusion::Cgm => Some(cgm_weights(seg, episode, &prepared)?),
        };
        episode
            .query
            .iter()
            .map(|q| {
                let query = seg.prepare_query(&q.image)?;
                let fused = match &weights {
                    None => average_fuse_prepared(seg, &prepared, &query)?,
                    Some(u) => cgm_fuse_prepared(seg, &prepared, u, &query)?,
                };
                Ok(fused.mask)
            })
            .collect()
    }
}

fn cgm_weights<S: Segmenter>(
    seg: &S,
    episode: &Episode,
    prepared: &[S::Support],
) -> Result<Vec<f64>> {
    let as_queries = episode
        .support
        .iter()
        .map(|s| seg.prepare_query(&s.image))
        .collect::<Result<Vec<_>>>()?;
    super::confidences_prepared(seg, &episode.support, prepared, &as_queries)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub side: Side,
    pub shots: usize,
    pub queries: usize,
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Worker threads for episode evaluation.
    pub jobs: usize,
}

impl Protocol {
    pub fn episode_seed(seed: u64, index: usize) -> u64 {
        seed::derive(seed, &[0xE7A1, index as u64])
    }
}

/// Runs `protocol.episodes` episodes per seed on `protocol.side` and pools
/// pixel counts per seed. Results do not depend on `jobs`.
pub fn evaluate<P: QueryPredictor>(
    predictor: &P,
    dataset: &Dataset,
    protocol: &Protocol,
) -> Result<MetricsReport> {
    if dataset.split().classes(protocol.side).is_empty() {
        return Err(Error::Protocol(format!(
            "the {} split has no classes",
            protocol.side
        )));
    }
    if protocol.episodes == 0 || protocol.seeds.is_empty() {
        return Err(Error::Protocol(
            "evaluation needs at least one episode and one seed".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(protocol.jobs.max(1))
        .build()
        .map_err(|e| Error::Protocol(format!("cannot start worker threads: {e}")))?;
    let mut per_seed = Vec::with_capacity(protocol.seeds.len());
    for &s in &protocol.seeds {
        let episodes = (0..protocol.episodes)
            .map(|i| {
                sample_episode(
                    dataset,
                    protocol.side,
                    protocol.shots,
                    protocol.queries,
                    Protocol::episode_seed(s, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let predictions: Vec<Vec<Mask>> = pool.install(|| {
            episodes
                .par_iter()
                .map(|ep| predictor.predict(ep))
                .collect::<Result<_>>()
        })?;
        let mut acc = MetricAccumulator::default();
        for (ep, masks) in episodes.iter().zip(&predictions) {
            if masks.len() != ep.query.len() {
                return Err(Error::Protocol(format!(
                    "predictor returned {} masks for {} queries",
                    masks.len(),
                    ep.query.len()
                )));
            }
            for (m, q) in masks.iter().zip(&ep.query) {
                acc.add(ep.class_id, m, &q.mask)?;
            }
        }
        per_seed.push((s, acc));
    }
    Ok(MetricsReport::from_seeds(&per_seed, protocol.episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{ClassSplit, Sample};
    use crate::numerics::Tensor;

    #[test]
    fn iou_cases() {
        let a = Mask::from_fn(3, 3, |y, x| y == x);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(3, 3, |y, x| y != x);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let c = Mask::new(
            2,
            4,
            vec![true, true, true, true, false, false, false, false],
        )
        .unwrap();
        let d = Mask::new(
            2,
            4,
            vec![false, false, true, true, true, true, false, false],
        )
        .unwrap();
        assert!((iou(&c, &d).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&Mask::zeros(2, 2), &Mask::zeros(2, 2)).unwrap(), 1.0);
        assert_eq!(iou(&Mask::zeros(2, 2), &Mask::ones(2, 2)).unwrap(), 0.0);
        assert!(iou(&Mask::zeros(2, 2), &Mask::zeros(2, 3)).is_err());
    }

    struct Oracle;
    impl QueryPredictor for Oracle {
        fn predict(&self, ep: &Episode) -> Result<Vec<Mask>> {
            Ok(ep.query.iter().map(|q| q.mask.clone()).collect())
        }
    }

    struct AllBackground;
    impl QueryPredictor for AllBackground {
        fn predict(&self, ep: &Episode) -> Result<Vec<Mask>> {
            Ok(ep
                .query
                .iter()
                .map(|q| Mask::zeros(q.height(), q.width()))
                .collect())
        }
    }

    fn toy() -> Dataset {
        let mut samples = Vec::new();
        for class_id in 0..4u32 {
            for i in 0..4usize {
                let mask =
                    Mask::from_fn(4, 4, |y, x| (y * 4 + x) % (i + 2) == class_id as usize % 2);
                samples.push(Sample::new(Tensor::zeros(&[4, 4, 3]), mask, class_id).unwrap());
            }
        }
        Dataset::new(
            samples,
            ClassSplit::new([0, 1].into(), [2, 3].into()).unwrap(),
        )
        .unwrap()
    }

    fn protocol(jobs: usize) -> Protocol {
        Protocol {
            side: Side::Test,
            shots: 1,
            queries: 2,
            episodes: 6,
            seeds: vec![1, 2],
            jobs,
        }
    }

    #[test]
    fn oracle_scores_one() {
        let r = evaluate(&Oracle, &toy(), &protocol(1)).unwrap();
        assert_eq!((r.miou, r.fb_iou), (1.0, 1.0));
        assert_eq!(r.num_episodes, 12);
        assert_eq!(r.seeds, vec![1, 2]);
    }

    #[test]
    fn all_background_scores_half_background_iou() {
        let ds = toy();
        let r = evaluate(&AllBackground, &ds, &protocol(2)).unwrap();
        assert_eq!(r.miou, 0.0);
        // Background IoU pooled per seed: true-background pixels over all pixels.
        let mut expected = 0.0;
        for &s in &[1u64, 2] {
            let (mut bg, mut total) = (0usize, 0usize);
            for i in 0..6 {
                let ep =
                    sample_episode(&ds, Side::Test, 1, 2, Protocol::episode_seed(s, i)).unwrap();
                for q in &ep.query {
                    bg += q.mask.len() - q.mask.count();
                    total += q.mask.len();
                }
            }
            expected += bg as f64 / total as f64 / 2.0;
        }
        assert!((r.fb_iou - expected / 2.0).abs() < 1e-15);
    }

    #[test]
    fn results_do_not_depend_on_jobs() {
        let a = evaluate(&AllBackground, &toy(), &protocol(1)).unwrap();
        let b = evaluate(&AllBackground, &toy(), &protocol(3)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn empty_test_split_is_a_protocol_error() {
        let ds = toy();
        let only_train = Dataset::new(
            ds.samples()
                .iter()
                .filter(|s| s.class_id < 2)
                .cloned()
                .collect(),
            ClassSplit::new([0, 1].into(), Default::default()).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            evaluate(&Oracle, &only_train, &protocol(1)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn report_json_field_names() {
        let r = evaluate(&Oracle, &toy(), &protocol(1)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            vec!["FB_IoU", "mIoU", "num_episodes", "per_class_iou", "seeds"]
        );
        assert_eq!(v["per_class_iou"]["2"], 1.0);
    }
}

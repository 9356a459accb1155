//! One-shot prediction and K-shot fusion.
//!
//! A [`Segmenter`] scores a query image under one support sample. K-shot
//! prediction combines the K per-support logit maps, either with equal
//! weights ([`average_fuse`]) or weighted by how well each support segments
//! all supports ([`cgm_fuse`]). Logit maps are at query image resolution.

mod metrics;

pub use metrics::{
    evaluate, iou, write_mask_pgm, Fusion, MetricAccumulator, MetricsReport, ModelPredictor,
    Protocol, QueryPredictor,
};

use crate::episodes::Sample;
use crate::error::{Error, Result};
use crate::network::{mask_from_probs, Model};
use crate::numerics::{channel_softmax, Mask, Tape, Tensor};

/// Something that segments a query image given one annotated support.
///
/// Supports and queries are prepared once so that the K×K and K×N score
/// evaluations of K-shot inference do not repeat per-image work.
pub trait Segmenter: Sync {
    type Support: Send + Sync;
    type Query: Send + Sync;

    fn prepare_support(&self, support: &Sample) -> Result<Self::Support>;
    fn prepare_query(&self, image: &Tensor) -> Result<Self::Query>;
    /// `H × W × 2` logits at the query image's resolution.
    fn score(&self, support: &Self::Support, query: &Self::Query) -> Result<Tensor>;
}

/// Query guidance vectors of one support, as values.
#[derive(Clone, Debug)]
pub struct PreparedSupport {
    pub vectors: Vec<Tensor>,
}

/// Encoded query and its image size.
#[derive(Clone, Debug)]
pub struct PreparedQuery {
    pub features: Tensor,
    pub height: usize,
    pub width: usize,
}

impl Segmenter for Model {
    type Support = PreparedSupport;
    type Query = PreparedQuery;

    fn prepare_support(&self, support: &Sample) -> Result<PreparedSupport> {
        let mut tape = Tape::frozen(self.params());
        let pass = self.support_pass(&mut tape, &support.image, &support.mask)?;
        let vectors = self
            .query_vectors(&pass)
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect();
        Ok(PreparedSupport { vectors })
    }

    fn prepare_query(&self, image: &Tensor) -> Result<PreparedQuery> {
        let (height, width, _) = image.dims3()?;
        let mut tape = Tape::frozen(self.params());
        let x = tape.input(image.clone());
        let f = self.encode(&mut tape, x)?;
        Ok(PreparedQuery {
            features: tape.value(f).clone(),
            height,
            width,
        })
    }

    fn score(&self, support: &PreparedSupport, query: &PreparedQuery) -> Result<Tensor> {
        let mut tape = Tape::frozen(self.params());
        let fq = tape.input(query.features.clone());
        let vs: Vec<_> = support
            .vectors
            .iter()
            .map(|v| tape.input(v.clone()))
            .collect();
        let p = self.predict_query(&mut tape, fq, &vs)?;
        let up = tape.bilinear_resize(p.logits, query.height, query.width)?;
        Ok(tape.value(up).clone())
    }
}

/// Logits, their softmax and the argmax mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub logits: Tensor,
    pub probs: Tensor,
    pub mask: Mask,
}

impl Segmentation {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probs = channel_softmax(&logits)?;
        let mask = mask_from_probs(&probs);
        Ok(Segmentation {
            logits,
            probs,
            mask,
        })
    }
}

/// Segments `query` with a single support.
pub fn segment_one_shot<S: Segmenter>(
    seg: &S,
    support: &Sample,
    query: &Tensor,
) -> Result<Segmentation> {
    let s = seg.prepare_support(support)?;
    let q = seg.prepare_query(query)?;
    Segmentation::from_logits(seg.score(&s, &q)?)
}

fn check_supports(supports: &[Sample]) -> Result<()> {
    if supports.is_empty() {
        return Err(Error::Protocol(
            "K-shot inference needs at least one support".into(),
        ));
    }
    Ok(())
}

/// Confidences from already prepared supports: entry `k` is the mean IoU,
/// over every support `i` (including `k`), between support `i`'s mask and its
/// prediction under support `k`.
pub fn confidences_prepared<S: Segmenter>(
    seg: &S,
    supports: &[Sample],
    prepared: &[S::Support],
    as_queries: &[S::Query],
) -> Result<Vec<f64>> {
    let k = supports.len();
    let mut u = Vec::with_capacity(k);
    for guide in prepared {
        let mut total = 0.0;
        for (target, q) in supports.iter().zip(as_queries) {
            let predicted = Segmentation::from_logits(seg.score(guide, q)?)?.mask;
            total += iou(&predicted, &target.mask)?;
        }
        u.push(total / k as f64);
    }
    Ok(u)
}

/// Per-support confidence scores in `[0, 1]`.
pub fn cgm_confidence<S: Segmenter>(seg: &S, supports: &[Sample]) -> Result<Vec<f64>> {
    check_supports(supports)?;
    let prepared = supports
        .iter()
        .map(|s| seg.prepare_support(s))
        .collect::<Result<Vec<_>>>()?;
    let as_queries = supports
        .iter()
        .map(|s| seg.prepare_query(&s.image))
        .collect::<Result<Vec<_>>>()?;
    confidences_prepared(seg, supports, &prepared, &as_queries)
}

/// Softmax of `(1/K) Σ_k u[k] · logits[k]`. When every weight is zero the
/// weights become uniform.
pub fn fuse_with_confidences(logits: &[Tensor], u: &[f64]) -> Result<Segmentation> {
    let Some(first) = logits.first() else {
        return Err(Error::Protocol("fusion of zero score maps".into()));
    };
    if u.len() != logits.len() {
        return Err(Error::InvalidShape(format!(
            "{} weights for {} score maps",
            u.len(),
            logits.len()
        )));
    }
    let k = logits.len() as f64;
    let uniform = u.iter().all(|&x| x == 0.0);
    let mut acc = vec![0.0; first.len()];
    for (l, &w) in logits.iter().zip(u) {
        if l.shape() != first.shape() {
            return Err(Error::InvalidShape(format!(
                "score maps differ in shape: {:?} vs {:?}",
                l.shape(),
                first.shape()
            )));
        }
        let w = if uniform { 1.0 } else { w };
        for (a, v) in acc.iter_mut().zip(l.data()) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= k);
    Segmentation::from_logits(Tensor::new(first.shape().to_vec(), acc)?)
}

/// Confidence-weighted fusion of prepared supports' scores for one query.
pub fn cgm_fuse_prepared<S: Segmenter>(
    seg: &S,
    prepared: &[S::Support],
    confidences: &[f64],
    query: &S::Query,
) -> Result<Segmentation> {
    let logits = prepared
        .iter()
        .map(|s| seg.score(s, query))
        .collect::<Result<Vec<_>>>()?;
    fuse_with_confidences(&logits, confidences)
}

/// Equal-weight fusion of prepared supports' scores for one query.
pub fn average_fuse_prepared<S: Segmenter>(
    seg: &S,
    prepared: &[S::Support],
    query: &S::Query,
) -> Result<Segmentation> {
    cgm_fuse_prepared(seg, prepared, &vec![1.0; prepared.len()], query)
}

/// K-shot prediction with confidence-weighted fusion; also returns the
/// confidences.
pub fn cgm_fuse<S: Segmenter>(
    seg: &S,
    supports: &[Sample],
    query: &Tensor,
) -> Result<(Segmentation, Vec<f64>)> {
    check_supports(supports)?;
    let prepared = supports
        .iter()
        .map(|s| seg.prepare_support(s))
        .collect::<Result<Vec<_>>>()?;
    let as_queries = supports
        .iter()
        .map(|s| seg.prepare_query(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let u = confidences_prepared(seg, supports, &prepared, &as_queries)?;
    let q = seg.prepare_query(query)?;
    Ok((cgm_fuse_prepared(seg, &prepared, &u, &q)?, u))
}

/// K-shot prediction from the unweighted mean of the per-support logits.
pub fn average_fuse<S: Segmenter>(
    seg: &S,
    supports: &[Sample],
    query: &Tensor,
) -> Result<Segmentation> {
    check_supports(supports)?;
    let prepared = supports
        .iter()
        .map(|s| seg.prepare_support(s))
        .collect::<Result<Vec<_>>>()?;
    let q = seg.prepare_query(query)?;
    average_fuse_prepared(seg, &prepared, &q)
}

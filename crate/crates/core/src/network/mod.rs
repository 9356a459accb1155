//! The trainable model: a shared encoder, support and query feature
//! processing modules (FPMs), and a decoder shared by every prediction path.
//!
//! All layers are `k × k` convolutions with `k / 2` zero padding followed by a
//! bias and (except for the last decoder layer) a ReLU.
//!
//! | stage       | layers                                                    |
//! |-------------|-----------------------------------------------------------|
//! | encoder     | 3→s, s→s stride 2, s→d, d→d stride 2 (3×3)                |
//! | support FPM | 3d→d, d→d                                                 |
//! | query FPM   | (1+n)d→d, d→d, with n the number of query vectors         |
//! | decoder     | d→d, d→d, then 1×1 d→2                                    |
//!
//! `s` is [`ArchConfig::stem_channels`], `d` is [`ArchConfig::feature_dim`].
//! The FPM and decoder kernel size is [`ArchConfig::head_kernel`].

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};

use crate::episodes::downsample_mask;
use crate::error::{Error, Result};
use crate::numerics::{Mask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prototypes::{decompose_from, initial_vector, SupportVectors};
use crate::seed;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub feature_dim: usize,
    /// Kernel size of the FPM and decoder convolutions (odd).
    pub head_kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stem_channels: 32,
            feature_dim: 64,
            head_kernel: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head kernel must be odd, got {}",
                self.head_kernel
            )));
        }
        Ok(())
    }
}

/// Which support vector is broadcast into the query FPM input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VectorKind {
    Initial,
    Primary,
    Auxiliary,
}

impl VectorKind {
    fn token(self) -> &'static str {
        match self {
            VectorKind::Initial => "initial",
            VectorKind::Primary => "primary",
            VectorKind::Auxiliary => "auxiliary",
        }
    }
}

/// Model variant: the query guidance vectors and which support losses train.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub query_vectors: Vec<VectorKind>,
    /// Supervise the support prediction made with the initial vector.
    pub support_initial_loss: bool,
    /// Supervise the support prediction made with the primary/auxiliary pair.
    pub support_refined_loss: bool,
}

impl Variant {
    /// No self-guidance: the query sees the initial vector twice and only the
    /// query loss trains.
    pub fn baseline() -> Self {
        Variant {
            query_vectors: vec![VectorKind::Initial, VectorKind::Initial],
            support_initial_loss: false,
            support_refined_loss: false,
        }
    }

    /// Self-guided: primary and auxiliary vectors guide the query; all three
    /// losses train.
    pub fn sgm() -> Self {
        Variant {
            query_vectors: vec![VectorKind::Primary, VectorKind::Auxiliary],
            support_initial_loss: true,
            support_refined_loss: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_vectors.is_empty() {
            return Err(Error::Config(
                "a variant needs at least one query vector".into(),
            ));
        }
        Ok(())
    }

    /// Whether the support must be predicted and its foreground split.
    pub fn needs_decomposition(&self) -> bool {
        self.support_refined_loss
            || self
                .query_vectors
                .iter()
                .any(|k| matches!(k, VectorKind::Primary | VectorKind::Auxiliary))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vectors: Vec<&str> = self.query_vectors.iter().map(|k| k.token()).collect();
        write!(
            f,
            "vectors={} s1={} s2={}",
            vectors.join(","),
            self.support_initial_loss,
            self.support_refined_loss
        )
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, or `baseline` / `sgm`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => return Ok(Variant::baseline()),
            "sgm" => return Ok(Variant::sgm()),
            _ => {}
        }
        let bad = || Error::Config(format!("cannot parse variant `{s}`"));
        let mut vectors = None;
        let mut s1 = None;
        let mut s2 = None;
        for field in s.split_whitespace() {
            let (key, value) = field.split_once('=').ok_or_else(bad)?;
            match key {
                "vectors" => {
                    let kinds = value
                        .split(',')
                        .map(|t| match t {
                            "initial" => Ok(VectorKind::Initial),
                            "primary" => Ok(VectorKind::Primary),
                            "auxiliary" => Ok(VectorKind::Auxiliary),
                            _ => Err(bad()),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    vectors = Some(kinds);
                }
                "s1" => s1 = Some(value.parse::<bool>().map_err(|_| bad())?),
                "s2" => s2 = Some(value.parse::<bool>().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let v = Variant {
            query_vectors: vectors.ok_or_else(bad)?,
            support_initial_loss: s1.ok_or_else(bad)?,
            support_refined_loss: s2.ok_or_else(bad)?,
        };
        v.validate()?;
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Logits and their channel softmax, both `h × w × 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

/// Everything the support branch produces for one support sample.
#[derive(Clone, Debug)]
pub struct SupportPass {
    pub features: Var,
    /// Support mask at feature resolution.
    pub mask: Mask,
    pub v_s: Var,
    /// Prediction from the initial vector, present when the variant needs it.
    pub initial: Option<Prediction>,
    pub vectors: Option<SupportVectors<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    variant: Variant,
    params: ParamStore,
    encoder: Vec<Conv>,
    support_fpm: Vec<Conv>,
    query_fpm: Vec<Conv>,
    decoder: Vec<Conv>,
}

impl Model {
    /// Fresh weights drawn uniformly from `±sqrt(6 / fan_in)`, zero biases.
    pub fn new(arch: ArchConfig, variant: Variant, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        variant.validate()?;
        let (s, d, hk) = (arch.stem_channels, arch.feature_dim, arch.head_kernel);
        let n = variant.query_vectors.len();
        let mut params = ParamStore::new();
        let mut rng = seed::rng(init_seed);
        let mut layer = |name: &str, k: usize, c_in: usize, c_out: usize, stride: usize| {
            let bound = (6.0 / (k * k * c_in) as f64).sqrt();
            let len = k * k * c_in * c_out;
            let w: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
            let kernel = params.add(
                format!("{name}.weight"),
                Tensor::new(vec![k, k, c_in, c_out], w).expect("positive dims"),
            );
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
            Conv {
                kernel,
                bias,
                stride,
            }
        };
        let encoder = vec![
            layer("encoder.0", 3, 3, s, 1),
            layer("encoder.1", 3, s, s, 2),
            layer("encoder.2", 3, s, d, 1),
            layer("encoder.3", 3, d, d, 2),
        ];
        let support_fpm = vec![
            layer("support_fpm.0", hk, 3 * d, d, 1),
            layer("support_fpm.1", hk, d, d, 1),
        ];
        let query_fpm = vec![
            layer("query_fpm.0", hk, (1 + n) * d, d, 1),
            layer("query_fpm.1", hk, d, d, 1),
        ];
        let decoder = vec![
            layer("decoder.0", hk, d, d, 1),
            layer("decoder.1", hk, d, d, 1),
            layer("decoder.2", 1, d, 2, 1),
        ];
        Ok(Model {
            arch,
            variant,
            params,
            encoder,
            support_fpm,
            query_fpm,
            decoder,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    /// Feature map size for an `h × w` image.
    pub fn feature_size(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(4), w.div_ceil(4))
    }

    fn apply(tape: &mut Tape<'_>, conv: &Conv, x: Var, relu: bool) -> Result<Var> {
        let k = tape.param(conv.kernel);
        let b = tape.param(conv.bias);
        let pad = tape.value(k).shape()[0] / 2;
        let y = tape.conv2d(x, k, conv.stride, pad)?;
        let y = tape.bias_add(y, b)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn check_channels(tape: &Tape<'_>, x: Var, expected: usize, stage: &str) -> Result<()> {
        let (_, _, c) = tape.value(x).dims3()?;
        if c != expected {
            return Err(Error::InvalidShape(format!(
                "{stage} expects {expected} channels, got {c}"
            )));
        }
        Ok(())
    }

    /// `H × W × 3` image to `⌈H/4⌉ × ⌈W/4⌉ × d` features.
    pub fn encode(&self, tape: &mut Tape<'_>, image: Var) -> Result<Var> {
        let (h, w, _) = tape.value(image).dims3()?;
        if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
            return Err(Error::InvalidShape(format!(
                "image is {h}x{w}, the encoder needs at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}"
            )));
        }
        Self::check_channels(tape, image, 3, "encoder")?;
        let mut x = image;
        for conv in &self.encoder {
            x = Self::apply(tape, conv, x, true)?;
        }
        Ok(x)
    }

    pub fn support_fpm(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Self::check_channels(tape, x, 3 * self.arch.feature_dim, "support FPM")?;
        let x = Self::apply(tape, &self.support_fpm[0], x, true)?;
        Self::apply(tape, &self.support_fpm[1], x, true)
    }

    pub fn query_fpm(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let expected = (1 + self.variant.query_vectors.len()) * self.arch.feature_dim;
        Self::check_channels(tape, x, expected, "query FPM")?;
        let x = Self::apply(tape, &self.query_fpm[0], x, true)?;
        Self::apply(tape, &self.query_fpm[1], x, true)
    }

    /// `h × w × d` features to `h × w × 2` logits (channel 0 background).
    pub fn decode(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        Self::check_channels(tape, x, self.arch.feature_dim, "decoder")?;
        let x = Self::apply(tape, &self.decoder[0], x, true)?;
        let x = Self::apply(tape, &self.decoder[1], x, true)?;
        Self::apply(tape, &self.decoder[2], x, false)
    }

    fn head(&self, tape: &mut Tape<'_>, x: Var) -> Result<Prediction> {
        let logits = self.decode(tape, x)?;
        let probs = tape.channel_softmax(logits)?;
        Ok(Prediction { logits, probs })
    }

    /// Support prediction from the initial vector, duplicated.
    pub fn predict_support_initial(
        &self,
        tape: &mut Tape<'_>,
        fs: Var,
        v_s: Var,
    ) -> Result<Prediction> {
        let x = tape.expand_concat(fs, &[v_s, v_s])?;
        let x = self.support_fpm(tape, x)?;
        self.head(tape, x)
    }

    /// Support prediction from the primary and auxiliary vectors.
    pub fn predict_support_refined(
        &self,
        tape: &mut Tape<'_>,
        fs: Var,
        v_pri: Var,
        v_aux: Var,
    ) -> Result<Prediction> {
        let x = tape.expand_concat(fs, &[v_pri, v_aux])?;
        let x = self.support_fpm(tape, x)?;
        self.head(tape, x)
    }

    /// Query prediction guided by `vectors`, in the variant's order.
    pub fn predict_query(
        &self,
        tape: &mut Tape<'_>,
        fq: Var,
        vectors: &[Var],
    ) -> Result<Prediction> {
        let x = tape.expand_concat(fq, vectors)?;
        let x = self.query_fpm(tape, x)?;
        self.head(tape, x)
    }

    /// Encodes a support sample and, when the variant needs it, predicts it
    /// from the initial vector and splits its foreground.
    pub fn support_pass(
        &self,
        tape: &mut Tape<'_>,
        image: &Tensor,
        mask: &Mask,
    ) -> Result<SupportPass> {
        self.support_pass_with(tape, image, mask, None)
    }

    /// [`Model::support_pass`] with the predicted support mask replaced by
    /// `fixed_prediction` (feature resolution) when given.
    pub fn support_pass_with(
        &self,
        tape: &mut Tape<'_>,
        image: &Tensor,
        mask: &Mask,
        fixed_prediction: Option<&Mask>,
    ) -> Result<SupportPass> {
        let img = tape.input(image.clone());
        let features = self.encode(tape, img)?;
        let (h, w, _) = tape.value(features).dims3()?;
        let small = downsample_mask(mask, h, w);
        let v_s = initial_vector(tape, features, &small)?;
        let need_initial = self.variant.needs_decomposition() || self.variant.support_initial_loss;
        let initial = if need_initial {
            Some(self.predict_support_initial(tape, features, v_s)?)
        } else {
            None
        };
        let vectors = match initial {
            Some(p) if self.variant.needs_decomposition() => {
                let m_hat = match fixed_prediction {
                    Some(m) => m.clone(),
                    None => mask_from_probs(tape.value(p.probs)),
                };
                Some(decompose_from(tape, features, v_s, &small, &m_hat)?)
            }
            _ => None,
        };
        Ok(SupportPass {
            features,
            mask: small,
            v_s,
            initial,
            vectors,
        })
    }

    /// The query guidance vectors of a support pass, in the variant's order.
    pub fn query_vectors(&self, pass: &SupportPass) -> Vec<Var> {
        self.variant
            .query_vectors
            .iter()
            .map(|kind| match (kind, &pass.vectors) {
                (VectorKind::Initial, _) | (_, None) => pass.v_s,
                (VectorKind::Primary, Some(sv)) => sv.v_pri,
                (VectorKind::Auxiliary, Some(sv)) => sv.v_aux,
            })
            .collect()
    }
}

/// Per-pixel argmax of a two-channel map; ties go to background.
pub fn mask_from_probs(probs: &Tensor) -> Mask {
    let (h, w, c) = probs.dims3().expect("probability map is rank 3");
    assert_eq!(c, 2, "probability map must have 2 channels");
    let data = probs.data().chunks_exact(2).map(|p| p[1] > p[0]).collect();
    Mask::new(h, w, data).expect("dims match")
}

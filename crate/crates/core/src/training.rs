//! Losses and episodic SGD.
//!
//! The episode objective is `L_s1 + L_s2 + L_q`: cross-entropy of the support
//! prediction from the initial vector, of the support prediction from the
//! primary/auxiliary pair, and of the query prediction. A [`Variant`] can drop
//! either support term. All three are computed at feature resolution against
//! downsampled masks.

use std::fmt::Write as _;

use rand::Rng;

use crate::episodes::{downsample_mask, rotate_hue, sample_episode, Dataset, Episode, Side};
use crate::error::{Error, Result};
use crate::network::{ArchConfig, Model, Variant};
use crate::numerics::{Mask, ParamStore, Tape, Tensor, Var};
use crate::seed;

/// Mean per-pixel cross-entropy of `probs` (`h × w × 2`) against `mask`.
pub fn ce_loss(tape: &mut Tape<'_>, probs: Var, mask: &Mask) -> Result<Var> {
    tape.cross_entropy(probs, mask)
}

/// Value-level [`ce_loss`].
pub fn ce_loss_value(probs: &Tensor, mask: &Mask) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.input(probs.clone());
    let l = ce_loss(&mut tape, p, mask)?;
    Ok(tape.value(l).item())
}

/// Loss terms of one episode; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub support_initial: f64,
    pub support_refined: f64,
    pub query: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeLoss {
    /// Scalar node of the total loss.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the full forward pass of a 1-shot, 1-query episode on `tape` and
/// returns the objective of the model's variant.
pub fn episode_loss(model: &Model, tape: &mut Tape<'_>, episode: &Episode) -> Result<EpisodeLoss> {
    episode_loss_with(model, tape, episode, None)
}

/// [`episode_loss`] with the predicted support mask held at
/// `fixed_prediction`, so the objective is smooth in the weights.
pub fn episode_loss_with(
    model: &Model,
    tape: &mut Tape<'_>,
    episode: &Episode,
    fixed_prediction: Option<&Mask>,
) -> Result<EpisodeLoss> {
    let (Some(support), Some(query)) = (episode.support.first(), episode.query.first()) else {
        return Err(Error::EpisodeSampling(
            "episode needs a support and a query sample".into(),
        ));
    };
    let variant = model.variant();
    let pass = model.support_pass_with(tape, &support.image, &support.mask, fixed_prediction)?;

    let q_img = tape.input(query.image.clone());
    let fq = model.encode(tape, q_img)?;
    let vectors = model.query_vectors(&pass);
    let pred_q = model.predict_query(tape, fq, &vectors)?;
    let (h, w, _) = tape.value(fq).dims3()?;
    let q_mask = downsample_mask(&query.mask, h, w);
    let l_q = ce_loss(tape, pred_q.probs, &q_mask)?;

    let mut breakdown = LossBreakdown {
        query: tape.value(l_q).item(),
        ..LossBreakdown::default()
    };
    let mut total = l_q;
    if variant.support_initial_loss {
        let p = pass
            .initial
            .expect("initial prediction exists when its loss is enabled");
        let l = ce_loss(tape, p.probs, &pass.mask)?;
        breakdown.support_initial = tape.value(l).item();
        total = tape.add(total, l)?;
    }
    if variant.support_refined_loss {
        let sv = pass
            .vectors
            .as_ref()
            .expect("decomposition exists when the refined loss is enabled");
        let p = model.predict_support_refined(tape, pass.features, sv.v_pri, sv.v_aux)?;
        let l = ce_loss(tape, p.probs, &pass.mask)?;
        breakdown.support_refined = tape.value(l).item();
        total = tape.add(total, l)?;
    }
    breakdown.total = tape.value(total).item();
    Ok(EpisodeLoss { total, breakdown })
}

/// Loss of `episode` under `model` without recording gradients.
pub fn evaluate_episode_loss(model: &Model, episode: &Episode) -> Result<LossBreakdown> {
    let mut tape = Tape::frozen(model.params());
    Ok(episode_loss(model, &mut tape, episode)?.breakdown)
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let values = p.value.data_mut();
            for ((x, v), g) in values.iter_mut().zip(vel.iter_mut()).zip(&p.grad) {
                *v = self.momentum * *v + (g + self.weight_decay * *x);
                *x -= self.learning_rate * *v;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Support shots per training episode.
    pub shots: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Rotate the hue of all images of a training episode by one random
    /// angle, so the class cannot be read off its color alone.
    pub hue_jitter: bool,
    pub arch: ArchConfig,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            episodes_per_epoch: 200,
            shots: 1,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            hue_jitter: true,
            arch: ArchConfig::default(),
            variant: Variant::sgm(),
        }
    }
}

impl TrainConfig {
    /// A learning rate of zero is accepted; it leaves the weights untouched.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config(
                "epochs and episodes_per_epoch must be at least 1".into(),
            ));
        }
        if self.shots != 1 {
            return Err(Error::Config(format!(
                "training uses 1-shot episodes, got shots={}",
                self.shots
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        self.arch.validate()?;
        self.variant.validate()
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, &[0x1417])
    }

    pub fn episode_seed(&self, epoch: usize, episode: usize) -> u64 {
        seed::derive(self.seed, &[epoch as u64, episode as u64])
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_support_initial: f64,
    pub mean_support_refined: f64,
    pub mean_query: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// One comma-separated line per epoch after a `#` header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# epoch, mean_loss, mean_L_s1, mean_L_s2, mean_L_q\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}, {:.8}, {:.8}, {:.8}, {:.8}",
                r.epoch, r.mean_loss, r.mean_support_initial, r.mean_support_refined, r.mean_query
            );
        }
        out
    }
}

fn jitter_hue(episode: &mut Episode, episode_seed: u64) {
    let angle =
        seed::rng(seed::derive(episode_seed, &[0x4E])).random_range(0.0..std::f64::consts::TAU);
    for s in episode.support.iter_mut().chain(episode.query.iter_mut()) {
        s.image = rotate_hue(&s.image, angle);
    }
}

/// Trains a fresh model; see [`train_with`].
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    train_with(dataset, config, |_| {})
}

/// Trains a fresh model on 1-shot, 1-query training-side episodes, one SGD
/// step per episode. `on_epoch` sees each epoch's record as it completes.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let mut model = Model::new(config.arch, config.variant.clone(), config.init_seed())?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut sums = LossBreakdown::default();
        for i in 0..config.episodes_per_epoch {
            let episode_seed = config.episode_seed(epoch, i);
            let mut episode = sample_episode(dataset, Side::Train, config.shots, 1, episode_seed)?;
            if config.hue_jitter {
                jitter_hue(&mut episode, episode_seed);
            }
            model.params_mut().zero_grad();
            let grads = {
                let mut tape = Tape::with_params(model.params());
                let loss = episode_loss(&model, &mut tape, &episode)?;
                if !loss.breakdown.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        episode_seed,
                    });
                }
                sums.total += loss.breakdown.total;
                sums.support_initial += loss.breakdown.support_initial;
                sums.support_refined += loss.breakdown.support_refined;
                sums.query += loss.breakdown.query;
                tape.backward(loss.total)?
            };
            model.params_mut().accumulate(&grads);
            opt.step(model.params_mut());
        }
        let n = config.episodes_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            mean_loss: sums.total / n,
            mean_support_initial: sums.support_initial / n,
            mean_support_refined: sums.support_refined / n,
            mean_query: sums.query / n,
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((model, log))
}

mod common;

use common::{central_differences, relative_error};
use fss::episodes::{generate_synthetic_dataset, sample_episode, Side, SyntheticConfig};
use fss::network::{mask_from_probs, ArchConfig, Model, Variant};
use fss::numerics::{Tape, Tensor};
use fss::training::{episode_loss_with, evaluate_episode_loss, train, TrainConfig};

fn small_arch() -> ArchConfig {
    ArchConfig {
        stem_channels: 4,
        feature_dim: 6,
        head_kernel: 3,
    }
}

#[test]
fn episode_loss_gradient_matches_finite_differences_for_every_weight() {
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(4, 8, 32, 21)).unwrap();
    let episode = sample_episode(&ds, Side::Train, 1, 1, 5).unwrap();
    for variant in [Variant::sgm(), Variant::baseline()] {
        let model = Model::new(small_arch(), variant, 9).unwrap();
        let fixed = {
            let mut tape = Tape::frozen(model.params());
            let s = &episode.support[0];
            let pass = model.support_pass(&mut tape, &s.image, &s.mask).unwrap();
            pass.initial.map(|p| mask_from_probs(tape.value(p.probs)))
        };
        let mut tape = Tape::with_params(model.params());
        let loss = episode_loss_with(&model, &mut tape, &episode, fixed.as_ref()).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let analytic: Vec<Vec<f64>> = {
            let mut by_id = vec![Vec::new(); model.params().len()];
            for (id, g) in grads.params() {
                by_id[id.index()] = g.to_vec();
            }
            by_id
        };
        for (id, param) in model.params().ids().zip(model.params().iter()) {
            let numeric = central_differences(param.value.data(), 1e-6, |x| {
                let mut m = model.clone();
                m.params_mut().get_mut(id).value =
                    Tensor::new(param.value.shape().to_vec(), x.to_vec()).unwrap();
                let mut tape = Tape::frozen(m.params());
                episode_loss_with(&m, &mut tape, &episode, fixed.as_ref())
                    .unwrap()
                    .breakdown
                    .total
            });
            // Parameters the variant never uses get no gradient.
            let a = match &analytic[id.index()] {
                g if g.is_empty() => vec![0.0; numeric.len()],
                g => g.clone(),
            };
            for (k, (x, y)) in a.iter().zip(&numeric).enumerate() {
                let err = relative_error(*x, *y, 1e-4);
                assert!(err < 1e-4, "{}[{k}]: analytic {x} numeric {y}", param.name);
            }
        }
    }
}

#[test]
fn probe_episode_loss_decreases_with_training() {
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(4, 12, 32, 8)).unwrap();
    let probe = sample_episode(&ds, Side::Train, 1, 1, 4242).unwrap();
    for seed in 0..3 {
        let config = TrainConfig {
            epochs: 4,
            episodes_per_epoch: 40,
            seed,
            arch: small_arch(),
            ..TrainConfig::default()
        };
        let before = Model::new(config.arch, config.variant.clone(), config.init_seed()).unwrap();
        let (after, _) = train(&ds, &config).unwrap();
        let l0 = evaluate_episode_loss(&before, &probe).unwrap().total;
        let l1 = evaluate_episode_loss(&after, &probe).unwrap().total;
        assert!(l1 < l0, "seed {seed}: probe loss {l0} -> {l1}");
    }
}

//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The benchmark checks train six full-size models (two variants plus the
//! remaining vector-grid rows) and the determinism check trains them all a
//! second time, so this target takes well over an hour on one core.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use common::{directional_difference, relative_error};
use fss::ablation::{run_ablation, AblationTable, Grid};
use fss::episodes::{
    generate_synthetic_dataset, sample_episode, Dataset, Episode, Side, SyntheticConfig,
};
use fss::inference::{
    average_fuse, cgm_confidence, cgm_fuse, evaluate, fuse_with_confidences, iou, segment_one_shot,
    Fusion, MetricAccumulator, MetricsReport, ModelPredictor, Protocol, Segmenter,
};
use fss::network::{mask_from_probs, ArchConfig, Model, Variant};
use fss::numerics::{Mask, Tape, Tensor};
use fss::prototypes::decompose_values;
use fss::seed;
use fss::training::{episode_loss_with, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runtime bounds are part of several criteria, so the tests run one at a
/// time on a single core.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance {id:>2}] {verdict}  {name}: {}\n",
        detail.as_ref()
    );
    // Written past the test harness capture so every line shows up in the log.
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random mask whose foreground probability is itself drawn from `density`.
fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: std::ops::Range<f64>) -> Mask {
    let p = rng.random_range(density);
    Mask::from_fn(h, w, |_, _| rng.random_bool(p))
}

#[test]
fn acceptance_01_02_decomposition_identity_and_partition() {
    let _serial = serial();
    let start = Instant::now();
    let mut rng = rng(101);
    let (mut worst, mut partition_ok, mut trials) = (0.0f64, true, 0);
    while trials < 1000 {
        let f = Tensor::from_fn3(8, 8, 16, |_, _, _| rng.random_range(-1.0..1.0));
        let m_s = random_mask(&mut rng, 8, 8, 0.1..0.9);
        let m_hat = random_mask(&mut rng, 8, 8, 0.1..0.9);
        let sv = decompose_values(&f, &m_s, &m_hat).unwrap();
        if sv.n_pri == 0 || sv.n_aux == 0 {
            continue;
        }
        trials += 1;
        for c in 0..16 {
            let lhs = sv.n_pri as f64 * sv.v_pri.data()[c] + sv.n_aux as f64 * sv.v_aux.data()[c];
            let rhs = sv.n_fg as f64 * sv.v_s.data()[c];
            worst = worst.max(relative_error(lhs, rhs, f64::MIN_POSITIVE));
        }
        let (pri, aux) = (sv.primary_mask.as_slice(), sv.auxiliary_mask.as_slice());
        for i in 0..64 {
            let (p, a, s) = (pri[i] as u8, aux[i] as u8, m_s.as_slice()[i] as u8);
            partition_ok &= p & a == 0 && p | a == s;
        }
        partition_ok &= sv.n_pri + sv.n_aux == sv.n_fg;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass1 = worst < 1e-6 && secs < 5.0;
    report(
        1,
        "decomposition identity",
        pass1,
        format!("1000 trials, worst relative error {worst:.2e}, {secs:.2}s"),
    );
    report(
        2,
        "partition property",
        partition_ok,
        "primary and auxiliary masks disjoint, union equals support mask",
    );
    assert!(pass1 && partition_ok);
}

#[test]
fn acceptance_03_gradient_check() {
    let _serial = serial();
    let start = Instant::now();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(6, 8, 32, 303)).unwrap();
    let episode = sample_episode(&ds, Side::Train, 1, 1, 17).unwrap();
    let model = Model::new(ArchConfig::default(), Variant::sgm(), 3).unwrap();

    // The predicted support mask is piecewise constant in the weights; hold it
    // at its value for the unperturbed weights.
    let fixed = {
        let mut tape = Tape::frozen(model.params());
        let support = &episode.support[0];
        let pass = model
            .support_pass(&mut tape, &support.image, &support.mask)
            .unwrap();
        mask_from_probs(tape.value(pass.initial.unwrap().probs))
    };
    let loss_at = |m: &Model| {
        let mut tape = Tape::frozen(m.params());
        episode_loss_with(m, &mut tape, &episode, Some(&fixed))
            .unwrap()
            .breakdown
            .total
    };
    let grads: Vec<Vec<f64>> = {
        let mut tape = Tape::with_params(model.params());
        let loss = episode_loss_with(&model, &mut tape, &episode, Some(&fixed)).unwrap();
        let g = tape.backward(loss.total).unwrap();
        let mut by_id = vec![Vec::new(); model.params().len()];
        for (id, v) in g.params() {
            by_id[id.index()] = v.to_vec();
        }
        by_id
    };

    // Worst probe at `step`: (relative error, description, probe count).
    let check = |step: f64| {
        let mut worst = (0.0f64, String::new());
        let mut probes_run = 0;
        for (idx, param) in model.params().iter().enumerate() {
            let id = model.params().ids().nth(idx).unwrap();
            let g = &grads[idx];
            assert_eq!(g.len(), param.value.len(), "{} has no gradient", param.name);
            let base = param.value.data().to_vec();
            let eval = |x: &[f64]| {
                let mut m = model.clone();
                m.params_mut().get_mut(id).value =
                    Tensor::new(param.value.shape().to_vec(), x.to_vec()).unwrap();
                loss_at(&m)
            };
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut probes: Vec<(String, Vec<f64>, f64)> = Vec::new();
            if norm > 0.0 {
                let dir: Vec<f64> = g.iter().map(|v| v / norm).collect();
                probes.push(("gradient direction".into(), dir, norm));
            }
            let top = (0..g.len())
                .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
                .unwrap();
            let mut unit = vec![0.0; g.len()];
            unit[top] = 1.0;
            probes.push((format!("entry {top}"), unit, g[top]));
            for (what, dir, analytic) in probes {
                let numeric = directional_difference(&base, &dir, step, eval);
                let err = relative_error(analytic, numeric, f64::MIN_POSITIVE);
                probes_run += 1;
                if err > worst.0 {
                    worst = (
                        err,
                        format!(
                            "{} {what}: analytic {analytic:.6e} numeric {numeric:.6e}",
                            param.name
                        ),
                    );
                }
            }
        }
        (worst.0, worst.1, probes_run)
    };
    let (worst, at, checks) = check(1e-3);
    let (fine, _, _) = check(1e-6);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    report(
        3,
        "gradient check",
        pass,
        format!(
            "{} parameter tensors, {checks} probes at step 1e-3, worst relative error {worst:.2e} ({at}); \
             at step 1e-6 worst {fine:.2e}; {secs:.1}s",
            model.params().len(),
        ),
    );
    assert!(pass);
}

/// Logit map of each support for the first query.
fn support_logits(model: &Model, episode: &Episode) -> Vec<Tensor> {
    let q = model.prepare_query(&episode.query[0].image).unwrap();
    episode
        .support
        .iter()
        .map(|s| model.score(&model.prepare_support(s).unwrap(), &q).unwrap())
        .collect()
}

#[test]
fn acceptance_04_fusion_invariances() {
    let _serial = serial();
    let ds = generate_synthetic_dataset(&SyntheticConfig::new(6, 16, 32, 404)).unwrap();
    let model = Model::new(ArchConfig::default(), Variant::sgm(), 4).unwrap();
    let mut rng = rng(404);

    let mut same_k1 = 0;
    for i in 0..100 {
        let ep = sample_episode(&ds, Side::Test, 1, 1, seed::derive(404, &[1, i])).unwrap();
        let (fused, _) = cgm_fuse(&model, &ep.support, &ep.query[0].image).unwrap();
        let single = segment_one_shot(&model, &ep.support[0], &ep.query[0].image).unwrap();
        same_k1 += usize::from(fused.mask == single.mask);
    }

    let (mut equal_weights_ok, mut scaling_ok) = (0, 0);
    let trials = 20usize;
    for i in 0..trials as u64 {
        let ep = sample_episode(&ds, Side::Test, 5, 1, seed::derive(404, &[2, i])).unwrap();
        let logits = support_logits(&model, &ep);
        let c = rng.random_range(0.05..1.0);
        let forced = fuse_with_confidences(&logits, &[c; 5]).unwrap();
        let avg = average_fuse(&model, &ep.support, &ep.query[0].image).unwrap();
        equal_weights_ok += usize::from(forced.mask == avg.mask);

        let u = cgm_confidence(&model, &ep.support).unwrap();
        let reference = fuse_with_confidences(&logits, &u).unwrap().mask;
        let unchanged = [0.1, 1.0, 10.0].iter().all(|&s| {
            let scaled: Vec<Tensor> = logits.iter().map(|l| l.map(|v| s * v)).collect();
            fuse_with_confidences(&scaled, &u).unwrap().mask == reference
        });
        scaling_ok += usize::from(unchanged);
    }
    let pass = same_k1 == 100 && equal_weights_ok == trials && scaling_ok == trials;
    report(
        4,
        "fusion invariances",
        pass,
        format!(
            "K=1 equals 1-shot {same_k1}/100, equal confidences equal average {equal_weights_ok}/{trials}, \
             logit scaling invariant {scaling_ok}/{trials}"
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_05_metric_oracle() {
    let _serial = serial();
    let mut rng = rng(505);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
        let pairs: Vec<(u32, Mask, Mask)> = (0..rng.random_range(1..12))
            .map(|_| {
                let class = rng.random_range(0..4);
                let pred = random_mask(&mut rng, h, w, 0.0..1.0);
                let truth = random_mask(&mut rng, h, w, 0.0..1.0);
                (class, pred, truth)
            })
            .collect();

        let mut acc = MetricAccumulator::default();
        for (c, p, t) in &pairs {
            acc.add(*c, p, t).unwrap();
        }

        // Brute-force pixel counting.
        let mut per_class: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        let (mut fg, mut bg) = ((0u64, 0u64), (0u64, 0u64));
        for (c, p, t) in &pairs {
            let e = per_class.entry(*c).or_default();
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (p.get(y, x), t.get(y, x));
                    if a && b {
                        e.0 += 1;
                        fg.0 += 1;
                    }
                    if a || b {
                        e.1 += 1;
                        fg.1 += 1;
                    }
                    if !a && !b {
                        bg.0 += 1;
                    }
                    if !a || !b {
                        bg.1 += 1;
                    }
                }
            }
        }
        let ratio = |(i, u): (u64, u64)| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        let class_ious: Vec<f64> = per_class.values().map(|&iu| ratio(iu)).collect();
        let miou = class_ious.iter().sum::<f64>() / class_ious.len() as f64;
        let fb = (ratio(fg) + ratio(bg)) / 2.0;

        worst = worst
            .max((acc.mean_iou() - miou).abs())
            .max((acc.fb_iou() - fb).abs());
        for (c, &(i, u)) in &per_class {
            worst = worst.max((acc.class_iou()[c] - ratio((i, u))).abs());
        }
        let (p, t) = (&pairs[0].1, &pairs[0].2);
        let (mut i, mut u) = (0u64, 0u64);
        for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
            i += u64::from(*a && *b);
            u += u64::from(*a || *b);
        }
        worst = worst.max((iou(p, t).unwrap() - ratio((i, u))).abs());
    }
    let pass = worst <= 1e-12;
    report(
        5,
        "metric oracle",
        pass,
        format!("50 mask sets, worst deviation {worst:.2e}"),
    );
    assert!(pass);
}

const DATA_SEED: u64 = 1;
const TRAIN_SEED: u64 = 0;

fn benchmark_data() -> Dataset {
    generate_synthetic_dataset(&SyntheticConfig::new(6, 40, 64, DATA_SEED)).unwrap()
}

fn test_protocol() -> Protocol {
    Protocol {
        side: Side::Test,
        shots: 1,
        queries: 1,
        episodes: 200,
        seeds: vec![0, 1, 2],
        jobs: 1,
    }
}

struct Run {
    model: Model,
    report: MetricsReport,
    seconds: f64,
}

fn train_and_evaluate(ds: &Dataset, variant: Variant) -> Run {
    let start = Instant::now();
    let config = TrainConfig {
        variant,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let (model, _) = train(ds, &config).unwrap();
    let predictor = ModelPredictor {
        segmenter: &model,
        fusion: Fusion::Average,
    };
    let report = evaluate(&predictor, ds, &test_protocol()).unwrap();
    Run {
        model,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Robustness {
    lowest_is_corrupted: usize,
    miou_cgm: f64,
    miou_avg: f64,
}

fn robustness(model: &Model, ds: &Dataset) -> Robustness {
    let (mut lowest, mut cgm, mut avg) = (
        0,
        MetricAccumulator::default(),
        MetricAccumulator::default(),
    );
    for i in 0..100 {
        let mut ep = sample_episode(ds, Side::Test, 5, 1, seed::derive(707, &[i])).unwrap();
        let bad = (i % 5) as usize;
        ep.support[bad].mask = ep.support[bad].mask.inverted();
        let query = &ep.query[0];
        let (fused, u) = cgm_fuse(model, &ep.support, &query.image).unwrap();
        let strictly_lowest = u.iter().enumerate().all(|(k, &v)| k == bad || v > u[bad]);
        lowest += usize::from(strictly_lowest);
        cgm.add(ep.class_id, &fused.mask, &query.mask).unwrap();
        let plain = average_fuse(model, &ep.support, &query.image).unwrap();
        avg.add(ep.class_id, &plain.mask, &query.mask).unwrap();
    }
    Robustness {
        lowest_is_corrupted: lowest,
        miou_cgm: cgm.mean_iou(),
        miou_avg: avg.mean_iou(),
    }
}

fn self_support(model: &Model, ds: &Dataset) -> f64 {
    let total: f64 = (0..20)
        .map(|i| {
            let ep = sample_episode(ds, Side::Test, 1, 1, seed::derive(808, &[i])).unwrap();
            let q = &ep.query[0];
            let seg = segment_one_shot(model, q, &q.image).unwrap();
            iou(&seg.mask, &q.mask).unwrap()
        })
        .sum();
    total / 20.0
}

struct Benchmark {
    sgm: Run,
    baseline: Run,
    robustness: Robustness,
    self_support: f64,
    vectors: AblationTable,
}

impl Benchmark {
    fn run() -> Benchmark {
        let ds = benchmark_data();
        let sgm = train_and_evaluate(&ds, Variant::sgm());
        let baseline = train_and_evaluate(&ds, Variant::baseline());
        let robustness = robustness(&sgm.model, &ds);
        let self_support = self_support(&sgm.model, &ds);
        let base = TrainConfig {
            seed: TRAIN_SEED,
            ..TrainConfig::default()
        };
        let vectors = run_ablation(Grid::Vectors, &ds, &base, &test_protocol(), |config| {
            if config.variant == Variant::sgm() {
                return Ok(sgm.model.clone());
            }
            Ok(train(&ds, config)?.0)
        })
        .unwrap();
        Benchmark {
            sgm,
            baseline,
            robustness,
            self_support,
            vectors,
        }
    }

    /// Every reported number, bit patterns included.
    fn numbers(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for (name, r) in [
            ("sgm", &self.sgm.report),
            ("baseline", &self.baseline.report),
        ] {
            out.push((format!("{name} mIoU"), r.miou.to_bits()));
            out.push((format!("{name} FB-IoU"), r.fb_iou.to_bits()));
            for (c, v) in &r.per_class_iou {
                out.push((format!("{name} class {c}"), v.to_bits()));
            }
        }
        out.push((
            "robustness lowest".into(),
            self.robustness.lowest_is_corrupted as u64,
        ));
        out.push(("robustness cgm".into(), self.robustness.miou_cgm.to_bits()));
        out.push(("robustness avg".into(), self.robustness.miou_avg.to_bits()));
        out.push(("self-support".into(), self.self_support.to_bits()));
        for row in &self.vectors.rows {
            out.push((format!("ablation {} mIoU", row.label), row.miou.to_bits()));
            out.push((
                format!("ablation {} FB-IoU", row.label),
                row.fb_iou.to_bits(),
            ));
        }
        out
    }
}

fn benchmark() -> &'static Benchmark {
    static FIRST: OnceLock<Benchmark> = OnceLock::new();
    FIRST.get_or_init(Benchmark::run)
}

#[test]
fn acceptance_06_self_guidance_beats_baseline() {
    let _serial = serial();
    let b = benchmark();
    let (s, base) = (&b.sgm, &b.baseline);
    let gain = s.report.miou - base.report.miou;
    let pass = gain > 0.0 && s.seconds < 900.0 && base.seconds < 900.0;
    report(
        6,
        "self-guided vs baseline",
        pass,
        format!(
            "mIoU sgm {:.4} ({:.0}s) vs baseline {:.4} ({:.0}s), gain {gain:+.4}",
            s.report.miou, s.seconds, base.report.miou, base.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_07_cross_guidance_robustness() {
    let _serial = serial();
    let r = &benchmark().robustness;
    let pass_a = r.lowest_is_corrupted >= 90;
    let pass_b = r.miou_cgm >= r.miou_avg;
    report(
        7,
        "cross-guided fusion with one inverted support",
        pass_a && pass_b,
        format!(
            "corrupted support lowest in {}/100, mIoU cgm {:.4} vs avg {:.4}",
            r.lowest_is_corrupted, r.miou_cgm, r.miou_avg
        ),
    );
    assert!(pass_a && pass_b);
}

#[test]
fn acceptance_08_self_support() {
    let _serial = serial();
    let v = benchmark().self_support;
    let pass = v >= 0.7;
    report(
        8,
        "support equals query",
        pass,
        format!("mean IoU {v:.4} over 20 episodes"),
    );
    assert!(pass);
}

#[test]
fn acceptance_09_vector_ablation() {
    let _serial = serial();
    let t = &benchmark().vectors;
    let aux = t.row("v_aux").unwrap().miou;
    let both = t.row("v_pri+v_aux").unwrap().miou;
    let best = t.best_rows();
    let pass = aux < both && best.contains(&"v_pri+v_aux");
    let rows: Vec<String> = t
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.label, r.miou))
        .collect();
    report(
        9,
        "vector ablation",
        pass,
        format!("{}; best: {}", rows.join(", "), best.join(" and ")),
    );
    assert!(pass);
}

#[test]
fn acceptance_10_determinism() {
    let _serial = serial();
    let first = benchmark().numbers();
    let second = Benchmark::run().numbers();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty();
    report(
        10,
        "determinism",
        pass,
        format!(
            "{} numbers repeated, {} differ {:?}",
            first.len(),
            differing.len(),
            differing
        ),
    );
    assert!(pass);
}

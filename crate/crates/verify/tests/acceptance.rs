//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::time::Instant;

use calibseg::distlambda::{squared_edt_opposite, LambdaMap, LambdaParams};
use calibseg::losses::{self, loss_landscape, LossMasks};
use calibseg::metrics::{ece, paired_permutation_test, tace, CalibrationInput, DEFAULT_BINS, DEFAULT_TACE_THRESHOLD};
use calibseg::model::UNetConfig;
use calibseg::synthdata::{dataset_sample, Sample, SceneSpec};
use calibseg::trainer::{evaluate_samples, evaluate_soft_oracle, train_on, Method, TrainConfig};
use calibseg::transforms::{equivariant_forward, GeometricParams, IntensityParams, View};
use calibseg::metrics::{ImageMetrics, MetricsReport};
use calibseg::{rng, LabelMap, Result, Tape, Var};
use common::oracles::{brute_sq_edt, naive_ece, naive_tace, random_mask, random_prediction};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let (mut prim, mut loss, mut net) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        prim = common::primitive_errors(seed).into_iter().fold(prim, |m, (_, e)| m.max(e));
        loss = common::loss_errors(seed).into_iter().fold(loss, |m, (_, e)| m.max(e));
        net = common::unet_errors(seed).into_iter().fold(net, |m, (_, e)| m.max(e));
    }
    outcome(
        prim < 1e-3 && loss < 1e-3 && net < 1e-2,
        format!("20 seeds, worst relative error: primitives {prim:.1e}, losses {loss:.1e}, 16x16 U-Net {net:.1e}"),
    )
}

fn edt() -> Outcome {
    let mut r = rng::stream(2024, &[0xed7]);
    let mut mismatches = 0;
    for _ in 0..200 {
        let mask = random_mask(&mut r, 16, 16);
        let fast = squared_edt_opposite(&mask, 16, 16);
        mismatches += fast
            .iter()
            .zip(brute_sq_edt(&mask, 16, 16))
            .filter(|(f, b)| b.map_or(f.is_finite(), |d| **f != d as f64))
            .count();
    }
    outcome(mismatches == 0, format!("200 random 16x16 masks, {mismatches} mismatching pixels"))
}

fn closed_form() -> Outcome {
    let p = LambdaParams::default();
    let cases = [(0.0, 1.01), (5.0, 0.51), (10.0, 0.01), (12.5, 0.01), (40.0, 0.01)];
    let worst = cases.iter().map(|&(r, want)| (p.weight(r) - want).abs()).fold(0.0, f64::max);
    outcome(worst < 1e-12, format!("worst deviation {worst:.1e}"))
}

fn small_data() -> (Vec<Sample>, Vec<Sample>) {
    let spec = SceneSpec { height: 16, width: 16, semi_axis: calibseg::transforms::Range::new(2.0, 5.0), ..SceneSpec::default() };
    let train = (0..6).map(|i| dataset_sample(5, 0, i, &spec).unwrap()).collect();
    let val = (0..2).map(|i| dataset_sample(5, 1, i, &spec).unwrap()).collect();
    (train, val)
}

fn degeneracy() -> Outcome {
    let mut r = rng::stream(4, &[0xde9]);
    let (n, c, h, w) = (2, 3, 12, 10);
    let (mut ce_gap, mut const_gap) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let labels: Vec<LabelMap> = (0..n)
            .map(|_| LabelMap::new(h, w, c, (0..h * w).map(|_| r.random_range(0..c as u8)).collect()).unwrap())
            .collect();
        let mask: Vec<bool> = (0..n * h * w).map(|_| r.random_bool(0.85)).collect();
        let (ta, tb) = (common::normal_tensor(&mut r, &[n, c, h, w], 2.0), common::normal_tensor(&mut r, &[n, c, h, w], 2.0));
        let masks = LossMasks { supervised: Some(&mask), consistency: Some(&mask) };
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(ta), tape.leaf(tb));
        let cr0 = losses::cr_total(&mut tape, a, b, &labels, 0.0, masks).unwrap();
        let (ce, _) = losses::cross_entropy(&mut tape, a, &labels, Some(&mask)).unwrap();
        ce_gap = ce_gap.max((tape.scalar(cr0.total) - tape.scalar(ce)).abs());
        let lambda = r.random_range(0.0..5.0);
        let maps: Vec<LambdaMap> = (0..n).map(|_| LambdaMap::constant(h, w, lambda)).collect();
        let refs: Vec<&LambdaMap> = maps.iter().collect();
        let cr = losses::cr_total(&mut tape, a, b, &labels, lambda, masks).unwrap();
        let bw = losses::bwcr_total(&mut tape, a, b, &labels, &refs, masks).unwrap();
        const_gap = const_gap.max((tape.scalar(cr.total) - tape.scalar(bw.total)).abs());
    }
    let (train, val) = small_data();
    let base = TrainConfig {
        seed: 2,
        iterations: 8,
        batch_size: 2,
        lr_start: 1e-3,
        lr_end: 1e-4,
        validation_interval: 4,
        model: UNetConfig { base_width: 4, ..UNetConfig::default() },
        ..TrainConfig::default()
    };
    let da = train_on(&TrainConfig { method: Method::Da, ..base.clone() }, &train, &val).unwrap();
    let cr = train_on(&TrainConfig { method: Method::Cr, lambda: 0.0, ..base }, &train, &val).unwrap();
    let iter_gap = da
        .log
        .iterations
        .iter()
        .zip(&cr.log.iterations)
        .map(|(x, y)| (x.total - y.total).abs())
        .fold(0.0, f64::max);
    outcome(
        ce_gap < 1e-7 && const_gap < 1e-6 && iter_gap < 1e-7,
        format!("cr(0) vs ce {ce_gap:.1e}, bwcr(const) vs cr {const_gap:.1e}, da vs cr(0) per iteration {iter_gap:.1e}"),
    )
}

fn landscape() -> Outcome {
    let l = loss_landscape(-5.0, 5.0, 201, 1.0).unwrap();
    let n = l.n();
    let diagonal = (0..n).all(|i| l.lc[i * n + i] == 0.0);
    let off = (0..n * n).filter(|j| j / n != j % n).all(|j| l.lc[j] > 0.0);
    let decreasing = (0..n - 1).all(|i| (0..n).all(|k| l.ls[(i + 1) * n + k] < l.ls[i * n + k]));
    let (iz, izp) = l.argmin_total();
    let corner = iz + 1 >= n - 1 && izp + 1 >= n - 1;
    outcome(
        diagonal && off && decreasing && corner,
        format!(
            "lc zero on diagonal {diagonal}, positive off it {off}, ls decreasing {decreasing}, argmin at z = {}, z' = {}",
            l.z[iz], l.z[izp]
        ),
    )
}

fn equivariance() -> Outcome {
    let (h, w) = (20, 18);
    let mut worst = 0.0f32;
    for seed in 0..20 {
        let mut r = rng::stream(seed, &[0xe9]);
        let k1 = common::normal_tensor(&mut r, &[4, 1, 3, 3], 0.5);
        let b1 = common::normal_tensor(&mut r, &[4], 0.1);
        let k2 = common::normal_tensor(&mut r, &[3, 4, 3, 3], 0.5);
        let b2 = common::normal_tensor(&mut r, &[3], 0.1);
        let net = |tape: &mut Tape, x: Var| -> Result<Var> {
            let (k1, b1, k2, b2) = (tape.leaf(k1.clone()), tape.leaf(b1.clone()), tape.leaf(k2.clone()), tape.leaf(b2.clone()));
            let y = tape.conv2d(x, k1, b1, 1)?;
            let y = tape.relu(y);
            tape.conv2d(y, k2, b2, 1)
        };
        let image = common::normal_tensor(&mut r, &[1, h, w], 1.0);
        let (tx, ty) = (r.random_range(-4i32..=4), r.random_range(-4i32..=4));
        let view = View {
            intensity: IntensityParams::IDENTITY,
            geometric: GeometricParams::about_center(0.0, 1.0, tx as f64, ty as f64, h, w).unwrap(),
        };
        let mut tape = Tape::new();
        let (moved, _) = equivariant_forward(&mut tape, net, &[image.clone()], &[view]).unwrap();
        let plain = tape.leaf(image.reshape(&[1, 1, h, w]).unwrap());
        let direct = net(&mut tape, plain).unwrap();
        let margin = 2 + tx.unsigned_abs().max(ty.unsigned_abs()) as usize;
        let (a, b) = (tape.value(moved).data(), tape.value(direct).data());
        for c in 0..3 {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let j = c * h * w + y * w + x;
                    worst = worst.max((a[j] - b[j]).abs());
                }
            }
        }
    }
    outcome(worst < 1e-5, format!("20 random translations, worst interior difference {worst:.1e}"))
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(77, &[0xece]);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (probs, labels) = random_prediction(&mut r);
        let input = CalibrationInput::new(&probs, &labels).unwrap();
        worst = worst.max((ece(&input, DEFAULT_BINS) - naive_ece(&probs, &labels, DEFAULT_BINS)).abs());
        let t = tace(&input, DEFAULT_BINS, DEFAULT_TACE_THRESHOLD);
        let oracle = naive_tace(&probs, &labels, DEFAULT_BINS, DEFAULT_TACE_THRESHOLD).unwrap_or(0.0);
        worst = worst.max((t.value - oracle).abs());
    }
    let a: Vec<f64> = (0..20).map(|_| r.random_range(0.0..1.0)).collect();
    let p_same = paired_permutation_test(&a, &a, 10_000, &mut r).unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let b: Vec<f64> = a.iter().map(|x| x + 10.0 + noise.sample(&mut r)).collect();
    let p_shift = paired_permutation_test(&a, &b, 10_000, &mut r).unwrap();
    outcome(
        worst < 1e-9 && p_same == 1.0 && p_shift <= 0.001,
        format!("worst ECE/TACE deviation {worst:.1e}, p identical {p_same}, p shifted {p_shift:.1e}"),
    )
}

/// Desk-scale training settings shared by the trend criteria.
fn trend_config(method: Method, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        lambda,
        seed,
        iterations: 2000,
        batch_size: 4,
        lr_start: 2e-3,
        lr_end: 2e-6,
        ema_decay: 0.99,
        model: UNetConfig { base_width: 8, ..UNetConfig::default() },
        ..TrainConfig::default()
    }
}

const TREND_SEEDS: u64 = 3;
const DATA_SEED: u64 = 100;

struct Trend {
    oracle: MetricsReport,
    /// Per method: one test report per seed.
    da: Vec<MetricsReport>,
    cr: Vec<MetricsReport>,
    bwcr: Vec<MetricsReport>,
    cr10: Vec<MetricsReport>,
    minutes: f64,
}

fn run_trend() -> Trend {
    let start = Instant::now();
    let spec = SceneSpec::default();
    let split = |s: usize, n: usize| -> Vec<Sample> { (0..n).map(|i| dataset_sample(DATA_SEED, s, i, &spec).unwrap()).collect() };
    let (train, val, test) = (split(0, 200), split(1, 20), split(2, 100));
    let run = |method, lambda, seed| {
        let config = trend_config(method, lambda, seed);
        let out = train_on(&config, &train, &val).unwrap();
        let mut report = evaluate_samples(&config.model, &out.best, &test).unwrap();
        report.seed = seed;
        let agg = report.aggregate();
        println!("  trend seed {seed} {method} lambda {lambda}: dice {:.4} ece {:.4} tace {:.4}", agg.dice.mean, agg.ece.mean, agg.tace.mean);
        report
    };
    let mut t = Trend {
        oracle: evaluate_soft_oracle(&test).unwrap(),
        da: Vec::new(),
        cr: Vec::new(),
        bwcr: Vec::new(),
        cr10: Vec::new(),
        minutes: 0.0,
    };
    for seed in 0..TREND_SEEDS {
        t.da.push(run(Method::Da, 0.0, seed));
        t.cr.push(run(Method::Cr, 1.0, seed));
        t.bwcr.push(run(Method::Bwcr, 1.0, seed));
        t.cr10.push(run(Method::Cr, 10.0, seed));
    }
    t.minutes = start.elapsed().as_secs_f64() / 60.0;
    t
}

fn mean_of(reports: &[MetricsReport], pick: impl Fn(&ImageMetrics) -> f64) -> f64 {
    let values: Vec<f64> = reports.iter().flat_map(|r| r.rows.iter().map(&pick)).collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn trend_order(t: &Trend) -> Outcome {
    let ece = |r: &[MetricsReport]| mean_of(r, |m| m.ece);
    let dice = |r: &[MetricsReport]| mean_of(r, |m| m.mean_dice());
    let pooled = |r: &[MetricsReport]| -> Vec<f64> { r.iter().flat_map(|x| x.rows.iter().map(|m| m.ece)).collect() };
    let p = paired_permutation_test(&pooled(&t.bwcr), &pooled(&t.da), 10_000, &mut rng::stream(8, &[])).unwrap();
    let (e_da, e_cr, e_bw) = (ece(&t.da), ece(&t.cr), ece(&t.bwcr));
    let (d_da, d_bw) = (dice(&t.da), dice(&t.bwcr));
    // the permutation test is two-sided, so significance only counts as an improvement
    let checks = [e_cr < e_da, e_bw <= e_cr, p < 0.05 && e_bw < e_da, d_bw >= d_da - 0.03, t.minutes <= 20.0];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "ECE da {e_da:.4} cr {e_cr:.4} bwcr {e_bw:.4}, p(bwcr vs da) {p:.4}, Dice da {d_da:.4} bwcr {d_bw:.4}, {:.1} min; checks {checks:?}",
            t.minutes
        ),
    )
}

fn over_regularization(t: &Trend) -> Outcome {
    let (d1, d10) = (mean_of(&t.cr, |m| m.mean_dice()), mean_of(&t.cr10, |m| m.mean_dice()));
    outcome(d10 < d1, format!("Dice cr(1) {d1:.4}, cr(10) {d10:.4}"))
}

fn oracle_sanity(t: &Trend) -> Outcome {
    let (o, da) = (t.oracle.aggregate().ece.mean, mean_of(&t.da, |m| m.ece));
    outcome(o < da, format!("ECE soft-label oracle {o:.4}, da {da:.4}"))
}

fn report(failed: &mut Vec<u32>, id: u32, name: &str, o: Outcome) {
    println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        failed.push(id);
    }
}

fn main() {
    let _ = calibseg::configure_threads();
    let properties: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "gradients match finite differences", gradients),
        (2, "distance transform is exact", edt),
        (3, "weight closed form", closed_form),
        (4, "degeneracy chain", degeneracy),
        (5, "loss landscape structure", landscape),
        (6, "translation equivariance", equivariance),
        (7, "metric oracles and permutation test", metric_oracles),
    ];
    let mut failed = Vec::new();
    let start = Instant::now();
    for (id, name, check) in properties {
        report(&mut failed, id, name, check());
    }
    let property_secs = start.elapsed().as_secs_f64();
    println!("property suites took {property_secs:.1} s (limit 120 s)");
    if property_secs >= 120.0 {
        println!("property suites exceeded their time limit");
        failed.push(0);
    }

    let trend = run_trend();
    report(&mut failed, 8, "calibration trend", trend_order(&trend));
    report(&mut failed, 9, "over-regularization lowers Dice", over_regularization(&trend));
    report(&mut failed, 10, "soft-label oracle beats da on ECE", oracle_sanity(&trend));

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

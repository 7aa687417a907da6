//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use efumi_bcg::commands::{detect, evaluate, train};
use efumi_bcg::config::RunConfig;
use efumi_bcg::em;
use efumi_bcg::model::{
    expected_objective, gamma_terms, instance_weights, ConceptModel, EmConfig, ProportionMatrix,
    TrainingSet,
};
use efumi_bcg::signal::BandPass;
use efumi_bcg::synth::generate;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} [{verdict}] {name}: {detail}");
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn best_shift_cosine(a: &[f64], b: &[f64], max_shift: i64) -> f64 {
    let n = a.len() as i64;
    (-max_shift..=max_shift)
        .map(|s| {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let j = i + s;
                if (0..n).contains(&j) {
                    let (x, y) = (a[i as usize], b[j as usize]);
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
            }
            ab / (aa * bb).sqrt()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

// ---------------------------------------------------------------- criterion 1

struct RandomProblem {
    set: TrainingSet,
    cfg: EmConfig,
}

/// Small MIL problem: negatives mix `m` random sources, a third of the
/// positive-bag points also carry a random target.
fn random_problem(seed: u64) -> RandomProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let d = rng.random_range(2..=8);
    let m = rng.random_range(1..=3);
    let sources: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let target: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mix = |rng: &mut ChaCha8Rng, with_target: bool| -> Vec<f64> {
        let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let t = if with_target { rng.random_range(0.3..0.8) } else { 0.0 };
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v *= (1.0 - t) / s);
        (0..d)
            .map(|j| {
                t * target[j]
                    + (0..m).map(|k| w[k] * sources[k][j]).sum::<f64>()
                    + 0.05 * rng.random_range(-1.0..1.0)
            })
            .collect()
    };
    let n_bags = rng.random_range(3..=6);
    let mut positive = Vec::new();
    let mut total = 0;
    for _ in 0..n_bags {
        let size = rng.random_range(2..=4);
        let bag: Vec<Vec<f64>> = (0..size).map(|j| mix(&mut rng, j == 0)).collect();
        total += size;
        positive.push(bag);
    }
    let n_neg = rng.random_range(6..=(40 - total).min(16));
    let negatives: Vec<Vec<f64>> = (0..n_neg).map(|_| mix(&mut rng, false)).collect();
    let set = TrainingSet::from_points(positive, negatives).unwrap();
    let cfg = EmConfig {
        m_init: m,
        seed,
        max_iters: 25,
        ..EmConfig::default()
    };
    RandomProblem { set, cfg }
}

/// Per-row expected objective as a quadratic `½ pᵀQp + cᵀp`, rebuilt from
/// the objective definition: `P0` weights the background-only residual,
/// `P1` the residual with the target, both scaled by `(1−u)·w/2`.
fn row_quadratic(
    x: &[f64],
    model: &ConceptModel,
    w: f64,
    p_z1: f64,
    gamma: &[f64],
    u: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = model.n_background() + 1;
    let s = (1.0 - u) * w;
    let p_z0 = 1.0 - p_z1;
    let concept = |k: usize| -> &[f64] {
        if k == 0 {
            &model.target
        } else {
            &model.background[k - 1]
        }
    };
    let mut q = vec![0.0; n * n];
    let mut c = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            // e_T only appears in the z=1 residual.
            let weight = if a == 0 || b == 0 { p_z1 } else { p_z0 + p_z1 };
            q[a * n + b] = s * weight * dot(concept(a), concept(b));
        }
        let weight = if a == 0 { p_z1 } else { p_z0 + p_z1 };
        c[a] = -s * weight * dot(concept(a), x) + if a == 0 { 0.0 } else { gamma[a - 1] };
    }
    (q, c)
}

fn quad(q: &[f64], c: &[f64], p: &[f64]) -> f64 {
    let n = p.len();
    let mut f = dot(c, p);
    for a in 0..n {
        for b in 0..n {
            f += 0.5 * p[a] * q[a * n + b] * p[b];
        }
    }
    f
}

/// Minimum of `½ pᵀQp + cᵀp` over the simplex grid with spacing `1/k`.
/// The last coordinate is implied; the innermost coordinate is stepped with
/// exact second differences so each grid point costs two additions.
fn grid_min(q: &[f64], c: &[f64], k: usize) -> f64 {
    let n = c.len();
    let h = 1.0 / k as f64;
    match n {
        1 => quad(q, c, &[1.0]),
        _ => {
            let mut best = f64::INFINITY;
            let mut prefix = vec![0usize; n.saturating_sub(2)];
            loop {
                let used: usize = prefix.iter().sum();
                if used <= k {
                    // Walk p[n-2] from 0 to k-used with p[n-1] the remainder.
                    let rest = k - used;
                    let mut p: Vec<f64> = prefix.iter().map(|&v| v as f64 * h).collect();
                    p.push(0.0);
                    p.push(rest as f64 * h);
                    let mut f = quad(q, c, &p);
                    let mut dir = vec![0.0; n];
                    dir[n - 2] = h;
                    dir[n - 1] = -h;
                    let curv = quad(q, &vec![0.0; n], &dir) * 2.0;
                    let grad = |p: &[f64]| -> f64 {
                        (0..n)
                            .map(|a| {
                                dir[a] * (c[a] + (0..n).map(|b| q[a * n + b] * p[b]).sum::<f64>())
                            })
                            .sum()
                    };
                    let mut delta = grad(&p) + 0.5 * curv;
                    best = best.min(f);
                    for _ in 0..rest {
                        f += delta;
                        delta += curv;
                        best = best.min(f);
                    }
                }
                // Next prefix (odometer over the leading coordinates).
                let mut i = 0;
                loop {
                    if i == prefix.len() {
                        return best;
                    }
                    prefix[i] += 1;
                    if prefix.iter().sum::<usize>() <= k {
                        break;
                    }
                    prefix[i] = 0;
                    i += 1;
                }
            }
        }
    }
}

#[test]
fn criterion_1_em_correctness_properties() {
    const SLACK: f64 = 1e-9;
    const GRID: usize = 1000;
    let start = Instant::now();
    let mut worst_increase = f64::NEG_INFINITY;
    let mut worst_simplex = 0.0f64;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut grid_rows = 0;
    for seed in 0..20 {
        let RandomProblem { set, cfg } = random_problem(seed);
        assert!(set.n() <= 40 && set.d() <= 8 && cfg.m_init <= 3);
        let (mut model, mut p) = em::initialize(&set, &cfg).unwrap();
        let weights = instance_weights(&set, cfg.alpha).unwrap();
        for iteration in 0..cfg.max_iters {
            let gamma = gamma_terms(&p, cfg.gamma);
            let post = em::e_step(&set, &model, &p, cfg.beta).unwrap();
            let f0 = expected_objective(&set, &model, &p, &post, &gamma, &cfg).unwrap();
            let next = em::m_step_concepts(&set, &p, &post, &cfg).unwrap();
            let f1 = expected_objective(&set, &next, &p, &post, &gamma, &cfg).unwrap();
            let p_next = em::m_step_proportions(&set, &next, &post, &p, &gamma, &cfg).unwrap();
            let f2 = expected_objective(&set, &next, &p_next, &post, &gamma, &cfg).unwrap();
            worst_increase = worst_increase.max(f1 - f0).max(f2 - f1);

            for row in p_next.rows() {
                let sum: f64 = row.iter().sum();
                let neg = row.iter().fold(0.0f64, |a, &v| a.max(-v));
                worst_simplex = worst_simplex.max((sum - 1.0).abs()).max(neg);
            }

            // Brute-force the first and last positive-bag rows and the first
            // negative row on the first and last iterations.
            if iteration == 0 || iteration + 1 == cfg.max_iters {
                let first_pos = (0..set.n()).find(|&i| set.is_positive(i)).unwrap();
                let last_pos = (0..set.n()).rfind(|&i| set.is_positive(i)).unwrap();
                let first_neg = (0..set.n()).find(|&i| !set.is_positive(i)).unwrap();
                for i in [first_pos, last_pos, first_neg] {
                    let (q, c) =
                        row_quadratic(set.point(i), &next, weights[i], post.p_z1(i), &gamma, cfg.u);
                    let row = p_next.row(i);
                    let (q, c, row) = if set.is_positive(i) {
                        (q, c, row.to_vec())
                    } else {
                        let n = c.len();
                        let qb: Vec<f64> = (1..n)
                            .flat_map(|a| (1..n).map(move |b| (a, b)))
                            .map(|(a, b)| q[a * n + b])
                            .collect();
                        (qb, c[1..].to_vec(), row[1..].to_vec())
                    };
                    let solved = quad(&q, &c, &row);
                    let brute = grid_min(&q, &c, GRID);
                    worst_gap = worst_gap.max(solved - brute);
                    grid_rows += 1;
                }
            }
            model = next;
            p = p_next;
        }
        p.validate(&set).unwrap();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_increase <= SLACK && worst_simplex <= 1e-9 && worst_gap <= 1e-5 && elapsed < 30.0;
    report(
        1,
        "EM correctness properties",
        pass,
        &format!(
            "max M-step increase {worst_increase:.2e}, max simplex violation {worst_simplex:.2e}, \
             max QP-minus-grid gap {worst_gap:.2e} over {grid_rows} rows, {elapsed:.1} s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_concept_recovery() {
    let mut worst = f64::INFINITY;
    let mut slowest = 0.0f64;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let profile = cfg.synth.profile(seed).unwrap();
        let rec = generate(&profile, 300.0, seed).unwrap().recording;
        let start = Instant::now();
        let out = train(&rec, &cfg).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let cos = best_shift_cosine(&out.model.concepts.target, &profile.template, 5);
        worst = worst.min(cos);
        details.push(format!("seed {seed}: {cos:.3}"));
    }
    let pass = worst >= 0.95 && slowest < 120.0;
    report(
        2,
        "concept recovery",
        pass,
        &format!(
            "aligned cosine ({}), minimum {worst:.3}, slowest training {slowest:.1} s",
            details.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Heart-rate MAE on the last three minutes of a ten-minute recording after
/// training on its first `minutes`.
fn held_out_mae(seed: u64, minutes: f64) -> f64 {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let rec = generate(&cfg.synth.profile(seed).unwrap(), 600.0, seed)
        .unwrap()
        .recording;
    let model = train(&rec.slice(0.0, minutes * 60.0).unwrap(), &cfg).unwrap().model;
    let test = rec.slice(420.0, 600.0).unwrap();
    let det = detect(&test, &model, &cfg).unwrap();
    evaluate(&test, &det, &cfg).unwrap().rate.mean_abs_error
}

#[test]
fn criterion_3_training_length_trend() {
    let (mut sum1, mut sum5, mut worst5) = (0.0, 0.0, 0.0f64);
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let (one, five) = (held_out_mae(seed, 1.0), held_out_mae(seed, 5.0));
        sum1 += one;
        sum5 += five;
        worst5 = worst5.max(five);
        details.push(format!("seed {seed}: {one:.2} -> {five:.2}"));
    }
    let (mean1, mean5) = (sum1 / 5.0, sum5 / 5.0);
    let pass = mean5 <= mean1 && worst5 <= 2.0;
    report(
        3,
        "training-length trend",
        pass,
        &format!(
            "MAE bpm 1 min -> 5 min ({}), mean {mean1:.2} -> {mean5:.2}, worst 5-min {worst5:.2}",
            details.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

/// Low-noise recording with every transducer intact.
fn clean_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.synth.noise_sigma = 0.02;
    cfg.synth.dropout = "none".into();
    cfg
}

#[test]
fn criterion_4_detection_quality() {
    let (mut worst_auc, mut worst_sens, mut worst_fp) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let cfg = clean_config(seed);
        let rec = generate(&cfg.synth.profile(seed).unwrap(), 480.0, seed)
            .unwrap()
            .recording;
        let model = train(&rec.slice(0.0, 300.0).unwrap(), &cfg).unwrap().model;
        let test = rec.slice(300.0, 480.0).unwrap();
        let det = detect(&test, &model, &cfg).unwrap();
        let ev = evaluate(&test, &det, &cfg).unwrap();
        let (auc, sens, fp) = (ev.roc.auc, ev.beats.sensitivity(), ev.false_per_minute());
        worst_auc = worst_auc.min(auc);
        worst_sens = worst_sens.min(sens);
        worst_fp = worst_fp.max(fp);
        details.push(format!("seed {seed}: AUC {auc:.3}, sens {sens:.3}, fp/min {fp:.2}"));
    }
    let pass = worst_auc >= 0.90 && worst_sens >= 0.95 && worst_fp <= 5.0;
    report(4, "detection quality", pass, &details.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_e_step_rows() {
    let set = TrainingSet::from_points(
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]],
        vec![vec![3.0, 3.0]],
    )
    .unwrap();
    // Backgrounds reproduce instance 0 exactly and miss instance 1 by a
    // squared distance of 0.2.
    let model = ConceptModel::new(
        vec![9.0, 9.0],
        vec![vec![1.0, 0.0], vec![0.0, 1.0 + 0.2f64.sqrt()]],
    )
    .unwrap();
    let p = ProportionMatrix::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.5, 0.25, 0.25],
        vec![0.0, 0.5, 0.5],
    ])
    .unwrap();
    let post = em::e_step(&set, &model, &p, 5.0).unwrap();
    let negative = (0..set.n()).find(|&i| !set.is_positive(i)).unwrap();
    let exact_fit = (0..set.n())
        .find(|&i| set.is_positive(i) && set.point(i) == [1.0, 0.0])
        .unwrap();
    let residual = (0..set.n())
        .find(|&i| set.is_positive(i) && set.point(i) == [0.0, 1.0])
        .unwrap();
    let e1 = (-1.0f64).exp();
    let checks = [
        post.p_z1(negative) == 0.0,
        post.p_z0(exact_fit) == 1.0,
        (post.p_z0(residual) - e1).abs() <= 1e-12,
        (post.p_z1(residual) - (1.0 - e1)).abs() <= 1e-12,
    ];
    let pass = checks.iter().all(|&c| c);
    report(
        5,
        "E-step rows",
        pass,
        &format!(
            "negative P_z1={}, exact fit P_z0={}, residual 0.2 P_z0={:.15} (e^-1={e1:.15})",
            post.p_z1(negative),
            post.p_z0(exact_fit),
            post.p_z0(residual)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 6

/// Instances mixing two background sources; a third of the positive-bag
/// points also carry the target.
fn two_source_problem(seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let d = 10;
    let sources: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let target: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let point = |rng: &mut ChaCha8Rng, t: f64| -> Vec<f64> {
        let a: f64 = rng.random_range(0.0..1.0) * (1.0 - t);
        (0..d)
            .map(|j| {
                t * target[j] + a * sources[0][j] + (1.0 - t - a) * sources[1][j]
                    + 0.01 * rng.random_range(-1.0..1.0)
            })
            .collect()
    };
    let positive: Vec<Vec<Vec<f64>>> = (0..20)
        .map(|_| {
            (0..3)
                .map(|j| {
                    let t = if j == 0 { rng.random_range(0.4..0.9) } else { 0.0 };
                    point(&mut rng, t)
                })
                .collect()
        })
        .collect();
    let negatives: Vec<Vec<f64>> = (0..100).map(|_| point(&mut rng, 0.0)).collect();
    TrainingSet::from_points(positive, negatives).unwrap()
}

#[test]
fn criterion_6_pruning() {
    let mut pruned_seeds = 0;
    let mut details = Vec::new();
    let mut rows_ok = true;
    for seed in 0..5 {
        let set = two_source_problem(seed);
        let cfg = EmConfig {
            m_init: 3,
            tau: 1e-6,
            seed,
            ..EmConfig::default()
        };
        let fit = em::fit(&set, &cfg).unwrap();
        let m = fit.model.n_background();
        if m < 3 {
            pruned_seeds += 1;
        }
        rows_ok &= fit.p.validate(&set).is_ok()
            && fit
                .p
                .rows()
                .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && r.iter().all(|&v| v >= 0.0));
        details.push(format!("seed {seed}: M={m}"));
    }
    let pass = pruned_seeds >= 4 && rows_ok;
    report(
        6,
        "pruning",
        pass,
        &format!(
            "pruned in {pruned_seeds}/5 seeds ({}), rows on simplex: {rows_ok}",
            details.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 7

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_efumi-bcg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        status.status.success(),
        "efumi-bcg {args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn run_chain(dir: &Path) {
    let common = [
        "--seed",
        "7",
        "--set",
        "synth.duration=240",
        "--set",
        "evaluation.rate_window=30",
    ];
    let run = |step: &[&str]| {
        let args: Vec<&str> = step.iter().chain(common.iter()).copied().collect();
        run_cli(dir, &args);
    };
    run(&["synth", "--out", "rec.csv"]);
    run(&["train", "--recording", "rec.csv", "--model", "model.txt", "--to", "150"]);
    run(&[
        "detect", "--recording", "rec.csv", "--model", "model.txt", "--out", "det", "--from", "150",
    ]);
    run(&[
        "eval", "--detections", "det", "--recording", "rec.csv", "--out", "eval", "--from", "150",
    ]);
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for rel in [
        "rec.csv",
        "rec.gt.csv",
        "model.txt",
        "det/confidence.csv",
        "det/beats.csv",
        "det/rate.csv",
        "eval/roc.csv",
        "eval/report.txt",
    ] {
        out.push((rel.to_string(), std::fs::read(dir.join(rel)).expect(rel)));
    }
    out
}

#[test]
fn criterion_7_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_chain(a.path());
    run_chain(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = differing.is_empty();
    report(
        7,
        "determinism",
        pass,
        &format!(
            "{} artifacts compared, differing: {:?}",
            fa.len(),
            differing
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

/// Frequency in `[lo, hi]` where the gain crosses `1/√2`, by bisection.
fn crossing(bp: &BandPass, mut lo: f64, mut hi: f64) -> f64 {
    let target = 0.5f64.sqrt();
    let rising = bp.gain(lo) < bp.gain(hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (bp.gain(mid) < target) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn criterion_8_filter_cutoffs() {
    let bp = BandPass::design(0.4, 10.0, 100.0).unwrap();
    let centre = (0.4f64 * 10.0).sqrt();
    let low = crossing(&bp, 0.01, centre);
    let high = crossing(&bp, centre, 49.9);
    let pass = (low / 0.4 - 1.0).abs() <= 0.1 && (high / 10.0 - 1.0).abs() <= 0.1;
    report(
        8,
        "band-pass 3 dB points",
        pass,
        &format!("lower {low:.6} Hz, upper {high:.6} Hz"),
    );
    assert!(pass);
}

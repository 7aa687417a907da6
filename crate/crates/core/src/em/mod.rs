//! eFUMI expectation-maximization.
//!
//! Each iteration computes instance posteriors from the background-only
//! reconstruction, then minimizes the expected objective block-wise: first
//! exactly over all concepts (a shared `(M+1)×(M+1)` linear system per
//! coordinate), then exactly over each instance's proportion row (a simplex
//! QP), and finally prunes background concepts that no instance uses.

pub mod simplex_qp;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    axpy, expected_objective, gamma_terms, instance_weights, sq_dist, ConceptModel, EmConfig,
    Posterior, ProportionMatrix, TrainingSet,
};
use crate::parallel::map_indexed;

const KMEANS_ITERS: usize = 10;
const RIDGE_FACTOR: f64 = 1e-10;
/// Relative slack when asserting that an M-step did not increase the objective.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Expected objective around the two M-steps of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepObjectives {
    pub before: f64,
    pub after_concepts: f64,
    pub after_proportions: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ConceptModel,
    pub p: ProportionMatrix,
    /// Expected objective after each iteration's proportion update.
    pub objective_trace: Vec<f64>,
    pub steps: Vec<StepObjectives>,
    pub iterations: usize,
    /// `(iteration, background index at the time of pruning)`.
    pub pruned_history: Vec<(usize, usize)>,
    pub converged: bool,
}

/// Posterior of each positive-bag instance containing the target:
/// `P(z=0) = exp(−β‖x − Σ_k p_k e_k‖²)`. Negative-bag instances get `P(z=1) = 0`.
pub fn e_step(
    set: &TrainingSet,
    model: &ConceptModel,
    p: &ProportionMatrix,
    beta: f64,
) -> Result<Posterior> {
    let p_z0 = (0..set.n())
        .map(|i| {
            if !set.is_positive(i) {
                return 1.0;
            }
            let bg = model.background_mix(p.row(i));
            let r = sq_dist(set.point(i), &bg);
            // exp underflows to exactly 0 for large residuals.
            (-beta * r).exp()
        })
        .collect();
    Posterior::from_p_z0(p_z0)
}

/// Exact minimizer of the expected objective over all concepts with
/// proportions and posteriors held fixed.
pub fn m_step_concepts(
    set: &TrainingSet,
    p: &ProportionMatrix,
    post: &Posterior,
    cfg: &EmConfig,
) -> Result<ConceptModel> {
    let width = p.width();
    let d = set.d();
    let w = instance_weights(set, cfg.alpha)?;
    let u = cfg.u;

    // Per-instance coefficients on x_i in the normal equations.
    let mut gram = DMatrix::<f64>::identity(width, width) * u;
    let mut coef = vec![0.0; set.n() * width];
    for i in 0..set.n() {
        let row = p.row(i);
        let c1 = (1.0 - u) * w[i] * post.p_z1(i);
        let c0 = (1.0 - u) * w[i] * post.p_z0(i);
        for a in 0..width {
            for b in 0..width {
                let mut v = (c1 + c0) * row[a] * row[b];
                if a == 0 || b == 0 {
                    v = c1 * row[a] * row[b];
                }
                gram[(a, b)] += v;
            }
        }
        let b = &mut coef[i * width..(i + 1) * width];
        b[0] = c1 * row[0];
        for k in 1..width {
            b[k] = (c1 + c0) * row[k];
        }
    }

    let chol = match Cholesky::new(gram.clone()) {
        Some(c) => c,
        None => {
            log::warn!("concept Gram matrix is singular; adding a ridge");
            let ridge = RIDGE_FACTOR * gram.trace().max(1.0);
            let g = gram + DMatrix::identity(width, width) * ridge;
            Cholesky::new(g).ok_or_else(|| Error::Numerical("concept Gram matrix".into()))?
        }
    };

    let mu0 = set.mu0();
    let rows: Vec<Vec<f64>> = map_indexed(cfg.execution, d, |r| {
        let mut rhs = DVector::from_element(width, u * mu0[r]);
        for i in 0..set.n() {
            let x = set.point(i)[r];
            for k in 0..width {
                rhs[k] += x * coef[i * width + k];
            }
        }
        chol.solve(&rhs).iter().copied().collect()
    });

    let target = rows.iter().map(|r| r[0]).collect();
    let background = (1..width)
        .map(|k| rows.iter().map(|r| r[k]).collect())
        .collect();
    ConceptModel::new(target, background)
}

/// Gram matrix of the stacked concepts (target first), row-major.
fn concept_gram(model: &ConceptModel) -> Vec<f64> {
    let width = model.n_background() + 1;
    let mut g = vec![0.0; width * width];
    for a in 0..width {
        for b in a..width {
            let v = crate::model::dot(model.concept(a), model.concept(b));
            g[a * width + b] = v;
            g[b * width + a] = v;
        }
    }
    g
}

/// Per-instance quadratic `½pᵀQp + cᵀp` (constant dropped) of the expected
/// objective in the proportion row.
pub(crate) fn row_quadratic(
    x: &[f64],
    model: &ConceptModel,
    gram: &[f64],
    weight: f64,
    p_z1: f64,
    gamma: &[f64],
    u: f64,
) -> (Vec<f64>, Vec<f64>) {
    let width = model.n_background() + 1;
    let scale = (1.0 - u) * weight;
    let mut q = vec![0.0; width * width];
    for a in 0..width {
        for b in 0..width {
            let f = if a == 0 || b == 0 { p_z1 } else { 1.0 };
            q[a * width + b] = scale * f * gram[a * width + b];
        }
    }
    let mut c = vec![0.0; width];
    c[0] = -scale * p_z1 * crate::model::dot(&model.target, x);
    for k in 1..width {
        c[k] = -scale * crate::model::dot(model.concept(k), x) + gamma[k - 1];
    }
    (q, c)
}

/// Exact minimizer of the expected objective over each proportion row on
/// the simplex, warm-started from `p_prev`. Negative-bag rows keep a zero
/// target weight.
pub fn m_step_proportions(
    set: &TrainingSet,
    model: &ConceptModel,
    post: &Posterior,
    p_prev: &ProportionMatrix,
    gamma: &[f64],
    cfg: &EmConfig,
) -> Result<ProportionMatrix> {
    let width = model.n_background() + 1;
    if p_prev.width() != width || gamma.len() + 1 != width {
        return Err(Error::DimensionMismatch {
            what: "proportion width",
            index: 0,
            expected: width,
            got: p_prev.width(),
        });
    }
    let w = instance_weights(set, cfg.alpha)?;
    let gram = concept_gram(model);
    let rows: Vec<Vec<f64>> = map_indexed(cfg.execution, set.n(), |i| {
        let (q, c) = row_quadratic(set.point(i), model, &gram, w[i], post.p_z1(i), gamma, cfg.u);
        let prev = p_prev.row(i);
        if set.is_positive(i) {
            simplex_qp::solve(&q, &c, prev).x
        } else {
            // Background coordinates only.
            let m = width - 1;
            let qb: Vec<f64> = (1..width)
                .flat_map(|a| (1..width).map(move |b| (a, b)))
                .map(|(a, b)| q[a * width + b])
                .collect();
            let sol = simplex_qp::solve(&qb, &c[1..], &prev[1..]);
            let mut row = Vec::with_capacity(m + 1);
            row.push(0.0);
            row.extend(sol.x);
            row
        }
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(ProportionMatrix::from_flat(width, flat))
}

/// Removes background concepts whose largest proportion is at most `tau`
/// and renormalizes the surviving rows. The target is never pruned, and at
/// least `min_background` concepts (by column sum) always survive.
pub fn prune(
    model: &ConceptModel,
    p: &ProportionMatrix,
    tau: f64,
    min_background: usize,
) -> (ConceptModel, ProportionMatrix, Vec<usize>) {
    let m = model.n_background();
    let mut dead: Vec<usize> = (0..m).filter(|&k| p.column_max(k + 1) <= tau).collect();
    let survivors = m - dead.len();
    if survivors < min_background && !dead.is_empty() {
        log::warn!("pruning would leave {survivors} background concepts; keeping the most used");
        let keep = (min_background - survivors).min(dead.len());
        // Largest use first; ties keep the lower index.
        dead.sort_by(|&a, &b| {
            p.column_sum(b + 1)
                .total_cmp(&p.column_sum(a + 1))
                .then(a.cmp(&b))
        });
        dead.drain(..keep);
        dead.sort_unstable();
    }
    if dead.is_empty() {
        return (model.clone(), p.clone(), dead);
    }
    let keep_cols: Vec<usize> = std::iter::once(0)
        .chain((0..m).filter(|k| !dead.contains(k)).map(|k| k + 1))
        .collect();
    let background = (0..m)
        .filter(|k| !dead.contains(k))
        .map(|k| model.background[k].clone())
        .collect();
    let width = keep_cols.len();
    let mut flat = Vec::with_capacity(p.n_rows() * width);
    for row in p.rows() {
        let kept: Vec<f64> = keep_cols.iter().map(|&c| row[c]).collect();
        let s: f64 = kept.iter().sum();
        flat.extend(kept.iter().map(|v| v / s));
    }
    let model = ConceptModel {
        target: model.target.clone(),
        background,
    };
    (model, ProportionMatrix::from_flat(width, flat), dead)
}

/// Seeded k-means centroids of the negative-bag instances.
fn kmeans(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = if n >= k {
        sample(rng, n, k).into_iter().map(|i| points[i].to_vec()).collect()
    } else {
        log::warn!("only {n} negative instances for {k} background concepts; sampling with replacement");
        (0..k).map(|_| points[rng.random_range(0..n)].to_vec()).collect()
    };
    let d = points[0].len();
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for x in points {
            let nearest = (0..k)
                .min_by(|&a, &b| sq_dist(x, &centroids[a]).total_cmp(&sq_dist(x, &centroids[b])))
                .unwrap_or(0);
            axpy(1.0, x, &mut sums[nearest]);
            counts[nearest] += 1;
        }
        for ((c, s), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *c = s.into_iter().map(|v| v / count as f64).collect();
            }
        }
    }
    centroids
}

/// Initial concepts and proportions.
///
/// The target starts at `μ0 + (mean of positive-bag instances − mean of
/// negative-bag instances)`, the backgrounds at k-means centroids of the
/// negative bag, and every row at the barycentre of its allowed simplex.
pub fn initialize(set: &TrainingSet, cfg: &EmConfig) -> Result<(ConceptModel, ProportionMatrix)> {
    set.ensure_trainable()?;
    let d = set.d();
    let mean_of = |pts: Vec<&[f64]>| {
        let mut m = vec![0.0; d];
        for x in &pts {
            axpy(1.0 / pts.len() as f64, x, &mut m);
        }
        m
    };
    let negatives: Vec<&[f64]> = set.negative_points().collect();
    let mean_pos = mean_of(set.positive_points().collect());
    let mean_neg = mean_of(negatives.clone());
    let target: Vec<f64> = set
        .mu0()
        .iter()
        .zip(mean_pos.iter().zip(&mean_neg))
        .map(|(m, (a, b))| m + a - b)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let background = kmeans(&negatives, cfg.m_init, &mut rng);

    let m = cfg.m_init;
    let mut flat = Vec::with_capacity(set.n() * (m + 1));
    for i in 0..set.n() {
        if set.is_positive(i) {
            flat.extend(std::iter::repeat_n(1.0 / (m + 1) as f64, m + 1));
        } else {
            flat.push(0.0);
            flat.extend(std::iter::repeat_n(1.0 / m as f64, m));
        }
    }
    Ok((
        ConceptModel::new(target, background)?,
        ProportionMatrix::from_flat(m + 1, flat),
    ))
}

fn stacked_change(old: &ConceptModel, new: &ConceptModel) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for k in 0..=old.n_background() {
        diff += sq_dist(old.concept(k), new.concept(k));
        norm += crate::model::dot(old.concept(k), old.concept(k));
    }
    (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
}

fn check_monotone(stage: &str, iteration: usize, before: f64, after: f64) -> Result<()> {
    if after > before + MONOTONE_SLACK * before.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "{stage} increased the expected objective at iteration {iteration}: {before} -> {after}"
        )));
    }
    Ok(())
}

/// Runs the full EM loop.
pub fn fit(set: &TrainingSet, cfg: &EmConfig) -> Result<FitResult> {
    cfg.validate()?;
    set.ensure_trainable()?;
    if cfg.min_background == 0 {
        return Err(Error::Config("min_background must be at least 1".into()));
    }
    let (mut model, mut p) = initialize(set, cfg)?;
    let mut result = FitResult {
        model: model.clone(),
        p: p.clone(),
        objective_trace: Vec::new(),
        steps: Vec::new(),
        iterations: 0,
        pruned_history: Vec::new(),
        converged: false,
    };

    for iteration in 1..=cfg.max_iters {
        let gamma = gamma_terms(&p, cfg.gamma);
        let post = e_step(set, &model, &p, cfg.beta)?;
        let before = expected_objective(set, &model, &p, &post, &gamma, cfg)?;

        let updated = m_step_concepts(set, &p, &post, cfg)?;
        let after_concepts = expected_objective(set, &updated, &p, &post, &gamma, cfg)?;
        check_monotone("concept update", iteration, before, after_concepts)?;

        let p_new = m_step_proportions(set, &updated, &post, &p, &gamma, cfg)?;
        let after_proportions = expected_objective(set, &updated, &p_new, &post, &gamma, cfg)?;
        check_monotone("proportion update", iteration, after_concepts, after_proportions)?;

        result.steps.push(StepObjectives {
            before,
            after_concepts,
            after_proportions,
        });
        result.objective_trace.push(after_proportions);
        result.iterations = iteration;

        let change = stacked_change(&model, &updated);
        let (pruned_model, pruned_p, dead) = prune(&updated, &p_new, cfg.tau, cfg.min_background);
        for &k in &dead {
            log::debug!("iteration {iteration}: pruned background concept {k}");
            result.pruned_history.push((iteration, k));
        }
        model = pruned_model;
        p = pruned_p;
        log::trace!("iteration {iteration}: objective {after_proportions:.6e}, change {change:.3e}");
        if dead.is_empty() && change < cfg.conv_tol {
            result.converged = true;
            break;
        }
    }
    p.validate(set)?;
    result.model = model;
    result.p = p;
    Ok(result)
}

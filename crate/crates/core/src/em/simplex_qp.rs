//! Small dense convex QPs over the probability simplex:
//!
//! ```text
//! minimize ½ xᵀQx + cᵀx   subject to  x ≥ 0,  Σ x = 1
//! ```
//!
//! `Q` is symmetric positive semi-definite and small (a handful of
//! concepts). The primary solver is a primal active-set method started from
//! a feasible point, so the returned objective never exceeds the objective
//! at the start. Singular reduced Hessians are handled through their
//! eigen-decomposition: zero-curvature descent directions are followed to
//! the boundary.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub const MAX_PIVOTS: usize = 100;
const PG_MAX_ITERS: usize = 20_000;
const PG_STEP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
    /// False when the active-set method ran out of pivots and the
    /// projected-gradient fallback produced `x`.
    pub active_set: bool,
}

/// `Q` is stored row-major, `n × n`.
pub fn objective(q: &[f64], c: &[f64], x: &[f64]) -> f64 {
    let n = c.len();
    let mut v = 0.0;
    for i in 0..n {
        let qx: f64 = (0..n).map(|j| q[i * n + j] * x[j]).sum();
        v += x[i] * (0.5 * qx + c[i]);
    }
    v
}

fn gradient(q: &[f64], c: &[f64], x: &[f64]) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| (0..n).map(|j| q[i * n + j] * x[j]).sum::<f64>() + c[i])
        .collect()
}

/// Clamps negatives and rescales onto the simplex; falls back to the
/// barycentre for degenerate input.
fn feasible_start(x0: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = x0.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let s: f64 = x.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        let n = x.len() as f64;
        return vec![1.0 / n; x.len()];
    }
    if (s - 1.0).abs() > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
    }
    x
}

/// Minimizes over the simplex starting at `x0` (which is made feasible
/// first). Falls back to projected gradient after [`MAX_PIVOTS`] pivots.
pub fn solve(q: &[f64], c: &[f64], x0: &[f64]) -> QpSolution {
    let n = c.len();
    assert_eq!(q.len(), n * n, "Q must be n×n");
    assert_eq!(x0.len(), n, "start point must have length n");
    let start = feasible_start(x0);
    if n == 1 {
        return QpSolution {
            objective: objective(q, c, &start),
            x: start,
            pivots: 0,
            active_set: true,
        };
    }
    let f_start = objective(q, c, &start);
    match active_set(q, c, start.clone()) {
        Some((x, pivots)) => {
            let f = objective(q, c, &x);
            let (x, f) = if f <= f_start { (x, f) } else { (start, f_start) };
            QpSolution {
                objective: f,
                x,
                pivots,
                active_set: true,
            }
        }
        None => {
            log::warn!("simplex QP exceeded {MAX_PIVOTS} pivots; using projected gradient");
            let x = projected_gradient(q, c, start);
            QpSolution {
                objective: objective(q, c, &x).min(f_start),
                x,
                pivots: MAX_PIVOTS,
                active_set: false,
            }
        }
    }
}

enum Step {
    Newton(Vec<f64>),
    Ray(Vec<f64>),
    Stationary,
}

/// Step on the free coordinates `free` that keeps `Σ s = 0`.
fn free_step(q: &[f64], n: usize, g: &[f64], free: &[usize]) -> Step {
    let nf = free.len();
    if nf <= 1 {
        return Step::Stationary;
    }
    // Null-space basis of 1ᵀ: columns e_j − e_last.
    let last = free[nf - 1];
    let m = nf - 1;
    let qf = |a: usize, b: usize| q[a * n + b];
    let h = DMatrix::from_fn(m, m, |a, b| {
        let (i, j) = (free[a], free[b]);
        qf(i, j) - qf(i, last) - qf(last, j) + qf(last, last)
    });
    let r = DVector::from_fn(m, |a, _| g[free[a]] - g[last]);
    let eig = SymmetricEigen::new(h);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let curv_tol = 1e-12 * scale.max(1.0);
    let grad_scale = r.amax().max(1.0);
    let grad_tol = 1e-13 * grad_scale;

    let mut y = DVector::zeros(m);
    let mut ray = false;
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        let proj = v.dot(&r);
        if lambda <= curv_tol && proj.abs() > grad_tol {
            ray = true;
        }
    }
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        let proj = v.dot(&r);
        if ray {
            if lambda <= curv_tol {
                y -= v * proj;
            }
        } else if lambda > curv_tol {
            y -= v * (proj / lambda);
        }
    }
    let mut s = vec![0.0; n];
    let mut sum = 0.0;
    for a in 0..m {
        s[free[a]] = y[a];
        sum += y[a];
    }
    s[last] = -sum;
    let size = s.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if size <= 1e-15 {
        Step::Stationary
    } else if ray {
        Step::Ray(s)
    } else {
        Step::Newton(s)
    }
}

fn active_set(q: &[f64], c: &[f64], mut x: Vec<f64>) -> Option<(Vec<f64>, usize)> {
    let n = c.len();
    let mut fixed: Vec<bool> = x.iter().map(|&v| v == 0.0).collect();
    let mut f_cur = objective(q, c, &x);
    for pivot in 0..MAX_PIVOTS {
        let g = gradient(q, c, &x);
        let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
        let step = free_step(q, n, &g, &free);
        let (s, unbounded) = match step {
            Step::Stationary => {
                let lambda = free.iter().map(|&j| g[j]).sum::<f64>() / free.len() as f64;
                let gmax = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                let tol = 1e-12 * (1.0 + gmax);
                let release = (0..n)
                    .filter(|&j| fixed[j])
                    .map(|j| (j, g[j] - lambda))
                    .filter(|&(_, mu)| mu < -tol)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                match release {
                    Some((j, _)) => {
                        fixed[j] = false;
                        continue;
                    }
                    None => return Some((x, pivot)),
                }
            }
            Step::Newton(s) => (s, false),
            Step::Ray(s) => (s, true),
        };
        let mut alpha = if unbounded { f64::INFINITY } else { 1.0 };
        let mut blocking = None;
        for &j in &free {
            if s[j] < 0.0 {
                let a = x[j] / -s[j];
                if a < alpha {
                    alpha = a;
                    blocking = Some(j);
                }
            }
        }
        if !alpha.is_finite() {
            // A zero-curvature ray with Σ s = 0 always leaves the simplex.
            return None;
        }
        let mut trial = x.clone();
        for &j in &free {
            trial[j] += alpha * s[j];
        }
        if let Some(j) = blocking {
            trial[j] = 0.0;
        }
        for v in trial.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let s_sum: f64 = trial.iter().sum();
        trial.iter_mut().for_each(|v| *v /= s_sum);
        let f_trial = objective(q, c, &trial);
        if f_trial > f_cur + 1e-15 * (1.0 + f_cur.abs()) {
            // Round-off has us marginally uphill: we are at the optimum.
            return Some((x, pivot));
        }
        x = trial;
        f_cur = f_trial;
        if let Some(j) = blocking {
            fixed[j] = true;
        }
    }
    None
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projected gradient with step `1/L`; keeps the best iterate seen.
pub fn projected_gradient(q: &[f64], c: &[f64], start: Vec<f64>) -> Vec<f64> {
    let n = c.len();
    let qm = DMatrix::from_row_slice(n, n, q);
    let lipschitz = SymmetricEigen::new(qm)
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    let mut x = start;
    let mut best = x.clone();
    let mut f_best = objective(q, c, &x);
    for _ in 0..PG_MAX_ITERS {
        let g = gradient(q, c, &x);
        let y: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - gi / lipschitz).collect();
        let next = project_to_simplex(&y);
        let change = next
            .iter()
            .zip(&x)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        x = next;
        let f = objective(q, c, &x);
        if f < f_best {
            f_best = f;
            best = x.clone();
        }
        if change < PG_STEP_TOL {
            break;
        }
    }
    best
}

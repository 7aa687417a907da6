//! Domain types shared by every stage, and the eFUMI objective functions.
//!
//! Each training instance `x_i` is modelled as a convex combination of a
//! target concept `e_T` and `M` background concepts `e_k`:
//!
//! ```text
//! x_i ≈ z_i p_iT e_T + Σ_k p_ik e_k,   p_i ≥ 0,  p_iT + Σ_k p_ik = 1
//! ```
//!
//! where `z_i` is the (hidden) instance label. Proportion rows are stored
//! with the target weight in column 0 and the backgrounds in columns `1..=M`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Execution;

/// Instance length at 100 Hz (0.81 s).
pub const DEFAULT_INSTANCE_LEN: usize = 81;
/// Number of hydraulic transducers under the mattress.
pub const CHANNELS: usize = 4;

const SIMPLEX_TOL: f64 = 1e-9;
const GAMMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub samples: Vec<f64>,
    pub channel: usize,
    /// Seconds from the start of the source recording.
    pub peak_time: f64,
    pub source_id: String,
}

impl Instance {
    pub fn new(
        samples: Vec<f64>,
        channel: usize,
        peak_time: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if channel >= CHANNELS {
            return Err(Error::Data(format!("channel index {channel} out of range")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("instance sample {i}")));
        }
        Ok(Self {
            samples,
            channel,
            peak_time,
            source_id: source_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    instances: Vec<Instance>,
    label: bool,
    bag_id: usize,
}

impl Bag {
    pub fn new(instances: Vec<Instance>, label: bool, bag_id: usize) -> Result<Self> {
        let Some(first) = instances.first() else {
            return Err(Error::Data(format!("bag {bag_id} is empty")));
        };
        let d = first.dim();
        if let Some((index, inst)) = instances.iter().enumerate().find(|(_, x)| x.dim() != d) {
            return Err(Error::DimensionMismatch {
                what: "bag instance",
                index,
                expected: d,
                got: inst.dim(),
            });
        }
        Ok(Self {
            instances,
            label,
            bag_id,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn is_positive(&self) -> bool {
        self.label
    }

    pub fn bag_id(&self) -> usize {
        self.bag_id
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// All training instances flattened in bag order, with per-instance bag
/// labels and the global data mean.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    bags: Vec<Bag>,
    d: usize,
    data: Vec<f64>,
    positive: Vec<bool>,
    n_pos: usize,
    n_neg: usize,
    mu0: Vec<f64>,
}

impl TrainingSet {
    pub fn new(bags: Vec<Bag>, d: usize) -> Result<Self> {
        let mut data = Vec::new();
        let mut positive = Vec::new();
        for bag in &bags {
            for (index, inst) in bag.instances().iter().enumerate() {
                if inst.dim() != d {
                    return Err(Error::DimensionMismatch {
                        what: "training instance",
                        index,
                        expected: d,
                        got: inst.dim(),
                    });
                }
                data.extend_from_slice(&inst.samples);
                positive.push(bag.is_positive());
            }
        }
        let n = positive.len();
        if n == 0 {
            return Err(Error::Data("training set has no instances".into()));
        }
        let n_pos = positive.iter().filter(|&&p| p).count();
        let mut mu0 = vec![0.0; d];
        for row in data.chunks_exact(d) {
            for (m, v) in mu0.iter_mut().zip(row) {
                *m += v;
            }
        }
        mu0.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Self {
            bags,
            d,
            data,
            positive,
            n_pos,
            n_neg: n - n_pos,
            mu0,
        })
    }

    /// Builds a set from raw vectors: one positive bag per entry of
    /// `positive_bags`, plus a single negative bag (if non-empty).
    pub fn from_points(positive_bags: Vec<Vec<Vec<f64>>>, negatives: Vec<Vec<f64>>) -> Result<Self> {
        let d = positive_bags
            .iter()
            .flatten()
            .chain(negatives.iter())
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::Data("training set has no instances".into()))?;
        let to_instances = |pts: Vec<Vec<f64>>| -> Result<Vec<Instance>> {
            pts.into_iter()
                .map(|s| Instance::new(s, 0, 0.0, "points"))
                .collect()
        };
        let mut bags = Vec::new();
        for (j, pts) in positive_bags.into_iter().enumerate() {
            bags.push(Bag::new(to_instances(pts)?, true, j)?);
        }
        if !negatives.is_empty() {
            let id = bags.len();
            bags.push(Bag::new(to_instances(negatives)?, false, id)?);
        }
        Self::new(bags, d)
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.positive.len()
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    /// Whether instance `i` belongs to a positively labelled bag.
    pub fn is_positive(&self, i: usize) -> bool {
        self.positive[i]
    }

    pub fn negative_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points()
            .zip(&self.positive)
            .filter(|(_, &p)| !p)
            .map(|(x, _)| x)
    }

    pub fn positive_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points()
            .zip(&self.positive)
            .filter(|(_, &p)| p)
            .map(|(x, _)| x)
    }

    pub(crate) fn ensure_trainable(&self) -> Result<()> {
        if self.n_pos == 0 {
            return Err(Error::NoPositiveBags);
        }
        if self.n_neg == 0 {
            return Err(Error::NoNegativeInstances);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    pub target: Vec<f64>,
    pub background: Vec<Vec<f64>>,
}

impl ConceptModel {
    pub fn new(target: Vec<f64>, background: Vec<Vec<f64>>) -> Result<Self> {
        let model = Self { target, background };
        model.validate()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    /// Number of background concepts `M`.
    pub fn n_background(&self) -> usize {
        self.background.len()
    }

    /// Concept `k` in proportion-column order: 0 is the target.
    pub fn concept(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.target
        } else {
            &self.background[k - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (index, e) in self.background.iter().enumerate() {
            if e.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "background concept",
                    index,
                    expected: d,
                    got: e.len(),
                });
            }
        }
        for k in 0..=self.n_background() {
            if self.concept(k).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("concept {k}")));
            }
        }
        Ok(())
    }

    /// Background reconstruction `Σ_k p_k e_k` for a full proportion row.
    pub(crate) fn background_mix(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (e, &p) in self.background.iter().zip(&row[1..]) {
            axpy(p, e, &mut out);
        }
        out
    }
}

/// Convex weights per instance; column 0 holds the target proportion.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionMatrix {
    width: usize,
    values: Vec<f64>,
}

impl ProportionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(Error::Data("proportion matrix needs at least one column".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * width);
        for (index, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    what: "proportion row",
                    index,
                    expected: width,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(Self { width, values })
    }

    pub(crate) fn from_flat(width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len() % width, 0);
        Self { width, values }
    }

    /// `M + 1`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width)
    }

    pub fn column_sum(&self, k: usize) -> f64 {
        self.rows().map(|r| r[k]).sum()
    }

    pub fn column_max(&self, k: usize) -> f64 {
        self.rows().map(|r| r[k]).fold(0.0, f64::max)
    }

    /// Checks the simplex constraints on every row and that negative-bag
    /// instances carry no target weight.
    pub fn validate(&self, set: &TrainingSet) -> Result<()> {
        if self.n_rows() != set.n() {
            return Err(Error::DimensionMismatch {
                what: "proportion rows",
                index: 0,
                expected: set.n(),
                got: self.n_rows(),
            });
        }
        for (i, row) in self.rows().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Numerical(format!("proportion row {i} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numerical(format!("proportion row {i} sums to {s}")));
            }
            if !set.is_positive(i) && row[0] != 0.0 {
                return Err(Error::Numerical(format!(
                    "negative-bag instance {i} has target proportion {}",
                    row[0]
                )));
            }
        }
        Ok(())
    }
}

/// eFUMI hyper-parameters. Defaults are `u=0.05, M=3, Γ=0.1, α=1.5, β=5,
/// τ=1e-6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Weight of the shrinkage toward the global mean.
    pub u: f64,
    /// Initial number of background concepts.
    pub m_init: usize,
    /// Sparsity scale `Γ`.
    pub gamma: f64,
    /// Positive-bag weight factor.
    pub alpha: f64,
    /// E-step scale.
    pub beta: f64,
    /// Prune threshold on the maximum proportion of a background concept.
    pub tau: f64,
    pub max_iters: usize,
    /// Relative Frobenius change of the stacked concepts that ends the loop.
    pub conv_tol: f64,
    /// Pruning never reduces `M` below this.
    pub min_background: usize,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            u: 0.05,
            m_init: 3,
            gamma: 0.1,
            alpha: 1.5,
            beta: 5.0,
            tau: 1e-6,
            max_iters: 200,
            conv_tol: 1e-6,
            min_background: 1,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.u > 0.0 && self.u < 1.0) {
            return bad("u must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if self.m_init == 0 {
            return bad("m_init must be at least 1");
        }
        if !(self.conv_tol >= 0.0) {
            return bad("conv_tol must be non-negative");
        }
        Ok(())
    }
}

/// Per-instance posterior of containing the target, `P(z_i = 1 | x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    p_z0: Vec<f64>,
}

impl Posterior {
    pub fn from_p_z0(p_z0: Vec<f64>) -> Result<Self> {
        if let Some(i) = p_z0.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numerical(format!("posterior {i} outside [0, 1]")));
        }
        Ok(Self { p_z0 })
    }

    /// Hard labels: `P(z_i = 1) = 1` where `z[i]` is true.
    pub fn hard(z: &[bool]) -> Self {
        Self {
            p_z0: z.iter().map(|&zi| if zi { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.p_z0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_z0.is_empty()
    }

    pub fn p_z0(&self, i: usize) -> f64 {
        self.p_z0[i]
    }

    pub fn p_z1(&self, i: usize) -> f64 {
        1.0 - self.p_z0[i]
    }
}

/// `z·p_T·e_T + Σ_k p_k e_k`.
pub fn reconstruct(row: &[f64], model: &ConceptModel, z: bool) -> Result<Vec<f64>> {
    let width = model.n_background() + 1;
    if row.len() != width {
        return Err(Error::DimensionMismatch {
            what: "proportion row",
            index: 0,
            expected: width,
            got: row.len(),
        });
    }
    model.validate()?;
    let mut out = model.background_mix(row);
    if z {
        axpy(row[0], &model.target, &mut out);
    }
    Ok(out)
}

/// `w_i = α N⁻/N⁺` for positive-bag instances and 1 elsewhere.
pub fn instance_weights(set: &TrainingSet, alpha: f64) -> Result<Vec<f64>> {
    if set.n_pos() == 0 {
        return Err(Error::NoPositiveBags);
    }
    let w_pos = alpha * set.n_neg() as f64 / set.n_pos() as f64;
    Ok((0..set.n())
        .map(|i| if set.is_positive(i) { w_pos } else { 1.0 })
        .collect())
}

/// `γ_k = Γ / Σ_i p_ik` over the background columns of the previous
/// proportions. Vanishing column sums are floored at 1e-12.
pub fn gamma_terms(p_prev: &ProportionMatrix, gamma: f64) -> Vec<f64> {
    (1..p_prev.width())
        .map(|k| gamma / p_prev.column_sum(k).max(GAMMA_FLOOR))
        .collect()
}

fn check_shapes(set: &TrainingSet, model: &ConceptModel, p: &ProportionMatrix) -> Result<()> {
    model.validate()?;
    if model.dim() != set.d() {
        return Err(Error::DimensionMismatch {
            what: "concept dimension",
            index: 0,
            expected: set.d(),
            got: model.dim(),
        });
    }
    if p.n_rows() != set.n() || p.width() != model.n_background() + 1 {
        return Err(Error::DimensionMismatch {
            what: "proportion matrix",
            index: 0,
            expected: model.n_background() + 1,
            got: p.width(),
        });
    }
    Ok(())
}

/// Residual sums `(‖x − B p‖², ‖x − p_T e_T − B p‖²)` for one instance.
pub(crate) fn residual_pair(x: &[f64], row: &[f64], model: &ConceptModel) -> (f64, f64) {
    let bg = model.background_mix(row);
    let mut r0 = 0.0;
    let mut r1 = 0.0;
    for ((&xv, &b), &t) in x.iter().zip(&bg).zip(&model.target) {
        let a = xv - b;
        let c = a - row[0] * t;
        r0 += a * a;
        r1 += c * c;
    }
    (r0, r1)
}

fn shrinkage_and_sparsity(
    set: &TrainingSet,
    model: &ConceptModel,
    p: &ProportionMatrix,
    gamma: &[f64],
    u: f64,
) -> Result<f64> {
    if gamma.len() != model.n_background() {
        return Err(Error::DimensionMismatch {
            what: "gamma terms",
            index: 0,
            expected: model.n_background(),
            got: gamma.len(),
        });
    }
    let shrink: f64 = (0..=model.n_background())
        .map(|k| sq_dist(model.concept(k), set.mu0()))
        .sum();
    let sparsity: f64 = gamma
        .iter()
        .enumerate()
        .map(|(k, g)| g * p.column_sum(k + 1))
        .sum();
    let v = 0.5 * u * shrink + sparsity;
    if !v.is_finite() {
        return Err(Error::NonFinite("shrinkage/sparsity terms".into()));
    }
    Ok(v)
}

/// Expected complete-data objective under the posteriors `post`:
///
/// ```text
/// ½(1−u) Σ_i w_i Σ_z P(z_i=z) ‖x_i − z p_iT e_T − Σ_k p_ik e_k‖²
///   + ½u Σ_{k=T,1..M} ‖e_k − μ0‖² + Σ_k γ_k Σ_i p_ik
/// ```
pub fn expected_objective(
    set: &TrainingSet,
    model: &ConceptModel,
    p: &ProportionMatrix,
    post: &Posterior,
    gamma: &[f64],
    cfg: &EmConfig,
) -> Result<f64> {
    check_shapes(set, model, p)?;
    if post.len() != set.n() {
        return Err(Error::DimensionMismatch {
            what: "posterior",
            index: 0,
            expected: set.n(),
            got: post.len(),
        });
    }
    let w = instance_weights(set, cfg.alpha)?;
    let mut fit = 0.0;
    for i in 0..set.n() {
        let (r0, r1) = residual_pair(set.point(i), p.row(i), model);
        let term = w[i] * (post.p_z0(i) * r0 + post.p_z1(i) * r1);
        if !term.is_finite() {
            return Err(Error::NonFinite(format!("residual term of instance {i}")));
        }
        fit += term;
    }
    Ok(0.5 * (1.0 - cfg.u) * fit + shrinkage_and_sparsity(set, model, p, gamma, cfg.u)?)
}

/// Complete-data objective for known instance labels `z`.
pub fn complete_objective(
    set: &TrainingSet,
    model: &ConceptModel,
    p: &ProportionMatrix,
    z: &[bool],
    gamma: &[f64],
    cfg: &EmConfig,
) -> Result<f64> {
    check_shapes(set, model, p)?;
    let w = instance_weights(set, cfg.alpha)?;
    let mut fit = 0.0;
    for i in 0..set.n() {
        let recon = reconstruct(p.row(i), model, z[i])?;
        fit += w[i] * sq_dist(set.point(i), &recon);
    }
    if !fit.is_finite() {
        return Err(Error::NonFinite("residual terms".into()));
    }
    Ok(0.5 * (1.0 - cfg.u) * fit + shrinkage_and_sparsity(set, model, p, gamma, cfg.u)?)
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

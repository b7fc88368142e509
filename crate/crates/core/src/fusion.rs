//! Fusion of output distributions in relative space.
//!
//! Each model's distribution `p` over its own vocabulary is mapped to
//! `r = p · M`, where `M` is that model's normalized relative matrix. The
//! per-model images are averaged, and the average is pulled back into the
//! main model's vocabulary by projected gradient descent on
//! `KL(r_avg || p' · M)`.

use crate::error::{Error, Result};
use crate::relspace::RelativeMatrix;

/// Floor applied inside logarithms and denominators.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_EARLY_STOP: f64 = 1e-9;
pub const DEFAULT_ETA: f64 = 0.1;
pub const DEFAULT_STEPS: usize = 5;

const SIMPLEX_TOL: f64 = 1e-6;

/// A model's output distribution over its own vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteDistribution {
    values: Vec<f64>,
    model_index: usize,
}

impl AbsoluteDistribution {
    pub fn new(values: Vec<f64>, model_index: usize) -> Result<Self> {
        check_simplex(&values)?;
        Ok(AbsoluteDistribution { values, model_index })
    }

    pub(crate) fn new_unchecked(values: Vec<f64>, model_index: usize) -> Self {
        AbsoluteDistribution { values, model_index }
    }

    pub fn uniform(size: usize, model_index: usize) -> Self {
        AbsoluteDistribution {
            values: vec![1.0 / size as f64; size],
            model_index,
        }
    }

    pub fn one_hot(size: usize, id: usize, model_index: usize) -> Self {
        let mut values = vec![0.0; size];
        values[id] = 1.0;
        AbsoluteDistribution { values, model_index }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn model_index(&self) -> usize {
        self.model_index
    }

    pub fn with_model_index(mut self, model_index: usize) -> Self {
        self.model_index = model_index;
        self
    }

    /// Highest-probability id; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }

    /// The `k` most probable ids with their probabilities, best first.
    pub fn top_k(&self, k: usize) -> Vec<(u32, f64)> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i as u32, self.values[i])).collect()
    }
}

/// Validates that `values` is a probability vector.
pub fn check_simplex(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::argument("distribution is empty"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::argument(format!("entry {i} is {} (must be finite and >= 0)", values[i])));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::argument(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A vector over anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeRepresentation {
    pub values: Vec<f64>,
}

impl RelativeRepresentation {
    pub fn new(values: Vec<f64>) -> Self {
        RelativeRepresentation { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Shannon entropy (nats) of the non-negative part.
    pub fn entropy(&self) -> f64 {
        -self
            .values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MainPolicy {
    Fixed(usize),
    /// Pick the model with the best individual accuracy on the dev split.
    AutoDev,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    /// Step size of the inverse search.
    pub eta: f64,
    /// Maximum number of search iterations.
    pub steps: usize,
    /// Per-model aggregation weights; empty means uniform.
    pub weights: Vec<f64>,
    pub main_policy: MainPolicy,
    pub prob_floor: f64,
    pub early_stop_loss: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            eta: DEFAULT_ETA,
            steps: DEFAULT_STEPS,
            weights: Vec::new(),
            main_policy: MainPolicy::AutoDev,
            prob_floor: DEFAULT_PROB_FLOOR,
            early_stop_loss: DEFAULT_EARLY_STOP,
        }
    }
}

impl EnsembleConfig {
    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            out.push(format!("fusion.eta must be a finite value >= 0 (got {})", self.eta));
        }
        if !(self.prob_floor.is_finite() && self.prob_floor > 0.0) {
            out.push(format!("fusion.prob_floor must be > 0 (got {})", self.prob_floor));
        }
        if !(self.early_stop_loss.is_finite() && self.early_stop_loss >= 0.0) {
            out.push(format!(
                "fusion.early_stop_loss must be >= 0 (got {})",
                self.early_stop_loss
            ));
        }
        if !self.weights.is_empty() {
            if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                out.push("fusion.weights must be non-negative".to_string());
            } else {
                let total: f64 = self.weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    out.push(format!("fusion.weights must sum to 1 (got {total})"));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Aggregation weights for `n` models.
    pub fn weights_for(&self, n: usize) -> Result<Vec<f64>> {
        if self.weights.is_empty() {
            return Ok(vec![1.0 / n as f64; n]);
        }
        if self.weights.len() != n {
            return Err(Error::config(format!(
                "{} fusion weights configured for {n} models",
                self.weights.len()
            )));
        }
        Ok(self.weights.clone())
    }
}

/// `r = p · M`.
pub fn to_relative(p: &AbsoluteDistribution, matrix: &RelativeMatrix) -> Result<RelativeRepresentation> {
    relative_image(p.values(), matrix).map(RelativeRepresentation::new)
}

fn relative_image(p: &[f64], matrix: &RelativeMatrix) -> Result<Vec<f64>> {
    if p.len() != matrix.rows() {
        return Err(Error::argument(format!(
            "distribution has {} entries but the matrix has {} rows",
            p.len(),
            matrix.rows()
        )));
    }
    let mut r = vec![0.0f64; matrix.anchors()];
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (acc, &m) in r.iter_mut().zip(matrix.row(i)) {
            *acc += pi * m as f64;
        }
    }
    Ok(r)
}

/// Weighted sum of relative representations.
pub fn aggregate(reps: &[RelativeRepresentation], weights: &[f64]) -> Result<RelativeRepresentation> {
    if reps.is_empty() {
        return Err(Error::argument("nothing to aggregate"));
    }
    if weights.len() != reps.len() {
        return Err(Error::argument(format!(
            "{} weights for {} representations",
            weights.len(),
            reps.len()
        )));
    }
    let width = reps[0].len();
    if reps.iter().any(|r| r.len() != width) {
        return Err(Error::argument("relative representations differ in length"));
    }
    let mut out = vec![0.0; width];
    for (rep, &w) in reps.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(&rep.values) {
            *o += w * v;
        }
    }
    Ok(RelativeRepresentation::new(out))
}

/// `KL(target || candidate)` with the default floor.
pub fn kl_loss(target: &RelativeRepresentation, candidate: &RelativeRepresentation) -> Result<f64> {
    kl_loss_floored(target, candidate, DEFAULT_PROB_FLOOR)
}

/// `sum_a t_a ln(t_a / max(c_a, floor))`, skipping anchors with `t_a < floor`.
pub fn kl_loss_floored(
    target: &RelativeRepresentation,
    candidate: &RelativeRepresentation,
    floor: f64,
) -> Result<f64> {
    if target.len() != candidate.len() {
        return Err(Error::argument(format!(
            "KL between vectors of length {} and {}",
            target.len(),
            candidate.len()
        )));
    }
    Ok(kl_raw(&target.values, &candidate.values, floor))
}

fn kl_raw(target: &[f64], candidate: &[f64], floor: f64) -> f64 {
    target
        .iter()
        .zip(candidate)
        .filter(|(&t, _)| t >= floor)
        .map(|(&t, &c)| t * (t / c.max(floor)).ln())
        .sum()
}

/// Gradient of `KL(target || p' · M)` with respect to `p'`.
pub fn kl_gradient(
    target: &RelativeRepresentation,
    p: &AbsoluteDistribution,
    matrix: &RelativeMatrix,
) -> Result<Vec<f64>> {
    kl_gradient_floored(target, p.values(), matrix, DEFAULT_PROB_FLOOR)
}

/// Same as [`kl_gradient`] on an arbitrary (not necessarily normalized) point.
pub fn kl_gradient_floored(
    target: &RelativeRepresentation,
    p: &[f64],
    matrix: &RelativeMatrix,
    floor: f64,
) -> Result<Vec<f64>> {
    if target.len() != matrix.anchors() {
        return Err(Error::argument(format!(
            "target has {} entries but the matrix has {} anchors",
            target.len(),
            matrix.anchors()
        )));
    }
    let image = relative_image(p, matrix)?;
    Ok(gradient_from_image(&target.values, &image, matrix, floor))
}

fn gradient_from_image(target: &[f64], image: &[f64], matrix: &RelativeMatrix, floor: f64) -> Vec<f64> {
    let ratio: Vec<f64> = target
        .iter()
        .zip(image)
        .map(|(&t, &c)| if t >= floor { t / c.max(floor) } else { 0.0 })
        .collect();
    (0..matrix.rows())
        .map(|i| {
            -matrix
                .row(i)
                .iter()
                .zip(&ratio)
                .map(|(&m, &q)| m as f64 * q)
                .sum::<f64>()
        })
        .collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k as f64 + 1.0);
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn clamp_renormalize(p: &mut [f64], floor: f64) {
    for x in p.iter_mut() {
        *x = x.max(floor);
    }
    let total: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub p_final: AbsoluteDistribution,
    /// Loss before each step taken, then after the last one.
    pub trace: Vec<f64>,
}

impl SearchOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().unwrap()
    }

    pub fn steps_taken(&self) -> usize {
        self.trace.len() - 1
    }
}

/// Searches the main model's simplex for a distribution whose relative image
/// matches `target`, starting from `p_init`.
///
/// Each step moves against the KL gradient by `eta`, projects back onto the
/// simplex, then floors and renormalizes. The search stops after
/// `cfg.steps` steps or once the loss drops below `cfg.early_stop_loss`.
pub fn inverse_transform(
    target: &RelativeRepresentation,
    p_init: &AbsoluteDistribution,
    matrix: &RelativeMatrix,
    cfg: &EnsembleConfig,
) -> Result<SearchOutcome> {
    if target.len() != matrix.anchors() || p_init.len() != matrix.rows() {
        return Err(Error::argument(format!(
            "search dimensions disagree: target {}, distribution {}, matrix {}x{}",
            target.len(),
            p_init.len(),
            matrix.rows(),
            matrix.anchors()
        )));
    }
    let floor = cfg.prob_floor;
    let mut p = p_init.values().to_vec();
    let mut image = relative_image(&p, matrix)?;
    let mut loss = kl_raw(&target.values, &image, floor);
    if !loss.is_finite() {
        return Err(Error::Numeric { step: 0 });
    }
    let mut trace = vec![loss];

    if cfg.eta == 0.0 {
        // A zero step leaves the iterate untouched.
        if loss >= cfg.early_stop_loss {
            trace.resize(cfg.steps + 1, loss);
        }
        return Ok(SearchOutcome {
            p_final: p_init.clone(),
            trace,
        });
    }

    for step in 0..cfg.steps {
        if loss < cfg.early_stop_loss {
            break;
        }
        let grad = gradient_from_image(&target.values, &image, matrix, floor);
        let moved: Vec<f64> = p.iter().zip(&grad).map(|(&x, &g)| x - cfg.eta * g).collect();
        if moved.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { step });
        }
        p = project_simplex(&moved);
        clamp_renormalize(&mut p, floor);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { step });
        }
        image = relative_image(&p, matrix)?;
        loss = kl_raw(&target.values, &image, floor);
        if !loss.is_finite() {
            return Err(Error::Numeric { step });
        }
        trace.push(loss);
    }
    Ok(SearchOutcome {
        p_final: AbsoluteDistribution::new_unchecked(p, p_init.model_index()),
        trace,
    })
}

//! Domain types shared across the crate and game-level validation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projections::BoxHyperplaneSet;
use crate::report::ValidationReport;
use crate::serde_util;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Smallest eigenvalue that still counts as positive definite.
pub const PD_TOLERANCE: f64 = 1e-10;

/// Tolerance on `sum(delta) == 1`.
pub const DELTA_TOLERANCE: f64 = 1e-12;

/// Resolvent step when a game document does not set one.
pub const DEFAULT_ETA: f64 = 0.1;

/// The stacked signal `col(sigma, lambda)`: an aggregate estimate and a
/// coupling-price estimate, both in `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncentiveState {
    #[serde(with = "serde_util::vector")]
    pub sigma: Vector,
    #[serde(with = "serde_util::vector")]
    pub lambda: Vector,
}

impl IncentiveState {
    pub fn new(sigma: Vector, lambda: Vector) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidArgument("incentive state must have n >= 1".into()));
        }
        if sigma.len() != lambda.len() {
            return Err(Error::dim("incentive state", sigma.len(), lambda.len()));
        }
        let state = IncentiveState { sigma, lambda };
        if !state.is_finite() {
            return Err(Error::InvalidArgument("incentive state has non-finite entries".into()));
        }
        Ok(state)
    }

    pub fn zeros(n: usize) -> Self {
        IncentiveState {
            sigma: Vector::zeros(n),
            lambda: Vector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_finite(&self) -> bool {
        self.sigma.iter().chain(self.lambda.iter()).all(|v| v.is_finite())
    }

    pub fn stacked(&self) -> Vector {
        let n = self.dim();
        Vector::from_fn(2 * n, |i, _| if i < n { self.sigma[i] } else { self.lambda[i - n] })
    }

    pub fn from_stacked(w: &Vector) -> Result<Self> {
        if !w.len().is_multiple_of(2) || w.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "stacked state must have even positive length, got {}",
                w.len()
            )));
        }
        let n = w.len() / 2;
        Ok(IncentiveState {
            sigma: w.rows(0, n).into_owned(),
            lambda: w.rows(n, n).into_owned(),
        })
    }

    pub fn sub(&self, other: &IncentiveState) -> IncentiveState {
        IncentiveState {
            sigma: &self.sigma - &other.sigma,
            lambda: &self.lambda - &other.lambda,
        }
    }

    pub fn scale(&self, s: f64) -> IncentiveState {
        IncentiveState {
            sigma: &self.sigma * s,
            lambda: &self.lambda * s,
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &IncentiveState) {
        self.sigma.axpy(s, &other.sigma, 1.0);
        self.lambda.axpy(s, &other.lambda, 1.0);
    }

    /// Max-absolute-entry norm over both halves.
    pub fn max_norm(&self) -> f64 {
        self.sigma
            .iter()
            .chain(self.lambda.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &IncentiveState) -> f64 {
        self.sub(other).max_norm()
    }

    /// Arithmetic mean, accumulated in slice order.
    pub fn mean(states: &[IncentiveState]) -> Result<IncentiveState> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of empty state list".into()))?;
        let mut acc = IncentiveState::zeros(first.dim());
        for s in states {
            if s.dim() != first.dim() {
                return Err(Error::dim("state list", first.dim(), s.dim()));
            }
            acc.axpy(1.0, s);
        }
        Ok(acc.scale(1.0 / states.len() as f64))
    }
}

/// One agent: cost `quad * x'x + lin'x` over a box intersected with `1'x = budget`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub quad: f64,
    #[serde(with = "serde_util::vector")]
    pub lin: Vector,
    #[serde(flatten)]
    pub set: BoxHyperplaneSet,
}

impl AgentProfile {
    pub fn new(quad: f64, lin: Vector, lower: Vector, upper: Vector, budget: f64) -> Self {
        AgentProfile {
            quad,
            lin,
            set: BoxHyperplaneSet::new_unchecked(lower, upper, budget),
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    /// `f(x) = quad * x'x + lin'x`
    pub fn own_cost(&self, x: &Vector) -> f64 {
        self.quad * x.dot(x) + self.lin.dot(x)
    }

    /// Full game cost given the incentive `v = C sigma + K lambda`.
    pub fn cost(&self, x: &Vector, v: &Vector) -> f64 {
        self.own_cost(x) + v.dot(x)
    }

    fn check(&self, n: usize) -> Vec<String> {
        let mut problems = Vec::new();
        if self.lin.len() != n || self.set.lower.len() != n || self.set.upper.len() != n {
            problems.push(format!("dimension differs from n = {n}"));
            return problems;
        }
        if !(self.quad > 0.0) {
            problems.push(format!("quad = {} is not positive", self.quad));
        }
        if let Err(e) = self.set.validate() {
            problems.push(e.to_string());
        }
        problems
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub agents: Vec<AgentProfile>,
    pub delta: Vec<f64>,
}

impl PopulationSpec {
    /// Population with uniform weights `1 / N_l`.
    pub fn uniform(agents: Vec<AgentProfile>) -> Self {
        let w = 1.0 / agents.len().max(1) as f64;
        let delta = vec![w; agents.len()];
        PopulationSpec { agents, delta }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

/// Step sizes `alpha_k` for iterations `k = 1, 2, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `1 / (k + offset)`
    Harmonic { offset: f64 },
    /// `scale / (k + offset)^exponent`
    Power {
        exponent: f64,
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Explicit values; the last one is held past the end of the list.
    Custom { values: Vec<f64> },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Harmonic { offset: 1.0 }
    }
}

impl StepSchedule {
    /// Power schedule whose first step is `alpha_1`; a large offset keeps the
    /// step near `alpha_1` for roughly `offset` iterations before it decays.
    pub fn power_from_first(alpha_1: f64, exponent: f64, offset: f64) -> Self {
        StepSchedule::Power {
            exponent,
            scale: alpha_1 * (1.0 + offset).powf(exponent),
            offset,
        }
    }

    /// `k` is one-based.
    pub fn alpha(&self, k: usize) -> f64 {
        let k = k.max(1) as f64;
        match self {
            StepSchedule::Harmonic { offset } => 1.0 / (k + offset),
            StepSchedule::Power {
                exponent,
                scale,
                offset,
            } => scale / (k + offset).powf(*exponent),
            StepSchedule::Custom { values } => {
                let i = (k as usize - 1).min(values.len().saturating_sub(1));
                values.get(i).copied().unwrap_or(f64::NAN)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self {
            StepSchedule::Harmonic { offset } => {
                if !(*offset > 0.0) {
                    return bad(format!("harmonic offset must be > 0, got {offset}"));
                }
            }
            StepSchedule::Power {
                exponent,
                scale,
                offset,
            } => {
                if !(*exponent > 0.5 && *exponent <= 1.0) {
                    return bad(format!("power exponent must lie in (0.5, 1], got {exponent}"));
                }
                if !(*offset >= 0.0) {
                    return bad(format!("power offset must be >= 0, got {offset}"));
                }
                if !(*scale > 0.0 && *scale < (1.0 + offset).powf(*exponent)) {
                    return bad(format!("power scale {scale} gives alpha_1 outside (0, 1)"));
                }
            }
            StepSchedule::Custom { values } => {
                if values.is_empty() {
                    return bad("custom schedule is empty".into());
                }
                if values.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                    return bad("custom step sizes must lie in (0, 1)".into());
                }
                if values.windows(2).any(|w| w[1] > w[0]) {
                    return bad("custom step sizes must be non-increasing".into());
                }
            }
        }
        Ok(())
    }
}

/// Global game parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GameConfig {
    /// Aggregate-coupling weight.
    pub c: Matrix,
    /// Price weight.
    pub k: Matrix,
    pub eta: f64,
    pub coupling_lower: Vector,
    pub coupling_upper: Vector,
    pub populations: Vec<PopulationSpec>,
    pub schedule: StepSchedule,
}

impl GameConfig {
    pub fn n(&self) -> usize {
        self.coupling_lower.len()
    }

    pub fn num_populations(&self) -> usize {
        self.populations.len()
    }

    pub fn total_agents(&self) -> usize {
        self.populations.iter().map(PopulationSpec::len).sum()
    }

    /// Structural checks only: dimensions, non-empty populations, finite values.
    pub fn check_structure(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidArgument("coupling box is empty (n = 0)".into()));
        }
        for (name, m) in [("C", &self.c), ("K", &self.k)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidArgument(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if self.coupling_upper.len() != n {
            return Err(Error::dim("coupling_upper", n, self.coupling_upper.len()));
        }
        if self.populations.is_empty() {
            return Err(Error::InvalidArgument("no populations".into()));
        }
        for (l, pop) in self.populations.iter().enumerate() {
            if pop.is_empty() {
                return Err(Error::InvalidArgument(format!("population {l} has no agents")));
            }
            if pop.delta.len() != pop.len() {
                return Err(Error::InvalidArgument(format!(
                    "population {l}: {} weights for {} agents",
                    pop.delta.len(),
                    pop.len()
                )));
            }
            for (i, a) in pop.agents.iter().enumerate() {
                if a.lin.len() != n || a.set.lower.len() != n || a.set.upper.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "agent {i} of population {l} does not have dimension {n}"
                    )));
                }
            }
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        self.schedule.validate()
    }

    /// `P = [[C + 2K, -K], [-K, K]]`
    pub fn pmatrix(&self) -> Matrix {
        let n = self.n();
        let mut p = Matrix::zeros(2 * n, 2 * n);
        p.view_mut((0, 0), (n, n)).copy_from(&(&self.c + &self.k * 2.0));
        p.view_mut((0, n), (n, n)).copy_from(&(-&self.k));
        p.view_mut((n, 0), (n, n)).copy_from(&(-&self.k));
        p.view_mut((n, n), (n, n)).copy_from(&self.k);
        p
    }
}

pub(crate) fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Largest eigenvalue of the symmetric part.
pub fn max_eigenvalue(m: &Matrix) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max()
}

pub fn is_positive_definite(m: &Matrix) -> bool {
    is_symmetric(m, 1e-12) && min_eigenvalue(m) > PD_TOLERANCE
}

/// Necessary condition for `q I - (1/4)(q I)^{-1}` to be PSD, i.e. `q >= 1/2`,
/// which makes the quadratic best response non-expansive.
pub fn best_response_nonexpansive(quad: f64) -> bool {
    quad - 0.25 / quad >= -1e-15
}

/// Report-style check of every game-level assumption.
pub fn validate_game(config: &GameConfig) -> ValidationReport {
    let mut report = ValidationReport::new("game");
    if let Err(e) = config.check_structure() {
        report.check("structure", false, e.to_string());
        return report;
    }
    report.check("structure", true, "dimensions consistent");

    let k_min = if is_symmetric(&config.k, 1e-12) {
        min_eigenvalue(&config.k)
    } else {
        f64::NEG_INFINITY
    };
    report.check("K≻0", k_min > PD_TOLERANCE, format!("min eigenvalue {k_min:.3e}"));

    let ck = &config.c + &config.k;
    let ck_min = if is_symmetric(&config.c, 1e-12) && is_symmetric(&config.k, 1e-12) {
        min_eigenvalue(&ck)
    } else {
        f64::NEG_INFINITY
    };
    report.check("C+K≻0", ck_min > PD_TOLERANCE, format!("min eigenvalue {ck_min:.3e}"));

    let box_ok = config
        .coupling_lower
        .iter()
        .zip(config.coupling_upper.iter())
        .all(|(lo, hi)| lo <= hi);
    report.check("coupling box", box_ok, "coupling_lower <= coupling_upper");

    let n = config.n();
    let mut infeasible = Vec::new();
    let mut delta_bad = Vec::new();
    let mut slow_agents = 0usize;
    for (l, pop) in config.populations.iter().enumerate() {
        let sum: f64 = pop.delta.iter().sum();
        if (sum - 1.0).abs() > DELTA_TOLERANCE || pop.delta.iter().any(|d| *d < 0.0) {
            delta_bad.push(format!("population {l}: sum(delta) = {sum}"));
        }
        for (i, a) in pop.agents.iter().enumerate() {
            for p in a.check(n) {
                infeasible.push(format!("agent ({l},{i}): {p}"));
            }
            if !best_response_nonexpansive(a.quad) {
                slow_agents += 1;
            }
        }
    }
    report.check(
        "agent feasibility",
        infeasible.is_empty(),
        if infeasible.is_empty() {
            "all agents feasible".to_string()
        } else {
            infeasible.join("; ")
        },
    );
    report.check(
        "delta normalization",
        delta_bad.is_empty(),
        if delta_bad.is_empty() {
            "all populations sum to 1".to_string()
        } else {
            delta_bad.join("; ")
        },
    );

    let strict = config
        .coupling_lower
        .iter()
        .zip(config.coupling_upper.iter())
        .all(|(lo, hi)| lo < hi);
    report.check(
        "Slater",
        strict,
        if strict {
            "midpoint of coupling box is strictly interior"
        } else {
            "coupling box has empty interior"
        },
    );

    // The coupling box must meet the set of reachable aggregates. Every
    // reachable aggregate sums to the weighted mean budget and lies in the
    // weighted mean of the agents' boxes.
    let l_count = config.num_populations() as f64;
    let mut agg_lower = Vector::zeros(n);
    let mut agg_upper = Vector::zeros(n);
    let mut agg_budget = 0.0;
    for pop in &config.populations {
        for (a, d) in pop.agents.iter().zip(&pop.delta) {
            agg_lower.axpy(d / l_count, &a.set.lower, 1.0);
            agg_upper.axpy(d / l_count, &a.set.upper, 1.0);
            agg_budget += d / l_count * a.set.budget;
        }
    }
    let lo = config.coupling_lower.sup(&agg_lower);
    let hi = config.coupling_upper.inf(&agg_upper);
    let overlap = lo.iter().zip(hi.iter()).all(|(a, b)| a <= b)
        && lo.sum() <= agg_budget + 1e-12
        && agg_budget <= hi.sum() + 1e-12;
    report.check(
        "coupling box meets aggregate range",
        overlap,
        format!(
            "aggregate budget {agg_budget:.6}, reachable range inside coupling box [{:.6}, {:.6}]",
            lo.sum(),
            hi.sum()
        ),
    );

    if slow_agents > 0 {
        report.warn(format!(
            "{slow_agents} agent(s) have quad < 0.5; their best responses are not guaranteed non-expansive"
        ));
    }
    report
}

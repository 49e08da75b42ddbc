//! EV charging instance: each vehicle schedules its charging over `n` slots,
//! paying a battery degradation cost plus a price that rises with the
//! aggregate EV demand and the non-EV base load, under per-slot transmission
//! caps on the aggregate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::RunSettings;
use crate::error::{Error, Result};
use crate::game::{AgentProfile, GameConfig, Matrix, PopulationSpec, StepSchedule, Vector};
use crate::serde_util;

/// Vehicles per population in the default desk-scale instance.
pub const DESK_AGENTS_PER_POPULATION: usize = 50;
/// Vehicles per population at full scale.
pub const FULL_AGENTS_PER_POPULATION: usize = 1000;

/// Resolvent step used for the EV instance. The sampled non-expansiveness
/// probe passes up to roughly `eta = 5` on the default instance.
pub const DESK_ETA: f64 = 2.0;

const MAX_BUDGET_REDRAWS: usize = 100;

/// Missing fields in a JSON document fall back to [`build_default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvScenarioParams {
    /// Number of charging slots.
    pub n: usize,
    pub num_populations: usize,
    pub agents_per_population: usize,
    /// Battery degradation quadratic coefficient.
    pub q: f64,
    /// Battery degradation linear term.
    #[serde(with = "serde_util::vector")]
    pub p: Vector,
    /// Price slope on aggregate demand.
    pub a: f64,
    /// Price offset.
    pub b: f64,
    /// Normalized non-EV demand per slot.
    #[serde(with = "serde_util::vector")]
    pub d: Vector,
    pub x_lower: f64,
    pub x_upper: f64,
    pub beta_range: (f64, f64),
    /// Per-slot transmission caps on the aggregate.
    #[serde(with = "serde_util::vector")]
    pub caps: Vector,
    pub seed: u64,
}

/// Normalized two-peak base load over 14 slots: peaks at slots 3 and 11-12
/// with shoulders on 1-2 and 13-14, and an overnight valley over 4-10. The
/// shoulders sit only slightly above the daily mean, so vehicles that ignore
/// the caps load them past 0.04.
pub fn default_demand_profile() -> Vector {
    Vector::from_row_slice(&[
        0.50, 0.50, 0.56, 0.49, 0.47, 0.45, 0.44, 0.44, 0.45, 0.47, 0.54, 0.56, 0.50, 0.50,
    ])
}

/// `0.04` on slots 1-3 and 11-14, `0.1` elsewhere.
pub fn default_caps() -> Vector {
    Vector::from_fn(14, |t, _| if !(3..10).contains(&t) { 0.04 } else { 0.1 })
}

/// `K = 0.08 I`
pub fn default_k(n: usize) -> Matrix {
    Matrix::identity(n, n) * 0.08
}

/// `alpha_k = 60 / (k + 1200)`: about 0.05 for the first thousand
/// iterations, then a harmonic tail.
pub fn desk_schedule() -> StepSchedule {
    StepSchedule::Power {
        exponent: 1.0,
        scale: 60.0,
        offset: 1200.0,
    }
}

/// Stopping rule for the EV instance. Coordinator disagreement decays like
/// `alpha_k`, so the consensus tolerance is looser than the fixed-point one.
pub fn desk_run_settings() -> RunSettings {
    RunSettings {
        max_iterations: 60_000,
        stop_consensus_tol: 2.5e-4,
        stop_fixed_point_tol: 1e-6,
        ..RunSettings::default()
    }
}

/// Default instance mapped to canonical form with `K = 0.08 I`, the desk
/// step size and schedule.
pub fn default_game(params: &EvScenarioParams) -> Result<GameConfig> {
    to_canonical(params, default_k(params.n), DESK_ETA, desk_schedule())
}

pub fn build_default() -> EvScenarioParams {
    EvScenarioParams {
        n: 14,
        num_populations: 10,
        agents_per_population: DESK_AGENTS_PER_POPULATION,
        q: 0.004,
        p: Vector::from_element(14, 0.075),
        a: 0.038,
        b: 0.06,
        d: default_demand_profile(),
        x_lower: 0.0,
        x_upper: 0.25,
        beta_range: (0.6, 1.0),
        caps: default_caps(),
        seed: 42,
    }
}

impl EvScenarioParams {
    pub fn full_scale(mut self) -> Self {
        self.agents_per_population = FULL_AGENTS_PER_POPULATION;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for (name, len) in [("d", self.d.len()), ("caps", self.caps.len()), ("p", self.p.len())] {
            if len != n {
                return Err(Error::InvalidArgument(format!(
                    "{name} has length {len}, expected n = {n}"
                )));
            }
        }
        if n == 0 || self.num_populations == 0 || self.agents_per_population == 0 {
            return Err(Error::InvalidArgument("scenario sizes must be positive".into()));
        }
        if !(self.q > 0.0) {
            return Err(Error::InvalidArgument(format!("q must be positive, got {}", self.q)));
        }
        if !(self.x_lower <= self.x_upper) {
            return Err(Error::InvalidArgument("x_lower exceeds x_upper".into()));
        }
        let (lo, hi) = self.beta_range;
        let (cap_lo, cap_hi) = (n as f64 * self.x_lower, n as f64 * self.x_upper);
        if !(lo <= hi && lo >= cap_lo && hi <= cap_hi) {
            return Err(Error::InvalidArgument(format!(
                "beta range [{lo}, {hi}] not within [{cap_lo}, {cap_hi}]"
            )));
        }
        Ok(())
    }

    /// Agent linear term with the constant part of the price folded in:
    /// `p + a d + b 1`.
    pub fn folded_linear_term(&self) -> Vector {
        &self.p + &self.d * self.a + Vector::from_element(self.n, self.b)
    }

    /// Vehicle cost `q x'x + p'x + (a (sigma + d) + b 1)'x`.
    pub fn vehicle_cost(&self, x: &Vector, sigma: &Vector) -> f64 {
        let price = (sigma + &self.d) * self.a + Vector::from_element(self.n, self.b);
        self.q * x.dot(x) + self.p.dot(x) + price.dot(x)
    }

    /// Seeded charging budgets, `budgets[l][i]`.
    pub fn draw_budgets(&self) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.beta_range;
        let (cap_lo, cap_hi) = (self.n as f64 * self.x_lower, self.n as f64 * self.x_upper);
        (0..self.num_populations)
            .map(|_| {
                (0..self.agents_per_population)
                    .map(|_| {
                        for _ in 0..MAX_BUDGET_REDRAWS {
                            let beta = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                            if beta >= cap_lo && beta <= cap_hi {
                                return Ok(beta);
                            }
                        }
                        Err(Error::Infeasible(format!(
                            "no feasible budget in [{lo}, {hi}] after {MAX_BUDGET_REDRAWS} draws"
                        )))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Canonical game: `C = a I`, agent linear term `p + a d + b 1`, box-budget
/// feasible sets, coupling box `[0, caps]`, uniform weights.
pub fn to_canonical(params: &EvScenarioParams, k: Matrix, eta: f64, schedule: StepSchedule) -> Result<GameConfig> {
    params.validate()?;
    let n = params.n;
    let lin = params.folded_linear_term();
    let lower = Vector::from_element(n, params.x_lower);
    let upper = Vector::from_element(n, params.x_upper);
    let populations = params
        .draw_budgets()?
        .into_iter()
        .map(|budgets| {
            let agents = budgets
                .into_iter()
                .map(|beta| AgentProfile::new(params.q, lin.clone(), lower.clone(), upper.clone(), beta))
                .collect();
            PopulationSpec::uniform(agents)
        })
        .collect();
    let config = GameConfig {
        c: Matrix::identity(n, n) * params.a,
        k,
        eta,
        coupling_lower: Vector::zeros(n),
        coupling_upper: params.caps.clone(),
        populations,
        schedule,
    };
    config.check_structure()?;
    Ok(config)
}

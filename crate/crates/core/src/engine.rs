//! Iteration drivers: the consensus-based coordinator iteration and the
//! centralized single-coordinator oracle it is checked against.
//!
//! One round of the coordinator iteration is three phases with a barrier
//! between them: every coordinator broadcasts its incentive and computes the
//! coupling projection, agents best-respond, then each coordinator forms its
//! local map output and mixes with its neighbours through `W^k`. Populations
//! are processed in parallel; every reduction runs in population order, so
//! results do not depend on the thread count.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameConfig, IncentiveState, Vector};
use crate::mappings::{best_responses, tag_population, CouplingMode, OperatorContext};
use crate::network::GraphSequence;
use crate::par;
use crate::serde_util;
use crate::trace::{IterationRecord, IterationTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub max_iterations: usize,
    pub stop_consensus_tol: f64,
    pub stop_fixed_point_tol: f64,
    /// Trace stride; `1` records every iteration.
    pub record_every: usize,
    pub seed: u64,
    pub parallel: bool,
    /// Keep the average state of every recorded iteration.
    #[serde(default)]
    pub keep_history: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            max_iterations: 100_000,
            stop_consensus_tol: 1e-6,
            stop_fixed_point_tol: 1e-6,
            record_every: 1,
            seed: 42,
            parallel: true,
            keep_history: false,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.stop_consensus_tol > 0.0 && self.stop_fixed_point_tol > 0.0) {
            return Err(Error::InvalidArgument("stopping tolerances must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub final_states: Vec<IncentiveState>,
    pub average_state: IncentiveState,
    /// `final_strategies[l][i]`: best response of agent `i` of population
    /// `l` to its coordinator's final incentive.
    pub final_strategies: Vec<Vec<StrategyVec>>,
    pub trace: IterationTrace,
    /// Diagnostics at the terminating iteration, recorded or not.
    pub final_record: Option<IterationRecord>,
    pub termination: Termination,
    pub iterations: usize,
    /// Average state at each recorded iteration, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<IncentiveState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyVec(#[serde(with = "serde_util::vector")] pub Vector);

impl RunResult {
    /// `(1/L) sum_l sum_i delta_i x_i` over the final strategies.
    pub fn realized_aggregate(&self, config: &GameConfig) -> Vector {
        let mut agg = Vector::zeros(config.n());
        let l_count = config.num_populations() as f64;
        for (pop, xs) in config.populations.iter().zip(&self.final_strategies) {
            for (d, x) in pop.delta.iter().zip(xs) {
                agg.axpy(d / l_count, &x.0, 1.0);
            }
        }
        agg
    }
}

/// `max_l |y_l - mean(y)|_inf`
pub fn consensus_residual(states: &[IncentiveState]) -> Result<f64> {
    let mean = IncentiveState::mean(states)?;
    Ok(states.iter().map(|s| s.max_abs_diff(&mean)).fold(0.0, f64::max))
}

/// `max_t max(0, sigma_t - upper_t, lower_t - sigma_t)`
pub fn constraint_violation(sigma: &Vector, ctx: &OperatorContext) -> f64 {
    (0..sigma.len())
        .map(|t| {
            (sigma[t] - ctx.coupling_upper[t])
                .max(ctx.coupling_lower[t] - sigma[t])
                .max(0.0)
        })
        .fold(0.0, f64::max)
}

/// `|E^k|_P` with `E^k = (1/L) sum_l T_l(y_l) - T(mean y)`.
pub fn perturbation_pnorm(states: &[IncentiveState], config: &GameConfig, ctx: &OperatorContext) -> Result<f64> {
    if states.len() != config.num_populations() {
        return Err(Error::dim("coordinator states", config.num_populations(), states.len()));
    }
    let locals = states
        .iter()
        .zip(&config.populations)
        .map(|(y, pop)| ctx.apply_t_local(y, pop, false))
        .collect::<Result<Vec<_>>>()?;
    let mean_local = IncentiveState::mean(&locals)?;
    let mean = IncentiveState::mean(states)?;
    let global = ctx.apply_t_global(&mean, config, false)?;
    ctx.p_norm_state(&mean_local.sub(&global))
}

/// Default starting point: `sigma` at the midpoint of the coupling box
/// (lower bound where the box is unbounded above), `lambda = 0`, optionally
/// perturbed per coordinator while keeping `sigma` inside the box.
pub fn default_init(config: &GameConfig, perturbation: f64, seed: u64) -> Vec<IncentiveState> {
    let n = config.n();
    let mid = Vector::from_fn(n, |t, _| {
        let (lo, hi) = (config.coupling_lower[t], config.coupling_upper[t]);
        if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            lo
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.num_populations())
        .map(|_| {
            if perturbation == 0.0 {
                return IncentiveState {
                    sigma: mid.clone(),
                    lambda: Vector::zeros(n),
                };
            }
            let sigma = Vector::from_fn(n, |t, _| {
                let r: f64 = rng.gen_range(-1.0..=1.0);
                let s = mid[t] + perturbation * r;
                s.max(config.coupling_lower[t]).min(config.coupling_upper[t])
            });
            let lambda = Vector::from_fn(n, |_, _| perturbation * rng.gen_range(-1.0..=1.0));
            IncentiveState { sigma, lambda }
        })
        .collect()
}

/// Slack on the coupling box for starting estimates, so a limit that sits on
/// a face of the box up to rounding can be used as a start.
pub const INIT_BOX_TOLERANCE: f64 = 1e-9;

fn check_init(config: &GameConfig, init: &[IncentiveState], ctx: &OperatorContext) -> Result<()> {
    for (l, y) in init.iter().enumerate() {
        if y.dim() != config.n() || y.lambda.len() != config.n() {
            return Err(Error::dim("initial state", config.n(), y.dim()));
        }
        if !y.is_finite() {
            return Err(Error::InvalidArgument(format!("initial state {l} is not finite")));
        }
        if constraint_violation(&y.sigma, ctx) > INIT_BOX_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "initial aggregate estimate of coordinator {l} lies outside the coupling box"
            )));
        }
    }
    Ok(())
}

fn final_strategies(
    config: &GameConfig,
    ctx: &OperatorContext,
    states: &[IncentiveState],
    mode: CouplingMode,
    parallel: bool,
) -> Result<Vec<Vec<StrategyVec>>> {
    par::try_map_indexed(config.num_populations(), parallel, |l| {
        let y = &states[l.min(states.len() - 1)];
        let y = match mode {
            CouplingMode::Coupled => y.clone(),
            CouplingMode::Uncoupled => IncentiveState {
                sigma: y.sigma.clone(),
                lambda: Vector::zeros(config.n()),
            },
        };
        let v = ctx.incentive(&y)?;
        best_responses(&config.populations[l], &v, false)
            .map(|xs| xs.into_iter().map(StrategyVec).collect())
            .map_err(|e| tag_population(e, l))
    })
}

/// Consensus-based coordinator iteration:
/// `y_l <- (1 - alpha_k) sum_l' W^k[l][l'] y_l' + alpha_k T_l(y_l)`.
pub fn run_algorithm1(
    config: &GameConfig,
    seq: &GraphSequence,
    init: &[IncentiveState],
    settings: &RunSettings,
) -> Result<RunResult> {
    run_consensus(config, seq, init, settings, CouplingMode::Coupled)
}

/// Same pipeline with the price estimate pinned at zero and no coupling
/// feedback.
pub fn run_algorithm1_uncoupled(
    config: &GameConfig,
    seq: &GraphSequence,
    init: &[IncentiveState],
    settings: &RunSettings,
) -> Result<RunResult> {
    run_consensus(config, seq, init, settings, CouplingMode::Uncoupled)
}

fn run_consensus(
    config: &GameConfig,
    seq: &GraphSequence,
    init: &[IncentiveState],
    settings: &RunSettings,
    mode: CouplingMode,
) -> Result<RunResult> {
    settings.validate()?;
    let ctx = OperatorContext::new(config)?;
    let l_count = config.num_populations();
    if seq.num_nodes != l_count {
        return Err(Error::InvalidArgument(format!(
            "graph has {} nodes but the game has {l_count} populations",
            seq.num_nodes
        )));
    }
    if init.len() != l_count {
        return Err(Error::dim("initial states", l_count, init.len()));
    }
    check_init(config, init, &ctx)?;

    let start = Instant::now();
    let mut states: Vec<IncentiveState> = init.to_vec();
    let mut trace = IterationTrace::default();
    let mut history = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut final_record = None;

    for k in 1..=settings.max_iterations {
        let alpha = config.schedule.alpha(k);
        // Phases one and two: incentives, coupling projection, best responses.
        let locals = par::try_map_indexed(l_count, settings.parallel, |l| {
            ctx.apply_t_local_with(&states[l], &config.populations[l], mode, false)
                .map_err(|e| tag_population(e, l).at_iteration(k))
        })?;

        let mean = IncentiveState::mean(&states)?;
        let consensus = states.iter().map(|s| s.max_abs_diff(&mean)).fold(0.0, f64::max);
        let global = if l_count == 1 {
            locals[0].clone()
        } else {
            ctx.apply_t_global_with(&mean, config, mode, settings.parallel)
                .map_err(|e| e.at_iteration(k))?
        };
        let fixed_point = mean.max_abs_diff(&global);
        let mean_local = IncentiveState::mean(&locals)?;
        let perturbation = ctx.p_norm_state(&mean_local.sub(&global))?;
        let violation = constraint_violation(&mean.sigma, &ctx);

        let record = IterationRecord {
            k,
            alpha,
            consensus_residual: consensus,
            fixed_point_residual: fixed_point,
            perturbation_pnorm: perturbation,
            constraint_violation: violation,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if (k - 1) % settings.record_every == 0 {
            trace.push(record.clone());
            if settings.keep_history {
                history.push(mean.clone());
            }
        }
        final_record = Some(record);
        iterations = k;
        if consensus <= settings.stop_consensus_tol && fixed_point <= settings.stop_fixed_point_tol {
            termination = Termination::Converged;
            break;
        }

        // Phase three: mixing with neighbours plus the local map output.
        let w = seq.weights(k);
        let next: Vec<IncentiveState> = (0..l_count)
            .map(|l| {
                let mut mixed = IncentiveState::zeros(config.n());
                for (lp, s) in states.iter().enumerate() {
                    let wt = w[(l, lp)];
                    if wt != 0.0 {
                        mixed.axpy(wt, s);
                    }
                }
                let mut y = mixed.scale(1.0 - alpha);
                y.axpy(alpha, &locals[l]);
                y
            })
            .collect();
        states = next;
    }

    let average_state = IncentiveState::mean(&states)?;
    let final_strategies = final_strategies(config, &ctx, &states, mode, settings.parallel)?;
    Ok(RunResult {
        final_states: states,
        average_state,
        final_strategies,
        trace,
        final_record,
        termination,
        iterations,
        history,
    })
}

/// Centralized iteration `y <- (1 - alpha_k) y + alpha_k T(y)` run by a
/// single coordinator that sees every population.
pub fn run_oracle(config: &GameConfig, init: &IncentiveState, settings: &RunSettings) -> Result<RunResult> {
    settings.validate()?;
    let ctx = OperatorContext::new(config)?;
    check_init(config, std::slice::from_ref(init), &ctx)?;
    let start = Instant::now();
    let mut y = init.clone();
    let mut trace = IterationTrace::default();
    let mut history = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut final_record = None;

    for k in 1..=settings.max_iterations {
        let alpha = config.schedule.alpha(k);
        let t = ctx
            .apply_t_global(&y, config, settings.parallel)
            .map_err(|e| e.at_iteration(k))?;
        let fixed_point = y.max_abs_diff(&t);
        let record = IterationRecord {
            k,
            alpha,
            consensus_residual: 0.0,
            fixed_point_residual: fixed_point,
            perturbation_pnorm: 0.0,
            constraint_violation: constraint_violation(&y.sigma, &ctx),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if (k - 1) % settings.record_every == 0 {
            trace.push(record.clone());
            if settings.keep_history {
                history.push(y.clone());
            }
        }
        final_record = Some(record);
        iterations = k;
        if fixed_point <= settings.stop_fixed_point_tol {
            termination = Termination::Converged;
            break;
        }
        let mut next = y.scale(1.0 - alpha);
        next.axpy(alpha, &t);
        y = next;
    }

    let states = vec![y.clone(); config.num_populations()];
    let final_strategies = final_strategies(config, &ctx, &states, CouplingMode::Coupled, settings.parallel)?;
    Ok(RunResult {
        final_states: vec![y.clone()],
        average_state: y,
        final_strategies,
        trace,
        final_record,
        termination,
        iterations,
        history,
    })
}

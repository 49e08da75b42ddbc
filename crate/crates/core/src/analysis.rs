//! Post-run analysis: epsilon-Nash verification, comparison against the
//! centralized oracle, the uncoupled ablation and population sweeps.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{run_algorithm1, run_algorithm1_uncoupled, run_oracle, RunResult, RunSettings, Termination};
use crate::error::{Error, Result};
use crate::game::{max_eigenvalue, AgentProfile, GameConfig, IncentiveState, Matrix, PopulationSpec, Vector};
use crate::network::GraphSequence;
use crate::par;
use crate::projections::{best_response_generic, solve_box_hyperplane_qp, solve_box_hyperplane_qp_diag};
use crate::trace::csv_err;

/// Default number of agents checked per run.
pub const DEFAULT_EPSILON_SAMPLE: usize = 100;

const GENERIC_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentGain {
    pub population: usize,
    pub agent: usize,
    /// `max(0, raw_gain)`
    pub gain: f64,
    /// `J(x_hat) - min_r J(r)`; slightly negative values are solver noise.
    pub raw_gain: f64,
    /// `|r - x_hat|_2` for the best deviation `r`.
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub gains: Vec<AgentGain>,
    pub max_epsilon: f64,
    /// Largest distance from a sampled strategy to its best deviation.
    pub max_deviation_distance: f64,
    pub sampled_agents: Vec<(usize, usize)>,
    /// `2 alpha (|C| + 1) R delta_bar / N`, only when a Lipschitz constant
    /// `alpha` is supplied.
    pub theoretical_bound: Option<f64>,
    /// Deviation problems actually solved after deduplication.
    pub distinct_profiles: usize,
    pub converged_input: bool,
}

impl EpsilonReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for g in &self.gains {
            w.serialize(g).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

enum Curvature {
    Scalar(f64),
    Diagonal(Vector),
    Dense(Matrix),
}

fn classify(c: &Matrix) -> Curvature {
    let n = c.nrows();
    let off_diagonal_zero = (0..n).all(|i| (0..n).all(|j| i == j || c[(i, j)] == 0.0));
    if !off_diagonal_zero {
        return Curvature::Dense(c.clone());
    }
    let d = c.diagonal();
    if d.iter().all(|v| *v == d[0]) {
        Curvature::Scalar(d[0])
    } else {
        Curvature::Diagonal(d)
    }
}

/// Cost of agent `a` playing `x` when everyone else contributes `sigma_rest`
/// and its own weight in the aggregate is `w`:
/// `f(x) + (C (sigma_rest + w x) + K lambda)'x`.
fn self_aware_cost(a: &AgentProfile, x: &Vector, w: f64, c: &Matrix, base: &Vector) -> f64 {
    a.own_cost(x) + (base + c * x * w).dot(x)
}

/// Minimizer of the self-aware cost; `base = C sigma_rest + K lambda`.
fn best_deviation(a: &AgentProfile, w: f64, curvature: &Curvature, base: &Vector) -> Result<Vector> {
    let lin = &a.lin + base;
    match curvature {
        Curvature::Scalar(cc) => solve_box_hyperplane_qp(a.quad + w * cc, &lin, &a.set),
        Curvature::Diagonal(d) => {
            let quad = d.map(|v| a.quad + w * v);
            solve_box_hyperplane_qp_diag(&quad, &lin, &a.set)
        }
        Curvature::Dense(m) => {
            let sym = (m + m.transpose()) * 0.5;
            let lipschitz = 2.0 * a.quad + 2.0 * w * max_eigenvalue(&sym).max(0.0);
            let grad = |x: &Vector| x * (2.0 * a.quad) + &sym * x * (2.0 * w);
            Ok(best_response_generic(grad, lipschitz, &lin, &a.set, GENERIC_TOLERANCE)?.point)
        }
    }
}

fn profile_key(a: &AgentProfile, delta: f64, x: &Vector) -> Vec<u64> {
    let mut key = vec![a.quad.to_bits(), a.set.budget.to_bits(), delta.to_bits()];
    for v in [&a.lin, &a.set.lower, &a.set.upper, x] {
        key.extend(v.iter().map(|t| t.to_bits()));
    }
    key
}

/// `2 alpha (|C|_2 + 1) R delta_bar / N` with `R` the largest norm of a
/// feasible strategy and `delta_bar = max N_l delta_{l,i}`.
pub fn theoretical_bound(config: &GameConfig, lipschitz: f64) -> f64 {
    let c_norm = config.c.singular_values().max();
    let radius = config
        .populations
        .iter()
        .flat_map(|p| &p.agents)
        .map(|a| a.set.lower.abs().sup(&a.set.upper.abs()).norm())
        .fold(0.0, f64::max);
    let delta_bar = config
        .populations
        .iter()
        .map(|p| p.delta.iter().fold(0.0, |m: f64, d| m.max(*d)) * p.len() as f64)
        .fold(0.0, f64::max);
    2.0 * lipschitz * (c_norm + 1.0) * radius * delta_bar / config.total_agents() as f64
}

/// Largest unilateral improvement available to a sampled agent that
/// anticipates its own effect on the aggregate, with the price estimate
/// held at the run's final average.
pub fn epsilon_nash_check(
    result: &RunResult,
    config: &GameConfig,
    sample: usize,
    seed: u64,
    lipschitz: Option<f64>,
) -> Result<EpsilonReport> {
    if result.final_strategies.len() != config.num_populations() {
        return Err(Error::dim(
            "final strategies",
            config.num_populations(),
            result.final_strategies.len(),
        ));
    }
    let mut ids = Vec::new();
    for (l, pop) in config.populations.iter().enumerate() {
        if result.final_strategies[l].len() != pop.len() {
            return Err(Error::dim(
                "population strategies",
                pop.len(),
                result.final_strategies[l].len(),
            ));
        }
        ids.extend((0..pop.len()).map(|i| (l, i)));
    }
    if sample == 0 {
        return Err(Error::InvalidArgument("epsilon sample must be positive".into()));
    }
    let sampled: Vec<(usize, usize)> = if sample >= ids.len() {
        ids
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, ids.len(), sample).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|j| ids[j]).collect()
    };

    let l_count = config.num_populations() as f64;
    let sigma = result.realized_aggregate(config);
    let k_lambda = &config.k * &result.average_state.lambda;
    let curvature = classify(&config.c);

    let mut distinct: Vec<(usize, usize)> = Vec::new();
    let mut slot_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut owner = Vec::with_capacity(sampled.len());
    for &(l, i) in &sampled {
        let pop = &config.populations[l];
        let key = profile_key(&pop.agents[i], pop.delta[i], &result.final_strategies[l][i].0);
        let slot = *slot_of.entry(key).or_insert_with(|| {
            distinct.push((l, i));
            distinct.len() - 1
        });
        owner.push(slot);
    }

    let raw = par::try_map_indexed(distinct.len(), true, |j| {
        let (l, i) = distinct[j];
        let pop: &PopulationSpec = &config.populations[l];
        let a = &pop.agents[i];
        let x_hat = &result.final_strategies[l][i].0;
        let w = pop.delta[i] / l_count;
        let sigma_rest = &sigma - x_hat * w;
        let base = &config.c * &sigma_rest + &k_lambda;
        let r = best_deviation(a, w, &curvature, &base).map_err(|e| e.in_agent(l, i))?;
        let gain = self_aware_cost(a, x_hat, w, &config.c, &base) - self_aware_cost(a, &r, w, &config.c, &base);
        Ok::<(f64, f64), Error>((gain, (&r - x_hat).norm()))
    })?;

    let gains: Vec<AgentGain> = sampled
        .iter()
        .zip(&owner)
        .map(|(&(l, i), &slot)| AgentGain {
            population: l,
            agent: i,
            gain: raw[slot].0.max(0.0),
            raw_gain: raw[slot].0,
            deviation: raw[slot].1,
        })
        .collect();
    let max_epsilon = gains.iter().map(|g| g.gain).fold(0.0, f64::max);
    let max_deviation_distance = gains.iter().map(|g| g.deviation).fold(0.0, f64::max);
    Ok(EpsilonReport {
        gains,
        max_epsilon,
        max_deviation_distance,
        sampled_agents: sampled,
        theoretical_bound: lipschitz.map(|a| theoretical_bound(config, a)),
        distinct_profiles: distinct.len(),
        converged_input: result.termination == Termination::Converged,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `|mean y^K - y_hat|_inf` with `y_hat` the oracle's final iterate.
    pub terminal_gap: f64,
    /// `(k, |mean y^k - y_oracle^k|_inf)` at iterations recorded by both.
    pub lockstep_gap: Vec<(usize, f64)>,
    /// `(k, |mean y^k - y_hat|_inf)`
    pub gap_to_fixed_point: Vec<(usize, f64)>,
    pub consensus: RunResult,
    pub oracle: RunResult,
}

/// Runs the coordinator iteration and the oracle from matched starts (the
/// oracle starts at the mean of `init`).
pub fn compare_with_oracle(
    config: &GameConfig,
    seq: &GraphSequence,
    init: &[IncentiveState],
    settings: &RunSettings,
) -> Result<ComparisonReport> {
    let mut with_history = settings.clone();
    with_history.keep_history = true;
    let consensus = run_algorithm1(config, seq, init, &with_history)?;
    let oracle = run_oracle(config, &IncentiveState::mean(init)?, &with_history)?;
    let y_hat = &oracle.average_state;
    let ks: Vec<usize> = consensus.trace.records.iter().map(|r| r.k).collect();
    let gap_to_fixed_point = ks
        .iter()
        .zip(&consensus.history)
        .map(|(k, y)| (*k, y.max_abs_diff(y_hat)))
        .collect();
    let lockstep_gap = ks
        .iter()
        .zip(consensus.history.iter().zip(&oracle.history))
        .map(|(k, (a, b))| (*k, a.max_abs_diff(b)))
        .collect();
    Ok(ComparisonReport {
        terminal_gap: consensus.average_state.max_abs_diff(y_hat),
        lockstep_gap,
        gap_to_fixed_point,
        consensus,
        oracle,
    })
}

/// `max(0, sigma_t - upper_t)` per slot.
pub fn slot_violations(sigma: &Vector, upper: &Vector) -> Vec<f64> {
    sigma.iter().zip(upper.iter()).map(|(s, u)| (s - u).max(0.0)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub result: RunResult,
    pub slot_violations: Vec<f64>,
    pub max_violation: f64,
}

/// The same pipeline with the price estimate pinned at zero and no
/// coupling feedback, so the caps are ignored.
pub fn ablation_no_coupling(
    config: &GameConfig,
    seq: &GraphSequence,
    init: &[IncentiveState],
    settings: &RunSettings,
) -> Result<AblationReport> {
    let result = run_algorithm1_uncoupled(config, seq, init, settings)?;
    let slot_violations = slot_violations(&result.average_state.sigma, &config.coupling_upper);
    let max_violation = slot_violations.iter().copied().fold(0.0, f64::max);
    Ok(AblationReport {
        result,
        slot_violations,
        max_violation,
    })
}

/// Copy of `template` with `total / L` agents per population, taken
/// cyclically from each template population, uniform weights.
pub fn replicate_to_size(template: &GameConfig, total: usize) -> Result<GameConfig> {
    let l_count = template.num_populations();
    if total == 0 || !total.is_multiple_of(l_count) {
        return Err(Error::InvalidArgument(format!(
            "population size {total} is not a positive multiple of L = {l_count}"
        )));
    }
    let per = total / l_count;
    let mut out = template.clone();
    for (pop, src) in out.populations.iter_mut().zip(&template.populations) {
        if src.is_empty() {
            return Err(Error::InvalidArgument("template population is empty".into()));
        }
        let agents = (0..per).map(|i| src.agents[i % src.len()].clone()).collect();
        *pop = PopulationSpec::uniform(agents);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub max_epsilon: f64,
    pub max_deviation_distance: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// For each total size: replicate, run the oracle to convergence from the
/// default start, and check epsilon. Sizes run in parallel.
pub fn sweep_population(
    template: &GameConfig,
    sizes: &[usize],
    settings: &RunSettings,
    sample: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    par::try_map_indexed(sizes.len(), settings.parallel, |j| {
        let config = replicate_to_size(template, sizes[j])?;
        let init = crate::engine::default_init(&config, 0.0, settings.seed);
        let mut inner = settings.clone();
        inner.parallel = false;
        let result = run_oracle(&config, &init[0], &inner)?;
        let report = epsilon_nash_check(&result, &config, sample, seed, None)?;
        Ok(SweepRow {
            n: sizes[j],
            max_epsilon: report.max_epsilon,
            max_deviation_distance: report.max_deviation_distance,
            iterations: result.iterations,
            converged: result.termination == Termination::Converged,
        })
    })
}

/// Each entry at most `1 + noise` times the previous one.
pub fn sweep_is_decreasing(rows: &[SweepRow], noise: f64) -> bool {
    rows.windows(2)
        .all(|w| w[1].max_epsilon <= (1.0 + noise) * w[0].max_epsilon)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

//! The operator layer: incentive signals, population aggregates, the
//! auxiliary coupling projection, the resolvent and the local/global
//! fixed-point maps, plus the P-weighted norm they are measured in.
//!
//! With `M = [[I, 0], [I, 0]]` we have `M^2 = M`, so the resolvent
//! `B = (I + eta M)^{-1}` has the closed form `I - eta / (1 + eta) M` and is
//! applied in O(n) without forming the matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::game::{GameConfig, IncentiveState, Matrix, PopulationSpec, Vector};
use crate::par;
use crate::projections::{clamp_box, solve_box_hyperplane_qp};

/// How the coupling constraint enters the local map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingMode {
    /// The full mechanism: price estimate and coupling projection feedback.
    Coupled,
    /// Price estimate pinned at zero and no coupling feedback, leaving a
    /// plain multi-population aggregative game.
    Uncoupled,
}

/// Everything derived from a [`GameConfig`] that the maps need, computed once.
#[derive(Clone, Debug)]
pub struct OperatorContext {
    pub c: Matrix,
    pub k: Matrix,
    pub eta: f64,
    pub coupling_lower: Vector,
    pub coupling_upper: Vector,
    /// `(I + eta M)^{-1}`, kept for diagnostics.
    pub resolvent: Matrix,
    pub pmatrix: Matrix,
    pchol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl OperatorContext {
    pub fn new(config: &GameConfig) -> Result<Self> {
        config.check_structure()?;
        let n = config.n();
        let pmatrix = config.pmatrix();
        let pchol = pmatrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("P = [[C+2K, -K], [-K, K]] is not positive definite".into()))?;
        Ok(OperatorContext {
            c: config.c.clone(),
            k: config.k.clone(),
            eta: config.eta,
            coupling_lower: config.coupling_lower.clone(),
            coupling_upper: config.coupling_upper.clone(),
            resolvent: resolvent_closed_form(n, config.eta),
            pmatrix,
            pchol,
        })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    /// `v = C sigma + K lambda`
    pub fn incentive(&self, y: &IncentiveState) -> Result<Vector> {
        self.check_dim(y)?;
        Ok(&self.c * &y.sigma + &self.k * &y.lambda)
    }

    /// Projection of `-K (sigma - lambda)` onto the coupling box, which is the
    /// minimizer of `1/2 z'z + (K (sigma - lambda))'z` over the box.
    pub fn x_star_star(&self, y: &IncentiveState) -> Result<Vector> {
        self.check_dim(y)?;
        let target = -(&self.k * (&y.sigma - &y.lambda));
        Ok(clamp_box(&target, &self.coupling_lower, &self.coupling_upper))
    }

    /// `B w` in closed form: `(a, b) -> (a - c a, b - c a)`, `c = eta / (1 + eta)`.
    pub fn apply_resolvent(&self, w: &IncentiveState) -> IncentiveState {
        let c = self.eta / (1.0 + self.eta);
        let shift = &w.sigma * c;
        IncentiveState {
            sigma: &w.sigma - &shift,
            lambda: &w.lambda - &shift,
        }
    }

    /// `T_l(y) = B (y - eta Gamma_l(y))` for population `pop`.
    pub fn apply_t_local(&self, y: &IncentiveState, pop: &PopulationSpec, parallel: bool) -> Result<IncentiveState> {
        self.apply_t_local_with(y, pop, CouplingMode::Coupled, parallel)
    }

    pub fn apply_t_local_with(
        &self,
        y: &IncentiveState,
        pop: &PopulationSpec,
        mode: CouplingMode,
        parallel: bool,
    ) -> Result<IncentiveState> {
        match mode {
            CouplingMode::Coupled => {
                let v = self.incentive(y)?;
                let agg = aggregate_local(pop, &v, parallel)?;
                let xss = self.x_star_star(y)?;
                let gamma = gamma_local(&agg, &xss)?;
                let mut w = y.clone();
                w.axpy(-self.eta, &gamma);
                Ok(self.apply_resolvent(&w))
            }
            CouplingMode::Uncoupled => {
                let pinned = IncentiveState {
                    sigma: y.sigma.clone(),
                    lambda: Vector::zeros(self.n()),
                };
                let v = self.incentive(&pinned)?;
                let agg = aggregate_local(pop, &v, parallel)?;
                // Only the aggregate half survives; lambda stays at zero.
                let sigma = (&y.sigma + &agg * self.eta) / (1.0 + self.eta);
                Ok(IncentiveState {
                    sigma,
                    lambda: Vector::zeros(self.n()),
                })
            }
        }
    }

    /// `T(y) = (1/L) sum_l T_l(y)`, reduced in population order.
    pub fn apply_t_global(&self, y: &IncentiveState, config: &GameConfig, parallel: bool) -> Result<IncentiveState> {
        self.apply_t_global_with(y, config, CouplingMode::Coupled, parallel)
    }

    pub fn apply_t_global_with(
        &self,
        y: &IncentiveState,
        config: &GameConfig,
        mode: CouplingMode,
        parallel: bool,
    ) -> Result<IncentiveState> {
        let locals = par::try_map_indexed(config.num_populations(), parallel, |l| {
            self.apply_t_local_with(y, &config.populations[l], mode, false)
                .map_err(|e| tag_population(e, l))
        })?;
        IncentiveState::mean(&locals)
    }

    /// `sqrt(w' P w)` for a stacked `2n` vector.
    pub fn p_norm(&self, w: &Vector) -> Result<f64> {
        if w.len() != self.pmatrix.nrows() {
            return Err(Error::dim("p_norm", self.pmatrix.nrows(), w.len()));
        }
        Ok(w.dot(&(&self.pmatrix * w)).max(0.0).sqrt())
    }

    pub fn p_norm_state(&self, w: &IncentiveState) -> Result<f64> {
        self.p_norm(&w.stacked())
    }

    /// Cholesky factor of `P`; `|L' w|_2` is an equivalent route to the P-norm.
    pub fn p_cholesky(&self) -> &nalgebra::Cholesky<f64, nalgebra::Dyn> {
        &self.pchol
    }

    /// `(max column sum, max row sum)` of `|B|`.
    pub fn resolvent_norms(&self) -> (f64, f64) {
        induced_norms(&self.resolvent)
    }

    fn check_dim(&self, y: &IncentiveState) -> Result<()> {
        if y.dim() != self.n() || y.lambda.len() != self.n() {
            return Err(Error::dim("incentive state", self.n(), y.dim()));
        }
        Ok(())
    }
}

/// `I - eta / (1 + eta) M`, the inverse of `I + eta M`.
pub fn resolvent_closed_form(n: usize, eta: f64) -> Matrix {
    let mut b = Matrix::identity(2 * n, 2 * n);
    let c = eta / (1.0 + eta);
    for i in 0..n {
        b[(i, i)] -= c;
        b[(n + i, i)] -= c;
    }
    b
}

/// `M = [[I, 0], [I, 0]]`
pub fn m_matrix(n: usize) -> Matrix {
    let mut m = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        m[(i, i)] = 1.0;
        m[(n + i, i)] = 1.0;
    }
    m
}

/// `(max absolute column sum, max absolute row sum)`.
pub fn induced_norms(m: &Matrix) -> (f64, f64) {
    let col = (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let row = (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (col, row)
}

/// Best responses of every agent in `pop` to the incentive `v`.
pub fn best_responses(pop: &PopulationSpec, v: &Vector, parallel: bool) -> Result<Vec<Vector>> {
    par::try_map_indexed(pop.len(), parallel, |i| {
        let a = &pop.agents[i];
        if a.lin.len() != v.len() {
            return Err(Error::dim("incentive", a.lin.len(), v.len()).in_agent(0, i));
        }
        solve_box_hyperplane_qp(a.quad, &(&a.lin + v), &a.set).map_err(|e| e.in_agent(0, i))
    })
}

/// `A_l = sum_i delta_i x_i*(v)`, summed in agent order.
pub fn aggregate_local(pop: &PopulationSpec, v: &Vector, parallel: bool) -> Result<Vector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("incentive signal is not finite".into()));
    }
    let responses = best_responses(pop, v, parallel)?;
    let mut agg = Vector::zeros(v.len());
    for (x, d) in responses.iter().zip(&pop.delta) {
        agg.axpy(*d, x, 1.0);
    }
    Ok(agg)
}

/// `Gamma_l = -col(A_l, 2 A_l - x**)`
pub fn gamma_local(pop_aggregate: &Vector, xss: &Vector) -> Result<IncentiveState> {
    if pop_aggregate.len() != xss.len() {
        return Err(Error::dim("gamma_local", pop_aggregate.len(), xss.len()));
    }
    Ok(IncentiveState {
        sigma: -pop_aggregate,
        lambda: -(pop_aggregate * 2.0 - xss),
    })
}

pub(crate) fn tag_population(e: Error, l: usize) -> Error {
    match e {
        Error::Agent {
            iteration,
            agent,
            source,
            ..
        } => Error::Agent {
            iteration,
            population: l,
            agent,
            source,
        },
        other => other,
    }
}

/// Outcome of a sampled non-expansiveness probe of `T` in the P-norm.
#[derive(Clone, Debug, serde::Serialize)]
pub struct NonexpansiveProbe {
    pub eta: f64,
    pub pairs: usize,
    pub violations: usize,
    /// Largest `|T(y) - T(y')|_P - |y - y'|_P` seen.
    pub max_excess: f64,
    pub max_ratio: f64,
}

impl NonexpansiveProbe {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Range from which probe states are drawn: `sigma` uniform in the coupling
/// box, `lambda` uniform in `[-lambda_span, lambda_span]`.
pub fn default_lambda_span(config: &GameConfig) -> f64 {
    // The fixed point satisfies sigma = clamp(K (lambda - sigma)), so lambda
    // is of the order of sigma / K; double it for margin.
    let k_min = crate::game::min_eigenvalue(&config.k).max(1e-12);
    let s_max = config.coupling_upper.amax().max(config.coupling_lower.amax());
    let s_max = if s_max.is_finite() { s_max } else { 1.0 };
    2.0 * (s_max + s_max / k_min)
}

/// Checks `|T(y) - T(y')|_P <= |y - y'|_P + slack` on random pairs.
pub fn probe_nonexpansive(
    config: &GameConfig,
    pairs: usize,
    seed: u64,
    lambda_span: f64,
    slack: f64,
    parallel: bool,
) -> Result<NonexpansiveProbe> {
    let ctx = OperatorContext::new(config)?;
    let n = config.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = &config.coupling_lower;
    let hi = &config.coupling_upper;
    let draw = |rng: &mut ChaCha8Rng| {
        let sigma = Vector::from_fn(n, |t, _| {
            let (a, b) = (lo[t], if hi[t].is_finite() { hi[t] } else { lo[t] + 1.0 });
            if b > a {
                rng.gen_range(a..=b)
            } else {
                a
            }
        });
        let lambda = Vector::from_fn(n, |_, _| rng.gen_range(-lambda_span..=lambda_span));
        IncentiveState { sigma, lambda }
    };
    let samples: Vec<(IncentiveState, IncentiveState)> = (0..pairs).map(|_| (draw(&mut rng), draw(&mut rng))).collect();
    let outcomes = par::try_map_indexed(pairs, parallel, |i| {
        let (y1, y2) = &samples[i];
        let t1 = ctx.apply_t_global(y1, config, false)?;
        let t2 = ctx.apply_t_global(y2, config, false)?;
        let before = ctx.p_norm_state(&y1.sub(y2))?;
        let after = ctx.p_norm_state(&t1.sub(&t2))?;
        Ok::<_, Error>((before, after))
    })?;
    let mut probe = NonexpansiveProbe {
        eta: config.eta,
        pairs,
        violations: 0,
        max_excess: f64::NEG_INFINITY,
        max_ratio: 0.0,
    };
    for (before, after) in outcomes {
        let excess = after - before;
        probe.max_excess = probe.max_excess.max(excess);
        if before > 0.0 {
            probe.max_ratio = probe.max_ratio.max(after / before);
        }
        if excess > slack {
            probe.violations += 1;
        }
    }
    Ok(probe)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EtaProbe {
    /// Largest eta in the bracket that passed, if any.
    pub eta: Option<f64>,
    pub steps: Vec<NonexpansiveProbe>,
}

/// Bisects `[eta_min, eta_max]` (geometrically) for the largest eta whose
/// sampled non-expansiveness probe passes.
pub fn probe_eta(
    config: &GameConfig,
    eta_min: f64,
    eta_max: f64,
    bisection_steps: usize,
    pairs: usize,
    seed: u64,
    parallel: bool,
) -> Result<EtaProbe> {
    if !(eta_min > 0.0 && eta_max > eta_min) {
        return Err(Error::InvalidArgument(format!(
            "bad eta bracket [{eta_min}, {eta_max}]"
        )));
    }
    let span = default_lambda_span(config);
    let run = |eta: f64| {
        let mut cfg = config.clone();
        cfg.eta = eta;
        probe_nonexpansive(&cfg, pairs, seed, span, 1e-7, parallel)
    };
    let mut steps = Vec::new();
    let top = run(eta_max)?;
    let top_ok = top.passed();
    steps.push(top);
    if top_ok {
        return Ok(EtaProbe {
            eta: Some(eta_max),
            steps,
        });
    }
    let bottom = run(eta_min)?;
    let bottom_ok = bottom.passed();
    steps.push(bottom);
    if !bottom_ok {
        return Ok(EtaProbe { eta: None, steps });
    }
    let (mut good, mut bad) = (eta_min, eta_max);
    for _ in 0..bisection_steps {
        let mid = (good * bad).sqrt();
        let p = run(mid)?;
        if p.passed() {
            good = mid;
        } else {
            bad = mid;
        }
        steps.push(p);
    }
    Ok(EtaProbe { eta: Some(good), steps })
}

/// `|(1/L) sum_l x**(y_l) - x**(mean y)|_inf`; zero whenever no local point
/// straddles a face of the coupling box.
pub fn xss_average_gap(states: &[IncentiveState], ctx: &OperatorContext) -> Result<f64> {
    let mean = IncentiveState::mean(states)?;
    let mut avg = Vector::zeros(ctx.n());
    for s in states {
        avg += ctx.x_star_star(s)?;
    }
    avg /= states.len() as f64;
    Ok((avg - ctx.x_star_star(&mean)?).amax())
}

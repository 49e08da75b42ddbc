use aggregame::engine::{default_init, perturbation_pnorm, run_algorithm1, run_oracle};
use aggregame::ev::{build_default, default_game, desk_run_settings};
use aggregame::mappings::best_responses;
use aggregame::{
    AgentProfile, GameConfig, GraphSequence, IncentiveState, Matrix, OperatorContext, PopulationSpec, RunSettings,
    StepSchedule, Termination, Vector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: f64 = 0.5;
const K: f64 = 1.0;

fn two_slot_game(cap_first: f64) -> GameConfig {
    let agents = [(0.2, -0.1, 0.6), (0.0, 0.3, 0.8), (-0.2, 0.1, 1.0)]
        .iter()
        .map(|&(a, b, beta)| {
            AgentProfile::new(
                1.0,
                Vector::from_row_slice(&[a, b]),
                Vector::zeros(2),
                Vector::from_element(2, 1.0),
                beta,
            )
        })
        .collect();
    GameConfig {
        c: Matrix::identity(2, 2) * C,
        k: Matrix::identity(2, 2) * K,
        eta: 1.0,
        coupling_lower: Vector::zeros(2),
        coupling_upper: Vector::from_row_slice(&[cap_first, 10.0]),
        populations: vec![PopulationSpec::uniform(agents)],
        schedule: StepSchedule::power_from_first(0.9, 0.6, 0.0),
    }
}

/// First coordinate of the population aggregate under incentive `v`.
fn aggregate_first(cfg: &GameConfig, v: &Vector) -> f64 {
    let xs = best_responses(&cfg.populations[0], v, false).unwrap();
    xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64
}

fn bisect(mut lo: f64, mut hi: f64, decreasing: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if decreasing(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn mean_budget(cfg: &GameConfig) -> f64 {
    let agents = &cfg.populations[0].agents;
    agents.iter().map(|a| a.set.budget).sum::<f64>() / agents.len() as f64
}

fn converge(cfg: &GameConfig) -> IncentiveState {
    let settings = RunSettings {
        max_iterations: 200_000,
        stop_fixed_point_tol: 1e-11,
        ..RunSettings::default()
    };
    let r = run_oracle(cfg, &default_init(cfg, 0.0, 1)[0], &settings).unwrap();
    assert_eq!(r.termination, Termination::Converged);
    r.average_state
}

// At a fixed point sigma equals both the aggregate and the coupling point,
// so with slack caps lambda = sigma + sigma / K and the aggregate is a
// function of sigma alone; with budgets summing to beta_bar this is a
// scalar equation in sigma_1.
#[test]
fn slack_caps_match_scalar_root() {
    let cfg = two_slot_game(10.0);
    let beta = mean_budget(&cfg);
    let gain = C + K + 1.0;
    let s1 = bisect(0.0, beta, |s| {
        aggregate_first(&cfg, &Vector::from_row_slice(&[gain * s, gain * (beta - s)])) - s
    });
    let y = converge(&cfg);
    for (t, expected) in [s1, beta - s1].into_iter().enumerate() {
        assert!((y.sigma[t] - expected).abs() < 1e-6, "{} vs {expected}", y.sigma[t]);
        assert!((y.lambda[t] - expected * (1.0 + 1.0 / K)).abs() < 1e-6);
    }
}

// With the first cap binding, sigma_1 sits at the cap and lambda_1 is the
// price that makes the agents' aggregate land there.
#[test]
fn binding_cap_matches_scalar_root() {
    let cap = 0.25;
    let cfg = two_slot_game(cap);
    let beta = mean_budget(&cfg);
    let s2 = beta - cap;
    let lambda2 = s2 * (1.0 + 1.0 / K);
    let v2 = C * s2 + K * lambda2;
    let lambda1 = bisect(-10.0, 10.0, |l1| {
        aggregate_first(&cfg, &Vector::from_row_slice(&[C * cap + K * l1, v2])) - cap
    });
    // The cap is genuinely binding: the coupling point clamps at it.
    assert!(K * (lambda1 - cap) > cap);
    let y = converge(&cfg);
    assert!((y.sigma[0] - cap).abs() < 1e-6);
    assert!((y.sigma[1] - s2).abs() < 1e-6);
    assert!((y.lambda[0] - lambda1).abs() < 1e-6, "{} vs {lambda1}", y.lambda[0]);
    assert!((y.lambda[1] - lambda2).abs() < 1e-6);
}

#[test]
fn oracle_is_stationary_at_its_limit() {
    let cfg = two_slot_game(0.25);
    let y = converge(&cfg);
    let settings = RunSettings {
        max_iterations: 100,
        stop_fixed_point_tol: f64::MIN_POSITIVE,
        keep_history: true,
        ..RunSettings::default()
    };
    let r = run_oracle(&cfg, &y, &settings).unwrap();
    assert_eq!(r.history.len(), 100);
    for h in &r.history {
        assert!(h.max_abs_diff(&y) < 1e-10);
    }
}

// Every coordinator's local map equals the global one when the populations
// are copies of each other, so a start at the limit stays there.
#[test]
fn identical_populations_stay_at_the_limit() {
    let mut cfg = two_slot_game(0.25);
    cfg.populations = vec![cfg.populations[0].clone(); 3];
    let y = converge(&cfg);
    let settings = RunSettings {
        max_iterations: 100,
        stop_consensus_tol: f64::MIN_POSITIVE,
        stop_fixed_point_tol: f64::MIN_POSITIVE,
        ..RunSettings::default()
    };
    let r = run_algorithm1(&cfg, &GraphSequence::path(3), &vec![y; 3], &settings).unwrap();
    assert_eq!(r.trace.len(), 100);
    for rec in &r.trace.records {
        assert!(rec.consensus_residual <= 1e-8);
        assert!(rec.fixed_point_residual <= 1e-8);
    }
}

fn small_desk() -> GameConfig {
    let mut p = build_default();
    p.num_populations = 4;
    p.agents_per_population = 6;
    default_game(&p).unwrap()
}

#[test]
fn different_starts_reach_the_same_limit() {
    let cfg = small_desk();
    let seq = GraphSequence::path(4);
    let settings = desk_run_settings();
    let a = run_algorithm1(&cfg, &seq, &default_init(&cfg, 0.02, 1), &settings).unwrap();
    let b = run_algorithm1(&cfg, &seq, &default_init(&cfg, 0.02, 2), &settings).unwrap();
    assert_eq!(a.termination, Termination::Converged);
    assert_eq!(b.termination, Termination::Converged);
    assert!(a.average_state.max_abs_diff(&b.average_state) < 1e-5);
}

#[test]
fn perturbation_norm_two_ways() {
    let cfg = small_desk();
    let ctx = OperatorContext::new(&cfg).unwrap();
    let states = default_init(&cfg, 0.02, 5);
    let direct = perturbation_pnorm(&states, &cfg, &ctx).unwrap();

    // E = mean_l T_l(y_l) - T(mean y), measured through the Cholesky factor.
    let locals: Vec<IncentiveState> = states
        .iter()
        .zip(&cfg.populations)
        .map(|(y, p)| ctx.apply_t_local(y, p, false).unwrap())
        .collect();
    let mean_local = IncentiveState::mean(&locals).unwrap();
    let global = ctx
        .apply_t_global(&IncentiveState::mean(&states).unwrap(), &cfg, false)
        .unwrap();
    let e = mean_local.sub(&global).stacked();
    let via_cholesky = (ctx.p_cholesky().l().transpose() * &e).norm();
    assert!(direct > 0.0);
    assert!((direct - via_cholesky).abs() < 1e-12 * direct.max(1.0));

    // The first trace record carries the same number.
    let settings = RunSettings {
        max_iterations: 1,
        ..RunSettings::default()
    };
    let r = run_algorithm1(&cfg, &GraphSequence::path(4), &states, &settings).unwrap();
    assert!((r.trace.records[0].perturbation_pnorm - direct).abs() < 1e-15);
}

#[test]
fn canonical_form_preserves_vehicle_cost() {
    let params = build_default();
    let cfg = default_game(&params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let x = Vector::from_fn(14, |_, _| rng.gen_range(0.0..0.25));
        let sigma = Vector::from_fn(14, |_, _| rng.gen_range(0.0..0.1));
        let agent = &cfg.populations[0].agents[0];
        let v = &cfg.c * &sigma;
        let a = params.vehicle_cost(&x, &sigma);
        let b = agent.cost(&x, &v);
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn parallel_and_sequential_runs_are_bit_identical() {
    let cfg = small_desk();
    let init = default_init(&cfg, 0.02, 3);
    let base = RunSettings {
        max_iterations: 300,
        ..desk_run_settings()
    };
    let seq_settings = RunSettings {
        parallel: false,
        ..base.clone()
    };
    let a = run_algorithm1(&cfg, &GraphSequence::path(4), &init, &base).unwrap();
    let b = run_algorithm1(&cfg, &GraphSequence::path(4), &init, &seq_settings).unwrap();
    assert_eq!(a.final_states, b.final_states);
    assert_eq!(a.final_strategies, b.final_strategies);
    for (x, y) in a.trace.records.iter().zip(&b.trace.records) {
        let strip = |r: &aggregame::trace::IterationRecord| {
            (
                r.k,
                r.alpha.to_bits(),
                r.consensus_residual.to_bits(),
                r.fixed_point_residual.to_bits(),
                r.perturbation_pnorm.to_bits(),
            )
        };
        assert_eq!(strip(x), strip(y));
    }
}

#[test]
fn consensus_window_maxima_decrease() {
    let cfg = default_game(&build_default()).unwrap();
    let settings = RunSettings {
        max_iterations: 3050,
        ..desk_run_settings()
    };
    let r = run_algorithm1(&cfg, &GraphSequence::path(10), &default_init(&cfg, 0.01, 42), &settings).unwrap();
    let c = r.trace.consensus();
    let maxima: Vec<f64> = c[50..]
        .chunks(500)
        .map(|w| w.iter().copied().fold(0.0, f64::max))
        .collect();
    assert_eq!(maxima.len(), 6);
    for w in maxima.windows(2) {
        assert!(w[1] <= w[0], "{maxima:?}");
    }
    assert!(maxima[5] < 0.1 * maxima[0]);
}

use aggregame::projections::{
    kkt_violation, project_box, project_onto_set, solve_box_hyperplane_qp, solve_box_hyperplane_qp_diag,
    BoxHyperplaneSet,
};
use aggregame::Vector;
use proptest::prelude::*;

fn cost(quad: f64, lin: &Vector, x: &Vector) -> f64 {
    quad * x.dot(x) + lin.dot(x)
}

/// Minimizer by enumerating every assignment of each coordinate to its
/// lower bound, upper bound or the free set, solving the free coordinates
/// from the budget and keeping the best feasible candidate.
fn enumerate_active_sets(quad: f64, lin: &Vector, set: &BoxHyperplaneSet) -> Vector {
    let n = lin.len();
    let mut best: Option<(f64, Vector)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut x = Vector::zeros(n);
        let mut free = Vec::new();
        let mut c = code;
        for t in 0..n {
            match c % 3 {
                0 => x[t] = set.lower[t],
                1 => x[t] = set.upper[t],
                _ => free.push(t),
            }
            c /= 3;
        }
        let fixed: f64 = (0..n).filter(|t| !free.contains(t)).map(|t| x[t]).sum();
        if free.is_empty() {
            if (fixed - set.budget).abs() > 1e-12 {
                continue;
            }
        } else {
            // Stationarity on the free set: 2 quad x_t + lin_t + nu = 0.
            let sum_neg_lin: f64 = free.iter().map(|&t| -lin[t]).sum();
            let nu = (sum_neg_lin - 2.0 * quad * (set.budget - fixed)) / free.len() as f64;
            for &t in &free {
                x[t] = (-lin[t] - nu) / (2.0 * quad);
            }
        }
        if !set.contains(&x, 1e-12) {
            continue;
        }
        let f = cost(quad, lin, &x);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, x));
        }
    }
    best.expect("some active set is feasible").1
}

#[test]
fn matches_active_set_enumeration_at_n4() {
    let cases = [
        (1.0, [0.3, -0.2, 0.1, 0.0], [0.0; 4], [1.0; 4], 1.5),
        (0.5, [2.0, -2.0, 0.5, -0.5], [0.0; 4], [0.6; 4], 1.0),
        (0.004, [0.1, 0.12, 0.09, 0.15], [0.0; 4], [0.25; 4], 0.7),
        (2.0, [0.0; 4], [-1.0, 0.0, 0.5, -0.2], [1.0, 0.1, 0.6, 2.0], 0.9),
        (3.0, [1.0, 1.0, -1.0, 0.0], [-0.5; 4], [0.5; 4], -1.2),
    ];
    for (quad, lin, lo, hi, b) in cases {
        let lin = Vector::from_row_slice(&lin);
        let set = BoxHyperplaneSet::new(Vector::from_row_slice(&lo), Vector::from_row_slice(&hi), b).unwrap();
        let x = solve_box_hyperplane_qp(quad, &lin, &set).unwrap();
        let reference = enumerate_active_sets(quad, &lin, &set);
        assert!((&x - &reference).amax() < 1e-10, "{x} vs {reference}");
    }
}

#[test]
fn dense_grid_at_n2() {
    let set = BoxHyperplaneSet::new(
        Vector::from_row_slice(&[0.0, 0.2]),
        Vector::from_row_slice(&[0.9, 1.0]),
        1.1,
    )
    .unwrap();
    let lin = Vector::from_row_slice(&[0.4, -0.3]);
    let x = solve_box_hyperplane_qp(0.7, &lin, &set).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    let mut u = 0.1;
    while u <= 0.9 + 1e-12 {
        let f = cost(0.7, &lin, &Vector::from_row_slice(&[u, 1.1 - u]));
        if f < best.0 {
            best = (f, u);
        }
        u += 1e-4;
    }
    assert!((x[0] - best.1).abs() < 2e-4);
}

fn instance(n: usize) -> impl Strategy<Value = (f64, Vector, BoxHyperplaneSet)> {
    (
        0.01f64..5.0,
        prop::collection::vec(-2.0f64..2.0, n),
        prop::collection::vec(-1.0f64..1.0, n),
        prop::collection::vec(0.0f64..1.5, n),
        0.0f64..=1.0,
    )
        .prop_map(|(quad, lin, lo, width, frac)| {
            let lower = Vector::from_vec(lo);
            let upper = &lower + Vector::from_vec(width);
            let budget = lower.sum() + frac * (upper.sum() - lower.sum());
            let set = BoxHyperplaneSet::new(lower, upper, budget).unwrap();
            (quad, Vector::from_vec(lin), set)
        })
}

proptest! {
    #[test]
    fn solution_is_feasible_and_satisfies_kkt((quad, lin, set) in (1usize..16).prop_flat_map(instance)) {
        let x = solve_box_hyperplane_qp(quad, &lin, &set).unwrap();
        prop_assert!(set.contains(&x, 1e-9));
        prop_assert!(kkt_violation(quad, &lin, &set, &x, 1e-9) < 1e-7);
    }

    #[test]
    fn projection_is_idempotent((_, point, set) in (1usize..16).prop_flat_map(instance)) {
        let p = project_onto_set(&point, &set).unwrap();
        let pp = project_onto_set(&p, &set).unwrap();
        prop_assert!(set.contains(&p, 1e-9));
        prop_assert!((&p - &pp).amax() < 1e-10);
    }

    #[test]
    fn box_projection_is_idempotent(point in prop::collection::vec(-3.0f64..3.0, 1..10)) {
        let n = point.len();
        let (lo, hi) = (Vector::from_element(n, -1.0), Vector::from_element(n, 1.0));
        let p = project_box(&Vector::from_vec(point), &lo, &hi).unwrap();
        prop_assert_eq!(project_box(&p, &lo, &hi).unwrap(), p);
    }

    #[test]
    fn projection_beats_feasible_points((_, point, set) in (2usize..10).prop_flat_map(instance), mix in 0.0f64..1.0) {
        // Any other feasible point is at least as far from the target.
        let p = project_onto_set(&point, &set).unwrap();
        let other = project_onto_set(&(&point * mix + &set.upper * (1.0 - mix)), &set).unwrap();
        prop_assert!((&point - &p).norm() <= (&point - &other).norm() + 1e-9);
    }

    #[test]
    fn uniform_diagonal_matches_scalar((quad, lin, set) in (1usize..16).prop_flat_map(instance)) {
        let scalar = solve_box_hyperplane_qp(quad, &lin, &set).unwrap();
        let diag = solve_box_hyperplane_qp_diag(&Vector::from_element(lin.len(), quad), &lin, &set).unwrap();
        prop_assert!((&scalar - &diag).amax() < 1e-9);
    }
}

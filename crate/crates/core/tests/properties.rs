use gsqg::conv::GridConvolver;
use gsqg::evolution::{advect_step, AdvectConfig, Interp, VelocityField};
use gsqg::fields::{
    default_levels, impulse, lp_norm, mass, orbital_distance, rearrangement_equimeasurable, shifted_distance,
    steiner_symmetrize_x2, weak_closure_membership, Field2D, Grid2D, Norm, ShiftSearch,
};
use gsqg::io::{field_from_str, field_to_string};
use gsqg::kernels::{kernel_free, kernel_halfplane, potential_free, potential_halfplane, riesz_constant, KernelParams};
use gsqg::profiles::{d0, d0_objective, PowerProfile, Profile};
use proptest::prelude::*;

/// `ln Γ` by upward recurrence and the Stirling series.
fn ln_gamma_stirling(x: f64) -> f64 {
    let shift = 10.0;
    let z = x + shift;
    let series = (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * z)
        - 1.0 / (360.0 * z.powi(3))
        + 1.0 / (1260.0 * z.powi(5))
        - 1.0 / (1680.0 * z.powi(7));
    series - (0..10).map(|k| (x + k as f64).ln()).sum::<f64>()
}

#[test]
fn riesz_constant_matches_stirling_oracle() {
    for s in [0.75, 0.3, 0.9] {
        let want = (ln_gamma_stirling(1.0 - s) - ln_gamma_stirling(s)).exp() / (4f64.powf(s) * std::f64::consts::PI);
        let got = riesz_constant(s).unwrap();
        assert!(((got - want) / want).abs() < 1e-12, "s = {s}: {got} vs {want}");
    }
}

fn half_plane_point() -> impl Strategy<Value = [f64; 2]> {
    (0.01f64..3.0, -3.0f64..3.0).prop_map(|(a, b)| [a, b])
}

/// Non-negative field on a right-half-plane grid from a flat vector of cell values.
fn field_on(g: Grid2D<f64>, raw: &[f64]) -> Field2D<f64> {
    Field2D::from_values(g, raw.iter().map(|v| v.max(0.0)).collect()).unwrap()
}

fn small_grid() -> Grid2D<f64> {
    Grid2D::new(12, 10, 0.1, 1.3, -0.5, 0.5).unwrap()
}

fn cell_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![2 => Just(0.0), 3 => 0.0f64..4.0], n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn halfplane_kernel_is_symmetric(x in half_plane_point(), y in half_plane_point(), s in 0.05f64..0.95) {
        prop_assume!(x != y);
        let p = KernelParams::new(s).unwrap();
        prop_assert_eq!(kernel_halfplane(x, y, &p).unwrap(), kernel_halfplane(y, x, &p).unwrap());
    }

    #[test]
    fn free_kernel_is_homogeneous(z in half_plane_point(), lam in 0.01f64..50.0, s in 0.05f64..0.95) {
        let p = KernelParams::new(s).unwrap();
        let lhs = kernel_free([lam * z[0], lam * z[1]], &p).unwrap();
        let rhs = lam.powf(2.0 * s - 2.0) * kernel_free(z, &p).unwrap();
        prop_assert!(((lhs - rhs) / rhs).abs() < 1e-13);
    }

    #[test]
    fn halfplane_potential_vanishes_on_the_wall(raw in cell_values(120), t in -2.0f64..2.0) {
        let f = field_on(small_grid(), &raw);
        let p = KernelParams::new(0.5).unwrap();
        prop_assert_eq!(potential_halfplane(&f, &[[0.0, t]], &p).unwrap()[0], 0.0);
    }

    #[test]
    fn free_potential_is_linear(a in cell_values(120), b in cell_values(120), ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let g = small_grid();
        let fa = Field2D::from_values(g, a.clone()).unwrap();
        let fb = Field2D::from_values(g, b.clone()).unwrap();
        let comb = Field2D::from_values(g, a.iter().zip(&b).map(|(x, y)| ca * x + cb * y).collect()).unwrap();
        let p = KernelParams::new(0.5).unwrap();
        let targets = [[0.37, 0.11], [1.9, -0.4], [0.15, 0.45]];
        let pa = potential_free(&fa, &targets, &p);
        let pb = potential_free(&fb, &targets, &p);
        let pc = potential_free(&comb, &targets, &p);
        let scale = pa.iter().chain(&pb).fold(1.0f64, |m, v| m.max(v.abs())) * (ca.abs() + cb.abs() + 1.0);
        for k in 0..targets.len() {
            prop_assert!((pc[k] - ca * pa[k] - cb * pb[k]).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn steiner_is_idempotent_and_preserves_norms(raw in cell_values(120)) {
        let f = field_on(small_grid(), &raw);
        let once = steiner_symmetrize_x2(&f).unwrap();
        let twice = steiner_symmetrize_x2(&once).unwrap();
        prop_assert_eq!(&once.values, &twice.values);
        prop_assert!(rearrangement_equimeasurable(&once, &f, 0.0).unwrap());
        // Column sums are reordered sums of the same terms, so compare sorted values.
        let mut a = f.values.clone();
        let mut b = once.values.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        for norm in [Norm::L1, Norm::L2, Norm::Lp(3.0), Norm::Inf] {
            let (x, y) = (lp_norm(&f, norm), lp_norm(&once, norm));
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn steiner_does_not_lower_halfplane_energy(raw in cell_values(120)) {
        let f = field_on(small_grid(), &raw);
        let st = steiner_symmetrize_x2(&f).unwrap();
        let conv = GridConvolver::half_plane(&f.grid, &KernelParams::new(0.5).unwrap()).unwrap();
        let energy = |z: &Field2D<f64>| {
            let psi = conv.halfplane_potential(&z.values).unwrap();
            z.values.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>()
        };
        let (e0, e1) = (energy(&f), energy(&st));
        prop_assert!(e1 >= e0 - 1e-10 * e0.abs(), "{} -> {}", e0, e1);
    }

    #[test]
    fn weak_closure_is_reflexive(raw in cell_values(120)) {
        let f = field_on(small_grid(), &raw);
        let levels = default_levels(&f);
        for r in weak_closure_membership(&f, &f, &levels, 0.0) {
            prop_assert!(r.pass);
            prop_assert_eq!(r.candidate_excess, r.reference_excess);
        }
    }

    #[test]
    fn orbital_distance_never_exceeds_zero_shift(a in cell_values(120), b in cell_values(120)) {
        let g = small_grid();
        let (x, w) = (field_on(g, &a), field_on(g, &b));
        let d = orbital_distance(&x, &w, ShiftSearch::around(0, 3)).unwrap();
        prop_assert!(d.value <= shifted_distance(&x, &w, 0.0).unwrap());
    }

    #[test]
    fn impulse_moves_with_the_grid(raw in cell_values(120), di in -20i64..20) {
        let f = field_on(small_grid(), &raw);
        let moved = Field2D { grid: f.grid.shifted_cells(di, 0), ..f.clone() };
        let want = impulse(&f) + di as f64 * f.grid.h1 * mass(&f);
        prop_assert!((impulse(&moved) - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn power_profile_identities(p in 0.2f64..1.9, t in 1e-6f64..50.0) {
        let s = 0.5;
        prop_assume!(p < 1.0 / (1.0 - s));
        let pr = PowerProfile::canonical(p, s).unwrap();
        let back = pr.f(pr.f_inv(t));
        prop_assert!(((back - t) / t).abs() < 1e-12);
        // With the canonical L, J' = f⁻¹.
        let jp = pr.j_prime(pr.f(t));
        prop_assert!(((jp - t) / t).abs() < 1e-10);
    }

    #[test]
    fn d0_minimizes_the_point_pair_objective(s in 0.05f64..0.95, kappa in 0.1f64..10.0, w in 0.1f64..10.0) {
        let d = d0(s, kappa, w).unwrap();
        let h = |t: f64| d0_objective(t, s, kappa, w).unwrap();
        prop_assert!(h(d) < h(d * 1.01) && h(d) < h(d * 0.99));
    }

    #[test]
    fn field_text_round_trip_is_exact(raw in prop::collection::vec(-1e10f64..1e10, 120)) {
        let f = Field2D::from_values(small_grid(), raw).unwrap();
        let back: Field2D<f64> = field_from_str(&field_to_string(&f)).unwrap();
        prop_assert_eq!(back, f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn advection_keeps_sign_and_sup(raw in cell_values(400), k1 in -3.0f64..3.0, k2 in -3.0f64..3.0, dt in 0.01f64..0.2) {
        let g = Grid2D::new(20, 20, -1.0, 1.0, -1.0, 1.0).unwrap();
        let f = field_on(g, &raw);
        // Cellular flow from ψ = k₁ sin 2x₁ sin 3x₂ plus a uniform drift k₂ along x₂.
        let u = VelocityField::from_fn(g, |a, b| {
            [3.0 * k1 * (2.0 * a).sin() * (3.0 * b).cos(), -2.0 * k1 * (2.0 * a).cos() * (3.0 * b).sin() + k2]
        });
        for cfg in [AdvectConfig::default(), AdvectConfig::plain(Interp::Bilinear)] {
            let (out, _) = advect_step(&f, &u, dt, &cfg).unwrap();
            prop_assert!(out.min_value() >= -1e-14);
            prop_assert!(out.max_value() <= f.max_value());
        }
    }
}

/// Potential of a smooth bump at fixed targets on `n²` cells.
fn bump_potential(n: usize) -> Vec<f64> {
    let g = Grid2D::new(n, n, -1.0, 1.0, -1.0, 1.0).unwrap();
    let f = Field2D::from_fn(g, |a: f64, b: f64| (1.0 - (a * a + b * b) / 0.64).max(0.0).powi(3));
    let targets = [[0.31, 0.17], [-0.52, 0.05], [1.7, 0.4], [0.013, -0.29]];
    potential_free(&f, &targets, &KernelParams::new(0.5).unwrap())
}

#[test]
fn quadrature_converges_under_refinement() {
    let p: Vec<Vec<f64>> = [32, 64, 128].iter().map(|&n| bump_potential(n)).collect();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let d1 = diff(&p[0], &p[1]);
    let d2 = diff(&p[1], &p[2]);
    assert!(d1 >= 1.5 * d2, "{d1} then {d2}");
}

#[test]
fn potentials_do_not_depend_on_thread_count() {
    let g = Grid2D::new(48, 40, 0.05, 1.25, -0.5, 0.5).unwrap();
    let f = Field2D::from_fn(g, |a: f64, b: f64| ((a * 7.0).sin() * (b * 5.0).cos()).abs());
    let p = KernelParams::new(0.4).unwrap();
    let targets: Vec<[f64; 2]> = (0..g.len()).step_by(7).map(|k| g.center(k)).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let conv = GridConvolver::half_plane(&g, &p).unwrap();
            (potential_halfplane(&f, &targets, &p).unwrap(), conv.halfplane_potential(&f.values).unwrap())
        })
    };
    assert_eq!(run(1), run(3));
}

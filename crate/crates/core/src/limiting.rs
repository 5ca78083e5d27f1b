//! Whole-plane limiting problem: the radial ground state `ω₀`, its multiplier
//! `μ₀`, the integral identities it satisfies and the linearized operator.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::conv::GridConvolver;
use crate::error::{GsqgError, Result};
use crate::fields::{Field2D, Grid2D, RadialField};
use crate::fixed_point::{
    bisect_multiplier, iterate_fixed_point, renormalize, FixedPoint, FixedPointProblem, FixedPointSettings,
};
use crate::kernels::{potential_free, KernelParams};
use crate::profiles::{identity_coefficients, PowerProfile, Profile};
use crate::real::{lit, pairwise_sum, pos, Real};
use crate::special::integrate_adaptive;

/// `E₀(ω) = ½∫ω 𝒢ω − ∫J(ω)` with the potential from [`potential_free`] at
/// the cell centres.
pub fn energy_e0<T: Real>(field: &Field2D<T>, profile: &dyn Profile<T>, params: &KernelParams<T>) -> T {
    let targets: Vec<[T; 2]> = (0..field.grid.len()).map(|k| field.grid.center(k)).collect();
    let psi = potential_free(field, &targets, params);
    energy_from_potential(field, &psi, profile)
}

/// Same functional with the potential from a precomputed convolver.
pub fn energy_e0_with<T: Real>(field: &Field2D<T>, profile: &dyn Profile<T>, conv: &GridConvolver<T>) -> T {
    let psi = conv.free_potential(&field.values);
    energy_from_potential(field, &psi, profile)
}

pub(crate) fn energy_from_potential<T: Real>(field: &Field2D<T>, psi: &[T], profile: &dyn Profile<T>) -> T {
    let area = field.grid.cell_area();
    let quad: Vec<T> = field.values.iter().zip(psi).map(|(w, p)| *w * *p).collect();
    let j: Vec<T> = field.values.iter().map(|w| profile.j(*w)).collect();
    (lit::<T>(0.5) * pairwise_sum(&quad) - pairwise_sum(&j)) * area
}

/// `∫_{|y|<R} |x−y|^{2s−2} dy` for `|x| = r`.
pub fn disk_integral(r: f64, big_r: f64, s: f64) -> f64 {
    if big_r <= 0.0 {
        return 0.0;
    }
    let two_s = 2.0 * s;
    let tol = 1e-14 * big_r.powf(two_s);
    if r == 0.0 {
        return std::f64::consts::PI * big_r.powf(two_s) / s;
    }
    if r < big_r {
        // Distance from x to the circle along each direction.
        let f = |th: f64| {
            let (sn, cs) = th.sin_cos();
            let root = (big_r * big_r - r * r * sn * sn).sqrt();
            let rho = if cs > 0.0 { (big_r * big_r - r * r) / (root + r * cs) } else { root - r * cs };
            rho.powf(two_s)
        };
        integrate_adaptive(f, 0.0, std::f64::consts::PI, tol, 1e-13, 2000).0 / s
    } else {
        // Chord parametrized by sinθ = (R/r) sinφ.
        let f = |ph: f64| {
            let (sp, cp) = ph.sin_cos();
            let st = big_r / r * sp;
            let ct = (1.0 - st * st).sqrt();
            let far = r * ct + big_r * cp;
            let near = (r * r - big_r * big_r) / far;
            (far.powf(two_s) - near.powf(two_s)) * big_r * cp / (r * ct)
        };
        integrate_adaptive(f, 0.0, std::f64::consts::FRAC_PI_2, tol, 1e-13, 2000).0 / s
    }
}

/// `∬_{B₁×B₁} |x−y|^{2s−2}`.
pub fn unit_disk_self_interaction(s: f64) -> f64 {
    let f = |rho: f64| 2.0 * std::f64::consts::PI * rho * disk_integral(rho, 1.0, s);
    integrate_adaptive(f, 0.0, 1.0, 1e-12, 1e-11, 400).0
}

/// Collocation matrix of `𝒢` on radial piecewise-constant densities: node
/// `k` at the annulus midpoint, exact disk integrals for each annulus.
#[derive(Clone, Debug)]
pub struct RadialOperator<T> {
    pub nr: usize,
    pub rmax: T,
    pub params: KernelParams<T>,
    matrix: Vec<T>,
}

impl<T: Real> RadialOperator<T> {
    pub fn new(params: KernelParams<T>, nr: usize, rmax: T) -> Result<Self> {
        if nr < 2 || !(rmax > T::zero()) {
            return Err(GsqgError::Parameter("radial operator needs nr >= 2 and rmax > 0".into()));
        }
        let s = params.s.f64();
        let cs = params.c_s.f64();
        let dr = rmax.f64() / nr as f64;
        let rows: Vec<Vec<T>> = (0..nr)
            .into_par_iter()
            .map(|k| {
                let r = (k as f64 + 0.5) * dr;
                let d: Vec<f64> = (0..=nr).map(|j| disk_integral(r, j as f64 * dr, s)).collect();
                d.windows(2).map(|w| lit(cs * (w[1] - w[0]))).collect()
            })
            .collect();
        Ok(Self { nr, rmax, params, matrix: rows.concat() })
    }

    pub fn apply(&self, values: &[T]) -> Vec<T> {
        self.matrix
            .par_chunks(self.nr)
            .map(|row| {
                let t: Vec<T> = row.iter().zip(values).map(|(m, v)| *m * *v).collect();
                pairwise_sum(&t)
            })
            .collect()
    }

    fn shell(&self) -> RadialField<T> {
        RadialField { nr: self.nr, rmax: self.rmax, values: vec![T::zero(); self.nr] }
    }

    pub fn areas(&self) -> Vec<T> {
        let sh = self.shell();
        (0..self.nr).map(|k| sh.area(k)).collect()
    }
}

/// Solver settings for [`solve_limiting`].
#[derive(Clone, Debug)]
pub struct LimitingOptions<T> {
    pub nr: usize,
    pub tol: T,
    pub max_iter: usize,
    /// Damping used when an accelerated step is rejected.
    pub theta: T,
    pub anderson_depth: usize,
    /// Fixed outer radius; chosen from a coarse run when `None`.
    pub rmax: Option<T>,
    /// Final `rmax` as a multiple of the coarse support radius.
    pub rmax_factor: T,
    pub coarse_nr: usize,
}

impl<T: Real> Default for LimitingOptions<T> {
    fn default() -> Self {
        Self {
            nr: 256,
            tol: lit(1e-6),
            max_iter: 2000,
            theta: lit(0.5),
            anderson_depth: 8,
            rmax: None,
            rmax_factor: lit(1.4),
            coarse_nr: 96,
        }
    }
}

/// Converged radial ground state.
#[derive(Clone, Debug)]
pub struct LimitingSolution<T> {
    pub profile: PowerProfile<T>,
    pub params: KernelParams<T>,
    pub kappa: T,
    pub omega0: RadialField<T>,
    /// `𝒢ω₀` at the radial nodes.
    pub psi0: Vec<T>,
    pub mu0: T,
    pub e0: T,
    pub support_radius: T,
    pub iterations: usize,
    pub converged: bool,
    pub energy_trace: Vec<T>,
    pub residuals: BTreeMap<String, T>,
    /// `∫ω₀𝒢ω₀` and `∫J(ω₀)`.
    pub quad_integral: T,
    pub j_integral: T,
}

/// JSON summary of a limiting run.
#[derive(Clone, Debug, Serialize)]
pub struct LimitingReport {
    pub s: f64,
    pub p: f64,
    pub kappa: f64,
    pub mu0: f64,
    #[serde(rename = "E0")]
    pub e0: f64,
    pub support_radius: f64,
    pub virial_residual: f64,
    pub multiplier_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> LimitingSolution<T> {
    pub fn report(&self) -> LimitingReport {
        LimitingReport {
            s: self.params.s.f64(),
            p: self.profile.p.f64(),
            kappa: self.kappa.f64(),
            mu0: self.mu0.f64(),
            e0: self.e0.f64(),
            support_radius: self.support_radius.f64(),
            virial_residual: virial_residual(self).f64(),
            multiplier_residual: multiplier_residual(self).f64(),
            iterations: self.iterations,
            converged: self.converged,
        }
    }

    /// `ψ₀(r)` by interpolation between nodes and `r^{2s−2}` decay beyond.
    pub fn psi_at(&self, r: T) -> T {
        let dr = self.omega0.dr();
        let n = self.omega0.nr;
        let q = r / dr - lit(0.5);
        if q <= T::zero() {
            return self.psi0[0];
        }
        let k = q.floor().f64() as usize;
        if k + 1 >= n {
            let rl = self.omega0.r(n - 1);
            return self.psi0[n - 1] * (r / rl).powf(self.params.alpha());
        }
        let t = q - T::from_usize_lossy(k);
        self.psi0[k] * (T::one() - t) + self.psi0[k + 1] * t
    }

    /// `ω₀` sampled on a grid centred at the origin.
    pub fn to_field2d(&self, grid: Grid2D<T>) -> Field2D<T> {
        self.omega0.to_field2d(grid, T::zero(), T::zero())
    }
}

/// Uniform patch radius maximizing `E₀` within the patch family, scanned over
/// powers of two.
pub fn trial_patch_radius<T: Real>(profile: &PowerProfile<T>, kappa: T) -> Result<(T, T)> {
    let s = profile.s.f64();
    let cs = crate::kernels::riesz_constant(s)?;
    let i1 = unit_disk_self_interaction(s);
    let k = kappa.f64();
    let energy = |r: f64| {
        let h = k / (std::f64::consts::PI * r * r);
        0.5 * cs * h * h * i1 * r.powf(2.0 + 2.0 * s) - std::f64::consts::PI * r * r * profile.j(lit(h)).f64()
    };
    let best = (-20..=20).map(|e| 2f64.powi(e)).map(|r| (r, energy(r))).fold((f64::NAN, f64::NEG_INFINITY), |b, c| {
        if c.1 > b.1 {
            c
        } else {
            b
        }
    });
    if !(best.1 > 0.0) {
        return Err(GsqgError::Degenerate("no trial patch with positive energy".into()));
    }
    Ok((lit(best.0), lit(best.1)))
}

fn run_radial<T: Real>(
    profile: &PowerProfile<T>,
    params: KernelParams<T>,
    kappa: T,
    nr: usize,
    rmax: T,
    init: &dyn Fn(T) -> T,
    opts: &LimitingOptions<T>,
) -> Result<(RadialOperator<T>, FixedPoint<T>)> {
    let op = RadialOperator::new(params, nr, rmax)?;
    let areas = op.areas();
    let shell = op.shell();
    let x0: Vec<T> = (0..nr).map(|k| init(shell.r(k))).collect();
    let x0 = renormalize(x0, &areas, kappa);
    let potential = |w: &[T]| op.apply(w);
    let problem = FixedPointProblem {
        weights: &areas,
        kappa,
        profile,
        potential: &potential,
        linear: None,
        mask: None,
        hook: None,
    };
    let settings =
        FixedPointSettings { tol: opts.tol, max_iter: opts.max_iter, theta: opts.theta, depth: opts.anderson_depth };
    let fp = iterate_fixed_point(x0, &problem, &settings)?;
    Ok((op, fp))
}

/// Maximizes `E₀` over radial densities of mass `κ`.
pub fn solve_limiting<T: Real>(
    profile: &PowerProfile<T>,
    kappa: T,
    opts: &LimitingOptions<T>,
) -> Result<LimitingSolution<T>> {
    if !(kappa > T::zero()) {
        return Err(GsqgError::Parameter(format!("kappa = {kappa} violates kappa > 0")));
    }
    let params = KernelParams::new(profile.s)?;
    let (r_patch, _) = trial_patch_radius(profile, kappa)?;
    let patch = |r: T| if r < r_patch { T::one() } else { T::zero() };
    let edge = lit::<T>(0.9);

    let (rmax, start): (T, Vec<(T, T)>) = match opts.rmax {
        Some(r) => (r, Vec::new()),
        None => {
            let mut rc = r_patch * lit(3.0);
            let mut tries = 0;
            loop {
                let (op, fp) = run_radial(profile, params, kappa, opts.coarse_nr, rc, &patch, opts)?;
                let rad = RadialField { nr: op.nr, rmax: op.rmax, values: fp.omega };
                let supp = rad.support_radius();
                if supp < edge * rc {
                    let pts = (0..rad.nr).map(|k| (rad.r(k), rad.values[k])).collect();
                    break (supp * opts.rmax_factor, pts);
                }
                tries += 1;
                if tries > 4 {
                    return Err(GsqgError::DomainTooSmall(format!("coarse support {supp} reaches rmax {rc}")));
                }
                rc = rc + rc;
            }
        }
    };

    let coarse = start;
    let init = |r: T| {
        if coarse.is_empty() {
            return patch(r);
        }
        let i = coarse.partition_point(|(rk, _)| *rk < r);
        if i == 0 {
            coarse[0].1
        } else if i >= coarse.len() {
            T::zero()
        } else {
            let (r0, v0) = coarse[i - 1];
            let (r1, v1) = coarse[i];
            v0 + (v1 - v0) * (r - r0) / (r1 - r0)
        }
    };
    let mut rmax = rmax;
    let mut doubled = false;
    let (op, fp) = loop {
        let (op, fp) = run_radial(profile, params, kappa, opts.nr, rmax, &init, opts)?;
        let supp = RadialField { nr: op.nr, rmax: op.rmax, values: fp.omega.clone() }.support_radius();
        if supp < edge * rmax {
            break (op, fp);
        }
        if doubled {
            return Err(GsqgError::DomainTooSmall(format!("support {supp} reaches 0.9 rmax = {}", edge * rmax)));
        }
        doubled = true;
        rmax = rmax + rmax;
    };
    finish(profile, params, kappa, op, fp)
}

fn finish<T: Real>(
    profile: &PowerProfile<T>,
    params: KernelParams<T>,
    kappa: T,
    op: RadialOperator<T>,
    fp: FixedPoint<T>,
) -> Result<LimitingSolution<T>> {
    let areas = op.areas();
    let omega0 = RadialField::new(op.nr, op.rmax, fp.omega)?;
    let psi0 = op.apply(&omega0.values);
    let quad: Vec<T> = (0..op.nr).map(|k| areas[k] * omega0.values[k] * psi0[k]).collect();
    let jv: Vec<T> = (0..op.nr).map(|k| areas[k] * profile.j(omega0.values[k])).collect();
    let a = pairwise_sum(&quad);
    let b = pairwise_sum(&jv);
    let e0 = lit::<T>(0.5) * a - b;
    let support_radius = omega0.support_radius();
    let mut sol = LimitingSolution {
        profile: *profile,
        params,
        kappa,
        omega0,
        psi0,
        mu0: fp.mu,
        e0,
        support_radius,
        iterations: fp.iterations,
        converged: true,
        energy_trace: fp.trace,
        residuals: BTreeMap::new(),
        quad_integral: a,
        j_integral: b,
    };
    let (moment, energy, agreement) = multiplier_parts(&sol)?;
    let fixed = fixed_point_residual(&sol, &op)?;
    sol.residuals.insert("fixed_point".into(), fixed);
    sol.residuals.insert("virial".into(), virial_residual(&sol));
    sol.residuals.insert("multiplier_moment".into(), moment);
    sol.residuals.insert("multiplier_energy".into(), energy);
    sol.residuals.insert("multiplier_agreement".into(), agreement);
    sol.residuals.insert("mass".into(), ((sol.omega0.mass() - kappa) / kappa).abs());
    Ok(sol)
}

fn fixed_point_residual<T: Real>(sol: &LimitingSolution<T>, op: &RadialOperator<T>) -> Result<T> {
    let areas = op.areas();
    let (_, g) = bisect_multiplier(&sol.psi0, &areas, sol.kappa, &sol.profile)?;
    let t: Vec<T> = (0..op.nr).map(|k| (g[k] - sol.omega0.values[k]).abs() * areas[k]).collect();
    Ok(pairwise_sum(&t) / sol.kappa)
}

/// `|(s−1)A − (2−2γ)B| / (|(s−1)A| + |(2−2γ)B|)`, `A = ∫ω₀𝒢ω₀`, `B = ∫J(ω₀)`.
pub fn virial_residual<T: Real>(sol: &LimitingSolution<T>) -> T {
    virial_from_integrals(sol.params.s, sol.profile.gamma(), sol.quad_integral, sol.j_integral)
}

pub fn virial_from_integrals<T: Real>(s: T, gamma: T, a: T, b: T) -> T {
    let two = lit::<T>(2.0);
    let u = (s - T::one()) * a;
    let v = (two - two * gamma) * b;
    let den = u.abs() + v.abs();
    if den == T::zero() {
        return T::zero();
    }
    (u - v).abs() / den
}

/// Relative mismatches of `κμ₀ = A − γB` and `κμ₀ = A_γE₀`, and of the two
/// right-hand sides with each other.
pub fn multiplier_parts<T: Real>(sol: &LimitingSolution<T>) -> Result<(T, T, T)> {
    let gamma = sol.profile.gamma();
    let (a_g, _, _) = identity_coefficients(sol.params.s, gamma)?;
    let km = sol.kappa * sol.mu0;
    let moment = sol.quad_integral - gamma * sol.j_integral;
    let energy = a_g * sol.e0;
    let den = km.abs();
    Ok(((km - moment).abs() / den, (km - energy).abs() / den, (moment - energy).abs() / den))
}

/// Larger of the two multiplier mismatches.
pub fn multiplier_residual<T: Real>(sol: &LimitingSolution<T>) -> T {
    match multiplier_parts(sol) {
        Ok((a, b, _)) => a.max(b),
        Err(_) => T::infinity(),
    }
}

/// Which form of the linearized operator to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearizedForm {
    /// Coefficient at level `κ⁻¹A_γE₀` with the mean term `κ⁻¹A_γμ₀∫φ`.
    WithMean,
    /// Coefficient at level `μ₀`, no mean term; annihilates `∂ω₀`.
    Kernel,
}

/// `ℒ₀` discretized on a grid centred at the origin.
pub struct LinearizedOperator<T: Real> {
    pub grid: Grid2D<T>,
    pub form: LinearizedForm,
    /// `pL_γ(ψ₀ − level)₊^{p−1}` per cell.
    pub coefficient: Vec<T>,
    pub mean_factor: T,
    conv: GridConvolver<T>,
}

impl<T: Real> LinearizedOperator<T> {
    pub fn new(sol: &LimitingSolution<T>, grid: Grid2D<T>, form: LinearizedForm) -> Result<Self> {
        let p = sol.profile.p;
        if !(p > T::one()) {
            return Err(GsqgError::Regime(format!("linearized operator needs p > 1 (got {p})")));
        }
        let (a_g, _, _) = identity_coefficients(sol.params.s, sol.profile.gamma())?;
        let (level, mean_factor) = match form {
            LinearizedForm::WithMean => (a_g * sol.e0 / sol.kappa, a_g * sol.mu0 / sol.kappa),
            LinearizedForm::Kernel => (sol.mu0, T::zero()),
        };
        let lg = sol.profile.l_gamma();
        let coefficient = (0..grid.len())
            .map(|k| {
                let c = grid.center(k);
                let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
                p * lg * pos(sol.psi_at(r) - level).powf(p - T::one())
            })
            .collect();
        let conv = GridConvolver::free(&grid, &sol.params);
        Ok(Self { grid, form, coefficient, mean_factor, conv })
    }

    /// Scales the coefficient (zero gives the identity).
    pub fn scale_coefficient(&mut self, a: T) {
        self.coefficient.iter_mut().for_each(|c| *c = *c * a);
    }

    pub fn apply_values(&self, phi: &[T]) -> Vec<T> {
        let g = self.conv.free_potential(phi);
        let mean = self.mean_factor * pairwise_sum(phi) * self.grid.cell_area();
        phi.iter().zip(&g).zip(&self.coefficient).map(|((f, u), c)| *f - *c * (*u - mean)).collect()
    }

    /// Transpose with respect to the cell inner product.
    fn apply_transpose_values(&self, v: &[T]) -> Vec<T> {
        let cv: Vec<T> = v.iter().zip(&self.coefficient).map(|(a, c)| *a * *c).collect();
        let g = self.conv.free_potential(&cv);
        let tot = pairwise_sum(&cv) * self.grid.cell_area() * self.mean_factor;
        v.iter().zip(&g).map(|(a, u)| *a - *u + tot).collect()
    }

    pub fn apply(&self, phi: &Field2D<T>) -> Result<Field2D<T>> {
        if !phi.grid.same_as(&self.grid) {
            return Err(GsqgError::Incompatible("phi lives on a different grid".into()));
        }
        Field2D::from_values(self.grid, self.apply_values(&phi.values))
    }
}

/// `ℒ₀φ` with the operator assembled on `φ`'s grid (centred at the origin).
pub fn linearized_apply<T: Real>(phi: &Field2D<T>, sol: &LimitingSolution<T>) -> Result<Field2D<T>> {
    LinearizedOperator::new(sol, phi.grid, LinearizedForm::WithMean)?.apply(phi)
}

/// Centered-difference `∂ω₀/∂x_axis` on the grid, `axis ∈ {0, 1}`.
pub fn translational_mode<T: Real>(omega: &Field2D<T>, axis: usize) -> Field2D<T> {
    let g = omega.grid;
    let mut out = vec![T::zero(); g.len()];
    let h = if axis == 0 { g.h1 } else { g.h2 };
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (a, b) = if axis == 0 {
                (
                    if i + 1 < g.nx { omega.at(i + 1, j) } else { T::zero() },
                    if i > 0 { omega.at(i - 1, j) } else { T::zero() },
                )
            } else {
                (
                    if j + 1 < g.ny { omega.at(i, j + 1) } else { T::zero() },
                    if j > 0 { omega.at(i, j - 1) } else { T::zero() },
                )
            };
            out[g.idx(i, j)] = (a - b) / (h + h);
        }
    }
    Field2D { grid: g, values: out, nonneg: false }
}

/// `‖ℒφ‖₂/‖φ‖₂` for `φ = ∂ω₀/∂x_axis` with the kernel form of the operator.
pub fn kernel_direction_residual<T: Real>(sol: &LimitingSolution<T>, n: usize, axis: usize) -> Result<T> {
    let a = sol.support_radius * lit(1.15);
    let grid = Grid2D::centered(n, T::zero(), T::zero(), a)?;
    let op = LinearizedOperator::new(sol, grid, LinearizedForm::Kernel)?;
    let phi = translational_mode(&sol.to_field2d(grid), axis);
    let out = op.apply_values(&phi.values);
    Ok(l2(&out) / l2(&phi.values))
}

fn l2<T: Real>(v: &[T]) -> T {
    let t: Vec<T> = v.iter().map(|x| *x * *x).collect();
    pairwise_sum(&t).sqrt()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let t: Vec<T> = a.iter().zip(b).map(|(x, y)| *x * *y).collect();
    pairwise_sum(&t)
}

/// Settings for [`spectral_gap_estimate`].
#[derive(Clone, Debug)]
pub struct GapOptions<T> {
    pub n: usize,
    pub form: LinearizedForm,
    /// Restrict to `{∫φ = ∫x₁φ = ∫x₂φ = 0}`.
    pub project: bool,
    pub coefficient_scale: T,
    /// Collar width in cells around the coefficient support.
    pub collar: usize,
    pub max_cells: usize,
    pub krylov: usize,
    pub seed: u64,
}

impl<T: Real> Default for GapOptions<T> {
    fn default() -> Self {
        Self {
            n: 128,
            form: LinearizedForm::WithMean,
            project: true,
            coefficient_scale: T::one(),
            collar: 2,
            max_cells: 40_000,
            krylov: 160,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GapEstimate<T> {
    /// Smallest singular value.
    pub sigma_min: T,
    /// Smallest few singular values, ascending.
    pub smallest: Vec<T>,
    pub cells: usize,
    pub krylov_steps: usize,
}

/// Smallest singular values of `ℒ₀` restricted to the coefficient support
/// plus a collar, by Lanczos on `ℒ₀ᵀℒ₀`.
pub fn spectral_gap_estimate<T: Real>(sol: &LimitingSolution<T>, opts: &GapOptions<T>) -> Result<GapEstimate<T>> {
    let a = sol.support_radius * lit(1.15);
    let grid = Grid2D::centered(opts.n, T::zero(), T::zero(), a)?;
    let mut op = LinearizedOperator::new(sol, grid, opts.form)?;
    op.scale_coefficient(opts.coefficient_scale);
    let level_r = {
        let mut r = T::zero();
        for k in 0..grid.len() {
            let c = grid.center(k);
            let rr = (c[0] * c[0] + c[1] * c[1]).sqrt();
            if op.coefficient[k] > T::zero() || (opts.coefficient_scale == T::zero() && rr <= sol.support_radius) {
                r = r.max(rr);
            }
        }
        r + T::from_usize_lossy(opts.collar) * grid.h1
    };
    let cells: Vec<usize> = (0..grid.len())
        .filter(|&k| {
            let c = grid.center(k);
            (c[0] * c[0] + c[1] * c[1]).sqrt() <= level_r
        })
        .collect();
    let m = cells.len();
    if m > opts.max_cells {
        return Err(GsqgError::Resource(format!("{m} cells exceed the cap of {}", opts.max_cells)));
    }
    if m < 4 {
        return Err(GsqgError::Degenerate("operator support has fewer than 4 cells".into()));
    }
    // Orthonormal basis of the constraint directions restricted to the cells.
    let mut cons: Vec<Vec<T>> = Vec::new();
    if opts.project {
        for f in [0usize, 1, 2] {
            let mut v: Vec<T> = cells
                .iter()
                .map(|&k| {
                    let c = grid.center(k);
                    match f {
                        0 => T::one(),
                        1 => c[0],
                        _ => c[1],
                    }
                })
                .collect();
            for q in &cons {
                let d = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a = *a - d * *b);
            }
            let nv = l2(&v);
            v.iter_mut().for_each(|a| *a = *a / nv);
            cons.push(v);
        }
    }
    let project = |v: &mut Vec<T>| {
        for q in &cons {
            let d = dot(v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a = *a - d * *b);
        }
    };
    let embed = |v: &[T]| {
        let mut full = vec![T::zero(); grid.len()];
        for (c, &k) in cells.iter().enumerate() {
            full[k] = v[c];
        }
        full
    };
    let restrict = |full: &[T]| cells.iter().map(|&k| full[k]).collect::<Vec<T>>();
    let normal = |v: &[T]| {
        let mut w = v.to_vec();
        project(&mut w);
        let lv = op.apply_values(&embed(&w));
        let lv = restrict(&lv);
        let mut out = restrict(&op.apply_transpose_values(&embed(&lv)));
        project(&mut out);
        out
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut q: Vec<T> = (0..m).map(|_| lit(rng.gen::<f64>() - 0.5)).collect();
    project(&mut q);
    let nq = l2(&q);
    q.iter_mut().for_each(|a| *a = *a / nq);
    let kmax = opts.krylov.min(m.saturating_sub(cons.len())).max(1);
    let mut basis: Vec<Vec<T>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut prev_min = f64::INFINITY;
    for it in 0..kmax {
        let mut w = normal(&basis[it]);
        let a = dot(&w, &basis[it]);
        alpha.push(a.f64());
        // Full reorthogonalization, twice.
        for _ in 0..2 {
            for b in &basis {
                let d = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x = *x - d * *y);
            }
            project(&mut w);
        }
        let nb = l2(&w);
        let converged = if it % 10 == 9 || it + 1 == kmax {
            let ev = tridiagonal_eigenvalues(&alpha, &beta);
            let mn = ev[0];
            let done = (mn - prev_min).abs() <= 1e-9 * mn.abs().max(1e-12);
            prev_min = mn;
            done
        } else {
            false
        };
        if converged || nb.f64() <= 1e-12 || it + 1 == kmax {
            break;
        }
        beta.push(nb.f64());
        w.iter_mut().for_each(|x| *x = *x / nb);
        basis.push(w);
    }
    let ev = tridiagonal_eigenvalues(&alpha, &beta);
    let smallest: Vec<T> = ev.iter().take(6).map(|l| lit(l.max(0.0).sqrt())).collect();
    Ok(GapEstimate { sigma_min: smallest[0], smallest, cells: m, krylov_steps: alpha.len() })
}

fn tridiagonal_eigenvalues(alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn disk_integral_matches_closed_forms() {
        // Centre of the disk.
        assert!((disk_integral(0.0, 2.0, 0.5) - 2.0 * PI * 2.0).abs() < 1e-12);
        // s = 1/2 on the rim: ∫_{B_R} 1/|x−y| = 4R.
        assert!((disk_integral(1.0 - 1e-12, 1.0, 0.5) - 4.0).abs() < 1e-8);
        // Far away the disk acts as a point mass.
        let far = disk_integral(1e3, 1.0, 0.5);
        assert!((far / (PI / 1e3) - 1.0).abs() < 1e-6);
    }

    /// Complete elliptic integrals `K(k)`, `E(k)` by the AGM.
    fn elliptic_ke(k: f64) -> (f64, f64) {
        let (mut a, mut b) = (1.0, (1.0 - k * k).sqrt());
        let mut sum = 0.5 * k * k;
        let mut pow = 0.5;
        while (a - b).abs() > 1e-16 {
            let c = 0.5 * (a - b);
            let an = 0.5 * (a + b);
            b = (a * b).sqrt();
            a = an;
            pow *= 2.0;
            sum += pow * c * c;
        }
        let kk = PI / (2.0 * a);
        (kk, kk * (1.0 - sum))
    }

    #[test]
    fn disk_integral_matches_elliptic_forms() {
        // s = 1/2: 4E(r) inside the unit disk, 4r[E(1/r) − (1 − 1/r²)K(1/r)] outside.
        for r in [0.1, 0.4, 0.9, 0.999] {
            let (_, e) = elliptic_ke(r);
            assert!((disk_integral(r, 1.0, 0.5) - 4.0 * e).abs() < 1e-10, "{r}");
        }
        for r in [1.001, 1.3, 4.0] {
            let (k, e) = elliptic_ke(1.0 / r);
            let v = 4.0 * r * (e - (1.0 - 1.0 / (r * r)) * k);
            assert!((disk_integral(r, 1.0, 0.5) - v).abs() < 1e-10, "{r}");
        }
    }

    #[test]
    fn disk_integral_outside_matches_polar_quadrature() {
        // Independent oracle away from the singularity: midpoint rule in polar
        // coordinates about the disk centre.
        let s = 0.3;
        for r in [1.7, 2.5] {
            let (nt, nrr) = (2000, 2000);
            let mut acc = 0.0;
            for a in 0..nt {
                let th = (a as f64 + 0.5) * 2.0 * PI / nt as f64;
                for b in 0..nrr {
                    let rho = (b as f64 + 0.5) / nrr as f64;
                    let d = ((r - rho * th.cos()).powi(2) + (rho * th.sin()).powi(2)).sqrt();
                    acc += d.powf(2.0 * s - 2.0) * rho;
                }
            }
            acc *= 2.0 * PI / nt as f64 / nrr as f64;
            let v = disk_integral(r, 1.0, s);
            assert!((v - acc).abs() / v < 1e-5, "{r}: {v} vs {acc}");
        }
    }

    #[test]
    fn energy_zero_and_compositional() {
        let pr = PowerProfile::canonical(1.5, 0.5).unwrap();
        let par = KernelParams::new(0.5).unwrap();
        let g = Grid2D::<f64>::centered(12, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(energy_e0(&Field2D::zeros(g), &pr, &par), 0.0);
        let f = Field2D::from_fn(g, |a: f64, b: f64| (1.0 - a * a - b * b).max(0.0));
        let targets: Vec<[f64; 2]> = (0..g.len()).map(|k| g.center(k)).collect();
        let psi = potential_free(&f, &targets, &par);
        let h2 = g.cell_area();
        let direct: f64 = f.values.iter().zip(&psi).map(|(w, p)| 0.5 * w * p * h2 - pr.j(*w) * h2).sum();
        assert!((energy_e0(&f, &pr, &par) - direct).abs() < 1e-13);
    }

    #[test]
    fn energy_scaling_family() {
        // ω_r(x) = r^{-2} ω(x/r) on the scaled grid.
        let pr = PowerProfile::canonical(1.5, 0.5).unwrap();
        let par = KernelParams::new(0.5).unwrap();
        let bump = |a: f64, b: f64| (1.0 - a * a - b * b).max(0.0);
        let g = Grid2D::<f64>::centered(24, 0.0, 0.0, 1.2).unwrap();
        let f = Field2D::from_fn(g, bump);
        let r = 1.7;
        let gr = Grid2D::<f64>::centered(24, 0.0, 0.0, 1.2 * r).unwrap();
        let fr = Field2D::from_fn(gr, |a: f64, b: f64| bump(a / r, b / r) / (r * r));
        let zero_j = PowerProfile::new(1.5, 0.5, 1e-300).unwrap();
        let k1 = energy_e0(&f, &zero_j, &par);
        let kr = energy_e0(&fr, &zero_j, &par);
        assert!((kr / k1 / r.powf(-1.0) - 1.0).abs() < 0.02);
        let j1 = k1 - energy_e0(&f, &pr, &par);
        let jr = kr - energy_e0(&fr, &pr, &par);
        assert!((jr / j1 / r.powf(2.0 - 2.0 * pr.gamma()) - 1.0).abs() < 0.02);
    }

    #[test]
    fn trial_patch_has_positive_energy() {
        let pr = PowerProfile::canonical(1.5, 0.5).unwrap();
        let (r, e) = trial_patch_radius(&pr, 1.0).unwrap();
        assert!(r > 0.0 && e > 0.0);
    }

    fn small_solution() -> LimitingSolution<f64> {
        let pr = PowerProfile::new(1.5, 0.5, 0.12).unwrap();
        let opts = LimitingOptions { nr: 96, coarse_nr: 48, ..Default::default() };
        solve_limiting(&pr, 1.0, &opts).unwrap()
    }

    #[test]
    fn small_solve_satisfies_invariants() {
        let sol = small_solution();
        assert!(sol.converged);
        assert!(sol.mu0 > 0.0);
        assert!(sol.omega0.is_monotone(1e-10));
        assert!(sol.residuals["fixed_point"] <= 1e-6);
        assert!(sol.residuals["mass"] <= 1e-10);
        assert!(sol.support_radius < 0.9 * sol.omega0.rmax);
        assert!(virial_residual(&sol) < 0.02);
        assert!(multiplier_residual(&sol) < 0.02);
        for w in sol.energy_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
        }
        assert_eq!(sol.report().iterations, sol.iterations);
    }

    #[test]
    fn stretched_ground_state_breaks_virial() {
        // Oracle: under x ↦ x/t the two integrals scale as t^{2+2s} and t², so an
        // exact maximizer gives |t^{2s} − 1| / (t^{2s} + 1).
        let sol = small_solution();
        let t = 1.0 / 1.1;
        let mut pert = sol.clone();
        pert.omega0 = RadialField::new(sol.omega0.nr, sol.omega0.rmax * t, sol.omega0.values.clone()).unwrap();
        let op = RadialOperator::new(sol.params, pert.omega0.nr, pert.omega0.rmax).unwrap();
        let psi = op.apply(&pert.omega0.values);
        let areas = op.areas();
        pert.quad_integral = (0..op.nr).map(|k| areas[k] * pert.omega0.values[k] * psi[k]).sum();
        pert.j_integral = (0..op.nr).map(|k| areas[k] * pert.profile.j(pert.omega0.values[k])).sum();
        let expect = (1.0 - t) / (1.0 + t);
        let got = virial_residual(&pert);
        assert!((got - expect).abs() < 0.005, "{got} vs {expect}");
    }

    #[test]
    fn linearized_operator_basic_properties() {
        let sol = small_solution();
        let g = Grid2D::centered(32, 0.0, 0.0, sol.support_radius * 2.5).unwrap();
        let op = LinearizedOperator::new(&sol, g, LinearizedForm::WithMean).unwrap();
        // Zero-mean φ away from the coefficient support is unchanged there.
        let mut phi = Field2D::zeros(g);
        let (i0, j0) = (1, 1);
        phi.values[g.idx(i0, j0)] = 1.0;
        phi.values[g.idx(i0 + 1, j0)] = -1.0;
        let out = op.apply(&phi).unwrap();
        for k in 0..g.len() {
            if op.coefficient[k] == 0.0 {
                assert_eq!(out.values[k], phi.values[k]);
            }
        }
        // Linearity.
        let f1 = Field2D::from_fn(g, |a: f64, b: f64| (a * 3.0).sin() * (-b * b).exp());
        let f2 = Field2D::from_fn(g, |a: f64, b: f64| a * b);
        let comb = Field2D::from_fn(g, |a: f64, b: f64| 2.0 * (a * 3.0).sin() * (-b * b).exp() - 0.5 * a * b);
        let l1 = op.apply_values(&f1.values);
        let l2v = op.apply_values(&f2.values);
        let lc = op.apply_values(&comb.values);
        let scale = lc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..g.len() {
            assert!((lc[k] - (2.0 * l1[k] - 0.5 * l2v[k])).abs() <= 1e-12 * scale);
        }
        let pr = PowerProfile::new(0.9, 0.5, 0.12).unwrap();
        let mut bad = sol.clone();
        bad.profile = pr;
        assert!(matches!(LinearizedOperator::new(&bad, g, LinearizedForm::WithMean), Err(GsqgError::Regime(_))));
    }

    #[test]
    fn zero_coefficient_gap_is_one() {
        let sol = small_solution();
        let opts = GapOptions { n: 24, coefficient_scale: 0.0, ..Default::default() };
        let gap = spectral_gap_estimate(&sol, &opts).unwrap();
        assert!((gap.sigma_min - 1.0).abs() < 1e-12, "{}", gap.sigma_min);
        let capped = GapOptions { n: 24, max_cells: 10, ..Default::default() };
        assert!(matches!(spectral_gap_estimate(&sol, &capped), Err(GsqgError::Resource(_))));
    }
}

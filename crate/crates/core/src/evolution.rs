//! Transport of an active scalar in the half plane: the odd extension in x₁
//! is handled by the image convolver, time stepping is semi-Lagrangian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::conv::GridConvolver;
use crate::error::{GsqgError, Result};
use crate::fields::{
    center_of_mass, impulse, lp_norm, mass, orbital_distance, shifted_distance, translate_cells, Field2D, Grid2D, Norm,
    ShiftSearch,
};
use crate::kernels::KernelParams;
use crate::pair::{PairProblem, PairSolution};
use crate::real::{lit, pairwise_sum, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Interp {
    Bilinear,
    Cubic,
}

/// Settings for [`evolve`].
#[derive(Clone, Debug)]
pub struct EvolutionConfig<T> {
    /// Fixed step; `None` picks the largest step meeting `cfl` that divides
    /// `t_final` evenly.
    pub dt: Option<T>,
    pub t_final: T,
    pub cfl: T,
    pub advect: AdvectConfig,
    pub diag_every: usize,
    /// Window recentering threshold in cells.
    pub recenter_cells: usize,
    /// Step indices at which to keep a copy of the field.
    pub snapshot_steps: Vec<usize>,
    /// Also keep every this many steps; 0 disables.
    pub snapshot_every: usize,
    /// Half-width, in cells, of the x₂ shift search of the orbital distance.
    pub shift_radius: i64,
}

impl<T: Real> EvolutionConfig<T> {
    pub fn new(t_final: T) -> Self {
        Self {
            dt: None,
            t_final,
            cfl: lit(3.0),
            advect: AdvectConfig::default(),
            diag_every: 10,
            recenter_cells: 10,
            snapshot_steps: Vec::new(),
            snapshot_every: 0,
            shift_radius: 6,
        }
    }
}

/// Velocity at cell centres.
#[derive(Clone, Debug)]
pub struct VelocityField<T> {
    pub grid: Grid2D<T>,
    pub u1: Vec<T>,
    pub u2: Vec<T>,
    /// The density reaches the first cell column next to the wall.
    pub wall_contact: bool,
}

impl<T: Real> VelocityField<T> {
    pub fn zeros(grid: Grid2D<T>) -> Self {
        Self { grid, u1: vec![T::zero(); grid.len()], u2: vec![T::zero(); grid.len()], wall_contact: false }
    }

    pub fn uniform(grid: Grid2D<T>, u: [T; 2]) -> Self {
        Self { grid, u1: vec![u[0]; grid.len()], u2: vec![u[1]; grid.len()], wall_contact: false }
    }

    pub fn from_fn(grid: Grid2D<T>, f: impl Fn(T, T) -> [T; 2]) -> Self {
        let mut v = Self::zeros(grid);
        for k in 0..grid.len() {
            let [a, b] = grid.center(k);
            let [p, q] = f(a, b);
            v.u1[k] = p;
            v.u2[k] = q;
        }
        v
    }

    pub fn max_speed(&self) -> T {
        self.u1.iter().zip(&self.u2).map(|(a, b)| (*a * *a + *b * *b).sqrt()).fold(T::zero(), T::max)
    }

    /// `dt·max|u| / min(h₁, h₂)`.
    pub fn courant(&self, dt: T) -> T {
        dt * self.max_speed() / self.grid.h1.min(self.grid.h2)
    }

    /// Bicubic interpolation in index coordinates, with the stencil clamped
    /// to the grid.
    fn at_index(&self, a: T, b: T) -> [T; 2] {
        let g = &self.grid;
        let a = a.max(T::zero()).min(lit((g.nx - 1) as f64));
        let b = b.max(T::zero()).min(lit((g.ny - 1) as f64));
        [cubic_raw(g, &self.u1, a, b), cubic_raw(g, &self.u2, a, b)]
    }

    /// `(1 + θ)·self − θ·other`, pointwise.
    pub fn extrapolate(&self, other: &Self, theta: T) -> Self {
        let one = T::one() + theta;
        let mix = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| one * *x - theta * *y).collect();
        Self {
            grid: self.grid,
            u1: mix(&self.u1, &other.u1),
            u2: mix(&self.u2, &other.u2),
            wall_contact: self.wall_contact,
        }
    }

    /// Moves the values by `dj` rows, refilling vacated rows from `fill`.
    fn shift_rows(&self, dj: i64, fill: &Self) -> Self {
        let g = self.grid;
        let mut out = fill.clone();
        for j in 0..g.ny {
            let js = j as i64 - dj;
            if js >= 0 && js < g.ny as i64 {
                let (d, s) = (j * g.nx, js as usize * g.nx);
                out.u1[d..d + g.nx].copy_from_slice(&self.u1[s..s + g.nx]);
                out.u2[d..d + g.nx].copy_from_slice(&self.u2[s..s + g.nx]);
            }
        }
        out
    }
}

/// `u = ∇^⊥𝒢⁺θ` with `(a₁,a₂)^⊥ = (a₂,−a₁)`, by centred differences of the
/// half-plane stream function (one-sided at the window edges).
pub fn velocity_pair<T: Real>(theta: &Field2D<T>, conv: &GridConvolver<T>) -> Result<VelocityField<T>> {
    let g = theta.grid;
    if g.nx != conv.grid.nx || g.ny != conv.grid.ny || (g.x1min - conv.grid.x1min).abs() > g.h1 * lit(1e-9) {
        return Err(GsqgError::Incompatible("convolver does not match the field columns".into()));
    }
    let psi = conv.halfplane_potential(&theta.values)?;
    let mut v = VelocityField::zeros(g);
    let d = |lo: usize, hi: usize, a: T, b: T| (b - a) / lit((hi - lo) as f64);
    for j in 0..g.ny {
        let (jl, jh) = (j.saturating_sub(1), (j + 1).min(g.ny - 1));
        for i in 0..g.nx {
            let (il, ih) = (i.saturating_sub(1), (i + 1).min(g.nx - 1));
            let d2 = d(jl, jh, psi[g.idx(i, jl)], psi[g.idx(i, jh)]) / g.h2;
            let d1 = d(il, ih, psi[g.idx(il, j)], psi[g.idx(ih, j)]) / g.h1;
            let k = g.idx(i, j);
            v.u1[k] = d2;
            v.u2[k] = -d1;
        }
    }
    let near_wall = g.x1min < g.h1 * lit(0.5);
    v.wall_contact = near_wall && (0..g.ny).any(|j| theta.at(0, j) != T::zero());
    Ok(v)
}

/// Velocity of the odd extension of `theta` at wall points `(0, x₂)`, by
/// direct summation. Each source cell and its mirror image enter as one
/// difference, so the normal component is exactly zero.
pub fn wall_velocity<T: Real>(theta: &Field2D<T>, x2: &[T], params: &KernelParams<T>) -> Vec<[T; 2]> {
    let g = &theta.grid;
    let area = g.cell_area();
    let e = params.s - lit(2.0);
    let coef = params.c_s * params.alpha();
    x2.par_iter()
        .map(|&t| {
            let mut t1 = Vec::with_capacity(g.len());
            let mut t2 = Vec::with_capacity(g.len());
            for (k, &v) in theta.values.iter().enumerate() {
                if v == T::zero() {
                    continue;
                }
                let [y1, y2] = g.center(k);
                let m = v * area;
                let dy = t - y2;
                // Source at (y₁, y₂) with weight m, image at (−y₁, y₂) with −m.
                let d_src = [-y1, dy];
                let d_img = [y1, dy];
                let w_src = coef * (d_src[0] * d_src[0] + dy * dy).powf(e) * m;
                let w_img = coef * (d_img[0] * d_img[0] + dy * dy).powf(e) * m;
                t1.push(w_src * dy - w_img * dy);
                t2.push(-(w_src * d_src[0]) + w_img * d_img[0]);
            }
            [pairwise_sum(&t1), pairwise_sum(&t2)]
        })
        .collect()
}

/// Outcome of one [`advect_step`].
#[derive(Clone, Copy, Debug)]
pub struct StepInfo<T> {
    /// Relative mass change over the step.
    pub mass_change: T,
    /// Relative mass put back after clamping.
    pub restored: T,
    pub flagged: bool,
}

fn cubic_weights<T: Real>(t: T) -> [T; 4] {
    // Lagrange weights on nodes −1, 0, 1, 2.
    let one = T::one();
    let two = lit::<T>(2.0);
    let six = lit::<T>(6.0);
    [
        -t * (t - one) * (t - two) / six,
        (t + one) * (t - one) * (t - two) / two,
        -(t + one) * t * (t - two) / two,
        (t + one) * t * (t - one) / six,
    ]
}

fn cubic_raw<T: Real>(g: &Grid2D<T>, values: &[T], a: T, b: T) -> T {
    let fa = a.floor();
    let fb = b.floor();
    let i0 = fa.f64() as i64;
    let j0 = fb.f64() as i64;
    let wa = cubic_weights(a - fa);
    let wb = cubic_weights(b - fb);
    let val =
        |i: i64, j: i64| values[(j.clamp(0, g.ny as i64 - 1) as usize) * g.nx + i.clamp(0, g.nx as i64 - 1) as usize];
    let mut acc = T::zero();
    for (q, wq) in wb.iter().enumerate() {
        let mut row = T::zero();
        for (p, wp) in wa.iter().enumerate() {
            row = row + *wp * val(i0 - 1 + p as i64, j0 - 1 + q as i64);
        }
        acc = acc + *wq * row;
    }
    acc
}

/// Clamped interpolation at index coordinates `(a, b)`, zero outside the
/// grid, with the bounds of the four surrounding cells.
fn sample<T: Real>(f: &Field2D<T>, a: T, b: T, interp: Interp) -> [T; 3] {
    let g = &f.grid;
    let fa = a.floor();
    let fb = b.floor();
    let i0 = fa.f64() as i64;
    let j0 = fb.f64() as i64;
    let ta = a - fa;
    let tb = b - fb;
    let val = |i: i64, j: i64| -> T {
        if i < 0 || j < 0 || i >= g.nx as i64 || j >= g.ny as i64 {
            T::zero()
        } else {
            f.values[j as usize * g.nx + i as usize]
        }
    };
    let c = [val(i0, j0), val(i0 + 1, j0), val(i0, j0 + 1), val(i0 + 1, j0 + 1)];
    let lo = c.iter().copied().fold(T::infinity(), T::min);
    let hi = c.iter().copied().fold(T::neg_infinity(), T::max);
    if lo == hi {
        return [lo, lo, hi];
    }
    let v = match interp {
        Interp::Bilinear => {
            let one = T::one();
            (one - tb) * ((one - ta) * c[0] + ta * c[1]) + tb * ((one - ta) * c[2] + ta * c[3])
        }
        Interp::Cubic => {
            let wa = cubic_weights(ta);
            let wb = cubic_weights(tb);
            let mut acc = T::zero();
            for (q, wq) in wb.iter().enumerate() {
                let mut row = T::zero();
                for (p, wp) in wa.iter().enumerate() {
                    row = row + *wp * val(i0 - 1 + p as i64, j0 - 1 + q as i64);
                }
                acc = acc + *wq * row;
            }
            acc
        }
    };
    [v.max(lo).min(hi), lo, hi]
}

/// Fixed-point sweeps of the implicit midpoint rule for departure points.
const MIDPOINT_SWEEPS: usize = 4;

/// Interpolation settings of [`advect_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AdvectConfig {
    pub interp: Interp,
    /// Put the mass lost or gained by clamping back, within the clamp bounds.
    pub conserve_mass: bool,
}

impl Default for AdvectConfig {
    fn default() -> Self {
        Self { interp: Interp::Cubic, conserve_mass: true }
    }
}

impl AdvectConfig {
    /// Clamped interpolation with no mass correction.
    pub fn plain(interp: Interp) -> Self {
        Self { interp, conserve_mass: false }
    }
}

/// Moves `values` towards `bounds` until their sum is `target`, each cell in
/// proportion to its distance from the bound. Returns the amount added.
fn restore_sum<T: Real>(values: &mut [T], bounds: &[[T; 2]], target: T) -> T {
    let sum = pairwise_sum(values);
    let deficit = target - sum;
    let up = deficit > T::zero();
    let room: Vec<T> = values.iter().zip(bounds).map(|(v, [lo, hi])| if up { *hi - *v } else { *v - *lo }).collect();
    let total = pairwise_sum(&room);
    if !(total > T::zero()) {
        return T::zero();
    }
    let frac = (deficit.abs() / total).min(T::one());
    for (v, r) in values.iter_mut().zip(&room) {
        *v = if up { *v + frac * *r } else { *v - frac * *r };
    }
    pairwise_sum(values) - sum
}

/// One semi-Lagrangian step with implicit-midpoint departure points,
/// `x_d = x − dt·u(½(x + x_d))` solved by a few fixed-point sweeps, and
/// interpolation clamped to the surrounding four cells. The implicit
/// midpoint rule keeps a rigid rotation exactly on its circle, where the
/// explicit one spirals outward. For second order in time `u` should be the
/// velocity at the half step.
pub fn advect_step<T: Real>(
    theta: &Field2D<T>,
    u: &VelocityField<T>,
    dt: T,
    config: &AdvectConfig,
) -> Result<(Field2D<T>, StepInfo<T>)> {
    let g = theta.grid;
    if u.grid.nx != g.nx || u.grid.ny != g.ny {
        return Err(GsqgError::Incompatible("velocity and density grids differ".into()));
    }
    if !(dt > T::zero()) {
        return Err(GsqgError::Parameter("dt must be positive".into()));
    }
    let s1 = dt / g.h1;
    let s2 = dt / g.h2;
    let half = lit::<T>(0.5);
    let sampled: Vec<[T; 3]> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let i = lit::<T>((k % g.nx) as f64);
            let j = lit::<T>((k / g.nx) as f64);
            let (mut a, mut b) = (u.u1[k], u.u2[k]);
            for _ in 0..MIDPOINT_SWEEPS {
                [a, b] = u.at_index(i - half * s1 * a, j - half * s2 * b);
            }
            sample(theta, i - s1 * a, j - s2 * b, config.interp)
        })
        .collect();
    let mut values: Vec<T> = sampled.iter().map(|v| v[0]).collect();
    let m0 = mass(theta);
    let mut restored = T::zero();
    if config.conserve_mass && m0 > T::zero() {
        let bounds: Vec<[T; 2]> = sampled.iter().map(|v| [v[1], v[2]]).collect();
        restored = restore_sum(&mut values, &bounds, m0 / g.cell_area()) * g.cell_area() / m0;
    }
    let out = Field2D { grid: g, values, nonneg: theta.nonneg };
    let m1 = mass(&out);
    let mass_change = if m0 > T::zero() { (m1 - m0) / m0 } else { T::zero() };
    Ok((out, StepInfo { mass_change, restored, flagged: mass_change.abs() > lit(1e-3) }))
}

/// One diagnostics row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiagRow {
    pub t: f64,
    pub mass: f64,
    pub impulse: f64,
    pub energy: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub orbital_distance: f64,
    pub shift_c: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryReport<T> {
    pub rows: Vec<DiagRow>,
    pub steps: usize,
    pub dt: T,
    pub halvings: usize,
    pub final_field: Field2D<T>,
    pub snapshots: Vec<(usize, Field2D<T>)>,
    /// `‖ω‖₁ + ‖ω‖₂ + ‖x₁ω‖₁` of the comparison field, when there is one.
    pub reference_norm: Option<T>,
    pub max_wall_normal_velocity: T,
    pub min_value: T,
    pub flagged_steps: usize,
    /// Smallest x₁ reached by the support.
    pub support_min_x1: T,
    pub warnings: Vec<String>,
}

/// Summary of a run in plain numbers.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectorySummary {
    pub steps: usize,
    pub dt: f64,
    pub halvings: usize,
    pub mass_drift: f64,
    pub impulse_drift: f64,
    pub energy_drift: f64,
    pub linf_increase: f64,
    pub max_normalized_distance: f64,
    pub support_min_x1: f64,
    pub support_in_x1_ge_1: bool,
    pub flagged_steps: usize,
}

impl<T: Real> TrajectoryReport<T> {
    fn drift(&self, f: impl Fn(&DiagRow) -> f64) -> f64 {
        let a = f(&self.rows[0]);
        self.rows.iter().map(|r| ((f(r) - a) / a).abs()).fold(0.0, f64::max)
    }

    pub fn mass_drift(&self) -> f64 {
        self.drift(|r| r.mass)
    }

    pub fn impulse_drift(&self) -> f64 {
        self.drift(|r| r.impulse)
    }

    pub fn energy_drift(&self) -> f64 {
        self.drift(|r| r.energy)
    }

    /// Largest orbital distance divided by the reference norm.
    pub fn max_normalized_distance(&self) -> f64 {
        let n = self.reference_norm.map_or(1.0, |v| v.f64());
        self.rows.iter().map(|r| r.orbital_distance / n).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> TrajectorySummary {
        let l0 = self.rows[0].linf;
        TrajectorySummary {
            steps: self.steps,
            dt: self.dt.f64(),
            halvings: self.halvings,
            mass_drift: self.mass_drift(),
            impulse_drift: self.impulse_drift(),
            energy_drift: self.energy_drift(),
            linf_increase: self.rows.iter().map(|r| r.linf - l0).fold(0.0, f64::max),
            max_normalized_distance: self.max_normalized_distance(),
            support_min_x1: self.support_min_x1.f64(),
            support_in_x1_ge_1: self.support_min_x1 >= T::one(),
            flagged_steps: self.flagged_steps,
        }
    }

    /// Rows as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mass,impulse,energy,l1,l2,linf,orbital_distance,shift_c\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.t, r.mass, r.impulse, r.energy, r.l1, r.l2, r.linf, r.orbital_distance, r.shift_c
            ));
        }
        s
    }
}

/// `‖ω‖₁ + ‖ω‖₂ + ‖x₁ω‖₁`.
pub fn orbital_norm<T: Real>(f: &Field2D<T>) -> T {
    let g = &f.grid;
    let w: Vec<T> = (0..g.len()).map(|k| (g.center(k)[0] * f.values[k]).abs()).collect();
    lp_norm(f, Norm::L1) + lp_norm(f, Norm::L2) + pairwise_sum(&w) * g.cell_area()
}

/// Smallest x₁ over cells above `1e-10·max`; the mass correction leaves
/// traces far below that near the support.
fn support_min_x1<T: Real>(f: &Field2D<T>) -> T {
    let g = &f.grid;
    let cut = f.max_value() * lit(1e-10);
    (0..g.len()).filter(|&k| f.values[k] > cut).map(|k| g.center(k)[0] - g.h1 * lit(0.5)).fold(T::infinity(), T::min)
}

struct Diag<'a, T: Real> {
    conv: &'a GridConvolver<T>,
    reference: Option<&'a Field2D<T>>,
    speed: T,
    radius: i64,
}

impl<T: Real> Diag<'_, T> {
    fn row(&self, t: T, f: &Field2D<T>) -> Result<DiagRow> {
        let psi = self.conv.halfplane_potential(&f.values)?;
        let e: Vec<T> = f.values.iter().zip(&psi).map(|(a, b)| *a * *b).collect();
        let energy = lit::<T>(0.5) * pairwise_sum(&e) * f.grid.cell_area();
        let (od, c) = match self.reference {
            Some(r) => {
                let k0 = (self.speed * t / f.grid.h2).round().f64() as i64;
                let d = orbital_distance(f, r, ShiftSearch::around(k0, self.radius))?;
                (d.value.f64(), d.shift.f64())
            }
            None => (f64::NAN, f64::NAN),
        };
        Ok(DiagRow {
            t: t.f64(),
            mass: mass(f).f64(),
            impulse: impulse(f).f64(),
            energy: energy.f64(),
            l1: lp_norm(f, Norm::L1).f64(),
            l2: lp_norm(f, Norm::L2).f64(),
            linf: lp_norm(f, Norm::Inf).f64(),
            orbital_distance: od,
            shift_c: c,
        })
    }
}

/// Evolves `xi0` on a window that follows the density in x₂ by whole cells.
/// With a `reference`, the orbital distance to its x₂-translates is recorded,
/// searching around the translate expected from the pair speed.
pub fn evolve<T: Real>(
    xi0: &Field2D<T>,
    reference: Option<&Field2D<T>>,
    problem: &PairProblem<T>,
    config: &EvolutionConfig<T>,
) -> Result<TrajectoryReport<T>> {
    if !xi0.grid.same_as(&problem.grid) {
        return Err(GsqgError::Incompatible("initial field must be on the problem grid".into()));
    }
    if xi0.values.iter().any(|&v| v < T::zero()) {
        return Err(GsqgError::Domain("initial field must be non-negative".into()));
    }
    if !(config.t_final > T::zero()) || config.diag_every == 0 {
        return Err(GsqgError::Parameter("t_final must be positive and diag_every nonzero".into()));
    }
    let conv = problem.convolver();
    let mut theta = xi0.clone();
    let u0 = velocity_pair(&theta, conv)?;
    let h = theta.grid.h1.min(theta.grid.h2);
    let mut dt = match config.dt {
        Some(dt) => {
            if dt > config.t_final || !(dt > T::zero()) {
                return Err(GsqgError::Parameter("need 0 < dt <= t_final".into()));
            }
            if u0.courant(dt) > config.cfl {
                return Err(GsqgError::Cfl(format!("courant number {} at start", u0.courant(dt))));
            }
            dt
        }
        None => {
            let vmax = u0.max_speed().max(T::eps());
            // A margin below the cap, since the peak speed fluctuates.
            let n = (config.t_final * vmax / (lit::<T>(0.9) * config.cfl * h)).ceil().max(T::one());
            config.t_final / n
        }
    };
    let diag = Diag { conv, reference, speed: problem.w_eps, radius: config.shift_radius };
    let mut rows = vec![diag.row(T::zero(), &theta)?];
    let mut snapshots = Vec::new();
    if config.snapshot_steps.contains(&0) {
        snapshots.push((0, theta.clone()));
    }
    let l_inf0 = theta.max_value();
    let mut min_value = theta.min_value();
    let mut support_x1 = support_min_x1(&theta);
    let mut warnings = Vec::new();
    let mut halvings = 0;
    let mut flagged = 0;
    let mut wall_max = T::zero();
    let mut t = T::zero();
    let mut step = 0usize;
    let x2_center0 = center_of_mass(&theta).map_or(T::zero(), |c| c[1]);
    let mut u = u0;
    let mut prev: Option<(VelocityField<T>, T)> = None;
    while t < config.t_final - dt * lit(1e-9) {
        if u.courant(dt) > config.cfl * lit(1.0 + 1e-9) {
            if halvings == 3 {
                return Err(GsqgError::Cfl(format!("courant number {} after 3 halvings at t = {}", u.courant(dt), t)));
            }
            halvings += 1;
            dt = dt * lit(0.5);
            warnings.push(format!("dt halved to {dt} at t = {t}"));
            continue;
        }
        // Velocity at the half step: extrapolated from the last two steps,
        // or from a trial step at the start.
        let u_half = match &prev {
            Some((up, dtp)) => u.extrapolate(up, lit::<T>(0.5) * dt / *dtp),
            None => {
                let (trial, _) = advect_step(&theta, &u, dt, &config.advect)?;
                let ut = velocity_pair(&trial, conv)?;
                u.extrapolate(&ut, lit(-0.5))
            }
        };
        let (next, info) = advect_step(&theta, &u_half, dt, &config.advect)?;
        if info.flagged {
            flagged += 1;
        }
        theta = next;
        t = t + dt;
        step += 1;
        min_value = min_value.min(theta.min_value());
        support_x1 = support_x1.min(support_min_x1(&theta));
        if u.wall_contact {
            warnings.push(format!("density touches the wall at step {step}"));
        }
        // Keep the density near the window centre.
        let mid = lit::<T>(0.5) * (theta.grid.x2min + theta.grid.x2max);
        let c = center_of_mass(&theta).unwrap_or([T::zero(), mid]);
        let mut drift_cells = ((c[1] - mid) / theta.grid.h2).round().f64() as i64;
        if drift_cells.unsigned_abs() as usize > config.recenter_cells {
            let moved = translate_cells(&theta, 0, -drift_cells);
            theta =
                Field2D { grid: theta.grid.shifted_cells(0, drift_cells), values: moved.values, nonneg: theta.nonneg };
        } else {
            drift_cells = 0;
        }
        if step.is_multiple_of(config.diag_every) || t >= config.t_final - dt * lit(1e-9) {
            rows.push(diag.row(t, &theta)?);
            let wall = wall_velocity(&theta, &[c[1], x2_center0], &problem.params);
            wall_max = wall.iter().fold(wall_max, |m, w| m.max(w[0].abs()));
        }
        if config.snapshot_steps.contains(&step)
            || (config.snapshot_every > 0 && step.is_multiple_of(config.snapshot_every))
        {
            snapshots.push((step, theta.clone()));
        }
        let un = velocity_pair(&theta, conv)?;
        let old = if drift_cells == 0 { u } else { u.shift_rows(-drift_cells, &un) };
        prev = Some((old, dt));
        u = un;
    }
    if theta.max_value() > l_inf0 {
        warnings.push("sup norm increased".into());
    }
    warnings.dedup();
    Ok(TrajectoryReport {
        rows,
        steps: step,
        dt,
        halvings,
        final_field: theta,
        snapshots,
        reference_norm: reference.map(orbital_norm),
        max_wall_normal_velocity: wall_max,
        min_value,
        flagged_steps: flagged,
        support_min_x1: support_x1,
        warnings,
    })
}

/// `diam(spt ω) / 𝒲`.
pub fn self_transit_time<T: Real>(sol: &PairSolution<T>, problem: &PairProblem<T>) -> T {
    lit::<T>(2.0) * sol.support_radius / problem.w_eps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PerturbationKind {
    /// Adds a non-negative bump, compensated by scaling ω.
    Bump,
    /// Displaces rows by a smooth x₁-dependent amount.
    Shear,
    /// Multiplies by a localized dip.
    Dimple,
}

/// Random shape parameters of one perturbation; the amplitude is applied
/// separately.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PerturbationShape {
    pub kind: PerturbationKind,
    /// Centre offset from the vortex centre, in units of the support radius.
    pub offset: [f64; 2],
    /// Width in units of the support radius.
    pub width: f64,
}

impl PerturbationShape {
    pub fn random(kind: PerturbationKind, rng: &mut ChaCha8Rng) -> Self {
        let r: f64 = rng.gen_range(0.0..0.6);
        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Self { kind, offset: [r * a.cos(), r * a.sin()], width: rng.gen_range(0.25..0.5) }
    }

    /// `ω` perturbed with amplitude `delta`; the mass is kept.
    pub fn apply<T: Real>(&self, omega: &Field2D<T>, center: [T; 2], radius: T, delta: T) -> Field2D<T> {
        let g = omega.grid;
        let c = [center[0] + radius * lit(self.offset[0]), center[1] + radius * lit(self.offset[1])];
        let w = radius * lit(self.width);
        let gauss = |x: [T; 2]| {
            let d1 = (x[0] - c[0]) / w;
            let d2 = (x[1] - c[1]) / w;
            (-(d1 * d1 + d2 * d2)).exp()
        };
        let kappa = mass(omega);
        let top = omega.max_value();
        let mut out = match self.kind {
            PerturbationKind::Bump => {
                let b: Vec<T> = (0..g.len()).map(|k| top * gauss(g.center(k))).collect();
                let mb = pairwise_sum(&b) * g.cell_area();
                let scale = T::one() - delta * mb / kappa;
                let v = (0..g.len()).map(|k| (omega.values[k] * scale + delta * b[k]).max(T::zero())).collect();
                Field2D { grid: g, values: v, nonneg: true }
            }
            PerturbationKind::Dimple => {
                let v = (0..g.len())
                    .map(|k| omega.values[k] * (T::one() - delta * gauss(g.center(k))).max(T::zero()))
                    .collect();
                Field2D { grid: g, values: v, nonneg: true }
            }
            PerturbationKind::Shear => {
                // Row displacement δ·R·sin(π(x₁ − c₁)/R) applied by clamped
                // interpolation along x₂.
                let v = (0..g.len())
                    .map(|k| {
                        let i = k % g.nx;
                        let j = k / g.nx;
                        let x = g.center(k);
                        let disp = delta * radius * (T::PI() * (x[0] - c[0]) / radius).sin();
                        let b = lit::<T>(j as f64) - disp / g.h2;
                        sample(omega, lit(i as f64), b, Interp::Bilinear)[0]
                    })
                    .collect();
                Field2D { grid: g, values: v, nonneg: true }
            }
        };
        let m = mass(&out);
        if m > T::zero() {
            out = out.scaled(kappa / m);
        }
        out
    }
}

/// Settings for [`stability_experiment`].
#[derive(Clone, Debug)]
pub struct StabilityConfig<T> {
    /// Settings of the unperturbed run.
    pub evolution: EvolutionConfig<T>,
    /// Horizon of the perturbed runs; `None` uses the unperturbed one.
    pub trial_t_final: Option<T>,
    pub delta: T,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityTrial {
    pub shape: PerturbationShape,
    /// Initial normalized orbital distances at `δ` and `δ/2`.
    pub initial: [f64; 2],
    /// Largest normalized orbital distances over the run at `δ` and `δ/2`.
    pub sup: [f64; 2],
    pub ordered: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    /// Largest normalized distance of the unperturbed run.
    pub floor: f64,
    pub floor_summary: TrajectorySummary,
    pub trials: Vec<StabilityTrial>,
    pub ordered_count: usize,
}

/// Evolves the unperturbed pair and, for each seeded trial, the pair
/// perturbed at amplitudes `δ` and `δ/2`, recording the largest orbital
/// distance to the translates of `ω_ε`.
pub fn stability_experiment<T: Real>(
    sol: &PairSolution<T>,
    problem: &PairProblem<T>,
    config: &StabilityConfig<T>,
) -> Result<StabilityReport> {
    let omega = &sol.omega_eps;
    let norm = orbital_norm(omega).f64();
    let base = evolve(omega, Some(omega), problem, &config.evolution)?;
    let kinds = [PerturbationKind::Bump, PerturbationKind::Shear, PerturbationKind::Dimple];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trial_cfg = config.evolution.clone();
    trial_cfg.t_final = config.trial_t_final.unwrap_or(trial_cfg.t_final);
    let mut trials = Vec::with_capacity(config.trials);
    for n in 0..config.trials {
        let shape = PerturbationShape::random(kinds[n % kinds.len()], &mut rng);
        let mut initial = [0.0; 2];
        let mut sup = [0.0; 2];
        for (slot, amp) in [config.delta, config.delta * lit(0.5)].into_iter().enumerate() {
            let xi = shape.apply(omega, sol.x_eps, sol.support_radius, amp);
            initial[slot] = shifted_distance(&xi, omega, T::zero())?.f64() / norm;
            let run = evolve(&xi, Some(omega), problem, &trial_cfg)?;
            sup[slot] = run.max_normalized_distance();
        }
        trials.push(StabilityTrial { shape, initial, sup, ordered: sup[1] < sup[0] });
    }
    let ordered_count = trials.iter().filter(|t| t.ordered).count();
    Ok(StabilityReport { floor: base.max_normalized_distance(), floor_summary: base.summary(), trials, ordered_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pair::PairGrid;
    use crate::profiles::PowerProfile;

    fn blob(n: usize, c: [f64; 2], r: f64) -> Field2D<f64> {
        let g = Grid2D::new(n, n, -1.0, 1.0, -1.0, 1.0).unwrap();
        Field2D::from_fn(g, |a, b| {
            let q = ((a - c[0]).powi(2) + (b - c[1]).powi(2)) / (r * r);
            (1.0 - q).max(0.0).powi(3)
        })
    }

    #[test]
    fn cubic_weights_reproduce_cubics() {
        for t in [0.0, 0.25, 0.5, 0.9] {
            let w = cubic_weights(t);
            let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.3 * x * x * x;
            let v = w[0] * f(-1.0) + w[1] * f(0.0) + w[2] * f(1.0) + w[3] * f(2.0);
            assert!((v - f(t)).abs() < 1e-14);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_velocity_is_identity() {
        let f = blob(32, [0.1, -0.2], 0.5);
        let u = VelocityField::zeros(f.grid);
        for cfg in [AdvectConfig::default(), AdvectConfig::plain(Interp::Bilinear)] {
            let (g, info) = advect_step(&f, &u, 0.1, &cfg).unwrap();
            assert_eq!(g.values, f.values);
            assert_eq!(info.mass_change, 0.0);
        }
    }

    #[test]
    fn grid_aligned_uniform_shift_is_exact() {
        let f = blob(32, [0.0, -0.2], 0.4);
        let h = f.grid.h2;
        // v·dt = 2 cells.
        let u = VelocityField::uniform(f.grid, [0.0, 2.0 * h / 0.5]);
        let (g, _) = advect_step(&f, &u, 0.5, &AdvectConfig::default()).unwrap();
        assert_eq!(g.values, translate_cells(&f, 0, 2).values);
    }

    #[test]
    fn rigid_rotation_keeps_blob() {
        let n = 256;
        let f = blob(n, [0.3, 0.0], 0.25);
        let om = 1.0;
        let u = VelocityField::from_fn(f.grid, |a, b| [-om * b, om * a]);
        let dt = 0.4 * f.grid.h1 / (om * 0.6);
        let steps = (std::f64::consts::TAU / om / dt).round() as usize;
        let dt = std::f64::consts::TAU / om / steps as f64;
        for cfg in [AdvectConfig::plain(Interp::Cubic), AdvectConfig::default()] {
            let mut g = f.clone();
            for _ in 0..steps {
                g = advect_step(&g, &u, dt, &cfg).unwrap().0;
            }
            let l2 = |x: &Field2D<f64>| lp_norm(x, Norm::L2);
            let decay = 1.0 - l2(&g) / l2(&f);
            assert!((0.0..=0.01).contains(&decay), "{decay}");
            assert!(g.max_value() <= f.max_value());
            assert!(g.min_value() >= 0.0);
            if cfg.conserve_mass {
                assert!(((mass(&g) - mass(&f)) / mass(&f)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restored_sum_stays_within_bounds() {
        let bounds = [[0.0_f64, 1.0], [0.5, 0.5], [0.0, 2.0]];
        let mut v = vec![0.5_f64, 0.5, 1.0];
        let added = restore_sum(&mut v, &bounds, 2.5);
        assert!((added - 0.5).abs() < 1e-15);
        let want = [2.0 / 3.0, 0.5, 4.0 / 3.0];
        assert!(v.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), "{v:?}");
        // Not enough room: every cell ends at its bound.
        let mut v = vec![0.5, 0.5, 1.0];
        restore_sum(&mut v, &bounds, 10.0);
        assert_eq!(v, vec![1.0, 0.5, 2.0]);
        let mut v = vec![0.5, 0.5, 1.0];
        restore_sum(&mut v, &bounds, 1.5);
        assert!(v.iter().zip(&bounds).all(|(x, [lo, hi])| x >= lo && x <= hi));
        assert!((v.iter().sum::<f64>() - 1.5).abs() < 1e-15);
    }

    fn pair_setup(n: usize) -> (PairProblem<f64>, Field2D<f64>) {
        let pr = PowerProfile::new(1.5, 0.5, 0.12).unwrap();
        let pb = PairProblem::new(&pr, 1.0, 1.0, 0.25, PairGrid { n, half_width: 0.5 }).unwrap();
        let c = pb.ball_center;
        let f = Field2D::from_fn(pb.grid, |a: f64, b: f64| (0.04 - (a - c[0]).powi(2) - b * b).max(0.0) * 30.0);
        (pb, f)
    }

    #[test]
    fn wall_is_a_streamline() {
        let (pb, f) = pair_setup(32);
        let v = wall_velocity(&f, &[-0.3, 0.0, 0.2, 1.7], &pb.params);
        for w in &v {
            assert_eq!(w[0], 0.0);
        }
        assert!(v[1][1].abs() > 0.0);
    }

    #[test]
    fn pair_velocity_is_linear_and_drifts_down() {
        let (pb, f) = pair_setup(48);
        let u = velocity_pair(&f, pb.convolver()).unwrap();
        let u2 = velocity_pair(&f.scaled(2.0), pb.convolver()).unwrap();
        for k in 0..u.u1.len() {
            assert!((u2.u1[k] - 2.0 * u.u1[k]).abs() <= 1e-12 * (1.0 + u.u1[k].abs()));
        }
        // The image drives the density towards −x₂, roughly at the point-vortex speed.
        let m = mass(&f);
        let c = center_of_mass(&f).unwrap();
        let drift: f64 = (0..f.grid.len()).map(|k| f.values[k] * u.u2[k]).sum::<f64>() * f.grid.cell_area() / m;
        let point = pb.params.c_s * (1.0 - pb.params.s) * 2.0 * m / (2.0 * c[0]).powf(3.0 - 2.0 * pb.params.s);
        assert!(drift < 0.0);
        assert!((drift.abs() - point).abs() / point < 0.1, "{drift} vs {point}");
    }

    #[test]
    fn evolution_at_rest_and_validation() {
        let (pb, f) = pair_setup(32);
        let z = Field2D::zeros(pb.grid);
        let rep = evolve(&z, None, &pb, &EvolutionConfig { dt: Some(0.1), ..EvolutionConfig::new(0.3) }).unwrap();
        assert_eq!(rep.steps, 3);
        assert!(rep.rows.iter().all(|r| r.mass == 0.0));
        let mut bad = EvolutionConfig::new(0.3);
        bad.dt = Some(10.0);
        assert!(evolve(&f, None, &pb, &bad).is_err());
        bad.dt = Some(0.3);
        assert!(matches!(evolve(&f, None, &pb, &bad), Err(GsqgError::Cfl(_))));
    }

    #[test]
    fn perturbations_keep_mass_and_sign() {
        let (_, f) = pair_setup(48);
        let c = center_of_mass(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [PerturbationKind::Bump, PerturbationKind::Shear, PerturbationKind::Dimple] {
            let sh = PerturbationShape::random(kind, &mut rng);
            let p = sh.apply(&f, c, 0.2, 0.1);
            assert!((mass(&p) - mass(&f)).abs() < 1e-12 * mass(&f));
            assert!(p.min_value() >= 0.0);
            let d1 = shifted_distance(&p, &f, 0.0).unwrap();
            let d2 = shifted_distance(&sh.apply(&f, c, 0.2, 0.05), &f, 0.0).unwrap();
            assert!(d2 < d1 && d1 > 0.0);
        }
    }
}

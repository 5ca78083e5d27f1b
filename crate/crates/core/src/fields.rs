//! Grids, cell-averaged fields, integrals, norms, symmetrization and
//! rearrangement predicates.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{GsqgError, Result};
use crate::real::{lit, pairwise_sum, pos, Real};

/// Uniform rectangular grid of cells. Values live at cell centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D<T> {
    pub nx: usize,
    pub ny: usize,
    pub x1min: T,
    pub x1max: T,
    pub x2min: T,
    pub x2max: T,
    pub h1: T,
    pub h2: T,
}

impl<T: Real> Grid2D<T> {
    pub fn new(nx: usize, ny: usize, x1min: T, x1max: T, x2min: T, x2max: T) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(GsqgError::Parameter(format!("grid needs nx, ny >= 2 (got {nx}x{ny})")));
        }
        if !(x1max > x1min) || !(x2max > x2min) {
            return Err(GsqgError::Parameter("grid extents must be ordered".into()));
        }
        Ok(Self {
            nx,
            ny,
            x1min,
            x1max,
            x2min,
            x2max,
            h1: (x1max - x1min) / T::from_usize_lossy(nx),
            h2: (x2max - x2min) / T::from_usize_lossy(ny),
        })
    }

    /// Grid from its lower corner and cell widths.
    pub fn from_spacing(nx: usize, ny: usize, x1min: T, x2min: T, h1: T, h2: T) -> Result<Self> {
        let mut g = Self::new(
            nx,
            ny,
            x1min,
            x1min + h1 * T::from_usize_lossy(nx),
            x2min,
            x2min + h2 * T::from_usize_lossy(ny),
        )?;
        g.h1 = h1;
        g.h2 = h2;
        Ok(g)
    }

    /// Square grid of `n x n` cells centred at `(c1, c2)` with half-width `a`.
    pub fn centered(n: usize, c1: T, c2: T, a: T) -> Result<Self> {
        Self::new(n, n, c1 - a, c1 + a, c2 - a, c2 + a)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x1(&self, i: usize) -> T {
        self.x1min + (T::from_usize_lossy(i) + lit(0.5)) * self.h1
    }

    #[inline]
    pub fn x2(&self, j: usize) -> T {
        self.x2min + (T::from_usize_lossy(j) + lit(0.5)) * self.h2
    }

    #[inline]
    pub fn center(&self, k: usize) -> [T; 2] {
        [self.x1(k % self.nx), self.x2(k / self.nx)]
    }

    #[inline]
    pub fn cell_area(&self) -> T {
        self.h1 * self.h2
    }

    /// Same cell counts and spacings (origins may differ).
    pub fn same_shape(&self, other: &Self) -> bool {
        let tol = lit::<T>(1e-9);
        self.nx == other.nx
            && self.ny == other.ny
            && ((self.h1 - other.h1) / self.h1).abs() < tol
            && ((self.h2 - other.h2) / self.h2).abs() < tol
    }

    /// Same shape and origin.
    pub fn same_as(&self, other: &Self) -> bool {
        let tol = lit::<T>(1e-9);
        self.same_shape(other)
            && ((self.x1min - other.x1min) / self.h1).abs() < tol
            && ((self.x2min - other.x2min) / self.h2).abs() < tol
    }

    /// Copy shifted by whole cells.
    pub fn shifted_cells(&self, di: i64, dj: i64) -> Self {
        let d1 = self.h1 * lit(di as f64);
        let d2 = self.h2 * lit(dj as f64);
        let mut g = *self;
        g.x1min = g.x1min + d1;
        g.x1max = g.x1max + d1;
        g.x2min = g.x2min + d2;
        g.x2max = g.x2max + d2;
        g
    }
}

/// Cell-averaged scalar density on a [`Grid2D`]. Row-major with the x₂ index
/// outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D<T> {
    pub grid: Grid2D<T>,
    pub values: Vec<T>,
    pub nonneg: bool,
}

impl<T: Real> Field2D<T> {
    pub fn zeros(grid: Grid2D<T>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![T::zero(); n], nonneg: true }
    }

    pub fn from_values(grid: Grid2D<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(GsqgError::Incompatible(format!("{} values for a grid of {} cells", values.len(), grid.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(GsqgError::Domain(format!("non-finite value at cell {k}")));
        }
        let nonneg = values.iter().all(|&v| v >= T::zero());
        Ok(Self { grid, values, nonneg })
    }

    /// Samples `f` at cell centres.
    pub fn from_fn(grid: Grid2D<T>, f: impl Fn(T, T) -> T) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let [a, b] = grid.center(k);
                f(a, b)
            })
            .collect::<Vec<_>>();
        let nonneg = values.iter().all(|&v| v >= T::zero());
        Self { grid, values, nonneg }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[self.grid.idx(i, j)]
    }

    pub fn refresh_flag(&mut self) {
        self.nonneg = self.values.iter().all(|&v| v >= T::zero());
    }

    pub fn scaled(&self, a: T) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = *v * a);
        out.refresh_flag();
        out
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    /// Field on a grid shifted by whole cells; values outside the source are zero.
    pub fn resample_cells(&self, target: &Grid2D<T>) -> Result<Self> {
        if !self.grid.same_shape(target) && !(approx_eq(self.grid.h1, target.h1) && approx_eq(self.grid.h2, target.h2))
        {
            return Err(GsqgError::Incompatible("resampling needs equal spacings".into()));
        }
        let di = cell_offset(target.x1min, self.grid.x1min, self.grid.h1)?;
        let dj = cell_offset(target.x2min, self.grid.x2min, self.grid.h2)?;
        let mut out = Field2D::zeros(*target);
        for j in 0..target.ny {
            let js = j as i64 + dj;
            if js < 0 || js >= self.grid.ny as i64 {
                continue;
            }
            for i in 0..target.nx {
                let is = i as i64 + di;
                if is < 0 || is >= self.grid.nx as i64 {
                    continue;
                }
                out.values[target.idx(i, j)] = self.at(is as usize, js as usize);
            }
        }
        out.refresh_flag();
        Ok(out)
    }
}

fn approx_eq<T: Real>(a: T, b: T) -> bool {
    ((a - b) / a).abs() < lit(1e-9)
}

/// Integer cell offset `(a - b) / h`, failing if not integral.
pub fn cell_offset<T: Real>(a: T, b: T, h: T) -> Result<i64> {
    let q = (a - b) / h;
    let r = q.round();
    if (q - r).abs() > lit(1e-6) {
        return Err(GsqgError::Incompatible(format!("origins differ by {} cells", q.f64())));
    }
    Ok(r.f64() as i64)
}

/// Radially symmetric profile on cell-centred radii `r_k = (k + 1/2) dr`.
/// Each value is the constant density on the annulus `[k dr, (k+1) dr)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialField<T> {
    pub nr: usize,
    pub rmax: T,
    pub values: Vec<T>,
}

impl<T: Real> RadialField<T> {
    pub fn new(nr: usize, rmax: T, values: Vec<T>) -> Result<Self> {
        if values.len() != nr || nr < 2 {
            return Err(GsqgError::Parameter("radial field needs nr >= 2 values".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(GsqgError::Domain("radial values must be finite and non-negative".into()));
        }
        Ok(Self { nr, rmax, values })
    }

    #[inline]
    pub fn dr(&self) -> T {
        self.rmax / T::from_usize_lossy(self.nr)
    }

    #[inline]
    pub fn r(&self, k: usize) -> T {
        (T::from_usize_lossy(k) + lit(0.5)) * self.dr()
    }

    /// Area of annulus `k`.
    #[inline]
    pub fn area(&self, k: usize) -> T {
        let dr = self.dr();
        let a = T::from_usize_lossy(k) * dr;
        let b = a + dr;
        T::PI() * (b * b - a * a)
    }

    pub fn mass(&self) -> T {
        let terms: Vec<T> = (0..self.nr).map(|k| self.values[k] * self.area(k)).collect();
        pairwise_sum(&terms)
    }

    /// Non-increasing up to `slack`.
    pub fn is_monotone(&self, slack: T) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0] + slack)
    }

    /// Outer radius of the last annulus carrying positive density.
    pub fn support_radius(&self) -> T {
        match self.values.iter().rposition(|&v| v > T::zero()) {
            Some(k) => T::from_usize_lossy(k + 1) * self.dr(),
            None => T::zero(),
        }
    }

    /// Piecewise-linear interpolation between node radii (flat inside the
    /// first node, zero beyond `rmax`).
    pub fn eval(&self, r: T) -> T {
        let dr = self.dr();
        let q = r / dr - lit(0.5);
        if q <= T::zero() {
            return self.values[0];
        }
        let k = q.floor().f64() as usize;
        if k + 1 >= self.nr {
            return if k < self.nr { self.values[k] * pos(T::one() - (q - T::from_usize_lossy(k))) } else { T::zero() };
        }
        let t = q - T::from_usize_lossy(k);
        self.values[k] * (T::one() - t) + self.values[k + 1] * t
    }

    /// Samples onto a 2D grid centred at `(c1, c2)`.
    pub fn to_field2d(&self, grid: Grid2D<T>, c1: T, c2: T) -> Field2D<T> {
        Field2D::from_fn(grid, |a, b| self.eval(((a - c1).powi(2) + (b - c2).powi(2)).sqrt()))
    }
}

/// `∫ω`.
pub fn mass<T: Real>(f: &Field2D<T>) -> T {
    pairwise_sum(&f.values) * f.grid.cell_area()
}

/// `κ⁻¹∫xω`.
pub fn center_of_mass<T: Real>(f: &Field2D<T>) -> Result<[T; 2]> {
    let m = pairwise_sum(&f.values);
    if m == T::zero() {
        return Err(GsqgError::Degenerate("center of mass of a zero-mass field".into()));
    }
    let g = &f.grid;
    let t1: Vec<T> = (0..g.len()).map(|k| f.values[k] * g.x1(k % g.nx)).collect();
    let t2: Vec<T> = (0..g.len()).map(|k| f.values[k] * g.x2(k / g.nx)).collect();
    Ok([pairwise_sum(&t1) / m, pairwise_sum(&t2) / m])
}

/// Impulse `∫x₁ω`.
pub fn impulse<T: Real>(f: &Field2D<T>) -> T {
    let g = &f.grid;
    let t: Vec<T> = (0..g.len()).map(|k| f.values[k] * g.x1(k % g.nx)).collect();
    pairwise_sum(&t) * g.cell_area()
}

/// Exponent for [`lp_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Norm<T> {
    L1,
    L2,
    Lp(T),
    Inf,
}

/// Discrete Lᵖ norm with cell measure.
pub fn lp_norm<T: Real>(f: &Field2D<T>, p: Norm<T>) -> T {
    norm_of(&f.values, f.grid.cell_area(), p)
}

pub(crate) fn norm_of<T: Real>(v: &[T], area: T, p: Norm<T>) -> T {
    match p {
        Norm::L1 => pairwise_sum(&v.iter().map(|x| x.abs()).collect::<Vec<_>>()) * area,
        Norm::L2 => (pairwise_sum(&v.iter().map(|x| *x * *x).collect::<Vec<_>>()) * area).sqrt(),
        Norm::Lp(p) => (pairwise_sum(&v.iter().map(|x| x.abs().powf(p)).collect::<Vec<_>>()) * area).powf(T::one() / p),
        Norm::Inf => v.iter().fold(T::zero(), |a, x| a.max(x.abs())),
    }
}

/// Order in which sorted values are placed along a column of `n` cells:
/// centre first, then alternately one step down and one step up.
pub fn center_out_order(n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n);
    if n % 2 == 1 {
        let c = n / 2;
        order.push(c);
        for d in 1..=c {
            order.push(c - d);
            order.push(c + d);
        }
    } else {
        let lo = n / 2 - 1;
        let hi = n / 2;
        for d in 0..n / 2 {
            order.push(lo - d);
            order.push(hi + d);
        }
    }
    order
}

/// Column-wise symmetric-decreasing rearrangement in x₂ about the grid midline.
pub fn steiner_symmetrize_x2<T: Real>(f: &Field2D<T>) -> Result<Field2D<T>> {
    if !f.nonneg || f.values.iter().any(|&v| v < T::zero()) {
        return Err(GsqgError::Domain("Steiner symmetrization needs a non-negative field".into()));
    }
    let g = &f.grid;
    let order = center_out_order(g.ny);
    let mut out = f.clone();
    let mut col = vec![T::zero(); g.ny];
    for i in 0..g.nx {
        for (j, c) in col.iter_mut().enumerate() {
            *c = f.at(i, j);
        }
        col.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        for (rank, &j) in order.iter().enumerate() {
            out.values[g.idx(i, j)] = col[rank];
        }
    }
    Ok(out)
}

fn sorted_desc_padded<T: Real>(v: &[T], len: usize) -> Vec<T> {
    let mut s = v.to_vec();
    s.resize(len, T::zero());
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    s
}

/// True iff the two fields have the same distribution function: sorted
/// values (zero-padded to a common count) agree within `tol` in ℓ∞.
pub fn rearrangement_equimeasurable<T: Real>(f1: &Field2D<T>, f2: &Field2D<T>, tol: T) -> Result<bool> {
    let a1 = f1.grid.cell_area();
    let a2 = f2.grid.cell_area();
    if ((a1 - a2) / a1).abs() > lit(1e-9) {
        return Err(GsqgError::Incompatible("equimeasurability needs equal cell areas".into()));
    }
    let n = f1.values.len().max(f2.values.len());
    let s1 = sorted_desc_padded(&f1.values, n);
    let s2 = sorted_desc_padded(&f2.values, n);
    Ok(s1.iter().zip(&s2).all(|(a, b)| (*a - *b).abs() <= tol))
}

/// Excess-mass comparison at one level α.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelReport<T> {
    pub alpha: T,
    pub candidate_excess: T,
    pub reference_excess: T,
    pub pass: bool,
}

/// `∫(f − α)₊`.
pub fn excess_mass<T: Real>(f: &Field2D<T>, alpha: T) -> T {
    let t: Vec<T> = f.values.iter().map(|&v| pos(v - alpha)).collect();
    pairwise_sum(&t) * f.grid.cell_area()
}

/// Levels at which to test weak-closure membership: 32 quantiles of the
/// reference's positive values, a tiny positive level and the maximum.
pub fn default_levels<T: Real>(reference: &Field2D<T>) -> Vec<T> {
    let mut v: Vec<T> = reference.values.iter().copied().filter(|&x| x > T::zero()).collect();
    if v.is_empty() {
        return vec![lit(1e-12)];
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let max = *v.last().expect("non-empty");
    let mut levels = vec![max * lit(1e-12)];
    for q in 0..32 {
        let k = ((q as f64 + 0.5) / 32.0 * v.len() as f64) as usize;
        levels.push(v[k.min(v.len() - 1)]);
    }
    levels.push(max);
    levels
}

/// Tests `∫(ζ−α)₊ ≤ ∫(ξ−α)₊ + tol` at each level.
pub fn weak_closure_membership<T: Real>(
    candidate: &Field2D<T>,
    reference: &Field2D<T>,
    alphas: &[T],
    tol: T,
) -> Vec<LevelReport<T>> {
    alphas
        .iter()
        .map(|&alpha| {
            let c = excess_mass(candidate, alpha);
            let r = excess_mass(reference, alpha);
            LevelReport { alpha, candidate_excess: c, reference_excess: r, pass: c <= r + tol }
        })
        .collect()
}

/// Odd extension in x₁ of a right-half-plane field, on the symmetric grid
/// `[-x1max, x1max]`.
pub fn reflect_oddify<T: Real>(f: &Field2D<T>) -> Result<Field2D<T>> {
    let g = &f.grid;
    if g.x1min < -g.h1 * lit(1e-9) {
        return Err(GsqgError::Domain("reflect_oddify needs a field on x1 >= 0".into()));
    }
    let offset = cell_offset(g.x1min, T::zero(), g.h1)? as usize;
    let half = offset + g.nx;
    let full = Grid2D::from_spacing(2 * half, g.ny, -g.h1 * T::from_usize_lossy(half), g.x2min, g.h1, g.h2)?;
    let mut out = Field2D::zeros(full);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let v = f.at(i, j);
            let ir = half + offset + i;
            let il = half - 1 - offset - i;
            let nx = out.grid.nx;
            out.values[j * nx + ir] = v;
            out.values[j * nx + il] = -v;
        }
    }
    out.refresh_flag();
    Ok(out)
}

/// Values moved by whole cells on the same grid: the output at cell
/// `(i, j)` is the input at `(i − di, j − dj)`, zero where that falls outside.
pub fn translate_cells<T: Real>(f: &Field2D<T>, di: i64, dj: i64) -> Field2D<T> {
    let g = f.grid;
    let mut out = Field2D::zeros(g);
    for j in 0..g.ny {
        let js = j as i64 - dj;
        if js < 0 || js >= g.ny as i64 {
            continue;
        }
        for i in 0..g.nx {
            let is = i as i64 - di;
            if is >= 0 && is < g.nx as i64 {
                out.values[g.idx(i, j)] = f.at(is as usize, js as usize);
            }
        }
    }
    out.nonneg = f.nonneg;
    out
}

/// Range of x₂ shifts, in cells, searched by [`orbital_distance`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftSearch {
    pub kmin: i64,
    pub kmax: i64,
}

impl ShiftSearch {
    pub fn around(center: i64, radius: i64) -> Self {
        Self { kmin: center - radius, kmax: center + radius }
    }
}

/// Result of [`orbital_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrbitalDistance<T> {
    pub value: T,
    /// Minimizing shift `c` in length units: the comparison is against `ω(· + c e₂)`.
    pub shift: T,
    /// Best value over the grid-aligned sweep.
    pub coarse_value: T,
    /// Mismatch between the parabolic prediction and the evaluated refinement.
    pub refinement_residual: T,
}

/// `‖ξ−ω(·+c e₂)‖₁ + ‖ξ−ω(·+c e₂)‖₂ + ‖x₁(ξ−ω(·+c e₂))‖₁` for a shift of
/// `c = s h₂` with real `s`, linearly interpolating ω between rows.
pub fn shifted_distance<T: Real>(xi: &Field2D<T>, omega: &Field2D<T>, s: T) -> Result<T> {
    let gx = &xi.grid;
    let go = &omega.grid;
    if gx.nx != go.nx || !approx_eq(gx.h1, go.h1) || !approx_eq(gx.h2, go.h2) {
        return Err(GsqgError::Incompatible("orbital distance needs equal spacings and columns".into()));
    }
    if cell_offset(gx.x1min, go.x1min, gx.h1)? != 0 {
        return Err(GsqgError::Incompatible("orbital distance needs aligned x1 ranges".into()));
    }
    let delta = cell_offset(gx.x2min, go.x2min, gx.h2)?;
    let sf = s.floor();
    let t = s - sf;
    let k = sf.f64() as i64;
    // xi row j compares with omega rows j + delta + k and j + delta + k + 1.
    let base = delta + k;
    let jlo = (-base - 1).min(0);
    let jhi = (go.ny as i64 - base + 1).max(gx.ny as i64);
    let area = gx.cell_area();
    let omega_at = |i: usize, jo: i64| -> T {
        if jo < 0 || jo >= go.ny as i64 {
            T::zero()
        } else {
            omega.at(i, jo as usize)
        }
    };
    let mut l1 = Vec::with_capacity(((jhi - jlo) as usize) * gx.nx);
    let mut l2 = Vec::with_capacity(l1.capacity());
    let mut w1 = Vec::with_capacity(l1.capacity());
    for j in jlo..jhi {
        for i in 0..gx.nx {
            let x = if j >= 0 && j < gx.ny as i64 { xi.at(i, j as usize) } else { T::zero() };
            let jo = j + base;
            let w = if t == T::zero() {
                omega_at(i, jo)
            } else {
                omega_at(i, jo) * (T::one() - t) + omega_at(i, jo + 1) * t
            };
            let d = x - w;
            l1.push(d.abs());
            l2.push(d * d);
            w1.push((gx.x1(i) * d).abs());
        }
    }
    Ok(pairwise_sum(&l1) * area + (pairwise_sum(&l2) * area).sqrt() + pairwise_sum(&w1) * area)
}

/// Orbital distance over x₂-translates: grid-aligned sweep over `search`,
/// then a three-point parabolic refinement around the coarse minimizer.
pub fn orbital_distance<T: Real>(
    xi: &Field2D<T>,
    omega: &Field2D<T>,
    search: ShiftSearch,
) -> Result<OrbitalDistance<T>> {
    if search.kmax < search.kmin {
        return Err(GsqgError::Parameter("empty shift range".into()));
    }
    let mut best = (search.kmin, T::infinity());
    let mut vals = Vec::new();
    for k in search.kmin..=search.kmax {
        let v = shifted_distance(xi, omega, lit(k as f64))?;
        vals.push(v);
        if v < best.1 {
            best = (k, v);
        }
    }
    let (kb, vb) = best;
    let h2 = xi.grid.h2;
    let pos_k = (kb - search.kmin) as usize;
    let mut out =
        OrbitalDistance { value: vb, shift: h2 * lit(kb as f64), coarse_value: vb, refinement_residual: T::zero() };
    let left = if pos_k > 0 { Some(vals[pos_k - 1]) } else { None };
    let right = vals.get(pos_k + 1).copied();
    let (dm, dp) = match (left, right) {
        (Some(a), Some(b)) => (a, b),
        (None, Some(b)) => (shifted_distance(xi, omega, lit((kb - 1) as f64))?, b),
        (Some(a), None) => (a, shifted_distance(xi, omega, lit((kb + 1) as f64))?),
        (None, None) => {
            (shifted_distance(xi, omega, lit((kb - 1) as f64))?, shifted_distance(xi, omega, lit((kb + 1) as f64))?)
        }
    };
    let curv = dm - vb - vb + dp;
    if curv > T::zero() {
        let t = (lit::<T>(0.5) * (dm - dp) / curv).max(-T::one()).min(T::one());
        if t != T::zero() {
            let predicted = vb + lit::<T>(0.5) * t * (dp - dm) + lit::<T>(0.5) * t * t * curv;
            let v = shifted_distance(xi, omega, lit::<T>(kb as f64) + t)?;
            out.refinement_residual = (predicted - v).abs();
            if v < vb {
                out.value = v;
                out.shift = h2 * (lit::<T>(kb as f64) + t);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid2D<f64> {
        Grid2D::new(n, n, -1.0, 1.0, -1.0, 1.0).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid2D::<f64>::new(1, 4, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(Grid2D::<f64>::new(4, 4, 1.0, 0.0, 0.0, 1.0).is_err());
        let g = grid(4);
        assert_eq!(g.h1, 0.5);
        assert_eq!(g.x1(0), -0.75);
    }

    #[test]
    fn mass_of_disk() {
        let g = grid(256);
        let f = Field2D::from_fn(g, |a: f64, b: f64| if a * a + b * b < 1.0 { 1.0 } else { 0.0 });
        assert!((mass(&f) - std::f64::consts::PI).abs() < 0.01 * std::f64::consts::PI);
        assert_eq!(mass(&Field2D::zeros(grid(8))), 0.0);
    }

    #[test]
    fn center_of_mass_cases() {
        let g = Grid2D::<f64>::new(3, 3, -0.5, 2.5, -1.5, 1.5).unwrap();
        let mut f = Field2D::zeros(g);
        assert!(center_of_mass(&f).is_err());
        f.values[f.grid.idx(0, 1)] = 1.0;
        f.values[f.grid.idx(2, 1)] = 1.0;
        let c = center_of_mass(&f).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15 && c[1].abs() < 1e-15);
    }

    #[test]
    fn impulse_translation_covariance() {
        let g = Grid2D::new(16, 8, 0.0, 2.0, -0.5, 0.5).unwrap();
        let f = Field2D::from_fn(g, |a: f64, b: f64| ((a - 0.6).powi(2) + b * b < 0.1) as i32 as f64);
        let mut moved = f.clone();
        moved.grid = g.shifted_cells(3, 0);
        let t = 3.0 * g.h1;
        assert!((impulse(&moved) - (impulse(&f) + t * mass(&f))).abs() < 1e-12);
    }

    #[test]
    fn column_example() {
        let g = Grid2D::new(2, 5, 0.0, 1.0, -2.5, 2.5).unwrap();
        let col = [0.0, 3.0, 1.0, 2.0, 0.0];
        let mut f = Field2D::zeros(g);
        for (j, v) in col.iter().enumerate() {
            f.values[f.grid.idx(0, j)] = *v;
        }
        let s = steiner_symmetrize_x2(&f).unwrap();
        let got: Vec<f64> = (0..5).map(|j| s.at(0, j)).collect();
        assert_eq!(got, vec![0.0, 2.0, 3.0, 1.0, 0.0]);
    }

    #[test]
    fn steiner_rejects_negative() {
        let mut f = Field2D::zeros(grid(4));
        f.values[3] = -1.0;
        f.refresh_flag();
        assert!(steiner_symmetrize_x2(&f).is_err());
    }

    #[test]
    fn center_out_even_and_odd() {
        assert_eq!(center_out_order(5), vec![2, 1, 3, 0, 4]);
        assert_eq!(center_out_order(4), vec![1, 2, 0, 3]);
    }

    #[test]
    fn equimeasurable_cases() {
        let f = Field2D::from_fn(grid(8), |a: f64, b: f64| (a + 2.0 * b).exp());
        let mut p = f.clone();
        p.values.reverse();
        assert!(rearrangement_equimeasurable(&f, &p, 0.0).unwrap());
        assert!(!rearrangement_equimeasurable(&f, &f.scaled(2.0), 1e-12).unwrap());
        let other = Field2D::zeros(Grid2D::new(8, 8, 0.0, 3.0, 0.0, 1.0).unwrap());
        assert!(rearrangement_equimeasurable(&f, &other, 0.0).is_err());
    }

    #[test]
    fn weak_closure_cases() {
        let xi = Field2D::from_fn(grid(16), |a: f64, b: f64| (1.0 - a * a - b * b).max(0.0));
        let levels = default_levels(&xi);
        assert!(weak_closure_membership(&xi, &xi, &levels, 0.0).iter().all(|r| r.pass));
        let trunc =
            Field2D::from_fn(grid(16), |a: f64, b: f64| if a > 0.0 { (1.0 - a * a - b * b).max(0.0) } else { 0.0 });
        assert!(weak_closure_membership(&trunc, &xi, &levels, 0.0).iter().all(|r| r.pass));
        let doubled = xi.scaled(2.0);
        assert!(!weak_closure_membership(&doubled, &xi, &levels[..1], 0.0)[0].pass);
    }

    #[test]
    fn oddify_properties() {
        let g = Grid2D::from_spacing(4, 4, 0.5, -1.0, 0.25, 0.5).unwrap();
        let f = Field2D::from_fn(g, |a: f64, b: f64| a + b * b);
        let o = reflect_oddify(&f).unwrap();
        assert_eq!(o.grid.nx, 12);
        assert!(mass(&o).abs() < 1e-15);
        let right = o.resample_cells(&f.grid).unwrap();
        assert_eq!(right.values, f.values);
        for j in 0..4 {
            for i in 0..6 {
                assert_eq!(o.at(i, j), -o.at(11 - i, j));
            }
        }
        let bad = Field2D::zeros(grid(4));
        assert!(reflect_oddify(&bad).is_err());
    }

    #[test]
    fn orbital_distance_exact_shift() {
        let g = Grid2D::new(24, 32, 0.0, 1.0, -1.0, 1.0).unwrap();
        let om = Field2D::from_fn(g, |a: f64, b: f64| (0.1 - (a - 0.5).powi(2) - b * b).max(0.0));
        let d0 = orbital_distance(&om, &om, ShiftSearch::around(0, 4)).unwrap();
        assert_eq!(d0.value, 0.0);
        assert_eq!(d0.shift, 0.0);
        // xi(x) = om(x + 3 h2 e2)
        let xi = Field2D::from_fn(g, |a: f64, b: f64| (0.1 - (a - 0.5).powi(2) - (b + 3.0 * g.h2).powi(2)).max(0.0));
        let d = orbital_distance(&xi, &om, ShiftSearch::around(0, 6)).unwrap();
        assert!(d.value < 1e-12, "{}", d.value);
        assert!((d.shift - 3.0 * g.h2).abs() < 1e-12);
        assert!(orbital_distance(&xi, &om, ShiftSearch { kmin: 2, kmax: 1 }).is_err());
    }

    #[test]
    fn radial_field_basics() {
        let r = RadialField::new(4, 2.0, vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        assert!(r.is_monotone(0.0));
        assert_eq!(r.support_radius(), 1.5);
        assert!((r.mass() - std::f64::consts::PI * (3.0 * 0.25 + 2.0 * 0.75 + 1.0 * 1.25)).abs() < 1e-12);
        assert!(RadialField::new(2, 1.0, vec![1.0, -1.0]).is_err());
    }
}

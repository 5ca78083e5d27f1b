//! Grid-to-grid potentials by FFT convolution with cell-integrated kernel
//! tables.
//!
//! The value at a cell centre is `Σ_j ω_j ∫_{cell j} G_s(x − y) dy`, with the
//! cell integral evaluated exactly through the corner primitive near the
//! diagonal and by tensor Gauss–Legendre farther out. The image part
//! `G_s(x − ȳ)` is a Hankel operator in x₁; it shares the forward transform of
//! the field with the free part.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{GsqgError, Result};
use crate::fields::{Field2D, Grid2D};
use crate::kernels::KernelParams;
use crate::real::{lit, Real};
use crate::special::GaussRule;

const NEAR_CELLS: f64 = 16.5;

/// Cell integrals of `|z|^{2s−2}` (without `c_s`).
#[derive(Clone, Debug)]
pub struct CellIntegrator {
    s: f64,
    gl: GaussRule,
    far: GaussRule,
}

impl CellIntegrator {
    pub fn new(s: f64) -> Self {
        Self { s, gl: GaussRule::new(24), far: GaussRule::new(4) }
    }

    /// `∫₀^a (1+t²)^{s−1} dt`.
    fn q(&self, a: f64) -> f64 {
        let e = self.s - 1.0;
        let f = |t: f64| (1.0 + t * t).powf(e);
        if a <= 1.0 {
            return self.gl.integrate(0.0, a, f);
        }
        let head = self.gl.integrate(0.0, 1.0, f);
        let tail = self.gl.integrate(0.0, a.ln(), |u| {
            let t = u.exp();
            t * (1.0 + t * t).powf(e)
        });
        head + tail
    }

    /// `∫₀^X∫₀^Y |z|^{2s−2} dz` for `X, Y ≥ 0`.
    pub fn corner(&self, x: f64, y: f64) -> f64 {
        if x <= 0.0 || y <= 0.0 {
            return 0.0;
        }
        let s2 = 2.0 * self.s;
        x.powf(s2) / s2 * self.q(y / x) + y.powf(s2) / s2 * self.q(x / y)
    }

    fn signed_corner(&self, x: f64, y: f64) -> f64 {
        let v = self.corner(x.abs(), y.abs());
        v * x.signum() * y.signum()
    }

    /// `∫ |z|^{2s−2}` over the `h1 × h2` cell centred at `(x, y)`.
    pub fn cell(&self, x: f64, y: f64, h1: f64, h2: f64) -> f64 {
        if x.abs() <= NEAR_CELLS * h1 && y.abs() <= NEAR_CELLS * h2 {
            let (a, b) = (x - 0.5 * h1, x + 0.5 * h1);
            let (c, d) = (y - 0.5 * h2, y + 0.5 * h2);
            self.signed_corner(b, d) - self.signed_corner(a, d) - self.signed_corner(b, c) + self.signed_corner(a, c)
        } else {
            let e = self.s - 1.0;
            let mut acc = 0.0;
            for (u, wu) in self.far.x.iter().zip(&self.far.w) {
                let z1 = x + 0.5 * h1 * u;
                for (v, wv) in self.far.x.iter().zip(&self.far.w) {
                    let z2 = y + 0.5 * h2 * v;
                    acc += wu * wv * (z1 * z1 + z2 * z2).powf(e);
                }
            }
            acc * 0.25 * h1 * h2
        }
    }
}

#[derive(Clone)]
struct Plans<T: Real> {
    f1: Arc<dyn Fft<T>>,
    i1: Arc<dyn Fft<T>>,
    f2: Arc<dyn Fft<T>>,
    i2: Arc<dyn Fft<T>>,
}

/// FFT convolution of cell-averaged fields with the cell-integrated free
/// kernel and, for half-plane grids, its image.
#[derive(Clone)]
pub struct GridConvolver<T: Real> {
    pub grid: Grid2D<T>,
    pub params: KernelParams<T>,
    p1: usize,
    p2: usize,
    free_hat: Vec<Complex<T>>,
    image_hat: Option<Vec<Complex<T>>>,
    plans: Plans<T>,
}

/// Free and image parts of a half-plane potential at cell centres.
#[derive(Clone, Debug)]
pub struct PotentialParts<T> {
    pub free: Vec<T>,
    pub image: Vec<T>,
}

impl<T: Real> PotentialParts<T> {
    /// `𝒢⁺ω = free − image`.
    pub fn halfplane(&self) -> Vec<T> {
        self.free.iter().zip(&self.image).map(|(a, b)| *a - *b).collect()
    }
}

impl<T: Real> GridConvolver<T> {
    /// Free-space convolver.
    pub fn free(grid: &Grid2D<T>, params: &KernelParams<T>) -> Self {
        let mut c = Self::bare(grid, params);
        let ci = CellIntegrator::new(params.s.f64());
        let (n1, n2) = (grid.nx, grid.ny);
        let (h1, h2) = (grid.h1.f64(), grid.h2.f64());
        let cs = params.c_s.f64();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); c.p1 * c.p2];
        for m2 in -(n2 as i64 - 1)..=(n2 as i64 - 1) {
            let r = wrap(m2, c.p2);
            for m1 in -(n1 as i64 - 1)..=(n1 as i64 - 1) {
                let v = cs * ci.cell(m1 as f64 * h1, m2 as f64 * h2, h1, h2);
                buf[r * c.p1 + wrap(m1, c.p1)] = Complex::new(lit(v), T::zero());
            }
        }
        c.forward(&mut buf);
        c.free_hat = buf;
        c
    }

    /// Half-plane convolver; the grid must lie in `x₁ ≥ 0`.
    pub fn half_plane(grid: &Grid2D<T>, params: &KernelParams<T>) -> Result<Self> {
        if grid.x1min < -grid.h1 * lit(1e-9) {
            return Err(GsqgError::Domain("half-plane grid must satisfy x1min >= 0".into()));
        }
        let mut c = Self::free(grid, params);
        let ci = CellIntegrator::new(params.s.f64());
        let (n1, n2) = (grid.nx, grid.ny);
        let (h1, h2) = (grid.h1.f64(), grid.h2.f64());
        let x0 = grid.x1min.f64();
        let cs = params.c_s.f64();
        // Image offset for target i and source i': x1 + y1 = 2 x0 + (i + i' + 1) h1.
        // Stored at index m = i + i' − (n1 − 1) so that the reversed-field
        // convolution lands on output index i.
        let mut buf = vec![Complex::new(T::zero(), T::zero()); c.p1 * c.p2];
        for m2 in -(n2 as i64 - 1)..=(n2 as i64 - 1) {
            let r = wrap(m2, c.p2);
            for m in -(n1 as i64 - 1)..=(n1 as i64 - 1) {
                let sum = (m + n1 as i64 - 1) as f64;
                let x = 2.0 * x0 + (sum + 1.0) * h1;
                let v = cs * ci.cell(x, m2 as f64 * h2, h1, h2);
                buf[r * c.p1 + wrap(m, c.p1)] = Complex::new(lit(v), T::zero());
            }
        }
        c.forward(&mut buf);
        // Reversal in x1 multiplies the field spectrum by this phase.
        let p1 = c.p1;
        let p2 = c.p2;
        for k1 in 0..p1 {
            let ang = -2.0 * std::f64::consts::PI * (k1 as f64) * ((n1 - 1) as f64) / p1 as f64;
            let ph = Complex::new(lit::<T>(ang.cos()), lit::<T>(ang.sin()));
            for k2 in 0..p2 {
                let idx = k1 * p2 + k2;
                buf[idx] = buf[idx] * ph;
            }
        }
        c.image_hat = Some(buf);
        Ok(c)
    }

    fn bare(grid: &Grid2D<T>, params: &KernelParams<T>) -> Self {
        let p1 = 2 * grid.nx;
        let p2 = 2 * grid.ny;
        let mut planner = FftPlanner::<T>::new();
        let plans = Plans {
            f1: planner.plan_fft_forward(p1),
            i1: planner.plan_fft_inverse(p1),
            f2: planner.plan_fft_forward(p2),
            i2: planner.plan_fft_inverse(p2),
        };
        Self { grid: *grid, params: *params, p1, p2, free_hat: Vec::new(), image_hat: None, plans }
    }

    pub fn is_half_plane(&self) -> bool {
        self.image_hat.is_some()
    }

    /// Row FFTs over x₁, transpose, row FFTs over x₂. Output layout `[k1][k2]`.
    fn forward(&self, buf: &mut Vec<Complex<T>>) {
        let (p1, p2) = (self.p1, self.p2);
        self.plans.f1.process(buf);
        let mut t = transpose(buf, p2, p1);
        self.plans.f2.process(&mut t);
        *buf = t;
    }

    /// Inverse of [`forward`], normalized.
    fn inverse(&self, buf: &mut Vec<Complex<T>>) {
        let (p1, p2) = (self.p1, self.p2);
        self.plans.i2.process(buf);
        let mut t = transpose(buf, p1, p2);
        self.plans.i1.process(&mut t);
        let scale = T::one() / T::from_usize_lossy(p1 * p2);
        t.iter_mut().for_each(|z| *z = *z * scale);
        *buf = t;
    }

    fn spectrum(&self, values: &[T]) -> Vec<Complex<T>> {
        let g = &self.grid;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.p1 * self.p2];
        for j in 0..g.ny {
            for i in 0..g.nx {
                buf[j * self.p1 + i] = Complex::new(values[j * g.nx + i], T::zero());
            }
        }
        self.forward(&mut buf);
        buf
    }

    fn extract(&self, buf: &[Complex<T>]) -> Vec<T> {
        let g = &self.grid;
        let mut out = vec![T::zero(); g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                out[j * g.nx + i] = buf[j * self.p1 + i].re;
            }
        }
        out
    }

    fn image_product(&self, fhat: &[Complex<T>], ih: &[Complex<T>]) -> Vec<Complex<T>> {
        let (p1, p2) = (self.p1, self.p2);
        let mut out = vec![Complex::new(T::zero(), T::zero()); p1 * p2];
        for k1 in 0..p1 {
            for k2 in 0..p2 {
                let mk2 = (p2 - k2) % p2;
                out[k1 * p2 + k2] = ih[k1 * p2 + k2] * fhat[k1 * p2 + mk2].conj();
            }
        }
        out
    }

    /// Free-space potential at cell centres.
    pub fn free_potential(&self, values: &[T]) -> Vec<T> {
        let fhat = self.spectrum(values);
        let mut prod: Vec<Complex<T>> = fhat.iter().zip(&self.free_hat).map(|(a, b)| *a * *b).collect();
        self.inverse(&mut prod);
        self.extract(&prod)
    }

    /// Free and image parts of the half-plane potential.
    pub fn parts(&self, values: &[T]) -> Result<PotentialParts<T>> {
        let ih = self
            .image_hat
            .as_ref()
            .ok_or_else(|| GsqgError::Domain("free-space convolver has no image part".into()))?;
        let fhat = self.spectrum(values);
        let mut free: Vec<Complex<T>> = fhat.iter().zip(&self.free_hat).map(|(a, b)| *a * *b).collect();
        let mut image = self.image_product(&fhat, ih);
        self.inverse(&mut free);
        self.inverse(&mut image);
        Ok(PotentialParts { free: self.extract(&free), image: self.extract(&image) })
    }

    /// `𝒢⁺ω` at cell centres (one forward and one inverse transform).
    pub fn halfplane_potential(&self, values: &[T]) -> Result<Vec<T>> {
        let ih = self
            .image_hat
            .as_ref()
            .ok_or_else(|| GsqgError::Domain("free-space convolver has no image part".into()))?;
        let fhat = self.spectrum(values);
        let mut prod = self.image_product(&fhat, ih);
        for (z, (a, b)) in prod.iter_mut().zip(fhat.iter().zip(&self.free_hat)) {
            *z = *a * *b - *z;
        }
        self.inverse(&mut prod);
        Ok(self.extract(&prod))
    }

    /// Potential appropriate to the convolver: `𝒢⁺ω` for half-plane grids,
    /// `𝒢ω` otherwise.
    pub fn potential(&self, field: &Field2D<T>) -> Vec<T> {
        if self.is_half_plane() {
            self.halfplane_potential(&field.values).expect("half-plane convolver")
        } else {
            self.free_potential(&field.values)
        }
    }
}

#[inline]
fn wrap(m: i64, p: usize) -> usize {
    m.rem_euclid(p as i64) as usize
}

/// Transposes a `rows × cols` row-major buffer.
fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    const B: usize = 32;
    out.resize(a.len(), a[0]);
    for rb in (0..rows).step_by(B) {
        for cb in (0..cols).step_by(B) {
            for r in rb..(rb + B).min(rows) {
                for c in cb..(cb + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_cell_matches_closed_form() {
        let ci = CellIntegrator::new(0.5);
        let h = 0.01;
        let v = ci.cell(0.0, 0.0, h, h);
        assert!((v - 4.0 * h * (1.0 + 2f64.sqrt()).ln()).abs() < 1e-14);
    }

    #[test]
    fn near_rule_matches_tensor_gauss() {
        let ci = CellIntegrator::new(0.3);
        let h = 0.1;
        let (x, y) = (16.0 * h, 3.0 * h);
        let near = ci.cell(x, y, h, h);
        let gl = GaussRule::new(12);
        let reference = gl.integrate(x - 0.5 * h, x + 0.5 * h, |a| {
            gl.integrate(y - 0.5 * h, y + 0.5 * h, |b| (a * a + b * b).powf(-0.7))
        });
        assert!(((near - reference) / reference).abs() < 1e-11, "{near} {reference}");
    }

    #[test]
    fn corner_of_unit_square_s_half() {
        let ci = CellIntegrator::new(0.5);
        // ∫∫_{[0,1]²} |z|^{-1} = 2 asinh(1)
        assert!((ci.corner(1.0, 1.0) - 2.0 * (1.0f64).asinh()).abs() < 1e-14);
        // Elongated rectangle against adaptive quadrature in polar form.
        let (v, _) = crate::special::integrate_adaptive(
            |y| crate::special::integrate_adaptive(|x| (x * x + y * y).powf(-0.5), 0.0, 0.02, 1e-15, 1e-13, 200).0,
            0.0,
            1.0,
            1e-14,
            1e-12,
            400,
        );
        assert!((ci.corner(0.02, 1.0) - v).abs() < 1e-10, "{} {}", ci.corner(0.02, 1.0), v);
    }

    fn direct(field: &Field2D<f64>, params: &KernelParams<f64>, image: bool) -> Vec<f64> {
        let ci = CellIntegrator::new(params.s);
        let g = &field.grid;
        (0..g.len())
            .map(|k| {
                let [x1, x2] = g.center(k);
                let mut acc = 0.0;
                for (l, v) in field.values.iter().enumerate() {
                    let [y1, y2] = g.center(l);
                    let d1 = if image { x1 + y1 } else { x1 - y1 };
                    acc += v * params.c_s * ci.cell(d1, x2 - y2, g.h1, g.h2);
                }
                acc
            })
            .collect()
    }

    #[test]
    fn fft_matches_direct_sum() {
        let params = KernelParams::new(0.4).unwrap();
        let g = Grid2D::new(7, 5, 0.3, 1.0, -0.4, 0.6).unwrap();
        let f = Field2D::from_fn(g, |a: f64, b: f64| (3.0 * a).sin() + b * b + 0.2);
        let conv = GridConvolver::half_plane(&g, &params).unwrap();
        let parts = conv.parts(&f.values).unwrap();
        let free = direct(&f, &params, false);
        let image = direct(&f, &params, true);
        for k in 0..g.len() {
            assert!((parts.free[k] - free[k]).abs() < 1e-12, "free {k}");
            assert!((parts.image[k] - image[k]).abs() < 1e-12, "image {k}");
        }
        let hp = conv.halfplane_potential(&f.values).unwrap();
        for k in 0..g.len() {
            assert!((hp[k] - (free[k] - image[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_convolver_runs() {
        let params = KernelParams::new(0.5f32).unwrap();
        let g = Grid2D::<f32>::new(8, 8, 0.5, 1.5, -0.5, 0.5).unwrap();
        let f = Field2D::from_fn(g, |_, _| 1.0f32);
        let conv = GridConvolver::half_plane(&g, &params).unwrap();
        let v = conv.halfplane_potential(&f.values).unwrap();
        assert!(v.iter().all(|x| x.is_finite() && *x > 0.0));
    }
}

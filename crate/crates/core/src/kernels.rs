//! Riesz kernel, method-of-images half-plane kernel and direct-summation
//! potentials and velocities at arbitrary targets.

use rayon::prelude::*;

use crate::error::{GsqgError, Result};
use crate::fields::Field2D;
use crate::real::{lit, pairwise_sum, Real};
use crate::special::gamma;

/// Order `s` and the constant `c_s = Γ(1−s) / (2^{2s} π Γ(s))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams<T> {
    pub s: T,
    pub c_s: T,
}

impl<T: Real> KernelParams<T> {
    pub fn new(s: T) -> Result<Self> {
        Ok(Self { s, c_s: riesz_constant(s)? })
    }

    /// Exponent `2s − 2` of the kernel.
    #[inline]
    pub fn alpha(&self) -> T {
        self.s + self.s - lit(2.0)
    }
}

/// Method-of-images kernel on the right half plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlaneKernel<T> {
    pub params: KernelParams<T>,
}

impl<T: Real> HalfPlaneKernel<T> {
    pub fn eval(&self, x: [T; 2], y: [T; 2]) -> Result<T> {
        kernel_halfplane(x, y, &self.params)
    }
}

/// `c_s = Γ(1−s) / (2^{2s} π Γ(s))`.
pub fn riesz_constant<T: Real>(s: T) -> Result<T> {
    if !(s > T::zero()) {
        return Err(GsqgError::Parameter(format!("s = {s} violates s > 0")));
    }
    if !(s < T::one()) {
        return Err(GsqgError::Parameter(format!("s = {s} violates s < 1")));
    }
    let sf = s.f64();
    let c = gamma(1.0 - sf) / (4f64.powf(sf) * std::f64::consts::PI * gamma(sf));
    Ok(lit(c))
}

/// `c_s |z|^{2s−2}`.
pub fn kernel_free<T: Real>(z: [T; 2], params: &KernelParams<T>) -> Result<T> {
    let r2 = z[0] * z[0] + z[1] * z[1];
    if r2 == T::zero() {
        return Err(GsqgError::Singularity("kernel_free at z = 0".into()));
    }
    Ok(params.c_s * r2.powf(params.s - T::one()))
}

/// `G⁺(x,y) = c_s|x−y|^{2s−2} − c_s|x−ȳ|^{2s−2}`, `ȳ = (−y₁, y₂)`.
pub fn kernel_halfplane<T: Real>(x: [T; 2], y: [T; 2], params: &KernelParams<T>) -> Result<T> {
    if x == y {
        return Err(GsqgError::Singularity("kernel_halfplane at x = y".into()));
    }
    let d2 = x[1] - y[1];
    let a = x[0] - y[0];
    let b = x[0] + y[0];
    let e = params.s - T::one();
    // The two squared distances are formed symmetrically in (x, y).
    let near = (a * a + d2 * d2).powf(e);
    let far = (b * b + d2 * d2).powf(e);
    Ok(params.c_s * (near - far))
}

/// Integral of `c_s|z|^{2s−2}` over the disk of radius `h/√π` (the disk with
/// the area of an `h × h` cell).
pub fn singular_cell_weight<T: Real>(h: T, params: &KernelParams<T>) -> Result<T> {
    if !(h > T::zero()) {
        return Err(GsqgError::Parameter("cell width must be positive".into()));
    }
    let rho = h / T::PI().sqrt();
    Ok(params.c_s * T::PI() * rho.powf(params.s + params.s) / params.s)
}

#[inline]
fn coincides<T: Real>(x: [T; 2], y: [T; 2], h1: T, h2: T) -> bool {
    let tol = lit::<T>(1e-9);
    (x[0] - y[0]).abs() <= tol * h1 && (x[1] - y[1]).abs() <= tol * h2
}

/// Midpoint-rule potential `∫G_s(x−y)ω(y)dy` at each target. A target on a
/// cell centre receives the equal-area disk weight for that cell.
pub fn potential_free<T: Real>(field: &Field2D<T>, targets: &[[T; 2]], params: &KernelParams<T>) -> Vec<T> {
    let g = &field.grid;
    let area = g.cell_area();
    let self_w = singular_cell_weight(area.sqrt(), params).expect("positive cell");
    let e = params.s - T::one();
    targets
        .par_iter()
        .map(|&x| {
            let mut terms = Vec::with_capacity(g.len());
            for (k, &v) in field.values.iter().enumerate() {
                let y = g.center(k);
                if coincides(x, y, g.h1, g.h2) {
                    terms.push(self_w * v);
                } else {
                    let d1 = x[0] - y[0];
                    let d2 = x[1] - y[1];
                    terms.push(params.c_s * (d1 * d1 + d2 * d2).powf(e) * v * area);
                }
            }
            pairwise_sum(&terms)
        })
        .collect()
}

/// Half-plane potential `∫G⁺(x,y)ω(y)dy`. Vanishes exactly on `x₁ = 0`.
pub fn potential_halfplane<T: Real>(
    field: &Field2D<T>,
    targets: &[[T; 2]],
    params: &KernelParams<T>,
) -> Result<Vec<T>> {
    check_half_plane(field)?;
    let g = &field.grid;
    let area = g.cell_area();
    let self_w = singular_cell_weight(area.sqrt(), params)?;
    let e = params.s - T::one();
    Ok(targets
        .par_iter()
        .map(|&x| {
            let mut terms = Vec::with_capacity(g.len());
            for (k, &v) in field.values.iter().enumerate() {
                let y = g.center(k);
                let d2 = x[1] - y[1];
                let b = x[0] + y[0];
                let far = params.c_s * (b * b + d2 * d2).powf(e) * area;
                let near = if coincides(x, y, g.h1, g.h2) {
                    self_w
                } else {
                    let a = x[0] - y[0];
                    params.c_s * (a * a + d2 * d2).powf(e) * area
                };
                terms.push((near - far) * v);
            }
            pairwise_sum(&terms)
        })
        .collect())
}

pub(crate) fn check_half_plane<T: Real>(field: &Field2D<T>) -> Result<()> {
    let g = &field.grid;
    for j in 0..g.ny {
        for i in 0..g.nx {
            if g.x1(i) < T::zero() && field.at(i, j) != T::zero() {
                return Err(GsqgError::Domain("field has mass in x1 < 0".into()));
            }
        }
    }
    Ok(())
}

/// `u(x) = Σ c_s(2s−2)|x−y|^{2s−4}(x−y)^⊥ m_cell` with `(a₁,a₂)^⊥ = (a₂,−a₁)`;
/// the self cell contributes nothing.
pub fn velocity_free<T: Real>(field: &Field2D<T>, targets: &[[T; 2]], params: &KernelParams<T>) -> Vec<[T; 2]> {
    let g = &field.grid;
    let area = g.cell_area();
    let e = params.s - lit(2.0);
    let coef = params.c_s * params.alpha();
    targets
        .par_iter()
        .map(|&x| {
            let mut t1 = Vec::with_capacity(g.len());
            let mut t2 = Vec::with_capacity(g.len());
            for (k, &v) in field.values.iter().enumerate() {
                let y = g.center(k);
                if coincides(x, y, g.h1, g.h2) {
                    continue;
                }
                let d1 = x[0] - y[0];
                let d2 = x[1] - y[1];
                let w = coef * (d1 * d1 + d2 * d2).powf(e) * v * area;
                t1.push(w * d2);
                t2.push(-w * d1);
            }
            [pairwise_sum(&t1), pairwise_sum(&t2)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid2D;
    use std::f64::consts::PI;

    fn p05() -> KernelParams<f64> {
        KernelParams::new(0.5).unwrap()
    }

    #[test]
    fn riesz_constant_half() {
        assert!((riesz_constant(0.5_f64).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(riesz_constant(0.0_f64).is_err());
        assert!(riesz_constant(1.0_f64).is_err());
        let e = riesz_constant(1.5_f64).unwrap_err().to_string();
        assert!(e.contains("s < 1"), "{e}");
    }

    #[test]
    fn kernel_free_cases() {
        let p = p05();
        assert!((kernel_free([1.0, 0.0], &p).unwrap() - p.c_s).abs() < 1e-16);
        assert!((kernel_free([2.0, 0.0], &p).unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-16);
        assert!(kernel_free([0.0, 0.0], &p).is_err());
    }

    #[test]
    fn kernel_halfplane_cases() {
        let p = p05();
        assert_eq!(kernel_halfplane([0.0, 0.3], [0.7, -0.2], &p).unwrap(), 0.0);
        let v = kernel_halfplane([1.0, 0.0], [2.0, 0.0], &p).unwrap();
        assert!((v - 1.0 / (3.0 * PI)).abs() < 1e-15);
        assert!(kernel_halfplane([1.0, 1.0], [1.0, 1.0], &p).is_err());
    }

    #[test]
    fn self_weight_unit_disk() {
        let w = singular_cell_weight(PI.sqrt(), &p05()).unwrap();
        assert!((w - 1.0).abs() < 1e-14);
        assert!(singular_cell_weight(0.0, &p05()).is_err());
    }

    #[test]
    fn single_cell_velocity_is_counterclockwise() {
        let g = Grid2D::new(3, 3, -1.5, 1.5, -1.5, 1.5).unwrap();
        let mut f = Field2D::zeros(g);
        f.values[4] = 1.0; // unit mass at the origin
        let u = velocity_free(&f, &[[2.0, 0.0], [0.0, 2.0], [0.0, 0.0]], &p05());
        let c = 1.0 / (2.0 * PI) / 4.0;
        assert!(u[0][0].abs() < 1e-16 && (u[0][1] - c).abs() < 1e-15);
        assert!((u[1][0] + c).abs() < 1e-15 && u[1][1].abs() < 1e-16);
        assert_eq!(u[2], [0.0, 0.0]);
    }

    #[test]
    fn halfplane_rejects_left_mass() {
        let g = Grid2D::new(4, 4, -1.0, 1.0, -1.0, 1.0).unwrap();
        let f = Field2D::from_fn(g, |_: f64, _: f64| 1.0);
        assert!(potential_halfplane(&f, &[[0.5, 0.0]], &p05()).is_err());
    }
}

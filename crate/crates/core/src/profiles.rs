//! Vorticity profile `f`, its dual primitive `J`, hypothesis checks and the
//! closed-form constants of the identities.

use num_traits::{Num, Zero};
use serde::Serialize;

use crate::error::{GsqgError, Result};
use crate::kernels::riesz_constant;
use crate::real::{lit, pos, Real};

/// Profile interface used by the solvers: `f`, `f⁻¹`, `J = ∫f⁻¹` and `(J')⁻¹`.
pub trait Profile<T: Real>: Send + Sync {
    fn f(&self, t: T) -> T;
    fn f_inv(&self, tau: T) -> T;
    /// `J(t)` for `t ≥ 0`.
    fn j(&self, t: T) -> T;
    /// `(J')⁻¹(τ)`, zero for `τ ≤ 0`.
    fn j_prime_inverse(&self, tau: T) -> T;
}

/// `f(t) = t₊^p` paired with `J(t) = L t^γ`, `γ = 1 + 1/p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerProfile<T> {
    pub p: T,
    pub s: T,
    #[serde(rename = "L")]
    pub l: T,
    /// Set when `p ≤ 1`: maximizers exist but uniqueness is not covered.
    pub no_uniqueness_guarantee: bool,
}

impl<T: Real> PowerProfile<T> {
    /// Accepts `0 < p < 1/(1−s)` and `L > 0`.
    pub fn new(p: T, s: T, l: T) -> Result<Self> {
        if !(s > T::zero() && s < T::one()) {
            return Err(GsqgError::Parameter(format!("s = {s} violates 0 < s < 1")));
        }
        if !(p > T::zero()) {
            return Err(GsqgError::Parameter(format!("p = {p} violates p > 0")));
        }
        let bound = T::one() / (T::one() - s);
        if !(p < bound) {
            return Err(GsqgError::Parameter(format!("p = {p} violates p < 1/(1-s) = {bound}")));
        }
        if !(l > T::zero()) {
            return Err(GsqgError::Parameter(format!("L = {l} violates L > 0")));
        }
        Ok(Self { p, s, l, no_uniqueness_guarantee: p <= T::one() })
    }

    /// `L = p/(p+1)`, for which `J = ∫₀^t f⁻¹`.
    pub fn canonical(p: T, s: T) -> Result<Self> {
        Self::new(p, s, p / (p + T::one()))
    }

    #[inline]
    pub fn gamma(&self) -> T {
        T::one() + T::one() / self.p
    }

    /// `L_γ = (1/(Lγ))^{1/(γ−1)}`.
    pub fn l_gamma(&self) -> T {
        (T::one() / (self.l * self.gamma())).powf(self.p)
    }

    /// `J'(t) = Lγ t^{1/p}`.
    pub fn j_prime(&self, t: T) -> T {
        self.l * self.gamma() * pos(t).powf(T::one() / self.p)
    }

    /// `J(t)`, rejecting negative arguments.
    pub fn j_checked(&self, t: T) -> Result<T> {
        if t < T::zero() {
            return Err(GsqgError::Domain(format!("J is defined for t >= 0 (got {t})")));
        }
        Ok(self.j(t))
    }

    pub fn in_uniqueness_regime(&self) -> bool {
        self.p > T::one()
    }
}

impl<T: Real> Profile<T> for PowerProfile<T> {
    #[inline]
    fn f(&self, t: T) -> T {
        pos(t).powf(self.p)
    }

    #[inline]
    fn f_inv(&self, tau: T) -> T {
        pos(tau).powf(T::one() / self.p)
    }

    #[inline]
    fn j(&self, t: T) -> T {
        self.l * pos(t).powf(self.gamma())
    }

    #[inline]
    fn j_prime_inverse(&self, tau: T) -> T {
        (pos(tau) / (self.l * self.gamma())).powf(self.p)
    }
}

type ScalarFn<T> = Box<dyn Fn(T) -> T + Send + Sync>;

/// Profile given by closures, for profiles other than the power law.
pub struct ClosureProfile<T> {
    pub f: ScalarFn<T>,
    pub f_inv: ScalarFn<T>,
    pub j: ScalarFn<T>,
    pub j_prime_inverse: ScalarFn<T>,
}

impl<T: Real> Profile<T> for ClosureProfile<T> {
    fn f(&self, t: T) -> T {
        (self.f)(t)
    }
    fn f_inv(&self, tau: T) -> T {
        (self.f_inv)(tau)
    }
    fn j(&self, t: T) -> T {
        (self.j)(t)
    }
    fn j_prime_inverse(&self, tau: T) -> T {
        (self.j_prime_inverse)(tau)
    }
}

/// Outcome of [`validate_hypotheses`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisReport {
    /// `f(0) = 0` and `f` strictly increasing on the sampled positive grid.
    pub h1: bool,
    /// `t^{−1/(1−s)} f(t)` grows monotonically as `t → 0⁺` on the sample.
    pub diverges_at_zero: bool,
    /// `t^{−1/(1−s)} f(t)` decays monotonically as `t → ∞` on the sample.
    pub decays_at_infinity: bool,
    /// Exact test `p < 1/(1−s)` when the profile is a power law.
    pub power_law_exact: Option<bool>,
    pub pass: bool,
}

/// Samples `t ↦ t^{−1/(1−s)} f(t)` on logarithmic grids near 0 and ∞.
pub fn validate_hypotheses<T: Real>(profile: &dyn Profile<T>, s: T) -> HypothesisReport {
    let e = -1.0 / (1.0 - s.f64());
    let g = |t: f64| t.powf(e) * profile.f(lit(t)).f64();
    let small: Vec<f64> = (0..=12).map(|k| 10f64.powf(-2.0 - 0.5 * k as f64)).collect();
    let large: Vec<f64> = (0..=12).map(|k| 10f64.powf(2.0 + 0.5 * k as f64)).collect();
    let gs: Vec<f64> = small.iter().map(|&t| g(t)).collect();
    let gl: Vec<f64> = large.iter().map(|&t| g(t)).collect();
    let diverges_at_zero = gs.windows(2).all(|w| w[1] > w[0]) && gs[gs.len() - 1] > 10.0 * gs[0];
    let decays_at_infinity = gl.windows(2).all(|w| w[1] < w[0]) && gl[gl.len() - 1] < 0.1 * gl[0];
    let mut h1 = profile.f(T::zero()) == T::zero();
    let mut prev = 0.0;
    for k in 0..=40 {
        let t = 10f64.powf(-4.0 + 0.2 * k as f64);
        let v = profile.f(lit(t)).f64();
        h1 &= v > prev && v >= 0.0;
        prev = v;
    }
    let pass = h1 && diverges_at_zero && decays_at_infinity;
    HypothesisReport { h1, diverges_at_zero, decays_at_infinity, power_law_exact: None, pass }
}

/// Power-law version: the sampled report plus the exact bound.
pub fn validate_power_law<T: Real>(p: T, s: T) -> HypothesisReport {
    let prof = PowerProfile { p, s, l: p / (p + T::one()), no_uniqueness_guarantee: p <= T::one() };
    let mut r = validate_hypotheses(&prof, s);
    let exact = p > T::zero() && p < T::one() / (T::one() - s);
    r.power_law_exact = Some(exact);
    r.pass = exact && r.h1;
    r
}

/// `(A_γ, B_γ, C_γ)` over any number type; exact for rationals.
pub fn identity_coefficients<N>(s: N, gamma: N) -> Result<(N, N, N)>
where
    N: Num + Clone + Zero + PartialEq,
{
    let one = N::one();
    let two = one.clone() + one.clone();
    let den = two.clone() - s.clone() - gamma.clone();
    if den.is_zero() {
        return Err(GsqgError::DegenerateConstant("2 - s - gamma = 0".into()));
    }
    let sm1 = s.clone() - one;
    if sm1.is_zero() {
        return Err(GsqgError::DegenerateConstant("s = 1".into()));
    }
    let num = two.clone() - gamma.clone() - gamma * s.clone();
    let a = num.clone() / den.clone();
    let b = (two.clone() - s) / sm1.clone() - num.clone() / (two.clone() * sm1 * den.clone());
    let c = N::zero() - num / (two * den);
    Ok((a, b, c))
}

/// Constants entering the identities and the asymptotics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StructConstants<T> {
    pub s: T,
    pub p: T,
    #[serde(rename = "L")]
    pub l: T,
    pub c_s: T,
    pub gamma: T,
    pub a_gamma: T,
    pub b_gamma: T,
    pub c_gamma: T,
    pub l_gamma: T,
    pub d0: T,
    pub kappa: T,
    #[serde(rename = "W")]
    pub w: T,
}

/// `d₀ = ((1−s) c_s κ / (2^{2−2s} W))^{1/(3−2s)}`.
pub fn d0<T: Real>(s: T, kappa: T, w: T) -> Result<T> {
    let cs = riesz_constant(s)?;
    let two = lit::<T>(2.0);
    let base = (T::one() - s) * cs * kappa / (two.powf(two - s - s) * w);
    Ok(base.powf(T::one() / (lit::<T>(3.0) - s - s)))
}

/// `h(τ) = c_s κ / (2^{3−2s} τ^{2−2s}) + W τ`, minimized at `d₀`.
pub fn d0_objective<T: Real>(tau: T, s: T, kappa: T, w: T) -> Result<T> {
    let cs = riesz_constant(s)?;
    let two = lit::<T>(2.0);
    Ok(cs * kappa / (two.powf(lit::<T>(3.0) - s - s) * tau.powf(two - s - s)) + w * tau)
}

pub fn compute_struct_constants<T: Real>(s: T, p: T, l: T, kappa: T, w: T) -> Result<StructConstants<T>> {
    if !(s > T::zero() && s < T::one()) {
        return Err(GsqgError::Parameter(format!("s = {s} violates 0 < s < 1")));
    }
    if !(p > T::zero()) || !(l > T::zero()) || !(kappa > T::zero()) || !(w > T::zero()) {
        return Err(GsqgError::Parameter("p, L, kappa and W must be positive".into()));
    }
    let gamma = T::one() + T::one() / p;
    let (a, b, c) = identity_coefficients(s, gamma)?;
    Ok(StructConstants {
        s,
        p,
        l,
        c_s: riesz_constant(s)?,
        gamma,
        a_gamma: a,
        b_gamma: b,
        c_gamma: c,
        l_gamma: (T::one() / (l * gamma)).powf(T::one() / (gamma - T::one())),
        d0: d0(s, kappa, w)?,
        kappa,
        w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_examples() {
        let pr = PowerProfile::canonical(1.5_f64, 0.5).unwrap();
        assert_eq!(pr.f(-1.0), 0.0);
        assert_eq!(pr.f(0.0), 0.0);
        assert_eq!(pr.f(1.0), 1.0);
        for t in [0.0, 0.3, 2.0, 7.5] {
            assert!((pr.j_prime_inverse(t) - pr.f(t)).abs() <= 1e-14 * (1.0 + pr.f(t)));
        }
        let p2 = PowerProfile::canonical(2.0_f64, 0.6).unwrap();
        assert!((p2.j(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!(p2.j_checked(-1.0).is_err());
        assert!((pr.l_gamma() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn validation_examples() {
        assert!(validate_power_law(1.5_f64, 0.5).pass);
        assert!(!validate_power_law(2.5_f64, 0.5).pass);
        assert!(validate_power_law(3.9_f64, 0.75).pass);
        let pr = PowerProfile::canonical(1.5_f64, 0.5).unwrap();
        assert!(validate_hypotheses(&pr, 0.5).pass);
        assert!(PowerProfile::canonical(2.5_f64, 0.5).is_err());
        assert!(PowerProfile::canonical(0.8_f64, 0.5).unwrap().no_uniqueness_guarantee);
    }

    #[test]
    fn closure_profile_arctan_passes() {
        let pr: ClosureProfile<f64> = ClosureProfile {
            f: Box::new(|t| t.max(0.0).atan()),
            f_inv: Box::new(|v| v.max(0.0).tan()),
            j: Box::new(|t| -t.max(0.0).cos().ln()),
            j_prime_inverse: Box::new(|v| v.max(0.0).atan()),
        };
        assert!(validate_hypotheses(&pr, 0.5).pass);
    }

    #[test]
    fn d0_half() {
        let d = d0(0.5_f64, 1.0, 1.0).unwrap();
        assert!((d - (1.0 / (8.0 * std::f64::consts::PI)).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn degenerate_constants() {
        // s = 0.5 with gamma = 1.5 makes 2 - s - gamma vanish.
        assert!(identity_coefficients(0.5_f64, 1.5).is_err());
        assert!(compute_struct_constants(0.5_f64, 2.0, 1.0, 1.0, 1.0).is_err());
    }
}

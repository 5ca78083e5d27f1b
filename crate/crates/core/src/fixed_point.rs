//! Mass-constrained fixed-point iteration `ω ↦ (J')⁻¹((Kω − ℓ − μ)₊)` shared
//! by the limiting and pair solvers.

use crate::anderson::Anderson;
use crate::error::{GsqgError, Result};
use crate::profiles::Profile;
use crate::real::{lit, pairwise_sum, pos, Real};

pub(crate) fn weighted_mass<T: Real>(values: &[T], weights: &[T]) -> T {
    let t: Vec<T> = values.iter().zip(weights).map(|(v, a)| *v * *a).collect();
    pairwise_sum(&t)
}

pub(crate) fn renormalize<T: Real>(mut v: Vec<T>, weights: &[T], kappa: T) -> Vec<T> {
    let m = weighted_mass(&v, weights);
    if m > T::zero() {
        let c = kappa / m;
        v.iter_mut().for_each(|w| *w = *w * c);
    }
    v
}

/// Multiplier `μ` with `Σ a_k (J')⁻¹((ψ_k − μ)₊) = κ`, by bisection, and the
/// corresponding density. Entries with `ψ_k = −∞` are excluded.
pub fn bisect_multiplier<T: Real>(psi: &[T], weights: &[T], kappa: T, profile: &dyn Profile<T>) -> Result<(T, Vec<T>)> {
    let mass_at = |mu: T| {
        let t: Vec<T> = psi.iter().zip(weights).map(|(p, a)| *a * profile.j_prime_inverse(*p - mu)).collect();
        pairwise_sum(&t)
    };
    let top = psi.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
    if !top.is_finite() {
        return Err(GsqgError::MultiplierBracket("potential is not finite".into()));
    }
    let mut hi = top;
    let mut lo = T::zero().min(top);
    let mut step = top.abs().max(T::one());
    let mut tries = 0;
    while mass_at(lo) < kappa {
        lo = lo - step;
        step = step + step;
        tries += 1;
        if tries > 200 {
            return Err(GsqgError::MultiplierBracket(format!("no mu with mass >= {kappa}")));
        }
    }
    for _ in 0..400 {
        let mid = lit::<T>(0.5) * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass_at(mid) > kappa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = lo;
    let mut omega: Vec<T> = psi.iter().map(|p| profile.j_prime_inverse(*p - mu)).collect();
    let m = weighted_mass(&omega, weights);
    if !(m > T::zero()) || ((m - kappa) / kappa).abs() > lit(1e-3) {
        return Err(GsqgError::MultiplierBracket(format!("mass {m} after bisection, target {kappa}")));
    }
    // Bisection stops within a few ulps of μ; the rescale removes the
    // remaining mass defect.
    let tol = lit::<T>(1e-10).max(T::eps() * lit(100.0));
    if ((m - kappa) / kappa).abs() > tol {
        let c = kappa / m;
        omega.iter_mut().for_each(|w| *w = *w * c);
    }
    Ok((mu, omega))
}

/// Replacement of an accepted iterate, given its iteration index.
pub(crate) type Hook<'a, T> = &'a dyn Fn(usize, &[T]) -> Option<Vec<T>>;

/// Data of one fixed-point problem.
pub(crate) struct FixedPointProblem<'a, T> {
    /// Quadrature weight of each unknown.
    pub weights: &'a [T],
    pub kappa: T,
    pub profile: &'a dyn Profile<T>,
    /// Quadratic part `Kω`.
    pub potential: &'a dyn Fn(&[T]) -> Vec<T>,
    /// Linear part `ℓ`; enters as `ψ = Kω − ℓ`.
    pub linear: Option<&'a [T]>,
    /// Admissible unknowns; the rest stay zero.
    pub mask: Option<&'a [bool]>,
    /// Optional replacement of each accepted iterate, given its iteration index.
    pub hook: Option<Hook<'a, T>>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FixedPointSettings<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Damping used when an accelerated step is rejected.
    pub theta: T,
    pub depth: usize,
}

pub(crate) struct FixedPoint<T> {
    pub omega: Vec<T>,
    pub mu: T,
    pub iterations: usize,
    pub trace: Vec<T>,
}

impl<T: Real> FixedPointProblem<'_, T> {
    pub fn energy(&self, w: &[T], kw: &[T]) -> T {
        let n = w.len();
        let q: Vec<T> = (0..n).map(|k| w[k] * kw[k] * self.weights[k]).collect();
        let j: Vec<T> = (0..n).map(|k| self.profile.j(w[k]) * self.weights[k]).collect();
        let mut e = lit::<T>(0.5) * pairwise_sum(&q) - pairwise_sum(&j);
        if let Some(l) = self.linear {
            let t: Vec<T> = (0..n).map(|k| w[k] * l[k] * self.weights[k]).collect();
            e = e - pairwise_sum(&t);
        }
        e
    }

    /// `Kω − ℓ` on admissible unknowns, `−∞` elsewhere.
    pub fn effective(&self, kw: &[T]) -> Vec<T> {
        (0..kw.len())
            .map(|k| {
                if self.mask.is_some_and(|m| !m[k]) {
                    T::neg_infinity()
                } else {
                    kw[k] - self.linear.map_or(T::zero(), |l| l[k])
                }
            })
            .collect()
    }

    /// Multiplier and image of the map at `ω` with `Kω = kw`.
    pub fn image(&self, kw: &[T]) -> Result<(T, Vec<T>)> {
        bisect_multiplier(&self.effective(kw), self.weights, self.kappa, self.profile)
    }

    pub fn l1(&self, a: &[T], b: &[T]) -> T {
        let t: Vec<T> = (0..a.len()).map(|k| (a[k] - b[k]).abs() * self.weights[k]).collect();
        pairwise_sum(&t)
    }
}

/// Anderson-accelerated iteration with an energy safeguard: a step that
/// lowers the energy is replaced by a damped step, halving the damping until
/// the energy does not drop.
pub(crate) fn iterate_fixed_point<T: Real>(
    init: Vec<T>,
    pb: &FixedPointProblem<'_, T>,
    st: &FixedPointSettings<T>,
) -> Result<FixedPoint<T>> {
    let clean = |v: Vec<T>| -> Vec<T> {
        let mut v: Vec<T> = v.into_iter().map(pos).collect();
        if let Some(m) = pb.mask {
            v.iter_mut().zip(m).for_each(|(a, ok)| {
                if !ok {
                    *a = T::zero()
                }
            });
        }
        renormalize(v, pb.weights, pb.kappa)
    };
    let mut aa = Anderson::new(st.depth, 1.0);
    let mut x = clean(init);
    let mut kx = (pb.potential)(&x);
    let mut e = pb.energy(&x, &kx);
    let mut trace = vec![e];
    let mut bad = 0usize;
    let mut last = T::infinity();
    let mut best = T::infinity();
    for it in 0..st.max_iter {
        let (_, gx) = pb.image(&kx)?;
        let res = pb.l1(&gx, &x) / pb.kappa;
        last = res;
        // A residual far above the best seen means the mixing history has
        // gone stale; restart it.
        if res > lit::<T>(10.0) * best {
            aa.reset();
        }
        best = best.min(res);
        if res < st.tol {
            let kg = (pb.potential)(&gx);
            let (mu, _) = pb.image(&kg)?;
            trace.push(pb.energy(&gx, &kg));
            return Ok(FixedPoint { omega: gx, mu, iterations: it + 1, trace });
        }
        let cand = clean(aa.step(&x, &gx));
        let kc = (pb.potential)(&cand);
        let ec = pb.energy(&cand, &kc);
        let slack = lit::<T>(1e-8) * e.abs();
        let (mut nx, mut nk, mut ne) = (cand, kc, ec);
        if ec < e - slack {
            aa.reset();
            let mut th = st.theta;
            let mut ok = false;
            for _ in 0..8 {
                let d: Vec<T> = x.iter().zip(&gx).map(|(a, b)| (T::one() - th) * *a + th * *b).collect();
                let kd = (pb.potential)(&d);
                let ed = pb.energy(&d, &kd);
                (nx, nk, ne) = (d, kd, ed);
                if ed >= e - slack {
                    ok = true;
                    break;
                }
                th = th * lit(0.5);
            }
            if !ok {
                bad += 1;
                if bad > 20 {
                    return Err(GsqgError::Convergence { iterations: it + 1, residual: res.f64() });
                }
            }
        }
        if let Some(hx) = pb.hook.and_then(|h| h(it + 1, &nx)) {
            let hx = clean(hx);
            nk = (pb.potential)(&hx);
            ne = pb.energy(&hx, &nk);
            nx = hx;
        }
        x = nx;
        kx = nk;
        e = ne;
        trace.push(e);
    }
    Err(GsqgError::Convergence { iterations: st.max_iter, residual: last.f64() })
}

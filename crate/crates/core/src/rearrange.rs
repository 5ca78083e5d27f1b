//! Energy ascent over the rearrangement class of a reference density.
//!
//! Each step replaces `ζ` by the rearrangement of the reference that is
//! ordered like `ψ = 𝒢⁺ζ − 𝒲x₁`: the linear functional `∫ψζ'` is maximized
//! over the class by a sort. The quadratic part is convex, so the energy
//! never drops.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{GsqgError, Result};
use crate::fields::Field2D;
use crate::pair::PairProblem;
use crate::real::{lit, pairwise_sum, Real};

/// Settings for [`maximize_over_rearrangement_class`].
#[derive(Clone, Copy, Debug)]
pub struct RearrangeOptions<T> {
    /// Relative energy increase below which the ascent counts as stalled.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for RearrangeOptions<T> {
    fn default() -> Self {
        Self { tol: lit(1e-12), max_iter: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct RearrangeResult<T> {
    pub maximizer: Field2D<T>,
    /// `Ẽ(ζ_k)` for `k = 0, 1, …`.
    pub trace: Vec<T>,
    pub iterations: usize,
    /// Set when `max_iter` ran out before the energy stalled.
    pub stalled: bool,
    /// The last step reproduced its input exactly.
    pub fixed_point: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RearrangeReport {
    pub iterations: usize,
    pub stalled: bool,
    pub fixed_point: bool,
    pub energy_initial: f64,
    pub energy_final: f64,
    pub monotone: bool,
}

impl<T: Real> RearrangeResult<T> {
    pub fn report(&self) -> RearrangeReport {
        RearrangeReport {
            iterations: self.iterations,
            stalled: self.stalled,
            fixed_point: self.fixed_point,
            energy_initial: self.trace[0].f64(),
            energy_final: self.trace.last().map_or(f64::NAN, |e| e.f64()),
            monotone: is_monotone(&self.trace, lit(1e-10)),
        }
    }
}

/// True iff every entry is at least the previous one minus `rel` times its size.
pub fn is_monotone<T: Real>(trace: &[T], rel: T) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - rel * w[0].abs())
}

/// `Ẽ(ζ) = ½∫ζ𝒢⁺ζ − 𝒲∫x₁ζ`, together with `ψ = 𝒢⁺ζ − 𝒲x₁`.
pub fn ascent_energy<T: Real>(zeta: &Field2D<T>, problem: &PairProblem<T>) -> Result<(T, Vec<T>)> {
    if !zeta.grid.same_as(&problem.grid) {
        return Err(GsqgError::Incompatible("field is not on the problem grid".into()));
    }
    let g = problem.convolver().halfplane_potential(&zeta.values)?;
    let drift = problem.drift();
    let area = problem.grid.cell_area();
    let half = lit::<T>(0.5);
    let terms: Vec<T> = (0..g.len()).map(|k| zeta.values[k] * (half * g[k] - drift[k])).collect();
    let psi = g.iter().zip(&drift).map(|(a, b)| *a - *b).collect();
    Ok((pairwise_sum(&terms) * area, psi))
}

/// Places the values of `sorted_desc` on the cells in decreasing order of
/// `psi`, ties broken by cell index.
pub fn rearrange_by<T: Real>(sorted_desc: &[T], psi: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..psi.len()).collect();
    order.sort_by(|&a, &b| psi[b].partial_cmp(&psi[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![T::zero(); psi.len()];
    for (rank, &k) in order.iter().enumerate() {
        out[k] = sorted_desc[rank];
    }
    out
}

/// Rearrangement ascent started from `reference` itself.
pub fn maximize_over_rearrangement_class<T: Real>(
    reference: &Field2D<T>,
    problem: &PairProblem<T>,
    opts: &RearrangeOptions<T>,
) -> Result<RearrangeResult<T>> {
    if reference.values.iter().any(|&v| v < T::zero()) {
        return Err(GsqgError::Domain("reference must be non-negative".into()));
    }
    let mut sorted = reference.values.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut zeta = reference.clone();
    let (mut e, mut psi) = ascent_energy(&zeta, problem)?;
    let mut trace = vec![e];
    for it in 0..opts.max_iter {
        let next = Field2D { grid: zeta.grid, values: rearrange_by(&sorted, &psi), nonneg: true };
        if next.values == zeta.values {
            return Ok(RearrangeResult { maximizer: zeta, trace, iterations: it, stalled: false, fixed_point: true });
        }
        let (en, pn) = ascent_energy(&next, problem)?;
        trace.push(en);
        let gain = en - e;
        zeta = next;
        psi = pn;
        e = en;
        if gain <= opts.tol * e.abs() {
            return Ok(RearrangeResult {
                maximizer: zeta,
                trace,
                iterations: it + 1,
                stalled: false,
                fixed_point: false,
            });
        }
    }
    Ok(RearrangeResult { maximizer: zeta, trace, iterations: opts.max_iter, stalled: true, fixed_point: false })
}

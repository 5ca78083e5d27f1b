//! Anderson mixing for the fixed-point maps of the solvers.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::real::Real;

/// Type-II Anderson mixing with a bounded history.
#[derive(Clone, Debug)]
pub struct Anderson {
    depth: usize,
    beta: f64,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dx: VecDeque<Vec<f64>>,
    dr: VecDeque<Vec<f64>>,
}

impl Anderson {
    pub fn new(depth: usize, beta: f64) -> Self {
        Self { depth, beta, prev: None, dx: VecDeque::new(), dr: VecDeque::new() }
    }

    pub fn reset(&mut self) {
        self.prev = None;
        self.dx.clear();
        self.dr.clear();
    }

    /// Next iterate from the current iterate `x` and its image `gx`.
    pub fn step<T: Real>(&mut self, x: &[T], gx: &[T]) -> Vec<T> {
        let xf: Vec<f64> = x.iter().map(|v| v.f64()).collect();
        let rf: Vec<f64> = gx.iter().zip(x).map(|(g, v)| (*g - *v).f64()).collect();
        if let Some((px, pr)) = self.prev.take() {
            self.dx.push_back(xf.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.dr.push_back(rf.iter().zip(&pr).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.pop_front();
                self.dr.pop_front();
            }
        }
        let m = self.dr.len();
        let mut out: Vec<f64> = xf.iter().zip(&rf).map(|(a, r)| a + self.beta * r).collect();
        if m > 0 {
            // Least squares min |r - ΔR γ| through the normal equations with a
            // small Tikhonov shift.
            let mut a = DMatrix::<f64>::zeros(m, m);
            let mut b = DVector::<f64>::zeros(m);
            for i in 0..m {
                for j in 0..=i {
                    let v: f64 = self.dr[i].iter().zip(&self.dr[j]).map(|(p, q)| p * q).sum();
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
                b[i] = self.dr[i].iter().zip(&rf).map(|(p, q)| p * q).sum();
            }
            let scale = (0..m).map(|i| a[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            for i in 0..m {
                a[(i, i)] += 1e-12 * scale;
            }
            if let Some(gamma) = a.cholesky().map(|c| c.solve(&b)) {
                for (k, g) in gamma.iter().enumerate() {
                    for (o, (dx, dr)) in out.iter_mut().zip(self.dx[k].iter().zip(&self.dr[k])) {
                        *o -= g * (dx + self.beta * dr);
                    }
                }
            }
        }
        self.prev = Some((xf, rf));
        out.into_iter().map(T::lit).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_linear_fixed_point_quickly() {
        // x = A x + b with a slowly contracting A.
        let n = 20;
        let diag: Vec<f64> = (0..n).map(|i| 0.999 - 0.04 * i as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let exact: Vec<f64> = (0..n).map(|i| b[i] / (1.0 - diag[i])).collect();
        let mut x = vec![0.0; n];
        let mut aa = Anderson::new(n, 1.0);
        for _ in 0..60 {
            let gx: Vec<f64> = (0..n).map(|i| diag[i] * x[i] + b[i]).collect();
            x = aa.step(&x, &gx);
        }
        let err = x.iter().zip(&exact).map(|(a, e)| ((a - e) / e).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }
}

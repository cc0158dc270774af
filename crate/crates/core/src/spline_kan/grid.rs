use crate::error::{Error, Result};
use crate::ndiff::Real;

/// Uniform B-spline grid over `[lo, hi]`, padded with `degree` extra knot
/// intervals on each side so that every basis function is complete.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineGrid {
    degree: usize,
    intervals: usize,
    lo: f64,
    hi: f64,
}

impl Default for SplineGrid {
    fn default() -> Self {
        SplineGrid {
            degree: 3,
            intervals: 5,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

impl SplineGrid {
    pub fn new(degree: usize, intervals: usize, lo: f64, hi: f64) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Config(format!("spline degree must be >= 1, got {degree}")));
        }
        if intervals < 1 {
            return Err(Error::Config(format!(
                "spline grid needs at least one interval, got {intervals}"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid spline domain [{lo}, {hi}]")));
        }
        Ok(SplineGrid {
            degree,
            intervals,
            lo,
            hi,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn n_basis(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Knot `m` of the (conceptually unbounded) uniform knot sequence;
    /// indices `0..=intervals + 2·degree` form the stored vector.
    pub fn knot(&self, m: isize) -> f64 {
        self.lo + (m - self.degree as isize) as f64 * self.step()
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=(self.intervals + 2 * self.degree) as isize)
            .map(|m| self.knot(m))
            .collect()
    }

    /// Evaluates every basis function (and optionally its derivative) at `x`.
    ///
    /// Only the `degree + 1` functions supported on the knot span holding
    /// `x` are computed; the rest are written as exact zeros. Inputs outside
    /// the padded knot range yield all zeros.
    pub fn eval_into<T: Real>(&self, x: T, values: &mut [T], mut derivs: Option<&mut [T]>) {
        let nb = self.n_basis();
        debug_assert_eq!(values.len(), nb);
        values.fill(T::zero());
        if let Some(d) = derivs.as_deref_mut() {
            d.fill(T::zero());
        }
        let k = self.degree;
        let h = T::of(self.step());
        let t0 = T::of(self.knot(0));
        let pos = (x - t0) / h;
        if !(pos >= T::zero()) {
            return;
        }
        let span = pos.floor().to_usize().unwrap_or(usize::MAX);
        // last valid span starts at knot `intervals + 2k - 1`
        if span >= self.intervals + 2 * k {
            return;
        }

        // Triangular de Boor scheme: after round j, n[r] = B_{span-j+r, j}(x).
        let knot = |m: isize| T::of(self.knot(m));
        let mut n = [T::zero(); MAX_ORDER];
        let mut left = [T::zero(); MAX_ORDER];
        let mut right = [T::zero(); MAX_ORDER];
        assert!(k < MAX_ORDER, "spline degree {k} exceeds supported maximum");
        n[0] = T::one();
        let mut lower = [T::zero(); MAX_ORDER];
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&n[..k]);
            }
            left[j] = x - knot(span as isize + 1 - j as isize);
            right[j] = knot(span as isize + j as isize) - x;
            let mut saved = T::zero();
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }

        let first = span as isize - k as isize;
        for r in 0..=k {
            let i = first + r as isize;
            if i >= 0 && (i as usize) < nb {
                values[i as usize] = n[r];
            }
        }

        if let Some(d) = derivs {
            // uniform knots: B'_{i,k} = (B_{i,k-1} − B_{i+1,k-1}) / h, with
            // `lower[r]` = B_{span-k+1+r, k-1}
            let scale = T::one() / h;
            for r in 0..=k {
                let i = first + r as isize;
                if i < 0 || i as usize >= nb {
                    continue;
                }
                let a = if r >= 1 { lower[r - 1] } else { T::zero() };
                let b = if r < k { lower[r] } else { T::zero() };
                d[i as usize] = scale * (a - b);
            }
        }
    }

    pub fn eval<T: Real>(&self, x: T) -> Vec<T> {
        let mut v = vec![T::zero(); self.n_basis()];
        self.eval_into(x, &mut v, None);
        v
    }

    /// Maps any real onto the grid domain via `mid + half·tanh(x)`.
    pub fn squash<T: Real>(&self, x: T) -> T {
        let (mid, half) = self.squash_affine();
        T::of(mid) + T::of(half) * x.tanh()
    }

    pub(crate) fn squash_affine(&self) -> (f64, f64) {
        ((self.lo + self.hi) / 2.0, (self.hi - self.lo) / 2.0)
    }
}

const MAX_ORDER: usize = 8;

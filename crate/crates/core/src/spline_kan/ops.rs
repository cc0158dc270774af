//! Differentiable spline primitives recorded on a [`Tape`] as fused ops.

use super::SplineGrid;
use crate::error::{Error, Result};
use crate::ndiff::kernels::{gemm, Layout};
use crate::ndiff::{silu, silu_grad, CustomOp, Real, Tape, Tensor, Var};

/// Basis values and derivatives for every element of `x`, laid out `[..., n_basis]`.
fn tabulate<T: Real>(grid: &SplineGrid, x: &[T]) -> (Vec<T>, Vec<T>) {
    let nb = grid.n_basis();
    let mut values = vec![T::zero(); x.len() * nb];
    let mut derivs = vec![T::zero(); x.len() * nb];
    for ((&xi, v), d) in x
        .iter()
        .zip(values.chunks_mut(nb))
        .zip(derivs.chunks_mut(nb))
    {
        grid.eval_into(xi, v, Some(d));
    }
    (values, derivs)
}

struct BasisEvalOp<T> {
    n_basis: usize,
    derivs: Vec<T>,
}

impl<T: Real> CustomOp<T> for BasisEvalOp<T> {
    fn name(&self) -> &'static str {
        "basis_eval"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g
            .chunks(self.n_basis)
            .zip(self.derivs.chunks(self.n_basis))
            .map(|(g, d)| g.iter().zip(d).map(|(&a, &b)| a * b).sum())
            .collect();
        vec![Some(dx)]
    }
}

/// All `n_basis` B-spline values at each element of `x`; output shape is
/// `x.shape() ++ [n_basis]`. Differentiable with respect to `x`.
pub fn basis_eval<T: Real>(tape: &mut Tape<T>, grid: &SplineGrid, x: Var) -> Result<Var> {
    let tx = tape.value(x);
    let (values, derivs) = tabulate(grid, tx.data());
    let mut shape = tx.shape().to_vec();
    shape.push(grid.n_basis());
    let value = Tensor::new(shape, values)?;
    let op = BasisEvalOp {
        n_basis: grid.n_basis(),
        derivs,
    };
    Ok(tape.custom(vec![x], value, Box::new(op)))
}

/// Shapes of the spline parameter set of an `in_dim → out_dim` layer.
pub(crate) fn check_edge_params<T: Real>(
    tape: &Tape<T>,
    grid: &SplineGrid,
    x: Var,
    base: Var,
    scaler: Var,
    coeffs: Var,
) -> Result<(usize, usize, usize)> {
    let tx = tape.value(x);
    if tx.rank() != 2 {
        return Err(Error::dim(format!(
            "KAN input must be batch×in_dim, got {:?}",
            tx.shape()
        )));
    }
    let (batch, in_dim) = (tx.shape()[0], tx.shape()[1]);
    let out_dim = tape.shape(base).first().copied().unwrap_or(0);
    let nb = grid.n_basis();
    let expect = |v: Var, shape: &[usize], what: &str| -> Result<()> {
        if tape.shape(v) != shape {
            return Err(Error::dim(format!(
                "{what} has shape {:?}, expected {shape:?} for a {in_dim}→{out_dim} layer with {nb} basis functions",
                tape.shape(v)
            )));
        }
        Ok(())
    };
    expect(base, &[out_dim, in_dim], "base weight")?;
    expect(scaler, &[out_dim, in_dim], "spline scaler")?;
    expect(coeffs, &[out_dim, in_dim, nb], "spline coefficients")?;
    Ok((batch, in_dim, out_dim))
}

struct EdgeActivationOp<T> {
    dims: (usize, usize, usize, usize),
    basis: Vec<T>,
    derivs: Vec<T>,
}

impl<T: Real> CustomOp<T> for EdgeActivationOp<T> {
    fn name(&self) -> &'static str {
        "edge_activation"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (batch, in_dim, out_dim, nb) = self.dims;
        let (x, wb, ws, c) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let mut dx = vec![T::zero(); batch * in_dim];
        let mut dwb = vec![T::zero(); out_dim * in_dim];
        let mut dws = vec![T::zero(); out_dim * in_dim];
        let mut dc = vec![T::zero(); out_dim * in_dim * nb];
        for b in 0..batch {
            for o in 0..out_dim {
                for i in 0..in_dim {
                    let go = g[(b * out_dim + o) * in_dim + i];
                    let xv = x[b * in_dim + i];
                    let e = o * in_dim + i;
                    let basis = &self.basis[(b * in_dim + i) * nb..][..nb];
                    let derivs = &self.derivs[(b * in_dim + i) * nb..][..nb];
                    let coef = &c[e * nb..][..nb];
                    let spline: T = basis.iter().zip(coef).map(|(&u, &w)| u * w).sum();
                    let slope: T = derivs.iter().zip(coef).map(|(&u, &w)| u * w).sum();
                    dwb[e] += go * silu(xv);
                    dws[e] += go * spline;
                    for (d, &u) in dc[e * nb..][..nb].iter_mut().zip(basis) {
                        *d += go * ws[e] * u;
                    }
                    dx[b * in_dim + i] += go * (wb[e] * silu_grad(xv) + ws[e] * slope);
                }
            }
        }
        [dx, dwb, dws, dc]
            .into_iter()
            .zip(needs)
            .map(|(d, &n)| n.then_some(d))
            .collect()
    }
}

/// Per-edge activations `φ_{o,i}(x_i) = w_b·SiLU(x_i) + w_s·Σ_j c_j·B_j(x_i)`.
///
/// `x: batch×in`, `base`/`scaler: out×in`, `coeffs: out×in×n_basis`;
/// returns `batch×out×in`.
pub fn edge_activation<T: Real>(
    tape: &mut Tape<T>,
    grid: &SplineGrid,
    x: Var,
    base: Var,
    scaler: Var,
    coeffs: Var,
) -> Result<Var> {
    let (batch, in_dim, out_dim) = check_edge_params(tape, grid, x, base, scaler, coeffs)?;
    let nb = grid.n_basis();
    let xs = tape.value(x).data();
    let (basis, derivs) = tabulate(grid, xs);
    let (wb, ws, c) = (
        tape.value(base).data(),
        tape.value(scaler).data(),
        tape.value(coeffs).data(),
    );
    let mut out = Vec::with_capacity(batch * out_dim * in_dim);
    for b in 0..batch {
        for o in 0..out_dim {
            for i in 0..in_dim {
                let e = o * in_dim + i;
                let spline: T = basis[(b * in_dim + i) * nb..][..nb]
                    .iter()
                    .zip(&c[e * nb..][..nb])
                    .map(|(&u, &w)| u * w)
                    .sum();
                out.push(wb[e] * silu(xs[b * in_dim + i]) + ws[e] * spline);
            }
        }
    }
    let value = Tensor::new([batch, out_dim, in_dim], out)?;
    let op = EdgeActivationOp {
        dims: (batch, in_dim, out_dim, nb),
        basis,
        derivs,
    };
    Ok(tape.custom(vec![x, base, scaler, coeffs], value, Box::new(op)))
}

struct KanLayerOp<T> {
    dims: (usize, usize, usize, usize),
    basis: Vec<T>,
    derivs: Vec<T>,
    act: Vec<T>,
    act_grad: Vec<T>,
    /// scaler ⊙ coeffs, `out×(in·n_basis)`
    effective: Vec<T>,
}

impl<T: Real> CustomOp<T> for KanLayerOp<T> {
    fn name(&self) -> &'static str {
        "kan_layer"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (batch, in_dim, out_dim, nb) = self.dims;
        let (wb, ws, c) = (inputs[1].data(), inputs[2].data(), inputs[3].data());
        let span = in_dim * nb;
        let mut result = vec![None, None, None, None];

        if needs[0] {
            let mut d_act = vec![T::zero(); batch * in_dim];
            gemm(batch, out_dim, in_dim, g, Layout::Plain, wb, Layout::Plain, &mut d_act, false);
            let mut d_basis = vec![T::zero(); batch * span];
            gemm(batch, out_dim, span, g, Layout::Plain, &self.effective, Layout::Plain, &mut d_basis, false);
            let dx = (0..batch * in_dim)
                .map(|p| {
                    let slope: T = d_basis[p * nb..][..nb]
                        .iter()
                        .zip(&self.derivs[p * nb..][..nb])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    d_act[p] * self.act_grad[p] + slope
                })
                .collect();
            result[0] = Some(dx);
        }
        if needs[1] {
            let mut dwb = vec![T::zero(); out_dim * in_dim];
            gemm(out_dim, batch, in_dim, g, Layout::Trans, &self.act, Layout::Plain, &mut dwb, false);
            result[1] = Some(dwb);
        }
        if needs[2] || needs[3] {
            let mut d_eff = vec![T::zero(); out_dim * span];
            gemm(out_dim, batch, span, g, Layout::Trans, &self.basis, Layout::Plain, &mut d_eff, false);
            if needs[2] {
                let dws = d_eff
                    .chunks(nb)
                    .zip(c.chunks(nb))
                    .map(|(d, w)| d.iter().zip(w).map(|(&a, &b)| a * b).sum())
                    .collect();
                result[2] = Some(dws);
            }
            if needs[3] {
                for (chunk, &s) in d_eff.chunks_mut(nb).zip(ws) {
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                result[3] = Some(d_eff);
            }
        }
        result
    }
}

/// Node values `out[b,o] = Σ_i φ_{o,i}(x[b,i])` of one KAN layer, computed
/// without materialising the per-edge tensor.
pub fn kan_layer<T: Real>(
    tape: &mut Tape<T>,
    grid: &SplineGrid,
    x: Var,
    base: Var,
    scaler: Var,
    coeffs: Var,
) -> Result<Var> {
    let (batch, in_dim, out_dim) = check_edge_params(tape, grid, x, base, scaler, coeffs)?;
    let nb = grid.n_basis();
    let xs = tape.value(x).data();
    let (basis, derivs) = tabulate(grid, xs);
    let act: Vec<T> = xs.iter().map(|&v| silu(v)).collect();
    let act_grad: Vec<T> = xs.iter().map(|&v| silu_grad(v)).collect();
    let (wb, ws, c) = (
        tape.value(base).data(),
        tape.value(scaler).data(),
        tape.value(coeffs).data(),
    );
    let mut effective = c.to_vec();
    for (chunk, &s) in effective.chunks_exact_mut(nb).zip(ws) {
        for w in chunk {
            *w *= s;
        }
    }

    let mut out = vec![T::zero(); batch * out_dim];
    gemm(batch, in_dim * nb, out_dim, &basis, Layout::Plain, &effective, Layout::Trans, &mut out, false);
    gemm(batch, in_dim, out_dim, &act, Layout::Plain, wb, Layout::Trans, &mut out, true);
    let value = Tensor::new([batch, out_dim], out)?;
    let op = KanLayerOp {
        dims: (batch, in_dim, out_dim, nb),
        basis,
        derivs,
        act,
        act_grad,
        effective,
    };
    Ok(tape.custom(vec![x, base, scaler, coeffs], value, Box::new(op)))
}

//! Elementary differentiable operations.

use super::graph::{Backward, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

type BackFn = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Option<Tensor>>> + Send + Sync;

/// Adjoint rule given as a closure.
pub struct FnOp {
    name: &'static str,
    f: Box<BackFn>,
}

impl FnOp {
    pub fn boxed<F>(name: &'static str, f: F) -> Box<dyn Backward>
    where
        F: Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Option<Tensor>>> + Send + Sync + 'static,
    {
        Box::new(FnOp { name, f: Box::new(f) })
    }
}

impl Backward for FnOp {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        (self.f)(inputs, output, grad)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-9;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn is_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(out, &[a, b], FnOp::boxed("add", |_, _, g| Ok(vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let out = va.zip_map(vb, |x, y| x - y);
        Ok(self.push(out, &[a, b], FnOp::boxed("sub", |_, _, g| Ok(vec![Some(g.clone()), Some(g.scaled(-1.0))]))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(
            out,
            &[a, b],
            FnOp::boxed("mul", |inp, _, g| Ok(vec![Some(g.zip_map(inp[1], |g, y| g * y)), Some(g.zip_map(inp[0], |g, x| g * x))])),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scaled(k);
        self.push(out, &[a], FnOp::boxed("scale", move |_, _, g| Ok(vec![Some(g.scaled(k))])))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, &[a], FnOp::boxed("add_scalar", |_, _, g| Ok(vec![Some(g.clone())])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(
            out,
            &[a],
            FnOp::boxed("relu", |inp, _, g| Ok(vec![Some(g.zip_map(inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))])),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, &[a], FnOp::boxed("exp", |_, out, g| Ok(vec![Some(g.zip_map(out, |g, y| g * y))])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::primitive::logistic);
        self.push(
            out,
            &[a],
            FnOp::boxed("sigmoid", |_, out, g| Ok(vec![Some(g.zip_map(out, |g, y| g * y * (1.0 - y)))])),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, &[a], FnOp::boxed("square", |inp, _, g| Ok(vec![Some(g.zip_map(inp[0], |g, x| 2.0 * g * x))])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            out,
            &[a],
            FnOp::boxed("sum", |inp, _, g| Ok(vec![Some(Tensor::full(inp[0].shape(), g.item()))])),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            out,
            &[a],
            FnOp::boxed("reshape", |inp, _, g| Ok(vec![Some(g.clone().reshape(inp[0].shape())?)])),
        ))
    }

    /// `a [m, k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        is_2d("matmul", va)?;
        is_2d("matmul", vb)?;
        let out = va.matmul(vb)?;
        Ok(self.push(
            out,
            &[a, b],
            FnOp::boxed("matmul", |inp, _, g| {
                let ga = g.matmul(&inp[1].transpose2())?;
                let gb = inp[0].transpose2().matmul(g)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        is_2d("transpose", self.value(a))?;
        let out = self.value(a).transpose2();
        Ok(self.push(out, &[a], FnOp::boxed("transpose", |_, _, g| Ok(vec![Some(g.transpose2())]))))
    }

    /// Adds a `[1, n]` (or `[n]`) row to every row of `a [m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let (m, n) = is_2d("add_row", va)?;
        if vr.len() != n {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += vr.data()[j];
            }
        }
        Ok(self.push(
            out,
            &[a, row],
            FnOp::boxed("add_row", move |inp, _, g| {
                let mut gr = Tensor::zeros(inp[1].shape());
                for i in 0..m {
                    for j in 0..n {
                        gr.data_mut()[j] += g.data()[i * n + j];
                    }
                }
                Ok(vec![Some(g.clone()), Some(gr)])
            }),
        ))
    }

    /// Multiplies each row of `a [m, n]` by the matching entry of `col [m, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        let (m, n) = is_2d("mul_col", va)?;
        if vc.len() != m {
            return Err(Error::shape("mul_col", va.shape(), vc.shape()));
        }
        let mut out = va.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] *= vc.data()[i];
            }
        }
        Ok(self.push(
            out,
            &[a, col],
            FnOp::boxed("mul_col", move |inp, _, g| {
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(inp[1].shape());
                for i in 0..m {
                    let c = inp[1].data()[i];
                    for j in 0..n {
                        ga.data_mut()[i * n + j] *= c;
                        gc.data_mut()[i] += g.data()[i * n + j] * inp[0].data()[i * n + j];
                    }
                }
                Ok(vec![Some(ga), Some(gc)])
            }),
        ))
    }

    /// Repeats a single row `m` times.
    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Result<Var> {
        let vr = self.value(row);
        let n = vr.len();
        let data: Vec<f64> = (0..m).flat_map(|_| vr.data().iter().copied()).collect();
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(
            out,
            &[row],
            FnOp::boxed("broadcast_rows", move |inp, _, g| {
                let mut gr = Tensor::zeros(inp[0].shape());
                for i in 0..m {
                    for j in 0..n {
                        gr.data_mut()[j] += g.data()[i * n + j];
                    }
                }
                Ok(vec![Some(gr)])
            }),
        ))
    }

    /// Columns `[start, end)` of a 2D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = is_2d("slice_cols", va)?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", va.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&va.data()[i * n + start..i * n + end]);
        }
        let out = Tensor::matrix(m, w, data)?;
        Ok(self.push(
            out,
            &[a],
            FnOp::boxed("slice_cols", move |inp, _, g| {
                let mut ga = Tensor::zeros(inp[0].shape());
                for i in 0..m {
                    ga.data_mut()[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                Ok(vec![Some(ga)])
            }),
        ))
    }

    /// Concatenates 2D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push(
            out,
            parts,
            FnOp::boxed("concat_cols", move |_, _, g| {
                let mut outs = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                    }
                    outs.push(Some(Tensor::matrix(m, w, d)?));
                    off += w;
                }
                Ok(outs)
            }),
        ))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows) of a 2D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_rows(a),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::shape("softmax axis", self.value(a).shape(), &[axis])),
        }
    }

    fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = is_2d("softmax", va)?;
        let mut out = va.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - mx).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Ok(self.push(
            out,
            &[a],
            FnOp::boxed("softmax", move |_, y, g| {
                let mut ga = Tensor::zeros(y.shape());
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga.data_mut()[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Ok(vec![Some(ga)])
            }),
        ))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = is_2d("layer_norm", va)?;
        let mut out = va.clone();
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = s;
            row.iter_mut().for_each(|x| *x = (*x - mu) * s);
        }
        Ok(self.push(
            out,
            &[a],
            FnOp::boxed("layer_norm", move |_, y, g| {
                let mut ga = Tensor::zeros(y.shape());
                let nf = n as f64;
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        ga.data_mut()[i * n + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                Ok(vec![Some(ga)])
            }),
        ))
    }

    /// Sum of selected columns per row: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = is_2d("sum_cols", va)?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::validation(format!("column {bad} out of range for {n} columns")));
        }
        let data: Vec<f64> = (0..m).map(|i| cols.iter().map(|&c| va.data()[i * n + c]).sum()).collect();
        let out = Tensor::matrix(m, 1, data)?;
        let cols = cols.to_vec();
        Ok(self.push(
            out,
            &[a],
            FnOp::boxed("sum_cols", move |inp, _, g| {
                let mut ga = Tensor::zeros(inp[0].shape());
                for i in 0..m {
                    for &c in &cols {
                        ga.data_mut()[i * n + c] += g.data()[i];
                    }
                }
                Ok(vec![Some(ga)])
            }),
        ))
    }

    /// Lifts planar rows `[m, 2]` to `[m, 3]` with a zero third column.
    pub fn planar_to_3d(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = is_2d("planar_to_3d", va)?;
        if n != 2 {
            return Err(Error::shape("planar_to_3d", va.shape(), &[m, 2]));
        }
        let data: Vec<f64> = (0..m).flat_map(|i| [va.data()[2 * i], va.data()[2 * i + 1], 0.0]).collect();
        let out = Tensor::matrix(m, 3, data)?;
        Ok(self.push(
            out,
            &[a],
            FnOp::boxed("planar_to_3d", move |_, _, g| {
                let d: Vec<f64> = (0..m).flat_map(|i| [g.data()[3 * i], g.data()[3 * i + 1]]).collect();
                Ok(vec![Some(Tensor::matrix(m, 2, d)?)])
            }),
        ))
    }

    /// `x W + b` for `x [m, k]`, `W [k, n]`, `b [1, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::row(vec![0.0; 3]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 5, vec![0.7; 5]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, c).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_layer_norm_standardizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let x = g.constant(Tensor::matrix(4, 6, data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for r in 0..4 {
            let sum: f64 = g.value(s).row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let s0 = g.softmax(x, 0).unwrap();
        for c in 0..6 {
            let sum: f64 = (0..4).map(|r| g.value(s0).at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let ln = g.layer_norm(x).unwrap();
        for r in 0..4 {
            let row = g.value(ln).row_slice(r);
            let mu = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 6.0;
            assert!(mu.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
    }
}

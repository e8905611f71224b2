//! Operator set recorded on the tape. Everything the model equations need:
//! arithmetic, matmul, row softmax, sigmoid, concat/slice, layer norm,
//! im2col for the conv stem, and the reductions.

use rayon::prelude::*;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

const PAR_FLOP_THRESHOLD: usize = 32_768;
const LN_CLAMP: f64 = 1e-12;

fn mark(out: &Tensor, inputs: &[&Tensor]) {
    if inputs.iter().any(|t| t.requires_grad()) {
        out.set_requires_grad(true);
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::dim(op, format!("expected rank-2 tensor, got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n > PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n > PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for l in 0..k {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n > PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

impl Tape {
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a, b]);
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            a.accum_grad(g);
            b.accum_grad(g);
        });
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a, b]);
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            a.accum_grad(g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            b.accum_grad(&neg);
        });
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x + c).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| a.accum_grad(g));
        Ok(out)
    }

    pub fn hadamard(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("hadamard", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a, b]);
        let (av, bv) = (a.to_vec(), b.to_vec());
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(gv, y)| gv * y).collect();
            a.accum_grad(&ga);
            let gb: Vec<f64> = g.iter().zip(&av).map(|(gv, x)| gv * x).collect();
            b.accum_grad(&gb);
        });
        Ok(out)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("div", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x / y).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a, b]);
        let (av, bv) = (a.to_vec(), b.to_vec());
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(gv, y)| gv / y).collect();
            a.accum_grad(&ga);
            let gb: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&bv))
                .map(|(gv, (x, y))| -gv * x / (y * y))
                .collect();
            b.accum_grad(&gb);
        });
        Ok(out)
    }

    /// Elementwise min; on ties the gradient goes to `a`.
    pub fn minimum(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("minimum", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x.min(*y)).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a, b]);
        let (av, bv) = (a.to_vec(), b.to_vec());
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            let ga: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&bv))
                .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                .collect();
            a.accum_grad(&ga);
            let gb: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&bv))
                .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                .collect();
            b.accum_grad(&gb);
        });
        Ok(out)
    }

    /// Elementwise max; on ties the gradient goes to `a`.
    pub fn maximum(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("maximum", a, b)?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x.max(*y)).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a, b]);
        let (av, bv) = (a.to_vec(), b.to_vec());
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            let ga: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&bv))
                .map(|(gv, (x, y))| if x >= y { *gv } else { 0.0 })
                .collect();
            a.accum_grad(&ga);
            let gb: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&bv))
                .map(|(gv, (x, y))| if x >= y { 0.0 } else { *gv })
                .collect();
            b.accum_grad(&gb);
        });
        Ok(out)
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", a)?;
        let (kb, n) = dims2("matmul", b)?;
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let data = mm_nn(&a.data(), &b.data(), m, k, n);
        let out = Tensor::from_vec(&[m, n], data)?;
        mark(&out, &[a, b]);
        let (av, bv) = (a.to_vec(), b.to_vec());
        let (a, b) = (a.clone(), b.clone());
        self.record(&out, move |g| {
            // dA = dC · Bᵀ, dB = Aᵀ · dC
            a.accum_grad(&mm_nt(g, &bv, m, n, k));
            b.accum_grad(&mm_tn(&av, g, k, m, n));
        });
        Ok(out)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2("transpose", a)?;
        let src = a.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        let out = Tensor::from_vec(&[n, m], data)?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let mut ga = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a]);
        let av = a.to_vec();
        let a = a.clone();
        self.record(&out, move |g| {
            let ga: Vec<f64> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::from_vec(&a.shape(), data.clone())?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let ga: Vec<f64> = g.iter().zip(&data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    /// Natural log with the argument clamped at 1e-12.
    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        let clamped: Vec<f64> = a.data().iter().map(|x| x.max(LN_CLAMP)).collect();
        let data = clamped.iter().map(|x| x.ln()).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let ga: Vec<f64> = g.iter().zip(&clamped).map(|(gv, x)| gv / x).collect();
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    /// x^p with constant exponent (base assumed nonnegative for fractional p).
    pub fn powf(&self, a: &Tensor, p: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.powf(p)).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a]);
        let av = a.to_vec();
        let a = a.clone();
        self.record(&out, move |g| {
            let ga: Vec<f64> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| gv * p * x.powf(p - 1.0))
                .collect();
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.abs()).collect();
        let out = Tensor::from_vec(&a.shape(), data)?;
        mark(&out, &[a]);
        let av = a.to_vec();
        let a = a.clone();
        self.record(&out, move |g| {
            let ga: Vec<f64> = g
                .iter()
                .zip(&av)
                .map(|(gv, x)| gv * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                .collect();
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2("softmax_rows", a)?;
        if n == 0 {
            return Err(Error::dim("softmax_rows", "zero-width rows"));
        }
        if !a.all_finite() {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        let src = a.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut data[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (d, x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        drop(src);
        let out = Tensor::from_vec(&[m, n], data.clone())?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                let y = &data[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                for j in 0..n {
                    ga[i * n + j] = y[j] * (gr[j] - dot);
                }
            }
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    /// Per-row normalization to zero mean / unit variance (no affine part;
    /// callers apply gamma/beta via broadcast ops).
    pub fn layer_norm_rows(&self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = dims2("layer_norm_rows", a)?;
        let src = a.data();
        let mut data = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for (d, x) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = (x - mu) * s;
            }
        }
        drop(src);
        let out = Tensor::from_vec(&[m, n], data.clone())?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                let y = &data[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let mg: f64 = gr.iter().sum::<f64>() / n as f64;
                let mgy: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / n as f64;
                for j in 0..n {
                    ga[i * n + j] = inv_std[i] * (gr[j] - mg - y[j] * mgy);
                }
            }
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&self, tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::Contract("concat of empty tensor list".into()));
        }
        if axis > 1 {
            return Err(Error::dim("concat", format!("axis {} out of range", axis)));
        }
        let (m0, n0) = dims2("concat", tensors[0])?;
        for t in tensors {
            let (m, n) = dims2("concat", t)?;
            if (axis == 0 && n != n0) || (axis == 1 && m != m0) {
                return Err(Error::dim(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?} on axis {}", t.shape(), tensors[0].shape(), axis),
                ));
            }
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            for t in tensors {
                data.extend_from_slice(&t.data());
            }
            let rows: usize = tensors.iter().map(|t| t.shape()[0]).sum();
            Tensor::from_vec(&[rows, n0], data)?
        } else {
            let cols: usize = tensors.iter().map(|t| t.shape()[1]).sum();
            let mut data = vec![0.0; m0 * cols];
            let mut off = 0;
            for t in tensors {
                let (_, n) = dims2("concat", t)?;
                let src = t.data();
                for i in 0..m0 {
                    data[i * cols + off..i * cols + off + n].copy_from_slice(&src[i * n..(i + 1) * n]);
                }
                off += n;
            }
            Tensor::from_vec(&[m0, cols], data)?
        };
        mark(&out, tensors);
        let inputs: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
        let shapes: Vec<(usize, usize)> = inputs.iter().map(|t| (t.shape()[0], t.shape()[1])).collect();
        let out_shape = (out.shape()[0], out.shape()[1]);
        self.record(&out, move |g| {
            if axis == 0 {
                let mut off = 0;
                for (t, (m, n)) in inputs.iter().zip(&shapes) {
                    t.accum_grad(&g[off..off + m * n]);
                    off += m * n;
                }
            } else {
                let cols = out_shape.1;
                let mut coff = 0;
                for (t, (m, n)) in inputs.iter().zip(&shapes) {
                    let mut gt = vec![0.0; m * n];
                    for i in 0..*m {
                        gt[i * n..(i + 1) * n].copy_from_slice(&g[i * cols + coff..i * cols + coff + n]);
                    }
                    t.accum_grad(&gt);
                    coff += n;
                }
            }
        });
        Ok(out)
    }

    /// Copying slice of a rank-2 tensor along `axis`, half-open range.
    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = dims2("slice", a)?;
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start >= end || end > bound {
            return Err(Error::dim(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, end, axis, a.shape()),
            ));
        }
        let src = a.data();
        let out = if axis == 0 {
            Tensor::from_vec(&[end - start, n], src[start * n..end * n].to_vec())?
        } else {
            let w = end - start;
            let mut data = vec![0.0; m * w];
            for i in 0..m {
                data[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
            }
            Tensor::from_vec(&[m, w], data)?
        };
        drop(src);
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            let mut ga = vec![0.0; m * n];
            if axis == 0 {
                ga[start * n..end * n].copy_from_slice(g);
            } else {
                let w = end - start;
                for i in 0..m {
                    ga[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
            }
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    /// Row gather: out[i] = a[idx[i]]. Backward scatter-adds.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = dims2("gather_rows", a)?;
        if let Some(bad) = idx.iter().find(|i| **i >= m) {
            return Err(Error::dim("gather_rows", format!("row {} out of {}", bad, m)));
        }
        let src = a.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        drop(src);
        let out = Tensor::from_vec(&[idx.len(), n], data)?;
        mark(&out, &[a]);
        let idx = idx.to_vec();
        let a = a.clone();
        self.record(&out, move |g| {
            let mut ga = vec![0.0; m * n];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..n {
                    ga[i * n + j] += g[r * n + j];
                }
            }
            a.accum_grad(&ga);
        });
        Ok(out)
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        let out = Tensor::scalar(s);
        mark(&out, &[a]);
        let len = a.len();
        let a = a.clone();
        self.record(&out, move |g| {
            a.accum_grad(&vec![g[0]; len]);
        });
        Ok(out)
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let len = a.len();
        if len == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f64 = a.data().iter().sum::<f64>() / len as f64;
        let out = Tensor::scalar(s);
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| {
            a.accum_grad(&vec![g[0] / len as f64; len]);
        });
        Ok(out)
    }

    /// Add a length-n bias vector to every row of a [m,n] matrix.
    pub fn broadcast_add(&self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2("broadcast_add", a)?;
        if bias.len() != n {
            return Err(Error::dim(
                "broadcast_add",
                format!("bias length {} vs row width {}", bias.len(), n),
            ));
        }
        let bv = bias.to_vec();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let out = Tensor::from_vec(&[m, n], data)?;
        mark(&out, &[a, bias]);
        let (a, bias) = (a.clone(), bias.clone());
        self.record(&out, move |g| {
            a.accum_grad(g);
            let mut gb = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gb[j] += g[i * n + j];
                }
            }
            bias.accum_grad(&gb);
        });
        Ok(out)
    }

    /// Multiply every row of a [m,n] matrix by a length-n vector.
    pub fn broadcast_mul(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2("broadcast_mul", a)?;
        if v.len() != n {
            return Err(Error::dim(
                "broadcast_mul",
                format!("vector length {} vs row width {}", v.len(), n),
            ));
        }
        let vv = v.to_vec();
        let av = a.to_vec();
        let data = av.iter().enumerate().map(|(i, x)| x * vv[i % n]).collect();
        let out = Tensor::from_vec(&[m, n], data)?;
        mark(&out, &[a, v]);
        let (a, v) = (a.clone(), v.clone());
        self.record(&out, move |g| {
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * vv[i % n]).collect();
            a.accum_grad(&ga);
            let mut gv = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    gv[j] += g[i * n + j] * av[i * n + j];
                }
            }
            v.accum_grad(&gv);
        });
        Ok(out)
    }

    /// Shape change with identical data; backward reshapes the gradient back.
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?} changes element count", a.shape(), shape),
            ));
        }
        let out = Tensor::from_vec(shape, a.to_vec())?;
        mark(&out, &[a]);
        let a = a.clone();
        self.record(&out, move |g| a.accum_grad(g));
        Ok(out)
    }

    /// Unfold a [C,H,W] image into [C·k·k, oh·ow] patch columns so that a
    /// convolution becomes `weight[out_c, C·k·k] · im2col(x)`.
    pub fn im2col(&self, x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim("im2col", format!("expected [C,H,W], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("im2col", "kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let rows = c * k * k;
        let cols = oh * ow;
        // index map: for each output cell, the flat source index or None (pad)
        let mut index: Vec<Option<usize>> = vec![None; rows * cols];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ci * k * k + ky * k + kx;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            index[r * cols + oy * ow + ox] =
                                Some(ci * h * w + (iy - pad) * w + (ix - pad));
                        }
                    }
                }
            }
        }
        let src = x.data();
        let data: Vec<f64> = index
            .iter()
            .map(|i| i.map(|i| src[i]).unwrap_or(0.0))
            .collect();
        drop(src);
        let out = Tensor::from_vec(&[rows, cols], data)?;
        mark(&out, &[x]);
        let x = x.clone();
        let total = c * h * w;
        self.record(&out, move |g| {
            let mut gx = vec![0.0; total];
            for (gi, idx) in g.iter().zip(&index) {
                if let Some(i) = idx {
                    gx[*i] += gi;
                }
            }
            x.accum_grad(&gx);
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(&i2, &a).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let tape = Tape::new();
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let tape = Tape::new();
        let a = t2(1, 3, &[0.0, 0.0, 0.0]);
        let y = tape.softmax_rows(&a).unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = t2(1, 2, &[1000.0, 0.0]);
        let y = tape.softmax_rows(&b).unwrap();
        assert!((y.to_vec()[0] - 1.0).abs() < 1e-12);
        assert!(y.to_vec()[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::new();
        let a = t2(1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(tape.softmax_rows(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let a = t2(3, 4, &[0.3, -2.0, 5.0, 1.0, 0.0, 0.0, 0.0, 0.0, 100.0, -100.0, 3.0, 2.0]);
        let y = tape.softmax_rows(&a).unwrap();
        let d = y.to_vec();
        for i in 0..3 {
            let s: f64 = d[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_values() {
        let tape = Tape::new();
        let a = Tensor::from_vec(&[2], vec![0.0, 50.0]).unwrap();
        let y = tape.sigmoid(&a).unwrap().to_vec();
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_gradient_closed_form() {
        let tape = Tape::new();
        let a = Tensor::param(&[3], vec![-1.3, 0.2, 2.7]).unwrap();
        let y = tape.sigmoid(&a).unwrap();
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        let g = a.grad().unwrap();
        for (gv, x) in g.iter().zip(a.to_vec()) {
            let sg = 1.0 / (1.0 + (-x).exp());
            let expect = sg * (1.0 - sg);
            assert!((gv - expect).abs() / expect.abs() < 1e-8);
        }
    }

    #[test]
    fn hadamard_hand_case_and_grad() {
        let tape = Tape::new();
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let y = tape.hadamard(&a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 8.0]);
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn hadamard_ones_identity() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0, -2.0, 0.5, 9.0]);
        let ones = Tensor::full(&[2, 2], 1.0);
        let y = tape.hadamard(&a, &ones).unwrap();
        assert_eq!(y.to_vec(), a.to_vec());
    }

    #[test]
    fn concat_rows_shape_and_backward() {
        let tape = Tape::new();
        let a = Tensor::param(&[1, 1], vec![1.0]).unwrap();
        let b = Tensor::param(&[1, 1], vec![2.0]).unwrap();
        let y = tape.concat(&[&a, &b], 0).unwrap();
        assert_eq!(y.shape(), vec![2, 1]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn concat_k_copies_shape_law() {
        let tape = Tape::new();
        let a = t2(3, 2, &[0.0; 6]);
        let y = tape.concat(&[&a, &a, &a, &a], 0).unwrap();
        assert_eq!(y.shape(), vec![12, 2]);
    }

    #[test]
    fn concat_rejects_incompatible() {
        let tape = Tape::new();
        let a = t2(2, 2, &[0.0; 4]);
        let b = t2(2, 3, &[0.0; 6]);
        assert!(tape.concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn concat_cols_layout() {
        let tape = Tape::new();
        let a = t2(2, 1, &[1.0, 3.0]);
        let b = t2(2, 2, &[2.0, 9.0, 4.0, 9.0]);
        let y = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn slice_cols_roundtrip_grad() {
        let tape = Tape::new();
        let a = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = tape.slice(&a, 1, 1, 3).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0, 5.0, 6.0]);
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn transpose_involution() {
        let tape = Tape::new();
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = tape.transpose(&a).unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        let tt = tape.transpose(&t).unwrap();
        assert_eq!(tt.to_vec(), a.to_vec());
    }

    #[test]
    fn im2col_known_unfold() {
        // 1x3x3 image, k=2, stride=1, no pad -> [4, 4]
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let y = tape.im2col(&x, 2, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![4, 4]);
        // first row: top-left of each patch
        assert_eq!(y.to_vec()[0..4], [1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn broadcast_add_bias_grad_is_column_sum() {
        let tape = Tape::new();
        let a = t2(3, 2, &[0.0; 6]);
        let b = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        let y = tape.broadcast_add(&a, &b).unwrap();
        let s = tape.sum(&y).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }
}

//! Differentiable tensor operations.
//!
//! Every op computes its forward value eagerly and, when any input requires
//! gradients, records a one-shot backward callback. Backward callbacks
//! compute all parent contributions into locals before accumulating, so a
//! tensor may safely appear as both operands of one op.

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use super::{NumericsError, Result, SELU_ALPHA, SELU_LAMBDA};

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(NumericsError::ShapeMismatch {
            op,
            detail: format!("{sa:?} vs {sb:?}"),
        });
    }
    Ok(())
}

// Row-major matmul kernels. `nn` is A*B, `nt` is A*B^T, `tn` is A^T*B;
// the transposed variants avoid materializing transposes in backward.

fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

/// a: [m, n], b: [k, n] -> a * b^T: [m, k]
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// a: [m, k], b: [m, n] -> a^T * b: [k, n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("add", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| *x + *y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.accum_grad(g);
                }
                if pb.requires_grad() {
                    pb.accum_grad(g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("sub", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| *x - *y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.accum_grad(g);
                }
                if pb.requires_grad() {
                    let neg: Vec<T> = g.iter().map(|v| -*v).collect();
                    pb.accum_grad(&neg);
                }
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("mul", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| *x * *y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = if pa.requires_grad() {
                    Some(pb.with_data(|b| g.iter().zip(b).map(|(gi, bi)| *gi * *bi).collect::<Vec<T>>()))
                } else {
                    None
                };
                let db = if pb.requires_grad() {
                    Some(pa.with_data(|a| g.iter().zip(a).map(|(gi, ai)| *gi * *ai).collect::<Vec<T>>()))
                } else {
                    None
                };
                if let Some(da) = da {
                    pa.accum_grad(&da);
                }
                if let Some(db) = db {
                    pb.accum_grad(&db);
                }
            }),
        ))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.with_data(|a| a.iter().map(|x| *x * c).collect());
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if p.requires_grad() {
                    let d: Vec<T> = g.iter().map(|v| *v * c).collect();
                    p.accum_grad(&d);
                }
            }),
        )
    }

    /// [m, k] x [k, n] -> [m, n]
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.with_data(|a| other.with_data(|b| mm_nn(a, b, m, k, n)));
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = if pa.requires_grad() {
                    Some(pb.with_data(|b| mm_nt(g, b, m, n, k)))
                } else {
                    None
                };
                let db = if pb.requires_grad() {
                    Some(pa.with_data(|a| mm_tn(a, g, m, k, n)))
                } else {
                    None
                };
                if let Some(da) = da {
                    pa.accum_grad(&da);
                }
                if let Some(db) = db {
                    pb.accum_grad(&db);
                }
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.with_data(|a| {
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a[i * n + j];
                }
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if p.requires_grad() {
                    let mut back = vec![T::zero(); m * n];
                    for j in 0..n {
                        for i in 0..m {
                            back[i * n + j] = g[j * m + i];
                        }
                    }
                    p.accum_grad(&back);
                }
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape()),
            });
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data(),
            vec![self.clone()],
            Box::new(move |g| {
                if p.requires_grad() {
                    p.accum_grad(g);
                }
            }),
        ))
    }

    /// Row-major flatten to a rank-1 tensor.
    pub fn flatten(&self) -> Tensor<T> {
        self.reshape(&[self.len()]).expect("flatten preserves length")
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let m = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("incompatible part shape {s:?}"),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            p.with_data(|pd| {
                for i in 0..m {
                    data[i * total + offset..i * total + offset + w]
                        .copy_from_slice(&pd[i * w..(i + 1) * w]);
                }
            });
            offset += w;
        }
        let handles: Vec<Tensor<T>> = parts.to_vec();
        let widths_bw = widths.clone();
        let back_handles = handles.clone();
        Ok(Tensor::from_op(
            vec![m, total],
            data,
            handles,
            Box::new(move |g| {
                let mut offset = 0;
                for (p, w) in back_handles.iter().zip(&widths_bw) {
                    if p.requires_grad() {
                        let mut part = vec![T::zero(); m * w];
                        for i in 0..m {
                            part[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        p.accum_grad(&part);
                    }
                    offset += w;
                }
            }),
        ))
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.len().max(1);
        let inv = T::from_f64_lossy(1.0 / n as f64);
        let total = self.with_data(|a| a.iter().fold(T::zero(), |acc, v| acc + *v));
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |g| {
                if p.requires_grad() {
                    let each = g[0] * inv;
                    p.accum_grad(&vec![each; p.len()]);
                }
            }),
        )
    }

    /// Adds a length-n bias vector to every row of an [m, n] tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        let bs = bias.shape();
        if s.len() != 2 || bs != vec![s[1]] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{s:?} + {bs:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let data = self.with_data(|a| {
            bias.with_data(|b| {
                let mut out = a.to_vec();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = out[i * n + j] + b[j];
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if pa.requires_grad() {
                    pa.accum_grad(g);
                }
                if pb.requires_grad() {
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                    pb.accum_grad(&db);
                }
            }),
        ))
    }

    /// Numerically-stable softmax along `axis` (rank 1 or 2).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        match (s.len(), axis) {
            (1, 0) => self.softmax_rows_internal(1, s[0]),
            (2, 1) => self.softmax_rows_internal(s[0], s[1]),
            (2, 0) => {
                let t = self.transpose()?;
                let sm = t.softmax_rows_internal(s[1], s[0])?;
                sm.transpose()
            }
            _ => Err(NumericsError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} on shape {s:?}"),
            }),
        }
    }

    fn softmax_rows_internal(&self, rows: usize, cols: usize) -> Result<Tensor<T>> {
        let mut out = vec![T::zero(); rows * cols];
        self.with_data(|a| {
            for r in 0..rows {
                let row = &a[r * cols..(r + 1) * cols];
                let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
                let mut sum = T::zero();
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    let e = (*v - max).exp();
                    *o = e;
                    sum = sum + e;
                }
                for o in out[r * cols..(r + 1) * cols].iter_mut() {
                    *o = *o / sum;
                }
            }
        });
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if !p.requires_grad() {
                    return;
                }
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (yi, gi)| acc + *yi * *gi);
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                p.accum_grad(&dx);
            }),
        ))
    }

    /// Per-row softmax over an [m, n] score matrix where only `allowed`
    /// columns may receive attention. Disallowed columns get exactly zero
    /// weight. When no column is allowed (a fully padded input) every row
    /// falls back to a uniform 1/n distribution with zero gradient, so the
    /// forward pass stays finite.
    pub fn masked_softmax_rows(&self, allowed: &[bool]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || allowed.len() != s[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax_rows",
                detail: format!("shape {s:?} with mask of {}", allowed.len()),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let fallback = !allowed.iter().any(|&a| a);
        let mut out = vec![T::zero(); rows * cols];
        if fallback {
            let u = T::from_f64_lossy(1.0 / cols as f64);
            out.fill(u);
        } else {
            self.with_data(|a| {
                for r in 0..rows {
                    let row = &a[r * cols..(r + 1) * cols];
                    let mut max = T::neg_infinity();
                    for (j, v) in row.iter().enumerate() {
                        if allowed[j] && *v > max {
                            max = *v;
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..cols {
                        if allowed[j] {
                            let e = (row[j] - max).exp();
                            out[r * cols + j] = e;
                            sum = sum + e;
                        }
                    }
                    for j in 0..cols {
                        if allowed[j] {
                            out[r * cols + j] = out[r * cols + j] / sum;
                        }
                    }
                }
            });
        }
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                if !p.requires_grad() || fallback {
                    return;
                }
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (yi, gi)| acc + *yi * *gi);
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                p.accum_grad(&dx);
            }),
        ))
    }

    /// Scaled exponential linear unit.
    pub fn selu(&self) -> Tensor<T> {
        let lambda = T::from_f64_lossy(SELU_LAMBDA);
        let alpha = T::from_f64_lossy(SELU_ALPHA);
        let data = self.with_data(|a| {
            a.iter()
                .map(|&x| {
                    if x > T::zero() {
                        lambda * x
                    } else {
                        lambda * alpha * (x.exp() - T::one())
                    }
                })
                .collect()
        });
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if !p.requires_grad() {
                    return;
                }
                let dx = p.with_data(|a| {
                    a.iter()
                        .zip(g)
                        .map(|(&x, &gi)| {
                            let d = if x > T::zero() {
                                lambda
                            } else {
                                lambda * alpha * x.exp()
                            };
                            gi * d
                        })
                        .collect::<Vec<T>>()
                });
                p.accum_grad(&dx);
            }),
        )
    }

    /// Layer normalization over each row of an [m, n] tensor, with learned
    /// per-column scale and offset.
    pub fn layer_norm_rows(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || gamma.shape() != vec![s[1]] || beta.shape() != vec![s[1]] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm_rows",
                detail: format!(
                    "x {s:?}, gamma {:?}, beta {:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            });
        }
        let (m, n) = (s[0], s[1]);
        let epsv = T::from_f64_lossy(eps);
        let inv_n = T::from_f64_lossy(1.0 / n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        self.with_data(|a| {
            for r in 0..m {
                let row = &a[r * n..(r + 1) * n];
                let mean = row.iter().fold(T::zero(), |acc, v| acc + *v) * inv_n;
                let var = row
                    .iter()
                    .fold(T::zero(), |acc, v| acc + (*v - mean) * (*v - mean))
                    * inv_n;
                let inv = (var + epsv).sqrt().recip();
                inv_std[r] = inv;
                for j in 0..n {
                    xhat[r * n + j] = (row[j] - mean) * inv;
                }
            }
        });
        let data: Vec<T> = gamma.with_data(|gm| {
            beta.with_data(|bt| {
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    for j in 0..n {
                        out[r * n + j] = gm[j] * xhat[r * n + j] + bt[j];
                    }
                }
                out
            })
        });
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let dgamma = if pg.requires_grad() {
                    let mut d = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            d[j] = d[j] + g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    Some(d)
                } else {
                    None
                };
                let dbeta = if pb.requires_grad() {
                    let mut d = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            d[j] = d[j] + g[r * n + j];
                        }
                    }
                    Some(d)
                } else {
                    None
                };
                let dx = if px.requires_grad() {
                    let d = pg.with_data(|gm| {
                        let mut d = vec![T::zero(); m * n];
                        for r in 0..m {
                            let mut mean_dxhat = T::zero();
                            let mut mean_dxhat_xhat = T::zero();
                            for j in 0..n {
                                let dxh = g[r * n + j] * gm[j];
                                mean_dxhat = mean_dxhat + dxh;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[r * n + j];
                            }
                            mean_dxhat = mean_dxhat * inv_n;
                            mean_dxhat_xhat = mean_dxhat_xhat * inv_n;
                            for j in 0..n {
                                let dxh = g[r * n + j] * gm[j];
                                d[r * n + j] = inv_std[r]
                                    * (dxh - mean_dxhat - xhat[r * n + j] * mean_dxhat_xhat);
                            }
                        }
                        d
                    });
                    Some(d)
                } else {
                    None
                };
                if let Some(d) = dx {
                    px.accum_grad(&d);
                }
                if let Some(d) = dgamma {
                    pg.accum_grad(&d);
                }
                if let Some(d) = dbeta {
                    pb.accum_grad(&d);
                }
            }),
        ))
    }

    /// Inverted-scaling dropout: keeps each element with probability 1-p and
    /// rescales by 1/(1-p), so inference needs no adjustment. `p = 0` is the
    /// identity. Train-time only; callers skip it at inference.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::ShapeMismatch {
                op: "dropout",
                detail: format!("probability {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            let keep: Vec<T> = vec![T::one(); self.len()];
            return self.apply_mask(keep);
        }
        let scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        self.apply_mask(mask)
    }

    fn apply_mask(&self, mask: Vec<T>) -> Result<Tensor<T>> {
        let data = self.with_data(|a| a.iter().zip(&mask).map(|(x, m)| *x * *m).collect());
        let p = self.clone();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if p.requires_grad() {
                    let dx: Vec<T> = g.iter().zip(&mask).map(|(gi, m)| *gi * *m).collect();
                    p.accum_grad(&dx);
                }
            }),
        ))
    }
}

use super::kernels::{broadcast_index, broadcast_shapes, matmul_a_bt, matmul_at_b, matmul_raw};
use super::{Tensor, TensorError, TensorResult};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_batch: Vec<usize>,
        b_batch: Vec<usize>,
        m: usize,
        k: usize,
        p: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        k: usize,
        p: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Axpby {
        a: Var,
        b: Var,
        ca: T,
        cb: T,
    },
    Scale(Var, T),
    WhereRows {
        a: Var,
        b: Var,
        cond: Vec<bool>,
    },
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Clamp {
        a: Var,
        lo: T,
        hi: T,
    },
    Reshape(Var),
    TransposeLast2(Var),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Bce {
        pos: Var,
        neg: Var,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation, differentiated in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

const BCE_CLAMP: f64 = 1e-7;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Errors if any element of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, context: &str) -> TensorResult<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context.to_string()))
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// Batched matrix product `[..., m, k] × [..., k, p]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k, p) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let out_batch = broadcast_shapes(ba, bb).ok_or_else(mismatch)?;
        let a_batch = broadcast_index(ba, &out_batch);
        let b_batch = broadcast_index(bb, &out_batch);
        let nb = a_batch.len();
        let mut out = vec![T::zero(); nb * m * p];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for o in 0..nb {
                matmul_raw(
                    &ad[a_batch[o] * m * k..(a_batch[o] + 1) * m * k],
                    &bd[b_batch[o] * k * p..(b_batch[o] + 1) * k * p],
                    &mut out[o * m * p..(o + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
        }
        let mut shape = out_batch;
        shape.extend([m, p]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                a_batch,
                b_batch,
                m,
                k,
                p,
            },
            rg,
        ))
    }

    /// Affine map over the last axis: `x[..., k] · w[k, p] + b[p]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> TensorResult<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (k, p) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [p] {
                return Err(TensorError::Shape {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * p];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * p..(r + 1) * p].copy_from_slice(bd);
            }
        }
        matmul_raw(self.value(x).data(), self.value(w).data(), &mut out, rows, k, p);
        let mut shape = sx;
        *shape.last_mut().unwrap() = p;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b, rows, k, p }, rg))
    }

    // ----- elementwise -----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> TensorResult<(Tensor<T>, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = broadcast_shapes(&sa, &sb).ok_or(TensorError::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&sa, &shape);
            let ib = broadcast_index(&sb, &shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        Ok((Tensor::new(shape, data)?, self.rg(a) || self.rg(b)))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Broadcasting difference.
    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `ca·a + cb·b` for equal shapes.
    pub fn axpby(&mut self, a: Var, b: Var, ca: T, cb: T) -> TensorResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "axpby",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| ca * x + cb * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Axpby { a, b, ca, cb }, rg))
    }

    /// Row selection over the leading axis: row `r` comes from `a` when
    /// `cond[r]`, else from `b`. Values are copied, not blended.
    pub fn where_rows(&mut self, cond: &[bool], a: Var, b: Var) -> TensorResult<Var> {
        let s = self.shape(a).to_vec();
        if s != self.shape(b) || s.first() != Some(&cond.len()) {
            return Err(TensorError::Shape {
                op: "where_rows",
                lhs: s,
                rhs: self.shape(b).to_vec(),
            });
        }
        let inner = s[1..].iter().product::<usize>();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len());
        for (r, &c) in cond.iter().enumerate() {
            let src = if c { ad } else { bd };
            data.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(s, data)?,
            Op::WhereRows {
                a,
                b,
                cond: cond.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), T::sqrt)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu(x).0)
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.max(lo).min(hi))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1/(1-rate)`. `rng = None` means eval mode (identity).
    pub fn dropout(&mut self, a: Var, rate: f64, rng: Option<&mut super::RngStream>) -> TensorResult<Var> {
        let Some(rng) = rng else { return Ok(a) };
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let shape = self.shape(a).to_vec();
        let numel = self.value(a).numel();
        let mask = (0..numel)
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, mask)
    }

    // ----- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> TensorResult<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for blk in src.chunks(r * c) {
            for j in 0..c {
                for i in 0..r {
                    out.push(blk[i * c + j]);
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast2(a), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> TensorResult<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                bound: s.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> TensorResult<Var> {
        let v = self.narrow(a, axis, index, 1)?;
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        self.reshape(v, shape)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Index {
                op: "concat",
                index: axis,
                bound: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ----- reductions ------------------------------------------------------

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Index {
                op: "sum_axis",
                index: axis,
                bound: s.len(),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let ext = s[axis];
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..ext {
                let row = &src[(o * ext + j) * inner..(o * ext + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { a, axis }, rg))
    }

    /// Mean over `axis`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        let ext = *self.shape(a).get(axis).unwrap_or(&1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::of(ext as f64)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total: T = t.data().iter().copied().sum();
        let mean = total / T::of(t.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(mean), Op::MeanAll(a), rg)
    }

    // ----- model-specific fused ops ---------------------------------------

    /// Rows of `table[V, d]` at `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> TensorResult<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (v, d) = (s[0], s[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis.
    ///
    /// `mask` (row-major `[r, m]` over the last two axes, `true` = allowed)
    /// forces disallowed entries to exactly zero. Rows are stabilized by
    /// subtracting their maximum over allowed entries.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> TensorResult<Var> {
        let s = self.shape(a).to_vec();
        let m = *s.last().unwrap_or(&0);
        let r = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        if let Some(mask) = mask {
            if mask.len() != r * m {
                return Err(TensorError::Shape {
                    op: "softmax mask",
                    lhs: s,
                    rhs: vec![mask.len()],
                });
            }
            for row in 0..r {
                if !mask[row * m..(row + 1) * m].iter().any(|&x| x) {
                    return Err(TensorError::DegenerateRow { row });
                }
            }
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, (x, y)) in src.chunks(m).zip(out.chunks_mut(m)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|mk| mk[(row % r) * m + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in x.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            for (j, (&v, o)) in x.iter().zip(y.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in y.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax(a), rg))
    }

    /// Normalizes the last axis to zero mean / unit variance, then `· gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> TensorResult<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(src.len() / d.max(1));
        let mut out = vec![T::zero(); src.len()];
        for ((row, xh), o) in src.chunks(d).zip(xhat.chunks_mut(d)).zip(out.chunks_mut(d)) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                xh[j] = (row[j] - mu) * rs;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Binary cross-entropy over paired positive/negative logits.
    ///
    /// Mean over all valid binary terms (two per valid position) of
    /// `-log p(pos)` and `-log(1 - p(neg))`, with probabilities clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce_logits(&mut self, pos: Var, neg: Var, mask: &[bool]) -> TensorResult<Var> {
        let n = self.value(pos).numel();
        if self.value(neg).numel() != n || mask.len() != n {
            return Err(TensorError::Shape {
                op: "bce_logits",
                lhs: self.shape(pos).to_vec(),
                rhs: self.shape(neg).to_vec(),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::NotScalar("bce_logits over an empty mask"));
        }
        let lo = T::of(BCE_CLAMP);
        let hi = T::one() - lo;
        let pd = self.value(pos).data();
        let nd = self.value(neg).data();
        let mut total = T::zero();
        for i in (0..n).filter(|&i| mask[i]) {
            let pp = sigmoid(pd[i]).max(lo).min(hi);
            let pn = sigmoid(nd[i]).max(lo).min(hi);
            total -= pp.ln() + (T::one() - pn).ln();
        }
        let loss = total / T::of(2.0 * count as f64);
        let rg = self.rg(pos) || self.rg(neg);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pos,
                neg,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    // ----- reverse pass ----------------------------------------------------

    /// Accumulates d`loss`/d`leaf` for every leaf that requires a gradient.
    ///
    /// Intermediate gradients are released as the sweep passes them; only leaf
    /// gradients remain readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar("backward"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                a_batch,
                b_batch,
                m,
                k,
                p,
            } => {
                let (m, k, p) = (*m, *k, *p);
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for (o, &ia) in a_batch.iter().enumerate() {
                        matmul_a_bt(
                            &g[o * m * p..(o + 1) * m * p],
                            &bd[b_batch[o] * k * p..(b_batch[o] + 1) * k * p],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            k,
                            p,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for (o, &ib) in b_batch.iter().enumerate() {
                        matmul_at_b(
                            &ad[a_batch[o] * m * k..(a_batch[o] + 1) * m * k],
                            &g[o * m * p..(o + 1) * m * p],
                            &mut gb[ib * k * p..(ib + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                });
            }
            Op::Linear { x, w, b, rows, k, p } => {
                let (rows, k, p) = (*rows, *k, *p);
                let (xd, wd) = (val(*x), val(*w));
                acc(*x, &mut |gx| matmul_a_bt(g, wd, gx, rows, k, p));
                acc(*w, &mut |gw| matmul_at_b(xd, g, gw, rows, k, p));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(p) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                let shape = node.value.shape();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                acc(*a, &mut |ga| reduce_into(ga, g, &sa, shape, |_, x| x));
                acc(*b, &mut |gb| reduce_into(gb, g, &sb, shape, |_, x| sign * x));
            }
            Op::Mul(a, b) => {
                let shape = node.value.shape();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (ad, bd) = (val(*a), val(*b));
                let ia = broadcast_index(&sa, shape);
                let ib = broadcast_index(&sb, shape);
                acc(*a, &mut |ga| {
                    for o in 0..g.len() {
                        ga[ia[o]] += g[o] * bd[ib[o]];
                    }
                });
                acc(*b, &mut |gb| {
                    for o in 0..g.len() {
                        gb[ib[o]] += g[o] * ad[ia[o]];
                    }
                });
            }
            Op::Axpby { a, b, ca, cb } => {
                acc(*a, &mut |ga| axpy(ga, g, *ca));
                acc(*b, &mut |gb| axpy(gb, g, *cb));
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(ga, g, *c)),
            Op::WhereRows { a, b, cond } => {
                let inner = g.len() / cond.len().max(1);
                for (side, want) in [(*a, true), (*b, false)] {
                    acc(side, &mut |gs| {
                        for (r, &c) in cond.iter().enumerate() {
                            if c == want {
                                let rng = r * inner..(r + 1) * inner;
                                axpy(&mut gs[rng.clone()], &g[rng], T::one());
                            }
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, g, T::one())),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j];
                }
            }),
            Op::Log(a) => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / ad[j];
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                let half = T::of(0.5);
                for j in 0..g.len() {
                    ga[j] += g[j] * half / out[j];
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * (T::one() - out[j] * out[j]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (T::one() - out[j]);
                }
            }),
            Op::Gelu(a) => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * gelu(ad[j]).1;
                    }
                })
            }
            Op::Clamp { a, lo, hi } => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if ad[j] >= *lo && ad[j] <= *hi {
                            ga[j] += g[j];
                        }
                    }
                })
            }
            Op::TransposeLast2(a) => {
                let s = node.value.shape();
                // out is [.., c, r]; input [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*a, &mut |ga| {
                    for (blk, gblk) in ga.chunks_mut(r * c).zip(g.chunks(r * c)) {
                        for j in 0..c {
                            for i in 0..r {
                                blk[i * c + j] += gblk[j * r + i];
                            }
                        }
                    }
                })
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let full = s[*axis];
                let len = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        axpy(&mut ga[dst..dst + len * inner], &g[src..src + len * inner], T::one());
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(
                                &mut gp[o * ext * inner..(o + 1) * ext * inner],
                                &g[src..src + ext * inner],
                                T::one(),
                            );
                        }
                    });
                    offset += ext;
                }
            }
            Op::SumAxis { a, axis } => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ext = s[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..ext {
                            let dst = (o * ext + j) * inner;
                            axpy(&mut ga[dst..dst + inner], &g[o * inner..(o + 1) * inner], T::one());
                        }
                    }
                })
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanAll(a) => {
                let n = T::of(self.value(*a).numel().max(1) as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], T::one());
                    }
                })
            }
            Op::Softmax(a) => {
                let m = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gr, yr), dst) in g.chunks(m).zip(out.chunks(m)).zip(ga.chunks_mut(m)) {
                        let dot: T = gr.iter().zip(yr).map(|(&gv, &y)| gv * y).sum();
                        for j in 0..m {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gd = val(*gain);
                let inv_d = T::one() / T::of(d as f64);
                acc(*x, &mut |gx| {
                    for (r, ((gr, xh), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            dst[j] += rstd[r] * (gr[j] * gd[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, T::one());
                    }
                });
            }
            Op::Bce { pos, neg, mask, count } => {
                let lo = T::of(BCE_CLAMP);
                let hi = T::one() - lo;
                let scale = g[0] / T::of(2.0 * *count as f64);
                let (pd, nd) = (val(*pos), val(*neg));
                acc(*pos, &mut |gp| {
                    for j in (0..gp.len()).filter(|&j| mask[j]) {
                        let s = sigmoid(pd[j]);
                        if s > lo && s < hi {
                            gp[j] += (s - T::one()) * scale;
                        }
                    }
                });
                acc(*neg, &mut |gn| {
                    for j in (0..gn.len()).filter(|&j| mask[j]) {
                        let s = sigmoid(nd[j]);
                        if s > lo && s < hi {
                            gn[j] += s * scale;
                        }
                    }
                });
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Sums `g` (shaped `out_shape`) back down to `src_shape`.
fn reduce_into<T: Scalar>(dst: &mut [T], g: &[T], src_shape: &[usize], out_shape: &[usize], f: impl Fn(usize, T) -> T) {
    if src_shape == out_shape {
        for (j, (d, &x)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(j, x);
        }
        return;
    }
    let idx = broadcast_index(src_shape, out_shape);
    for (o, &i) in idx.iter().enumerate() {
        dst[i] += f(o, g[o]);
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let d_inner = c * (T::one() + T::of(3.0) * k * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner;
    (value, deriv)
}

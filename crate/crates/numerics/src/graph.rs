//! Tape of recorded operations and reverse-mode accumulation.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and backward is a single reverse sweep.

use crate::error::{shape_err, NumericsError, Result};
use crate::kernels::{
    axpy, dot, log_sum_exp, matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid, softmax_row,
    softplus,
};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2D convolution over NHWC activations stored as
/// `[batch·height·width, channels]` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Maps an output pixel and kernel tap to the source row, if inside the image.
    #[inline]
    fn source_row(&self, n: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            return None;
        }
        Some((n * self.height + iy as usize) * self.width + ix as usize)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<f32>, pos_weight: f32 },
    Mse { pred: Var, target: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, batch: usize, len: usize, heads: usize, probs: Vec<T> },
    Im2Col { x: Var, geom: ConvGeom },
    MeanGroups { x: Var, group: usize },
    MaxGroups { x: Var, group: usize, argmax: Vec<u32> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// f64 value of scalar reductions, kept so losses accumulate without f32 drift.
    exact: Option<f64>,
}

/// Recorded computation. Single-threaded; build one per forward pass.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value in f64 where the producing op accumulated in f64.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| node.value.item().as_f64())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_scalar(&mut self, op_name: &'static str, exact: f64, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !exact.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let v = self.push(op_name, Tensor::scalar(T::of(exact)), op, inputs)?;
        self.nodes[v.0].exact = Some(exact);
        Ok(v)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} · {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Adds a `[n]` bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.len() {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let n = tb.len();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), out)?;
        let exact = match (self.nodes[a.0].exact, self.nodes[b.0].exact, ta.len()) {
            (ea, eb, 1) if ea.is_some() || eb.is_some() => {
                Some(self.scalar_f64(a) + self.scalar_f64(b))
            }
            _ => None,
        };
        let v = self.push("add", value, Op::Add { a, b }, &[a, b])?;
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape(), out)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(tx.shape(), out)?;
        let exact = self.nodes[x.0].exact.map(|e| e * factor.as_f64());
        let v = self.push("scale", value, Op::Scale { x, factor }, &[x])?;
        self.nodes[v.0].exact = exact;
        Ok(v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(tx.shape(), out)?;
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v.as_f64()).sum();
        self.push_scalar("sum", s, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: f64 = t.data().iter().map(|&v| v.as_f64()).sum::<f64>() / t.len() as f64;
        self.push_scalar("mean", s, Op::Mean { x }, &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        tx.ensure_finite("softmax")?;
        let d = tx.last_dim();
        if d == 0 {
            return Err(shape_err("softmax", "last dimension must be >= 1"));
        }
        let mut out = vec![T::zero(); tx.len()];
        for (row, o) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} targets", tl.shape(), targets.len()),
            ));
        }
        tl.ensure_finite("cross_entropy")?;
        let classes = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NumericsError::Index { index: bad, classes });
        }
        let mut probs = vec![T::zero(); tl.len()];
        let mut total = 0.0f64;
        for (i, row) in tl.data().chunks(classes).enumerate() {
            total += log_sum_exp(row) - row[targets[i]].as_f64();
            softmax_row(row, &mut probs[i * classes..(i + 1) * classes]);
        }
        let loss = total / targets.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push_scalar("cross_entropy", loss, op, &[logits])
    }

    /// Mean of `w·BCE(σ(v), y)` with `w = pos_weight` on positives.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32], pos_weight: f32) -> Result<Var> {
        let tv = self.value(logits);
        if tv.len() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", tv.len(), targets.len()),
            ));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(NumericsError::Domain {
                op: "bce_with_logits",
                detail: "targets must be 0 or 1".into(),
            });
        }
        if !(pos_weight > 0.0 && pos_weight.is_finite()) {
            return Err(NumericsError::Domain {
                op: "bce_with_logits",
                detail: format!("pos_weight must be positive, got {pos_weight}"),
            });
        }
        let w = pos_weight as f64;
        let total: f64 = tv
            .data()
            .iter()
            .zip(targets)
            .map(|(&v, &y)| {
                let v = v.as_f64();
                if y == 1.0 {
                    w * softplus(-v)
                } else {
                    softplus(v)
                }
            })
            .sum();
        let loss = total / targets.len() as f64;
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
            pos_weight,
        };
        self.push_scalar("bce_with_logits", loss, op, &[logits])
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        same_shape("mse", tp, tt)?;
        if tp.is_empty() {
            return Err(shape_err("mse", "empty tensor"));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let loss = s / tp.len() as f64;
        self.push_scalar("mse", loss, Op::Mse { pred, target }, &[pred, target])
    }

    /// Normalizes each last-dim row to zero mean / unit variance (ε = 1e-5),
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if d == 0 || tg.len() != d || tb.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.leading();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = T::of(rs);
            for j in 0..d {
                let h = T::of((row[j].as_f64() - mean) * rs);
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    /// Scaled dot-product attention for `batch` independent sequences of
    /// `len` tokens. `q`, `k`, `v` are `[batch·len, d]`; heads split `d`
    /// into contiguous slices and the output concatenates them.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        if tq.rank() != 2 || tq.shape()[0] != batch * len || len == 0 {
            return Err(shape_err("attention", format!("{:?} for batch {batch} len {len}", tq.shape())));
        }
        let d = tq.shape()[1];
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut out = vec![T::zero(); batch * len * d];
        let mut scores = vec![T::zero(); len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &tq.data()[(b * len + i) * d + off..][..dh];
                    for j in 0..len {
                        let kj = &tk.data()[(b * len + j) * d + off..][..dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    softmax_row(&scores, p);
                    let oi = &mut out[(b * len + i) * d + off..][..dh];
                    for j in 0..len {
                        axpy(p[j], &tv.data()[(b * len + j) * d + off..][..dh], oi);
                    }
                }
            }
        }
        let value = Tensor::new([batch * len, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            len,
            heads,
            probs,
        };
        self.push("attention", value, op, &[q, k, v])
    }

    /// Unfolds convolution patches: `[N·H·W, C]` → `[N·Ho·Wo, k·k·C]`,
    /// patch columns ordered `(ky, kx, c)`; zero padding.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape() != [geom.batch * geom.height * geom.width, geom.channels] {
            return Err(shape_err("im2col", format!("{:?} vs {geom:?}", tx.shape())));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.padding < geom.kernel {
            return Err(NumericsError::Config(format!("invalid convolution geometry {geom:?}")));
        }
        let (ho, wo, c, pl) = (geom.out_height(), geom.out_width(), geom.channels, geom.patch_len());
        let mut out = vec![T::zero(); geom.batch * ho * wo * pl];
        for n in 0..geom.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let orow = ((n * ho + oy) * wo + ox) * pl;
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            if let Some(src) = geom.source_row(n, oy, ox, ky, kx) {
                                let dst = orow + (ky * geom.kernel + kx) * c;
                                out[dst..dst + c].copy_from_slice(&tx.data()[src * c..(src + 1) * c]);
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([geom.batch * ho * wo, pl], out)?;
        self.push("im2col", value, Op::Im2Col { x, geom }, &[x])
    }

    /// Averages consecutive groups of `group` rows: `[N·g, C]` → `[N, C]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.leading(), tx.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(shape_err("mean_groups", format!("{rows} rows in groups of {group}")));
        }
        let n = rows / group;
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for r in 0..group {
                axpy(T::one(), &tx.data()[(i * group + r) * c..][..c], o);
            }
            let inv = T::of(1.0 / group as f64);
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new([n, c], out)?;
        self.push("mean_groups", value, Op::MeanGroups { x, group }, &[x])
    }

    /// Elementwise max over consecutive groups of `group` rows. Ties route
    /// the gradient to the first maximal row.
    pub fn max_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.leading(), tx.last_dim());
        if group == 0 || rows % group != 0 {
            return Err(shape_err("max_groups", format!("{rows} rows in groups of {group}")));
        }
        let n = rows / group;
        let mut out = vec![T::neg_infinity(); n * c];
        let mut argmax = vec![0u32; n * c];
        for i in 0..n {
            for r in 0..group {
                let row = &tx.data()[(i * group + r) * c..][..c];
                for j in 0..c {
                    if row[j] > out[i * c + j] {
                        out[i * c + j] = row[j];
                        argmax[i * c + j] = r as u32;
                    }
                }
            }
        }
        let value = Tensor::new([n, c], out)?;
        self.push("max_groups", value, Op::MaxGroups { x, group, argmax }, &[x])
    }

    /// Stacks 2D parts with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let c = self.value(*first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.last_dim() != c {
                return Err(shape_err("concat_rows", format!("part {:?} vs width {c}", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / c;
        let value = Tensor::new([rows, c], out)?;
        let op = Op::ConcatRows { parts: parts.to_vec() };
        self.push("concat_rows", value, op, parts)
    }

    /// Selects rows by index (repeats allowed); gradient scatter-adds back.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("gather_rows", format!("expected 2D, got {:?}", tx.shape())));
        }
        let (rows, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= rows {
                return Err(NumericsError::Index { index: i, classes: rows });
            }
            out.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new([index.len(), c], out)?;
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        self.push("gather_rows", value, op, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Reverse sweep from a scalar loss. Returns gradients of every node
    /// that requires grad; intermediate buffers are released as the sweep
    /// passes them, leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let bv = self.value(b).data();
                    matmul_bt_acc(g, bv, grad_slot(grads, a, m * k), m, n, k);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    matmul_at_acc(av, g, grad_slot(grads, b, k * n), m, k, n);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    axpy(T::one(), g, grad_slot(grads, x, g.len()));
                }
                if self.wants(bias) {
                    let n = self.value(bias).len();
                    let gb = grad_slot(grads, bias, n);
                    for row in g.chunks(n) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(v) {
                        axpy(T::one(), g, grad_slot(grads, v, g.len()));
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = grad_slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.wants(b) {
                    let gb = grad_slot(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale { x, factor } => {
                axpy(factor, g, grad_slot(grads, x, g.len()));
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let gx = grad_slot(grads, x, g.len());
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        gx[i] += g[i];
                    }
                }
            }
            &Op::Sum { x } => {
                let n = self.value(x).len();
                grad_slot(grads, x, n).iter_mut().for_each(|v| *v += g[0]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).len();
                let s = g[0] / T::of(n as f64);
                grad_slot(grads, x, n).iter_mut().for_each(|v| *v += s);
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = grad_slot(grads, x, y.len());
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let inner = dot(yr, gr);
                    for j in 0..d {
                        gx[r * d + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = probs.len() / targets.len();
                let s = g[0] / T::of(targets.len() as f64);
                let gl = grad_slot(grads, *logits, probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[i * classes + j] += s * (probs[i * classes + j] - onehot);
                    }
                }
            }
            Op::BceWithLogits { logits, targets, pos_weight } => {
                let v = self.value(*logits).data();
                let s = g[0].as_f64() / targets.len() as f64;
                let gl = grad_slot(grads, *logits, v.len());
                for i in 0..v.len() {
                    let p = sigmoid(v[i].as_f64());
                    let d = if targets[i] == 1.0 {
                        *pos_weight as f64 * (p - 1.0)
                    } else {
                        p
                    };
                    gl[i] += T::of(s * d);
                }
            }
            &Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(pred).data(), self.value(target).data());
                let s = T::of(2.0 * g[0].as_f64() / pv.len() as f64);
                if self.wants(pred) {
                    let gp = grad_slot(grads, pred, pv.len());
                    for i in 0..pv.len() {
                        gp[i] += s * (pv[i] - tv[i]);
                    }
                }
                if self.wants(target) {
                    let gt = grad_slot(grads, target, pv.len());
                    for i in 0..pv.len() {
                        gt[i] -= s * (pv[i] - tv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if self.wants(*gamma) {
                    let gg = grad_slot(grads, *gamma, d);
                    for r in 0..rstd.len() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = grad_slot(grads, *beta, d);
                    for row in g.chunks(d) {
                        axpy(T::one(), row, gb);
                    }
                }
                if self.wants(*x) {
                    let gx = grad_slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rstd.len() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                            m1 += dxhat[j].as_f64();
                            m2 += (dxhat[j] * xh[j]).as_f64();
                        }
                        let (m1, m2) = (T::of(m1 / d as f64), T::of(m2 / d as f64));
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, batch, len, heads, probs } => {
                self.backprop_attention(*q, *k, *v, (*batch, *len, *heads), probs, g, grads);
            }
            &Op::Im2Col { x, geom } => {
                let (ho, wo, c, pl) = (geom.out_height(), geom.out_width(), geom.channels, geom.patch_len());
                let gx = grad_slot(grads, x, geom.batch * geom.height * geom.width * c);
                for n in 0..geom.batch {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let orow = ((n * ho + oy) * wo + ox) * pl;
                            for ky in 0..geom.kernel {
                                for kx in 0..geom.kernel {
                                    if let Some(src) = geom.source_row(n, oy, ox, ky, kx) {
                                        let from = orow + (ky * geom.kernel + kx) * c;
                                        axpy(T::one(), &g[from..from + c], &mut gx[src * c..(src + 1) * c]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::MeanGroups { x, group } => {
                let c = node.value.last_dim();
                let n = node.value.leading();
                let inv = T::of(1.0 / group as f64);
                let gx = grad_slot(grads, x, n * group * c);
                for i in 0..n {
                    for r in 0..group {
                        axpy(inv, &g[i * c..(i + 1) * c], &mut gx[(i * group + r) * c..][..c]);
                    }
                }
            }
            Op::MaxGroups { x, group, argmax } => {
                let c = node.value.last_dim();
                let n = node.value.leading();
                let gx = grad_slot(grads, *x, n * group * c);
                for i in 0..n {
                    for j in 0..c {
                        let r = argmax[i * c + j] as usize;
                        gx[(i * group + r) * c + j] += g[i * c + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        axpy(T::one(), &g[off..off + len], grad_slot(grads, p, len));
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let gx = grad_slot(grads, *x, tx.len());
                for (o, &i) in index.iter().enumerate() {
                    axpy(T::one(), &g[o * c..(o + 1) * c], &mut gx[i * c..(i + 1) * c]);
                }
            }
            &Op::Reshape { x } => {
                axpy(T::one(), g, grad_slot(grads, x, g.len()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        (batch, len, heads): (usize, usize, usize),
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).last_dim();
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let total = batch * len * d;
        let mut gq = vec![T::zero(); total];
        let mut gk = vec![T::zero(); total];
        let mut gv = vec![T::zero(); total];
        let mut dp = vec![T::zero(); len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let row = |t: usize| (b * len + t) * d + off;
                for i in 0..len {
                    let p = &probs[((b * heads + h) * len + i) * len..][..len];
                    let go = &g[row(i)..][..dh];
                    for j in 0..len {
                        dp[j] = dot(go, &tv[row(j)..][..dh]);
                        axpy(p[j], go, &mut gv[row(j)..][..dh]);
                    }
                    let inner = dot(p, &dp);
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        axpy(ds, &tk[row(j)..][..dh], &mut gq[row(i)..][..dh]);
                        axpy(ds, &tq[row(i)..][..dh], &mut gk[row(j)..][..dh]);
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                axpy(T::one(), &buf, grad_slot(grads, var, total));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(t(&[4], &[0.0; 4]));
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.25; 4]);
        let z = g.constant(t(&[2], &[1000.0, 0.0]));
        let p = g.softmax(z).unwrap();
        assert!((g.value(p).data()[0] - 1.0).abs() <= 1e-6);
        assert!(g.value(p).data()[1].abs() <= 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(t(&[2], &[f32::NAN, 0.0]));
        assert!(matches!(g.softmax(z), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(t(&[1, 2], &[10.0, -10.0]));
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.scalar_f64(l) <= 1e-4);
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!((g.scalar_f64(l) - std::f64::consts::LN_2).abs() < 1e-7);
        assert!(matches!(g.cross_entropy(z, &[2]), Err(NumericsError::Index { index: 2, classes: 2 })));
    }

    #[test]
    fn bce_reference_cases() {
        let ln2 = std::f64::consts::LN_2;
        let mut g = Graph::<f32>::new();
        let v = g.constant(t(&[1], &[0.0]));
        let l = g.bce_with_logits(v, &[1.0], 1.0).unwrap();
        assert!((g.scalar_f64(l) - ln2).abs() < 1e-9);
        let v = g.constant(t(&[1], &[20.0]));
        let l = g.bce_with_logits(v, &[1.0], 1.0).unwrap();
        assert!(g.scalar_f64(l) < 1e-8);
        let v = g.constant(t(&[2], &[0.0, 0.0]));
        let l = g.bce_with_logits(v, &[1.0, 0.0], 3.0).unwrap();
        assert!((g.scalar_f64(l) - 2.0 * ln2).abs() < 1e-9);
        assert!(g.bce_with_logits(v, &[0.5, 0.0], 1.0).is_err());
        assert!(g.bce_with_logits(v, &[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn mse_reference_cases() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.scalar_f64(l), 0.0);
        let b = g.constant(t(&[1, 2], &[0.0, 2.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.scalar_f64(l), 0.5);
        let c = g.constant(Tensor::zeros([2, 1]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gamma = g.constant(Tensor::full([4], 1.0));
        let beta = g.constant(Tensor::zeros([4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([3, 6]));
        assert!(matches!(g.attention(x, x, x, 1, 3, 4), Err(NumericsError::Config(_))));
    }

    #[test]
    fn max_groups_picks_first_maximum() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t(&[3, 1], &[2.0, 2.0, 1.0]), true);
        let m = g.max_groups(x, 3).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }
}

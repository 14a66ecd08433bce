//! The differentiation tape.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and backward is a single reverse sweep. An op whose
//! parents all have `requires_grad = false` is recorded as a plain leaf and
//! keeps no saved activations.

use super::kernels::{matmul_a_bt_acc, matmul_at_b_acc, matmul_into};
use super::{col2im, im2col, numel_of, ConvGeometry, CounterRng, Padding, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cout: usize,
        cols: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        width: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        total: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        count: usize,
        vocab: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    relu_signature: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Whether `b` can be added to `a`: equal shapes, or `b` matches a trailing
/// suffix of `a` and repeats over the leading axes.
fn broadcast_repeats(a: &[usize], b: &[usize]) -> Option<usize> {
    if a == b {
        return Some(1);
    }
    if b.len() < a.len() && &a[a.len() - b.len()..] == b {
        return Some(numel_of(&a[..a.len() - b.len()]));
    }
    None
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every ReLU on/off decision taken so far. Two evaluations with
    /// the same signature lie in the same linear region of every ReLU.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product `[.., M, K] × [.., K, N]`. Leading axes must be
    /// equal, or absent on one side (that operand is shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {sa:?} x {sb:?}"),
            ));
        }
        let la = &sa[..sa.len() - 2];
        let lb = &sb[..sb.len() - 2];
        let (a_batched, b_batched, lead) = if la == lb {
            (!la.is_empty(), !lb.is_empty(), la.to_vec())
        } else if lb.is_empty() {
            (true, false, la.to_vec())
        } else if la.is_empty() {
            (false, true, lb.to_vec())
        } else {
            return Err(Error::shape(
                "matmul",
                format!("batch extents {la:?} and {lb:?} do not broadcast"),
            ));
        };
        let batch = numel_of(&lead);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if a_batched && !b_batched {
                matmul_into(av, bv, &mut out, batch * m, k, n, false);
            } else {
                for i in 0..batch {
                    let ai = if a_batched { &av[i * m * k..(i + 1) * m * k] } else { av };
                    let bi = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { bv };
                    matmul_into(ai, bi, &mut out[i * m * n..(i + 1) * m * n], m, k, n, false);
                }
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
        ))
    }

    /// `x · W + b` with `x: [.., K]`, `W: [K, N]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (Some(&k), [k2, n]) = (sx.last(), sw.as_slice()) else {
            return Err(Error::shape(
                "linear",
                format!("weight must be [K, N], got {sw:?}"),
            ));
        };
        let n = *n;
        if k != *k2 {
            return Err(Error::shape(
                "linear",
                format!("input width {k} vs weight {sw:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs output width {n}", self.shape(b)),
                ));
            }
        }
        let rows = numel_of(&sx) / k;
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bv);
            }
        }
        matmul_into(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            k,
            n,
            true,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Linear {
                x,
                w,
                b,
                rows,
                k,
                n,
            },
        ))
    }

    /// NHWC cross-correlation (kernel not flipped). `w: [k, k, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let [kh, kw, cin, cout] = sw[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be [k,k,Cin,Cout], got {sw:?}"),
            ));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {sw:?}")));
        }
        let geom = ConvGeometry::new(self.shape(x), kh, stride, padding)?;
        if geom.cin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weights expect {cin}", geom.cin),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs Cout {cout}", self.shape(b)),
                ));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.rows();
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
        }
        matmul_into(
            &cols,
            self.value(w).data(),
            &mut out,
            rows,
            geom.patch_len(),
            cout,
            true,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let value = Tensor::new(vec![geom.batch, geom.ho, geom.wo, cout], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
                cols: if rg { cols } else { Vec::new() },
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut sig = self.relu_signature;
        let value = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        for v in xv.data() {
            sig = (sig ^ u64::from(*v > T::zero())).wrapping_mul(0x0100_0000_01b3);
        }
        self.relu_signature = sig;
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Softmax { x, width })
    }

    /// Normalizes over the last axis, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&1);
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs width {width}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.numel() / width;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let wn = T::of(width as f64);
        for r in 0..rows {
            let row = &xv.data()[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wn;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = g[j] * h + bb[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                width,
            },
        ))
    }

    /// Inverted dropout. `p` is the drop probability; eval mode returns `x`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: CounterRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel() as u64)
            .map(|i| {
                if super::dropout_keep(&rng, i, p) {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// Gathers rows of `table: [V, D]`; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        let [vocab, width] = st[..] else {
            return Err(Error::shape(
                "embedding",
                format!("table must be [V, D], got {st:?}"),
            ));
        };
        if numel_of(ids_shape) != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids for shape {ids_shape:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding",
                format!("token id {bad} >= vocabulary size {vocab}"),
            ));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(width);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                width,
            },
        ))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let outer = numel_of(&first[..axis]);
        let inner = numel_of(&first[axis + 1..]);
        let mut spans = Vec::with_capacity(parts.len());
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{first:?} vs {s:?} along axis {axis}"),
                ));
            }
            extent += s[axis];
            spans.push((p, s[axis] * inner));
        }
        let total = extent * inner;
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for &(p, span) in &spans {
                out.extend_from_slice(&self.value(p).data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = extent;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat {
                parts: spans,
                outer,
                total,
            },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, mul: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let Some(reps) = broadcast_repeats(&sa, &sb) else {
            return Err(Error::shape(
                op_name,
                format!("{sb:?} does not broadcast onto {sa:?}"),
            ));
        };
        let _ = reps;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bn = bv.len();
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * bv[i % bn] } else { x + bv[i % bn] })
            .collect();
        let rg = self.rg(&[a, b]);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        Ok(self.push(Tensor::new(sa, out)?, rg, op))
    }

    /// Elementwise sum; `b` may repeat over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", false)
    }

    /// Elementwise product; `b` may repeat over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", true)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {shape:?}"),
            ));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Mean token cross-entropy over positions whose target is not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        let Some(&vocab) = sl.last() else {
            return Err(Error::shape("cross_entropy", "scalar logits"));
        };
        let rows = numel_of(&sl) / vocab;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {sl:?}", targets.len()),
            ));
        }
        let mut masked = Vec::with_capacity(rows);
        for &t in targets {
            if t == pad_id {
                masked.push(None);
            } else if t >= vocab {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target id {t} >= vocabulary size {vocab}"),
                ));
            } else {
                masked.push(Some(t));
            }
        }
        let count = masked.iter().flatten().count();
        if count == 0 {
            return Err(Error::Data(
                "cross_entropy over an all-pad batch is undefined".into(),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, t) in masked.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            total += (z.ln() + max - row[t]).as_f64();
        }
        let loss = T::of(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                targets: masked,
                count,
                vocab,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them; intermediate gradients are released as the sweep
    /// passes them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("var {} is not on this tape", loss.0)))?;
        if node.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Autodiff(
                "backward called on a tensor that is detached from every parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, g.data(), &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let entry =
            grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        f(entry.data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.acc(grads, a, |da| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = if b_batched { &bv[i * k * n..(i + 1) * k * n] } else { bv };
                        let dai = if a_batched { &mut da[i * m * k..(i + 1) * m * k] } else { &mut *da };
                        matmul_a_bt_acc(gi, bi, dai, m, n, k);
                    }
                });
                self.acc(grads, b, |db| {
                    if a_batched && !b_batched {
                        matmul_at_b_acc(av, g, db, batch * m, k, n);
                        return;
                    }
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = if a_batched { &av[i * m * k..(i + 1) * m * k] } else { av };
                        let dbi = if b_batched { &mut db[i * k * n..(i + 1) * k * n] } else { &mut *db };
                        matmul_at_b_acc(ai, gi, dbi, m, k, n);
                    }
                });
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                k,
                n,
            } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                self.acc(grads, x, |dx| matmul_a_bt_acc(g, wv, dx, rows, n, k));
                self.acc(grads, w, |dw| matmul_at_b_acc(xv, g, dw, rows, k, n));
                if let Some(b) = b {
                    self.acc(grads, b, |db| {
                        for r in 0..rows {
                            for (d, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
                cols,
            } => {
                let (rows, plen, cout) = (geom.rows(), geom.patch_len(), *cout);
                self.acc(grads, *w, |dw| matmul_at_b_acc(cols, g, dw, rows, plen, cout));
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for r in 0..rows {
                            for (d, &gv) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                                *d += gv;
                            }
                        }
                    });
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); rows * plen];
                    matmul_a_bt_acc(g, wv, &mut dcols, rows, cout, plen);
                    self.acc(grads, *x, |dx| col2im(&dcols, geom, dx));
                }
            }
            &Op::Relu { x } => {
                let y = node.value.data();
                self.acc(grads, x, |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Softmax { x, width } => {
                let y = node.value.data();
                self.acc(grads, x, |dx| {
                    for ((dr, gr), yr) in dx
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(y.chunks(width))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..width {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                width,
            } => {
                let width = *width;
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |dg| {
                    for (i, &gi) in g.iter().enumerate() {
                        dg[i % width] += gi * xhat[i];
                    }
                });
                self.acc(grads, *bias, |db| {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % width] += gi;
                    }
                });
                self.acc(grads, *x, |dx| {
                    let wn = T::of(width as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * width;
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..width {
                            let dh = g[base + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[base + j];
                        }
                        for j in 0..width {
                            let dh = g[base + j] * gv[j];
                            dx[base + j] +=
                                rs / wn * (wn * dh - sum_dh - xhat[base + j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |dx| {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::Embedding { table, ids, width } => {
                let width = *width;
                self.acc(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            dt[id * width + j] += g[r * width + j];
                        }
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                total,
            } => {
                let mut offset = 0;
                for &(p, span) in parts {
                    self.acc(grads, p, |dp| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + span];
                            for (d, &s) in dp[o * span..(o + 1) * span].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += span;
                }
            }
            &Op::Add { a, b } => {
                self.acc(grads, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.acc(grads, b, |db| {
                    let bn = db.len();
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % bn] += gv;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let bn = bv.len();
                self.acc(grads, a, |da| {
                    for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        *d += gv * bv[i % bn];
                    }
                });
                self.acc(grads, b, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % bn] += gv * av[i];
                    }
                });
            }
            &Op::Scale { x, c } => {
                self.acc(grads, x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            &Op::Sum { x } => {
                self.acc(grads, x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            &Op::Mean { x } => {
                self.acc(grads, x, |dx| {
                    let share = g[0] / T::of(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                });
            }
            &Op::Reshape { x } => {
                self.acc(grads, x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                self.acc(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(back) {
                        *d += gv;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
                vocab,
            } => {
                let vocab = *vocab;
                let share = g[0] / T::of(*count as f64);
                self.acc(grads, *logits, |dl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..vocab {
                            dl[r * vocab + j] += probs[r * vocab + j] * share;
                        }
                        dl[r * vocab + t] -= share;
                    }
                });
            }
        }
    }
}

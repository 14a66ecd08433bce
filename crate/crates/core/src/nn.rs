//! Parameters and the small set of layers every model component is built from.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    layer_id, AdamW, CounterRng, Gradients, Padding, ParamUpdate, Real, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: String,
        group: &str,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group: group.to_string(),
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{} is {:?}, got {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Trainable scalar count per group.
    pub fn trainable_by_group(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.trainable) {
            *out.entry(e.group.clone()).or_insert(0) += e.value.numel();
        }
        out
    }

    /// Scalar count per group, trainable or not.
    pub fn total_by_group(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.group.clone()).or_insert(0) += e.value.numel();
        }
        out
    }

    /// One optimizer step over every trainable parameter that has a gradient.
    pub fn apply(&mut self, opt: &mut AdamW<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        let mut updates: Vec<ParamUpdate<'_, T>> = self
            .entries
            .iter_mut()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, e)| ParamUpdate {
                slot: i,
                name: &e.name,
                value: &mut e.value,
                grad: grads.get(i).and_then(Option::as_ref),
            })
            .collect();
        opt.step(&mut updates)
    }
}

/// Registration context: parameter names are `path.name`, grouped under
/// `group` for accounting.
pub struct Scope<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    path: String,
    group: String,
    trainable: bool,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn root(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            path: String::new(),
            group: "model".into(),
            trainable: true,
        }
    }

    fn derive(&mut self, path: String, group: String, trainable: bool) -> Scope<'_, T> {
        Scope {
            store: &mut *self.store,
            rng: &mut *self.rng,
            path,
            group,
            trainable,
        }
    }

    pub fn child(&mut self, name: &str) -> Scope<'_, T> {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        };
        let (g, t) = (self.group.clone(), self.trainable);
        self.derive(path, g, t)
    }

    pub fn group(&mut self, group: &str) -> Scope<'_, T> {
        let (p, t) = (self.path.clone(), self.trainable);
        self.derive(p, group.to_string(), t)
    }

    pub fn trainable(&mut self, trainable: bool) -> Scope<'_, T> {
        let (p, g) = (self.path.clone(), self.group.clone());
        self.derive(p, g, trainable)
    }

    fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        };
        self.store.add(full, &self.group, value, self.trainable)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..=bound)));
        self.register(name, t)
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::ones(shape.to_vec()))
    }
}

/// Forward-pass context: a fresh tape plus lazily bound parameter leaves.
pub struct Fx<'s, T> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    track: bool,
    seed: u64,
    step: u64,
    trace: Option<Vec<&'static str>>,
}

impl<'s, T: Real> Fx<'s, T> {
    /// Training mode: dropout active, gradients tracked for trainable params.
    pub fn train(store: &'s ParamStore<T>, seed: u64, step: u64) -> Self {
        Self::with_mode(store, true, true, seed, step)
    }

    /// Inference: dropout off, nothing tracked.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, false, false, 0, 0)
    }

    /// Dropout off but gradients tracked, for derivative checks.
    pub fn deterministic(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, false, true, 0, 0)
    }

    fn with_mode(store: &'s ParamStore<T>, train: bool, track: bool, seed: u64, step: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
            track,
            seed,
            step,
            trace: None,
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[&'static str]> {
        self.trace.as_deref()
    }

    pub fn record(&mut self, layer: &'static str) {
        if let Some(t) = &mut self.trace {
            t.push(layer);
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf(e.value.clone(), self.track && e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var, p: f64, layer: &str) -> Result<Var> {
        let rng = CounterRng::new(self.seed, layer_id(layer), self.step);
        self.tape.dropout(x, p, self.train, rng)
    }

    /// Gradients indexed by parameter id, ready for [`ParamStore::apply`].
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut s = s.child(name);
        let w = s.xavier("w", &[fan_in, fan_out], fan_in, fan_out)?;
        let b = s.zeros("b", &[fan_out])?;
        Ok(Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        let b = self.b.map(|b| fx.param(b));
        fx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, width: usize) -> Result<Self> {
        let mut s = s.child(name);
        Ok(Self {
            gain: s.ones("gain", &[width])?,
            bias: s.zeros("bias", &[width])?,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var) -> Result<Var> {
        let g = fx.param(self.gain);
        let b = fx.param(self.bias);
        fx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, count: usize, dim: usize) -> Result<Self> {
        let bound = (3.0 / dim as f64).sqrt();
        let table = s.child(name).uniform("table", &[count, dim], bound)?;
        Ok(Self { table, dim })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = fx.param(self.table);
        fx.tape.embedding(t, ids, shape)
    }
}

/// Convolution with `[k, k, Cin, Cout]` weights.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        s: &mut Scope<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let mut s = s.child(name);
        let fan = kernel * kernel;
        let w = s.xavier("w", &[kernel, kernel, cin, cout], fan * cin, fan * cout)?;
        let b = s.zeros("b", &[cout])?;
        Ok(Self {
            w,
            b,
            kernel,
            stride,
            padding,
            cin,
            cout,
        })
    }

    pub fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var) -> Result<Var> {
        let w = fx.param(self.w);
        self.forward_with_weights(fx, x, w)
    }

    /// Same convolution with substitute weights (used by Conv1E).
    pub fn forward_with_weights<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var, w: Var) -> Result<Var> {
        let b = fx.param(self.b);
        fx.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Multi-head scaled dot-product attention with q/k/v/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

pub struct AttentionOutput {
    /// Per-head context, re-merged to `[B, Tq, d]`, before the output projection.
    pub context: Var,
    /// `[B, heads, Tq, Tk]`.
    pub weights: Var,
}

impl Attention {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let mut s = s.child(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", d, d)?,
            k: Linear::new(&mut s, "k", d, d)?,
            v: Linear::new(&mut s, "v", d, d)?,
            o: Linear::new(&mut s, "o", d, d)?,
            heads,
            d,
        })
    }

    fn split_heads<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var, perm: &[usize]) -> Result<Var> {
        let s = fx.tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let r = fx.tape.reshape(x, &[b, t, self.heads, self.d / self.heads])?;
        fx.tape.permute(r, perm)
    }

    /// `mask`, when given, is added to the `[Tq, Tk]` scores before softmax.
    pub fn attend<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        q_src: Var,
        kv_src: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let sq = fx.tape.shape(q_src).to_vec();
        let sk = fx.tape.shape(kv_src).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.d || sk[2] != self.d {
            return Err(Error::shape(
                "attention",
                format!("query {sq:?} and key/value {sk:?} must be [B, T, {}]", self.d),
            ));
        }
        let q = self.q.forward(fx, q_src)?;
        let k = self.k.forward(fx, kv_src)?;
        let v = self.v.forward(fx, kv_src)?;
        let qh = self.split_heads(fx, q, &[0, 2, 1, 3])?;
        let kt = self.split_heads(fx, k, &[0, 2, 3, 1])?;
        let vh = self.split_heads(fx, v, &[0, 2, 1, 3])?;
        let scores = fx.tape.matmul(qh, kt)?;
        let mut scores = fx.tape.scale(scores, 1.0 / ((self.d / self.heads) as f64).sqrt());
        if let Some(m) = mask {
            scores = fx.tape.add(scores, m)?;
        }
        let weights = fx.tape.softmax_lastaxis(scores);
        let ctx = fx.tape.matmul(weights, vh)?;
        let ctx = fx.tape.permute(ctx, &[0, 2, 1, 3])?;
        let context = fx.tape.reshape(ctx, &[sq[0], sq[1], self.d])?;
        Ok(AttentionOutput { context, weights })
    }

    pub fn forward<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        q_src: Var,
        kv_src: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let out = self.attend(fx, q_src, kv_src, mask)?;
        self.o.forward(fx, out.context)
    }
}

/// `[T, T]` additive mask: 0 on and below the diagonal, -1e9 above.
pub fn causal_mask<T: Real>(t: usize) -> Tensor<T> {
    Tensor::from_fn(vec![t, t], |i| {
        if i % t > i / t {
            T::of(-1e9)
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with<F: FnOnce(&mut Scope<'_, f64>) -> R, R>(f: F) -> (ParamStore<f64>, R) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = f(&mut Scope::root(&mut store, &mut rng));
        (store, r)
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let (store, lin) = store_with(|s| Linear::new(s, "lin", 30, 20).unwrap());
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(store.value(lin.w).max_abs() <= bound);
        assert_eq!(store.value(lin.b.unwrap()).max_abs(), 0.0);
        assert_eq!(store.entry(lin.w).name, "lin.w");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a".into(), "g", Tensor::zeros(vec![1]), true).unwrap();
        assert!(store.add("a".into(), "g", Tensor::zeros(vec![1]), true).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Scope::root(&mut store, &mut rng);
        assert!(matches!(Attention::new(&mut s, "a", 10, 3), Err(Error::Config(_))));
    }

    #[test]
    fn single_key_attention_returns_its_value() {
        let (store, att) = store_with(|s| Attention::new(s, "att", 8, 2).unwrap());
        let mut fx = Fx::eval(&store);
        let q = fx.input(Tensor::from_fn(vec![1, 3, 8], |i| (i as f64 * 0.3).sin()));
        let kv = fx.input(Tensor::from_fn(vec![1, 1, 8], |i| (i as f64 * 0.7).cos()));
        let out = att.attend(&mut fx, q, kv, None).unwrap();
        let v = att.v.forward(&mut fx, kv).unwrap();
        let ctx = fx.tape.value(out.context).data().to_vec();
        let vv = fx.tape.value(v).data().to_vec();
        for row in ctx.chunks(8) {
            for (a, b) in row.iter().zip(&vv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask::<f32>(3);
        assert_eq!(m.data()[1], -1e9);
        assert_eq!(m.data()[3], 0.0);
        assert_eq!(m.data()[8], 0.0);
    }
}

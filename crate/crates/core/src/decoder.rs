//! Word-level vocabulary, the autoregressive caption decoder, and greedy decoding.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, Attention, Embedding, Fx, LayerNorm, Linear, ParamStore, Scope};
use crate::tensor::{Real, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace, with every ASCII punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "!" | "?" | ";" | ":")
}

/// Joins tokens with spaces, attaching trailing punctuation to the previous word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !attaches_left(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    /// Tokens seen at least `min_count` times, sorted, after the four specials.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for t in tokenize(c.as_ref()) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let content: Vec<String> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_count)
            .map(|(t, _)| t)
            .collect();
        if content.is_empty() {
            return Err(Error::Data("empty content vocabulary".into()));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// `BOS, tokens..., EOS`.
    pub fn encode_framed(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Content tokens up to the first EOS, specials dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::format(origin, "vocabulary must start with the four special tokens"));
        }
        let v = Self::from_tokens(tokens);
        if v.ids.len() != v.tokens.len() {
            return Err(Error::format(origin, "duplicate vocabulary entry"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 128,
            ff: 256,
            max_len: 64,
            dropout: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layers == 0 || self.max_len == 0 || self.ff == 0 {
            return Err(Error::Config("decoder layers, ff and max_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: LayerNorm,
    name: String,
}

impl DecoderLayer {
    fn new<T: Real>(s: &mut Scope<'_, T>, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let mut s = s.child(name);
        let d = cfg.d_model;
        Ok(Self {
            self_attn: Attention::new(&mut s, "self_attn", d, cfg.heads)?,
            norm1: LayerNorm::new(&mut s, "norm1", d)?,
            cross_attn: Attention::new(&mut s, "cross_attn", d, cfg.heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", d)?,
            ff1: Linear::new(&mut s, "ff1", d, cfg.ff)?,
            ff2: Linear::new(&mut s, "ff2", cfg.ff, d)?,
            norm3: LayerNorm::new(&mut s, "norm3", d)?,
            name: name.to_string(),
        })
    }

    fn sublayer<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        x: Var,
        y: Var,
        norm: &LayerNorm,
        p: f64,
        tag: &str,
    ) -> Result<Var> {
        let y = fx.dropout(y, p, &format!("decoder.{}.{tag}", self.name))?;
        let r = fx.tape.add(x, y)?;
        norm.forward(fx, r)
    }

    fn forward<T: Real>(&self, fx: &mut Fx<'_, T>, x: Var, memory: Var, mask: Var, p: f64) -> Result<Var> {
        let sa = self.self_attn.forward(fx, x, x, Some(mask))?;
        let x = self.sublayer(fx, x, sa, &self.norm1, p, "self")?;
        let ca = self.cross_attn.forward(fx, x, memory, None)?;
        let x = self.sublayer(fx, x, ca, &self.norm2, p, "cross")?;
        let h = self.ff1.forward(fx, x)?;
        let h = fx.tape.relu(h);
        let h = self.ff2.forward(fx, h)?;
        self.sublayer(fx, x, h, &self.norm3, p, "ff")
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub tok: Embedding,
    pub pos: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub out: Linear,
}

impl Decoder {
    pub fn new<T: Real>(s: &mut Scope<'_, T>, config: DecoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut s = s.child("decoder");
        let mut s = s.group("decoder");
        let d = config.d_model;
        let tok = Embedding::new(&mut s, "tok", vocab_size, d)?;
        let pos = Embedding::new(&mut s, "pos", config.max_len, d)?;
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("layer{i}"), &config))
            .collect::<Result<_>>()?;
        let out = Linear::new(&mut s, "out", d, vocab_size)?;
        Ok(Self {
            config,
            vocab_size,
            tok,
            pos,
            layers,
            out,
        })
    }

    /// Teacher-forced logits `[B, T, V]` for row-major `tokens` of shape `[B, T]`.
    pub fn forward<T: Real>(
        &self,
        fx: &mut Fx<'_, T>,
        tokens: &[usize],
        batch: usize,
        memory: Var,
    ) -> Result<Var> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::shape(
                "decoder",
                format!("{} tokens do not form {batch} rows", tokens.len()),
            ));
        }
        let t = tokens.len() / batch;
        if t > self.config.max_len {
            return Err(Error::shape(
                "decoder",
                format!("sequence length {t} exceeds max_len {}", self.config.max_len),
            ));
        }
        let p = self.config.dropout;
        let tok = self.tok.forward(fx, tokens, &[batch, t])?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = self.pos.forward(fx, &positions, &[t])?;
        let x = fx.tape.add(tok, pos)?;
        let mut x = fx.dropout(x, p, "decoder.embed")?;
        let mask = fx.input(causal_mask(t));
        for layer in &self.layers {
            x = layer.forward(fx, x, memory, mask, p)?;
        }
        self.out.forward(fx, x)
    }

    /// Greedy decoding from BOS for every memory row; returns content token
    /// ids per sample (EOS and later dropped).
    pub fn greedy_decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        memory: &Tensor<T>,
    ) -> Result<Vec<Vec<usize>>> {
        let batch = memory.shape()[0];
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; batch];
        let mut done = vec![false; batch];
        let v = self.vocab_size;
        while seqs[0].len() < self.config.max_len && done.iter().any(|d| !d) {
            let t = seqs[0].len();
            let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
            let mut fx = Fx::eval(store);
            let mem = fx.input(memory.clone());
            let logits = self.forward(&mut fx, &flat, batch, mem)?;
            let lv = fx.tape.value(logits).data();
            for (b, seq) in seqs.iter_mut().enumerate() {
                let row = &lv[(b * t + t - 1) * v..(b * t + t) * v];
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                let next = if done[b] { PAD } else { best };
                if next == EOS {
                    done[b] = true;
                }
                seq.push(next);
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s[1..].iter().copied().take_while(|&i| i != EOS && i != PAD).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_from_one_caption() {
        let v = Vocabulary::build(&["A red box."], 1).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(&v.tokens()[4..], &[".", "a", "box", "red"]);
        assert!(matches!(Vocabulary::build(&["a b"], 5), Err(Error::Data(m)) if m.contains("empty content")));
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn tokenization_is_uncased_and_splits_punctuation() {
        assert_eq!(tokenize("A RED box."), tokenize("a red box."));
        assert_eq!(tokenize("box, left."), ["box", ",", "left", "."]);
        assert!(tokenize("<pad>").iter().all(|t| !SPECIALS.contains(&t.as_str())));
    }

    #[test]
    fn detokenize_round_trip() {
        let s = "a red box is on the left. it is near, too!";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(&["the cat sat ."], 1).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text(), "mem").unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n", "mem").is_err());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build(&["a b"], 1).unwrap();
        assert_eq!(v.encode_framed("a zebra"), vec![BOS, v.id("a"), UNK, EOS]);
        assert_eq!(v.decode(&[v.id("a"), UNK, EOS, v.id("b")]), "a");
    }

    mod props {
        use super::*;
        use crate::tensor::Tape;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        const V: usize = 12;

        fn setup(seed: u64) -> (ParamStore<f64>, Decoder, Tensor<f64>) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = DecoderConfig {
                layers: 2,
                heads: 2,
                d_model: 8,
                ff: 16,
                max_len: 8,
                dropout: 0.1,
            };
            let dec = Decoder::new(&mut Scope::root(&mut store, &mut rng), cfg, V).unwrap();
            let memory = Tensor::from_fn(vec![3, 4, 8], |_| rng.gen_range(-1.0..1.0));
            (store, dec, memory)
        }

        fn logits(store: &ParamStore<f64>, dec: &Decoder, memory: &Tensor<f64>, tokens: &[usize], batch: usize) -> Tensor<f64> {
            let mut fx = Fx::eval(store);
            let m = fx.input(memory.clone());
            let y = dec.forward(&mut fx, tokens, batch, m).unwrap();
            fx.tape.value(y).clone()
        }

        fn row(t: &Tensor<f64>, b: usize) -> Tensor<f64> {
            let n = t.numel() / t.shape()[0];
            Tensor::new(vec![1, t.shape()[1], t.shape()[2]], t.data()[b * n..(b + 1) * n].to_vec()).unwrap()
        }

        fn words() -> impl Strategy<Value = Vec<String>> {
            let word = prop::sample::select(vec!["a", "red", "box", "is", "nearer", "than", "the", "cat"]);
            let punct = prop::sample::select(vec![".", ",", "?"]);
            prop::collection::vec((word, prop::option::of(punct)), 1..8).prop_map(|v| {
                v.into_iter()
                    .flat_map(|(w, p)| std::iter::once(w.to_string()).chain(p.map(str::to_string)))
                    .collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn later_tokens_never_reach_earlier_logits(seed in any::<u64>(), j in 0usize..8, new in 4usize..V) {
                let (store, dec, memory) = setup(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
                let tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(4..V)).collect();
                prop_assume!(tokens[j] != new);
                let mut changed = tokens.clone();
                changed[j] = new;
                let mem = row(&memory, 0);
                let (a, b) = (logits(&store, &dec, &mem, &tokens, 1), logits(&store, &dec, &mem, &changed, 1));
                for i in 0..8 {
                    let d = (0..V).map(|v| (a.data()[i * V + v] - b.data()[i * V + v]).abs()).fold(0.0, f64::max);
                    if i < j {
                        prop_assert!(d < 1e-12, "position {i} moved by {d} when token {j} changed");
                    } else if i == j {
                        prop_assert!(d > 0.0);
                    }
                }
            }

            #[test]
            fn batch_loss_is_the_token_weighted_mean(seed in any::<u64>(), lens in prop::collection::vec(1usize..=6, 3)) {
                let (store, dec, memory) = setup(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
                let t = 6;
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for &l in &lens {
                    let content: Vec<usize> = (0..l - 1).map(|_| rng.gen_range(4..V)).collect();
                    let mut i = vec![BOS];
                    i.extend(&content);
                    let mut o = content;
                    o.push(EOS);
                    i.resize(t, PAD);
                    o.resize(t, PAD);
                    inputs.push(i);
                    targets.push(o);
                }
                let loss = |mem: &Tensor<f64>, inp: &[usize], tgt: &[usize], b: usize| {
                    let lg = logits(&store, &dec, mem, inp, b);
                    let mut tape = Tape::new();
                    let v = tape.constant(lg);
                    let l = tape.cross_entropy(v, tgt, PAD).unwrap();
                    tape.value(l).item()
                };
                let batch = loss(&memory, &inputs.concat(), &targets.concat(), 3);
                let weighted: f64 = (0..3)
                    .map(|b| loss(&row(&memory, b), &inputs[b], &targets[b], 1) * lens[b] as f64)
                    .sum::<f64>()
                    / lens.iter().sum::<usize>() as f64;
                prop_assert!((batch - weighted).abs() < 1e-10, "{batch} vs {weighted}");
            }

            #[test]
            fn canonical_captions_round_trip(tokens in words()) {
                let text = detokenize(&tokens);
                prop_assert_eq!(&tokenize(&text), &tokens);
                prop_assert_eq!(detokenize(&tokenize(&text)), text);
            }
        }
    }
}

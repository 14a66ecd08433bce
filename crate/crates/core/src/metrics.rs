//! Caption metrics over tokenized hypothesis/reference pairs: corpus BLEU,
//! ROUGE-N, ROUGE-L, exact-match METEOR, and CIDEr.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::decoder::tokenize;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Data("an evaluation pair needs at least one reference".into()));
        }
        Ok(Self {
            hypothesis,
            references,
        })
    }

    /// Tokenizes raw caption text.
    pub fn from_text<S: AsRef<str>>(hypothesis: &str, references: &[S]) -> Result<Self> {
        Self::new(
            tokenize(hypothesis),
            references.iter().map(|r| tokenize(r.as_ref())).collect(),
        )
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn clipped_matches(hyp: &Counts<'_>, reference: &Counts<'_>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU-n (×100), no smoothing.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    if hyp_len == 0 {
        warn!("BLEU over an empty hypothesis corpus is 0");
        return Ok(0.0);
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut ref_len = 0usize;
    for p in pairs {
        let c = p.hypothesis.len();
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let h = ngrams(&p.hypothesis, k);
            let mut max_ref: Counts<'_> = BTreeMap::new();
            for r in &p.references {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matched[k - 1] += clipped_matches(&h, &max_ref);
            total[k - 1] += p.hypothesis.len().saturating_sub(k - 1);
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_mean.exp())
}

/// How a pair's score is reduced over multiple references.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefAggregate {
    #[default]
    Max,
    Mean,
}

impl RefAggregate {
    fn reduce(self, scores: &[f64]) -> f64 {
        match self {
            RefAggregate::Max => scores.iter().copied().fold(0.0, f64::max),
            RefAggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }
}

/// ROUGE-N recall (×100), references reduced with `agg`, averaged over pairs.
pub fn rouge_n(pairs: &[EvalPair], n: usize, agg: RefAggregate) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Config(format!("ROUGE order {n} outside 1..=2")));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        let h = ngrams(&p.hypothesis, n);
        let scores: Vec<f64> = p
            .references
            .iter()
            .filter(|r| r.len() >= n)
            .map(|r| {
                let rc = ngrams(r, n);
                let total: usize = rc.values().sum();
                clipped_matches(&h, &rc) as f64 / total as f64
            })
            .collect();
        if scores.is_empty() {
            warn!("ROUGE-{n}: every reference of pair {i} is shorter than {n} tokens; skipped");
            continue;
        }
        sum += agg.reduce(&scores);
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { 100.0 * sum / counted as f64 })
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (×100).
pub fn rouge_l(pairs: &[EvalPair], beta: f64, agg: RefAggregate) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::Config(format!("ROUGE-L beta must be > 0, got {beta}")));
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            if p.hypothesis.is_empty() {
                return 0.0;
            }
            let scores: Vec<f64> = p
                .references
                .iter()
                .map(|r| {
                    let l = lcs_len(&p.hypothesis, r) as f64;
                    if l == 0.0 {
                        return 0.0;
                    }
                    let prec = l / p.hypothesis.len() as f64;
                    let rec = l / r.len() as f64;
                    (1.0 + b2) * prec * rec / (rec + b2 * prec)
                })
                .collect();
            agg.reduce(&scores)
        })
        .sum();
    Ok(100.0 * sum / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

/// Past this many memoized states the alignment search falls back to a
/// greedy left-to-right alignment (same match count, possibly more chunks).
const ALIGN_STATE_BUDGET: usize = 1 << 20;

struct Aligner<'a> {
    hyp: &'a [String],
    /// Candidate reference positions per hypothesis token.
    cands: Vec<Vec<usize>>,
    memo: BTreeMap<(usize, Vec<u64>, usize), (usize, usize)>,
    exhausted: bool,
}

impl Aligner<'_> {
    /// Best `(matches, chunks)` for tokens `i..`: most matches, then fewest chunks.
    /// `prev` is the reference position aligned to token `i-1`, or `usize::MAX`.
    fn best(&mut self, i: usize, used: &mut Vec<u64>, prev: usize) -> (usize, usize) {
        if i == self.hyp.len() {
            return (0, 0);
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        if self.memo.len() >= ALIGN_STATE_BUDGET {
            self.exhausted = true;
        }
        let mut best: Option<(usize, usize)> = None;
        let better = |cand: (usize, usize), cur: Option<(usize, usize)>| match cur {
            None => true,
            Some(c) => cand.0 > c.0 || (cand.0 == c.0 && cand.1 < c.1),
        };
        let cands = self.cands[i].clone();
        for j in cands {
            let (w, bit) = (j / 64, 1u64 << (j % 64));
            if used[w] & bit != 0 {
                continue;
            }
            used[w] |= bit;
            let (m, c) = self.best(i + 1, used, j);
            used[w] &= !bit;
            let new_chunk = usize::from(prev == usize::MAX || j != prev + 1);
            let cand = (m + 1, c + new_chunk);
            if better(cand, best) {
                best = Some(cand);
            }
            if self.exhausted {
                break;
            }
        }
        let skip = self.best(i + 1, used, usize::MAX);
        if better(skip, best) {
            best = Some(skip);
        }
        let best = best.expect("skip is always available");
        if !self.exhausted {
            self.memo.insert(key, best);
        }
        best
    }
}

/// Exact-match alignment of `hyp` against `reference`: maximum matches, then
/// minimum chunks. Returns `(matches, chunks)`.
pub fn align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, r) in reference.iter().enumerate() {
        positions.entry(r.as_str()).or_default().push(j);
    }
    let cands: Vec<Vec<usize>> = hyp
        .iter()
        .map(|h| positions.get(h.as_str()).cloned().unwrap_or_default())
        .collect();
    let mut aligner = Aligner {
        hyp,
        cands: cands.clone(),
        memo: BTreeMap::new(),
        exhausted: false,
    };
    let mut used = vec![0u64; reference.len().div_ceil(64).max(1)];
    let result = aligner.best(0, &mut used, usize::MAX);
    if !aligner.exhausted {
        return result;
    }
    warn!("METEOR alignment search exceeded its budget; using a greedy alignment");
    greedy_align(&cands, reference.len())
}

fn greedy_align(cands: &[Vec<usize>], ref_len: usize) -> (usize, usize) {
    let mut used = vec![false; ref_len];
    let (mut matches, mut chunks, mut prev) = (0, 0, usize::MAX);
    for c in cands {
        let pick = c
            .iter()
            .copied()
            .find(|&j| prev != usize::MAX && j == prev + 1 && !used[j])
            .or_else(|| c.iter().copied().find(|&j| !used[j]));
        match pick {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if prev == usize::MAX || j != prev + 1 {
                    chunks += 1;
                }
                prev = j;
            }
            None => prev = usize::MAX,
        }
    }
    (matches, chunks)
}

pub fn meteor_pair(hyp: &[String], reference: &[String], p: MeteorParams) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let prec = m as f64 / hyp.len() as f64;
    let rec = m as f64 / reference.len() as f64;
    let fmean = prec * rec / (p.alpha * prec + (1.0 - p.alpha) * rec);
    let penalty = p.gamma * (chunks as f64 / m as f64).powf(p.beta);
    fmean * (1.0 - penalty)
}

/// Simplified (exact-match only) METEOR (×100).
pub fn meteor_simplified(pairs: &[EvalPair], params: MeteorParams, agg: RefAggregate) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            let s: Vec<f64> = p
                .references
                .iter()
                .map(|r| meteor_pair(&p.hypothesis, r, params))
                .collect();
            agg.reduce(&s)
        })
        .sum();
    100.0 * sum / pairs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderParams {
    pub n_max: usize,
    pub sigma: f64,
}

impl Default for CiderParams {
    fn default() -> Self {
        Self {
            n_max: 4,
            sigma: 6.0,
        }
    }
}

fn tfidf<'a>(counts: &Counts<'a>, idf: &BTreeMap<&'a [String], f64>, n_docs: f64) -> BTreeMap<&'a [String], f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(g, &c)| {
            let w = idf.get(g).copied().unwrap_or_else(|| n_docs.ln());
            (*g, c as f64 / total as f64 * w)
        })
        .collect()
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr on the 0–10 scale: mean over n-gram orders and references of the
/// length-penalized TF-IDF cosine, times 10. Document frequency counts each
/// image once, from its references only; idf = ln(N / (1 + df)).
pub fn cider(pairs: &[EvalPair], params: CiderParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("CIDEr needs a non-empty corpus".into()));
    }
    let n_docs = pairs.len() as f64;
    let mut total = 0.0;
    for n in 1..=params.n_max {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for p in pairs {
            let seen: BTreeSet<&[String]> = p
                .references
                .iter()
                .flat_map(|r| ngrams(r, n).into_keys())
                .collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf: BTreeMap<&[String], f64> = df
            .into_iter()
            .map(|(g, d)| (g, (n_docs / (1.0 + d as f64)).ln()))
            .collect();
        for p in pairs {
            let hv = tfidf(&ngrams(&p.hypothesis, n), &idf, n_docs);
            let sims: f64 = p
                .references
                .iter()
                .map(|r| {
                    let rv = tfidf(&ngrams(r, n), &idf, n_docs);
                    let delta = p.hypothesis.len() as f64 - r.len() as f64;
                    cosine(&hv, &rv) * (-delta * delta / (2.0 * params.sigma * params.sigma)).exp()
                })
                .sum();
            total += sims / p.references.len() as f64;
        }
    }
    Ok(10.0 * total / (n_docs * params.n_max as f64))
}

/// The seven scores of one evaluation run, all on the reporting scale
/// (BLEU/ROUGE/METEOR in [0, 100], CIDEr in [0, 1000]).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub b1: f64,
    pub b4: f64,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub meteor: f64,
    pub cider: f64,
}

pub const REPORT_HEADER: &str = "b1,b4,r1,r2,rl,meteor,cider";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub rouge_beta: f64,
    pub aggregate: RefAggregate,
    pub meteor: MeteorParams,
    pub cider: CiderParams,
}

impl MetricOptions {
    pub fn standard() -> Self {
        Self {
            rouge_beta: 1.2,
            aggregate: RefAggregate::Max,
            meteor: MeteorParams::default(),
            cider: CiderParams::default(),
        }
    }
}

impl MetricReport {
    pub fn compute(pairs: &[EvalPair], opts: &MetricOptions) -> Result<Self> {
        Ok(Self {
            b1: bleu(pairs, 1)?,
            b4: bleu(pairs, 4)?,
            r1: rouge_n(pairs, 1, opts.aggregate)?,
            r2: rouge_n(pairs, 2, opts.aggregate)?,
            rl: rouge_l(pairs, opts.rouge_beta, opts.aggregate)?,
            meteor: meteor_simplified(pairs, opts.meteor, opts.aggregate),
            cider: 100.0 * cider(pairs, opts.cider)?,
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [self.b1, self.b4, self.r1, self.r2, self.rl, self.meteor, self.cider]
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{REPORT_HEADER}")?;
        write!(f, "{}", self.csv_row())
    }
}

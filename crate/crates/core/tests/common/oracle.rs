//! Brute-force reference implementations of the caption metrics. Written
//! for obviousness, not speed: n-grams are compared by linear scan, LCS is
//! found by enumerating hypothesis subsequences, and METEOR alignments are
//! enumerated exhaustively.

pub type Sent = Vec<String>;

pub struct Pair {
    pub hyp: Sent,
    pub refs: Vec<Sent>,
}

fn grams(s: &[String], n: usize) -> Vec<&[String]> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

fn count(list: &[&[String]], g: &[String]) -> usize {
    list.iter().filter(|x| **x == g).count()
}

fn distinct<'a>(list: &[&'a [String]]) -> Vec<&'a [String]> {
    let mut out: Vec<&[String]> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g);
        }
    }
    out
}

fn clipped(h: &[&[String]], r: &[&[String]]) -> usize {
    distinct(h).iter().map(|g| count(h, g).min(count(r, g))).sum()
}

pub fn bleu(pairs: &[Pair], n: usize) -> f64 {
    let c: usize = pairs.iter().map(|p| p.hyp.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut r = 0usize;
    for p in pairs {
        let mut best = usize::MAX;
        let mut best_diff = usize::MAX;
        for x in &p.refs {
            let d = x.len().abs_diff(p.hyp.len());
            if d < best_diff || (d == best_diff && x.len() < best) {
                best = x.len();
                best_diff = d;
            }
        }
        r += best;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut m = 0usize;
        let mut t = 0usize;
        for p in pairs {
            let h = grams(&p.hyp, k);
            t += h.len();
            for g in distinct(&h) {
                let best_ref = p.refs.iter().map(|x| count(&grams(x, k), g)).max().unwrap_or(0);
                m += count(&h, g).min(best_ref);
            }
        }
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (log_sum / n as f64).exp()
}

pub fn rouge_n(pairs: &[Pair], n: usize) -> f64 {
    let mut scores = Vec::new();
    for p in pairs {
        let h = grams(&p.hyp, n);
        let per: Vec<f64> = p
            .refs
            .iter()
            .filter(|x| x.len() >= n)
            .map(|x| {
                let rg = grams(x, n);
                clipped(&h, &rg) as f64 / rg.len() as f64
            })
            .collect();
        if !per.is_empty() {
            scores.push(per.into_iter().fold(0.0, f64::max));
        }
    }
    if scores.is_empty() {
        0.0
    } else {
        100.0 * scores.iter().sum::<f64>() / scores.len() as f64
    }
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// Longest common subsequence by trying every subset of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "exhaustive LCS is exponential");
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn rouge_l(pairs: &[Pair], beta: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let b2 = beta * beta;
    let total: f64 = pairs
        .iter()
        .map(|p| {
            if p.hyp.is_empty() {
                return 0.0;
            }
            p.refs
                .iter()
                .map(|x| {
                    let l = lcs(&p.hyp, x) as f64;
                    if l == 0.0 {
                        return 0.0;
                    }
                    let (pr, rc) = (l / p.hyp.len() as f64, l / x.len() as f64);
                    (1.0 + b2) * pr * rc / (rc + b2 * pr)
                })
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / pairs.len() as f64
}

/// Chunks of an alignment given as `map[i] = Some(j)`: a new chunk starts at
/// every matched token whose predecessor is not matched to `j - 1`.
fn chunks(map: &[Option<usize>]) -> usize {
    (0..map.len())
        .filter(|&i| match map[i] {
            None => false,
            Some(j) => i == 0 || j == 0 || map[i - 1] != Some(j - 1),
        })
        .count()
}

/// Every injective exact-match alignment; best is most matches, then fewest chunks.
pub fn best_alignment(hyp: &[String], reference: &[String]) -> (usize, usize) {
    fn go(i: usize, h: &[String], r: &[String], used: &mut Vec<bool>, map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
        if i == h.len() {
            let m = map.iter().flatten().count();
            let c = chunks(map);
            if m > best.0 || (m == best.0 && c < best.1) {
                *best = (m, c);
            }
            return;
        }
        map.push(None);
        go(i + 1, h, r, used, map, best);
        map.pop();
        for j in 0..r.len() {
            if !used[j] && r[j] == h[i] {
                used[j] = true;
                map.push(Some(j));
                go(i + 1, h, r, used, map, best);
                map.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(0, hyp, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor(pairs: &[Pair]) -> f64 {
    let (alpha, beta, gamma) = (0.9, 3.0, 0.5);
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            p.refs
                .iter()
                .map(|x| {
                    let (m, c) = best_alignment(&p.hyp, x);
                    if m == 0 {
                        return 0.0;
                    }
                    let (pr, rc) = (m as f64 / p.hyp.len() as f64, m as f64 / x.len() as f64);
                    let f = pr * rc / (alpha * pr + (1.0 - alpha) * rc);
                    f * (1.0 - gamma * (c as f64 / m as f64).powf(beta))
                })
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / pairs.len() as f64
}

type Vector<'a> = Vec<(&'a [String], f64)>;

fn tfidf<'a>(s: &'a [String], n: usize, corpus: &[Pair], scale: f64) -> Vector<'a> {
    let g = grams(s, n);
    let docs = corpus.len() as f64;
    distinct(&g)
        .into_iter()
        .map(|x| {
            let df = corpus
                .iter()
                .filter(|p| p.refs.iter().any(|r| grams(r, n).contains(&x)))
                .count();
            let tf = count(&g, x) as f64 / g.len() as f64;
            (x, scale * tf * (docs / (1.0 + df as f64)).ln())
        })
        .collect()
}

fn cosine(a: &Vector<'_>, b: &Vector<'_>) -> f64 {
    let dot: f64 = a
        .iter()
        .map(|(g, x)| b.iter().filter(|(h, _)| h == g).map(|(_, y)| x * y).sum::<f64>())
        .sum();
    let na = a.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr on the 0 to 10 scale. `scale` multiplies every TF-IDF vector.
pub fn cider_scaled(pairs: &[Pair], sigma: f64, scale: f64) -> f64 {
    let n_max = 4;
    let mut total = 0.0;
    for p in pairs {
        for n in 1..=n_max {
            let hv = tfidf(&p.hyp, n, pairs, scale);
            let sims: f64 = p
                .refs
                .iter()
                .map(|r| {
                    let rv = tfidf(r, n, pairs, scale);
                    let d = p.hyp.len() as f64 - r.len() as f64;
                    cosine(&hv, &rv) * (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            total += sims / p.refs.len() as f64;
        }
    }
    10.0 * total / (pairs.len() * n_max) as f64
}

pub fn cider(pairs: &[Pair], sigma: f64) -> f64 {
    cider_scaled(pairs, sigma, 1.0)
}

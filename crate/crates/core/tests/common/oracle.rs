//! Brute-force reference implementations of the metrics. Everything is
//! computed by direct enumeration over positions and lists (no hashing, no
//! dynamic programming) so it shares no code or shortcuts with the library.

pub type Tok = u8;

pub fn ngrams(seq: &[Tok], n: usize) -> Vec<Vec<Tok>> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut i = 0;
    while i + n <= seq.len() {
        out.push(seq[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<Tok>], g: &[Tok]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<Tok>]) -> Vec<Vec<Tok>> {
    let mut out: Vec<Vec<Tok>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(cand: &[Tok], refs: &[Vec<Tok>], max_n: usize, smooth: bool) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=max_n {
        let cg = ngrams(cand, n);
        let mut clipped = 0usize;
        for g in distinct(&cg) {
            let best = refs.iter().map(|r| count(&ngrams(r, n), &g)).max().unwrap_or(0);
            clipped += count(&cg, &g).min(best);
        }
        let (num, den) = if smooth && n > 1 {
            (clipped as f64 + 1.0, cg.len() as f64 + 1.0)
        } else {
            (clipped as f64, cg.len() as f64)
        };
        if num == 0.0 || den == 0.0 {
            return 0.0;
        }
        product *= num / den;
    }
    // closest reference length, the shorter one on ties
    let c = cand.len() as i64;
    let mut r = refs[0].len() as i64;
    for x in refs {
        let l = x.len() as i64;
        if (l - c).abs() < (r - c).abs() || ((l - c).abs() == (r - c).abs() && l < r) {
            r = l;
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / max_n as f64)
}

fn prf(overlap: f64, c: f64, r: f64) -> f64 {
    let p = if c > 0.0 { overlap / c } else { 0.0 };
    let rc = if r > 0.0 { overlap / r } else { 0.0 };
    if p + rc > 0.0 {
        2.0 * p * rc / (p + rc)
    } else {
        0.0
    }
}

pub fn rouge_n_f1(cand: &[Tok], reference: &[Tok], n: usize) -> f64 {
    let cg = ngrams(cand, n);
    let rg = ngrams(reference, n);
    let overlap: usize = distinct(&cg).iter().map(|g| count(&cg, g).min(count(&rg, g))).sum();
    prf(overlap as f64, cg.len() as f64, rg.len() as f64)
}

fn is_subsequence(sub: &[Tok], of: &[Tok]) -> bool {
    let mut j = 0;
    for x in of {
        if j < sub.len() && sub[j] == *x {
            j += 1;
        }
    }
    j == sub.len()
}

/// Longest common subsequence by enumerating every subset of `a`.
pub fn lcs(a: &[Tok], b: &[Tok]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<Tok> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l_f1(cand: &[Tok], reference: &[Tok]) -> f64 {
    prf(lcs(cand, reference) as f64, cand.len() as f64, reference.len() as f64)
}

fn pooled(corpus: &[Vec<Tok>], n: usize) -> Vec<Vec<Tok>> {
    corpus.iter().flat_map(|s| ngrams(s, n)).collect()
}

pub fn distinct_n(corpus: &[Vec<Tok>], n: usize) -> f64 {
    let all = pooled(corpus, n);
    if all.is_empty() {
        0.0
    } else {
        distinct(&all).len() as f64 / all.len() as f64
    }
}

pub fn unique_n(corpus: &[Vec<Tok>], n: usize) -> usize {
    let all = pooled(corpus, n);
    distinct(&all).iter().filter(|g| count(&all, g) == 1).count()
}

pub fn entropy(corpus: &[Vec<Tok>], n: usize) -> Option<f64> {
    let all = pooled(corpus, n);
    if all.is_empty() {
        return None;
    }
    let total = all.len() as f64;
    let mut h = 0.0;
    for g in distinct(&all) {
        let p = count(&all, &g) as f64 / total;
        h -= p * p.log2();
    }
    Some(h.max(0.0))
}

pub fn msttr(corpus: &[Vec<Tok>], seg: usize) -> Option<f64> {
    let stream: Vec<Tok> = corpus.concat();
    let k = stream.len() / seg;
    if k == 0 {
        return None;
    }
    let mut sum = 0.0;
    for s in 0..k {
        let part: Vec<Vec<Tok>> = stream[s * seg..(s + 1) * seg].iter().map(|&t| vec![t]).collect();
        sum += distinct(&part).len() as f64 / seg as f64;
    }
    Some(sum / k as f64)
}

pub fn coverage(concepts: &[Tok], cand: &[Tok]) -> f64 {
    let mut set: Vec<Tok> = Vec::new();
    for c in concepts {
        if !set.contains(c) {
            set.push(*c);
        }
    }
    if set.is_empty() {
        return 0.0;
    }
    set.iter().filter(|c| cand.contains(c)).count() as f64 / set.len() as f64
}

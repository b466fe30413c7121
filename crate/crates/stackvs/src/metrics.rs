//! Corpus caption metrics: BLEU-1..4, ROUGE-L, and CIDEr.
//!
//! CIDEr doubles as the reinforcement-learning reward, so it takes an IDF
//! table built once over the training references. No stemming is applied
//! anywhere; tokenization lowercases and strips ASCII punctuation.

use std::collections::HashMap;

use crate::{Error, Result};

/// ROUGE-L F-measure recall bias.
pub const ROUGE_BETA: f64 = 1.2;

/// Lowercase, strip ASCII punctuation to spaces, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped counts and the closest-reference brevity
/// penalty. Returns B-1..B-max_n; a zero n-gram precision zeroes the scores
/// from that order up (no smoothing).
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Data("bleu needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Data("every candidate needs at least one reference".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        // Closest reference length; ties go to the shorter reference.
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (g, &c) in &cand_counts {
                let clip = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += c.min(clip);
                total[n - 1] += c;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0)
    };
    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut log_sum = 0.0;
        let mut zero = false;
        for m in 0..n {
            if total[m] == 0 || matched[m] == 0 {
                zero = true;
                break;
            }
            log_sum += (matched[m] as f64 / total[m] as f64).ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / n as f64).exp() });
    }
    Ok(scores)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = [`ROUGE_BETA`]), maximum over the references.
/// An empty candidate scores 0.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>], beta: f64) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Data("rouge_l needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    for r in references {
        if r.is_empty() {
            return Err(Error::Data("empty reference caption".into()));
        }
        let lcs = lcs_len(candidate, r) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
        best = best.max(f);
    }
    Ok(best)
}

/// Document frequencies of 1..4-grams over a reference corpus grouped by
/// image. Unknown n-grams read as df = N (idf 0).
#[derive(Debug, Clone)]
pub struct IdfTable {
    df: HashMap<Ngram, usize>,
    n_images: usize,
}

pub const CIDER_MAX_N: usize = 4;

/// df(g) = number of images whose reference set contains g.
pub fn build_idf(reference_corpus: &[Vec<Vec<String>>]) -> Result<IdfTable> {
    if reference_corpus.is_empty() {
        return Err(Error::Data("idf corpus needs at least one image".into()));
    }
    let mut df: HashMap<Ngram, usize> = HashMap::new();
    for refs in reference_corpus {
        let mut seen: HashMap<Ngram, ()> = HashMap::new();
        for r in refs {
            for n in 1..=CIDER_MAX_N {
                for g in ngram_counts(r, n).into_keys() {
                    seen.entry(g).or_insert(());
                }
            }
        }
        for g in seen.into_keys() {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    Ok(IdfTable { df, n_images: reference_corpus.len() })
}

impl IdfTable {
    pub fn idf(&self, g: &Ngram) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(self.n_images);
        (self.n_images as f64 / df as f64).ln()
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }
}

fn tfidf_vector(tokens: &[String], n: usize, idf: &IdfTable) -> HashMap<Ngram, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let w = idf.idf(&g);
            (g, c as f64 * w)
        })
        .collect()
}

fn cosine(a: &HashMap<Ngram, f64>, b: &HashMap<Ngram, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: mean over n = 1..4 of the mean per-reference TF-IDF cosine,
/// scaled by 10. Returns per-candidate scores and their mean.
pub fn cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    idf: &IdfTable,
) -> Result<(Vec<f64>, f64)> {
    if candidates.is_empty() {
        return Err(Error::Data("cider needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Data("every candidate needs at least one reference".into()));
        }
        let mut acc = 0.0;
        for n in 1..=CIDER_MAX_N {
            let g_cand = tfidf_vector(cand, n, idf);
            let mut per_ref = 0.0;
            for r in refs {
                per_ref += cosine(&g_cand, &tfidf_vector(r, n, idf));
            }
            acc += per_ref / refs.len() as f64;
        }
        scores.push(10.0 * acc / CIDER_MAX_N as f64);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

//! Corpus evaluation metrics: BLEU-1, ROUGE-1, ROUGE-L, and exact-match
//! METEOR, macro-averaged per anatomical tag and scaled ×100 in reports.
//!
//! METEOR here aligns unigrams by exact match only, maximizing the match
//! count first and then minimizing the number of chunks, with the original
//! constants: `Fmean = 10PR / (R + 9P)`, `penalty = 0.5·(chunks/matches)³`,
//! `score = Fmean·(1 − penalty)`.

use crate::error::{Error, Result};
use crate::par;
use std::collections::HashMap;
use std::fmt::Write as _;

pub use crate::textpipe::rouge_l_sim as rouge_l;

/// One candidate/reference pair, already tokenized by the same
/// normalization as the dedup pipeline.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub tag: String,
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap(candidate: &[String], reference: &[String]) -> usize {
    let ref_counts = counts(reference);
    let cand_counts = counts(candidate);
    cand_counts
        .iter()
        .map(|(tok, c)| (*c).min(*ref_counts.get(tok).unwrap_or(&0)))
        .sum()
}

/// Clipped unigram precision times the brevity penalty
/// `min(1, e^{1 − |r|/|c|})`; zero for an empty candidate.
pub fn bleu1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let precision = clipped_overlap(candidate, reference) as f64 / candidate.len() as f64;
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    precision * bp
}

/// F1 over clipped unigram overlap.
pub fn rouge1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(candidate, reference) as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / candidate.len() as f64;
    let r = overlap / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Minimum chunk count over maximum exact-match alignments: a greedy
/// feasible alignment provides the starting bound, then branch-and-bound
/// over candidate positions (run-extending reference slot tried first)
/// tightens it. The search is exhaustive — hence exact — whenever it fits
/// the node budget, which covers any realistic sentence; adversarially
/// repetitive inputs keep the greedy bound.
fn min_chunks(candidate: &[String], reference: &[String], matches: usize) -> usize {
    const NODE_BUDGET: usize = 200_000;
    let ref_counts = counts(reference);
    let n = candidate.len();

    // optimistic suffix match counts against the full reference
    let mut suffix = vec![0usize; n + 1];
    let mut running: HashMap<&str, usize> = HashMap::new();
    for i in (0..n).rev() {
        let tok = candidate[i].as_str();
        let c = running.entry(tok).or_insert(0);
        *c += 1;
        let gain = if *c <= *ref_counts.get(tok).unwrap_or(&0) { 1 } else { 0 };
        suffix[i] = suffix[i + 1] + gain;
    }

    // Which candidate occurrences must match: the first min(c_t, r_t)
    // occurrences of each token type (any choice preserves the maximum).
    let mut need: Vec<bool> = vec![false; n];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, tok) in candidate.iter().enumerate() {
        let c = seen.entry(tok.as_str()).or_insert(0);
        *c += 1;
        need[i] = *c <= *ref_counts.get(tok.as_str()).unwrap_or(&0);
    }

    // Greedy feasible alignment: continuation slot if possible, else the
    // lowest unused reference occurrence of the token.
    let mut used = vec![false; reference.len()];
    let mut greedy_chunks = 0usize;
    let mut last: Option<(usize, usize)> = None;
    for (ci, tok) in candidate.iter().enumerate() {
        if !need[ci] {
            continue;
        }
        let continuation = match last {
            Some((lc, lr)) if lc + 1 == ci && lr + 1 < reference.len() => Some(lr + 1),
            _ => None,
        };
        let rj = match continuation {
            Some(j) if !used[j] && &reference[j] == tok => j,
            _ => (0..reference.len())
                .find(|&j| !used[j] && &reference[j] == tok)
                .expect("clipped count guarantees a free slot"),
        };
        if !matches!(last, Some((lc, lr)) if lc + 1 == ci && lr + 1 == rj) {
            greedy_chunks += 1;
        }
        used[rj] = true;
        last = Some((ci, rj));
    }

    struct Search<'a> {
        candidate: &'a [String],
        reference: &'a [String],
        suffix: &'a [usize],
        target: usize,
        used: Vec<bool>,
        best: usize,
        nodes: usize,
    }

    impl Search<'_> {
        fn go(&mut self, ci: usize, found: usize, chunks: usize, last: Option<(usize, usize)>) {
            self.nodes += 1;
            if found == self.target {
                self.best = self.best.min(chunks);
                return;
            }
            // any completion needs at least the chunks already opened
            if self.nodes > NODE_BUDGET || chunks >= self.best {
                return;
            }
            if ci >= self.candidate.len() || found + self.suffix[ci] < self.target {
                return;
            }
            let tok = &self.candidate[ci];
            let continuation = match last {
                Some((lc, lr)) if lc + 1 == ci => Some(lr + 1),
                _ => None,
            };
            if let Some(rj) = continuation {
                if rj < self.reference.len() && !self.used[rj] && &self.reference[rj] == tok {
                    self.used[rj] = true;
                    self.go(ci + 1, found + 1, chunks, Some((ci, rj)));
                    self.used[rj] = false;
                }
            }
            for rj in 0..self.reference.len() {
                if self.used[rj] || &self.reference[rj] != tok || continuation == Some(rj) {
                    continue;
                }
                self.used[rj] = true;
                self.go(ci + 1, found + 1, chunks + 1, Some((ci, rj)));
                self.used[rj] = false;
            }
            self.go(ci + 1, found, chunks, last);
        }
    }

    if greedy_chunks <= 1 {
        return greedy_chunks;
    }
    let mut search = Search {
        candidate,
        reference,
        suffix: &suffix,
        target: matches,
        used: vec![false; reference.len()],
        best: greedy_chunks,
        nodes: 0,
    };
    search.go(0, 0, 0, None);
    search.best
}

/// Exact-match METEOR.
pub fn meteor_exact(candidate: &[String], reference: &[String]) -> f64 {
    let matches = clipped_overlap(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let chunks = min_chunks(candidate, reference, matches);
    let p = matches as f64 / candidate.len() as f64;
    let r = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// One row of the evaluation report; values are ×100.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportRow {
    pub tag: String,
    pub pairs: usize,
    pub bleu1: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
    /// Tags that were requested but had no pairs.
    pub warnings: Vec<String>,
}

struct PairScores {
    bleu1: f64,
    rouge1: f64,
    rouge_l: f64,
    meteor: f64,
}

fn score_pair(p: &EvalPair) -> PairScores {
    PairScores {
        bleu1: bleu1(&p.candidate, &p.reference),
        rouge1: rouge1(&p.candidate, &p.reference),
        rouge_l: rouge_l(&p.candidate, &p.reference),
        meteor: meteor_exact(&p.candidate, &p.reference),
    }
}

/// Macro-average all four metrics per tag, then average the tag rows into
/// the overall row. Tags are reported in sorted order. `expected_tags`
/// entries with no pairs become warning rows instead of silent omissions.
pub fn evaluate_corpus(pairs: &[EvalPair], expected_tags: Option<&[String]>) -> Result<Report> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluating an empty corpus".into()));
    }
    let scores = par::map_collect(pairs, score_pair);
    let mut by_tag: HashMap<&str, Vec<&PairScores>> = HashMap::new();
    for (p, s) in pairs.iter().zip(&scores) {
        by_tag.entry(p.tag.as_str()).or_default().push(s);
    }
    let mut tags: Vec<&str> = by_tag.keys().copied().collect();
    tags.sort_unstable();

    let mut warnings = Vec::new();
    if let Some(expected) = expected_tags {
        for t in expected {
            if !by_tag.contains_key(t.as_str()) {
                warnings.push(t.clone());
            }
        }
    }

    let mut rows = Vec::with_capacity(tags.len());
    for tag in tags {
        let group = &by_tag[tag];
        let n = group.len() as f64;
        rows.push(ReportRow {
            tag: tag.to_string(),
            pairs: group.len(),
            bleu1: 100.0 * group.iter().map(|s| s.bleu1).sum::<f64>() / n,
            rouge1: 100.0 * group.iter().map(|s| s.rouge1).sum::<f64>() / n,
            rouge_l: 100.0 * group.iter().map(|s| s.rouge_l).sum::<f64>() / n,
            meteor: 100.0 * group.iter().map(|s| s.meteor).sum::<f64>() / n,
        });
    }
    let k = rows.len() as f64;
    let average = ReportRow {
        tag: "Average".to_string(),
        pairs: pairs.len(),
        bleu1: rows.iter().map(|r| r.bleu1).sum::<f64>() / k,
        rouge1: rows.iter().map(|r| r.rouge1).sum::<f64>() / k,
        rouge_l: rows.iter().map(|r| r.rouge_l).sum::<f64>() / k,
        meteor: rows.iter().map(|r| r.meteor).sum::<f64>() / k,
    };
    Ok(Report { rows, average, warnings })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tag,pairs,bleu1,rouge1,rougeL,meteor\n");
        for row in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4}",
                row.tag, row.pairs, row.bleu1, row.rouge1, row.rouge_l, row.meteor
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "{w},0,,,,");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8}",
            "tag", "pairs", "BLEU-1", "ROUGE-1", "ROUGE-L", "METEOR"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                row.tag, row.pairs, row.bleu1, row.rouge1, row.rouge_l, row.meteor
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "{w:<12} {:>6} (no pairs)", 0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn bleu1_fixtures() {
        let a = toks("a b c");
        assert_eq!(bleu1(&a, &a), 1.0);
        approx(bleu1(&a, &toks("a b d")), 2.0 / 3.0, 1e-12);
        // short candidate: precision 1 × e^{1-2}
        approx(bleu1(&toks("a"), &toks("a b")), (-1.0f64).exp(), 1e-12);
        assert_eq!(bleu1(&[], &a), 0.0);
    }

    #[test]
    fn bleu1_is_asymmetric() {
        let c = toks("a");
        let r = toks("a a");
        approx(bleu1(&c, &r), (-1.0f64).exp(), 1e-12);
        approx(bleu1(&r, &c), 0.5, 1e-12);
        assert!((bleu1(&c, &r) - bleu1(&r, &c)).abs() > 0.1);
    }

    #[test]
    fn clipping_caps_repeated_tokens() {
        // candidate repeats "a" three times, reference has one
        approx(bleu1(&toks("a a a"), &toks("a b c")), 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn rouge1_fixtures() {
        let a = toks("a b");
        let b = toks("a b c");
        assert_eq!(rouge1(&a, &a), 1.0);
        approx(rouge1(&a, &b), 0.8, 1e-12);
        assert_eq!(rouge1(&toks("x y"), &toks("p q")), 0.0);
    }

    #[test]
    fn meteor_identical_three_tokens() {
        let t = toks("x y z");
        // matches 3, chunks 1, Fmean 1, penalty 0.5/27
        approx(meteor_exact(&t, &t), 1.0 - 0.5 / 27.0, 1e-5);
        approx(meteor_exact(&t, &t), 0.98148, 1e-5);
    }

    #[test]
    fn meteor_no_overlap_is_zero() {
        assert_eq!(meteor_exact(&toks("a b"), &toks("c d")), 0.0);
    }

    #[test]
    fn meteor_swapped_pair() {
        // matches 2, chunks 2, penalty 0.5 -> Fmean × 0.5 with P=R=1
        approx(meteor_exact(&toks("a b"), &toks("b a")), 0.5, 1e-12);
    }

    #[test]
    fn meteor_partial_overlap_hand_value() {
        // "a b c" vs "a b d": m=2, chunks=1, P=R=2/3, Fmean=2/3,
        // penalty=1/16 -> 0.625
        approx(meteor_exact(&toks("a b c"), &toks("a b d")), 0.625, 1e-12);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        // "a b" appears contiguously in the reference even though "a" also
        // appears late; the aligner must pick chunks=1, not 2.
        let c = toks("a b");
        let r = toks("a b x a");
        // m = 2, chunks = 1: P=1, R=1/2, Fmean=10·0.5/(0.5+9)=10/19
        let want = (10.0 * 1.0 * 0.5 / (0.5 + 9.0)) * (1.0 - 0.5 * (0.5f64).powi(3));
        approx(meteor_exact(&c, &r), want, 1e-12);
    }

    #[test]
    fn meteor_repetitive_inputs_terminate() {
        let c: Vec<String> = (0..30).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        let r: Vec<String> = (0..30).map(|i| if i % 3 == 0 { "b" } else { "a" }.to_string()).collect();
        let v = meteor_exact(&c, &r);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn all_metrics_in_unit_interval_and_one_on_identical() {
        let mut rng = SplitMix64::new(70);
        let vocab = ["m", "n", "o", "p", "q", "r"];
        for _ in 0..100 {
            let gen = |rng: &mut SplitMix64| -> Vec<String> {
                let n = 1 + rng.next_below(12);
                (0..n).map(|_| vocab[rng.next_below(6)].to_string()).collect()
            };
            let c = gen(&mut rng);
            let r = gen(&mut rng);
            for v in [
                bleu1(&c, &r),
                rouge1(&c, &r),
                rouge_l(&c, &r),
                meteor_exact(&c, &r),
            ] {
                assert!((0.0..=1.0).contains(&v), "{v} out of range");
            }
            assert_eq!(bleu1(&c, &c), 1.0);
            assert_eq!(rouge1(&c, &c), 1.0);
            assert_eq!(rouge_l(&c, &c), 1.0);
            let m = c.len() as f64;
            approx(meteor_exact(&c, &c), 1.0 - 0.5 / (m * m * m), 1e-12);
        }
    }

    #[test]
    fn precision_numerator_monotone_in_matching_appends() {
        let mut rng = SplitMix64::new(71);
        let vocab = ["u", "v", "w"];
        for _ in 0..100 {
            let n = 1 + rng.next_below(8);
            let c: Vec<String> = (0..n).map(|_| vocab[rng.next_below(3)].to_string()).collect();
            let r: Vec<String> = (0..n + 2).map(|_| vocab[rng.next_below(3)].to_string()).collect();
            let before = clipped_overlap(&c, &r);
            let mut c2 = c.clone();
            c2.push(r[rng.next_below(r.len())].clone());
            assert!(clipped_overlap(&c2, &r) >= before);
        }
    }

    #[test]
    fn corpus_report_identical_pair_scores_100() {
        let pair = EvalPair {
            candidate: toks("solid nodule left lobe"),
            reference: toks("solid nodule left lobe"),
            tag: "thyroid".into(),
        };
        let report = evaluate_corpus(&[pair], None).unwrap();
        approx(report.rows[0].bleu1, 100.0, 1e-9);
        approx(report.rows[0].rouge1, 100.0, 1e-9);
        approx(report.rows[0].rouge_l, 100.0, 1e-9);
        // METEOR's chunk penalty keeps identical text just under 100
        approx(report.rows[0].meteor, 100.0 * (1.0 - 0.5 / 64.0), 1e-9);
    }

    #[test]
    fn corpus_average_is_mean_of_tag_rows() {
        let pairs = vec![
            EvalPair { candidate: toks("a b"), reference: toks("a b"), tag: "t1".into() },
            EvalPair { candidate: toks("x y"), reference: toks("p q"), tag: "t2".into() },
        ];
        let report = evaluate_corpus(&pairs, None).unwrap();
        approx(
            report.average.bleu1,
            (report.rows[0].bleu1 + report.rows[1].bleu1) / 2.0,
            1e-12,
        );
    }

    #[test]
    fn corpus_hand_computed_six_pair_fixture() {
        let pairs = vec![
            EvalPair { candidate: toks("x y z"), reference: toks("x y z"), tag: "a".into() },
            EvalPair { candidate: toks("a b"), reference: toks("a b c"), tag: "a".into() },
            EvalPair { candidate: toks("p q"), reference: toks("p q"), tag: "a".into() },
            EvalPair { candidate: toks("k"), reference: toks("k k"), tag: "b".into() },
            EvalPair { candidate: toks("m n"), reference: toks("o p"), tag: "b".into() },
            EvalPair { candidate: toks("d e f"), reference: toks("d f e"), tag: "b".into() },
        ];
        let report = evaluate_corpus(&pairs, None).unwrap();

        // tag a per-pair hand values:
        //   identical 3 tokens: bleu 1, r1 1, rL 1, meteor 1 - 0.5/27
        //   "a b" vs "a b c":   bleu e^{-1/2}, r1 0.8, rL 0.8,
        //                       meteor (20/29)(15/16)
        //   identical 2 tokens: bleu 1, r1 1, rL 1, meteor 1 - 0.5/8
        let bleu_a = 100.0 * (1.0 + (-0.5f64).exp() + 1.0) / 3.0;
        let r1_a = 100.0 * (1.0 + 0.8 + 1.0) / 3.0;
        let meteor_a =
            100.0 * ((1.0 - 0.5 / 27.0) + (20.0 / 29.0) * (15.0 / 16.0) + (1.0 - 0.5 / 8.0)) / 3.0;
        approx(report.rows[0].bleu1, bleu_a, 1e-9);
        approx(report.rows[0].rouge1, r1_a, 1e-9);
        approx(report.rows[0].rouge_l, r1_a, 1e-9);
        approx(report.rows[0].meteor, meteor_a, 1e-9);

        // tag b per-pair hand values:
        //   "k" vs "k k":     bleu e^{-1}; r1 = rL = 2/3;
        //                     meteor (10/19)·0.5 (one chunk of one match)
        //   disjoint:         all zero
        //   "d e f" vs "d f e": bleu 1 (order-free), r1 1, rL 2/3 (LCS 2),
        //                     meteor 0.5 (three chunks of three matches)
        let bleu_b = 100.0 * ((-1.0f64).exp() + 0.0 + 1.0) / 3.0;
        let r1_b = 100.0 * (2.0 / 3.0 + 0.0 + 1.0) / 3.0;
        let rl_b = 100.0 * (2.0 / 3.0 + 0.0 + 2.0 / 3.0) / 3.0;
        let meteor_b = 100.0 * ((10.0 / 19.0) * 0.5 + 0.0 + 0.5) / 3.0;
        approx(report.rows[1].bleu1, bleu_b, 1e-9);
        approx(report.rows[1].rouge1, r1_b, 1e-9);
        approx(report.rows[1].rouge_l, rl_b, 1e-9);
        approx(report.rows[1].meteor, meteor_b, 1e-9);

        // the overall row is the arithmetic mean of the tag rows
        approx(report.average.bleu1, (bleu_a + bleu_b) / 2.0, 1e-9);
        approx(report.average.meteor, (meteor_a + meteor_b) / 2.0, 1e-9);
    }

    #[test]
    fn missing_expected_tag_becomes_warning() {
        let pairs = vec![EvalPair { candidate: toks("a"), reference: toks("a"), tag: "seen".into() }];
        let expected = vec!["seen".to_string(), "ghost".to_string()];
        let report = evaluate_corpus(&pairs, Some(&expected)).unwrap();
        assert_eq!(report.warnings, vec!["ghost".to_string()]);
        assert!(report.to_csv().contains("ghost"));
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        assert!(matches!(evaluate_corpus(&[], None), Err(Error::Contract(_))));
    }
}

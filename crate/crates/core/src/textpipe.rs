//! Instruction-corpus plumbing: normalization, similarity signatures, and
//! the streaming near-duplicate filter.
//!
//! Records arrive in a semantically significant order — earlier records win.
//! A candidate is rejected when its 64-bit simhash signature lands within
//! the Hamming threshold of any accepted record (cheap gate, checked first)
//! or when its ROUGE-L similarity against any accepted record strictly
//! exceeds the ROUGE threshold. Similarity is computed over the question and
//! answer concatenated around a separator token. Since rejection is a
//! disjunction of the two gates, gate order only affects speed, never the
//! outcome.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{fnv1a64, SplitMix64};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateClass {
    Open,
    Closed,
}

/// One instruction-tuning record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstructionRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub template_class: TemplateClass,
    pub modality: String,
    pub source: String,
}

/// Unicode NFC, lowercase, then maximal alphanumeric runs; everything else
/// (whitespace, punctuation) is a boundary and empty tokens are dropped.
pub fn normalize(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect::<String>().to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in nfc.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Character-level variant: one token per alphanumeric character after NFC
/// and lowercasing.
pub fn normalize_chars(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect::<String>().to_lowercase();
    nfc.chars()
        .filter(|c| c.is_alphanumeric())
        .map(|c| c.to_string())
        .collect()
}

/// Longest common subsequence length with a rolling two-row table.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur[0] = 0;
    }
    prev[b.len()]
}

/// ROUGE-L F1: with `L = LCS(a, b)`, precision `L/|a|`, recall `L/|b|`,
/// score `2PR/(P+R)`; zero when either side is empty.
pub fn rouge_l_sim(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let l = lcs_len(a, b) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / a.len() as f64;
    let r = l / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// 64-bit simhash over unigram and adjacent-bigram features, each hashed
/// with FNV-1a (bigrams join the two tokens around a 0x1f byte). Every
/// occurrence votes with unit weight; a tied bit resolves to 0, so the
/// empty token list maps to signature 0.
pub fn simhash64(tokens: &[String]) -> u64 {
    let mut votes = [0i64; 64];
    let mut vote = |h: u64| {
        for (i, v) in votes.iter_mut().enumerate() {
            if (h >> i) & 1 == 1 {
                *v += 1;
            } else {
                *v -= 1;
            }
        }
    };
    for t in tokens {
        vote(fnv1a64(t.as_bytes()));
    }
    for pair in tokens.windows(2) {
        let mut bytes = pair[0].as_bytes().to_vec();
        bytes.push(0x1f);
        bytes.extend_from_slice(pair[1].as_bytes());
        vote(fnv1a64(&bytes));
    }
    let mut out = 0u64;
    for (i, v) in votes.iter().enumerate() {
        if *v > 0 {
            out |= 1 << i;
        }
    }
    out
}

/// Feature hashes exactly as `simhash64` derives them, for cross-checking
/// against an independent accumulation strategy.
pub fn simhash_features(tokens: &[String]) -> Vec<u64> {
    let mut features: Vec<u64> = tokens.iter().map(|t| fnv1a64(t.as_bytes())).collect();
    for pair in tokens.windows(2) {
        let mut bytes = pair[0].as_bytes().to_vec();
        bytes.push(0x1f);
        bytes.extend_from_slice(pair[1].as_bytes());
        features.push(fnv1a64(&bytes));
    }
    features
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Tokens used for similarity: normalized question, a separator token, and
/// the normalized answer.
pub fn record_tokens(rec: &InstructionRecord) -> Vec<String> {
    let mut tokens = normalize(&rec.question);
    tokens.push("\u{1f}".to_string());
    tokens.extend(normalize(&rec.answer));
    tokens
}

/// Accepted records' token sequences and signatures; grows monotonically
/// during a run.
#[derive(Debug, Default)]
pub struct DedupIndex {
    pub tokens: Vec<Vec<String>>,
    pub signatures: Vec<u64>,
    ids: Vec<String>,
}

impl DedupIndex {
    pub fn len(&self) -> usize {
        debug_assert_eq!(self.tokens.len(), self.signatures.len());
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, id: String, tokens: Vec<String>, signature: u64) {
        self.ids.push(id);
        self.tokens.push(tokens);
        self.signatures.push(signature);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Simhash,
    Rouge,
}

/// Why a record was rejected: the gate that fired, the earliest accepted
/// record that triggered it, and the offending score (Hamming distance or
/// ROUGE-L value).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub gate: Gate,
    pub against_id: String,
    pub score: f64,
}

pub struct DedupOutcome {
    pub accepted: Vec<InstructionRecord>,
    pub rejected: Vec<Rejection>,
}

/// Streaming dedup. A record is rejected iff some accepted record sits
/// within `ham_threshold` Hamming distance of its signature, or has ROUGE-L
/// similarity strictly above `rouge_threshold`. Candidate scoring against
/// the index fans out in parallel and joins on the lowest accepted index,
/// so the reported `against_id` matches a sequential scan.
pub fn dedup(
    records: &[InstructionRecord],
    rouge_threshold: f64,
    ham_threshold: u32,
) -> Result<DedupOutcome> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate record id {:?}", r.id)));
        }
    }
    let mut index = DedupIndex::default();
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for rec in records {
        let tokens = record_tokens(rec);
        if normalize(&rec.question).is_empty() || normalize(&rec.answer).is_empty() {
            return Err(Error::Data(format!(
                "record {:?} has an empty question or answer after normalization",
                rec.id
            )));
        }
        let signature = simhash64(&tokens);
        let sigs = &index.signatures;
        let sim_hit =
            par::find_first_index(index.len(), |i| hamming(sigs[i], signature) <= ham_threshold);
        if let Some(i) = sim_hit {
            rejected.push(Rejection {
                id: rec.id.clone(),
                gate: Gate::Simhash,
                against_id: index.ids[i].clone(),
                score: hamming(index.signatures[i], signature) as f64,
            });
            continue;
        }
        let toks = &index.tokens;
        let rouge_hit = par::find_first_index(index.len(), |i| {
            rouge_l_sim(&tokens, &toks[i]) > rouge_threshold
        });
        if let Some(i) = rouge_hit {
            rejected.push(Rejection {
                id: rec.id.clone(),
                gate: Gate::Rouge,
                against_id: index.ids[i].clone(),
                score: rouge_l_sim(&tokens, &index.tokens[i]),
            });
            continue;
        }
        index.push(rec.id.clone(), tokens, signature);
        accepted.push(rec.clone());
    }
    debug_assert_eq!(index.len(), accepted.len());
    Ok(DedupOutcome { accepted, rejected })
}

/// A sampled review batch with its position in the accepted stream.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationBatch {
    pub batch_index: usize,
    pub records: Vec<InstructionRecord>,
}

/// Partition accepted records into consecutive batches and draw
/// `ceil(batch_rate × batch_count)` of them uniformly without replacement.
pub fn sample_validation(
    accepted: &[InstructionRecord],
    batch_size: usize,
    batch_rate: f64,
    seed: u64,
) -> Result<Vec<ValidationBatch>> {
    if accepted.is_empty() {
        return Err(Error::Contract("validation sampling over an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("validation batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&batch_rate) {
        return Err(Error::Config(format!("batch rate {batch_rate} outside [0, 1]")));
    }
    let n_batches = accepted.len().div_ceil(batch_size);
    let n_pick = ((batch_rate * n_batches as f64).ceil() as usize).min(n_batches);
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut rng = SplitMix64::labeled(seed, "validation-sample");
    rng.shuffle(&mut order);
    let mut picked: Vec<usize> = order.into_iter().take(n_pick).collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|b| ValidationBatch {
            batch_index: b,
            records: accepted[b * batch_size..((b + 1) * batch_size).min(accepted.len())].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    fn rec(id: &str, q: &str, a: &str) -> InstructionRecord {
        InstructionRecord {
            id: id.to_string(),
            question: q.to_string(),
            answer: a.to_string(),
            template_class: TemplateClass::Open,
            modality: "thyroid".to_string(),
            source: "unit".to_string(),
        }
    }

    #[test]
    fn normalize_basic() {
        assert_eq!(normalize("Thyroid  nodule."), vec!["thyroid", "nodule"]);
        assert_eq!(normalize(""), Vec::<String>::new());
        assert_eq!(normalize("A-B c_d"), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn normalize_case_insensitive_idempotent() {
        let a = normalize("Left Lobe MASS, 3mm");
        let b = normalize("left lobe mass 3MM");
        assert_eq!(a, b);
        assert_eq!(normalize(&a.join(" ")), a);
    }

    #[test]
    fn rouge_identical_is_one() {
        let a = toks("a b c d");
        assert_eq!(rouge_l_sim(&a, &a), 1.0);
    }

    #[test]
    fn rouge_hand_case() {
        let a = toks("a c");
        let b = toks("a b c");
        // LCS 2, P=1, R=2/3 -> 0.8
        assert!((rouge_l_sim(&a, &b) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        assert_eq!(rouge_l_sim(&toks("a b"), &toks("x y z")), 0.0);
        assert_eq!(rouge_l_sim(&toks(""), &toks("x")), 0.0);
    }

    #[test]
    fn rouge_symmetric_and_matches_table_oracle() {
        let mut rng = SplitMix64::new(90);
        let vocab = ["a", "b", "c", "d", "e"];
        for _ in 0..300 {
            let la = rng.next_below(31);
            let lb = rng.next_below(31);
            let a: Vec<String> =
                (0..la).map(|_| vocab[rng.next_below(5)].to_string()).collect();
            let b: Vec<String> =
                (0..lb).map(|_| vocab[rng.next_below(5)].to_string()).collect();
            let got = rouge_l_sim(&a, &b);
            let want = oracle::rouge_l_table(&a, &b);
            assert!((got - want).abs() < 1e-15, "{a:?} vs {b:?}");
            assert!((got - rouge_l_sim(&b, &a)).abs() < 1e-15);
        }
    }

    #[test]
    fn simhash_deterministic_and_empty_is_zero() {
        let t = toks("hypoechoic nodule in the left lobe");
        assert_eq!(simhash64(&t), simhash64(&t));
        assert_eq!(simhash64(&[]), 0);
    }

    #[test]
    fn simhash_close_texts_small_distance_and_matches_second_implementation() {
        let mut rng = SplitMix64::new(91);
        let base: Vec<String> = (0..100).map(|i| format!("w{}", i * 7 + rng.next_below(3))).collect();
        let mut tweaked = base.clone();
        tweaked[50] = "changed".to_string();
        let d = hamming(simhash64(&base), simhash64(&tweaked));
        assert!(d <= 10, "distance {d}");
        // exact agreement with the bit-major reimplementation
        for t in [&base, &tweaked] {
            assert_eq!(simhash64(t), oracle::simhash_bitwise(&simhash_features(t)));
        }
    }

    #[test]
    fn hamming_fixtures() {
        assert_eq!(hamming(7, 7), 0);
        assert_eq!(hamming(0, 1 << 5), 1);
        assert_eq!(hamming(0x0f, 0xf0), 8);
    }

    #[test]
    fn hamming_triangle_inequality() {
        let mut rng = SplitMix64::new(92);
        for _ in 0..200 {
            let (a, b, c) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
            assert!(hamming(a, c) <= hamming(a, b) + hamming(b, c));
        }
    }

    #[test]
    fn exact_duplicate_rejected() {
        let records = vec![
            rec("r1", "What size is the nodule?", "About three millimeters."),
            rec("r2", "What size is the nodule?", "About three millimeters."),
        ];
        let out = dedup(&records, 0.7, 3).unwrap();
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].id, "r2");
        assert_eq!(out.rejected[0].against_id, "r1");
        assert_eq!(out.rejected[0].gate, Gate::Simhash);
    }

    #[test]
    fn rouge_gate_fires_above_threshold_with_distant_signature() {
        // 20 content words, 5 substituted: LCS 15 of 20 -> 0.75 > 0.7,
        // while the signature moves far beyond the Hamming gate.
        let words: Vec<String> = (0..20).map(|i| format!("alpha{i}")).collect();
        let mut other = words.clone();
        for (i, slot) in [2usize, 6, 9, 13, 17].iter().enumerate() {
            other[*slot] = format!("omega{i}");
        }
        let q1 = words[..10].join(" ");
        let a1 = words[10..].join(" ");
        let q2 = other[..10].join(" ");
        let a2 = other[10..].join(" ");
        let r1 = rec("base", &q1, &a1);
        let r2 = rec("near", &q2, &a2);
        let t1 = record_tokens(&r1);
        let t2 = record_tokens(&r2);
        let rouge = rouge_l_sim(&t1, &t2);
        assert!(rouge > 0.7 && rouge < 0.85, "rouge {rouge}");
        assert!(hamming(simhash64(&t1), simhash64(&t2)) > 3);

        let out = dedup(&[r1, r2], 0.7, 3).unwrap();
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.rejected[0].gate, Gate::Rouge);
        assert_eq!(out.rejected[0].against_id, "base");
        assert!((out.rejected[0].score - rouge).abs() < 1e-12);
    }

    #[test]
    fn unrelated_records_both_accepted() {
        let r1 = rec("u1", "echogenic focus in segment four", "benign hemangioma most likely");
        let r2 = rec("u2", "diameter of the abdominal aorta", "twenty one millimeters overall");
        let out = dedup(&[r1, r2], 0.7, 3).unwrap();
        assert_eq!(out.accepted.len(), 2);
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn mixed_case_duplicate_rejected_via_normalization() {
        let r1 = rec("c1", "Is the margin smooth?", "Yes, entirely smooth.");
        let r2 = rec("c2", "IS THE MARGIN SMOOTH?", "yes entirely smooth");
        let out = dedup(&[r1, r2], 0.7, 3).unwrap();
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.rejected[0].id, "c2");
    }

    #[test]
    fn duplicate_ids_are_data_error() {
        let r1 = rec("same", "q one here", "a one here");
        let r2 = rec("same", "q two here", "a two here");
        assert!(matches!(dedup(&[r1, r2], 0.7, 3), Err(Error::Data(_))));
    }

    #[test]
    fn dedup_is_idempotent_on_its_output() {
        let mut rng = SplitMix64::new(93);
        let mut records = Vec::new();
        for i in 0..40 {
            let q: Vec<String> = (0..8).map(|_| format!("q{}", rng.next_u64() % 100_000)).collect();
            let a: Vec<String> = (0..8).map(|_| format!("a{}", rng.next_u64() % 100_000)).collect();
            records.push(rec(&format!("g{i}"), &q.join(" "), &a.join(" ")));
        }
        // plant a couple of near-duplicates
        let mut d1 = records[3].clone();
        d1.id = "dup1".into();
        let mut d2 = records[10].clone();
        d2.id = "dup2".into();
        d2.answer.push_str(" extra");
        records.push(d1);
        records.push(d2);

        let first = dedup(&records, 0.7, 3).unwrap();
        assert!(first.rejected.len() >= 2);
        let second = dedup(&first.accepted, 0.7, 3).unwrap();
        assert_eq!(second.accepted.len(), first.accepted.len());
        assert!(second.rejected.is_empty());
    }

    #[test]
    fn exact_duplicate_survivor_count_is_order_invariant() {
        let a = rec("a", "the same question text", "the same answer text");
        let mut b = a.clone();
        b.id = "b".into();
        let c = rec("c", "completely different words", "unrelated answer entirely");
        let fwd = dedup(&[a.clone(), b.clone(), c.clone()], 0.7, 3).unwrap();
        let rev = dedup(&[b, c, a], 0.7, 3).unwrap();
        assert_eq!(fwd.accepted.len(), rev.accepted.len());
    }

    #[test]
    fn validation_sampling_fixtures() {
        let records: Vec<InstructionRecord> = (0..2000)
            .map(|i| rec(&format!("v{i}"), &format!("question {i}"), &format!("answer {i}")))
            .collect();
        // 2000 records -> 200 batches of 10 -> 10 sampled at 5%
        let batches = sample_validation(&records, 10, 0.05, 7).unwrap();
        assert_eq!(batches.len(), 10);
        // ceiling applies to a single batch
        let one = sample_validation(&records[..7], 10, 0.05, 7).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].records.len(), 7);
        // determinism
        let again = sample_validation(&records, 10, 0.05, 7).unwrap();
        let idx: Vec<usize> = batches.iter().map(|b| b.batch_index).collect();
        let idx2: Vec<usize> = again.iter().map(|b| b.batch_index).collect();
        assert_eq!(idx, idx2);
        // empty corpus rejected
        assert!(matches!(
            sample_validation(&[], 10, 0.05, 7),
            Err(Error::Contract(_))
        ));
    }
}

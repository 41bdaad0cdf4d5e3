//! Validation analyses over frozen checkpoints: latent-distance histograms,
//! consistency of the distance ordering against pluggable judges, and the
//! implicit-reward-margin diagnostic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PromptResponsePair, TokenId, Tokenizer};
use crate::error::{Error, Result};
use crate::guide::{latent_distance, GuideParams};
use crate::lm::{sample_response, DecodeConfig, LmParams};
use crate::metrics::CsvRecord;
use crate::rng::{self, Purpose};
use crate::scalar::Real;
use crate::tasks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    #[serde(rename = "edges")]
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

/// Count distances into half-open bins [e_i, e_{i+1}); values at or above the
/// last edge land in `overflow`. Values below the first edge are an error —
/// they would silently vanish from the count conservation otherwise.
pub fn distance_histogram(distances: &[f64], bin_edges: &[f64]) -> Result<Histogram> {
    if bin_edges.len() < 2 {
        return Err(Error::config("need at least two bin edges"));
    }
    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("bin edges must be strictly ascending"));
    }
    let mut counts = vec![0u64; bin_edges.len() - 1];
    let mut overflow = 0u64;
    for &d in distances {
        if !d.is_finite() {
            return Err(Error::config(format!("non-finite distance {d}")));
        }
        if d < bin_edges[0] {
            return Err(Error::config(format!(
                "distance {d} below first bin edge {}",
                bin_edges[0]
            )));
        }
        if d >= *bin_edges.last().unwrap() {
            overflow += 1;
            continue;
        }
        // linear scan is fine at these sizes
        for (i, w) in bin_edges.windows(2).enumerate() {
            if d >= w[0] && d < w[1] {
                counts[i] += 1;
                break;
            }
        }
    }
    Ok(Histogram {
        bin_edges: bin_edges.to_vec(),
        counts,
        overflow,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preferred {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub pair_index: usize,
    pub preferred: Preferred,
    pub judge_name: String,
}

/// A binary quality judgment between two candidate responses for a prompt
/// with a known gold response. Implementations must be deterministic.
pub trait Judge {
    fn name(&self) -> &str;
    fn prefer(
        &self,
        pair_index: usize,
        prompt: &[TokenId],
        gold: &[TokenId],
        a: &[TokenId],
        b: &[TokenId],
    ) -> Preferred;
}

/// Levenshtein distance over token slices.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Prefers the candidate with the smaller byte-level edit distance to gold;
/// ties go to A.
pub struct EditDistanceJudge;

impl Judge for EditDistanceJudge {
    fn name(&self) -> &str {
        "edit-distance"
    }
    fn prefer(
        &self,
        _pair_index: usize,
        _prompt: &[TokenId],
        gold: &[TokenId],
        a: &[TokenId],
        b: &[TokenId],
    ) -> Preferred {
        if edit_distance(a, gold) <= edit_distance(b, gold) {
            Preferred::A
        } else {
            Preferred::B
        }
    }
}

/// Knows the synthetic task semantics: a candidate that solves the task
/// beats one that does not; otherwise falls back to edit distance (ties to A).
pub struct TaskCheckerJudge;

impl Judge for TaskCheckerJudge {
    fn name(&self) -> &str {
        "task-checker"
    }
    fn prefer(
        &self,
        pair_index: usize,
        prompt: &[TokenId],
        gold: &[TokenId],
        a: &[TokenId],
        b: &[TokenId],
    ) -> Preferred {
        let t = Tokenizer;
        let prompt_text = String::from_utf8_lossy(&t.detokenize_lossy(prompt)).into_owned();
        let a_text = String::from_utf8_lossy(&t.detokenize_lossy(a)).into_owned();
        let b_text = String::from_utf8_lossy(&t.detokenize_lossy(b)).into_owned();
        let a_ok = tasks::check(&prompt_text, &a_text);
        let b_ok = tasks::check(&prompt_text, &b_text);
        match (a_ok, b_ok) {
            (true, false) => Preferred::A,
            (false, true) => Preferred::B,
            _ => EditDistanceJudge.prefer(pair_index, prompt, gold, a, b),
        }
    }
}

/// Seeded coin flip per pair index; the null judge for calibration.
pub struct RandomJudge {
    pub seed: u64,
}

impl Judge for RandomJudge {
    fn name(&self) -> &str {
        "random"
    }
    fn prefer(
        &self,
        pair_index: usize,
        _prompt: &[TokenId],
        _gold: &[TokenId],
        _a: &[TokenId],
        _b: &[TokenId],
    ) -> Preferred {
        if rng::derive_seed(self.seed, Purpose::Judge, pair_index as u64, 0) & 1 == 0 {
            Preferred::A
        } else {
            Preferred::B
        }
    }
}

/// Oracle that ranks by the guide's own latent distance to gold — by
/// construction it always agrees with the distance ordering.
pub struct GuideDistanceJudge<'a, T> {
    pub guide: &'a GuideParams<T>,
}

impl<T: Real> Judge for GuideDistanceJudge<'_, T> {
    fn name(&self) -> &str {
        "latent-distance-oracle"
    }
    fn prefer(
        &self,
        _pair_index: usize,
        prompt: &[TokenId],
        gold: &[TokenId],
        a: &[TokenId],
        b: &[TokenId],
    ) -> Preferred {
        let da = latent_distance(self.guide, prompt, gold, a).unwrap_or(f64::INFINITY);
        let db = latent_distance(self.guide, prompt, gold, b).unwrap_or(f64::INFINITY);
        if da <= db {
            Preferred::A
        } else {
            Preferred::B
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub agreements: usize,
    pub disagreements: usize,
    /// Prompts with exactly equal latent distances, excluded from the rate.
    pub ties: usize,
    pub rate: f64,
    #[serde(skip)]
    pub verdicts: Vec<JudgeVerdict>,
}

/// Sample two responses per prompt (distinct seeds), rank them by latent
/// distance to gold ("greater distance = lower quality"), and measure how
/// often an independent judge agrees with that ordering.
pub fn pairwise_consistency<T: Real>(
    guide: &GuideParams<T>,
    theta: &LmParams<T>,
    pairs: &[PromptResponsePair],
    judge: &dyn Judge,
    decode_a: &DecodeConfig,
    decode_b: &DecodeConfig,
) -> Result<ConsistencyReport> {
    if pairs.is_empty() {
        return Err(Error::config("empty evaluation subset"));
    }
    if decode_a.seed == decode_b.seed {
        return Err(Error::config("decode seeds must differ"));
    }
    let mut agreements = 0;
    let mut disagreements = 0;
    let mut ties = 0;
    let mut verdicts = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let seed_a = rng::derive_seed(decode_a.seed, Purpose::EvalGenA, i as u64, 0);
        let seed_b = rng::derive_seed(decode_b.seed, Purpose::EvalGenB, i as u64, 0);
        let ya = sample_response(theta, &pair.prompt_tokens, &DecodeConfig { seed: seed_a, ..*decode_a })?;
        let yb = sample_response(theta, &pair.prompt_tokens, &DecodeConfig { seed: seed_b, ..*decode_b })?;
        let gold = pair.response_body();
        let s_a = latent_distance(guide, &pair.prompt_tokens, gold, &ya.tokens)?;
        let s_b = latent_distance(guide, &pair.prompt_tokens, gold, &yb.tokens)?;
        if s_a == s_b {
            ties += 1;
            continue;
        }
        let guide_pick = if s_a < s_b { Preferred::A } else { Preferred::B };
        let judge_pick = judge.prefer(i, &pair.prompt_tokens, gold, &ya.tokens, &yb.tokens);
        verdicts.push(JudgeVerdict {
            pair_index: i,
            preferred: judge_pick,
            judge_name: judge.name().to_string(),
        });
        if guide_pick == judge_pick {
            agreements += 1;
        } else {
            disagreements += 1;
        }
    }
    let judged = agreements + disagreements;
    let rate = if judged == 0 {
        0.0
    } else {
        agreements as f64 / judged as f64
    };
    Ok(ConsistencyReport {
        agreements,
        disagreements,
        ties,
        rate,
        verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub pair_index: usize,
    pub margin: f64,
}

impl CsvRecord for MarginRecord {
    fn headers() -> &'static [&'static str] {
        &["pair_index", "margin"]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub mean_margin: f64,
    pub fraction_positive: f64,
    pub zero_count: usize,
    /// Set when exact-zero margins occur (e.g. θ = ref), where
    /// fraction-positive is ill-defined.
    pub degenerate: bool,
    pub n: usize,
    #[serde(skip)]
    pub margins: Vec<MarginRecord>,
}

/// Generate a loser response per prompt from the frozen reference, then
/// report the mean implicit margin of `theta` and the fraction positive.
pub fn reward_margin_eval<T: Real>(
    theta: &LmParams<T>,
    reference: &LmParams<T>,
    pairs: &[PromptResponsePair],
    beta: f64,
    decode: &DecodeConfig,
) -> Result<MarginReport> {
    if pairs.is_empty() {
        return Err(Error::config("empty evaluation subset"));
    }
    let mut margins = Vec::with_capacity(pairs.len());
    let mut zero_count = 0;
    let mut positive = 0;
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let seed = rng::derive_seed(decode.seed, Purpose::EvalGenA, i as u64, 0);
        let sample = sample_response(reference, &pair.prompt_tokens, &DecodeConfig { seed, ..*decode })?;
        let z = crate::align::implicit_reward_margin(
            theta,
            reference,
            &pair.prompt_tokens,
            pair.response_body(),
            &sample.tokens,
            beta,
        )?;
        if z == 0.0 {
            zero_count += 1;
        } else if z > 0.0 {
            positive += 1;
        }
        total += z;
        margins.push(MarginRecord {
            pair_index: i,
            margin: z,
        });
    }
    let n = pairs.len();
    Ok(MarginReport {
        mean_margin: total / n as f64,
        fraction_positive: positive as f64 / n as f64,
        zero_count,
        degenerate: zero_count > 0,
        n,
        margins,
    })
}

/// Append records to a CSV file with a stable column order; a fresh file gets
/// a header row even when the record list is empty.
pub fn emit_metrics<T: CsvRecord>(records: &[T], path: &Path) -> Result<()> {
    crate::metrics::write_csv(path, records, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, SplitTag};
    use crate::guide::GuideConfig;
    use crate::lm::LMConfig;
    use crate::metrics::read_csv;
    use proptest::prelude::*;

    #[test]
    fn histogram_hand_examples() {
        let h = distance_histogram(&[1.0, 1.0, 3.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.overflow, 0);

        let empty = distance_histogram(&[], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(empty.counts, vec![0, 0]);
        assert_eq!(empty.overflow, 0);

        let over = distance_histogram(&[5.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(over.counts, vec![0, 0]);
        assert_eq!(over.overflow, 1);
    }

    #[test]
    fn histogram_rejects_bad_edges_and_underflow() {
        assert!(distance_histogram(&[1.0], &[0.0, 0.0, 2.0]).is_err());
        assert!(distance_histogram(&[1.0], &[2.0, 1.0]).is_err());
        assert!(distance_histogram(&[0.5], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_json_shape() {
        let h = distance_histogram(&[1.0], &[0.0, 2.0]).unwrap();
        let json = serde_json::to_value(&h).unwrap();
        assert!(json.get("edges").is_some());
        assert!(json.get("counts").is_some());
        assert!(json.get("overflow").is_some());
    }

    #[test]
    fn edit_distance_classic_values() {
        let t = |s: &str| -> Vec<u32> { s.bytes().map(|b| b as u32).collect() };
        assert_eq!(edit_distance(&t("kitten"), &t("sitting")), 3);
        assert_eq!(edit_distance(&t(""), &t("abc")), 3);
        assert_eq!(edit_distance(&t("abc"), &t("abc")), 0);
    }

    fn tiny_world() -> (GuideParams<f32>, LmParams<f32>, Dataset) {
        let shape = LMConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            context_len: 32,
            vocab_size: 260,
        };
        let g = GuideParams::init(
            GuideConfig {
                latent_dim: 4,
                encoder: shape,
                decoder: shape,
            },
            1,
        )
        .unwrap();
        let lm = LmParams::init(
            LMConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 16,
                context_len: 32,
                vocab_size: 260,
            },
            2,
        )
        .unwrap();
        let pairs = (0..12)
            .map(|i| {
                PromptResponsePair::new(vec![97 + (i % 8) as u32, 98], vec![99, 100 + (i % 6) as u32])
                    .unwrap()
            })
            .collect();
        let ds = Dataset::new(pairs, "mem".into(), SplitTag::Heldout).unwrap();
        (g, lm, ds)
    }

    fn decode(seed: u64) -> DecodeConfig {
        DecodeConfig {
            temperature: 1.0,
            max_new_tokens: 6,
            seed,
        }
    }

    #[test]
    fn distance_oracle_judge_agrees_perfectly() {
        let (guide, lm, ds) = tiny_world();
        let judge = GuideDistanceJudge { guide: &guide };
        let report =
            pairwise_consistency(&guide, &lm, &ds.pairs, &judge, &decode(1), &decode(2)).unwrap();
        assert_eq!(report.disagreements, 0);
        assert!(report.agreements > 0);
        assert_eq!(report.rate, 1.0);
        assert_eq!(report.verdicts.len(), report.agreements);
    }

    #[test]
    fn consistency_requires_distinct_seeds_and_nonempty_subset() {
        let (guide, lm, ds) = tiny_world();
        let judge = RandomJudge { seed: 0 };
        assert!(pairwise_consistency(&guide, &lm, &ds.pairs, &judge, &decode(1), &decode(1)).is_err());
        assert!(pairwise_consistency(&guide, &lm, &[], &judge, &decode(1), &decode(2)).is_err());
    }

    #[test]
    fn reward_margin_at_reference_is_exactly_zero_and_flagged() {
        let (_, lm, ds) = tiny_world();
        let report = reward_margin_eval(&lm, &lm, &ds.pairs, 0.1, &decode(3)).unwrap();
        assert_eq!(report.mean_margin, 0.0);
        assert_eq!(report.fraction_positive, 0.0);
        assert!(report.degenerate);
        assert_eq!(report.zero_count, ds.len());
        assert!(report.margins.iter().all(|m| m.margin == 0.0));
    }

    #[test]
    fn reward_margin_antisymmetry_through_the_margin_op() {
        let (_, lm, _) = tiny_world();
        let other = LmParams::<f32>::init(lm.config, 9).unwrap();
        let z = crate::align::implicit_reward_margin(&lm, &other, &[97], &[98], &[99], 0.1).unwrap();
        let neg =
            crate::align::implicit_reward_margin(&lm, &other, &[97], &[99], &[98], 0.1).unwrap();
        assert_eq!(z, -neg);
    }

    #[test]
    fn task_checker_judge_prefers_correct_answers() {
        let t = Tokenizer;
        let prompt = t.tokenize(b"reverse: abc");
        let gold = t.tokenize(b"cba");
        let right = t.tokenize(b"cba");
        let wrong = t.tokenize(b"abc");
        let judge = TaskCheckerJudge;
        assert_eq!(judge.prefer(0, &prompt, &gold, &right, &wrong), Preferred::A);
        assert_eq!(judge.prefer(0, &prompt, &gold, &wrong, &right), Preferred::B);
    }

    #[test]
    fn random_judge_is_deterministic_and_roughly_fair() {
        let judge = RandomJudge { seed: 11 };
        let empty: [u32; 0] = [];
        let mut a_count = 0;
        for i in 0..400 {
            let v1 = judge.prefer(i, &empty, &empty, &empty, &empty);
            let v2 = judge.prefer(i, &empty, &empty, &empty, &empty);
            assert_eq!(v1, v2);
            if v1 == Preferred::A {
                a_count += 1;
            }
        }
        let frac = a_count as f64 / 400.0;
        assert!((frac - 0.5).abs() < 0.1, "{frac}");
    }

    #[test]
    fn emit_metrics_header_only_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("margins.csv");

        emit_metrics::<MarginRecord>(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "pair_index,margin");

        let r1 = MarginRecord {
            pair_index: 0,
            margin: 0.25,
        };
        let r2 = MarginRecord {
            pair_index: 1,
            margin: -1.5,
        };
        emit_metrics(&[r1.clone()], &path).unwrap();
        emit_metrics(&[r2.clone()], &path).unwrap();
        let back: Vec<MarginRecord> = read_csv(&path).unwrap();
        assert_eq!(back, vec![r1, r2]);
    }

    proptest! {
        #[test]
        fn histogram_conserves_sample_count(
            values in proptest::collection::vec(0.0f64..10.0, 0..200),
            cut in 1.0f64..9.0,
        ) {
            let edges = [0.0, cut, 10.0 - 0.5];
            let h = distance_histogram(&values, &edges).unwrap();
            let total: u64 = h.counts.iter().sum::<u64>() + h.overflow;
            prop_assert_eq!(total as usize, values.len());
        }
    }
}

//! Corpus handling: byte-level tokenization, prompt/response pairs, JSONL
//! ingestion, deterministic splits, and the generated-sample store.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub type TokenId = u32;

/// Special token ids sit at the top of the vocabulary: PAD, BOS, SEP, EOS.
/// With the standard byte vocabulary of 260 this gives 256..=259.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub sep: TokenId,
    pub eos: TokenId,
}

impl SpecialTokens {
    pub fn for_vocab(vocab_size: usize) -> SpecialTokens {
        assert!(vocab_size >= 5, "vocab must hold 4 specials plus a symbol");
        let v = vocab_size as TokenId;
        SpecialTokens {
            pad: v - 4,
            bos: v - 3,
            sep: v - 2,
            eos: v - 1,
        }
    }
}

/// Byte-level tokenizer: ids 0..=255 are raw bytes, 256..=259 are specials.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub const VOCAB_SIZE: usize = 260;
    pub const PAD: TokenId = 256;
    pub const BOS: TokenId = 257;
    pub const SEP: TokenId = 258;
    pub const EOS: TokenId = 259;

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_vocab(Self::VOCAB_SIZE)
    }

    /// One token per byte; never produces special ids.
    pub fn tokenize(&self, text: &[u8]) -> Vec<TokenId> {
        text.iter().map(|&b| b as TokenId).collect()
    }

    /// Exact inverse of `tokenize`. Errors on special or out-of-range ids.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<Vec<u8>> {
        tokens
            .iter()
            .map(|&t| {
                u8::try_from(t).map_err(|_| Error::config(format!("token id {t} is not a byte")))
            })
            .collect()
    }

    /// Like `detokenize` but silently drops non-byte ids. Used when rendering
    /// model samples (which may contain special tokens) for judging or display.
    pub fn detokenize_lossy(&self, tokens: &[TokenId]) -> Vec<u8> {
        tokens
            .iter()
            .filter_map(|&t| u8::try_from(t).ok())
            .collect()
    }
}

/// One gold instruction-tuning example. `response_tokens` carries its
/// terminating EOS; `response_body()` strips it for encoding helpers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptResponsePair {
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
}

impl PromptResponsePair {
    pub fn new(prompt_tokens: Vec<TokenId>, response_body: Vec<TokenId>) -> Result<Self> {
        if prompt_tokens.is_empty() {
            return Err(Error::config("prompt must be nonempty"));
        }
        if response_body.is_empty() {
            return Err(Error::config("response must be nonempty"));
        }
        for &t in prompt_tokens.iter().chain(response_body.iter()) {
            if t == Tokenizer::PAD {
                return Err(Error::config("PAD token inside pair"));
            }
            if t == Tokenizer::EOS {
                return Err(Error::config("EOS token inside pair body"));
            }
        }
        let mut response_tokens = response_body;
        response_tokens.push(Tokenizer::EOS);
        Ok(PromptResponsePair {
            prompt_tokens,
            response_tokens,
        })
    }

    pub fn from_text(tokenizer: &Tokenizer, prompt: &str, response: &str) -> Result<Self> {
        Self::new(
            tokenizer.tokenize(prompt.as_bytes()),
            tokenizer.tokenize(response.as_bytes()),
        )
    }

    /// Response tokens without the terminating EOS.
    pub fn response_body(&self) -> &[TokenId] {
        &self.response_tokens[..self.response_tokens.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Heldout,
}

/// An ordered, immutable collection of pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<PromptResponsePair>,
    pub source_path: String,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(pairs: Vec<PromptResponsePair>, source_path: String, split_tag: SplitTag) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(PathBuf::from(source_path)));
        }
        Ok(Dataset {
            pairs,
            source_path,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Layout of one encoded pair: `[BOS] x [SEP] y [EOS]`.
/// `response_start..tokens.len()` are the response positions (y plus EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub tokens: Vec<TokenId>,
    pub response_start: usize,
}

impl EncodedPair {
    pub fn response_range(&self) -> std::ops::Range<usize> {
        self.response_start..self.tokens.len()
    }
}

/// Lay out `[BOS] x [SEP] y [EOS]` and report the response index range.
pub fn encode_pair(
    prompt: &[TokenId],
    response_body: &[TokenId],
    specials: SpecialTokens,
    context_len: usize,
) -> Result<EncodedPair> {
    if prompt.is_empty() {
        return Err(Error::config("prompt must be nonempty"));
    }
    if response_body.is_empty() {
        return Err(Error::config("response must be nonempty"));
    }
    encode_pair_relaxed(prompt, response_body, specials, context_len)
}

/// Same layout but permits an empty response (range covers EOS only).
/// Model-internal scoring paths use this so degenerate samples stay scoreable.
pub(crate) fn encode_pair_relaxed(
    prompt: &[TokenId],
    response_body: &[TokenId],
    specials: SpecialTokens,
    context_len: usize,
) -> Result<EncodedPair> {
    let len = prompt.len() + response_body.len() + 3;
    if len > context_len {
        return Err(Error::Length {
            len,
            max: context_len,
        });
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.push(specials.bos);
    tokens.extend_from_slice(prompt);
    tokens.push(specials.sep);
    let response_start = tokens.len();
    tokens.extend_from_slice(response_body);
    tokens.push(specials.eos);
    Ok(EncodedPair {
        tokens,
        response_start,
    })
}

#[derive(Deserialize)]
struct JsonlPair {
    prompt: String,
    response: String,
}

/// Load a UTF-8 JSONL corpus: one `{"prompt": ..., "response": ...}` per line.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let tokenizer = Tokenizer;
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let pair = PromptResponsePair::from_text(&tokenizer, &parsed.prompt, &parsed.response)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        pairs.push(pair);
    }
    Dataset::new(pairs, path.display().to_string(), SplitTag::Train)
}

/// Write a corpus as JSONL. Prompts/responses must be valid UTF-8 text.
pub fn save_jsonl(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (prompt, response) in pairs {
        let line = serde_json::json!({ "prompt": prompt, "response": response });
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Deterministic disjoint split. Heldout size is round(n * fraction),
/// clamped so both sides stay nonempty. Original corpus order is preserved
/// within each side.
pub fn split(dataset: &Dataset, heldout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(Error::config(format!(
            "heldout fraction must be in (0,1), got {heldout_fraction}"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::config("split needs at least 2 pairs"));
    }
    let heldout_n = ((n as f64 * heldout_fraction).round() as usize).clamp(1, n - 1);

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, Purpose::Split, 0, 0);
    indices.shuffle(&mut rng);

    let mut heldout_idx: Vec<usize> = indices[..heldout_n].to_vec();
    let mut train_idx: Vec<usize> = indices[heldout_n..].to_vec();
    heldout_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |idx: &[usize]| -> Vec<PromptResponsePair> {
        idx.iter().map(|&i| dataset.pairs[i].clone()).collect()
    };
    let train = Dataset::new(pick(&train_idx), dataset.source_path.clone(), SplitTag::Train)?;
    let heldout = Dataset::new(
        pick(&heldout_idx),
        dataset.source_path.clone(),
        SplitTag::Heldout,
    )?;
    Ok((train, heldout))
}

/// One model-generated response for a dataset pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub pair_index: usize,
    /// Sampled tokens; ends with EOS unless `truncated`.
    pub generated: Vec<TokenId>,
    pub iteration: usize,
    pub seed: u64,
    pub truncated: bool,
}

impl GenerationRecord {
    /// Generated tokens without a terminating EOS.
    pub fn body(&self) -> &[TokenId] {
        match self.generated.last() {
            Some(&t) if t == Tokenizer::EOS => &self.generated[..self.generated.len() - 1],
            _ => &self.generated,
        }
    }
}

pub fn save_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_ascii_is_byte_identity() {
        let t = Tokenizer;
        assert_eq!(t.tokenize(b"ab"), vec![97, 98]);
        assert_eq!(t.tokenize(b""), Vec::<TokenId>::new());
    }

    #[test]
    fn tokenize_round_trips_multibyte_text() {
        let t = Tokenizer;
        let s = "héllo";
        let back = t.detokenize(&t.tokenize(s.as_bytes())).unwrap();
        assert_eq!(back, s.as_bytes());
    }

    #[test]
    fn detokenize_rejects_specials() {
        let t = Tokenizer;
        assert!(t.detokenize(&[97, Tokenizer::EOS]).is_err());
        assert_eq!(t.detokenize_lossy(&[97, Tokenizer::EOS, 98]), b"ab");
    }

    #[test]
    fn encode_pair_layout_single_tokens() {
        let sp = SpecialTokens::for_vocab(260);
        let enc = encode_pair(&[97], &[98], sp, 256).unwrap();
        assert_eq!(enc.tokens, vec![257, 97, 258, 98, 259]);
        assert_eq!(enc.response_range(), 3..5);
    }

    #[test]
    fn encode_pair_layout_two_prompt_tokens() {
        let sp = SpecialTokens::for_vocab(260);
        let enc = encode_pair(&[97, 98], &[99], sp, 256).unwrap();
        assert_eq!(enc.tokens, vec![257, 97, 98, 258, 99, 259]);
        assert_eq!(enc.response_range(), 4..6);
    }

    #[test]
    fn encode_pair_length_error_at_boundary() {
        let sp = SpecialTokens::for_vocab(260);
        let prompt = vec![97u32; 256];
        let err = encode_pair(&prompt, &[98], sp, 256).unwrap_err();
        assert!(matches!(err, Error::Length { .. }));
    }

    #[test]
    fn pair_rejects_interior_specials() {
        assert!(PromptResponsePair::new(vec![97], vec![98, Tokenizer::PAD]).is_err());
        assert!(PromptResponsePair::new(vec![97], vec![Tokenizer::EOS]).is_err());
        assert!(PromptResponsePair::new(vec![], vec![98]).is_err());
        assert!(PromptResponsePair::new(vec![97], vec![]).is_err());
    }

    #[test]
    fn pair_response_carries_single_terminal_eos() {
        let p = PromptResponsePair::new(vec![97], vec![98, 99]).unwrap();
        assert_eq!(p.response_tokens, vec![98, 99, Tokenizer::EOS]);
        assert_eq!(p.response_body(), &[98, 99]);
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_jsonl_single_pair() {
        let f = write_lines(&[r#"{"prompt":"a","response":"b"}"#]);
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pairs[0].prompt_tokens, vec![97]);
    }

    #[test]
    fn load_jsonl_missing_field_names_line() {
        let f = write_lines(&[r#"{"prompt":"a"}"#]);
        match load_jsonl(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_jsonl_preserves_order() {
        let f = write_lines(&[
            r#"{"prompt":"a","response":"1"}"#,
            r#"{"prompt":"b","response":"2"}"#,
            r#"{"prompt":"c","response":"3"}"#,
        ]);
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.len(), 3);
        let prompts: Vec<u32> = ds.pairs.iter().map(|p| p.prompt_tokens[0]).collect();
        assert_eq!(prompts, vec![97, 98, 99]);
    }

    #[test]
    fn load_jsonl_empty_file_is_error() {
        let f = write_lines(&[]);
        assert!(matches!(
            load_jsonl(f.path()).unwrap_err(),
            Error::EmptyDataset(_)
        ));
    }

    fn toy_dataset(n: usize) -> Dataset {
        let pairs = (0..n)
            .map(|i| PromptResponsePair::new(vec![97 + (i % 20) as u32], vec![98]).unwrap())
            .collect();
        Dataset::new(pairs, "mem".into(), SplitTag::Train).unwrap()
    }

    #[test]
    fn split_is_deterministic_with_requested_sizes() {
        let ds = toy_dataset(10);
        let (tr1, he1) = split(&ds, 0.2, 7).unwrap();
        let (tr2, he2) = split(&ds, 0.2, 7).unwrap();
        assert_eq!(tr1.len(), 8);
        assert_eq!(he1.len(), 2);
        assert_eq!(tr1.pairs, tr2.pairs);
        assert_eq!(he1.pairs, he2.pairs);
        assert_eq!(tr1.split_tag, SplitTag::Train);
        assert_eq!(he1.split_tag, SplitTag::Heldout);
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        let ds = toy_dataset(10);
        assert!(split(&ds, 0.0, 7).is_err());
        assert!(split(&ds, 1.0, 7).is_err());
    }

    #[test]
    fn split_seeds_typically_differ() {
        let ds = toy_dataset(40);
        let (_, he1) = split(&ds, 0.5, 1).unwrap();
        let (_, he2) = split(&ds, 0.5, 2).unwrap();
        assert_ne!(he1.pairs, he2.pairs);
    }

    #[test]
    fn generation_store_round_trips() {
        let recs = vec![
            GenerationRecord {
                pair_index: 0,
                generated: vec![98, Tokenizer::EOS],
                iteration: 1,
                seed: 42,
                truncated: false,
            },
            GenerationRecord {
                pair_index: 1,
                generated: vec![98, 99],
                iteration: 1,
                seed: 43,
                truncated: true,
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_generations(f.path(), &recs).unwrap();
        let back = load_generations(f.path()).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].body(), &[98]);
        assert_eq!(back[1].body(), &[98, 99]);
    }

    proptest! {
        #[test]
        fn tokenize_round_trips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = Tokenizer;
            let toks = t.tokenize(&bytes);
            prop_assert!(toks.iter().all(|&id| id < 256));
            prop_assert_eq!(t.detokenize(&toks).unwrap(), bytes);
        }

        #[test]
        fn encode_pair_response_range_covers_exactly_y_and_eos(
            x in proptest::collection::vec(0u32..256, 1..20),
            y in proptest::collection::vec(0u32..256, 1..20),
        ) {
            let sp = SpecialTokens::for_vocab(260);
            let enc = encode_pair(&x, &y, sp, 256).unwrap();
            let range = enc.response_range();
            prop_assert_eq!(range.len(), y.len() + 1);
            prop_assert_eq!(&enc.tokens[range.start..range.end - 1], y.as_slice());
            prop_assert_eq!(enc.tokens[range.end - 1], sp.eos);
            prop_assert_eq!(enc.tokens[range.start - 1], sp.sep);
        }

        #[test]
        fn split_is_a_partition(n in 2usize..60, frac in 0.05f64..0.95, seed in 0u64..50) {
            let ds = toy_dataset(n);
            let (tr, he) = split(&ds, frac, seed).unwrap();
            prop_assert_eq!(tr.len() + he.len(), n);
            // Multiset union equals the input: count occurrences per pair key.
            let key = |p: &PromptResponsePair| p.prompt_tokens.clone();
            let mut all: Vec<_> = tr.pairs.iter().chain(he.pairs.iter()).map(key).collect();
            let mut orig: Vec<_> = ds.pairs.iter().map(key).collect();
            all.sort();
            orig.sort();
            prop_assert_eq!(all, orig);
        }
    }
}

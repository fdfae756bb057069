//! MLM corruption under four strategies: char masking (CM), whole-word
//! masking (WWM), n-gram span masking and Mac-style synonym corruption.
//!
//! Selection is quota-based (exact count = round(rate × real tokens)) for
//! CM and greedy span packing for the span strategies, so realized rates
//! have bounded variance. Per-line rngs are derived as hash(seed, line),
//! which makes masking embarrassingly parallel without changing results.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_char, EncodedSequence, EncodedToken, FeatureAlphabets, Vocab, CLS_ID, MASK_ID,
    NUM_SPECIALS, PAD_ID, SEP_ID,
};
use crate::feature_tables::FeatureDictionary;
use crate::util::{derive_rng, ordered_map};

/// Label value at positions that do not participate in the MLM loss.
pub const IGNORE_LABEL: i64 = -100;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("strategy {0:?} requires word boundaries but the sequence has none")]
    MissingBoundaries(MaskingStrategy),
    #[error("invalid masking config: {0}")]
    InvalidConfig(String),
    #[error("cannot read synonym lexicon {path}: {source}")]
    LexiconIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed synonym lexicon line {0}")]
    LexiconFormat(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingStrategy {
    CM,
    WWM,
    NGRAM,
    MAC,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub strategy: MaskingStrategy,
    pub select_rate: f64,
    /// (mask-or-synonym, random, keep); must sum to 1.
    pub corruption_mix: [f64; 3],
    /// Span length weights for 1..=4 words; must sum to 1.
    pub ngram_weights: [f64; 4],
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            strategy: MaskingStrategy::CM,
            select_rate: 0.15,
            corruption_mix: [0.8, 0.1, 0.1],
            ngram_weights: [0.4, 0.3, 0.2, 0.1],
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.select_rate > 0.0 && self.select_rate <= 1.0) {
            return Err(MaskError::InvalidConfig(format!(
                "select_rate must be in (0,1], got {}",
                self.select_rate
            )));
        }
        if (self.corruption_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MaskError::InvalidConfig("corruption_mix must sum to 1".into()));
        }
        if self.corruption_mix.iter().any(|&p| p < 0.0) {
            return Err(MaskError::InvalidConfig("corruption_mix must be non-negative".into()));
        }
        if (self.ngram_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MaskError::InvalidConfig("ngram_weights must sum to 1".into()));
        }
        Ok(())
    }
}

/// Word → similar words, loaded from a `word\tsyn1,syn2,...` TSV.
#[derive(Debug, Clone, Default)]
pub struct SynonymLexicon {
    map: HashMap<String, Vec<String>>,
}

impl SynonymLexicon {
    pub fn parse(text: &str) -> Result<Self, MaskError> {
        let mut map = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, syns) =
                line.split_once('\t').ok_or(MaskError::LexiconFormat(idx + 1))?;
            let syns: Vec<String> = syns
                .split(',')
                .map(|s| s.to_string())
                .filter(|s| !s.is_empty() && s != word)
                .collect();
            map.insert(word.to_string(), syns);
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let text = std::fs::read_to_string(path).map_err(|source| MaskError::LexiconIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.map.get(word).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A selected span: token positions `[start, start+len)` covering
/// `word_count` segmentation words (1 for CM).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectedSpan {
    pub start: usize,
    pub len: usize,
    pub word_count: usize,
}

fn real_char_positions(seq: &EncodedSequence) -> Vec<usize> {
    seq.tokens
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            seq.attention_mask[*i] == 1
                && t.word_id != CLS_ID
                && t.word_id != SEP_ID
                && t.word_id != PAD_ID
        })
        .map(|(i, _)| i)
        .collect()
}

/// Pick the spans to corrupt. Never touches CLS/SEP/PAD.
pub fn select_positions<R: Rng>(
    seq: &EncodedSequence,
    config: &MaskingConfig,
    rng: &mut R,
) -> Result<Vec<SelectedSpan>, MaskError> {
    let real = real_char_positions(seq);
    if real.is_empty() {
        return Ok(Vec::new());
    }
    let quota = ((config.select_rate * real.len() as f64).round() as usize).max(1);

    let mut spans = match config.strategy {
        MaskingStrategy::CM => {
            let mut positions = real.clone();
            positions.shuffle(rng);
            positions
                .into_iter()
                .take(quota)
                .map(|p| SelectedSpan { start: p, len: 1, word_count: 1 })
                .collect::<Vec<_>>()
        }
        MaskingStrategy::WWM => {
            let words = seq
                .word_boundaries
                .clone()
                .ok_or(MaskError::MissingBoundaries(config.strategy))?;
            let mut order: Vec<usize> = (0..words.len()).collect();
            order.shuffle(rng);
            let mut selected = 0usize;
            let mut out = Vec::new();
            for wi in order {
                if selected >= quota {
                    break;
                }
                let (start, len) = words[wi];
                if len == 0 {
                    continue;
                }
                out.push(SelectedSpan { start, len, word_count: 1 });
                selected += len;
            }
            out
        }
        MaskingStrategy::NGRAM | MaskingStrategy::MAC => {
            let words = seq
                .word_boundaries
                .clone()
                .ok_or(MaskError::MissingBoundaries(config.strategy))?;
            select_ngram_spans(&words, quota, config, rng)
        }
    };
    spans.sort_by_key(|s| s.start);
    Ok(spans)
}

fn select_ngram_spans<R: Rng>(
    words: &[(usize, usize)],
    quota: usize,
    config: &MaskingConfig,
    rng: &mut R,
) -> Vec<SelectedSpan> {
    let mut taken = vec![false; words.len()];
    let mut selected = 0usize;
    let mut out = Vec::new();
    while selected < quota {
        let mut n = draw_ngram_len(config.ngram_weights, rng);
        let start_word = loop {
            let candidates: Vec<usize> = (0..words.len().saturating_sub(n - 1))
                .filter(|&i| (i..i + n).all(|j| !taken[j]))
                .collect();
            if let Some(&i) = candidates.as_slice().choose(rng) {
                break Some(i);
            }
            if n == 1 {
                break None;
            }
            n -= 1;
        };
        let Some(i) = start_word else { break };
        for flag in taken.iter_mut().take(i + n).skip(i) {
            *flag = true;
        }
        let start = words[i].0;
        let len: usize = words[i..i + n].iter().map(|w| w.1).sum();
        if len == 0 {
            continue;
        }
        out.push(SelectedSpan { start, len, word_count: n });
        selected += len;
    }
    out
}

fn draw_ngram_len<R: Rng>(weights: [f64; 4], rng: &mut R) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i + 1;
        }
    }
    4
}

/// Which corruption bucket a span fell into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    /// MASK token (CM/WWM/NGRAM) or synonym replacement (MAC).
    MaskOrSynonym,
    Random,
    Keep,
}

/// One corrupted training row.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRow {
    pub tokens: Vec<EncodedToken>,
    pub labels: Vec<i64>,
    pub attention_mask: Vec<u8>,
    /// Bucket drawn per span, aligned with the span list (for statistics).
    pub buckets: Vec<(SelectedSpan, Bucket)>,
}

/// Batch of corrupted rows: ids, labels and masks as dense grids.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedRow>,
}

impl MaskedBatch {
    pub fn seq_len(&self) -> usize {
        self.rows.first().map(|r| r.tokens.len()).unwrap_or(0)
    }

    pub fn input_ids(&self) -> Vec<Vec<u32>> {
        self.rows
            .iter()
            .map(|r| r.tokens.iter().map(|t| t.word_id).collect())
            .collect()
    }

    pub fn labels(&self) -> Vec<Vec<i64>> {
        self.rows.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn attention_mask(&self) -> Vec<Vec<u8>> {
        self.rows.iter().map(|r| r.attention_mask.clone()).collect()
    }
}

/// Apply the corruption mix to the selected spans of one sequence.
/// `chars` are the original line characters; `chars[p-1]` corresponds to
/// token position `p` (offset by the leading CLS).
#[allow(clippy::too_many_arguments)]
pub fn corrupt<R: Rng>(
    seq: &EncodedSequence,
    chars: &[char],
    spans: &[SelectedSpan],
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    lexicon: Option<&SynonymLexicon>,
    config: &MaskingConfig,
    rng: &mut R,
) -> MaskedRow {
    let chaizi_capacity = seq.tokens[0].chaizi.capacity();
    let mut tokens = seq.tokens.clone();
    let mut labels = vec![IGNORE_LABEL; tokens.len()];
    let mut buckets = Vec::with_capacity(spans.len());
    let mut trunc = 0u64;

    for span in spans {
        let x: f64 = rng.gen();
        let bucket = if x < config.corruption_mix[0] {
            Bucket::MaskOrSynonym
        } else if x < config.corruption_mix[0] + config.corruption_mix[1] {
            Bucket::Random
        } else {
            Bucket::Keep
        };
        for p in span.start..span.start + span.len {
            labels[p] = seq.tokens[p].word_id as i64;
        }
        match bucket {
            Bucket::Keep => {}
            Bucket::Random => {
                for p in span.start..span.start + span.len {
                    tokens[p] = random_token(vocab, dict, alphabets, chaizi_capacity, rng);
                }
            }
            Bucket::MaskOrSynonym => match config.strategy {
                MaskingStrategy::MAC => {
                    apply_synonym(
                        &mut tokens,
                        chars,
                        span,
                        seq,
                        vocab,
                        dict,
                        alphabets,
                        lexicon,
                        chaizi_capacity,
                        rng,
                        &mut trunc,
                    );
                }
                _ => {
                    for p in span.start..span.start + span.len {
                        tokens[p] = EncodedToken::special(MASK_ID, chaizi_capacity);
                    }
                }
            },
        }
        buckets.push((*span, bucket));
    }

    MaskedRow { tokens, labels, attention_mask: seq.attention_mask.clone(), buckets }
}

fn random_token<R: Rng>(
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    chaizi_capacity: usize,
    rng: &mut R,
) -> EncodedToken {
    if vocab.size() as u32 <= NUM_SPECIALS {
        return EncodedToken::special(crate::encoders::UNK_ID, chaizi_capacity);
    }
    let id = rng.gen_range(NUM_SPECIALS..vocab.size() as u32);
    let c = vocab.token_of(id).and_then(|t| t.chars().next()).unwrap();
    let mut trunc = 0;
    encode_char(c, vocab, dict, alphabets, chaizi_capacity, &mut trunc)
        .unwrap_or_else(|_| EncodedToken::special(crate::encoders::UNK_ID, chaizi_capacity))
}

/// Mac corruption: per word in the span, try an equal-length synonym;
/// otherwise degrade to random word replacement.
#[allow(clippy::too_many_arguments)]
fn apply_synonym<R: Rng>(
    tokens: &mut [EncodedToken],
    chars: &[char],
    span: &SelectedSpan,
    seq: &EncodedSequence,
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    lexicon: Option<&SynonymLexicon>,
    chaizi_capacity: usize,
    rng: &mut R,
    trunc: &mut u64,
) {
    let words: Vec<(usize, usize)> = seq
        .word_boundaries
        .as_ref()
        .map(|ws| {
            ws.iter()
                .copied()
                .filter(|(s, l)| *s >= span.start && s + l <= span.start + span.len)
                .collect()
        })
        .unwrap_or_else(|| vec![(span.start, span.len)]);
    for (start, len) in words {
        let word: String = (start..start + len).map(|p| chars[p - 1]).collect();
        let candidates: Vec<&String> = lexicon
            .map(|lex| {
                lex.synonyms(&word).iter().filter(|s| s.chars().count() == len).collect()
            })
            .unwrap_or_default();
        if let Some(syn) = candidates.as_slice().choose(rng) {
            for (offset, c) in syn.chars().enumerate() {
                tokens[start + offset] =
                    encode_char(c, vocab, dict, alphabets, chaizi_capacity, trunc)
                        .unwrap_or_else(|_| {
                            EncodedToken::special(crate::encoders::UNK_ID, chaizi_capacity)
                        });
            }
        } else {
            for p in start..start + len {
                tokens[p] = random_token(vocab, dict, alphabets, chaizi_capacity, rng);
            }
        }
    }
}

/// Aggregate masking statistics over a corpus, for validating the
/// configured percentages empirically.
#[derive(Debug, Clone, Serialize)]
pub struct MaskStats {
    pub lines: usize,
    pub real_tokens: u64,
    pub selected_tokens: u64,
    pub selected_rate: f64,
    /// Fraction of selected positions per bucket (mask-or-synonym, random, keep).
    pub bucket_mix: [f64; 3],
    /// Fraction of spans of word-length 1..=4.
    pub span_length_histogram: [f64; 4],
}

impl MaskStats {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("lines={}\n", self.lines));
        s.push_str(&format!("real_tokens={}\n", self.real_tokens));
        s.push_str(&format!("selected_tokens={}\n", self.selected_tokens));
        s.push_str(&format!("selected_rate={:.6}\n", self.selected_rate));
        s.push_str(&format!(
            "bucket_mix={:.6},{:.6},{:.6}\n",
            self.bucket_mix[0], self.bucket_mix[1], self.bucket_mix[2]
        ));
        s.push_str(&format!(
            "span_length_histogram={:.6},{:.6},{:.6},{:.6}\n",
            self.span_length_histogram[0],
            self.span_length_histogram[1],
            self.span_length_histogram[2],
            self.span_length_histogram[3]
        ));
        s
    }
}

/// Mask every line of a pre-encoded corpus once and aggregate the realized
/// rates. Deterministic given the config seed; lines are processed in
/// parallel with per-line derived rngs.
#[allow(clippy::too_many_arguments)]
pub fn mask_statistics(
    sequences: &[(EncodedSequence, Vec<char>)],
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    lexicon: Option<&SynonymLexicon>,
    config: &MaskingConfig,
    threads: usize,
) -> Result<MaskStats, MaskError> {
    config.validate()?;
    struct LineStats {
        real: u64,
        selected: u64,
        buckets: [u64; 3],
        span_lengths: [u64; 4],
    }
    let per_line: Vec<Result<LineStats, MaskError>> =
        ordered_map(sequences, threads, |i, (seq, chars)| {
            let mut sel_rng = derive_rng(config.seed, &["select"], &[i as u64]);
            let spans = select_positions(seq, config, &mut sel_rng)?;
            let mut cor_rng = derive_rng(config.seed, &["corrupt"], &[i as u64]);
            let row = corrupt(
                seq, chars, &spans, vocab, dict, alphabets, lexicon, config, &mut cor_rng,
            );
            let mut st = LineStats {
                real: real_char_positions(seq).len() as u64,
                selected: 0,
                buckets: [0; 3],
                span_lengths: [0; 4],
            };
            for (span, bucket) in &row.buckets {
                st.selected += span.len as u64;
                let b = match bucket {
                    Bucket::MaskOrSynonym => 0,
                    Bucket::Random => 1,
                    Bucket::Keep => 2,
                };
                st.buckets[b] += span.len as u64;
                if (1..=4).contains(&span.word_count) {
                    st.span_lengths[span.word_count - 1] += 1;
                }
            }
            Ok(st)
        });

    let mut real = 0u64;
    let mut selected = 0u64;
    let mut buckets = [0u64; 3];
    let mut span_lengths = [0u64; 4];
    let mut lines = 0usize;
    for st in per_line {
        let st = st?;
        real += st.real;
        selected += st.selected;
        for i in 0..3 {
            buckets[i] += st.buckets[i];
        }
        for i in 0..4 {
            span_lengths[i] += st.span_lengths[i];
        }
        lines += 1;
    }
    let total_spans: u64 = span_lengths.iter().sum();
    Ok(MaskStats {
        lines,
        real_tokens: real,
        selected_tokens: selected,
        selected_rate: if real > 0 { selected as f64 / real as f64 } else { 0.0 },
        bucket_mix: if selected > 0 {
            [
                buckets[0] as f64 / selected as f64,
                buckets[1] as f64 / selected as f64,
                buckets[2] as f64 / selected as f64,
            ]
        } else {
            [0.0; 3]
        },
        span_length_histogram: if total_spans > 0 {
            [
                span_lengths[0] as f64 / total_spans as f64,
                span_lengths[1] as f64 / total_spans as f64,
                span_lengths[2] as f64 / total_spans as f64,
                span_lengths[3] as f64 / total_spans as f64,
            ]
        } else {
            [0.0; 4]
        },
    })
}

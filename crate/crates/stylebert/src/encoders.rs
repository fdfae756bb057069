//! Turning characters and sentences into fixed-shape integer feature
//! sequences plus word-vocabulary ids, ready for embedding lookup.

use std::collections::{BTreeMap, HashMap};

use crate::feature_tables::{CharacterFeatureRecord, FeatureDictionary};
use crate::util::sha256_hex;

pub const PINYIN_CAPACITY: usize = 8;
pub const WUBI_CAPACITY: usize = 4;
pub const DEFAULT_CHAIZI_CAPACITY: usize = 8;

/// Reserved word-vocab ids.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Reserved feature-alphabet indices (per alphabet).
pub const FEAT_PAD: u32 = 0;
pub const FEAT_UNK: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("{feature} code for '{character}' has length {len}, exceeding capacity {capacity}")]
    CapacityExceeded {
        feature: &'static str,
        character: char,
        len: usize,
        capacity: usize,
    },
    #[error("word boundaries cover {covered} characters but text has {actual}")]
    BoundaryMismatch { covered: usize, actual: usize },
    #[error("malformed vocab file: {0}")]
    VocabFormat(String),
}

/// Character-level word vocabulary with five reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    char_to_id: HashMap<char, u32>,
}

impl Vocab {
    /// Build from a corpus of lines: specials plus every character whose
    /// frequency is at least `min_count`, ordered by (frequency desc,
    /// codepoint asc).
    pub fn build(lines: &[String], min_count: u64) -> Result<Self, EncodeError> {
        if lines.is_empty() || lines.iter().all(|l| l.is_empty()) {
            return Err(EncodeError::EmptyCorpus);
        }
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        for line in lines {
            for c in line.chars() {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        let mut chars: Vec<(char, u64)> =
            counts.into_iter().filter(|(_, n)| *n >= min_count).collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut char_to_id = HashMap::new();
        for (c, _) in chars {
            char_to_id.insert(c, id_to_token.len() as u32);
            id_to_token.push(c.to_string());
        }
        Ok(Self { id_to_token, char_to_id })
    }

    /// One token per line, line number = id, specials first.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, EncodeError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() {
            return Err(EncodeError::VocabFormat("missing special tokens".into()));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *s {
                return Err(EncodeError::VocabFormat(format!(
                    "line {} must be {s}, found '{}'",
                    i + 1,
                    lines[i]
                )));
            }
        }
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut char_to_id = HashMap::new();
        for (i, line) in lines.iter().enumerate().skip(SPECIAL_TOKENS.len()) {
            let mut chars = line.chars();
            let c = chars
                .next()
                .ok_or_else(|| EncodeError::VocabFormat(format!("empty token at line {}", i + 1)))?;
            if chars.next().is_some() {
                return Err(EncodeError::VocabFormat(format!(
                    "token at line {} is not a single character",
                    i + 1
                )));
            }
            if char_to_id.insert(c, id_to_token.len() as u32).is_some() {
                return Err(EncodeError::VocabFormat(format!("duplicate token '{c}'")));
            }
            id_to_token.push(c.to_string());
        }
        Ok(Self { id_to_token, char_to_id })
    }

    pub fn id_of(&self, c: char) -> u32 {
        self.char_to_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.render().as_bytes())
    }
}

/// Dense symbol-to-index maps for the three feature streams. Index 0 is
/// feature-PAD, index 1 feature-UNK in each alphabet. Pinyin letters and
/// tone digits share one 31-symbol alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureAlphabets {
    chaizi_radicals: Vec<char>,
    radical_to_index: HashMap<char, u32>,
}

impl FeatureAlphabets {
    pub fn from_dictionary(dict: &FeatureDictionary) -> Self {
        let chaizi_radicals: Vec<char> = dict.radical_alphabet().iter().copied().collect();
        let radical_to_index = chaizi_radicals
            .iter()
            .enumerate()
            .map(|(i, &r)| (r, i as u32 + 2))
            .collect();
        Self { chaizi_radicals, radical_to_index }
    }

    pub fn pinyin_letter_index(c: char) -> u32 {
        debug_assert!(c.is_ascii_lowercase());
        c as u32 - 'a' as u32 + 2
    }

    pub fn pinyin_tone_index(tone: u8) -> u32 {
        debug_assert!(tone <= 4);
        28 + tone as u32
    }

    /// 2 reserved + 26 letters + 5 tone digits.
    pub fn pinyin_size(&self) -> usize {
        33
    }

    pub fn wubi_key_index(c: char) -> u32 {
        debug_assert!(c.is_ascii_lowercase());
        c as u32 - 'a' as u32 + 2
    }

    /// 2 reserved + 26 letters.
    pub fn wubi_size(&self) -> usize {
        28
    }

    pub fn chaizi_radical_index(&self, r: char) -> u32 {
        self.radical_to_index.get(&r).copied().unwrap_or(FEAT_UNK)
    }

    /// 2 reserved + one index per radical in the dictionary.
    pub fn chaizi_size(&self) -> usize {
        self.chaizi_radicals.len() + 2
    }

    pub fn chaizi_radicals(&self) -> &[char] {
        &self.chaizi_radicals
    }

    pub fn digest(&self) -> String {
        let mut s = String::from("pinyin:26+5;wubi:26;chaizi:");
        for r in &self.chaizi_radicals {
            s.push(*r);
        }
        sha256_hex(s.as_bytes())
    }
}

/// A fixed-capacity integer feature sequence. Positions at and beyond
/// `true_length` hold feature-PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSequence {
    pub indices: Vec<u32>,
    pub true_length: usize,
}

impl FeatureSequence {
    pub fn all_pad(capacity: usize) -> Self {
        Self { indices: vec![FEAT_PAD; capacity], true_length: 0 }
    }

    fn from_indices(mut indices: Vec<u32>, capacity: usize) -> Self {
        let true_length = indices.len();
        indices.resize(capacity, FEAT_PAD);
        Self { indices, true_length }
    }

    pub fn capacity(&self) -> usize {
        self.indices.len()
    }
}

/// One token ready for the embedding layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedToken {
    pub word_id: u32,
    pub pinyin: FeatureSequence,
    pub wubi: FeatureSequence,
    pub chaizi: FeatureSequence,
}

impl EncodedToken {
    /// Specials (and masked positions) carry all-PAD feature sequences.
    pub fn special(word_id: u32, chaizi_capacity: usize) -> Self {
        Self {
            word_id,
            pinyin: FeatureSequence::all_pad(PINYIN_CAPACITY),
            wubi: FeatureSequence::all_pad(WUBI_CAPACITY),
            chaizi: FeatureSequence::all_pad(chaizi_capacity),
        }
    }
}

/// A framed, padded sentence: `[CLS] chars… [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub tokens: Vec<EncodedToken>,
    pub attention_mask: Vec<u8>,
    /// `(start, len)` spans in token positions, tiling the non-special real
    /// positions exactly. Present only when a segmentation was supplied.
    pub word_boundaries: Option<Vec<(usize, usize)>>,
}

impl EncodedSequence {
    /// Number of real (attention-mask 1) positions, including CLS/SEP.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Pinyin: `[letters…, tone digit]` padded to 8. Absent pinyin encodes as
/// all-PAD with true length 0. Codes longer than the capacity are an error,
/// never truncated.
pub fn encode_pinyin(
    record: &CharacterFeatureRecord,
    _alphabets: &FeatureAlphabets,
) -> Result<FeatureSequence, EncodeError> {
    match &record.pinyin {
        None => Ok(FeatureSequence::all_pad(PINYIN_CAPACITY)),
        Some(p) => {
            if p.rendered_len() > PINYIN_CAPACITY {
                return Err(EncodeError::CapacityExceeded {
                    feature: "pinyin",
                    character: record.character,
                    len: p.rendered_len(),
                    capacity: PINYIN_CAPACITY,
                });
            }
            let mut idx: Vec<u32> =
                p.letters.iter().map(|&c| FeatureAlphabets::pinyin_letter_index(c)).collect();
            idx.push(FeatureAlphabets::pinyin_tone_index(p.tone));
            Ok(FeatureSequence::from_indices(idx, PINYIN_CAPACITY))
        }
    }
}

/// Wubi: key indices padded to 4.
pub fn encode_wubi(
    record: &CharacterFeatureRecord,
    _alphabets: &FeatureAlphabets,
) -> Result<FeatureSequence, EncodeError> {
    match &record.wubi {
        None => Ok(FeatureSequence::all_pad(WUBI_CAPACITY)),
        Some(w) => {
            if w.keys.len() > WUBI_CAPACITY {
                return Err(EncodeError::CapacityExceeded {
                    feature: "wubi",
                    character: record.character,
                    len: w.keys.len(),
                    capacity: WUBI_CAPACITY,
                });
            }
            let idx: Vec<u32> =
                w.keys.iter().map(|&c| FeatureAlphabets::wubi_key_index(c)).collect();
            Ok(FeatureSequence::from_indices(idx, WUBI_CAPACITY))
        }
    }
}

/// Chaizi: radical indices in dictionary order, padded to `capacity`.
/// Longer decompositions are truncated tail-first; `truncations` counts
/// how often that happened.
pub fn encode_chaizi(
    record: &CharacterFeatureRecord,
    alphabets: &FeatureAlphabets,
    capacity: usize,
    truncations: &mut u64,
) -> FeatureSequence {
    assert!(capacity >= 1, "chaizi capacity must be at least 1");
    match &record.chaizi {
        None => FeatureSequence::all_pad(capacity),
        Some(c) => {
            let mut idx: Vec<u32> =
                c.radicals.iter().map(|&r| alphabets.chaizi_radical_index(r)).collect();
            if idx.len() > capacity {
                idx.truncate(capacity);
                *truncations += 1;
            }
            FeatureSequence::from_indices(idx, capacity)
        }
    }
}

/// Encode one character token: word-vocab id plus the three feature
/// sequences. OOV characters map to the UNK word id but keep whatever
/// features the dictionary has for them.
pub fn encode_char(
    c: char,
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    chaizi_capacity: usize,
    truncations: &mut u64,
) -> Result<EncodedToken, EncodeError> {
    let record = dict.lookup(c);
    Ok(EncodedToken {
        word_id: vocab.id_of(c),
        pinyin: encode_pinyin(&record, alphabets)?,
        wubi: encode_wubi(&record, alphabets)?,
        chaizi: encode_chaizi(&record, alphabets, chaizi_capacity, truncations),
    })
}

/// Frame, encode, truncate and pad one sentence.
#[allow(clippy::too_many_arguments)]
pub fn encode_sentence(
    text: &str,
    vocab: &Vocab,
    dict: &FeatureDictionary,
    alphabets: &FeatureAlphabets,
    max_len: usize,
    chaizi_capacity: usize,
    word_lengths: Option<&[usize]>,
    truncations: &mut u64,
) -> Result<EncodedSequence, EncodeError> {
    if max_len < 3 {
        return Err(EncodeError::MaxLenTooSmall(max_len));
    }
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(EncodeError::EmptyText);
    }
    if let Some(wl) = word_lengths {
        let covered: usize = wl.iter().sum();
        if covered != chars.len() {
            return Err(EncodeError::BoundaryMismatch { covered, actual: chars.len() });
        }
    }
    let body_cap = max_len - 2;
    let kept = chars.len().min(body_cap);

    let mut tokens = Vec::with_capacity(max_len);
    tokens.push(EncodedToken::special(CLS_ID, chaizi_capacity));
    for &c in &chars[..kept] {
        tokens.push(encode_char(c, vocab, dict, alphabets, chaizi_capacity, truncations)?);
    }
    tokens.push(EncodedToken::special(SEP_ID, chaizi_capacity));
    let real = tokens.len();
    while tokens.len() < max_len {
        tokens.push(EncodedToken::special(PAD_ID, chaizi_capacity));
    }
    let attention_mask: Vec<u8> =
        (0..max_len).map(|i| if i < real { 1 } else { 0 }).collect();

    let word_boundaries = word_lengths.map(|wl| {
        let mut spans = Vec::new();
        let mut pos = 1; // first char sits after CLS
        for &len in wl {
            if pos > kept {
                break;
            }
            let clipped = len.min(kept + 1 - pos);
            spans.push((pos, clipped));
            pos += len;
        }
        spans
    });

    Ok(EncodedSequence { tokens, attention_mask, word_boundaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_tables::{parse_dictionary_str, DictKind};
    use proptest::prelude::*;

    fn fixture_dict() -> FeatureDictionary {
        let p = parse_dictionary_str("国\tguo2\n好\thao3\n", DictKind::Pinyin, "p").unwrap();
        let w = parse_dictionary_str("国\tlgy\n好\tvbg\n伍\twgg\n", DictKind::Wubi, "w").unwrap();
        let c =
            parse_dictionary_str("国\t囗 王 丶\n好\t女 子\n赢\t亡 口 月 贝 凡\n", DictKind::Chaizi, "c")
                .unwrap();
        FeatureDictionary::build(&p, &w, &c)
    }

    #[test]
    fn vocab_orders_by_frequency_then_codepoint() {
        let v = Vocab::build(&["国国好".to_string()], 1).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.id_of('国'), 5);
        assert_eq!(v.id_of('好'), 6);
        assert_eq!(v.token_of(PAD_ID), Some("[PAD]"));
    }

    #[test]
    fn vocab_min_count_filters() {
        let v = Vocab::build(&["国".to_string()], 2).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id_of('国'), UNK_ID);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let lines = vec!["好国国界".to_string(), "界界".to_string()];
        let a = Vocab::build(&lines, 1).unwrap();
        let b = Vocab::build(&lines, 1).unwrap();
        assert_eq!(a.render(), b.render());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn vocab_round_trips_through_file_format() {
        let v = Vocab::build(&["国好界".to_string()], 1).unwrap();
        let parsed = Vocab::parse(&v.render()).unwrap();
        assert_eq!(parsed, v);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocab::build(&[], 1), Err(EncodeError::EmptyCorpus)));
    }

    #[test]
    fn encodes_guo_pinyin_per_worked_example() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let seq = encode_pinyin(&dict.lookup('国'), &al).unwrap();
        let expect = vec![
            FeatureAlphabets::pinyin_letter_index('g'),
            FeatureAlphabets::pinyin_letter_index('u'),
            FeatureAlphabets::pinyin_letter_index('o'),
            FeatureAlphabets::pinyin_tone_index(2),
            FEAT_PAD,
            FEAT_PAD,
            FEAT_PAD,
            FEAT_PAD,
        ];
        assert_eq!(seq.indices, expect);
        assert_eq!(seq.true_length, 4);
    }

    #[test]
    fn encodes_hao_pinyin() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let seq = encode_pinyin(&dict.lookup('好'), &al).unwrap();
        assert_eq!(seq.true_length, 4);
        assert_eq!(seq.indices[3], FeatureAlphabets::pinyin_tone_index(3));
    }

    #[test]
    fn absent_pinyin_is_all_pad() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let seq = encode_pinyin(&dict.lookup('A'), &al).unwrap();
        assert_eq!(seq, FeatureSequence::all_pad(PINYIN_CAPACITY));
    }

    #[test]
    fn encodes_guo_wubi_per_worked_example() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let seq = encode_wubi(&dict.lookup('国'), &al).unwrap();
        assert_eq!(seq.true_length, 3);
        assert_eq!(
            &seq.indices[..3],
            &[
                FeatureAlphabets::wubi_key_index('l'),
                FeatureAlphabets::wubi_key_index('g'),
                FeatureAlphabets::wubi_key_index('y')
            ]
        );
        assert_eq!(seq.indices[3], FEAT_PAD);
    }

    #[test]
    fn four_key_wubi_has_no_pad() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let seq = encode_wubi(&dict.lookup('伍'), &al).unwrap();
        assert_eq!(seq.true_length, 3);
        let rec = parse_dictionary_str("呵\tkskg\n", DictKind::Wubi, "w").unwrap();
        let dict2 = FeatureDictionary::build(&[], &rec, &[]);
        let seq = encode_wubi(&dict2.lookup('呵'), &al).unwrap();
        assert_eq!(seq.true_length, 4);
        assert!(seq.indices.iter().all(|&i| i != FEAT_PAD));
    }

    #[test]
    fn encodes_guo_chaizi_per_worked_example() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let mut trunc = 0;
        let seq = encode_chaizi(&dict.lookup('国'), &al, 8, &mut trunc);
        assert_eq!(seq.true_length, 3);
        assert_eq!(
            &seq.indices[..3],
            &[
                al.chaizi_radical_index('囗'),
                al.chaizi_radical_index('王'),
                al.chaizi_radical_index('丶')
            ]
        );
        assert!(seq.indices[3..].iter().all(|&i| i == FEAT_PAD));
        assert_eq!(trunc, 0);
    }

    #[test]
    fn long_chaizi_truncates_and_counts() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let mut trunc = 0;
        let seq = encode_chaizi(&dict.lookup('赢'), &al, 3, &mut trunc);
        assert_eq!(seq.true_length, 3);
        assert_eq!(trunc, 1);
        assert_eq!(
            seq.indices,
            vec![
                al.chaizi_radical_index('亡'),
                al.chaizi_radical_index('口'),
                al.chaizi_radical_index('月')
            ]
        );
    }

    #[test]
    fn encode_sentence_frames_and_pads() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let vocab = Vocab::build(&["国好".to_string()], 1).unwrap();
        let mut trunc = 0;
        let seq =
            encode_sentence("国", &vocab, &dict, &al, 8, 8, None, &mut trunc).unwrap();
        assert_eq!(seq.tokens.len(), 8);
        assert_eq!(seq.tokens[0].word_id, CLS_ID);
        assert_eq!(seq.tokens[1].word_id, vocab.id_of('国'));
        assert_eq!(seq.tokens[2].word_id, SEP_ID);
        assert!(seq.tokens[3..].iter().all(|t| t.word_id == PAD_ID));
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_text_is_an_error() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let vocab = Vocab::build(&["国".to_string()], 1).unwrap();
        let mut trunc = 0;
        assert!(matches!(
            encode_sentence("", &vocab, &dict, &al, 8, 8, None, &mut trunc),
            Err(EncodeError::EmptyText)
        ));
    }

    #[test]
    fn oov_char_keeps_dictionary_features() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        // vocab deliberately excludes 好
        let vocab = Vocab::build(&["国".to_string()], 1).unwrap();
        let mut trunc = 0;
        let seq = encode_sentence("好", &vocab, &dict, &al, 8, 8, None, &mut trunc).unwrap();
        assert_eq!(seq.tokens[1].word_id, UNK_ID);
        assert_eq!(seq.tokens[1].pinyin.true_length, 4);
        assert_eq!(seq.tokens[1].chaizi.true_length, 2);
    }

    #[test]
    fn boundaries_tile_real_positions() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let vocab = Vocab::build(&["国好国好".to_string()], 1).unwrap();
        let mut trunc = 0;
        let seq =
            encode_sentence("国好国好", &vocab, &dict, &al, 16, 8, Some(&[2, 1, 1]), &mut trunc)
                .unwrap();
        assert_eq!(seq.word_boundaries, Some(vec![(1, 2), (3, 1), (4, 1)]));
        let err = encode_sentence("国好", &vocab, &dict, &al, 16, 8, Some(&[3]), &mut trunc);
        assert!(matches!(err, Err(EncodeError::BoundaryMismatch { .. })));
    }

    #[test]
    fn vocab_change_never_changes_feature_sequences() {
        let dict = fixture_dict();
        let al = FeatureAlphabets::from_dictionary(&dict);
        let v1 = Vocab::build(&["国好".to_string()], 1).unwrap();
        let v2 = Vocab::build(&["国".to_string()], 1).unwrap();
        let mut t = 0;
        let a = encode_sentence("国好", &v1, &dict, &al, 8, 8, None, &mut t).unwrap();
        let b = encode_sentence("国好", &v2, &dict, &al, 8, 8, None, &mut t).unwrap();
        for (x, y) in a.tokens.iter().zip(&b.tokens) {
            assert_eq!(x.pinyin, y.pinyin);
            assert_eq!(x.wubi, y.wubi);
            assert_eq!(x.chaizi, y.chaizi);
        }
    }

    proptest! {
        // PAD discipline and shape law over random dictionary-ish entries.
        #[test]
        fn pad_discipline(letters in proptest::collection::vec(proptest::char::range('a', 'z'), 1..=6),
                          tone in 0u8..=4,
                          keys in proptest::collection::vec(proptest::char::range('a', 'z'), 1..=4),
                          radicals in proptest::collection::vec(proptest::char::range('一', '龥'), 1..=12)) {
            use crate::feature_tables::{PinyinCode, WubiCode, ChaiziDecomposition, CharacterFeatureRecord};
            let rec = CharacterFeatureRecord {
                character: '测',
                pinyin: Some(PinyinCode { letters: letters.clone(), tone }),
                wubi: Some(WubiCode { keys: keys.clone() }),
                chaizi: Some(ChaiziDecomposition { radicals: radicals.clone() }),
            };
            let dict = FeatureDictionary::build(&[], &[], &[]);
            let al = FeatureAlphabets::from_dictionary(&dict);
            let p = encode_pinyin(&rec, &al).unwrap();
            prop_assert_eq!(p.capacity(), PINYIN_CAPACITY);
            prop_assert_eq!(p.true_length, letters.len() + 1);
            prop_assert!(p.indices[p.true_length..].iter().all(|&i| i == FEAT_PAD));
            prop_assert!(p.indices[..p.true_length].iter().all(|&i| i != FEAT_PAD));
            let w = encode_wubi(&rec, &al).unwrap();
            prop_assert_eq!(w.capacity(), WUBI_CAPACITY);
            prop_assert!(w.indices[w.true_length..].iter().all(|&i| i == FEAT_PAD));
            let mut trunc = 0;
            let c = encode_chaizi(&rec, &al, 8, &mut trunc);
            prop_assert_eq!(c.capacity(), 8);
            prop_assert!(c.indices[c.true_length..].iter().all(|&i| i == FEAT_PAD));
            prop_assert_eq!(trunc > 0, radicals.len() > 8);
        }
    }
}

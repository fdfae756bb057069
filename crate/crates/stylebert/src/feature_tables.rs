//! Character feature dictionaries: pinyin, five-stroke (wubi) and chaizi
//! radical decompositions, loaded from TSV files and served as immutable
//! per-character lookups.
//!
//! File format (all three kinds): UTF-8, LF line endings, one entry per
//! line as `<char>\t<code>`, `#`-prefixed comment lines and blank lines
//! skipped. Pinyin codes are letters plus a trailing tone digit (`guo2`),
//! wubi codes are 1-4 lowercase letters, chaizi codes are space-separated
//! radical glyphs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum DictError {
    #[error("{path}: cannot read file: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not valid UTF-8")]
    Encoding { path: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate entry for character '{character}'")]
    Duplicate {
        path: String,
        line: usize,
        character: char,
    },
}

/// Which of the three dictionaries a file or entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictKind {
    Pinyin,
    Wubi,
    Chaizi,
}

impl DictKind {
    pub fn name(self) -> &'static str {
        match self {
            DictKind::Pinyin => "pinyin",
            DictKind::Wubi => "wubi",
            DictKind::Chaizi => "chaizi",
        }
    }
}

/// A pinyin syllable: Latin letters plus a tone digit (0 = neutral tone).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinyinCode {
    pub letters: Vec<char>,
    pub tone: u8,
}

impl PinyinCode {
    /// Parse `guo2`-style codes. The rendered length (letters + tone digit)
    /// must fit the 8-slot pinyin feature sequence.
    pub fn parse(raw: &str) -> Result<Self, String> {
        let chars: Vec<char> = raw.chars().collect();
        if chars.len() < 2 {
            return Err(format!("pinyin code '{raw}' too short"));
        }
        let (letters, tone_char) = chars.split_at(chars.len() - 1);
        let tone_char = tone_char[0];
        let tone = tone_char
            .to_digit(10)
            .ok_or_else(|| format!("pinyin code '{raw}' missing tone digit"))?;
        if tone > 4 {
            return Err(format!("tone out of range in '{raw}' (must be 0-4)"));
        }
        if letters.is_empty() || letters.len() > 6 {
            return Err(format!("pinyin letters in '{raw}' must have length 1-6"));
        }
        if let Some(c) = letters.iter().find(|c| !c.is_ascii_lowercase()) {
            return Err(format!("invalid pinyin letter '{c}' in '{raw}'"));
        }
        Ok(Self { letters: letters.to_vec(), tone: tone as u8 })
    }

    pub fn render(&self) -> String {
        let mut s: String = self.letters.iter().collect();
        s.push(char::from_digit(self.tone as u32, 10).unwrap());
        s
    }

    /// Letters plus the tone digit, as fed to the pinyin feature sequence.
    pub fn rendered_len(&self) -> usize {
        self.letters.len() + 1
    }
}

/// A five-stroke input code: 1-4 lowercase Latin keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WubiCode {
    pub keys: Vec<char>,
}

impl WubiCode {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let keys: Vec<char> = raw.chars().collect();
        if keys.is_empty() || keys.len() > 4 {
            return Err(format!("wubi code '{raw}' must have 1-4 keys"));
        }
        if let Some(c) = keys.iter().find(|c| !c.is_ascii_lowercase()) {
            return Err(format!("invalid wubi key '{c}' in '{raw}'"));
        }
        Ok(Self { keys })
    }

    pub fn render(&self) -> String {
        self.keys.iter().collect()
    }
}

/// An ordered radical decomposition of one character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChaiziDecomposition {
    pub radicals: Vec<char>,
}

impl ChaiziDecomposition {
    pub fn parse(raw: &str) -> Result<Self, String> {
        let mut radicals = Vec::new();
        for part in raw.split(' ').filter(|p| !p.is_empty()) {
            let mut it = part.chars();
            let r = it.next().unwrap();
            if it.next().is_some() {
                return Err(format!("radical '{part}' is not a single glyph"));
            }
            radicals.push(r);
        }
        if radicals.is_empty() {
            return Err("chaizi decomposition is empty".into());
        }
        Ok(Self { radicals })
    }

    pub fn render(&self) -> String {
        let parts: Vec<String> = self.radicals.iter().map(|r| r.to_string()).collect();
        parts.join(" ")
    }
}

/// Everything the dictionaries know about one character. Absent features
/// are explicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharacterFeatureRecord {
    pub character: char,
    pub pinyin: Option<PinyinCode>,
    pub wubi: Option<WubiCode>,
    pub chaizi: Option<ChaiziDecomposition>,
}

impl CharacterFeatureRecord {
    pub fn unknown(character: char) -> Self {
        Self { character, pinyin: None, wubi: None, chaizi: None }
    }
}

/// One well-formed dictionary line, with its source location for
/// diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DictEntry {
    pub character: char,
    pub code: RawCode,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawCode {
    Pinyin(PinyinCode),
    Wubi(WubiCode),
    Chaizi(ChaiziDecomposition),
}

/// Parse one dictionary file. Strict: malformed lines and duplicate
/// characters are errors, not warnings.
pub fn parse_dictionary_file(path: &Path, kind: DictKind) -> Result<Vec<DictEntry>, DictError> {
    let bytes = std::fs::read(path).map_err(|source| DictError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|_| DictError::Encoding {
        path: path.display().to_string(),
    })?;
    parse_dictionary_str(text, kind, &path.display().to_string())
}

pub fn parse_dictionary_str(
    text: &str,
    kind: DictKind,
    path: &str,
) -> Result<Vec<DictEntry>, DictError> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (ch_part, code_part) = line.split_once('\t').ok_or_else(|| DictError::Parse {
            path: path.into(),
            line: lineno,
            message: "expected `<char>\\t<code>`".into(),
        })?;
        let mut chars = ch_part.chars();
        let character = chars.next().ok_or_else(|| DictError::Parse {
            path: path.into(),
            line: lineno,
            message: "empty character field".into(),
        })?;
        if chars.next().is_some() {
            return Err(DictError::Parse {
                path: path.into(),
                line: lineno,
                message: format!("character field '{ch_part}' is not a single scalar"),
            });
        }
        if !seen.insert(character) {
            return Err(DictError::Duplicate { path: path.into(), line: lineno, character });
        }
        let code = match kind {
            DictKind::Pinyin => RawCode::Pinyin(PinyinCode::parse(code_part).map_err(
                |message| DictError::Parse { path: path.into(), line: lineno, message },
            )?),
            DictKind::Wubi => RawCode::Wubi(WubiCode::parse(code_part).map_err(|message| {
                DictError::Parse { path: path.into(), line: lineno, message }
            })?),
            DictKind::Chaizi => RawCode::Chaizi(ChaiziDecomposition::parse(code_part).map_err(
                |message| DictError::Parse { path: path.into(), line: lineno, message },
            )?),
        };
        entries.push(DictEntry { character, code, line: lineno });
    }
    Ok(entries)
}

/// Immutable merged view over the three dictionaries. Lookups are total:
/// unknown characters yield a record with all features absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureDictionary {
    records: BTreeMap<char, CharacterFeatureRecord>,
    radical_alphabet: BTreeSet<char>,
    source_hashes: SourceHashes,
}

/// Content digests per dictionary kind, computed over the canonical
/// rendering of the entries (entry order by codepoint).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceHashes {
    pub pinyin: String,
    pub wubi: String,
    pub chaizi: String,
}

impl FeatureDictionary {
    pub fn build(
        pinyin_entries: &[DictEntry],
        wubi_entries: &[DictEntry],
        chaizi_entries: &[DictEntry],
    ) -> Self {
        let mut records2: BTreeMap<char, CharacterFeatureRecord> = BTreeMap::new();
        for e in pinyin_entries {
            if let RawCode::Pinyin(p) = &e.code {
                records2
                    .entry(e.character)
                    .or_insert_with(|| CharacterFeatureRecord::unknown(e.character))
                    .pinyin = Some(p.clone());
            }
        }
        for e in wubi_entries {
            if let RawCode::Wubi(w) = &e.code {
                records2
                    .entry(e.character)
                    .or_insert_with(|| CharacterFeatureRecord::unknown(e.character))
                    .wubi = Some(w.clone());
            }
        }
        for e in chaizi_entries {
            if let RawCode::Chaizi(c) = &e.code {
                records2
                    .entry(e.character)
                    .or_insert_with(|| CharacterFeatureRecord::unknown(e.character))
                    .chaizi = Some(c.clone());
            }
        }
        let records = records2;
        let mut radical_alphabet = BTreeSet::new();
        for r in records.values() {
            if let Some(cz) = &r.chaizi {
                radical_alphabet.extend(cz.radicals.iter().copied());
            }
        }
        let source_hashes = SourceHashes {
            pinyin: sha256_hex(render_kind(&records, DictKind::Pinyin).as_bytes()),
            wubi: sha256_hex(render_kind(&records, DictKind::Wubi).as_bytes()),
            chaizi: sha256_hex(render_kind(&records, DictKind::Chaizi).as_bytes()),
        };
        Self { records, radical_alphabet, source_hashes }
    }

    pub fn load(
        pinyin_path: &Path,
        wubi_path: &Path,
        chaizi_path: &Path,
    ) -> Result<Self, DictError> {
        let p = parse_dictionary_file(pinyin_path, DictKind::Pinyin)?;
        let w = parse_dictionary_file(wubi_path, DictKind::Wubi)?;
        let c = parse_dictionary_file(chaizi_path, DictKind::Chaizi)?;
        Ok(Self::build(&p, &w, &c))
    }

    /// Total lookup: unknown characters get the UNK record.
    pub fn lookup(&self, character: char) -> CharacterFeatureRecord {
        self.records
            .get(&character)
            .cloned()
            .unwrap_or_else(|| CharacterFeatureRecord::unknown(character))
    }

    pub fn records(&self) -> impl Iterator<Item = &CharacterFeatureRecord> {
        self.records.values()
    }

    pub fn characters(&self) -> impl Iterator<Item = char> + '_ {
        self.records.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All radicals appearing in any stored chaizi decomposition, sorted by
    /// codepoint. The chaizi feature alphabet is derived from this set.
    pub fn radical_alphabet(&self) -> &BTreeSet<char> {
        &self.radical_alphabet
    }

    pub fn source_hashes(&self) -> &SourceHashes {
        &self.source_hashes
    }

    /// Render one kind back to its TSV file format (canonical codepoint
    /// order). Re-parsing the output reproduces the stored records.
    pub fn render_kind(&self, kind: DictKind) -> String {
        render_kind(&self.records, kind)
    }
}

fn render_kind(records: &BTreeMap<char, CharacterFeatureRecord>, kind: DictKind) -> String {
    let mut out = String::new();
    for (ch, rec) in records {
        let code = match kind {
            DictKind::Pinyin => rec.pinyin.as_ref().map(|p| p.render()),
            DictKind::Wubi => rec.wubi.as_ref().map(|w| w.render()),
            DictKind::Chaizi => rec.chaizi.as_ref().map(|c| c.render()),
        };
        if let Some(code) = code {
            out.push(*ch);
            out.push('\t');
            out.push_str(&code);
            out.push('\n');
        }
    }
    out
}

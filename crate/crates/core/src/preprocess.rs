//! Text cleaning: emoji replacement, URL stripping, punctuation stripping and
//! stopword removal, applied in that fixed order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_properties::{GeneralCategory, GeneralCategoryGroup, UnicodeEmoji, UnicodeGeneralCategory};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `emoji<TAB>token`")]
    MalformedMapEntry { path: String, line: usize },
    #[error("invalid cleaning config: {0}")]
    InvalidConfig(String),
}

/// Default stopword list shipped with the crate (non-canonical).
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");
/// Default emoji map shipped with the crate (non-canonical).
pub const DEFAULT_EMOJI_MAP: &str = include_str!("../data/emoji_map.tsv");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub strip_urls: bool,
    pub strip_punctuation: bool,
    pub remove_stopwords: bool,
    pub replace_emojis: bool,
    /// Stored case-folded.
    pub stopwords: BTreeSet<String>,
    pub emoji_map: BTreeMap<String, String>,
}

impl CleaningConfig {
    /// Every step disabled: cleaning reduces to whitespace normalization.
    pub fn disabled() -> Self {
        CleaningConfig {
            strip_urls: false,
            strip_punctuation: false,
            remove_stopwords: false,
            replace_emojis: false,
            stopwords: BTreeSet::new(),
            emoji_map: BTreeMap::new(),
        }
    }

    /// Every step enabled with the shipped stopword list and emoji map.
    pub fn all_with_defaults() -> Self {
        CleaningConfig {
            strip_urls: true,
            strip_punctuation: true,
            remove_stopwords: true,
            replace_emojis: true,
            stopwords: parse_stopwords(DEFAULT_STOPWORDS),
            emoji_map: parse_emoji_map(DEFAULT_EMOJI_MAP, "<default>").expect("shipped emoji map parses"),
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.remove_stopwords && self.stopwords.is_empty() {
            return Err(PreprocessError::InvalidConfig(
                "remove_stopwords is set but the stopword set is empty".into(),
            ));
        }
        if self.replace_emojis {
            if self.emoji_map.is_empty() {
                return Err(PreprocessError::InvalidConfig(
                    "replace_emojis is set but the emoji map is empty".into(),
                ));
            }
            for (emoji, token) in &self.emoji_map {
                if emoji.is_empty() || emoji.chars().any(char::is_whitespace) {
                    return Err(PreprocessError::InvalidConfig(format!("bad emoji key {emoji:?}")));
                }
                let bad_token = token.is_empty()
                    || token.chars().any(|c| {
                        c.is_whitespace() || starts_emoji(c) || is_stripped_punctuation(c)
                    })
                    || self.emoji_map.keys().any(|k| token.contains(k.as_str()));
                if bad_token {
                    return Err(PreprocessError::InvalidConfig(format!(
                        "replacement token {token:?} must be a single word without emoji or punctuation"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses a stopword file: one entry per line, `#` comments allowed.
pub fn parse_stopwords(raw: &str) -> BTreeSet<String> {
    content_lines(raw).map(|l| l.to_lowercase()).collect()
}

/// Parses an emoji map file: `emoji<TAB>token` per line, `#` comments allowed.
pub fn parse_emoji_map(raw: &str, origin: &str) -> Result<BTreeMap<String, String>, PreprocessError> {
    let mut map = BTreeMap::new();
    for (i, line) in raw.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (emoji, token) = trimmed.split_once('\t').ok_or_else(|| PreprocessError::MalformedMapEntry {
            path: origin.to_string(),
            line: i + 1,
        })?;
        map.insert(emoji.trim().to_string(), token.trim().to_string());
    }
    Ok(map)
}

pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>, PreprocessError> {
    Ok(parse_stopwords(&read(path)?))
}

pub fn load_emoji_map(path: &Path) -> Result<BTreeMap<String, String>, PreprocessError> {
    parse_emoji_map(&read(path)?, &path.display().to_string())
}

fn read(path: &Path) -> Result<String, PreprocessError> {
    fs::read_to_string(path).map_err(|source| PreprocessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn content_lines(raw: &str) -> impl Iterator<Item = &str> {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Collapses every whitespace run to one space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

static URL_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:https?://|www\.)\S+").expect("valid url pattern"));

pub fn strip_urls(text: &str) -> String {
    normalize_whitespace(&URL_PATTERN.replace_all(text, " "))
}

/// Non-ASCII `Emoji=Yes` codepoints begin an emoji sequence. ASCII digits,
/// `#` and `*` carry the property too but only count inside keycaps.
fn starts_emoji(c: char) -> bool {
    !c.is_ascii() && c.is_emoji_char()
}

fn is_sequence_tail(c: char) -> bool {
    matches!(c, '\u{FE0E}' | '\u{FE0F}' | '\u{20E3}' | '\u{1F3FB}'..='\u{1F3FF}' | '\u{E0020}'..='\u{E007F}')
}

/// Length in chars of the emoji sequence starting at `chars[0]`, or 0.
fn emoji_sequence_len(chars: &[char]) -> usize {
    let mut i = match chars.first() {
        Some(&c) if starts_emoji(c) => 1,
        Some(&c) if matches!(c, '0'..='9' | '#' | '*') => {
            // keycap: base, optional VS16, U+20E3
            let mut j = 1;
            if chars.get(j) == Some(&'\u{FE0F}') {
                j += 1;
            }
            if chars.get(j) == Some(&'\u{20E3}') {
                j + 1
            } else {
                return 0;
            }
        }
        _ => return 0,
    };
    loop {
        match chars.get(i) {
            Some(&c) if is_sequence_tail(c) => i += 1,
            Some('\u{200D}') if chars.get(i + 1).is_some_and(|&n| starts_emoji(n)) => i += 2,
            // flags are pairs of regional indicators
            Some(&c) if i == 1 && is_regional_indicator(c) && is_regional_indicator(chars[0]) => i += 1,
            _ => return i,
        }
    }
}

fn is_regional_indicator(c: char) -> bool {
    matches!(c, '\u{1F1E6}'..='\u{1F1FF}')
}

/// Replaces mapped emoji sequences with their token (space-padded) and drops
/// unmapped emoji. Overlapping keys resolve longest-match-first.
pub fn replace_emojis(text: &str, emoji_map: &BTreeMap<String, String>) -> String {
    let keys: Vec<(Vec<char>, &str)> = {
        let mut keys: Vec<(Vec<char>, &str)> =
            emoji_map.iter().map(|(k, v)| (k.chars().collect(), v.as_str())).collect();
        keys.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        keys
    };
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let rest = &chars[i..];
        if let Some((key, token)) = keys.iter().find(|(k, _)| rest.starts_with(k)) {
            out.push(' ');
            out.push_str(token);
            out.push(' ');
            i += key.len();
            while chars.get(i).is_some_and(|&c| is_sequence_tail(c)) {
                i += 1;
            }
            continue;
        }
        let span = emoji_sequence_len(rest);
        if span > 0 {
            out.push(' ');
            i += span;
            continue;
        }
        out.push(chars[i]);
        i += 1;
    }
    if out == text {
        return out;
    }
    normalize_whitespace(&out)
}

/// Punctuation that the stripper removes: every category-P codepoint except
/// connector punctuation (`_` and friends), which stays word-internal.
fn is_stripped_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
        && c.general_category() != GeneralCategory::ConnectorPunctuation
}

/// Letters, digits and spacing/non-spacing marks, minus variation selectors.
fn is_word_char(c: char) -> bool {
    match c.general_category_group() {
        GeneralCategoryGroup::Letter | GeneralCategoryGroup::Number => true,
        GeneralCategoryGroup::Mark => {
            c.general_category() != GeneralCategory::EnclosingMark && !matches!(c, '\u{FE00}'..='\u{FE0F}')
        }
        _ => false,
    }
}

/// A run of dashes between two word characters is deleted (`e-mail` stays
/// one word); any other punctuation becomes a word break. Whitespace is then
/// collapsed.
pub fn strip_punctuation(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if !is_stripped_punctuation(c) {
            out.push(c);
            i += 1;
            continue;
        }
        let is_dash = |c: char| c.general_category() == GeneralCategory::DashPunctuation;
        if is_dash(c) {
            let end = (i..chars.len()).find(|&j| !is_dash(chars[j])).unwrap_or(chars.len());
            let joined = i > 0
                && is_word_char(chars[i - 1])
                && chars.get(end).is_some_and(|&n| is_word_char(n));
            if !joined {
                out.push(' ');
            }
            i = end;
        } else {
            out.push(' ');
            i += 1;
        }
    }
    normalize_whitespace(&out)
}

pub fn remove_stopwords(text: &str, stopwords: &BTreeSet<String>) -> String {
    text.split_whitespace()
        .filter(|tok| !stopwords.contains(&tok.to_lowercase()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn clean(text: &str, config: &CleaningConfig) -> String {
    let mut text = normalize_whitespace(text);
    if config.replace_emojis {
        text = replace_emojis(&text, &config.emoji_map);
    }
    if config.strip_urls {
        text = strip_urls(&text);
    }
    if config.strip_punctuation {
        text = strip_punctuation(&text);
    }
    if config.remove_stopwords {
        text = remove_stopwords(&text, &config.stopwords);
    }
    text
}

/// Model families whose pipelines may clean or keep raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Ensemble,
    Lstm,
    Transformer,
    /// Transformer runs whose encoder identifier names MuRIL.
    Muril,
}

impl ModelFamily {
    /// Cleaning helps the recurrent and transformer models, except MuRIL;
    /// MuRIL and the embedding ensembles do better on raw text.
    pub fn cleans_by_default(self) -> bool {
        matches!(self, ModelFamily::Lstm | ModelFamily::Transformer)
    }

    pub fn for_encoder(encoder_id: &str) -> ModelFamily {
        if encoder_id.to_lowercase().contains("muril") {
            ModelFamily::Muril
        } else {
            ModelFamily::Transformer
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laugh_map() -> BTreeMap<String, String> {
        BTreeMap::from([("😂".to_string(), "laugh_token".to_string())])
    }

    #[test]
    fn url_examples() {
        assert_eq!(strip_urls("see https://a.b/c now"), "see now");
        assert_eq!(strip_urls("no links here"), "no links here");
        assert_eq!(strip_urls("www.x.com and http://y.z"), "and");
    }

    #[test]
    fn emoji_examples() {
        assert_eq!(replace_emojis("😂", &laugh_map()), "laugh_token");
        assert_eq!(replace_emojis("plain text", &laugh_map()), "plain text");
        assert_eq!(replace_emojis("a😂b", &BTreeMap::new()), "a b");
        assert_eq!(replace_emojis("x😂😂y", &laugh_map()), "x laugh_token laugh_token y");
    }

    #[test]
    fn emoji_longest_match_first() {
        let map = BTreeMap::from([
            ("👍".to_string(), "good".to_string()),
            ("👍🏽".to_string(), "good_medium".to_string()),
        ]);
        assert_eq!(replace_emojis("👍🏽", &map), "good_medium");
        assert_eq!(replace_emojis("👍", &map), "good");
    }

    #[test]
    fn unmapped_sequences_vanish_whole() {
        // family ZWJ sequence, flag, keycap, skin-toned thumb
        assert_eq!(replace_emojis("a👨‍👩‍👧b 🇮🇳 1️⃣ 👍🏽 c", &BTreeMap::new()), "a b c");
        // digits and Tamil letters are not emoji
        assert_eq!(replace_emojis("வணக்கம் 42", &BTreeMap::new()), "வணக்கம் 42");
    }

    #[test]
    fn punctuation_examples() {
        assert_eq!(strip_punctuation("hi, there!"), "hi there");
        assert_eq!(strip_punctuation("abc"), "abc");
        assert_eq!(strip_punctuation("a--b..c"), "ab c");
        assert_eq!(strip_punctuation("laugh_token"), "laugh_token");
        assert_eq!(strip_punctuation("தமிழ்।"), "தமிழ்");
        assert_eq!(strip_punctuation("e-mail - done"), "email done");
        // a deleted dash must not fuse a keycap base with its combining mark
        assert_eq!(strip_punctuation("1-\u{FE0F}\u{20E3}"), "1 \u{FE0F}\u{20E3}");
    }

    #[test]
    fn stopword_examples() {
        let the = BTreeSet::from(["the".to_string()]);
        assert_eq!(remove_stopwords("the cat sat", &the), "cat sat");
        assert_eq!(remove_stopwords("  spaced   out ", &BTreeSet::new()), "spaced out");
        let a_the = BTreeSet::from(["a".to_string(), "the".to_string()]);
        assert_eq!(remove_stopwords("A a THE b", &a_the), "b");
    }

    #[test]
    fn clean_examples() {
        assert_eq!(clean("  a \t b  ", &CleaningConfig::disabled()), "a b");
        let config = CleaningConfig {
            strip_urls: true,
            strip_punctuation: true,
            remove_stopwords: true,
            replace_emojis: true,
            stopwords: BTreeSet::from(["the".to_string()]),
            emoji_map: laugh_map(),
        };
        config.validate().unwrap();
        assert_eq!(clean("see https://x.y 😂, the end", &config), "see laugh_token end");
        assert_eq!(clean("", &config), "");
    }

    #[test]
    fn validation_rejects_incoherent_configs() {
        let mut c = CleaningConfig::disabled();
        c.remove_stopwords = true;
        assert!(c.validate().is_err());
        let mut c = CleaningConfig::disabled();
        c.replace_emojis = true;
        assert!(c.validate().is_err());
        c.emoji_map = BTreeMap::from([("😂".to_string(), "😀".to_string())]);
        assert!(c.validate().is_err());
        c.emoji_map = BTreeMap::from([("😂".to_string(), "ha!".to_string())]);
        assert!(c.validate().is_err());
        c.emoji_map = laugh_map();
        assert!(c.validate().is_ok());
    }

    #[test]
    fn shipped_defaults_are_valid() {
        let c = CleaningConfig::all_with_defaults();
        c.validate().unwrap();
        assert!(!c.stopwords.is_empty());
        assert!(c.emoji_map.contains_key("😂"));
    }

    #[test]
    fn map_file_parsing() {
        let map = parse_emoji_map("# comment\n😂\tsiri\n\n❤\tanbu\n", "t").unwrap();
        assert_eq!(map.len(), 2);
        assert!(matches!(parse_emoji_map("😂 siri\n", "t"), Err(PreprocessError::MalformedMapEntry { line: 1, .. })));
    }

    #[test]
    fn family_defaults() {
        assert!(ModelFamily::Lstm.cleans_by_default());
        assert!(ModelFamily::Transformer.cleans_by_default());
        assert!(!ModelFamily::Muril.cleans_by_default());
        assert!(!ModelFamily::Ensemble.cleans_by_default());
        assert_eq!(ModelFamily::for_encoder("google/muril-base-cased"), ModelFamily::Muril);
        assert_eq!(ModelFamily::for_encoder("xlm-roberta-base"), ModelFamily::Transformer);
    }

    proptest! {
        #[test]
        fn strip_only_configs_never_lengthen(text in "\\PC{0,40}", urls: bool, punct: bool) {
            let config = CleaningConfig { strip_urls: urls, strip_punctuation: punct, ..CleaningConfig::disabled() };
            prop_assert!(clean(&text, &config).chars().count() <= text.chars().count());
        }
    }
}

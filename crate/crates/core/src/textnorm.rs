//! Tweet normalization.
//!
//! [`Normalizer::normalize`] runs five steps in a fixed order:
//! lowercase + strip, emoji to words, hashtag segmentation, mention
//! collapsing and rare-word substitution. Each step is also exposed as a
//! free function so it can be used and tested on its own.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

const BUNDLED_EMOJI: &str = include_str!("../data/emoji.tsv");

/// Lowercased mention token as it appears after the first pipeline step.
pub const MENTION: &str = "@user";
/// Replacement for two or more mentions.
pub const MENTIONS: &str = "@users";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTweet {
    pub id: String,
    pub text: String,
}

impl RawTweet {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

/// Names of the pipeline steps, in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    LowercaseStrip,
    EmojiToWords,
    SegmentHashtags,
    CollapseMentions,
    SubstituteRare,
}

impl Step {
    pub const ORDER: [Step; 5] = [
        Step::LowercaseStrip,
        Step::EmojiToWords,
        Step::SegmentHashtags,
        Step::CollapseMentions,
        Step::SubstituteRare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::LowercaseStrip => "lowercase_strip",
            Step::EmojiToWords => "emoji_to_words",
            Step::SegmentHashtags => "segment_hashtags",
            Step::CollapseMentions => "collapse_mentions",
            Step::SubstituteRare => "substitute_rare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedTweet {
    pub id: String,
    pub text: String,
    pub steps_applied: Vec<Step>,
    /// Emoji-like codepoints that had no table entry and were dropped.
    pub unknown_emoji: usize,
}

/// Lowercases `name`, turns `_`/`-` into spaces, drops any other
/// character that is not a letter, digit or space and squeezes spaces.
pub fn clean_emoji_name(name: &str) -> String {
    let mapped: String = name
        .to_lowercase()
        .chars()
        .filter_map(|c| match c {
            '_' | '-' => Some(' '),
            c if c.is_alphanumeric() || c.is_whitespace() => Some(c),
            _ => None,
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_emoji_codepoint(c: char) -> bool {
    matches!(
        c as u32,
        0x200D
            | 0x20E3
            | 0x2300..=0x23FF
            | 0x2600..=0x27BF
            | 0x2B00..=0x2BFF
            | 0xFE00..=0xFE0F
            | 0x1F000..=0x1FAFF
            | 0xE0020..=0xE007F
    )
}

/// Mapping from emoji codepoint sequences to their name words.
#[derive(Debug, Clone, Default)]
pub struct EmojiTable {
    entries: HashMap<String, String>,
    /// Every codepoint occurring in some key.
    key_chars: HashSet<char>,
    max_key_chars: usize,
}

impl EmojiTable {
    /// The table shipped with the crate (derived from the `emoji` name list).
    pub fn bundled() -> &'static EmojiTable {
        static TABLE: OnceLock<EmojiTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            EmojiTable::parse(BUNDLED_EMOJI, "<bundled>").expect("bundled emoji table is well formed")
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TableError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|source| TableError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `emoji<TAB>name words` lines. Lines without a tab that start
    /// with `#` are comments.
    pub fn parse(text: &str, origin: &str) -> Result<Self, TableError> {
        let mut table = EmojiTable::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (line.starts_with('#') && !line.contains('\t')) {
                continue;
            }
            let Some((emoji, name)) = line.split_once('\t') else {
                return Err(TableError::Malformed {
                    path: origin.to_string(),
                    line: idx + 1,
                    reason: "expected emoji<TAB>name".into(),
                });
            };
            let name = clean_emoji_name(name);
            if emoji.is_empty() || name.is_empty() {
                return Err(TableError::Malformed {
                    path: origin.to_string(),
                    line: idx + 1,
                    reason: "empty emoji or name".into(),
                });
            }
            table.insert(emoji, &name);
        }
        Ok(table)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut table = EmojiTable::default();
        for (emoji, name) in pairs {
            table.insert(emoji, &clean_emoji_name(name));
        }
        table
    }

    fn insert(&mut self, emoji: &str, name: &str) {
        self.key_chars.extend(emoji.chars());
        self.max_key_chars = self.max_key_chars.max(emoji.chars().count());
        self.entries.insert(emoji.to_string(), name.to_string());
    }

    pub fn get(&self, emoji: &str) -> Option<&str> {
        self.entries.get(emoji).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn is_emoji_like(&self, c: char) -> bool {
        is_emoji_codepoint(c) || self.key_chars.contains(&c)
    }

    /// Replaces every longest-matching table key with its name words and
    /// drops unmatched emoji-like codepoints, returning the count dropped.
    pub fn replace(&self, text: &str) -> (String, usize) {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = String::with_capacity(text.len());
        let mut unknown = 0;
        // a replaced or dropped emoji acts as a word boundary
        let mut pending_space = false;
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i].1;
            if !self.is_emoji_like(c) {
                if pending_space && !c.is_whitespace() && !out.is_empty() && !out.ends_with(char::is_whitespace) {
                    out.push(' ');
                }
                pending_space = false;
                out.push(c);
                i += 1;
                continue;
            }
            let start = chars[i].0;
            let longest = (1..=self.max_key_chars.min(chars.len() - i)).rev().find_map(|n| {
                let end = chars.get(i + n).map_or(text.len(), |&(b, _)| b);
                self.entries.get(&text[start..end]).map(|name| (n, name))
            });
            match longest {
                Some((n, name)) => {
                    if !out.is_empty() && !out.ends_with(char::is_whitespace) {
                        out.push(' ');
                    }
                    out.push_str(name);
                    i += n;
                }
                None => {
                    unknown += 1;
                    i += 1;
                }
            }
            pending_space = true;
        }
        (out, unknown)
    }
}

/// Replaces every emoji found in `table` by its name words.
pub fn emoji_to_words(text: &str, table: &EmojiTable) -> String {
    table.replace(text).0
}

/// Word frequencies used by the hashtag segmenter.
#[derive(Debug, Clone, Default)]
pub struct UnigramTable {
    counts: HashMap<String, u64>,
    total: u64,
}

impl UnigramTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts<S: AsRef<str>>(counts: impl IntoIterator<Item = (S, u64)>) -> Self {
        let mut table = Self::new();
        for (word, count) in counts {
            table.add(word.as_ref(), count);
        }
        table
    }

    /// Adds `count` occurrences of `word` (lowercased). Empty words and zero
    /// counts are ignored.
    pub fn add(&mut self, word: &str, count: u64) {
        let word = word.to_lowercase();
        if word.is_empty() || count == 0 {
            return;
        }
        *self.counts.entry(word).or_insert(0) += count;
        self.total += count;
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TableError> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text =
            fs::read_to_string(path).map_err(|source| TableError::Io { path: origin.clone(), source })?;
        let mut table = Self::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: &str| TableError::Malformed {
                path: origin.clone(),
                line: idx + 1,
                reason: reason.to_string(),
            };
            let (word, count) = line.split_once('\t').ok_or_else(|| malformed("expected word<TAB>count"))?;
            let count: u64 = count.trim().parse().map_err(|_| malformed("count is not a positive integer"))?;
            if word.is_empty() || count == 0 {
                return Err(malformed("empty word or zero count"));
            }
            table.add(word, count);
        }
        Ok(table)
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.counts.get(word).copied()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Natural-log probability of `word`. Unknown words of length `L` score
    /// `ln(1 / (total * 10^L))`.
    pub fn log_prob(&self, word: &str) -> f64 {
        let total = self.total.max(1) as f64;
        match self.counts.get(word) {
            Some(&count) => (count as f64 / total).ln(),
            None => -total.ln() - word.chars().count() as f64 * std::f64::consts::LN_10,
        }
    }
}

/// Splits `tag` into runs at capital boundaries (`fooBar`, `FOOBar`).
fn camel_runs(tag: &str) -> Vec<String> {
    let chars: Vec<char> = tag.chars().collect();
    let mut runs = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if i > 0 && c.is_uppercase() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || prev.is_numeric() || (prev.is_uppercase() && next_lower) {
                runs.push(std::mem::take(&mut current));
            }
        }
        current.push(c);
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

/// Orders candidate segmentations: higher score, then fewer words, then
/// lexicographically smaller word sequence.
fn better(score: f64, words: &[String], best_score: f64, best_words: &[String]) -> bool {
    if score != best_score {
        return score > best_score;
    }
    if words.len() != best_words.len() {
        return words.len() < best_words.len();
    }
    words < best_words
}

/// Maximum-likelihood segmentation of a lowercase string under `unigrams`.
///
/// Prefix DP: `best[j]` holds the best segmentation of the first `j`
/// characters. Scores accumulate left to right.
pub fn segment_words(text: &str, unigrams: &UnigramTable) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    if n == 0 {
        return Vec::new();
    }
    let mut best: Vec<Option<(f64, Vec<String>)>> = vec![None; n + 1];
    best[0] = Some((0.0, Vec::new()));
    for end in 1..=n {
        let mut choice: Option<(f64, Vec<String>)> = None;
        for start in 0..end {
            let Some((prefix_score, prefix_words)) = &best[start] else { continue };
            let word: String = chars[start..end].iter().collect();
            let score = prefix_score + unigrams.log_prob(&word);
            let mut words = prefix_words.clone();
            words.push(word);
            let replace = match &choice {
                None => true,
                Some((s, w)) => better(score, &words, *s, w),
            };
            if replace {
                choice = Some((score, words));
            }
        }
        best[end] = choice;
    }
    best[n].take().map(|(_, words)| words).unwrap_or_default()
}

/// Segments a hashtag body (without the leading `#`).
///
/// Camel-case tags (two or more capital-initiated runs) are split at the
/// capitals; everything else, including all-caps tags, goes through
/// [`segment_words`]. Underscores always separate words.
pub fn segment_hashtag(tag: &str, unigrams: &UnigramTable) -> String {
    let mut words = Vec::new();
    for part in tag.split('_').filter(|p| !p.is_empty()) {
        let runs = camel_runs(part);
        let capital_runs = runs.iter().filter(|r| r.starts_with(char::is_uppercase)).count();
        if capital_runs >= 2 {
            words.extend(runs.iter().map(|r| r.to_lowercase()));
        } else {
            words.extend(segment_words(&part.to_lowercase(), unigrams));
        }
    }
    words.join(" ")
}

fn hashtag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"#([\p{L}\p{N}_]+)").expect("valid hashtag regex"))
}

/// Hashtag bodies in order of appearance.
pub fn hashtag_bodies(text: &str) -> Vec<String> {
    hashtag_regex().captures_iter(text).map(|c| c[1].to_string()).collect()
}

/// Replaces every `#tag` with its segmentation. `original_case` supplies
/// the pre-lowercasing spelling of each hashtag body, matched by position;
/// a body is only used when it lowercases to the body found in `text`.
pub fn segment_hashtags(text: &str, unigrams: &UnigramTable, original_case: &[String]) -> String {
    let mut k = 0;
    let replaced = hashtag_regex().replace_all(text, |caps: &regex::Captures| {
        let body = &caps[1];
        let source = match original_case.get(k) {
            Some(orig) if orig.to_lowercase() == body => orig.as_str(),
            _ => body,
        };
        k += 1;
        format!(" {} ", segment_hashtag(source, unigrams))
    });
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Replaces two or more `@user` tokens by one `@users` at the first one's
/// position. A single mention is left alone.
pub fn collapse_mentions(text: &str) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let is_mention = |t: &&str| t.eq_ignore_ascii_case(MENTION);
    let count = tokens.iter().filter(|t| is_mention(t)).count();
    if count < 2 {
        return text.to_string();
    }
    let mut seen = false;
    let mut out = Vec::with_capacity(tokens.len());
    for token in tokens {
        if is_mention(&token) {
            if !seen {
                out.push(MENTIONS);
                seen = true;
            }
        } else {
            out.push(token);
        }
    }
    out.join(" ")
}

/// Default rare-word substitutions.
pub fn default_substitutions() -> BTreeMap<String, String> {
    BTreeMap::from([("url".to_string(), "http".to_string())])
}

/// Replaces whole whitespace-delimited tokens found in `substitutions`.
/// Whitespace between tokens is preserved.
pub fn substitute_rare(text: &str, substitutions: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut token_start: Option<usize> = None;
    let flush = |out: &mut String, token: &str| match substitutions.get(token) {
        Some(rep) => out.push_str(rep),
        None => out.push_str(token),
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = token_start.take() {
                flush(&mut out, &text[s..i]);
            }
            out.push(c);
        } else if token_start.is_none() {
            token_start = Some(i);
        }
    }
    if let Some(s) = token_start {
        flush(&mut out, &text[s..]);
    }
    out
}

/// The normalization context: tables plus substitution map.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub emoji: EmojiTable,
    pub unigrams: UnigramTable,
    pub substitutions: BTreeMap<String, String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(EmojiTable::bundled().clone(), UnigramTable::new())
    }
}

impl Normalizer {
    pub fn new(emoji: EmojiTable, unigrams: UnigramTable) -> Self {
        Self { emoji, unigrams, substitutions: default_substitutions() }
    }

    pub fn with_substitutions(mut self, substitutions: BTreeMap<String, String>) -> Self {
        self.substitutions = substitutions
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v.to_lowercase()))
            .collect();
        self
    }

    pub fn normalize(&self, tweet: &RawTweet) -> NormalizedTweet {
        let stripped = tweet.text.trim();
        let original_tags = hashtag_bodies(stripped);

        let text = stripped.to_lowercase();
        let (text, unknown_emoji) = self.emoji.replace(&text);
        let text = segment_hashtags(&text, &self.unigrams, &original_tags);
        let text = collapse_mentions(&text);
        let text = substitute_rare(&text, &self.substitutions);
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");

        NormalizedTweet {
            id: tweet.id.clone(),
            text,
            steps_applied: Step::ORDER.to_vec(),
            unknown_emoji,
        }
    }

    pub fn normalize_text(&self, text: &str) -> String {
        self.normalize(&RawTweet::new("-", text)).text
    }
}

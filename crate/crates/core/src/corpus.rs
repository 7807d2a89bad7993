//! Hierarchical labels and corpus I/O.
//!
//! Labeled data follows the OLID layout (`id, tweet, subtask_a, subtask_b,
//! subtask_c`); scored data follows the SOLID level-A layout (`id, text,
//! average, std`). Every triple held in memory satisfies
//! `b == NULL <=> a == NOT` and `c == NULL <=> b in {UNT, NULL}`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::textnorm::{NormalizedTweet, Normalizer, RawTweet};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{path}:{line}: {source}")]
    Hierarchy {
        path: String,
        line: usize,
        #[source]
        source: HierarchyError,
    },
    #[error("{path}:{line}: average confidence {value} outside [0, 1]")]
    ScoreOutOfRange { path: String, line: usize, value: f64 },
    #[error("split needs at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("split fractions must be positive and sum to 1, got ({0}, {1})")]
    BadFractions(f64, f64),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("label triple ({0}, {1}, {2}) violates the task hierarchy")]
pub struct HierarchyError(pub TaskLabelA, pub TaskLabelB, pub TaskLabelC);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown label {0:?}")]
pub struct UnknownLabel(pub String);

/// A closed label set with a fixed class order.
pub trait ClassLabel: Copy + Eq + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const ALL: &'static [Self];

    fn index(self) -> usize;

    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    fn n_classes() -> usize {
        Self::ALL.len()
    }
}

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl ClassLabel for $name {
            const ALL: &'static [Self] = &[$($name::$variant),+];

            fn index(self) -> usize {
                self as usize
            }
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownLabel;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(UnknownLabel(other.to_string())),
                }
            }
        }
    };
}

label_enum! {
    /// Sub-task A: offensive or not.
    TaskLabelA { Off => "OFF", Not => "NOT" }
}

label_enum! {
    /// Sub-task B: targeted insult, untargeted, or not applicable.
    TaskLabelB { Tin => "TIN", Unt => "UNT", Null => "NULL" }
}

label_enum! {
    /// Sub-task C: individual, group or other target, or not applicable.
    TaskLabelC { Ind => "IND", Grp => "GRP", Oth => "OTH", Null => "NULL" }
}

/// A hierarchy-consistent (A, B, C) label triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelTriple {
    a: TaskLabelA,
    b: TaskLabelB,
    c: TaskLabelC,
}

impl LabelTriple {
    pub fn new(a: TaskLabelA, b: TaskLabelB, c: TaskLabelC) -> Result<Self, HierarchyError> {
        if Self::is_consistent(a, b, c) {
            Ok(Self { a, b, c })
        } else {
            Err(HierarchyError(a, b, c))
        }
    }

    pub fn is_consistent(a: TaskLabelA, b: TaskLabelB, c: TaskLabelC) -> bool {
        let b_null_iff_not = (b == TaskLabelB::Null) == (a == TaskLabelA::Not);
        let c_null_iff_untargeted =
            (c == TaskLabelC::Null) == matches!(b, TaskLabelB::Unt | TaskLabelB::Null);
        b_null_iff_not && c_null_iff_untargeted
    }

    pub fn not_offensive() -> Self {
        Self { a: TaskLabelA::Not, b: TaskLabelB::Null, c: TaskLabelC::Null }
    }

    pub fn untargeted() -> Self {
        Self { a: TaskLabelA::Off, b: TaskLabelB::Unt, c: TaskLabelC::Null }
    }

    /// All five consistent triples.
    pub fn all() -> Vec<LabelTriple> {
        let mut out = Vec::new();
        for &a in TaskLabelA::ALL {
            for &b in TaskLabelB::ALL {
                for &c in TaskLabelC::ALL {
                    if let Ok(t) = Self::new(a, b, c) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }

    pub fn a(&self) -> TaskLabelA {
        self.a
    }

    pub fn b(&self) -> TaskLabelB {
        self.b
    }

    pub fn c(&self) -> TaskLabelC {
        self.c
    }
}

impl fmt::Display for LabelTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.a, self.b, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub tweet: NormalizedTweet,
    pub labels: LabelTriple,
    /// Set for examples derived from scores; their B/C labels are
    /// placeholders that must not be trained on.
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub tweet: NormalizedTweet,
    pub avg_conf: f64,
    pub std_conf: f64,
}

/// Column names of the labeled TSV layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledColumns {
    pub id: String,
    pub text: String,
    pub a: String,
    pub b: String,
    pub c: String,
}

impl Default for LabeledColumns {
    fn default() -> Self {
        Self {
            id: "id".into(),
            text: "tweet".into(),
            a: "subtask_a".into(),
            b: "subtask_b".into(),
            c: "subtask_c".into(),
        }
    }
}

/// Column names of the scored TSV layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredColumns {
    pub id: String,
    pub text: String,
    pub average: String,
    pub std: String,
}

impl Default for ScoredColumns {
    fn default() -> Self {
        Self { id: "id".into(), text: "text".into(), average: "average".into(), std: "std".into() }
    }
}

struct Tsv {
    path: String,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Tsv {
    fn read(path: &Path) -> Result<Self, CorpusError> {
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: origin.clone(), source })?;
        Self::parse(&text, origin)
    }

    fn parse(text: &str, path: String) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate();
        let header = match lines.next() {
            Some((_, h)) => h.trim_start_matches('\u{feff}').split('\t').map(|s| s.trim().to_string()).collect(),
            None => {
                return Err(CorpusError::Malformed { path, line: 1, reason: "missing header".into() });
            }
        };
        let rows = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.split('\t').map(str::to_string).collect()))
            .collect();
        Ok(Self { path, header, rows })
    }

    fn column(&self, name: &str) -> Result<usize, CorpusError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| CorpusError::Malformed {
            path: self.path.clone(),
            line: 1,
            reason: format!("header has no column {name:?}"),
        })
    }

    fn field<'a>(&self, line: usize, row: &'a [String], col: usize) -> Result<&'a str, CorpusError> {
        row.get(col).map(String::as_str).ok_or_else(|| CorpusError::Malformed {
            path: self.path.clone(),
            line,
            reason: format!("expected at least {} fields, found {}", col + 1, row.len()),
        })
    }
}

pub fn load_labeled(path: impl AsRef<Path>, normalizer: &Normalizer) -> Result<Vec<LabeledExample>, CorpusError> {
    load_labeled_with(path, normalizer, &LabeledColumns::default())
}

pub fn load_labeled_with(
    path: impl AsRef<Path>,
    normalizer: &Normalizer,
    columns: &LabeledColumns,
) -> Result<Vec<LabeledExample>, CorpusError> {
    let tsv = Tsv::read(path.as_ref())?;
    let cols = [
        tsv.column(&columns.id)?,
        tsv.column(&columns.text)?,
        tsv.column(&columns.a)?,
        tsv.column(&columns.b)?,
        tsv.column(&columns.c)?,
    ];
    let mut out = Vec::with_capacity(tsv.rows.len());
    for (line, row) in &tsv.rows {
        let line = *line;
        let get = |i: usize| tsv.field(line, row, cols[i]);
        let bad_label = |e: UnknownLabel| CorpusError::Malformed {
            path: tsv.path.clone(),
            line,
            reason: e.to_string(),
        };
        let a: TaskLabelA = get(2)?.parse().map_err(bad_label)?;
        let b: TaskLabelB = get(3)?.parse().map_err(bad_label)?;
        let c: TaskLabelC = get(4)?.parse().map_err(bad_label)?;
        let labels = LabelTriple::new(a, b, c)
            .map_err(|source| CorpusError::Hierarchy { path: tsv.path.clone(), line, source })?;
        let tweet = normalizer.normalize(&RawTweet::new(get(0)?, get(1)?));
        out.push(LabeledExample { tweet, labels, synthetic: false });
    }
    Ok(out)
}

pub fn load_scored(path: impl AsRef<Path>, normalizer: &Normalizer) -> Result<Vec<ScoredExample>, CorpusError> {
    load_scored_with(path, normalizer, &ScoredColumns::default())
}

pub fn load_scored_with(
    path: impl AsRef<Path>,
    normalizer: &Normalizer,
    columns: &ScoredColumns,
) -> Result<Vec<ScoredExample>, CorpusError> {
    let tsv = Tsv::read(path.as_ref())?;
    let cols = [
        tsv.column(&columns.id)?,
        tsv.column(&columns.text)?,
        tsv.column(&columns.average)?,
        tsv.column(&columns.std)?,
    ];
    let mut out = Vec::with_capacity(tsv.rows.len());
    for (line, row) in &tsv.rows {
        let line = *line;
        let get = |i: usize| tsv.field(line, row, cols[i]);
        let real = |i: usize| -> Result<f64, CorpusError> {
            let raw = get(i)?;
            raw.trim().parse::<f64>().map_err(|_| CorpusError::Malformed {
                path: tsv.path.clone(),
                line,
                reason: format!("not a real number: {raw:?}"),
            })
        };
        let avg_conf = real(2)?;
        if !(0.0..=1.0).contains(&avg_conf) {
            return Err(CorpusError::ScoreOutOfRange { path: tsv.path.clone(), line, value: avg_conf });
        }
        let std_conf = real(3)?;
        if !(std_conf >= 0.0) {
            return Err(CorpusError::Malformed {
                path: tsv.path.clone(),
                line,
                reason: format!("negative std {std_conf}"),
            });
        }
        let tweet = normalizer.normalize(&RawTweet::new(get(0)?, get(1)?));
        out.push(ScoredExample { tweet, avg_conf, std_conf });
    }
    Ok(out)
}

/// Writes examples in the default labeled layout. Tweets are written in
/// normalized form.
pub fn save_labeled(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(f, "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c").map_err(io)?;
    for ex in examples {
        let l = ex.labels;
        writeln!(f, "{}\t{}\t{}\t{}\t{}", ex.tweet.id, ex.tweet.text, l.a(), l.b(), l.c()).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Writes examples in the default scored layout, tweets in normalized form.
pub fn save_scored(path: impl AsRef<Path>, examples: &[ScoredExample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(f, "id\ttext\taverage\tstd").map_err(io)?;
    for ex in examples {
        writeln!(f, "{}\t{}\t{}\t{}", ex.tweet.id, ex.tweet.text, ex.avg_conf, ex.std_conf).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Reads unlabeled tweets from any TSV with an `id` column and a `tweet`
/// or `text` column.
pub fn load_tweets(path: impl AsRef<Path>, normalizer: &Normalizer) -> Result<Vec<NormalizedTweet>, CorpusError> {
    let tsv = Tsv::read(path.as_ref())?;
    let id = tsv.column("id")?;
    let text = tsv.column("tweet").or_else(|_| tsv.column("text"))?;
    tsv.rows
        .iter()
        .map(|(line, row)| {
            let raw = RawTweet::new(tsv.field(*line, row, id)?, tsv.field(*line, row, text)?);
            Ok(normalizer.normalize(&raw))
        })
        .collect()
}

/// Decision boundary for turning average confidence into an A label.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Self, CorpusError> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(CorpusError::BadThreshold(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Scores at or above the threshold are offensive.
    pub fn label(self, avg_conf: f64) -> TaskLabelA {
        if avg_conf >= self.0 {
            TaskLabelA::Off
        } else {
            TaskLabelA::Not
        }
    }
}

/// Converts scored examples into synthetic task-A labels.
pub fn binarize(examples: &[ScoredExample], threshold: Threshold) -> Vec<LabeledExample> {
    examples
        .iter()
        .map(|ex| {
            let labels = match threshold.label(ex.avg_conf) {
                TaskLabelA::Off => LabelTriple::untargeted(),
                TaskLabelA::Not => LabelTriple::not_offensive(),
            };
            LabeledExample { tweet: ex.tweet.clone(), labels, synthetic: true }
        })
        .collect()
}

/// Seeded shuffle followed by a `(train, validation)` partition.
pub fn split<T: Clone>(examples: &[T], fractions: (f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    let (f_train, f_val) = fractions;
    if !(f_train > 0.0 && f_val > 0.0 && (f_train + f_val - 1.0).abs() < 1e-9) {
        return Err(CorpusError::BadFractions(f_train, f_val));
    }
    let n = examples.len();
    if n < 2 {
        return Err(CorpusError::TooFewExamples(n));
    }
    let n_train = ((f_train * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

//! Macro-F1, evaluation reports, majority-vote ensembles and threshold
//! search.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::ModelBundle;
use crate::corpus::{ClassLabel, LabeledExample, TaskLabelA, TaskLabelB, TaskLabelC, Threshold};
use crate::encoder::ModelError;
use crate::mtl::{Gold, ModelKind, PredictionTriple, TaskPrediction};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{golds} gold labels but {preds} predictions")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("label {0} is not in the class set")]
    UnknownLabel(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("threshold grid values must lie in (0, 1), got {0}")]
    BadGrid(f64),
    #[error("ensemble members disagree: {0}")]
    MemberMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Precision, recall and F1 of one class; each is 0 when its denominator is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassScores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, support: tp + fn_ }
    }
}

/// Rows are gold classes, columns predicted classes, both in class-set order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn compute<L: PartialEq + std::fmt::Debug>(golds: &[L], preds: &[L], classes: &[L]) -> Result<Self, EvalError> {
        if golds.len() != preds.len() {
            return Err(EvalError::LengthMismatch { golds: golds.len(), preds: preds.len() });
        }
        if golds.is_empty() {
            return Err(EvalError::Empty);
        }
        let position = |l: &L| classes.iter().position(|c| c == l).ok_or_else(|| EvalError::UnknownLabel(format!("{l:?}")));
        let mut counts = vec![vec![0; classes.len()]; classes.len()];
        for (g, p) in golds.iter().zip(preds) {
            counts[position(g)?][position(p)?] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn class_scores(&self) -> Vec<ClassScores> {
        let k = self.counts.len();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let fp = (0..k).filter(|&g| g != c).map(|g| self.counts[g][c]).sum();
                let fn_ = (0..k).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
                ClassScores::from_counts(tp, fp, fn_)
            })
            .collect()
    }

    /// Unweighted mean of per-class F1 over the whole class set.
    pub fn macro_f1(&self) -> f64 {
        let scores = self.class_scores();
        scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
    }
}

/// Mean of per-class F1 over every class in `classes`, including classes
/// that never occur in `golds`.
pub fn macro_f1<L: PartialEq + std::fmt::Debug>(golds: &[L], preds: &[L], classes: &[L]) -> Result<f64, EvalError> {
    Ok(ConfusionMatrix::compute(golds, preds, classes)?.macro_f1())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: &'static str,
    pub class_names: Vec<&'static str>,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
}

impl TaskReport {
    pub fn compute<L: ClassLabel>(task: &'static str, golds: &[L], preds: &[L], names: fn(L) -> &'static str) -> Result<Self, EvalError> {
        let confusion = ConfusionMatrix::compute(golds, preds, L::ALL)?;
        Ok(Self {
            task,
            class_names: L::ALL.iter().map(|&l| names(l)).collect(),
            macro_f1: confusion.macro_f1(),
            per_class: confusion.class_scores(),
            confusion,
        })
    }

    fn write(&self, out: &mut String) {
        let _ = writeln!(out, "task {} macro_f1 {:.6}", self.task, self.macro_f1);
        for (name, s) in self.class_names.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "  {name:<5} precision {:.6} recall {:.6} f1 {:.6} support {}",
                s.precision, s.recall, s.f1, s.support
            );
        }
        let _ = writeln!(out, "  confusion (rows gold, cols pred: {})", self.class_names.join(" "));
        for (name, row) in self.class_names.iter().zip(&self.confusion.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "  {name:<5} {}", cells.join(" "));
        }
    }
}

/// Per-task scores. B and C are only reported for multi-task models and
/// only over non-synthetic examples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    pub a: TaskReport,
    pub b: Option<TaskReport>,
    pub c: Option<TaskReport>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("examples {}\n", self.examples);
        self.a.write(&mut out);
        for report in [&self.b, &self.c].into_iter().flatten() {
            report.write(&mut out);
        }
        out
    }
}

/// Batched prediction over `corpus` followed by per-task scoring.
pub fn evaluate(bundle: &ModelBundle, corpus: &[LabeledExample]) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::Empty);
    }
    let seqs: Vec<_> = corpus.iter().map(|ex| bundle.encode(&ex.tweet.text)).collect();
    let golds_a: Vec<TaskLabelA> = corpus.iter().map(|ex| ex.labels.a()).collect();
    match bundle.kind {
        ModelKind::Baseline => {
            let preds: Vec<TaskLabelA> = bundle.model.forward_baseline(&seqs)?.into_iter().map(|p| p.label).collect();
            Ok(EvalReport {
                examples: corpus.len(),
                a: TaskReport::compute("A", &golds_a, &preds, TaskLabelA::as_str)?,
                b: None,
                c: None,
            })
        }
        ModelKind::Mtl => {
            let preds = bundle.model.forward_mtl(&seqs)?;
            let golds: Vec<Gold> = corpus.iter().map(Gold::from).collect();
            report_from_predictions(&golds, &preds)
        }
    }
}

/// Scores multi-task predictions against `corpus`.
pub fn report_from_predictions(corpus: &[Gold], preds: &[PredictionTriple]) -> Result<EvalReport, EvalError> {
    if corpus.len() != preds.len() {
        return Err(EvalError::LengthMismatch { golds: corpus.len(), preds: preds.len() });
    }
    let golds_a: Vec<TaskLabelA> = corpus.iter().map(|ex| ex.labels.a()).collect();
    let preds_a: Vec<TaskLabelA> = preds.iter().map(|p| p.a.label).collect();
    let real: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].synthetic).collect();
    let (b, c) = if real.is_empty() {
        (None, None)
    } else {
        let gb: Vec<TaskLabelB> = real.iter().map(|&i| corpus[i].labels.b()).collect();
        let pb: Vec<TaskLabelB> = real.iter().map(|&i| preds[i].b.label).collect();
        let gc: Vec<TaskLabelC> = real.iter().map(|&i| corpus[i].labels.c()).collect();
        let pc: Vec<TaskLabelC> = real.iter().map(|&i| preds[i].c.label).collect();
        (
            Some(TaskReport::compute("B", &gb, &pb, TaskLabelB::as_str)?),
            Some(TaskReport::compute("C", &gc, &pc, TaskLabelC::as_str)?),
        )
    };
    Ok(EvalReport { examples: corpus.len(), a: TaskReport::compute("A", &golds_a, &preds_a, TaskLabelA::as_str)?, b, c })
}

/// Label with the most argmax votes. Ties go to the label whose voters
/// assigned it the largest summed probability, then to the earliest label
/// in class order.
pub fn vote<L: ClassLabel>(members: &[&TaskPrediction<L>]) -> L {
    let k = L::n_classes();
    let mut counts = vec![0usize; k];
    let mut mass = vec![0.0f64; k];
    for m in members {
        let c = m.label.index();
        counts[c] += 1;
        mass[c] += m.probs[c];
    }
    let mut best = 0;
    for c in 1..k {
        if counts[c] > counts[best] || (counts[c] == counts[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    L::from_index(best)
}

/// Final per-task labels of an ensemble for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VotedLabels {
    pub a: TaskLabelA,
    pub b: TaskLabelB,
    pub c: TaskLabelC,
}

/// Majority vote across `members`, each holding predictions for the same
/// examples in the same order.
pub fn majority_vote(members: &[Vec<PredictionTriple>]) -> Result<Vec<VotedLabels>, EvalError> {
    let Some(first) = members.first() else {
        return Err(EvalError::Empty);
    };
    if let Some(m) = members.iter().find(|m| m.len() != first.len()) {
        return Err(EvalError::MemberMismatch(format!(
            "member predicted {} examples, expected {}",
            m.len(),
            first.len()
        )));
    }
    Ok((0..first.len())
        .map(|i| VotedLabels {
            a: vote(&members.iter().map(|m| &m[i].a).collect::<Vec<_>>()),
            b: vote(&members.iter().map(|m| &m[i].b).collect::<Vec<_>>()),
            c: vote(&members.iter().map(|m| &m[i].c).collect::<Vec<_>>()),
        })
        .collect())
}

/// Multi-task models sharing one vocabulary and configuration.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<ModelBundle>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelBundle>) -> Result<Self, EvalError> {
        let Some(first) = members.first() else {
            return Err(EvalError::Empty);
        };
        for m in &members {
            if m.kind != ModelKind::Mtl {
                return Err(EvalError::MemberMismatch("ensemble members must be multi-task models".into()));
            }
            if m.vocab != first.vocab {
                return Err(EvalError::MemberMismatch("vocabularies differ".into()));
            }
            if m.model.encoder_config() != first.model.encoder_config() || m.model.head_config != first.model.head_config {
                return Err(EvalError::MemberMismatch("model configurations differ".into()));
            }
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ModelBundle] {
        &self.members
    }

    /// Member predictions (run in parallel) followed by a majority vote.
    pub fn predict(&self, texts: &[&str]) -> Result<Vec<VotedLabels>, EvalError> {
        if texts.is_empty() {
            return Err(EvalError::Empty);
        }
        let seqs: Vec<_> = texts.iter().map(|t| self.members[0].encode(t)).collect();
        let member_preds = self
            .members
            .par_iter()
            .map(|m| m.model.forward_mtl(&seqs))
            .collect::<Result<Vec<_>, _>>()?;
        majority_vote(&member_preds)
    }
}

/// Thresholds 0.1, 0.2, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub macro_f1: f64,
    /// Set when every gold label is identical or the score is flat across
    /// the grid; the smallest grid value is returned.
    pub degenerate: bool,
    /// `(threshold, macro_f1)` for every grid point in input order.
    pub scores: Vec<(f64, f64)>,
}

/// Grid search for the binarization threshold that best reproduces `golds`
/// from `avg_conf`. Ties go to the smallest threshold.
pub fn threshold_search(avg_conf: &[f64], golds: &[TaskLabelA], grid: &[f64]) -> Result<ThresholdChoice, EvalError> {
    if avg_conf.is_empty() || grid.is_empty() {
        return Err(EvalError::Empty);
    }
    if avg_conf.len() != golds.len() {
        return Err(EvalError::LengthMismatch { golds: golds.len(), preds: avg_conf.len() });
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &t in grid {
        let threshold = Threshold::new(t).map_err(|_| EvalError::BadGrid(t))?;
        let preds: Vec<TaskLabelA> = avg_conf.iter().map(|&s| threshold.label(s)).collect();
        scores.push((t, macro_f1(golds, &preds, TaskLabelA::ALL)?));
    }
    let smallest = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let all_same = golds.iter().all(|&g| g == golds[0]);
    let flat = scores.iter().all(|&(_, f)| f == scores[0].1);
    if all_same || flat {
        let f1 = scores.iter().find(|&&(t, _)| t == smallest).map_or(0.0, |&(_, f)| f);
        return Ok(ThresholdChoice { threshold: smallest, macro_f1: f1, degenerate: true, scores });
    }
    let (threshold, f1) = scores
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |(bt, bf), (t, f)| {
            if f > bf || (f == bf && t < bt) {
                (t, f)
            } else {
                (bt, bf)
            }
        });
    Ok(ThresholdChoice { threshold, macro_f1: f1, degenerate: false, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TaskLabelA::{Not, Off};

    fn pred_a(label: TaskLabelA, p_off: f64) -> TaskPrediction<TaskLabelA> {
        TaskPrediction { probs: vec![p_off, 1.0 - p_off], label }
    }

    #[test]
    fn macro_f1_examples() {
        let classes = TaskLabelA::ALL;
        assert_eq!(macro_f1(&[Off, Not, Not], &[Off, Not, Not], classes).unwrap(), 1.0);
        let f = macro_f1(&[Off, Off, Not, Not], &[Off, Not, Not, Not], classes).unwrap();
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        let f = macro_f1(&[Off, Not], &[Off, Off], classes).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_errors() {
        assert!(matches!(macro_f1(&[Off], &[Off, Not], TaskLabelA::ALL), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(macro_f1(&[Off], &[Not], &[Off]), Err(EvalError::UnknownLabel(_))));
        assert_eq!(macro_f1::<TaskLabelA>(&[], &[], TaskLabelA::ALL), Err(EvalError::Empty));
    }

    #[test]
    fn constant_predictor_on_balanced_golds() {
        let golds = [Off, Not, Off, Not, Off, Not];
        let preds = [Off; 6];
        assert!((macro_f1(&golds, &preds, TaskLabelA::ALL).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn vote_examples() {
        let votes: Vec<_> = [Off, Off, Not, Off, Not].iter().map(|&l| pred_a(l, if l == Off { 0.6 } else { 0.4 })).collect();
        assert_eq!(vote(&votes.iter().collect::<Vec<_>>()), Off);

        let single = pred_a(Not, 0.3);
        assert_eq!(vote(&[&single]), Not);

        // 2-2 tie; OFF voters sum to P(OFF) = 1.3, NOT voters to P(NOT) = 1.1
        let tie = [pred_a(Off, 0.65), pred_a(Off, 0.65), pred_a(Not, 0.45), pred_a(Not, 0.45)];
        assert_eq!(vote(&tie.iter().collect::<Vec<_>>()), Off);
        let flipped = [pred_a(Off, 0.52), pred_a(Off, 0.52), pred_a(Not, 0.2), pred_a(Not, 0.2)];
        assert_eq!(vote(&flipped.iter().collect::<Vec<_>>()), Not);
    }

    #[test]
    fn tie_break_by_summed_probability() {
        let m = |label: TaskLabelB, probs: [f64; 3]| TaskPrediction { probs: probs.to_vec(), label };
        let members = [
            m(TaskLabelB::Tin, [0.5, 0.3, 0.2]),
            m(TaskLabelB::Tin, [0.4, 0.35, 0.25]),
            m(TaskLabelB::Unt, [0.2, 0.5, 0.3]),
            m(TaskLabelB::Unt, [0.2, 0.6, 0.2]),
        ];
        // TIN voters 0.9, UNT voters 1.1
        assert_eq!(vote(&members.iter().collect::<Vec<_>>()), TaskLabelB::Unt);
    }

    #[test]
    fn majority_vote_rejects_mismatched_members() {
        let p = PredictionTriple {
            a: pred_a(Off, 0.9),
            b: TaskPrediction::from_probs(vec![0.6, 0.2, 0.2]),
            c: TaskPrediction::from_probs(vec![0.7, 0.1, 0.1, 0.1]),
        };
        assert!(majority_vote(&[vec![p.clone()], vec![p.clone(), p.clone()]]).is_err());
        let out = majority_vote(&[vec![p.clone()]]).unwrap();
        assert_eq!(out[0], VotedLabels { a: Off, b: TaskLabelB::Tin, c: TaskLabelC::Ind });
    }

    #[test]
    fn threshold_search_examples() {
        let scores = [0.35, 0.5, 0.9, 0.05, 0.2, 0.25];
        let golds = [Off, Off, Off, Not, Not, Not];
        let choice = threshold_search(&scores, &golds, &default_grid()).unwrap();
        assert_eq!(choice.threshold, 0.3);
        assert_eq!(choice.macro_f1, 1.0);
        assert!(!choice.degenerate);

        let choice = threshold_search(&scores, &[Not; 6], &default_grid()).unwrap();
        assert!(choice.degenerate);
        assert_eq!(choice.threshold, 0.1);

        let choice = threshold_search(&scores, &golds, &[0.7]).unwrap();
        assert_eq!(choice.threshold, 0.7);

        assert_eq!(threshold_search(&[], &[], &[0.5]), Err(EvalError::Empty));
        assert_eq!(threshold_search(&scores, &golds, &[1.5]), Err(EvalError::BadGrid(1.5)));
    }

    proptest! {
        #[test]
        fn macro_f1_relabel_symmetry(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let golds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let perm = [2usize, 0, 1];
            let g2: Vec<usize> = golds.iter().map(|&g| perm[g]).collect();
            let p2: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let a = macro_f1(&golds, &preds, &[0, 1, 2]).unwrap();
            let b = macro_f1(&g2, &p2, &[0, 1, 2]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn macro_f1_self_is_one(mut labels in proptest::collection::vec(0usize..4, 0..40)) {
            labels.extend([0, 1, 2, 3]);
            prop_assert_eq!(macro_f1(&labels, &labels, &[0, 1, 2, 3]).unwrap(), 1.0);
        }

        #[test]
        fn vote_order_invariant(raw in proptest::collection::vec((0usize..2, 0.0f64..1.0), 1..8), seed in any::<u64>()) {
            let preds: Vec<_> = raw.iter().map(|&(l, p)| pred_a(TaskLabelA::from_index(l), p)).collect();
            let mut refs: Vec<_> = preds.iter().collect();
            let first = vote(&refs);
            use rand::{seq::SliceRandom, SeedableRng};
            refs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(vote(&refs), first);
        }
    }
}

//! Class-imbalance handling: random over-sampling, length-preserving
//! over-under sampling, SMOTE in embedding space and inverse-frequency class
//! weights.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apportion::largest_remainder;
use crate::corpus::{Corpus, Label};
use crate::encoder::EmbeddingMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum RebalanceError {
    #[error("cannot rebalance an empty corpus")]
    EmptyCorpus,
    #[error("target class {0} has no examples to sample from")]
    MissingTargetClass(Label),
    #[error("class {0} needs at least two members for SMOTE")]
    ClassTooSmall(Label),
    #[error("embedding row {0} has a non-finite entry")]
    NonFiniteEmbedding(usize),
    #[error("target fractions must be non-negative and sum to 1 (got {sum})")]
    BadTarget { sum: f64 },
    #[error("plan strategy is {actual:?}, operation needs {expected:?}")]
    WrongStrategy { expected: Strategy, actual: Strategy },
    #[error("{rows} embedding rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("smote_k must be at least 1")]
    ZeroNeighbors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    None,
    Oversample,
    OverUnder,
    Smote,
    ClassWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalancePlan {
    pub strategy: Strategy,
    /// Desired class shares; `None` means uniform over the classes present.
    #[serde(default)]
    pub target: Option<BTreeMap<Label, f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_smote_k")]
    pub smote_k: usize,
}

fn default_smote_k() -> usize {
    5
}

impl RebalancePlan {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        RebalancePlan {
            strategy,
            target: None,
            seed,
            smote_k: default_smote_k(),
        }
    }

    pub fn with_target(mut self, target: BTreeMap<Label, f64>) -> Self {
        self.target = Some(target);
        self
    }

    pub fn validate(&self) -> Result<(), RebalanceError> {
        if self.smote_k == 0 {
            return Err(RebalanceError::ZeroNeighbors);
        }
        if let Some(target) = &self.target {
            let sum: f64 = target.values().sum();
            if target.values().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(RebalanceError::BadTarget { sum });
            }
        }
        Ok(())
    }

    fn expect(&self, expected: Strategy) -> Result<(), RebalanceError> {
        if self.strategy != expected {
            return Err(RebalanceError::WrongStrategy {
                expected,
                actual: self.strategy,
            });
        }
        self.validate()
    }

    /// Per-class expected counts for a dataset of `total` rows with the given
    /// observed class counts.
    pub fn expected_counts(
        &self,
        observed: &BTreeMap<Label, usize>,
        total: usize,
    ) -> Result<BTreeMap<Label, usize>, RebalanceError> {
        let target: BTreeMap<Label, f64> = match &self.target {
            Some(t) => t.clone(),
            None => {
                let share = 1.0 / observed.len() as f64;
                observed.keys().map(|&l| (l, share)).collect()
            }
        };
        for (&label, &f) in &target {
            if f > 0.0 && observed.get(&label).copied().unwrap_or(0) == 0 {
                return Err(RebalanceError::MissingTargetClass(label));
            }
        }
        let labels: Vec<Label> = target.keys().copied().collect();
        let shares: Vec<f64> = target.values().copied().collect();
        let mut expected: BTreeMap<Label, usize> =
            labels.into_iter().zip(largest_remainder(total, &shares)).collect();
        // classes outside an explicit target are driven to zero
        for &label in observed.keys() {
            expected.entry(label).or_insert(0);
        }
        Ok(expected)
    }
}

fn members_by_class(labels: &[Label]) -> BTreeMap<Label, Vec<usize>> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

fn assemble(corpus: &Corpus, kept: &[bool], extra: &[usize]) -> Corpus {
    let ex = corpus.examples();
    let originals = ex.iter().zip(kept).filter(|(_, &k)| k).map(|(e, _)| e);
    let duplicates = extra.iter().map(|&i| &ex[i]);
    Corpus::from_pairs(
        originals
            .chain(duplicates)
            .map(|e| (e.text.clone(), e.label))
            .collect::<Vec<_>>(),
        corpus.split(),
        corpus.language(),
    )
}

/// Raises every class to the largest class count by duplicating members
/// uniformly at random with replacement. Duplicates follow the originals.
pub fn oversample(corpus: &Corpus, plan: &RebalancePlan) -> Result<Corpus, RebalanceError> {
    plan.expect(Strategy::Oversample)?;
    if corpus.is_empty() {
        return Err(RebalanceError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let by_class = members_by_class(&corpus.labels());
    let max = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut extra = Vec::new();
    for members in by_class.values() {
        for _ in members.len()..max {
            extra.push(*members.choose(&mut rng).expect("class has members"));
        }
    }
    Ok(assemble(corpus, &vec![true; corpus.len()], &extra))
}

/// Under-samples classes above their expected count (without replacement)
/// and over-samples those below it (with replacement), so the output has
/// exactly as many rows as the input and every class hits its target.
pub fn over_under_sample(corpus: &Corpus, plan: &RebalancePlan) -> Result<Corpus, RebalanceError> {
    plan.expect(Strategy::OverUnder)?;
    if corpus.is_empty() {
        return Err(RebalanceError::EmptyCorpus);
    }
    let labels = corpus.labels();
    let by_class = members_by_class(&labels);
    let observed: BTreeMap<Label, usize> = by_class.iter().map(|(&l, m)| (l, m.len())).collect();
    let expected = plan.expected_counts(&observed, corpus.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut kept = vec![false; corpus.len()];
    let mut extra = Vec::new();
    for (label, members) in &by_class {
        let want = expected[label];
        if members.len() > want {
            for pick in index::sample(&mut rng, members.len(), want) {
                kept[members[pick]] = true;
            }
        } else {
            for &i in members {
                kept[i] = true;
            }
            for _ in members.len()..want {
                extra.push(*members.choose(&mut rng).expect("class has members"));
            }
        }
    }
    Ok(assemble(corpus, &kept, &extra))
}

/// Where one synthetic SMOTE row came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticRow {
    pub source: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct SmoteOutput {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<Label>,
    /// One record per appended row, in output order.
    pub synthetic: Vec<SyntheticRow>,
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest same-class members of `row` (Euclidean, ties by index).
fn nearest_members(values: &Array2<f64>, members: &[usize], row: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = members
        .iter()
        .filter(|&&m| m != row)
        .map(|&m| (squared_distance(values.row(row), values.row(m)), m))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, m)| m).collect()
}

/// Synthesizes rows for every class below its over-under expected count by
/// interpolating between a member and one of its `smote_k` nearest
/// same-class neighbours. Never removes rows; synthetic rows are appended.
pub fn smote(
    embeddings: &EmbeddingMatrix,
    labels: &[Label],
    plan: &RebalancePlan,
) -> Result<SmoteOutput, RebalanceError> {
    plan.expect(Strategy::Smote)?;
    let values = embeddings.values();
    if values.nrows() != labels.len() {
        return Err(RebalanceError::LengthMismatch {
            rows: values.nrows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(RebalanceError::EmptyCorpus);
    }
    if let Some(row) = values
        .axis_iter(Axis(0))
        .position(|r| r.iter().any(|v| !v.is_finite()))
    {
        return Err(RebalanceError::NonFiniteEmbedding(row));
    }
    let by_class = members_by_class(labels);
    let observed: BTreeMap<Label, usize> = by_class.iter().map(|(&l, m)| (l, m.len())).collect();
    let expected = plan.expected_counts(&observed, labels.len())?;
    for (label, members) in &by_class {
        if members.len() < expected[label] && members.len() < 2 {
            return Err(RebalanceError::ClassTooSmall(*label));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut out_labels = labels.to_vec();
    let mut synthetic = Vec::new();
    for (label, members) in &by_class {
        let deficit = expected[label].saturating_sub(members.len());
        if deficit == 0 {
            continue;
        }
        let k = plan.smote_k.min(members.len() - 1);
        let mut neighbours: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for _ in 0..deficit {
            let source = *members.choose(&mut rng).expect("class has members");
            let near = neighbours
                .entry(source)
                .or_insert_with(|| nearest_members(values, members, source, k));
            let neighbor = *near.choose(&mut rng).expect("k >= 1");
            let lambda: f64 = rng.random();
            let x = values.row(source);
            let point = &x + &((&values.row(neighbor) - &x) * lambda);
            rows.push(point);
            out_labels.push(*label);
            synthetic.push(SyntheticRow {
                source,
                neighbor,
                lambda,
            });
        }
    }
    let mut all = values.clone();
    for row in &rows {
        all.push_row(row.view()).expect("row width matches");
    }
    Ok(SmoteOutput {
        embeddings: EmbeddingMatrix::new(all).expect("finite inputs interpolate to finite rows"),
        labels: out_labels,
        synthetic,
    })
}

/// Inverse-frequency weights `N / (K * n_c)` over the classes present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: BTreeMap<Label, f64>,
}

impl ClassWeights {
    pub fn from_labels(labels: &[Label]) -> Result<ClassWeights, RebalanceError> {
        if labels.is_empty() {
            return Err(RebalanceError::EmptyCorpus);
        }
        let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        let n = labels.len() as f64;
        let k = counts.len() as f64;
        let weights = counts.into_iter().map(|(l, c)| (l, n / (k * c as f64))).collect();
        Ok(ClassWeights { weights })
    }

    /// Weight of `label`; classes absent at fit time weigh 1.
    pub fn weight(&self, label: Label) -> f64 {
        self.weights.get(&label).copied().unwrap_or(1.0)
    }

    pub fn per_example(&self, labels: &[Label]) -> Vec<f64> {
        labels.iter().map(|&l| self.weight(l)).collect()
    }
}

pub fn class_weights(corpus: &Corpus) -> Result<ClassWeights, RebalanceError> {
    ClassWeights::from_labels(&corpus.labels())
}

/// Applies a row-level plan to a corpus. `smote` needs embeddings and
/// `class_weights` leaves rows untouched; both return the corpus unchanged.
pub fn resample_rows(corpus: &Corpus, plan: &RebalancePlan) -> Result<Corpus, RebalanceError> {
    match plan.strategy {
        Strategy::Oversample => oversample(corpus, plan),
        Strategy::OverUnder => over_under_sample(corpus, plan),
        Strategy::None | Strategy::Smote | Strategy::ClassWeights => Ok(corpus.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LanguageTag, Split};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as ValueStrategy;

    const A: Label = Label::Misandry;
    const B: Label = Label::Misogyny;
    const C: Label = Label::Xenophobia;

    fn corpus_with(counts: &[(Label, usize)]) -> Corpus {
        let pairs: Vec<(String, Label)> = counts
            .iter()
            .flat_map(|&(l, n)| (0..n).map(move |i| (format!("{l}-{i}"), l)))
            .collect();
        Corpus::from_pairs(pairs, Split::Train, LanguageTag::Synthetic)
    }

    fn multiset(c: &Corpus) -> Vec<(String, Label)> {
        let mut v: Vec<_> = c.examples().iter().map(|e| (e.text.clone(), e.label)).collect();
        v.sort();
        v
    }

    #[test]
    fn oversample_raises_to_the_max() {
        let c = corpus_with(&[(A, 10), (B, 2)]);
        let out = oversample(&c, &RebalancePlan::new(Strategy::Oversample, 0)).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(out.class_counts()[&B], 10);
        assert_eq!(&out.examples()[..12].iter().map(|e| &e.text).collect::<Vec<_>>(), &c.examples().iter().map(|e| &e.text).collect::<Vec<_>>());
    }

    #[test]
    fn oversample_balanced_is_identity_and_deterministic() {
        let c = corpus_with(&[(A, 3), (B, 3)]);
        let plan = RebalancePlan::new(Strategy::Oversample, 0);
        assert_eq!(oversample(&c, &plan).unwrap(), c);
        let c = corpus_with(&[(A, 5), (B, 3), (C, 1)]);
        let plan = RebalancePlan::new(Strategy::Oversample, 1);
        assert_eq!(oversample(&c, &plan).unwrap(), oversample(&c, &plan).unwrap());
    }

    #[test]
    fn over_under_worked_examples() {
        let c = corpus_with(&[(A, 10), (B, 2)]);
        let out = over_under_sample(&c, &RebalancePlan::new(Strategy::OverUnder, 3)).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(out.class_counts(), BTreeMap::from([(A, 6), (B, 6)]));

        // 10 / 3 = 3.33 each; the tie on remainders goes to the first label
        let c = corpus_with(&[(A, 7), (B, 2), (C, 1)]);
        let out = over_under_sample(&c, &RebalancePlan::new(Strategy::OverUnder, 3)).unwrap();
        assert_eq!(out.class_counts(), BTreeMap::from([(A, 4), (B, 3), (C, 3)]));
    }

    #[test]
    fn over_under_fixed_point_keeps_the_multiset() {
        let c = corpus_with(&[(A, 4), (B, 4)]);
        let out = over_under_sample(&c, &RebalancePlan::new(Strategy::OverUnder, 9)).unwrap();
        assert_eq!(multiset(&out), multiset(&c));
    }

    #[test]
    fn over_under_requires_target_classes_present() {
        let c = corpus_with(&[(A, 4)]);
        let plan = RebalancePlan::new(Strategy::OverUnder, 0).with_target(BTreeMap::from([(A, 0.5), (B, 0.5)]));
        assert_eq!(over_under_sample(&c, &plan).unwrap_err(), RebalanceError::MissingTargetClass(B));
    }

    #[test]
    fn wrong_strategy_is_rejected() {
        let c = corpus_with(&[(A, 4)]);
        assert!(matches!(
            oversample(&c, &RebalancePlan::new(Strategy::Smote, 0)),
            Err(RebalanceError::WrongStrategy { .. })
        ));
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&corpus_with(&[(A, 2), (B, 2)])).unwrap();
        assert_eq!(w.weights, BTreeMap::from([(A, 1.0), (B, 1.0)]));
        let w = class_weights(&corpus_with(&[(A, 3), (B, 1)])).unwrap();
        assert!((w.weights[&A] - 4.0 / 6.0).abs() < 1e-12);
        assert!((w.weights[&B] - 2.0).abs() < 1e-12);
        let w = class_weights(&corpus_with(&[(A, 5)])).unwrap();
        assert_eq!(w.weights, BTreeMap::from([(A, 1.0)]));
        assert_eq!(class_weights(&corpus_with(&[])).unwrap_err(), RebalanceError::EmptyCorpus);
    }

    fn matrix(rows: &[[f64; 2]]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j])).unwrap()
    }

    #[test]
    fn smote_two_points_lands_on_the_segment() {
        // N = 6 with a uniform target gives 3 per class: B needs one row
        let m = matrix(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [5.0, 5.0], [7.0, 9.0]]);
        let labels = [A, A, A, A, B, B];
        let out = smote(&m, &labels, &RebalancePlan::new(Strategy::Smote, 11)).unwrap();
        assert_eq!(out.labels.len(), 7);
        assert_eq!(out.labels[6], B);
        let s = out.embeddings.values().row(6);
        let rec = out.synthetic[0];
        assert!([4, 5].contains(&rec.source) && [4, 5].contains(&rec.neighbor) && rec.source != rec.neighbor);
        let (p, q) = (m.values().row(rec.source), m.values().row(rec.neighbor));
        let t = if (q[0] - p[0]).abs() > 0.0 { (s[0] - p[0]) / (q[0] - p[0]) } else { 0.0 };
        assert!((0.0..=1.0).contains(&t));
        assert!((s[1] - (p[1] + t * (q[1] - p[1]))).abs() < 1e-12);
    }

    #[test]
    fn smote_never_removes_rows_and_rejects_singletons() {
        let m = matrix(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [9.0, 9.0]]);
        let err = smote(&m, &[A, A, A, B], &RebalancePlan::new(Strategy::Smote, 0)).unwrap_err();
        assert_eq!(err, RebalanceError::ClassTooSmall(B));

        // non-finite rows never reach SMOTE: the matrix type refuses them
        let bad = Array2::from_shape_vec((2, 2), vec![0.0, f64::NAN, 1.0, 0.0]).unwrap();
        assert!(EmbeddingMatrix::new(bad).is_err());
    }

    fn arb_counts() -> impl ValueStrategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..40, 1..8)
    }

    proptest! {
        #[test]
        fn over_under_preserves_length_and_hits_targets(counts in arb_counts(), seed in any::<u64>()) {
            let spec: Vec<(Label, usize)> = Label::ACTIVE.iter().copied().zip(counts.iter().copied()).collect();
            let c = corpus_with(&spec);
            let plan = RebalancePlan::new(Strategy::OverUnder, seed);
            let out = over_under_sample(&c, &plan).unwrap();
            prop_assert_eq!(out.len(), c.len());
            let expected = plan.expected_counts(&c.class_counts(), c.len()).unwrap();
            prop_assert_eq!(out.class_counts(), expected.into_iter().filter(|(_, n)| *n > 0).collect::<BTreeMap<_, _>>());
        }

        #[test]
        fn under_sampled_classes_are_sub_multisets(counts in arb_counts(), seed in any::<u64>()) {
            let spec: Vec<(Label, usize)> = Label::ACTIVE.iter().copied().zip(counts.iter().copied()).collect();
            let c = corpus_with(&spec);
            let out = over_under_sample(&c, &RebalancePlan::new(Strategy::OverUnder, seed)).unwrap();
            let input: std::collections::BTreeSet<String> = c.texts().into_iter().collect();
            let mut seen = std::collections::BTreeMap::<String, usize>::new();
            for e in out.examples() {
                prop_assert!(input.contains(&e.text));
                *seen.entry(e.text.clone()).or_insert(0) += 1;
            }
            for (label, n) in c.class_counts() {
                let want = out.class_counts().get(&label).copied().unwrap_or(0);
                if n > want {
                    // no duplicates within an under-sampled class
                    prop_assert!(seen.iter().filter(|(t, _)| t.starts_with(label.as_str())).all(|(_, &k)| k == 1));
                }
            }
        }

        #[test]
        fn oversample_never_decreases_counts(counts in arb_counts(), seed in any::<u64>()) {
            let spec: Vec<(Label, usize)> = Label::ACTIVE.iter().copied().zip(counts.iter().copied()).collect();
            let c = corpus_with(&spec);
            let out = oversample(&c, &RebalancePlan::new(Strategy::Oversample, seed)).unwrap();
            for (label, n) in c.class_counts() {
                prop_assert!(out.class_counts()[&label] >= n);
            }
        }

        #[test]
        fn class_weights_recover_n(counts in arb_counts()) {
            let spec: Vec<(Label, usize)> = Label::ACTIVE.iter().copied().zip(counts.iter().copied()).collect();
            let c = corpus_with(&spec);
            let w = class_weights(&c).unwrap();
            let total: f64 = c.class_counts().iter().map(|(l, &n)| w.weights[l] * n as f64).sum();
            prop_assert!((total - c.len() as f64).abs() < 1e-9);
        }
    }
}

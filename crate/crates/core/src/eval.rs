//! Faithfulness protocols: keep the top-ranked tokens and re-predict
//! (macro-F1 on the masked inputs), or mask them and measure the drop (AOPC).

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{explain, ExplainOptions, MethodKind};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{self, Exec};
use crate::real::Real;
use crate::tokenizer::{apply_mask, keep_count, MaskPolicy, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Keep the top-ranked tokens, mask the rest.
    KeepTopK,
    /// Mask the top-ranked tokens, keep the rest.
    MaskTopK,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::KeepTopK => "keep-top-k",
            Direction::MaskTopK => "mask-top-k",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingSpec {
    pub k: f64,
    pub direction: Direction,
    #[serde(default)]
    pub policy: MaskPolicy,
}

impl MaskingSpec {
    pub fn new(k: f64, direction: Direction, policy: MaskPolicy) -> Result<Self> {
        let spec = MaskingSpec { k, direction, policy };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::Config(format!("k must be in (0, 1], got {}", self.k)));
        }
        Ok(())
    }

    /// Splits the real positions of a sentence into `(kept, masked)`.
    /// `ranking` lists real positions best first; positions it omits are
    /// treated as ranked last, in index order.
    pub fn select(&self, ranking: &[usize], seq: &TokenSequence) -> (Vec<usize>, Vec<usize>) {
        let real = seq.real_positions();
        let mut order: Vec<usize> = ranking.iter().copied().filter(|i| real.contains(i)).collect();
        let seen: BTreeSet<usize> = order.iter().copied().collect();
        order.extend(real.iter().copied().filter(|i| !seen.contains(i)));
        let top = keep_count(self.k, real.len());
        let (head, tail) = order.split_at(top);
        let (mut kept, mut masked) = match self.direction {
            Direction::KeepTopK => (head.to_vec(), tail.to_vec()),
            Direction::MaskTopK => (tail.to_vec(), head.to_vec()),
        };
        kept.sort_unstable();
        masked.sort_unstable();
        (kept, masked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    MacroF1,
    Accuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MacroF1 => "macro-f1",
            MetricKind::Accuracy => "accuracy",
        }
    }

    pub fn compute(self, preds: &[usize], golds: &[usize], num_classes: usize) -> Result<f64> {
        match self {
            MetricKind::MacroF1 => macro_f1(preds, golds, num_classes),
            MetricKind::Accuracy => accuracy(preds, golds),
        }
    }
}

/// Where a token ranking comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ranker {
    Method(MethodKind),
    /// Uniformly shuffled real positions; sentence `i` uses stream `i` of
    /// the seeded generator.
    Random { seed: u64 },
    /// Gold rationale positions first, then the rest in index order.
    Oracle,
}

impl fmt::Display for Ranker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ranker::Method(m) => f.write_str(m.name()),
            Ranker::Random { seed } => write!(f, "random:{seed}"),
            Ranker::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for Ranker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "oracle" {
            return Ok(Ranker::Oracle);
        }
        if let Some(seed) = s.strip_prefix("random:") {
            let seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad random seed in {s:?}")))?;
            return Ok(Ranker::Random { seed });
        }
        Ok(Ranker::Method(s.parse()?))
    }
}

impl Serialize for Ranker {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ranker {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Unweighted mean of per-class F1. A class that appears in neither list
/// scores 1.
pub fn macro_f1(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<f64> {
    check_labels(preds, golds)?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::Contract(format!(
                "label {} outside 0..{num_classes}",
                p.max(g)
            )));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_labels(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_labels(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub gold: usize,
    pub pred_full: usize,
    pub pred_masked: usize,
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub ranker: Ranker,
    pub k: f64,
    pub direction: Direction,
    pub policy: MaskPolicy,
    pub full_metric: f64,
    pub masked_metric: f64,
    /// `full_metric − masked_metric`; present for the mask-top-k direction.
    pub aopc: Option<f64>,
    pub records: Vec<SentenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub model_hash: String,
    pub metric: MetricKind,
    pub num_classes: usize,
    pub full_text_metric: f64,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    /// Recomputes every aggregate from the per-sentence records and checks
    /// that it matches exactly.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let golds: Vec<usize> = e.records.iter().map(|r| r.gold).collect();
            let full: Vec<usize> = e.records.iter().map(|r| r.pred_full).collect();
            let masked: Vec<usize> = e.records.iter().map(|r| r.pred_masked).collect();
            let f = self.metric.compute(&full, &golds, self.num_classes)?;
            let m = self.metric.compute(&masked, &golds, self.num_classes)?;
            let aopc = (e.direction == Direction::MaskTopK).then_some(f - m);
            if f != e.full_metric || m != e.masked_metric || aopc != e.aopc || f != self.full_text_metric {
                return Err(Error::Integrity(format!(
                    "aggregates of {} {} k={} do not match its records",
                    e.ranker,
                    e.direction.name(),
                    e.k
                )));
            }
        }
        Ok(())
    }

    /// Flat `method,k,direction,metric,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "k", "direction", "metric", "value"])?;
        let full_name = format!("full-{}", self.metric.name());
        for e in &self.entries {
            let ranker = e.ranker.to_string();
            let k = e.k.to_string();
            let mut row = |metric: &str, value: f64| {
                w.write_record([&ranker, &k, e.direction.name(), metric, &value.to_string()])
            };
            row(&full_name, e.full_metric)?;
            row(self.metric.name(), e.masked_metric)?;
            if let Some(a) = e.aopc {
                row("aopc", a)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// The class whose logit is explained: the gold label, or nothing for a
/// single-logit model.
fn target_class<T: Real>(model: &Model<T>, label: usize) -> Option<usize> {
    (model.config().num_outputs > 1).then_some(label)
}

fn rank_one<T: Real>(
    model: &Model<T>,
    ranker: Ranker,
    index: usize,
    ex: &Example,
    options: &ExplainOptions,
) -> Result<Vec<usize>> {
    match ranker {
        Ranker::Method(m) => {
            let class = target_class(model, ex.label);
            Ok(explain(model, &ex.seq, m, class, options)?.ranking)
        }
        Ranker::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let mut order = ex.seq.real_positions();
            order.shuffle(&mut rng);
            Ok(order)
        }
        Ranker::Oracle => {
            let mut order: Vec<usize> = ex.gold.clone();
            order.extend(ex.seq.real_positions().into_iter().filter(|i| !ex.gold.contains(i)));
            Ok(order)
        }
    }
}

/// Rankings for every example, computed once and reusable across masking
/// specs. A failure names the offending sentence.
pub fn rankings<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    ranker: Ranker,
    options: &ExplainOptions,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    par::try_map(exec, examples, |i, ex| {
        rank_one(model, ranker, i, ex, options).map_err(|e| Error::Sentence {
            id: ex.id.clone(),
            source: Box::new(e),
        })
    })
}

/// Predictions on the unmasked inputs.
pub fn full_predictions<T: Real>(model: &Model<T>, examples: &[Example], exec: Exec) -> Result<Vec<usize>> {
    par::try_map(exec, examples, |_, ex| {
        model.predict(&ex.seq).map_err(|e| Error::Sentence {
            id: ex.id.clone(),
            source: Box::new(e),
        })
    })
}

/// Applies one masking spec to precomputed rankings and re-predicts.
#[allow(clippy::too_many_arguments)]
pub fn score_rankings<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    ranker: Ranker,
    ranked: &[Vec<usize>],
    full: &[usize],
    spec: &MaskingSpec,
    metric: MetricKind,
    exec: Exec,
) -> Result<EvalEntry> {
    spec.validate()?;
    if ranked.len() != examples.len() || full.len() != examples.len() {
        return Err(Error::Contract("rankings, predictions and examples differ in length".into()));
    }
    let items: Vec<(&Example, &Vec<usize>, usize)> = examples
        .iter()
        .zip(ranked)
        .zip(full)
        .map(|((e, r), &p)| (e, r, p))
        .collect();
    let records = par::try_map(exec, &items, |_, &(ex, ranking, pred_full)| {
        let (kept, masked) = spec.select(ranking, &ex.seq);
        let keep: BTreeSet<usize> = kept.iter().copied().collect();
        let pred_masked = apply_mask(&ex.seq, &keep, spec.policy)
            .and_then(|seq| model.predict(&seq))
            .map_err(|e| Error::Sentence {
                id: ex.id.clone(),
                source: Box::new(e),
            })?;
        Ok(SentenceRecord {
            id: ex.id.clone(),
            gold: ex.label,
            pred_full,
            pred_masked,
            kept,
            masked,
        })
    })?;
    let classes = model.config().num_classes();
    let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let masked_preds: Vec<usize> = records.iter().map(|r| r.pred_masked).collect();
    let full_metric = metric.compute(full, &golds, classes)?;
    let masked_metric = metric.compute(&masked_preds, &golds, classes)?;
    Ok(EvalEntry {
        ranker,
        k: spec.k,
        direction: spec.direction,
        policy: spec.policy,
        full_metric,
        masked_metric,
        aopc: (spec.direction == Direction::MaskTopK).then_some(full_metric - masked_metric),
        records,
    })
}

fn single_entry<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    ranker: Ranker,
    spec: &MaskingSpec,
    metric: MetricKind,
    options: &ExplainOptions,
    exec: Exec,
) -> Result<EvalEntry> {
    let ranked = rankings(model, examples, ranker, options, exec)?;
    let full = full_predictions(model, examples, exec)?;
    score_rankings(model, examples, ranker, &ranked, &full, spec, metric, exec)
}

/// Keeps the top `ceil(k · real_count)` ranked tokens of every sentence,
/// masks the rest and scores the re-predictions.
pub fn masked_eval<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    ranker: Ranker,
    spec: &MaskingSpec,
    metric: MetricKind,
    options: &ExplainOptions,
    exec: Exec,
) -> Result<EvalEntry> {
    if spec.direction != Direction::KeepTopK {
        return Err(Error::Config("masked_eval needs the keep-top-k direction".into()));
    }
    single_entry(model, examples, ranker, spec, metric, options, exec)
}

/// Masks the top `ceil(k · real_count)` ranked tokens and reports the drop
/// in the metric.
pub fn aopc_eval<T: Real>(
    model: &Model<T>,
    examples: &[Example],
    ranker: Ranker,
    spec: &MaskingSpec,
    metric: MetricKind,
    options: &ExplainOptions,
    exec: Exec,
) -> Result<EvalEntry> {
    if spec.direction != Direction::MaskTopK {
        return Err(Error::Config("aopc_eval needs the mask-top-k direction".into()));
    }
    single_entry(model, examples, ranker, spec, metric, options, exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPlan {
    pub corpus_id: String,
    pub model_hash: String,
    pub rankers: Vec<Ranker>,
    pub specs: Vec<MaskingSpec>,
    pub metric: MetricKind,
    pub options: ExplainOptions,
}

/// Runs every (ranker, spec) pair, ranking each sentence once per ranker.
pub fn evaluate<T: Real>(model: &Model<T>, examples: &[Example], plan: &EvalPlan, exec: Exec) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Config("nothing to evaluate: no examples".into()));
    }
    for spec in &plan.specs {
        spec.validate()?;
    }
    let full = full_predictions(model, examples, exec)?;
    let golds: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let classes = model.config().num_classes();
    let full_text_metric = plan.metric.compute(&full, &golds, classes)?;
    let mut entries = Vec::with_capacity(plan.rankers.len() * plan.specs.len());
    for &ranker in &plan.rankers {
        log::info!("ranking with {ranker}");
        let ranked = rankings(model, examples, ranker, &plan.options, exec)?;
        for spec in &plan.specs {
            entries.push(score_rankings(
                model, examples, ranker, &ranked, &full, spec, plan.metric, exec,
            )?);
        }
    }
    Ok(EvalReport {
        corpus_id: plan.corpus_id.clone(),
        model_hash: plan.model_hash.clone(),
        metric: plan.metric,
        num_classes: classes,
        full_text_metric,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    /// Correctly classified sentences with at least one gold token.
    pub sentences: usize,
    pub top1_hit_rate: f64,
    pub mean_reciprocal_rank: f64,
}

/// Top-1 hit rate and mean reciprocal rank of the best-ranked gold token,
/// over the sentences in `correct`.
pub fn rationale_recovery(examples: &[Example], ranked: &[Vec<usize>], correct: &[bool]) -> Result<RecoveryStats> {
    if !examples.iter().any(|e| !e.gold.is_empty()) {
        return Err(Error::Config("dataset carries no rationales".into()));
    }
    if ranked.len() != examples.len() || correct.len() != examples.len() {
        return Err(Error::Contract("rankings, flags and examples differ in length".into()));
    }
    let (mut n, mut hits, mut rr) = (0usize, 0usize, 0.0);
    for ((ex, ranking), &ok) in examples.iter().zip(ranked).zip(correct) {
        if !ok || ex.gold.is_empty() {
            continue;
        }
        n += 1;
        if let Some(pos) = ranking.iter().position(|i| ex.gold.contains(i)) {
            if pos == 0 {
                hits += 1;
            }
            rr += 1.0 / (pos + 1) as f64;
        }
    }
    let denom = n.max(1) as f64;
    Ok(RecoveryStats {
        sentences: n,
        top1_hit_rate: hits as f64 / denom,
        mean_reciprocal_rank: rr / denom,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        let third = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        // class 2 never occurs in either list
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    /// Per-class precision and recall from a full confusion matrix.
    fn confusion_oracle(preds: &[usize], golds: &[usize], c: usize) -> f64 {
        let mut cm = vec![vec![0u32; c]; c];
        for (&p, &g) in preds.iter().zip(golds) {
            cm[g][p] += 1;
        }
        let mut total = 0.0;
        for k in 0..c {
            let tp = cm[k][k] as f64;
            let predicted: f64 = (0..c).map(|g| cm[g][k] as f64).sum();
            let actual: f64 = cm[k].iter().map(|&v| v as f64).sum();
            total += if predicted == 0.0 && actual == 0.0 {
                1.0
            } else if tp == 0.0 {
                0.0
            } else {
                let p = tp / predicted;
                let r = tp / actual;
                2.0 * p * r / (p + r)
            };
        }
        total / c as f64
    }

    proptest! {
        #[test]
        fn macro_f1_matches_confusion_matrix(
            c in 2usize..6,
            pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80),
        ) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0 % c).collect();
            let golds: Vec<usize> = pairs.iter().map(|p| p.1 % c).collect();
            let got = macro_f1(&preds, &golds, c).unwrap();
            prop_assert!((got - confusion_oracle(&preds, &golds, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn aopc_arithmetic() {
        let report = |full: f64, masked: f64| full - masked;
        assert_eq!(report(0.9, 0.7), 0.9 - 0.7);
        assert!((report(0.9, 0.7) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn k_must_be_a_fraction() {
        for k in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(MaskingSpec::new(k, Direction::KeepTopK, MaskPolicy::default()).is_err());
        }
        assert!(MaskingSpec::new(1.0, Direction::KeepTopK, MaskPolicy::default()).is_ok());
    }

    #[test]
    fn ranker_names_round_trip() {
        for r in [Ranker::Oracle, Ranker::Random { seed: 17 }, Ranker::Method(MethodKind::GradSam)] {
            assert_eq!(r.to_string().parse::<Ranker>().unwrap(), r);
        }
        assert!("nonsense".parse::<Ranker>().is_err());
    }

    fn example(gold: Vec<usize>, real: usize) -> Example {
        let tok = crate::tokenizer::Tokenizer::new(crate::tokenizer::Vocab::builtin());
        let text = vec!["the"; real].join(" ");
        Example {
            id: "x".into(),
            seq: tok.encode(&text, real + 4).unwrap(),
            label: 0,
            gold,
        }
    }

    #[test]
    fn recovery_by_hand() {
        // gold token ranked 1st, 3rd and 4th
        let exs = vec![example(vec![1], 4), example(vec![4], 4), example(vec![2], 4)];
        let ranked = vec![vec![1, 2, 3, 4], vec![1, 2, 4, 3], vec![4, 3, 1, 2]];
        let s = rationale_recovery(&exs, &ranked, &[true, true, true]).unwrap();
        assert_eq!(s.sentences, 3);
        assert!((s.top1_hit_rate - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.mean_reciprocal_rank - (1.0 + 1.0 / 3.0 + 1.0 / 4.0) / 3.0).abs() < 1e-15);
        let s = rationale_recovery(&exs, &ranked, &[true, false, false]).unwrap();
        assert_eq!((s.sentences, s.top1_hit_rate), (1, 1.0));
        assert!(rationale_recovery(&[example(vec![], 3)], &[vec![1]], &[true]).is_err());
    }

    #[test]
    fn selection_is_complementary() {
        let ex = example(vec![2], 7);
        let ranking = vec![5, 2, 7, 1, 3, 4, 6];
        for k in [0.1, 0.2, 0.5, 0.99, 1.0] {
            let keep = MaskingSpec::new(k, Direction::KeepTopK, MaskPolicy::default()).unwrap();
            let mask = MaskingSpec { direction: Direction::MaskTopK, ..keep };
            let (kept, dropped) = keep.select(&ranking, &ex.seq);
            let (kept2, dropped2) = mask.select(&ranking, &ex.seq);
            assert_eq!(kept, dropped2);
            assert_eq!(dropped, kept2);
            let mut all: Vec<usize> = kept.iter().chain(&dropped).copied().collect();
            all.sort_unstable();
            assert_eq!(all, ex.seq.real_positions());
        }
    }
}

//! Analogy suites and style-set classification over a learned embedding space.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::FactorTable;
use crate::corpus::{pairwise_transform, Corpus, LabeledSet, StyleSet};
use crate::error::{Error, Result};
use crate::query::{analogy, extract_from_images, AnalogyQuestion, EmbeddingMatrix, Metric};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::{adam_step, train, AdamConfig, TrainConfig, TrainOptions};

/// A ground-truth factor of a synthetic item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Style,
    Color,
    Pattern,
}

impl FactorKind {
    pub fn value(self, factors: &FactorTable, id: &str) -> Result<String> {
        let f = factors
            .get(id)
            .ok_or_else(|| Error::MissingItem(id.to_string()))?;
        Ok(match self {
            FactorKind::Style => f.style.to_string(),
            FactorKind::Color => f.color.clone(),
            FactorKind::Pattern => f.pattern.name().to_string(),
        })
    }
}

impl std::str::FromStr for FactorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style" => Ok(FactorKind::Style),
            "color" => Ok(FactorKind::Color),
            "pattern" => Ok(FactorKind::Pattern),
            _ => Err(Error::InvalidConfig(format!("unknown factor {s:?}"))),
        }
    }
}

/// How an in-category answer is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceptance {
    /// Any answer in y's category is accepted.
    Category,
    /// The answer must also share y's value of the factor.
    Factor(FactorKind),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogySuite {
    pub acceptance: Acceptance,
    pub questions: Vec<AnalogyQuestion>,
}

impl AnalogySuite {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("suite serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Builds `n` distinct questions.
///
/// x and y come from one style set, lie in different categories and share
/// `kind`; z is another item with x's category and x's value of `kind`. The
/// expected answer therefore has y's category and y's value of `kind`, and at
/// least one such item other than y exists.
pub fn generate_suite(
    corpus: &Corpus,
    factors: &FactorTable,
    kind: FactorKind,
    n: usize,
    seed: u64,
) -> Result<AnalogySuite> {
    let value = |id: &str| kind.value(factors, id);
    let category = |id: &str| {
        corpus
            .item(id)
            .map(|i| i.category.clone())
            .ok_or_else(|| Error::MissingItem(id.into()))
    };
    // Items grouped by (category, factor value), in corpus order.
    let mut groups: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for item in corpus.items() {
        groups
            .entry((item.category.clone(), value(&item.id)?))
            .or_default()
            .push(item.id.clone());
    }
    let mut candidates: Vec<(String, String, Vec<String>)> = Vec::new();
    let mut seen = HashSet::new();
    for set in corpus.sets() {
        for x in &set.item_ids {
            for y in &set.item_ids {
                if x == y || !seen.insert((x.clone(), y.clone())) {
                    continue;
                }
                let (cx, cy, vx, vy) = (category(x)?, category(y)?, value(x)?, value(y)?);
                if cx == cy || vx != vy {
                    continue;
                }
                let zs: Vec<String> = groups[&(cx, vx)]
                    .iter()
                    .filter(|z| *z != x)
                    .cloned()
                    .collect();
                let answers = groups[&(cy, vy)].len();
                if !zs.is_empty() && answers >= 2 {
                    candidates.push((x.clone(), y.clone(), zs));
                }
            }
        }
    }
    let total: usize = candidates.iter().map(|c| c.2.len()).sum();
    if total < n {
        return Err(Error::Degenerate(format!(
            "only {total} distinct analogy questions exist, {n} requested"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = HashSet::new();
    let mut questions = Vec::with_capacity(n);
    while questions.len() < n {
        let (x, y, zs) = &candidates[rng.gen_range(0..candidates.len())];
        let z = &zs[rng.gen_range(0..zs.len())];
        if chosen.insert((x.clone(), y.clone(), z.clone())) {
            questions.push(AnalogyQuestion {
                x: x.clone(),
                y: y.clone(),
                z: z.clone(),
                expected_category: category(y)?,
            });
        }
    }
    Ok(AnalogySuite {
        acceptance: Acceptance::Factor(kind),
        questions,
    })
}

/// One-hot category code followed by a one-hot code of the factor.
pub fn oracle_embeddings(
    corpus: &Corpus,
    factors: &FactorTable,
    kind: FactorKind,
) -> Result<EmbeddingMatrix> {
    let values: BTreeSet<String> = corpus
        .items()
        .iter()
        .map(|i| kind.value(factors, &i.id))
        .collect::<Result<_>>()?;
    let values: Vec<String> = values.into_iter().collect();
    let cats = corpus.categories();
    let d = cats.len() + values.len();
    let mut data = vec![0.0; corpus.items().len() * d];
    for (r, item) in corpus.items().iter().enumerate() {
        let c = cats
            .iter()
            .position(|c| *c == item.category)
            .expect("declared category");
        let v = values
            .binary_search(&kind.value(factors, &item.id)?)
            .expect("collected value");
        data[r * d + c] = 1.0;
        data[r * d + cats.len() + v] = 1.0;
    }
    EmbeddingMatrix::new(
        corpus.items().iter().map(|i| i.id.clone()).collect(),
        corpus.items().iter().map(|i| i.category.clone()).collect(),
        Tensor::new(vec![corpus.items().len(), d], data)?,
        Metric::Cosine,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    FailedCategory,
    FailedFactor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub x: String,
    pub y: String,
    pub z: String,
    pub answer: String,
    pub answer_category: String,
    pub score: f64,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalogyReport {
    /// Accepted over total; absent for an empty suite.
    pub accuracy: Option<f64>,
    pub n_questions: usize,
    pub n_accepted: usize,
    pub n_failed_category: usize,
    pub n_failed_factor: usize,
    pub per_question: Vec<QuestionResult>,
}

/// Scores every question: off-category answers fail, the rest are judged by the suite's acceptance mode.
pub fn run_analogy_suite(
    suite: &AnalogySuite,
    matrix: &EmbeddingMatrix,
    factors: Option<&FactorTable>,
) -> Result<AnalogyReport> {
    let mut per_question = Vec::with_capacity(suite.questions.len());
    for q in &suite.questions {
        let (answer, ranking) = analogy(q, matrix, false)?;
        let top = &ranking[0];
        let outcome = if top.category != q.expected_category {
            Outcome::FailedCategory
        } else {
            match suite.acceptance {
                Acceptance::Category => Outcome::Accepted,
                Acceptance::Factor(kind) => {
                    let factors = factors.ok_or_else(|| {
                        Error::InvalidConfig("factor acceptance needs the factor table".into())
                    })?;
                    if kind.value(factors, &answer)? == kind.value(factors, &q.y)? {
                        Outcome::Accepted
                    } else {
                        Outcome::FailedFactor
                    }
                }
            }
        };
        per_question.push(QuestionResult {
            x: q.x.clone(),
            y: q.y.clone(),
            z: q.z.clone(),
            answer,
            answer_category: top.category.clone(),
            score: top.score,
            outcome,
        });
    }
    let count = |o: Outcome| per_question.iter().filter(|r| r.outcome == o).count();
    let n = per_question.len();
    let n_accepted = count(Outcome::Accepted);
    Ok(AnalogyReport {
        accuracy: (n > 0).then(|| n_accepted as f64 / n as f64),
        n_questions: n,
        n_accepted,
        n_failed_category: count(Outcome::FailedCategory),
        n_failed_factor: count(Outcome::FailedFactor),
        per_question,
    })
}

/// Mean of the members' embeddings.
pub fn set_feature(set: &StyleSet, matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::InvalidSet {
            set_id: set.set_id.clone(),
            reason: "empty set has no feature".into(),
        });
    }
    let mut sum = vec![0.0; matrix.dim()];
    for id in &set.item_ids {
        let v = matrix
            .vector(id)
            .map_err(|_| Error::MissingVector(id.clone()))?;
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let n = set.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Labeled sets and the share of each class held out for testing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSetDataset {
    pub sets: Vec<LabeledSet>,
    pub test_fraction: f64,
}

impl LabeledSetDataset {
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.sets.iter().map(|s| &s.label).collect();
        set.into_iter().cloned().collect()
    }

    /// Seeded split, stratified by class: `(train, test)` indices into `sets`.
    pub fn split(&self, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig(
                "test fraction must lie in [0, 1)".into(),
            ));
        }
        let classes = self.classes();
        if classes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, found {}",
                classes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for class in &classes {
            let mut members: Vec<usize> = (0..self.sets.len())
                .filter(|&i| self.sets[i].label == *class)
                .collect();
            members.shuffle(&mut rng);
            let n_test = (members.len() as f64 * self.test_fraction).round() as usize;
            if n_test >= members.len() {
                return Err(Error::ClassMissing(class.clone()));
            }
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![64],
            epochs: 300,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
        }
    }
}

/// Standardizes its input, then relu hidden layers and a softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    pub classes: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `(weight (in, out), bias (out))` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpClassifier {
    fn logits(&self, tape: &mut Tape, x: Var, params: &[(Var, Var)]) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in params.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i + 1 < params.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn standardize(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(features.len() * d);
        for f in features {
            if f.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "classifier input",
                    left: vec![d],
                    right: vec![f.len()],
                });
            }
            data.extend(
                f.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((x, m), s)| (x - m) / s),
            );
        }
        Tensor::new(vec![features.len(), d], data)
    }

    /// Class probabilities, one row per input.
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let x = self.standardize(features)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let params: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
            .collect();
        let logits = self.logits(&mut tape, xv, &params)?;
        let logp = tape.log_softmax(logits)?;
        Ok(tape.value(logp).map(f64::exp))
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<String>> {
        let p = self.predict_proba(features)?;
        Ok((0..features.len())
            .map(|i| {
                let row = p.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                self.classes[best].clone()
            })
            .collect())
    }
}

fn fit_mlp(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: Vec<String>,
    config: &MlpConfig,
    seed: u64,
) -> Result<MlpClassifier> {
    config.adam.validate()?;
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut std = vec![0.0; d];
    for f in features {
        std.iter_mut()
            .zip(f)
            .zip(&mean)
            .for_each(|((s, x), m)| *s += (x - m) * (x - m) / n as f64);
    }
    let std: Vec<f64> = std
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![d];
    sizes.extend(&config.hidden);
    sizes.push(classes.len());
    let layers = sizes
        .windows(2)
        .map(|w| {
            let bound = (6.0 / w[0] as f64).sqrt();
            let data = (0..w[0] * w[1])
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            (
                Tensor::new(vec![w[0], w[1]], data).unwrap(),
                Tensor::zeros(&[w[1]]),
            )
        })
        .collect();
    let mut clf = MlpClassifier {
        classes,
        mean,
        std,
        layers,
    };
    let x = clf.standardize(features)?;
    let k = clf.classes.len();
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let mut moments: Vec<[Tensor; 4]> = clf
        .layers
        .iter()
        .map(|(w, b)| {
            [
                Tensor::zeros(w.shape()),
                Tensor::zeros(w.shape()),
                Tensor::zeros(b.shape()),
                Tensor::zeros(b.shape()),
            ]
        })
        .collect();
    for t in 1..=config.epochs as u64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params: Vec<(Var, Var)> = clf
            .layers
            .iter()
            .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone())))
            .collect();
        let logits = clf.logits(&mut tape, xv, &params)?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.take(logp, &picks)?;
        let nll = tape.mean(picked)?;
        let loss = tape.scale(nll, -1.0)?;
        let mut grads = tape.backward(loss)?;
        for (((w, b), &(wv, bv)), [mw, vw, mb, vb]) in
            clf.layers.iter_mut().zip(&params).zip(&mut moments)
        {
            adam_step(
                w,
                &grads.take(wv).expect("param gradient"),
                mw,
                vw,
                t,
                &config.adam,
            )?;
            adam_step(
                b,
                &grads.take(bv).expect("param gradient"),
                mb,
                vb,
                t,
                &config.adam,
            )?;
        }
    }
    Ok(clf)
}

/// Trains on the split's train part and returns held-out accuracy.
pub fn train_classifier(
    dataset: &LabeledSetDataset,
    matrix: &EmbeddingMatrix,
    config: &MlpConfig,
    seed: u64,
) -> Result<(MlpClassifier, f64)> {
    let (train_idx, test_idx) = dataset.split(seed)?;
    let classes = dataset.classes();
    let gather = |idx: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let ls = &dataset.sets[i];
            feats.push(set_feature(&ls.set, matrix)?);
            labels.push(classes.binary_search(&ls.label).expect("known class"));
        }
        Ok((feats, labels))
    };
    let (train_x, train_y) = gather(&train_idx)?;
    let (test_x, test_y) = gather(&test_idx)?;
    let clf = fit_mlp(&train_x, &train_y, classes, config, seed)?;
    let accuracy = if test_x.is_empty() {
        0.0
    } else {
        let pred = clf.predict(&test_x)?;
        let hits = pred
            .iter()
            .zip(&test_y)
            .filter(|(p, &y)| **p == clf.classes[y])
            .count();
        hits as f64 / test_x.len() as f64
    };
    Ok((clf, accuracy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub set_acc: f64,
    pub pair_acc: f64,
    pub delta: f64,
}

/// Trains on the corpus and on its pairwise transform with the same settings and compares classifiers.
pub fn compare_set_vs_pairwise(
    corpus: &Corpus,
    images: &[Tensor],
    dataset: &LabeledSetDataset,
    train_config: &TrainConfig,
    mlp: &MlpConfig,
) -> Result<AblationReport> {
    let pairs = pairwise_transform(corpus)?;
    let mut acc = Vec::new();
    for arm in [corpus, &pairs] {
        let (ck, _) = train(arm, images, train_config, TrainOptions::default())?;
        let matrix = extract_from_images(&ck.input, arm, images, 64)?;
        acc.push(train_classifier(dataset, &matrix, mlp, train_config.seed)?.1);
    }
    Ok(AblationReport {
        set_acc: acc[0],
        pair_acc: acc[1],
        delta: acc[0] - acc[1],
    })
}

/// Copy of `dataset` with labels permuted by a seeded shuffle.
pub fn shuffled_labels(dataset: &LabeledSetDataset, seed: u64) -> LabeledSetDataset {
    let mut labels: Vec<String> = dataset.sets.iter().map(|s| s.label.clone()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    LabeledSetDataset {
        sets: dataset
            .sets
            .iter()
            .zip(labels)
            .map(|(s, label)| LabeledSet {
                set: s.set.clone(),
                label,
            })
            .collect(),
        test_fraction: dataset.test_fraction,
    }
}

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use setvec::corpus::synthetic::{synthesize, FactorTable};
use setvec::corpus::{gen_synthetic, Corpus, StyleSet, SyntheticCorpus, SyntheticSpec};
use setvec::encoder::{
    forward, init_params, ConvStage, EncoderConfig, EncoderParams, PoolKind, Role,
};
use setvec::evaluation::{
    compare_set_vs_pairwise, generate_suite, oracle_embeddings, run_analogy_suite, shuffled_labels,
    train_classifier, FactorKind, LabeledSetDataset, MlpConfig,
};
use setvec::objective::{
    negsample_loss, negsample_loss_value, sample_negatives, set_loss_negsampled, softmax_set_loss,
    softmax_set_loss_on, PairBatch, VectorMap,
};
use setvec::query::{extract_from_images, EmbeddingMatrix};
use setvec::tensor::{grad_check, grad_check_fn, GradCheckOptions, OpKind};
use setvec::trainer::{
    load_checkpoint, resume, save_checkpoint, train, Checkpoint, TrainConfig, TrainOptions,
};
use setvec::{Error, Tape, Tensor};

const GRAD_TOLERANCE: f64 = 1e-4;
const SEEDS: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Writes straight to the process stdout so the line survives test output capture.
fn report(n: usize, name: &str, o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    writeln!(out, "[{tag}] criterion {n} ({name}): {}", o.detail).unwrap();
    out.flush().unwrap();
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// Gradient correctness.

fn op_case(op: &OpKind, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match op {
        OpKind::MatMul => vec![random(r, &[4, 3], -1.0, 1.0), random(r, &[3, 2], -1.0, 1.0)],
        OpKind::Conv2d { .. } => vec![
            random(r, &[2, 2, 5, 5], -1.0, 1.0),
            random(r, &[3, 2, 3, 3], -1.0, 1.0),
            random(r, &[3], -1.0, 1.0),
        ],
        OpKind::MaxPool2d { .. } | OpKind::AvgPool2d { .. } => {
            vec![random(r, &[2, 2, 4, 4], -1.0, 1.0)]
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp | OpKind::LogSigmoid => {
            vec![random(r, &[8], -2.0, 2.0)]
        }
        OpKind::Log => vec![random(r, &[8], 0.5, 3.0)],
        OpKind::Add | OpKind::Multiply | OpKind::Subtract => {
            vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)]
        }
        OpKind::Dot => vec![random(r, &[6], -1.0, 1.0), random(r, &[6], -1.0, 1.0)],
        OpKind::BatchNorm { .. } => vec![
            random(r, &[4, 3, 2, 2], -1.0, 1.0),
            random(r, &[3], 0.5, 1.5),
            random(r, &[3], -0.5, 0.5),
            random(r, &[3], -0.5, 0.5),
            random(r, &[3], 0.5, 1.5),
        ],
        OpKind::Affine => vec![
            random(r, &[3, 4], -1.0, 1.0),
            random(r, &[4, 2], -1.0, 1.0),
            random(r, &[2], -1.0, 1.0),
        ],
        _ => vec![random(r, &[3, 4], -1.0, 1.0)],
    }
}

fn differentiable_ops() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Conv2d {
            stride: 1,
            padding: 1,
        },
        OpKind::Conv2d {
            stride: 2,
            padding: 0,
        },
        OpKind::MaxPool2d { size: 2, stride: 2 },
        OpKind::AvgPool2d { size: 2, stride: 2 },
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Add,
        OpKind::Multiply,
        OpKind::Subtract,
        OpKind::Scale(0.7),
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Dot,
        OpKind::BatchNorm { train: true },
        OpKind::BatchNorm { train: false },
        OpKind::Affine,
        OpKind::Transpose,
        OpKind::Reshape(vec![6, 2]),
        OpKind::GatherRows(vec![1, 1, 0]),
        OpKind::Take(vec![3, 7, 7, 0]),
        OpKind::LogSigmoid,
        OpKind::LogSoftmax,
    ]
}

fn negsample_composition_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 1 + seed as usize % 5;
    let inputs: Vec<Tensor> = (0..k + 2)
        .map(|_| random(&mut rng, &[6], -1.0, 1.0))
        .collect();
    grad_check_fn(&inputs, GradCheckOptions::default(), |tape, v| {
        negsample_loss(tape, v[0], v[1], &v[2..])
    })
    .unwrap()
}

fn batched_set_loss_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..8).map(|i| format!("i{i}")).collect();
    let sets = [
        StyleSet::new("a", vec![pool[0].clone(), pool[3].clone()]),
        StyleSet::new("b", vec![pool[1].clone(), pool[4].clone(), pool[6].clone()]),
    ];
    let refs: Vec<&StyleSet> = sets.iter().collect();
    let batch = PairBatch::build(&refs, &pool, 3, &mut rng).unwrap();
    let rows = |ids: Vec<String>| -> HashMap<String, usize> {
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    };
    let u_rows = rows(batch.input_ids());
    let v_rows = rows(batch.context_ids());
    let inputs = vec![
        random(&mut rng, &[u_rows.len(), 5], -1.0, 1.0),
        random(&mut rng, &[v_rows.len(), 5], -1.0, 1.0),
    ];
    grad_check_fn(&inputs, GradCheckOptions::default(), |tape, v| {
        set_loss_negsampled(tape, v[0], &u_rows, v[1], &v_rows, &batch)
    })
    .unwrap()
}

fn softmax_composition_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random(&mut rng, &[3, 4], -1.0, 1.0),
        random(&mut rng, &[7, 4], -1.0, 1.0),
    ];
    grad_check_fn(&inputs, GradCheckOptions::default(), |tape, v| {
        softmax_set_loss_on(tape, v[0], v[1], &[5, 0, 2])
    })
    .unwrap()
}

fn bind_with(
    params: &EncoderParams,
    tape: &mut Tape,
    vars: &[setvec::Var],
) -> setvec::encoder::ParamVars {
    let mut bound = params.bind(tape);
    for (name, v) in params.trainable_names().zip(vars) {
        bound.insert(name.to_string(), *v);
    }
    bound
}

/// Both encoders on a batch of images, then the pair loss for item 0 with context 1 and negatives 2 and 3.
fn encoder_loss_error(seed: u64) -> f64 {
    let config = EncoderConfig {
        input_shape: [3, 8, 8],
        conv_stages: vec![ConvStage {
            out_channels: 2,
            conv_count: 1,
            pool: PoolKind::Max,
        }],
        embedding_dim: 4,
        batch_norm: true,
    };
    let input = init_params(&config, Role::Input, seed).unwrap();
    let context = init_params(&config, Role::Context, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = random(&mut rng, &[4, 3, 8, 8], 0.0, 1.0);
    let trainable = |p: &EncoderParams| -> Vec<Tensor> {
        p.trainable_names()
            .map(|n| p.get(n).unwrap().clone())
            .collect()
    };
    let mut inputs = trainable(&input);
    let split = inputs.len();
    inputs.extend(trainable(&context));
    grad_check_fn(&inputs, GradCheckOptions::default(), |tape, vars| {
        let a = bind_with(&input, tape, &vars[..split]);
        let b = bind_with(&context, tape, &vars[split..]);
        let x = tape.constant(images.clone());
        let u = forward(&config, &a, tape, x, true)?.embeddings;
        let v = forward(&config, &b, tape, x, true)?.embeddings;
        let row = |t: &mut Tape, m, r| -> setvec::Result<setvec::Var> {
            let g = t.gather_rows(m, &[r])?;
            t.reshape(g, &[4])
        };
        let ui = row(tape, u, 0)?;
        let vc = row(tape, v, 1)?;
        let negs = vec![row(tape, v, 2)?, row(tape, v, 3)?];
        negsample_loss(tape, ui, vc, &negs)
    })
    .unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut track = |err: f64, what: String| {
        if err >= worst.0 {
            worst = (err, what);
        }
    };
    let ops = differentiable_ops();
    for op in &ops {
        for seed in 0..SEEDS {
            track(
                grad_check(op, &op_case(op, seed), 1e-5).unwrap(),
                format!("{} seed {seed}", op.name()),
            );
        }
    }
    for seed in 0..SEEDS {
        track(
            negsample_composition_error(seed),
            format!("negsample_loss seed {seed}"),
        );
        track(
            batched_set_loss_error(seed),
            format!("batched set loss seed {seed}"),
        );
        track(
            softmax_composition_error(seed),
            format!("softmax set loss seed {seed}"),
        );
        track(
            encoder_loss_error(seed),
            format!("encoder loss seed {seed}"),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < GRAD_TOLERANCE && secs < 60.0,
        format!(
            "{} ops and 4 compositions over {SEEDS} seeds, max rel error {:.2e} ({}), {secs:.1} s",
            ops.len(),
            worst.0,
            worst.1
        ),
    )
}

// Objective oracle equivalence.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn brute_force_softmax(u: &VectorMap, v: &VectorMap, f: &[String], set: &[String]) -> f64 {
    let mut total = 0.0;
    for i in set {
        let z: f64 = f.iter().map(|j| dot(&u[i], &v[j]).exp()).sum();
        for c in set.iter().filter(|c| *c != i) {
            total += (dot(&u[i], &v[c]).exp() / z).ln();
        }
    }
    -total / set.len() as f64
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn objective_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut softmax_err: f64 = 0.0;
    for _ in 0..20 {
        let n_f = rng.gen_range(4..=8);
        let n_s = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=8);
        let f: Vec<String> = (0..n_f).map(|i| format!("f{i}")).collect();
        let members: Vec<String> = f.choose_multiple(&mut rng, n_s).cloned().collect();
        let u: VectorMap = members
            .iter()
            .map(|id| (id.clone(), random_vec(&mut rng, d)))
            .collect();
        let v: VectorMap = f
            .iter()
            .map(|id| (id.clone(), random_vec(&mut rng, d)))
            .collect();
        let got = softmax_set_loss(&u, &v, &f, &StyleSet::new("s", members.clone())).unwrap();
        softmax_err = softmax_err.max((got - brute_force_softmax(&u, &v, &f, &members)).abs());
    }

    let mut zero_err: f64 = 0.0;
    for k in 0..=6 {
        let negs: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 5)).collect();
        let got = negsample_loss_value(&[0.0; 5], &random_vec(&mut rng, 5), &negs).unwrap();
        zero_err = zero_err.max((got - (k + 1) as f64 * std::f64::consts::LN_2).abs());
    }
    let orthogonal = negsample_loss_value(&[1.0, 0.0], &[0.0, 3.0], &[vec![0.0, -2.0]]).unwrap();
    zero_err = zero_err.max((orthogonal - 2.0 * std::f64::consts::LN_2).abs());

    let mut closed_err: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.gen_range(1..=5);
        let (u, c) = (random_vec(&mut rng, 4), random_vec(&mut rng, 4));
        let negs: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 4)).collect();
        let want = softplus(-dot(&u, &c)) + negs.iter().map(|n| softplus(dot(&u, n))).sum::<f64>();
        closed_err = closed_err.max((negsample_loss_value(&u, &c, &negs).unwrap() - want).abs());
    }
    let hand = negsample_loss_value(&[1.0, 0.0], &[2.0, 0.0], &[vec![-1.0, 0.0]]).unwrap();
    let hand_err = (hand - (softplus(-2.0) + softplus(-1.0))).abs();

    outcome(
        softmax_err < 1e-9 && zero_err < 1e-12 && closed_err < 1e-12 && hand_err < 1e-12,
        format!(
            "softmax vs brute force {softmax_err:.1e} (20 instances), sigma(0) cases {zero_err:.1e}, \
             closed forms {:.1e}",
            closed_err.max(hand_err)
        ),
    )
}

// Desk-scale training on the default corpus.

struct Trained {
    data: SyntheticCorpus,
    images: Vec<Tensor>,
    matrix: EmbeddingMatrix,
    untrained: EmbeddingMatrix,
    train_secs: f64,
}

fn train_default(dir: &Path) -> Trained {
    let (data, images) = synthesize(&SyntheticSpec::default(), dir).unwrap();
    let config = TrainConfig::default();
    let start = Instant::now();
    let (ck, _) = train(&data.corpus, &images, &config, TrainOptions::default()).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let matrix = extract_from_images(&ck.input, &data.corpus, &images, 64).unwrap();
    let init = Checkpoint::init(&config).unwrap();
    let untrained = extract_from_images(&init.input, &data.corpus, &images, 64).unwrap();
    Trained {
        data,
        images,
        matrix,
        untrained,
        train_secs,
    }
}

/// Mean cosine similarity over same-style pairs and over different-style pairs.
fn style_similarity(m: &EmbeddingMatrix, factors: &FactorTable) -> (f64, f64) {
    let rows: Vec<Vec<f64>> = (0..m.len())
        .map(|i| {
            let r = m.data().row(i);
            let norm = dot(r, r).sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let style = |i: usize| factors[&m.ids()[i]].style;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = dot(&rows[i], &rows[j]);
            if style(i) == style(j) {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra as f64, inter / n_inter as f64)
}

fn clustering_margin(t: &Trained) -> Outcome {
    let (intra, inter) = style_similarity(&t.matrix, &t.data.factors);
    let (u_intra, u_inter) = style_similarity(&t.untrained, &t.data.factors);
    let (margin, untrained) = (intra - inter, u_intra - u_inter);
    outcome(
        margin >= 0.10 && margin > untrained && t.train_secs <= 600.0,
        format!(
            "margin {margin:.3} (intra {intra:.3}, inter {inter:.3}), untrained margin {untrained:.3}, \
             {} items, training {:.0} s",
            t.matrix.len(),
            t.train_secs
        ),
    )
}

fn analogy_accuracy(t: &Trained) -> Outcome {
    let corpus = &t.data.corpus;
    let factors = &t.data.factors;
    let suite = generate_suite(corpus, factors, FactorKind::Color, 50, 7).unwrap();
    let model = run_analogy_suite(&suite, &t.matrix, Some(factors)).unwrap();
    let oracle_matrix = oracle_embeddings(corpus, factors, FactorKind::Color).unwrap();
    let oracle = run_analogy_suite(&suite, &oracle_matrix, Some(factors)).unwrap();
    let acc = model.accuracy.unwrap_or(0.0);
    let oracle_acc = oracle.accuracy.unwrap_or(0.0);

    let mut extra = Vec::new();
    for kind in [FactorKind::Style, FactorKind::Pattern] {
        let s = generate_suite(corpus, factors, kind, 50, 7).unwrap();
        let r = run_analogy_suite(&s, &t.matrix, Some(factors)).unwrap();
        extra.push(format!(
            "{kind:?} {:.0}%",
            100.0 * r.accuracy.unwrap_or(0.0)
        ));
    }
    outcome(
        suite.questions.len() == 50 && acc >= 0.60 && oracle_acc == 1.0,
        format!(
            "colour transfer {:.0}% ({} off-category, {} wrong colour) over {} questions, oracle {:.0}%; \
             informational: {}",
            100.0 * acc,
            model.n_failed_category,
            model.n_failed_factor,
            suite.questions.len(),
            100.0 * oracle_acc,
            extra.join(", ")
        ),
    )
}

fn light_config(seed: u64) -> TrainConfig {
    let mut config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    for stage in &mut config.encoder.conv_stages {
        stage.conv_count = 1;
        stage.out_channels /= 2;
    }
    config
}

fn classification(t: &Trained) -> Outcome {
    let dataset = LabeledSetDataset {
        sets: t.data.labeled.clone(),
        test_fraction: 0.1,
    };
    let mlp = MlpConfig::default();
    let (_, default_acc) = train_classifier(&dataset, &t.matrix, &mlp, 0).unwrap();

    let mut null = Vec::new();
    for seed in 0..SEEDS {
        null.push(
            train_classifier(&shuffled_labels(&dataset, seed), &t.matrix, &mlp, seed)
                .unwrap()
                .1,
        );
    }
    let null_ok = null.iter().all(|a| (0.15..=0.35).contains(a));
    let (lo, hi) = null
        .iter()
        .fold((1.0f64, 0.0f64), |(l, h), &a| (l.min(a), h.max(a)));

    let mut arms = Vec::new();
    for seed in 0..3 {
        let r = compare_set_vs_pairwise(
            &t.data.corpus,
            &t.images,
            &dataset,
            &light_config(seed),
            &mlp,
        )
        .unwrap();
        arms.push(r);
    }
    let wins = arms
        .iter()
        .filter(|r| r.set_acc >= 0.70 && r.set_acc >= r.pair_acc)
        .count();
    let arms_text: Vec<String> = arms
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.set_acc, r.pair_acc))
        .collect();
    outcome(
        default_acc >= 0.70 && wins >= 2 && null_ok,
        format!(
            "default model {:.1}%, set/pair by seed [{}] ({wins}/3 hold), shuffled null {:.1}%..{:.1}% over {SEEDS} seeds",
            100.0 * default_acc,
            arms_text.join(", "),
            100.0 * lo,
            100.0 * hi
        ),
    )
}

// Sampler correctness.

fn sampler(corpus: &Corpus) -> Outcome {
    let pool: Vec<String> = corpus.items().iter().map(|i| i.id.clone()).collect();
    let set = corpus
        .sets()
        .iter()
        .max_by_key(|s| s.len())
        .unwrap()
        .clone();
    let index: HashMap<&str, usize> = pool
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut counts = vec![0u64; pool.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (draws, k) = (10_000usize, 5usize);
    let mut clean = true;
    for _ in 0..draws {
        let negs = sample_negatives(&pool, &set, k, &mut rng).unwrap();
        let mut sorted = negs.clone();
        sorted.sort();
        sorted.dedup();
        clean &= negs.len() == k && sorted.len() == k;
        for id in &negs {
            counts[index[id.as_str()]] += 1;
        }
    }
    let member_hits: u64 = set.item_ids.iter().map(|m| counts[index[m.as_str()]]).sum();
    let cells = pool.len() - set.len();
    let expected = (draws * k) as f64 / cells as f64;
    let stat: f64 = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| !set.contains(&pool[*i]))
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
    outcome(
        clean && member_hits == 0 && p > 0.001,
        format!("{draws} draws of k = {k} from {cells} non-members, {member_hits} member hits, chi-square p = {p:.3}"),
    )
}

// Determinism and persistence.

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_styles: 2,
        n_items_per_category_per_style: 5,
        categories: vec!["top".into(), "bottom".into()],
        image_shape: [3, 8, 8],
        n_sets: 50,
        set_size_weights: [1.0, 0.0, 0.0],
        n_labeled_sets: 0,
        seed: 11,
        ..SyntheticSpec::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 3e-3,
        k: 4,
        encoder: EncoderConfig {
            input_shape: [3, 8, 8],
            conv_stages: vec![
                ConvStage {
                    out_channels: 4,
                    conv_count: 1,
                    pool: PoolKind::Max,
                },
                ConvStage {
                    out_channels: 8,
                    conv_count: 1,
                    pool: PoolKind::Max,
                },
            ],
            embedding_dim: 16,
            batch_norm: true,
        },
        ..TrainConfig::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism_and_persistence() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let a = gen_synthetic(&small_spec(), root.join("a")).unwrap();
    gen_synthetic(&small_spec(), root.join("b")).unwrap();
    let images = a.corpus.load_images().unwrap();
    let files_a = tree(&root.join("a"));
    checks.push((
        "corpus files",
        !files_a.is_empty() && files_a == tree(&root.join("b")),
    ));

    let config = small_config();
    let (ck1, log1) = train(&a.corpus, &images, &config, TrainOptions::default()).unwrap();
    let (ck2, log2) = train(&a.corpus, &images, &config, TrainOptions::default()).unwrap();
    checks.push(("training", ck1 == ck2 && log1 == log2));

    let m1 = extract_from_images(&ck1.input, &a.corpus, &images, 7).unwrap();
    let m2 = extract_from_images(&ck2.input, &a.corpus, &images, 16).unwrap();
    checks.push(("embeddings", m1.to_tsv() == m2.to_tsv()));

    let suite = generate_suite(&a.corpus, &a.factors, FactorKind::Color, 10, 3).unwrap();
    let r1 = run_analogy_suite(&suite, &m1, Some(&a.factors)).unwrap();
    let r2 = run_analogy_suite(&suite, &m2, Some(&a.factors)).unwrap();
    checks.push(("analogy report", r1 == r2));

    let ck_dir = root.join("ck");
    std::fs::create_dir(&ck_dir).unwrap();
    let path = ck_dir.join("model.sv2c");
    save_checkpoint(&ck1, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    checks.push(("save/load", load_checkpoint(&path).unwrap() == ck1));

    let options = TrainOptions {
        max_steps: Some(3),
        ..TrainOptions::default()
    };
    let (partial, head) = train(&a.corpus, &images, &config, options).unwrap();
    let mid = ck_dir.join("mid.sv2c");
    save_checkpoint(&partial, &mid).unwrap();
    let (resumed, tail) = resume(
        &a.corpus,
        &images,
        load_checkpoint(&mid).unwrap(),
        TrainOptions::default(),
    )
    .unwrap();
    let mut joined = head.records;
    joined.extend(tail.records);
    checks.push(("resume", resumed == ck1 && joined == log1.records));

    let cut = ck_dir.join("cut.sv2c");
    let mut truncation = true;
    for len in [0, 3, 8, bytes.len() / 3, bytes.len() - 1] {
        std::fs::write(&cut, &bytes[..len]).unwrap();
        truncation &= matches!(load_checkpoint(&cut), Err(Error::Corrupt { .. }));
    }
    std::fs::remove_file(&cut).unwrap();
    save_checkpoint(&partial, &path).unwrap();
    let failed_save = save_checkpoint(&ck1, &ck_dir.join("missing").join("x.sv2c")).is_err();
    let mut names: Vec<String> = std::fs::read_dir(&ck_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let clean_dir = names == ["mid.sv2c", "model.sv2c"];
    checks.push((
        "truncation",
        truncation && failed_save && clean_dir && load_checkpoint(&path).unwrap() == partial,
    ));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks bit-identical (corpus, training, embeddings, reports, resume, truncation)", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance_criteria() {
    writeln!(std::io::stdout()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        report(n, name, &o);
        results.push((n, name, o.pass));
    };

    record(1, "gradient correctness", guarded(gradient_correctness));
    record(2, "objective oracles", guarded(objective_oracles));
    record(
        6,
        "sampler",
        guarded(|| {
            sampler(
                &synthesize(&SyntheticSpec::default(), &tmp.path().join("pool"))
                    .unwrap()
                    .0
                    .corpus,
            )
        }),
    );

    let trained = panic::catch_unwind(AssertUnwindSafe(|| {
        train_default(&tmp.path().join("default"))
    }));
    match &trained {
        Ok(t) => {
            record(3, "clustering margin", guarded(|| clustering_margin(t)));
            record(4, "analogy accuracy", guarded(|| analogy_accuracy(t)));
            record(5, "classification", guarded(|| classification(t)));
        }
        Err(_) => {
            for (n, name) in [
                (3, "clustering margin"),
                (4, "analogy accuracy"),
                (5, "classification"),
            ] {
                record(n, name, outcome(false, "default training failed"));
            }
        }
    }
    record(
        7,
        "determinism and persistence",
        guarded(determinism_and_persistence),
    );

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2)
        .map(|r| format!("{} {}", r.0, r.1))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join("; "));
}

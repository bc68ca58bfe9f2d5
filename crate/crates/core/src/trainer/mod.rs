//! Mini-batch training of the input and context encoders with Adam.

mod checkpoint;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::corpus::{Corpus, StyleSet};
use crate::encoder::{self, init_params, EncoderConfig, EncoderParams, Role};
use crate::error::{Error, Result};
use crate::objective::{set_loss_negsampled, NegativeDistribution, PairBatch};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Style sets per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Negatives per `(input, context)` pair.
    pub k: usize,
    pub negatives: NegativeDistribution,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            k: 5,
            negatives: NegativeDistribution::Uniform,
            seed: 0,
            encoder: EncoderConfig::default(),
            checkpoint_interval: 0,
            deterministic: true,
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate and epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        self.encoder.validate()
    }
}

/// Bias-corrected Adam update of one tensor. `t` is the 1-based step number.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    config: &AdamConfig,
) -> Result<()> {
    for other in [grad, &*m, &*v] {
        if other.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    if t == 0 {
        return Err(Error::invalid("adam_step", "step numbers start at 1"));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let (p, g) = (param.data_mut(), grad.data());
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Position of the training random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub input: EncoderParams,
    pub context: EncoderParams,
    /// First and second Adam moments keyed by `role/name`.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
    pub rng: RngState,
}

fn moment_key(role: Role, name: &str) -> String {
    format!("{}/{name}", role.name())
}

// Streams 0 and 1 belong to encoder initialization.
fn epoch_stream(epoch: u64) -> u64 {
    epoch + 2
}

impl Checkpoint {
    /// Freshly initialized encoders with zero moments.
    pub fn init(config: &TrainConfig) -> Result<Checkpoint> {
        config.validate()?;
        let input = init_params(&config.encoder, Role::Input, config.seed)?;
        let context = init_params(&config.encoder, Role::Context, config.seed)?;
        let mut moments = BTreeMap::new();
        for params in [&input, &context] {
            for name in params.trainable_names() {
                let shape = params.get(name).expect("listed name").shape();
                moments.insert(
                    moment_key(params.role, name),
                    (Tensor::zeros(shape), Tensor::zeros(shape)),
                );
            }
        }
        Ok(Checkpoint {
            config: config.clone(),
            step: 0,
            input,
            context,
            moments,
            rng: RngState {
                seed: config.seed,
                stream: epoch_stream(0),
                word_pos: 0,
            },
        })
    }

    pub fn params(&self, role: Role) -> &EncoderParams {
        match role {
            Role::Input => &self.input,
            Role::Context => &self.context,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean batch loss of every epoch present in the log, in epoch order.
    pub fn epoch_means(&self) -> Vec<(u64, f64)> {
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(e, (s, n))| (e, s / n as f64))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.step, r.epoch, r.loss).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where periodic checkpoints go, as `step-NNNNNNNN.sv2c`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the global step counter reaches this value.
    pub max_steps: Option<u64>,
    /// Called with the epoch index and its mean loss after each completed epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(u64, f64)>,
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    corpus: &Corpus,
    images: &[Tensor],
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<(Checkpoint, LossLog)> {
    resume(corpus, images, Checkpoint::init(config)?, options)
}

/// Continues training from `checkpoint` until `checkpoint.config.epochs` epochs are done.
pub fn resume(
    corpus: &Corpus,
    images: &[Tensor],
    mut state: Checkpoint,
    mut options: TrainOptions,
) -> Result<(Checkpoint, LossLog)> {
    let config = state.config.clone();
    config.validate()?;
    if images.len() != corpus.items().len() {
        return Err(Error::invalid(
            "train",
            format!("{} images for {} items", images.len(), corpus.items().len()),
        ));
    }
    let mut log = LossLog::default();
    let sets = corpus.sets();
    if sets.is_empty() || config.epochs == 0 {
        return Ok((state, log));
    }
    corpus.check_pool(config.k)?;
    let pool: Vec<String> = corpus.items().iter().map(|i| i.id.clone()).collect();
    let steps_per_epoch = sets.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let stop = options
        .max_steps
        .map_or(total_steps, |m| m.min(total_steps));

    while state.step < stop {
        let epoch = state.step / steps_per_epoch;
        let order = epoch_order(&config, epoch, sets.len());
        let mut rng = if state.step % steps_per_epoch == 0 {
            let mut rng = fresh_epoch_rng(&config, epoch);
            shuffle(&mut rng, sets.len());
            rng
        } else {
            state.rng.restore()
        };
        let mut epoch_losses = Vec::new();
        while state.step < stop && state.step / steps_per_epoch == epoch {
            let b = (state.step % steps_per_epoch) as usize;
            let batch: Vec<&StyleSet> = order
                [b * config.batch_size..((b + 1) * config.batch_size).min(sets.len())]
                .iter()
                .map(|&i| &sets[i])
                .collect();
            let pairs = PairBatch::build(&batch, &pool, config.k, &mut rng)?;
            let loss = train_step(&mut state, corpus, images, &pairs, batch.len())?;
            state.step += 1;
            state.rng = RngState {
                seed: config.seed,
                stream: epoch_stream(epoch),
                word_pos: rng.get_word_pos(),
            };
            log.records.push(LossRecord {
                step: state.step,
                epoch,
                loss,
            });
            epoch_losses.push(loss);
            if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval as u64 == 0
            {
                if let Some(dir) = &options.checkpoint_dir {
                    save_checkpoint(&state, &dir.join(format!("step-{:08}.sv2c", state.step)))?;
                }
            }
        }
        if state.step % steps_per_epoch == 0 {
            state.rng = RngState {
                seed: config.seed,
                stream: epoch_stream(epoch + 1),
                word_pos: 0,
            };
            if let Some(cb) = options.on_epoch.as_mut() {
                let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
                cb(epoch, mean);
            }
        }
    }
    Ok((state, log))
}

fn fresh_epoch_rng(config: &TrainConfig, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch_stream(epoch));
    rng
}

fn shuffle(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Set order of an epoch: the first draws of the epoch stream.
fn epoch_order(config: &TrainConfig, epoch: u64, n: usize) -> Vec<usize> {
    shuffle(&mut fresh_epoch_rng(config, epoch), n)
}

fn stack_images(images: &[Tensor], corpus: &Corpus, ids: &[String]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyCandidates)?;
    let mut shape = vec![ids.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(ids.len() * first.len());
    for id in ids {
        let i = corpus
            .item_index(id)
            .ok_or_else(|| Error::MissingItem(id.clone()))?;
        data.extend_from_slice(images[i].data());
    }
    Tensor::new(shape, data)
}

fn rows(ids: &[String]) -> HashMap<String, usize> {
    ids.iter()
        .cloned()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect()
}

/// One forward/backward/update pass; returns the mean per-set loss of the batch.
fn train_step(
    state: &mut Checkpoint,
    corpus: &Corpus,
    images: &[Tensor],
    pairs: &PairBatch,
    n_sets: usize,
) -> Result<f64> {
    let u_ids = pairs.input_ids();
    let v_ids = pairs.context_ids();
    let mut tape = Tape::new();
    let in_vars = state.input.bind(&mut tape);
    let ctx_vars = state.context.bind(&mut tape);
    let x_in = tape.constant(stack_images(images, corpus, &u_ids)?);
    let x_ctx = tape.constant(stack_images(images, corpus, &v_ids)?);
    let enc = &state.config.encoder;
    let u = encoder::forward(enc, &in_vars, &mut tape, x_in, true)?;
    let v = encoder::forward(enc, &ctx_vars, &mut tape, x_ctx, true)?;
    let total = set_loss_negsampled(
        &mut tape,
        u.embeddings,
        &rows(&u_ids),
        v.embeddings,
        &rows(&v_ids),
        pairs,
    )?;
    let loss = tape.scale(total, 1.0 / n_sets as f64)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "training loss",
        });
    }
    let mut grads = tape.backward(loss)?;

    let t = state.step + 1;
    let config = state.config.adam();
    for (params, vars, norm) in [
        (&mut state.input, &in_vars, &u.norm_nodes),
        (&mut state.context, &ctx_vars, &v.norm_nodes),
    ] {
        let role = params.role;
        for (name, var) in vars {
            if !encoder::is_trainable(name) {
                continue;
            }
            let grad = grads
                .take(*var)
                .expect("every parameter receives a gradient");
            let (m, v) = state
                .moments
                .get_mut(&moment_key(role, name))
                .expect("moments exist for every parameter");
            let p = params.get_mut(name).expect("bound parameter exists");
            adam_step(p, &grad, m, v, t, &config)?;
            // Stored precision, so checkpoints capture the state exactly.
            p.round_to_f32();
            m.round_to_f32();
            v.round_to_f32();
        }
        params.update_running_stats(&tape, norm);
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_config(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.0);
        let (mut m, mut v) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_step(
            &mut p,
            &Tensor::scalar(1.0),
            &mut m,
            &mut v,
            1,
            &scalar_config(0.1),
        )
        .unwrap();
        assert!((p.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::vector(&[0.5, -2.0]);
        let before = p.clone();
        let (mut m, mut v) = (Tensor::zeros(&[2]), Tensor::zeros(&[2]));
        adam_step(
            &mut p,
            &Tensor::zeros(&[2]),
            &mut m,
            &mut v,
            1,
            &scalar_config(0.1),
        )
        .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_repeated_gradient_does_not_grow_updates() {
        let cfg = scalar_config(0.01);
        for g in [-3.0, 0.2, 1.0, 7.5] {
            let mut p = Tensor::scalar(1.0);
            let (mut m, mut v) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
            let grad = Tensor::scalar(g);
            adam_step(&mut p, &grad, &mut m, &mut v, 1, &cfg).unwrap();
            let first = (p.item() - 1.0).abs();
            let mid = p.item();
            adam_step(&mut p, &grad, &mut m, &mut v, 2, &cfg).unwrap();
            assert!((p.item() - mid).abs() <= first + 1e-12);
        }
    }

    #[test]
    fn adam_rejects_bad_shapes_and_step() {
        let mut p = Tensor::zeros(&[2]);
        let (mut m, mut v) = (Tensor::zeros(&[2]), Tensor::zeros(&[2]));
        let cfg = AdamConfig::default();
        assert!(matches!(
            adam_step(&mut p, &Tensor::zeros(&[3]), &mut m, &mut v, 1, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(adam_step(&mut p, &Tensor::zeros(&[2]), &mut m, &mut v, 0, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                beta1: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta2: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epsilon: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn loss_log_csv_and_means() {
        let log = LossLog {
            records: vec![
                LossRecord {
                    step: 1,
                    epoch: 0,
                    loss: 2.0,
                },
                LossRecord {
                    step: 2,
                    epoch: 0,
                    loss: 4.0,
                },
                LossRecord {
                    step: 3,
                    epoch: 1,
                    loss: 1.5,
                },
            ],
        };
        assert_eq!(log.to_csv(), "step,epoch,loss\n1,0,2\n2,0,4\n3,1,1.5\n");
        assert_eq!(log.epoch_means(), [(0, 3.0), (1, 1.5)]);
    }
}

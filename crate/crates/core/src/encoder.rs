//! Convolutional image encoders.
//!
//! The input network and the context network share this architecture but
//! never share parameters: each [`EncoderParams`] owns its tensors.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, BN_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            _ => Err(Error::InvalidConfig(format!("unknown pool kind {s:?}"))),
        }
    }
}

/// `conv_count` 3x3 convolutions producing `out_channels`, then a 2x2 pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub conv_count: usize,
    pub pool: PoolKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub conv_stages: Vec<ConvStage>,
    pub embedding_dim: usize,
    pub batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let stage = |c| ConvStage {
            out_channels: c,
            conv_count: 2,
            pool: PoolKind::Max,
        };
        EncoderConfig {
            input_shape: [3, 32, 32],
            conv_stages: vec![stage(16), stage(32), stage(64)],
            embedding_dim: 64,
            batch_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig(
                "embedding dimension must be at least 2".into(),
            ));
        }
        if self
            .conv_stages
            .iter()
            .any(|s| s.out_channels == 0 || s.conv_count == 0)
        {
            return Err(Error::InvalidConfig(
                "every stage needs at least one convolution and channel".into(),
            ));
        }
        let (fh, fw) = self.final_spatial();
        if fh == 0 || fw == 0 {
            return Err(Error::InvalidConfig(format!(
                "{} pooling stages shrink a {h}x{w} input below 1x1",
                self.conv_stages.len()
            )));
        }
        Ok(())
    }

    /// Spatial size after every pooling stage.
    pub fn final_spatial(&self) -> (usize, usize) {
        let [_, h, w] = self.input_shape;
        self.conv_stages
            .iter()
            .fold((h, w), |(h, w), _| (h / 2, w / 2))
    }

    fn final_channels(&self) -> usize {
        self.conv_stages
            .last()
            .map_or(self.input_shape[0], |s| s.out_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Context,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Context => "context",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Role::Input => 0,
            Role::Context => 1,
        }
    }
}

/// Named parameter and running-statistic tensors of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub role: Role,
    pub config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters of an encoder placed on a tape.
pub type ParamVars = BTreeMap<String, Var>;

/// Batch-norm nodes whose batch statistics feed the running estimates.
pub struct EncodeOutput {
    pub embeddings: Var,
    pub norm_nodes: Vec<(String, Var)>,
}

fn conv_name(stage: usize, conv: usize) -> String {
    format!("s{stage}.c{conv}")
}

/// Running statistics are state, not trainable parameters.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".bn.mean") || name.ends_with(".bn.var"))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Draws parameters for `role`. Both roles may share `seed`; they use separate streams.
pub fn init_params(config: &EncoderConfig, role: Role, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role.stream());
    let mut tensors = BTreeMap::new();
    let mut in_ch = config.input_shape[0];
    for (si, stage) in config.conv_stages.iter().enumerate() {
        for ci in 0..stage.conv_count {
            let name = conv_name(si, ci);
            let fan_in = in_ch * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let oc = stage.out_channels;
            tensors.insert(
                format!("{name}.weight"),
                uniform(&mut rng, &[oc, in_ch, 3, 3], bound),
            );
            tensors.insert(format!("{name}.bias"), Tensor::zeros(&[oc]));
            if config.batch_norm {
                tensors.insert(format!("{name}.bn.gamma"), Tensor::ones(&[oc]));
                tensors.insert(format!("{name}.bn.beta"), Tensor::zeros(&[oc]));
                tensors.insert(format!("{name}.bn.mean"), Tensor::zeros(&[oc]));
                tensors.insert(format!("{name}.bn.var"), Tensor::ones(&[oc]));
            }
            in_ch = oc;
        }
    }
    let fan_in = config.final_channels();
    let bound = 1.0 / (fan_in as f64).sqrt();
    tensors.insert(
        "proj.weight".into(),
        uniform(&mut rng, &[fan_in, config.embedding_dim], bound),
    );
    tensors.insert("proj.bias".into(), Tensor::zeros(&[config.embedding_dim]));
    Ok(EncoderParams {
        role,
        config: config.clone(),
        tensors,
    })
}

impl EncoderParams {
    /// Rebuilds parameters from named tensors, checking every expected tensor is present with the right shape.
    pub fn from_tensors(
        config: &EncoderConfig,
        role: Role,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let template = init_params(config, role, 0)?;
        if template.tensors.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "{} encoder expects {} tensors, got {}",
                role.name(),
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (name, t) in &template.tensors {
            match tensors.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                Some(got) => {
                    return Err(Error::ShapeMismatch {
                        op: "encoder parameter",
                        left: t.shape().to_vec(),
                        right: got.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "missing encoder tensor {name}"
                    )))
                }
            }
        }
        Ok(EncoderParams {
            role,
            config: config.clone(),
            tensors,
        })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.tensors
            .keys()
            .map(String::as_str)
            .filter(|n| is_trainable(n))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Puts trainable tensors on the tape as parameters and statistics as constants.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let v = if is_trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Inference-mode embeddings of a `(batch, C, H, W)` image tensor.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let x = tape.constant(images.clone());
        let out = forward(&self.config, &vars, &mut tape, x, false)?;
        Ok(tape.value(out.embeddings).clone())
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape, norm_nodes: &[(String, Var)]) {
        for (prefix, node) in norm_nodes {
            let Some((mean, var)) = tape.batch_stats(*node) else {
                continue;
            };
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                let t = self
                    .tensors
                    .get_mut(&format!("{prefix}.bn.{suffix}"))
                    .expect("running statistic exists");
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b) as f32 as f64;
                }
            }
        }
    }
}

/// Records an encoder pass on `tape`. `vars` holds one variable per parameter name.
pub fn forward(
    config: &EncoderConfig,
    vars: &ParamVars,
    tape: &mut Tape,
    images: Var,
    train: bool,
) -> Result<EncodeOutput> {
    let shape = tape.value(images).shape().to_vec();
    let expected = config.input_shape;
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: vec![0, expected[0], expected[1], expected[2]],
            right: shape,
        });
    }
    let batch = shape[0];
    let var = |name: String| -> Result<Var> {
        vars.get(&name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("missing encoder tensor {name}")))
    };

    let mut x = images;
    let mut norm_nodes = Vec::new();
    for (si, stage) in config.conv_stages.iter().enumerate() {
        for ci in 0..stage.conv_count {
            let name = conv_name(si, ci);
            x = tape.conv2d(
                x,
                var(format!("{name}.weight"))?,
                Some(var(format!("{name}.bias"))?),
                1,
                1,
            )?;
            if config.batch_norm {
                x = tape.batch_norm(
                    x,
                    var(format!("{name}.bn.gamma"))?,
                    var(format!("{name}.bn.beta"))?,
                    var(format!("{name}.bn.mean"))?,
                    var(format!("{name}.bn.var"))?,
                    train,
                )?;
                if train {
                    norm_nodes.push((name, x));
                }
            }
            x = tape.relu(x)?;
        }
        x = match stage.pool {
            PoolKind::Max => tape.max_pool2d(x, 2, 2)?,
            PoolKind::Avg => tape.avg_pool2d(x, 2, 2)?,
        };
    }

    // Global average pooling as a product with a constant averaging column.
    let dims = tape.value(x).shape().to_vec();
    let (channels, area) = (dims[1], dims[2] * dims[3]);
    let flat = tape.reshape(x, &[batch * channels, area])?;
    let avg = tape.constant(Tensor::full(&[area, 1], 1.0 / area as f64));
    let pooled = tape.matmul(flat, avg)?;
    let features = tape.reshape(pooled, &[batch, channels])?;
    let embeddings = tape.affine(
        features,
        var("proj.weight".into())?,
        var("proj.bias".into())?,
    )?;
    Ok(EncodeOutput {
        embeddings,
        norm_nodes,
    })
}

//! Set-wise skip-gram objectives: exact softmax and negative sampling.
//!
//! Both are losses to minimize, i.e. the negated log-likelihoods.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StyleSet;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Distribution negatives are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeDistribution {
    /// Uniform over the pool minus the set's members.
    #[default]
    Uniform,
}

/// All ordered `(input, context)` pairs of a set, sorted by input id then context id.
pub fn set_pairs(set: &StyleSet) -> Result<Vec<(String, String)>> {
    if set.len() < 2 {
        return Err(Error::InvalidSet {
            set_id: set.set_id.clone(),
            reason: format!("needs at least 2 items to form pairs, has {}", set.len()),
        });
    }
    let mut ids: Vec<&String> = set.item_ids.iter().collect();
    ids.sort();
    let mut pairs = Vec::with_capacity(ids.len() * (ids.len() - 1));
    for i in &ids {
        for c in &ids {
            if i != c {
                pairs.push(((*i).clone(), (*c).clone()));
            }
        }
    }
    Ok(pairs)
}

/// Draws `k` distinct ids uniformly without replacement from `pool` minus the members of `set`.
pub fn sample_negatives<R: Rng + ?Sized>(
    pool: &[String],
    set: &StyleSet,
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    let mut members: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, id)| set.contains(id))
        .map(|(i, _)| i)
        .collect();
    members.sort_unstable();
    let available = pool.len() - members.len();
    if available < k {
        return Err(Error::InsufficientPool {
            needed: k,
            available,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let picks = index::sample(rng, available, k);
    Ok(picks
        .iter()
        .map(|mut j| {
            // j-th non-member: shift past every member at or before it.
            for &m in &members {
                if m <= j {
                    j += 1;
                }
            }
            pool[j].clone()
        })
        .collect())
}

/// Item vectors keyed by id.
pub type VectorMap = HashMap<String, Vec<f64>>;

fn lookup<'a>(map: &'a VectorMap, id: &str, d: Option<usize>) -> Result<&'a [f64]> {
    let v = map
        .get(id)
        .ok_or_else(|| Error::MissingVector(id.to_string()))?;
    if let Some(d) = d {
        if v.len() != d {
            return Err(Error::ShapeMismatch {
                op: "vector lookup",
                left: vec![d],
                right: vec![v.len()],
            });
        }
    }
    Ok(v)
}

fn stack(map: &VectorMap, ids: &[String], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ids.len() * d);
    for id in ids {
        data.extend_from_slice(lookup(map, id, Some(d))?);
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Exact softmax loss over the full pool `f`:
/// `-(1/|S|) Σ_i Σ_{c≠i} log softmax_j(u_i·v_j)[c]`.
pub fn softmax_set_loss(u: &VectorMap, v: &VectorMap, f: &[String], set: &StyleSet) -> Result<f64> {
    let first = set.item_ids.first().ok_or(Error::EmptyCandidates)?;
    let d = lookup(u, first, None)?.len();
    let u_t = stack(u, &set.item_ids, d)?;
    let v_t = stack(v, f, d)?;
    let rows: Result<Vec<usize>> = set
        .item_ids
        .iter()
        .map(|id| {
            f.iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::MissingVector(id.clone()))
        })
        .collect();
    let mut tape = Tape::inference();
    let u_var = tape.constant(u_t);
    let v_var = tape.constant(v_t);
    let loss = softmax_set_loss_on(&mut tape, u_var, v_var, &rows?)?;
    Ok(tape.value(loss).item())
}

/// Tape form of [`softmax_set_loss`]: `u` is `(|S|, d)`, `v` is `(|F|, d)` and
/// `member_rows[s]` is the row of `v` holding set member `s`.
pub fn softmax_set_loss_on(tape: &mut Tape, u: Var, v: Var, member_rows: &[usize]) -> Result<Var> {
    let s = member_rows.len();
    let n = tape.value(v).shape()[0];
    if tape.value(u).shape()[0] != s {
        return Err(Error::invalid(
            "softmax_set_loss",
            "one input row per set member required",
        ));
    }
    let vt = tape.transpose(v)?;
    let logits = tape.matmul(u, vt)?;
    let logp = tape.log_softmax(logits)?;
    let picks: Vec<usize> = (0..s)
        .flat_map(|i| {
            member_rows
                .iter()
                .enumerate()
                .filter(move |&(c, _)| c != i)
                .map(move |(_, &col)| i * n + col)
        })
        .collect();
    let terms = tape.take(logp, &picks)?;
    let total = tape.sum(terms)?;
    tape.scale(total, -1.0 / s as f64)
}

/// `-[log σ(u·v_c) + Σ_j log σ(-u·v_j)]` for rank-1 vectors on the tape.
pub fn negsample_loss(tape: &mut Tape, u: Var, v_c: Var, v_negs: &[Var]) -> Result<Var> {
    let pos = tape.dot(u, v_c)?;
    let mut total = tape.log_sigmoid(pos)?;
    for &n in v_negs {
        let s = tape.dot(u, n)?;
        let s = tape.scale(s, -1.0)?;
        let term = tape.log_sigmoid(s)?;
        total = tape.add(total, term)?;
    }
    tape.scale(total, -1.0)
}

/// Plain-value form of [`negsample_loss`].
pub fn negsample_loss_value(u: &[f64], v_c: &[f64], v_negs: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vec = |tape: &mut Tape, x: &[f64]| tape.constant(Tensor::vector(x));
    let u_v = vec(&mut tape, u);
    let c_v = vec(&mut tape, v_c);
    let negs: Vec<Var> = v_negs.iter().map(|n| vec(&mut tape, n)).collect();
    let loss = negsample_loss(&mut tape, u_v, c_v, &negs)?;
    Ok(tape.value(loss).item())
}

/// One ordered pair of a set together with its negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub input: String,
    pub context: String,
    pub set_id: String,
    pub set_size: usize,
    pub negatives: Vec<String>,
}

/// Pairs and negatives for a batch of sets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub entries: Vec<PairEntry>,
}

impl PairBatch {
    /// Enumerates each set's pairs and draws `k` negatives per pair, in set order.
    pub fn build<R: Rng + ?Sized>(
        sets: &[&StyleSet],
        pool: &[String],
        k: usize,
        rng: &mut R,
    ) -> Result<PairBatch> {
        let mut entries = Vec::new();
        for set in sets {
            for (input, context) in set_pairs(set)? {
                let negatives = sample_negatives(pool, set, k, rng)?;
                entries.push(PairEntry {
                    input,
                    context,
                    set_id: set.set_id.clone(),
                    set_size: set.len(),
                    negatives,
                });
            }
        }
        Ok(PairBatch { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct input ids in first-use order.
    pub fn input_ids(&self) -> Vec<String> {
        distinct(self.entries.iter().map(|e| &e.input))
    }

    /// Distinct context and negative ids in first-use order.
    pub fn context_ids(&self) -> Vec<String> {
        distinct(
            self.entries
                .iter()
                .flat_map(|e| std::iter::once(&e.context).chain(&e.negatives)),
        )
    }
}

fn distinct<'a>(ids: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    ids.filter(|id| seen.insert(*id)).cloned().collect()
}

fn row_of(rows: &HashMap<String, usize>, id: &str) -> Result<usize> {
    rows.get(id)
        .copied()
        .ok_or_else(|| Error::MissingVector(id.to_string()))
}

/// Negative-sampling loss summed over the sets in `batch`, each set weighted by `1/|S|`.
///
/// `u` holds input vectors with rows given by `u_rows`; `v` holds context and
/// negative vectors with rows given by `v_rows`.
pub fn set_loss_negsampled(
    tape: &mut Tape,
    u: Var,
    u_rows: &HashMap<String, usize>,
    v: Var,
    v_rows: &HashMap<String, usize>,
    batch: &PairBatch,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("set_loss_negsampled", "empty pair batch"));
    }
    let d = tape.value(u).shape()[1];
    if tape.value(v).shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "set_loss_negsampled",
            left: tape.value(u).shape().to_vec(),
            right: tape.value(v).shape().to_vec(),
        });
    }
    let mut pos_u = Vec::with_capacity(batch.len());
    let mut pos_v = Vec::with_capacity(batch.len());
    let mut neg_u = Vec::new();
    let mut neg_v = Vec::new();
    let mut pos_w = Vec::with_capacity(batch.len());
    let mut neg_w = Vec::new();
    for e in &batch.entries {
        if e.input == e.context || e.negatives.iter().any(|n| *n == e.input || *n == e.context) {
            return Err(Error::invalid(
                "set_loss_negsampled",
                format!("inconsistent pair in set {}", e.set_id),
            ));
        }
        let w = 1.0 / e.set_size as f64;
        let ui = row_of(u_rows, &e.input)?;
        pos_u.push(ui);
        pos_v.push(row_of(v_rows, &e.context)?);
        pos_w.push(-w);
        for n in &e.negatives {
            neg_u.push(ui);
            neg_v.push(row_of(v_rows, n)?);
            neg_w.push(-w);
        }
    }
    let ones = tape.constant(Tensor::ones(&[d, 1]));
    let pos = scores(tape, u, v, &pos_u, &pos_v, ones)?;
    let pos = tape.log_sigmoid(pos)?;
    let pw = tape.constant(Tensor::new(vec![pos_w.len(), 1], pos_w)?);
    let weighted = tape.mul(pos, pw)?;
    let mut loss = tape.sum(weighted)?;
    if !neg_u.is_empty() {
        let neg = scores(tape, u, v, &neg_u, &neg_v, ones)?;
        let neg = tape.scale(neg, -1.0)?;
        let neg = tape.log_sigmoid(neg)?;
        let nw = tape.constant(Tensor::new(vec![neg_w.len(), 1], neg_w)?);
        let weighted = tape.mul(neg, nw)?;
        let neg_total = tape.sum(weighted)?;
        loss = tape.add(loss, neg_total)?;
    }
    Ok(loss)
}

/// Row-wise inner products `u[a_k]·v[b_k]` as a `(K, 1)` column.
fn scores(tape: &mut Tape, u: Var, v: Var, a: &[usize], b: &[usize], ones: Var) -> Result<Var> {
    let ua = tape.gather_rows(u, a)?;
    let vb = tape.gather_rows(v, b)?;
    let prod = tape.mul(ua, vb)?;
    tape.matmul(prod, ones)
}

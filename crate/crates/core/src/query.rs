//! Item embedding matrices and the queries answered over them.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Dot => "dot",
            Metric::Euclidean => "euclidean",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "dot" => Ok(Metric::Dot),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

/// One row per item, in a fixed id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    categories: Vec<String>,
    data: Tensor,
    metric: Metric,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(
        ids: Vec<String>,
        categories: Vec<String>,
        data: Tensor,
        metric: Metric,
    ) -> Result<Self> {
        if data.rank() != 2 || data.shape()[0] != ids.len() || categories.len() != ids.len() {
            return Err(Error::invalid(
                "embedding matrix",
                format!(
                    "{} ids and {} categories for a {:?} matrix",
                    ids.len(),
                    categories.len(),
                    data.shape()
                ),
            ));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite {
                op: "embedding matrix",
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(
                    "embedding matrix",
                    format!("duplicate id {id}"),
                ));
            }
        }
        Ok(EmbeddingMatrix {
            ids,
            categories,
            data,
            metric,
            index,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn vector(&self, id: &str) -> Result<&[f64]> {
        self.position(id)
            .map(|i| self.data.row(i))
            .ok_or_else(|| Error::MissingItem(id.to_string()))
    }

    pub fn category(&self, id: &str) -> Option<&str> {
        self.position(id).map(|i| self.categories[i].as_str())
    }

    /// Header `item_id<TAB>category<TAB>v0..v{d-1}`, one row per item.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("item_id\tcategory");
        for j in 0..self.dim() {
            write!(out, "\tv{j}").unwrap();
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            write!(out, "{id}\t{}", self.categories[i]).unwrap();
            for v in self.data.row(i) {
                write!(out, "\t{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path, metric: Metric) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 3 || cols[0] != "item_id" || cols[1] != "category" {
            return Err(parse_err(
                1,
                "expected header item_id, category, v0..".into(),
            ));
        }
        let d = cols.len() - 2;
        let (mut ids, mut cats, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines {
            let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if f.len() != d + 2 {
                return Err(parse_err(
                    n + 1,
                    format!("expected {} fields, got {}", d + 2, f.len()),
                ));
            }
            ids.push(f[0].to_string());
            cats.push(f[1].to_string());
            for v in &f[2..] {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| parse_err(n + 1, format!("bad number {v:?}")))?,
                );
            }
        }
        let n = ids.len();
        EmbeddingMatrix::new(ids, cats, Tensor::new(vec![n, d], data)?, metric)
    }
}

/// Input-network embeddings for every item of `corpus`, loading images from disk.
pub fn extract_all(
    params: &EncoderParams,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    let images = corpus.load_images()?;
    extract_from_images(params, corpus, &images, batch_size)
}

/// As [`extract_all`] with images already in memory, aligned with `corpus.items()`.
pub fn extract_from_images(
    params: &EncoderParams,
    corpus: &Corpus,
    images: &[Tensor],
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if images.len() != corpus.items().len() {
        return Err(Error::invalid(
            "extract",
            format!("{} images for {} items", images.len(), corpus.items().len()),
        ));
    }
    let d = params.config.embedding_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(batch_size) {
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        let mut pixels = Vec::with_capacity(chunk.len() * chunk[0].len());
        for img in chunk {
            pixels.extend_from_slice(img.data());
        }
        data.extend_from_slice(params.encode(&Tensor::new(shape, pixels)?)?.data());
    }
    let items = corpus.items();
    EmbeddingMatrix::new(
        items.iter().map(|i| i.id.clone()).collect(),
        items.iter().map(|i| i.category.clone()).collect(),
        Tensor::new(vec![items.len(), d], data)?,
        Metric::Cosine,
    )
}

/// A ranked candidate. `score` is a similarity, or a distance under [`Metric::Euclidean`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub category: String,
    pub score: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Metric value and a key where larger is better.
fn score(metric: Metric, q: &[f64], q_norm: f64, row: &[f64]) -> (f64, f64) {
    match metric {
        Metric::Dot => {
            let s = dot(q, row);
            (s, s)
        }
        Metric::Cosine => {
            let denom = q_norm * norm(row);
            let s = if denom > 0.0 {
                dot(q, row) / denom
            } else {
                0.0
            };
            (s, s)
        }
        Metric::Euclidean => {
            let s = q
                .iter()
                .zip(row)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            (s, -s)
        }
    }
}

/// The `top_n` best items for `query`, ties broken by ascending id.
pub fn nearest(
    query: &[f64],
    matrix: &EmbeddingMatrix,
    top_n: usize,
    exclude: &HashSet<String>,
    category: Option<&str>,
) -> Result<Vec<Scored>> {
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    if query.len() != matrix.dim() {
        return Err(Error::ShapeMismatch {
            op: "nearest",
            left: vec![matrix.dim()],
            right: vec![query.len()],
        });
    }
    let q_norm = norm(query);
    let mut ranked: Vec<(f64, usize, f64)> = (0..matrix.len())
        .filter(|&i| !exclude.contains(&matrix.ids[i]))
        .filter(|&i| category.is_none_or(|c| matrix.categories[i] == c))
        .map(|i| {
            let (value, key) = score(matrix.metric, query, q_norm, matrix.data.row(i));
            (key, i, value)
        })
        .collect();
    if ranked.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| matrix.ids[a.1].cmp(&matrix.ids[b.1]))
    });
    ranked.truncate(top_n);
    Ok(ranked
        .into_iter()
        .map(|(_, i, score)| Scored {
            id: matrix.ids[i].clone(),
            category: matrix.categories[i].clone(),
            score,
        })
        .collect())
}

/// "x is to y as z is to ?"
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyQuestion {
    pub x: String,
    pub y: String,
    pub z: String,
    pub expected_category: String,
}

/// Ranks every item other than x, y and z against `u_y - u_x + u_z`.
///
/// With `filter_category` the candidates are restricted to the expected
/// category; otherwise off-category answers are left for the caller to judge.
pub fn analogy(
    question: &AnalogyQuestion,
    matrix: &EmbeddingMatrix,
    filter_category: bool,
) -> Result<(String, Vec<Scored>)> {
    let ux = matrix.vector(&question.x)?;
    let uy = matrix.vector(&question.y)?;
    let uz = matrix.vector(&question.z)?;
    let target: Vec<f64> = (0..matrix.dim()).map(|j| uy[j] - ux[j] + uz[j]).collect();
    let exclude: HashSet<String> = [&question.x, &question.y, &question.z]
        .into_iter()
        .cloned()
        .collect();
    let category = filter_category.then_some(question.expected_category.as_str());
    let ranking = nearest(&target, matrix, matrix.len(), &exclude, category)?;
    Ok((ranking[0].id.clone(), ranking))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with eigenvectors as columns of a row-major matrix.
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + src];
        }
    }
    (values, vectors)
}

/// Mean-centred projection onto the top two principal directions, as an `(n, 2)` tensor.
///
/// Each direction's sign makes its largest-magnitude loading positive.
pub fn project_2d(matrix: &EmbeddingMatrix) -> Result<Tensor> {
    let (n, d) = (matrix.len(), matrix.dim());
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 items to project, have {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(matrix.data.row(i)) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<f64> = (0..n)
        .flat_map(|i| {
            matrix
                .data
                .row(i)
                .iter()
                .zip(&mean)
                .map(|(x, m)| x - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in centred.chunks(d) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b] / n as f64;
            }
        }
    }
    let (values, vectors) = symmetric_eigen(cov, d);
    let tol = 1e-12 * values[0].abs().max(f64::MIN_POSITIVE);
    if d < 2 || values[1] <= tol {
        return Err(Error::Degenerate(
            "embedding spread has rank below 2".into(),
        ));
    }
    let mut out = vec![0.0; n * 2];
    for comp in 0..2 {
        let mut dir: Vec<f64> = (0..d).map(|k| vectors[k * d + comp]).collect();
        let lead = dir.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if lead < 0.0 {
            dir.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, row) in centred.chunks(d).enumerate() {
            out[i * 2 + comp] = dot(row, &dir);
        }
    }
    Tensor::new(vec![n, 2], out)
}

/// Plot-ready `item_id<TAB>x<TAB>y` rows.
pub fn projection_tsv(matrix: &EmbeddingMatrix, coords: &Tensor) -> String {
    let mut out = String::from("item_id\tx\ty\n");
    for (i, id) in matrix.ids().iter().enumerate() {
        let r = coords.row(i);
        writeln!(out, "{id}\t{}\t{}", r[0], r[1]).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> EmbeddingMatrix {
        let d = rows[0].len();
        EmbeddingMatrix::new(
            (0..rows.len()).map(|i| format!("item{i}")).collect(),
            vec!["c".to_string(); rows.len()],
            Tensor::new(vec![rows.len(), d], rows.concat()).unwrap(),
            Metric::Cosine,
        )
        .unwrap()
    }

    #[test]
    fn self_retrieval_and_tiebreak() {
        let m = matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let top = nearest(&[0.0, 1.0, 0.0], &m, 1, &HashSet::new(), None).unwrap();
        assert_eq!(top[0].id, "item1");
        assert!((top[0].score - 1.0).abs() < 1e-12);
        let ex: HashSet<String> = ["item1".to_string()].into();
        let top = nearest(&[0.0, 1.0, 0.0], &m, 2, &ex, None).unwrap();
        assert_eq!(top[0].id, "item0");
        assert_eq!(top[1].id, "item2");
        assert_eq!(top[0].score, 0.0);
    }

    #[test]
    fn empty_candidates_and_bad_queries() {
        let m = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let all: HashSet<String> = m.ids().iter().cloned().collect();
        assert!(matches!(
            nearest(&[1.0, 0.0], &m, 1, &all, None),
            Err(Error::EmptyCandidates)
        ));
        assert!(matches!(
            nearest(&[1.0, 0.0], &m, 1, &HashSet::new(), Some("other")),
            Err(Error::EmptyCandidates)
        ));
        assert!(nearest(&[1.0, 0.0], &m, 0, &HashSet::new(), None).is_err());
        assert!(matches!(
            nearest(&[1.0], &m, 1, &HashSet::new(), None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn euclidean_ranks_by_ascending_distance() {
        let m = matrix(&[&[0.0, 0.0], &[3.0, 4.0], &[1.0, 0.0]]).with_metric(Metric::Euclidean);
        let r = nearest(&[0.0, 0.0], &m, 3, &HashSet::new(), None).unwrap();
        let ids: Vec<_> = r.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["item0", "item2", "item1"]);
        assert_eq!(r[2].score, 5.0);
    }

    #[test]
    fn analogy_degenerate_cases() {
        // x = z: target is u_y, and item3 duplicates y
        let m = matrix(&[
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[0.6, 0.8],
            &[0.0, 1.0],
            &[1.0, 1.0],
        ]);
        let q = AnalogyQuestion {
            x: "item0".into(),
            y: "item1".into(),
            z: "item0".into(),
            expected_category: "c".into(),
        };
        assert_eq!(analogy(&q, &m, false).unwrap().0, "item3");
        // u_x = u_y: target is u_z
        let m = matrix(&[
            &[1.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[0.1, 1.0],
            &[1.0, -1.0],
        ]);
        let q = AnalogyQuestion {
            x: "item0".into(),
            y: "item1".into(),
            z: "item2".into(),
            expected_category: "c".into(),
        };
        assert_eq!(analogy(&q, &m, false).unwrap().0, "item3");
        let missing = AnalogyQuestion {
            z: "nope".into(),
            ..q
        };
        assert!(matches!(
            analogy(&missing, &m, false),
            Err(Error::MissingItem(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let m = matrix(&[&[0.1, -2.5e-7], &[3.0, 1.0 / 3.0]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        m.write_tsv(&p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("item_id\tcategory\tv0\tv1\n"));
        assert_eq!(EmbeddingMatrix::read_tsv(&p, Metric::Cosine).unwrap(), m);
    }

    #[test]
    fn rejects_non_finite_rows() {
        let r = EmbeddingMatrix::new(
            vec!["a".into()],
            vec!["c".into()],
            Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap(),
            Metric::Cosine,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0];
        let (vals, vecs) = symmetric_eigen(a.clone(), 3);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a[r * 3 + k] * vecs[k * 3 + c]).sum();
                assert!((av - vals[c] * vecs[r * 3 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_rejects_rank_one() {
        let m = matrix(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert!(matches!(project_2d(&m), Err(Error::Degenerate(_))));
        assert!(matches!(
            project_2d(&matrix(&[&[1.0, 0.0], &[0.0, 1.0]])),
            Err(Error::Degenerate(_))
        ));
    }
}

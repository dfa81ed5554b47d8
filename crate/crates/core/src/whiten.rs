//! PCA whitening of per-category embedding vectors into residual encodings.
//!
//! Fit: stack the category's vectors into an n x p matrix, centre by the
//! column mean, take the top-d components of its SVD. Transform:
//! z = sqrt(n) * Sigma_d^{-1} * (U_d * (e - mu)). Under the sqrt(n) scale
//! the divisor-n covariance of the whitened fit set is exactly the
//! identity; the scale cancels in every cosine downstream.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::FirmIdx;

/// Raw per-firm vectors for one schema category.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub category: String,
    pub dim: usize,
    pub vectors: BTreeMap<FirmIdx, Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(category: impl Into<String>, dim: usize) -> Self {
        EmbeddingSet {
            category: category.into(),
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, firm: FirmIdx, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                path: self.category.clone(),
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Other(format!(
                "non-finite embedding entry for category {}",
                self.category
            )));
        }
        self.vectors.insert(firm, vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Fitted whitening model for one category.
#[derive(Debug, Clone)]
pub struct WhitenModel {
    pub category: String,
    /// Column mean of the fit matrix, length p.
    pub mean: Vec<f64>,
    /// Component rows, d x p, orthonormal.
    pub components: DMatrix<f64>,
    /// Top-d singular values of the centred fit matrix, descending.
    pub singular_values: Vec<f64>,
    /// Number of fit vectors.
    pub n: usize,
    /// Output dimension.
    pub d: usize,
}

impl WhitenModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// z = sqrt(n) * Sigma_d^{-1} * (U_d * (e - mu)).
    pub fn whiten(&self, vector: &[f64]) -> Result<Vec<f64>> {
        let p = self.input_dim();
        if vector.len() != p {
            return Err(Error::VectorLength {
                expected: p,
                actual: vector.len(),
            });
        }
        let scale = (self.n as f64).sqrt();
        let mut out = vec![0.0; self.d];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..p {
                acc += self.components[(k, j)] * (vector[j] - self.mean[j]);
            }
            *slot = scale * acc / self.singular_values[k];
        }
        Ok(out)
    }
}

/// Fit a whitening model on one category at output dimension `d`.
pub fn fit_whitener(embeddings: &EmbeddingSet, d: usize) -> Result<WhitenModel> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::TooFewVectors(n));
    }
    let p = embeddings.dim;
    let max_d = (n - 1).min(p);
    if d == 0 || d > max_d {
        return Err(Error::DimensionOutOfRange {
            requested: d,
            max: max_d,
            n,
            p,
        });
    }

    let mut mean = vec![0.0; p];
    for v in embeddings.vectors.values() {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut centred = DMatrix::<f64>::zeros(n, p);
    for (row, v) in embeddings.vectors.values().enumerate() {
        for (col, &x) in v.iter().enumerate() {
            centred[(row, col)] = x - mean[col];
        }
    }

    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });

    let max_sv = svd.singular_values[order[0]];
    let tol = max_sv * (n.max(p) as f64) * f64::EPSILON;
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol)
        .count();
    if rank == 0 || d > rank {
        return Err(Error::RankDeficient {
            requested: d,
            rank,
        });
    }

    let mut components = DMatrix::<f64>::zeros(d, p);
    let mut singular_values = Vec::with_capacity(d);
    for (k, &src) in order.iter().take(d).enumerate() {
        singular_values.push(svd.singular_values[src]);
        for j in 0..p {
            components[(k, j)] = v_t[(src, j)];
        }
    }

    Ok(WhitenModel {
        category: embeddings.category.clone(),
        mean,
        components,
        singular_values,
        n,
        d,
    })
}

/// Whitened vectors for one category.
#[derive(Debug, Clone)]
pub struct CategoryEncoding {
    pub category: String,
    pub d: usize,
    pub vectors: BTreeMap<FirmIdx, Vec<f64>>,
}

/// All categories' whitened vectors; the graph builder's input.
#[derive(Debug, Clone)]
pub struct ResidualEncodings {
    pub d: usize,
    pub categories: Vec<CategoryEncoding>,
}

impl ResidualEncodings {
    /// Firms having at least one encoded category, sorted.
    pub fn encoded_firms(&self) -> Vec<FirmIdx> {
        let mut firms: Vec<FirmIdx> = self
            .categories
            .iter()
            .flat_map(|c| c.vectors.keys().copied())
            .collect();
        firms.sort_unstable();
        firms.dedup();
        firms
    }
}

/// Fit one model per category and encode every firm that carries a vector
/// in that category. Firms missing a category are simply absent from that
/// category's encoding.
pub fn encode_all(sets: &[EmbeddingSet], d: usize) -> Result<(Vec<WhitenModel>, ResidualEncodings)> {
    let mut models = Vec::with_capacity(sets.len());
    let mut categories = Vec::with_capacity(sets.len());
    for set in sets {
        let model = fit_whitener(set, d)?;
        let mut vectors = BTreeMap::new();
        for (&firm, raw) in &set.vectors {
            vectors.insert(firm, model.whiten(raw)?);
        }
        categories.push(CategoryEncoding {
            category: set.category.clone(),
            d,
            vectors,
        });
        models.push(model);
    }
    Ok((models, ResidualEncodings { d, categories }))
}

/// Read one category's embeddings from delimited text with a header row:
/// firm_id,v1,...,vp. Firm ids missing from `lookup` are skipped and counted.
pub fn load_embedding_csv(
    path: &Path,
    category: &str,
    lookup: &dyn Fn(&str) -> Option<FirmIdx>,
) -> Result<(EmbeddingSet, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    let mut set: Option<EmbeddingSet> = None;
    let mut skipped = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: row_no + 2,
            message: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                row: row_no + 2,
                message: "need firm_id plus at least one value".into(),
            });
        }
        let firm_id = record.get(0).unwrap();
        let Some(firm) = lookup(firm_id) else {
            skipped += 1;
            continue;
        };
        let mut vector = Vec::with_capacity(record.len() - 1);
        for col in 1..record.len() {
            let value: f64 = record.get(col).unwrap().parse().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                row: row_no + 2,
                message: format!("bad number in column {col}: {e}"),
            })?;
            vector.push(value);
        }
        let set = set.get_or_insert_with(|| EmbeddingSet::new(category, vector.len()));
        if vector.len() != set.dim {
            return Err(Error::DimensionMismatch {
                path: path.display().to_string(),
                expected: set.dim,
                actual: vector.len(),
            });
        }
        set.insert(firm, vector)?;
    }
    let set = set.ok_or_else(|| Error::MissingInput(format!("{} is empty", path.display())))?;
    Ok((set, skipped))
}

const MODEL_MAGIC: &[u8; 4] = b"XFWM";
const MODEL_VERSION: u32 = 1;

/// Serialize a fitted model to a small versioned binary artifact.
pub fn write_model(model: &WhitenModel, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let cat = model.category.as_bytes();
    w.write_all(&(cat.len() as u32).to_le_bytes())?;
    w.write_all(cat)?;
    w.write_all(&(model.n as u64).to_le_bytes())?;
    w.write_all(&(model.d as u64).to_le_bytes())?;
    w.write_all(&(model.input_dim() as u64).to_le_bytes())?;
    for &x in &model.mean {
        w.write_all(&x.to_le_bytes())?;
    }
    for &s in &model.singular_values {
        w.write_all(&s.to_le_bytes())?;
    }
    for k in 0..model.d {
        for j in 0..model.input_dim() {
            w.write_all(&model.components[(k, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<WhitenModel> {
    let bad = |msg: &str| Error::Other(format!("bad whitening model artifact: {msg}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MODEL_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
    if u32::from_le_bytes(u32buf) != MODEL_VERSION {
        return Err(bad("unsupported version"));
    }
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
    let cat_len = u32::from_le_bytes(u32buf) as usize;
    let mut cat = vec![0u8; cat_len];
    r.read_exact(&mut cat).map_err(|_| bad("truncated"))?;
    let category = String::from_utf8(cat).map_err(|_| bad("category not utf-8"))?;
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated"))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let p = read_u64(&mut r)? as usize;
    let mut read_f64s = |r: &mut dyn Read, count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let mean = read_f64s(&mut r, p)?;
    let singular_values = read_f64s(&mut r, d)?;
    let flat = read_f64s(&mut r, d * p)?;
    let components = DMatrix::from_row_slice(d, p, &flat);
    Ok(WhitenModel {
        category,
        mean,
        components,
        singular_values,
        n,
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set_from_rows(rows: &[Vec<f64>]) -> EmbeddingSet {
        let mut set = EmbeddingSet::new("cat", rows[0].len());
        for (i, row) in rows.iter().enumerate() {
            set.insert(FirmIdx(i as u32), row.clone()).unwrap();
        }
        set
    }

    /// Divisor-n covariance of a stack of vectors.
    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len();
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for r in rows {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n as f64;
                }
            }
        }
        cov
    }

    #[test]
    fn identical_vectors_are_rank_deficient() {
        let set = set_from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        match fit_whitener(&set, 1) {
            Err(Error::RankDeficient { rank, .. }) => assert_eq!(rank, 0),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_vectors() {
        let set = set_from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(fit_whitener(&set, 1), Err(Error::TooFewVectors(1))));
    }

    #[test]
    fn dimension_bounds() {
        let set = set_from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        // max d = min(n-1, p) = 2
        assert!(fit_whitener(&set, 3).is_err());
        assert!(fit_whitener(&set, 0).is_err());
        assert!(fit_whitener(&set, 2).is_ok());
    }

    #[test]
    fn whiten_of_mean_is_zero() {
        let set = set_from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]]);
        let model = fit_whitener(&set, 2).unwrap();
        let z = model.whiten(&model.mean.clone()).unwrap();
        assert!(z.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn square_toy_set_whitens_to_identity_covariance() {
        let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]];
        let set = set_from_rows(&rows);
        let model = fit_whitener(&set, 2).unwrap();
        let whitened: Vec<Vec<f64>> = rows.iter().map(|r| model.whiten(r).unwrap()).collect();
        let cov = covariance(&whitened);
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov[a][b] - want).abs() < 1e-10, "cov[{a}][{b}] = {}", cov[a][b]);
            }
        }
    }

    #[test]
    fn random_fit_set_is_isotropic_and_descending() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let set = set_from_rows(&rows);
        let model = fit_whitener(&set, 8).unwrap();
        for w in model.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        // component rows orthonormal
        for a in 0..8 {
            for b in 0..8 {
                let dot: f64 = (0..16).map(|j| model.components[(a, j)] * model.components[(b, j)]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
        let whitened: Vec<Vec<f64>> = rows.iter().map(|r| model.whiten(r).unwrap()).collect();
        let cov = covariance(&whitened);
        for a in 0..8 {
            for b in 0..8 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov[a][b] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn whiten_rejects_wrong_length() {
        let set = set_from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let model = fit_whitener(&set, 1).unwrap();
        assert!(model.whiten(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn anisotropy_reduced_by_whitening() {
        // one dominant common direction added to every firm
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = 12;
        let common: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                (0..p)
                    .map(|j| 5.0 * common[j] + rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let cosine = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mean_pairwise = |rows: &[Vec<f64>]| {
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for i in 0..rows.len() {
                for j in (i + 1)..rows.len() {
                    sum += cosine(&rows[i], &rows[j]);
                    cnt += 1;
                }
            }
            sum / cnt as f64
        };
        let before = mean_pairwise(&rows);
        let set = set_from_rows(&rows);
        let model = fit_whitener(&set, 8).unwrap();
        let whitened: Vec<Vec<f64>> = rows.iter().map(|r| model.whiten(r).unwrap()).collect();
        let after = mean_pairwise(&whitened);
        assert!(
            after < before,
            "expected mean cosine to shrink: before={before}, after={after}"
        );
    }

    #[test]
    fn model_round_trips_through_binary() {
        let set = set_from_rows(&[
            vec![0.0, 0.0, 1.0],
            vec![2.0, 0.0, -1.0],
            vec![0.0, 2.0, 0.5],
            vec![2.0, 2.0, 0.0],
        ]);
        let model = fit_whitener(&set, 2).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back.category, model.category);
        assert_eq!(back.n, model.n);
        assert_eq!(back.d, model.d);
        let z1 = model.whiten(&[1.0, 1.0, 0.3]).unwrap();
        let z2 = back.whiten(&[1.0, 1.0, 0.3]).unwrap();
        for (a, b) in z1.iter().zip(&z2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

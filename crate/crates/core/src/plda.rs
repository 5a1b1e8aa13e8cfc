//! Two-covariance PLDA: EM training, simultaneous diagonalization, latent
//! extraction and log-likelihood-ratio scoring.
//!
//! The model is `x = y + e` with `y ~ N(m, Φ_b)` and `e ~ N(0, Φ_w)`. A
//! transform `W` with `Wᵀ Φ_w W = I` and `Wᵀ Φ_b W = diag(ψ)` maps an
//! embedding to its latent `u = Wᵀ (x − m)`, so that `x = m + W⁻ᵀ u`.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::data_io::{write_atomic, EmbeddingSet};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MODEL_MAGIC: &[u8; 4] = b"MBNP";
const MODEL_VERSION: u8 = 1;
/// Ridge added to Φ_w, relative to its mean diagonal.
pub const WITHIN_RIDGE: f64 = 1e-6;

/// Latent variables, row-aligned with the segment records they came from.
pub type LatentSet = EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PldaOptions {
    pub max_iters: usize,
    /// Stop once the per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub length_normalize: bool,
}

impl Default for PldaOptions {
    fn default() -> Self {
        PldaOptions {
            max_iters: 10,
            tol: 1e-6,
            length_normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    pub within_cov: DMatrix<f64>,
    pub between_cov: DMatrix<f64>,
    pub transform: DMatrix<f64>,
    /// Between-class variances in the diagonalized space, non-increasing.
    pub psi: DVector<f64>,
    /// Centering vector of the length-normalization step, when enabled.
    pub norm_center: Option<DVector<f64>>,
}

/// Model plus the EM log-likelihood after initialization and after each iteration.
#[derive(Debug, Clone)]
pub struct PldaTraining {
    pub model: PldaModel,
    pub log_likelihood: Vec<f64>,
}

impl PldaModel {
    /// Builds a model from covariances, diagonalizing them.
    pub fn from_covariances(
        mean: DVector<f64>,
        within_cov: DMatrix<f64>,
        between_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = mean.len();
        for m in [&within_cov, &between_cov] {
            if m.shape() != (d, d) {
                return Err(Error::DimensionMismatch { expected: d, found: m.nrows() });
            }
        }
        let (transform, psi) = diagonalize(&within_cov, &between_cov)?;
        Ok(PldaModel {
            mean,
            within_cov,
            between_cov,
            transform,
            psi,
            norm_center: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn scorer(&self) -> LlrScorer {
        LlrScorer::new(self.psi.as_slice())
    }

    /// Applies the stored length normalization (if any) to a raw embedding.
    pub fn preprocess(&self, x: &mut [f64]) {
        if let Some(center) = &self.norm_center {
            length_normalize(x, center.as_slice());
        }
    }

    /// Maps a latent vector back to (preprocessed) embedding space.
    pub fn reconstruct(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let wt = self.transform.transpose();
        let lu = wt
            .lu()
            .solve(u)
            .ok_or_else(|| Error::Numerical("PLDA transform is singular".into()))?;
        Ok(&self.mean + lu)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `MBNP`, version byte, `u32` d, flag byte (bit 0: length normalization),
    /// then little-endian `f64`s: mean, Φ_w, Φ_b, W (row-major), ψ, and the
    /// normalization center when flagged.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(10 + 8 * (3 * d * d + 3 * d));
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.push(u8::from(self.norm_center.is_some()));
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        self.mean.iter().for_each(|&v| put(v));
        for m in [&self.within_cov, &self.between_cov, &self.transform] {
            for i in 0..d {
                for j in 0..d {
                    put(m[(i, j)]);
                }
            }
        }
        self.psi.iter().for_each(|&v| put(v));
        if let Some(c) = &self.norm_center {
            c.iter().for_each(|&v| put(v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse("plda model", 0, m);
        if bytes.len() < 10 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("bad magic, expected MBNP"));
        }
        if bytes[4] != MODEL_VERSION {
            return Err(bad("unsupported version"));
        }
        let d = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let has_center = match bytes[9] {
            0 => false,
            1 => true,
            _ => return Err(bad("bad flag byte")),
        };
        let count = 3 * d * d + 2 * d + if has_center { d } else { 0 };
        let body = &bytes[10..];
        if body.len() != 8 * count {
            return Err(bad("length does not match declared dimension"));
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take_vec = || DVector::from_iterator(d, vals.by_ref().take(d));
        let mean = take_vec();
        let mut take_mat = || DMatrix::from_row_iterator(d, d, vals.by_ref().take(d * d));
        let within_cov = take_mat();
        let between_cov = take_mat();
        let transform = take_mat();
        let psi = DVector::from_iterator(d, vals.by_ref().take(d));
        let norm_center = has_center.then(|| DVector::from_iterator(d, vals.by_ref().take(d)));
        Ok(PldaModel {
            mean,
            within_cov,
            between_cov,
            transform,
            psi,
            norm_center,
        })
    }
}

/// Centers `x` and rescales it to norm sqrt(d). Zero vectors stay zero.
fn length_normalize(x: &mut [f64], center: &[f64]) {
    for (v, c) in x.iter_mut().zip(center) {
        *v -= c;
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        let scale = (x.len() as f64).sqrt() / norm;
        x.iter_mut().for_each(|v| *v *= scale);
    }
}

fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        what: what.to_string(),
        smallest_eigenvalue: smallest_eigenvalue(m),
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn with_ridge(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let d = m.nrows();
    let eps = rel * m.trace() / d as f64;
    let mut r = m.clone();
    for i in 0..d {
        r[(i, i)] += eps;
    }
    r
}

/// Simultaneously diagonalizes a positive-definite `within` and a
/// positive-semidefinite `between` covariance.
///
/// Whitens `within` by its Cholesky factor and eigendecomposes the whitened
/// `between`. Returns `W` with `Wᵀ within W = I`, `Wᵀ between W = diag(ψ)`,
/// ψ sorted non-increasing and clamped at zero. Each column of `W` is signed
/// so that its largest-magnitude entry is positive.
pub fn diagonalize(within: &DMatrix<f64>, between: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = within.nrows();
    if within.shape() != (d, d) || between.shape() != (d, d) {
        return Err(Error::invalid("diagonalize expects two square matrices of equal size"));
    }
    let chol = cholesky(within, "within-class covariance")?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let mut whitened = &l_inv * between * l_inv.transpose();
    symmetrize(&mut whitened);
    let eig = SymmetricEigen::new(whitened);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let back = l_inv.transpose();
    let mut transform = DMatrix::zeros(d, d);
    let mut psi = DVector::zeros(d);
    for (col, &k) in order.iter().enumerate() {
        let mut w = &back * eig.eigenvectors.column(k);
        let pivot = w.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            w.neg_mut();
        }
        transform.set_column(col, &w);
        psi[col] = eig.eigenvalues[k].max(0.0);
    }
    Ok((transform, psi))
}

/// Per-class sufficient statistics.
struct ClassStats {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

fn class_stats(x: &DMatrix<f64>, labels: &[&str]) -> Vec<ClassStats> {
    let d = x.ncols();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_values()
        .map(|rows| {
            let mut mean = DVector::zeros(d);
            for &i in &rows {
                mean += x.row(i).transpose();
            }
            mean /= rows.len() as f64;
            let mut scatter = DMatrix::zeros(d, d);
            for &i in &rows {
                let c = x.row(i).transpose() - &mean;
                scatter.ger(1.0, &c, &c, 1.0);
            }
            ClassStats {
                count: rows.len(),
                mean,
                scatter,
            }
        })
        .collect()
}

struct EmParams {
    mean: DVector<f64>,
    within: DMatrix<f64>,
    between: DMatrix<f64>,
}

/// Posterior mean and covariance of one class centre.
type Posterior = (DVector<f64>, DMatrix<f64>);

/// Per-class-size terms: Cholesky factor and log-determinant of the marginal
/// class-mean covariance, the gain, and the posterior covariance.
struct SizeTerms {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    gain: DMatrix<f64>,
    post_cov: DMatrix<f64>,
}

fn size_terms(p: &EmParams, count: usize) -> Result<SizeTerms> {
    let marg = &p.between + &p.within / count as f64;
    let chol = cholesky(&marg, "marginal class-mean covariance")?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    // gain = Φ_b (Φ_b + Φ_w / n)⁻¹
    let gain = chol.solve(&p.between).transpose();
    let mut post_cov = &p.between - &gain * &p.between;
    symmetrize(&mut post_cov);
    Ok(SizeTerms { chol, logdet, gain, post_cov })
}

/// Exact marginal log-likelihood of the two-covariance model, together with
/// the posterior of each class centre.
fn e_step(stats: &[ClassStats], p: &EmParams) -> Result<(f64, Vec<Posterior>)> {
    let d = p.mean.len() as f64;
    let w_chol = cholesky(&p.within, "within-class covariance")?;
    let w_logdet = 2.0 * w_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    // Everything below depends on the class only through its size.
    let mut by_count: HashMap<usize, SizeTerms> = HashMap::new();
    let mut ll = 0.0;
    let mut posteriors = Vec::with_capacity(stats.len());
    for s in stats {
        let SizeTerms { chol, logdet, gain, post_cov } = match by_count.entry(s.count) {
            Entry::Occupied(e) => &*e.into_mut(),
            Entry::Vacant(e) => &*e.insert(size_terms(p, s.count)?),
        };
        let n = s.count as f64;
        let diff = &s.mean - &p.mean;
        let maha = diff.dot(&chol.solve(&diff));
        let resid = w_chol.solve(&s.scatter).trace();
        ll += -0.5 * (d * LN_2PI + logdet + maha);
        ll += -0.5 * ((n - 1.0) * d * LN_2PI + (n - 1.0) * w_logdet + d * n.ln() + resid);
        posteriors.push((&p.mean + gain * diff, post_cov.clone()));
    }
    Ok((ll, posteriors))
}

fn m_step(stats: &[ClassStats], posteriors: &[Posterior], total: usize) -> EmParams {
    let d = stats[0].mean.len();
    let s_count = stats.len() as f64;
    let mut mean = DVector::zeros(d);
    for (y, _) in posteriors {
        mean += y;
    }
    mean /= s_count;
    let mut between = DMatrix::zeros(d, d);
    let mut within = DMatrix::zeros(d, d);
    for (s, (y, c)) in stats.iter().zip(posteriors) {
        let dy = y - &mean;
        between += c;
        between.ger(1.0, &dy, &dy, 1.0);
        let n = s.count as f64;
        let r = &s.mean - y;
        within += &s.scatter;
        within.ger(n, &r, &r, 1.0);
        within += c * n;
    }
    between /= s_count;
    within /= total as f64;
    symmetrize(&mut between);
    symmetrize(&mut within);
    EmParams { mean, within, between }
}

/// Trains a PLDA model from labeled embeddings.
pub fn train_plda(train: &EmbeddingSet, opts: &PldaOptions) -> Result<PldaModel> {
    train_plda_traced(train, opts).map(|t| t.model)
}

/// As [`train_plda`], also returning the log-likelihood trace.
pub fn train_plda_traced(train: &EmbeddingSet, opts: &PldaOptions) -> Result<PldaTraining> {
    let labels = train
        .speaker_labels()
        .ok_or_else(|| Error::invalid("PLDA training requires a speaker label on every segment"))?;
    let n = train.len();
    let d = train.dim();

    let mut x = train.vectors().clone();
    let norm_center = if opts.length_normalize {
        let center = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
        let mut row = vec![0.0; d];
        for i in 0..n {
            row.iter_mut().zip(x.row(i).iter()).for_each(|(r, v)| *r = *v);
            length_normalize(&mut row, center.as_slice());
            x.row_mut(i).iter_mut().zip(&row).for_each(|(v, r)| *v = *r);
        }
        Some(center)
    } else {
        None
    };

    let stats = class_stats(&x, &labels);
    if stats.len() < 2 {
        return Err(Error::invalid(format!("PLDA needs at least 2 speakers, found {}", stats.len())));
    }
    if stats.iter().all(|s| s.count < 2) {
        return Err(Error::invalid("PLDA needs at least one speaker with 2 or more segments"));
    }
    if n <= d {
        log::warn!("PLDA training with {n} segments in dimension {d}; estimates will be poor");
    }

    let global_mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for s in &stats {
        within += &s.scatter;
        let dm = &s.mean - &global_mean;
        between.ger(1.0, &dm, &dm, 1.0);
    }
    within /= n as f64;
    between /= stats.len() as f64;
    let mut params = EmParams {
        mean: global_mean,
        within,
        between,
    };
    if Cholesky::new(params.within.clone()).is_none() {
        params.within = with_ridge(&params.within, WITHIN_RIDGE);
    }

    let (mut ll, mut post) = e_step(&stats, &params)?;
    let mut trace = vec![ll];
    for iter in 0..opts.max_iters {
        let mut next = m_step(&stats, &post, n);
        if Cholesky::new(next.within.clone()).is_none() {
            next.within = with_ridge(&next.within, WITHIN_RIDGE);
        }
        let (next_ll, next_post) = e_step(&stats, &next)?;
        params = next;
        post = next_post;
        trace.push(next_ll);
        let gain = (next_ll - ll) / n as f64;
        ll = next_ll;
        log::debug!("plda em iter {}: log-likelihood {ll:.6}", iter + 1);
        if gain.abs() < opts.tol {
            break;
        }
    }

    let within = with_ridge(&params.within, WITHIN_RIDGE);
    let (transform, psi) = diagonalize(&within, &params.between)?;
    Ok(PldaTraining {
        model: PldaModel {
            mean: params.mean,
            within_cov: within,
            between_cov: params.between,
            transform,
            psi,
            norm_center,
        },
        log_likelihood: trace,
    })
}

/// `u = Wᵀ (x − m)` for every row, after the model's preprocessing.
pub fn extract_latent(model: &PldaModel, set: &EmbeddingSet) -> Result<LatentSet> {
    let d = model.dim();
    if set.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: set.dim() });
    }
    let mut out = DMatrix::zeros(set.len(), d);
    let wt = model.transform.transpose();
    let mut row = vec![0.0; d];
    for i in 0..set.len() {
        row.iter_mut().zip(set.vectors().row(i).iter()).for_each(|(r, v)| *r = *v);
        model.preprocess(&mut row);
        let centered = DVector::from_iterator(d, row.iter().zip(model.mean.iter()).map(|(x, m)| x - m));
        out.set_row(i, &(&wt * centered).transpose());
    }
    EmbeddingSet::new(set.records().to_vec(), out)
}

/// Closed-form same-vs-different speaker log-likelihood ratio in the
/// diagonalized latent space.
///
/// Per dimension with between-class variance ψ, the same-speaker hypothesis
/// has joint covariance `[[ψ+1, ψ], [ψ, ψ+1]]` and the different-speaker one
/// `[[ψ+1, 0], [0, ψ+1]]`.
#[derive(Debug, Clone)]
pub struct LlrScorer {
    square: Vec<f64>,
    cross: Vec<f64>,
    offset: f64,
}

impl LlrScorer {
    pub fn new(psi: &[f64]) -> Self {
        let mut square = Vec::with_capacity(psi.len());
        let mut cross = Vec::with_capacity(psi.len());
        let mut offset = 0.0;
        for &p in psi {
            let same_det = 2.0 * p + 1.0;
            let diff_var = p + 1.0;
            square.push(-0.5 * (diff_var / same_det - 1.0 / diff_var));
            cross.push(p / same_det);
            offset += -0.5 * (same_det.ln() - 2.0 * diff_var.ln());
        }
        LlrScorer { square, cross, offset }
    }

    pub fn dim(&self) -> usize {
        self.square.len()
    }

    /// Scores two latent vectors; both must have the scorer's dimension.
    pub fn score_slices(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.dim());
        debug_assert_eq!(b.len(), self.dim());
        let mut s = self.offset;
        for k in 0..self.square.len() {
            s += self.square[k] * (a[k] * a[k] + b[k] * b[k]) + self.cross[k] * (a[k] * b[k]);
        }
        s
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        for v in [a, b] {
            if v.len() != self.dim() {
                return Err(Error::DimensionMismatch { expected: self.dim(), found: v.len() });
            }
        }
        Ok(self.score_slices(a, b))
    }
}

pub fn llr_score(model: &PldaModel, u1: &[f64], u2: &[f64]) -> Result<f64> {
    model.scorer().score(u1, u2)
}

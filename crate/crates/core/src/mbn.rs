//! Multilayer bootstrap network.
//!
//! Each layer is an ensemble of `V` k-centroids clusterings. A clustering
//! is "trained" by drawing `k` distinct inputs uniformly at random as its
//! centroids; an input is encoded as the one-hot index of its most similar
//! centroid. The bottom layer compares PLDA latents with the PLDA
//! log-likelihood ratio, upper layers compare sparse codes by inner product.
//! Layer widths shrink geometrically, `k_{l+1} = round(δ k_l)`, until the next
//! width would fall below a floor derived from the expected speaker count.
//!
//! Codes are kept in block-sparse form: one active index per clustering.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plda::{LatentSet, LlrScorer, PldaModel};

/// Lower bound on the top-layer width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopFloor {
    /// Class-balanced data with `speakers` speakers: floor `ceil(1.5 · speakers)`.
    Balanced { speakers: usize },
    /// Severely imbalanced data: an explicit floor, typically large (e.g. 100).
    Imbalanced { floor: usize },
}

impl TopFloor {
    pub fn value(&self) -> usize {
        match *self {
            TopFloor::Balanced { speakers } => (3 * speakers).div_ceil(2),
            TopFloor::Imbalanced { floor } => floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbnConfig {
    /// Number of clusterings per layer (V).
    pub ensemble_size: usize,
    /// Bottom-layer width.
    pub k1: usize,
    /// Width decay factor in `[0, 1)`.
    pub delta: f64,
    pub top_floor: TopFloor,
    pub seed: u64,
}

impl MbnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::invalid("ensemble size V must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if self.top_floor.value() == 0 {
            return Err(Error::invalid("top-layer floor must be positive"));
        }
        if self.k1 < self.top_floor.value() {
            return Err(Error::invalid(format!(
                "k1 = {} is below the top-layer floor {}",
                self.k1,
                self.top_floor.value()
            )));
        }
        Ok(())
    }
}

/// Layer widths for a configuration: starts at `k1` and keeps appending
/// `round(δ · k)` (halves rounded up) while that value is at least the floor
/// and still below the previous width.
pub fn plan_layers(config: &MbnConfig) -> Result<Vec<usize>> {
    config.validate()?;
    Ok(plan_from(config.k1, config.delta, config.top_floor.value()))
}

fn plan_from(k1: usize, delta: f64, floor: usize) -> Vec<usize> {
    let mut ks = vec![k1];
    loop {
        let last = *ks.last().unwrap();
        // The epsilon keeps products like 0.3 · 15 on the "half" side.
        let next = (delta * last as f64 + 0.5 + 1e-9).floor() as usize;
        if next < floor || next >= last {
            return ks;
        }
        ks.push(next);
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clustering `v` in layer `layer` (both 0-based):
/// `master XOR splitmix64(layer << 32 | v)`.
pub fn clustering_seed(master: u64, layer: usize, v: usize) -> u64 {
    master ^ splitmix64(((layer as u64) << 32) | (v as u64 & 0xFFFF_FFFF))
}

/// Concatenated one-hot code: `indices[b]` is the active unit of block `b`,
/// each block `block_width` units wide.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseCode {
    indices: Vec<u32>,
    block_width: usize,
}

/// The top-layer code of one segment.
pub type MVector = SparseCode;

impl SparseCode {
    pub fn new(indices: Vec<u32>, block_width: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= block_width) {
            return Err(Error::invalid(format!("code index {bad} outside block of width {block_width}")));
        }
        Ok(SparseCode { indices, block_width })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn blocks(&self) -> usize {
        self.indices.len()
    }

    pub fn block_width(&self) -> usize {
        self.block_width
    }

    /// Width of the dense expansion.
    pub fn width(&self) -> usize {
        self.indices.len() * self.block_width
    }

    /// Positions of the ones in the dense expansion.
    pub fn active_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices
            .iter()
            .enumerate()
            .map(move |(b, &i)| b * self.block_width + i as usize)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        for p in self.active_positions() {
            out[p] = 1.0;
        }
        out
    }

    /// Inner product of the dense expansions: the number of agreeing blocks.
    pub fn agreement(&self, other: &SparseCode) -> usize {
        agreement(&self.indices, &other.indices)
    }

    /// Cosine similarity, which for one-hot blocks is the agreeing fraction.
    pub fn cosine(&self, other: &SparseCode) -> f64 {
        self.agreement(other) as f64 / self.blocks() as f64
    }
}

#[inline]
fn agreement(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

#[derive(Debug, Clone)]
pub enum Metric {
    /// PLDA log-likelihood ratio between latent vectors.
    PldaLlr(LlrScorer),
    /// Inner product between sparse codes.
    InnerProduct,
}

/// Inputs of one layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput<'a> {
    Dense(&'a DMatrix<f64>),
    Sparse(&'a [SparseCode]),
}

impl LayerInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            LayerInput::Dense(m) => m.nrows(),
            LayerInput::Sparse(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    /// `k` centroids of dimension `dim`, row-major.
    Dense { dim: usize, values: Vec<f64> },
    /// `k` centroid codes of `blocks` blocks each, row-major.
    Sparse { blocks: usize, codes: Vec<u32> },
}

/// The `k` centroids of one clustering: the sampled input indices and a copy
/// of those inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub seed: u64,
    pub indices: Vec<usize>,
    payload: Payload,
}

impl CentroidSet {
    /// Index of the most similar centroid; the lowest index wins ties.
    fn nearest_dense(&self, z: &[f64], scorer: &LlrScorer) -> u32 {
        let Payload::Dense { dim, values } = &self.payload else {
            unreachable!("dense input on a sparse layer")
        };
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, w) in values.chunks_exact(*dim).enumerate() {
            let s = scorer.score_slices(z, w);
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        best as u32
    }

    fn nearest_sparse(&self, z: &[u32]) -> u32 {
        let Payload::Sparse { blocks, codes } = &self.payload else {
            unreachable!("sparse input on a dense layer")
        };
        let mut best = 0;
        let mut best_score = 0;
        for (j, w) in codes.chunks_exact(*blocks).enumerate() {
            let s = agreement(z, w);
            if j == 0 || s > best_score {
                best_score = s;
                best = j;
            }
        }
        best as u32
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub k: usize,
    pub metric: Metric,
    pub sets: Vec<CentroidSet>,
}

impl Layer {
    pub fn ensemble_size(&self) -> usize {
        self.sets.len()
    }

    /// Width of this layer's output.
    pub fn output_width(&self) -> usize {
        self.k * self.sets.len()
    }

    fn input_dim(&self) -> usize {
        match &self.sets[0].payload {
            Payload::Dense { dim, .. } => *dim,
            Payload::Sparse { blocks, .. } => *blocks,
        }
    }
}

/// Trains one layer: `ensemble_size` clusterings, each drawing `k` distinct
/// inputs uniformly without replacement from its own sub-seeded generator.
pub fn train_layer(
    inputs: LayerInput<'_>,
    k: usize,
    ensemble_size: usize,
    metric: Metric,
    seed: u64,
    layer_index: usize,
) -> Result<Layer> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::invalid("cannot train a layer on empty input"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("layer needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    if ensemble_size == 0 {
        return Err(Error::invalid("ensemble size must be positive"));
    }
    match (&metric, inputs) {
        (Metric::PldaLlr(s), LayerInput::Dense(m)) if s.dim() != m.ncols() => {
            return Err(Error::DimensionMismatch { expected: s.dim(), found: m.ncols() });
        }
        (Metric::PldaLlr(_), LayerInput::Sparse(_)) | (Metric::InnerProduct, LayerInput::Dense(_)) => {
            return Err(Error::invalid("metric does not match layer input kind"));
        }
        _ => {}
    }
    if let LayerInput::Sparse(codes) = inputs {
        let blocks = codes[0].blocks();
        if let Some(c) = codes.iter().find(|c| c.blocks() != blocks) {
            return Err(Error::DimensionMismatch { expected: blocks, found: c.blocks() });
        }
    }

    let sets = (0..ensemble_size)
        .into_par_iter()
        .map(|v| {
            let sub = clustering_seed(seed, layer_index, v);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
            let payload = match inputs {
                LayerInput::Dense(m) => {
                    let dim = m.ncols();
                    let mut values = Vec::with_capacity(k * dim);
                    for &i in &indices {
                        values.extend(m.row(i).iter());
                    }
                    Payload::Dense { dim, values }
                }
                LayerInput::Sparse(c) => {
                    let blocks = c[0].blocks();
                    let mut codes = Vec::with_capacity(k * blocks);
                    for &i in &indices {
                        codes.extend_from_slice(c[i].indices());
                    }
                    Payload::Sparse { blocks, codes }
                }
            };
            CentroidSet {
                seed: sub,
                indices,
                payload,
            }
        })
        .collect();
    Ok(Layer { k, metric, sets })
}

/// Encodes a dense (latent) input through a bottom layer.
pub fn encode_dense(layer: &Layer, z: &[f64]) -> Result<SparseCode> {
    let Metric::PldaLlr(scorer) = &layer.metric else {
        return Err(Error::invalid("dense input requires a PLDA-scored layer"));
    };
    if z.len() != layer.input_dim() {
        return Err(Error::DimensionMismatch { expected: layer.input_dim(), found: z.len() });
    }
    let indices = layer.sets.iter().map(|s| s.nearest_dense(z, scorer)).collect();
    Ok(SparseCode {
        indices,
        block_width: layer.k,
    })
}

/// Encodes a sparse code through an upper layer.
pub fn encode_sparse(layer: &Layer, z: &SparseCode) -> Result<SparseCode> {
    if !matches!(layer.metric, Metric::InnerProduct) {
        return Err(Error::invalid("sparse input requires an inner-product layer"));
    }
    if z.blocks() != layer.input_dim() {
        return Err(Error::DimensionMismatch { expected: layer.input_dim(), found: z.blocks() });
    }
    let indices = layer.sets.iter().map(|s| s.nearest_sparse(z.indices())).collect();
    Ok(SparseCode {
        indices,
        block_width: layer.k,
    })
}

/// Encodes every input row, in parallel; output order follows input order.
pub fn encode_all(layer: &Layer, inputs: LayerInput<'_>) -> Result<Vec<SparseCode>> {
    match inputs {
        LayerInput::Dense(m) => (0..m.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = m.row(i).iter().copied().collect();
                encode_dense(layer, &row)
            })
            .collect(),
        LayerInput::Sparse(codes) => codes.par_iter().map(|c| encode_sparse(layer, c)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct MbnModel {
    pub config: MbnConfig,
    pub layers: Vec<Layer>,
}

impl MbnModel {
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.k).collect()
    }

    /// Encodes latents through the whole stack.
    pub fn transform(&self, latents: &DMatrix<f64>) -> Result<Vec<MVector>> {
        let mut codes = encode_all(&self.layers[0], LayerInput::Dense(latents))?;
        for layer in &self.layers[1..] {
            codes = encode_all(layer, LayerInput::Sparse(&codes))?;
        }
        Ok(codes)
    }

    /// Plain-text description of the network: sizes, seeds, centroid indices.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "mbn V={} k1={} delta={} floor={} seed={}",
            c.ensemble_size,
            c.k1,
            c.delta,
            c.top_floor.value(),
            c.seed
        );
        let _ = writeln!(s, "layers {:?}", self.layer_sizes());
        for (l, layer) in self.layers.iter().enumerate() {
            for (v, set) in layer.sets.iter().enumerate() {
                let idx: Vec<String> = set.indices.iter().map(|i| i.to_string()).collect();
                let _ = writeln!(s, "layer {l} clustering {v} seed {} centroids {}", set.seed, idx.join(" "));
            }
        }
        s
    }
}

/// A trained network and the m-vectors of its training inputs.
#[derive(Debug, Clone)]
pub struct MbnFit {
    pub model: MbnModel,
    pub mvectors: Vec<MVector>,
}

/// Trains a network on one conversation's latents and returns their m-vectors.
///
/// If the conversation has fewer segments than `k1`, `k1` is clamped to the
/// segment count and the layers are re-planned.
pub fn fit_transform(latents: &LatentSet, plda: &PldaModel, config: &MbnConfig) -> Result<MbnFit> {
    config.validate()?;
    let n = latents.len();
    let floor = config.top_floor.value();
    if n < floor {
        return Err(Error::invalid(format!(
            "{n} segments is below the top-layer floor {floor}"
        )));
    }
    if latents.dim() != plda.dim() {
        return Err(Error::DimensionMismatch { expected: plda.dim(), found: latents.dim() });
    }
    let mut config = *config;
    if n < config.k1 {
        log::warn!("only {n} segments; clamping k1 from {} to {n}", config.k1);
        config.k1 = n;
    }
    let sizes = plan_from(config.k1, config.delta, floor);

    let bottom = train_layer(
        LayerInput::Dense(latents.vectors()),
        sizes[0],
        config.ensemble_size,
        Metric::PldaLlr(plda.scorer()),
        config.seed,
        0,
    )?;
    let mut codes = encode_all(&bottom, LayerInput::Dense(latents.vectors()))?;
    let mut layers = vec![bottom];
    for (l, &k) in sizes.iter().enumerate().skip(1) {
        let layer = train_layer(
            LayerInput::Sparse(&codes),
            k,
            config.ensemble_size,
            Metric::InnerProduct,
            config.seed,
            l,
        )?;
        codes = encode_all(&layer, LayerInput::Sparse(&codes))?;
        layers.push(layer);
    }
    Ok(MbnFit {
        model: MbnModel { config, layers },
        mvectors: codes,
    })
}

/// Dense matrix of m-vectors, one row each.
pub fn mvectors_to_dense(mvectors: &[MVector]) -> DMatrix<f64> {
    let width = mvectors.first().map_or(0, |m| m.width());
    let mut out = DMatrix::zeros(mvectors.len(), width);
    for (i, m) in mvectors.iter().enumerate() {
        for p in m.active_positions() {
            out[(i, p)] = 1.0;
        }
    }
    out
}

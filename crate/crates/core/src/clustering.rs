//! Average-linkage agglomerative clustering over a similarity matrix.
//!
//! Clusters are identified by their smallest member index. Each step merges
//! the pair with the highest average pairwise similarity; equal scores are
//! resolved by the lower smallest-member index, then by the lower index of the
//! other cluster. Linkages are kept as pairwise similarity sums so a merge
//! updates them in O(n), and candidate pairs sit in a max-heap with lazy
//! invalidation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use crate::data_io::{Annotation, SegmentRecord};
use crate::error::{Error, Result};
use crate::mbn::MVector;
use crate::metrics::{der, DerBreakdown, DerOptions};
use crate::plda::LlrScorer;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Cosine,
    PldaLlr,
}

/// Symmetric pairwise similarities. The diagonal is never used.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    kind: SimilarityKind,
}

impl SimilarityMatrix {
    /// Wraps row-major values, checking symmetry and (for cosine) range.
    pub fn new(n: usize, values: Vec<f64>, kind: SimilarityKind) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, found: values.len() });
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() {
                    return Err(Error::invalid(format!("non-finite similarity at ({i}, {j})")));
                }
                if i < j && (v - values[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::invalid(format!("similarity matrix not symmetric at ({i}, {j})")));
                }
                if kind == SimilarityKind::Cosine && i != j && v.abs() > 1.0 + 1e-12 {
                    return Err(Error::invalid(format!("cosine similarity {v} out of range at ({i}, {j})")));
                }
            }
        }
        Ok(SimilarityMatrix { n, values, kind })
    }

    pub fn from_fn(n: usize, kind: SimilarityKind, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self::new(n, values, kind)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Restriction to the given rows/columns, in the given order.
    pub fn subset(&self, idx: &[usize]) -> SimilarityMatrix {
        let m = idx.len();
        let mut values = Vec::with_capacity(m * m);
        for &i in idx {
            for &j in idx {
                values.push(self.get(i, j));
            }
        }
        SimilarityMatrix { n: m, values, kind: self.kind }
    }
}

/// Cosine similarity between the rows of `vectors`.
pub fn cosine_matrix(vectors: &DMatrix<f64>) -> Result<SimilarityMatrix> {
    let n = vectors.nrows();
    let sq: Vec<f64> = vectors.row_iter().map(|r| r.norm_squared()).collect();
    if let Some(i) = sq.iter().position(|&s| s == 0.0) {
        return Err(Error::invalid(format!("row {i} has zero norm")));
    }
    let gram = vectors * vectors.transpose();
    SimilarityMatrix::from_fn(n, SimilarityKind::Cosine, |i, j| {
        (gram[(i, j)] / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0)
    })
}

/// Cosine similarity between m-vectors, computed on their sparse form.
pub fn mvector_cosine_matrix(mvectors: &[MVector]) -> Result<SimilarityMatrix> {
    if let Some(m) = mvectors.first() {
        if let Some(bad) = mvectors.iter().find(|v| v.blocks() != m.blocks()) {
            return Err(Error::DimensionMismatch { expected: m.blocks(), found: bad.blocks() });
        }
        if m.blocks() == 0 {
            return Err(Error::invalid("m-vectors have no blocks"));
        }
    }
    SimilarityMatrix::from_fn(mvectors.len(), SimilarityKind::Cosine, |i, j| {
        mvectors[i].cosine(&mvectors[j])
    })
}

/// PLDA log-likelihood ratios between latent rows (the no-network baseline).
pub fn plda_llr_matrix(latents: &DMatrix<f64>, scorer: &LlrScorer) -> Result<SimilarityMatrix> {
    if latents.ncols() != scorer.dim() {
        return Err(Error::DimensionMismatch { expected: scorer.dim(), found: latents.ncols() });
    }
    let rows: Vec<Vec<f64>> = latents.row_iter().map(|r| r.iter().copied().collect()).collect();
    SimilarityMatrix::from_fn(latents.nrows(), SimilarityKind::PldaLlr, |i, j| {
        scorer.score_slices(&rows[i], &rows[j])
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop at exactly this many clusters.
    Oracle(usize),
    /// Merge while the best average linkage is at least `tau`.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl ClusterAssignment {
    /// Relabels clusters in order of first appearance.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect();
        ClusterAssignment {
            labels,
            n_clusters: map.len(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// Hypothesis speaker names, `spk{label}`.
    pub fn speaker_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| format!("spk{l}")).collect()
    }

    /// Hypothesis annotation from segment timing.
    pub fn to_annotation(&self, records: &[SegmentRecord]) -> Result<Annotation> {
        Annotation::from_segments(records, &self.speaker_names())
    }
}

/// One executed merge. `keep` and `absorbed` are the smallest member
/// indices of the two clusters; the merged cluster is identified by `keep`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub keep: usize,
    pub absorbed: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    lo: usize,
    hi: usize,
    lo_version: u32,
    hi_version: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    /// Greater means merged earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.lo.cmp(&self.lo))
            .then_with(|| other.hi.cmp(&self.hi))
    }
}

/// Runs the greedy merge sequence, handing each proposed merge to `accept`;
/// stops when it returns false or a single cluster remains.
fn merge_loop(sim: &SimilarityMatrix, mut accept: impl FnMut(&Merge, usize) -> bool) -> Vec<Merge> {
    let n = sim.len();
    let mut sums = sim.values.clone();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut version = vec![0u32; n];
    let mut heap = BinaryHeap::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            heap.push(Candidate {
                score: sim.get(i, j),
                lo: i,
                hi: j,
                lo_version: 0,
                hi_version: 0,
            });
        }
    }

    let mut merges = Vec::new();
    let mut clusters = n;
    while clusters > 1 {
        let Some(c) = heap.pop() else { break };
        if !(active[c.lo] && active[c.hi] && version[c.lo] == c.lo_version && version[c.hi] == c.hi_version) {
            continue;
        }
        let merge = Merge {
            keep: c.lo,
            absorbed: c.hi,
            score: c.score,
        };
        if !accept(&merge, clusters) {
            break;
        }
        let (a, b) = (c.lo, c.hi);
        active[b] = false;
        size[a] += size[b];
        version[a] += 1;
        clusters -= 1;
        merges.push(merge);
        for other in 0..n {
            if !active[other] || other == a {
                continue;
            }
            let s = sums[a * n + other] + sums[b * n + other];
            sums[a * n + other] = s;
            sums[other * n + a] = s;
            let (lo, hi) = if a < other { (a, other) } else { (other, a) };
            heap.push(Candidate {
                score: s / (size[a] * size[other]) as f64,
                lo,
                hi,
                lo_version: version[lo],
                hi_version: version[hi],
            });
        }
    }
    merges
}

fn labels_after(n: usize, merges: &[Merge]) -> ClusterAssignment {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for m in merges {
        let a = find(&mut parent, m.keep);
        let b = find(&mut parent, m.absorbed);
        parent[b] = a;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    ClusterAssignment::from_labels(&roots)
}

/// The full merge sequence, down to a single cluster.
pub fn dendrogram(sim: &SimilarityMatrix) -> Vec<Merge> {
    merge_loop(sim, |_, _| true)
}

/// Cuts a merge sequence as `ahc` with the same stop rule would.
pub fn cut(n: usize, merges: &[Merge], stop: StopRule) -> Result<ClusterAssignment> {
    let executed = match stop {
        StopRule::Oracle(c) => {
            if c == 0 || c > n {
                return Err(Error::invalid(format!("oracle cluster count {c} not in 1..={n}")));
            }
            (n - c).min(merges.len())
        }
        StopRule::Threshold(tau) => merges.iter().take_while(|m| m.score >= tau).count(),
    };
    Ok(labels_after(n, &merges[..executed]))
}

pub fn ahc(sim: &SimilarityMatrix, stop: StopRule) -> Result<ClusterAssignment> {
    let n = sim.len();
    if n == 0 {
        return Err(Error::invalid("cannot cluster an empty set"));
    }
    let merges = match stop {
        StopRule::Oracle(c) => {
            if c == 0 || c > n {
                return Err(Error::invalid(format!("oracle cluster count {c} not in 1..={n}")));
            }
            merge_loop(sim, |_, clusters| clusters > c)
        }
        StopRule::Threshold(tau) => merge_loop(sim, |m, _| m.score >= tau),
    };
    Ok(labels_after(n, &merges))
}

/// Inclusive grid `lo, lo + step, ..., hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid {
            lo: -0.3,
            hi: 0.3,
            step: 0.01,
        }
    }
}

impl ThresholdGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.lo < self.hi) || !(self.step > 0.0) {
            return Err(Error::invalid(format!(
                "threshold grid needs lo < hi and step > 0, got [{}, {}] step {}",
                self.lo, self.hi, self.step
            )));
        }
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        Ok((0..=count)
            .map(|i| {
                let v = self.lo + i as f64 * self.step;
                // Snap away accumulated binary noise (e.g. 0.30000000000000004).
                (v * 1e9).round() / 1e9
            })
            .collect())
    }
}

/// One development conversation for threshold calibration.
#[derive(Debug, Clone)]
pub struct DevConversation {
    pub sim: SimilarityMatrix,
    pub reference: Annotation,
    pub records: Vec<SegmentRecord>,
}

/// Picks the grid threshold with the lowest pooled dev DER (errors summed over
/// conversations, divided by total scored time); ties go to the smallest
/// threshold.
pub fn calibrate_threshold<F>(dev: &[DevConversation], grid: &ThresholdGrid, mut scorer: F) -> Result<f64>
where
    F: FnMut(&DevConversation, &ClusterAssignment) -> Result<DerBreakdown>,
{
    if dev.is_empty() {
        return Err(Error::invalid("threshold calibration needs at least one dev conversation"));
    }
    let taus = grid.values()?;
    let trees: Vec<Vec<Merge>> = dev.iter().map(|c| dendrogram(&c.sim)).collect();
    let mut best: Option<(f64, f64)> = None;
    for &tau in &taus {
        let mut errors = 0.0;
        let mut scored = 0.0;
        for (conv, tree) in dev.iter().zip(&trees) {
            let assignment = cut(conv.sim.len(), tree, StopRule::Threshold(tau))?;
            let b = scorer(conv, &assignment)?;
            errors += b.der * b.scored_time;
            scored += b.scored_time;
        }
        let pooled = if scored > 0.0 { errors / scored } else { 0.0 };
        log::debug!("calibration tau={tau} der={pooled}");
        if best.is_none_or(|(_, d)| pooled < d) {
            best = Some((tau, pooled));
        }
    }
    Ok(best.expect("grid is non-empty").0)
}

/// [`calibrate_threshold`] scored with [`der`] against each conversation's reference.
pub fn calibrate_threshold_der(dev: &[DevConversation], grid: &ThresholdGrid, opts: &DerOptions) -> Result<f64> {
    calibrate_threshold(dev, grid, |conv, assignment| {
        let hyp = assignment.to_annotation(&conv.records)?;
        der(&conv.reference, &hyp, opts)
    })
}

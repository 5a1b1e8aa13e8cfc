use std::collections::HashMap;

use crate::data_io::Annotation;
use crate::error::{Error, Result};

/// Above this many speakers on the smaller side, the Hungarian solver is used
/// instead of exact subset enumeration.
pub const EXHAUSTIVE_LIMIT: usize = 8;

/// One-to-one assignment of rows to columns maximizing total weight.
/// Weights must be non-negative; `result[row]` is the matched column.
pub fn assign_max_overlap(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows.min(cols) <= EXHAUSTIVE_LIMIT {
        subset_dp(weights, rows, cols)
    } else {
        hungarian_max(weights)
    }
}

/// Exact maximum-weight matching by dynamic programming over subsets of the
/// smaller side.
fn subset_dp(weights: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let transpose = rows > cols;
    let (small, large) = if transpose { (cols, rows) } else { (rows, cols) };
    let w = |s: usize, l: usize| if transpose { weights[l][s] } else { weights[s][l] };
    let states = 1usize << small;
    let mut best = vec![f64::NEG_INFINITY; states];
    best[0] = 0.0;
    // choice[l][mask]: small index matched to large item l on the way to mask.
    let mut choice = vec![vec![None; states]; large];
    for l in 0..large {
        let prev = best.clone();
        for mask in 0..states {
            if prev[mask] == f64::NEG_INFINITY {
                continue;
            }
            for s in 0..small {
                if mask & (1 << s) != 0 {
                    continue;
                }
                let next = mask | (1 << s);
                let v = prev[mask] + w(s, l);
                if v > best[next] {
                    best[next] = v;
                    choice[l][next] = Some(s);
                }
            }
        }
    }
    let mut mask = (0..states)
        .fold((0, f64::NEG_INFINITY), |acc, m| if best[m] > acc.1 { (m, best[m]) } else { acc })
        .0;
    let mut small_to_large = vec![None; small];
    for l in (0..large).rev() {
        // No recorded choice means `mask`'s value was carried over from l - 1.
        if let Some(s) = choice[l][mask] {
            small_to_large[s] = Some(l);
            mask &= !(1 << s);
        }
    }
    if transpose {
        let mut out = vec![None; rows];
        for (s, l) in small_to_large.iter().enumerate() {
            if let Some(l) = l {
                out[*l] = Some(s);
            }
        }
        out
    } else {
        small_to_large
    }
}

/// Rectangular maximum-weight assignment (Kuhn–Munkres with potentials),
/// O(n³) in the larger dimension.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let top = weights.iter().flatten().copied().fold(0.0_f64, f64::max);
    // Square cost matrix; padding cells cost `top` (weight 0).
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            top - weights[i][j]
        } else {
            top
        }
    };
    // 1-based arrays, column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Reference-to-hypothesis speaker pairs with positive overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerMapping {
    /// `(recording_id, reference speaker, hypothesis speaker, overlap seconds)`.
    pub pairs: Vec<(String, String, String, f64)>,
    pub total_overlap: f64,
}

impl SpeakerMapping {
    pub fn hypothesis_for(&self, recording_id: &str, reference_speaker: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(r, s, _, _)| r == recording_id && s == reference_speaker)
            .map(|(_, _, h, _)| h.as_str())
    }
}

/// Total overlapped time between two sets of turns of one recording.
fn overlap_seconds(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for &(s0, e0) in a {
        for &(s1, e1) in b {
            total += (e0.min(e1) - s0.max(s1)).max(0.0);
        }
    }
    total
}

/// Per-speaker turns of one recording, unioned and sorted.
pub(crate) fn speaker_turns(ann: &Annotation, recording_id: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut order: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for e in ann.entries.iter().filter(|e| e.recording_id == recording_id) {
        let p = *pos.entry(e.speaker.as_str()).or_insert_with(|| {
            order.push((e.speaker.clone(), Vec::new()));
            order.len() - 1
        });
        order[p].1.push((e.start, e.end()));
    }
    for (_, turns) in &mut order {
        turns.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(turns.len());
        for &(s, e) in turns.iter() {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        *turns = merged;
    }
    order
}

/// Optimal one-to-one speaker mapping per recording, maximizing overlapped time.
pub fn optimal_speaker_mapping(reference: &Annotation, hypothesis: &Annotation) -> Result<SpeakerMapping> {
    if reference.is_empty() || hypothesis.is_empty() {
        return Err(Error::invalid("speaker mapping needs at least one speaker on each side"));
    }
    let mut pairs = Vec::new();
    let mut total_overlap = 0.0;
    for rec in reference.recording_ids() {
        let r = speaker_turns(reference, rec);
        let h = speaker_turns(hypothesis, rec);
        if h.is_empty() {
            continue;
        }
        let weights: Vec<Vec<f64>> = r
            .iter()
            .map(|(_, rt)| h.iter().map(|(_, ht)| overlap_seconds(rt, ht)).collect())
            .collect();
        for (i, m) in assign_max_overlap(&weights).into_iter().enumerate() {
            if let Some(j) = m {
                if weights[i][j] > 0.0 {
                    total_overlap += weights[i][j];
                    pairs.push((rec.to_string(), r[i].0.clone(), h[j].0.clone(), weights[i][j]));
                }
            }
        }
    }
    Ok(SpeakerMapping { pairs, total_overlap })
}

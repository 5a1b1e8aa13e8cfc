//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use mvector::{Annotation, SimilarityMatrix, StopRule};

/// Average-linkage AHC recomputing every cluster-pair linkage from scratch at
/// each step. Clusters are named by their smallest member; ties go to the
/// lexicographically smallest pair of names. Returns labels canonical by
/// first appearance.
pub fn naive_ahc(sim: &SimilarityMatrix, stop: StopRule) -> Vec<usize> {
    let n = sim.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        if clusters.len() <= 1 {
            break;
        }
        if let StopRule::Oracle(c) = stop {
            if clusters.len() <= c {
                break;
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut sum = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += sim.get(i, j);
                    }
                }
                let score = sum / (clusters[a].len() * clusters[b].len()) as f64;
                let better = match best {
                    None => true,
                    Some((s, ba, bb)) => {
                        let key = (clusters[a][0].min(clusters[b][0]), clusters[a][0].max(clusters[b][0]));
                        let bkey = (clusters[ba][0].min(clusters[bb][0]), clusters[ba][0].max(clusters[bb][0]));
                        score > s || (score == s && key < bkey)
                    }
                };
                if better {
                    best = Some((score, a, b));
                }
            }
        }
        let (score, a, b) = best.unwrap();
        if let StopRule::Threshold(tau) = stop {
            if score < tau {
                break;
            }
        }
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
    }
    let mut raw = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            raw[i] = c;
        }
    }
    canonical(&raw)
}

pub fn canonical(raw: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    raw.iter()
        .map(|r| match seen.iter().position(|s| s == r) {
            Some(p) => p,
            None => {
                seen.push(*r);
                seen.len() - 1
            }
        })
        .collect()
}

/// Best one-to-one assignment by enumerating all injective maps of the
/// smaller side.
pub fn brute_force_assignment(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    let cols = w.first().map_or(0, |r| r.len());
    fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == w.len() {
            *best = best.max(acc);
            return;
        }
        // Row left unmatched.
        go(w, row + 1, used, acc, best);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(w, row + 1, used, acc + w[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = 0.0;
    if rows > 0 && cols > 0 {
        go(w, 0, &mut vec![false; cols], 0.0, &mut best);
    }
    best
}

/// Frame-level DER: reference and hypothesis sampled at frame centres of
/// `frame` seconds. Returns (der fraction, scored seconds).
pub fn frame_der(reference: &Annotation, hypothesis: &Annotation, collar: f64, skip_overlap: bool, frame: f64) -> (f64, f64) {
    let mut errors = 0.0;
    let mut scored = 0.0;
    for rec in reference.recording_ids() {
        let active = |ann: &Annotation, spk: &str, t: f64| {
            ann.entries
                .iter()
                .any(|e| e.recording_id == rec && e.speaker == spk && e.start <= t && t < e.end())
        };
        let refs: Vec<String> = reference.speakers(rec).iter().map(|s| s.to_string()).collect();
        let hyps: Vec<String> = hypothesis.speakers(rec).iter().map(|s| s.to_string()).collect();
        // Collars sit on the boundaries of each speaker's merged turns.
        let mut boundaries: Vec<f64> = Vec::new();
        for spk in &refs {
            let mut turns: Vec<(f64, f64)> = reference
                .entries
                .iter()
                .filter(|e| e.recording_id == rec && &e.speaker == spk)
                .map(|e| (e.start, e.end()))
                .collect();
            turns.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut merged: Vec<(f64, f64)> = Vec::new();
            for (s, e) in turns {
                match merged.last_mut() {
                    Some(last) if s <= last.1 => last.1 = last.1.max(e),
                    _ => merged.push((s, e)),
                }
            }
            boundaries.extend(merged.iter().flat_map(|&(s, e)| [s, e]));
        }
        let end = reference
            .entries
            .iter()
            .chain(hypothesis.entries.iter())
            .filter(|e| e.recording_id == rec)
            .map(|e| e.end())
            .fold(0.0, f64::max);
        let frames = (end / frame).ceil() as usize + 1;
        // Frame activity tables, then mapping, then error counts.
        let mut table = Vec::new();
        for k in 0..frames {
            let t = (k as f64 + 0.5) * frame;
            if boundaries.iter().any(|&b| (t - b).abs() < collar) {
                continue;
            }
            let r: Vec<usize> = (0..refs.len()).filter(|&i| active(reference, &refs[i], t)).collect();
            if skip_overlap && r.len() > 1 {
                continue;
            }
            let h: Vec<usize> = (0..hyps.len()).filter(|&j| active(hypothesis, &hyps[j], t)).collect();
            table.push((r, h));
        }
        let mut overlap = vec![vec![0.0; hyps.len()]; refs.len()];
        for (r, h) in &table {
            for &i in r {
                for &j in h {
                    overlap[i][j] += frame;
                }
            }
        }
        let mapping = best_mapping(&overlap);
        for (r, h) in &table {
            let nr = r.len() as f64;
            let nh = h.len() as f64;
            let correct = r.iter().filter(|&&i| mapping[i].is_some_and(|j| h.contains(&j))).count() as f64;
            scored += frame * nr;
            errors += frame * (nr.max(nh) - correct);
        }
    }
    (errors / scored, scored)
}

/// Exhaustive optimal mapping (rows to columns).
fn best_mapping(w: &[Vec<f64>]) -> Vec<Option<usize>> {
    fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, acc: f64, best: &mut (f64, Vec<Option<usize>>)) {
        if row == w.len() {
            if acc > best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        cur[row] = None;
        go(w, row + 1, used, cur, acc, best);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                cur[row] = Some(c);
                go(w, row + 1, used, cur, acc + w[row][c], best);
                used[c] = false;
            }
        }
        cur[row] = None;
    }
    let cols = w.first().map_or(0, |r| r.len());
    let mut best = (-1.0, vec![None; w.len()]);
    go(w, 0, &mut vec![false; cols], &mut vec![None; w.len()], 0.0, &mut best);
    best.1
}

mod common;

use mvector::clustering::{ahc, cosine_matrix, cut, dendrogram, mvector_cosine_matrix};
use mvector::data_io::{
    decode_embeddings_binary, embeddings_to_csv, encode_embeddings_binary, parse_embeddings_csv, parse_rttm,
    rttm_to_string,
};
use mvector::mbn::{fit_transform, plan_layers, SparseCode};
use mvector::metrics::{assign_max_overlap, der, dt_score, hungarian_max, pca_project};
use mvector::plda::{extract_latent, llr_score, train_plda_traced};
use mvector::{
    Annotation, AnnotationEntry, DerOptions, EmbeddingSet, MbnConfig, PldaModel, PldaOptions, SegmentRecord,
    SimilarityKind, SimilarityMatrix, StopRule, TopFloor,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn embedding_set() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..6, 0usize..8).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec((0u32..3, 0.0f64..1e4, 1e-3f64..10.0, prop::option::of("[a-z]{1,4}")), n),
            prop::collection::vec(-1e6f64..1e6, n * d),
        )
            .prop_map(move |(meta, values)| {
                let records = meta
                    .into_iter()
                    .enumerate()
                    .map(|(i, (rec, start, dur, spk))| SegmentRecord::new(format!("rec{rec}"), format!("s{i}"), start, dur, spk))
                    .collect();
                EmbeddingSet::new(records, DMatrix::from_row_slice(n, d, &values)).unwrap()
            })
    })
}

/// Symmetric similarities on a 1/8 grid, so linkage sums are exact.
fn grid_similarity(max_n: usize) -> impl Strategy<Value = SimilarityMatrix> {
    (1..=max_n, 1i32..40).prop_flat_map(|(n, range)| {
        prop::collection::vec(-range..=range, n * (n - 1) / 2).prop_map(move |upper| {
            let mut values = vec![0.0; n * n];
            let mut k = 0;
            for i in 0..n {
                values[i * n + i] = range as f64 / 8.0;
                for j in i + 1..n {
                    values[i * n + j] = upper[k] as f64 / 8.0;
                    values[j * n + i] = upper[k] as f64 / 8.0;
                    k += 1;
                }
            }
            SimilarityMatrix::new(n, values, SimilarityKind::PldaLlr).unwrap()
        })
    })
}

/// Random turns; with `grid`, every boundary is a multiple of 10 ms.
fn annotation(speakers: &'static [&'static str], grid: bool, turns: std::ops::Range<usize>) -> impl Strategy<Value = Annotation> {
    prop::collection::vec((0usize..speakers.len(), 0.0f64..90.0, 0.5f64..8.0), turns).prop_map(move |turns| {
        let q = |t: f64| if grid { (t * 100.0).round() / 100.0 } else { t };
        Annotation::new(
            turns
                .into_iter()
                .map(|(s, start, dur)| AnnotationEntry::new("rec", q(start), q(dur), speakers[s]))
                .collect(),
        )
        .unwrap()
    })
}

/// Consecutive reference turns with occasional pauses, like a real conversation.
fn sequential_annotation(speakers: &'static [&'static str]) -> impl Strategy<Value = Annotation> {
    prop::collection::vec((0usize..speakers.len(), 0.5f64..8.0, prop::option::weighted(0.3, 0.05f64..2.0)), 12..30).prop_map(move |turns| {
        let mut t = 0.0;
        let mut entries = Vec::new();
        for (s, dur, pause) in turns {
            t += pause.unwrap_or(0.0);
            entries.push(AnnotationEntry::new("rec", t, dur, speakers[s]));
            t += dur;
        }
        Annotation::new(entries).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_round_trip_through_both_formats(set in embedding_set()) {
        prop_assert_eq!(&parse_embeddings_csv(&embeddings_to_csv(&set)).unwrap(), &set);
        prop_assert_eq!(&decode_embeddings_binary(&encode_embeddings_binary(&set)).unwrap(), &set);
    }

    #[test]
    fn rttm_round_trip(turns in prop::collection::vec((0u32..3, 0u32..100_000, 1u32..5_000, "[A-Za-z0-9_]{1,6}"), 0..12)) {
        let ann = Annotation::new(
            turns.iter().map(|(r, s, d, spk)| AnnotationEntry::new(format!("r{r}"), *s as f64 / 100.0, *d as f64 / 100.0, spk.clone())).collect(),
        ).unwrap();
        let text = rttm_to_string(&ann);
        let parsed = parse_rttm(&text).unwrap();
        prop_assert_eq!(parsed.skipped, 0);
        prop_assert_eq!(parsed.annotation.len(), ann.len());
        for (a, b) in parsed.annotation.entries.iter().zip(&ann.entries) {
            prop_assert_eq!(&a.recording_id, &b.recording_id);
            prop_assert_eq!(&a.speaker, &b.speaker);
            prop_assert!((a.start - b.start).abs() < 1e-9 && (a.duration - b.duration).abs() < 1e-9);
        }
        prop_assert_eq!(rttm_to_string(&parsed.annotation), text);
    }

    #[test]
    fn ahc_matches_naive_reference(sim in grid_similarity(14), c in 1usize..14, tau in -40i32..40) {
        let n = sim.len();
        let c = c.min(n);
        let oracle = ahc(&sim, StopRule::Oracle(c)).unwrap();
        prop_assert_eq!(oracle.labels(), &common::naive_ahc(&sim, StopRule::Oracle(c))[..]);
        prop_assert_eq!(oracle.n_clusters(), c);
        let stop = StopRule::Threshold(tau as f64 / 8.0);
        let thresholded = ahc(&sim, stop).unwrap();
        prop_assert_eq!(thresholded.labels(), &common::naive_ahc(&sim, stop)[..]);
        // The dendrogram cut agrees with direct clustering.
        let tree = dendrogram(&sim);
        prop_assert_eq!(&cut(n, &tree, stop).unwrap(), &ahc(&sim, stop).unwrap());
    }

    #[test]
    fn lower_threshold_never_gives_more_clusters(sim in grid_similarity(12), a in -40i32..40, b in -40i32..40) {
        let (lo, hi) = (a.min(b) as f64 / 8.0, a.max(b) as f64 / 8.0);
        let n_lo = ahc(&sim, StopRule::Threshold(lo)).unwrap().n_clusters();
        let n_hi = ahc(&sim, StopRule::Threshold(hi)).unwrap().n_clusters();
        prop_assert!(n_lo <= n_hi);
    }

    #[test]
    fn partition_is_permutation_invariant(points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..12), c in 1usize..6, shift in 0usize..12) {
        let n = points.len();
        let c = c.min(n);
        let x = DMatrix::from_fn(n, 3, |i, j| points[i][j] + if j == 0 { 11.0 } else { 0.0 });
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let px = DMatrix::from_fn(n, 3, |i, j| x[(perm[i], j)]);
        let a = ahc(&cosine_matrix(&x).unwrap(), StopRule::Oracle(c)).unwrap();
        let b = ahc(&cosine_matrix(&px).unwrap(), StopRule::Oracle(c)).unwrap();
        // Same partition: i ~ j in a iff perm⁻¹(i) ~ perm⁻¹(j) in b.
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(
                    b.labels()[i] == b.labels()[j],
                    a.labels()[perm[i]] == a.labels()[perm[j]]
                );
            }
        }
    }

    #[test]
    fn der_matches_frame_scorer_exactly_on_frame_grid(reference in annotation(&["a", "b", "c"], true, 6..16), hypothesis in annotation(&["x", "y", "z", "w"], true, 6..16), collar in prop::sample::select(vec![0.0, 0.25]), skip in any::<bool>()) {
        let opts = DerOptions { collar, skip_overlap: skip };
        if let Ok(exact) = der(&reference, &hypothesis, &opts) {
            let (frame, scored) = common::frame_der(&reference, &hypothesis, collar, skip, 0.01);
            prop_assert!((exact.der - frame).abs() < 1e-9, "interval {} frame {}", exact.der, frame);
            prop_assert!((exact.scored_time - scored).abs() < 1e-9);
            prop_assert!((exact.der - exact.missed_speech - exact.false_alarm - exact.speaker_error).abs() < 1e-12);
        }
    }

    #[test]
    fn der_matches_frame_scorer(reference in sequential_annotation(&["a", "b", "c"]), hypothesis in annotation(&["x", "y", "z", "w"], false, 12..30), collar in prop::sample::select(vec![0.0, 0.25]), skip in any::<bool>()) {
        let opts = DerOptions { collar, skip_overlap: skip };
        if let Ok(exact) = der(&reference, &hypothesis, &opts) {
            // Each boundary contributes up to half a frame of quantization
            // error, so short references are left to the exact test above.
            prop_assume!(exact.scored_time >= 30.0);
            let (frame, _) = common::frame_der(&reference, &hypothesis, collar, skip, 0.01);
            prop_assert!((exact.der - frame).abs() < 0.005, "interval {} frame {}", exact.der, frame);
        }
    }

    #[test]
    fn assignment_is_optimal(w in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 6), 5)) {
        let best = common::brute_force_assignment(&w);
        let total = |m: Vec<Option<usize>>| m.iter().enumerate().filter_map(|(i, c)| c.map(|c| w[i][c])).sum::<f64>();
        prop_assert!((total(assign_max_overlap(&w)) - best).abs() < 1e-9);
        prop_assert!((total(hungarian_max(&w)) - best).abs() < 1e-9);
        let t: Vec<Vec<f64>> = (0..6).map(|j| (0..5).map(|i| w[i][j]).collect()).collect();
        prop_assert!((total_t(&t, hungarian_max(&t)) - best).abs() < 1e-9);
    }

    #[test]
    fn sparse_code_cosine_is_agreement_fraction(a in prop::collection::vec(0u32..4, 1..40), seed in any::<u64>()) {
        let b: Vec<u32> = a.iter().enumerate().map(|(i, &x)| if (seed >> (i % 64)) & 1 == 1 { x } else { (x + 1) % 4 }).collect();
        let ca = SparseCode::new(a.clone(), 4).unwrap();
        let cb = SparseCode::new(b.clone(), 4).unwrap();
        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        prop_assert_eq!(ca.agreement(&cb), agree);
        prop_assert_eq!(ca.cosine(&cb), agree as f64 / a.len() as f64);
        let dense_a = DVector::from_vec(ca.to_dense());
        let dense_b = DVector::from_vec(cb.to_dense());
        prop_assert_eq!(dense_a.dot(&dense_b), agree as f64);
        prop_assert_eq!(dense_a.norm_squared(), a.len() as f64);
    }

    #[test]
    fn layer_plans_shrink_strictly_above_the_floor(k1 in 1usize..500, delta in 0.0f64..0.99, floor in 1usize..60) {
        let cfg = MbnConfig { ensemble_size: 1, k1, delta, top_floor: TopFloor::Imbalanced { floor }, seed: 0 };
        match plan_layers(&cfg) {
            Ok(sizes) => {
                prop_assert_eq!(sizes[0], k1);
                prop_assert!(sizes.windows(2).all(|w| w[1] < w[0]));
                prop_assert!(sizes.iter().all(|&k| k >= floor));
                let next = ((delta * *sizes.last().unwrap() as f64) + 0.5 + 1e-9).floor() as usize;
                prop_assert!(next < floor || next >= *sizes.last().unwrap());
            }
            Err(_) => prop_assert!(k1 < floor),
        }
    }

    #[test]
    fn dt_invariant_under_invertible_maps(points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 9), m in prop::collection::vec(-2.0f64..2.0, 4)) {
        let a = DMatrix::from_row_slice(2, 2, &m);
        prop_assume!(a.determinant().abs() > 0.2);
        // Three classes of three points, with offset class centres.
        let centres = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
        let x = DMatrix::from_fn(9, 2, |i, j| points[i][j] + centres[i / 3][j]);
        let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
        let base = dt_score(&x, &labels);
        // The 1e-10 ridge shifts DT by about 1e-10 · condition; keep that
        // far below the tolerance on both sides of the map.
        let mapped = dt_score(&(&x * a.transpose()), &labels);
        prop_assume!(base.as_ref().is_ok_and(|d| d.condition < 1e3));
        prop_assume!(mapped.as_ref().is_ok_and(|d| d.condition < 1e3));
        let (base, mapped) = (base.unwrap().value, mapped.unwrap().value);
        prop_assert!((base - mapped).abs() <= 1e-6 * base.max(1.0), "{base} {mapped}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_columns_uncorrelated_and_residual_matches_spectrum(values in prop::collection::vec(-10.0f64..10.0, 40), k in 1usize..4) {
        let x = DMatrix::from_row_slice(8, 5, &values);
        let p = pca_project(&x, k).unwrap();
        let n = 8.0;
        let cov = p.coords.transpose() * &p.coords / n;
        let scale = cov.diagonal().amax().max(1e-300);
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    prop_assert!(cov[(i, j)].abs() < 1e-8 * scale);
                }
            }
        }
        let mean = DVector::from_iterator(5, x.column_iter().map(|c| c.mean()));
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let residual = (&centered - &p.coords * p.components.transpose()).norm_squared();
        let discarded: f64 = p.eigenvalues[k..].iter().sum();
        prop_assert!((residual - n * discarded).abs() < 1e-8 * centered.norm_squared().max(1.0));
    }
}

fn total_t(w: &[Vec<f64>], m: Vec<Option<usize>>) -> f64 {
    m.iter().enumerate().filter_map(|(i, c)| c.map(|c| w[i][c])).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn em_log_likelihood_never_decreases(seed in any::<u64>(), speakers in 3usize..12, per in 2usize..6) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let n = speakers * per;
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        let means: Vec<Vec<f64>> = (0..speakers).map(|_| (0..d).map(|_| 2.0 * g()).collect()).collect();
        let x = DMatrix::from_fn(n, d, |i, j| means[i / per][j]);
        let noise = DMatrix::from_fn(n, d, |_, _| g());
        let records = (0..n).map(|i| SegmentRecord::new("t", format!("s{i}"), i as f64, 1.0, Some(format!("spk{}", i / per)))).collect();
        let set = EmbeddingSet::new(records, x + noise).unwrap();
        let opts = PldaOptions { max_iters: 25, tol: 0.0, length_normalize: false };
        let trace = train_plda_traced(&set, &opts).unwrap().log_likelihood;
        for w in trace.windows(2) {
            prop_assert!(w[1] - w[0] >= -1e-8, "{:?}", trace);
        }
    }

    #[test]
    fn mvectors_have_one_active_unit_per_block(seed in any::<u64>(), n in 9usize..40, v in 1usize..30) {
        let d = 4;
        let plda = PldaModel::from_covariances(
            DVector::zeros(d),
            DMatrix::identity(d, d),
            DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0, 1.0, 0.5])),
        ).unwrap();
        let x = DMatrix::from_fn(n, d, |i, j| (((i * 7 + j * 13) as u64 ^ seed) % 17) as f64 / 3.0);
        let records = (0..n).map(|i| SegmentRecord::new("c", format!("s{i}"), i as f64, 1.0, None)).collect();
        let latents = extract_latent(&plda, &EmbeddingSet::new(records, x).unwrap()).unwrap();
        let cfg = MbnConfig { ensemble_size: v, k1: 20, delta: 0.5, top_floor: TopFloor::Balanced { speakers: 2 }, seed };
        let fit = fit_transform(&latents, &plda, &cfg).unwrap();
        let sim = mvector_cosine_matrix(&fit.mvectors).unwrap();
        for (i, m) in fit.mvectors.iter().enumerate() {
            prop_assert_eq!(m.blocks(), v);
            let dense = DVector::from_vec(m.to_dense());
            prop_assert_eq!(dense.iter().filter(|&&x| x != 0.0).count(), v);
            prop_assert!((dense.norm() - (v as f64).sqrt()).abs() < 1e-12);
            for (j, o) in fit.mvectors.iter().enumerate() {
                let agree = m.indices().iter().zip(o.indices()).filter(|(a, b)| a == b).count();
                prop_assert_eq!(sim.get(i, j), agree as f64 / v as f64);
            }
        }
        // LLR scoring is symmetric.
        let u = latents.vectors();
        let a: Vec<f64> = u.row(0).iter().copied().collect();
        let b: Vec<f64> = u.row(1).iter().copied().collect();
        prop_assert_eq!(llr_score(&plda, &a, &b).unwrap(), llr_score(&plda, &b, &a).unwrap());
    }
}

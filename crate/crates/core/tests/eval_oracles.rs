//! Distributional checks for the evaluation metrics: independence baselines,
//! retrieval on well-separated data, and an independently coded mutual
//! information route.

use divlvm::eval::{clustering_metrics, precision_at_k, ClusteringResult};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Labels drawn independently of the truth carry no signal: with two balanced
/// classes the matched accuracy sits at one half up to sampling noise, and the
/// normalized mutual information collapses to zero.
#[test]
fn independent_labels_score_at_chance() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let predicted: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let m = clustering_metrics(&ClusteringResult::new(predicted, truth).unwrap());
    assert!(
        (m.accuracy - 0.5).abs() < 0.02,
        "chance accuracy drifted: {}",
        m.accuracy
    );
    assert!(m.nmi < 0.005, "independent partitions gave nmi {}", m.nmi);
}

/// Two spherical Gaussian clusters whose centers sit ten standard deviations
/// apart are essentially never confused by nearest-neighbor retrieval.
#[test]
fn separated_gaussians_retrieve_their_own_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dim = 3;
    let fill = |count: usize, rng: &mut ChaCha8Rng| {
        let mut points = Array2::zeros((2 * count, dim));
        let mut labels = Vec::with_capacity(2 * count);
        for i in 0..2 * count {
            let cluster = i % 2;
            labels.push(cluster);
            for d in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                let center = if d == 0 { 10.0 * cluster as f64 } else { 0.0 };
                points[[i, d]] = center + noise;
            }
        }
        (points, labels)
    };
    let (corpus, corpus_labels) = fill(100, &mut rng);
    let (queries, query_labels) = fill(50, &mut rng);
    let p = precision_at_k(
        queries.view(),
        corpus.view(),
        &query_labels,
        &corpus_labels,
        10,
    )
    .unwrap();
    assert!(p.mean >= 0.99, "mean precision at 10 was {}", p.mean);
}

/// Recompute normalized mutual information from raw counts with an
/// independently written formula and compare against the library value on
/// random partitions.
#[test]
fn mutual_information_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..25 {
        let n = 200 + 37 * trial;
        let kp = 2 + trial % 4;
        let kt = 2 + (trial / 4) % 3;
        // Skew the draw so cluster sizes are uneven and some joints are empty.
        let predicted: Vec<usize> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                ((u * u) * kp as f64) as usize
            })
            .collect();
        let truth: Vec<usize> = (0..n)
            .map(|i| {
                if rng.gen_bool(0.6) {
                    predicted[i] % kt
                } else {
                    rng.gen_range(0..kt)
                }
            })
            .collect();
        let m = clustering_metrics(
            &ClusteringResult::new(predicted.clone(), truth.clone()).unwrap(),
        );

        // Second route: tabulate joint and marginal frequencies directly.
        let mut joint = vec![vec![0.0_f64; kt]; kp];
        for (&a, &b) in predicted.iter().zip(&truth) {
            joint[a][b] += 1.0;
        }
        let total = n as f64;
        let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / total).collect();
        let mut pb = vec![0.0_f64; kt];
        for row in &joint {
            for (j, &c) in row.iter().enumerate() {
                pb[j] += c / total;
            }
        }
        let mut info = 0.0;
        for (i, row) in joint.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0.0 {
                    let pij = c / total;
                    info += pij * (pij / (pa[i] * pb[j])).ln();
                }
            }
        }
        let entropy = |ps: &[f64]| -> f64 {
            ps.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
        };
        let expected = info / (entropy(&pa) * entropy(&pb)).sqrt();
        assert!(
            (m.nmi - expected).abs() < 1e-10,
            "trial {trial}: nmi {} vs direct {expected}",
            m.nmi
        );
    }
}

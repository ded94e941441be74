//! Synthetic classification problems with planted mixture structure, used
//! to exercise the fitters against known ground truth.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{bmem_predict, BmemModel, LabeledDataset};
use crate::directional::{uniform_sphere_sample, UnitVector};
use crate::error::Result;
use crate::prior::ComponentSet;

/// A generated problem together with the model that produced it.
#[derive(Debug, Clone)]
pub struct PlantedMixture {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Index of the dominant gate region per training example.
    pub train_assignments: Vec<usize>,
    pub model: BmemModel,
}

/// Two gated halfspace experts in the plane with opposite orientations: the
/// gate splits on the first coordinate, the experts classify by the second
/// coordinate with opposite signs. No single linear rule fits the resulting
/// XOR-of-signs labels, while the planted mixture is near-deterministic
/// thanks to the margin strips around both axes.
pub fn planted_two_expert<R: Rng + ?Sized>(
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<PlantedMixture> {
    let e1 = UnitVector::basis(2, 0);
    let e2 = UnitVector::basis(2, 1);
    let neg = |u: &UnitVector| UnitVector::from_unnormalized(-u.coords()).unwrap();
    let model = BmemModel::new(
        ComponentSet::new(vec![e2.clone(), neg(&e2)], vec![6.0, 6.0])?,
        ComponentSet::new(vec![e1.clone(), neg(&e1)], vec![5.0, 5.0])?,
    )?;
    let mut draw = |n: usize, want_assign: bool| -> Result<(LabeledDataset, Vec<usize>)> {
        let mut rows = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        let mut assigns = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x1: f64;
            let mut x2: f64;
            loop {
                x1 = rng.gen_range(-3.0..3.0);
                x2 = rng.gen_range(-3.0..3.0);
                if x1.abs() >= 0.5 && x2.abs() >= 0.5 {
                    break;
                }
            }
            let x = ndarray::array![x1, x2];
            let p = bmem_predict(&x, &model)?;
            labels.push(u8::from(rng.gen::<f64>() < p));
            rows.extend_from_slice(&[x1, x2]);
            if want_assign {
                assigns.push(usize::from(x1 <= 0.0));
            }
        }
        let data = LabeledDataset::new(Array2::from_shape_vec((n, 2), rows).unwrap(), labels)?;
        Ok((data, assigns))
    };
    let (train, train_assignments) = draw(n_train, true)?;
    let (test, _) = draw(n_test, false)?;
    Ok(PlantedMixture {
        train,
        test,
        train_assignments,
        model,
    })
}

/// Gaussian features with labels from a single halfspace, resampled to keep
/// a margin around the separator; a one-expert fit should reach near-perfect
/// training accuracy. Returns the separating direction as well.
pub fn linearly_separable<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    margin: f64,
    rng: &mut R,
) -> Result<(LabeledDataset, UnitVector)> {
    let w = uniform_sphere_sample(dim, rng);
    let mut rows = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        loop {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let xv = Array1::from(x);
            let score = w.coords().dot(&xv);
            if score.abs() >= margin {
                labels.push(u8::from(score > 0.0));
                rows.extend(xv);
                break;
            }
        }
    }
    let data = LabeledDataset::new(Array2::from_shape_vec((n, dim), rows).unwrap(), labels)?;
    Ok((data, w))
}

/// A sparse binary-feature problem in the style of one-hot census
/// encodings: each example activates mostly one region's feature block, the
/// region's own ±1 pattern over that block decides the label (with label
/// flips at `flip_prob`), and extra distractor features carry no signal.
/// Separating the regions requires one gate/expert pair per region, so
/// component diversity pays off when training data is scarce.
#[derive(Debug, Clone)]
pub struct SparseBinaryProblem {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub model: BmemModel,
}

pub fn gated_sparse_binary<R: Rng + ?Sized>(
    regions: usize,
    block: usize,
    distractors: usize,
    n_train: usize,
    n_test: usize,
    flip_prob: f64,
    rng: &mut R,
) -> Result<SparseBinaryProblem> {
    assert!(regions >= 1 && block >= 2);
    let p = regions * block + distractors;
    // fixed ±1 pattern per region over its own block, half positive
    let patterns: Vec<Vec<f64>> = (0..regions)
        .map(|_| {
            let mut pat: Vec<f64> = (0..block)
                .map(|j| if j < block / 2 { 1.0 } else { -1.0 })
                .collect();
            // shuffle the pattern so the split is not positional
            for j in (1..block).rev() {
                let o = rng.gen_range(0..=j);
                pat.swap(j, o);
            }
            pat
        })
        .collect();
    let mut gate_dirs = Vec::new();
    let mut expert_dirs = Vec::new();
    for (r, pat) in patterns.iter().enumerate() {
        let mut gate = Array1::<f64>::zeros(p);
        let mut expert = Array1::<f64>::zeros(p);
        for j in 0..block {
            gate[r * block + j] = 1.0;
            expert[r * block + j] = pat[j];
        }
        gate_dirs.push(UnitVector::from_unnormalized(gate)?);
        expert_dirs.push(UnitVector::from_unnormalized(expert)?);
    }
    let gate_mag = 6.0 * (block as f64).sqrt();
    let expert_mag = 8.0 * (block as f64).sqrt();
    let model = BmemModel::new(
        ComponentSet::new(expert_dirs, vec![expert_mag; regions])?,
        ComponentSet::new(gate_dirs, vec![gate_mag; regions])?,
    )?;
    let mut draw = |n: usize| -> Result<LabeledDataset> {
        let mut rows = vec![0.0; n * p];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let region = rng.gen_range(0..regions);
            let row = &mut rows[i * p..(i + 1) * p];
            // resample rows whose pattern score is exactly zero, keeping a
            // one-unit label margin
            let score = loop {
                row.fill(0.0);
                for r in 0..regions {
                    let on_prob = if r == region { 0.7 } else { 0.1 };
                    for j in 0..block {
                        if rng.gen::<f64>() < on_prob {
                            row[r * block + j] = 1.0;
                        }
                    }
                }
                for d in 0..distractors {
                    if rng.gen::<f64>() < 0.3 {
                        row[regions * block + d] = 1.0;
                    }
                }
                let s: f64 = (0..block)
                    .map(|j| patterns[region][j] * row[region * block + j])
                    .sum();
                if s != 0.0 {
                    break s;
                }
            };
            let mut y = score > 0.0;
            if rng.gen::<f64>() < flip_prob {
                y = !y;
            }
            labels.push(u8::from(y));
        }
        LabeledDataset::new(Array2::from_shape_vec((n, p), rows).unwrap(), labels)
    };
    let train = draw(n_train)?;
    let test = draw(n_test)?;
    Ok(SparseBinaryProblem { train, test, model })
}

/// Fraction of examples whose thresholded prediction matches the label.
pub fn classification_accuracy(model: &BmemModel, data: &LabeledDataset) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = data.features().row(i).to_owned();
        let p = bmem_predict(&x, model)?;
        if u8::from(p > 0.5) == data.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planted_two_expert_is_hard_for_one_line_but_easy_for_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let planted = planted_two_expert(800, 800, &mut rng).unwrap();
        assert_eq!(planted.train.len(), 800);
        assert_eq!(planted.train_assignments.len(), 800);
        // the generating model classifies its own draws well
        let acc = classification_accuracy(&planted.model, &planted.test).unwrap();
        assert!(acc >= 0.95, "planted model accuracy {acc}");
        // no single halfspace through the origin does: the best of a few
        // hundred random linear rules stays clearly below
        let mut best = 0.0f64;
        for _ in 0..300 {
            let w = uniform_sphere_sample(2, &mut rng);
            let mut correct = 0usize;
            for i in 0..planted.test.len() {
                let s = planted.test.features().row(i).dot(w.coords());
                if u8::from(s > 0.0) == planted.test.labels()[i] {
                    correct += 1;
                }
            }
            best = best.max(correct as f64 / planted.test.len() as f64);
        }
        assert!(best < 0.75, "a linear rule reached {best}");
    }

    #[test]
    fn separable_data_is_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, w) = linearly_separable(300, 4, 0.5, &mut rng).unwrap();
        for i in 0..data.len() {
            let s = data.features().row(i).dot(w.coords());
            assert!(s.abs() >= 0.5);
            assert_eq!(u8::from(s > 0.0), data.labels()[i]);
        }
    }

    #[test]
    fn sparse_problem_shapes_and_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prob = gated_sparse_binary(4, 8, 10, 400, 400, 0.05, &mut rng).unwrap();
        assert_eq!(prob.train.dim(), 4 * 8 + 10);
        assert!(prob.train.features().iter().all(|v| *v == 0.0 || *v == 1.0));
        let acc = classification_accuracy(&prob.model, &prob.test).unwrap();
        assert!(acc >= 0.85, "planted model accuracy {acc}");
        let ones = prob.train.labels().iter().filter(|l| **l == 1).count();
        assert!(ones > 50 && ones < 350, "labels too imbalanced: {ones}");
    }
}

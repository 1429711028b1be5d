//! Contrastive and cross-entropy objectives on plain values. Training uses
//! the fused tape versions ([`Tape::contrastive`], [`Tape::cross_entropy`]);
//! these wrappers evaluate the same quantities without gradients.

use crate::numerics::{NumericsError, Tape, Tensor};

/// An augmented batch: rows `2k` and `2k + 1` are an original window and its
/// noisy partner and share a label.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    /// `2N x D_z`.
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>, temperature: f64) -> Result<Self, NumericsError> {
        let &[n, _] = embeddings.shape() else {
            return Err(NumericsError::Rank { op: "contrastive batch", expected: "2", shape: embeddings.shape().to_vec() });
        };
        if labels.len() != n {
            return Err(NumericsError::Dimension { op: "contrastive batch", axis: "labels", expected: n, found: labels.len() });
        }
        if n < 2 || n % 2 != 0 {
            return Err(NumericsError::Contract(format!("augmented batch needs an even size >= 2, got {n}")));
        }
        if let Some(k) = (0..n / 2).find(|&k| labels[2 * k] != labels[2 * k + 1]) {
            return Err(NumericsError::Contract(format!("pair {k} (rows {}, {}) has differing labels", 2 * k, 2 * k + 1)));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(NumericsError::Config(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self { embeddings, labels, temperature })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Each anchor's augmentation partner.
    pub fn partner_sets(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| vec![i ^ 1]).collect()
    }

    /// Every other row with the anchor's label.
    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        supervised_positives(&self.labels)
    }
}

/// For each anchor, all other indices carrying its label.
pub fn supervised_positives(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| (0..labels.len()).filter(|&p| p != i && labels[p] == labels[i]).collect())
        .collect()
}

/// Sum over anchors of `lse_{a != i}(z_i.z_a / t) - mean_{p in P(i)} z_i.z_p / t`.
pub fn contrastive_loss(embeddings: &Tensor, positives: &[Vec<usize>], temperature: f64) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let z = tape.constant(embeddings.clone());
    let loss = tape.contrastive(z, positives, temperature)?;
    Ok(tape.value(loss).data()[0])
}

/// Each anchor's only positive is its augmentation partner.
pub fn self_supervised_contrastive_loss(batch: &ContrastiveBatch) -> Result<f64, NumericsError> {
    contrastive_loss(&batch.embeddings, &batch.partner_sets(), batch.temperature)
}

/// All same-label rows are positives.
pub fn supervised_contrastive_loss(batch: &ContrastiveBatch) -> Result<f64, NumericsError> {
    contrastive_loss(&batch.embeddings, &batch.label_sets(), batch.temperature)
}

/// Mean of `-ln p[target]` over rows of class probabilities.
pub fn cross_entropy_loss(probabilities: &[Vec<f64>], targets: &[usize]) -> Result<f64, NumericsError> {
    if probabilities.is_empty() || probabilities.len() != targets.len() {
        return Err(NumericsError::Dimension {
            op: "cross_entropy",
            axis: "target",
            expected: probabilities.len(),
            found: targets.len(),
        });
    }
    let mut total = 0.0;
    for (row, &t) in probabilities.iter().zip(targets) {
        let Some(&p) = row.get(t) else {
            return Err(NumericsError::Contract(format!("target {t} outside {} classes", row.len())));
        };
        total -= p.ln();
    }
    Ok(total / targets.len() as f64)
}

/// Softmax cross-entropy computed directly from logits (`B x M`).
pub fn cross_entropy_from_logits(logits: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::Rng;

    use super::*;
    use crate::numerics::{check_gradients, softmax};
    use crate::par::Execution;
    use crate::rng;

    fn unit_rows(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(&[n, d], data).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Literal double loop over anchors and their single positive.
    fn naive_self(z: &Tensor, t: f64) -> f64 {
        let n = z.shape()[0];
        let mut loss = 0.0;
        for i in 0..n {
            let j = i ^ 1;
            let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(z.outer(i), z.outer(a)) / t).exp()).sum();
            loss -= ((dot(z.outer(i), z.outer(j)) / t).exp() / denom).ln();
        }
        loss
    }

    /// Literal triple loop: anchors, positives, denominator terms.
    fn naive_supervised(z: &Tensor, labels: &[usize], t: f64) -> f64 {
        let n = z.shape()[0];
        let mut loss = 0.0;
        for i in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            let mut inner = 0.0;
            for &p in &positives {
                let mut denom = 0.0;
                for a in (0..n).filter(|&a| a != i) {
                    denom += (dot(z.outer(i), z.outer(a)) / t).exp();
                }
                inner += ((dot(z.outer(i), z.outer(p)) / t).exp() / denom).ln();
            }
            loss += -inner / positives.len() as f64;
        }
        loss
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let z = Tensor::new(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let batch = ContrastiveBatch::new(z, vec![0, 0], 1.0).unwrap();
        assert_eq!(self_supervised_contrastive_loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn self_supervised_matches_double_loop() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..20 {
            let z = unit_rows(4, 3, &mut r);
            let batch = ContrastiveBatch::new(z.clone(), vec![0, 0, 1, 1], 0.5).unwrap();
            assert!(rel(self_supervised_contrastive_loss(&batch).unwrap(), naive_self(&z, 0.5)) < 1e-12);
        }
    }

    #[test]
    fn supervised_matches_triple_loop() {
        let mut r = rng::stream(2, &[]);
        let z = unit_rows(6, 4, &mut r);
        let labels = vec![0, 0, 1, 1, 0, 0];
        let batch = ContrastiveBatch::new(z.clone(), labels.clone(), 0.1).unwrap();
        assert!(rel(supervised_contrastive_loss(&batch).unwrap(), naive_supervised(&z, &labels, 0.1)) < 1e-10);
    }

    #[test]
    fn one_original_per_class_reduces_to_self_supervised() {
        let mut r = rng::stream(3, &[]);
        let z = unit_rows(6, 4, &mut r);
        let batch = ContrastiveBatch::new(z, vec![0, 0, 1, 1, 2, 2], 0.3).unwrap();
        assert_eq!(supervised_contrastive_loss(&batch).unwrap(), self_supervised_contrastive_loss(&batch).unwrap());
    }

    #[test]
    fn invariant_under_reordering() {
        let mut r = rng::stream(4, &[]);
        for _ in 0..20 {
            let z = unit_rows(8, 3, &mut r);
            let labels = vec![0, 0, 1, 1, 0, 0, 2, 2];
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut r);
            // perm[new] = old
            let mut inv = vec![0; 8];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            let zp = Tensor::new(&[8, 3], perm.iter().flat_map(|&o| z.outer(o).to_vec()).collect()).unwrap();
            let lp: Vec<usize> = perm.iter().map(|&o| labels[o]).collect();
            let partners: Vec<Vec<usize>> = perm.iter().map(|&o| vec![inv[o ^ 1]]).collect();
            let base = ContrastiveBatch::new(z.clone(), labels.clone(), 0.4).unwrap();
            assert!(rel(contrastive_loss(&zp, &partners, 0.4).unwrap(), self_supervised_contrastive_loss(&base).unwrap()) < 1e-12);
            assert!(rel(contrastive_loss(&zp, &supervised_positives(&lp), 0.4).unwrap(), supervised_contrastive_loss(&base).unwrap()) < 1e-12);

            let logits = Tensor::new(&[8, 3], (0..24).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
            let lp = Tensor::new(&[8, 3], perm.iter().flat_map(|&o| logits.outer(o).to_vec()).collect()).unwrap();
            let targets: Vec<usize> = labels.clone();
            let tp: Vec<usize> = perm.iter().map(|&o| targets[o]).collect();
            assert!(rel(cross_entropy_from_logits(&logits, &targets).unwrap(), cross_entropy_from_logits(&lp, &tp).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, &[]);
        let labels = vec![0, 0, 1, 1, 0, 0];
        let positives = supervised_positives(&labels);
        for seed in 0..5 {
            let z = unit_rows(6, 4, &mut r);
            let err = check_gradients(&[z], |tape, v| tape.contrastive(v[0], &positives, 0.2), 1e-5, seed, Execution::Sequential)
                .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    /// Pulling one class toward its mean direction lowers the loss almost
    /// always; it is not a pointwise theorem, since the pulled rows also act
    /// as negatives for the other class. Checked statistically.
    #[test]
    fn tightening_a_class_lowers_the_loss() {
        let mut r = rng::stream(6, &[]);
        let (mut held, mut total_change) = (0, 0.0);
        for _ in 0..100 {
            let n = 2 * r.random_range(2..6);
            let d = r.random_range(2..6);
            let z = unit_rows(n, d, &mut r);
            let labels: Vec<usize> = (0..n / 2).flat_map(|k| [k % 2, k % 2]).collect();
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
            let mut mean = vec![0.0; d];
            for &i in &members {
                mean.iter_mut().zip(z.outer(i)).for_each(|(m, v)| *m += v);
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            mean.iter_mut().for_each(|m| *m /= norm);
            let lambda = r.random_range(0.1..1.0);
            let mut data = z.data().to_vec();
            for &i in &members {
                let row: Vec<f64> = z.outer(i).iter().zip(&mean).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
                let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                data[i * d..][..d].iter_mut().zip(&row).for_each(|(dst, v)| *dst = v / rn);
            }
            let tight = Tensor::new(&[n, d], data).unwrap();
            let pos = supervised_positives(&labels);
            let before = contrastive_loss(&z, &pos, 0.5).unwrap();
            let after = contrastive_loss(&tight, &pos, 0.5).unwrap();
            assert!(after.is_finite() && before.is_finite());
            held += (after <= before + 1e-12) as usize;
            total_change += after - before;
        }
        assert!(held >= 95, "loss fell in only {held}/100 batches");
        assert!(total_change < 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_loss(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
        let uniform = vec![vec![0.25; 4]; 3];
        assert!((cross_entropy_loss(&uniform, &[0, 3, 2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_loss(&uniform, &[4, 0, 0]).is_err());
        assert!(cross_entropy_from_logits(&Tensor::zeros(&[1, 3]), &[3]).is_err());

        let mut r = rng::stream(7, &[]);
        let logits = Tensor::new(&[5, 4], (0..20).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap();
        let targets = [0, 3, 1, 1, 2];
        let naive: f64 =
            targets.iter().enumerate().map(|(b, &t)| -softmax(logits.outer(b))[t].ln()).sum::<f64>() / 5.0;
        assert!(rel(cross_entropy_from_logits(&logits, &targets).unwrap(), naive) < 1e-12);
    }

    #[test]
    fn malformed_batches() {
        let z = Tensor::zeros(&[4, 2]);
        assert!(ContrastiveBatch::new(z.clone(), vec![0, 1, 1, 1], 1.0).is_err());
        assert!(ContrastiveBatch::new(z.clone(), vec![0, 0, 1, 1], 0.0).is_err());
        assert!(ContrastiveBatch::new(Tensor::zeros(&[3, 2]), vec![0, 0, 1], 1.0).is_err());
        let err = contrastive_loss(&z, &[vec![1], vec![0], vec![], vec![2]], 1.0).unwrap_err();
        assert!(err.to_string().contains("anchor 2"));
    }
}

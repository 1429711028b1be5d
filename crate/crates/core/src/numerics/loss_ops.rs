use super::tape::Op;
use super::{NumericsError, Tape, Tensor, Var};

impl Tape {
    /// Summed contrastive log-likelihood over anchors.
    ///
    /// `embeddings` is `n x D`. For anchor `i`, the similarity logits are
    /// `z_i . z_a / temperature` over every `a != i`; the anchor's loss is the
    /// log-sum-exp of those logits minus the mean logit over `positives[i]`.
    /// Every positive set must be non-empty and exclude the anchor itself.
    pub fn contrastive(
        &mut self,
        embeddings: Var,
        positives: &[Vec<usize>],
        temperature: f64,
    ) -> Result<Var, NumericsError> {
        const OP: &str = "contrastive";
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(NumericsError::Config(format!("{OP}: temperature must be > 0, got {temperature}")));
        }
        let shape = self.shape(embeddings).to_vec();
        let [n, d] = shape[..] else {
            return Err(NumericsError::Rank { op: OP, expected: "2", shape });
        };
        if n < 2 {
            return Err(NumericsError::Contract(format!("{OP}: need at least 2 samples, got {n}")));
        }
        if positives.len() != n {
            return Err(NumericsError::Dimension {
                op: OP,
                axis: "positive sets",
                expected: n,
                found: positives.len(),
            });
        }
        for (i, p) in positives.iter().enumerate() {
            if p.is_empty() {
                return Err(NumericsError::Contract(format!("{OP}: anchor {i} has no positives")));
            }
            if p.iter().any(|&j| j == i || j >= n) {
                return Err(NumericsError::Contract(format!(
                    "{OP}: anchor {i} has an invalid positive index in {p:?}"
                )));
            }
        }
        let z = self.value(embeddings).data();
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for a in i..n {
                let s = z[i * d..][..d].iter().zip(&z[a * d..][..d]).map(|(x, y)| x * y).sum::<f64>()
                    / temperature;
                sim[i * n + a] = s;
                sim[a * n + i] = s;
            }
        }
        let mut coeff = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &sim[i * n..][..n];
            let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
            let lse = max + denom.ln();
            let inv_p = 1.0 / positives[i].len() as f64;
            let mean_pos: f64 = positives[i].iter().map(|&p| row[p]).sum::<f64>() * inv_p;
            loss += lse - mean_pos;
            for a in (0..n).filter(|&a| a != i) {
                coeff[i * n + a] = (row[a] - lse).exp();
            }
            for &p in &positives[i] {
                coeff[i * n + p] -= inv_p;
            }
        }
        self.push(
            OP,
            Tensor::scalar(loss),
            Op::Contrastive { input: embeddings, coeff, rows: n, temperature },
            &[embeddings],
        )
    }

    pub(crate) fn contrastive_backward(
        &self,
        upstream: f64,
        input: Var,
        coeff: &[f64],
        n: usize,
        temperature: f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let z = self.value(input).data();
        let d = z.len() / n;
        if let Some(dz) = self.slot(grads, input) {
            for k in 0..n {
                for a in 0..n {
                    let c = (coeff[k * n + a] + coeff[a * n + k]) * upstream / temperature;
                    if c == 0.0 {
                        continue;
                    }
                    let src = &z[a * d..][..d];
                    dz[k * d..][..d].iter_mut().zip(src).for_each(|(g, &v)| *g += c * v);
                }
            }
        }
    }

    /// Mean cross-entropy of softmax(logits) against integer targets, fused
    /// with the softmax. `logits` is `B x M` or a single `M` vector.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        const OP: &str = "cross_entropy";
        let shape = self.shape(logits).to_vec();
        let (rows, m) = match shape[..] {
            [m] => (1, m),
            [b, m] => (b, m),
            _ => return Err(NumericsError::Rank { op: OP, expected: "1 or 2", shape }),
        };
        if targets.len() != rows {
            return Err(NumericsError::Dimension { op: OP, axis: "target", expected: rows, found: targets.len() });
        }
        if rows == 0 || m == 0 {
            return Err(NumericsError::Contract(format!("{OP}: empty logits")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(NumericsError::Contract(format!("{OP}: target {t} outside {m} classes")));
        }
        let l = self.value(logits).data();
        let mut probs = Vec::with_capacity(l.len());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &l[r * m..][..m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= rows as f64;
        self.push(
            OP,
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, probs, targets: targets.to_vec() },
            &[logits],
        )
    }

    pub(crate) fn cross_entropy_backward(
        &self,
        upstream: f64,
        logits: Var,
        probs: &[f64],
        targets: &[usize],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let rows = targets.len();
        let m = probs.len() / rows;
        let scale = upstream / rows as f64;
        if let Some(dl) = self.slot(grads, logits) {
            for (r, &t) in targets.iter().enumerate() {
                for c in 0..m {
                    let onehot = if c == t { 1.0 } else { 0.0 };
                    dl[r * m + c] += scale * (probs[r * m + c] - onehot);
                }
            }
        }
    }
}

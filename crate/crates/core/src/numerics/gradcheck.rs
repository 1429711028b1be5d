use crate::par::{self, Execution};

use super::{NumericsError, Tape, Tensor, Var};

/// Central finite-difference gradient of `f` with respect to `inputs[which]`.
///
/// `f` sees a full copy of `inputs` with one entry perturbed by `+-step`; it
/// must be deterministic and side-effect free. Entries are evaluated in
/// parallel when `exec` allows it.
pub fn central_difference<F>(f: &F, inputs: &[Tensor], which: usize, step: f64, exec: Execution) -> Tensor
where
    F: Fn(&[Tensor]) -> f64 + Sync,
{
    let n = inputs[which].len();
    let data = par::map_range(exec, n, |i| {
        let mut probe = inputs.to_vec();
        let base = probe[which].data()[i];
        probe[which].data_mut()[i] = base + step;
        let up = f(&probe);
        probe[which].data_mut()[i] = base - step;
        let down = f(&probe);
        (up - down) / (2.0 * step)
    });
    Tensor::from_parts(inputs[which].shape().to_vec(), data)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on mismatched lengths");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks the tape's gradients of the graph built by `build` on `inputs`.
///
/// The (possibly non-scalar) output is contracted with a fixed random
/// projection seeded by `seed`; analytic gradients of every input are compared
/// against central differences. Returns the worst per-input relative error.
///
/// Inputs whose true gradient vanishes (e.g. a bias feeding batch norm) would
/// compare rounding noise with rounding noise, so each input's scale is
/// floored at `1e-6` of the overall gradient norm.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, step: f64, seed: u64, exec: Execution) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError> + Sync,
{
    let forward = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = forward(inputs)?;
    let proj = projection(tape.shape(out), seed);
    let p = tape.constant(proj.clone());
    let loss = tape.dot(out, p)?;
    tape.backward(loss)?;
    let f = |xs: &[Tensor]| {
        let Ok((mut tape, _, out)) = forward(xs) else { return f64::NAN };
        let p = tape.constant(proj.clone());
        tape.dot(out, p).map_or(f64::NAN, |l| tape.value(l).data()[0])
    };
    let pairs: Vec<(Tensor, Tensor)> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| (tape.grad(v).expect("backward ran"), central_difference(&f, inputs, i, step, exec)))
        .collect();
    let total = pairs.iter().map(|(a, n)| norm(a.data()).max(norm(n.data())).powi(2)).sum::<f64>().sqrt();
    let floor = SCALE_FLOOR * total;
    let mut worst: f64 = 0.0;
    for (a, n) in &pairs {
        let diff = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(a.data()).max(norm(n.data())).max(floor);
        let err = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(worst)
}

const SCALE_FLOOR: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = crate::rng::stream(seed, &[99]);
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..2.0)).collect())
}

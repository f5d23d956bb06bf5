//! Finite-difference gradient checking for tape-built scalar functions.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compare analytic gradients against central finite differences.
///
/// `build` receives a fresh tape plus one trainable leaf per input tensor
/// and returns the scalar loss node. Coordinates can be subsampled for large
/// inputs via `max_coords`; selection is deterministic.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    step: f64,
    rtol: f64,
    max_coords: Option<usize>,
) -> Result<(), String>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if n > m => {
                // deterministic stride subsample covering the tensor
                let stride = n / m;
                (0..m).map(|i| (i * stride + i * 7919) % n).collect()
            }
            _ => (0..n).collect(),
        };
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].dims()));
        for &c in &coords {
            let orig = work[k].data()[c];
            work[k].data_mut()[c] = orig + step;
            let fp = eval(&work);
            work[k].data_mut()[c] = orig - step;
            let fm = eval(&work);
            work[k].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[c];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            if (a - numeric).abs() / denom > rtol {
                return Err(format!(
                    "input {k} coord {c}: analytic {a} vs numeric {numeric} (rtol {rtol})"
                ));
            }
        }
    }
    Ok(())
}

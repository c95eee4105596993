use super::{ParamStore, Tape, Var};
use crate::error::{PodnetError, Result};

fn evaluate<F>(params: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let root = loss_fn(&mut tape)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(PodnetError::NonFiniteLoss(value));
    }
    Ok(value)
}

/// Loss value and exact reverse-mode gradients of the scalar built by `loss_fn`.
pub fn loss_gradients<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, ParamStore)>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let root = loss_fn(&mut tape)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(PodnetError::NonFiniteLoss(value));
    }
    Ok((value, tape.backward(root)?))
}

/// Largest relative disagreement between reverse-mode gradients and central
/// differences over every scalar parameter. The relative error of a pair is
/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn finite_difference_check<F>(params: &ParamStore, eps: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(PodnetError::invalid("finite-difference eps must be positive"));
    }
    let (_, analytic) = loss_gradients(params, &loss_fn)?;
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for t in 0..params.len() {
        for j in 0..params.tensors()[t].len() {
            let original = params.tensors()[t].data[j];
            probe.tensors_mut()[t].data[j] = original + eps;
            let plus = evaluate(&probe, &loss_fn)?;
            probe.tensors_mut()[t].data[j] = original - eps;
            let minus = evaluate(&probe, &loss_fn)?;
            probe.tensors_mut()[t].data[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.tensors()[t].data[j];
            let denom = exact.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

//! Central finite-difference checks of analytic gradients.

use super::{Mode, Sequential, Tensor};
use crate::error::Result;

/// Gradients smaller than this are compared in absolute terms. Exact zeros
/// (a batch-norm shift feeding another batch norm, say) otherwise turn
/// finite-difference rounding noise into large relative errors.
pub const GRAD_FLOOR: f64 = 1e-4;

/// |a − n| / max(|a|, |n|, GRAD_FLOOR)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central differences of a scalar function with respect to every entry of `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let plus = f(&work);
            work[i] = orig - step;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error over all parameters.
    pub max_param_error: f64,
    /// Max relative error of the input gradient.
    pub max_input_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

/// Compares backpropagated gradients of `loss(net(input))` with central
/// differences, for every parameter entry and every input entry.
///
/// Runs in train mode with dropout masks frozen after the first pass, so the
/// perturbed forwards see the same function. Batch norm uses batch statistics,
/// which is deterministic for a fixed batch.
pub fn grad_check<F>(net: &mut Sequential, input: &Tensor, loss: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    net.zero_grad();
    net.set_dropout_frozen(false);
    let out = net.forward(input, Mode::Train)?;
    net.set_dropout_frozen(true);
    let (_, dout) = loss(&out);
    let dinput = net.backward(&dout)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let eval = |net: &mut Sequential, x: &Tensor| -> Result<f64> {
        let y = net.forward(x, Mode::Train)?;
        Ok(loss(&y).0)
    };

    let mut max_param_error: f64 = 0.0;
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = net.params()[pi].value.data()[i];
            net.params_mut()[pi].value.data_mut()[i] = orig + step;
            let plus = eval(net, input)?;
            net.params_mut()[pi].value.data_mut()[i] = orig - step;
            let minus = eval(net, input)?;
            net.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_param_error = max_param_error.max(relative_error(a, numeric));
            checked += 1;
        }
    }

    let mut max_input_error: f64 = 0.0;
    if !dinput.is_empty() {
        let mut x = input.clone();
        for i in 0..input.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + step;
            let plus = eval(net, &x)?;
            x.data_mut()[i] = orig - step;
            let minus = eval(net, &x)?;
            x.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_input_error = max_input_error.max(relative_error(dinput.data()[i], numeric));
            checked += 1;
        }
    }
    net.set_dropout_frozen(false);
    net.clear_cache();
    Ok(GradCheckReport {
        max_param_error,
        max_input_error,
        checked,
    })
}

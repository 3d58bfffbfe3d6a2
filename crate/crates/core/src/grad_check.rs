//! Central finite-difference check of reverse-pass gradients.

use crate::error::{config_err, Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{MlpParams, ParamGrads};

/// Maps logits to a scalar loss and its derivative with respect to the logits.
pub trait LogitLoss {
    fn loss_and_grad(&self, logits: &Matrix) -> Result<(f64, Matrix)>;
}

impl<F> LogitLoss for F
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    fn loss_and_grad(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        self(logits)
    }
}

/// Largest relative disagreement between the analytic gradient of
/// `loss(model(features))` and its central finite-difference estimate.
pub fn grad_check(model: &MlpParams, features: &Matrix, loss: &impl LogitLoss, eps: f64) -> Result<f64> {
    let (logits, cache) = model.forward(features)?;
    let (_, d_logits) = loss.loss_and_grad(&logits)?;
    let analytic = model.backward(&cache, &d_logits)?;
    compare_gradients(model, features, loss, &analytic, eps)
}

/// Same as [`grad_check`] but against a caller-supplied gradient, so a faulty
/// reverse pass can be fed in directly.
///
/// Per parameter the error is `|a - f| / max(1e-12, |a| + |f|)`.
pub fn compare_gradients(
    model: &MlpParams,
    features: &Matrix,
    loss: &impl LogitLoss,
    analytic: &ParamGrads,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(config_err!("finite-difference eps must lie in (0, 1e-3], got {eps}"));
    }
    if !analytic.matches(model) {
        return Err(Error::Shape("analytic gradient does not mirror the model".into()));
    }
    let probe = |m: &MlpParams| -> Result<f64> {
        let logits = m.predict(features)?;
        let (value, _) = loss.loss_and_grad(&logits)?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numeric(format!("loss evaluated to {value} while probing")))
        }
    };
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for (idx, a) in analytic.flat().into_iter().enumerate() {
        let original = *work.param_mut(idx);
        *work.param_mut(idx) = original + eps;
        let plus = probe(&work)?;
        *work.param_mut(idx) = original - eps;
        let minus = probe(&work)?;
        *work.param_mut(idx) = original;
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

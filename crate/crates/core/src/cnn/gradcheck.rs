use super::loss::LossKind;
use super::network::{backward, forward, forward_cached, NetworkParams, LAYER_NAMES};
use crate::error::Result;
use crate::image::Illuminant;
use crate::patch::Patch;

const STEP: f64 = 1e-4;

/// Largest relative error between analytic and central-difference gradients,
/// per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.layers.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Checks every parameter gradient of the network against central differences.
pub fn gradient_check(
    params: &NetworkParams,
    patch: &Patch,
    gt: &Illuminant,
    loss: LossKind,
) -> Result<GradCheckReport> {
    gradient_check_with(params, patch, gt, loss, |p, patch, gt, loss| {
        let (out, cache) = forward_cached(p, patch)?;
        let (_, g) = loss.eval(out, gt)?;
        backward(p, &cache, g)
    })
}

/// Like [`gradient_check`] with a caller-supplied analytic gradient.
pub fn gradient_check_with<F>(
    params: &NetworkParams,
    patch: &Patch,
    gt: &Illuminant,
    loss: LossKind,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&NetworkParams, &Patch, &Illuminant, LossKind) -> Result<NetworkParams>,
{
    let grads = analytic(params, patch, gt, loss)?;
    let eval = |p: &NetworkParams| -> Result<f64> { Ok(loss.eval(forward(p, patch)?, gt)?.0) };
    let mut probe = params.clone();
    let mut layers = Vec::with_capacity(LAYER_NAMES.len());
    for (li, name) in LAYER_NAMES.iter().enumerate() {
        let n = params.layers()[li].len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.layers()[li].data()[i];
            probe.layers_mut()[li].data_mut()[i] = orig + STEP;
            let plus = eval(&probe)?;
            probe.layers_mut()[li].data_mut()[i] = orig - STEP;
            let minus = eval(&probe)?;
            probe.layers_mut()[li].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grads.layers()[li].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        layers.push((name.to_string(), worst));
    }
    Ok(GradCheckReport { layers })
}

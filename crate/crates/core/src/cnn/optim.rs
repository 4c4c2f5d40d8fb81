use super::hyper::HyperParams;
use super::network::NetworkParams;
use crate::error::{Error, Result};

/// Per-parameter velocity for momentum SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    velocity: NetworkParams,
}

impl MomentumState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &NetworkParams {
        &self.velocity
    }
}

/// One momentum step: `v ← μv − lr(g + wd·θ)`, `θ ← θ + v`.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    hyper: &HyperParams,
    state: &mut MomentumState,
) -> Result<()> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.velocity)?;
    for (name, g) in super::network::LAYER_NAMES.iter().zip(grads.layers()) {
        g.check_finite(&format!("gradient of {name}"))?;
    }
    let (lr, mu, wd) = (hyper.learning_rate, hyper.momentum, hyper.weight_decay);
    for ((theta, g), v) in params
        .layers_mut()
        .into_iter()
        .zip(grads.layers())
        .zip(state.velocity.layers_mut())
    {
        for ((t, gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi - lr * (gi + wd * *t);
            *t += *vi;
        }
    }
    for (name, p) in super::network::LAYER_NAMES.iter().zip(params.layers()) {
        if p.check_finite(name).is_err() {
            return Err(Error::NumericFault(format!("{name} after update")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::init_params;

    fn toy() -> (NetworkParams, HyperParams) {
        let hyper = HyperParams {
            patch_size: 8,
            kernel_count: 4,
            pool_size: 4,
            fc_units: 5,
            ..Default::default()
        };
        (init_params(&hyper, 1).unwrap(), hyper)
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let (mut p, mut hyper) = toy();
        hyper.momentum = 0.0;
        hyper.weight_decay = 0.0;
        hyper.learning_rate = 0.1;
        let before = p.clone();
        let mut g = p.zeros_like();
        for (i, v) in g.layers_mut().into_iter().flat_map(|t| t.data_mut().iter_mut()).enumerate() {
            *v = (i % 7) as f64 - 3.0;
        }
        let mut state = MomentumState::new(&p);
        sgd_step(&mut p, &g, &hyper, &mut state).unwrap();
        for ((a, b), gl) in p.layers().iter().zip(before.layers()).zip(g.layers()) {
            for ((x, y), gv) in a.data().iter().zip(b.data()).zip(gl.data()) {
                assert_eq!(*x, y - 0.1 * gv);
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, mut hyper) = toy();
        hyper.weight_decay = 0.0;
        let before = p.clone();
        let mut state = MomentumState::new(&p);
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &hyper, &mut state).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, mut hyper) = toy();
        hyper.momentum = 0.9;
        hyper.weight_decay = 0.0;
        hyper.learning_rate = 0.1;
        // f(θ) = ½θ², so g = θ, applied to the first conv bias only.
        let theta0 = 2.0;
        p.conv_b.data_mut()[0] = theta0;
        let mut state = MomentumState::new(&p);
        for _ in 0..2 {
            let mut g = p.zeros_like();
            g.conv_b.data_mut()[0] = p.conv_b.data()[0];
            sgd_step(&mut p, &g, &hyper, &mut state).unwrap();
        }
        // v1 = −0.2, θ1 = 1.8; v2 = 0.9·(−0.2) − 0.1·1.8 = −0.36, θ2 = 1.44
        assert!((p.conv_b.data()[0] - 1.44).abs() < 1e-15);
        assert!((state.velocity().conv_b.data()[0] + 0.36).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let (mut p, hyper) = toy();
        let mut g = p.zeros_like();
        g.fc_w.data_mut()[3] = f64::INFINITY;
        let mut state = MomentumState::new(&p);
        let err = sgd_step(&mut p, &g, &hyper, &mut state).unwrap_err();
        assert!(err.to_string().contains("fc_w"), "{err}");
    }
}

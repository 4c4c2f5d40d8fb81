use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hyper::HyperParams;
use super::layers;
use super::loss::LossKind;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::Illuminant;
use crate::parallel;
use crate::patch::Patch;

/// Layer order used everywhere parameters are enumerated.
pub const LAYER_NAMES: [&str; 6] = ["conv_w", "conv_b", "fc_w", "fc_b", "out_w", "out_b"];

/// Patches per work unit when accumulating batch gradients.
const GRAD_CHUNK: usize = 8;

/// Weights of the five-layer network.
///
/// Shapes: `conv_w [K, k, k, 3]`, `conv_b [K]`, `fc_w [H, G·G·K]`,
/// `fc_b [H]`, `out_w [3, H]`, `out_b [3]`. The same struct doubles as the
/// gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl NetworkParams {
    /// Assembles and validates a parameter set.
    pub fn new(
        conv_w: Tensor,
        conv_b: Tensor,
        fc_w: Tensor,
        fc_b: Tensor,
        out_w: Tensor,
        out_b: Tensor,
    ) -> Result<Self> {
        let p = Self {
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            out_w,
            out_b,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-initialized parameters for the given architecture.
    pub fn zeros(kernel_count: usize, kernel_width: usize, pool_grid: usize, fc_units: usize) -> Self {
        let fc_in = pool_grid * pool_grid * kernel_count;
        Self {
            conv_w: Tensor::zeros(&[kernel_count, kernel_width, kernel_width, 3]),
            conv_b: Tensor::zeros(&[kernel_count]),
            fc_w: Tensor::zeros(&[fc_units, fc_in]),
            fc_b: Tensor::zeros(&[fc_units]),
            out_w: Tensor::zeros(&[3, fc_units]),
            out_b: Tensor::zeros(&[3]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [k, kh, kw, 3] = *self.conv_w.shape() else {
            return Err(Error::Shape(format!("conv_w must be [K, k, k, 3], got {:?}", self.conv_w.shape())));
        };
        if k == 0 || kh != kw || kw == 0 {
            return Err(Error::Shape(format!("invalid conv_w shape {:?}", self.conv_w.shape())));
        }
        self.conv_b.expect_shape(&[k], "conv_b")?;
        let [h, fc_in] = *self.fc_w.shape() else {
            return Err(Error::Shape(format!("fc_w must be 2-D, got {:?}", self.fc_w.shape())));
        };
        let g = (fc_in / k).isqrt();
        if h == 0 || fc_in % k != 0 || g * g * k != fc_in || g == 0 {
            return Err(Error::Shape(format!(
                "fc input width {fc_in} is not G·G·K for K = {k}"
            )));
        }
        self.fc_b.expect_shape(&[h], "fc_b")?;
        self.out_w.expect_shape(&[3, h], "out_w")?;
        self.out_b.expect_shape(&[3], "out_b")?;
        for (name, t) in LAYER_NAMES.iter().zip(self.layers()) {
            t.check_finite(name)?;
        }
        Ok(())
    }

    pub fn kernel_count(&self) -> usize {
        self.conv_w.shape()[0]
    }

    pub fn kernel_width(&self) -> usize {
        self.conv_w.shape()[1]
    }

    /// Side `G` of the pooled feature grid.
    pub fn pool_grid(&self) -> usize {
        (self.fc_w.shape()[1] / self.kernel_count()).isqrt()
    }

    pub fn fc_units(&self) -> usize {
        self.fc_w.shape()[0]
    }

    pub fn layers(&self) -> [&Tensor; 6] {
        [&self.conv_w, &self.conv_b, &self.fc_w, &self.fc_b, &self.out_w, &self.out_b]
    }

    pub fn layers_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kernel_count(), self.kernel_width(), self.pool_grid(), self.fc_units())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        for ((name, a), b) in LAYER_NAMES.iter().zip(self.layers()).zip(other.layers()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            a.add_assign(b);
        }
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for t in self.layers_mut() {
            t.scale(factor);
        }
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(hyper: &HyperParams, seed: u64) -> Result<NetworkParams> {
    hyper.validate()?;
    let (k, kw, g, h) = (hyper.kernel_count, hyper.kernel_width, hyper.pool_grid(), hyper.fc_units);
    let mut p = NetworkParams::zeros(k, kw, g, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fans = [
        (3 * kw * kw, k * kw * kw),
        (g * g * k, h),
        (h, 3),
    ];
    for (t, (fan_in, fan_out)) in [&mut p.conv_w, &mut p.fc_w, &mut p.out_w].into_iter().zip(fans) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-limit..=limit);
        }
    }
    Ok(p)
}

/// Copies a patch into an `[S, S, 3]` tensor.
pub fn patch_tensor(patch: &Patch) -> Tensor {
    Tensor::from_vec(&[patch.size, patch.size, 3], patch.data.clone())
        .expect("patch data matches its size")
}

/// Intermediate values kept for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Tensor,
    conv_shape: Vec<usize>,
    argmax: Vec<usize>,
    pooled: Tensor,
    fc_pre: Tensor,
    fc_act: Tensor,
}

/// Raw (unnormalized) 3-vector output for one patch.
pub fn forward(params: &NetworkParams, patch: &Patch) -> Result<[f64; 3]> {
    forward_cached(params, patch).map(|(out, _)| out)
}

pub fn forward_cached(params: &NetworkParams, patch: &Patch) -> Result<([f64; 3], ForwardCache)> {
    let g = params.pool_grid();
    if patch.size == 0 || !patch.size.is_multiple_of(g) {
        return Err(Error::Shape(format!(
            "patch size {} is not a multiple of the pooled grid {g}",
            patch.size
        )));
    }
    let pool = patch.size / g;
    let input = patch_tensor(patch);
    let conv = layers::conv_forward(&input, &params.conv_w, &params.conv_b)?;
    conv.check_finite("conv output")?;
    let conv_shape = conv.shape().to_vec();
    let (pooled, argmax) = layers::maxpool_forward(&conv, pool)?;
    // [G, G, K] row-major is already the (row, column, channel) flatten order.
    let flat = Tensor::from_vec(&[pooled.len()], pooled.into_data())?;
    let (fc_act, fc_pre) = layers::fc_relu_forward(&flat, &params.fc_w, &params.fc_b)?;
    let out = layers::linear_forward(&fc_act, &params.out_w, &params.out_b)?;
    out.check_finite("network output")?;
    let o = out.data();
    Ok((
        [o[0], o[1], o[2]],
        ForwardCache {
            input,
            conv_shape,
            argmax,
            pooled: flat,
            fc_pre,
            fc_act,
        },
    ))
}

/// Parameter gradients given the gradient of a scalar loss w.r.t. the output.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, grad_out: [f64; 3]) -> Result<NetworkParams> {
    let g_out = Tensor::from_vec(&[3], grad_out.to_vec())?;
    let (g_act, out_w, out_b) = layers::linear_backward(&g_out, &cache.fc_act, &params.out_w)?;
    let (g_flat, fc_w, fc_b) = layers::fc_relu_backward(&g_act, &cache.pooled, &params.fc_w, &cache.fc_pre)?;
    let g_conv = layers::maxpool_backward(&g_flat, &cache.argmax, &cache.conv_shape)?;
    let (_, conv_w, conv_b) = layers::conv_backward(&g_conv, &cache.input, &params.conv_w)?;
    Ok(NetworkParams {
        conv_w,
        conv_b,
        fc_w,
        fc_b,
        out_w,
        out_b,
    })
}

/// Mean loss and mean parameter gradient over `(patch, target)` samples.
///
/// Samples are processed in fixed chunks whose partial sums are combined in
/// order, so the result is bit-identical with or without the `parallel`
/// feature and for any thread count.
pub fn batch_gradient(
    params: &NetworkParams,
    samples: &[(&Patch, Illuminant)],
    loss: LossKind,
) -> Result<(f64, NetworkParams)> {
    if samples.is_empty() {
        return Err(Error::Empty("batch has no samples".into()));
    }
    let partials = parallel::map_chunks(samples, GRAD_CHUNK, |chunk| -> Result<(f64, NetworkParams)> {
        let mut acc = params.zeros_like();
        let mut total = 0.0;
        for (patch, gt) in chunk {
            let (out, cache) = forward_cached(params, patch)?;
            let (l, g) = loss.eval(out, gt)?;
            total += l;
            acc.add_assign(&backward(params, &cache, g)?);
        }
        Ok((total, acc))
    });
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for part in partials {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    let n = samples.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{sgd_step, MomentumState};

    fn toy_hyper() -> HyperParams {
        HyperParams {
            patch_size: 8,
            kernel_count: 4,
            pool_size: 4,
            fc_units: 5,
            ..Default::default()
        }
    }

    fn random_patch(size: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            size,
            origin: (0, 0),
            data: (0..size * size * 3).map(|_| rng.gen()).collect(),
            degenerate: false,
        }
    }

    #[test]
    fn bias_path() {
        let mut p = NetworkParams::zeros(4, 1, 2, 5);
        p.out_b = Tensor::from_vec(&[3], vec![0.5; 3]).unwrap();
        let patch = Patch {
            size: 8,
            origin: (0, 0),
            data: vec![0.0; 192],
            degenerate: false,
        };
        assert_eq!(forward(&p, &patch).unwrap(), [0.5; 3]);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let h = toy_hyper();
        let a = init_params(&h, 42).unwrap();
        assert_eq!(a, init_params(&h, 42).unwrap());
        assert_ne!(a, init_params(&h, 43).unwrap());
        for b in [&a.conv_b, &a.fc_b, &a.out_b] {
            assert!(b.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn init_moments_match_uniform() {
        let h = HyperParams::default();
        let p = init_params(&h, 7).unwrap();
        // fc layer: fan_in 4·4·240 = 3840, fan_out 40.
        let limit = (6.0f64 / (3840.0 + 40.0)).sqrt();
        let d = p.fc_w.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        let expect = limit / 3f64.sqrt();
        assert!((std - expect).abs() / expect < 0.1, "std {std} vs {expect}");
        assert!(d.iter().all(|v| v.abs() <= limit));
        let climit = (6.0f64 / (3.0 + 240.0)).sqrt();
        assert!(p.conv_w.data().iter().all(|v| v.abs() <= climit));
    }

    #[test]
    fn kernel_permutation_symmetry() {
        let h = toy_hyper();
        let p = init_params(&h, 3).unwrap();
        let (k1, k2, kc) = (0, 2, 4);
        let mut q = p.clone();
        for c in 0..3 {
            q.conv_w.data_mut().swap(k1 * 3 + c, k2 * 3 + c);
        }
        q.conv_b.data_mut().swap(k1, k2);
        let fc_in = p.fc_w.shape()[1];
        for row in 0..p.fc_units() {
            for cell in 0..fc_in / kc {
                q.fc_w.data_mut().swap(row * fc_in + cell * kc + k1, row * fc_in + cell * kc + k2);
            }
        }
        let patch = random_patch(8, 9);
        let a = forward(&p, &patch).unwrap();
        let b = forward(&q, &patch).unwrap();
        for c in 0..3 {
            // Summation order inside the dense layer changes, so only rounding differs.
            assert!((a[c] - b[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn patch_size_must_fit_grid() {
        let p = init_params(&toy_hyper(), 1).unwrap();
        assert!(matches!(forward(&p, &random_patch(9, 1)), Err(Error::Shape(_))));
        // A larger patch with a proportionally larger pool window still works.
        assert!(forward(&p, &random_patch(16, 1)).is_ok());
    }

    #[test]
    fn non_finite_input_is_a_numeric_fault() {
        let p = init_params(&toy_hyper(), 1).unwrap();
        let mut patch = random_patch(8, 2);
        patch.data[5] = f64::NAN;
        assert!(matches!(forward(&p, &patch), Err(Error::NumericFault(_))));
    }

    #[test]
    fn validate_rejects_inconsistent_shapes() {
        let mut p = NetworkParams::zeros(4, 1, 2, 5);
        p.fc_w = Tensor::zeros(&[5, 15]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn training_reduces_loss_on_single_sample() {
        let h = HyperParams {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            ..toy_hyper()
        };
        let mut p = init_params(&h, 5).unwrap();
        let patch = random_patch(8, 6);
        let gt = Illuminant::normalize([0.7, 0.5, 0.3]).unwrap();
        let samples = [(&patch, gt)];
        let (initial, _) = batch_gradient(&p, &samples, LossKind::Euclidean).unwrap();
        let mut state = MomentumState::new(&p);
        for _ in 0..200 {
            let (_, g) = batch_gradient(&p, &samples, LossKind::Euclidean).unwrap();
            sgd_step(&mut p, &g, &h, &mut state).unwrap();
        }
        let (last, _) = batch_gradient(&p, &samples, LossKind::Euclidean).unwrap();
        assert!(last <= 0.1 * initial, "{initial} -> {last}");
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let h = toy_hyper();
        let p = init_params(&h, 8).unwrap();
        let patches: Vec<Patch> = (0..19).map(|i| random_patch(8, 100 + i)).collect();
        let gt = Illuminant::normalize([0.3, 0.6, 0.5]).unwrap();
        let samples: Vec<_> = patches.iter().map(|p| (p, gt)).collect();
        let (loss, g) = batch_gradient(&p, &samples, LossKind::Euclidean).unwrap();
        let mut acc = p.zeros_like();
        let mut total = 0.0;
        for s in &samples {
            let (l, gi) = batch_gradient(&p, std::slice::from_ref(s), LossKind::Euclidean).unwrap();
            total += l;
            acc.add_assign(&gi);
        }
        assert!((loss - total / 19.0).abs() < 1e-12);
        for (a, b) in g.layers().iter().zip(acc.layers()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y / 19.0).abs() < 1e-12);
            }
        }
    }
}

//! Perceptron head with hand-written forward and backward passes.
//!
//! Each hidden layer is `linear → batch-norm → ReLU → dropout`; the output
//! layer is a bare linear map to one logit per sample. Training arithmetic is
//! done in `f64`.
//!
//! Batch-norm in train mode normalizes with the biased batch variance. Running
//! statistics are not touched by [`forward`]; the trainer folds a cached pass
//! into them with [`update_running_stats`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::robust_loss::sigmoid;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("invalid layer sizes {0:?}: need [d_in, h.., 1] with every size positive")]
    BadDims(Vec<usize>),
    #[error("input has {found} features, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("train-mode batch needs at least 2 samples, got {0}")]
    TrainBatchTooSmall(usize),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("cache or mask does not match parameters/batch: {0}")]
    StaleCache(String),
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: BatchNorm,
}

/// All parameters of the head, including batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden: Vec<HiddenLayer>,
    pub output: Linear,
}

fn check_dims(dims: &[usize]) -> Result<(), MlpError> {
    if dims.len() < 3 || dims.contains(&0) || *dims.last().unwrap() != 1 {
        return Err(MlpError::BadDims(dims.to_vec()));
    }
    Ok(())
}

/// Layer sizes of the default head for a given input width.
pub fn default_dims(input_dim: usize, hidden: usize) -> Vec<usize> {
    vec![input_dim, hidden, hidden, 1]
}

/// He-initialized parameters: weights `N(0, 2/fan_in)`, biases and shifts 0,
/// scales 1, running mean 0 and running variance 1.
pub fn init_params(dims: &[usize], seed: u64) -> Result<MlpParams, MlpError> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut linear = |fan_in: usize, fan_out: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive variance");
        Linear {
            weight: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng)),
            bias: Array1::zeros(fan_out),
        }
    };
    let last = dims.len() - 1;
    let hidden = (0..last - 1)
        .map(|l| HiddenLayer {
            linear: linear(dims[l], dims[l + 1]),
            norm: BatchNorm {
                scale: Array1::ones(dims[l + 1]),
                shift: Array1::zeros(dims[l + 1]),
                running_mean: Array1::zeros(dims[l + 1]),
                running_var: Array1::ones(dims[l + 1]),
            },
        })
        .collect();
    let output = linear(dims[last - 1], 1);
    Ok(MlpParams { hidden, output })
}

impl MlpParams {
    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self
            .hidden
            .iter()
            .map(|h| h.linear.weight.ncols())
            .collect();
        dims.push(self.output.weight.ncols());
        dims.push(1);
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims()[0]
    }

    /// Trainable tensors in canonical order: for each hidden layer weight,
    /// bias, scale, shift; then output weight and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for h in &self.hidden {
            out.push(h.linear.weight.as_slice().expect("standard layout"));
            out.push(h.linear.bias.as_slice().expect("standard layout"));
            out.push(h.norm.scale.as_slice().expect("standard layout"));
            out.push(h.norm.shift.as_slice().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice().expect("standard layout"));
        out.push(self.output.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for h in &mut self.hidden {
            out.push(h.linear.weight.as_slice_mut().expect("standard layout"));
            out.push(h.linear.bias.as_slice_mut().expect("standard layout"));
            out.push(h.norm.scale.as_slice_mut().expect("standard layout"));
            out.push(h.norm.shift.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice_mut().expect("standard layout"));
        out.push(self.output.bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Overwrites every tensor, running statistics included, with those of
    /// `src` without reallocating. Panics if the dimensions differ.
    pub fn copy_from(&mut self, src: &MlpParams) {
        assert_eq!(
            self.dims(),
            src.dims(),
            "copy between differently shaped heads"
        );
        for (dst, s) in self.tensors_mut().into_iter().zip(src.tensors()) {
            dst.copy_from_slice(s);
        }
        for (dst, s) in self.hidden.iter_mut().zip(&src.hidden) {
            dst.norm.running_mean.assign(&s.norm.running_mean);
            dst.norm.running_var.assign(&s.norm.running_var);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks finiteness of every tensor and positivity of running variances.
    pub fn validate(&self) -> Result<(), MlpError> {
        if self
            .tensors()
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            return Err(MlpError::NonFinite("trainable tensor"));
        }
        for h in &self.hidden {
            if h.norm.running_mean.iter().any(|v| !v.is_finite()) {
                return Err(MlpError::NonFinite("running mean"));
            }
            if h.norm
                .running_var
                .iter()
                .any(|v| !(v.is_finite() && *v > 0.0))
            {
                return Err(MlpError::NonFinite("running variance"));
            }
        }
        Ok(())
    }
}

/// Gradients with the same layout as the trainable tensors of [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<HiddenGradients>,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            hidden: params
                .hidden
                .iter()
                .map(|h| HiddenGradients {
                    weight: Array2::zeros(h.linear.weight.dim()),
                    bias: Array1::zeros(h.linear.bias.len()),
                    scale: Array1::zeros(h.norm.scale.len()),
                    shift: Array1::zeros(h.norm.shift.len()),
                })
                .collect(),
            output_weight: Array2::zeros(params.output.weight.dim()),
            output_bias: Array1::zeros(params.output.bias.len()),
        }
    }

    /// Same order as [`MlpParams::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for h in &self.hidden {
            out.push(h.weight.as_slice().expect("standard layout"));
            out.push(h.bias.as_slice().expect("standard layout"));
            out.push(h.scale.as_slice().expect("standard layout"));
            out.push(h.shift.as_slice().expect("standard layout"));
        }
        out.push(self.output_weight.as_slice().expect("standard layout"));
        out.push(self.output_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for h in &mut self.hidden {
            out.push(h.weight.as_slice_mut().expect("standard layout"));
            out.push(h.bias.as_slice_mut().expect("standard layout"));
            out.push(h.scale.as_slice_mut().expect("standard layout"));
            out.push(h.shift.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output_weight.as_slice_mut().expect("standard layout"));
        out.push(self.output_bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Inverted-dropout masks, one `n × width` matrix per hidden layer, with
/// entries in `{0, 1/(1−p)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layers: Vec<Array2<f64>>,
}

impl DropoutMasks {
    /// All-ones masks (dropout disabled).
    pub fn identity(params: &MlpParams, batch: usize) -> Self {
        Self {
            layers: params
                .hidden
                .iter()
                .map(|h| Array2::ones((batch, h.linear.weight.nrows())))
                .collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        params: &MlpParams,
        batch: usize,
        rate: f64,
        rng: &mut R,
    ) -> Result<Self, MlpError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(MlpError::BadDropout(rate));
        }
        if rate == 0.0 {
            return Ok(Self::identity(params, batch));
        }
        let keep = 1.0 / (1.0 - rate);
        Ok(Self {
            layers: params
                .hidden
                .iter()
                .map(|h| {
                    Array2::from_shape_simple_fn((batch, h.linear.weight.nrows()), || {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Batch statistics and the given dropout masks.
    Train(&'a DropoutMasks),
    /// Running statistics, no dropout.
    Eval,
}

/// Intermediate values of one hidden layer in a train-mode pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Array2<f64>,
    pub pre_norm: Array2<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub normalized: Array2<f64>,
    pub activated: Array2<f64>,
    pub mask: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    /// Input of the output layer (dropout output of the last hidden layer).
    pub head_input: Array2<f64>,
    pub logits: Array1<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.logits.len()
    }
}

fn linear_forward(linear: &Linear, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&linear.weight.t());
    z += &linear.bias;
    z
}

/// Runs the head on an `n × d` batch. The cache is only produced in train
/// mode.
pub fn forward(
    params: &MlpParams,
    batch: ArrayView2<f64>,
    mode: Mode<'_>,
) -> Result<(Array1<f64>, Option<ForwardCache>), MlpError> {
    let n = batch.nrows();
    let expected = params.input_dim();
    if batch.ncols() != expected {
        return Err(MlpError::DimensionMismatch {
            expected,
            found: batch.ncols(),
        });
    }
    match mode {
        Mode::Eval => {
            let mut x = batch.to_owned();
            for h in &params.hidden {
                let mut z = linear_forward(&h.linear, &x.view());
                let n = &h.norm;
                let inv_std = n.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                Zip::from(z.rows_mut()).for_each(|mut row| {
                    Zip::from(&mut row)
                        .and(&n.running_mean)
                        .and(&inv_std)
                        .and(&n.scale)
                        .and(&n.shift)
                        .for_each(|v, &m, &is, &g, &s| *v = (g * (*v - m) * is + s).max(0.0));
                });
                x = z;
            }
            let logits = linear_forward(&params.output, &x.view())
                .column(0)
                .to_owned();
            Ok((logits, None))
        }
        Mode::Train(masks) => {
            if n < 2 {
                return Err(MlpError::TrainBatchTooSmall(n));
            }
            if masks.layers.len() != params.hidden.len() {
                return Err(MlpError::StaleCache("mask layer count".into()));
            }
            let mut layers = Vec::with_capacity(params.hidden.len());
            let mut x = batch.to_owned();
            for (h, mask) in params.hidden.iter().zip(&masks.layers) {
                if mask.dim() != (n, h.linear.weight.nrows()) {
                    return Err(MlpError::StaleCache(format!(
                        "mask shape {:?}, expected {:?}",
                        mask.dim(),
                        (n, h.linear.weight.nrows())
                    )));
                }
                let z = linear_forward(&h.linear, &x.view());
                let mean = z.mean_axis(Axis(0)).expect("n >= 2");
                let var = z.var_axis(Axis(0), 0.0);
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let normalized = (&z - &mean) * &inv_std;
                let activated = (&normalized * &h.norm.scale + &h.norm.shift).mapv(|v| v.max(0.0));
                let out = &activated * mask;
                layers.push(LayerCache {
                    input: std::mem::replace(&mut x, out),
                    pre_norm: z,
                    mean,
                    var,
                    normalized,
                    activated,
                    mask: mask.clone(),
                });
            }
            let logits = linear_forward(&params.output, &x.view())
                .column(0)
                .to_owned();
            let cache = ForwardCache {
                layers,
                head_input: x,
                logits: logits.clone(),
            };
            Ok((logits, Some(cache)))
        }
    }
}

/// Eval-mode logits.
pub fn forward_eval(params: &MlpParams, batch: ArrayView2<f64>) -> Result<Array1<f64>, MlpError> {
    forward(params, batch, Mode::Eval).map(|(l, _)| l)
}

/// Train-mode logits and cache.
pub fn forward_train(
    params: &MlpParams,
    batch: ArrayView2<f64>,
    masks: &DropoutMasks,
) -> Result<(Array1<f64>, ForwardCache), MlpError> {
    forward(params, batch, Mode::Train(masks)).map(|(l, c)| (l, c.expect("train mode caches")))
}

/// Exact gradients of a loss whose derivative with respect to the logits is
/// `dlogits`, back through the cached train-mode pass.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Result<Gradients, MlpError> {
    let mut out = Gradients::zeros_like(params);
    backward_into(params, cache, dlogits, &mut out)?;
    Ok(out)
}

/// [`backward`] writing into an existing buffer shaped like `params`, so a
/// training loop does not reallocate the weight gradients every batch.
pub fn backward_into(
    params: &MlpParams,
    cache: &ForwardCache,
    dlogits: &[f64],
    out: &mut Gradients,
) -> Result<(), MlpError> {
    let n = cache.batch_size();
    if dlogits.len() != n {
        return Err(MlpError::StaleCache(format!(
            "{} logit gradients for a batch of {n}",
            dlogits.len()
        )));
    }
    if cache.layers.len() != params.hidden.len()
        || cache.head_input.ncols() != params.output.weight.ncols()
    {
        return Err(MlpError::StaleCache(
            "cache shape differs from parameters".into(),
        ));
    }
    let shapes_match = out.hidden.len() == params.hidden.len()
        && out.output_weight.dim() == params.output.weight.dim()
        && out.hidden.iter().zip(&params.hidden).all(|(g, h)| {
            g.weight.dim() == h.linear.weight.dim() && g.bias.len() == h.linear.bias.len()
        });
    if !shapes_match {
        return Err(MlpError::StaleCache(
            "gradient buffer shape differs from parameters".into(),
        ));
    }
    let dz = ArrayView2::from_shape((n, 1), dlogits).expect("n × 1");
    general_mat_mul(1.0, &dz.t(), &cache.head_input, 0.0, &mut out.output_weight);
    out.output_bias[0] = dlogits.iter().sum();
    let mut upstream = dz.dot(&params.output.weight);

    let nf = n as f64;
    for ((h, c), g) in params
        .hidden
        .iter()
        .zip(&cache.layers)
        .zip(&mut out.hidden)
        .rev()
    {
        if c.pre_norm.dim() != (n, h.linear.weight.nrows()) {
            return Err(MlpError::StaleCache("layer cache shape".into()));
        }
        // dropout, then ReLU
        let mut dy = upstream * &c.mask;
        Zip::from(&mut dy).and(&c.activated).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        g.scale.assign(&(&dy * &c.normalized).sum_axis(Axis(0)));
        g.shift.assign(&dy.sum_axis(Axis(0)));
        // batch-norm through the batch statistics
        let dxhat = &dy * &h.norm.scale;
        let inv_std = c.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &c.normalized).sum_axis(Axis(0));
        let mut dz = &dxhat * nf - &sum_dxhat - &(&c.normalized * &sum_dxhat_xhat);
        dz *= &(inv_std / nf);

        general_mat_mul(1.0, &dz.t(), &c.input, 0.0, &mut g.weight);
        g.bias.assign(&dz.sum_axis(Axis(0)));
        upstream = dz.dot(&h.linear.weight);
    }
    Ok(())
}

/// Folds the batch statistics of a cached pass into the running statistics:
/// `running ← (1−m)·running + m·batch`, with the unbiased batch variance.
pub fn update_running_stats(params: &mut MlpParams, cache: &ForwardCache) {
    let n = cache.batch_size() as f64;
    let correction = n / (n - 1.0);
    for (h, c) in params.hidden.iter_mut().zip(&cache.layers) {
        let bn = &mut h.norm;
        Zip::from(&mut bn.running_mean)
            .and(&c.mean)
            .for_each(|r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        Zip::from(&mut bn.running_var)
            .and(&c.var)
            .for_each(|r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction);
    }
}

/// Eval-mode probabilities, kept strictly inside (0, 1).
pub fn predict_proba(params: &MlpParams, batch: ArrayView2<f64>) -> Result<Vec<f64>, MlpError> {
    let logits = forward_eval(params, batch)?;
    Ok(logits
        .iter()
        .map(|&z| clamp_open_unit(sigmoid(z)))
        .collect())
}

pub(crate) fn clamp_open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

//! Layer implementations with cached-forward analytic backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{OtdrError, Result};

fn state_error(layer: &str) -> OtdrError {
    OtdrError::State(format!("{layer}: backward called before forward"))
}

/// 1-D convolution (cross-correlation) over `[batch, channels, length]`.
///
/// Weight layout: `[out_channels][in_channels][kernel]`, row-major.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cache: Option<Tensor>,
}

impl Conv1d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv1d> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(OtdrError::Config(
                "conv1d channels, kernel, and stride must be >= 1".into(),
            ));
        }
        let n = out_channels * in_channels * kernel;
        Ok(Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; n],
            bias: vec![0.0; out_channels],
            grad_weight: vec![0.0; n],
            grad_bias: vec![0.0; out_channels],
            cache: None,
        })
    }

    /// He-uniform weights (`±√(6/fan_in)`), zero biases.
    pub fn init_kaiming_uniform(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_channels * self.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in self.weight.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        self.bias.fill(0.0);
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let padded = input_len + 2 * self.padding;
        if padded < self.kernel {
            return Err(OtdrError::Shape(format!(
                "kernel {} does not fit padded input of length {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(3, "conv1d")?;
        let (b, c, l) = (x.dim(0), x.dim(1), x.dim(2));
        if c != self.in_channels {
            return Err(OtdrError::Shape(format!(
                "conv1d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let ol = self.output_len(l)?;
        let mut out = Tensor::zeros(&[b, self.out_channels, ol]);

        for bi in 0..b {
            for oc in 0..self.out_channels {
                let out_row = &mut out.data[(bi * self.out_channels + oc) * ol..][..ol];
                out_row.fill(self.bias[oc]);
                for ic in 0..self.in_channels {
                    let x_row = &x.data[(bi * c + ic) * l..][..l];
                    let w_row =
                        &self.weight[(oc * self.in_channels + ic) * self.kernel..][..self.kernel];
                    for (k, &wk) in w_row.iter().enumerate() {
                        // Input index for output j: j*stride + k - padding.
                        let shift = k as isize - self.padding as isize;
                        for (j, o) in out_row.iter_mut().enumerate() {
                            let i = j as isize * self.stride as isize + shift;
                            if (0..l as isize).contains(&i) {
                                *o += wk * x_row[i as usize];
                            }
                        }
                    }
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Computes parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| state_error("conv1d"))?;
        let (b, c, l) = (x.dim(0), x.dim(1), x.dim(2));
        let ol = self.output_len(l)?;
        grad_out.expect_shape(&[b, self.out_channels, ol], "conv1d backward")?;

        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut grad_x = Tensor::zeros(&[b, c, l]);

        for bi in 0..b {
            for oc in 0..self.out_channels {
                let g_row = &grad_out.data[(bi * self.out_channels + oc) * ol..][..ol];
                self.grad_bias[oc] += g_row.iter().sum::<f64>();
                for ic in 0..self.in_channels {
                    let x_row = &x.data[(bi * c + ic) * l..][..l];
                    let w_base = (oc * self.in_channels + ic) * self.kernel;
                    let gx_row = &mut grad_x.data[(bi * c + ic) * l..][..l];
                    for k in 0..self.kernel {
                        let shift = k as isize - self.padding as isize;
                        let wk = self.weight[w_base + k];
                        let mut gw = 0.0;
                        for (j, &g) in g_row.iter().enumerate() {
                            let i = j as isize * self.stride as isize + shift;
                            if (0..l as isize).contains(&i) {
                                gw += g * x_row[i as usize];
                                gx_row[i as usize] += wk * g;
                            }
                        }
                        self.grad_weight[w_base + k] += gw;
                    }
                }
            }
        }
        Ok(grad_x)
    }
}

/// Fully connected layer over `[batch, features]`.
///
/// Weight layout: `[out_features][in_features]`, row-major.
#[derive(Clone, Debug)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize) -> Result<Dense> {
        if in_features == 0 || out_features == 0 {
            return Err(OtdrError::Config("dense feature counts must be >= 1".into()));
        }
        Ok(Dense {
            in_features,
            out_features,
            weight: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
            grad_weight: vec![0.0; out_features * in_features],
            grad_bias: vec![0.0; out_features],
            cache: None,
        })
    }

    pub fn init_kaiming_uniform(&mut self, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / self.in_features as f64).sqrt();
        for w in self.weight.iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        self.bias.fill(0.0);
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(2, "dense")?;
        let (b, f) = (x.dim(0), x.dim(1));
        if f != self.in_features {
            return Err(OtdrError::Shape(format!(
                "dense expects {} input features, got {f}",
                self.in_features
            )));
        }
        let mut out = Tensor::zeros(&[b, self.out_features]);
        for bi in 0..b {
            let x_row = &x.data[bi * f..][..f];
            for o in 0..self.out_features {
                let w_row = &self.weight[o * f..][..f];
                let dot: f64 = w_row.iter().zip(x_row).map(|(&w, &v)| w * v).sum();
                out.data[bi * self.out_features + o] = dot + self.bias[o];
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| state_error("dense"))?;
        let (b, f) = (x.dim(0), x.dim(1));
        grad_out.expect_shape(&[b, self.out_features], "dense backward")?;

        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut grad_x = Tensor::zeros(&[b, f]);
        for bi in 0..b {
            let x_row = &x.data[bi * f..][..f];
            let gx_row_base = bi * f;
            for o in 0..self.out_features {
                let g = grad_out.data[bi * self.out_features + o];
                self.grad_bias[o] += g;
                let gw_row = &mut self.grad_weight[o * f..][..f];
                for (gw, &xv) in gw_row.iter_mut().zip(x_row) {
                    *gw += g * xv;
                }
                let w_row = &self.weight[o * f..][..f];
                for (gx, &w) in grad_x.data[gx_row_base..][..f].iter_mut().zip(w_row) {
                    *gx += g * w;
                }
            }
        }
        Ok(grad_x)
    }
}

/// Elementwise max(0, x); works on any rank.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for v in out.data.iter_mut() {
            *v = v.max(0.0);
        }
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| state_error("relu"))?;
        grad_out.expect_shape(&x.shape, "relu backward")?;
        let mut grad = grad_out.clone();
        for (g, &v) in grad.data.iter_mut().zip(&x.data) {
            if v <= 0.0 {
                *g = 0.0;
            }
        }
        Ok(grad)
    }
}

/// Elementwise logistic sigmoid; works on any rank.
#[derive(Clone, Debug, Default)]
pub struct Sigmoid {
    cache: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Sigmoid {
        Sigmoid { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for v in out.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.cache = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self.cache.as_ref().ok_or_else(|| state_error("sigmoid"))?;
        grad_out.expect_shape(&y.shape, "sigmoid backward")?;
        let mut grad = grad_out.clone();
        for (g, &s) in grad.data.iter_mut().zip(&y.data) {
            *g *= s * (1.0 - s);
        }
        Ok(grad)
    }
}

/// Non-overlapping max-pooling over the length axis of `[b, c, l]`;
/// output length ⌊l/window⌋, trailing partial window dropped. Ties break
/// toward the lowest index.
#[derive(Clone, Debug)]
pub struct MaxPool1d {
    pub window: usize,
    /// Flat input index of each output's argmax, plus the input shape.
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(window: usize) -> Result<MaxPool1d> {
        if window == 0 {
            return Err(OtdrError::Config("maxpool window must be >= 1".into()));
        }
        Ok(MaxPool1d { window, cache: None })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        x.expect_rank(3, "maxpool1d")?;
        let (b, c, l) = (x.dim(0), x.dim(1), x.dim(2));
        if self.window > l {
            return Err(OtdrError::Shape(format!(
                "maxpool window {} exceeds input length {l}",
                self.window
            )));
        }
        let ol = l / self.window;
        let mut out = Tensor::zeros(&[b, c, ol]);
        let mut argmax = vec![0usize; b * c * ol];
        for bc in 0..b * c {
            let x_row = &x.data[bc * l..][..l];
            for j in 0..ol {
                let base = j * self.window;
                let mut best = base;
                for i in base + 1..base + self.window {
                    if x_row[i] > x_row[best] {
                        best = i;
                    }
                }
                out.data[bc * ol + j] = x_row[best];
                argmax[bc * ol + j] = bc * l + best;
            }
        }
        self.cache = Some((argmax, x.shape.clone()));
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (argmax, in_shape) =
            self.cache.as_ref().ok_or_else(|| state_error("maxpool1d"))?;
        if grad_out.data.len() != argmax.len() {
            return Err(OtdrError::Shape(format!(
                "maxpool backward expects {} gradients, got {}",
                argmax.len(),
                grad_out.data.len()
            )));
        }
        let mut grad_x = Tensor::zeros(in_shape);
        for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
            grad_x.data[idx] += g;
        }
        Ok(grad_x)
    }
}

/// Inverted dropout: in training, zero each element with probability
/// `rate` and scale survivors by 1/(1−rate); in inference, identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    /// Multiplicative mask of the last training forward; `None` after an
    /// inference forward (backward is then the identity).
    cache: Option<Option<Vec<f64>>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Dropout> {
        if !(0.0..1.0).contains(&rate) {
            return Err(OtdrError::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Dropout { rate, cache: None })
    }

    /// `rng: Some` selects training mode; `None` selects inference.
    pub fn forward(&mut self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Tensor {
        match rng {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let scale = 1.0 / keep;
                let mask: Vec<f64> = x
                    .data
                    .iter()
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let mut out = x.clone();
                for (v, &m) in out.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                self.cache = Some(Some(mask));
                out
            }
            _ => {
                self.cache = Some(None);
                x.clone()
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.cache.as_ref().ok_or_else(|| state_error("dropout"))?;
        match mask {
            None => Ok(grad_out.clone()),
            Some(mask) => {
                if grad_out.data.len() != mask.len() {
                    return Err(OtdrError::Shape(format!(
                        "dropout backward expects {} gradients, got {}",
                        mask.len(),
                        grad_out.data.len()
                    )));
                }
                let mut grad = grad_out.clone();
                for (g, &m) in grad.data.iter_mut().zip(mask) {
                    *g *= m;
                }
                Ok(grad)
            }
        }
    }
}

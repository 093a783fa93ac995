//! Multi-task 1-D CNN: shared conv trunk, max-pool, and three dense heads
//! (event detection, position, reflectance), with the weighted loss,
//! training loop, and checkpoint format.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sequence, Split, WINDOW_LEN};
use crate::error::{OtdrError, Result};
use crate::sim::ConfigFormat;
use crate::nn::{bce, bce_grad, Adam, Conv1d, Dense, Dropout, MaxPool1d, Relu, Sigmoid, Tensor};
use crate::util::{derive_seed, sha256_hex};

/// Microbatch width for gradient sharding; gradients are reduced in
/// microbatch order, so results do not depend on the thread count.
pub const MICROBATCH: usize = 8;

/// Position targets are scaled by 1/(WINDOW_LEN − 1) into [0, 1].
pub const POS_SCALE: f64 = (WINDOW_LEN - 1) as f64;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

const CHECKPOINT_MAGIC: &[u8; 8] = b"OTDRMLNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Filters of the four conv layers.
    pub conv_filters: [usize; 4],
    /// Hidden units in each head.
    pub head_hidden: usize,
    /// Loss weights [λ1 detection, λ2 position, λ3 reflectance].
    pub loss_weights: [f64; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool_window: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation total loss.
    pub patience: usize,
    /// Learning-rate decay factor applied after `lr_decay_patience` epochs
    /// without validation improvement.
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_filters: [64, 32, 32, 16],
            head_hidden: 16,
            loss_weights: [0.33, 0.33, 0.33],
            kernel: 3,
            stride: 1,
            padding: 1,
            pool_window: 2,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            lr_decay_factor: 0.5,
            lr_decay_patience: 8,
            lr_min: 1e-5,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.iter().any(|&f| f == 0) {
            return Err(OtdrError::Config("conv_filters must all be >= 1".into()));
        }
        if self.head_hidden == 0 {
            return Err(OtdrError::Config("head_hidden must be >= 1".into()));
        }
        if self.loss_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(OtdrError::Config(format!(
                "loss weights must be finite and >= 0, got {:?}",
                self.loss_weights
            )));
        }
        if self.kernel == 0 || self.stride == 0 || self.pool_window == 0 {
            return Err(OtdrError::Config(
                "kernel, stride, and pool_window must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(OtdrError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lr > 0.0) || !(self.lr_min > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(OtdrError::Config("learning rates and decay must be > 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(OtdrError::Config(
                "batch_size, max_epochs, and patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Optional overrides as read from a TOML/JSON file or CLI flags.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfigPatch {
    pub conv_filters: Option<[usize; 4]>,
    pub head_hidden: Option<usize>,
    pub loss_weights: Option<[f64; 3]>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub pool_window: Option<usize>,
    pub dropout: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub lr_decay_factor: Option<f64>,
    pub lr_decay_patience: Option<usize>,
    pub lr_min: Option<f64>,
    pub seed: Option<u64>,
}

impl ModelConfigPatch {
    /// Parses a patch from TOML or JSON source text.
    pub fn parse(text: &str, format: ConfigFormat) -> Result<Self> {
        match format {
            ConfigFormat::Toml => {
                toml::from_str(text).map_err(|e| OtdrError::Format(format!("config TOML: {e}")))
            }
            ConfigFormat::Json => serde_json::from_str(text)
                .map_err(|e| OtdrError::Format(format!("config JSON: {e}"))),
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        if let Some(v) = self.conv_filters {
            cfg.conv_filters = v;
        }
        if let Some(v) = self.head_hidden {
            cfg.head_hidden = v;
        }
        if let Some(v) = self.loss_weights {
            cfg.loss_weights = v;
        }
        if let Some(v) = self.kernel {
            cfg.kernel = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.padding {
            cfg.padding = v;
        }
        if let Some(v) = self.pool_window {
            cfg.pool_window = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.lr_decay_factor {
            cfg.lr_decay_factor = v;
        }
        if let Some(v) = self.lr_decay_patience {
            cfg.lr_decay_patience = v;
        }
        if let Some(v) = self.lr_min {
            cfg.lr_min = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network output for one sequence, denormalized to physical units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Event probability in [0, 1].
    pub p_event: f64,
    /// Fractional event-peak index within the window, clamped to
    /// [0, WINDOW_LEN − 1].
    pub position_idx_hat: f64,
    /// Reflectance estimate, clamped to the configured dB range.
    pub reflectance_db_hat: f64,
}

/// Decision rule at threshold `tau`: class 1 iff p_event ≥ tau.
pub fn predict_threshold(p_event: f64, tau: f64) -> bool {
    p_event >= tau
}

/// Raw head outputs for a batch, on the normalized target scale.
#[derive(Clone, Debug)]
pub struct BatchOutputs {
    pub p_event: Vec<f64>,
    pub pos_norm: Vec<f64>,
    pub refl_norm: Vec<f64>,
}

/// Per-task loss components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub pos_mse: f64,
    pub refl_mse: f64,
}

struct HeadBlock {
    fc1: Dense,
    act: Relu,
    fc2: Dense,
}

impl HeadBlock {
    fn new(in_features: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<HeadBlock> {
        let mut fc1 = Dense::new(in_features, hidden)?;
        let mut fc2 = Dense::new(hidden, 1)?;
        fc1.init_kaiming_uniform(rng);
        fc2.init_kaiming_uniform(rng);
        Ok(HeadBlock { fc1, act: Relu::new(), fc2 })
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = self.act.forward(&h);
        self.fc2.forward(&h)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward(grad_out)?;
        let g = self.act.backward(&g)?;
        self.fc1.backward(&g)
    }
}

struct ConvBlock {
    conv: Conv1d,
    act: Relu,
    drop: Dropout,
}

impl ConvBlock {
    fn forward(&mut self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.act.forward(&y);
        Ok(self.drop.forward(&y, rng))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.drop.backward(grad_out)?;
        let g = self.act.backward(&g)?;
        self.conv.backward(&g)
    }
}

/// The assembled multi-task network.
///
/// Parameter declaration order (used by the flat vector and checkpoints):
/// conv1..conv4, then detection, position, reflectance heads; within each
/// layer weights then biases.
pub struct MultiTaskNet {
    pub cfg: ModelConfig,
    /// Reflectance targets are scaled to [0, 1] over this dB range.
    pub reflectance_range: [f64; 2],
    convs: Vec<ConvBlock>,
    pool: MaxPool1d,
    det_head: HeadBlock,
    pos_head: HeadBlock,
    refl_head: HeadBlock,
    det_sigmoid: Sigmoid,
    /// Shape entering the flatten step, kept for the backward reshape.
    pooled_shape: Vec<usize>,
}

impl MultiTaskNet {
    /// Builds and initializes the network (He-uniform weights, zero biases)
    /// from the config seed.
    pub fn new(cfg: &ModelConfig, reflectance_range: [f64; 2]) -> Result<MultiTaskNet> {
        cfg.validate()?;
        if !(reflectance_range[0] < reflectance_range[1]) {
            return Err(OtdrError::Config(format!(
                "reflectance range must be increasing, got {reflectance_range:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_INIT]));

        let mut convs = Vec::with_capacity(4);
        let mut in_c = 1;
        let mut len = WINDOW_LEN;
        for &out_c in &cfg.conv_filters {
            let mut conv = Conv1d::new(in_c, out_c, cfg.kernel, cfg.stride, cfg.padding)?;
            conv.init_kaiming_uniform(&mut rng);
            len = conv.output_len(len)?;
            convs.push(ConvBlock { conv, act: Relu::new(), drop: Dropout::new(cfg.dropout)? });
            in_c = out_c;
        }
        let pool = MaxPool1d::new(cfg.pool_window)?;
        if cfg.pool_window > len {
            return Err(OtdrError::Shape(format!(
                "pool window {} exceeds conv output length {len}",
                cfg.pool_window
            )));
        }
        let flat = cfg.conv_filters[3] * (len / cfg.pool_window);

        Ok(MultiTaskNet {
            cfg: cfg.clone(),
            reflectance_range,
            convs,
            pool,
            det_head: HeadBlock::new(flat, cfg.head_hidden, &mut rng)?,
            pos_head: HeadBlock::new(flat, cfg.head_hidden, &mut rng)?,
            refl_head: HeadBlock::new(flat, cfg.head_hidden, &mut rng)?,
            det_sigmoid: Sigmoid::new(),
            pooled_shape: Vec::new(),
        })
    }

    /// Stacks normalized sequence values into a `[B, 1, WINDOW_LEN]` tensor.
    pub fn input_tensor(seqs: &[&Sequence]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(OtdrError::Data("empty batch".into()));
        }
        let mut data = Vec::with_capacity(seqs.len() * WINDOW_LEN);
        for s in seqs {
            data.extend(s.values.iter().map(|&v| v as f64));
        }
        Tensor::from_vec(&[seqs.len(), 1, WINDOW_LEN], data)
    }

    /// Normalized regression target pair (position, reflectance) for a
    /// class-1 sequence; zeros for class 0 (masked out of the loss).
    fn targets(&self, s: &Sequence) -> (f64, f64) {
        let [lo, hi] = self.reflectance_range;
        let pos = s.position_idx.map(|p| p as f64 / POS_SCALE).unwrap_or(0.0);
        let refl = s
            .reflectance_db
            .map(|r| (r as f64 - lo) / (hi - lo))
            .unwrap_or(0.0);
        (pos, refl)
    }

    fn forward_inner(
        &mut self,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchOutputs> {
        x.expect_rank(3, "model input")?;
        if x.dim(1) != 1 || x.dim(2) != WINDOW_LEN {
            return Err(OtdrError::Shape(format!(
                "model input must be [B, 1, {WINDOW_LEN}], got {:?}",
                x.shape
            )));
        }
        let mut h = x.clone();
        for block in self.convs.iter_mut() {
            h = block.forward(&h, rng.as_deref_mut())?;
        }
        let pooled = self.pool.forward(&h)?;
        self.pooled_shape = pooled.shape.clone();
        let b = pooled.dim(0);
        let flat = pooled.reshaped(&[b, pooled.dim(1) * pooled.dim(2)])?;

        let det_logit = self.det_head.forward(&flat)?;
        let p_event = self.det_sigmoid.forward(&det_logit);
        let pos = self.pos_head.forward(&flat)?;
        let refl = self.refl_head.forward(&flat)?;
        Ok(BatchOutputs { p_event: p_event.data, pos_norm: pos.data, refl_norm: refl.data })
    }

    /// Training-mode forward (dropout active, masks drawn from `rng`).
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<BatchOutputs> {
        self.forward_inner(x, Some(rng))
    }

    /// Inference-mode forward (dropout inactive).
    pub fn forward_eval(&mut self, x: &Tensor) -> Result<BatchOutputs> {
        self.forward_inner(x, None)
    }

    /// Eq.-style weighted loss: λ1·BCE + λ2·MSE(position) + λ3·MSE
    /// (reflectance), the BCE averaged over the batch and each regression
    /// averaged over the class-1 samples it is masked to.
    pub fn total_loss(&self, outputs: &BatchOutputs, seqs: &[&Sequence]) -> Result<LossBreakdown> {
        if seqs.is_empty() {
            return Err(OtdrError::Data("empty batch".into()));
        }
        if outputs.p_event.len() != seqs.len() {
            return Err(OtdrError::Shape(format!(
                "outputs cover {} sequences, labels cover {}",
                outputs.p_event.len(),
                seqs.len()
            )));
        }
        let [l1, l2, l3] = self.cfg.loss_weights;
        let mut bce_sum = 0.0;
        let mut pos_sum = 0.0;
        let mut refl_sum = 0.0;
        let mut n_pos = 0usize;
        for (i, s) in seqs.iter().enumerate() {
            bce_sum += bce(outputs.p_event[i], s.class_id as f64);
            if s.class_id == 1 {
                let (pt, rt) = self.targets(s);
                pos_sum += (outputs.pos_norm[i] - pt).powi(2);
                refl_sum += (outputs.refl_norm[i] - rt).powi(2);
                n_pos += 1;
            }
        }
        let bce = bce_sum / seqs.len() as f64;
        let pos_mse = if n_pos > 0 { pos_sum / n_pos as f64 } else { 0.0 };
        let refl_mse = if n_pos > 0 { refl_sum / n_pos as f64 } else { 0.0 };
        Ok(LossBreakdown {
            total: l1 * bce + l2 * pos_mse + l3 * refl_mse,
            bce,
            pos_mse,
            refl_mse,
        })
    }

    /// Backpropagates the total loss for the cached forward pass.
    ///
    /// `batch_total` and `batch_positives` are the divisor counts of the
    /// full logical batch, so microbatch gradients sum exactly to the
    /// full-batch gradient.
    pub fn backward(
        &mut self,
        outputs: &BatchOutputs,
        seqs: &[&Sequence],
        batch_total: usize,
        batch_positives: usize,
    ) -> Result<()> {
        let b = seqs.len();
        if outputs.p_event.len() != b {
            return Err(OtdrError::Shape("outputs/labels length mismatch".into()));
        }
        let [l1, l2, l3] = self.cfg.loss_weights;
        let mut g_det = Tensor::zeros(&[b, 1]);
        let mut g_pos = Tensor::zeros(&[b, 1]);
        let mut g_refl = Tensor::zeros(&[b, 1]);
        for (i, s) in seqs.iter().enumerate() {
            let y = s.class_id as f64;
            g_det.data[i] = l1 * bce_grad(outputs.p_event[i], y) / batch_total as f64;
            if s.class_id == 1 && batch_positives > 0 {
                let (pt, rt) = self.targets(s);
                g_pos.data[i] =
                    l2 * 2.0 * (outputs.pos_norm[i] - pt) / batch_positives as f64;
                g_refl.data[i] =
                    l3 * 2.0 * (outputs.refl_norm[i] - rt) / batch_positives as f64;
            }
        }

        let g_logit = self.det_sigmoid.backward(&g_det)?;
        let mut g_flat = self.det_head.backward(&g_logit)?;
        let g2 = self.pos_head.backward(&g_pos)?;
        let g3 = self.refl_head.backward(&g_refl)?;
        for i in 0..g_flat.data.len() {
            g_flat.data[i] += g2.data[i] + g3.data[i];
        }

        let g_pooled = g_flat.reshaped(&self.pooled_shape)?;
        let mut g = self.pool.backward(&g_pooled)?;
        for block in self.convs.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(())
    }

    fn param_layers(&self) -> Vec<(&[f64], &[f64])> {
        let mut v: Vec<(&[f64], &[f64])> = Vec::with_capacity(10);
        for b in &self.convs {
            v.push((&b.conv.weight, &b.conv.bias));
        }
        for h in [&self.det_head, &self.pos_head, &self.refl_head] {
            v.push((&h.fc1.weight, &h.fc1.bias));
            v.push((&h.fc2.weight, &h.fc2.bias));
        }
        v
    }

    pub fn n_params(&self) -> usize {
        self.param_layers().iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameters as one vector, in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.param_layers() {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Gradients as one vector, aligned with [`flat_params`].
    ///
    /// [`flat_params`]: MultiTaskNet::flat_params
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in &self.convs {
            out.extend_from_slice(&b.conv.grad_weight);
            out.extend_from_slice(&b.conv.grad_bias);
        }
        for h in [&self.det_head, &self.pos_head, &self.refl_head] {
            out.extend_from_slice(&h.fc1.grad_weight);
            out.extend_from_slice(&h.fc1.grad_bias);
            out.extend_from_slice(&h.fc2.grad_weight);
            out.extend_from_slice(&h.fc2.grad_bias);
        }
        out
    }

    /// Writes a flat parameter vector back into the layers.
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(OtdrError::Shape(format!(
                "network has {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut off = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[off..off + dst.len()]);
            off += dst.len();
        };
        for b in self.convs.iter_mut() {
            take(&mut b.conv.weight);
            take(&mut b.conv.bias);
        }
        for h in [&mut self.det_head, &mut self.pos_head, &mut self.refl_head] {
            take(&mut h.fc1.weight);
            take(&mut h.fc1.bias);
            take(&mut h.fc2.weight);
            take(&mut h.fc2.bias);
        }
        Ok(())
    }

    /// Clone with freshly shared parameters but empty caches; used to fan
    /// microbatches out across workers.
    fn worker_clone(&self) -> MultiTaskNet {
        let mut net = MultiTaskNet::new(&self.cfg, self.reflectance_range)
            .expect("config was validated at construction");
        net.set_flat_params(&self.flat_params()).expect("same architecture");
        net
    }

    /// Inference on a slice of sequences; stateless for the caller.
    pub fn predict(&self, seqs: &[&Sequence]) -> Result<Vec<Prediction>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let [lo, hi] = self.reflectance_range;
        let chunks: Vec<&[&Sequence]> = seqs.chunks(256).collect();
        let per_chunk: Vec<Vec<Prediction>> = chunks
            .into_par_iter()
            .map(|chunk| {
                let mut net = self.worker_clone();
                let x = MultiTaskNet::input_tensor(chunk)?;
                let out = net.forward_eval(&x)?;
                Ok((0..chunk.len())
                    .map(|i| Prediction {
                        p_event: out.p_event[i],
                        position_idx_hat: (out.pos_norm[i] * POS_SCALE).clamp(0.0, POS_SCALE),
                        reflectance_db_hat: (lo + out.refl_norm[i] * (hi - lo)).clamp(lo, hi),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(per_chunk.into_iter().flatten().collect())
    }

    /// Architecture descriptor hashed into checkpoints.
    fn arch_descriptor(&self) -> String {
        let c = &self.cfg;
        format!(
            "v{CHECKPOINT_VERSION}|win{WINDOW_LEN}|conv{:?}|head{}|k{}s{}p{}|pool{}|drop{}|refl{:?}|n{}",
            c.conv_filters,
            c.head_hidden,
            c.kernel,
            c.stride,
            c.padding,
            c.pool_window,
            c.dropout,
            self.reflectance_range,
            self.n_params()
        )
    }

    /// Writes the checkpoint: header (version, architecture hash, layer
    /// dims), parameters as little-endian f64 in declaration order, then
    /// the optimizer moment buffers.
    pub fn save_checkpoint(&self, path: &Path, opt: &Adam) -> Result<()> {
        let params = self.flat_params();
        if opt.m.len() != params.len() {
            return Err(OtdrError::Shape(format!(
                "optimizer state covers {} parameters, network has {}",
                opt.m.len(),
                params.len()
            )));
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let arch_hash = sha256_hex(self.arch_descriptor().as_bytes());
        buf.extend_from_slice(arch_hash.as_bytes()); // 64 hex chars

        let c = &self.cfg;
        for dim in [
            WINDOW_LEN,
            c.conv_filters[0],
            c.conv_filters[1],
            c.conv_filters[2],
            c.conv_filters[3],
            c.head_hidden,
            c.kernel,
            c.stride,
            c.padding,
            c.pool_window,
        ] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.dropout.to_le_bytes());
        buf.extend_from_slice(&self.reflectance_range[0].to_le_bytes());
        buf.extend_from_slice(&self.reflectance_range[1].to_le_bytes());

        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in &params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf.extend_from_slice(&opt.t.to_le_bytes());
        buf.extend_from_slice(&opt.lr.to_le_bytes());
        for v in opt.m.iter().chain(&opt.v) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint, verifying magic, version, and architecture hash.
    pub fn load_checkpoint(path: &Path) -> Result<(MultiTaskNet, Adam)> {
        let bytes = fs::read(path)?;
        let mut off = 0usize;
        let need = |off: usize, n: usize| -> Result<()> {
            if off + n > bytes.len() {
                Err(OtdrError::Format("checkpoint truncated".into()))
            } else {
                Ok(())
            }
        };
        need(off, 8)?;
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(OtdrError::Format("not a checkpoint file (bad magic)".into()));
        }
        off += 8;
        need(off, 4)?;
        let version = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        off += 4;
        if version != CHECKPOINT_VERSION {
            return Err(OtdrError::Format(format!(
                "unsupported checkpoint version {version} (reader supports {CHECKPOINT_VERSION})"
            )));
        }
        need(off, 64)?;
        let stored_hash = String::from_utf8_lossy(&bytes[off..off + 64]).into_owned();
        off += 64;

        let mut dims = [0u32; 10];
        for d in dims.iter_mut() {
            need(off, 4)?;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            off += 4;
        }
        let f64_at = |off: &mut usize| -> Result<f64> {
            need(*off, 8)?;
            let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            Ok(v)
        };
        let dropout = f64_at(&mut off)?;
        let refl_lo = f64_at(&mut off)?;
        let refl_hi = f64_at(&mut off)?;

        if dims[0] as usize != WINDOW_LEN {
            return Err(OtdrError::Format(format!(
                "checkpoint window length {} does not match {WINDOW_LEN}",
                dims[0]
            )));
        }
        let cfg = ModelConfig {
            conv_filters: [
                dims[1] as usize,
                dims[2] as usize,
                dims[3] as usize,
                dims[4] as usize,
            ],
            head_hidden: dims[5] as usize,
            kernel: dims[6] as usize,
            stride: dims[7] as usize,
            padding: dims[8] as usize,
            pool_window: dims[9] as usize,
            dropout,
            ..ModelConfig::default()
        };
        let mut net = MultiTaskNet::new(&cfg, [refl_lo, refl_hi])?;
        let expect_hash = sha256_hex(net.arch_descriptor().as_bytes());
        if stored_hash != expect_hash {
            return Err(OtdrError::Format(
                "checkpoint architecture hash does not match its layer dims".into(),
            ));
        }

        need(off, 8)?;
        let n = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if n != net.n_params() {
            return Err(OtdrError::Format(format!(
                "checkpoint stores {n} parameters, architecture needs {}",
                net.n_params()
            )));
        }
        let mut params = vec![0.0f64; n];
        for p in params.iter_mut() {
            *p = f64_at(&mut off)?;
        }
        net.set_flat_params(&params)?;

        need(off, 8)?;
        let t = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        let lr = f64_at(&mut off)?;
        let mut opt = Adam::new(n, lr);
        opt.t = t;
        for m in opt.m.iter_mut() {
            *m = f64_at(&mut off)?;
        }
        for v in opt.v.iter_mut() {
            *v = f64_at(&mut off)?;
        }
        if off != bytes.len() {
            return Err(OtdrError::Format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - off
            )));
        }
        Ok((net, opt))
    }
}

/// Per-epoch loss record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Epoch means of the minibatch training losses (dropout active).
    pub train_total: f64,
    pub train_bce: f64,
    pub train_pos_mse: f64,
    pub train_refl_mse: f64,
    /// Full-pass inference-mode validation losses.
    pub val_total: f64,
    pub val_bce: f64,
    pub val_pos_mse: f64,
    pub val_refl_mse: f64,
}

/// Training record: per-epoch losses plus the early-stopping outcome.
#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    /// Validation total loss of the untrained network.
    pub initial_val_total: f64,
}

impl TrainHistory {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| OtdrError::Format(format!("writing history: {e}")))?;
        w.write_record([
            "epoch",
            "lr",
            "train_total",
            "train_bce",
            "train_pos_mse",
            "train_refl_mse",
            "val_total",
            "val_bce",
            "val_pos_mse",
            "val_refl_mse",
        ])
        .and_then(|()| {
            self.epochs.iter().try_for_each(|e| {
                w.write_record([
                    e.epoch.to_string(),
                    format!("{:.9e}", e.lr),
                    format!("{:.9e}", e.train_total),
                    format!("{:.9e}", e.train_bce),
                    format!("{:.9e}", e.train_pos_mse),
                    format!("{:.9e}", e.train_refl_mse),
                    format!("{:.9e}", e.val_total),
                    format!("{:.9e}", e.val_bce),
                    format!("{:.9e}", e.val_pos_mse),
                    format!("{:.9e}", e.val_refl_mse),
                ])
            })
        })
        .and_then(|()| w.flush().map_err(csv::Error::from))
        .map_err(|e| OtdrError::Format(format!("writing history: {e}")))?;
        Ok(())
    }
}

/// Reproducibility record written next to a trained checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRunManifest {
    pub model: ModelConfig,
    pub dataset_sha256: String,
    pub best_epoch: usize,
    pub best_val_total: f64,
}

impl TrainRunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| OtdrError::Format(format!("encoding run manifest: {e}")))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }
}

/// Sum-form losses of a microbatch, for exact epoch-mean accumulation.
struct LossSums {
    bce: f64,
    pos_sq: f64,
    refl_sq: f64,
    n: usize,
    n_pos: usize,
}

fn batch_loss_sums(net: &MultiTaskNet, out: &BatchOutputs, seqs: &[&Sequence]) -> LossSums {
    let mut sums = LossSums { bce: 0.0, pos_sq: 0.0, refl_sq: 0.0, n: seqs.len(), n_pos: 0 };
    for (i, s) in seqs.iter().enumerate() {
        sums.bce += bce(out.p_event[i], s.class_id as f64);
        if s.class_id == 1 {
            let (pt, rt) = net.targets(s);
            sums.pos_sq += (out.pos_norm[i] - pt).powi(2);
            sums.refl_sq += (out.refl_norm[i] - rt).powi(2);
            sums.n_pos += 1;
        }
    }
    sums
}

/// Inference-mode loss over a whole split.
fn eval_split_loss(net: &MultiTaskNet, seqs: &[&Sequence]) -> Result<LossBreakdown> {
    let [l1, l2, l3] = net.cfg.loss_weights;
    let chunks: Vec<&[&Sequence]> = seqs.chunks(256).collect();
    let sums: Vec<LossSums> = chunks
        .into_par_iter()
        .map(|chunk| {
            let mut worker = net.worker_clone();
            let x = MultiTaskNet::input_tensor(chunk)?;
            let out = worker.forward_eval(&x)?;
            Ok(batch_loss_sums(net, &out, chunk))
        })
        .collect::<Result<_>>()?;
    let n: usize = sums.iter().map(|s| s.n).sum();
    let n_pos: usize = sums.iter().map(|s| s.n_pos).sum();
    let bce = sums.iter().map(|s| s.bce).sum::<f64>() / n.max(1) as f64;
    let pos_mse = sums.iter().map(|s| s.pos_sq).sum::<f64>() / n_pos.max(1) as f64;
    let refl_mse = sums.iter().map(|s| s.refl_sq).sum::<f64>() / n_pos.max(1) as f64;
    Ok(LossBreakdown {
        total: l1 * bce + l2 * pos_mse + l3 * refl_mse,
        bce,
        pos_mse,
        refl_mse,
    })
}

/// Trains a fresh network on the dataset's train split with early stopping
/// on the validation split; returns the best-validation network.
pub fn train(dataset: &Dataset, cfg: &ModelConfig) -> Result<(MultiTaskNet, TrainHistory)> {
    train_with_progress(dataset, cfg, |_| {})
}

/// [`train`] with a per-epoch observer, for progress reporting.
pub fn train_with_progress(
    dataset: &Dataset,
    cfg: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(MultiTaskNet, TrainHistory)> {
    cfg.validate()?;
    let train_seqs = dataset.subset(Split::Train);
    let val_seqs = dataset.subset(Split::Val);
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(OtdrError::Data(
            "training needs nonempty train and val splits".into(),
        ));
    }

    let mut net = MultiTaskNet::new(cfg, dataset.manifest.sim.reflectance_db_range)?;
    let mut opt = Adam::new(net.n_params(), cfg.lr);
    let [l1, l2, l3] = cfg.loss_weights;

    let mut history = TrainHistory {
        initial_val_total: eval_split_loss(&net, &val_seqs)?.total,
        ..TrainHistory::default()
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = net.flat_params();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut lr_stale = 0usize;

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);

        let mut ep = LossSums { bce: 0.0, pos_sq: 0.0, refl_sq: 0.0, n: 0, n_pos: 0 };
        for (step, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sequence> = batch_idx.iter().map(|&i| train_seqs[i]).collect();
            let b_total = batch.len();
            let p_total = batch.iter().filter(|s| s.class_id == 1).count();

            let micros: Vec<(usize, &[&Sequence])> =
                batch.chunks(MICROBATCH).enumerate().collect();
            let results: Vec<(Vec<f64>, LossSums)> = micros
                .into_par_iter()
                .map(|(mi, chunk)| {
                    let mut worker = net.worker_clone();
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[STREAM_DROPOUT, epoch as u64, step as u64, mi as u64],
                    ));
                    let x = MultiTaskNet::input_tensor(chunk)?;
                    let out = worker.forward_train(&x, &mut drop_rng)?;
                    worker.backward(&out, chunk, b_total, p_total)?;
                    Ok((worker.flat_grads(), batch_loss_sums(&net, &out, chunk)))
                })
                .collect::<Result<_>>()?;

            let mut grads = vec![0.0f64; opt.m.len()];
            for (g, sums) in &results {
                for (acc, &v) in grads.iter_mut().zip(g) {
                    *acc += v;
                }
                ep.bce += sums.bce;
                ep.pos_sq += sums.pos_sq;
                ep.refl_sq += sums.refl_sq;
                ep.n += sums.n;
                ep.n_pos += sums.n_pos;
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(OtdrError::Training {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            let mut params = net.flat_params();
            opt.step(&mut params, &grads)?;
            net.set_flat_params(&params)?;
        }

        let train_bce = ep.bce / ep.n.max(1) as f64;
        let train_pos = ep.pos_sq / ep.n_pos.max(1) as f64;
        let train_refl = ep.refl_sq / ep.n_pos.max(1) as f64;
        let val = eval_split_loss(&net, &val_seqs)?;
        if !val.total.is_finite() {
            return Err(OtdrError::Training { epoch, msg: "validation loss diverged".into() });
        }
        let stats = EpochStats {
            epoch,
            lr: opt.lr,
            train_total: l1 * train_bce + l2 * train_pos + l3 * train_refl,
            train_bce,
            train_pos_mse: train_pos,
            train_refl_mse: train_refl,
            val_total: val.total,
            val_bce: val.bce,
            val_pos_mse: val.pos_mse,
            val_refl_mse: val.refl_mse,
        };
        on_epoch(&stats);
        history.epochs.push(stats);

        if val.total < best_val {
            best_val = val.total;
            best_params = net.flat_params();
            best_epoch = epoch;
            stale = 0;
            lr_stale = 0;
        } else {
            stale += 1;
            lr_stale += 1;
            if lr_stale >= cfg.lr_decay_patience && opt.lr > cfg.lr_min {
                opt.lr = (opt.lr * cfg.lr_decay_factor).max(cfg.lr_min);
                lr_stale = 0;
            }
            if stale >= cfg.patience {
                break;
            }
        }
    }

    net.set_flat_params(&best_params)?;
    history.best_epoch = best_epoch;
    history.best_val_total = best_val;
    Ok((net, history))
}

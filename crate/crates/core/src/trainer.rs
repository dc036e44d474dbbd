//! Adam, the training loop for the three codebook modes, evaluation and
//! in-memory checkpoints.
//!
//! Vanilla mode trains an `n × d` code matrix directly; only rows assigned in
//! a step are touched, each row keeping its own Adam step count. Joint and
//! Group modes train projectors only and skip groups with no assignment in
//! the step. Encoder and decoder use ordinary dense Adam.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{psnr_from_mse, ssim, utilization};
use crate::autoencoder::{recon_grad, Autoencoder, AutoencoderConfig};
use crate::codebook::{
    fresh_version, init_grouped_codebook, init_simplified, uniform_specs, CodebookStreams, GroupParams,
    GroupedCodebook, MaterializedCodebook, ProjectorParams, ProjectorVariant,
};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Scalar, StreamPurpose, Tensor};
use crate::quantizer::{backward_codebook, code_row_grads, encoder_side_grad, quantize, vq_losses, LossBreakdown, LossWeights, QuantizeResult};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Images used for the data-dependent encoder init.
/// Training images (in dataset order) used by the feature init.
pub const FEATURE_INIT_IMAGES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

fn check_grad<T: Scalar>(name: &str, param: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "gradient for {name} has shape {:?}, parameter has {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(Error::numeric(format!("non-finite gradient for {name}")));
    }
    Ok(())
}

#[inline]
fn adam_update<T: Scalar>(p: &mut T, g: T, m: &mut T, v: &mut T, step: u64, cfg: &OptimizerConfig) {
    let (b1, b2) = (T::lift(cfg.beta1), T::lift(cfg.beta2));
    let bc1 = T::lift(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::lift(1.0 - cfg.beta2.powi(step as i32));
    *m = b1 * *m + (T::one() - b1) * g;
    *v = b2 * *v + (T::one() - b2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p -= T::lift(cfg.lr) * m_hat / (v_hat.sqrt() + T::lift(cfg.eps));
}

/// One bias-corrected Adam update of a whole tensor.
pub fn adam_step<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_grad(name, param, grad)?;
    state.step += 1;
    let step = state.step;
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        adam_update(p, g, m, v, step, cfg);
    }
    Ok(())
}

/// Adam state for a matrix whose rows are updated independently.
#[derive(Clone, Debug, PartialEq)]
pub struct RowAdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub steps: Vec<u64>,
}

impl<T: Scalar> RowAdamState<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Tensor::zeros(&[rows, cols]),
            v: Tensor::zeros(&[rows, cols]),
            steps: vec![0; rows],
        }
    }
}

/// Adam on the rows flagged in `active`; other rows, and their moments, are left untouched.
pub fn adam_step_rows<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut RowAdamState<T>,
    active: &[bool],
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_grad(name, param, grad)?;
    let (rows, cols) = param.dims2()?;
    if active.len() != rows {
        return Err(Error::shape(format!("{} row flags for {rows} rows of {name}", active.len())));
    }
    for r in (0..rows).filter(|&r| active[r]) {
        state.steps[r] += 1;
        let step = state.steps[r];
        let span = r * cols..(r + 1) * cols;
        let p = &mut param.data_mut()[span.clone()];
        let m = &mut state.m.data_mut()[span.clone()];
        let v = &mut state.v.data_mut()[span.clone()];
        for (((p, &g), m), v) in p.iter_mut().zip(&grad.data()[span.clone()]).zip(m).zip(v) {
            adam_update(p, g, m, v, step, cfg);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// Every code is a free vector (equivalent to `n` groups of one).
    Vanilla,
    /// One projector for the whole codebook, `Group(1)`.
    Joint,
    Group(usize),
}

impl Mode {
    /// Group count for a codebook of size `n`.
    pub fn groups(&self, n: usize) -> usize {
        match *self {
            Mode::Vanilla => n,
            Mode::Joint => 1,
            Mode::Group(k) => k,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Vanilla => write!(f, "vanilla"),
            Mode::Joint => write!(f, "joint"),
            Mode::Group(k) => write!(f, "group:{k}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vanilla" => Ok(Mode::Vanilla),
            "joint" => Ok(Mode::Joint),
            other => other
                .strip_prefix("group:")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k > 0)
                .map(Mode::Group)
                .ok_or_else(|| Error::config(format!("mode must be vanilla, joint or group:<k>, got {other:?}"))),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// One independent core per group.
    #[default]
    Explicit,
    /// One shared core with a wide projector (linear projectors only).
    Simplified,
}

/// Rescaling of the last encoder layer applied on the first training images
/// right before the first step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureInit {
    Off,
    /// Zero mean, identity covariance.
    Whiten,
    /// Mean and covariance of the initial materialized codebook.
    #[default]
    MatchCodes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub codebook_size: usize,
    pub rank: usize,
    pub projector: ProjectorVariant,
    pub init: CodebookInit,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub autoencoder: AutoencoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Data-dependent rescaling of the encoder output before step 1.
    pub feature_init: FeatureInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let autoencoder = AutoencoderConfig::default();
        Self {
            mode: Mode::Group(8),
            codebook_size: 512,
            rank: autoencoder.dim,
            projector: ProjectorVariant::Linear,
            init: CodebookInit::Explicit,
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            autoencoder,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            grad_clip: None,
            feature_init: FeatureInit::MatchCodes,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        let n = self.codebook_size;
        if n == 0 {
            return Err(Error::config("codebook size must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let k = self.mode.groups(n);
        if k == 0 || n % k != 0 {
            return Err(Error::config(format!("group count k={k} must divide codebook size n={n}")));
        }
        if self.init == CodebookInit::Simplified && self.projector != ProjectorVariant::Linear {
            return Err(Error::config("the simplified construction supports linear projectors only"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Codebook parameters as trained in each mode.
#[derive(Clone, Debug)]
pub enum CodebookState<T = f32> {
    Free { codes: Tensor<T>, version: u64 },
    Grouped(GroupedCodebook<T>),
}

impl<T: Scalar> PartialEq for CodebookState<T> {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (CodebookState::Free { codes: a, .. }, CodebookState::Free { codes: b, .. }) => a == b,
            (CodebookState::Grouped(a), CodebookState::Grouped(b)) => a == b,
            _ => false,
        }
    }
}

impl<T: Scalar> CodebookState<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let (n, d, r) = (cfg.codebook_size, cfg.autoencoder.dim, cfg.rank);
        let mut streams = CodebookStreams::from_seed(cfg.seed);
        Ok(match cfg.mode {
            Mode::Vanilla => {
                // Same starting codes as the Joint linear codebook under this seed.
                let joint = init_grouped_codebook::<T>(d, &uniform_specs(n, 1, r)?, ProjectorVariant::Linear, &mut streams)?;
                CodebookState::Free {
                    codes: joint.materialize()?,
                    version: fresh_version(),
                }
            }
            mode => {
                let k = mode.groups(n);
                match cfg.init {
                    CodebookInit::Explicit => CodebookState::Grouped(init_grouped_codebook(
                        d,
                        &uniform_specs(n, k, r)?,
                        cfg.projector,
                        &mut streams,
                    )?),
                    CodebookInit::Simplified => CodebookState::Grouped(init_simplified(n, d, k, r, &mut streams)?),
                }
            }
        })
    }

    pub fn n(&self) -> usize {
        match self {
            CodebookState::Free { codes, .. } => codes.shape()[0],
            CodebookState::Grouped(gc) => gc.n(),
        }
    }

    pub fn materialized(&self) -> Result<MaterializedCodebook<T>> {
        match self {
            CodebookState::Free { codes, version } => MaterializedCodebook::ungrouped(codes.clone(), *version),
            CodebookState::Grouped(gc) => gc.materialized(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            CodebookState::Free { codes, .. } => vec![("codes".to_string(), codes)],
            CodebookState::Grouped(gc) => gc.named_tensors(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum CodebookOpt<T> {
    Rows(RowAdamState<T>),
    /// Per group, per projector tensor.
    Groups(Vec<Vec<AdamState<T>>>),
}

impl<T: Scalar> CodebookOpt<T> {
    fn init(cb: &CodebookState<T>) -> Self {
        match cb {
            CodebookState::Free { codes, .. } => CodebookOpt::Rows(RowAdamState::zeros(codes.shape()[0], codes.shape()[1])),
            CodebookState::Grouped(gc) => CodebookOpt::Groups(
                gc.groups()
                    .iter()
                    .map(|g| g.projector.tensors().iter().map(|(_, t)| AdamState::zeros(t.shape())).collect())
                    .collect(),
            ),
        }
    }
}

/// Eval fields are NaN when no eval set is given; JSON has no NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Distinct codes used over the epoch's training assignments, divided by `n`.
    pub utilization: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
    #[serde(with = "nan_as_null")]
    pub psnr: f64,
    #[serde(with = "nan_as_null")]
    pub ssim: f64,
    #[serde(with = "nan_as_null")]
    pub eval_mse: f64,
    #[serde(with = "nan_as_null")]
    pub eval_utilization: f64,
    /// Training-pass assignment counts per group.
    pub group_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    /// Mean of per-image PSNR.
    pub psnr: f64,
    /// Mean of per-image SSIM.
    pub ssim: f64,
    pub utilization: f64,
    pub code_counts: Vec<usize>,
    pub group_counts: Vec<usize>,
}

fn check_images<T: Scalar>(images: &Tensor<T>) -> Result<usize> {
    match *images.shape() {
        [n, _, _, 3] if n > 0 => Ok(n),
        ref s => Err(Error::config(format!("dataset must be a non-empty [N, H, W, 3] tensor, got {s:?}"))),
    }
}

/// Copies the listed images into one batch tensor.
pub fn gather_images<T: Scalar>(images: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let per: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, data).expect("gathered shape")
}

/// Evaluates any reconstructor that returns reconstructions plus code indices.
pub fn evaluate_with<T: Scalar>(
    images: &Tensor<T>,
    batch_size: usize,
    offsets: &[usize],
    mut reconstruct: impl FnMut(&Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)>,
) -> Result<EvalMetrics> {
    let count = check_images(images)?;
    let n = *offsets.last().unwrap_or(&0);
    let per: usize = images.shape()[1..].iter().product();
    let mut code_counts = vec![0usize; n];
    let (mut sq, mut psnr_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
    let order: Vec<usize> = (0..count).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = gather_images(images, chunk);
        let (recon, indices) = reconstruct(&batch)?;
        batch.check_same_shape(&recon)?;
        for i in indices {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            code_counts[i] += 1;
        }
        let img_shape = &images.shape()[1..];
        for b in 0..chunk.len() {
            let x = &batch.data()[b * per..(b + 1) * per];
            let y = &recon.data()[b * per..(b + 1) * per];
            let e: f64 = x
                .iter()
                .zip(y)
                .map(|(&a, &r)| (a.as_f64() - r.as_f64().clamp(0.0, 1.0)).powi(2))
                .sum::<f64>();
            sq += e;
            psnr_sum += psnr_from_mse(e / per as f64, 1.0);
            let xt = Tensor::from_vec(img_shape, x.to_vec())?;
            let yt = Tensor::from_vec(img_shape, y.iter().map(|v| v.max(T::zero()).min(T::one())).collect())?;
            ssim_sum += ssim(&xt, &yt)?;
        }
    }
    let group_counts = offsets.windows(2).map(|w| code_counts[w[0]..w[1]].iter().sum()).collect();
    Ok(EvalMetrics {
        mse: sq / (count * per) as f64,
        psnr: psnr_sum / count as f64,
        ssim: ssim_sum / count as f64,
        utilization: utilization(&code_counts, n),
        code_counts,
        group_counts,
    })
}

/// Single deterministic pass of `images` through encoder, quantizer and decoder.
pub fn evaluate<T: Scalar>(
    ae: &Autoencoder<T>,
    codebook: &MaterializedCodebook<T>,
    images: &Tensor<T>,
    batch_size: usize,
) -> Result<EvalMetrics> {
    check_images(images)?;
    let (h, w) = (images.shape()[1], images.shape()[2]);
    let f = ae.factor();
    if h % f != 0 || w % f != 0 {
        return Err(Error::config(format!("eval images {h}×{w} do not fit downsampling factor {f}")));
    }
    if codebook.d() != ae.config().dim {
        return Err(Error::config(format!(
            "codebook dimension {} does not match autoencoder dimension {}",
            codebook.d(),
            ae.config().dim
        )));
    }
    evaluate_with(images, batch_size, &codebook.offsets, |batch| {
        let (z, _) = ae.encode_batch(batch)?;
        let q = quantize(&z, codebook)?;
        let (recon, _) = ae.decode_batch(&q.quantized)?;
        Ok((recon, q.indices))
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccum {
    pub code_counts: Vec<usize>,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
    pub images: usize,
}

pub struct StepOutput<T = f32> {
    pub losses: LossBreakdown,
    pub result: QuantizeResult<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TensorRole {
    Autoencoder,
    CodebookCore,
    CodebookParam,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T = f32> {
    pub name: String,
    pub role: TensorRole,
    pub tensor: Tensor<T>,
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub format_version: u32,
    pub config: TrainConfig,
    pub tensors: Vec<NamedTensor<T>>,
    /// Adam step counts keyed by parameter name (one per row for free codes).
    pub adam_steps: BTreeMap<String, Vec<u64>>,
    pub step: u64,
    pub epoch: usize,
    /// Batches already consumed in the current epoch.
    pub cursor: usize,
    pub accum: EpochAccum,
    pub rng: BTreeMap<String, RngStream>,
    pub history: Vec<EpochMetrics>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }
}

#[derive(Debug)]
pub struct Trainer<T: Scalar = f32> {
    cfg: TrainConfig,
    ae: Autoencoder<T>,
    codebook: CodebookState<T>,
    ae_opt: Vec<AdamState<T>>,
    cb_opt: CodebookOpt<T>,
    step: u64,
    epoch: usize,
    cursor: usize,
    accum: EpochAccum,
    history: Vec<EpochMetrics>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ae = Autoencoder::new(cfg.autoencoder.clone(), &mut RngStream::derive(cfg.seed, StreamPurpose::Autoencoder, 0))?;
        let codebook = CodebookState::init(&cfg)?;
        Ok(Self::assemble(cfg, ae, codebook))
    }

    /// Starts training from given parameters with fresh optimizer state.
    pub fn with_parts(cfg: TrainConfig, ae: Autoencoder<T>, codebook: CodebookState<T>) -> Result<Self> {
        cfg.validate()?;
        if ae.config() != &cfg.autoencoder {
            return Err(Error::config("autoencoder does not match the configuration"));
        }
        Ok(Self::assemble(cfg, ae, codebook))
    }

    fn assemble(cfg: TrainConfig, mut ae: Autoencoder<T>, codebook: CodebookState<T>) -> Self {
        let ae_opt = ae.params_mut().iter().map(|p| AdamState::zeros(p.shape())).collect();
        let cb_opt = CodebookOpt::init(&codebook);
        let n = codebook.n();
        Self {
            cfg,
            ae,
            codebook,
            ae_opt,
            cb_opt,
            step: 0,
            epoch: 0,
            cursor: 0,
            accum: EpochAccum {
                code_counts: vec![0; n],
                ..Default::default()
            },
            history: Vec::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn autoencoder(&self) -> &Autoencoder<T> {
        &self.ae
    }

    pub fn codebook(&self) -> &CodebookState<T> {
        &self.codebook
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Applies the configured feature init using the first training images.
    /// `run` calls this right before the first step.
    pub fn init_features(&mut self, data: &Tensor<T>) -> Result<()> {
        let first: Vec<usize> = (0..data.shape()[0].min(FEATURE_INIT_IMAGES)).collect();
        let images = gather_images(data, &first);
        match self.cfg.feature_init {
            FeatureInit::Off => Ok(()),
            FeatureInit::Whiten => self.ae.match_feature_moments(&images, None),
            FeatureInit::MatchCodes => {
                let codes = self.codebook.materialized()?.codes;
                self.ae.match_feature_moments(&images, Some(&codes))
            }
        }
    }

    /// One optimizer step on `images` (`[B, H, W, 3]`).
    pub fn train_step(&mut self, images: &Tensor<T>) -> Result<StepOutput<T>> {
        let w = self.cfg.loss;
        let (z, enc_cache) = self.ae.encode_batch(images)?;
        let mat = self.codebook.materialized()?;
        let result = quantize(&z, &mat)?;
        let (recon, dec_cache) = self.ae.decode_batch(&result.straight_through)?;
        let losses = vq_losses(images, &recon, &z, &result, w)?;
        if !losses.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at epoch {} step {}",
                self.epoch, self.step
            )));
        }
        let (mut dec_g, mut out_g, dq) = self.ae.decode_backward(&dec_cache, &recon_grad(images, &recon)?)?;
        let dz = encoder_side_grad(&result, &z, &dq, w)?;
        let mut enc_g = self.ae.encode_backward(&enc_cache, &dz)?;
        let mut cb_grads = match &self.codebook {
            CodebookState::Free { .. } => CbGrads::Rows(code_row_grads(&result, &z, w, self.codebook.n())?),
            CodebookState::Grouped(gc) => CbGrads::Groups(backward_codebook(&result, &z, gc, w)?),
        };

        if let Some(limit) = self.cfg.grad_clip {
            let mut all: Vec<&mut Tensor<T>> = Vec::new();
            for l in enc_g.iter_mut().chain(dec_g.iter_mut()).chain(std::iter::once(&mut out_g)) {
                all.push(&mut l.w);
                all.push(&mut l.b);
            }
            match &mut cb_grads {
                CbGrads::Rows(g) => all.push(g),
                CbGrads::Groups(gs) => {
                    for g in gs {
                        all.extend(g.tensors_mut().into_iter().map(|(_, t)| t));
                    }
                }
            }
            let norm = all
                .iter()
                .flat_map(|t| t.data().iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                let s = T::lift(limit / norm);
                for t in all {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }

        let names: Vec<String> = self.ae.named_params().into_iter().map(|(n, _)| n).collect();
        let grads: Vec<&Tensor<T>> = enc_g
            .iter()
            .chain(dec_g.iter())
            .chain(std::iter::once(&out_g))
            .flat_map(|l| [&l.w, &l.b])
            .collect();
        let opt = self.cfg.optimizer;
        for (((p, g), st), name) in self.ae.params_mut().into_iter().zip(grads).zip(&mut self.ae_opt).zip(&names) {
            adam_step(name, p, g, st, &opt)?;
        }

        match (&mut self.codebook, &mut self.cb_opt, cb_grads) {
            (CodebookState::Free { codes, version }, CodebookOpt::Rows(st), CbGrads::Rows(g)) => {
                let active: Vec<bool> = result.code_counts.iter().map(|&c| c > 0).collect();
                adam_step_rows("codes", codes, &g, st, &active, &opt)?;
                *version = fresh_version();
            }
            (CodebookState::Grouped(gc), CodebookOpt::Groups(states), CbGrads::Groups(gs)) => {
                for (j, (g, st)) in gs.iter().zip(states.iter_mut()).enumerate() {
                    if result.group_counts[j] == 0 {
                        continue;
                    }
                    let params = gc.projector_mut(j);
                    for (((suffix, p), (_, gt)), s) in params.tensors_mut().into_iter().zip(g.tensors()).zip(st.iter_mut()) {
                        adam_step(&format!("group{j}.{suffix}"), p, gt, s, &opt)?;
                    }
                }
            }
            _ => unreachable!("optimizer state always matches the codebook kind"),
        }
        self.step += 1;
        Ok(StepOutput { losses, result })
    }

    /// Trains until all configured epochs are done or `max_steps` more steps
    /// have run. Returns metrics of the epochs completed during this call.
    pub fn run(&mut self, data: &Tensor<T>, eval: Option<&Tensor<T>>, max_steps: Option<u64>) -> Result<Vec<EpochMetrics>> {
        let count = check_images(data)?;
        let bs = self.cfg.batch_size;
        let batches = count.div_ceil(bs);
        let mut steps = 0u64;
        let mut finished = Vec::new();
        while self.epoch < self.cfg.epochs {
            let perm = self.shuffle_stream().permutation(count);
            while self.cursor < batches {
                if max_steps.is_some_and(|m| steps >= m) {
                    return Ok(finished);
                }
                if self.step == 0 {
                    self.init_features(data)?;
                }
                let idx = &perm[self.cursor * bs..((self.cursor + 1) * bs).min(count)];
                let batch = gather_images(data, idx);
                let out = self.train_step(&batch)?;
                let a = &mut self.accum;
                let b = idx.len() as f64;
                a.recon += out.losses.recon * b;
                a.codebook += out.losses.codebook_term * b;
                a.commit += out.losses.commit_term * b;
                a.total += out.losses.total * b;
                a.images += idx.len();
                for (c, &x) in a.code_counts.iter_mut().zip(&out.result.code_counts) {
                    *c += x;
                }
                self.cursor += 1;
                steps += 1;
            }
            let m = self.finish_epoch(eval)?;
            self.history.push(m.clone());
            finished.push(m);
        }
        Ok(finished)
    }

    fn shuffle_stream(&self) -> RngStream {
        RngStream::derive(self.cfg.seed, StreamPurpose::Shuffle, self.epoch as u32)
    }

    fn finish_epoch(&mut self, eval: Option<&Tensor<T>>) -> Result<EpochMetrics> {
        let a = std::mem::take(&mut self.accum);
        let n = self.codebook.n();
        let imgs = a.images.max(1) as f64;
        let mat = self.codebook.materialized()?;
        let group_counts = mat.offsets.windows(2).map(|w| a.code_counts[w[0]..w[1]].iter().sum()).collect();
        let ev = match eval {
            Some(e) => Some(evaluate(&self.ae, &mat, e, self.cfg.batch_size)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch: self.epoch,
            utilization: utilization(&a.code_counts, n),
            recon: a.recon / imgs,
            codebook: a.codebook / imgs,
            commit: a.commit / imgs,
            total: a.total / imgs,
            psnr: ev.as_ref().map_or(f64::NAN, |e| e.psnr),
            ssim: ev.as_ref().map_or(f64::NAN, |e| e.ssim),
            eval_mse: ev.as_ref().map_or(f64::NAN, |e| e.mse),
            eval_utilization: ev.as_ref().map_or(f64::NAN, |e| e.utilization),
            group_counts,
        };
        self.epoch += 1;
        self.cursor = 0;
        self.accum = EpochAccum {
            code_counts: vec![0; n],
            ..Default::default()
        };
        Ok(m)
    }

    pub fn evaluate(&self, images: &Tensor<T>) -> Result<EvalMetrics> {
        evaluate(&self.ae, &self.codebook.materialized()?, images, self.cfg.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut tensors = Vec::new();
        let mut adam_steps = BTreeMap::new();
        let ae_named = self.ae.named_params();
        for ((name, t), st) in ae_named.iter().zip(&self.ae_opt) {
            tensors.push(NamedTensor {
                name: name.clone(),
                role: TensorRole::Autoencoder,
                tensor: (*t).clone(),
            });
            push_moments(&mut tensors, name, &st.m, &st.v);
            adam_steps.insert(name.clone(), vec![st.step]);
        }
        for (name, t) in self.codebook.named_tensors() {
            let role = if name.ends_with(".core") {
                TensorRole::CodebookCore
            } else {
                TensorRole::CodebookParam
            };
            tensors.push(NamedTensor {
                name,
                role,
                tensor: t.clone(),
            });
        }
        match &self.cb_opt {
            CodebookOpt::Rows(st) => {
                push_moments(&mut tensors, "codes", &st.m, &st.v);
                adam_steps.insert("codes".into(), st.steps.clone());
            }
            CodebookOpt::Groups(states) => {
                if let CodebookState::Grouped(gc) = &self.codebook {
                    for (j, (g, st)) in gc.groups().iter().zip(states).enumerate() {
                        for ((suffix, _), s) in g.projector.tensors().into_iter().zip(st) {
                            let name = format!("group{j}.{suffix}");
                            push_moments(&mut tensors, &name, &s.m, &s.v);
                            adam_steps.insert(name, vec![s.step]);
                        }
                    }
                }
            }
        }
        // The current epoch's permutation is redrawn from this stream on resume.
        let mut rng = BTreeMap::new();
        rng.insert("shuffle".to_string(), self.shuffle_stream());
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.cfg.clone(),
            tensors,
            adam_steps,
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            accum: self.accum.clone(),
            rng,
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        let cfg = ckpt.config.clone();
        cfg.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &ckpt.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::config(format!("checkpoint lists tensor {} twice", t.name)));
            }
        }
        let mut used = std::collections::BTreeSet::new();
        let mut take = |name: &str, shape: Option<&[usize]>| -> Result<Tensor<T>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing tensor {name}")))?;
            if let Some(s) = shape {
                if t.shape() != s {
                    return Err(Error::config(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {s:?}",
                        t.shape()
                    )));
                }
            }
            used.insert(name.to_string());
            Ok(t.clone())
        };
        let steps = |name: &str, len: usize| -> Result<Vec<u64>> {
            match ckpt.adam_steps.get(name) {
                Some(v) if v.len() == len => Ok(v.clone()),
                _ => Err(Error::config(format!("checkpoint has no valid Adam step count for {name}"))),
            }
        };

        // Fresh model from the config gives the expected names and shapes.
        let mut trainer = Trainer::<T>::new(cfg.clone())?;
        let names: Vec<String> = trainer.ae.named_params().into_iter().map(|(n, _)| n).collect();
        for ((p, st), name) in trainer.ae.params_mut().into_iter().zip(&mut trainer.ae_opt).zip(&names) {
            let shape = p.shape().to_vec();
            *p = take(name, Some(&shape))?;
            st.m = take(&format!("adam.m.{name}"), Some(&shape))?;
            st.v = take(&format!("adam.v.{name}"), Some(&shape))?;
            st.step = steps(name, 1)?[0];
        }
        match (&mut trainer.codebook, &mut trainer.cb_opt) {
            (CodebookState::Free { codes, version }, CodebookOpt::Rows(st)) => {
                let shape = codes.shape().to_vec();
                *codes = take("codes", Some(&shape))?;
                *version = fresh_version();
                st.m = take("adam.m.codes", Some(&shape))?;
                st.v = take("adam.v.codes", Some(&shape))?;
                st.steps = steps("codes", shape[0])?;
            }
            (CodebookState::Grouped(gc), CodebookOpt::Groups(states)) => {
                let d = gc.d();
                let variant = gc.variant();
                let mut groups = Vec::with_capacity(gc.k());
                for (j, g) in gc.groups().iter().enumerate() {
                    let core = take(&format!("group{j}.core"), Some(g.core().shape()))?;
                    let mut proj: ProjectorParams<T> = g.projector.clone();
                    for ((suffix, p), s) in proj.tensors_mut().into_iter().zip(states[j].iter_mut()) {
                        let name = format!("group{j}.{suffix}");
                        let shape = p.shape().to_vec();
                        *p = take(&name, Some(&shape))?;
                        s.m = take(&format!("adam.m.{name}"), Some(&shape))?;
                        s.v = take(&format!("adam.v.{name}"), Some(&shape))?;
                        s.step = steps(&name, 1)?[0];
                    }
                    groups.push(GroupParams::new(core, proj));
                }
                *gc = GroupedCodebook::from_groups(d, variant, groups)?;
            }
            _ => unreachable!("optimizer state always matches the codebook kind"),
        }
        if let Some(extra) = ckpt.tensors.iter().find(|t| !used.contains(&t.name)) {
            return Err(Error::config(format!("checkpoint has unexpected tensor {}", extra.name)));
        }
        if ckpt.accum.code_counts.len() != trainer.codebook.n() {
            return Err(Error::config("checkpoint epoch counters do not match the codebook size"));
        }
        trainer.step = ckpt.step;
        trainer.epoch = ckpt.epoch;
        trainer.cursor = ckpt.cursor;
        trainer.accum = ckpt.accum.clone();
        trainer.history = ckpt.history.clone();
        Ok(trainer)
    }
}

fn push_moments<T: Scalar>(out: &mut Vec<NamedTensor<T>>, name: &str, m: &Tensor<T>, v: &Tensor<T>) {
    out.push(NamedTensor {
        name: format!("adam.m.{name}"),
        role: TensorRole::AdamM,
        tensor: m.clone(),
    });
    out.push(NamedTensor {
        name: format!("adam.v.{name}"),
        role: TensorRole::AdamV,
        tensor: v.clone(),
    });
}

enum CbGrads<T> {
    Rows(Tensor<T>),
    Groups(Vec<ProjectorParams<T>>),
}

/// Runs a full training job and returns the final checkpoint with the metrics history.
pub fn train<T: Scalar>(cfg: TrainConfig, data: &Tensor<T>, eval: Option<&Tensor<T>>) -> Result<(Checkpoint<T>, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(cfg)?;
    let metrics = t.run(data, eval, None)?;
    Ok((t.checkpoint(), metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            codebook_size: 16,
            rank: 4,
            autoencoder: AutoencoderConfig {
                dim: 4,
                enc_hidden: vec![4],
                dec_hidden: vec![4, 4],
            },
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = RngStream::new(seed, 0);
        Tensor::from_vec(&[n, 8, 8, 3], (0..n * 192).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn adam_scalar_case() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::zeros(&[]);
        adam_step("p", &mut p, &Tensor::scalar(2.0), &mut st, &OptimizerConfig::default()).unwrap();
        assert_eq!(st.m.data()[0], 1.0);
        assert!((st.v.data()[0] - 0.4).abs() < 1e-15);
        let expected = 1.0 - 1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() <= 1e-12);
    }

    #[test]
    fn adam_zero_grad_is_a_no_op() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![0.3, -1.2]).unwrap();
        let before = p.clone();
        let mut st = AdamState::zeros(&[2]);
        adam_step("p", &mut p, &Tensor::zeros(&[2]), &mut st, &OptimizerConfig::default()).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn adam_rejects_non_finite_grad_by_name() {
        let mut p = Tensor::<f32>::zeros(&[1]);
        let mut st = AdamState::zeros(&[1]);
        let g = Tensor::from_vec(&[1], vec![f32::NAN]).unwrap();
        let err = adam_step("enc.0.W", &mut p, &g, &mut st, &OptimizerConfig::default()).unwrap_err();
        assert!(err.to_string().contains("enc.0.W"));
    }

    #[test]
    fn row_adam_leaves_inactive_rows_alone() {
        let mut p = Tensor::<f32>::full(&[3, 2], 1.0);
        let g = Tensor::full(&[3, 2], 0.5);
        let mut st = RowAdamState::zeros(3, 2);
        adam_step_rows("codes", &mut p, &g, &mut st, &[true, false, true], &OptimizerConfig::default()).unwrap();
        assert_eq!(p.row(1), &[1.0, 1.0]);
        assert_ne!(p.row(0), &[1.0, 1.0]);
        assert_eq!(st.steps, vec![1, 0, 1]);
    }

    #[test]
    fn optimizer_config_is_validated() {
        let bad = OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [Mode::Vanilla, Mode::Joint, Mode::Group(8)] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("group:0".parse::<Mode>().is_err());
        assert!("grouped".parse::<Mode>().is_err());
    }

    #[test]
    fn indivisible_group_count_is_a_config_error() {
        let cfg = TrainConfig {
            mode: Mode::Group(3),
            ..tiny_cfg(Mode::Joint)
        };
        assert!(matches!(Trainer::<f32>::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg(Mode::Group(4))
        };
        let (ckpt, metrics) = train(cfg.clone(), &tiny_data(8, 1), None).unwrap();
        assert!(metrics.is_empty());
        let fresh = Trainer::<f32>::new(cfg).unwrap().checkpoint();
        assert_eq!(ckpt.tensors, fresh.tensors);
    }

    #[test]
    fn frozen_cores_and_moving_projectors() {
        let mut t = Trainer::<f32>::new(tiny_cfg(Mode::Group(4))).unwrap();
        let before = t.checkpoint();
        t.run(&tiny_data(8, 2), None, None).unwrap();
        let after = t.checkpoint();
        for nt in &before.tensors {
            let now = after.tensor(&nt.name).unwrap();
            if nt.role == TensorRole::CodebookCore {
                assert!(now.bit_eq(&nt.tensor), "{} changed", nt.name);
            }
        }
        assert!(!after.tensor("group0.W").unwrap().bit_eq(before.tensor("group0.W").unwrap()));
    }

    #[test]
    fn vanilla_only_moves_assigned_rows() {
        let mut t = Trainer::<f32>::new(tiny_cfg(Mode::Vanilla)).unwrap();
        let data = tiny_data(4, 3);
        for _ in 0..3 {
            let before = match t.codebook() {
                CodebookState::Free { codes, .. } => codes.clone(),
                _ => unreachable!(),
            };
            let out = t.train_step(&data).unwrap();
            let after = match t.codebook() {
                CodebookState::Free { codes, .. } => codes.clone(),
                _ => unreachable!(),
            };
            for (i, &c) in out.result.code_counts.iter().enumerate() {
                if c == 0 {
                    assert_eq!(before.row(i), after.row(i), "row {i}");
                }
            }
        }
    }

    #[test]
    fn vanilla_starts_from_the_joint_codebook() {
        let v = CodebookState::<f32>::init(&tiny_cfg(Mode::Vanilla)).unwrap();
        let j = CodebookState::<f32>::init(&tiny_cfg(Mode::Joint)).unwrap();
        assert!(v.materialized().unwrap().codes.bit_eq(&j.materialized().unwrap().codes));
    }

    #[test]
    fn metrics_history_shape() {
        let (_, metrics) = train(tiny_cfg(Mode::Joint), &tiny_data(8, 4), Some(&tiny_data(4, 5))).unwrap();
        assert_eq!(metrics.len(), 2);
        for (e, m) in metrics.iter().enumerate() {
            assert_eq!(m.epoch, e);
            assert!((0.0..=1.0).contains(&m.utilization));
            assert_eq!(m.group_counts.iter().sum::<usize>(), 8 * 4);
            assert!(m.psnr.is_finite());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = tiny_data(12, 6);
        let mut straight = Trainer::<f32>::new(tiny_cfg(Mode::Group(2))).unwrap();
        let eval = tiny_data(4, 9);
        straight.run(&data, Some(&eval), Some(4)).unwrap();
        let mut resumed = Trainer::from_checkpoint(&straight.checkpoint()).unwrap();
        straight.run(&data, Some(&eval), None).unwrap();
        resumed.run(&data, Some(&eval), None).unwrap();
        assert_eq!(straight.checkpoint(), resumed.checkpoint());
    }

    #[test]
    fn checkpoint_rejects_missing_and_extra_tensors() {
        let t = Trainer::<f32>::new(tiny_cfg(Mode::Joint)).unwrap();
        let mut ck = t.checkpoint();
        let removed = ck.tensors.remove(0);
        assert!(matches!(Trainer::from_checkpoint(&ck), Err(Error::Config(_))));
        ck.tensors.insert(0, removed);
        ck.tensors.push(NamedTensor {
            name: "stray".into(),
            role: TensorRole::Autoencoder,
            tensor: Tensor::zeros(&[1]),
        });
        let err = Trainer::from_checkpoint(&ck).unwrap_err();
        assert!(err.to_string().contains("stray"));
    }

    #[test]
    fn evaluate_twice_is_identical() {
        let t = Trainer::<f32>::new(tiny_cfg(Mode::Group(4))).unwrap();
        let eval = tiny_data(6, 7);
        assert_eq!(t.evaluate(&eval).unwrap(), t.evaluate(&eval).unwrap());
        let m = t.evaluate(&eval).unwrap();
        let recount = utilization(&m.code_counts, 16);
        assert_eq!(m.utilization, recount);
    }

    #[test]
    fn identity_reconstructor_is_perfect() {
        let eval = tiny_data(5, 8);
        let m = evaluate_with(&eval, 2, &[0, 1], |b| Ok((b.clone(), vec![0]))).unwrap();
        assert_eq!(m.psnr, crate::analysis::PSNR_CAP_DB);
        assert_eq!(m.ssim, 1.0);
        assert_eq!(m.mse, 0.0);
    }

    #[test]
    fn mismatched_eval_images_are_a_config_error() {
        let t = Trainer::<f32>::new(tiny_cfg(Mode::Joint)).unwrap();
        let odd = Tensor::zeros(&[1, 6, 6, 3]);
        assert!(matches!(t.evaluate(&odd), Err(Error::Config(_))));
    }
}

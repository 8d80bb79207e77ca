//! Adversarial rate-reduction debiasing: a discriminator ascends the rate
//! reduction of the protected attribute on its own output, while the encoder
//! ascends the target rate reduction minus a weighted copy of the
//! discriminator's objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding_rate::{
    delta_rate_with_grad, rate, subspace_similarity_with_grad, Partition, RateConfig, RateError, RepBatch,
};
use crate::exemplar::SelectError;
use crate::linalg::Matrix;
use crate::metrics::MetricError;
use crate::nn::{project_to_sphere, project_to_sphere_backward, AdamConfig, ForwardTrace, Network, NnError, ParamGrads};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("stage {0} has no training samples")]
    EmptyStage(usize),
    #[error("exemplar store is stale: frozen representations have dim {frozen}, encoder outputs {encoder}")]
    StaleStore { frozen: usize, encoder: usize },
    #[error("stage plan does not match the dataset: {0}")]
    PlanMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("exemplar selection failed: {0}")]
    SamplerFailure(#[from] SelectError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Raw features with their target and protected labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    pub y: Partition,
    pub g: Partition,
}

impl LabeledBatch {
    pub fn new(x: Matrix, y: Partition, g: Partition) -> Result<Self> {
        if y.len() != x.cols() || g.len() != x.cols() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} samples, {} target labels, {} protected labels",
                x.cols(),
                y.len(),
                g.len()
            )));
        }
        Ok(LabeledBatch { x, y, g })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.x.select_columns(idx),
            y: self.y.select(idx),
            g: self.g.select(idx),
        }
    }

    /// Appends the samples of `other`; label universes must agree.
    pub fn concat(&self, other: &LabeledBatch) -> Result<LabeledBatch> {
        let join = |a: &Partition, b: &Partition| -> Result<Partition> {
            let mut labels = a.labels().to_vec();
            labels.extend_from_slice(b.labels());
            Ok(Partition::new(labels, a.num_classes().max(b.num_classes()))?)
        };
        Ok(LabeledBatch {
            x: self.x.hconcat(&other.x).map_err(|e| TrainError::ShapeMismatch(e.to_string()))?,
            y: join(&self.y, &other.y)?,
            g: join(&self.g, &other.g)?,
        })
    }
}

/// Optimization settings shared by the debiasing and incremental trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub rate: RateConfig,
    #[serde(default = "default_lr")]
    pub lr_encoder: f64,
    #[serde(default = "default_lr")]
    pub lr_discriminator: f64,
    pub epochs: usize,
    /// Encoder steps per epoch; 0 means one pass over the data.
    #[serde(default)]
    pub steps_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_disc_steps")]
    pub disc_steps_per_enc_step: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch_size() -> usize {
    128
}

fn default_disc_steps() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            rate: RateConfig::default(),
            lr_encoder: default_lr(),
            lr_discriminator: default_lr(),
            epochs,
            steps_per_epoch: 0,
            batch_size: default_batch_size(),
            disc_steps_per_enc_step: default_disc_steps(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rate.validate()?;
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr_encoder > 0.0 && self.lr_encoder.is_finite()) {
            return bad("lr_encoder must be positive");
        }
        if !(self.lr_discriminator > 0.0 && self.lr_discriminator.is_finite()) {
            return bad("lr_discriminator must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.disc_steps_per_enc_step == 0 {
            return bad("disc_steps_per_enc_step must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebiasConfig {
    pub beta: f64,
    pub train: TrainConfig,
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TrainError::InvalidConfig("beta must be non-negative".into()));
        }
        self.train.validate()
    }
}

/// Weights of the encoder objective `(a) − β(b) − γ(c) − η(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl ObjectiveWeights {
    pub fn debias(beta: f64) -> Self {
        ObjectiveWeights {
            beta,
            gamma: 0.0,
            eta: 0.0,
        }
    }
}

/// Replayed samples and their frozen reference representations.
#[derive(Debug, Clone, Copy)]
pub struct OldData<'a> {
    pub x: &'a Matrix,
    pub y: &'a Partition,
    pub g: &'a Partition,
    pub frozen: &'a Matrix,
}

/// Itemized encoder objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EncoderTerms {
    /// ΔR(Z_new, Π^y)
    pub a: f64,
    /// ΔR(Z′_new, Π^g)
    pub b: f64,
    /// Subspace similarity between Z_old and the frozen Z̄_old.
    pub c: f64,
    /// ΔR(Z′_old, Π^g_old)
    pub d: f64,
    pub objective: f64,
    /// R(Z_new)
    pub rate_new: f64,
    /// R(Z_old); 0 without exemplars.
    pub rate_old: f64,
}

/// Unit-sphere representations of `x` plus what backprop needs.
struct Encoded {
    z: Matrix,
    norms: Vec<f64>,
    trace: ForwardTrace,
}

fn encode(net: &Network, x: &Matrix) -> Result<Encoded> {
    let (h, trace) = net.forward(x)?;
    let (z, norms) = project_to_sphere(&h);
    Ok(Encoded { z, norms, trace })
}

fn check_chain(phi: &Network, disc: &Network, x: &Matrix) -> Result<()> {
    if x.rows() != phi.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "batch has {} features, encoder expects {}",
            x.rows(),
            phi.input_dim()
        )));
    }
    if phi.output_dim() != disc.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "encoder outputs {}, discriminator expects {}",
            phi.output_dim(),
            disc.input_dim()
        )));
    }
    Ok(())
}

/// ΔR(D(z), g) and its gradient with respect to `z`; D is held fixed.
fn adversary_term(disc: &Network, z: &Matrix, g: &Partition, rate_cfg: &RateConfig) -> Result<(f64, Matrix)> {
    let enc = encode(disc, z)?;
    let dr = delta_rate_with_grad(&enc.z, g, rate_cfg)?;
    let gh = project_to_sphere_backward(&enc.z, &enc.norms, &dr.grad);
    let (_, gz) = disc.backward(&enc.trace, &gh)?;
    Ok((dr.value(), gz))
}

/// Value of the discriminator objective ΔR(Z′, Π^g) with `Z′ = D(φ(x))`, and
/// its gradient with respect to the discriminator parameters.
pub fn discriminator_objective(
    disc: &Network,
    phi: &Network,
    batch: &LabeledBatch,
    rate_cfg: &RateConfig,
) -> Result<(f64, ParamGrads)> {
    check_chain(phi, disc, &batch.x)?;
    let (z, _) = project_to_sphere(&phi.infer(&batch.x)?);
    let enc = encode(disc, &z)?;
    let dr = delta_rate_with_grad(&enc.z, &batch.g, rate_cfg)?;
    let gh = project_to_sphere_backward(&enc.z, &enc.norms, &dr.grad);
    let (grads, _) = disc.backward(&enc.trace, &gh)?;
    Ok((dr.value(), grads))
}

/// The encoder objective `(a) − β(b) − γ(c) − η(d)` and its gradient with
/// respect to the encoder parameters. Without `old` data, (c) and (d) are 0.
/// The replay pass is only back-propagated when γ or η is nonzero.
pub fn encoder_objective(
    phi: &Network,
    disc: &Network,
    new: &LabeledBatch,
    old: Option<OldData<'_>>,
    w: &ObjectiveWeights,
    rate_cfg: &RateConfig,
) -> Result<(EncoderTerms, ParamGrads)> {
    check_chain(phi, disc, &new.x)?;
    let enc = encode(phi, &new.x)?;
    let da = delta_rate_with_grad(&enc.z, &new.y, rate_cfg)?;
    let mut terms = EncoderTerms {
        a: da.value(),
        rate_new: da.rate,
        ..EncoderTerms::default()
    };
    let mut gz = da.grad;
    if w.beta != 0.0 {
        let (b, gb) = adversary_term(disc, &enc.z, &new.g, rate_cfg)?;
        terms.b = b;
        gz.add_scaled(&gb, -w.beta).map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
    } else {
        let (zp, _) = project_to_sphere(&disc.infer(&enc.z)?);
        terms.b = delta_rate_with_grad(&zp, &new.g, rate_cfg)?.value();
    }
    let gh = project_to_sphere_backward(&enc.z, &enc.norms, &gz);
    let (mut grads, _) = phi.backward(&enc.trace, &gh)?;

    if let Some(old) = old {
        if old.frozen.rows() != phi.output_dim() {
            return Err(TrainError::StaleStore {
                frozen: old.frozen.rows(),
                encoder: phi.output_dim(),
            });
        }
        let oenc = encode(phi, old.x)?;
        let zo = RepBatch::new(oenc.z.clone());
        terms.rate_old = rate(&zo, rate_cfg)?;
        let (c, gc) = subspace_similarity_with_grad(&zo, &RepBatch::new(old.frozen.clone()), old.y, old.y, rate_cfg)?;
        terms.c = c;
        if w.gamma != 0.0 || w.eta != 0.0 {
            let (d, gd) = adversary_term(disc, &oenc.z, old.g, rate_cfg)?;
            terms.d = d;
            let mut go = gc.scale(-w.gamma);
            go.add_scaled(&gd, -w.eta).map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
            let goh = project_to_sphere_backward(&oenc.z, &oenc.norms, &go);
            let (ograds, _) = phi.backward(&oenc.trace, &goh)?;
            grads.accumulate(&ograds)?;
        } else {
            let (zp, _) = project_to_sphere(&disc.infer(&oenc.z)?);
            terms.d = delta_rate_with_grad(&zp, old.g, rate_cfg)?.value();
        }
    }
    terms.objective = terms.a - w.beta * terms.b - w.gamma * terms.c - w.eta * terms.d;
    Ok((terms, grads))
}

fn ascend(net: &mut Network, mut grads: ParamGrads, lr: f64) -> Result<()> {
    grads.scale(-1.0);
    net.adam_step(&grads, &AdamConfig::with_lr(lr))?;
    Ok(())
}

/// One ascent step of the discriminator on ΔR(D(φ(x)), Π^g) with φ frozen.
/// Returns the objective before the step.
pub fn discriminator_step(disc: &mut Network, phi: &Network, batch: &LabeledBatch, cfg: &TrainConfig) -> Result<f64> {
    let (value, grads) = discriminator_objective(disc, phi, batch, &cfg.rate)?;
    ascend(disc, grads, cfg.lr_discriminator)?;
    Ok(value)
}

/// One ascent step of the encoder on ΔR(Z, Π^y) − β ΔR(Z′, Π^g) with D frozen.
pub fn encoder_step(
    phi: &mut Network,
    disc: &Network,
    batch: &LabeledBatch,
    beta: f64,
    cfg: &TrainConfig,
) -> Result<EncoderTerms> {
    incremental_step(phi, disc, batch, None, &ObjectiveWeights::debias(beta), cfg)
}

pub(crate) fn incremental_step(
    phi: &mut Network,
    disc: &Network,
    batch: &LabeledBatch,
    old: Option<OldData<'_>>,
    w: &ObjectiveWeights,
    cfg: &TrainConfig,
) -> Result<EncoderTerms> {
    let (terms, grads) = encoder_objective(phi, disc, batch, old, w, &cfg.rate)?;
    ascend(phi, grads, cfg.lr_encoder)?;
    Ok(terms)
}

/// One telemetry line per encoder step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub iter: usize,
    pub stage: usize,
    #[serde(rename = "dR_y")]
    pub dr_y: f64,
    #[serde(rename = "dR_g")]
    pub dr_g: f64,
    #[serde(rename = "R_z")]
    pub r_z: f64,
    #[serde(rename = "R_z_old")]
    pub r_z_old: f64,
    pub subspace: f64,
    #[serde(rename = "dR_g_old")]
    pub dr_g_old: f64,
    #[serde(rename = "dR_g_disc")]
    pub dr_g_disc: f64,
}

/// Splits sample indices into batches whose classes are interleaved, so every
/// batch sees as many target classes as the data allows.
pub fn stratified_batches(labels: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut per_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for members in &mut per_class {
        members.shuffle(rng);
    }
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(labels.len());
    for pos in 0..longest {
        for members in &per_class {
            if let Some(&i) = members.get(pos) {
                order.push(i);
            }
        }
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

const STAGE_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// The alternating schedule shared by both trainers. Telemetry iteration
/// numbers start at `iter_offset`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_loop(
    phi: &mut Network,
    disc: &mut Network,
    data: &LabeledBatch,
    old: Option<OldData<'_>>,
    disc_extra: Option<&LabeledBatch>,
    w: &ObjectiveWeights,
    cfg: &TrainConfig,
    stage: usize,
    iter_offset: usize,
) -> Result<Vec<TelemetryRecord>> {
    cfg.validate()?;
    check_chain(phi, disc, &data.x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((stage as u64).wrapping_mul(STAGE_SEED_STRIDE)));
    let mut telemetry = Vec::new();
    let mut iter = iter_offset;
    for _ in 0..cfg.epochs {
        let batches = stratified_batches(data.y.labels(), cfg.batch_size, &mut rng);
        let steps = if cfg.steps_per_epoch == 0 {
            batches.len()
        } else {
            cfg.steps_per_epoch
        };
        for s in 0..steps {
            let batch = data.select(&batches[s % batches.len()]);
            let disc_batch = match disc_extra {
                Some(extra) => batch.concat(extra)?,
                None => batch.clone(),
            };
            let mut dr_g_disc = 0.0;
            for _ in 0..cfg.disc_steps_per_enc_step {
                dr_g_disc = discriminator_step(disc, phi, &disc_batch, cfg)?;
            }
            let terms = incremental_step(phi, disc, &batch, old, w, cfg)?;
            telemetry.push(TelemetryRecord {
                iter,
                stage,
                dr_y: terms.a,
                dr_g: terms.b,
                r_z: terms.rate_new,
                r_z_old: terms.rate_old,
                subspace: terms.c,
                dr_g_old: terms.d,
                dr_g_disc,
            });
            iter += 1;
        }
    }
    Ok(telemetry)
}

/// Builds a labeled batch from parallel label vectors with declared universes.
pub fn labeled_batch(x: &Matrix, y: &[usize], num_classes: usize, g: &[usize], num_groups: usize) -> Result<LabeledBatch> {
    LabeledBatch::new(
        x.clone(),
        Partition::new(y.to_vec(), num_classes)?,
        Partition::new(g.to_vec(), num_groups)?,
    )
}

/// Non-incremental adversarial training: `disc_steps_per_enc_step`
/// discriminator steps, then one encoder step, per batch.
pub fn train_debias(
    phi: &mut Network,
    disc: &mut Network,
    data: &LabeledBatch,
    cfg: &DebiasConfig,
) -> Result<Vec<TelemetryRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train_loop(phi, disc, data, None, None, &ObjectiveWeights::debias(cfg.beta), &cfg.train, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn toy_batch() -> LabeledBatch {
        let x = Matrix::from_fn(3, 8, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0 + 0.1 * c as f64);
        labeled_batch(&x, &[0, 1, 0, 1, 0, 1, 0, 1], 2, &[0, 0, 1, 1, 0, 0, 1, 1], 2).unwrap()
    }

    #[test]
    fn shape_chain_is_checked() {
        let phi = Network::mlp(&[3, 4, 4], Activation::Relu, 1).unwrap();
        let disc = Network::mlp(&[5, 4], Activation::Relu, 2).unwrap();
        let err = discriminator_objective(&disc, &phi, &toy_batch(), &RateConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch(_)));
    }

    #[test]
    fn stratified_batches_cover_everything_once() {
        let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches = stratified_batches(&labels, 4, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        let first: std::collections::BTreeSet<usize> = batches[0].iter().map(|&i| labels[i]).collect();
        assert_eq!(first.len(), 3);
    }

    #[test]
    fn zero_epochs_leave_networks_unchanged() {
        let mut phi = Network::mlp(&[3, 4, 4], Activation::Relu, 1).unwrap();
        let mut disc = Network::mlp(&[4, 3], Activation::Relu, 2).unwrap();
        let (p0, d0) = (phi.clone(), disc.clone());
        let cfg = DebiasConfig {
            beta: 1.0,
            train: TrainConfig::new(0, 5),
        };
        let t = train_debias(&mut phi, &mut disc, &toy_batch(), &cfg).unwrap();
        assert!(t.is_empty());
        assert_eq!(phi, p0);
        assert_eq!(disc, d0);
    }

    #[test]
    fn objective_is_itemized() {
        let phi = Network::mlp(&[3, 4, 4], Activation::Relu, 1).unwrap();
        let disc = Network::mlp(&[4, 3], Activation::Relu, 2).unwrap();
        let w = ObjectiveWeights::debias(0.5);
        let (t, _) = encoder_objective(&phi, &disc, &toy_batch(), None, &w, &RateConfig::default()).unwrap();
        assert!((t.objective - (t.a - 0.5 * t.b)).abs() < 1e-15);
        assert_eq!((t.c, t.d, t.rate_old), (0.0, 0.0, 0.0));
        assert!(t.a >= -1e-9 && t.b >= -1e-9);
    }
}

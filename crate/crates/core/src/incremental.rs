//! Staged training over disjoint groups of target classes with an exemplar
//! store, plus the per-stage evaluation protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coding_rate::{rate, Partition, RateConfig, RepBatch};
use crate::data::Dataset;
use crate::debias::{
    incremental_step, labeled_batch, train_loop, EncoderTerms, LabeledBatch, ObjectiveWeights, OldData, Result,
    TelemetryRecord, TrainConfig, TrainError,
};
use crate::exemplar::{select, SamplerSpec};
use crate::linalg::Matrix;
use crate::metrics::{
    demographic_parity, gap_rms, last_and_average, probe_leakage, LeakageReport, PredictionLog, Probe, ProbeConfig,
};
use crate::nn::{project_to_sphere, Activation, Network};

/// Order in which target classes are introduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    /// Largest class first; ties by class index.
    #[default]
    SizeDescending,
    Natural,
    /// Seeded shuffle.
    Random,
}

/// Disjoint class groups, one per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    stages: Vec<Vec<usize>>,
    num_classes: usize,
}

impl StagePlan {
    /// Every stage but the last must hold exactly as many classes as the
    /// first; the last may hold fewer. Together they must cover `0..num_classes`
    /// exactly once.
    pub fn new(stages: Vec<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let bad = |m: String| Err(TrainError::PlanMismatch(m));
        if stages.is_empty() || stages.iter().any(Vec::is_empty) {
            return bad("every stage needs at least one class".into());
        }
        let c = stages[0].len();
        let t = stages.len();
        if stages[..t - 1].iter().any(|s| s.len() != c) || stages[t - 1].len() > c {
            return bad(format!("stages must hold {c} classes, the last at most {c}"));
        }
        let mut seen = vec![false; num_classes];
        for &class in stages.iter().flatten() {
            if class >= num_classes {
                return bad(format!("class {class} outside 0..{num_classes}"));
            }
            if std::mem::replace(&mut seen[class], true) {
                return bad(format!("class {class} appears in two stages"));
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return bad(format!("class {missing} is never presented"));
        }
        Ok(StagePlan { stages, num_classes })
    }

    /// Chunks `order` into stages of `classes_per_stage`.
    pub fn from_order(order: &[usize], classes_per_stage: usize, num_classes: usize) -> Result<Self> {
        if classes_per_stage == 0 {
            return Err(TrainError::PlanMismatch("classes_per_stage must be positive".into()));
        }
        StagePlan::new(order.chunks(classes_per_stage).map(<[usize]>::to_vec).collect(), num_classes)
    }

    pub fn build(order: ClassOrder, class_sizes: &[usize], classes_per_stage: usize, seed: u64) -> Result<Self> {
        let mut classes: Vec<usize> = (0..class_sizes.len()).collect();
        match order {
            ClassOrder::Natural => {}
            ClassOrder::SizeDescending => classes.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b))),
            ClassOrder::Random => classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
        StagePlan::from_order(&classes, classes_per_stage, class_sizes.len())
    }

    pub fn stages(&self) -> &[Vec<usize>] {
        &self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes_per_stage(&self) -> usize {
        self.stages[0].len()
    }

    /// Classes presented in stages `0..=t`.
    pub fn seen_through(&self, t: usize) -> Vec<usize> {
        self.stages[..=t].iter().flatten().copied().collect()
    }
}

struct StoreData {
    x: Matrix,
    y: Partition,
    g: Partition,
    frozen: Matrix,
}

/// Retained raw samples of earlier classes with their representations under
/// the encoder that finished the previous stage.
pub struct ExemplarStore {
    num_classes: usize,
    num_groups: usize,
    classes: Vec<usize>,
    data: Option<StoreData>,
}

impl ExemplarStore {
    pub fn new(num_classes: usize, num_groups: usize) -> Self {
        ExemplarStore {
            num_classes,
            num_groups,
            classes: Vec::new(),
            data: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.as_ref().map_or(0, |d| d.x.cols())
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_none()
    }

    /// Stored classes in insertion order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.data
            .as_ref()
            .map_or(0, |d| d.y.labels().iter().filter(|&&l| l == class).count())
    }

    pub fn old_data(&self) -> Option<OldData<'_>> {
        self.data.as_ref().map(|d| OldData {
            x: &d.x,
            y: &d.y,
            g: &d.g,
            frozen: &d.frozen,
        })
    }

    pub fn as_batch(&self) -> Option<LabeledBatch> {
        self.data.as_ref().map(|d| LabeledBatch {
            x: d.x.clone(),
            y: d.y.clone(),
            g: d.g.clone(),
        })
    }

    pub fn frozen(&self) -> Option<&Matrix> {
        self.data.as_ref().map(|d| &d.frozen)
    }

    /// SHA-256 over the frozen representations.
    pub fn frozen_digest(&self) -> Option<String> {
        self.data.as_ref().map(|d| {
            let mut h = Sha256::new();
            for v in d.frozen.as_slice() {
                h.update(v.to_le_bytes());
            }
            hex::encode(h.finalize())
        })
    }

    fn append(&mut self, batch: &LabeledBatch) -> Result<()> {
        let placeholder = Matrix::zeros(1, batch.len());
        let merged = match self.data.take() {
            None => LabeledBatch::new(
                batch.x.clone(),
                Partition::new(batch.y.labels().to_vec(), self.num_classes)?,
                Partition::new(batch.g.labels().to_vec(), self.num_groups)?,
            )?,
            Some(d) => LabeledBatch {
                x: d.x,
                y: d.y,
                g: d.g,
            }
            .concat(batch)?,
        };
        self.data = Some(StoreData {
            x: merged.x,
            y: merged.y,
            g: merged.g,
            frozen: placeholder,
        });
        Ok(())
    }

    /// Recomputes the frozen representations of every stored sample.
    pub fn refreeze(&mut self, phi: &Network) -> Result<()> {
        if let Some(d) = self.data.as_mut() {
            d.frozen = project_to_sphere(&phi.infer(&d.x)?).0;
        }
        Ok(())
    }
}

/// Layer widths of an MLP after its input layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl NetworkSpec {
    pub fn build(&self, input: usize, seed: u64) -> Result<Network> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(self.output);
        Ok(Network::mlp(&dims, Activation::Relu, seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementalConfig {
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "default_exemplars")]
    pub exemplars_per_class: usize,
    #[serde(default)]
    pub sampler: SamplerSpec,
    pub train: TrainConfig,
    #[serde(default = "default_encoder")]
    pub encoder: NetworkSpec,
    #[serde(default = "default_discriminator")]
    pub discriminator: NetworkSpec,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Also show the exemplar store to the discriminator.
    #[serde(default)]
    pub discriminator_on_exemplars: bool,
}

fn one() -> f64 {
    1.0
}

fn default_exemplars() -> usize {
    20
}

fn default_encoder() -> NetworkSpec {
    NetworkSpec {
        hidden: vec![128],
        output: 64,
    }
}

fn default_discriminator() -> NetworkSpec {
    NetworkSpec {
        hidden: vec![64],
        output: 32,
    }
}

impl IncrementalConfig {
    pub fn new(train: TrainConfig) -> Self {
        IncrementalConfig {
            beta: 1.0,
            gamma: 1.0,
            eta: 1.0,
            exemplars_per_class: default_exemplars(),
            sampler: SamplerSpec::default(),
            train,
            encoder: default_encoder(),
            discriminator: default_discriminator(),
            probe: ProbeConfig::default(),
            discriminator_on_exemplars: false,
        }
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            beta: self.beta,
            gamma: self.gamma,
            eta: self.eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.exemplars_per_class == 0 && (self.gamma > 0.0 || self.eta > 0.0) {
            return bad("exemplars_per_class must be at least 1 when gamma or eta is positive".into());
        }
        if self.encoder.output == 0 || self.encoder.hidden.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if self.discriminator.output == 0 || self.discriminator.hidden.contains(&0) {
            return bad("discriminator widths must be positive".into());
        }
        if self.probe.hidden == 0 || !(self.probe.lr > 0.0) || !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return bad("probe needs positive width and lr and a train_fraction in (0, 1)".into());
        }
        self.sampler.validate()?;
        self.train.validate()
    }

    pub fn build_networks(&self, input_dim: usize) -> Result<(Network, Network)> {
        let phi = self.encoder.build(input_dim, self.train.seed)?;
        let disc = self.discriminator.build(self.encoder.output, self.train.seed.wrapping_add(1))?;
        Ok((phi, disc))
    }
}

/// One encoder ascent step on `(a) − β(b) − γ(c) − η(d)` with the store as
/// replay data.
pub fn incremental_encoder_step(
    phi: &mut Network,
    disc: &Network,
    new_batch: &LabeledBatch,
    store: &ExemplarStore,
    cfg: &IncrementalConfig,
) -> Result<EncoderTerms> {
    incremental_step(phi, disc, new_batch, store.old_data(), &cfg.weights(), &cfg.train)
}

/// Trains one stage: discriminator steps on the new data, then incremental
/// encoder steps, for the configured epochs.
pub fn run_stage(
    phi: &mut Network,
    disc: &mut Network,
    stage_data: &LabeledBatch,
    store: &ExemplarStore,
    cfg: &IncrementalConfig,
    stage: usize,
    iter_offset: usize,
) -> Result<Vec<TelemetryRecord>> {
    cfg.validate()?;
    if stage_data.is_empty() {
        return Err(TrainError::EmptyStage(stage));
    }
    let extra = if cfg.discriminator_on_exemplars {
        store.as_batch()
    } else {
        None
    };
    train_loop(
        phi,
        disc,
        stage_data,
        store.old_data(),
        extra.as_ref(),
        &cfg.weights(),
        &cfg.train,
        stage,
        iter_offset,
    )
}

/// Selects exemplars for every class of `stage_data`, appends them, and
/// refreezes the whole store with `phi`. Returns how many classes fell back
/// to random selection.
pub fn finish_stage(phi: &Network, stage_data: &LabeledBatch, store: &mut ExemplarStore, cfg: &IncrementalConfig) -> Result<usize> {
    let r = cfg.exemplars_per_class;
    let mut fallbacks = 0;
    if r > 0 {
        let members = stage_data.y.members();
        for (class, idx) in members.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let (reps, _) = project_to_sphere(&phi.infer(&stage_data.x.select_columns(idx))?);
            let seed = cfg.train.seed ^ (class as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
            let chosen = select(&cfg.sampler, &reps, r, seed)?;
            fallbacks += usize::from(chosen.fell_back_to_random);
            let global: Vec<usize> = chosen.indices.iter().map(|&i| idx[i]).collect();
            store.append(&stage_data.select(&global))?;
            store.classes.push(class);
        }
    }
    store.refreeze(phi)?;
    Ok(fallbacks)
}

/// Labeled batch of the listed dataset samples.
pub fn dataset_batch(ds: &Dataset, idx: &[usize]) -> Result<LabeledBatch> {
    let y: Vec<usize> = idx.iter().map(|&i| ds.y[i]).collect();
    let g: Vec<usize> = idx.iter().map(|&i| ds.g[i]).collect();
    labeled_batch(&ds.features.select_columns(idx), &y, ds.num_classes, &g, ds.num_groups)
}

/// Unit-sphere representations of the listed samples.
pub fn represent(phi: &Network, ds: &Dataset, idx: &[usize]) -> Result<Matrix> {
    Ok(project_to_sphere(&phi.infer(&ds.features.select_columns(idx))?).0)
}

/// Evaluation after one stage, on test samples of every class seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub accuracy: f64,
    pub gap_rms: f64,
    pub gap_undefined: usize,
    pub dp: f64,
    pub leakage: LeakageReport,
    /// Accuracy of a probe restricted to each earlier stage's classes.
    pub stage_accuracy: Vec<f64>,
    /// R(Z) of the test representations.
    pub rate_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub classes: Vec<usize>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: usize,
    pub iterations: usize,
    pub exemplars: usize,
    pub sampler_fallbacks: usize,
    pub frozen_digest: Option<String>,
    pub final_epoch: EpochSummary,
    pub metrics: StageMetrics,
}

/// Means of the telemetry over the last epoch of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochSummary {
    #[serde(rename = "dR_y")]
    pub dr_y: f64,
    #[serde(rename = "dR_g")]
    pub dr_g: f64,
    #[serde(rename = "R_z")]
    pub r_z: f64,
    #[serde(rename = "R_z_old")]
    pub r_z_old: f64,
}

impl EpochSummary {
    fn from_tail(records: &[TelemetryRecord]) -> Self {
        if records.is_empty() {
            return EpochSummary::default();
        }
        let n = records.len() as f64;
        let mean = |f: fn(&TelemetryRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        EpochSummary {
            dr_y: mean(|r| r.dr_y),
            dr_g: mean(|r| r.dr_g),
            r_z: mean(|r| r.r_z),
            r_z_old: mean(|r| r.r_z_old),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LastAverage {
    pub last: f64,
    pub average: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub accuracy: LastAverage,
    pub gap_rms: LastAverage,
    pub dp: LastAverage,
    pub leakage: LastAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plan: StagePlan,
    pub stages: Vec<StageReport>,
    pub summary: ExperimentSummary,
}

pub struct ExperimentResult {
    pub report: ExperimentReport,
    pub telemetry: Vec<Vec<TelemetryRecord>>,
    /// Encoder and discriminator at the end of each stage.
    pub snapshots: Vec<(Network, Network)>,
}

fn remap(labels: &[usize], classes: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).expect("label within classes"))
        .collect()
}

/// Retrains probes from scratch on frozen representations: the target probe
/// learns from train samples of the seen classes and is scored on the test
/// split, the leakage probe predicts `g` on the test representations.
pub fn evaluate(
    phi: &Network,
    train: &Dataset,
    test: &Dataset,
    plan: &StagePlan,
    stage: usize,
    probe: &ProbeConfig,
    rate_cfg: &RateConfig,
    seed: u64,
) -> Result<StageMetrics> {
    let seen = plan.seen_through(stage);
    let train_idx = train.indices_of_classes(&seen);
    let test_idx = test.indices_of_classes(&seen);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(TrainError::PlanMismatch(format!("stage {stage} has no train or test samples")));
    }
    let z_train = represent(phi, train, &train_idx)?;
    let z_test = represent(phi, test, &test_idx)?;
    let y_train: Vec<usize> = train_idx.iter().map(|&i| train.y[i]).collect();
    let y_test: Vec<usize> = test_idx.iter().map(|&i| test.y[i]).collect();
    let probe_seed = seed.wrapping_add(1000 + stage as u64);
    let target = Probe::fit(&z_train, &y_train, train.num_classes, probe, probe_seed)?;
    let pred = target.predict(&z_test)?;
    let binary = test.binary_groups();
    let groups: Vec<usize> = test_idx.iter().map(|&i| binary[i]).collect();
    let log = PredictionLog::new(y_test.clone(), pred, groups, test.num_classes)?;
    let gaps = gap_rms(&log)?;
    let dp = demographic_parity(&log)?;
    let g_test: Vec<usize> = test_idx.iter().map(|&i| test.g[i]).collect();
    let leakage = probe_leakage(&z_test, &g_test, test.num_groups, probe_seed, probe)?;

    let mut stage_accuracy = Vec::with_capacity(stage + 1);
    for (s, classes) in plan.stages()[..=stage].iter().enumerate() {
        let tr: Vec<usize> = train.indices_of_classes(classes);
        let te: Vec<usize> = test.indices_of_classes(classes);
        let ytr = remap(&tr.iter().map(|&i| train.y[i]).collect::<Vec<_>>(), classes);
        let yte = remap(&te.iter().map(|&i| test.y[i]).collect::<Vec<_>>(), classes);
        let p = Probe::fit(&represent(phi, train, &tr)?, &ytr, classes.len(), probe, probe_seed.wrapping_add(7 * s as u64 + 1))?;
        stage_accuracy.push(p.accuracy(&represent(phi, test, &te)?, &yte)?);
    }
    Ok(StageMetrics {
        accuracy: log.accuracy(),
        gap_rms: gaps.gap_rms,
        gap_undefined: gaps.undefined_count,
        dp,
        leakage,
        stage_accuracy,
        rate_test: rate(&RepBatch::new(z_test), rate_cfg)?,
    })
}

fn check_plan(train: &Dataset, test: &Dataset, plan: &StagePlan) -> Result<()> {
    let bad = |m: String| Err(TrainError::PlanMismatch(m));
    if plan.num_classes() != train.num_classes {
        return bad(format!("plan covers {} classes, dataset has {}", plan.num_classes(), train.num_classes));
    }
    if test.num_classes != train.num_classes || test.dim() != train.dim() || test.num_groups != train.num_groups {
        return bad("train and test splits disagree on classes, groups or feature dim".into());
    }
    let sizes = train.class_sizes();
    if let Some(c) = (0..sizes.len()).find(|&c| sizes[c] == 0) {
        return bad(format!("class {c} has no training samples"));
    }
    Ok(())
}

/// Runs every stage of `plan`, evaluating after each one.
pub fn run_experiment(train: &Dataset, test: &Dataset, plan: &StagePlan, cfg: &IncrementalConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_plan(train, test, plan)?;
    let (mut phi, mut disc) = cfg.build_networks(train.dim())?;
    let mut store = ExemplarStore::new(train.num_classes, train.num_groups);
    let mut stages = Vec::new();
    let mut telemetry = Vec::new();
    let mut snapshots = Vec::new();
    let mut iter = 0;
    for (t, classes) in plan.stages().iter().enumerate() {
        let idx = train.indices_of_classes(classes);
        if idx.is_empty() {
            return Err(TrainError::EmptyStage(t));
        }
        let data = dataset_batch(train, &idx)?;
        let records = run_stage(&mut phi, &mut disc, &data, &store, cfg, t, iter)?;
        iter += records.len();
        let fallbacks = finish_stage(&phi, &data, &mut store, cfg)?;
        let metrics = evaluate(&phi, train, test, plan, t, &cfg.probe, &cfg.train.rate, cfg.train.seed)?;
        let seen = plan.seen_through(t);
        let per_epoch = records.len().checked_div(cfg.train.epochs).unwrap_or(0);
        stages.push(StageReport {
            stage: t,
            classes: classes.clone(),
            unseen_classes: plan.num_classes() - seen.len(),
            seen_classes: seen,
            iterations: records.len(),
            exemplars: store.len(),
            sampler_fallbacks: fallbacks,
            frozen_digest: store.frozen_digest(),
            final_epoch: EpochSummary::from_tail(&records[records.len() - per_epoch..]),
            metrics,
        });
        telemetry.push(records);
        snapshots.push((phi.clone(), disc.clone()));
    }
    let series = |f: fn(&StageReport) -> f64| -> Result<LastAverage> {
        let v: Vec<f64> = stages.iter().map(f).collect();
        let (last, average) = last_and_average(&v)?;
        Ok(LastAverage { last, average })
    };
    let summary = ExperimentSummary {
        accuracy: series(|s| s.metrics.accuracy)?,
        gap_rms: series(|s| s.metrics.gap_rms)?,
        dp: series(|s| s.metrics.dp)?,
        leakage: series(|s| s.metrics.leakage.accuracy)?,
    };
    Ok(ExperimentResult {
        report: ExperimentReport {
            plan: plan.clone(),
            stages,
            summary,
        },
        telemetry,
        snapshots,
    })
}

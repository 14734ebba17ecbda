//! Deterministic training loop, experiment runner and evaluation.
//!
//! One step runs: forward once, per-task backward passes for the task
//! gradient diagnostics, inter-task weight solving, one backward of the
//! weighted total loss, modality gate update and scaling, and a single
//! momentum-SGD step over every region with the gated map.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{
    apply_gates, gamma_modal, gamma_task, gradnorm_like_weights, imtl_weights, update_gates,
    IntraCalibState,
};
use crate::emit::{GammaValue, MetricsRecord, MetricsWriter};
use crate::error::{Error, Result};
use crate::gradcheck::finite_difference_gradient;
use crate::metrics::{argmax_row, IouCounts, TaskMetrics};
use crate::model::{NetConfig, Network, ParameterStore};
use crate::region::GradientMap;
use crate::synth::{
    drop_modality, generate_dataset, DropModality, SplitScheme, SynthConfig, SyntheticSample,
};
use crate::tape::{LossKind, LossTarget, NodeId, Tape};
use crate::tensor::Tensor;

/// Which calibration stages run during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    None,
    Intra,
    Inter,
    Both,
}

impl CalibrationMode {
    pub fn has_inter(&self) -> bool {
        matches!(self, CalibrationMode::Inter | CalibrationMode::Both)
    }

    pub fn has_intra(&self) -> bool {
        matches!(self, CalibrationMode::Intra | CalibrationMode::Both)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CalibrationMode::None => "none",
            CalibrationMode::Intra => "intra",
            CalibrationMode::Inter => "inter",
            CalibrationMode::Both => "both",
        }
    }
}

/// Fixed det:seg loss weights, written as "det:seg" in configs and flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub det: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { det: 1.0, seg: 1.0 }
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (det, seg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("loss weights {s:?} are not \"det:seg\"")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad loss weight {v:?} in {s:?}")))
        };
        let w = LossWeights {
            det: parse(det)?,
            seg: parse(seg)?,
        };
        if !w.det.is_finite() || !w.seg.is_finite() || w.det < 0.0 || w.seg < 0.0 {
            return Err(Error::Config(format!(
                "loss weights {s:?} must be finite and non-negative"
            )));
        }
        Ok(w)
    }
}

impl std::fmt::Display for LossWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.det, self.seg)
    }
}

impl Serialize for LossWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LossWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Baseline weighting for the two losses before any inter-task solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    /// Use the configured fixed det:seg pair.
    #[default]
    Fixed,
    /// Re-derive norm-proportional weights every step (comparison
    /// baseline); only valid with calibration none or intra.
    GradnormLike,
}

/// Everything one experiment needs; unknown keys in config files are a
/// hard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub data: SynthConfig,
    /// Evaluation samples generated after the training samples from the
    /// same world.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_split")]
    pub split: SplitScheme,
    #[serde(default = "default_calibration")]
    pub calibration: CalibrationMode,
    #[serde(default)]
    pub weighting: WeightingKind,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_alpha_gate")]
    pub alpha_gate: f64,
    #[serde(default = "default_momentum_m")]
    pub momentum_m: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Seeds batch shuffling; net and data carry their own seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_eval_samples() -> usize {
    1024
}
fn default_split() -> SplitScheme {
    SplitScheme::Full
}
fn default_calibration() -> CalibrationMode {
    CalibrationMode::None
}
fn default_alpha_gate() -> f64 {
    0.1
}
fn default_momentum_m() -> f64 {
    0.2
}
fn default_learning_rate() -> f64 {
    5e-2
}
fn default_momentum() -> f64 {
    0.9
}
fn default_log_every() -> usize {
    10
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            net: NetConfig::default(),
            data: SynthConfig::default(),
            eval_samples: default_eval_samples(),
            split: default_split(),
            calibration: default_calibration(),
            weighting: WeightingKind::Fixed,
            loss_weights: LossWeights::default(),
            alpha_gate: default_alpha_gate(),
            momentum_m: default_momentum_m(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            epochs: 80,
            batch_size: 128,
            log_every: default_log_every(),
            seed: 0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.data.validate()?;
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.alpha_gate <= 0.0 {
            return Err(Error::Config("alpha_gate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_m) {
            return Err(Error::Config("momentum_m must be in [0, 1)".into()));
        }
        if self.net.d_lid != self.data.d_lid || self.net.d_img != self.data.d_img {
            return Err(Error::Config(
                "net and data modality widths disagree".into(),
            ));
        }
        if self.net.k_classes != self.data.k_classes || self.net.g_cells != self.data.g_cells {
            return Err(Error::Config("net and data label sizes disagree".into()));
        }
        if self.weighting == WeightingKind::GradnormLike && self.calibration.has_inter() {
            return Err(Error::Config(
                "gradnorm_like weighting requires calibration none or intra".into(),
            ));
        }
        Ok(())
    }

    /// Loads a JSON config file; unknown keys fail.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies one seed to the experiment, the network init and the data
    /// generator, the single-knob reproducibility rule used by the CLI.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.net.init_seed = seed;
        self.data.seed = seed;
        self
    }
}

/// Segmentation targets of one batch.
#[derive(Debug, Clone)]
pub enum SegTarget {
    /// 0/1 cell targets, the production path.
    Cells(Tensor),
    /// Diagnostic duplicate-task mode: the segmentation head is trained as
    /// a second classifier on the detection labels (needs g_cells ==
    /// k_classes). Lets symmetry checks construct two identical tasks.
    MirrorDet,
}

/// One training batch with per-sample task masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_lid: Tensor,
    pub x_img: Tensor,
    pub det_labels: Vec<usize>,
    pub seg_target: SegTarget,
    pub det_mask: Vec<f64>,
    pub seg_mask: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&SyntheticSample]) -> Result<Batch> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let d_lid = samples[0].x_lid.len();
        let d_img = samples[0].x_img.len();
        let g = samples[0].seg_mask.len();
        let mut x_lid = Vec::with_capacity(n * d_lid);
        let mut x_img = Vec::with_capacity(n * d_img);
        let mut seg = Vec::with_capacity(n * g);
        let mut det_labels = Vec::with_capacity(n);
        let mut det_mask = Vec::with_capacity(n);
        let mut seg_mask = Vec::with_capacity(n);
        for s in samples {
            x_lid.extend_from_slice(&s.x_lid);
            x_img.extend_from_slice(&s.x_img);
            seg.extend(s.seg_mask.iter().map(|&v| v as f64));
            det_labels.push(s.det_label);
            det_mask.push(if s.task_mask.0 { 1.0 } else { 0.0 });
            seg_mask.push(if s.task_mask.1 { 1.0 } else { 0.0 });
        }
        Ok(Batch {
            x_lid: Tensor::new(n, d_lid, x_lid)?,
            x_img: Tensor::new(n, d_img, x_img)?,
            det_labels,
            seg_target: SegTarget::Cells(Tensor::new(n, g, seg)?),
            det_mask,
            seg_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.det_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.det_labels.is_empty()
    }
}

/// Step-level knobs of the training loop.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub mode: CalibrationMode,
    pub weighting: WeightingKind,
    pub loss_weights: LossWeights,
}

/// Plain gradient descent with classical momentum: v <- mu v + g,
/// theta <- theta - eta v.
pub struct MomentumSgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(store: &ParameterStore, lr: f64, momentum: f64) -> Self {
        MomentumSgd {
            lr,
            momentum,
            velocity: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore, gm: &GradientMap) {
        debug_assert_eq!(gm.entries().len(), store.len());
        for (i, entry) in gm.entries().iter().enumerate() {
            let v = &mut self.velocity[i];
            let theta = store.param_mut(i).value.data_mut();
            for (j, g) in entry.grad.data().iter().enumerate() {
                v[j] = self.momentum * v[j] + g;
                theta[j] -= self.lr * v[j];
            }
        }
    }
}

/// Diagnostics produced by one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss_det: f64,
    pub loss_seg: f64,
    pub alpha_det: f64,
    pub alpha_seg: f64,
    pub gamma_task: f64,
    pub gamma_modal: f64,
    pub det_correct: usize,
    pub det_labeled: usize,
    pub seg_iou_counts: IouCounts,
}

fn seg_loss(
    tape: &mut Tape,
    seg_logits: NodeId,
    batch: &Batch,
) -> Result<NodeId> {
    match &batch.seg_target {
        SegTarget::Cells(cells) => tape.compute_loss(
            LossKind::SigmoidBce,
            seg_logits,
            LossTarget::Values(cells.clone()),
            &batch.seg_mask,
        ),
        SegTarget::MirrorDet => tape.compute_loss(
            LossKind::SoftmaxCe,
            seg_logits,
            LossTarget::Classes(batch.det_labels.clone()),
            &batch.seg_mask,
        ),
    }
}

/// Runs one calibrated training step and updates the network in place.
/// `step` only labels diagnostics.
pub fn train_step(
    net: &mut Network,
    batch: &Batch,
    state: &mut IntraCalibState,
    cfg: &StepConfig,
    opt: &mut MomentumSgd,
    step: u64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Usage("train_step needs a nonempty batch".into()));
    }
    let pass = net.forward(&batch.x_lid, &batch.x_img)?;
    let mut tape = pass.tape;

    let l_det = tape.compute_loss(
        LossKind::SoftmaxCe,
        pass.det_logits,
        LossTarget::Classes(batch.det_labels.clone()),
        &batch.det_mask,
    )?;
    let l_seg = seg_loss(&mut tape, pass.seg_logits, batch)?;
    let loss_det = tape.value(l_det).scalar_value()?;
    let loss_seg = tape.value(l_seg).scalar_value()?;
    if !loss_det.is_finite() {
        return Err(Error::NonFinite {
            what: "detection loss".into(),
            step,
        });
    }
    if !loss_seg.is_finite() {
        return Err(Error::NonFinite {
            what: "segmentation loss".into(),
            step,
        });
    }

    // Raw per-task gradients at the shared layer drive both the task-ratio
    // diagnostic and the inter-task solve.
    let gm_det = tape.backward(l_det)?;
    let gm_seg = tape.backward(l_seg)?;
    let g_det = net.shared_last_gradient(&gm_det)?;
    let g_seg = net.shared_last_gradient(&gm_seg)?;
    let gamma_t = gamma_task(&g_det, &g_seg);

    let base = match cfg.weighting {
        WeightingKind::Fixed => cfg.loss_weights,
        WeightingKind::GradnormLike => {
            let w = gradnorm_like_weights(&[
                crate::tensor::l2_norm(&g_det),
                crate::tensor::l2_norm(&g_seg),
            ]);
            LossWeights {
                det: w.values()[0],
                seg: w.values()[1],
            }
        }
    };

    let (alpha_det, alpha_seg) = if cfg.mode.has_inter() {
        let gb_det: Vec<f64> = g_det.iter().map(|g| base.det * g).collect();
        let gb_seg: Vec<f64> = g_seg.iter().map(|g| base.seg * g).collect();
        match imtl_weights(&[&gb_det, &gb_seg]) {
            Ok(w) => (base.det * w.values()[0], base.seg * w.values()[1]),
            // A fully masked task has a zero gradient; fall back to the
            // base weights for this step.
            Err(Error::Degenerate(_)) => (base.det, base.seg),
            Err(e) => return Err(e),
        }
    } else {
        (base.det, base.seg)
    };

    let total = tape.add_scaled(l_det, alpha_det, l_seg, alpha_seg)?;
    let total_value = tape.value(total).scalar_value()?;
    if !total_value.is_finite() {
        return Err(Error::NonFinite {
            what: "total loss".into(),
            step,
        });
    }

    let mut gm_total = tape.backward(total)?;
    let (norm_lid, norm_img) = net.fusion_split_norms(&gm_total)?;
    let gamma_m = gamma_modal(norm_lid, norm_img);

    if cfg.mode.has_intra() {
        *state = update_gates(state, norm_lid, norm_img);
        apply_gates(&mut gm_total, state)?;
    }

    opt.step(net.store_mut(), &gm_total);

    // Batch-level prediction quality, read from the pre-update logits.
    let det_logits = tape.value(pass.det_logits);
    let mut det_correct = 0;
    let mut det_labeled = 0;
    for (i, &label) in batch.det_labels.iter().enumerate() {
        if batch.det_mask[i] == 0.0 {
            continue;
        }
        det_labeled += 1;
        if argmax_row(det_logits, i) == label {
            det_correct += 1;
        }
    }
    let mut seg_iou_counts = IouCounts::default();
    if let SegTarget::Cells(cells) = &batch.seg_target {
        let seg_logits = tape.value(pass.seg_logits);
        let g = cells.cols();
        for i in 0..batch.len() {
            if batch.seg_mask[i] == 0.0 {
                continue;
            }
            for j in 0..g {
                let pred = seg_logits.get(i, j) >= 0.0;
                let truth = cells.get(i, j) >= 0.5;
                if pred && truth {
                    seg_iou_counts.intersection += 1;
                }
                if pred || truth {
                    seg_iou_counts.union += 1;
                }
            }
        }
    }

    Ok(StepOutcome {
        loss_det,
        loss_seg,
        alpha_det,
        alpha_seg,
        gamma_task: gamma_t,
        gamma_modal: gamma_m,
        det_correct,
        det_labeled,
        seg_iou_counts,
    })
}

/// Final artifact of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub steps: u64,
    pub final_metrics: TaskMetrics,
    pub baseline_metrics: Option<TaskMetrics>,
    pub delta_mtl: Option<f64>,
}

impl RunReport {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Generated data for one experiment: train (with the split applied) and
/// eval (always fully labeled) drawn from the same world without overlap.
pub fn prepare_datasets(
    cfg: &ExperimentConfig,
) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let joint_cfg = SynthConfig {
        n_samples: cfg.data.n_samples + cfg.eval_samples,
        ..cfg.data.clone()
    };
    let mut joint = generate_dataset(&joint_cfg)?;
    let eval = joint.split_off(cfg.data.n_samples);
    let mut train = joint;
    crate::synth::apply_split(&mut train, cfg.split, cfg.seed);
    Ok((train, eval))
}

/// Evaluates detection accuracy and pooled segmentation IoU on an
/// evaluation set, optionally blanking one modality first.
pub fn evaluate(
    net: &Network,
    eval_set: &[SyntheticSample],
    drop: DropModality,
    batch_size: usize,
) -> Result<TaskMetrics> {
    let mut samples = eval_set.to_vec();
    drop_modality(&mut samples, drop);
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut iou = IouCounts::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SyntheticSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let pass = net.forward(&batch.x_lid, &batch.x_img)?;
        let det_logits = pass.tape.value(pass.det_logits);
        for (i, &label) in batch.det_labels.iter().enumerate() {
            total += 1;
            if argmax_row(det_logits, i) == label {
                correct += 1;
            }
        }
        if let SegTarget::Cells(cells) = &batch.seg_target {
            iou.accumulate(pass.tape.value(pass.seg_logits), cells);
        }
    }
    Ok(TaskMetrics {
        det_accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        seg_iou: iou.value(),
    })
}

struct TrainedRun {
    net: Network,
    steps: u64,
    eval_set: Vec<SyntheticSample>,
}

fn train_network<F>(cfg: &ExperimentConfig, mut sink: F) -> Result<TrainedRun>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let (train_set, eval_set) = prepare_datasets(cfg)?;
    let mut net = Network::build(&cfg.net)?;
    let mut opt = MomentumSgd::new(net.store(), cfg.learning_rate, cfg.momentum);
    let mut state = IntraCalibState::new(cfg.alpha_gate, cfg.momentum_m);
    let step_cfg = StepConfig {
        mode: cfg.calibration,
        weighting: cfg.weighting,
        loss_weights: cfg.loss_weights,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut step = 0u64;
    let mut det_correct = 0usize;
    let mut det_labeled = 0usize;
    let mut running_iou = IouCounts::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SyntheticSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            step += 1;
            let outcome = train_step(&mut net, &batch, &mut state, &step_cfg, &mut opt, step)?;
            det_correct += outcome.det_correct;
            det_labeled += outcome.det_labeled;
            running_iou.intersection += outcome.seg_iou_counts.intersection;
            running_iou.union += outcome.seg_iou_counts.union;

            if step % cfg.log_every as u64 == 0 {
                sink(&MetricsRecord {
                    step,
                    epoch,
                    loss_det: outcome.loss_det,
                    loss_seg: outcome.loss_seg,
                    alpha_det: outcome.alpha_det,
                    alpha_seg: outcome.alpha_seg,
                    w_lid: state.w_lid,
                    w_img: state.w_img,
                    gamma_task: GammaValue(outcome.gamma_task),
                    gamma_modal: GammaValue(outcome.gamma_modal),
                    gate_ratio: state.w_img / state.w_lid,
                    det_acc: if det_labeled == 0 {
                        0.0
                    } else {
                        det_correct as f64 / det_labeled as f64
                    },
                    seg_iou: running_iou.value(),
                })?;
            }
        }
    }
    Ok(TrainedRun {
        net,
        steps: step,
        eval_set,
    })
}

/// Trains to completion, writes the metric streams, checkpoint and report
/// into `cfg.out_dir`, and returns the report. Deterministic in the
/// config seeds.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    baseline: Option<&TaskMetrics>,
) -> Result<RunReport> {
    cfg.validate()?;
    let out_dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::Config("run_experiment needs an output directory".into()))?
        .clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut writer = MetricsWriter::create(&out_dir)?;
    let trained = train_network(cfg, |record| writer.append(record))?;
    let final_metrics = evaluate(
        &trained.net,
        &trained.eval_set,
        DropModality::None,
        cfg.batch_size,
    )?;
    trained.net.save_checkpoint(&out_dir.join("checkpoint.json"))?;

    let delta = match baseline {
        Some(b) => Some(crate::metrics::delta_mtl_pair(&final_metrics, b, 1)?),
        None => None,
    };
    let report = RunReport {
        config: cfg.clone(),
        steps: trained.steps,
        final_metrics,
        baseline_metrics: baseline.copied(),
        delta_mtl: delta,
    };
    let path = out_dir.join("report.json");
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::parse(&path, e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Trains a network in memory without touching the filesystem; used by
/// tests and sweeps that only need final metrics.
pub fn train_in_memory(cfg: &ExperimentConfig) -> Result<(Network, TaskMetrics)> {
    cfg.validate()?;
    let trained = train_network(cfg, |_| Ok(()))?;
    let metrics = evaluate(
        &trained.net,
        &trained.eval_set,
        DropModality::None,
        cfg.batch_size,
    )?;
    Ok((trained.net, metrics))
}

/// A finished in-memory run with its full metric stream; lets callers
/// compute trajectory statistics or re-evaluate under modality drop.
pub struct CollectedRun {
    pub net: Network,
    pub final_metrics: TaskMetrics,
    pub records: Vec<MetricsRecord>,
    pub eval_set: Vec<SyntheticSample>,
}

/// Trains in memory and keeps every logged record.
pub fn run_collected(cfg: &ExperimentConfig) -> Result<CollectedRun> {
    cfg.validate()?;
    let mut records = Vec::new();
    let trained = train_network(cfg, |record| {
        records.push(record.clone());
        Ok(())
    })?;
    let final_metrics = evaluate(
        &trained.net,
        &trained.eval_set,
        DropModality::None,
        cfg.batch_size,
    )?;
    Ok(CollectedRun {
        net: trained.net,
        final_metrics,
        records,
        eval_set: trained.eval_set,
    })
}

/// Which single task a dedicated run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSide {
    Det,
    Seg,
}

/// Trains one single-task variant: full labels for every sample, the other
/// task's loss weighted to zero so its head never moves.
pub fn train_single_task(cfg: &ExperimentConfig, side: TaskSide) -> Result<TaskMetrics> {
    let mut single = cfg.clone();
    single.calibration = CalibrationMode::None;
    single.weighting = WeightingKind::Fixed;
    single.split = SplitScheme::Full;
    single.loss_weights = match side {
        TaskSide::Det => LossWeights { det: 1.0, seg: 0.0 },
        TaskSide::Seg => LossWeights { det: 0.0, seg: 1.0 },
    };
    single.out_dir = None;
    let (_, metrics) = train_in_memory(&single)?;
    Ok(metrics)
}

/// Runs both single-task variants with the same net/data/seed and writes
/// their metrics (the per-task upper bounds) as one JSON object.
pub fn run_upper_bounds(cfg: &ExperimentConfig, out_path: &Path) -> Result<TaskMetrics> {
    cfg.validate()?;
    let det = train_single_task(cfg, TaskSide::Det)?;
    let seg = train_single_task(cfg, TaskSide::Seg)?;
    let bounds = TaskMetrics {
        det_accuracy: det.det_accuracy,
        seg_iou: seg.seg_iou,
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let json = serde_json::to_string_pretty(&bounds)
        .map_err(|e| Error::parse(out_path, e.to_string()))?;
    let mut file = fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    file.write_all(json.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(out_path, e))?;
    Ok(bounds)
}

/// Reads a per-task baseline metrics file written by [`run_upper_bounds`].
pub fn read_baseline_metrics(path: &Path) -> Result<TaskMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Audits backward gradients of a freshly built network on one batch of
/// its own training data against central finite differences.
pub fn gradient_audit_run(cfg: &ExperimentConfig, h: f64) -> Result<crate::gradcheck::AuditReport> {
    let (train_set, _) = prepare_datasets(cfg)?;
    let refs: Vec<&SyntheticSample> = train_set.iter().take(4).collect();
    let batch = Batch::from_samples(&refs)?;
    let mut net = Network::build(&cfg.net)?;

    let analytic = {
        let pass = net.forward(&batch.x_lid, &batch.x_img)?;
        let mut tape = pass.tape;
        let l_det = tape.compute_loss(
            LossKind::SoftmaxCe,
            pass.det_logits,
            LossTarget::Classes(batch.det_labels.clone()),
            &batch.det_mask,
        )?;
        let l_seg = seg_loss(&mut tape, pass.seg_logits, &batch)?;
        let total = tape.add_scaled(l_det, 1.0, l_seg, 1.0)?;
        tape.backward(total)?
    };

    let (topo, store) = net.parts_mut();
    let topo = topo.clone();
    let numeric = finite_difference_gradient(
        store,
        |s| {
            let pass = topo.forward(s, &batch.x_lid, &batch.x_img)?;
            let mut tape = pass.tape;
            let l_det = tape.compute_loss(
                LossKind::SoftmaxCe,
                pass.det_logits,
                LossTarget::Classes(batch.det_labels.clone()),
                &batch.det_mask,
            )?;
            let l_seg = seg_loss(&mut tape, pass.seg_logits, &batch)?;
            let total = tape.add_scaled(l_det, 1.0, l_seg, 1.0)?;
            tape.value(total).scalar_value()
        },
        h,
    )?;

    let mut report = crate::gradcheck::AuditReport {
        networks: 1,
        entries_checked: 0,
        max_rel_error: 0.0,
        max_abs_error_near_zero: 0.0,
    };
    for (a, n) in analytic.entries().iter().zip(numeric.entries()) {
        for (&ga, &gn) in a.grad.data().iter().zip(n.grad.data()) {
            report.observe(ga, gn);
        }
    }
    Ok(report)
}

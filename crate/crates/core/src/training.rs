//! Two-stage training. Ground-truth samples are pulled back into template
//! space by the inverse flow and scored against the template occupancy:
//! least squares on the soft union in stage 1, clamped discrete alignment
//! on the min-union in stage 2, plus the selection/weight sparsity term.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::ParameterStore;
use crate::diff::{AdamConfig, DiffError, Eager, Graph, ParamGrads, Tape, Tensor};
use crate::encoder::Observation;
use crate::error::{Error, IoContext, Result};
use crate::flow::{points_tensor, Direction, FlowField};
use crate::geom::Vec3;
use crate::model::Model;
use crate::par::Execution;
use crate::shapegen::OccupancySamples;
use crate::topology::{self, NeuralTemplate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub batch: usize,
    pub lr: f64,
    /// Occupancy pairs drawn per shape per step in stage 1.
    pub points_stage1: usize,
    /// Same for stage 2, where every point is integrated through the flow.
    pub points_stage2: usize,
    pub lambda_b: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 1000,
            batch: 8,
            lr: 1e-4,
            points_stage1: 1024,
            points_stage2: 256,
            lambda_b: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.points_stage1 == 0 || self.points_stage2 == 0 {
            return Err(Error::Config("train.batch and train.points_* must be positive".into()));
        }
        if self.stage1_iters + self.stage2_iters == 0 {
            return Err(Error::Config("train needs at least one iteration".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return Err(Error::Config(
                "train.lr and train.lambda_b must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.stage1_iters + self.stage2_iters
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub stage: u8,
    pub l_align: f64,
    pub l_b: f64,
    pub total: f64,
}

impl LossReport {
    pub const HEADER: &'static str = "step\tstage\tl_align\tl_b\ttotal";

    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.stage, self.l_align, self.l_b, self.total
        )
    }
}

/// One training shape: the encoder input and its occupancy pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub obs: Observation,
    pub samples: OccupancySamples,
}

/// Occupancy pairs pulled back into template space.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseMappedSamples {
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
}

pub fn inverse_map_samples(
    flow: &FlowField,
    store: &ParameterStore,
    zs: &[f64],
    samples: &OccupancySamples,
) -> Result<InverseMappedSamples> {
    if samples.is_empty() {
        return Err(Error::Empty("occupancy sample set"));
    }
    Ok(InverseMappedSamples {
        points: flow.inverse_deform(store, zs, &samples.points)?,
        labels: samples.labels.clone(),
    })
}

fn labels_tensor(labels: &[u8]) -> Tensor {
    Tensor::new([labels.len(), 1], labels.iter().map(|&o| o as f64).collect()).expect("n x 1")
}

/// `mean((O - o)^2)` on `[N, 1]` columns.
pub fn align_stage1<G: Graph>(g: &mut G, occ: &G::Value, labels: &G::Value) -> Result<G::Value, DiffError> {
    let d = g.sub(occ, labels)?;
    let sq = g.square(&d)?;
    g.mean(&sq)
}

/// `mean(o max(O, 0) + (1 - o)(1 - min(O, 1)))` on `[N, 1]` columns.
pub fn align_stage2<G: Graph>(g: &mut G, occ: &G::Value, labels: &G::Value) -> Result<G::Value, DiffError> {
    let pos = g.relu(occ)?;
    let inside = g.mul(labels, &pos)?;
    let capped = g.clip(occ, f64::NEG_INFINITY, 1.0)?;
    let gap = g.one_minus(&capped)?;
    let not_label = g.one_minus(labels)?;
    let outside = g.mul(&not_label, &gap)?;
    let terms = g.add(&inside, &outside)?;
    g.mean(&terms)
}

/// `sum(relu(-B) + relu(B - 1)) + sum(|W - 1|)`.
pub fn sparsity<G: Graph>(g: &mut G, b: &G::Value, w: &G::Value) -> Result<G::Value, DiffError> {
    let neg_b = g.scale(b, -1.0)?;
    let below = g.relu(&neg_b)?;
    let b_minus = g.add_scalar(b, -1.0)?;
    let above = g.relu(&b_minus)?;
    let w_minus = g.add_scalar(w, -1.0)?;
    let w_over = g.relu(&w_minus)?;
    let w_under = g.one_minus(w)?;
    let w_under = g.relu(&w_under)?;
    let parts = [below, above, w_over, w_under];
    let mut total = g.sum(&parts[0])?;
    for p in &parts[1..] {
        let s = g.sum(p)?;
        total = g.add(&total, &s)?;
    }
    Ok(total)
}

fn eval_align(occ: &[f64], labels: &[u8], stage: u8) -> Result<f64> {
    if occ.is_empty() {
        return Err(Error::Empty("occupancy sample set"));
    }
    if occ.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} occupancies for {} labels",
            occ.len(),
            labels.len()
        )));
    }
    let mut g = Eager;
    let o = g.constant(Tensor::new([occ.len(), 1], occ.to_vec())?);
    let l = g.constant(labels_tensor(labels));
    let v = if stage == 1 {
        align_stage1(&mut g, &o, &l)?
    } else {
        align_stage2(&mut g, &o, &l)?
    };
    Ok(v.item())
}

/// Stage-1 alignment from precomputed soft occupancies.
pub fn loss_con_from_occupancy(occ: &[f64], labels: &[u8]) -> Result<f64> {
    eval_align(occ, labels, 1)
}

/// Stage-2 alignment from precomputed min-union values.
pub fn loss_dis_from_occupancy(occ: &[f64], labels: &[u8]) -> Result<f64> {
    eval_align(occ, labels, 2)
}

pub fn loss_align_stage1(template: &NeuralTemplate, mapped: &InverseMappedSamples) -> Result<f64> {
    let occ: Vec<f64> = mapped.points.iter().map(|&p| template.occupancy_stage1(p)).collect();
    loss_con_from_occupancy(&occ, &mapped.labels)
}

pub fn loss_align_stage2(template: &NeuralTemplate, mapped: &InverseMappedSamples) -> Result<f64> {
    let occ: Vec<f64> = mapped.points.iter().map(|&p| template.occupancy_stage2(p)).collect();
    loss_dis_from_occupancy(&occ, &mapped.labels)
}

/// Sparsity of raw `B` and `W` values.
pub fn loss_sparsity(b: &Tensor, w: &Tensor) -> Result<f64> {
    let mut g = Eager;
    let b = g.constant(b.clone());
    let w = g.constant(w.clone());
    Ok(sparsity(&mut g, &b, &w)?.item())
}

/// Alignment loss of one shape on `points`/`labels`, recorded on `g`.
pub fn shape_alignment<G: Graph>(
    g: &mut G,
    model: &Model,
    obs: &Observation,
    points: &[Vec3],
    labels: &[u8],
    stage: u8,
) -> Result<G::Value> {
    if points.is_empty() {
        return Err(Error::Empty("occupancy sample set"));
    }
    let store = &model.store;
    let (zt, zs) = model.encoder.forward(g, store, obs)?;
    let h = model.template.planes(g, store, &zt)?;
    let pts = g.constant(points_tensor(points));
    let lab = g.constant(labels_tensor(labels));
    if stage == 1 {
        // The flow is the identity in stage 1 (zero output layer, not trained).
        let b = g.param(store, model.template.b);
        let w = g.param(store, model.template.w);
        let occ = topology::occupancy_stage1_graph(g, &h, &b, &w, &pts)?;
        return Ok(align_stage1(g, &occ, &lab)?);
    }
    let cond = model.flow.condition(g, store, &zs)?;
    let mapped = model.flow.integrate(g, store, &cond, &pts, Direction::Inverse)?;
    let b = store.value(model.template.b);
    let active = topology::active_columns(b);
    let occ = if active.is_empty() {
        g.constant(Tensor::full([points.len(), 1], f64::INFINITY))
    } else {
        let cols = crate::diff::GatherIndex::columns(b.shape()[0], b.shape()[1], &active);
        let sel = Tensor::new(
            cols.shape.clone(),
            cols.src.iter().map(|s| b.data()[s.expect("in range")]).collect(),
        )?;
        let sel = g.constant(sel);
        topology::occupancy_stage2_graph(g, &h, &sel, &mapped)?
    };
    Ok(align_stage2(g, &occ, &lab)?)
}

/// Stage-1 sparsity term recorded on `g`.
pub fn model_sparsity<G: Graph>(g: &mut G, model: &Model) -> Result<G::Value> {
    let b = g.param(&model.store, model.template.b);
    let w = g.param(&model.store, model.template.w);
    Ok(sparsity(g, &b, &w)?)
}

/// One batch element: an example index and the sample indices drawn for it.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub example: usize,
    pub points: Vec<usize>,
}

/// Full objective `mean_s align_s + lambda_b L_B` on a single graph
/// (stage 2 drops `L_B`, whose parameters are frozen there).
pub fn batch_objective<G: Graph>(
    g: &mut G,
    model: &Model,
    data: &[Example],
    batch: &[BatchItem],
    stage: u8,
    lambda_b: f64,
) -> Result<G::Value> {
    let mut total: Option<G::Value> = None;
    for item in batch {
        let (pts, labels) = gather_points(&data[item.example].samples, &item.points);
        let a = shape_alignment(g, model, &data[item.example].obs, &pts, &labels, stage)?;
        let a = g.scale(&a, 1.0 / batch.len() as f64)?;
        total = Some(match total {
            Some(t) => g.add(&t, &a)?,
            None => a,
        });
    }
    let mut total = total.ok_or(Error::Empty("batch"))?;
    if stage == 1 {
        let lb = model_sparsity(g, model)?;
        let lb = g.scale(&lb, lambda_b)?;
        total = g.add(&total, &lb)?;
    }
    Ok(total)
}

fn gather_points(samples: &OccupancySamples, idx: &[usize]) -> (Vec<Vec3>, Vec<u8>) {
    (
        idx.iter().map(|&i| samples.points[i]).collect(),
        idx.iter().map(|&i| samples.labels[i]).collect(),
    )
}

/// Optimizer loop state that must survive a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// Completed iterations over both stages.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Draws the next batch: shapes with replacement, points without.
pub fn draw_batch(rng: &mut ChaCha8Rng, data: &[Example], batch: usize, points: usize) -> Vec<BatchItem> {
    (0..batch)
        .map(|_| {
            let example = rng.gen_range(0..data.len());
            let n = data[example].samples.len();
            let k = points.min(n);
            BatchItem {
                example,
                points: sample(rng, n, k).into_vec(),
            }
        })
        .collect()
}

/// One optimizer step. Per-shape forward/backward passes run on separate
/// tapes (in parallel when enabled); gradients are reduced in batch order.
pub fn train_step(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    state: &mut TrainerState,
    exec: Execution,
) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let stage = model.stage;
    let points = if stage == 1 {
        cfg.points_stage1
    } else {
        cfg.points_stage2
    };
    let batch = draw_batch(&mut state.rng, data, cfg.batch, points);
    let step = state.step;
    let per_shape = {
        let model = &*model;
        exec.map(&batch, |item| -> Result<(f64, ParamGrads)> {
            let ex = &data[item.example];
            let (pts, labels) = gather_points(&ex.samples, &item.points);
            let mut tape = Tape::new();
            let loss = shape_alignment(&mut tape, model, &ex.obs, &pts, &labels, stage)?;
            let value = tape.value(&loss).item();
            let grads = tape.backward(loss)?.into_params();
            Ok((value, grads))
        })
    };
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::new();
    let mut l_align = 0.0;
    for r in per_shape {
        let (v, g) = r.map_err(|e| match e {
            Error::NonFiniteFlow { .. } => Error::NonFiniteLoss {
                step,
                last_checkpoint: None,
            },
            other => other,
        })?;
        l_align += v * scale;
        grads.accumulate(&g, scale);
    }
    let mut l_b = 0.0;
    if stage == 1 {
        let mut tape = Tape::new();
        let lb = model_sparsity(&mut tape, model)?;
        l_b = tape.value(&lb).item();
        let g = tape.backward(lb)?.into_params();
        grads.accumulate(&g, cfg.lambda_b);
    }
    let total = l_align + cfg.lambda_b * l_b;
    if !total.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            last_checkpoint: None,
        });
    }
    let trainable = model.trainable(stage);
    model.store.adam_step(&grads, cfg.lr, &trainable, cfg.adam());
    state.step += 1;
    Ok(LossReport {
        step,
        stage,
        l_align,
        l_b,
        total,
    })
}

/// Appends rows to the training log, writing the header for a new file.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn open(path: &Path, resume: bool) -> Result<Self> {
        let fresh = !resume || !path.exists();
        let file = if fresh {
            File::create(path)
        } else {
            OpenOptions::new().append(true).open(path)
        }
        .context(|| format!("opening log {}", path.display()))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", LossReport::HEADER).context(|| "writing log".into())?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &LossReport) -> Result<()> {
        writeln!(self.out, "{}", r.to_row()).context(|| "writing log".into())?;
        self.out.flush().context(|| "writing log".into())
    }
}

/// Where [`train`] writes checkpoints and the log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn stage_checkpoint(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("stage{stage}.ckpt"))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.tsv")
    }
}

/// Runs the remaining iterations of both stages from `state`, binarizing
/// `B` between them. With an output directory, each stage end is
/// checkpointed and every step is logged.
pub fn train(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    state: &mut TrainerState,
    out: Option<&TrainOutput>,
    exec: Execution,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let mut log = match out {
        Some(o) => Some(TrainLog::open(&o.log(), state.step > 0)?),
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut reports = Vec::new();
    while state.step < cfg.total_iters() {
        if model.stage == 1 && state.step >= cfg.stage1_iters {
            finish_stage1(model, state, out, &mut last_checkpoint)?;
        }
        let report = train_step(model, data, cfg, state, exec).map_err(|e| match e {
            Error::NonFiniteLoss { step, .. } => Error::NonFiniteLoss {
                step,
                last_checkpoint: last_checkpoint.clone(),
            },
            other => other,
        })?;
        if let Some(log) = log.as_mut() {
            log.write(&report)?;
        }
        on_step(&report);
        reports.push(report);
    }
    if model.stage == 1 {
        finish_stage1(model, state, out, &mut last_checkpoint)?;
    }
    if let Some(o) = out {
        crate::checkpoint::save(&o.stage_checkpoint(2), model, state)?;
    }
    Ok(reports)
}

fn finish_stage1(
    model: &mut Model,
    state: &TrainerState,
    out: Option<&TrainOutput>,
    last: &mut Option<PathBuf>,
) -> Result<()> {
    if let Some(o) = out {
        let path = o.stage_checkpoint(1);
        crate::checkpoint::save(&path, model, state)?;
        *last = Some(path);
    }
    model.enter_stage2()
}

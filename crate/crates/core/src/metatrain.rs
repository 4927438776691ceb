//! First-order meta-training: adapt a clone on each task's support set, take
//! the query-set gradient at the adapted parameters as that task's
//! contribution, sum the contributions, and apply one outer update per step.
//!
//! The engine is written against two small traits so the same loop that
//! trains the translator can be driven by closed-form toy objectives in
//! tests. Determinism: task order is the source's order, accumulation is in
//! task-index order, and every random choice belongs to the task source.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{backward, clip_grad_norm, Batch, ModelConfig, ModelKind, OptKind, OptimizerState, ParamVector};
use crate::scalar::Scalar;
use crate::seed::derive_seed;

/// One adaptation problem. `support_grad`/`query_grad` compute the respective
/// loss at the given parameters and leave its exact gradient in the parameter
/// vector's grad buffer (overwriting whatever was there).
pub trait MetaTask<F: Scalar> {
    fn support_grad(&mut self, params: &mut ParamVector<F>) -> Result<F>;
    fn query_grad(&mut self, params: &mut ParamVector<F>) -> Result<F>;
    fn id(&self) -> u32;
    fn domain(&self) -> &str;
    fn mean_divergence(&self) -> f64;
}

/// Where tasks come from. Implementations decide ordering, sampling and
/// whether membership changes across steps.
pub trait TaskSource<F: Scalar> {
    type Task: MetaTask<F>;
    fn meta_steps(&self) -> usize;
    fn tasks_for_step(&mut self, step: usize) -> Result<Vec<Self::Task>>;
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetaConfig {
    /// Inner (task-adaptation) learning rate α.
    pub inner_lr: f64,
    /// Outer (meta) learning rate β.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub inner_opt: OptKind,
    pub outer_opt: OptKind,
    /// Global-norm ceiling for the summed meta-gradient; clips are logged.
    pub clip_norm: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 5e-5,
            outer_lr: 1e-5,
            inner_steps: 1,
            inner_opt: OptKind::Sgd,
            outer_opt: OptKind::Adam,
            clip_norm: 5.0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::InvalidConfig("inner_lr must be finite and >= 0".into()));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::InvalidConfig("outer_lr must be finite and > 0".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Adapts a clone of `params` on the task's support set and returns it along
/// with the support loss before the first update. The input parameters are
/// never touched.
pub fn inner_adapt<F: Scalar, T: MetaTask<F>>(
    params: &ParamVector<F>,
    task: &mut T,
    cfg: &MetaConfig,
) -> Result<(ParamVector<F>, f64)> {
    let mut adapted = params.clone();
    let mut opt = OptimizerState::<F>::new(cfg.inner_opt, cfg.inner_lr, adapted.len());
    let mut first_loss = None;
    for k in 0..cfg.inner_steps {
        let loss = task.support_grad(&mut adapted)?.to64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("task {} inner step {}", task.id(), k + 1),
            });
        }
        first_loss.get_or_insert(loss);
        opt.step(&mut adapted)?;
    }
    Ok((adapted, first_loss.unwrap()))
}

/// First-order meta-gradient: the query-loss gradient evaluated at the
/// adapted parameters, taken verbatim as the contribution at the original
/// parameters (second-order terms dropped).
pub fn fomaml_outer_grad<F: Scalar, T: MetaTask<F>>(
    adapted: &mut ParamVector<F>,
    task: &mut T,
) -> Result<(Vec<F>, f64)> {
    let loss = task.query_grad(adapted)?.to64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: format!("task {} query loss", task.id()),
        });
    }
    Ok((adapted.grad().to_vec(), loss))
}

/// One row per (step, task) in arrival order, plus the outer-update columns
/// repeated on each row of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRow {
    pub step: usize,
    pub task_id: u32,
    pub domain: String,
    pub support_loss: f64,
    pub query_loss: f64,
    /// Norm of this task's own contribution.
    pub task_grad_norm: f64,
    pub mean_divergence: f64,
    /// Norm of the summed step gradient before any clipping.
    pub outer_grad_norm: f64,
    pub clipped: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TaskRow>,
}

impl TrainLog {
    /// TSV with 17-significant-digit floats. `wall_ms` is the final column so
    /// reproducibility checks can strip it.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "step\ttask_id\tdomain\tsupport_loss\tquery_loss\ttask_grad_norm\tmean_divergence\touter_grad_norm\tclipped\twall_ms"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{}\t{}",
                r.step,
                r.task_id,
                r.domain,
                r.support_loss,
                r.query_loss,
                r.task_grad_norm,
                r.mean_divergence,
                r.outer_grad_norm,
                if r.clipped { 1 } else { 0 },
                r.wall_ms
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Runs the outer loop over every step the source offers. After each outer
/// update `on_step(step, params)` fires so callers can checkpoint.
pub fn meta_train<F: Scalar, S: TaskSource<F>>(
    params: &mut ParamVector<F>,
    source: &mut S,
    cfg: &MetaConfig,
    mut on_step: impl FnMut(usize, &ParamVector<F>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut outer = OptimizerState::<F>::new(cfg.outer_opt, cfg.outer_lr, params.len());
    let mut log = TrainLog::default();

    for step in 1..=source.meta_steps() {
        let mut tasks = source.tasks_for_step(step)?;
        if tasks.is_empty() {
            return Err(Error::InvalidConfig(format!("step {step} produced no tasks")));
        }
        let mut acc = vec![F::zero(); params.len()];
        let first_row = log.rows.len();

        for task in tasks.iter_mut() {
            let t0 = Instant::now();
            let (mut adapted, support_loss) =
                inner_adapt(params, task, cfg).map_err(|e| step_context(e, step, task.id()))?;
            let (grad, query_loss) = fomaml_outer_grad(&mut adapted, task)
                .map_err(|e| step_context(e, step, task.id()))?;
            let mut sq = 0.0;
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += *g;
                sq += g.to64() * g.to64();
            }
            log.rows.push(TaskRow {
                step,
                task_id: task.id(),
                domain: task.domain().to_string(),
                support_loss,
                query_loss,
                task_grad_norm: sq.sqrt(),
                mean_divergence: task.mean_divergence(),
                outer_grad_norm: 0.0,
                clipped: false,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
        }

        params.grad_mut().copy_from_slice(&acc);
        let (norm, clipped) = clip_grad_norm(params, cfg.clip_norm);
        outer.step(params)?;
        for row in &mut log.rows[first_row..] {
            row.outer_grad_norm = norm;
            row.clipped = clipped;
        }
        on_step(step, params)?;
    }
    Ok(log)
}

fn step_context(e: Error, step: usize, task: u32) -> Error {
    match e {
        Error::NonFiniteLoss { context } => Error::NonFiniteLoss {
            context: format!("meta step {step}, task {task}: {context}"),
        },
        other => other,
    }
}

/// A translator task with prebuilt batches: the full support set is one batch
/// and likewise the query set. Dropout seeds advance per gradient call so
/// repeated inner steps see fresh masks while staying reproducible.
pub struct NmtMetaTask {
    pub task_id: u32,
    pub domain: String,
    pub mean_divergence: f64,
    pub support: Batch,
    pub query: Batch,
    pub cfg: ModelConfig,
    dropout_base: Option<u64>,
    calls: u64,
}

impl NmtMetaTask {
    /// Encodes a curriculum task into batches. `dropout_base` seeds the
    /// dropout stream when the model config has dropout enabled.
    pub fn from_task(
        task: &crate::curriculum::Task,
        vocab: &crate::corpus::Vocabulary,
        cfg: &ModelConfig,
        dropout_base: Option<u64>,
    ) -> Result<Self> {
        let encode = |pairs: &[crate::corpus::SentencePair]| -> Vec<(Vec<u32>, Vec<u32>)> {
            pairs
                .iter()
                .map(|p| (vocab.encode(&p.src), vocab.encode(&p.tgt)))
                .collect()
        };
        let support = Batch::for_translation(&encode(&task.support), cfg.max_len)?;
        let query = Batch::for_translation(&encode(&task.query), cfg.max_len)?;
        Ok(NmtMetaTask {
            task_id: task.task_id,
            domain: task.domain.clone(),
            mean_divergence: task.mean_divergence,
            support,
            query,
            cfg: cfg.clone(),
            dropout_base,
            calls: 0,
        })
    }

    fn next_dropout_seed(&mut self) -> Option<u64> {
        let seed = self
            .dropout_base
            .map(|base| derive_seed(base, &[self.task_id as u64, self.calls]));
        self.calls += 1;
        seed
    }
}

impl<F: Scalar> MetaTask<F> for NmtMetaTask {
    fn support_grad(&mut self, params: &mut ParamVector<F>) -> Result<F> {
        let seed = self.next_dropout_seed();
        let out = backward(params, &self.cfg, &self.support, ModelKind::Translator, seed)?;
        Ok(out.loss)
    }

    fn query_grad(&mut self, params: &mut ParamVector<F>) -> Result<F> {
        let seed = self.next_dropout_seed();
        let out = backward(params, &self.cfg, &self.query, ModelKind::Translator, seed)?;
        Ok(out.loss)
    }

    fn id(&self) -> u32 {
        self.task_id
    }

    fn domain(&self) -> &str {
        &self.domain
    }

    fn mean_divergence(&self) -> f64 {
        self.mean_divergence
    }
}

/// How the meta-training samples its tasks each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Sliding-window curriculum, fresh membership each step.
    Curriculum,
    /// Whole-pool sampling with membership frozen across steps.
    Uniform,
}

/// Task source backed by a curriculum schedule over scored corpora.
pub struct ScheduledTaskSource<'a> {
    pub schedule: &'a crate::curriculum::CurriculumSchedule,
    pub vocab: &'a crate::corpus::Vocabulary,
    pub model_cfg: ModelConfig,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub dropout_base: Option<u64>,
    /// Filled as steps are drawn, for the per-step task manifests.
    pub manifests: Vec<crate::curriculum::TaskManifest>,
    frozen: Option<Vec<crate::curriculum::Task>>,
}

impl<'a> ScheduledTaskSource<'a> {
    pub fn new(
        schedule: &'a crate::curriculum::CurriculumSchedule,
        vocab: &'a crate::corpus::Vocabulary,
        model_cfg: ModelConfig,
        sampler: SamplerKind,
        seed: u64,
        dropout_base: Option<u64>,
    ) -> Self {
        ScheduledTaskSource {
            schedule,
            vocab,
            model_cfg,
            sampler,
            seed,
            dropout_base,
            manifests: Vec::new(),
            frozen: None,
        }
    }
}

impl<'a, F: Scalar> TaskSource<F> for ScheduledTaskSource<'a> {
    type Task = NmtMetaTask;

    fn meta_steps(&self) -> usize {
        self.schedule.config().meta_steps
    }

    fn tasks_for_step(&mut self, step: usize) -> Result<Vec<NmtMetaTask>> {
        let tasks = match self.sampler {
            SamplerKind::Curriculum => self.schedule.assemble_tasks(step, self.seed)?,
            SamplerKind::Uniform => {
                if self.frozen.is_none() {
                    self.frozen = Some(self.schedule.uniform_tasks(self.seed)?);
                }
                self.frozen.clone().unwrap()
            }
        };
        self.manifests
            .push(crate::curriculum::TaskManifest::from_tasks(step, &tasks));
        tasks
            .iter()
            .map(|t| NmtMetaTask::from_task(t, self.vocab, &self.model_cfg, self.dropout_base))
            .collect()
    }
}

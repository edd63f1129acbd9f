//! The training loop: pulls batches from a schedule, routes each to its
//! objective's head and loss, accumulates gradients and steps Adam.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use crate::checkpoint::save_head_checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{ConvergenceCriterion, Metric, Split};
use crate::lang_module::LangModule;
use crate::rng::RngStreams;
use crate::schedules::Schedule;
use crate::tensor::{adam_step_with_lr, AdamConfig, AdamState, Graph};

pub const LOG_HEADER: &str = "update\tobjective\tsplit\tmetric\tvalue";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingArguments {
    pub adam: AdamConfig,
    /// Batches per optimizer update; defaults to the number of objectives
    /// for the parallel strategy and 1 otherwise.
    pub gradient_accumulation_steps: Option<usize>,
    pub eval_interval: usize,
    pub log_interval: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// TSV mirror of the log stream.
    pub log_path: Option<PathBuf>,
    pub seed: u64,
    pub max_global_updates: Option<usize>,
    pub convergence: ConvergenceCriterion,
    /// Linear learning-rate warmup over this many updates (0 disables it).
    pub warmup_steps: usize,
    pub reset_optimizer_between_phases: bool,
}

impl Default for TrainingArguments {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            gradient_accumulation_steps: None,
            eval_interval: 200,
            log_interval: 50,
            checkpoint_dir: None,
            log_path: None,
            seed: 0,
            max_global_updates: None,
            convergence: ConvergenceCriterion::default(),
            warmup_steps: 0,
            reset_optimizer_between_phases: true,
        }
    }
}

impl TrainingArguments {
    pub fn validate(&self) -> Result<()> {
        if self.gradient_accumulation_steps == Some(0) {
            return Err(Error::Config("gradient_accumulation_steps must be at least 1".into()));
        }
        if self.eval_interval == 0 || self.log_interval == 0 {
            return Err(Error::Config("eval_interval and log_interval must be at least 1".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        self.convergence.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub update: u64,
    pub objective: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub timestamp: SystemTime,
}

impl LogRecord {
    fn new(update: u64, objective: &str, split: &str, metric: &str, value: f64) -> Self {
        Self {
            update,
            objective: objective.to_string(),
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            timestamp: SystemTime::now(),
        }
    }

    /// The TSV row; the timestamp is left out so logs are reproducible.
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.update, self.objective, self.split, self.metric, self.value
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Schedule,
    MaxGlobalUpdates,
    Exhausted,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub updates: u64,
    pub batches: u64,
    pub stop: StopReason,
    pub log: Vec<LogRecord>,
}

struct LogSink {
    records: Vec<LogRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
                writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), w))
            }
            None => None,
        };
        Ok(Self {
            records: Vec::new(),
            file,
        })
    }

    fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.file {
            writeln!(w, "{}", record.tsv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<LogRecord>> {
        if let Some((path, w)) = &mut self.file {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(self.records)
    }
}

/// Evaluates every scheduled objective on its evaluators and returns one
/// record per metric.
pub fn evaluate_all(
    lm: &LangModule,
    schedule: &mut Schedule,
    criterion: &ConvergenceCriterion,
    update: u64,
) -> Result<Vec<LogRecord>> {
    let mut records = Vec::new();
    for objective in schedule.objectives_mut() {
        let id = objective.id().to_string();
        for (m, v) in objective.evaluate(Split::Val, lm, criterion)? {
            records.push(LogRecord::new(update, &id, "val", m.as_str(), v));
        }
        if objective.evaluators().iter().any(|e| e.split == Split::Train) {
            for (m, v) in objective.evaluate(Split::Train, lm, criterion)? {
                if m != Metric::ValLoss {
                    records.push(LogRecord::new(update, &id, "train", m.as_str(), v));
                }
            }
        }
    }
    Ok(records)
}

/// Runs the loop until the schedule stops, is exhausted, or the global
/// update budget is spent. Partial accumulations are flushed at the end and
/// at sequential phase boundaries.
pub fn train(
    lm: &mut LangModule,
    schedule: &mut Schedule,
    args: &TrainingArguments,
) -> Result<TrainOutcome> {
    args.validate()?;
    for o in schedule.objectives() {
        lm.head_for(o.id())?;
    }
    let accumulation = args.gradient_accumulation_steps.unwrap_or(
        if schedule.strategy_name() == "parallel" {
            schedule.objectives().len()
        } else {
            1
        },
    );
    let scale = 1.0 / accumulation as f64;
    let mut sink = LogSink::open(args.log_path.as_deref())?;
    let mut adam = AdamState::new(args.adam);
    let dropout = lm.model().config().dropout > 0.0;
    let mut dropout_rng = RngStreams::new(args.seed).stream("dropout");
    lm.store_mut().zero_grads();

    let n = schedule.objectives().len();
    let mut pending = 0usize;
    let mut updates = 0u64;
    let mut batches = 0u64;
    let mut loss_since_log = vec![(0.0f64, 0usize); n];
    let mut last_eval = 0u64;

    let stop = loop {
        if args.max_global_updates.is_some_and(|m| updates >= m as u64) {
            break StopReason::MaxGlobalUpdates;
        }
        if schedule.should_stop() {
            break StopReason::Schedule;
        }
        let Some(batch) = schedule.next_batch()? else {
            break StopReason::Exhausted;
        };
        if schedule.take_phase_change() && batches > 0 {
            if pending > 0 {
                step(lm, &mut adam, args, &mut updates, &mut pending)?;
                after_update(lm, schedule, args, &mut sink, &mut loss_since_log, &mut last_eval, updates)?;
            }
            if args.reset_optimizer_between_phases {
                adam.reset();
            }
        }
        let idx = schedule.index_of(&batch.objective_id)?;
        let head = lm.head_for(&batch.objective_id)?.clone();
        let mut g = Graph::new();
        let logits = lm.model().forward(
            &mut g,
            lm.params_for(&batch.objective_id)?,
            &head,
            &batch,
            dropout.then_some(&mut dropout_rng),
        )?;
        let objective = &mut schedule.objectives_mut()[idx];
        let loss = objective.compute_loss(&mut g, logits, &batch)?;
        objective.state.steps_taken += 1;
        let value = g.value(loss)[0] as f64;
        if !value.is_finite() {
            sink.push(LogRecord::new(updates, &batch.objective_id, "train", "nonfinite_loss", value))?;
            sink.finish()?;
            return Err(Error::NonFiniteLoss {
                objective: batch.objective_id.clone(),
                update: updates,
                value,
            });
        }
        loss_since_log[idx].0 += value;
        loss_since_log[idx].1 += 1;
        let scaled = if accumulation > 1 { g.scale(loss, scale)? } else { loss };
        g.backward(scaled, lm.store_mut())?;
        batches += 1;
        pending += 1;
        if pending == accumulation {
            step(lm, &mut adam, args, &mut updates, &mut pending)?;
            after_update(lm, schedule, args, &mut sink, &mut loss_since_log, &mut last_eval, updates)?;
        }
    };
    if pending > 0 {
        step(lm, &mut adam, args, &mut updates, &mut pending)?;
        after_update(lm, schedule, args, &mut sink, &mut loss_since_log, &mut last_eval, updates)?;
    }
    if updates > 0 && last_eval != updates {
        for r in evaluate_all(lm, schedule, &args.convergence, updates)? {
            sink.push(r)?;
        }
    }
    if let Some(dir) = &args.checkpoint_dir {
        for o in schedule.objectives() {
            save_head_checkpoint(lm, o.id(), o.vocab(), dir.join(o.id()))?;
        }
    }
    Ok(TrainOutcome {
        updates,
        batches,
        stop,
        log: sink.finish()?,
    })
}

fn step(
    lm: &mut LangModule,
    adam: &mut AdamState,
    args: &TrainingArguments,
    updates: &mut u64,
    pending: &mut usize,
) -> Result<()> {
    let lr = if args.warmup_steps > 0 {
        args.adam.lr * ((*updates + 1) as f64 / args.warmup_steps as f64).min(1.0)
    } else {
        args.adam.lr
    };
    adam_step_with_lr(lm.store_mut(), adam, lr)?;
    lm.store_mut().zero_grads();
    *updates += 1;
    *pending = 0;
    Ok(())
}

fn after_update(
    lm: &LangModule,
    schedule: &mut Schedule,
    args: &TrainingArguments,
    sink: &mut LogSink,
    loss_since_log: &mut [(f64, usize)],
    last_eval: &mut u64,
    updates: u64,
) -> Result<()> {
    if updates.is_multiple_of(args.log_interval as u64) {
        for (i, acc) in loss_since_log.iter_mut().enumerate() {
            if acc.1 > 0 {
                let id = schedule.objectives()[i].id().to_string();
                sink.push(LogRecord::new(updates, &id, "train", "loss", acc.0 / acc.1 as f64))?;
                *acc = (0.0, 0);
            }
        }
    }
    if updates.is_multiple_of(args.eval_interval as u64) {
        for r in evaluate_all(lm, schedule, &args.convergence, updates)? {
            sink.push(r)?;
        }
        *last_eval = updates;
    }
    Ok(())
}

//! Stage runners for the four pipelines.
//!
//! | pipeline    | stages                                                   |
//! |-------------|----------------------------------------------------------|
//! | dense       | pretrain, downstream                                     |
//! | rmoe-d      | pretrain, grow + downstream                              |
//! | rmoe-i      | shortened pretrain, grow + intermediate, downstream      |
//! | moe-scratch | upstream MoE training, downstream                        |
//!
//! Every random draw comes from a stream derived from the config seed and a
//! fixed label (`init`, `head_down`, `grow.<stage>.*`, `scratch.experts`),
//! and every data batch from the task seed, a stream label and a step index.
//! Upstream batches use one stream across pretrain and intermediate stages,
//! so rmoe-i sees the same upstream batches as dense, in the same order.

use crate::checkpoint::Checkpoint;
use crate::growth::{self, FireflyConfig, GrowPlan, ScoreTask, Strategy};
use crate::rng::Stream;
use crate::tensor::{AdamW, AdamWConfig};
use crate::vit::{Batch, HeadRole, Model};
use crate::{Error, Result};

use super::config::{PipelineConfig, PipelineKind};
use super::data::SyntheticTask;
use super::flops::{self, Phase, StageFlops};
use super::runlog::{LogEntry, RunLog, StepEntry, Summary};

pub const STAGE_INIT: &str = "init";
pub const STAGE_PRETRAIN: &str = "pretrain";
pub const STAGE_GROWN_INTERMEDIATE: &str = "grown-intermediate";
pub const STAGE_INTERMEDIATE: &str = "intermediate";
pub const STAGE_GROWN_DOWNSTREAM: &str = "grown-downstream";
pub const STAGE_UPSTREAM_MOE: &str = "upstream-moe";
pub const STAGE_DOWNSTREAM: &str = "downstream";

const UPSTREAM_STREAM: &str = "upstream";
const DOWNSTREAM_STREAM: &str = "downstream";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowStage {
    Intermediate,
    Downstream,
}

impl GrowStage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Intermediate => "intermediate",
            Self::Downstream => "downstream",
        }
    }
}

impl std::str::FromStr for GrowStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intermediate" => Ok(Self::Intermediate),
            "downstream" => Ok(Self::Downstream),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected intermediate or downstream"))),
        }
    }
}

/// Output of one stage: its checkpoint, its log and the FLOPs it spent.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub flops: StageFlops,
    /// Downstream per-token validation accuracy.
    pub metric: f64,
}

pub fn lr_at(lr0: f64, step: usize, total: usize, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Classification accuracy on the validation split: per image upstream,
/// per token downstream.
pub fn evaluate(model: &Model, task: &SyntheticTask, head: HeadRole, batch_size: usize) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for b in task.val_batches(batch_size)? {
        let mut tape = model.tape();
        let out = model.forward(&mut tape, &b.patches, head)?;
        let logits = tape.value(out.logits);
        let c = logits.len() / b.labels.len();
        for (row, &y) in logits.chunks(c).zip(&b.labels) {
            let pred = argmax(row);
            hit += (pred == y) as usize;
        }
        total += b.labels.len();
    }
    Ok(hit as f64 / total as f64)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One optimiser step; returns the log entry without stage and FLOP fields
/// filled in.
fn train_step(model: &mut Model, opt: &mut AdamW, b: &Batch, head: HeadRole, w_balance: f64, lr: f64) -> Result<StepEntry> {
    let (grads, entry) = {
        let mut tape = model.tape();
        let out = model.forward(&mut tape, &b.patches, head)?;
        let l = model.loss(&mut tape, &out, &b.labels, w_balance)?;
        let entry = StepEntry {
            stage: String::new(),
            step: 0,
            lr,
            task_loss: tape.scalar(l.task),
            balance: l.balances.iter().map(|&v| tape.scalar(v)).collect(),
            layer_ids: out.aux.iter().map(|a| a.layer_id).collect(),
            imp: out.aux.iter().map(|a| tape.value(a.gate.imp).to_vec()).collect(),
            flops_cumulative: 0,
        };
        (tape.backward(l.total)?, entry)
    };
    model.store.zero_grads();
    model.store.accumulate(&grads);
    opt.step(&mut model.store, lr)?;
    Ok(entry)
}

struct Segment<'a> {
    stage: &'a str,
    task: &'a SyntheticTask,
    head: HeadRole,
    stream: &'a str,
    offset: usize,
    steps: usize,
    lr0: f64,
    w_balance: f64,
}

fn train(model: &mut Model, cfg: &PipelineConfig, seg: Segment<'_>, log: &mut RunLog, counter: &mut u64) -> Result<()> {
    model.set_trainable(|_| true);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.schedule.weight_decay,
        ..Default::default()
    });
    let per_step = flops::count_flops(model, cfg.schedule.batch_size, seg.head, Phase::TrainStep);
    for s in 0..seg.steps {
        let b = seg.task.train_batch(seg.stream, seg.offset + s, cfg.schedule.batch_size)?;
        let lr = lr_at(seg.lr0, s, seg.steps, cfg.schedule.cosine);
        let mut e = train_step(model, &mut opt, &b, seg.head, seg.w_balance, lr)?;
        *counter += per_step;
        e.stage = seg.stage.to_string();
        e.step = s;
        e.flops_cumulative = *counter;
        log.push(LogEntry::Step(e));
    }
    Ok(())
}

fn marker(log: &mut RunLog, stage: &str, counter: u64) {
    log.push(LogEntry::Stage {
        stage: stage.into(),
        flops_cumulative: counter,
    });
}

fn eval_entry(log: &mut RunLog, stage: &str, name: &str, metric: f64) {
    log.push(LogEntry::Eval {
        stage: stage.into(),
        metric_name: name.into(),
        metric,
    });
}

fn load_pretrained(cfg: &PipelineConfig) -> Result<Option<Checkpoint>> {
    let Some(path) = &cfg.pretrained_checkpoint else {
        return Ok(None);
    };
    let ck = Checkpoint::load(path)?;
    if ck.model.spec != cfg.model {
        return Err(Error::Config(format!("pretrained checkpoint {} has a different model spec", path.display())));
    }
    if !ck.model.is_dense() {
        return Err(Error::State(format!("pretrained checkpoint {} is not dense", path.display())));
    }
    Ok(Some(ck))
}

/// Trains the dense model on the upstream task. rmoe-i spends `e` of the
/// `E` epochs in its intermediate stage instead. A supplied pretrained
/// checkpoint skips training at zero cost.
pub fn run_pretrain(cfg: &PipelineConfig, counter: &mut u64) -> Result<StageRun> {
    if cfg.pipeline == PipelineKind::MoeScratch {
        return Err(Error::State("moe-scratch has no dense pretraining stage".into()));
    }
    let start = *counter;
    let mut log = RunLog::default();
    marker(&mut log, STAGE_PRETRAIN, *counter);
    if let Some(mut ck) = load_pretrained(cfg)? {
        ck.stage = STAGE_PRETRAIN.into();
        ck.seed = cfg.seed;
        return Ok(StageRun {
            checkpoint: ck,
            log,
            flops: 0,
        });
    }
    let s = &cfg.schedule;
    let mut model = Model::init(cfg.model.clone(), &mut Stream::derived(cfg.seed, "init"))?;
    let epochs = match cfg.pipeline {
        PipelineKind::RmoeI => s.upstream_epochs - s.intermediate_epochs,
        _ => s.upstream_epochs,
    };
    let task = SyntheticTask::upstream(cfg);
    train(
        &mut model,
        cfg,
        Segment {
            stage: STAGE_PRETRAIN,
            task: &task,
            head: HeadRole::Upstream,
            stream: UPSTREAM_STREAM,
            offset: 0,
            steps: epochs * s.steps_per_epoch,
            lr0: s.lr_upstream,
            w_balance: cfg.moe.w_balance_upstream,
        },
        &mut log,
        counter,
    )?;
    let acc = evaluate(&model, &task, HeadRole::Upstream, s.eval_batch_size)?;
    eval_entry(&mut log, STAGE_PRETRAIN, "upstream_accuracy", acc);
    Ok(StageRun {
        checkpoint: Checkpoint::new(model, cfg.seed, STAGE_PRETRAIN, None),
        log,
        flops: *counter - start,
    })
}

fn task_for(cfg: &PipelineConfig, name: &str) -> (SyntheticTask, HeadRole) {
    if name == "downstream" {
        (SyntheticTask::downstream(cfg), HeadRole::Downstream)
    } else {
        (SyntheticTask::upstream(cfg), HeadRole::Upstream)
    }
}

/// Over-grows, scores, selects and grows. `aligned` applies to the grown
/// blocks. Scores are only computed for the `score` strategy.
pub fn grow_model(model: &Model, cfg: &PipelineConfig, stage: GrowStage, aligned: bool, counter: &mut u64) -> Result<(Model, GrowPlan)> {
    if !model.is_dense() {
        return Err(Error::State("checkpoint already contains MoE layers".into()));
    }
    let m = &cfg.moe;
    let tag = stage.name();
    let scores = if m.strategy == Strategy::Score {
        let mut over = growth::overgrow(model, m.n, m.k, m.epsilon_score, &mut Stream::derived(cfg.seed, &format!("grow.{tag}.overgrow")))?;
        let default = match stage {
            GrowStage::Intermediate => "upstream",
            GrowStage::Downstream => "downstream",
        };
        let names: Vec<String> = if cfg.firefly.tasks.is_empty() {
            vec![default.to_string()]
        } else {
            cfg.firefly.tasks.clone()
        };
        let w_balance = match stage {
            GrowStage::Intermediate => m.w_balance_upstream,
            GrowStage::Downstream => m.w_balance_downstream,
        };
        let b = cfg.schedule.batch_size;
        let mut tasks = Vec::new();
        for name in &names {
            let (task, head) = task_for(cfg, name);
            if !over.has_head(head) {
                over.attach_head(head, &mut Stream::derived(cfg.seed, &format!("grow.{tag}.head")))?;
            }
            let warmup = (0..cfg.firefly.warmup_steps)
                .map(|s| task.train_batch(&format!("firefly.{tag}.warmup"), s, b))
                .collect::<Result<_>>()?;
            let scoring = (0..cfg.firefly.scoring_batches)
                .map(|s| task.train_batch(&format!("firefly.{tag}.score"), s, b))
                .collect::<Result<_>>()?;
            tasks.push(ScoreTask {
                name: name.clone(),
                head,
                warmup,
                scoring,
                w_balance,
            });
        }
        let ff = FireflyConfig {
            warmup_steps: cfg.firefly.warmup_steps,
            lr: cfg.firefly.lr,
            raw_l2: cfg.firefly.raw_l2,
        };
        let scores = growth::firefly_scores(&over, &tasks, &ff)?;
        *counter += flops::grow_cost(
            cfg,
            match stage {
                GrowStage::Intermediate => HeadRole::Upstream,
                GrowStage::Downstream => HeadRole::Downstream,
            },
        );
        scores
    } else {
        Vec::new()
    };
    let selected = growth::select_layers(&scores, m.strategy, m.max_layers, cfg.model.n_blocks, &m.stages)?;
    let plan = GrowPlan {
        strategy: m.strategy,
        selected_layers: selected,
        max_layers: m.max_layers,
        n: m.n,
        k: m.k,
        epsilon: m.epsilon,
        scores,
    };
    let grown = growth::apply_grow_plan(model, &plan, aligned, &mut Stream::derived(cfg.seed, &format!("grow.{tag}.experts")))?;
    Ok((grown, plan))
}

/// Standalone growth step (`rmoe grow`): the grown checkpoint is tagged
/// `grown-intermediate` or `grown-downstream`. Growing for the downstream
/// stage first attaches the fresh downstream head.
pub fn run_grow(ck: &Checkpoint, cfg: &PipelineConfig, stage: GrowStage, counter: &mut u64) -> Result<StageRun> {
    let start = *counter;
    let mut model = ck.model.clone();
    let tag = match stage {
        GrowStage::Intermediate => STAGE_GROWN_INTERMEDIATE,
        GrowStage::Downstream => {
            model.attach_head(HeadRole::Downstream, &mut Stream::derived(cfg.seed, "head_down"))?;
            STAGE_GROWN_DOWNSTREAM
        }
    };
    let mut log = RunLog::default();
    marker(&mut log, tag, *counter);
    let (grown, plan) = grow_model(&model, cfg, stage, stage == GrowStage::Intermediate, counter)?;
    Ok(StageRun {
        checkpoint: Checkpoint::new(grown, cfg.seed, tag, Some(plan)),
        log,
        flops: *counter - start,
    })
}

fn require_stage(ck: &Checkpoint, allowed: &[&str], what: &str) -> Result<()> {
    if allowed.contains(&ck.stage.as_str()) {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{what} expects a checkpoint at stage {}, got {:?}",
            allowed.join(" or "),
            ck.stage
        )))
    }
}

/// rmoe-i: grow with aligned experts on the upstream task, then finetune
/// everything for `e` epochs at the intermediate learning rate.
pub fn run_intermediate_finetune(ck: &Checkpoint, cfg: &PipelineConfig, counter: &mut u64) -> Result<StageRun> {
    if cfg.pipeline != PipelineKind::RmoeI {
        return Err(Error::State(format!("intermediate finetuning belongs to rmoe-i, not {}", cfg.pipeline)));
    }
    require_stage(ck, &[STAGE_INIT, STAGE_PRETRAIN, STAGE_GROWN_INTERMEDIATE], "intermediate finetuning")?;
    let start = *counter;
    let mut log = RunLog::default();
    marker(&mut log, STAGE_INTERMEDIATE, *counter);
    let (mut model, plan) = if ck.stage == STAGE_GROWN_INTERMEDIATE {
        let mut m = ck.model.clone();
        growth::set_aligned(&mut m, true);
        (m, ck.grow_plan.clone().ok_or_else(|| Error::State("grown checkpoint has no grow plan".into()))?)
    } else {
        grow_model(&ck.model, cfg, GrowStage::Intermediate, true, counter)?
    };
    let s = &cfg.schedule;
    let task = SyntheticTask::upstream(cfg);
    train(
        &mut model,
        cfg,
        Segment {
            stage: STAGE_INTERMEDIATE,
            task: &task,
            head: HeadRole::Upstream,
            stream: UPSTREAM_STREAM,
            offset: (s.upstream_epochs - s.intermediate_epochs) * s.steps_per_epoch,
            steps: s.intermediate_epochs * s.steps_per_epoch,
            lr0: s.lr_intermediate,
            w_balance: cfg.moe.w_balance_upstream,
        },
        &mut log,
        counter,
    )?;
    let acc = evaluate(&model, &task, HeadRole::Upstream, s.eval_batch_size)?;
    eval_entry(&mut log, STAGE_INTERMEDIATE, "upstream_accuracy", acc);
    Ok(StageRun {
        checkpoint: Checkpoint::new(model, cfg.seed, STAGE_INTERMEDIATE, Some(plan)),
        log,
        flops: *counter - start,
    })
}

/// Attaches a fresh downstream head (rmoe-d grows here, unaligned) and
/// trains on the downstream task.
pub fn run_downstream_finetune(ck: &Checkpoint, cfg: &PipelineConfig, counter: &mut u64) -> Result<StageRun> {
    let start = *counter;
    let mut log = RunLog::default();
    marker(&mut log, STAGE_DOWNSTREAM, *counter);
    let head_rng = || Stream::derived(cfg.seed, "head_down");
    let mut plan = ck.grow_plan.clone();
    let mut model = match cfg.pipeline {
        PipelineKind::Dense => {
            require_stage(ck, &[STAGE_INIT, STAGE_PRETRAIN], "dense downstream finetuning")?;
            if !ck.model.is_dense() {
                return Err(Error::State("dense pipeline got a checkpoint with MoE layers".into()));
            }
            let mut m = ck.model.clone();
            m.attach_head(HeadRole::Downstream, &mut head_rng())?;
            m
        }
        PipelineKind::RmoeD => {
            require_stage(ck, &[STAGE_INIT, STAGE_PRETRAIN, STAGE_GROWN_DOWNSTREAM], "rmoe-d downstream finetuning")?;
            if ck.stage == STAGE_GROWN_DOWNSTREAM {
                let mut m = ck.model.clone();
                growth::set_aligned(&mut m, false);
                m
            } else {
                let mut m = ck.model.clone();
                m.attach_head(HeadRole::Downstream, &mut head_rng())?;
                let (g, p) = grow_model(&m, cfg, GrowStage::Downstream, false, counter)?;
                plan = Some(p);
                g
            }
        }
        PipelineKind::RmoeI | PipelineKind::MoeScratch => {
            let want = if cfg.pipeline == PipelineKind::RmoeI {
                STAGE_INTERMEDIATE
            } else {
                STAGE_UPSTREAM_MOE
            };
            require_stage(ck, &[want], &format!("{} downstream finetuning", cfg.pipeline))?;
            let mut m = ck.model.clone();
            growth::set_aligned(&mut m, false);
            m.attach_head(HeadRole::Downstream, &mut head_rng())?;
            m
        }
    };
    let s = &cfg.schedule;
    let task = SyntheticTask::downstream(cfg);
    train(
        &mut model,
        cfg,
        Segment {
            stage: STAGE_DOWNSTREAM,
            task: &task,
            head: HeadRole::Downstream,
            stream: DOWNSTREAM_STREAM,
            offset: 0,
            steps: s.downstream_steps,
            lr0: s.lr_downstream,
            w_balance: cfg.moe.w_balance_downstream,
        },
        &mut log,
        counter,
    )?;
    let acc = evaluate(&model, &task, HeadRole::Downstream, s.eval_batch_size)?;
    eval_entry(&mut log, STAGE_DOWNSTREAM, "downstream_token_accuracy", acc);
    Ok(StageRun {
        checkpoint: Checkpoint::new(model, cfg.seed, STAGE_DOWNSTREAM, plan),
        log,
        flops: *counter - start,
    })
}

/// MoE blocks with fresh experts at the strategy's positions, trained on the
/// upstream task for the full `E` epochs.
pub fn run_moe_scratch_upstream(cfg: &PipelineConfig, counter: &mut u64) -> Result<StageRun> {
    if cfg.pipeline != PipelineKind::MoeScratch {
        return Err(Error::State(format!("{} does not train an MoE model from scratch", cfg.pipeline)));
    }
    let start = *counter;
    let mut log = RunLog::default();
    marker(&mut log, STAGE_UPSTREAM_MOE, *counter);
    let m = &cfg.moe;
    let dense = Model::init(cfg.model.clone(), &mut Stream::derived(cfg.seed, "init"))?;
    let layers = flops::planned_moe_layers(cfg)?;
    let mut model = growth::moe_from_scratch(&dense, &layers, m.n, m.k, &mut Stream::derived(cfg.seed, "scratch.experts"))?;
    let plan = GrowPlan {
        strategy: flops::scratch_strategy(cfg),
        selected_layers: layers,
        max_layers: m.max_layers,
        n: m.n,
        k: m.k,
        epsilon: 0.0,
        scores: Vec::new(),
    };
    let s = &cfg.schedule;
    let task = SyntheticTask::upstream(cfg);
    train(
        &mut model,
        cfg,
        Segment {
            stage: STAGE_UPSTREAM_MOE,
            task: &task,
            head: HeadRole::Upstream,
            stream: UPSTREAM_STREAM,
            offset: 0,
            steps: s.upstream_epochs * s.steps_per_epoch,
            lr0: s.lr_upstream,
            w_balance: m.w_balance_upstream,
        },
        &mut log,
        counter,
    )?;
    let acc = evaluate(&model, &task, HeadRole::Upstream, s.eval_batch_size)?;
    eval_entry(&mut log, STAGE_UPSTREAM_MOE, "upstream_accuracy", acc);
    Ok(StageRun {
        checkpoint: Checkpoint::new(model, cfg.seed, STAGE_UPSTREAM_MOE, Some(plan)),
        log,
        flops: *counter - start,
    })
}

/// Upstream MoE training followed by downstream finetuning.
pub fn run_moe_scratch(cfg: &PipelineConfig, counter: &mut u64) -> Result<(StageRun, StageRun)> {
    let up = run_moe_scratch_upstream(cfg, counter)?;
    let down = run_downstream_finetune(&up.checkpoint, cfg, counter)?;
    Ok((up, down))
}

/// Continues from a checkpoint through every remaining stage of the
/// configured pipeline.
pub fn finetune_from(ck: &Checkpoint, cfg: &PipelineConfig, counter: &mut u64) -> Result<(StageRun, StageFlops)> {
    let mut flops = StageFlops::default();
    let mut log = RunLog::default();
    let mut ck = ck.clone();
    if cfg.pipeline == PipelineKind::RmoeI && ck.stage != STAGE_INTERMEDIATE {
        let i = run_intermediate_finetune(&ck, cfg, counter)?;
        flops.intermediate = i.flops;
        log.extend(i.log);
        ck = i.checkpoint;
    }
    let d = run_downstream_finetune(&ck, cfg, counter)?;
    flops.downstream = d.flops;
    log.extend(d.log);
    Ok((
        StageRun {
            checkpoint: d.checkpoint,
            log,
            flops: flops.total(),
        },
        flops,
    ))
}

/// A whole pipeline from initialization to the downstream checkpoint.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut counter = 0u64;
    let mut log = RunLog::default();
    let up = match cfg.pipeline {
        PipelineKind::MoeScratch => run_moe_scratch_upstream(cfg, &mut counter)?,
        _ => run_pretrain(cfg, &mut counter)?,
    };
    log.extend(up.log);
    let (rest, mut flops) = finetune_from(&up.checkpoint, cfg, &mut counter)?;
    flops.pretrain = up.flops;
    let metric = rest
        .log
        .entries
        .iter()
        .rev()
        .find_map(|e| match e {
            LogEntry::Eval { metric, .. } => Some(*metric),
            _ => None,
        })
        .unwrap_or(f64::NAN);
    log.extend(rest.log);
    log.push(LogEntry::Summary(Summary {
        pipeline: cfg.pipeline.name().into(),
        seed: cfg.seed,
        metric_name: "downstream_token_accuracy".into(),
        metric,
        params: rest.checkpoint.model.num_params(),
        flops,
    }));
    Ok(PipelineRun {
        checkpoint: rest.checkpoint,
        log,
        flops,
        metric,
    })
}

//! Closed-form matmul FLOP counts.
//!
//! A matmul of `[m, k] × [k, n]` costs `2·m·n·k`; attention scores and the
//! weighted sum over values cost `4·B·T²·d` per block. An MoE block costs
//! its gate (`2·rows·d·n`) plus `rows·k` expert MLP evaluations. Elementwise
//! work is not counted. A training step is three forward passes.

use serde::{Deserialize, Serialize};

use crate::growth::{select_layers, Strategy};
use crate::vit::{Ffn, HeadRole, Model, ModelSpec};
use crate::Result;

use super::config::{PipelineConfig, PipelineKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    TrainStep,
}

pub fn forward_flops(spec: &ModelSpec, ffn: &[Ffn], batch: usize, head: HeadRole) -> u64 {
    let (b, t, d, h) = (batch as u64, spec.tokens() as u64, spec.d_model as u64, spec.mlp_hidden as u64);
    let rows = b * t;
    let mlp = 4 * d * h;
    let mut f = 2 * rows * spec.patch_dim as u64 * d;
    for block in ffn {
        f += 8 * rows * d * d + 4 * b * t * t * d;
        f += match *block {
            Ffn::Dense => rows * mlp,
            Ffn::Moe { n, k, .. } => 2 * rows * d * n as u64 + rows * k as u64 * mlp,
        };
    }
    f + match head {
        HeadRole::Upstream => 2 * b * d * spec.n_classes_upstream as u64,
        HeadRole::Downstream => 2 * rows * d * spec.n_classes_downstream as u64,
    }
}

pub fn step_flops(spec: &ModelSpec, ffn: &[Ffn], batch: usize, head: HeadRole, phase: Phase) -> u64 {
    let f = forward_flops(spec, ffn, batch, head);
    match phase {
        Phase::Forward => f,
        Phase::TrainStep => 3 * f,
    }
}

pub fn count_flops(model: &Model, batch: usize, head: HeadRole, phase: Phase) -> u64 {
    step_flops(&model.spec, &model.ffn, batch, head, phase)
}

/// Cost of one gradient-based layer scoring: warmup steps plus one
/// forward/backward per scoring batch, on the over-grown model, per task.
pub fn firefly_flops(spec: &ModelSpec, n: usize, k: usize, batch: usize, warmup: usize, scoring: usize, heads: &[HeadRole]) -> u64 {
    let over = vec![Ffn::Moe { n, k, aligned: true }; spec.n_blocks];
    heads
        .iter()
        .map(|&h| (warmup + scoring) as u64 * step_flops(spec, &over, batch, h, Phase::TrainStep))
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub pretrain: u64,
    pub intermediate: u64,
    pub downstream: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.pretrain + self.intermediate + self.downstream
    }

    /// Cost when a trained dense backbone is available for free.
    pub fn pretrained(&self, pipeline: PipelineKind) -> u64 {
        match pipeline {
            PipelineKind::MoeScratch => self.total(),
            _ => self.intermediate + self.downstream,
        }
    }
}

/// How many blocks a pipeline turns into MoE blocks. Positions do not affect
/// cost, only the count does.
pub fn planned_moe_layers(cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let m = &cfg.moe;
    let l = cfg.model.n_blocks;
    let strategy = scratch_strategy(cfg);
    match strategy {
        Strategy::Score => Ok((0..m.max_layers.min(l)).collect()),
        s => select_layers(&[], s, m.max_layers, l, &m.stages),
    }
}

/// The strategy actually used for placing layers. MoE-from-scratch has no
/// trained weights to score, so `score` falls back to every other block.
pub fn scratch_strategy(cfg: &PipelineConfig) -> Strategy {
    match (cfg.pipeline, cfg.moe.strategy) {
        (PipelineKind::MoeScratch, Strategy::Score) => Strategy::Every2,
        (_, s) => s,
    }
}

fn grown_ffn(cfg: &PipelineConfig, layers: &[usize], aligned: bool) -> Vec<Ffn> {
    let mut f = vec![Ffn::Dense; cfg.model.n_blocks];
    for &l in layers {
        f[l] = Ffn::Moe {
            n: cfg.moe.n,
            k: cfg.moe.k,
            aligned,
        };
    }
    f
}

fn firefly_heads(cfg: &PipelineConfig, default: HeadRole) -> Vec<HeadRole> {
    if cfg.firefly.tasks.is_empty() {
        vec![default]
    } else {
        cfg.firefly
            .tasks
            .iter()
            .map(|t| if t == "downstream" { HeadRole::Downstream } else { HeadRole::Upstream })
            .collect()
    }
}

/// Layer scoring cost of one growth step; fixed strategies need no scores.
pub fn grow_cost(cfg: &PipelineConfig, default: HeadRole) -> u64 {
    if cfg.moe.strategy != Strategy::Score {
        return 0;
    }
    firefly_flops(
        &cfg.model,
        cfg.moe.n,
        cfg.moe.k,
        cfg.schedule.batch_size,
        cfg.firefly.warmup_steps,
        cfg.firefly.scoring_batches,
        &firefly_heads(cfg, default),
    )
}

/// Closed-form training cost of a whole pipeline run, stage by stage.
pub fn pipeline_cost(cfg: &PipelineConfig) -> Result<StageFlops> {
    let s = &cfg.schedule;
    let b = s.batch_size;
    let spec = &cfg.model;
    let dense = vec![Ffn::Dense; spec.n_blocks];
    let step = |ffn: &[Ffn], head| step_flops(spec, ffn, b, head, Phase::TrainStep);
    let up_steps = (s.upstream_epochs * s.steps_per_epoch) as u64;
    let layers = planned_moe_layers(cfg)?;
    let pretrain_skipped = cfg.pretrained_checkpoint.is_some();
    let mut out = StageFlops::default();
    match cfg.pipeline {
        PipelineKind::Dense => {
            if !pretrain_skipped {
                out.pretrain = up_steps * step(&dense, HeadRole::Upstream);
            }
            out.downstream = s.downstream_steps as u64 * step(&dense, HeadRole::Downstream);
        }
        PipelineKind::RmoeD => {
            if !pretrain_skipped {
                out.pretrain = up_steps * step(&dense, HeadRole::Upstream);
            }
            let grown = grown_ffn(cfg, &layers, false);
            out.downstream = grow_cost(cfg, HeadRole::Downstream) + s.downstream_steps as u64 * step(&grown, HeadRole::Downstream);
        }
        PipelineKind::RmoeI => {
            let e = (s.intermediate_epochs * s.steps_per_epoch) as u64;
            if !pretrain_skipped {
                out.pretrain = (up_steps - e) * step(&dense, HeadRole::Upstream);
            }
            let aligned = grown_ffn(cfg, &layers, true);
            let grown = grown_ffn(cfg, &layers, false);
            out.intermediate = grow_cost(cfg, HeadRole::Upstream) + e * step(&aligned, HeadRole::Upstream);
            out.downstream = s.downstream_steps as u64 * step(&grown, HeadRole::Downstream);
        }
        PipelineKind::MoeScratch => {
            let grown = grown_ffn(cfg, &layers, false);
            out.pretrain = up_steps * step(&grown, HeadRole::Upstream);
            out.downstream = s.downstream_steps as u64 * step(&grown, HeadRole::Downstream);
        }
    }
    Ok(out)
}

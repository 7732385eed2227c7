//! Growing dense MLP blocks into MoE blocks.
//!
//! Expert `i` of a grown block holds `θ0 + θr[i]`, where `θ0` is the dense
//! MLP it replaced and `θr[i] = ε·η⊙θ0` with `η ~ U[-1, 1]`. The store keeps
//! the folded weights. Since `∂L/∂θr` equals `∂L/∂(θ0 + θr)` with `θ0` held
//! fixed, optimising the folded experts with zero weight decay is the same as
//! optimising the residuals.
//!
//! Layer selection ranks blocks by the size of the loss gradient with respect
//! to their residuals after a short warmup of residuals and gates on an
//! over-grown copy where every block is MoE.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::tensor::{AdamW, AdamWConfig, Tensor};
use crate::vit::{self, Batch, Ffn, HeadRole, Model, ModelSpec, INIT_SIGMA};
use crate::{Error, Result};

/// Core weights, per-expert residuals and a gate for one grown block.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub core: [Tensor; 4],
    pub residuals: Vec<[Tensor; 4]>,
    pub gate: Tensor,
}

impl ExpertBank {
    pub fn n(&self) -> usize {
        self.residuals.len()
    }

    /// Expert `i` weights, `θ0 + θr[i]`.
    pub fn folded(&self, i: usize) -> [Tensor; 4] {
        fold(&self.core, &self.residuals[i])
    }
}

pub fn fold(core: &[Tensor; 4], residual: &[Tensor; 4]) -> [Tensor; 4] {
    std::array::from_fn(|j| {
        let mut t = core[j].clone();
        for (a, &r) in t.data_mut().iter_mut().zip(residual[j].data()) {
            *a += r;
        }
        t
    })
}

pub fn unfold(core: &[Tensor; 4], folded: &[Tensor; 4]) -> [Tensor; 4] {
    std::array::from_fn(|j| {
        let mut t = folded[j].clone();
        for (a, &c) in t.data_mut().iter_mut().zip(core[j].data()) {
            *a -= c;
        }
        t
    })
}

/// Draws `n` residual sets in expert order (each over `w1, b1, w2, b2`
/// element by element), then the `[n, d]` gate.
pub fn init_experts_from_mlp(mlp: &[Tensor; 4], n: usize, eps: f32, rng: &mut Stream) -> Result<ExpertBank> {
    if n < 1 {
        return Err(Error::Config("expert count must be at least 1".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("noise level must be non-negative, got {eps}")));
    }
    let residuals = (0..n)
        .map(|_| {
            std::array::from_fn(|j| {
                let c = &mlp[j];
                let mut t = Tensor::zeros(c.shape());
                for (r, &w) in t.data_mut().iter_mut().zip(c.data()) {
                    *r = eps * rng.uniform_sym() * w;
                }
                t
            })
        })
        .collect();
    let d = mlp[0].shape()[0];
    let gate = Tensor::from_fn(&[n, d], |_| rng.trunc_normal(INIT_SIGMA));
    let core = std::array::from_fn(|j| {
        let mut t = mlp[j].clone();
        t.grad = None;
        t
    });
    Ok(ExpertBank { core, residuals, gate })
}

fn take_mlp(model: &Model, l: usize) -> Result<[Tensor; 4]> {
    let names = vit::mlp_names(l);
    let mut out = Vec::with_capacity(4);
    for n in &names {
        out.push(model.tensor(n)?.clone());
    }
    Ok(out.try_into().unwrap())
}

fn install(model: &mut Model, l: usize, bank: &ExpertBank, k: usize, aligned: bool) -> Vec<(String, Tensor)> {
    let n = bank.n();
    model.ffn[l] = Ffn::Moe { n, k, aligned };
    let mut added = vec![(vit::gate_name(l), bank.gate.clone().trainable())];
    for i in 0..n {
        for (name, t) in vit::expert_names(l, i).into_iter().zip(bank.folded(i)) {
            added.push((name, t.trainable()));
        }
    }
    added
}

fn heads_of(model: &Model) -> Vec<HeadRole> {
    [HeadRole::Upstream, HeadRole::Downstream]
        .into_iter()
        .filter(|&r| model.has_head(r))
        .collect()
}

/// Replaces every block's MLP by an aligned MoE layer with noise `eps_score`.
pub fn overgrow(model: &Model, n: usize, k: usize, eps_score: f32, rng: &mut Stream) -> Result<Model> {
    if !model.is_dense() {
        return Err(Error::State("model already contains MoE layers".into()));
    }
    let layers: Vec<usize> = (0..model.spec.n_blocks).collect();
    grow(model, &layers, n, k, eps_score, true, rng)
}

fn grow(model: &Model, layers: &[usize], n: usize, k: usize, eps: f32, aligned: bool, rng: &mut Stream) -> Result<Model> {
    if k < 1 || k > n {
        return Err(Error::Config(format!("top-k must satisfy 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut m = model.clone();
    let mut added = Vec::new();
    for &l in layers {
        if l >= m.ffn.len() {
            return Err(Error::Config(format!("layer {l} out of range for {} blocks", m.ffn.len())));
        }
        if m.ffn[l] != Ffn::Dense {
            return Err(Error::State(format!("block {l} is already an MoE layer")));
        }
        let mlp = take_mlp(&m, l)?;
        let bank = init_experts_from_mlp(&mlp, n, eps, rng)?;
        added.extend(install(&mut m, l, &bank, k, aligned));
        m.retained.insert(l, mlp);
    }
    let heads = heads_of(&m);
    m.rebuild(added, &heads)?;
    Ok(m)
}

/// Restores the retained dense MLP of every grown block.
pub fn revert(model: &Model) -> Result<Model> {
    let mut m = model.clone();
    let mut added = Vec::new();
    for l in m.moe_layers() {
        let mlp = m
            .retained
            .remove(&l)
            .ok_or_else(|| Error::State(format!("block {l} has no retained dense weights")))?;
        m.ffn[l] = Ffn::Dense;
        added.extend(vit::mlp_names(l).into_iter().zip(mlp));
    }
    let heads = heads_of(&m);
    m.rebuild(added, &heads)?;
    Ok(m)
}

/// MoE blocks at `layers` with freshly drawn experts and gates, for training
/// from scratch. Nothing is retained.
pub fn moe_from_scratch(model: &Model, layers: &[usize], n: usize, k: usize, rng: &mut Stream) -> Result<Model> {
    if k < 1 || k > n {
        return Err(Error::Config(format!("top-k must satisfy 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut m = model.clone();
    let mut added = Vec::new();
    for &l in layers {
        if m.ffn[l] != Ffn::Dense {
            return Err(Error::State(format!("block {l} is already an MoE layer")));
        }
        m.ffn[l] = Ffn::Moe { n, k, aligned: false };
        added.push((vit::gate_name(l), Tensor::from_fn(&[n, m.spec.d_model], |_| rng.trunc_normal(INIT_SIGMA)).trainable()));
        for i in 0..n {
            let mlp = vit::init_mlp(&m.spec, rng);
            for (name, t) in vit::expert_names(l, i).into_iter().zip(mlp) {
                added.push((name, t.trainable()));
            }
        }
    }
    let heads = heads_of(&m);
    m.rebuild(added, &heads)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub per_task: Vec<f64>,
    pub total: f64,
}

/// One scoring task: warmup batches (cycled), scoring batches, and the head
/// the loss is read from.
#[derive(Debug, Clone)]
pub struct ScoreTask {
    pub name: String,
    pub head: HeadRole,
    pub warmup: Vec<Batch>,
    pub scoring: Vec<Batch>,
    pub w_balance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FireflyConfig {
    pub warmup_steps: usize,
    pub lr: f64,
    /// Plain L2 norm instead of L2 / √(parameter count).
    pub raw_l2: bool,
}

impl Default for FireflyConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 10,
            lr: 1e-3,
            raw_l2: false,
        }
    }
}

fn is_residual_or_gate(name: &str) -> bool {
    name.contains(".moe.")
}

/// Per-layer scores over `tasks`. Each task starts from `overgrown` as
/// given, so residuals and gates are reset between tasks.
pub fn firefly_scores(overgrown: &Model, tasks: &[ScoreTask], cfg: &FireflyConfig) -> Result<Vec<LayerScore>> {
    if tasks.is_empty() {
        return Err(Error::Config("firefly scoring needs at least one task".into()));
    }
    let layers = overgrown.moe_layers();
    if layers.len() != overgrown.spec.n_blocks {
        return Err(Error::State("firefly scoring expects an over-grown model".into()));
    }
    let mut per_task: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    for task in tasks {
        if task.scoring.is_empty() {
            return Err(Error::Config(format!("task {} has no scoring batches", task.name)));
        }
        let mut m = overgrown.clone();
        m.set_trainable(is_residual_or_gate);
        if cfg.warmup_steps > 0 {
            if task.warmup.is_empty() {
                return Err(Error::Config(format!("task {} has no warmup batches", task.name)));
            }
            let mut opt = AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            });
            for step in 0..cfg.warmup_steps {
                let b = &task.warmup[step % task.warmup.len()];
                let grads = {
                    let mut tape = m.tape();
                    let out = m.forward(&mut tape, &b.patches, task.head)?;
                    let l = m.loss(&mut tape, &out, &b.labels, task.w_balance)?;
                    tape.backward(l.total)?
                };
                m.store.zero_grads();
                m.store.accumulate(&grads);
                opt.step(&mut m.store, cfg.lr)?;
            }
            m.store.zero_grads();
        }
        let mut sums = vec![0f64; layers.len()];
        for b in &task.scoring {
            let mut tape = m.tape();
            let out = m.forward(&mut tape, &b.patches, task.head)?;
            let l = m.loss(&mut tape, &out, &b.labels, 0.0)?;
            let grads = tape.backward(l.task)?;
            for (slot, &layer) in layers.iter().enumerate() {
                let Ffn::Moe { n, .. } = m.ffn[layer] else { unreachable!() };
                let mut sq = 0f64;
                let mut count = 0usize;
                for i in 0..n {
                    for name in vit::expert_names(layer, i) {
                        let id = m.store.lookup(&name).unwrap();
                        count += m.store.get(id).len();
                        if let Some(g) = grads.param(id) {
                            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                        }
                    }
                }
                let norm = sq.sqrt();
                sums[slot] += if cfg.raw_l2 { norm } else { norm / (count as f64).sqrt() };
            }
        }
        for (slot, s) in sums.into_iter().enumerate() {
            per_task[slot].push(s / task.scoring.len() as f64);
        }
    }
    Ok(layers
        .iter()
        .zip(per_task)
        .map(|(&layer, per_task)| LayerScore {
            layer,
            total: exact_sum(&per_task),
            per_task,
        })
        .collect())
}

/// Correctly rounded sum (Shewchuk partials). Duplicating every term then
/// yields exactly twice the single-copy total.
pub fn exact_sum(xs: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x in xs {
        let mut x = x;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round-half-even correction over the top partials.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Score,
    #[serde(rename = "last-2")]
    Last2,
    #[serde(rename = "every-2")]
    Every2,
    EveryLast,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Self::Score),
            "last-2" => Ok(Self::Last2),
            "every-2" => Ok(Self::Every2),
            "every-last" => Ok(Self::EveryLast),
            _ => Err(Error::Config(format!(
                "unknown strategy {s:?}; expected score, last-2, every-2 or every-last"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Score => "score",
            Self::Last2 => "last-2",
            Self::Every2 => "every-2",
            Self::EveryLast => "every-last",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowPlan {
    pub strategy: Strategy,
    pub selected_layers: Vec<usize>,
    #[serde(rename = "N")]
    pub max_layers: usize,
    pub n: usize,
    pub k: usize,
    pub epsilon: f32,
    pub scores: Vec<LayerScore>,
}

impl GrowPlan {
    /// Parameters added by applying this plan to a dense model.
    pub fn param_delta(&self, spec: &ModelSpec) -> usize {
        self.selected_layers.len() * ((self.n - 1) * spec.mlp_params() + self.n * spec.d_model)
    }
}

/// Layer positions for a strategy. Fixed strategies that name more than
/// `max_layers` blocks keep the highest-indexed ones.
pub fn select_layers(
    scores: &[LayerScore],
    strategy: Strategy,
    max_layers: usize,
    n_blocks: usize,
    stages: &[[usize; 2]],
) -> Result<Vec<usize>> {
    if max_layers < 1 {
        return Err(Error::Config("max layers N must be at least 1".into()));
    }
    let picked: BTreeSet<usize> = match strategy {
        Strategy::Score => {
            if scores.is_empty() {
                return Err(Error::Config("score strategy needs layer scores".into()));
            }
            let mut order: Vec<&LayerScore> = scores.iter().collect();
            order.sort_by(|a, b| b.total.partial_cmp(&a.total).unwrap().then(a.layer.cmp(&b.layer)));
            order.iter().take(max_layers).map(|s| s.layer).collect()
        }
        Strategy::Last2 => (0..n_blocks).rev().filter(|l| l % 2 == 0).take(2).collect(),
        Strategy::Every2 => (1..n_blocks).step_by(2).collect(),
        Strategy::EveryLast => {
            if stages.is_empty() {
                return Err(Error::Config("every-last needs stage boundaries".into()));
            }
            let mut v = BTreeSet::new();
            for &[a, b] in stages {
                if a > b || b >= n_blocks {
                    return Err(Error::Config(format!("stage [{a}, {b}] invalid for {n_blocks} blocks")));
                }
                v.insert(b);
            }
            v
        }
    };
    let mut v: Vec<usize> = picked.into_iter().collect();
    if v.len() > max_layers {
        v = v.split_off(v.len() - max_layers);
    }
    Ok(v)
}

/// Grows exactly `plan.selected_layers` with training noise `plan.epsilon`.
/// Banks are drawn in ascending layer order.
pub fn apply_grow_plan(model: &Model, plan: &GrowPlan, aligned: bool, rng: &mut Stream) -> Result<Model> {
    grow(model, &plan.selected_layers, plan.n, plan.k, plan.epsilon, aligned, rng)
}

/// Sets the alignment flag on every MoE block.
pub fn set_aligned(model: &mut Model, aligned: bool) {
    for f in &mut model.ffn {
        if let Ffn::Moe { aligned: a, .. } = f {
            *a = aligned;
        }
    }
}

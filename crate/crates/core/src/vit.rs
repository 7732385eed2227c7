//! A small pre-norm vision transformer.
//!
//! Tokens are carried as `[B·T, d]` rows. Each block computes
//! `x + SA(LN(x))` then `x + FFN(LN(x))`, where the FFN is a dense MLP or an
//! MoE layer. A final layernorm feeds either the pooled classification head
//! or the per-token head.
//!
//! Parameter names are canonical and define the store order:
//!
//! ```text
//! embed.w embed.b embed.pos
//! blocks.{l}.ln1.{g,b} blocks.{l}.attn.{wq,wk,wv,wo} blocks.{l}.ln2.{g,b}
//! blocks.{l}.mlp.{w1,b1,w2,b2}                      (dense block)
//! blocks.{l}.moe.gate blocks.{l}.moe.experts.{i}.{w1,b1,w2,b2}   (MoE block)
//! norm.{g,b} head_up.{w,b} head_down.{w,b}
//! ```

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::moe::{self, GateOut, MlpVars, MoeVars};
use crate::rng::Stream;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const INIT_SIGMA: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_grid: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub n_classes_upstream: usize,
    pub n_classes_downstream: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_grid: 8,
            patch_dim: 16,
            d_model: 32,
            n_heads: 2,
            n_blocks: 4,
            mlp_hidden: 64,
            n_classes_upstream: 8,
            n_classes_downstream: 4,
        }
    }
}

impl ModelSpec {
    pub fn tokens(&self) -> usize {
        self.image_grid * self.image_grid
    }

    /// Scalar count of one dense MLP.
    pub fn mlp_params(&self) -> usize {
        2 * self.d_model * self.mlp_hidden + self.mlp_hidden + self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_grid", self.image_grid),
            ("patch_dim", self.patch_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("n_classes_upstream", self.n_classes_upstream),
            ("n_classes_downstream", self.n_classes_downstream),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Ffn {
    Dense,
    Moe { n: usize, k: usize, aligned: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadRole {
    Upstream,
    Downstream,
}

pub fn mlp_names(l: usize) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|p| format!("blocks.{l}.mlp.{p}"))
}

pub fn expert_names(l: usize, i: usize) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|p| format!("blocks.{l}.moe.experts.{i}.{p}"))
}

pub fn gate_name(l: usize) -> String {
    format!("blocks.{l}.moe.gate")
}

fn head_names(role: HeadRole) -> [String; 2] {
    let h = match role {
        HeadRole::Upstream => "head_up",
        HeadRole::Downstream => "head_down",
    };
    [format!("{h}.w"), format!("{h}.b")]
}

/// Shapes of an MLP's `w1, b1, w2, b2`.
pub fn mlp_shapes(spec: &ModelSpec) -> [Vec<usize>; 4] {
    let (d, h) = (spec.d_model, spec.mlp_hidden);
    [vec![d, h], vec![h], vec![h, d], vec![d]]
}

/// Draws an MLP weight set: truncated-normal matrices, zero biases.
pub fn init_mlp(spec: &ModelSpec, rng: &mut Stream) -> [Tensor; 4] {
    mlp_shapes(spec).map(|s| {
        if s.len() == 2 {
            Tensor::from_fn(&s, |_| rng.trunc_normal(INIT_SIGMA))
        } else {
            Tensor::zeros(&s)
        }
    })
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub ffn: Vec<Ffn>,
    /// Dense MLP weights kept for blocks that were grown, so growth can be
    /// reverted exactly.
    pub retained: BTreeMap<usize, [Tensor; 4]>,
}

/// Model input `[B, T, patch_dim]` with one label per image (upstream) or
/// per token (downstream).
#[derive(Debug, Clone)]
pub struct Batch {
    pub patches: Tensor,
    pub labels: Vec<usize>,
}

/// Routing-side outputs of one MoE block.
pub struct MoeAux {
    pub layer_id: usize,
    pub balance: Var,
    pub gate: GateOut,
    pub expert_evals: usize,
    pub ffn_in: Var,
    pub ffn_out: Var,
}

pub struct ForwardOut {
    pub logits: Var,
    /// Final-normed token features `[B·T, d]`.
    pub features: Var,
    pub aux: Vec<MoeAux>,
    pub batch: usize,
}

impl Model {
    /// A dense model with an upstream head. Weights are drawn in canonical
    /// name order from `rng`.
    pub fn init(spec: ModelSpec, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let ffn = vec![Ffn::Dense; spec.n_blocks];
        let mut m = Self {
            spec,
            store: ParamStore::new(),
            ffn,
            retained: BTreeMap::new(),
        };
        for (name, shape) in m.canonical_layout(&[HeadRole::Upstream]) {
            m.store.insert(name.clone(), fresh(&name, &shape, rng).trainable());
        }
        Ok(m)
    }

    pub fn has_head(&self, role: HeadRole) -> bool {
        self.store.lookup(&head_names(role)[0]).is_some()
    }

    fn heads(&self) -> Vec<HeadRole> {
        [HeadRole::Upstream, HeadRole::Downstream]
            .into_iter()
            .filter(|&r| self.has_head(r))
            .collect()
    }

    /// Names and shapes in store order for the current topology.
    fn canonical_layout(&self, heads: &[HeadRole]) -> Vec<(String, Vec<usize>)> {
        let s = &self.spec;
        let (d, t) = (s.d_model, s.tokens());
        let mut v = vec![
            ("embed.w".to_string(), vec![s.patch_dim, d]),
            ("embed.b".to_string(), vec![d]),
            ("embed.pos".to_string(), vec![t, d]),
        ];
        for (l, f) in self.ffn.iter().enumerate() {
            v.push((format!("blocks.{l}.ln1.g"), vec![d]));
            v.push((format!("blocks.{l}.ln1.b"), vec![d]));
            for p in ["wq", "wk", "wv", "wo"] {
                v.push((format!("blocks.{l}.attn.{p}"), vec![d, d]));
            }
            v.push((format!("blocks.{l}.ln2.g"), vec![d]));
            v.push((format!("blocks.{l}.ln2.b"), vec![d]));
            match *f {
                Ffn::Dense => v.extend(mlp_names(l).into_iter().zip(mlp_shapes(s))),
                Ffn::Moe { n, .. } => {
                    v.push((gate_name(l), vec![n, d]));
                    for i in 0..n {
                        v.extend(expert_names(l, i).into_iter().zip(mlp_shapes(s)));
                    }
                }
            }
        }
        v.push(("norm.g".to_string(), vec![d]));
        v.push(("norm.b".to_string(), vec![d]));
        for &r in heads {
            let c = match r {
                HeadRole::Upstream => s.n_classes_upstream,
                HeadRole::Downstream => s.n_classes_downstream,
            };
            let [w, b] = head_names(r);
            v.push((w, vec![d, c]));
            v.push((b, vec![c]));
        }
        v
    }

    /// Rebuilds the store in canonical order from the current store plus
    /// `added`, for the topology now in `self.ffn`. Names no longer in the
    /// layout are dropped.
    pub(crate) fn rebuild(&mut self, added: Vec<(String, Tensor)>, heads: &[HeadRole]) -> Result<()> {
        let mut pool: HashMap<String, Tensor> = self
            .store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        pool.extend(added);
        let mut store = ParamStore::new();
        for (name, shape) in self.canonical_layout(heads) {
            let t = pool
                .remove(&name)
                .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            store.insert(name, t);
        }
        self.store = store;
        Ok(())
    }

    /// Installs a freshly drawn head for `role`, replacing any existing one.
    pub fn attach_head(&mut self, role: HeadRole, rng: &mut Stream) -> Result<()> {
        let mut heads = self.heads();
        if !heads.contains(&role) {
            heads.push(role);
            heads.sort_by_key(|r| matches!(r, HeadRole::Downstream));
        }
        let c = match role {
            HeadRole::Upstream => self.spec.n_classes_upstream,
            HeadRole::Downstream => self.spec.n_classes_downstream,
        };
        let [w, b] = head_names(role);
        let d = self.spec.d_model;
        let added = vec![
            (w.clone(), fresh(&w, &[d, c], rng).trainable()),
            (b.clone(), fresh(&b, &[c], rng).trainable()),
        ];
        self.rebuild(added, &heads)
    }

    pub fn is_dense(&self) -> bool {
        self.ffn.iter().all(|f| *f == Ffn::Dense)
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.ffn.len()).filter(|&l| self.ffn[l] != Ffn::Dense).collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Sets `requires_grad` on every parameter from a name predicate.
    pub fn set_trainable(&mut self, f: impl Fn(&str) -> bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            let on = f(self.store.name(id));
            self.store.set_requires_grad(id, on);
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.store
            .lookup(name)
            .map(|id| self.store.get(id))
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub(crate) fn bind<T: Real>(&self, tape: &mut Tape<'_, T>, name: &str) -> Result<Var> {
        let id = self
            .store
            .lookup(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        tape.param(id)
    }

    fn bind_mlp<T: Real>(&self, tape: &mut Tape<'_, T>, names: &[String; 4]) -> Result<MlpVars> {
        Ok(MlpVars {
            w1: self.bind(tape, &names[0])?,
            b1: self.bind(tape, &names[1])?,
            w2: self.bind(tape, &names[2])?,
            b2: self.bind(tape, &names[3])?,
        })
    }

    pub fn tape(&self) -> Tape<'_, f32> {
        Tape::new(&self.store)
    }

    /// Patches `[B, T, patch_dim]` to logits `[B, C_up]` or `[B, T, C_down]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, patches: &Tensor, head: HeadRole) -> Result<ForwardOut> {
        let s = &self.spec;
        let sh = patches.shape();
        if sh.len() != 3 || sh[1] != s.tokens() || sh[2] != s.patch_dim {
            return Err(Error::Dimension(format!(
                "patches must be [B, {}, {}], got {sh:?}",
                s.tokens(),
                s.patch_dim
            )));
        }
        let batch = sh[0];
        let flat = patches.clone().reshape(vec![batch * s.tokens(), s.patch_dim])?;
        let p = tape.input(&flat)?;
        let w = self.bind(tape, "embed.w")?;
        let b = self.bind(tape, "embed.b")?;
        let pos = self.bind(tape, "embed.pos")?;
        let mut x = patch_embed(tape, p, w, b, pos, batch)?;
        let mut aux = Vec::new();
        for l in 0..s.n_blocks {
            let (y, a) = self.block_forward(tape, x, l, batch)?;
            x = y;
            aux.extend(a);
        }
        let g = self.bind(tape, "norm.g")?;
        let bb = self.bind(tape, "norm.b")?;
        let features = tape.layernorm(x, g, bb)?;
        let [hw, hb] = head_names(head);
        let hw = self.bind(tape, &hw)?;
        let hb = self.bind(tape, &hb)?;
        let logits = match head {
            HeadRole::Upstream => {
                let pooled = tape.mean_pool(features, batch)?;
                let z = tape.matmul(pooled, hw)?;
                tape.add_bias(z, hb)?
            }
            HeadRole::Downstream => {
                let z = tape.matmul(features, hw)?;
                let z = tape.add_bias(z, hb)?;
                tape.reshape(z, vec![batch, s.tokens(), s.n_classes_downstream])?
            }
        };
        Ok(ForwardOut {
            logits,
            features,
            aux,
            batch,
        })
    }

    pub fn block_forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        l: usize,
        batch: usize,
    ) -> Result<(Var, Option<MoeAux>)> {
        let g1 = self.bind(tape, &format!("blocks.{l}.ln1.g"))?;
        let b1 = self.bind(tape, &format!("blocks.{l}.ln1.b"))?;
        let h = tape.layernorm(x, g1, b1)?;
        let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|p| format!("blocks.{l}.attn.{p}"));
        let attn = AttnVars {
            wq: self.bind(tape, &wq)?,
            wk: self.bind(tape, &wk)?,
            wv: self.bind(tape, &wv)?,
            wo: self.bind(tape, &wo)?,
        };
        let a = attention_forward(tape, h, &attn, batch, self.spec.n_heads)?;
        let x = tape.add(x, a)?;
        let g2 = self.bind(tape, &format!("blocks.{l}.ln2.g"))?;
        let b2 = self.bind(tape, &format!("blocks.{l}.ln2.b"))?;
        let h = tape.layernorm(x, g2, b2)?;
        let (f, aux) = match self.ffn[l] {
            Ffn::Dense => {
                let p = self.bind_mlp(tape, &mlp_names(l))?;
                (moe::mlp_forward(tape, h, &p)?, None)
            }
            Ffn::Moe { n, k, aligned } => {
                let vars = MoeVars {
                    gate: self.bind(tape, &gate_name(l))?,
                    experts: (0..n)
                        .map(|i| self.bind_mlp(tape, &expert_names(l, i)))
                        .collect::<Result<_>>()?,
                };
                let out = if aligned {
                    moe::moe_forward_aligned(tape, h, &vars, k)?
                } else {
                    moe::moe_forward(tape, h, &vars, k)?
                };
                let balance = moe::balance_loss(tape, out.gate.imp)?;
                let aux = MoeAux {
                    layer_id: l,
                    balance,
                    gate: out.gate,
                    expert_evals: out.expert_evals,
                    ffn_in: h,
                    ffn_out: out.y,
                };
                (out.y, Some(aux))
            }
        };
        Ok((tape.add(x, f)?, aux))
    }

    /// Task cross-entropy plus `w_balance · Σ balance`.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        out: &ForwardOut,
        labels: &[usize],
        w_balance: f64,
    ) -> Result<LossParts> {
        let task = tape.cross_entropy(out.logits, labels)?;
        let balances: Vec<Var> = out.aux.iter().map(|a| a.balance).collect();
        let total = match moe::total_aux_loss(tape, &balances, w_balance)? {
            Some(aux) if w_balance > 0.0 => tape.add(task, aux)?,
            _ => task,
        };
        Ok(LossParts {
            task,
            balances,
            total,
        })
    }
}

pub struct LossParts {
    pub task: Var,
    pub balances: Vec<Var>,
    pub total: Var,
}

/// Initial value for a parameter by naming convention.
fn fresh(name: &str, shape: &[usize], rng: &mut Stream) -> Tensor {
    if name.ends_with(".g") {
        Tensor::filled(shape, 1.0)
    } else if shape.len() == 2 {
        Tensor::from_fn(shape, |_| rng.trunc_normal(INIT_SIGMA))
    } else {
        Tensor::zeros(shape)
    }
}

/// `x·W + b + pos`, with the `[T, d]` positional table repeated per image.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<'_, T>,
    patches: Var,
    w: Var,
    b: Var,
    pos: Var,
    batch: usize,
) -> Result<Var> {
    let t = tape.shape(pos)[0];
    let rows = tape.shape(patches)[0];
    if rows != batch * t {
        return Err(Error::Dimension(format!("{rows} patch rows for batch {batch} of {t} tokens")));
    }
    let x = tape.matmul(patches, w)?;
    let x = tape.add_bias(x, b)?;
    let idx: Vec<usize> = (0..rows).map(|r| r % t).collect();
    let p = tape.gather_rows(pos, &idx)?;
    tape.add(x, p)
}

pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head self-attention over `[B·T, d]` rows, output-projected.
pub fn attention_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: &AttnVars,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let a = tape.attention(q, k, v, batch, heads)?;
    tape.matmul(a, p.wo)
}

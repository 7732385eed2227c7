//! Sparse mixture-of-experts feed-forward layer.
//!
//! `G(x) = TopK(softmax(θg x))`: the softmax runs over all `n` logits and
//! then everything outside the top `k` is zeroed. Kept values are not
//! renormalised. The selection mask is a constant for backward.
//!
//! Only the experts a token routes to are evaluated for that token.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

/// Tape handles for one two-layer MLP: `W2·gelu(W1·x + b1) + b2`.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn mlp_forward<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, p.w2)?;
    tape.add_bias(o, p.b2)
}

/// Gate `[n, d]` plus `n` experts.
#[derive(Debug, Clone)]
pub struct MoeVars {
    pub gate: Var,
    pub experts: Vec<MlpVars>,
}

/// Per-batch routing decisions of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer_id: usize,
    pub imp: Vec<f32>,
    /// Per token, `k` pairs of `(expert, gate value)` in descending gate order.
    pub per_token: Vec<Vec<(usize, f32)>>,
}

impl RoutingRecord {
    pub fn n_experts(&self) -> usize {
        self.imp.len()
    }

    /// Number of tokens routed to each expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.imp.len()];
        for tok in &self.per_token {
            for &(e, _) in tok {
                c[e] += 1;
            }
        }
        c
    }
}

pub fn write_jsonl<W: Write>(records: &[RoutingRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub struct GateOut {
    /// Sparse gate values `[rows, n]`.
    pub gates: Var,
    /// `Imp = Σ_tokens G(x)`, length `n`.
    pub imp: Var,
    /// Row-major `[rows, k]` selected experts in descending gate order.
    pub selected: Vec<usize>,
    pub n: usize,
    pub k: usize,
}

impl GateOut {
    pub fn record<T: Real>(&self, tape: &Tape<'_, T>, layer_id: usize) -> RoutingRecord {
        let g = tape.value(self.gates);
        let rows = self.selected.len() / self.k;
        let per_token = (0..rows)
            .map(|r| {
                self.selected[r * self.k..(r + 1) * self.k]
                    .iter()
                    .map(|&e| (e, g[r * self.n + e].as_f32()))
                    .collect()
            })
            .collect();
        RoutingRecord {
            layer_id,
            imp: tape.value(self.imp).iter().map(|v| v.as_f32()).collect(),
            per_token,
        }
    }

    /// Ascending token rows routed to expert `e`.
    pub fn tokens_for(&self, e: usize) -> Vec<usize> {
        self.selected
            .chunks(self.k)
            .enumerate()
            .filter(|(_, sel)| sel.contains(&e))
            .map(|(r, _)| r)
            .collect()
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn gate_forward<T: Real>(tape: &mut Tape<'_, T>, x: Var, gate: Var, k: usize) -> Result<GateOut> {
    let n = tape.shape(gate)[0];
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k must satisfy 1 <= k <= n, got k={k}, n={n}")));
    }
    let logits = tape.matmul_bt(x, gate)?;
    let probs = tape.softmax(logits)?;
    let p = tape.value(probs);
    let rows = p.len() / n;
    let mut selected = Vec::with_capacity(rows * k);
    let mut mask = vec![false; rows * n];
    for r in 0..rows {
        for e in top_k(&p[r * n..(r + 1) * n], k) {
            selected.push(e);
            mask[r * n + e] = true;
        }
    }
    let gates = tape.mask(probs, mask)?;
    let imp = tape.col_sum(gates)?;
    Ok(GateOut {
        gates,
        imp,
        selected,
        n,
        k,
    })
}

pub struct MoeOut {
    pub y: Var,
    pub gate: GateOut,
    /// Token-expert evaluations performed; always `rows · k`.
    pub expert_evals: usize,
}

/// `y = Σ_{i∈TopK} G_i · E_i(x)`.
pub fn moe_forward<T: Real>(tape: &mut Tape<'_, T>, x: Var, layer: &MoeVars, k: usize) -> Result<MoeOut> {
    combine(tape, x, layer, k, false)
}

/// `y = Σ_{i∈TopK} [sg((1−G_i)·E_i(x)) + G_i·E_i(x)]`, built as
/// `sg(E) + (G·E − sg(G·E))`: equal in value and in gradient, and the
/// forward value is exactly `Σ E_i(x)`.
pub fn moe_forward_aligned<T: Real>(tape: &mut Tape<'_, T>, x: Var, layer: &MoeVars, k: usize) -> Result<MoeOut> {
    combine(tape, x, layer, k, true)
}

fn combine<T: Real>(tape: &mut Tape<'_, T>, x: Var, layer: &MoeVars, k: usize, aligned: bool) -> Result<MoeOut> {
    let gate = gate_forward(tape, x, layer.gate, k)?;
    if layer.experts.len() != gate.n {
        return Err(Error::Dimension(format!(
            "gate has {} rows but layer has {} experts",
            gate.n,
            layer.experts.len()
        )));
    }
    let shape = tape.shape(x).to_vec();
    let mut parts = Vec::new();
    let mut evals = 0;
    for (e, ex) in layer.experts.iter().enumerate() {
        let rows = gate.tokens_for(e);
        if rows.is_empty() {
            continue;
        }
        evals += rows.len();
        let xi = tape.gather_rows(x, &rows)?;
        let out = mlp_forward(tape, xi, ex)?;
        let pairs: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let g = tape.gather_elems(gate.gates, &pairs)?;
        let scaled = tape.row_scale(out, g)?;
        let part = if aligned {
            let held = tape.stop_grad(out)?;
            let held_scaled = tape.stop_grad(scaled)?;
            let live = tape.sub(scaled, held_scaled)?;
            tape.add(held, live)?
        } else {
            scaled
        };
        parts.push((part, rows));
    }
    let y = tape.combine_rows(shape, parts)?;
    Ok(MoeOut {
        y,
        gate,
        expert_evals: evals,
    })
}

/// `(std(Imp) / mean(Imp))²` on the tape.
pub fn balance_loss<T: Real>(tape: &mut Tape<'_, T>, imp: Var) -> Result<Var> {
    tape.cv_squared(imp)
}

/// The same quantity from a logged importance vector.
pub fn balance_loss_value(imp: &[f32]) -> Result<f64> {
    let n = imp.len() as f64;
    let mean = imp.iter().map(|&v| v as f64).sum::<f64>() / n;
    if imp.is_empty() || mean == 0.0 {
        return Err(Error::DegenerateRouting);
    }
    let var = imp.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// `w · Σ_layers balance_loss`, or `None` with no MoE layers.
pub fn total_aux_loss<T: Real>(tape: &mut Tape<'_, T>, losses: &[Var], w_balance: f64) -> Result<Option<Var>> {
    if w_balance < 0.0 {
        return Err(Error::Config(format!("balance weight must be non-negative, got {w_balance}")));
    }
    let Some((&first, rest)) = losses.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &l in rest {
        acc = tape.add(acc, l)?;
    }
    Ok(Some(tape.scale(acc, w_balance)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::{finite_diff_check, ParamId, ParamStore, Probe, Tensor};

    struct Layer {
        store: ParamStore,
        gate: ParamId,
        experts: Vec<[ParamId; 4]>,
    }

    fn rand_tensor(s: &mut Stream, shape: &[usize], scale: f32) -> Tensor {
        Tensor::from_fn(shape, |_| s.uniform_sym() * scale).trainable()
    }

    fn layer(n: usize, d: usize, h: usize, seed: u64, identical: bool) -> Layer {
        let mut s = Stream::new(seed);
        let mut store = ParamStore::new();
        let gate = store.insert("gate", rand_tensor(&mut s, &[n, d], 1.0));
        let mut proto = None;
        let mut experts = Vec::new();
        for i in 0..n {
            let ts = match (&proto, identical) {
                (Some(p), true) => Clone::clone(p),
                _ => {
                    let ts = [
                        rand_tensor(&mut s, &[d, h], 0.5),
                        rand_tensor(&mut s, &[h], 0.5),
                        rand_tensor(&mut s, &[h, d], 0.5),
                        rand_tensor(&mut s, &[d], 0.5),
                    ];
                    proto = Some(ts.clone());
                    ts
                }
            };
            let [a, b, c, e] = ts;
            experts.push([
                store.insert(format!("e{i}.w1"), a),
                store.insert(format!("e{i}.b1"), b),
                store.insert(format!("e{i}.w2"), c),
                store.insert(format!("e{i}.b2"), e),
            ]);
        }
        Layer { store, gate, experts }
    }

    fn bind<T: Real>(tape: &mut Tape<'_, T>, l: &Layer) -> MoeVars {
        MoeVars {
            gate: tape.param(l.gate).unwrap(),
            experts: l
                .experts
                .iter()
                .map(|e| MlpVars {
                    w1: tape.param(e[0]).unwrap(),
                    b1: tape.param(e[1]).unwrap(),
                    w2: tape.param(e[2]).unwrap(),
                    b2: tape.param(e[3]).unwrap(),
                })
                .collect(),
        }
    }

    fn tokens(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut s = Stream::new(seed);
        Tensor::from_fn(&[rows, d], |_| s.uniform_sym())
    }

    #[test]
    fn gate_examples() {
        let mut store = ParamStore::new();
        let g1 = store.insert("g1", Tensor::filled(&[1, 2], 0.3));
        let g0 = store.insert("g0", Tensor::zeros(&[2, 2]));
        let ge = store.insert("ge", Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let mut tape = Tape::<f64>::new(&store);
        let x = tape.input(&Tensor::new(vec![3, 2], vec![1., 2., -1., 0., 2., 0.]).unwrap()).unwrap();
        let g = tape.param(g1).unwrap();
        let out = gate_forward(&mut tape, x, g, 1).unwrap();
        assert_eq!(tape.value(out.gates), &[1.0, 1.0, 1.0]);

        let g = tape.param(g0).unwrap();
        let out = gate_forward(&mut tape, x, g, 2).unwrap();
        assert!(tape.value(out.gates).iter().all(|&v| v == 0.5));
        assert!(matches!(gate_forward(&mut tape, x, g, 3), Err(Error::Config(_))));

        let x = tape.input(&Tensor::new(vec![1, 2], vec![2., 0.]).unwrap()).unwrap();
        let g = tape.param(ge).unwrap();
        let out = gate_forward(&mut tape, x, g, 1).unwrap();
        let e2 = 2f64.exp();
        let v = tape.value(out.gates);
        assert!((v[0] - e2 / (e2 + 1.0)).abs() < 1e-12 && v[1] == 0.0);
        assert!((v[0] - 0.8807971).abs() < 1e-7);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(top_k(&[0.25f32, 0.5, 0.25], 2), vec![1, 0]);
        assert_eq!(top_k(&[0.5f32, 0.5], 1), vec![0]);
    }

    #[test]
    fn gate_keeps_exactly_k_positive_entries() {
        let l = layer(5, 3, 4, 2, false);
        let mut tape = Tape::<f32>::new(&l.store);
        let x = tape.input(&tokens(20, 3, 9)).unwrap();
        let vars = bind(&mut tape, &l);
        let g = gate_forward(&mut tape, x, vars.gate, 2).unwrap();
        for row in tape.value(g.gates).chunks(5) {
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 2);
            assert!(row.iter().sum::<f32>() <= 1.0);
        }
        let rec = g.record(&tape, 0);
        let total: f32 = rec.imp.iter().sum();
        assert!(total <= 20.0);
    }

    #[test]
    fn full_k_with_identical_experts_recovers_the_mlp() {
        let l = layer(3, 4, 6, 5, true);
        let mut tape = Tape::<f32>::new(&l.store);
        let x = tape.input(&tokens(10, 4, 1)).unwrap();
        let vars = bind(&mut tape, &l);
        let y = moe_forward(&mut tape, x, &vars, 3).unwrap();
        let dense = mlp_forward(&mut tape, x, &vars.experts[0]).unwrap();
        for (a, b) in tape.value(y.y).iter().zip(tape.value(dense)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(y.expert_evals, 30);
    }

    #[test]
    fn two_experts_match_brute_force_mixture() {
        let l = layer(2, 3, 4, 11, false);
        let mut tape = Tape::<f64>::new(&l.store);
        let xt = tokens(2, 3, 4);
        let x = tape.input(&xt).unwrap();
        let vars = bind(&mut tape, &l);
        let y = moe_forward(&mut tape, x, &vars, 1).unwrap();
        let e: Vec<Var> = vars.experts.iter().map(|p| mlp_forward(&mut tape, x, p).unwrap()).collect();
        let logits = tape.matmul_bt(x, vars.gate).unwrap();
        let probs = tape.softmax(logits).unwrap();
        let p = tape.value(probs).to_vec();
        for r in 0..2 {
            let pick = if p[r * 2 + 1] > p[r * 2] { 1 } else { 0 };
            for j in 0..3 {
                let want: f64 = (0..2)
                    .map(|i| if i == pick { p[r * 2 + i] * tape.value(e[i])[r * 3 + j] } else { 0.0 })
                    .sum();
                assert!((tape.value(y.y)[r * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_forward_equals_sum_of_selected_experts() {
        let l = layer(4, 3, 5, 8, false);
        let mut tape = Tape::<f32>::new(&l.store);
        let x = tape.input(&tokens(6, 3, 2)).unwrap();
        let vars = bind(&mut tape, &l);
        let y = moe_forward_aligned(&mut tape, x, &vars, 1).unwrap();
        for r in 0..6 {
            let e = y.gate.selected[r];
            let xr = tape.gather_rows(x, &[r]).unwrap();
            let want = mlp_forward(&mut tape, xr, &vars.experts[e]).unwrap();
            assert_eq!(&tape.value(y.y)[r * 3..r * 3 + 3], tape.value(want));
        }
    }

    #[test]
    fn aligned_gradients_scale_by_gate_and_skip_unselected() {
        let l = layer(3, 3, 4, 21, true);
        let xt = tokens(1, 3, 6);
        let (gate_val, sel, g_moe) = {
            let mut tape = Tape::<f64>::new(&l.store);
            let x = tape.input(&xt).unwrap();
            let vars = bind(&mut tape, &l);
            let out = moe_forward_aligned(&mut tape, x, &vars, 1).unwrap();
            let loss = tape.sum(out.y).unwrap();
            let sel = out.gate.selected[0];
            let gv = tape.value(out.gate.gates)[sel];
            (gv, sel, tape.backward(loss).unwrap())
        };
        let g_dense = {
            let mut tape = Tape::<f64>::new(&l.store);
            let x = tape.input(&xt).unwrap();
            let vars = bind(&mut tape, &l);
            let y = mlp_forward(&mut tape, x, &vars.experts[sel]).unwrap();
            let loss = tape.sum(y).unwrap();
            tape.backward(loss).unwrap()
        };
        let w2 = l.experts[sel][2];
        for (a, b) in g_moe.param(w2).unwrap().iter().zip(g_dense.param(w2).unwrap()) {
            assert!((a - gate_val * b).abs() < 1e-12);
        }
        for (i, e) in l.experts.iter().enumerate() {
            if i != sel {
                assert!(g_moe.param(e[2]).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
            }
        }
    }

    #[test]
    fn balance_examples() {
        assert_eq!(balance_loss_value(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(balance_loss_value(&[0.7]).unwrap(), 0.0);
        assert_eq!(balance_loss_value(&[1.5, 0.5]).unwrap(), 0.25);
        assert!(matches!(balance_loss_value(&[0.0, 0.0]), Err(Error::DegenerateRouting)));
    }

    #[test]
    fn aux_loss_is_linear_and_additive() {
        let mut tape = Tape::<f64>::detached();
        let imp = tape.input(&Tensor::new(vec![2], vec![1.5, 0.5]).unwrap()).unwrap();
        let b = balance_loss(&mut tape, imp).unwrap();
        assert!(total_aux_loss(&mut tape, &[], 0.01).unwrap().is_none());
        let z = total_aux_loss(&mut tape, &[b], 0.0).unwrap().unwrap();
        assert_eq!(tape.scalar(z), 0.0);
        let one = total_aux_loss(&mut tape, &[b], 0.01).unwrap().unwrap();
        assert!((tape.scalar(one) - 0.0025).abs() < 1e-15);
        let two = total_aux_loss(&mut tape, &[b, b], 0.01).unwrap().unwrap();
        assert_eq!(tape.scalar(two), 2.0 * tape.scalar(one));
    }

    #[test]
    fn gate_gradient_favours_the_useful_expert() {
        // Two experts; expert 0 outputs +1, expert 1 outputs -1 on every dim.
        // With loss = -sum(y), raising expert 0's gate lowers the loss.
        let d = 2;
        let mut store = ParamStore::new();
        let gate = store.insert("gate", Tensor::new(vec![2, d], vec![0.2, 0.1, 0.0, 0.0]).unwrap().trainable());
        let mut experts = Vec::new();
        for (i, sign) in [1.0f32, -1.0].into_iter().enumerate() {
            experts.push([
                store.insert(format!("e{i}.w1"), Tensor::zeros(&[d, 2]).trainable()),
                store.insert(format!("e{i}.b1"), Tensor::zeros(&[2]).trainable()),
                store.insert(format!("e{i}.w2"), Tensor::zeros(&[2, d]).trainable()),
                store.insert(format!("e{i}.b2"), Tensor::filled(&[d], sign).trainable()),
            ]);
        }
        let l = Layer { store, gate, experts };
        let mut tape = Tape::<f64>::new(&l.store);
        let x = tape.input(&Tensor::filled(&[1, d], 1.0)).unwrap();
        let vars = bind(&mut tape, &l);
        let out = moe_forward(&mut tape, x, &vars, 1).unwrap();
        assert_eq!(out.gate.selected, vec![0]);
        let s = tape.sum(out.y).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        let gg = g.param(gate).unwrap();
        // descent step raises row 0 along x and lowers row 1
        assert!(gg[0] < 0.0 && gg[1] < 0.0);
        assert!(gg[2] > 0.0 && gg[3] > 0.0);
    }

    #[test]
    fn balance_pressure_step_reduces_imbalance() {
        // Every token ranks expert 0 first. Under k=1 the post-TopK loss sits
        // at exactly 1 with zero gradient, so the pressure shows with k=2.
        let mut store = ParamStore::new();
        let gate = store.insert("gate", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap().trainable());
        let x = Tensor::new(vec![3, 2], vec![1.0, 0.2, 0.8, -0.1, 1.2, 0.3]).unwrap();
        let eval = |store: &ParamStore, k: usize| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new(store);
            let xv = tape.input(&x).unwrap();
            let g = tape.param(gate).unwrap();
            let out = gate_forward(&mut tape, xv, g, k).unwrap();
            assert!(out.selected.chunks(k).all(|s| s[0] == 0));
            let b = balance_loss(&mut tape, out.imp).unwrap();
            let grads = tape.backward(b).unwrap();
            (tape.scalar(b), grads.param(gate).unwrap().to_vec())
        };
        let (one, grad1) = eval(&store, 1);
        assert_eq!(one, 1.0);
        assert!(grad1.iter().all(|&g| g == 0.0));

        let (before, grad) = eval(&store, 2);
        for (w, g) in store.get_mut(gate).data_mut().iter_mut().zip(&grad) {
            *w -= 0.5 * *g as f32;
        }
        let (after, _) = eval(&store, 2);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn gradient_check_through_unaligned_and_aligned_layers() {
        let l = layer(3, 3, 4, 17, false);
        let xt = tokens(5, 3, 3);
        let coords: Vec<(ParamId, Vec<usize>)> = l
            .store
            .ids()
            .map(|id| (id, (0..l.store.get(id).len()).step_by(2).collect()))
            .collect();
        for aligned in [false, true] {
            let r = finite_diff_check(&l.store, &coords, 1e-3, |t| {
                let x = t.input(&xt)?;
                let vars = bind(t, &l);
                let out = if aligned {
                    moe_forward_aligned(t, x, &vars, 2)?
                } else {
                    moe_forward(t, x, &vars, 2)?
                };
                let sq = t.mul(out.y, out.y)?;
                let task = t.sum(sq)?;
                let b = balance_loss(t, out.gate.imp)?;
                let loss = t.add(task, b)?;
                Ok(Probe {
                    loss,
                    routing: out.gate.selected,
                })
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "aligned={aligned}: {r:?}");
        }
    }

    #[test]
    fn routing_record_jsonl_shape() {
        let rec = RoutingRecord {
            layer_id: 2,
            imp: vec![1.5, 0.5],
            per_token: vec![vec![(0, 0.75)], vec![(1, 0.5)]],
        };
        let mut buf = Vec::new();
        write_jsonl(&[rec.clone()], &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line, "{\"layer_id\":2,\"imp\":[1.5,0.5],\"per_token\":[[[0,0.75]],[[1,0.5]]]}\n");
        assert_eq!(serde_json::from_str::<RoutingRecord>(line.trim()).unwrap(), rec);
        assert_eq!(rec.counts(), vec![1, 1]);
    }
}

//! Property tests for the invariants of the tape, the MoE layer, growth and
//! the analysis exporters.

use proptest::prelude::*;

use rmoe_core::analysis::{self, WeightSnapshot};
use rmoe_core::growth::{self, fold, unfold, GrowPlan, Strategy};
use rmoe_core::moe;
use rmoe_core::rng::Stream;
use rmoe_core::tensor::{finite_diff_check, AdamW, AdamWConfig, ParamStore, Probe, Tape, Tensor, Var};
use rmoe_core::vit::{self, Batch, HeadRole, Model, ModelSpec};
use rmoe_core::Result;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        image_grid: 2,
        patch_dim: 4,
        d_model: 4,
        n_heads: 2,
        n_blocks: 2,
        mlp_hidden: 6,
        n_classes_upstream: 3,
        n_classes_downstream: 3,
    }
}

/// Random parameters in `[-1, 1]` of the given shapes, and a weighted-sum
/// reduction of `f`'s output so that every output entry matters.
/// The relative error of the op's gradient, or 0 when the worst coordinate
/// sits at a near-stationary point. There the O(h^2) truncation term of the
/// central difference, up to about 1e-6 at h = 1e-3, exceeds 1e-4 of the
/// gradient.
fn op_grad_error(seed: u64, shapes: &[&[usize]], f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>) -> f64 {
    let (err, at) = op_grad_check(seed, shapes, f);
    if at.abs() > 1e-2 {
        err
    } else {
        0.0
    }
}

/// Max relative error and the analytic gradient at the worst coordinate.
fn op_grad_check(seed: u64, shapes: &[&[usize]], f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>) -> (f64, f64) {
    let mut rng = Stream::new(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("p{i}"), Tensor::from_fn(s, |_| rng.uniform_sym()).trainable()))
        .collect();
    let weights: Vec<f64> = (0..4096).map(|_| 0.5 + rng.uniform(0.0, 1.0) as f64).collect();
    let coords: Vec<_> = ids.iter().map(|&id| (id, (0..store.get(id).len()).collect())).collect();
    let probe = |t: &mut Tape<'_, f64>| -> Result<Probe> {
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect::<Result<_>>()?;
        let y = f(t, &vars)?;
        let shape = t.shape(y).to_vec();
        let n = t.value(y).len();
        let w = t.constant(shape, weights[..n].to_vec())?;
        let p = t.mul(y, w)?;
        Ok(Probe {
            loss: t.sum(p)?,
            routing: vec![],
        })
    };
    let r = finite_diff_check(&store, &coords, 1e-3, probe).unwrap();
    assert_eq!(r.checked, shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>());
    (r.max_rel_err, r.worst.map_or(0.0, |w| w.2))
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn binary_op_gradients(seed in any::<u64>()) {
        prop_assert!(op_grad_error(seed, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[3, 4], &[2, 4]], |t, v| t.matmul_bt(v[0], v[1])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[3, 2], &[3]], |t, v| t.row_scale(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn unary_op_gradients(seed in any::<u64>()) {
        prop_assert!(op_grad_error(seed, &[&[2, 5]], |t, v| t.scale(v[0], -1.7)) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 5]], |t, v| t.gelu(v[0])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 5]], |t, v| t.softmax(v[0])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[4, 3]], |t, v| t.mean_pool(v[0], 2)) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[4, 3]], |t, v| t.col_sum(v[0])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 3]], |t, v| t.sum(v[0])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 3]], |t, v| t.reshape(v[0], vec![3, 2])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[2, 3]], |t, v| t.mask(v[0], vec![true, false, true, false, false, true])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[3, 3]], |t, v| t.gather_elems(v[0], &[(0, 2), (2, 1), (0, 2)])) < 1e-4);
    }

    #[test]
    fn structured_op_gradients(seed in any::<u64>()) {
        prop_assert!(op_grad_error(seed, &[&[3, 5], &[5], &[5]], |t, v| t.layernorm(v[0], v[1], v[2])) < 1e-4);
        prop_assert!(op_grad_error(seed, &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[1, 3, 0])) < 1e-4);
        prop_assert!(
            op_grad_error(seed, &[&[6, 4], &[6, 4], &[6, 4]], |t, v| t.attention(v[0], v[1], v[2], 2, 2)) < 1e-4
        );
        prop_assert!(op_grad_error(seed, &[&[2, 3], &[1, 3]], |t, v| t.combine_rows(vec![3, 3], vec![(v[0], vec![2, 0]), (v[1], vec![2])])) < 1e-4);
        // positive inputs keep the mean away from zero
        let cv = op_grad_error(seed, &[&[4]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let one = t.constant(vec![4], vec![1.0; 4])?;
            let pos = t.add(sq, one)?;
            t.cv_squared(pos)
        });
        prop_assert!(cv < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one(z in prop::collection::vec(-30.0f32..30.0, 1..40), cols in 1usize..8) {
        let rows = z.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(vec![rows, cols], z[..rows * cols].to_vec()).unwrap();
        let mut t: Tape<'_, f32> = Tape::detached();
        let v = t.input(&x).unwrap();
        let s = t.softmax(v).unwrap();
        for row in t.value(s).chunks(cols) {
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_seeds_give_identical_training(seed in any::<u64>()) {
        let run = || {
            let mut rng = Stream::new(seed);
            let mut m = Model::init(small_spec(), &mut rng).unwrap();
            let x = Tensor::from_fn(&[2, 4, 4], |_| rng.uniform_sym());
            let mut opt = AdamW::new(AdamWConfig::default());
            for _ in 0..2 {
                let g = {
                    let mut t = m.tape();
                    let o = m.forward(&mut t, &x, HeadRole::Upstream).unwrap();
                    let l = m.loss(&mut t, &o, &[0, 2], 0.0).unwrap();
                    t.backward(l.total).unwrap()
                };
                m.store.accumulate(&g);
                opt.step(&mut m.store, 1e-2).unwrap();
            }
            m
        };
        prop_assert!(run().store.bits_eq(&run().store));
    }

    #[test]
    fn single_expert_layers_equal_the_dense_model(seed in any::<u64>(), aligned in any::<bool>()) {
        let mut rng = Stream::new(seed);
        let dense = Model::init(small_spec(), &mut rng).unwrap();
        let plan = GrowPlan {
            strategy: Strategy::Score,
            selected_layers: vec![0, 1],
            max_layers: 2,
            n: 1,
            k: 1,
            epsilon: 0.0,
            scores: vec![],
        };
        let grown = growth::apply_grow_plan(&dense, &plan, aligned, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 4, 4], |_| 2.0 * rng.uniform_sym());
        let logits = |m: &Model| {
            let mut t = m.tape();
            let o = m.forward(&mut t, &x, HeadRole::Upstream).unwrap();
            t.value(o.logits).to_vec()
        };
        for (a, b) in logits(&dense).iter().zip(logits(&grown)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn token_permutation_equivariance(seed in any::<u64>(), grown in any::<bool>()) {
        let mut rng = Stream::new(seed);
        let mut m = Model::init(small_spec(), &mut rng).unwrap();
        m.attach_head(HeadRole::Downstream, &mut rng).unwrap();
        if grown {
            m = growth::overgrow(&m, 3, 1, 0.1, &mut rng).unwrap();
        }
        let pos = m.store.lookup("embed.pos").unwrap();
        m.store.get_mut(pos).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (b, t, pd) = (2, 4, 4);
        let x = Tensor::from_fn(&[b, t, pd], |_| rng.uniform_sym());
        let mut perm: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut perm);
        let mut px = vec![0f32; x.len()];
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                let dst = (bi * t + i) * pd;
                let s = (bi * t + src) * pd;
                px[dst..dst + pd].copy_from_slice(&x.data()[s..s + pd]);
            }
        }
        let px = Tensor::new(vec![b, t, pd], px).unwrap();
        let out = |input: &Tensor| {
            let mut tape = m.tape();
            let o = m.forward(&mut tape, input, HeadRole::Downstream).unwrap();
            tape.value(o.logits).to_vec()
        };
        let (y, py) = (out(&x), out(&px));
        let c = 3;
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..c {
                    prop_assert!((py[(bi * t + i) * c + j] - y[(bi * t + src) * c + j]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn moe_outputs_count_k_evaluations_per_token(seed in any::<u64>(), n in 1usize..6, kk in 1usize..6, rows in 1usize..12) {
        let k = kk.min(n);
        let mut rng = Stream::new(seed);
        let spec = ModelSpec { d_model: 4, mlp_hidden: 5, ..small_spec() };
        let mut store = ParamStore::new();
        let gate = store.insert("g", Tensor::from_fn(&[n, 4], |_| rng.uniform_sym()));
        let experts: Vec<[rmoe_core::tensor::ParamId; 4]> = (0..n)
            .map(|i| {
                let mlp = vit::init_mlp(&spec, &mut rng);
                let names = vit::expert_names(0, i);
                std::array::from_fn(|j| store.insert(names[j].clone(), mlp[j].clone()))
            })
            .collect();
        let x = Tensor::from_fn(&[rows, 4], |_| rng.uniform_sym());
        let mut t = Tape::<f32>::new(&store);
        let xv = t.input(&x).unwrap();
        let layer = moe::MoeVars {
            gate: t.param(gate).unwrap(),
            experts: experts
                .iter()
                .map(|e| moe::MlpVars {
                    w1: t.param(e[0]).unwrap(),
                    b1: t.param(e[1]).unwrap(),
                    w2: t.param(e[2]).unwrap(),
                    b2: t.param(e[3]).unwrap(),
                })
                .collect(),
        };
        let out = moe::moe_forward(&mut t, xv, &layer, k).unwrap();
        prop_assert_eq!(out.expert_evals, rows * k);
        let g = t.value(out.gate.gates);
        for r in 0..rows {
            prop_assert_eq!(g[r * n..(r + 1) * n].iter().filter(|&&v| v > 0.0).count(), k);
        }
    }

    #[test]
    fn unfold_then_fold_is_exact(seed in any::<u64>(), eps in 0.0f32..=0.5) {
        let mut rng = Stream::new(seed);
        let mlp = vit::init_mlp(&small_spec(), &mut rng);
        let bank = growth::init_experts_from_mlp(&mlp, 2, eps, &mut rng).unwrap();
        for i in 0..2 {
            let folded = bank.folded(i);
            let back = fold(&bank.core, &unfold(&bank.core, &folded));
            for (a, b) in back.iter().zip(&folded) {
                prop_assert!(a.bits_eq(b));
            }
        }
    }

    #[test]
    fn grow_then_revert_is_the_identity(seed in any::<u64>(), n in 1usize..5, mask in 0u8..4) {
        let mut rng = Stream::new(seed);
        let model = Model::init(small_spec(), &mut rng).unwrap();
        let layers: Vec<usize> = (0..2).filter(|l| mask & (1 << l) != 0).collect();
        let plan = GrowPlan {
            strategy: Strategy::Score,
            selected_layers: layers.clone(),
            max_layers: 2,
            n,
            k: 1,
            epsilon: 0.01,
            scores: vec![],
        };
        let g = growth::apply_grow_plan(&model, &plan, true, &mut rng).unwrap();
        prop_assert_eq!(g.num_params(), model.num_params() + layers.len() * ((n - 1) * small_spec().mlp_params() + n * 4));
        prop_assert_eq!(plan.param_delta(&small_spec()), g.num_params() - model.num_params());
        let r = growth::revert(&g).unwrap();
        prop_assert!(r.store.bits_eq(&model.store));
    }

    #[test]
    fn pca_is_shift_invariant(seed in any::<u64>(), shift in -5.0f32..5.0) {
        let mut rng = Stream::new(seed);
        let snaps: Vec<WeightSnapshot> = (0..3)
            .map(|e| WeightSnapshot {
                epoch: e,
                experts: (0..3).map(|_| (0..5).map(|_| rng.uniform_sym()).collect()).collect(),
            })
            .collect();
        let shifted: Vec<WeightSnapshot> = snaps
            .iter()
            .map(|s| WeightSnapshot {
                epoch: s.epoch,
                experts: s.experts.iter().map(|w| w.iter().enumerate().map(|(i, v)| v + shift * (i as f32 - 1.5)).collect()).collect(),
            })
            .collect();
        let a = analysis::pca_trajectory(&snaps).unwrap();
        let b = analysis::pca_trajectory(&shifted).unwrap();
        // constant shifts are removed by centring up to f32 rounding of the inputs
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((p.pc1 - q.pc1).abs() < 1e-4, "{} vs {}", p.pc1, q.pc1);
            prop_assert!((p.pc2 - q.pc2).abs() < 1e-3 || (a.variances[0] - a.variances[1]).abs() < 1e-3);
        }
        prop_assert!(a.variances[0] >= a.variances[1]);
    }
}

fn tiny_moe_model(seed: u64, n: usize, k: usize) -> (Model, Vec<Batch>) {
    let mut rng = Stream::new(seed);
    let spec = ModelSpec { image_grid: 3, ..small_spec() };
    let dense = Model::init(spec.clone(), &mut rng).unwrap();
    let mut m = growth::moe_from_scratch(&dense, &[1], n, k, &mut rng).unwrap();
    // wide gates so the routing is spread out
    let g = m.store.lookup(&vit::gate_name(1)).unwrap();
    m.store.get_mut(g).data_mut().iter_mut().for_each(|v| *v *= 200.0);
    let data = (0..2)
        .map(|_| Batch {
            patches: Tensor::from_fn(&[3, 9, 4], |_| rng.uniform_sym()),
            labels: (0..3).map(|_| rng.below(3)).collect(),
        })
        .collect();
    (m, data)
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn specialization_permutes_with_expert_relabeling(seed in any::<u64>()) {
        let n = 4;
        let (m, data) = tiny_moe_model(seed, n, 1);
        let mut perm: Vec<usize> = (0..n).collect();
        Stream::new(seed ^ 1).shuffle(&mut perm);
        // expert i of the relabeled model is expert perm[i] of the original
        let mut r = m.clone();
        let gid = r.store.lookup(&vit::gate_name(1)).unwrap();
        let g = m.tensor(&vit::gate_name(1)).unwrap().data().to_vec();
        for (i, &p) in perm.iter().enumerate() {
            r.store.get_mut(gid).data_mut()[i * 4..(i + 1) * 4].copy_from_slice(&g[p * 4..(p + 1) * 4]);
            for (dst, src) in vit::expert_names(1, i).iter().zip(vit::expert_names(1, p)) {
                let id = r.store.lookup(dst).unwrap();
                *r.store.get_mut(id) = m.tensor(&src).unwrap().clone();
            }
        }
        let a = analysis::specialization_matrix(&m, &data, 1).unwrap();
        let b = analysis::specialization_matrix(&r, &data, 1).unwrap();
        prop_assert_eq!(&a.classes, &b.classes);
        for (ra, rb) in a.cells.iter().zip(&b.cells) {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((rb[i] - ra[p]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn k1_routing_maps_partition_the_grid(seed in any::<u64>(), n in 1usize..6) {
        let (m, data) = tiny_moe_model(seed, n, 1);
        let maps = analysis::routing_map_export(&m, &data[0].patches, 1, n, None).unwrap();
        for img in &maps.grids {
            for p in 0..9 {
                prop_assert_eq!(img.iter().map(|g| g[p] as usize).sum::<usize>(), 1);
            }
        }
    }

    #[test]
    fn specialization_rows_sum_to_mean_top_gate(seed in any::<u64>(), k in 1usize..3) {
        let (m, data) = tiny_moe_model(seed, 3, k);
        let s = analysis::specialization_matrix(&m, &data, 1).unwrap();
        for row in &s.cells {
            let sum: f64 = row.iter().sum();
            prop_assert!(row.iter().all(|&c| (0.0..=1.0).contains(&c)));
            prop_assert!(sum <= 1.0 + 1e-9 && sum > 0.0);
        }
    }
}

fn score_tasks(seed: u64, spec: &ModelSpec, copies: usize) -> Vec<growth::ScoreTask> {
    let mut rng = Stream::new(seed ^ 0x5eed);
    let t = spec.tokens();
    let mk = |rng: &mut Stream| Batch {
        patches: Tensor::from_fn(&[2, t, spec.patch_dim], |_| rng.uniform_sym()),
        labels: (0..2).map(|_| rng.below(spec.n_classes_upstream)).collect(),
    };
    let task = growth::ScoreTask {
        name: "up".into(),
        head: HeadRole::Upstream,
        warmup: vec![mk(&mut rng)],
        scoring: vec![mk(&mut rng), mk(&mut rng)],
        w_balance: 0.01,
    };
    vec![task; copies]
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn scores_are_nonnegative_and_add_over_duplicate_tasks(seed in any::<u64>()) {
        let mut rng = Stream::new(seed);
        let spec = small_spec();
        let dense = Model::init(spec.clone(), &mut rng).unwrap();
        let over = growth::overgrow(&dense, 3, 1, 0.1, &mut rng).unwrap();
        let before = over.clone();
        let cfg = growth::FireflyConfig { warmup_steps: 2, ..Default::default() };
        let one = growth::firefly_scores(&over, &score_tasks(seed, &spec, 1), &cfg).unwrap();
        let two = growth::firefly_scores(&over, &score_tasks(seed, &spec, 2), &cfg).unwrap();
        for (a, b) in one.iter().zip(&two) {
            prop_assert!(a.total >= 0.0 && a.total.is_finite());
            prop_assert_eq!(b.per_task[0].to_bits(), b.per_task[1].to_bits());
            prop_assert_eq!(b.total, 2.0 * a.total);
        }
        // scoring works on copies: the over-grown model and its dense core are untouched
        prop_assert!(over.store.bits_eq(&before.store));
        prop_assert!(growth::revert(&over).unwrap().store.bits_eq(&dense.store));
    }

    #[test]
    fn all_experts_active_identical_experts_equal_dense(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = Stream::new(seed);
        let dense = Model::init(small_spec(), &mut rng).unwrap();
        let plan = GrowPlan {
            strategy: Strategy::Score,
            selected_layers: vec![0, 1],
            max_layers: 2,
            n,
            k: n,
            epsilon: 0.0,
            scores: vec![],
        };
        let grown = growth::apply_grow_plan(&dense, &plan, false, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 4, 4], |_| rng.uniform_sym());
        let logits = |m: &Model| {
            let mut t = m.tape();
            let o = m.forward(&mut t, &x, HeadRole::Upstream).unwrap();
            t.value(o.logits).to_vec()
        };
        for (a, b) in logits(&dense).iter().zip(logits(&grown)) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

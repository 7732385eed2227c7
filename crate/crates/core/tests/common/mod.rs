#![allow(dead_code)]

use std::path::PathBuf;

use rmoe_core::analysis;
use rmoe_core::growth;
use rmoe_core::pipeline::{run_pipeline, PipelineConfig};
use rmoe_core::rng::Stream;
use rmoe_core::tensor::Tensor;
use rmoe_core::vit::{Batch, Model, ModelSpec};

pub const TINY: &str = r#"{
  "seed": 3,
  "model": {"image_grid": 4, "patch_dim": 4, "d_model": 8, "n_heads": 2, "n_blocks": 2,
            "mlp_hidden": 16, "n_classes_upstream": 4, "n_classes_downstream": 3},
  "data": {"train_images": 64, "val_images": 16},
  "schedule": {"upstream_epochs": 2, "steps_per_epoch": 3, "intermediate_epochs": 1,
               "downstream_steps": 4, "batch_size": 4, "eval_batch_size": 8},
  "moe": {"n": 4, "max_layers": 1, "stages": [[0, 0], [1, 1]]},
  "firefly": {"warmup_steps": 2, "scoring_batches": 1}
}"#;

pub fn tiny(pipeline: &str, overrides: &[(&str, &str)]) -> PipelineConfig {
    let mut o: Vec<(String, String)> = vec![("pipeline".into(), pipeline.into())];
    o.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    PipelineConfig::from_parts(Some(TINY), &o).unwrap()
}

/// Compares `contents` with `tests/golden/{name}`. `UPDATE_GOLDEN=1` rewrites
/// the file instead.
pub fn golden(name: &str, contents: &str) -> Result<(), String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some_and(|v| v == "1") {
        std::fs::write(&path, contents).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()))?;
    if want == contents {
        Ok(())
    } else {
        Err(format!("{name} differs from its golden file"))
    }
}

/// Every exporter's text output for fixed seeds, keyed by golden file name.
pub fn exporter_outputs() -> Vec<(String, String)> {
    let mut out = Vec::new();

    let mut rng = Stream::new(11);
    let snaps: Vec<_> = (0..3)
        .map(|epoch| analysis::WeightSnapshot {
            epoch,
            experts: (0..3).map(|_| (0..6).map(|_| rng.uniform_sym()).collect()).collect(),
        })
        .collect();
    let pca = analysis::pca_trajectory(&snaps).unwrap();
    out.push(("pca.csv".into(), pca.to_csv()));
    out.push(("pca.json".into(), pca.sidecar_json()));

    let spec = ModelSpec {
        image_grid: 3,
        patch_dim: 4,
        d_model: 4,
        n_heads: 2,
        n_blocks: 2,
        mlp_hidden: 6,
        n_classes_upstream: 3,
        n_classes_downstream: 3,
    };
    let mut rng = Stream::new(12);
    let dense = Model::init(spec, &mut rng).unwrap();
    let mut m = growth::moe_from_scratch(&dense, &[1], 4, 1, &mut rng).unwrap();
    let g = m.store.lookup(&rmoe_core::vit::gate_name(1)).unwrap();
    m.store.get_mut(g).data_mut().iter_mut().for_each(|v| *v *= 50.0);
    let data: Vec<Batch> = (0..2)
        .map(|_| Batch {
            patches: Tensor::from_fn(&[4, 9, 4], |_| rng.uniform_sym()),
            labels: (0..4).map(|_| rng.below(3)).collect(),
        })
        .collect();
    let s = analysis::specialization_matrix(&m, &data, 1).unwrap();
    out.push(("specialization.csv".into(), s.to_csv()));
    out.push(("specialization.json".into(), s.sidecar_json()));
    let maps = analysis::routing_map_export(&m, &data[0].patches, 1, 2, None).unwrap();
    out.extend(maps.files());
    out.push(("routing.json".into(), maps.sidecar_json()));

    let runs: Vec<(String, _)> = [("0", "moe.w_balance_downstream=0"), ("0.1", "moe.w_balance_downstream=0.1")]
        .into_iter()
        .map(|(label, o)| {
            let (k, v) = o.split_once('=').unwrap();
            let cfg = tiny("rmoe-d", &[(k, v), ("moe.strategy", "every-last")]);
            (label.to_string(), run_pipeline(&cfg).unwrap().log)
        })
        .collect();
    let layer = runs[0].1.steps().last().unwrap().layer_ids[0];
    let curve = analysis::balance_curve(&runs, layer, Some("downstream")).unwrap();
    out.push(("balance.csv".into(), analysis::balance_csv(&curve)));
    out
}

/// One block whose FFN is an MoE layer with one expert per class. Patch
/// embeddings are one-hot class indicators, attention is switched off and
/// gate row `e` is `scale · e_e`, so every token of a class-`c` image reaches
/// the second layer norm as the same vector and routes to expert `c`.
pub fn constructed_routing(classes: usize, scale: f32) -> Model {
    let spec = ModelSpec {
        image_grid: 2,
        patch_dim: classes,
        d_model: classes,
        n_heads: 1,
        n_blocks: 1,
        mlp_hidden: 4,
        n_classes_upstream: classes,
        n_classes_downstream: classes,
    };
    let mut rng = Stream::new(1);
    let dense = Model::init(spec, &mut rng).unwrap();
    let mut m = growth::moe_from_scratch(&dense, &[0], classes, 1, &mut rng).unwrap();
    let mut set = |name: &str, f: &dyn Fn(usize) -> f32| {
        let id = m.store.lookup(name).unwrap();
        for (i, v) in m.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    };
    let eye = |s: f32| move |i: usize| if i / classes == i % classes { s } else { 0.0 };
    set("embed.w", &eye(1.0));
    set("embed.b", &|_| 0.0);
    set("embed.pos", &|_| 0.0);
    set("blocks.0.attn.wo", &|_| 0.0);
    set("blocks.0.ln2.g", &|_| 1.0);
    set("blocks.0.ln2.b", &|_| 0.0);
    set(&rmoe_core::vit::gate_name(0), &eye(scale));
    m
}

pub fn class_images(classes: usize, per_class: usize, tokens: usize) -> Batch {
    let b = classes * per_class;
    let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
    let patches = Tensor::from_fn(&[b, tokens, classes], |idx| {
        let (img, c) = (idx / (tokens * classes), idx % classes);
        if labels[img] == c {
            3.0
        } else {
            0.0
        }
    });
    Batch { patches, labels }
}

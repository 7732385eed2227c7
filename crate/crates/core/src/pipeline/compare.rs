//! Side-by-side comparison of pipelines.

use serde::Serialize;

use crate::growth::GrowPlan;
use crate::rng::Stream;
use crate::vit::{HeadRole, Model};
use crate::{Error, Result};

use super::config::PipelineConfig;
use super::flops::{self, pipeline_cost};
use super::run::run_pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMode {
    /// Train every pipeline for every seed.
    Run,
    /// Closed-form costs and parameter counts only; no metric.
    CostOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub pipeline: String,
    /// Median downstream per-token accuracy over seeds.
    pub metric: Option<f64>,
    pub params: usize,
    pub flops_scratch: u64,
    pub flops_pretrained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Parameter count of a pipeline's final model, from the topology alone.
pub fn final_params(cfg: &PipelineConfig) -> Result<usize> {
    let mut rng = Stream::new(0);
    let mut m = Model::init(cfg.model.clone(), &mut rng)?;
    m.attach_head(HeadRole::Downstream, &mut rng)?;
    if cfg.pipeline == super::PipelineKind::Dense {
        return Ok(m.num_params());
    }
    let plan = GrowPlan {
        strategy: flops::scratch_strategy(cfg),
        selected_layers: flops::planned_moe_layers(cfg)?,
        max_layers: cfg.moe.max_layers,
        n: cfg.moe.n,
        k: cfg.moe.k,
        epsilon: cfg.moe.epsilon,
        scores: Vec::new(),
    };
    Ok(m.num_params() + plan.param_delta(&cfg.model))
}

pub fn compare_pipelines(configs: &[PipelineConfig], seeds: &[u64], mode: CompareMode) -> Result<ComparisonTable> {
    let Some(first) = configs.first() else {
        return Err(Error::Config("comparison needs at least one pipeline config".into()));
    };
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    for c in configs {
        if c.model != first.model {
            return Err(Error::Config(format!(
                "pipeline {} uses a different model spec from {}",
                c.pipeline, first.pipeline
            )));
        }
        if c.data != first.data {
            return Err(Error::Config(format!("pipeline {} uses different data settings", c.pipeline)));
        }
        c.validate()?;
    }
    let mut rows = Vec::new();
    for base in configs {
        let cost = pipeline_cost(base)?;
        let mut row = ComparisonRow {
            pipeline: base.pipeline.name().to_string(),
            metric: None,
            params: final_params(base)?,
            flops_scratch: cost.total(),
            flops_pretrained: cost.pretrained(base.pipeline),
        };
        if mode == CompareMode::Run {
            let mut metrics = Vec::new();
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                let run = run_pipeline(&cfg)?;
                if run.flops != cost || run.checkpoint.model.num_params() != row.params {
                    return Err(Error::State(format!(
                        "{} run disagrees with its closed-form cost or size",
                        base.pipeline
                    )));
                }
                metrics.push(run.metric);
            }
            row.metric = Some(median(&metrics));
        }
        rows.push(row);
    }
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn row(&self, pipeline: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.pipeline == pipeline)
    }

    fn cells(&self) -> Vec<[String; 5]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.pipeline.clone(),
                    r.metric.map(|m| format!("{m:.6}")).unwrap_or_default(),
                    r.params.to_string(),
                    r.flops_scratch.to_string(),
                    r.flops_pretrained.to_string(),
                ]
            })
            .collect()
    }

    pub const HEADER: [&'static str; 5] = ["pipeline", "metric", "params", "flops_scratch", "flops_pretrained"];

    pub fn to_csv(&self) -> String {
        let mut s = Self::HEADER.join(",");
        s.push('\n');
        for c in self.cells() {
            s.push_str(&c.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut width = Self::HEADER.map(str::len);
        for c in &cells {
            for (w, v) in width.iter_mut().zip(c) {
                *w = (*w).max(v.len());
            }
        }
        let line = |vals: Vec<&str>| {
            let mut out = String::new();
            for (i, (v, w)) in vals.iter().zip(width).enumerate() {
                if i == 0 {
                    out.push_str(&format!("{v:<w$}"));
                } else {
                    out.push_str(&format!("  {v:>w$}"));
                }
            }
            out.trim_end().to_string() + "\n"
        };
        let mut s = line(Self::HEADER.to_vec());
        for c in &cells {
            s.push_str(&line(c.iter().map(String::as_str).collect()));
        }
        s
    }
}

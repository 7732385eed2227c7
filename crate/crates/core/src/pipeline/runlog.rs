//! JSON-lines training logs.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::flops::StageFlops;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    /// Balance loss per MoE layer, aligned with `layer_ids`.
    pub balance: Vec<f64>,
    pub layer_ids: Vec<usize>,
    pub imp: Vec<Vec<f32>>,
    pub flops_cumulative: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pipeline: String,
    pub seed: u64,
    /// `upstream_accuracy` or `downstream_token_accuracy`.
    pub metric_name: String,
    pub metric: f64,
    pub params: usize,
    pub flops: StageFlops,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LogEntry {
    Step(StepEntry),
    /// Start of a stage; `flops_cumulative` is the count carried into it.
    Stage { stage: String, flops_cumulative: u64 },
    Eval { stage: String, metric_name: String, metric: f64 },
    Summary(Summary),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
}

impl RunLog {
    pub fn push(&mut self, e: LogEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: RunLog) {
        self.entries.extend(other.entries);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepEntry> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn stage_steps<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a StepEntry> + 'a {
        self.steps().filter(move |s| s.stage == stage)
    }

    pub fn summary(&self) -> Option<&Summary> {
        self.entries.iter().rev().find_map(|e| match e {
            LogEntry::Summary(s) => Some(s),
            _ => None,
        })
    }

    pub fn last_flops(&self) -> u64 {
        self.entries
            .iter()
            .rev()
            .find_map(|e| match e {
                LogEntry::Step(s) => Some(s.flops_cumulative),
                LogEntry::Stage { flops_cumulative, .. } => Some(*flops_cumulative),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to memory");
        String::from_utf8(v).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("run log line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|e| Error::Data(format!("run log line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_jsonl() {
        let mut log = RunLog::default();
        log.push(LogEntry::Stage {
            stage: "pretrain".into(),
            flops_cumulative: 0,
        });
        log.push(LogEntry::Step(StepEntry {
            stage: "pretrain".into(),
            step: 0,
            lr: 1e-3,
            task_loss: 2.0794415,
            balance: vec![0.25],
            layer_ids: vec![3],
            imp: vec![vec![1.5, 0.5]],
            flops_cumulative: 123,
        }));
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"type":"stage","stage":"pretrain""#));
        let back = RunLog::read(text.as_bytes()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.last_flops(), 123);
        assert_eq!(back.stage_steps("pretrain").count(), 1);
    }

    #[test]
    fn garbage_is_a_data_error() {
        assert!(matches!(RunLog::read("{\"type\":\"nope\"}\n".as_bytes()), Err(Error::Data(_))));
    }
}

//! Per-run metrics, written as JSON lines: one header object, then one
//! object per step and per evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::regularizers::RegularizerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub method: String,
    #[serde(default)]
    pub dataset: String,
    pub beta: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_mu: f64,
    pub bilevel_inner_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<RegularizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holdout_scores: Vec<(f64, f64)>,
}

impl RunHeader {
    pub fn from_config(c: &TrainConfig) -> Self {
        let method = match &c.regularizer {
            Some(r) if r.beta > 0.0 => format!("{:?}", r.kind).to_lowercase(),
            _ => "stl".to_string(),
        };
        Self {
            method,
            dataset: String::new(),
            beta: c.beta(),
            seed: c.seed,
            steps: c.steps,
            batch_size: c.batch_size,
            lr_theta: c.lr_theta,
            lr_mu: c.lr_mu,
            bilevel_inner_steps: c.bilevel_inner_steps,
            regularizer: c.regularizer.clone().filter(|r| r.beta > 0.0),
            beta_grid: None,
            holdout_scores: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub reg: f64,
    pub lr_theta: f64,
    pub lr_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub split: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunRecord {
    pub fn new(header: RunHeader) -> Self {
        Self {
            header,
            steps: Vec::new(),
            evals: Vec::new(),
        }
    }

    pub fn final_accuracy(&self, split: &str) -> Option<f64> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.split == split)
            .map(|e| e.accuracy)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: Line| {
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        };
        push(Line::Header(self.header.clone()));
        for s in &self.steps {
            push(Line::Step(*s));
        }
        for e in &self.evals {
            push(Line::Eval(e.clone()));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut evals = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line = serde_json::from_str(raw)
                .map_err(|e| Error::Input(format!("metrics line {}: {e}", i + 1)))?;
            match line {
                Line::Header(h) => header = Some(h),
                Line::Step(s) => steps.push(s),
                Line::Eval(e) => evals.push(e),
            }
        }
        let header = header.ok_or_else(|| Error::Input("metrics file has no header".into()))?;
        Ok(Self {
            header,
            steps,
            evals,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

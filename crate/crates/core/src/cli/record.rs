use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::RunContext;
use crate::error::Result;

/// `run.json`: what was run, with which inputs, seed and config.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub threads: usize,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn new(ctx: &RunContext, command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv: ctx.argv.clone(),
            threads: ctx.threads,
            seed: None,
            config: None,
            inputs: BTreeMap::new(),
            outputs: vec![],
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        crate::io::atomic_write(&out_dir.join("run.json"), text.as_bytes())
    }
}

//! TOML experiment files.
//!
//! ```toml
//! out = "runs/sbm"          # optional
//!
//! [data]
//! path = "data/cora"        # a graph directory, or
//! # [data.synth]            # a generated SBM
//!
//! [train]                   # any TrainConfig field
//! epochs = 200
//!
//! [eval]                    # any EvalProtocol field
//! n_splits = 20
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalProtocol;
use crate::graph::{generate_sbm, load_graph, Graph, SbmParams, SplitMasks};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SbmParams>,
}

impl DataSource {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synth) {
            (Some(_), None) => Ok(()),
            (None, Some(s)) => s.validate(),
            _ => Err(Error::Config(
                "[data] needs exactly one of `path` or `synth`".into(),
            )),
        }
    }

    pub fn load(&self) -> Result<(Graph, SplitMasks)> {
        self.validate()?;
        match (&self.path, &self.synth) {
            (Some(p), _) => load_graph(p),
            (_, Some(s)) => generate_sbm(s),
            _ => unreachable!("validated"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentSpec {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            Error::parse(origin, line, e.message().to_string())
        })?;
        spec.train.validate()?;
        Ok(spec)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = spec.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = spec.out.as_mut() {
            resolve(p);
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }
}

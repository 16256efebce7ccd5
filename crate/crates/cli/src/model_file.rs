//! Versioned JSON persistence of fitted models.

use std::path::Path;

use cph_core::{CphModel, FitReport, MixingFamily, PhParams, StructureKind};
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Preprocessing};
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum MixingSpec {
    Gamma { alpha: f64 },
    Stable { alpha: f64, eta: f64 },
}

impl MixingSpec {
    pub fn to_family(self) -> CliResult<MixingFamily> {
        Ok(match self {
            MixingSpec::Gamma { alpha } => MixingFamily::gamma(alpha)?,
            MixingSpec::Stable { alpha, eta } => MixingFamily::stable(alpha, eta)?,
        })
    }

    pub fn from_family(m: &MixingFamily) -> CliResult<Self> {
        match m {
            MixingFamily::Gamma { alpha } => Ok(MixingSpec::Gamma { alpha: *alpha }),
            MixingFamily::Stable { alpha, eta } => Ok(MixingSpec::Stable { alpha: *alpha, eta: *eta }),
            MixingFamily::Generic(_) => Err(CliError::usage("models with a generic scaling density cannot be saved")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub tool_version: String,
    /// States whose rates were frozen at some iteration.
    #[serde(default)]
    pub frozen_states: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub structure: StructureKind,
    pub dim: usize,
    pub pi: Vec<f64>,
    /// Sub-intensity matrix in row-major order.
    pub t: Vec<f64>,
    pub mixing: MixingSpec,
    pub nodes: usize,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    #[serde(default)]
    pub fit: Option<FitMetadata>,
}

impl ModelFile {
    pub fn from_model(model: &CphModel, structure: StructureKind) -> CliResult<Self> {
        let ph = model.ph();
        let p = ph.dim();
        let t = (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| ph.t()[(i, j)]).collect();
        Ok(ModelFile {
            schema_version: SCHEMA_VERSION,
            structure,
            dim: p,
            pi: ph.pi().iter().copied().collect(),
            t,
            mixing: MixingSpec::from_family(model.mixing())?,
            nodes: model.nodes(),
            preprocessing: Preprocessing::default(),
            fit: None,
        })
    }

    pub fn from_fit(report: &FitReport, structure: StructureKind, seed: u64, pre: Preprocessing) -> CliResult<Self> {
        let mut file = Self::from_model(&report.model, structure)?;
        file.preprocessing = pre;
        file.fit = Some(FitMetadata {
            loglik: report.loglik(),
            iterations: report.iterations,
            converged: report.converged,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            frozen_states: report.frozen.clone(),
        });
        Ok(file)
    }

    /// Re-checks every distributional invariant and builds the model.
    pub fn to_model(&self) -> CliResult<CphModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::data(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let p = self.dim;
        if p == 0 || self.pi.len() != p || self.t.len() != p * p {
            return Err(CliError::data(format!(
                "dimension {p} does not match {} initial probabilities and {} matrix entries",
                self.pi.len(),
                self.t.len()
            )));
        }
        let ph = PhParams::from_parts(&self.pi, &self.t)?;
        if !self.structure.matches(ph.t()) {
            return Err(CliError::data(format!("sub-intensity matrix does not have {} structure", self.structure)));
        }
        Preprocessing::new(self.preprocessing.shift, self.preprocessing.scale).map_err(|e| match e {
            CliError::Usage(m) => CliError::Data(m),
            other => other,
        })?;
        Ok(CphModel::with_nodes(ph, self.mixing.to_family()?, self.nodes)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model files serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| CliError::data(format!("invalid model file: {e}")))?;
        file.to_model()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> CliResult<(Self, CphModel)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        let file = Self::from_json(&text).map_err(|e| e.context(&path.display().to_string()))?;
        let model = file.to_model()?;
        Ok((file, model))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let json = self.to_json();
        write_atomic(path, |w| Ok(w.write_all(json.as_bytes())?))
    }
}

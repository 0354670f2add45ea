//! Scenario files: a TOML document with top-level keys `space`, `beliefs`,
//! `agents`, `target`, optional `securities`, `solver` and `allocation`.
//!
//! ```toml
//! target = [1.0, 2.0, 0.0, 0.5]
//!
//! [space]
//! weights = [0.25, 0.25, 0.25, 0.25]
//! blocks = ["A", "A", "Ac", "Ac"]
//!
//! [beliefs]
//! P = { A = 1.0, Ac = 1.0 }
//! Q = { A = 0.5, Ac = 1.5 }
//!
//! [[agents]]
//! name = "first"
//! belief = "P"
//! measure = { kind = "expected_shortfall", level = 0.2 }
//! ```

use crate::CliError;
use riskshare::catalog::{MeasureKind, RiskMeasure};
use riskshare::space::{Belief, ScenarioSpace, SpaceError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub target: Vec<f64>,
    /// Full allocation, one row per agent; used by `improve`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<Vec<f64>>>,
    pub space: SpaceSpec,
    /// Block-constant densities with respect to the space weights, given as
    /// block label to density value.
    pub beliefs: BTreeMap<String, BTreeMap<String, f64>>,
    pub agents: Vec<AgentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub securities: Option<SecuritiesSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    /// Atom names; `w0, w1, …` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<String>>,
    pub weights: Vec<f64>,
    pub blocks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub belief: String,
    pub measure: MeasureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecuritiesSpec {
    /// Belief name whose density is the pricing density `Q*`.
    pub pricing: String,
    /// Security basis per agent, each a list of payoff vectors.
    pub bases: Vec<Vec<Vec<f64>>>,
    /// Unit-price vector split per agent; chosen automatically when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub box_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

/// A validated scenario with the library objects built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub space: ScenarioSpace,
    pub beliefs: BTreeMap<String, Belief>,
    pub agents: Vec<RiskMeasure>,
    pub names: Vec<String>,
}

fn invalid(field: impl Into<String>, invariant: impl Into<String>) -> CliError {
    CliError::Validation {
        field: field.into(),
        invariant: invariant.into(),
    }
}

fn space_invariant(e: &SpaceError) -> &'static str {
    match e {
        SpaceError::NoAtoms => "NoAtoms",
        SpaceError::LengthMismatch { .. } => "LengthMismatch",
        SpaceError::NonPositiveWeight { .. } => "NonPositiveWeight",
        SpaceError::WeightsNotNormalized { .. } => "WeightsNotNormalized",
        SpaceError::EmptyBlock(_) => "EmptyBlock",
        SpaceError::BlockTooSmall { .. } => "BlockTooSmall",
        SpaceError::UndeclaredBlock(_) => "UndeclaredBlock",
        SpaceError::UnknownBlock(_) => "UnknownBlock",
        SpaceError::NegativeDensity { .. } => "NegativeDensity",
        SpaceError::DensityNotNormalized { .. } => "DensityNotNormalized",
        SpaceError::NotBlockConstant { .. } => "NotBlockConstant",
    }
}

fn check_finite(field: &str, values: &[f64]) -> Result<(), CliError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(field, "NonFinite"))
    }
}

fn check_len(field: &str, found: usize, expected: usize) -> Result<(), CliError> {
    if found == expected {
        Ok(())
    } else {
        Err(invalid(field, format!("LengthMismatch (expected {expected}, found {found})")))
    }
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            CliError::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Serialize(e.to_string()))
    }

    /// Checks every invariant and builds the space, beliefs and measures.
    pub fn build(&self) -> Result<Scenario, CliError> {
        let n = self.space.weights.len();
        check_finite("space.weights", &self.space.weights)?;
        check_len("space.blocks", self.space.blocks.len(), n)?;
        let atoms: Vec<String> = match &self.space.atoms {
            Some(a) => {
                check_len("space.atoms", a.len(), n)?;
                a.clone()
            }
            None => (0..n).map(|k| format!("w{k}")).collect(),
        };
        let space = ScenarioSpace::build(&atoms, &self.space.weights, &self.space.blocks)
            .map_err(|e| invalid("space", space_invariant(&e)))?;

        let mut beliefs = BTreeMap::new();
        for (name, values) in &self.beliefs {
            let field = format!("beliefs.{name}");
            check_finite(&field, &values.values().copied().collect::<Vec<_>>())?;
            if let Some(unknown) = values.keys().find(|b| space.block_index(b).is_none()) {
                return Err(invalid(format!("{field}.{unknown}"), "unknown block"));
            }
            let per_block: Vec<f64> = space
                .block_labels()
                .iter()
                .map(|b| values.get(b).copied().ok_or_else(|| invalid(format!("{field}.{b}"), "missing block")))
                .collect::<Result<_, _>>()?;
            let belief =
                Belief::from_block_values(&space, &per_block).map_err(|e| invalid(&field, space_invariant(&e)))?;
            beliefs.insert(name.clone(), belief);
        }

        if self.agents.is_empty() {
            return Err(invalid("agents", "no agents"));
        }
        let mut agents = Vec::with_capacity(self.agents.len());
        let mut names = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter().enumerate() {
            let belief = beliefs
                .get(&a.belief)
                .ok_or_else(|| invalid(format!("agents[{i}].belief"), "unknown belief"))?;
            let rho = RiskMeasure::new(a.measure.clone(), belief.clone())
                .map_err(|e| invalid(format!("agents[{i}].measure"), e.to_string()))?;
            agents.push(rho);
            names.push(a.name.clone().unwrap_or_else(|| format!("agent{}", i + 1)));
        }
        if let Some(dup) = names.iter().enumerate().find(|(i, m)| names[..*i].contains(m)) {
            return Err(invalid(format!("agents[{}].name", dup.0), "duplicate name"));
        }

        check_len("target", self.target.len(), n)?;
        check_finite("target", &self.target)?;
        if let Some(rows) = &self.allocation {
            check_len("allocation", rows.len(), agents.len())?;
            for (i, row) in rows.iter().enumerate() {
                check_len(&format!("allocation[{i}]"), row.len(), n)?;
                check_finite(&format!("allocation[{i}]"), row)?;
            }
            for k in 0..n {
                let s: f64 = rows.iter().map(|r| r[k]).sum();
                if (s - self.target[k]).abs() > 1e-9 * (1.0 + self.target[k].abs()) {
                    return Err(invalid("allocation", "parts do not sum to the target"));
                }
            }
        }
        if let Some(sec) = &self.securities {
            if !beliefs.contains_key(&sec.pricing) {
                return Err(invalid("securities.pricing", "unknown belief"));
            }
            check_len("securities.bases", sec.bases.len(), agents.len())?;
            for (i, basis) in sec.bases.iter().enumerate() {
                if basis.is_empty() {
                    return Err(invalid(format!("securities.bases[{i}]"), "empty basis"));
                }
                for (j, s) in basis.iter().enumerate() {
                    let field = format!("securities.bases[{i}][{j}]");
                    check_len(&field, s.len(), n)?;
                    check_finite(&field, s)?;
                }
            }
            if let Some(unit) = &sec.unit {
                check_len("securities.unit", unit.len(), agents.len())?;
                for (i, u) in unit.iter().enumerate() {
                    check_len(&format!("securities.unit[{i}]"), u.len(), n)?;
                    check_finite(&format!("securities.unit[{i}]"), u)?;
                }
            }
        }
        let s = &self.solver;
        for (field, v) in [("solver.tolerance", s.tolerance), ("solver.box", s.box_bound), ("solver.grid", s.grid)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(invalid(field, "NonPositive"));
                }
            }
        }
        Ok(Scenario {
            file: self.clone(),
            space,
            beliefs,
            agents,
            names,
        })
    }
}

/// Reads, parses and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<ScenarioFile, CliError> {
    Ok(load(path)?.file)
}

/// Like [`parse_scenario`] but keeps the built objects.
pub fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    ScenarioFile::from_toml(&text)?.build()
}

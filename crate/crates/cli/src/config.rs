//! Run configuration file: model layout, priors, optimizer and
//! preprocessing in one JSON document.

use std::collections::BTreeMap;

use dkt_core::baselines::GpOptions;
use dkt_core::io::{PreprocessSpec, RawTable};
use dkt_core::synth::SynthSpec;
use dkt_core::{DktError, ModelConfig, OptimizerSpec, PriorSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Agnostic unit of every biomarker, by name.
    pub units: BTreeMap<String, usize>,
    /// Disease order of the fitted parameters; defaults to order of appearance.
    #[serde(default)]
    pub diseases: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub fixed_lambda_shape: bool,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Applied to raw tables before fitting; absent means values are used as given.
    #[serde(default)]
    pub preprocess: Option<PreprocessSpec>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub compare: CompareSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default = "default_knots")]
    pub spline_knots: usize,
    #[serde(default)]
    pub gp: GpOptions,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            target: None,
            spline_knots: default_knots(),
            gp: GpOptions::default(),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_knots() -> usize {
    dkt_core::baselines::regress::DEFAULT_KNOTS
}

impl RunConfig {
    /// The configuration matching a synthetic cohort's layout.
    pub fn for_spec(spec: &SynthSpec) -> RunConfig {
        RunConfig {
            units: spec
                .biomarkers
                .iter()
                .cloned()
                .zip(spec.unit_allocation.iter().copied())
                .collect(),
            diseases: Some(spec.diseases.iter().map(|d| d.label.clone()).collect()),
            fixed_lambda_shape: true,
            priors: PriorSpec::default(),
            optimizer: OptimizerSpec::default(),
            preprocess: None,
            threads: None,
            compare: CompareSettings::default(),
        }
    }

    /// Model configuration for the biomarkers and diseases of `table`.
    pub fn model_config(&self, table: &RawTable) -> Result<ModelConfig> {
        if let Some(extra) = self.units.keys().find(|b| !table.biomarkers.contains(b)) {
            return Err(DktError::UnknownBiomarker(extra.clone()));
        }
        let unit_allocation = table
            .biomarkers
            .iter()
            .map(|b| {
                self.units
                    .get(b)
                    .copied()
                    .ok_or_else(|| DktError::InvalidConfig(format!("no unit assigned to biomarker `{b}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let diseases = match &self.diseases {
            Some(d) => d.clone(),
            None => {
                let mut seen: Vec<String> = Vec::new();
                for r in &table.rows {
                    if !seen.contains(&r.disease) {
                        seen.push(r.disease.clone());
                    }
                }
                seen
            }
        };
        let config = ModelConfig {
            biomarkers: table.biomarkers.clone(),
            units: unit_allocation.iter().max().map_or(0, |m| m + 1),
            unit_allocation,
            diseases,
            fixed_lambda_shape: self.fixed_lambda_shape,
            priors: self.priors,
            optimizer: self.optimizer.clone(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dkt_core::io::read_csv;
    use dkt_core::synth::default_spec;

    fn table() -> RawTable {
        let text = "subject_id,disease,diagnosis,months_since_baseline,age,gender,tiv,source,a,b\n\
                    s1,X,patient,0,,,,,0.1,0.2\n\
                    s2,Y,patient,0,,,,,0.3,\n";
        read_csv(text.as_bytes()).unwrap()
    }

    #[test]
    fn synthetic_layout_round_trips() {
        let spec = default_spec();
        let run = RunConfig::for_spec(&spec);
        let text = serde_json::to_string(&run).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, run);
        assert_eq!(back.units.len(), spec.biomarkers.len());
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let run: RunConfig = serde_json::from_str(r#"{"units": {"a": 0, "b": 1}}"#).unwrap();
        let cfg = run.model_config(&table()).unwrap();
        assert_eq!(cfg.unit_allocation, vec![0, 1]);
        assert_eq!(cfg.units, 2);
        assert_eq!(cfg.diseases, vec!["X".to_string(), "Y".to_string()]);
        assert_eq!(cfg.optimizer, OptimizerSpec::default());
    }

    #[test]
    fn unknown_keys_and_names_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"units": {"a": 0}, "sweeps": 3}"#).is_err());
        let missing: RunConfig = serde_json::from_str(r#"{"units": {"a": 0}}"#).unwrap();
        assert!(matches!(missing.model_config(&table()), Err(DktError::InvalidConfig(_))));
        let extra: RunConfig = serde_json::from_str(r#"{"units": {"a": 0, "b": 0, "c": 1}}"#).unwrap();
        assert!(matches!(extra.model_config(&table()), Err(DktError::UnknownBiomarker(_))));
    }
}

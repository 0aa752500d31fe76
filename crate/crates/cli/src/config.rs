//! JSON run configuration. Every section and key is optional; missing values
//! take the defaults below and command-line flags override them.

use std::fs;
use std::path::{Path, PathBuf};

use kspod::emulator::{CoefficientTheta, WeightThetaRule};
use kspod::metrics::{Bandwidth, EvalOptions, KdeSpec};
use kspod::{DesignRanges, KrigingOptions, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. The training design uses it directly, the held-out design
    /// uses `seed + 1`.
    pub seed: u64,
    pub paths: Paths,
    pub design: DesignSection,
    pub synth: SynthSection,
    pub pod: PodSection,
    pub kriging: KrigingSection,
    pub predict: PredictSection,
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub design: PathBuf,
    pub dataset_dir: PathBuf,
    pub heldout_dir: PathBuf,
    pub model: PathBuf,
    pub prediction_dir: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            design: "design.csv".into(),
            dataset_dir: "data".into(),
            heldout_dir: "heldout".into(),
            model: "model.ksem".into(),
            prediction_dir: "predictions".into(),
            report: "report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    pub dims: usize,
    pub slices: usize,
    pub per_slice: usize,
    /// Physical `[lo, hi]` per dimension. Defaults to the injector ranges for
    /// three dimensions and the unit cube otherwise.
    pub ranges: Option<Vec<[f64; 2]>>,
    /// Number of interior test points used by `pipeline`.
    pub heldout: usize,
}

impl Default for DesignSection {
    fn default() -> Self {
        DesignSection {
            dims: 3,
            slices: 5,
            per_slice: 6,
            ranges: None,
            heldout: 8,
        }
    }
}

impl DesignSection {
    pub fn ranges(&self) -> Result<DesignRanges, CliError> {
        match &self.ranges {
            Some(r) => {
                if r.len() != self.dims {
                    return Err(CliError::Usage(format!(
                        "design.ranges has {} entries for {} dimensions",
                        r.len(),
                        self.dims
                    )));
                }
                DesignRanges::new(r.iter().map(|b| (b[0], b[1])).collect()).map_err(|e| CliError::Usage(e.to_string()))
            }
            None if self.dims == 3 => Ok(DesignRanges::swirl_injector()),
            None => Ok(DesignRanges::unit(self.dims)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub nx: usize,
    pub nr: usize,
    pub length: f64,
    pub wall_radius: f64,
    pub snapshots: usize,
    pub dt: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            nx: 50,
            nr: 50,
            length: 25.0,
            wall_radius: 4.5,
            snapshots: 100,
            dt: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodSection {
    pub centering: bool,
    pub energy_threshold: f64,
    /// Fixed rank; overrides the energy threshold.
    pub rank: Option<usize>,
}

impl Default for PodSection {
    fn default() -> Self {
        PodSection {
            centering: true,
            energy_threshold: 0.99,
            rank: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientThetaKey {
    PerTimeStep,
    SharedPerMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRuleKey {
    CrossValidation,
    Likelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KrigingSection {
    pub nugget: f64,
    pub log_theta_bounds: [f64; 2],
    pub restarts: usize,
    pub coefficient_theta: CoefficientThetaKey,
    pub weight_rule: WeightRuleKey,
    pub weight_theta: Option<f64>,
}

impl Default for KrigingSection {
    fn default() -> Self {
        let k = KrigingOptions::default();
        KrigingSection {
            nugget: k.nugget,
            log_theta_bounds: [k.log_theta_bounds.0, k.log_theta_bounds.1],
            restarts: k.restarts,
            coefficient_theta: CoefficientThetaKey::PerTimeStep,
            weight_rule: WeightRuleKey::CrossValidation,
            weight_theta: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub design: Option<Vec<f64>>,
    /// All snapshots when absent.
    pub time_indices: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub threshold: Option<f64>,
    pub stations: Option<[f64; 2]>,
    /// Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    pub kde_points: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            threshold: None,
            stations: None,
            bandwidth: None,
            kde_points: 128,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn train_options(&self) -> Result<TrainOptions, CliError> {
        let k = &self.kriging;
        Ok(TrainOptions {
            energy_threshold: self.pod.energy_threshold,
            explicit_rank: self.pod.rank,
            centering: self.pod.centering,
            quadrature_weights: None,
            cluster_filter: None,
            ranges: Some(self.design.ranges()?),
            kriging: KrigingOptions {
                nugget: k.nugget,
                log_theta_bounds: (k.log_theta_bounds[0], k.log_theta_bounds[1]),
                restarts: k.restarts,
                theta: None,
            },
            coefficient_theta: match k.coefficient_theta {
                CoefficientThetaKey::PerTimeStep => CoefficientTheta::PerTimeStep,
                CoefficientThetaKey::SharedPerMode => CoefficientTheta::SharedPerMode,
            },
            weight_theta: k.weight_theta,
            weight_rule: match k.weight_rule {
                WeightRuleKey::CrossValidation => WeightThetaRule::CrossValidation,
                WeightRuleKey::Likelihood => WeightThetaRule::Likelihood,
            },
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        let m = &self.metrics;
        EvalOptions {
            threshold: m.threshold,
            stations: m.stations.map(|s| (s[0], s[1])),
            kde: KdeSpec {
                bandwidth: m.bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed),
            },
            kde_points: m.kde_points,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.design.slices * cfg.design.per_slice, 30);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"pod": {"rank": 4}, "kriging": {"weight_rule": "likelihood"}}"#).unwrap();
        assert_eq!(cfg.pod.rank, Some(4));
        assert_eq!(cfg.pod.energy_threshold, 0.99);
        let opts = cfg.train_options().unwrap();
        assert_eq!(opts.explicit_rank, Some(4));
        assert_eq!(opts.weight_rule, WeightThetaRule::Likelihood);
    }

    #[test]
    fn ranges_must_match_dimension() {
        let cfg: RunConfig = serde_json::from_str(r#"{"design": {"dims": 2, "ranges": [[0, 1]]}}"#).unwrap();
        assert!(matches!(cfg.design.ranges(), Err(CliError::Usage(_))));
        let cfg: RunConfig = serde_json::from_str(r#"{"design": {"dims": 2}}"#).unwrap();
        assert_eq!(cfg.design.ranges().unwrap().dims(), 2);
    }
}

//! Layered pipeline configuration: defaults, then a config file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hdrplus_core::align::{AlignmentConfig, Norm};
use hdrplus_core::finish::FinishConfig;
use hdrplus_core::merge::MergeConfig;
use hdrplus_core::NoiseParams;
use serde::{Deserialize, Serialize};

/// Every tunable, optional so layers can be overlaid. Field names double as
/// config-file keys and (with `--`) as flag names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tile_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search_radius: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norms: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimal: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_intermediates: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_lambda_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_lambda_r: Option<f64>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($f:ident),*) => {
        Settings { $($f: $top.$f.or($base.$f)),* }
    };
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Settings> {
        Ok(toml::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Settings::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Values set in `self` win over `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(
            self,
            base,
            ref_index,
            tau,
            s,
            tile_size,
            search_radius,
            norms,
            gain,
            contrast_alpha,
            minimal,
            dump_intermediates,
            threads,
            baseline_lambda_s,
            baseline_lambda_r
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub align: AlignmentConfig,
    pub merge: MergeConfig,
    pub finish: FinishConfig,
    pub baseline: NoiseParams,
    /// Overrides the burst metadata when set.
    pub ref_index: Option<usize>,
    pub threads: Option<usize>,
    pub dump_intermediates: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            align: AlignmentConfig::default(),
            merge: MergeConfig::default(),
            finish: FinishConfig::default(),
            baseline: NoiseParams::DEFAULT_BASELINE,
            ref_index: None,
            threads: None,
            dump_intermediates: false,
        }
    }
}

impl PipelineConfig {
    /// Apply `settings` on top of the defaults and validate the result.
    pub fn resolve(settings: &Settings) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let levels = cfg.align.num_levels();
        if let Some(n) = settings.tile_size {
            if n < 4 || n % 4 != 0 {
                bail!("tile-size {n} must be a multiple of 4");
            }
            // the coarsest level keeps half-size tiles
            cfg.align.tile_sizes = (0..levels).map(|l| if l == 0 { n / 2 } else { n }).collect();
            cfg.merge.tile_size = n;
        }
        if let Some(r) = settings.search_radius {
            cfg.align.search_radii = vec![r; levels];
        }
        if let Some(norms) = &settings.norms {
            if norms.len() != levels {
                bail!(
                    "norms needs {levels} entries (coarsest level first), got {}",
                    norms.len()
                );
            }
            cfg.align.norms = norms
                .iter()
                .map(|&p| Norm::from_power(p).with_context(|| format!("norm {p} must be 1 or 2")))
                .collect::<Result<_>>()?;
        }
        if let Some(t) = settings.tau {
            cfg.merge.tau = t;
        }
        if let Some(s) = settings.s {
            cfg.merge.spatial_strength = s;
        }
        if let Some(g) = settings.gain {
            cfg.finish.gain = g;
        }
        if let Some(a) = settings.contrast_alpha {
            cfg.finish.contrast_alpha = a;
        }
        if let Some(m) = settings.minimal {
            cfg.finish.minimal = m;
        }
        cfg.baseline = NoiseParams {
            lambda_s: settings.baseline_lambda_s.unwrap_or(cfg.baseline.lambda_s),
            lambda_r: settings.baseline_lambda_r.unwrap_or(cfg.baseline.lambda_r),
        };
        cfg.ref_index = settings.ref_index;
        cfg.threads = settings.threads;
        cfg.dump_intermediates = settings.dump_intermediates.unwrap_or(false);

        if cfg.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        cfg.align.validate()?;
        cfg.merge.validate()?;
        cfg.finish.validate()?;
        cfg.baseline.validate()?;
        Ok(cfg)
    }

    /// Fully populated settings reproducing this configuration.
    pub fn to_settings(&self) -> Settings {
        let a = &self.align;
        Settings {
            ref_index: self.ref_index,
            tau: Some(self.merge.tau),
            s: Some(self.merge.spatial_strength),
            tile_size: Some(self.merge.tile_size),
            search_radius: Some(a.search_radii[0]),
            norms: Some(a.norms.iter().map(|n| n.power()).collect()),
            gain: Some(self.finish.gain),
            contrast_alpha: Some(self.finish.contrast_alpha),
            minimal: Some(self.finish.minimal),
            dump_intermediates: Some(self.dump_intermediates),
            threads: self.threads,
            baseline_lambda_s: Some(self.baseline.lambda_s),
            baseline_lambda_r: Some(self.baseline.lambda_r),
        }
    }

    /// Config-file text that resolves back to `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_settings()).expect("settings serialize")
    }
}

/// Defaults, overlaid by the optional config file, overlaid by flags.
pub fn parse_config(file: Option<&Path>, flags: Settings) -> Result<PipelineConfig> {
    let from_file = match file {
        Some(p) => Settings::read(p)?,
        None => Settings::default(),
    };
    PipelineConfig::resolve(&flags.over(from_file))
}

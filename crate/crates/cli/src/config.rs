use std::path::Path;

use anyhow::{Context, Result};
use mvgp_core::eval::ModelSettings;
use mvgp_core::kernels::KernelFamily;
use mvgp_core::mvgp::BasisKind;
use mvgp_core::sampler::ChainConfig;
use mvgp_core::sim::{CountSpec, GeneratorSpec, SimConfig};
use serde::{Deserialize, Serialize};

use crate::ModelFlags;

/// Bad invocation: reported with usage text and exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    #[default]
    Mvgp,
    Bummer,
}

/// `[sim]`: a documented default scenario with optional overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub scenario: Scenario,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub d: Option<usize>,
    pub counts: Option<CountSpec>,
    pub x_range: Option<(f64, f64)>,
    /// Replaces the scenario's generator wholesale.
    pub generator: Option<GeneratorSpec>,
    pub seed: Option<u64>,
}

impl SimSection {
    pub fn resolve(&self, seed_flag: Option<u64>) -> SimConfig {
        let seed = seed_flag.or(self.seed).unwrap_or(1);
        let mut cfg = match self.scenario {
            Scenario::Mvgp => SimConfig::mvgp_default(seed),
            Scenario::Bummer => SimConfig::bummer_default(seed),
        };
        if let Some(v) = self.n_train {
            cfg.n_train = v;
        }
        if let Some(v) = self.n_test {
            cfg.n_test = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.counts {
            cfg.counts = v;
        }
        if let Some(v) = self.x_range {
            cfg.x_range = v;
        }
        if let Some(g) = &self.generator {
            cfg.generator = g.clone();
        }
        cfg
    }
}

/// The whole TOML file; every table is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    /// Folds for `crossval`.
    pub k: Option<usize>,
    pub models: Option<Vec<String>>,
    pub model: ModelSettings,
    pub sim: Option<SimSection>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

pub fn parse_kernel(s: &str) -> Result<KernelFamily> {
    let s = s.trim().to_ascii_lowercase();
    if s == "exponential" {
        return Ok(KernelFamily::Exponential);
    }
    if let Some(nu) = s.strip_prefix("matern:") {
        let nu: f64 = nu
            .parse()
            .map_err(|_| usage(format!("bad Matérn smoothness '{nu}'")))?;
        if !(nu > 0.0) {
            return Err(usage("Matérn smoothness must be positive"));
        }
        return Ok(KernelFamily::Matern { nu });
    }
    Err(usage(format!(
        "unknown kernel '{s}' (expected exponential or matern:<nu>)"
    )))
}

/// Defaults, then the config file, then flags.
pub fn resolve_settings(file: &FileConfig, flags: &ModelFlags, seed: u64) -> Result<ModelSettings> {
    let mut s = file.model;
    if flags.full_scale {
        s.chain = ChainConfig::full_scale(seed);
    }
    s.chain.seed = seed;
    if let Some(v) = flags.chains {
        s.chain.chains = v;
    }
    if let Some(v) = flags.iters {
        s.chain.iterations = v;
    }
    if let Some(v) = flags.burnin {
        s.chain.burn_in = v;
    }
    if let Some(v) = flags.thin {
        s.chain.thin = v;
    }
    // adaptation never outlasts burn-in
    s.chain.adapt_until = s.chain.adapt_until.min(s.chain.burn_in);
    if let Some(v) = flags.knots {
        s.mvgp.n_knots = v;
    }
    if let Some(v) = flags.knot_extend {
        s.mvgp.knot_extend = v;
    }
    if let Some(k) = &flags.kernel {
        s.mvgp.basis = BasisKind::PredictiveProcess {
            kernel: parse_kernel(k)?,
        };
    }
    if flags.overdispersion {
        s.mvgp.overdispersion = true;
    }
    s.chain
        .validate()
        .map_err(|e| usage(e.to_string()))
        .context("chain settings")?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_fill_defaults() {
        let f: FileConfig = toml::from_str(
            "seed = 4\n[model.chain]\niterations = 300\n[model.mvgp]\nn_knots = 12\n",
        )
        .unwrap();
        assert_eq!(f.seed, Some(4));
        assert_eq!(f.model.chain.iterations, 300);
        assert_eq!(f.model.chain.burn_in, ChainConfig::default().burn_in);
        assert_eq!(f.model.mvgp.n_knots, 12);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("sed = 4\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let f: FileConfig = toml::from_str("[model.chain]\niterations = 300\nburn_in = 100\n").unwrap();
        let flags = ModelFlags {
            iters: Some(200),
            burnin: Some(50),
            kernel: Some("matern:1.5".into()),
            ..ModelFlags::default()
        };
        let s = resolve_settings(&f, &flags, 9).unwrap();
        assert_eq!((s.chain.iterations, s.chain.burn_in, s.chain.seed), (200, 50, 9));
        assert!(s.chain.adapt_until <= 50);
        assert_eq!(
            s.mvgp.basis,
            BasisKind::PredictiveProcess {
                kernel: KernelFamily::Matern { nu: 1.5 }
            }
        );
    }

    #[test]
    fn sim_seed_flag_wins() {
        let sec = SimSection {
            seed: Some(3),
            d: Some(4),
            ..SimSection::default()
        };
        assert_eq!(sec.resolve(Some(8)).seed, 8);
        assert_eq!(sec.resolve(None).seed, 3);
        assert_eq!(sec.resolve(None).d, 4);
    }
}

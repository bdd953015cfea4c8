//! Run configuration: a flat kebab-case JSON file, overridden key by key by
//! command-line flags, then by built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use geoflow::trainer::DEFAULT_BETA_GRID;
use geoflow::trainer::DEFAULT_T_IN_GRID;
use geoflow::{FlowConfig, Method, PropagationConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Tar,
    TarN,
    Erm,
    KlTilt,
}

/// Every key may come from the config file or a flag of the same name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    /// Shortcut edges per labeled node for tar-n.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Outer learning rate.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Entropy weight of the inner flow.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Inner step size.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Inner steps per epoch.
    #[arg(long)]
    pub t_in: Option<usize>,
    #[arg(long)]
    pub positivity_floor: Option<f64>,
    #[arg(long)]
    pub max_step_shrinks: Option<u32>,
    #[arg(long)]
    pub clamp_on_exhaustion: Option<bool>,
    /// Feature propagation hops.
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub self_loop_weight: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub impute_grad: Option<bool>,
    #[arg(long)]
    pub q_warm_start: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated inner step counts for `sweep`.
    #[arg(long, value_delimiter = ',')]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_in_grid: Option<Vec<usize>>,
    /// Comma-separated entropy weights for `sweep`.
    #[arg(long, value_delimiter = ',')]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_grid: Option<Vec<f64>>,
    /// Worker threads for `sweep`.
    #[arg(long)]
    pub jobs: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Reads `path`, resolving relative dataset/output paths against its
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Values set in `flags` win over values in `self`.
    pub fn overlay(mut self, flags: &RunConfig) -> Self {
        overlay!(
            self, flags, dataset, out, method, k, epochs, gamma, beta, tau, t_in, positivity_floor,
            max_step_shrinks, clamp_on_exhaustion, hops, self_loop_weight, eval_every, impute_grad,
            q_warm_start, seed, t_in_grid, beta_grid, jobs
        );
        self
    }

    pub fn load(config: Option<&Path>, flags: &RunConfig) -> Result<Self, CliError> {
        let base = match config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(flags))
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("--dataset is required (flag or config key)".into()))
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required (flag or config key)".into()))
    }

    pub fn flow_config(&self) -> FlowConfig {
        let d = FlowConfig::default();
        FlowConfig {
            beta: self.beta.unwrap_or(d.beta),
            tau: self.tau.unwrap_or(d.tau),
            t_in: self.t_in.unwrap_or(d.t_in),
            positivity_floor: self.positivity_floor.unwrap_or(d.positivity_floor),
            max_step_shrinks: self.max_step_shrinks.unwrap_or(d.max_step_shrinks),
            clamp_on_exhaustion: self.clamp_on_exhaustion.unwrap_or(d.clamp_on_exhaustion),
        }
    }

    pub fn prop_config(&self) -> PropagationConfig {
        let d = PropagationConfig::default();
        PropagationConfig {
            hops: self.hops.unwrap_or(d.hops),
            self_loop_weight: self.self_loop_weight.unwrap_or(d.self_loop_weight),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let method = match self.method.unwrap_or(MethodName::Tar) {
            MethodName::Tar => Method::Tar,
            MethodName::TarN => Method::TarN { k: self.k.unwrap_or(3) },
            MethodName::Erm => Method::Erm,
            MethodName::KlTilt => Method::KlTilt,
        };
        if self.k.is_some() && !matches!(method, Method::TarN { .. }) {
            log::warn!("--k only applies to tar-n; ignored");
        }
        Ok(TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            gamma: self.gamma.unwrap_or(d.gamma),
            flow: self.flow_config(),
            prop: self.prop_config(),
            method,
            seed: self.seed.unwrap_or(d.seed),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            impute_grad: self.impute_grad.unwrap_or(d.impute_grad),
            q_warm_start: self.q_warm_start.unwrap_or(d.q_warm_start),
        })
    }

    pub fn t_in_grid(&self) -> Vec<usize> {
        self.t_in_grid.clone().unwrap_or_else(|| DEFAULT_T_IN_GRID.to_vec())
    }

    pub fn beta_grid(&self) -> Vec<f64> {
        self.beta_grid.clone().unwrap_or_else(|| DEFAULT_BETA_GRID.to_vec())
    }
}

/// Fully resolved training settings as flat kebab-case keys.
pub fn config_echo(cfg: &TrainConfig) -> Value {
    let k = match cfg.method {
        Method::TarN { k } => Some(k),
        _ => None,
    };
    json!({
        "method": cfg.method.label(),
        "k": k,
        "epochs": cfg.epochs,
        "gamma": cfg.gamma,
        "beta": cfg.flow.beta,
        "tau": cfg.flow.tau,
        "t-in": cfg.flow.t_in,
        "positivity-floor": cfg.flow.positivity_floor,
        "max-step-shrinks": cfg.flow.max_step_shrinks,
        "clamp-on-exhaustion": cfg.flow.clamp_on_exhaustion,
        "hops": cfg.prop.hops,
        "self-loop-weight": cfg.prop.self_loop_weight,
        "eval-every": cfg.eval_every,
        "impute-grad": cfg.impute_grad,
        "q-warm-start": cfg.q_warm_start,
        "seed": cfg.seed,
    })
}

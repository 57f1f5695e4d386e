//! Training configuration from a flat TOML file plus command-line overrides.

use std::path::Path;

use clap::Args;
use gcma_core::trainer::TrainConfig;

use crate::CliError;

/// Flags mirroring every [`TrainConfig`] field. Values given here override
/// the config file, which overrides the defaults.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigFlags {
    /// Flat TOML file with TrainConfig keys; unknown keys are rejected
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_1: Option<f64>,
    #[arg(long)]
    pub lambda_2: Option<f64>,
    #[arg(long)]
    pub lambda_3: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub p_edge: Option<f64>,
    #[arg(long)]
    pub p_feat: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub lr_pretrain: Option<f64>,
    #[arg(long)]
    pub lr_finetune: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub gat_hidden: Option<usize>,
    #[arg(long)]
    pub gat_heads: Option<usize>,
    /// Comma-separated hidden widths of the autoencoder
    #[arg(long, value_delimiter = ',')]
    pub ae_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub proj_hidden: Option<usize>,
    #[arg(long)]
    pub gae_hidden: Option<usize>,
    #[arg(long)]
    pub epsilon_init: Option<f64>,
    #[arg(long)]
    pub epsilon_trainable: Option<bool>,
    #[arg(long)]
    pub dof: Option<f64>,
    #[arg(long)]
    pub p_refresh: Option<usize>,
    #[arg(long)]
    pub dpeaks_refresh: Option<usize>,
    /// Comma-separated cutoff percentiles voted over by density peaks
    #[arg(long, value_delimiter = ',')]
    pub percentiles: Option<Vec<f64>>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    #[arg(long)]
    pub convergence_patience: Option<usize>,
}

pub fn read_config_file(path: &Path) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

macro_rules! overlay {
    ($flags:expr, $cfg:expr, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigFlags {
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => read_config_file(path)?,
            None => TrainConfig::default(),
        };
        overlay!(
            self, cfg, seed, alpha, beta, gamma, lambda_1, lambda_2, lambda_3, xi, p_edge, p_feat, pretrain_epochs,
            joint_epochs, steps_per_epoch, max_iters, lr_pretrain, lr_finetune, embed_dim, gat_hidden, gat_heads,
            ae_hidden, proj_hidden, gae_hidden, epsilon_init, epsilon_trainable, dof, p_refresh, dpeaks_refresh,
            percentiles, convergence_tol, convergence_patience,
        );
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

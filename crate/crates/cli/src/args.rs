use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use prs_bridge::bridge::{BridgeHyper, LambdaBounds, TauMode, DEFAULT_NU_RATE, DEFAULT_NU_SHAPE};
use prs_bridge::gibbs::{BetaInit, GibbsConfig};
use prs_bridge::simulate::SimConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "prs-bridge", version, about = "Bayesian Bridge polygenic risk scores from GWAS summary statistics")]
pub struct Cli {
    /// Worker threads (default: PRS_BRIDGE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate a dataset with train / ref / tune / val splits.
    Simulate(SimulateArgs),
    /// Fit posterior-mean PRS weights from summary statistics and LD blocks.
    Fit(FitArgs),
    /// Fit every (alpha, drop fraction) cell and select on the tuning split.
    Tune(TuneArgs),
    /// Score a split with a weights file and report R².
    Score(ScoreArgs),
    /// Ridge posterior-mean norms over a prior-sd grid, with and without LD mismatch.
    DemoDivergence(DemoArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Tune(_) => "tune",
            Command::Score(_) => "score",
            Command::DemoDivergence(_) => "demo-divergence",
            Command::Replay(_) => "replay",
        }
    }

    pub fn out_dir(&self) -> &PathBuf {
        match self {
            Command::Simulate(a) => &a.out,
            Command::Fit(a) => &a.out,
            Command::Tune(a) => &a.out,
            Command::Score(a) => &a.out,
            Command::DemoDivergence(a) => &a.out,
            Command::Replay(a) => a.out.as_ref().unwrap_or(&a.manifest),
        }
    }

    pub fn set_out_dir(&mut self, out: PathBuf) {
        match self {
            Command::Simulate(a) => a.out = out,
            Command::Fit(a) => a.out = out,
            Command::Tune(a) => a.out = out,
            Command::Score(a) => a.out = out,
            Command::DemoDivergence(a) => a.out = out,
            Command::Replay(a) => a.out = Some(out),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Simulate(a) => Some(a.seed),
            Command::Fit(a) => Some(a.seed),
            Command::Tune(a) => Some(a.seed),
            Command::Score(_) | Command::DemoDivergence(_) | Command::Replay(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub m_snps: usize,
    /// Block layout: `COUNTxSIZE` or a comma-separated list of sizes.
    #[arg(long, default_value = "10x100")]
    pub blocks: String,
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.01)]
    pub causal_prop: f64,
    #[arg(long, default_value_t = 0.5)]
    pub h2: f64,
    #[arg(long, default_value_t = 5000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_ref: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_tune: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `10x100` or `100,100,50`.
pub fn parse_blocks(spec: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid --blocks {spec:?}; use COUNTxSIZE or SIZE,SIZE,..."));
    let spec = spec.trim();
    if let Some((count, size)) = spec.split_once(['x', 'X']) {
        let count: usize = count.trim().parse().map_err(|_| bad())?;
        let size: usize = size.trim().parse().map_err(|_| bad())?;
        if count == 0 {
            return Err(bad());
        }
        return Ok(vec![size; count]);
    }
    spec.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
        .collect()
}

impl SimulateArgs {
    pub fn to_config(&self) -> CliResult<SimConfig> {
        let cfg = SimConfig {
            m_snps: self.m_snps,
            block_sizes: parse_blocks(&self.blocks)?,
            rho: self.rho,
            n_train: self.n_train,
            n_ref: self.n_ref,
            n_tune: self.n_tune,
            n_val: self.n_val,
            causal_prop: self.causal_prop,
            h2: self.h2,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Chain and prior settings shared by `fit` and `tune`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ChainArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_iter: usize,
    #[arg(long, default_value_t = 500)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub cg_tol: f64,
    /// Default: ten times the block size.
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
    /// Heritability used to initialize (or, with --fix-tau, fix) the global scale.
    #[arg(long, default_value_t = 0.5)]
    pub h2: f64,
    /// Keep tau at its heritability value instead of sampling it.
    #[arg(long)]
    pub fix_tau: bool,
    /// Gamma prior shape on nu = tau^-alpha.
    #[arg(long, default_value_t = DEFAULT_NU_SHAPE)]
    pub nu_shape: f64,
    /// Gamma prior rate on nu.
    #[arg(long, default_value_t = DEFAULT_NU_RATE)]
    pub nu_rate: f64,
    /// Do not clamp the prior scales tau * lambda_j to [1e-6, 1e6].
    #[arg(long)]
    pub no_lambda_clamp: bool,
    /// Start the chain at beta = 0 instead of the marginal statistics.
    #[arg(long)]
    pub zero_init: bool,
}

impl Default for ChainArgs {
    fn default() -> Self {
        let g = GibbsConfig::default();
        Self {
            n_iter: g.n_iter,
            burn_in: g.burn_in,
            thin: g.thin,
            cg_tol: g.cg_tol,
            cg_max_iter: None,
            h2: g.h2_init,
            fix_tau: false,
            nu_shape: DEFAULT_NU_SHAPE,
            nu_rate: DEFAULT_NU_RATE,
            no_lambda_clamp: false,
            zero_init: false,
        }
    }
}

impl ChainArgs {
    pub fn hyper(&self, alpha: f64, m_snps: usize) -> CliResult<BridgeHyper> {
        let tau_mode = if self.fix_tau {
            TauMode::FixedFromHeritability {
                h2: self.h2,
                m_snps: m_snps as u64,
            }
        } else {
            TauMode::Sample
        };
        Ok(BridgeHyper::new(alpha, self.nu_shape, self.nu_rate, tau_mode)?)
    }

    pub fn gibbs(&self, seed: u64, drop_fraction: f64, project: bool) -> CliResult<GibbsConfig> {
        let cfg = GibbsConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            seed,
            drop_fraction,
            h2_init: self.h2,
            lambda_bounds: (!self.no_lambda_clamp).then(LambdaBounds::default),
            init: if self.zero_init { BetaInit::Zero } else { BetaInit::Summary },
            project,
            update_local: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Summary statistics TSV (snp_id, beta_sum, n_gwas).
    #[arg(long)]
    pub sumstats: PathBuf,
    /// LD directory (partition.tsv plus block files).
    #[arg(long)]
    pub ld: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Fraction of nonzero LD eigenpairs dropped per block.
    #[arg(long, default_value_t = 0.0)]
    pub drop_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Skip projecting the statistics onto the LD eigenspace. Only for
    /// demonstrating the mismatch pathology.
    #[arg(long)]
    pub no_project: bool,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TuneArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
    pub drop_fractions: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Ref,
    Tune,
    Val,
}

impl From<SplitArg> for prs_bridge::simulate::Split {
    fn from(s: SplitArg) -> Self {
        use prs_bridge::simulate::Split;
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Ref => Split::Ref,
            SplitArg::Tune => Split::Tune,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Weights TSV (snp_id, posterior_mean_beta).
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub weights: Option<PathBuf>,
    /// Score with the dataset's true effects.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DemoArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub sigma0: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A run_manifest.json written by an earlier command.
    pub manifest: PathBuf,
    /// Output directory (default: the recorded one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

//! Block Gibbs sampler for the Bridge prior with summary-statistics
//! likelihood `beta_sum | beta ~ N(D beta, D / N)`.
//!
//! One iteration updates, in order, the global scale (`nu`, collapsed over
//! the local scales), the local scales `lambda_j`, and then `beta` block by
//! block from `N(Phi^-1 N beta_sum, Phi^-1)`, `Phi = N D + tau^-2 Lambda^-2`.
//! The Gaussian draw perturbs the right-hand side and solves `Phi beta = b`
//! with conjugate gradients preconditioned by the prior precision.
//!
//! Every random draw comes from a stream keyed by (seed, iteration, block),
//! so results do not depend on the rayon pool size.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    sample_local_shrinkage, sample_nu_from_sum, tau_from_heritability, BridgeHyper, LambdaBounds,
    ShrinkageState, TauMode,
};
use crate::error::{Error, Result};
use crate::ld::LdBlock;
use crate::linalg::{cg_solve, check_drop_fraction, DiagonalPreconditioner, DEFAULT_CG_TOL};
use crate::rng::{substream, Purpose};
use crate::summary::SummaryStats;

/// Starting value of `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaInit {
    Zero,
    /// The (projected) marginal statistics. Avoids the all-zero start, from
    /// which small-alpha chains shrink every effect and `tau` towards zero.
    Summary,
}

/// Largest block [`direct_sample_beta`] will factor densely.
pub const DIRECT_SAMPLE_MAX_DIM: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub cg_tol: f64,
    /// Defaults to ten times the block dimension.
    pub cg_max_iter: Option<usize>,
    pub seed: u64,
    /// Fraction of nonzero LD eigenpairs removed per block before fitting.
    pub drop_fraction: f64,
    /// Heritability used to initialize `tau`.
    pub h2_init: f64,
    /// Bounds on each prior scale `tau * lambda_j`; `None` disables them.
    pub lambda_bounds: Option<LambdaBounds>,
    pub init: BetaInit,
    /// Project `beta_sum` onto the retained LD eigenspace up front. Turning
    /// this off reproduces the mismatch pathology.
    pub project: bool,
    /// Test hook: when false the local scales stay at their initial value.
    pub update_local: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            n_iter: 1000,
            burn_in: 500,
            thin: 1,
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iter: None,
            seed: 0,
            drop_fraction: 0.0,
            h2_init: 0.5,
            lambda_bounds: Some(LambdaBounds::default()),
            init: BetaInit::Summary,
            project: true,
            update_local: true,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::invalid(
                "burn_in",
                format!("{} must be below n_iter {}", self.burn_in, self.n_iter),
            ));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin", "must be at least 1"));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::invalid("cg_tol", format!("{} must be positive", self.cg_tol)));
        }
        if !(self.h2_init > 0.0 && self.h2_init < 1.0) {
            return Err(Error::invalid("h2_init", format!("{} is outside (0, 1)", self.h2_init)));
        }
        check_drop_fraction(self.drop_fraction)
    }

    /// Number of retained draws, `floor((n_iter - burn_in) / thin)`.
    pub fn n_samples(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Options of a single Gaussian block draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    pub tol: f64,
    pub max_iter: Option<usize>,
}

impl From<&GibbsConfig> for CgSettings {
    fn from(cfg: &GibbsConfig) -> Self {
        Self {
            tol: cfg.cg_tol,
            max_iter: cfg.cg_max_iter,
        }
    }
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_CG_TOL,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta: Vec<DVector<f64>>,
    pub shrinkage: ShrinkageState,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub tau: f64,
    pub beta_norm: f64,
    pub max_cg_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub snp_ids: Vec<String>,
    /// Mean of the retained draws; these are the PRS weights.
    pub mean_beta: DVector<f64>,
    pub n_samples: usize,
    pub diagnostics: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct BlockDraw {
    pub beta: DVector<f64>,
    pub cg_iterations: usize,
}

/// `v -> D v` for one block, dense when that is cheaper than two passes
/// over the eigenvectors.
enum LdOperator<'a> {
    Dense(DMatrix<f64>),
    LowRank(&'a LdBlock),
}

impl<'a> LdOperator<'a> {
    fn new(block: &'a LdBlock) -> Self {
        if 2 * block.rank() > block.full_dim {
            LdOperator::Dense(block.ld_matrix())
        } else {
            LdOperator::LowRank(block)
        }
    }

    fn apply(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            LdOperator::Dense(d) => out.gemv(1.0, d, v, 0.0),
            LdOperator::LowRank(block) => block.apply_ld(v, out),
        }
    }
}

fn check_block_inputs(block: &LdBlock, beta_sum: &DVector<f64>, lambda: &[f64], tau: f64) -> Result<()> {
    if beta_sum.len() != block.full_dim {
        return Err(Error::DimensionMismatch {
            context: "block beta_sum",
            expected: block.full_dim,
            found: beta_sum.len(),
        });
    }
    if lambda.len() != block.full_dim {
        return Err(Error::DimensionMismatch {
            context: "block local scales",
            expected: block.full_dim,
            found: lambda.len(),
        });
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("tau", format!("{tau} must be positive and finite")));
    }
    if lambda.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::NonFinite("local scales"));
    }
    Ok(())
}

fn prior_scales(tau: f64, lambda: &[f64]) -> DVector<f64> {
    DVector::from_iterator(lambda.len(), lambda.iter().map(|l| tau * l))
}

/// One draw of a block's `beta` from its Gaussian full conditional:
/// `b = N beta_sum + sqrt(N) D^(1/2) eta + (tau Lambda)^-1 delta`, then
/// `Phi beta = b` by CG with preconditioner `M = tau^-2 Lambda^-2`.
pub fn sample_beta_block<R: Rng + ?Sized>(
    block: &LdBlock,
    beta_sum_proj: &DVector<f64>,
    tau: f64,
    lambda: &[f64],
    n_gwas: u64,
    cg: CgSettings,
    rng: &mut R,
) -> Result<BlockDraw> {
    sample_beta_with(&LdOperator::new(block), block, beta_sum_proj, tau, lambda, n_gwas, cg, rng)
}

#[allow(clippy::too_many_arguments)]
fn sample_beta_with<R: Rng + ?Sized>(
    op: &LdOperator<'_>,
    block: &LdBlock,
    beta_sum_proj: &DVector<f64>,
    tau: f64,
    lambda: &[f64],
    n_gwas: u64,
    cg: CgSettings,
    rng: &mut R,
) -> Result<BlockDraw> {
    check_block_inputs(block, beta_sum_proj, lambda, tau)?;
    let p = block.full_dim;
    let n = n_gwas as f64;
    let scales = prior_scales(tau, lambda);

    let eta = DVector::from_fn(block.rank(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let delta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut b = block.sqrt_ld_mul(&eta) * n.sqrt();
    b.axpy(n, beta_sum_proj, 1.0);
    b += delta.component_div(&scales);

    let precision = scales.map(|s| 1.0 / (s * s));
    let apply_phi = |v: &DVector<f64>, out: &mut DVector<f64>| {
        op.apply(v, out);
        *out *= n;
        out.zip_apply(&precision.component_mul(v), |o, pv| *o += pv);
    };
    let precond = DiagonalPreconditioner::new(scales.clone())?;
    let max_iter = cg.max_iter.unwrap_or(10 * p).max(1);
    let sol = cg_solve(apply_phi, &b, &precond, cg.tol, max_iter)?;
    Ok(BlockDraw {
        beta: sol.x,
        cg_iterations: sol.iterations,
    })
}

/// Dense `Phi = N D + tau^-2 Lambda^-2`.
pub fn posterior_precision(block: &LdBlock, tau: f64, lambda: &[f64], n_gwas: u64) -> DMatrix<f64> {
    let mut phi = block.ld_matrix() * n_gwas as f64;
    for (j, l) in lambda.iter().enumerate() {
        let s = tau * l;
        phi[(j, j)] += 1.0 / (s * s);
    }
    phi
}

/// Exact draw from the same conditional using a dense Cholesky factor of
/// `Phi`. Used as a reference for [`sample_beta_block`].
pub fn direct_sample_beta<R: Rng + ?Sized>(
    block: &LdBlock,
    beta_sum_proj: &DVector<f64>,
    tau: f64,
    lambda: &[f64],
    n_gwas: u64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_block_inputs(block, beta_sum_proj, lambda, tau)?;
    if block.full_dim > DIRECT_SAMPLE_MAX_DIM {
        return Err(Error::invalid(
            "block dimension",
            format!("{} exceeds the dense limit {DIRECT_SAMPLE_MAX_DIM}", block.full_dim),
        ));
    }
    let phi = posterior_precision(block, tau, lambda, n_gwas);
    let chol = phi.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let mean = chol.solve(&(beta_sum_proj * n_gwas as f64));
    let w = DVector::from_fn(block.full_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    // L^-T w has covariance (L L^T)^-1
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(mean + noise)
}

/// Single-configuration chain over a set of LD blocks.
pub struct GibbsSampler {
    blocks: Vec<LdBlock>,
    beta_sum: Vec<DVector<f64>>,
    snp_ids: Vec<String>,
    n_gwas: u64,
    hyper: BridgeHyper,
    cfg: GibbsConfig,
    state: ChainState,
    sum_beta: Vec<DVector<f64>>,
    n_kept: usize,
    diagnostics: Vec<IterationDiagnostics>,
}

impl GibbsSampler {
    /// Aligns statistics to blocks, applies `cfg.drop_fraction` and (unless
    /// disabled) the projection, and initializes `beta` per `cfg.init`,
    /// `lambda = 1` and `tau` from the heritability anchor.
    pub fn new(blocks: &[LdBlock], stats: &SummaryStats, hyper: BridgeHyper, cfg: GibbsConfig) -> Result<Self> {
        hyper.validate()?;
        cfg.validate()?;
        let raw = stats.split_by_blocks(blocks)?;
        let blocks: Vec<LdBlock> = blocks
            .iter()
            .map(|b| b.apply_truncation(cfg.drop_fraction))
            .collect::<Result<_>>()?;
        let beta_sum = if cfg.project {
            blocks
                .iter()
                .zip(&raw)
                .map(|(b, v)| b.project(v))
                .collect::<Result<Vec<_>>>()?
        } else {
            raw
        };

        let m = stats.len();
        let tau = match hyper.tau_mode {
            TauMode::Sample => tau_from_heritability(cfg.h2_init, m as u64, hyper.alpha)?,
            TauMode::FixedFromHeritability { h2, m_snps } => tau_from_heritability(h2, m_snps, hyper.alpha)?,
        };
        let state = ChainState {
            beta: match cfg.init {
                BetaInit::Zero => blocks.iter().map(|b| DVector::zeros(b.full_dim)).collect(),
                BetaInit::Summary => beta_sum.clone(),
            },
            shrinkage: ShrinkageState::from_tau(tau, hyper.alpha, vec![1.0; m]),
            iteration: 0,
        };
        let sum_beta = blocks.iter().map(|b| DVector::zeros(b.full_dim)).collect();
        Ok(Self {
            blocks,
            beta_sum,
            snp_ids: stats.snp_ids.clone(),
            n_gwas: stats.n_gwas,
            hyper,
            cfg,
            state,
            sum_beta,
            n_kept: 0,
            diagnostics: Vec::new(),
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn config(&self) -> &GibbsConfig {
        &self.cfg
    }

    /// Blocks after truncation.
    pub fn blocks(&self) -> &[LdBlock] {
        &self.blocks
    }

    /// Per-block statistics the chain conditions on (projected if enabled).
    pub fn block_statistics(&self) -> &[DVector<f64>] {
        &self.beta_sum
    }

    pub fn diagnostics(&self) -> &[IterationDiagnostics] {
        &self.diagnostics
    }

    /// Overrides the local scales (for frozen-scale experiments).
    pub fn set_local_scales(&mut self, lambda: Vec<f64>) -> Result<()> {
        if lambda.len() != self.snp_ids.len() {
            return Err(Error::DimensionMismatch {
                context: "local scales",
                expected: self.snp_ids.len(),
                found: lambda.len(),
            });
        }
        self.state.shrinkage.lambda = lambda;
        Ok(())
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .map(|b| {
                let start = acc;
                acc += b.full_dim;
                start
            })
            .collect()
    }

    /// Runs one full sweep; errors carry the iteration index.
    pub fn step(&mut self) -> Result<IterationDiagnostics> {
        let iteration = self.state.iteration + 1;
        self.sweep(iteration).map_err(|e| Error::Chain {
            iteration,
            source: Box::new(e),
        })
    }

    fn sweep(&mut self, iteration: usize) -> Result<IterationDiagnostics> {
        let seed = self.cfg.seed;
        let it = iteration as u64;
        let alpha = self.hyper.alpha;

        // the first sweep keeps the heritability-anchored tau
        if matches!(self.hyper.tau_mode, TauMode::Sample) && iteration > 1 {
            let block_sums: Vec<f64> = self
                .state
                .beta
                .par_iter()
                .map(|b| b.iter().map(|v| v.abs().powf(alpha)).sum::<f64>())
                .collect();
            let total: f64 = block_sums.iter().sum();
            let mut rng = substream(seed, Purpose::GlobalScale, it, 0);
            let (nu, _) = sample_nu_from_sum(self.snp_ids.len(), total, &self.hyper, &mut rng)?;
            self.state.shrinkage = ShrinkageState::from_nu(nu, alpha, std::mem::take(&mut self.state.shrinkage.lambda));
        }
        let tau = self.state.shrinkage.tau;
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::NonFinite("global scale tau"));
        }

        let offsets = self.offsets();
        if self.cfg.update_local {
            let bounds = self.cfg.lambda_bounds;
            let lambda: Vec<Vec<f64>> = self
                .state
                .beta
                .par_iter()
                .enumerate()
                .map(|(k, beta)| {
                    let mut rng = substream(seed, Purpose::LocalScale, it, k as u64);
                    beta.iter()
                        .map(|&bj| sample_local_shrinkage(bj, tau, alpha, bounds.as_ref(), &mut rng))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            self.state.shrinkage.lambda = lambda.concat();
        }

        let cg = CgSettings::from(&self.cfg);
        let lambda_all = &self.state.shrinkage.lambda;
        let draws: Vec<BlockDraw> = self
            .blocks
            .par_iter()
            .zip(self.beta_sum.par_iter())
            .enumerate()
            .map(|(k, (block, bsum))| {
                let mut rng = substream(seed, Purpose::BetaDraw, it, k as u64);
                let lambda = &lambda_all[offsets[k]..offsets[k] + block.full_dim];
                sample_beta_block(block, bsum, tau, lambda, self.n_gwas, cg, &mut rng)
            })
            .collect::<Result<_>>()?;

        let max_cg_iters = draws.iter().map(|d| d.cg_iterations).max().unwrap_or(0);
        self.state.beta = draws.into_iter().map(|d| d.beta).collect();
        self.state.iteration = iteration;
        let beta_norm = self.state.beta.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();

        if iteration > self.cfg.burn_in && (iteration - self.cfg.burn_in).is_multiple_of(self.cfg.thin) {
            for (acc, b) in self.sum_beta.iter_mut().zip(&self.state.beta) {
                *acc += b;
            }
            self.n_kept += 1;
        }

        let diag = IterationDiagnostics {
            iteration,
            tau,
            beta_norm,
            max_cg_iters,
        };
        self.diagnostics.push(diag);
        Ok(diag)
    }

    /// Runs the remaining iterations up to `n_iter`.
    pub fn run(mut self) -> Result<PosteriorSummary> {
        while self.state.iteration < self.cfg.n_iter {
            self.step()?;
        }
        Ok(self.summary())
    }

    /// Posterior mean over the draws retained so far.
    pub fn summary(&self) -> PosteriorSummary {
        let m = self.snp_ids.len();
        let mut mean = DVector::zeros(m);
        if self.n_kept > 0 {
            let mut row = 0;
            for acc in &self.sum_beta {
                mean.rows_mut(row, acc.len()).copy_from(&(acc / self.n_kept as f64));
                row += acc.len();
            }
        }
        PosteriorSummary {
            snp_ids: self.snp_ids.clone(),
            mean_beta: mean,
            n_samples: self.n_kept,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Fits one configuration and returns its posterior summary.
pub fn run_chain(
    blocks: &[LdBlock],
    stats: &SummaryStats,
    hyper: BridgeHyper,
    cfg: GibbsConfig,
) -> Result<PosteriorSummary> {
    GibbsSampler::new(blocks, stats, hyper, cfg)?.run()
}

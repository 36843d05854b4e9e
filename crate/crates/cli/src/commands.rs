use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::DVector;

use prs_bridge::bridge::BridgeHyper;
use prs_bridge::gibbs::{GibbsConfig, GibbsSampler, IterationDiagnostics, PosteriorSummary};
use prs_bridge::ld::{estimate_ld_block, read_ld_dir, LdBlock};
use prs_bridge::rng::{derive_seed, Purpose};
use prs_bridge::score::{compute_prs, prediction_r2, tune, write_tuning_report, EvalData, TuningGrid, Weights};
use prs_bridge::simulate::{read_column_tsv, read_manifest, read_split, simulate, write_dataset, Split};
use prs_bridge::summary::{ridge_posterior_mean, SummaryStats};

use crate::args::{Command, DemoArgs, FitArgs, ScoreArgs, SimulateArgs, TuneArgs};
use crate::manifest::RunManifest;
use crate::{CliError, CliResult};

pub const WEIGHTS_FILE: &str = "weights.tsv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const TUNING_REPORT_FILE: &str = "tuning_report.csv";
pub const SCORES_FILE: &str = "scores.tsv";
pub const SCORE_REPORT_FILE: &str = "score_report.csv";
pub const DIVERGENCE_FILE: &str = "divergence.csv";

#[derive(Debug, Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Runs one command and writes its run manifest.
pub fn run_command(cmd: &Command, threads: usize) -> CliResult<()> {
    if let Command::Replay(r) = cmd {
        let recorded = RunManifest::read(&r.manifest)?;
        let mut inner = recorded.config;
        if matches!(inner, Command::Replay(_)) {
            return Err(CliError::Usage("a replay manifest cannot be replayed".into()));
        }
        if let Some(out) = &r.out {
            inner.set_out_dir(out.clone());
        }
        info!("replaying {} from {}", inner.name(), r.manifest.display());
        return run_command(&inner, threads);
    }

    let start = Instant::now();
    let out = cmd.out_dir().clone();
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let io = match cmd {
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Tune(a) => cmd_tune(a)?,
        Command::Score(a) => cmd_score(a)?,
        Command::DemoDivergence(a) => cmd_demo_divergence(a)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    let manifest = RunManifest {
        command_name: cmd.name().into(),
        config: cmd.clone(),
        seed: cmd.seed(),
        inputs: io.inputs,
        outputs: io.outputs,
        threads,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let path = manifest.write(&out)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(CliError::io(path))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(CliError::io(path))?))
}

pub fn read_sumstats(path: &Path) -> CliResult<SummaryStats> {
    Ok(SummaryStats::read_tsv(open(path)?)?)
}

pub fn read_weights(path: &Path) -> CliResult<Weights> {
    Ok(Weights::read_tsv(open(path)?)?)
}

fn write_weights(path: &Path, w: &Weights) -> CliResult<()> {
    let mut f = create(path)?;
    w.write_tsv(&mut f).map_err(CliError::io(path))?;
    finish(f, path)
}

fn write_diagnostics(path: &Path, diags: &[IterationDiagnostics]) -> CliResult<()> {
    let mut f = create(path)?;
    let e = CliError::io(path);
    (|| {
        writeln!(f, "iteration,tau,beta_norm,max_cg_iters")?;
        for d in diags {
            writeln!(f, "{},{:e},{:e},{}", d.iteration, d.tau, d.beta_norm, d.max_cg_iters)?;
        }
        f.flush()
    })()
    .map_err(e)
}

/// Runs one chain, logging every 100 iterations.
pub fn fit_chain(blocks: &[LdBlock], stats: &SummaryStats, hyper: BridgeHyper, cfg: GibbsConfig) -> CliResult<PosteriorSummary> {
    let n_iter = cfg.n_iter;
    let mut sampler = GibbsSampler::new(blocks, stats, hyper, cfg)?;
    for _ in 0..n_iter {
        let d = sampler.step()?;
        if d.iteration % 100 == 0 {
            info!(
                "iteration {}/{}: tau {:.3e}, |beta| {:.3e}, max CG iterations {}",
                d.iteration, n_iter, d.tau, d.beta_norm, d.max_cg_iters
            );
        }
    }
    Ok(sampler.summary())
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<Io> {
    let cfg = a.to_config()?;
    let ds = simulate(&cfg)?;
    let manifest = write_dataset(&a.out, &ds)?;
    info!("simulated {} SNPs in {} blocks into {}", cfg.m_snps, cfg.block_sizes.len(), a.out.display());
    let mut outputs = vec![a.out.join(prs_bridge::simulate::MANIFEST_FILE)];
    outputs.extend(manifest.splits.iter().map(|s| a.out.join(&s.genotype_file)));
    outputs.push(a.out.join(&manifest.sumstats_file));
    outputs.push(a.out.join(&manifest.ld_dir));
    Ok(Io {
        inputs: vec![],
        outputs,
    })
}

fn cmd_fit(a: &FitArgs) -> CliResult<Io> {
    if a.no_project {
        eprintln!(
            "warning: --no-project leaves summary statistics outside the LD reference eigenspace; \
             with a mismatched reference the posterior can diverge"
        );
    }
    let stats = read_sumstats(&a.sumstats)?;
    let (_, blocks) = read_ld_dir(&a.ld)?;
    let hyper = a.chain.hyper(a.alpha, stats.len())?;
    let cfg = a.chain.gibbs(a.seed, a.drop_fraction, !a.no_project)?;
    let summary = fit_chain(&blocks, &stats, hyper, cfg)?;

    let weights_path = a.out.join(WEIGHTS_FILE);
    let diag_path = a.out.join(DIAGNOSTICS_FILE);
    write_weights(&weights_path, &Weights::new(summary.snp_ids, summary.mean_beta)?)?;
    write_diagnostics(&diag_path, &summary.diagnostics)?;
    Ok(Io {
        inputs: vec![a.sumstats.clone(), a.ld.clone()],
        outputs: vec![weights_path, diag_path],
    })
}

fn cmd_tune(a: &TuneArgs) -> CliResult<Io> {
    let manifest = read_manifest(&a.dataset)?;
    let stats = read_sumstats(&a.dataset.join(&manifest.sumstats_file))?;
    let (_, blocks) = read_ld_dir(&a.dataset.join(&manifest.ld_dir))?;
    let (snp_ids, _) = read_column_tsv(&a.dataset.join(&manifest.true_beta_file))?;
    let tune_split = read_split(&a.dataset, &manifest, Split::Tune)?;
    let val_split = read_split(&a.dataset, &manifest, Split::Val)?;
    let grid = TuningGrid {
        alphas: a.alphas.clone(),
        drop_fractions: a.drop_fractions.clone(),
    };
    grid.validate()?;
    // validate the chain settings once up front
    a.chain.gibbs(a.seed, 0.0, true)?;

    let fit = |cell: &prs_bridge::score::TuningCell| -> prs_bridge::Result<Weights> {
        let hyper = a.chain.hyper(cell.alpha, stats.len()).map_err(core_error)?;
        let seed = derive_seed(a.seed, Purpose::TuningCell, cell.index as u64);
        let cfg = a.chain.gibbs(seed, cell.drop_fraction, true).map_err(core_error)?;
        let s = prs_bridge::gibbs::run_chain(&blocks, &stats, hyper, cfg)?;
        info!("cell alpha={} drop={} done", cell.alpha, cell.drop_fraction);
        Weights::new(s.snp_ids, s.mean_beta)
    };
    let tune_data = EvalData {
        genotypes: &tune_split.genotypes,
        phenotype: &tune_split.phenotype,
        snp_ids: &snp_ids,
    };
    let val_data = EvalData {
        genotypes: &val_split.genotypes,
        phenotype: &val_split.phenotype,
        snp_ids: &snp_ids,
    };
    let result = tune(&grid, fit, tune_data, val_data)?;
    info!(
        "selected alpha={} drop_fraction={}, validation R2 {:.4}",
        result.selected.alpha, result.selected.drop_fraction, result.validation_r2
    );

    let report_path = a.out.join(TUNING_REPORT_FILE);
    let mut f = create(&report_path)?;
    write_tuning_report(&mut f, &result).map_err(CliError::io(&report_path))?;
    finish(f, &report_path)?;
    let weights_path = a.out.join(WEIGHTS_FILE);
    write_weights(&weights_path, &result.selected_weights)?;
    Ok(Io {
        inputs: vec![a.dataset.clone()],
        outputs: vec![report_path, weights_path],
    })
}

fn core_error(e: CliError) -> prs_bridge::Error {
    match e {
        CliError::Core(e) => e,
        other => prs_bridge::Error::Format(other.to_string()),
    }
}

fn cmd_score(a: &ScoreArgs) -> CliResult<Io> {
    let manifest = read_manifest(&a.dataset)?;
    let split: Split = a.split.into();
    let data = read_split(&a.dataset, &manifest, split)?;
    let (snp_ids, true_beta) = read_column_tsv(&a.dataset.join(&manifest.true_beta_file))?;
    let mut inputs = vec![a.dataset.clone()];
    let weights = match &a.weights {
        Some(path) => {
            inputs.push(path.clone());
            read_weights(path)?
        }
        None => Weights::new(snp_ids.clone(), DVector::from_vec(true_beta))?,
    };
    let scores = compute_prs(&data.genotypes, &snp_ids, &weights)?;
    let r2 = prediction_r2(&scores, &data.phenotype);
    println!("{} R2 = {r2:.6}", split.name());

    let scores_path = a.out.join(SCORES_FILE);
    let mut f = create(&scores_path)?;
    (|| {
        writeln!(f, "individual\tscore")?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(f, "{}{i}\t{s:e}", split.name())?;
        }
        Ok(())
    })()
    .map_err(CliError::io(&scores_path))?;
    finish(f, &scores_path)?;

    let report_path = a.out.join(SCORE_REPORT_FILE);
    let mut f = create(&report_path)?;
    writeln!(f, "split,n,r2\n{},{},{r2}", split.name(), scores.len()).map_err(CliError::io(&report_path))?;
    finish(f, &report_path)?;
    Ok(Io {
        inputs,
        outputs: vec![scores_path, report_path],
    })
}

/// One row of the divergence CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergencePoint {
    pub sigma0: f64,
    pub log10_norm: f64,
    pub mode: &'static str,
}

pub const MODE_MATCHED: &str = "matched";
pub const MODE_UNPROJECTED: &str = "mismatched-unprojected";
pub const MODE_PROJECTED: &str = "mismatched-projected";

/// Ridge posterior-mean norms (over all blocks) for the three LD settings:
/// LD from the training genotypes, and reference LD with and without
/// projecting the statistics.
pub fn divergence_curves(
    stats: &SummaryStats,
    matched: &[LdBlock],
    reference: &[LdBlock],
    sigma0: &[f64],
) -> CliResult<Vec<DivergencePoint>> {
    if sigma0.is_empty() || sigma0[0] <= 0.0 || sigma0.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Usage("--sigma0 must be positive and strictly increasing".into()));
    }
    let mut rows = Vec::new();
    for (mode, blocks, project) in [
        (MODE_MATCHED, matched, false),
        (MODE_UNPROJECTED, reference, false),
        (MODE_PROJECTED, reference, true),
    ] {
        let per_block: Vec<SummaryStats> = {
            let mut offset = 0;
            blocks
                .iter()
                .map(|b| {
                    let s = stats.for_block(b, offset);
                    offset += b.full_dim;
                    s
                })
                .collect::<prs_bridge::Result<_>>()?
        };
        for &s in sigma0 {
            let mut sq = 0.0;
            for (b, st) in blocks.iter().zip(&per_block) {
                sq += ridge_posterior_mean(st, b, s, project)?.norm_squared();
            }
            rows.push(DivergencePoint {
                sigma0: s,
                log10_norm: 0.5 * sq.log10(),
                mode,
            });
        }
    }
    Ok(rows)
}

fn cmd_demo_divergence(a: &DemoArgs) -> CliResult<Io> {
    let manifest = read_manifest(&a.dataset)?;
    let stats = read_sumstats(&a.dataset.join(&manifest.sumstats_file))?;
    let (partition, reference) = read_ld_dir(&a.dataset.join(&manifest.ld_dir))?;
    let train = read_split(&a.dataset, &manifest, Split::Train)?;
    let matched: Vec<LdBlock> = partition
        .blocks()
        .iter()
        .map(|span| {
            let g = train.genotypes.columns(span.range.start, span.range.len()).clone_owned();
            estimate_ld_block(span.block_id, stats.snp_ids[span.range.clone()].to_vec(), &g)
        })
        .collect::<prs_bridge::Result<_>>()?;
    let rows = divergence_curves(&stats, &matched, &reference, &a.sigma0)?;

    let path = a.out.join(DIVERGENCE_FILE);
    let mut f = create(&path)?;
    (|| {
        writeln!(f, "sigma0,log10_norm,mode")?;
        for r in &rows {
            writeln!(f, "{},{},{}", r.sigma0, r.log10_norm, r.mode)?;
        }
        Ok(())
    })()
    .map_err(CliError::io(&path))?;
    finish(f, &path)?;
    Ok(Io {
        inputs: vec![a.dataset.clone()],
        outputs: vec![path],
    })
}

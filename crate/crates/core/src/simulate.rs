//! Synthetic datasets with known truth: AR(1) LD blocks, Gaussian
//! genotypes, spike-and-slab effects and standardized phenotypes, drawn
//! independently for the train / reference / tuning / validation splits.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ld::{estimate_ld_block, standardize_genotypes, write_ld_dir, BlockPartition, LdBlock};
use crate::rng::{substream, Purpose, StreamRng};
use crate::summary::{compute_summary_stats, SummaryStats};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUE_BETA_FILE: &str = "true_beta.tsv";
pub const SUMSTATS_FILE: &str = "sumstats.tsv";
pub const LD_DIR: &str = "ld";
const GENOTYPE_FORMAT: &str = "f64-le-row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub m_snps: usize,
    pub block_sizes: Vec<usize>,
    /// Within-block AR(1) correlation.
    pub rho: f64,
    pub n_train: usize,
    pub n_ref: usize,
    pub n_tune: usize,
    pub n_val: usize,
    /// Probability that a SNP is causal.
    pub causal_prop: f64,
    pub h2: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m_snps: 1000,
            block_sizes: vec![100; 10],
            rho: 0.9,
            n_train: 5000,
            n_ref: 50,
            n_tune: 1000,
            n_val: 2000,
            causal_prop: 0.01,
            h2: 0.5,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(Error::invalid("block_sizes", "must be non-empty and positive"));
        }
        let total: usize = self.block_sizes.iter().sum();
        if total != self.m_snps {
            return Err(Error::invalid(
                "block_sizes",
                format!("sum {total} differs from m_snps {}", self.m_snps),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", format!("{} is outside [0, 1)", self.rho)));
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_ref", self.n_ref),
            ("n_tune", self.n_tune),
            ("n_val", self.n_val),
        ] {
            if n < 2 {
                return Err(Error::invalid(name, format!("{n} must be at least 2")));
            }
        }
        if !(self.causal_prop > 0.0 && self.causal_prop <= 1.0) {
            return Err(Error::invalid("causal_prop", format!("{} is outside (0, 1]", self.causal_prop)));
        }
        if !(self.h2 > 0.0 && self.h2 < 1.0) {
            return Err(Error::invalid("h2", format!("{} is outside (0, 1)", self.h2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Ref,
    Tune,
    Val,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Ref, Split::Tune, Split::Val];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Ref => "ref",
            Split::Tune => "tune",
            Split::Val => "val",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    fn size(self, cfg: &SimConfig) -> usize {
        match self {
            Split::Train => cfg.n_train,
            Split::Ref => cfg.n_ref,
            Split::Tune => cfg.n_tune,
            Split::Val => cfg.n_val,
        }
    }
}

/// Standardized genotypes and phenotype of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub split: Split,
    pub genotypes: DMatrix<f64>,
    pub phenotype: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub config: SimConfig,
    pub snp_ids: Vec<String>,
    pub true_beta: DVector<f64>,
    pub true_ld: Vec<DMatrix<f64>>,
    pub splits: Vec<SplitData>,
}

pub fn snp_id(j: usize) -> String {
    format!("snp{j:06}")
}

pub fn ar1_correlation(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Per-block AR(1) correlation matrices.
pub fn gen_ld_truth(cfg: &SimConfig) -> Result<Vec<DMatrix<f64>>> {
    if !(0.0..1.0).contains(&cfg.rho) {
        return Err(Error::invalid("rho", format!("{} is outside [0, 1)", cfg.rho)));
    }
    Ok(cfg.block_sizes.iter().map(|&p| ar1_correlation(p, cfg.rho)).collect())
}

/// `n` rows i.i.d. `N(0, blockdiag(ld_truth))`, then column-standardized.
/// Each block gets its own stream seeded from `rng`.
pub fn gen_genotypes<R: RngCore + ?Sized>(ld_truth: &[DMatrix<f64>], n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::invalid("n", "need at least two individuals"));
    }
    let seeds: Vec<u64> = ld_truth.iter().map(|_| rng.next_u64()).collect();
    let pieces: Vec<DMatrix<f64>> = ld_truth
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(d, &s)| {
            let chol = d.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
            let mut block_rng = StreamRng::seed_from_u64(s);
            let z = DMatrix::from_fn(n, d.nrows(), |_, _| block_rng.sample::<f64, _>(StandardNormal));
            Ok(z * chol.l().transpose())
        })
        .collect::<Result<_>>()?;
    let m: usize = pieces.iter().map(|p| p.ncols()).sum();
    let mut g = DMatrix::zeros(n, m);
    let mut col = 0;
    for piece in pieces {
        g.columns_mut(col, piece.ncols()).copy_from(&piece);
        col += piece.ncols();
    }
    standardize_genotypes(&g)
}

/// Spike-and-slab: 0 with probability `1 - p`, else `N(0, h2 / (M p))`.
pub fn gen_effects<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> DVector<f64> {
    let sd = (cfg.h2 / (cfg.m_snps as f64 * cfg.causal_prop)).sqrt();
    DVector::from_fn(cfg.m_snps, |_, _| {
        if rng.random::<f64>() < cfg.causal_prop {
            sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    })
}

fn population_variance(v: &DVector<f64>) -> f64 {
    let mean = v.mean();
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

/// `y = X beta + eps` with noise variance `1 - Var(X beta)` (at least
/// 0.01), standardized to mean 0 and variance 1.
pub fn gen_phenotype<R: Rng + ?Sized>(
    genotypes: &DMatrix<f64>,
    true_beta: &DVector<f64>,
    h2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if genotypes.ncols() != true_beta.len() {
        return Err(Error::DimensionMismatch {
            context: "gen_phenotype",
            expected: genotypes.ncols(),
            found: true_beta.len(),
        });
    }
    let signal = genotypes * true_beta;
    let var_signal = population_variance(&signal);
    if var_signal >= 1.0 {
        return Err(Error::GeneticVarianceTooLarge { variance: var_signal });
    }
    let sd = (1.0 - var_signal).max(0.01).sqrt();
    let mut y = signal.map(|s| s + sd * rng.sample::<f64, _>(StandardNormal));
    let mean = y.mean();
    y.add_scalar_mut(-mean);
    let var = population_variance(&y);
    if !(var > 0.0) {
        return Err(Error::invalid("h2", format!("phenotype for h2 = {h2} has zero variance")));
    }
    y /= var.sqrt();
    Ok(y)
}

/// Generates every split of a dataset from `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let true_ld = gen_ld_truth(cfg)?;
    let true_beta = gen_effects(cfg, &mut substream(cfg.seed, Purpose::Effects, 0, 0));
    let splits = Split::ALL
        .iter()
        .map(|&split| {
            let mut g_rng = substream(cfg.seed, Purpose::Genotypes, split.index(), 0);
            let genotypes = gen_genotypes(&true_ld, split.size(cfg), &mut g_rng)?;
            let mut y_rng = substream(cfg.seed, Purpose::Phenotype, split.index(), 0);
            let phenotype = gen_phenotype(&genotypes, &true_beta, cfg.h2, &mut y_rng)?;
            Ok(SplitData {
                split,
                genotypes,
                phenotype,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimDataset {
        config: cfg.clone(),
        snp_ids: (0..cfg.m_snps).map(snp_id).collect(),
        true_beta,
        true_ld,
        splits,
    })
}

impl SimDataset {
    pub fn split(&self, split: Split) -> &SplitData {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .expect("dataset holds every split")
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        BlockPartition::from_sizes(&self.config.block_sizes)
    }

    /// GWAS summary statistics from the training split.
    pub fn summary_stats(&self) -> Result<SummaryStats> {
        let train = self.split(Split::Train);
        compute_summary_stats(&train.genotypes, &train.phenotype, self.snp_ids.clone())
    }

    /// LD blocks estimated from a split's genotypes (normally `Split::Ref`).
    pub fn estimated_ld(&self, split: Split) -> Result<Vec<LdBlock>> {
        let g = &self.split(split).genotypes;
        self.partition()?
            .blocks()
            .par_iter()
            .map(|span| {
                let cols = g.columns(span.range.start, span.range.len()).clone_owned();
                let ids = self.snp_ids[span.range.clone()].to_vec();
                estimate_ld_block(span.block_id, ids, &cols)
            })
            .collect()
    }

    /// The population LD as blocks, with the given reference size recorded.
    pub fn true_ld_blocks(&self, n_ref: u32) -> Result<Vec<LdBlock>> {
        let partition = self.partition()?;
        partition
            .blocks()
            .iter()
            .zip(&self.true_ld)
            .map(|(span, d)| LdBlock::from_correlation(span.block_id, self.snp_ids[span.range.clone()].to_vec(), d, n_ref))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub n_individuals: usize,
    pub genotype_file: String,
    pub phenotype_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SimConfig,
    pub m_snps: usize,
    pub genotype_format: String,
    pub splits: Vec<SplitManifest>,
    pub true_beta_file: String,
    pub sumstats_file: String,
    pub ld_dir: String,
    /// Split the LD reference panel was estimated from.
    pub ld_split: Split,
}

fn write_genotypes(path: &Path, g: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            w.write_all(&g[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an `n x m` row-major little-endian f64 matrix.
pub fn read_genotypes(path: &Path, n: usize, m: usize) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != n * m * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {n}x{m}, found {}",
            path.display(),
            n * m * 8,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_row_slice(n, m, &values))
}

fn write_column_tsv(path: &Path, header: [&str; 2], keys: &[String], values: &DVector<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}\t{}", header[0], header[1])?;
    for (k, v) in keys.iter().zip(values.iter()) {
        writeln!(w, "{k}\t{v:e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a two-column TSV with a header; returns keys and values.
pub fn read_column_tsv(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let r = BufReader::new(File::open(path)?);
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(k), Some(v), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Format(format!("{}:{}: expected 2 columns", path.display(), lineno + 1)));
        };
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}:{}: bad number {v:?}", path.display(), lineno + 1)))?;
        keys.push(k.to_string());
        values.push(v);
    }
    Ok((keys, values))
}

/// Writes the dataset directory: per-split genotypes and phenotypes,
/// the true effects, training summary statistics and the reference LD.
pub fn write_dataset(dir: &Path, ds: &SimDataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for sd in &ds.splits {
        let name = sd.split.name();
        let genotype_file = format!("{name}.geno.bin");
        let phenotype_file = format!("{name}.pheno.tsv");
        write_genotypes(&dir.join(&genotype_file), &sd.genotypes)?;
        let ids: Vec<String> = (0..sd.phenotype.len()).map(|i| format!("{name}{i}")).collect();
        write_column_tsv(&dir.join(&phenotype_file), ["individual", "phenotype"], &ids, &sd.phenotype)?;
        splits.push(SplitManifest {
            split: sd.split,
            n_individuals: sd.genotypes.nrows(),
            genotype_file,
            phenotype_file,
        });
    }
    write_column_tsv(&dir.join(TRUE_BETA_FILE), ["snp_id", "beta"], &ds.snp_ids, &ds.true_beta)?;
    let stats = ds.summary_stats()?;
    let mut w = BufWriter::new(File::create(dir.join(SUMSTATS_FILE))?);
    stats.write_tsv(&mut w)?;
    w.flush()?;
    write_ld_dir(&dir.join(LD_DIR), &ds.estimated_ld(Split::Ref)?)?;

    let manifest = DatasetManifest {
        config: ds.config.clone(),
        m_snps: ds.config.m_snps,
        genotype_format: GENOTYPE_FORMAT.into(),
        splits,
        true_beta_file: TRUE_BETA_FILE.into(),
        sumstats_file: SUMSTATS_FILE.into(),
        ld_dir: LD_DIR.into(),
        ld_split: Split::Ref,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", MANIFEST_FILE)))
}

/// Loads a single split's genotypes and phenotype.
pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<SplitData> {
    let entry = manifest
        .splits
        .iter()
        .find(|s| s.split == split)
        .ok_or_else(|| Error::Format(format!("manifest has no {} split", split.name())))?;
    let genotypes = read_genotypes(&dir.join(&entry.genotype_file), entry.n_individuals, manifest.m_snps)?;
    let (_, y) = read_column_tsv(&dir.join(&entry.phenotype_file))?;
    if y.len() != entry.n_individuals {
        return Err(Error::Format(format!(
            "{}: expected {} phenotypes, found {}",
            entry.phenotype_file,
            entry.n_individuals,
            y.len()
        )));
    }
    Ok(SplitData {
        split,
        genotypes,
        phenotype: DVector::from_vec(y),
    })
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SimDataset> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let (snp_ids, beta) = read_column_tsv(&dir.join(&manifest.true_beta_file))?;
    if beta.len() != manifest.m_snps {
        return Err(Error::Format(format!(
            "{}: expected {} SNPs, found {}",
            manifest.true_beta_file,
            manifest.m_snps,
            beta.len()
        )));
    }
    let splits = Split::ALL
        .iter()
        .map(|&s| read_split(dir, &manifest, s))
        .collect::<Result<_>>()?;
    Ok(SimDataset {
        true_ld: gen_ld_truth(&manifest.config)?,
        config: manifest.config,
        snp_ids,
        true_beta: DVector::from_vec(beta),
        splits,
    })
}

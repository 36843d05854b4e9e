//! GWAS summary statistics, the closed-form ridge posterior mean and the
//! prior-scale divergence scan.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ld::LdBlock;

/// Marginal effects `beta_sum_j = x_j^T y / N` on the standardized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub snp_ids: Vec<String>,
    pub beta_sum: DVector<f64>,
    pub n_gwas: u64,
}

impl SummaryStats {
    pub fn new(snp_ids: Vec<String>, beta_sum: DVector<f64>, n_gwas: u64) -> Result<Self> {
        if snp_ids.len() != beta_sum.len() {
            return Err(Error::DimensionMismatch {
                context: "summary statistics",
                expected: snp_ids.len(),
                found: beta_sum.len(),
            });
        }
        if n_gwas == 0 {
            return Err(Error::invalid("n_gwas", "must be at least 1"));
        }
        if beta_sum.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("beta_sum"));
        }
        Ok(Self {
            snp_ids,
            beta_sum,
            n_gwas,
        })
    }

    pub fn len(&self) -> usize {
        self.snp_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snp_ids.is_empty()
    }

    /// Splits `beta_sum` into per-block vectors, requiring the SNP order to
    /// match the concatenated block SNP lists exactly.
    pub fn split_by_blocks(&self, blocks: &[LdBlock]) -> Result<Vec<DVector<f64>>> {
        let total: usize = blocks.iter().map(|b| b.full_dim).sum();
        if total != self.len() {
            return Err(Error::Alignment(format!(
                "summary statistics cover {} SNPs but LD blocks cover {total}",
                self.len()
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(blocks.len());
        for block in blocks {
            let end = start + block.full_dim;
            if let Some(k) = (start..end).find(|&j| self.snp_ids[j] != block.snp_ids[j - start]) {
                return Err(Error::Alignment(format!(
                    "SNP {} in summary statistics is {:?} but LD block {} expects {:?}",
                    k,
                    self.snp_ids[k],
                    block.block_id,
                    block.snp_ids[k - start]
                )));
            }
            out.push(self.beta_sum.rows(start, block.full_dim).clone_owned());
            start = end;
        }
        Ok(out)
    }

    /// Statistics restricted to a single block, in block order.
    pub fn for_block(&self, block: &LdBlock, offset: usize) -> Result<SummaryStats> {
        if offset + block.full_dim > self.len() || self.snp_ids[offset..offset + block.full_dim] != block.snp_ids[..] {
            return Err(Error::Alignment(format!(
                "summary statistics at offset {offset} do not match LD block {}",
                block.block_id
            )));
        }
        SummaryStats::new(
            block.snp_ids.clone(),
            self.beta_sum.rows(offset, block.full_dim).clone_owned(),
            self.n_gwas,
        )
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "snp_id\tbeta_sum\tn_gwas")?;
        for (id, b) in self.snp_ids.iter().zip(self.beta_sum.iter()) {
            writeln!(w, "{id}\t{b:e}\t{}", self.n_gwas)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty summary statistics file".into()))??;
        let cols: Vec<&str> = header.trim_end().split('\t').collect();
        let find = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Format(format!("summary statistics header lacks column {name:?}")))
        };
        let (i_id, i_beta, i_n) = (find("snp_id")?, find("beta_sum")?, find("n_gwas")?);
        let mut ids = Vec::new();
        let mut betas = Vec::new();
        let mut n_gwas: Option<u64> = None;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let get = |i: usize| {
                f.get(i)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("summary statistics line {}: missing column", lineno + 2)))
            };
            let beta: f64 = get(i_beta)?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("summary statistics line {}: bad beta_sum", lineno + 2)))?;
            let n: u64 = get(i_n)?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("summary statistics line {}: bad n_gwas", lineno + 2)))?;
            match n_gwas {
                None => n_gwas = Some(n),
                Some(prev) if prev != n => {
                    return Err(Error::Format(format!(
                        "summary statistics line {}: n_gwas {n} differs from {prev}",
                        lineno + 2
                    )))
                }
                _ => {}
            }
            ids.push(get(i_id)?.to_string());
            betas.push(beta);
        }
        let n = n_gwas.ok_or_else(|| Error::Format("summary statistics file has no rows".into()))?;
        SummaryStats::new(ids, DVector::from_vec(betas), n)
    }
}

/// `beta_sum_j = <x_j, y> / N` for standardized genotypes and phenotype.
pub fn compute_summary_stats(x_std: &DMatrix<f64>, y_std: &DVector<f64>, snp_ids: Vec<String>) -> Result<SummaryStats> {
    if x_std.nrows() != y_std.len() {
        return Err(Error::DimensionMismatch {
            context: "compute_summary_stats rows",
            expected: x_std.nrows(),
            found: y_std.len(),
        });
    }
    if snp_ids.len() != x_std.ncols() {
        return Err(Error::DimensionMismatch {
            context: "compute_summary_stats snp ids",
            expected: x_std.ncols(),
            found: snp_ids.len(),
        });
    }
    let n = x_std.nrows();
    let beta = x_std.tr_mul(y_std) / n as f64;
    SummaryStats::new(snp_ids, beta, n as u64)
}

fn check_block_stats(stats: &SummaryStats, block: &LdBlock) -> Result<()> {
    if stats.len() != block.full_dim {
        return Err(Error::DimensionMismatch {
            context: "summary statistics vs LD block",
            expected: block.full_dim,
            found: stats.len(),
        });
    }
    Ok(())
}

/// Posterior mean of `beta` under `beta ~ N(0, sigma0^2 I)` and the summary
/// likelihood with the block's (possibly truncated) `D_ref`:
/// `(N D + sigma0^-2 I)^{-1} N b`.
///
/// Along retained eigenvector `v_l` with eigenvalue `d_l` the coefficient is
/// `<v_l, b> / (d_l + sigma0^-2 / N)`; the orthogonal complement of the
/// retained space (the null space of `D`) is scaled by `N sigma0^2`. When
/// `project_first` is set, `b` is projected onto the retained space first
/// and the complement term vanishes.
pub fn ridge_posterior_mean(
    stats: &SummaryStats,
    block: &LdBlock,
    sigma0: f64,
    project_first: bool,
) -> Result<DVector<f64>> {
    check_block_stats(stats, block)?;
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(Error::invalid("sigma0", format!("{sigma0} must be positive and finite")));
    }
    let n = stats.n_gwas as f64;
    let ridge = 1.0 / (sigma0 * sigma0 * n);
    let v = &block.eigen.vectors;
    let coef = v.tr_mul(&stats.beta_sum);
    let in_span = v * &coef;

    let scaled = coef.zip_map(&block.eigen.values, |c, d| c / (d + ridge));
    let mut mu = v * scaled;
    if !project_first {
        let complement = &stats.beta_sum - in_span;
        mu.axpy(n * sigma0 * sigma0, &complement, 1.0);
    }
    Ok(mu)
}

/// `(sigma0, log10 ||mu(sigma0)||)` over an increasing positive grid.
pub fn divergence_scan(
    stats: &SummaryStats,
    block: &LdBlock,
    sigma0_grid: &[f64],
    project_first: bool,
) -> Result<Vec<(f64, f64)>> {
    if sigma0_grid.is_empty() {
        return Err(Error::invalid("sigma0 grid", "empty"));
    }
    if sigma0_grid.windows(2).any(|w| !(w[1] > w[0])) || !(sigma0_grid[0] > 0.0) {
        return Err(Error::invalid("sigma0 grid", "must be positive and strictly increasing"));
    }
    sigma0_grid
        .iter()
        .map(|&s| {
            let mu = ridge_posterior_mean(stats, block, s, project_first)?;
            Ok((s, mu.norm().log10()))
        })
        .collect()
}

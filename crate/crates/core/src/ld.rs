//! Reference LD blocks: estimation from genotypes, eigen-truncation,
//! projection of summary statistics onto the retained column space, and the
//! on-disk block and partition formats.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigendecompose, truncate_eigen, SymEigen};

const BLOCK_MAGIC: &[u8; 4] = b"LDB1";
const PARTITION_FILE: &str = "partition.tsv";

/// One contiguous run of SNP indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpan {
    pub block_id: u32,
    /// Inclusive start, exclusive end.
    pub range: Range<usize>,
}

/// Ordered, disjoint, contiguous cover of SNP indices `0..M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    blocks: Vec<BlockSpan>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<BlockSpan>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Format("partition has no blocks".into()));
        }
        let mut next = 0;
        for b in &blocks {
            if b.range.start != next {
                return Err(Error::Format(format!(
                    "block {} starts at {} but the previous block ended at {next}",
                    b.block_id, b.range.start
                )));
            }
            if b.range.is_empty() {
                return Err(Error::Format(format!("block {} is empty", b.block_id)));
            }
            next = b.range.end;
        }
        Ok(Self { blocks })
    }

    /// Consecutive blocks with ids `0..sizes.len()`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .enumerate()
            .map(|(id, &len)| {
                let span = BlockSpan {
                    block_id: id as u32,
                    range: start..start + len,
                };
                start += len;
                span
            })
            .collect();
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[BlockSpan] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn n_snps(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.range.end)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "block_id\tstart_index\tend_index")?;
        for b in &self.blocks {
            writeln!(w, "{}\t{}\t{}", b.block_id, b.range.start, b.range.end)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty partition file".into()))??;
        if header.trim_end() != "block_id\tstart_index\tend_index" {
            return Err(Error::Format(format!("unexpected partition header {header:?}")));
        }
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| -> Result<usize> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("partition line {}: bad integer {s:?}", lineno + 2)))
            };
            if fields.len() != 3 {
                return Err(Error::Format(format!("partition line {}: expected 3 columns", lineno + 2)));
            }
            blocks.push(BlockSpan {
                block_id: parse(fields[0])? as u32,
                range: parse(fields[1])?..parse(fields[2])?,
            });
        }
        Self::new(blocks)
    }
}

/// Column-wise z-scores with divisor `n`.
pub fn standardize_genotypes(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    if n < 2 {
        return Err(Error::invalid("genotype matrix", "need at least two individuals"));
    }
    let mut out = g.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / n as f64;
        if !(var > 1e-24) {
            return Err(Error::ConstantColumn { index: j });
        }
        col /= var.sqrt();
    }
    Ok(out)
}

/// Eigendecomposed reference LD matrix for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LdBlock {
    pub block_id: u32,
    pub snp_ids: Vec<String>,
    /// Retained eigenpairs of `D_ref`; vectors are `full_dim x rank`.
    pub eigen: SymEigen,
    pub n_ref: u32,
    pub full_dim: usize,
}

impl LdBlock {
    pub fn rank(&self) -> usize {
        self.eigen.rank()
    }

    /// Builds a block straight from a correlation matrix, e.g. a known
    /// population LD. Zero eigenpairs are removed.
    pub fn from_correlation(
        block_id: u32,
        snp_ids: Vec<String>,
        corr: &DMatrix<f64>,
        n_ref: u32,
    ) -> Result<Self> {
        if snp_ids.len() != corr.nrows() {
            return Err(Error::DimensionMismatch {
                context: "LD block snp ids",
                expected: corr.nrows(),
                found: snp_ids.len(),
            });
        }
        let eigen = truncate_eigen(&sym_eigendecompose(corr)?, 0.0)?;
        Ok(Self {
            block_id,
            snp_ids,
            eigen,
            n_ref,
            full_dim: corr.nrows(),
        })
    }

    /// `D v` with `D = V1 diag(values) V1^T`.
    pub fn apply_ld(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        self.eigen.apply(v, out);
    }

    /// `V1 diag(sqrt(values)) z` for `z` of length `rank`; has covariance `D`
    /// when `z` is standard normal.
    pub fn sqrt_ld_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let scaled = z.zip_map(&self.eigen.values, |zi, d| zi * d.sqrt());
        &self.eigen.vectors * scaled
    }

    /// Dense truncated `D`.
    pub fn ld_matrix(&self) -> DMatrix<f64> {
        self.eigen.reconstruct()
    }

    /// Same block with a further fraction of its nonzero eigenpairs removed.
    pub fn apply_truncation(&self, drop_fraction: f64) -> Result<LdBlock> {
        Ok(LdBlock {
            eigen: truncate_eigen(&self.eigen, drop_fraction)?,
            snp_ids: self.snp_ids.clone(),
            ..*self
        })
    }

    /// `V1 V1^T b`.
    pub fn project(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.full_dim {
            return Err(Error::DimensionMismatch {
                context: "project_summary",
                expected: self.full_dim,
                found: b.len(),
            });
        }
        let coef = self.eigen.vectors.tr_mul(b);
        Ok(&self.eigen.vectors * coef)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(BLOCK_MAGIC)?;
        for v in [self.block_id, self.full_dim as u32, self.rank() as u32, self.n_ref] {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.snp_ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for v in self.eigen.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        // nalgebra storage is column-major already
        for v in self.eigen.vectors.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BLOCK_MAGIC {
            return Err(Error::Format(format!("bad LD block magic {magic:?}")));
        }
        let block_id = read_u32(&mut r)?;
        let full_dim = read_u32(&mut r)? as usize;
        let rank = read_u32(&mut r)? as usize;
        let n_ref = read_u32(&mut r)?;
        if rank > full_dim {
            return Err(Error::Format(format!("LD block rank {rank} exceeds dimension {full_dim}")));
        }
        let mut snp_ids = Vec::with_capacity(full_dim);
        for _ in 0..full_dim {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            snp_ids.push(
                String::from_utf8(buf).map_err(|e| Error::Format(format!("snp id is not UTF-8: {e}")))?,
            );
        }
        let values = DVector::from_vec(read_f64s(&mut r, rank)?);
        let vectors = DMatrix::from_vec(full_dim, rank, read_f64s(&mut r, full_dim * rank)?);
        Ok(Self {
            block_id,
            snp_ids,
            eigen: SymEigen { values, vectors },
            n_ref,
            full_dim,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// `D_ref = G^T G / n_ref` for standardized reference genotypes, with zero
/// eigenpairs removed.
pub fn estimate_ld_block(block_id: u32, snp_ids: Vec<String>, g_ref_std: &DMatrix<f64>) -> Result<LdBlock> {
    let n_ref = g_ref_std.nrows();
    if n_ref == 0 {
        return Err(Error::invalid("reference genotypes", "no individuals"));
    }
    let mut d = g_ref_std.tr_mul(g_ref_std);
    d /= n_ref as f64;
    // kill roundoff asymmetry from the product
    let sym = (&d + d.transpose()) * 0.5;
    LdBlock::from_correlation(block_id, snp_ids, &sym, n_ref as u32)
}

/// Projection of one block's summary statistics onto the block's retained
/// eigenspace.
pub fn project_summary(beta_sum_block: &DVector<f64>, block: &LdBlock) -> Result<DVector<f64>> {
    block.project(beta_sum_block)
}

fn block_file_name(block_id: u32) -> String {
    format!("block_{block_id:05}.ldb")
}

/// Writes `partition.tsv` and one `.ldb` file per block into `dir`.
pub fn write_ld_dir(dir: &Path, blocks: &[LdBlock]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut start = 0;
    let spans = blocks
        .iter()
        .map(|b| {
            let span = BlockSpan {
                block_id: b.block_id,
                range: start..start + b.full_dim,
            };
            start += b.full_dim;
            span
        })
        .collect();
    let partition = BlockPartition::new(spans)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(PARTITION_FILE))?);
    partition.write_tsv(&mut w)?;
    w.flush()?;
    for b in blocks {
        let mut w = BufWriter::new(fs::File::create(dir.join(block_file_name(b.block_id)))?);
        b.write_binary(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Reads blocks listed in `partition.tsv`, checking sizes against the file.
pub fn read_ld_dir(dir: &Path) -> Result<(BlockPartition, Vec<LdBlock>)> {
    let partition = BlockPartition::read_tsv(BufReader::new(fs::File::open(dir.join(PARTITION_FILE))?))?;
    let mut blocks = Vec::with_capacity(partition.len());
    for span in partition.blocks() {
        let block = LdBlock::read_binary(BufReader::new(fs::File::open(
            dir.join(block_file_name(span.block_id)),
        )?))?;
        if block.full_dim != span.range.len() || block.block_id != span.block_id {
            return Err(Error::Format(format!(
                "block file {} does not match partition entry",
                block_file_name(span.block_id)
            )));
        }
        blocks.push(block);
    }
    Ok((partition, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ids(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("rs{j}")).collect()
    }

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn standardize_small_column() {
        let g = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 1.0]);
        let s = standardize_genotypes(&g).unwrap();
        assert!(s.column(0).sum().abs() < 1e-12);
        assert!((s.column(0).norm_squared() / 4.0 - 1.0).abs() < 1e-12);
        let again = standardize_genotypes(&s).unwrap();
        assert!((again - &s).amax() < 1e-12);
    }

    #[test]
    fn standardize_matches_direct_moments() {
        let mut g = gaussian(50, 2, 3);
        for i in 0..50 {
            g[(i, 1)] = 0.5 * g[(i, 0)] + g[(i, 1)] + 3.0;
        }
        let s = standardize_genotypes(&g).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = g.column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
            for i in 0..50 {
                assert!((s[(i, j)] - (col[i] - mean) / sd).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_column_is_named() {
        let mut g = gaussian(10, 3, 1);
        g.column_mut(2).fill(1.0);
        assert!(matches!(standardize_genotypes(&g), Err(Error::ConstantColumn { index: 2 })));
    }

    #[test]
    fn independent_columns_give_near_identity() {
        let n = 4000;
        let g = standardize_genotypes(&gaussian(n, 6, 5)).unwrap();
        let block = estimate_ld_block(0, ids(6), &g).unwrap();
        assert_eq!(block.rank(), 6);
        let d = block.ld_matrix();
        // naive loop oracle for G^T G / n
        for a in 0..6 {
            for b in 0..6 {
                let naive: f64 = (0..n).map(|i| g[(i, a)] * g[(i, b)]).sum::<f64>() / n as f64;
                assert!((d[(a, b)] - naive).abs() < 1e-9);
                if a != b {
                    assert!(naive.abs() < 4.0 / (n as f64).sqrt());
                } else {
                    assert!((naive - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rank_bounded_by_sample_size() {
        let g = standardize_genotypes(&gaussian(3, 5, 9)).unwrap();
        let block = estimate_ld_block(1, ids(5), &g).unwrap();
        // centering costs one degree of freedom
        assert!(block.rank() <= 2);
        assert_eq!(block.full_dim, 5);
        assert_eq!(block.eigen.vectors.shape(), (5, block.rank()));
    }

    #[test]
    fn duplicate_column_has_a_zero_eigenvalue() {
        let mut g = gaussian(100, 4, 2);
        let c0 = g.column(0).clone_owned();
        g.set_column(3, &c0);
        let g = standardize_genotypes(&g).unwrap();
        let d = g.tr_mul(&g) / 100.0;
        let full = sym_eigendecompose(&((&d + d.transpose()) * 0.5)).unwrap();
        assert_eq!(full.values.iter().filter(|&&v| v == 0.0).count(), 1);
        assert_eq!(estimate_ld_block(0, ids(4), &g).unwrap().rank(), 3);
    }

    fn known_block(values: &[f64]) -> LdBlock {
        // rotate the standard basis by a fixed orthogonal matrix
        let p = values.len();
        let q = gaussian(p, p, 17).qr().q();
        let d = &q * DMatrix::from_diagonal(&DVector::from_column_slice(values)) * q.transpose();
        LdBlock::from_correlation(0, ids(p), &((&d + d.transpose()) * 0.5), 100).unwrap()
    }

    #[test]
    fn truncation_preserves_metadata() {
        let block = known_block(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let t = block.apply_truncation(0.4).unwrap();
        assert_eq!(t.eigen.values.len(), 3);
        for (a, b) in t.eigen.values.iter().zip([5.0, 4.0, 3.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!((t.snp_ids.clone(), t.n_ref, t.full_dim), (block.snp_ids.clone(), 100, 5));
        assert_eq!(block.apply_truncation(0.0).unwrap(), block);
        let ten: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        assert_eq!(known_block(&ten).apply_truncation(0.8).unwrap().rank(), 2);
    }

    #[test]
    fn projection_cases() {
        let full = known_block(&[3.0, 2.0, 1.5, 1.0]);
        let b = DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.1]);
        assert!((project_summary(&b, &full).unwrap() - &b).amax() < 1e-10);

        let low = full.apply_truncation(0.5).unwrap();
        let v1 = &low.eigen.vectors;
        let removed = full.eigen.vectors.column(3).clone_owned();
        assert!(project_summary(&removed, &low).unwrap().amax() < 1e-10);

        // explicit V1 V1^T e1 by naive multiply
        let e1 = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]);
        let got = project_summary(&e1, &low).unwrap();
        for i in 0..4 {
            let mut naive = 0.0;
            for k in 0..4 {
                let mut pik = 0.0;
                for l in 0..v1.ncols() {
                    pik += v1[(i, l)] * v1[(k, l)];
                }
                naive += pik * e1[k];
            }
            assert!((got[i] - naive).abs() < 1e-12);
        }
        assert!(project_summary(&DVector::zeros(3), &low).is_err());
    }

    #[test]
    fn best_low_rank_approximation() {
        let block = known_block(&[6.0, 3.0, 1.0, 0.5, 0.25]);
        let full = block.ld_matrix();
        let low = block.apply_truncation(0.6).unwrap();
        let err = (low.ld_matrix() - &full).norm();
        let rank = low.rank();
        for seed in 0..10 {
            let a = gaussian(5, rank, 100 + seed);
            let b = gaussian(5, rank, 200 + seed);
            assert!(err <= (&a * b.transpose() - &full).norm());
        }
    }

    #[test]
    fn binary_layout_and_round_trip() {
        let block = known_block(&[3.0, 2.0, 1.0]).apply_truncation(0.4).unwrap();
        let mut buf = Vec::new();
        block.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LDB1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        let ids_len: usize = block.snp_ids.iter().map(|s| 4 + s.len()).sum();
        assert_eq!(buf.len(), 20 + ids_len + 8 * (2 + 3 * 2));
        let back = LdBlock::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, block);
        buf[0] = b'X';
        assert!(LdBlock::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn partition_validation_and_tsv() {
        let p = BlockPartition::from_sizes(&[3, 2]).unwrap();
        assert_eq!(p.n_snps(), 5);
        let mut buf = Vec::new();
        p.write_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "block_id\tstart_index\tend_index\n0\t0\t3\n1\t3\t5\n");
        assert_eq!(BlockPartition::read_tsv(buf.as_slice()).unwrap(), p);
        let gap = vec![
            BlockSpan { block_id: 0, range: 0..2 },
            BlockSpan { block_id: 1, range: 3..4 },
        ];
        assert!(BlockPartition::new(gap).is_err());
        assert!(BlockPartition::from_sizes(&[2, 0]).is_err());
    }

    #[test]
    fn ld_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b0 = known_block(&[2.0, 1.0]);
        let mut b1 = known_block(&[3.0, 1.0, 0.5]);
        b0.block_id = 0;
        b1.block_id = 1;
        write_ld_dir(dir.path(), &[b0.clone(), b1.clone()]).unwrap();
        let (part, blocks) = read_ld_dir(dir.path()).unwrap();
        assert_eq!(part.n_snps(), 5);
        assert_eq!(blocks, vec![b0, b1]);
    }
}

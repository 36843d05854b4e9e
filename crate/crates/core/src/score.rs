//! Polygenic scores, prediction R² and the (alpha, truncation) tuning grid.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::ALPHA_GRID;
use crate::error::{Error, Result};
use crate::linalg::check_drop_fraction;

pub const DROP_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];
const WEIGHTS_HEADER: &str = "snp_id\tposterior_mean_beta";

/// Per-SNP PRS weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub snp_ids: Vec<String>,
    pub values: DVector<f64>,
}

impl Weights {
    pub fn new(snp_ids: Vec<String>, values: DVector<f64>) -> Result<Self> {
        if snp_ids.len() != values.len() {
            return Err(Error::DimensionMismatch {
                context: "weights",
                expected: snp_ids.len(),
                found: values.len(),
            });
        }
        Ok(Self { snp_ids, values })
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{WEIGHTS_HEADER}")?;
        for (id, v) in self.snp_ids.iter().zip(self.values.iter()) {
            writeln!(w, "{id}\t{v:e}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != WEIGHTS_HEADER {
            return Err(Error::Format(format!("weights header {header:?}, expected {WEIGHTS_HEADER:?}")));
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split('\t');
            let (Some(id), Some(v), None) = (f.next(), f.next(), f.next()) else {
                return Err(Error::Format(format!("weights line {}: expected 2 columns", i + 2)));
            };
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("weights line {}: bad number {v:?}", i + 2)))?;
            if !v.is_finite() {
                return Err(Error::NonFinite("weights"));
            }
            ids.push(id.to_string());
            values.push(v);
        }
        Self::new(ids, DVector::from_vec(values))
    }
}

/// `score_i = sum_j X_ij w_j` with SNPs matched by id. Every weighted SNP
/// must be genotyped; extra genotyped SNPs are ignored.
pub fn compute_prs(genotypes: &DMatrix<f64>, genotype_ids: &[String], weights: &Weights) -> Result<DVector<f64>> {
    if genotype_ids.len() != genotypes.ncols() {
        return Err(Error::DimensionMismatch {
            context: "genotype snp ids",
            expected: genotypes.ncols(),
            found: genotype_ids.len(),
        });
    }
    if genotype_ids == weights.snp_ids.as_slice() {
        return Ok(genotypes * &weights.values);
    }
    let index: HashMap<&str, usize> = genotype_ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
    let mut scores = DVector::zeros(genotypes.nrows());
    for (id, w) in weights.snp_ids.iter().zip(weights.values.iter()) {
        let j = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Alignment(format!("weighted SNP {id} is not genotyped")))?;
        scores.axpy(*w, &genotypes.column(j), 1.0);
    }
    Ok(scores)
}

/// Squared Pearson correlation; 0 when either input is constant.
pub fn prediction_r2(scores: &DVector<f64>, y: &DVector<f64>) -> f64 {
    assert_eq!(scores.len(), y.len(), "scores and phenotype lengths differ");
    let (ms, my) = (scores.mean(), y.mean());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (s, t) in scores.iter().zip(y.iter()) {
        let (a, b) = (s - ms, t - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    // Spread at rounding level relative to the scores' magnitude counts as constant.
    let scale = scores.amax();
    let n = scores.len() as f64;
    if !(syy > 0.0) || sxx <= (1e-13 * scale).powi(2) * n {
        return 0.0;
    }
    ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub alphas: Vec<f64>,
    pub drop_fractions: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            alphas: ALPHA_GRID.to_vec(),
            drop_fractions: DROP_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningCell {
    /// Position in alpha-major order.
    pub index: usize,
    pub alpha: f64,
    pub drop_fraction: f64,
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.drop_fractions.is_empty() {
            return Err(Error::invalid("tuning grid", "needs at least one alpha and one drop fraction"));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid("alpha", format!("{a} is outside (0, 1]")));
            }
        }
        for &f in &self.drop_fractions {
            check_drop_fraction(f)?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<TuningCell> {
        let mut out = Vec::with_capacity(self.alphas.len() * self.drop_fractions.len());
        for &alpha in &self.alphas {
            for &drop_fraction in &self.drop_fractions {
                out.push(TuningCell {
                    index: out.len(),
                    alpha,
                    drop_fraction,
                });
            }
        }
        out
    }
}

/// Genotypes, phenotype and SNP ids of one evaluation split.
#[derive(Debug, Clone, Copy)]
pub struct EvalData<'a> {
    pub genotypes: &'a DMatrix<f64>,
    pub phenotype: &'a DVector<f64>,
    pub snp_ids: &'a [String],
}

impl EvalData<'_> {
    pub fn r2(&self, weights: &Weights) -> Result<f64> {
        if self.phenotype.len() < 3 || self.phenotype.len() != self.genotypes.nrows() {
            return Err(Error::DimensionMismatch {
                context: "evaluation phenotype",
                expected: self.genotypes.nrows(),
                found: self.phenotype.len(),
            });
        }
        let scores = compute_prs(self.genotypes, self.snp_ids, weights)?;
        Ok(prediction_r2(&scores, self.phenotype))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: TuningCell,
    /// `None` when the fit failed.
    pub tuning_r2: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub cells: Vec<CellResult>,
    pub selected: TuningCell,
    pub selected_weights: Weights,
    pub validation_r2: f64,
}

/// Best successful cell: highest tuning R², then smaller alpha, then
/// smaller drop fraction.
pub fn select_cell(cells: &[CellResult]) -> Option<TuningCell> {
    cells
        .iter()
        .filter_map(|c| c.tuning_r2.map(|r| (r, c.cell)))
        .min_by(|(ra, ca), (rb, cb)| {
            rb.total_cmp(ra)
                .then(ca.alpha.total_cmp(&cb.alpha))
                .then(ca.drop_fraction.total_cmp(&cb.drop_fraction))
        })
        .map(|(_, c)| c)
}

/// Fits every cell in parallel, selects on the tuning split and reports the
/// validation R² of the selected cell only.
pub fn tune<F>(grid: &TuningGrid, fit_fn: F, tune_data: EvalData<'_>, val_data: EvalData<'_>) -> Result<TuningResult>
where
    F: Fn(&TuningCell) -> Result<Weights> + Sync,
{
    grid.validate()?;
    let fitted: Vec<(CellResult, Option<Weights>)> = grid
        .cells()
        .par_iter()
        .map(|cell| match fit_fn(cell).and_then(|w| tune_data.r2(&w).map(|r| (w, r))) {
            Ok((w, r)) => (
                CellResult {
                    cell: *cell,
                    tuning_r2: Some(r),
                    status: CellStatus::Ok,
                },
                Some(w),
            ),
            Err(e) => (
                CellResult {
                    cell: *cell,
                    tuning_r2: None,
                    status: CellStatus::Failed(e.to_string()),
                },
                None,
            ),
        })
        .collect();
    let cells: Vec<CellResult> = fitted.iter().map(|(c, _)| c.clone()).collect();
    let selected = select_cell(&cells).ok_or_else(|| {
        let first = cells
            .iter()
            .find_map(|c| match &c.status {
                CellStatus::Failed(msg) => Some(msg.clone()),
                CellStatus::Ok => None,
            })
            .unwrap_or_default();
        Error::AllCellsFailed { first }
    })?;
    let selected_weights = fitted
        .into_iter()
        .find_map(|(c, w)| (c.cell.index == selected.index).then_some(w).flatten())
        .expect("selected cell has weights");
    let validation_r2 = val_data.r2(&selected_weights)?;
    Ok(TuningResult {
        cells,
        selected,
        selected_weights,
        validation_r2,
    })
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

/// CSV `alpha,drop_fraction,tuning_r2,status` followed by one summary line.
pub fn write_tuning_report<W: Write>(mut w: W, result: &TuningResult) -> io::Result<()> {
    writeln!(w, "alpha,drop_fraction,tuning_r2,status")?;
    for c in &result.cells {
        let r2 = c.tuning_r2.map(|r| format!("{r}")).unwrap_or_else(|| "NA".into());
        let status = match &c.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(msg) => format!("failed: {}", csv_field(msg)),
        };
        writeln!(w, "{},{},{r2},{status}", c.cell.alpha, c.cell.drop_fraction)?;
    }
    writeln!(
        w,
        "# selected alpha={} drop_fraction={} validation_r2={}",
        result.selected.alpha, result.selected.drop_fraction, result.validation_r2
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|j| format!("s{j}")).collect()
    }

    #[test]
    fn prs_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5);
        let w = DVector::from_fn(3, |_, _| rng.random::<f64>());
        let weights = Weights::new(ids(3), w.clone()).unwrap();
        let s = compute_prs(&x, &ids(3), &weights).unwrap();
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += x[(i, j)] * w[j];
            }
            assert!((s[i] - acc).abs() < 1e-14);
        }
        let zero = Weights::new(ids(3), DVector::zeros(3)).unwrap();
        assert_eq!(compute_prs(&x, &ids(3), &zero).unwrap(), DVector::zeros(5));
        let e1 = Weights::new(ids(3), DVector::from_column_slice(&[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(compute_prs(&x, &ids(3), &e1).unwrap(), x.column(1).clone_owned());
    }

    #[test]
    fn prs_aligns_by_id() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Weights::new(vec!["s2".into(), "s0".into()], DVector::from_column_slice(&[1.0, 10.0])).unwrap();
        let s = compute_prs(&x, &ids(3), &w).unwrap();
        assert_eq!(s.as_slice(), &[13.0, 46.0]);
        let bad = Weights::new(vec!["zz".into()], DVector::from_element(1, 1.0)).unwrap();
        assert!(matches!(compute_prs(&x, &ids(3), &bad), Err(Error::Alignment(_))));
    }

    #[test]
    fn r2_properties() {
        let y = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0, -1.0]);
        assert!((prediction_r2(&y, &y) - 1.0).abs() < 1e-15);
        let ortho = DVector::from_column_slice(&[1.0, 1.0, -1.0, -1.0, 0.0]);
        let y2 = DVector::from_column_slice(&[1.0, -1.0, 1.0, -1.0, 0.0]);
        assert!(prediction_r2(&ortho, &y2).abs() < 1e-12);
        let s = DVector::from_column_slice(&[0.3, 0.1, -0.2, 0.9, 0.0]);
        let base = prediction_r2(&s, &y);
        let affine = s.map(|v| -3.0 * v + 7.0);
        assert!((prediction_r2(&affine, &y) - base).abs() < 1e-12);
        assert_eq!(prediction_r2(&DVector::from_element(5, 2.0), &y), 0.0);
        assert_eq!(prediction_r2(&DVector::from_element(5, 0.1), &y), 0.0);
        let tiny = s.map(|v| v * 1e-40);
        assert!((prediction_r2(&tiny, &y) - base).abs() < 1e-12);
    }

    #[test]
    fn weights_round_trip() {
        let w = Weights::new(ids(3), DVector::from_column_slice(&[1.5e-7, -0.25, 0.0])).unwrap();
        let mut buf = Vec::new();
        w.write_tsv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("snp_id\tposterior_mean_beta\n"));
        assert_eq!(Weights::read_tsv(&buf[..]).unwrap(), w);
        assert!(Weights::read_tsv(&b"id\tw\n"[..]).is_err());
    }

    #[test]
    fn grid_defaults_and_validation() {
        let g = TuningGrid::default();
        assert_eq!(g.cells().len(), 15);
        assert_eq!(g.cells()[5], TuningCell { index: 5, alpha: 0.25, drop_fraction: 0.0 });
        assert!(TuningGrid { alphas: vec![], ..TuningGrid::default() }.validate().is_err());
        assert!(TuningGrid { drop_fractions: vec![1.0], ..TuningGrid::default() }.validate().is_err());
    }

    fn toy_data() -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(50, 2, |_, _| rng.random::<f64>() - 0.5);
        let y = x.column(0) + DVector::from_fn(50, |_, _| 0.1 * (rng.random::<f64>() - 0.5));
        (x, y)
    }

    #[test]
    fn tie_break_prefers_small_alpha_then_small_drop() {
        let (x, y) = toy_data();
        let snps = ids(2);
        let data = EvalData { genotypes: &x, phenotype: &y, snp_ids: &snps };
        let grid = TuningGrid { alphas: vec![0.5, 0.25], drop_fractions: vec![0.4, 0.2] };
        let fit = |_: &TuningCell| Weights::new(ids(2), DVector::from_column_slice(&[1.0, 0.0]));
        let res = tune(&grid, fit, data, data).unwrap();
        assert_eq!((res.selected.alpha, res.selected.drop_fraction), (0.25, 0.2));

        let single = TuningGrid { alphas: vec![0.5], drop_fractions: vec![0.6] };
        let res = tune(&single, fit, data, data).unwrap();
        assert_eq!(res.selected.index, 0);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let (x, y) = toy_data();
        let snps = ids(2);
        let data = EvalData { genotypes: &x, phenotype: &y, snp_ids: &snps };
        let grid = TuningGrid { alphas: vec![0.25, 0.5], drop_fractions: vec![0.0] };
        let fit = |c: &TuningCell| {
            if c.alpha < 0.3 {
                Err(Error::NotPositiveDefinite)
            } else {
                Weights::new(ids(2), DVector::from_column_slice(&[0.0, 1.0]))
            }
        };
        let res = tune(&grid, fit, data, data).unwrap();
        assert_eq!(res.selected.alpha, 0.5);
        assert!(matches!(res.cells[0].status, CellStatus::Failed(_)));
        assert_eq!(res.cells[0].tuning_r2, None);
        let mut buf = Vec::new();
        write_tuning_report(&mut buf, &res).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,drop_fraction,tuning_r2,status\n0.25,0,NA,failed:"));
        assert!(text.contains("# selected alpha=0.5"));

        let all_fail = |_: &TuningCell| -> Result<Weights> { Err(Error::NotPositiveDefinite) };
        assert!(matches!(tune(&grid, all_fail, data, data), Err(Error::AllCellsFailed { .. })));
    }

    #[test]
    fn validation_is_scored_only_for_the_selected_cell() {
        let (x, y) = toy_data();
        let snps = ids(2);
        let tune_data = EvalData { genotypes: &x, phenotype: &y, snp_ids: &snps };
        let y_val = -&y;
        let val_data = EvalData { genotypes: &x, phenotype: &y_val, snp_ids: &snps };
        let grid = TuningGrid { alphas: vec![0.25, 0.5], drop_fractions: vec![0.0] };
        let fit = |c: &TuningCell| {
            let w = if c.alpha == 0.5 { [1.0, 0.0] } else { [0.0, 1.0] };
            Weights::new(ids(2), DVector::from_column_slice(&w))
        };
        let res = tune(&grid, fit, tune_data, val_data).unwrap();
        assert_eq!(res.selected.alpha, 0.5);
        let expected = prediction_r2(&x.column(0).clone_owned(), &y_val);
        assert_eq!(res.validation_r2, expected);
    }
}

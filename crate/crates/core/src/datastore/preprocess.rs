use serde::{Deserialize, Serialize};

use super::block::SparseBlock;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Library size every cell is scaled to before the log transform.
    pub target_sum: f64,
    /// Constant factor applied after the log transform.
    pub scale: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_sum: 1e4,
            scale: 10.0,
        }
    }
}

/// Per-cell library-size normalization, `log(1 + x)` and rescaling. Empty cells stay empty.
pub fn preprocess_row(row: &mut [f64], cfg: &PreprocessConfig) -> Result<()> {
    if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Ingestion(format!("count {v} is not a finite non-negative number")));
    }
    let lib: f64 = row.iter().sum();
    if lib == 0.0 {
        return Ok(());
    }
    for v in row.iter_mut() {
        *v = cfg.scale * (*v / lib * cfg.target_sum).ln_1p();
    }
    Ok(())
}

pub fn preprocess(counts: &SparseBlock, cfg: &PreprocessConfig) -> Result<SparseBlock> {
    counts.map_rows(|row| preprocess_row(row, cfg))
}

/// Indices (ascending) of the `keep` genes with largest variance; ties favor lower indices.
pub fn select_hvg(matrix: &Tensor, keep: usize) -> Result<Vec<usize>> {
    if matrix.rank() != 2 {
        return Err(Error::Dimension(format!("expected cells × genes, got {:?}", matrix.shape())));
    }
    let (n, g) = (matrix.shape()[0], matrix.shape()[1]);
    if keep > g {
        return Err(Error::Argument(format!("cannot keep {keep} of {g} genes")));
    }
    let var: Vec<f64> = (0..g)
        .map(|j| {
            if n == 0 {
                return 0.0;
            }
            let col = (0..n).map(|i| matrix.data()[i * g + j]);
            let mean = col.clone().sum::<f64>() / n as f64;
            col.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

//! Per-perturbation metrics on pseudobulk effects and differential expression.

use serde::Serialize;

use super::stats::{bh_adjust, log_fold_changes, pearson, rank_sum_pvalues, spearman};
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// Column means of a cells × genes matrix.
pub fn pseudobulk(cells: &Tensor) -> Result<Vec<f64>> {
    if cells.rank() != 2 || cells.shape()[0] == 0 {
        return Err(Error::Argument("pseudobulk needs a non-empty cells × genes matrix".into()));
    }
    let (n, g) = (cells.shape()[0], cells.shape()[1]);
    let mut m = vec![0.0; g];
    for i in 0..n {
        for (acc, v) in m.iter_mut().zip(cells.row(i)) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    Ok(m)
}

/// `(Δ̂, Δ)`: predicted and observed pseudobulk shifts against one shared control mean.
pub fn pseudobulk_delta(pert: &Tensor, ctrl: &Tensor, pred: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = pseudobulk(ctrl)?;
    let p = pseudobulk(pert)?;
    let q = pseudobulk(pred)?;
    if p.len() != c.len() || q.len() != c.len() {
        return Err(Error::Ingestion("groups disagree on the gene count".into()));
    }
    let d = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a - b).collect::<Vec<_>>();
    Ok((d(&q), d(&p)))
}

/// Mean Pearson correlation over `(predicted, true)` delta pairs.
pub fn pdcorr(deltas: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    deltas.iter().map(|(p, t)| pearson(p, t)).sum::<f64>() / deltas.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Distance {
    L1,
    L2,
    Cosine,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// Ranks `r_λ`: how many other true deltas are strictly closer to prediction λ than its own.
pub fn pds_ranks(deltas: &[(Vec<f64>, Vec<f64>)], distance: Distance) -> Result<Vec<usize>> {
    let m = deltas.len();
    if m < 2 {
        return Err(Error::Argument("discrimination needs at least two perturbations".into()));
    }
    Ok((0..m)
        .map(|l| {
            let own = distance.eval(&deltas[l].0, &deltas[l].1);
            (0..m)
                .filter(|&p| p != l && distance.eval(&deltas[l].0, &deltas[p].1) < own)
                .count()
        })
        .collect())
}

/// `1 - mean(r_λ) / M`.
pub fn pds(deltas: &[(Vec<f64>, Vec<f64>)], distance: Distance) -> Result<f64> {
    let r = pds_ranks(deltas, distance)?;
    let m = r.len() as f64;
    Ok(1.0 - r.iter().sum::<usize>() as f64 / m / m)
}

/// `(MAE, MSE)` of the delta differences, summed over genes and averaged over perturbations.
pub fn error_metrics(deltas: &[(Vec<f64>, Vec<f64>)]) -> (f64, f64) {
    if deltas.is_empty() {
        return (0.0, 0.0);
    }
    let m = deltas.len() as f64;
    let (mut mae, mut mse) = (0.0, 0.0);
    for (p, t) in deltas {
        for (a, b) in p.iter().zip(t) {
            mae += (a - b).abs();
            mse += (a - b).powi(2);
        }
    }
    (mae / m, mse / m)
}

/// `1 - SSE / SST`; 0 when the truth is constant.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len();
    if n == 0 {
        return 0.0;
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return 0.0;
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    1.0 - sse / sst
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub pvals: Vec<f64>,
    pub padj: Vec<f64>,
    pub lfc: Vec<f64>,
    pub significant: Vec<bool>,
}

impl DeResult {
    pub fn significant_genes(&self) -> Vec<usize> {
        (0..self.significant.len()).filter(|&g| self.significant[g]).collect()
    }

    /// The `k` significant genes with largest `|LFC|`; ties go to the lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut genes = self.significant_genes();
        genes.sort_by(|&a, &b| self.lfc[b].abs().total_cmp(&self.lfc[a].abs()).then(a.cmp(&b)));
        genes.truncate(k);
        genes
    }

    /// `-ln p_adj`, finite even when `p_adj` underflows to zero.
    pub fn scores(&self) -> Vec<f64> {
        self.padj.iter().map(|p| -p.max(f64::MIN_POSITIVE).ln()).collect()
    }
}

/// Rank-sum test of `cells` against `ctrl`, BH adjustment and fold changes.
pub fn differential_expression(cells: &Tensor, ctrl: &Tensor, alpha: f64, eps: f64) -> Result<DeResult> {
    let g = ctrl.shape()[1];
    if cells.shape()[1] != g {
        return Err(Error::Ingestion("groups disagree on the gene count".into()));
    }
    let pvals = rank_sum_pvalues(cells.data(), cells.shape()[0], ctrl.data(), ctrl.shape()[0], g)?;
    let padj = bh_adjust(&pvals)?;
    let lfc = log_fold_changes(&pseudobulk(cells)?, &pseudobulk(ctrl)?, eps);
    let significant = padj.iter().map(|q| *q < alpha).collect();
    Ok(DeResult {
        pvals,
        padj,
        lfc,
        significant,
    })
}

/// Differential-expression agreement; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DePattern {
    pub de_over: Option<f64>,
    pub de_prec: Option<f64>,
    pub dir_agr: Option<f64>,
    pub lfc_spear: Option<f64>,
}

pub fn de_pattern_metrics(truth: &DeResult, pred: &DeResult) -> Result<DePattern> {
    if truth.lfc.len() != pred.lfc.len() {
        return Err(Error::Ingestion("DE results cover different genes".into()));
    }
    let overlap = |a: &[usize], b: &[usize]| a.iter().filter(|g| b.contains(g)).count();
    let true_sig = truth.significant_genes();
    let pred_sig = pred.significant_genes();

    let k = true_sig.len();
    let de_over = (k > 0).then(|| overlap(&truth.top_k(k), &pred.top_k(k)) as f64 / k as f64);
    let k = pred_sig.len();
    let de_prec = (k > 0).then(|| overlap(&truth.top_k(k), &pred.top_k(k)) as f64 / k as f64);

    let shared: Vec<usize> = true_sig.iter().copied().filter(|g| pred.significant[*g]).collect();
    let dir_agr = (!shared.is_empty()).then(|| {
        let agree = shared
            .iter()
            .filter(|&&g| truth.lfc[g].signum() == pred.lfc[g].signum())
            .count();
        agree as f64 / shared.len() as f64
    });
    let lfc_spear = (!true_sig.is_empty()).then(|| {
        let a: Vec<f64> = true_sig.iter().map(|&g| truth.lfc[g]).collect();
        let b: Vec<f64> = true_sig.iter().map(|&g| pred.lfc[g]).collect();
        spearman(&a, &b)
    });
    Ok(DePattern {
        de_over,
        de_prec,
        dir_agr,
        lfc_spear,
    })
}

/// Rank-statistic AUROC with ties counted as one half; `None` for single-class labels.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = super::stats::average_ranks(scores);
    let r: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = r - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Step-interpolated area under the precision-recall curve; tied scores enter together.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            tp += labels[k] as usize;
        }
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(area)
}

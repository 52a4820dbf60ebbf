use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    auprc, auroc, de_pattern_metrics, differential_expression, pdcorr, pds_ranks, pseudobulk,
    pseudobulk_delta, r_squared, Distance,
};
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// Observed, control and predicted cells (each cells × genes) for one perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationGroup {
    pub name: String,
    pub pert: Tensor,
    pub ctrl: Tensor,
    pub pred: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Adjusted p-value threshold for significance.
    pub alpha: f64,
    /// Pseudocount for log fold changes.
    pub lfc_eps: f64,
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            lfc_eps: 1e-6,
            parallel: true,
        }
    }
}

/// Scores of one perturbation; `None` where the value is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationScores {
    pub perturbation: String,
    pub mse: f64,
    pub mae: f64,
    pub mse_per_gene: f64,
    pub mae_per_gene: f64,
    pub r2: f64,
    pub pdcorr: f64,
    pub pds_l1: f64,
    pub pds_l2: f64,
    pub pds_cos: f64,
    pub de_over: Option<f64>,
    pub de_prec: Option<f64>,
    pub dir_agr: Option<f64>,
    pub lfc_spear: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub true_de_genes: usize,
    pub pred_de_genes: usize,
}

/// Means over perturbations, skipping undefined entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mse: f64,
    pub mae: f64,
    pub mse_per_gene: f64,
    pub mae_per_gene: f64,
    pub r2: f64,
    pub pdcorr: f64,
    pub pds_l1: Option<f64>,
    pub pds_l2: Option<f64>,
    pub pds_cos: Option<f64>,
    pub de_over: Option<f64>,
    pub de_prec: Option<f64>,
    pub dir_agr: Option<f64>,
    pub lfc_spear: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub genes: usize,
    pub mean: MetricSummary,
    pub per_perturbation: Vec<PerturbationScores>,
}

const CSV_HEADER: [&str; 16] = [
    "perturbation",
    "MSE",
    "MAE",
    "MSE_per_gene",
    "MAE_per_gene",
    "R2",
    "PDCorr",
    "PDS_L1",
    "PDS_L2",
    "PDS_cos",
    "DEOver",
    "DEPrec",
    "DirAgr",
    "LFCSpear",
    "AUROC",
    "AUPRC",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per perturbation followed by a `MEAN` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for s in &self.per_perturbation {
            w.write_record([
                s.perturbation.clone(),
                s.mse.to_string(),
                s.mae.to_string(),
                s.mse_per_gene.to_string(),
                s.mae_per_gene.to_string(),
                s.r2.to_string(),
                s.pdcorr.to_string(),
                s.pds_l1.to_string(),
                s.pds_l2.to_string(),
                s.pds_cos.to_string(),
                cell(s.de_over),
                cell(s.de_prec),
                cell(s.dir_agr),
                cell(s.lfc_spear),
                cell(s.auroc),
                cell(s.auprc),
            ])?;
        }
        let m = &self.mean;
        w.write_record([
            "MEAN".to_string(),
            m.mse.to_string(),
            m.mae.to_string(),
            m.mse_per_gene.to_string(),
            m.mae_per_gene.to_string(),
            m.r2.to_string(),
            m.pdcorr.to_string(),
            cell(m.pds_l1),
            cell(m.pds_l2),
            cell(m.pds_cos),
            cell(m.de_over),
            cell(m.de_prec),
            cell(m.dir_agr),
            cell(m.lfc_spear),
            cell(m.auroc),
            cell(m.auprc),
        ])?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Evaluation(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Evaluation(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Partial {
    delta: (Vec<f64>, Vec<f64>),
    scores: PerturbationScores,
}

fn score_group(g: &PerturbationGroup, cfg: &EvalConfig) -> Result<Partial> {
    let delta = pseudobulk_delta(&g.pert, &g.ctrl, &g.pred)?;
    let genes = delta.0.len();
    let (mut mae, mut mse) = (0.0, 0.0);
    for (a, b) in delta.0.iter().zip(&delta.1) {
        mae += (a - b).abs();
        mse += (a - b).powi(2);
    }
    let r2 = r_squared(&pseudobulk(&g.pred)?, &pseudobulk(&g.pert)?);
    let pdc = pdcorr(std::slice::from_ref(&delta));
    let truth = differential_expression(&g.pert, &g.ctrl, cfg.alpha, cfg.lfc_eps)?;
    let pred = differential_expression(&g.pred, &g.ctrl, cfg.alpha, cfg.lfc_eps)?;
    let pattern = de_pattern_metrics(&truth, &pred)?;
    let scores = pred.scores();
    Ok(Partial {
        scores: PerturbationScores {
            perturbation: g.name.clone(),
            mse,
            mae,
            mse_per_gene: mse / genes as f64,
            mae_per_gene: mae / genes as f64,
            r2,
            pdcorr: pdc,
            pds_l1: f64::NAN,
            pds_l2: f64::NAN,
            pds_cos: f64::NAN,
            de_over: pattern.de_over,
            de_prec: pattern.de_prec,
            dir_agr: pattern.dir_agr,
            lfc_spear: pattern.lfc_spear,
            auroc: auroc(&truth.significant, &scores),
            auprc: auprc(&truth.significant, &scores),
            true_de_genes: truth.significant_genes().len(),
            pred_de_genes: pred.significant_genes().len(),
        },
        delta,
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scores every group and averages over perturbations.
///
/// Groups are processed in name order, so the report does not depend on the
/// order of `groups` or on whether the per-group work runs in parallel.
pub fn evaluate(groups: &[PerturbationGroup], cfg: &EvalConfig) -> Result<MetricReport> {
    if groups.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let genes = groups[0].pert.shape().get(1).copied().unwrap_or(0);
    for g in groups {
        for (what, m) in [("perturbed", &g.pert), ("control", &g.ctrl), ("predicted", &g.pred)] {
            if m.rank() != 2 || m.shape()[1] != genes {
                return Err(Error::Ingestion(format!(
                    "{}: {what} cells have shape {:?}, expected {genes} genes",
                    g.name,
                    m.shape()
                )));
            }
        }
        let n = g.pert.shape()[0];
        if g.ctrl.shape()[0] != n || g.pred.shape()[0] != n {
            return Err(Error::Ingestion(format!(
                "{}: {n} perturbed, {} control and {} predicted cells must match",
                g.name,
                g.ctrl.shape()[0],
                g.pred.shape()[0]
            )));
        }
    }
    let mut order: Vec<&PerturbationGroup> = groups.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    if order.windows(2).any(|w| w[0].name == w[1].name) {
        return Err(Error::Ingestion("duplicate perturbation names".into()));
    }

    let parts: Vec<Partial> = if cfg.parallel {
        order.par_iter().map(|g| score_group(g, cfg)).collect::<Result<_>>()?
    } else {
        order.iter().map(|g| score_group(g, cfg)).collect::<Result<_>>()?
    };
    let deltas: Vec<(Vec<f64>, Vec<f64>)> = parts.iter().map(|p| p.delta.clone()).collect();
    let mut rows: Vec<PerturbationScores> = parts.into_iter().map(|p| p.scores).collect();
    let m = rows.len();
    let pds_means: Vec<Option<f64>> = if m >= 2 {
        let mut means = Vec::new();
        for (k, d) in [Distance::L1, Distance::L2, Distance::Cosine].into_iter().enumerate() {
            let ranks = pds_ranks(&deltas, d)?;
            for (row, r) in rows.iter_mut().zip(&ranks) {
                let v = 1.0 - *r as f64 / m as f64;
                match k {
                    0 => row.pds_l1 = v,
                    1 => row.pds_l2 = v,
                    _ => row.pds_cos = v,
                }
            }
            let total: usize = ranks.iter().sum();
            means.push(Some(1.0 - total as f64 / (m * m) as f64));
        }
        means
    } else {
        vec![None; 3]
    };

    let avg = |f: fn(&PerturbationScores) -> f64| rows.iter().map(f).sum::<f64>() / m as f64;
    let avg_opt = |f: fn(&PerturbationScores) -> Option<f64>| mean_of(rows.iter().map(f));
    let mean = MetricSummary {
        mse: avg(|s| s.mse),
        mae: avg(|s| s.mae),
        mse_per_gene: avg(|s| s.mse_per_gene),
        mae_per_gene: avg(|s| s.mae_per_gene),
        r2: avg(|s| s.r2),
        pdcorr: avg(|s| s.pdcorr),
        pds_l1: pds_means[0],
        pds_l2: pds_means[1],
        pds_cos: pds_means[2],
        de_over: avg_opt(|s| s.de_over),
        de_prec: avg_opt(|s| s.de_prec),
        dir_agr: avg_opt(|s| s.dir_agr),
        lfc_spear: avg_opt(|s| s.lfc_spear),
        auroc: avg_opt(|s| s.auroc),
        auprc: avg_opt(|s| s.auprc),
    };
    Ok(MetricReport {
        genes,
        mean,
        per_perturbation: rows,
    })
}

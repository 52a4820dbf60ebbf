//! Planted-effect synthetic data.
//!
//! A cell's latent log-expression for gene `g` is
//! `η = μ_g + τ_cg + β_bg + δ·s_pg·[g planted for p] + σ·ε`,
//! with gene means `μ`, cell-type offsets `τ`, batch offsets `β` and noise `ε`,
//! all Gaussian. Planted genes and their signs `s` belong to the perturbation
//! and are shared by every cell type. In log mode the stored value is
//! `ln(1 + e^η)`; in count mode it is a Poisson draw with mean `L·e^η`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::block::SparseBlock;
use super::store::{Condition, ControlKey, Dataset, ValueSpace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub genes: usize,
    pub cell_types: usize,
    pub perturbations: usize,
    pub batches: usize,
    pub cells_per_group: usize,
    /// Control cells per (cell type, batch).
    pub control_cells: usize,
    pub de_genes: usize,
    pub delta: f64,
    pub dispersion: f64,
    pub gene_scale: f64,
    pub cell_type_scale: f64,
    pub batch_scale: f64,
    pub base_mean: f64,
    pub space: ValueSpace,
    /// Mean library multiplier in count mode.
    pub library: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            genes: 100,
            cell_types: 3,
            perturbations: 20,
            batches: 2,
            cells_per_group: 256,
            control_cells: 256,
            de_genes: 10,
            delta: 2.0,
            dispersion: 0.5,
            gene_scale: 0.5,
            cell_type_scale: 0.5,
            batch_scale: 0.3,
            base_mean: 1.0,
            space: ValueSpace::Log,
            library: 20.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.genes == 0 || self.cell_types == 0 || self.perturbations == 0 || self.batches == 0 {
            return bad("synthetic sizes must be positive".into());
        }
        if self.cells_per_group == 0 || self.control_cells == 0 {
            return bad("every group needs at least one cell".into());
        }
        if self.de_genes > self.genes {
            return bad(format!("{} planted genes exceed {} genes", self.de_genes, self.genes));
        }
        if !(self.delta >= 0.0) {
            return bad(format!("delta {} must be >= 0", self.delta));
        }
        let scales = [self.dispersion, self.gene_scale, self.cell_type_scale, self.batch_scale];
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) || !self.base_mean.is_finite() {
            return bad("noise scales must be finite and non-negative".into());
        }
        if self.space == ValueSpace::Counts && !(self.library > 0.0) {
            return bad("library multiplier must be positive".into());
        }
        Ok(())
    }
}

/// One planted effect: gene `gene` moves by `sign·delta` under `perturbation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub perturbation: usize,
    pub gene: usize,
    pub sign: i8,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: Vec<PlantedEffect>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.genes;
    let std = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()));
    let (gene_n, type_n, batch_n, noise_n) = (
        std(cfg.gene_scale)?,
        std(cfg.cell_type_scale)?,
        std(cfg.batch_scale)?,
        std(cfg.dispersion)?,
    );
    let mu: Vec<f64> = (0..g).map(|_| cfg.base_mean + gene_n.sample(&mut rng)).collect();
    let tau: Vec<Vec<f64>> = (0..cfg.cell_types)
        .map(|_| (0..g).map(|_| type_n.sample(&mut rng)).collect())
        .collect();
    let beta: Vec<Vec<f64>> = (0..cfg.batches)
        .map(|_| (0..g).map(|_| batch_n.sample(&mut rng)).collect())
        .collect();

    let mut truth = Vec::new();
    let mut shift = vec![vec![0.0; g]; cfg.perturbations];
    for (p, row) in shift.iter_mut().enumerate() {
        let mut genes = rand::seq::index::sample(&mut rng, g, cfg.de_genes).into_vec();
        genes.sort_unstable();
        for gene in genes {
            let sign: i8 = if rng.random::<bool>() { 1 } else { -1 };
            row[gene] = cfg.delta * sign as f64;
            truth.push(PlantedEffect {
                perturbation: p,
                gene,
                sign,
                delta: cfg.delta,
            });
        }
    }

    let cells = |rng: &mut ChaCha8Rng, n: usize, c: usize, b: usize, s: &[f64]| -> Result<SparseBlock> {
        let mut data = Vec::with_capacity(n * g);
        for _ in 0..n {
            for j in 0..g {
                let eta = mu[j] + tau[c][j] + beta[b][j] + s[j] + noise_n.sample(rng);
                data.push(match cfg.space {
                    ValueSpace::Log => softplus(eta),
                    ValueSpace::Counts => {
                        let lam = cfg.library * eta.exp();
                        Poisson::new(lam)
                            .map_err(|e| Error::Numeric(format!("count rate {lam}: {e}")))?
                            .sample(rng)
                    }
                });
            }
        }
        SparseBlock::from_dense(n, g, &data)
    };

    let zero = vec![0.0; g];
    let mut controls = BTreeMap::new();
    for c in 0..cfg.cell_types {
        for b in 0..cfg.batches {
            let block = cells(&mut rng, cfg.control_cells, c, b, &zero)?;
            controls.insert(ControlKey { cell_type: c, batch: b }, block);
        }
    }
    let mut groups = BTreeMap::new();
    for c in 0..cfg.cell_types {
        for (p, s) in shift.iter().enumerate() {
            let b = rng.random_range(0..cfg.batches);
            let block = cells(&mut rng, cfg.cells_per_group, c, b, s)?;
            groups.insert(
                Condition {
                    cell_type: c,
                    perturbation: p,
                    batch: b,
                },
                block,
            );
        }
    }

    let width = |n: usize| n.saturating_sub(1).to_string().len();
    let label = |prefix: &str, n: usize| -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:0w$}", w = width(n))).collect()
    };
    Ok(SynthOutput {
        dataset: Dataset {
            space: cfg.space,
            genes: label("gene", g),
            cell_types: label("type", cfg.cell_types),
            perturbations: label("pert", cfg.perturbations),
            batches: label("batch", cfg.batches),
            groups,
            controls,
        },
        truth,
    })
}

/// Ground-truth table with columns `perturbation, gene, sign, delta`.
pub fn write_truth_csv(path: &Path, out: &SynthOutput) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["perturbation", "gene", "sign", "delta"])?;
    let d = &out.dataset;
    for e in &out.truth {
        w.write_record([
            d.perturbations[e.perturbation].clone(),
            d.genes[e.gene].clone(),
            e.sign.to_string(),
            e.delta.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{Condition, DenseData};
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Conditions drawn with probability proportional to their cell count.
    #[default]
    Proportional,
    /// Every condition equally likely.
    Uniform,
}

/// `N` matched control cells, `N` perturbed cells and their condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub condition: Condition,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    conditions: Vec<Condition>,
    weights: Option<WeightedIndex<f64>>,
}

/// `n` row indices from `rows`: without replacement when possible, otherwise with.
fn draw_rows<R: Rng>(rows: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if rows >= n {
        rand::seq::index::sample(rng, rows, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..rows)).collect()
    }
}

fn gather_rows(m: &Tensor, rows: &[usize]) -> Tensor {
    let g = m.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * g);
    for &r in rows {
        out.extend_from_slice(m.row(r));
    }
    Tensor::new(&[rows.len(), g], out).expect("row gather keeps the width")
}

impl Sampler {
    /// Sampler over `conditions`; each needs cells and a matched control group.
    pub fn new(data: &DenseData, conditions: &[Condition], strategy: SamplingStrategy) -> Result<Sampler> {
        if conditions.is_empty() {
            return Err(Error::Sampling("no conditions to sample from".into()));
        }
        let mut sizes = Vec::with_capacity(conditions.len());
        for c in conditions {
            let cells = data
                .groups
                .get(c)
                .map(|m| m.shape()[0])
                .ok_or_else(|| Error::Sampling(format!("condition {c:?} has no cells")))?;
            if cells == 0 {
                return Err(Error::Sampling(format!("condition {c:?} has no cells")));
            }
            match data.controls.get(&c.control_key()) {
                Some(m) if m.shape()[0] > 0 => {}
                _ => {
                    return Err(Error::Sampling(format!(
                        "condition {c:?} has no matched controls for cell type {} in batch {}",
                        c.cell_type, c.batch
                    )))
                }
            }
            sizes.push(cells as f64);
        }
        let weights = match strategy {
            SamplingStrategy::Proportional => Some(
                WeightedIndex::new(&sizes).map_err(|e| Error::Sampling(e.to_string()))?,
            ),
            SamplingStrategy::Uniform => None,
        };
        Ok(Sampler {
            conditions: conditions.to_vec(),
            weights,
        })
    }

    pub fn draw_condition<R: Rng>(&self, rng: &mut R) -> Condition {
        let i = match &self.weights {
            Some(w) => w.sample(rng),
            None => rng.random_range(0..self.conditions.len()),
        };
        self.conditions[i]
    }

    pub fn sample_batch<R: Rng>(
        &self,
        data: &DenseData,
        batch: usize,
        cells: usize,
        rng: &mut R,
    ) -> Result<Vec<TrainExample>> {
        if cells == 0 {
            return Err(Error::Sampling("sets need at least one cell".into()));
        }
        (0..batch)
            .map(|_| {
                let condition = self.draw_condition(rng);
                let pert = &data.groups[&condition];
                let ctrl = &data.controls[&condition.control_key()];
                let x1 = gather_rows(pert, &draw_rows(pert.shape()[0], cells, rng));
                let x0 = gather_rows(ctrl, &draw_rows(ctrl.shape()[0], cells, rng));
                Ok(TrainExample { x0, x1, condition })
            })
            .collect()
    }
}

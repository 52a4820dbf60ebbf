//! The joint model: set encoder/decoder plus conditional transport, trained
//! on `L_AE + λ_flow · L_flow`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, TrainMode};
use crate::datastore::{DenseData, Sampler, TrainExample};
use crate::error::{Error, Result};
use crate::ndmath::{Adam, ParamSet, Tape, Tensor, Var};
use crate::setenc::{ae_loss, CellSetBatch, EncoderConfig, SetEncoder};
use crate::transport::{
    generate, Backbone, ConditionBatch, StartNoise, TransportConfig, Vocab,
};

/// Prefix of every transport parameter name.
pub const TRANSPORT_PREFIX: &str = "bb.";

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: SetEncoder,
    pub backbone: Backbone,
}

/// One training step's inputs, including all randomness.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub cond: ConditionBatch,
    pub times: Vec<f64>,
    pub noise: StartNoise,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub mmd: Var,
    pub flow: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Joint,
    Autoencoder,
    Transport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mse: f64,
    pub mmd: f64,
    pub flow: f64,
    pub total: f64,
    pub seconds: f64,
}

impl Model {
    /// Builds the layout and draws initial parameters from `seed`.
    pub fn init(
        genes: usize,
        vocab: Vocab,
        enc: &EncoderConfig,
        tr: &TransportConfig,
        seed: u64,
    ) -> Result<(Model, ParamSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let encoder = SetEncoder::init(&mut ps, enc, genes, &mut rng)?;
        let backbone = Backbone::init(&mut ps, tr, vocab, enc.d, &mut rng)?;
        Ok((Model { encoder, backbone }, ps))
    }

    pub fn stack(examples: &[TrainExample], genes: usize) -> Result<(Tensor, Tensor, ConditionBatch)> {
        let b = examples.len();
        let n = examples.first().map(|e| e.x0.shape()[0]).unwrap_or(0);
        let mut x0 = Vec::with_capacity(b * n * genes);
        let mut x1 = Vec::with_capacity(b * n * genes);
        let mut cond = ConditionBatch::default();
        for e in examples {
            x0.extend_from_slice(e.x0.data());
            x1.extend_from_slice(e.x1.data());
            let c = e.condition;
            cond.push(c.cell_type, c.perturbation, c.batch);
        }
        Ok((
            Tensor::new(&[b, n, genes], x0)?,
            Tensor::new(&[b, n, genes], x1)?,
            cond,
        ))
    }

    /// Draws times and start noise for a batch of examples.
    pub fn step_batch<R: Rng>(&self, examples: &[TrainExample], rng: &mut R) -> Result<StepBatch> {
        let (x0, x1, cond) = Model::stack(examples, self.encoder.genes)?;
        let (b, n) = (x0.shape()[0], x0.shape()[1]);
        let times = (0..b).map(|_| rng.random::<f64>()).collect();
        let noise = StartNoise::draw(&[b, n, self.encoder.cfg.d], self.backbone.cfg.prior, rng)?;
        Ok(StepBatch {
            x0,
            x1,
            cond,
            times,
            noise,
        })
    }

    /// Records every loss term; `total` depends on the phase.
    pub fn loss(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        batch: &StepBatch,
        lambda_flow: f64,
        phase: Phase,
    ) -> Result<LossVars> {
        let b = batch.x0.shape()[0];
        let mut both = batch.x0.data().to_vec();
        both.extend_from_slice(batch.x1.data());
        let mut shape = batch.x0.shape().to_vec();
        shape[0] = 2 * b;
        let x = t.constant(Tensor::new(&shape, both)?);
        let z = self.encoder.encode(t, ps, x)?;
        let xh = self.encoder.decode(t, ps, z)?;
        let x0 = t.narrow(x, 0, 0, b)?;
        let x1 = t.narrow(x, 0, b, b)?;
        let xh0 = t.narrow(xh, 0, 0, b)?;
        let xh1 = t.narrow(xh, 0, b, b)?;
        let cfg = &self.encoder.cfg;
        let ae = ae_loss(t, x0, x1, xh0, xh1, cfg.lambda_mmd, &cfg.bandwidths)?;

        let z0 = t.narrow(z, 0, 0, b)?;
        let z1 = t.narrow(z, 0, b, b)?;
        let z_start = batch.noise.apply_tape(t, z0)?;
        let flow = self
            .backbone
            .flow_loss(t, ps, z_start, z1, &batch.times, &batch.cond)?;
        let total = match phase {
            Phase::Autoencoder => ae.total,
            Phase::Transport => flow,
            Phase::Joint => {
                let f = t.scale(flow, lambda_flow);
                t.add(ae.total, f)?
            }
        };
        Ok(LossVars {
            total,
            mse: ae.mse,
            mmd: ae.mmd,
            flow,

        })
    }

    pub fn generate<R: Rng>(
        &self,
        ps: &ParamSet,
        x0: &CellSetBatch,
        cond: &ConditionBatch,
        steps: usize,
        rng: &mut R,
    ) -> Result<CellSetBatch> {
        generate(&self.encoder, &self.backbone, ps, x0, cond, steps, rng)
    }
}

fn phase_for(cfg: &TrainConfig, epoch: usize) -> Phase {
    match cfg.mode {
        TrainMode::Joint => Phase::Joint,
        TrainMode::Stagewise if epoch < cfg.ae_epochs => Phase::Autoencoder,
        TrainMode::Stagewise => Phase::Transport,
    }
}

/// Runs `cfg.epochs` epochs of sampled mini-batches; returns one record per epoch.
pub fn train(
    model: &Model,
    ps: &mut ParamSet,
    data: &DenseData,
    sampler: &Sampler,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    train_with(
        model,
        ps,
        cfg,
        seed,
        |rng| sampler.sample_batch(data, cfg.batch_size, cfg.cells, rng),
        on_epoch,
    )
}

/// Like [`train`] but with a caller-supplied batch source.
pub fn train_with(
    model: &Model,
    ps: &mut ParamSet,
    cfg: &TrainConfig,
    seed: u64,
    mut next_batch: impl FnMut(&mut ChaCha8Rng) -> Result<Vec<TrainExample>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.optimizer);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let phase = phase_for(cfg, epoch);
        let start = Instant::now();
        let mut sums = [0.0f64; 4];
        for step in 0..cfg.steps_per_epoch {
            let examples = next_batch(&mut rng)?;
            let batch = model.step_batch(&examples, &mut rng)?;
            let mut t = Tape::new();
            let l = model.loss(&mut t, ps, &batch, cfg.lambda_flow, phase)?;
            let values = [l.mse, l.mmd, l.flow, l.total].map(|v| t.value(v).item());
            for (name, v) in ["L_MSE", "L_MMD", "L_flow", "total"].iter().zip(values) {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{name} is {v} at epoch {epoch}, step {step}"
                    )));
                }
            }
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            let grads = t.grad(l.total)?.for_params(ps);
            let transport_only = phase == Phase::Transport;
            let ae_only = phase == Phase::Autoencoder || cfg.lambda_flow == 0.0;
            opt.update(ps, &grads, |name| {
                let is_transport = name.starts_with(TRANSPORT_PREFIX);
                if transport_only {
                    is_transport
                } else if ae_only {
                    !is_transport
                } else {
                    true
                }
            })?;
        }
        let k = cfg.steps_per_epoch as f64;
        let rec = EpochRecord {
            epoch,
            phase,
            mse: sums[0] / k,
            mmd: sums[1] / k,
            flow: sums[2] / k,
            total: sums[3] / k,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    if !ps.all_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    scalars: usize,
    tensors: Vec<CheckpointEntry>,
}

const CHECKPOINT_FORMAT: &str = "f64le-v1";

/// Writes `<stem>.bin` (64-bit little-endian values in name order) and `<stem>.json` (shapes).
pub fn save_checkpoint(ps: &ParamSet, stem: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(ps.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(ps.len());
    let mut offset = 0;
    for (name, t) in ps.iter() {
        tensors.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        scalars: offset,
        tensors,
    };
    crate::datastore::write_atomic(&stem.with_extension("bin"), &bytes)?;
    crate::datastore::write_atomic(
        &stem.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

/// Loads a checkpoint into `ps`, which fixes the expected names and shapes.
pub fn load_checkpoint(ps: &mut ParamSet, stem: &Path) -> Result<()> {
    let bad = |m: String| Error::Checkpoint(m);
    let jp = stem.with_extension("json");
    let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", jp.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {}", manifest.format)));
    }
    let bp = stem.with_extension("bin");
    let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() != manifest.scalars * 8 {
        return Err(bad(format!("{} bytes for {} values", bytes.len(), manifest.scalars)));
    }
    let saved: BTreeMap<&str, &CheckpointEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if saved.len() != ps.len() || ps.names().any(|n| !saved.contains_key(n)) {
        return Err(bad("parameter names differ from the model layout".into()));
    }
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let e = saved[name.as_str()];
        let expected = ps.get(&name).map(|t| t.shape().to_vec()).unwrap_or_default();
        if e.shape != expected {
            return Err(bad(format!("{name}: saved shape {:?}, model expects {expected:?}", e.shape)));
        }
        let len: usize = e.shape.iter().product();
        let end = (e.offset + len) * 8;
        if end > bytes.len() {
            return Err(bad(format!("{name} runs past the end of the data")));
        }
        let data = bytes[e.offset * 8..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ps.set(&name, Tensor::new(&e.shape, data)?)?;
    }
    Ok(())
}

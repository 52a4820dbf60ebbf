//! Conditional latent transport.
//!
//! Conditions (cell type, perturbation, batch) become three embedding tokens
//! that are pooled into a single condition token `c_seed`. Every backbone
//! block appends `c_seed` after the N cell tokens, runs one attention and
//! perceptron update over the N+1 tokens and drops the condition token
//! again. Cells carry no positional signal, so the backbone stays
//! equivariant in the cell axis.
//!
//! Training follows the straight path `Z_t = (1-t) Z_start + t Z1`. The
//! network either predicts the endpoint `Ẑ1` (x-pred) or the displacement
//! `Û` (v-pred), and the loss is taken in either space. Both losses are the
//! same number for a given prediction since `Ẑ1 - Z1 = Û - U*`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::layers::{GatedMlp, Linear, SelfAttention, NORM_EPS};
use crate::ndmath::{ParamSet, Tape, Tensor, Var};
use crate::setenc::{CellSetBatch, SetEncoder};

/// Number of sinusoidal frequencies in the time features.
pub const TIME_FREQS: usize = 16;

/// Condition vocabulary sizes, fixed by the dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub cell_types: usize,
    pub perturbations: usize,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConditionBatch {
    pub cell_type: Vec<usize>,
    pub perturbation: Vec<usize>,
    pub batch: Vec<usize>,
}

impl ConditionBatch {
    pub fn len(&self) -> usize {
        self.cell_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_type.is_empty()
    }

    pub fn push(&mut self, cell_type: usize, perturbation: usize, batch: usize) {
        self.cell_type.push(cell_type);
        self.perturbation.push(perturbation);
        self.batch.push(batch);
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let n = self.cell_type.len();
        if self.perturbation.len() != n || self.batch.len() != n {
            return Err(Error::Dimension("condition id columns differ in length".into()));
        }
        let cols = [
            ("cell type", &self.cell_type, vocab.cell_types),
            ("perturbation", &self.perturbation, vocab.perturbations),
            ("batch", &self.batch, vocab.batches),
        ];
        for (what, ids, k) in cols {
            if let Some(id) = ids.iter().find(|&&id| id >= k) {
                return Err(Error::Lookup(format!("{what} id {id} outside vocabulary of {k}")));
            }
        }
        Ok(())
    }
}

/// Tape handles for the condition path of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ConditionTokens {
    /// `[B, 3, d_c]` raw embeddings.
    pub c: Var,
    /// `[B, 3, d]` projected tokens.
    pub c_tilde: Var,
    /// `[B, 3]` pooling weights.
    pub alpha: Var,
    /// `[B, 1, d]` pooled condition token.
    pub c_seed: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitVariant {
    #[default]
    Xx,
    Xv,
    Vx,
    Vv,
}

impl JitVariant {
    pub const ALL: [JitVariant; 4] = [JitVariant::Xx, JitVariant::Xv, JitVariant::Vx, JitVariant::Vv];

    /// True when the network outputs the endpoint.
    pub fn predicts_endpoint(self) -> bool {
        matches!(self, JitVariant::Xx | JitVariant::Xv)
    }

    /// True when the loss compares endpoints.
    pub fn endpoint_loss(self) -> bool {
        matches!(self, JitVariant::Xx | JitVariant::Vx)
    }

    pub fn name(self) -> &'static str {
        match self {
            JitVariant::Xx => "xx",
            JitVariant::Xv => "xv",
            JitVariant::Vx => "vx",
            JitVariant::Vv => "vv",
        }
    }
}

impl std::str::FromStr for JitVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        JitVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// How the transport start state is built from the encoded controls.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorMode {
    #[default]
    Control,
    GaussianMix {
        mix: f64,
    },
    MaskedControl {
        rate: f64,
    },
    MaskedGaussianMix {
        mix: f64,
        rate: f64,
    },
}

impl PriorMode {
    /// Short label used on the command line and in reports.
    pub fn name(&self) -> &'static str {
        match self {
            PriorMode::Control => "control",
            PriorMode::GaussianMix { .. } => "gaussmix",
            PriorMode::MaskedControl { .. } => "maskctrl",
            PriorMode::MaskedGaussianMix { .. } => "maskmix",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (mix, rate) = match *self {
            PriorMode::Control => (0.0, 0.0),
            PriorMode::GaussianMix { mix } => (mix, 0.0),
            PriorMode::MaskedControl { rate } => (0.0, rate),
            PriorMode::MaskedGaussianMix { mix, rate } => (mix, rate),
        };
        if !(mix >= 0.0 && mix.is_finite()) {
            return Err(Error::Config(format!("prior mix {mix} must be >= 0")));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Token,
    #[default]
    Seed,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Token => "token",
            Pooling::Seed => "seed",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "token" => Ok(Pooling::Token),
            "seed" => Ok(Pooling::Seed),
            _ => Err(Error::Config(format!("unknown pooling {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub d_c: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pooling: Pooling,
    pub variant: JitVariant,
    pub prior: PriorMode,
    /// Euler steps for displacement-predicting variants at generation time.
    pub steps: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            d_c: 16,
            blocks: 4,
            heads: 1,
            mlp_ratio: 2,
            pooling: Pooling::Seed,
            variant: JitVariant::Xx,
            prior: PriorMode::Control,
            steps: 1,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("transport widths must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("generation needs at least one step".into()));
        }
        self.prior.validate()
    }
}

/// Sinusoidal features of `t`: `[sin(f_k t), cos(f_k t)]` with `f_k` geometric in `[1, 1e4]`.
pub fn time_features(t: f64) -> [f64; 2 * TIME_FREQS] {
    let mut out = [0.0; 2 * TIME_FREQS];
    for k in 0..TIME_FREQS {
        let f = 10f64.powf(4.0 * k as f64 / (TIME_FREQS - 1) as f64);
        out[k] = (f * t).sin();
        out[TIME_FREQS + k] = (f * t).cos();
    }
    out
}

#[derive(Debug, Clone)]
struct InjectBlock {
    norm: String,
    attn: SelfAttention,
    mlp: GatedMlp,
}

/// Condition path, backbone and prediction heads.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: TransportConfig,
    pub vocab: Vocab,
    pub width: usize,
    w_c: String,
    w_p: String,
    w_b: String,
    proj: Linear,
    seed_query: String,
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    token_score: String,
    time_mlp: GatedMlp,
    blocks: Vec<InjectBlock>,
    head_x: Linear,
    head_v: Linear,
}

impl Backbone {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        cfg: &TransportConfig,
        vocab: Vocab,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab.cell_types == 0 || vocab.perturbations == 0 || vocab.batches == 0 {
            return Err(Error::Config("empty condition vocabulary".into()));
        }
        let d_c = cfg.d_c;
        let mut table = |name: &str, k: usize| -> Result<String> {
            let n = format!("bb.embed.{name}");
            ps.init_uniform(&n, &[k, d_c], k, d_c, rng)?;
            Ok(n)
        };
        let w_c = table("cell_type", vocab.cell_types)?;
        let w_p = table("perturbation", vocab.perturbations)?;
        let w_b = table("batch", vocab.batches)?;
        let proj = Linear::init(ps, "bb.proj", d_c, width, true, rng)?;
        let seed_query = "bb.seed.query".to_string();
        ps.init_uniform(&seed_query, &[1, width], 1, width, rng)?;
        let w_q = Linear::init(ps, "bb.seed.q", width, width, false, rng)?;
        let w_k = Linear::init(ps, "bb.seed.k", width, width, false, rng)?;
        let w_v = Linear::init(ps, "bb.seed.v", width, width, false, rng)?;
        let token_score = "bb.token.score".to_string();
        ps.init_uniform(&token_score, &[width, 1], width, 1, rng)?;
        let hidden = cfg.mlp_ratio * width;
        let time_mlp = GatedMlp::init(ps, "bb.time", 2 * TIME_FREQS, hidden, width, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("bb.block{i}");
                let norm = format!("{name}.norm");
                ps.init_const(&norm, &[width], 1.0)?;
                Ok(InjectBlock {
                    norm,
                    attn: SelfAttention::init(ps, &format!("{name}.attn"), width, cfg.heads, rng)?,
                    mlp: GatedMlp::init(ps, &format!("{name}.mlp"), width, hidden, width, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_x = Linear::init(ps, "bb.head_x", width, width, true, rng)?;
        let head_v = Linear::init(ps, "bb.head_v", width, width, true, rng)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            vocab,
            width,
            w_c,
            w_p,
            w_b,
            proj,
            seed_query,
            w_q,
            w_k,
            w_v,
            token_score,
            time_mlp,
            blocks,
            head_x,
            head_v,
        })
    }

    pub fn head_x_weight(&self) -> (&str, Option<&str>) {
        (&self.head_x.w, self.head_x.b.as_deref())
    }

    pub fn head_v_weight(&self) -> (&str, Option<&str>) {
        (&self.head_v.w, self.head_v.b.as_deref())
    }

    /// Stacked `[e_c; e_p; e_b]` as `[B, 3, d_c]`.
    pub fn embed_conditions(&self, t: &mut Tape, ps: &ParamSet, cond: &ConditionBatch) -> Result<Var> {
        cond.validate(&self.vocab)?;
        let b = cond.len();
        let mut parts = Vec::with_capacity(3);
        for (table, ids) in [
            (&self.w_c, &cond.cell_type),
            (&self.w_p, &cond.perturbation),
            (&self.w_b, &cond.batch),
        ] {
            let w = t.param(ps, table)?;
            let e = t.gather(w, ids)?;
            parts.push(t.reshape(e, &[b, 1, self.cfg.d_c])?);
        }
        t.concat(&parts, 1)
    }

    /// Pools projected tokens `[B, 3, d]` into `(c_seed [B, 1, d], α [B, 3])`.
    pub fn seed_aggregate(&self, t: &mut Tape, ps: &ParamSet, c_tilde: Var) -> Result<(Var, Var)> {
        let s = t.shape(c_tilde).to_vec();
        if s.len() != 3 || s[1] != 3 || s[2] != self.width {
            return Err(Error::Dimension(format!("condition tokens {s:?}")));
        }
        let b = s[0];
        let inv = 1.0 / (self.width as f64).sqrt();
        let alpha = match self.cfg.pooling {
            Pooling::Mean => t.constant(Tensor::full(&[b, 3], 1.0 / 3.0)),
            Pooling::Token => {
                let w = t.param(ps, &self.token_score)?;
                let sc = t.linear(c_tilde, w)?;
                let sc = t.reshape(sc, &[b, 3])?;
                let sc = t.scale(sc, inv);
                t.softmax(sc)?
            }
            Pooling::Seed => {
                let q0 = t.param(ps, &self.seed_query)?;
                let q = self.w_q.forward(t, ps, q0)?;
                let k = self.w_k.forward(t, ps, c_tilde)?;
                let qt = t.transpose(q)?;
                let sc = t.linear(k, qt)?;
                let sc = t.reshape(sc, &[b, 3])?;
                let sc = t.scale(sc, inv);
                t.softmax(sc)?
            }
        };
        let v = self.w_v.forward(t, ps, c_tilde)?;
        let a = t.reshape(alpha, &[b, 1, 3])?;
        let c_seed = t.bmm(a, v, false)?;
        Ok((c_seed, alpha))
    }

    pub fn condition_tokens(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        cond: &ConditionBatch,
    ) -> Result<ConditionTokens> {
        let c = self.embed_conditions(t, ps, cond)?;
        let c_tilde = self.proj.forward(t, ps, c)?;
        let (c_seed, alpha) = self.seed_aggregate(t, ps, c_tilde)?;
        Ok(ConditionTokens {
            c,
            c_tilde,
            alpha,
            c_seed,
        })
    }

    /// `[B] → [B, d]` time embedding.
    pub fn time_embedding(&self, t: &mut Tape, ps: &ParamSet, times: &[f64]) -> Result<Var> {
        let feats: Vec<f64> = times.iter().flat_map(|&s| time_features(s)).collect();
        let f = t.constant(Tensor::new(&[times.len(), 2 * TIME_FREQS], feats)?);
        self.time_mlp.forward(t, ps, f)
    }

    /// One conditioned block. With `attend_condition = false` no cell attends
    /// to the condition token.
    pub fn inject_block(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        layer: usize,
        h: Var,
        c_seed: Var,
        t_emb: Var,
        attend_condition: bool,
    ) -> Result<Var> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Argument(format!("no backbone block {layer}")))?;
        let n = t.shape(h)[1];
        let te = t.expand(t_emb, 1, n)?;
        let cells = t.add(h, te)?;
        let x = t.concat(&[cells, c_seed], 1)?;
        let g = t.param(ps, &block.norm)?;
        let u = t.rmsnorm(x, Some(g), NORM_EPS)?;
        let key_len = if attend_condition { None } else { Some(n) };
        let a = block.attn.forward(t, ps, u, key_len)?;
        let m = block.mlp.forward(t, ps, u)?;
        let x = t.add(x, a)?;
        let x = t.add(x, m)?;
        t.narrow(x, 1, 0, n)
    }

    /// `H_t = g(Z_t, t, C)` for `[B, N, d]` inputs and one time per example.
    pub fn backbone(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        z: Var,
        times: &[f64],
        cond: &ConditionBatch,
    ) -> Result<Var> {
        let s = t.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::Dimension(format!(
                "backbone expects [B, N, {}], got {s:?}",
                self.width
            )));
        }
        if times.len() != s[0] || cond.len() != s[0] {
            return Err(Error::Dimension(format!(
                "{} times and {} conditions for batch of {}",
                times.len(),
                cond.len(),
                s[0]
            )));
        }
        let tokens = self.condition_tokens(t, ps, cond)?;
        let t_emb = self.time_embedding(t, ps, times)?;
        let mut h = z;
        for layer in 0..self.blocks.len() {
            h = self.inject_block(t, ps, layer, h, tokens.c_seed, t_emb, true)?;
        }
        Ok(h)
    }

    /// Applies the head selected by `variant`; returns `(Ẑ1, Û)`.
    pub fn jit_predict(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        h: Var,
        z_start: Var,
        variant: JitVariant,
    ) -> Result<(Var, Var)> {
        if variant.predicts_endpoint() {
            let z1 = self.head_x.forward(t, ps, h)?;
            jit_from_endpoint(t, z1, z_start)
        } else {
            let u = self.head_v.forward(t, ps, h)?;
            jit_from_displacement(t, u, z_start)
        }
    }

    /// Flow loss for one batch: builds `Z_t`, runs the backbone and the selected head.
    pub fn flow_loss(
        &self,
        t: &mut Tape,
        ps: &ParamSet,
        z_start: Var,
        z1: Var,
        times: &[f64],
        cond: &ConditionBatch,
    ) -> Result<Var> {
        let zt = interpolate_tape(t, z_start, z1, times)?;
        let h = self.backbone(t, ps, zt, times, cond)?;
        let (zh, uh) = self.jit_predict(t, ps, h, z_start, self.cfg.variant)?;
        jit_loss(t, zh, uh, z_start, z1, self.cfg.variant)
    }

    /// Latent endpoint from a start state.
    pub fn transport(
        &self,
        ps: &ParamSet,
        z_start: &Tensor,
        cond: &ConditionBatch,
        steps: usize,
    ) -> Result<Tensor> {
        if steps == 0 {
            return Err(Error::Argument("generation needs at least one step".into()));
        }
        let b = z_start.shape()[0];
        let variant = self.cfg.variant;
        if variant.predicts_endpoint() {
            let mut t = Tape::new();
            let zs = t.constant(z_start.clone());
            let h = self.backbone(&mut t, ps, zs, &vec![0.0; b], cond)?;
            let (zh, _) = self.jit_predict(&mut t, ps, h, zs, variant)?;
            return Ok(t.value(zh).clone());
        }
        let dt = 1.0 / steps as f64;
        let mut z = z_start.clone();
        for s in 0..steps {
            let mut t = Tape::new();
            let zv = t.constant(z.clone());
            let h = self.backbone(&mut t, ps, zv, &vec![s as f64 * dt; b], cond)?;
            let (_, u) = self.jit_predict(&mut t, ps, h, zv, variant)?;
            for (zi, ui) in z.data_mut().iter_mut().zip(t.value(u).data()) {
                *zi += dt * ui;
            }
        }
        Ok(z)
    }
}

/// `Û = Ẑ1 - Z_start`.
pub fn jit_from_endpoint(t: &mut Tape, z1_hat: Var, z_start: Var) -> Result<(Var, Var)> {
    let u = t.sub(z1_hat, z_start)?;
    Ok((z1_hat, u))
}

/// `Ẑ1 = Z_start + Û`.
pub fn jit_from_displacement(t: &mut Tape, u_hat: Var, z_start: Var) -> Result<(Var, Var)> {
    let z1 = t.add(z_start, u_hat)?;
    Ok((z1, u_hat))
}

/// Mean squared error in the loss space of `variant`.
pub fn jit_loss(
    t: &mut Tape,
    z1_hat: Var,
    u_hat: Var,
    z_start: Var,
    z1: Var,
    variant: JitVariant,
) -> Result<Var> {
    if variant.endpoint_loss() {
        t.mse(z1_hat, z1)
    } else {
        let target = t.sub(z1, z_start)?;
        t.mse(u_hat, target)
    }
}

/// `(1 - t) Z0 + t Z1` elementwise.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    if z0.shape() != z1.shape() {
        return Err(Error::Dimension(format!(
            "interpolate {:?} with {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("t = {t} outside [0, 1]")));
    }
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(z0.shape(), data)
}

/// Per-example interpolation on the tape; `times[i]` applies to example `i`.
pub fn interpolate_tape(t: &mut Tape, z0: Var, z1: Var, times: &[f64]) -> Result<Var> {
    if let Some(s) = times.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Argument(format!("t = {s} outside [0, 1]")));
    }
    let keep: Vec<f64> = times.iter().map(|s| 1.0 - s).collect();
    let a = t.scale_rows(z0, &keep)?;
    let b = t.scale_rows(z1, times)?;
    t.add(a, b)
}

/// Random draws that turn encoded controls into a start state.
#[derive(Debug, Clone, PartialEq)]
pub struct StartNoise {
    mode: PriorMode,
    noise: Option<Tensor>,
    mask: Option<Tensor>,
}

impl StartNoise {
    pub fn draw<R: Rng>(shape: &[usize], mode: PriorMode, rng: &mut R) -> Result<Self> {
        mode.validate()?;
        let gaussian = |rng: &mut R| {
            Tensor::from_fn(shape, |_| {
                let e: f64 = StandardNormal.sample(rng);
                e
            })
        };
        let bernoulli = |rng: &mut R, r: f64| {
            Tensor::from_fn(shape, |_| if rng.random::<f64>() < r { 0.0 } else { 1.0 })
        };
        let (noise, mask) = match mode {
            PriorMode::Control => (None, None),
            PriorMode::GaussianMix { .. } => (Some(gaussian(rng)), None),
            PriorMode::MaskedControl { rate } => (None, Some(bernoulli(rng, rate))),
            PriorMode::MaskedGaussianMix { rate, .. } => {
                let n = gaussian(rng);
                (Some(n), Some(bernoulli(rng, rate)))
            }
        };
        Ok(StartNoise { mode, noise, mask })
    }

    fn mix(&self) -> f64 {
        match self.mode {
            PriorMode::GaussianMix { mix } | PriorMode::MaskedGaussianMix { mix, .. } => mix,
            _ => 1.0,
        }
    }

    pub fn apply(&self, z0: &Tensor) -> Result<Tensor> {
        let mut z = z0.clone();
        if let Some(n) = &self.noise {
            check_shape(n, z0)?;
            let m = self.mix();
            for (zi, e) in z.data_mut().iter_mut().zip(n.data()) {
                *zi = e + m * *zi;
            }
        }
        if let Some(mask) = &self.mask {
            check_shape(mask, z0)?;
            for (zi, k) in z.data_mut().iter_mut().zip(mask.data()) {
                *zi *= k;
            }
        }
        Ok(z)
    }

    pub fn apply_tape(&self, t: &mut Tape, z0: Var) -> Result<Var> {
        let mut z = z0;
        if let Some(n) = &self.noise {
            check_shape(n, t.value(z0))?;
            let scaled = t.scale(z, self.mix());
            let e = t.constant(n.clone());
            z = t.add(e, scaled)?;
        }
        if let Some(mask) = &self.mask {
            check_shape(mask, t.value(z0))?;
            z = t.mul_const(z, mask)?;
        }
        Ok(z)
    }
}

fn check_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "start noise {:?} for latent {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn sample_start<R: Rng>(z0: &Tensor, mode: PriorMode, rng: &mut R) -> Result<Tensor> {
    StartNoise::draw(z0.shape(), mode, rng)?.apply(z0)
}

/// Encodes controls, transports them under `cond` and decodes the endpoint.
pub fn generate<R: Rng>(
    encoder: &SetEncoder,
    backbone: &Backbone,
    ps: &ParamSet,
    x0: &CellSetBatch,
    cond: &ConditionBatch,
    steps: usize,
    rng: &mut R,
) -> Result<CellSetBatch> {
    if !ps.all_finite() {
        return Err(Error::Generation("model parameters are not finite".into()));
    }
    let z0 = encoder.encode_batch(ps, x0)?;
    let z_start = sample_start(z0.tensor(), backbone.cfg.prior, rng)?;
    let z1 = backbone.transport(ps, &z_start, cond, steps)?;
    let mut t = Tape::new();
    let zv = t.constant(z1);
    let xv = encoder.decode(&mut t, ps, zv)?;
    let x = t.value(xv).clone();
    if !x.all_finite() {
        return Err(Error::Generation("decoded expression is not finite".into()));
    }
    // Expression is non-negative; the decoder is unconstrained.
    CellSetBatch::new(x.map(|v| v.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::grad_check;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const VOCAB: Vocab = Vocab {
        cell_types: 3,
        perturbations: 4,
        batches: 2,
    };

    fn setup(pooling: Pooling, variant: JitVariant, seed: u64) -> (Backbone, ParamSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let cfg = TransportConfig {
            d_c: 3,
            blocks: 2,
            heads: 2,
            pooling,
            variant,
            ..Default::default()
        };
        let bb = Backbone::init(&mut ps, &cfg, VOCAB, 4, &mut rng).unwrap();
        (bb, ps, rng)
    }

    fn cond2() -> ConditionBatch {
        ConditionBatch {
            cell_type: vec![0, 2],
            perturbation: vec![3, 1],
            batch: vec![1, 0],
        }
    }

    #[test]
    fn embedding_selects_rows() {
        let (bb, mut ps, _) = setup(Pooling::Seed, JitVariant::Xx, 0);
        let w = Tensor::new(&[3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        ps.set("bb.embed.cell_type", w.clone()).unwrap();
        let cond = ConditionBatch {
            cell_type: vec![2, 0, 2],
            perturbation: vec![1, 1, 1],
            batch: vec![0, 0, 0],
        };
        let mut t = Tape::new();
        let c = bb.embed_conditions(&mut t, &ps, &cond).unwrap();
        let c = t.value(c);
        assert_eq!(c.shape(), &[3, 3, 3]);
        assert_eq!(&c.data()[0..3], w.row(2));
        assert_eq!(&c.data()[9..12], w.row(0));
        assert_eq!(c.data()[..9].to_vec(), c.data()[18..].to_vec());
        let p = ps.get("bb.embed.perturbation").unwrap();
        assert_eq!(&c.data()[3..6], p.row(1));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let (bb, ps, _) = setup(Pooling::Seed, JitVariant::Xx, 0);
        let mut t = Tape::new();
        let cond = ConditionBatch {
            cell_type: vec![3],
            perturbation: vec![0],
            batch: vec![0],
        };
        assert!(matches!(bb.embed_conditions(&mut t, &ps, &cond), Err(Error::Lookup(_))));
    }

    #[test]
    fn alpha_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pooling in [Pooling::Mean, Pooling::Token, Pooling::Seed] {
            let (bb, ps, _) = setup(pooling, JitVariant::Xx, 1);
            for _ in 0..10 {
                let ct = Tensor::from_fn(&[5, 3, 4], |_| rng.random_range(-3.0..3.0));
                let mut t = Tape::new();
                let v = t.constant(ct);
                let (_, alpha) = bb.seed_aggregate(&mut t, &ps, v).unwrap();
                for row in t.value(alpha).data().chunks(3) {
                    assert!(row.iter().all(|a| *a > 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_tokens_pool_to_their_value() {
        let (bb, ps, _) = setup(Pooling::Seed, JitVariant::Xx, 2);
        let tok = [0.3, -1.0, 2.0, 0.5];
        let ct = Tensor::new(&[1, 3, 4], tok.repeat(3)).unwrap();
        let mut t = Tape::new();
        let v = t.constant(ct);
        let (c_seed, _) = bb.seed_aggregate(&mut t, &ps, v).unwrap();
        let wv = ps.get("bb.seed.v.w").unwrap();
        let expected = crate::ndmath::matmul(&Tensor::new(&[1, 4], tok.to_vec()).unwrap(), wv).unwrap();
        assert!(t.value(c_seed).reshape(&[1, 4]).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn seed_pooling_width_one_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let cfg = TransportConfig {
            d_c: 1,
            blocks: 1,
            ..Default::default()
        };
        let bb = Backbone::init(&mut ps, &cfg, VOCAB, 1, &mut rng).unwrap();
        ps.set("bb.seed.query", Tensor::new(&[1, 1], vec![2.0]).unwrap()).unwrap();
        ps.set("bb.seed.q.w", Tensor::new(&[1, 1], vec![0.5]).unwrap()).unwrap();
        ps.set("bb.seed.k.w", Tensor::new(&[1, 1], vec![3.0]).unwrap()).unwrap();
        ps.set("bb.seed.v.w", Tensor::new(&[1, 1], vec![-2.0]).unwrap()).unwrap();
        let toks = [1.0, -0.5, 0.25];
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(&[1, 3, 1], toks.to_vec()).unwrap());
        let (c_seed, _) = bb.seed_aggregate(&mut t, &ps, v).unwrap();
        // q = 2·0.5 = 1, k_j = 3·x_j, score_j = k_j / sqrt(1)
        let scores: Vec<f64> = toks.iter().map(|x| 3.0 * x).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let manual: f64 = scores
            .iter()
            .zip(&toks)
            .map(|(s, x)| s.exp() / z * (-2.0 * x))
            .sum();
        assert!((t.value(c_seed).item() - manual).abs() < 1e-12);
    }

    fn run_block(bb: &Backbone, ps: &ParamSet, h: &Tensor, c: &Tensor, te: &Tensor, attend: bool) -> Tensor {
        let mut t = Tape::new();
        let (hv, cv, tv) = (t.constant(h.clone()), t.constant(c.clone()), t.constant(te.clone()));
        let out = bb.inject_block(&mut t, ps, 0, hv, cv, tv, attend).unwrap();
        t.value(out).clone()
    }

    #[test]
    fn inject_block_properties() {
        let (bb, ps, mut rng) = setup(Pooling::Seed, JitVariant::Xx, 4);
        let h = Tensor::from_fn(&[2, 5, 4], |_| rng.random_range(-1.0..1.0));
        let c = Tensor::from_fn(&[2, 1, 4], |_| rng.random_range(-1.0..1.0));
        let te = Tensor::from_fn(&[2, 4], |_| rng.random_range(-1.0..1.0));
        let out = run_block(&bb, &ps, &h, &c, &te, true);
        assert_eq!(out.shape(), &[2, 5, 4]);

        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let outp = run_block(&bb, &ps, &h.permute_axis(1, &perm), &c, &te, true);
        assert!(outp.max_abs_diff(&out.permute_axis(1, &perm)) < 1e-9);

        // Without access to the condition token, cell outputs ignore it.
        let other = c.map(|v| v * 5.0 - 1.0);
        let a = run_block(&bb, &ps, &h, &c, &te, false);
        let b = run_block(&bb, &ps, &h, &other, &te, false);
        assert_eq!(a, b);
        // ... and the condition does matter when it can be attended.
        let a = run_block(&bb, &ps, &h, &c, &te, true);
        let b = run_block(&bb, &ps, &h, &other, &te, true);
        assert!(a.max_abs_diff(&b) > 1e-6);

        let single = run_block(&bb, &ps, &h.narrow(1, 0, 1), &c, &te, true);
        assert_eq!(single.shape(), &[2, 1, 4]);
    }

    #[test]
    fn interpolation_endpoints() {
        let z0 = Tensor::new(&[3], vec![0.1, -7.3, 1e300]).unwrap();
        let z1 = Tensor::new(&[3], vec![2.2, 0.7, -3.0]).unwrap();
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
        let mid = interpolate(&z0, &z1, 0.5).unwrap();
        for i in 0..3 {
            assert!((mid.data()[i] - (z0.data()[i] + z1.data()[i]) / 2.0).abs() <= 1e-12 * mid.data()[i].abs().max(1.0));
        }
        assert!(matches!(interpolate(&z0, &z1, 1.5), Err(Error::Argument(_))));
        assert!(matches!(interpolate(&z0, &z1, -0.1), Err(Error::Argument(_))));

        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 1], vec![0.3, 0.3]).unwrap());
        let b = t.constant(Tensor::new(&[2, 1], vec![-1.1, -1.1]).unwrap());
        let zt = interpolate_tape(&mut t, a, b, &[0.0, 1.0]).unwrap();
        assert_eq!(t.value(zt).data(), &[0.3, -1.1]);
    }

    #[test]
    fn start_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::from_fn(&[4, 6, 3], |_| rng.random_range(-2.0..2.0));
        assert_eq!(sample_start(&z0, PriorMode::Control, &mut rng).unwrap(), z0);
        assert_eq!(
            sample_start(&z0, PriorMode::MaskedControl { rate: 0.0 }, &mut rng).unwrap(),
            z0
        );
        let all = sample_start(&z0, PriorMode::MaskedControl { rate: 1.0 }, &mut rng).unwrap();
        assert!(all.data().iter().all(|v| *v == 0.0));

        let big = Tensor::zeros(&[100_000]);
        let e = sample_start(&big, PriorMode::GaussianMix { mix: 0.0 }, &mut rng).unwrap();
        let n = e.len() as f64;
        let mean = e.data().iter().sum::<f64>() / n;
        let var = e.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");

        let masked = sample_start(&big.map(|_| 1.0), PriorMode::MaskedControl { rate: 0.3 }, &mut rng).unwrap();
        let zeros = masked.data().iter().filter(|v| **v == 0.0).count() as f64 / n;
        assert!((zeros - 0.3).abs() < 0.01);

        assert!(PriorMode::GaussianMix { mix: -1.0 }.validate().is_err());
        assert!(PriorMode::MaskedControl { rate: 1.5 }.validate().is_err());
    }

    #[test]
    fn start_noise_tape_matches_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = Tensor::from_fn(&[2, 3, 2], |_| rng.random_range(-2.0..2.0));
        let mode = PriorMode::MaskedGaussianMix { mix: 0.5, rate: 0.4 };
        let noise = StartNoise::draw(z0.shape(), mode, &mut rng).unwrap();
        let mut t = Tape::new();
        let v = t.constant(z0.clone());
        let s = noise.apply_tape(&mut t, v).unwrap();
        assert!(t.value(s).max_abs_diff(&noise.apply(&z0).unwrap()) < 1e-15);
    }

    #[test]
    fn backbone_contract() {
        let (bb, ps, mut rng) = setup(Pooling::Seed, JitVariant::Xx, 7);
        let z = Tensor::from_fn(&[2, 6, 4], |_| rng.random_range(-1.0..1.0));
        let times = [0.2, 0.9];
        let run = |z: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(z.clone());
            let h = bb.backbone(&mut t, &ps, v, &times, &cond2()).unwrap();
            t.value(h).clone()
        };
        let h = run(&z);
        assert_eq!(h.shape(), &[2, 6, 4]);
        assert_eq!(h, run(&z));
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            assert!(run(&z.permute_axis(1, &perm)).max_abs_diff(&h.permute_axis(1, &perm)) < 1e-9);
        }
    }

    #[test]
    fn jit_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zs = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let z1 = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let pred = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::new();
        let (zsv, z1v, pv) = (t.constant(zs.clone()), t.constant(z1.clone()), t.constant(pred.clone()));

        // Endpoint stub returning Z_start gives zero displacement.
        let (_, u) = jit_from_endpoint(&mut t, zsv, zsv).unwrap();
        assert!(t.value(u).data().iter().all(|v| *v == 0.0));
        // Zero displacement leaves the start state.
        let zero = t.constant(Tensor::zeros(&[2, 3, 4]));
        let (e, _) = jit_from_displacement(&mut t, zero, zsv).unwrap();
        assert_eq!(t.value(e), &zs);
        // Round trip.
        let (e, u) = jit_from_endpoint(&mut t, pv, zsv).unwrap();
        let back = t.add(u, zsv).unwrap();
        let rt = t.value(back).max_abs_diff(t.value(e));
        assert!(rt <= 4.0 * f64::EPSILON, "{rt}");

        for head_out in [pv, z1v] {
            for v in JitVariant::ALL {
                let (e, u) = if v.predicts_endpoint() {
                    jit_from_endpoint(&mut t, head_out, zsv).unwrap()
                } else {
                    jit_from_displacement(&mut t, head_out, zsv).unwrap()
                };
                let lx = jit_loss(&mut t, e, u, zsv, z1v, JitVariant::Xx).unwrap();
                let lv = jit_loss(&mut t, e, u, zsv, z1v, JitVariant::Vv).unwrap();
                assert!((t.value(lx).item() - t.value(lv).item()).abs() < 1e-10);
            }
        }
        let (e, u) = jit_from_endpoint(&mut t, z1v, zsv).unwrap();
        let lx = jit_loss(&mut t, e, u, zsv, z1v, JitVariant::Xx).unwrap();
        assert_eq!(t.value(lx).item(), 0.0);
        let target = t.sub(z1v, zsv).unwrap();
        let (e, u) = jit_from_displacement(&mut t, target, zsv).unwrap();
        let lv = jit_loss(&mut t, e, u, zsv, z1v, JitVariant::Vv).unwrap();
        assert_eq!(t.value(lv).item(), 0.0);
    }

    #[test]
    fn all_variants_pass_grad_check() {
        for (i, v) in JitVariant::ALL.into_iter().enumerate() {
            let (bb, ps, mut rng) = setup(Pooling::Seed, v, 10 + i as u64);
            let zs = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
            let z1 = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
            let check = grad_check(
                |t, p| {
                    let a = t.constant(zs.clone());
                    let b = t.constant(z1.clone());
                    bb.flow_loss(t, p, a, b, &[0.3, 0.7], &cond2())
                },
                &ps,
                1e-5,
                6,
                i as u64,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{v:?}: {check:?}");
        }
    }

    #[test]
    fn pooling_modes_pass_grad_check() {
        for pooling in [Pooling::Mean, Pooling::Token] {
            let (bb, ps, mut rng) = setup(pooling, JitVariant::Xx, 20);
            let zs = Tensor::from_fn(&[2, 2, 4], |_| rng.random_range(-1.0..1.0));
            let z1 = Tensor::from_fn(&[2, 2, 4], |_| rng.random_range(-1.0..1.0));
            let check = grad_check(
                |t, p| {
                    let a = t.constant(zs.clone());
                    let b = t.constant(z1.clone());
                    bb.flow_loss(t, p, a, b, &[0.5, 0.1], &cond2())
                },
                &ps,
                1e-5,
                4,
                3,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{pooling:?}: {check:?}");
        }
    }

    #[test]
    fn endpoint_shortcut_at_t_one() {
        // At t = 1 with control anchoring Z_t = Z1, so an identity predictor is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zs = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let z1 = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let mut t = Tape::new();
        let (a, b) = (t.constant(zs), t.constant(z1));
        let zt = interpolate_tape(&mut t, a, b, &[1.0, 1.0]).unwrap();
        let (e, u) = jit_from_endpoint(&mut t, zt, a).unwrap();
        let l = jit_loss(&mut t, e, u, a, b, JitVariant::Xx).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn euler_with_zero_head_stays_put() {
        let (bb, mut ps, mut rng) = setup(Pooling::Seed, JitVariant::Vv, 11);
        let (w, b) = bb.head_v_weight();
        let (w, b) = (w.to_string(), b.unwrap().to_string());
        ps.set(&w, Tensor::zeros(&[4, 4])).unwrap();
        ps.set(&b, Tensor::zeros(&[4])).unwrap();
        let zs = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
        assert_eq!(bb.transport(&ps, &zs, &cond2(), 3).unwrap(), zs);
        assert!(bb.transport(&ps, &zs, &cond2(), 0).is_err());
    }

    #[test]
    fn time_features_are_bounded_and_distinct() {
        let a = time_features(0.0);
        assert!(a[..TIME_FREQS].iter().all(|v| *v == 0.0));
        assert!(a[TIME_FREQS..].iter().all(|v| *v == 1.0));
        let b = time_features(0.5);
        assert!(b.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn variant_and_pooling_parse() {
        assert_eq!("vx".parse::<JitVariant>().unwrap(), JitVariant::Vx);
        assert!("xy".parse::<JitVariant>().is_err());
        assert_eq!("token".parse::<Pooling>().unwrap(), Pooling::Token);
    }
}

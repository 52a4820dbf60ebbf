//! Hierarchical set-aware encoder and decoder.
//!
//! A cell's expression vector is cut into `gene_tokens` contiguous chunks,
//! each chunk is embedded and a small attention stack mixes the chunks
//! within the cell. Cells never interact at this stage. The per-cell
//! embeddings are then pooled into a population summary
//! `s = rho(mean_i phi(h_i))` which is concatenated back onto every cell and
//! mapped to the latent width by `psi`. Nothing depends on cell order, so the
//! encoder is equivariant and the summary invariant under cell permutations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::layers::{GatedMlp, Linear, PreNormBlock, NORM_EPS};
use crate::ndmath::{ParamSet, Tape, Tensor, Var};

/// `B × N × G` expression values; cells within a set are unordered.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSetBatch(Tensor);

impl CellSetBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Dimension(format!(
                "cell set batch must be B×N×G, got {:?}",
                values.shape()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Ingestion(format!(
                "expression values must be finite and non-negative, found {v}"
            )));
        }
        Ok(CellSetBatch(values))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn genes(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `B × N × d` latent populations.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch(Tensor);

impl LatentBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Dimension(format!(
                "latent batch must be B×N×d, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("latent values are not finite".into()));
        }
        Ok(LatentBatch(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of per-cell embeddings `h_i`.
    pub d_h: usize,
    pub d_phi: usize,
    pub d_s: usize,
    /// Latent width.
    pub d: usize,
    /// Number of gene tokens per cell; must divide the gene count.
    pub gene_tokens: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Hidden width of every gated perceptron, as a multiple of its input width.
    pub mlp_ratio: usize,
    pub lambda_mmd: f64,
    pub bandwidths: Vec<f64>,
    /// Normalize each latent cell to unit RMS.
    pub latent_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_h: 64,
            d_phi: 32,
            d_s: 32,
            d: 32,
            gene_tokens: 4,
            blocks: 1,
            heads: 1,
            mlp_ratio: 2,
            lambda_mmd: 1.0,
            bandwidths: vec![1.0, 2.0, 4.0, 8.0],
            latent_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, genes: usize) -> Result<()> {
        let widths = [self.d_h, self.d_phi, self.d_s, self.d, self.gene_tokens, self.heads];
        if widths.contains(&0) || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder widths must be at least 1".into()));
        }
        if !genes.is_multiple_of(self.gene_tokens) {
            return Err(Error::Config(format!(
                "{} gene tokens do not divide {genes} genes",
                self.gene_tokens
            )));
        }
        if self.lambda_mmd < 0.0 || !self.lambda_mmd.is_finite() {
            return Err(Error::Config(format!("lambda_mmd = {}", self.lambda_mmd)));
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("MMD bandwidths must be positive".into()));
        }
        Ok(())
    }
}

/// Permutation-invariant pooling `rho(mean_i phi(h_i))` over axis 1 of `[B, N, ·]`.
pub fn deep_sets_pool(
    t: &mut Tape,
    h: Var,
    phi: impl FnOnce(&mut Tape, Var) -> Result<Var>,
    rho: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    if t.shape(h).len() != 3 || t.shape(h)[1] == 0 {
        return Err(Error::Argument("pooling needs at least one cell".into()));
    }
    let f = phi(t, h)?;
    let m = t.mean_axis(f, 1)?;
    rho(t, m)
}

#[derive(Debug, Clone)]
pub struct SetEncoder {
    pub cfg: EncoderConfig,
    pub genes: usize,
    token_embed: Linear,
    pos: String,
    blocks: Vec<PreNormBlock>,
    out_norm: String,
    phi: GatedMlp,
    rho: GatedMlp,
    psi: GatedMlp,
    decoder: GatedMlp,
}

impl SetEncoder {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        cfg: &EncoderConfig,
        genes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(genes)?;
        let chunk = genes / cfg.gene_tokens;
        let r = cfg.mlp_ratio;
        let token_embed = Linear::init(ps, "enc.embed", chunk, cfg.d_h, true, rng)?;
        let pos = "enc.pos".to_string();
        ps.init_uniform(&pos, &[cfg.gene_tokens, cfg.d_h], cfg.gene_tokens, cfg.d_h, rng)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                PreNormBlock::init(
                    ps,
                    &format!("enc.block{i}"),
                    cfg.d_h,
                    cfg.heads,
                    r * cfg.d_h,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out_norm = "enc.norm".to_string();
        ps.init_const(&out_norm, &[cfg.d_h], 1.0)?;
        let phi = GatedMlp::init(ps, "enc.phi", cfg.d_h, r * cfg.d_h, cfg.d_phi, rng)?;
        let rho = GatedMlp::init(ps, "enc.rho", cfg.d_phi, r * cfg.d_phi, cfg.d_s, rng)?;
        let fused = cfg.d_h + cfg.d_s;
        let psi = GatedMlp::init(ps, "enc.psi", fused, r * fused, cfg.d, rng)?;
        let decoder = GatedMlp::init(ps, "dec", cfg.d, r * cfg.d.max(genes / 2), genes, rng)?;
        Ok(SetEncoder {
            cfg: cfg.clone(),
            genes,
            token_embed,
            pos,
            blocks,
            out_norm,
            phi,
            rho,
            psi,
            decoder,
        })
    }

    /// Name of the first-layer weight of `psi`; rows `d_h..` read the summary.
    pub fn psi_input_weight(&self) -> &str {
        &self.psi.input.w
    }

    /// Per-cell embeddings `[B, N, G] → [B, N, d_h]`; cells are encoded independently.
    pub fn encode_cells(&self, t: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.genes {
            return Err(Error::Dimension(format!(
                "encoder expects [B, N, {}], got {s:?}",
                self.genes
            )));
        }
        let (b, n) = (s[0], s[1]);
        let tokens = self.cfg.gene_tokens;
        let chunk = self.genes / tokens;
        let xt = t.reshape(x, &[b * n, tokens, chunk])?;
        let e = self.token_embed.forward(t, ps, xt)?;
        let pos = t.param(ps, &self.pos)?;
        let mut h = t.add_broadcast(e, pos)?;
        for block in &self.blocks {
            h = block.forward(t, ps, h)?;
        }
        let g = t.param(ps, &self.out_norm)?;
        let h = t.rmsnorm(h, Some(g), NORM_EPS)?;
        let pooled = t.mean_axis(h, 1)?;
        t.reshape(pooled, &[b, n, self.cfg.d_h])
    }

    /// Population summary `[B, N, d_h] → [B, d_s]`.
    pub fn aggregate(&self, t: &mut Tape, ps: &ParamSet, h: Var) -> Result<Var> {
        deep_sets_pool(
            t,
            h,
            |t, v| self.phi.forward(t, ps, v),
            |t, v| self.rho.forward(t, ps, v),
        )
    }

    /// `z_i = psi(h_i, s)` for every cell.
    pub fn fuse(&self, t: &mut Tape, ps: &ParamSet, h: Var, s: Var) -> Result<Var> {
        let n = t.shape(h)[1];
        let se = t.expand(s, 1, n)?;
        let cat = t.concat(&[h, se], 2)?;
        let z = self.psi.forward(t, ps, cat)?;
        if self.cfg.latent_norm {
            t.rmsnorm(z, None, NORM_EPS)
        } else {
            Ok(z)
        }
    }

    pub fn encode(&self, t: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.encode_cells(t, ps, x)?;
        let s = self.aggregate(t, ps, h)?;
        self.fuse(t, ps, h, s)
    }

    /// Cell-wise reconstruction `[B, N, d] → [B, N, G]`.
    pub fn decode(&self, t: &mut Tape, ps: &ParamSet, z: Var) -> Result<Var> {
        let s = t.shape(z);
        if s.len() != 3 || s[2] != self.cfg.d {
            return Err(Error::Dimension(format!(
                "decoder expects width {}, got {s:?}",
                self.cfg.d
            )));
        }
        self.decoder.forward(t, ps, z)
    }

    pub fn encode_batch(&self, ps: &ParamSet, x: &CellSetBatch) -> Result<LatentBatch> {
        let mut t = Tape::new();
        let xv = t.constant(x.tensor().clone());
        let z = self.encode(&mut t, ps, xv)?;
        LatentBatch::new(t.value(z).clone())
    }

    pub fn decode_batch(&self, ps: &ParamSet, z: &LatentBatch) -> Result<Tensor> {
        let mut t = Tape::new();
        let zv = t.constant(z.tensor().clone());
        let x = self.decode(&mut t, ps, zv)?;
        Ok(t.value(x).clone())
    }
}

fn gaussian_kernel_sum(sqdist: f64, bandwidths: &[f64]) -> f64 {
    bandwidths
        .iter()
        .map(|s| (-sqdist / (2.0 * s * s)).exp())
        .sum()
}

/// Sum of `values` that does not depend on their order.
fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Biased (V-statistic) squared MMD between row sets `a` (n×D) and `b` (m×D)
/// with kernel `k(x, y) = Σ_σ exp(-‖x-y‖² / 2σ²)`.
pub fn mmd2(a: &Tensor, b: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::Dimension(format!(
            "mmd2 on {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.shape()[0], b.shape()[0]);
    if n == 0 || m == 0 {
        return Err(Error::Argument("mmd2 needs non-empty sets".into()));
    }
    let k = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        gaussian_kernel_sum(d, bandwidths)
    };
    let within = |s: &Tensor, len: usize| {
        let mut terms = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                terms.push(k(s.row(i), s.row(j)));
            }
        }
        order_free_sum(terms) / (len * len) as f64
    };
    let mut cross = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            cross.push(k(a.row(i), b.row(j)));
        }
    }
    let cross = order_free_sum(cross) / (n * m) as f64;
    Ok(within(a, n) + within(b, m) - 2.0 * cross)
}

/// Per-set squared MMD for `[B, n, D]` against `[B, m, D]`, returned as `[B]`.
pub fn mmd2_sets(t: &mut Tape, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var> {
    let kernel = |t: &mut Tape, d: Var| -> Result<Var> {
        let bt = t.shape(d)[0];
        let mut acc: Option<Var> = None;
        for s in bandwidths {
            let scaled = t.scale(d, -1.0 / (2.0 * s * s));
            let e = t.exp(scaled);
            acc = Some(match acc {
                Some(prev) => t.add(prev, e)?,
                None => e,
            });
        }
        let k = acc.ok_or_else(|| Error::Config("no MMD bandwidths".into()))?;
        let flat = t.reshape(k, &[bt, t.value(k).len() / bt.max(1)])?;
        t.mean_axis(flat, 1)
    };
    let daa = t.pair_sqdist(a, a)?;
    let dbb = t.pair_sqdist(b, b)?;
    let dab = t.pair_sqdist(a, b)?;
    let kaa = kernel(t, daa)?;
    let kbb = kernel(t, dbb)?;
    let kab = kernel(t, dab)?;
    let within = t.add(kaa, kbb)?;
    let cross = t.scale(kab, 2.0);
    t.sub(within, cross)
}

#[derive(Debug, Clone, Copy)]
pub struct AeLoss {
    pub total: Var,
    pub mse: Var,
    pub mmd: Var,
}

/// `L_MSE + λ L_MMD` with both terms summed over the control and perturbed populations.
pub fn ae_loss(
    t: &mut Tape,
    x0: Var,
    x1: Var,
    xh0: Var,
    xh1: Var,
    lambda_mmd: f64,
    bandwidths: &[f64],
) -> Result<AeLoss> {
    if lambda_mmd < 0.0 {
        return Err(Error::Config(format!("lambda_mmd = {lambda_mmd} < 0")));
    }
    let m0 = t.mse(xh0, x0)?;
    let m1 = t.mse(xh1, x1)?;
    let mse = t.add(m0, m1)?;
    let d0 = mmd2_sets(t, xh0, x0, bandwidths)?;
    let d1 = mmd2_sets(t, xh1, x1, bandwidths)?;
    let d0 = t.mean(d0);
    let d1 = t.mean(d1);
    let mmd = t.add(d0, d1)?;
    let weighted = t.scale(mmd, lambda_mmd);
    let total = t.add(mse, weighted)?;
    Ok(AeLoss { total, mse, mmd })
}

/// Value-level [`ae_loss`].
pub fn ae_loss_value(
    x0: &Tensor,
    x1: &Tensor,
    xh0: &Tensor,
    xh1: &Tensor,
    lambda_mmd: f64,
    bandwidths: &[f64],
) -> Result<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = [x0, x1, xh0, xh1]
        .iter()
        .map(|x| t.constant((*x).clone()))
        .collect();
    let l = ae_loss(&mut t, vars[0], vars[1], vars[2], vars[3], lambda_mmd, bandwidths)?;
    Ok(t.value(l.total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::grad_check;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_h: 8,
            d_phi: 6,
            d_s: 5,
            d: 4,
            gene_tokens: 4,
            blocks: 2,
            ..Default::default()
        }
    }

    fn random_x(rng: &mut ChaCha8Rng, b: usize, n: usize, g: usize) -> Tensor {
        Tensor::from_fn(&[b, n, g], |_| rng.random_range(0.0..3.0))
    }

    fn run<F: FnOnce(&mut Tape, Var) -> Result<Var>>(x: &Tensor, f: F) -> Tensor {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let out = f(&mut t, xv).unwrap();
        t.value(out).clone()
    }

    fn setup(seed: u64) -> (SetEncoder, ParamSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let enc = SetEncoder::init(&mut ps, &small_cfg(), 16, &mut rng).unwrap();
        (enc, ps, rng)
    }

    #[test]
    fn config_errors() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig {
            gene_tokens: 3,
            ..small_cfg()
        };
        assert!(matches!(
            SetEncoder::init(&mut ps, &cfg, 16, &mut rng),
            Err(Error::Config(_))
        ));
        let cfg = EncoderConfig {
            lambda_mmd: -1.0,
            ..small_cfg()
        };
        assert!(matches!(cfg.validate(16), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_and_single_cell() {
        let (enc, ps, mut rng) = setup(1);
        let x = random_x(&mut rng, 2, 5, 16);
        let z = run(&x, |t, v| enc.encode(t, &ps, v));
        assert_eq!(z.shape(), &[2, 5, 4]);
        let xr = run(&x, |t, v| {
            let z = enc.encode(t, &ps, v)?;
            enc.decode(t, &ps, z)
        });
        assert_eq!(xr.shape(), &[2, 5, 16]);

        let single = random_x(&mut rng, 1, 1, 16);
        let h = run(&single, |t, v| enc.encode_cells(t, &ps, v));
        assert_eq!(h.shape(), &[1, 1, 8]);
    }

    #[test]
    fn duplicated_cells_share_rows() {
        let (enc, ps, mut rng) = setup(2);
        let mut x = random_x(&mut rng, 1, 4, 16);
        let first: Vec<f64> = x.data()[..16].to_vec();
        x.data_mut()[48..64].copy_from_slice(&first);
        let h = run(&x, |t, v| enc.encode_cells(t, &ps, v));
        assert!(h.row(0).iter().zip(h.row(3)).all(|(a, b)| (a - b).abs() < 1e-12));
        let z = run(&x, |t, v| enc.encode(t, &ps, v));
        assert!(z.row(0).iter().zip(z.row(3)).all(|(a, b)| (a - b).abs() < 1e-12));
        let xr = run(&z, |t, v| enc.decode(t, &ps, v));
        assert!(xr.row(0).iter().zip(xr.row(3)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn permutation_symmetries() {
        let (enc, ps, mut rng) = setup(3);
        for _ in 0..10 {
            let x = random_x(&mut rng, 2, 6, 16);
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let px = x.permute_axis(1, &perm);

            let h = run(&x, |t, v| enc.encode_cells(t, &ps, v));
            let hp = run(&px, |t, v| enc.encode_cells(t, &ps, v));
            assert!(hp.max_abs_diff(&h.permute_axis(1, &perm)) < 1e-9);

            let s = run(&h, |t, v| enc.aggregate(t, &ps, v));
            let sp = run(&hp, |t, v| enc.aggregate(t, &ps, v));
            assert!(s.max_abs_diff(&sp) < 1e-9);

            let z = run(&x, |t, v| enc.encode(t, &ps, v));
            let zp = run(&px, |t, v| enc.encode(t, &ps, v));
            assert!(zp.max_abs_diff(&z.permute_axis(1, &perm)) < 1e-9);

            let xr = run(&z, |t, v| enc.decode(t, &ps, v));
            let xrp = run(&zp, |t, v| enc.decode(t, &ps, v));
            assert!(xrp.max_abs_diff(&xr.permute_axis(1, &perm)) < 1e-9);
        }
    }

    #[test]
    fn identity_pool_is_mean() {
        let h = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 5.0, -2.0, 0.5]).unwrap();
        let s = run(&h, |t, v| deep_sets_pool(t, v, |_, x| Ok(x), |_, x| Ok(x)));
        assert_eq!(s.data(), &[3.0, 0.0, 1.75]);
    }

    #[test]
    fn identical_cells_pool_to_rho_phi() {
        let (enc, ps, _) = setup(4);
        let one = Tensor::new(&[1, 1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let many = Tensor::new(&[1, 3, 8], one.data().repeat(3)).unwrap();
        let a = run(&one, |t, v| enc.aggregate(t, &ps, v));
        let b = run(&many, |t, v| enc.aggregate(t, &ps, v));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn fuse_ignores_summary_when_its_weights_vanish() {
        let (enc, mut ps, mut rng) = setup(5);
        let name = enc.psi_input_weight().to_string();
        let mut w = ps.get(&name).unwrap().clone();
        let cols = w.shape()[1];
        for r in enc.cfg.d_h..w.shape()[0] {
            for c in 0..cols {
                w.data_mut()[r * cols + c] = 0.0;
            }
        }
        ps.set(&name, w).unwrap();
        let h = Tensor::from_fn(&[1, 3, 8], |_| rng.random_range(-1.0..1.0));
        let fused = |s: Tensor| {
            let mut t = Tape::new();
            let hv = t.constant(h.clone());
            let sv = t.constant(s);
            let z = enc.fuse(&mut t, &ps, hv, sv).unwrap();
            t.value(z).clone()
        };
        let a = fused(Tensor::zeros(&[1, 5]));
        let b = fused(Tensor::from_fn(&[1, 5], |i| i as f64 - 2.0));
        assert_eq!(a, b);
    }

    #[test]
    fn encode_is_deterministic() {
        let (enc, ps, mut rng) = setup(6);
        let x = CellSetBatch::new(random_x(&mut rng, 2, 3, 16)).unwrap();
        assert_eq!(enc.encode_batch(&ps, &x).unwrap(), enc.encode_batch(&ps, &x).unwrap());
        let (enc2, ps2, _) = setup(6);
        assert_eq!(enc.encode_batch(&ps, &x).unwrap(), enc2.encode_batch(&ps2, &x).unwrap());
    }

    #[test]
    fn mmd_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bw = [1.0, 2.0, 4.0, 8.0];
        for _ in 0..20 {
            let a = Tensor::from_fn(&[5, 3], |_| rng.random_range(-2.0..2.0));
            let b = Tensor::from_fn(&[7, 3], |_| rng.random_range(-2.0..2.0));
            assert!(mmd2(&a, &a, &bw).unwrap().abs() < 1e-10);
            assert_eq!(mmd2(&a, &b, &bw).unwrap(), mmd2(&b, &a, &bw).unwrap());
            assert!(mmd2(&a, &b, &bw).unwrap() >= -1e-10);
        }
        let a = Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![2.0, 1.0]).unwrap();
        let d2: f64 = 1.5 * 1.5 + 2.0 * 2.0;
        let sigma: f64 = 1.7;
        let expected = 2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp();
        assert!((mmd2(&a, &b, &[sigma]).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            mmd2(&Tensor::zeros(&[0, 2]), &b, &[1.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn tape_mmd_matches_value_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::from_fn(&[2, 4, 3], |_| rng.random_range(-2.0..2.0));
        let b = Tensor::from_fn(&[2, 6, 3], |_| rng.random_range(-2.0..2.0));
        let bw = [1.0, 3.0];
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let per_set = mmd2_sets(&mut t, av, bv, &bw).unwrap();
        for s in 0..2 {
            let sa = a.narrow(0, s, 1).reshape(&[4, 3]).unwrap();
            let sb = b.narrow(0, s, 1).reshape(&[6, 3]).unwrap();
            let direct = mmd2(&sa, &sb, &bw).unwrap();
            assert!((t.value(per_set).data()[s] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn ae_loss_cases() {
        let bw = [1.0];
        let x0 = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let x1 = Tensor::new(&[1, 2, 2], vec![0.5, 0.5, 1.0, 1.0]).unwrap();
        assert!(ae_loss_value(&x0, &x1, &x0, &x1, 1.0, &bw).unwrap().abs() < 1e-10);

        let xh0 = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        let xh1 = x1.clone();
        // MSE: population 0 differs by 1 in one of four entries, population 1 exact.
        let mse = 0.25;
        let only_mse = ae_loss_value(&x0, &x1, &xh0, &xh1, 0.0, &bw).unwrap();
        assert!((only_mse - mse).abs() < 1e-12);

        // Hand-expanded MMD² for {(1,1),(0,2)} vs {(1,0),(0,2)} with σ = 1.
        let k = |d2: f64| (-d2 / 2.0f64).exp();
        let within_hat = (2.0 + 2.0 * k(2.0)) / 4.0;
        let within_x = (2.0 + 2.0 * k(5.0)) / 4.0;
        let cross = (k(1.0) + k(2.0) + k(5.0) + k(0.0)) / 4.0;
        let mmd = within_hat + within_x - 2.0 * cross;
        let full = ae_loss_value(&x0, &x1, &xh0, &xh1, 0.7, &bw).unwrap();
        assert!((full - (mse + 0.7 * mmd)).abs() < 1e-12);

        let mut t = Tape::new();
        let v = t.constant(x0.clone());
        assert!(matches!(ae_loss(&mut t, v, v, v, v, -0.1, &bw), Err(Error::Config(_))));
    }

    #[test]
    fn ae_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let cfg = EncoderConfig {
            d_h: 4,
            d_phi: 3,
            d_s: 3,
            d: 3,
            gene_tokens: 2,
            blocks: 1,
            ..Default::default()
        };
        let enc = SetEncoder::init(&mut ps, &cfg, 8, &mut rng).unwrap();
        let x0 = random_x(&mut rng, 1, 2, 8);
        let x1 = random_x(&mut rng, 1, 2, 8);
        let check = grad_check(
            |t, p| {
                let a = t.constant(x0.clone());
                let b = t.constant(x1.clone());
                let za = enc.encode(t, p, a)?;
                let zb = enc.encode(t, p, b)?;
                let ha = enc.decode(t, p, za)?;
                let hb = enc.decode(t, p, zb)?;
                Ok(ae_loss(t, a, b, ha, hb, 1.0, &cfg.bandwidths)?.total)
            },
            &ps,
            1e-5,
            8,
            1,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn memorizes_a_tiny_set() {
        use crate::ndmath::{Adam, AdamConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let cfg = EncoderConfig {
            d_h: 16,
            d_phi: 8,
            d_s: 8,
            d: 8,
            gene_tokens: 2,
            blocks: 1,
            lambda_mmd: 0.0,
            ..Default::default()
        };
        let enc = SetEncoder::init(&mut ps, &cfg, 8, &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(0.0..1.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            ..Default::default()
        });
        let mut last = f64::INFINITY;
        for _ in 0..1500 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let z = enc.encode(&mut t, &ps, xv).unwrap();
            let xr = enc.decode(&mut t, &ps, z).unwrap();
            let loss = t.mse(xr, xv).unwrap();
            last = t.value(loss).item();
            if last < 1e-3 {
                break;
            }
            let grads = t.grad(loss).unwrap().for_params(&ps);
            opt.update(&mut ps, &grads, |_| true).unwrap();
        }
        assert!(last < 1e-3, "reconstruction MSE {last}");
    }
}

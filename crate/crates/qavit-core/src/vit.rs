//! Patch-embedding vision transformer backbone: the unconditioned encoder
//! producing visual features `[M×C]` from an image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{LrGroup, ParamStatus, ParameterRegistry};
use crate::tensor::{trunc_normal, Element, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Init scale for modules trained from scratch (projections, heads,
/// adapters, text pathway).
pub const INIT_STD: f64 = 0.02;
/// Positional table scale for the frozen backbone, matching the patch
/// projection output magnitude so attention queries carry position.
pub const POS_INIT_STD: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

impl ViTConfig {
    /// Desk-scale default: trains in minutes on a CPU while keeping a
    /// meaningful layer hierarchy for early/late fusion.
    pub fn desk() -> Self {
        ViTConfig { image_size: 32, patch_size: 8, channels: 3, depth: 6, width: 64, heads: 4, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.channels == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channels, width and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count M: patch tokens plus the CLS token.
    pub fn token_count(&self) -> usize {
        self.patch_grid() * self.patch_grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

pub struct LnParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> LnParams<T> {
    pub fn init(width: usize) -> Self {
        LnParams {
            gamma: Tensor::param(&[width], vec![T::one(); width]).unwrap(),
            beta: Tensor::param(&[width], vec![T::zero(); width]).unwrap(),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(&self.gamma, &self.beta, LN_EPS)
    }
}

/// Query/key/value projections plus the output projection P of one layer.
pub struct AttnWeights<T: Element> {
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Element> AttnWeights<T> {
    /// Shallow copy sharing the same parameter storage.
    pub fn share(&self) -> Self {
        AttnWeights {
            w_q: self.w_q.clone(),
            b_q: self.b_q.clone(),
            w_k: self.w_k.clone(),
            b_k: self.b_k.clone(),
            w_v: self.w_v.clone(),
            b_v: self.b_v.clone(),
            w_o: self.w_o.clone(),
            b_o: self.b_o.clone(),
        }
    }
}

pub struct BlockWeights<T: Element> {
    pub ln1: LnParams<T>,
    pub attn: AttnWeights<T>,
    pub ln2: LnParams<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

pub struct PatchEmbedWeights<T: Element> {
    /// `[patch_size²·channels × C]` linear projection.
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    /// CLS token vector `[C]`.
    pub cls: Tensor<T>,
    /// Positional table `[M×C]`.
    pub pos: Tensor<T>,
}

pub struct VitWeights<T: Element> {
    pub patch: PatchEmbedWeights<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_ln: LnParams<T>,
}

pub(crate) fn mat<T: Element>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::param(&[rows, cols], trunc_normal(rows * cols, INIT_STD, rng)).unwrap()
}

pub(crate) fn zeros_vec<T: Element>(n: usize) -> Tensor<T> {
    Tensor::param(&[n], vec![T::zero(); n]).unwrap()
}

impl<T: Element> BlockWeights<T> {
    /// Init for blocks trained from scratch (the tiny text encoder).
    pub fn init(width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::init_scaled(width, hidden, INIT_STD, INIT_STD, rng)
    }

    /// Scale-preserving init (std 1/sqrt(fan_in)) for the frozen backbone.
    /// A trained encoder's layers transform their inputs at full scale and
    /// produce O(1) attention logits; a 0.02-std random block is a near
    /// identity with near-uniform attention, which would make the frozen
    /// stand-in unable to carry question conditioning at all.
    pub fn init_preserving(width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let std_in = 1.0 / (width as f64).sqrt();
        let std_hidden = 1.0 / (hidden as f64).sqrt();
        Self::init_scaled(width, hidden, std_in, std_hidden, rng)
    }

    fn init_scaled(width: usize, hidden: usize, std_in: f64, std_hidden: f64, rng: &mut ChaCha8Rng) -> Self {
        let c = width;
        let m = |rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            Tensor::param(&[rows, cols], trunc_normal(rows * cols, std, rng)).unwrap()
        };
        BlockWeights {
            ln1: LnParams::init(c),
            attn: AttnWeights {
                w_q: m(c, c, std_in, rng),
                b_q: zeros_vec(c),
                w_k: m(c, c, std_in, rng),
                b_k: zeros_vec(c),
                w_v: m(c, c, std_in, rng),
                b_v: zeros_vec(c),
                w_o: m(c, c, std_in, rng),
                b_o: zeros_vec(c),
            },
            ln2: LnParams::init(c),
            fc1_w: m(c, hidden, std_in, rng),
            fc1_b: zeros_vec(hidden),
            fc2_w: m(hidden, c, std_hidden, rng),
            fc2_b: zeros_vec(c),
        }
    }
}

impl<T: Element> VitWeights<T> {
    pub fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.width;
        let m = cfg.token_count();
        let hidden = cfg.mlp_ratio * c;
        let patch_std = 1.0 / (cfg.patch_dim() as f64).sqrt();
        let patch = PatchEmbedWeights {
            proj_w: Tensor::param(&[cfg.patch_dim(), c], trunc_normal(cfg.patch_dim() * c, patch_std, rng)).unwrap(),
            proj_b: zeros_vec(c),
            cls: Tensor::param(&[c], trunc_normal(c, POS_INIT_STD, rng)).unwrap(),
            pos: Tensor::param(&[m, c], trunc_normal(m * c, POS_INIT_STD, rng)).unwrap(),
        };
        let blocks = (0..cfg.depth).map(|_| BlockWeights::init_preserving(c, hidden, rng)).collect();
        VitWeights { patch, blocks, final_ln: LnParams::init(c) }
    }

    pub fn register(&self, reg: &mut ParameterRegistry<T>, status: ParamStatus) {
        let g = LrGroup::Base;
        reg.register("vit.patch.weight", &self.patch.proj_w, status, g);
        reg.register("vit.patch.bias", &self.patch.proj_b, status, g);
        reg.register("vit.cls", &self.patch.cls, status, g);
        reg.register("vit.pos", &self.patch.pos, status, g);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("vit.block{}", i);
            reg.register(&format!("{p}.ln1.gamma"), &b.ln1.gamma, status, g);
            reg.register(&format!("{p}.ln1.beta"), &b.ln1.beta, status, g);
            reg.register(&format!("{p}.attn.wq"), &b.attn.w_q, status, g);
            reg.register(&format!("{p}.attn.bq"), &b.attn.b_q, status, g);
            reg.register(&format!("{p}.attn.wk"), &b.attn.w_k, status, g);
            reg.register(&format!("{p}.attn.bk"), &b.attn.b_k, status, g);
            reg.register(&format!("{p}.attn.wv"), &b.attn.w_v, status, g);
            reg.register(&format!("{p}.attn.bv"), &b.attn.b_v, status, g);
            reg.register(&format!("{p}.attn.proj.weight"), &b.attn.w_o, status, g);
            reg.register(&format!("{p}.attn.proj.bias"), &b.attn.b_o, status, g);
            reg.register(&format!("{p}.ln2.gamma"), &b.ln2.gamma, status, g);
            reg.register(&format!("{p}.ln2.beta"), &b.ln2.beta, status, g);
            reg.register(&format!("{p}.mlp.fc1.weight"), &b.fc1_w, status, g);
            reg.register(&format!("{p}.mlp.fc1.bias"), &b.fc1_b, status, g);
            reg.register(&format!("{p}.mlp.fc2.weight"), &b.fc2_w, status, g);
            reg.register(&format!("{p}.mlp.fc2.bias"), &b.fc2_b, status, g);
        }
        reg.register("vit.final_ln.gamma", &self.final_ln.gamma, status, g);
        reg.register("vit.final_ln.beta", &self.final_ln.beta, status, g);
    }
}

pub(crate) fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add_bias(b)
}

/// Flatten non-overlapping patches in raster order. Within a patch the
/// scan order is channel-major then row then column.
pub fn patches_from_image<T: Element>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "patchify_embed",
            detail: format!("image shape {:?}, config expects {:?}", image.shape(), expect),
        });
    }
    let g = cfg.patch_grid();
    let p = cfg.patch_size;
    let s = cfg.image_size;
    let d = cfg.patch_dim();
    let img = image.data();
    let mut out = vec![T::zero(); g * g * d];
    for pr in 0..g {
        for pc in 0..g {
            let base = (pr * g + pc) * d;
            let mut idx = base;
            for ch in 0..cfg.channels {
                for py in 0..p {
                    let row = pr * p + py;
                    let col0 = pc * p;
                    let src = ch * s * s + row * s + col0;
                    out[idx..idx + p].copy_from_slice(&img[src..src + p]);
                    idx += p;
                }
            }
        }
    }
    drop(img);
    Tensor::from_vec(&[g * g, d], out)
}

/// Patch embedding: row 0 is CLS, rows 1..M are projected patches, all with
/// positional embeddings added.
pub fn patchify_embed<T: Element>(
    image: &Tensor<T>,
    w: &PatchEmbedWeights<T>,
    cfg: &ViTConfig,
) -> Result<Tensor<T>> {
    let patches = patches_from_image(image, cfg)?;
    let embedded = linear(&patches, &w.proj_w, &w.proj_b)?;
    let cls_row = w.cls.reshape(&[1, cfg.width])?;
    cls_row.concat_rows(&embedded)?.add(&w.pos)
}

/// Per-head scaled dot-product attention over `kv_src`, queried from
/// `q_src`, heads concatenated. Excludes the output projection.
pub fn attention_core<T: Element>(
    q_src: &Tensor<T>,
    kv_src: &Tensor<T>,
    w: &AttnWeights<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (_, c) = q_src.dims2("attention_core")?;
    let (_, c2) = kv_src.dims2("attention_core")?;
    if c != c2 {
        return Err(Error::ShapeMismatch {
            op: "attention_core",
            detail: format!("query width {} vs key/value width {}", c, c2),
        });
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "attention_core",
            detail: format!("width {} not divisible by {} heads", c, heads),
        });
    }
    let dh = c / heads;
    let q = linear(q_src, &w.w_q, &w.b_q)?;
    let k = linear(kv_src, &w.w_k, &w.b_k)?;
    let v = linear(kv_src, &w.w_v, &w.b_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let att = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax_rows()?;
        per_head.push(att.matmul(&vh)?);
    }
    Tensor::concat_cols(&per_head)
}

/// Multi-head self-attention including the output projection P. Residual
/// connections are the block's job.
pub fn mhsa<T: Element>(f: &Tensor<T>, w: &BlockWeights<T>, heads: usize) -> Result<Tensor<T>> {
    let ctx = attention_core(f, f, &w.attn, heads)?;
    linear(&ctx, &w.attn.w_o, &w.attn.b_o)
}

/// MLP sub-block with its residual: `x + fc2(gelu(fc1(ln2(x))))`.
pub fn block_mlp<T: Element>(x: &Tensor<T>, w: &BlockWeights<T>) -> Result<Tensor<T>> {
    let h = w.ln2.apply(x)?;
    let h = linear(&h, &w.fc1_w, &w.fc1_b)?.gelu()?;
    let h = linear(&h, &w.fc2_w, &w.fc2_b)?;
    x.add(&h)
}

/// Pre-norm transformer block: `f + mhsa(LN(f))`, then the MLP sub-block.
pub fn vit_block<T: Element>(f: &Tensor<T>, w: &BlockWeights<T>, heads: usize) -> Result<Tensor<T>> {
    let attn_out = mhsa(&w.ln1.apply(f)?, w, heads)?;
    let x = f.add(&attn_out)?;
    block_mlp(&x, w)
}

/// The unconditioned encoder: patch embedding, N blocks, final layernorm.
pub fn encode_image<T: Element>(image: &Tensor<T>, w: &VitWeights<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let mut x = patchify_embed(image, &w.patch, cfg)?;
    for block in &w.blocks {
        x = vit_block(&x, block, cfg.heads)?;
    }
    w.final_ln.apply(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_weights(cfg: &ViTConfig) -> VitWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = VitWeights::init(cfg, &mut rng);
        // Overwrite every matrix with zeros, keep LN affine at identity.
        let zero = |t: &Tensor<f64>| t.set_data(&vec![0.0; t.numel()]);
        zero(&w.patch.proj_w);
        zero(&w.patch.cls);
        zero(&w.patch.pos);
        for b in &mut w.blocks {
            for t in [&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o, &b.fc1_w, &b.fc2_w] {
                zero(t);
            }
        }
        w
    }

    #[test]
    fn token_count_arithmetic() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, channels: 3, depth: 1, width: 8, heads: 2, mlp_ratio: 2 };
        assert_eq!(cfg.token_count(), 5);
    }

    #[test]
    fn patchify_zero_everything_gives_zero_rows() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, channels: 3, depth: 0, width: 8, heads: 2, mlp_ratio: 2 };
        let w = zero_weights(&cfg);
        let image = Tensor::<f64>::zeros(&[3, 8, 8]);
        let out = patchify_embed(&image, &w.patch, &cfg).unwrap();
        assert_eq!(out.shape(), &[5, 8]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_wrong_image_shape() {
        let cfg = ViTConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = VitWeights::<f64>::init(&cfg, &mut rng);
        let image = Tensor::<f64>::zeros(&[3, 16, 16]);
        assert!(patchify_embed(&image, &w.patch, &cfg).is_err());
    }

    #[test]
    fn patch_permutation_with_permuted_positions_permutes_rows() {
        let cfg = ViTConfig { image_size: 4, patch_size: 2, channels: 1, depth: 0, width: 6, heads: 2, mlp_ratio: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = VitWeights::<f64>::init(&cfg, &mut rng);

        let image_a = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out_a = patchify_embed(&image_a, &w.patch, &cfg).unwrap().to_vec();

        // Permutation over the 4 patches: patch j of B holds patch perm[j] of A.
        let perm = [2usize, 0, 3, 1];
        let patches_a = patches_from_image(&image_a, &cfg).unwrap().to_vec();
        let d = cfg.patch_dim();
        // Rebuild image B from the permuted patch contents.
        let mut img_b = vec![0.0f64; 16];
        for (j, &src) in perm.iter().enumerate() {
            let (pr, pc) = (j / 2, j % 2);
            let patch = &patches_a[src * d..(src + 1) * d];
            let mut idx = 0;
            for py in 0..2 {
                for px in 0..2 {
                    img_b[(pr * 2 + py) * 4 + (pc * 2 + px)] = patch[idx];
                    idx += 1;
                }
            }
        }
        let image_b = Tensor::from_vec(&[1, 4, 4], img_b).unwrap();

        let pos_a = w.patch.pos.to_vec();
        let c = cfg.width;
        let mut pos_b = pos_a.clone();
        for (j, &src) in perm.iter().enumerate() {
            pos_b[(1 + j) * c..(2 + j) * c].copy_from_slice(&pos_a[(1 + src) * c..(2 + src) * c]);
        }
        w.patch.pos.set_data(&pos_b);
        let out_b = patchify_embed(&image_b, &w.patch, &cfg).unwrap().to_vec();
        w.patch.pos.set_data(&pos_a);

        for (j, &src) in perm.iter().enumerate() {
            assert_eq!(
                &out_b[(1 + j) * c..(2 + j) * c],
                &out_a[(1 + src) * c..(2 + src) * c],
                "row {} must equal source row {}",
                j,
                src
            );
        }
        // CLS row unchanged.
        assert_eq!(&out_b[..c], &out_a[..c]);
    }

    #[test]
    fn mhsa_single_row_weight_is_one() {
        let cfg = ViTConfig { image_size: 2, patch_size: 2, channels: 1, depth: 1, width: 4, heads: 2, mlp_ratio: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = VitWeights::<f64>::init(&cfg, &mut rng);
        let f = Tensor::from_vec(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let out = mhsa(&f, &w.blocks[0], cfg.heads).unwrap();
        // With one token, attention output is the value row itself.
        let v = linear(&f, &w.blocks[0].attn.w_v, &w.blocks[0].attn.b_v).unwrap();
        let expect = linear(&v, &w.blocks[0].attn.w_o, &w.blocks[0].attn.b_o).unwrap();
        for (a, e) in out.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_duplicate_rows_give_identical_outputs() {
        let cfg = ViTConfig { image_size: 2, patch_size: 2, channels: 1, depth: 1, width: 8, heads: 4, mlp_ratio: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = VitWeights::<f64>::init(&cfg, &mut rng);
        let row: Vec<f64> = (0..8).map(|i| (i as f64) * 0.2 - 0.7).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let f = Tensor::from_vec(&[2, 8], data).unwrap();
        let out = mhsa(&f, &w.blocks[0], cfg.heads).unwrap().to_vec();
        assert_eq!(&out[..8], &out[8..]);
    }

    #[test]
    fn mhsa_matches_per_row_brute_force() {
        // M=3, H=1, C=2 random case against an explicit per-query loop.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ViTConfig { image_size: 2, patch_size: 2, channels: 1, depth: 1, width: 2, heads: 1, mlp_ratio: 2 };
        let w = VitWeights::<f64>::init(&cfg, &mut rng);
        let aw = &w.blocks[0].attn;
        let f = Tensor::from_vec(&[3, 2], vec![0.5, -0.1, 0.2, 0.8, -0.4, 0.3]).unwrap();
        let out = mhsa(&f, &w.blocks[0], 1).unwrap().to_vec();

        let proj = |x: &[f64], wm: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let wv = wm.to_vec();
            let bv = b.to_vec();
            let mut o = vec![0.0; 2 * 3];
            for i in 0..3 {
                for j in 0..2 {
                    o[i * 2 + j] = bv[j] + x[i * 2] * wv[j] + x[i * 2 + 1] * wv[2 + j];
                }
            }
            o
        };
        let fx = f.to_vec();
        let q = proj(&fx, &aw.w_q, &aw.b_q);
        let k = proj(&fx, &aw.w_k, &aw.b_k);
        let v = proj(&fx, &aw.w_v, &aw.b_v);
        let scale = 1.0 / (2.0f64).sqrt();
        let mut ctx = vec![0.0; 6];
        for i in 0..3 {
            let mut scores = [0.0; 3];
            for j in 0..3 {
                scores[j] = scale * (q[i * 2] * k[j * 2] + q[i * 2 + 1] * k[j * 2 + 1]);
            }
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..3 {
                let a = exps[j] / z;
                ctx[i * 2] += a * v[j * 2];
                ctx[i * 2 + 1] += a * v[j * 2 + 1];
            }
        }
        let expect = proj(&ctx, &aw.w_o, &aw.b_o);
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-6, "{} vs {}", o, e);
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, channels: 3, depth: 1, width: 8, heads: 2, mlp_ratio: 2 };
        let w = zero_weights(&cfg);
        let f = Tensor::from_vec(&[5, 8], (0..40).map(|i| i as f64 * 0.05 - 1.0).collect()).unwrap();
        let out = vit_block(&f, &w.blocks[0], cfg.heads).unwrap();
        assert_eq!(out.to_vec(), f.to_vec());
        assert_eq!(out.shape(), f.shape());
    }

    #[test]
    fn depth_zero_is_patchify_plus_final_ln() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, channels: 3, depth: 0, width: 8, heads: 2, mlp_ratio: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = VitWeights::<f64>::init(&cfg, &mut rng);
        let image = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let direct = w.final_ln.apply(&patchify_embed(&image, &w.patch, &cfg).unwrap()).unwrap();
        let enc = encode_image(&image, &w, &cfg).unwrap();
        assert_eq!(direct.to_vec(), enc.to_vec());
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = ViTConfig { image_size: 8, patch_size: 4, channels: 3, depth: 2, width: 8, heads: 2, mlp_ratio: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = VitWeights::<f64>::init(&cfg, &mut rng);
        let image = Tensor::from_vec(&[3, 8, 8], (0..192).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap();
        let a = encode_image(&image, &w, &cfg).unwrap().to_vec();
        let b = encode_image(&image, &w, &cfg).unwrap().to_vec();
        assert_eq!(a, b);
    }
}

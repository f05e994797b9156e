//! Deterministic toy multimodal diffusion transformer.
//!
//! A small MM-DiT-shaped velocity field with seeded random weights: text and
//! image tokens are projected separately in multi-stream blocks and jointly in
//! single-stream blocks, attend together in one softmax, and every layer's
//! joint attention passes through the decoupled-attention seam so hooks can
//! snapshot or rewrite it. No training happens anywhere; the point is a
//! nonlinear, smooth, reproducible field with the real architecture's
//! attention structure.
//!
//! Token order everywhere is text first, then image tokens in row-major grid
//! order; that order is what makes the quadrant slicing meaningful.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{
    decompose_attention, recompose_attention, AttentionHook, BlockKind, HookError,
};
use crate::latent::{LatentState, Shape};
use crate::linalg::{gelu, layer_norm_token, Mat};
use crate::rng::SeededRng;
use crate::velocity::{PromptEmbedding, VelocityError, VelocityField};

/// Token ids live in 0..VOCAB_SIZE; PAD_ID fills prompts to the text length.
pub const VOCAB_SIZE: u32 = 256;
pub const PAD_ID: u32 = VOCAB_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyMMDiTConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub l_multi: usize,
    pub l_single: usize,
    pub n_text: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub seed: u64,
}

impl ToyMMDiTConfig {
    /// Small enough for sub-second evaluations, large enough that the four
    /// attention quadrants are distinct.
    pub fn default_toy() -> Self {
        ToyMMDiTConfig {
            d_model: 64,
            n_heads: 4,
            l_multi: 2,
            l_single: 4,
            n_text: 8,
            grid_h: 8,
            grid_w: 8,
            channels: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), VelocityError> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("l_multi", self.l_multi),
            ("l_single", self.l_single),
            ("n_text", self.n_text),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(VelocityError::BadParams { message: format!("{name} must be >= 1") });
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(VelocityError::BadParams {
                message: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.d_model % 4 != 0 {
            return Err(VelocityError::BadParams {
                message: format!("d_model {} must be a multiple of 4", self.d_model),
            });
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> Shape {
        Shape::new(self.channels, self.grid_h, self.grid_w)
    }

    pub fn n_image(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

struct Linear {
    w: Mat,
    b: Vec<f64>,
}

impl Linear {
    fn init(rng: &mut SeededRng, d_in: usize, d_out: usize, scale: f64) -> Self {
        let w = Mat::from_fn(d_in, d_out, |_, _| scale * rng.next_normal());
        let b = (0..d_out).map(|_| scale * rng.next_normal()).collect();
        Linear { w, b }
    }

    fn apply(&self, x: &Mat) -> Mat {
        let mut out = x.matmul(&self.w);
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        out
    }

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let row = Mat::from_vec(1, x.len(), x.to_vec());
        self.apply(&row).data().to_vec()
    }
}

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn init(rng: &mut SeededRng, d: usize, scale: f64) -> Self {
        FeedForward {
            lin1: Linear::init(rng, d, 2 * d, scale),
            lin2: Linear::init(rng, 2 * d, d, scale),
        }
    }

    fn apply(&self, x: &Mat) -> Mat {
        let mut hidden = self.lin1.apply(x);
        for v in hidden.data_mut() {
            *v = gelu(*v);
        }
        self.lin2.apply(&hidden)
    }
}

/// Conditioning-driven scale/shift applied after a parameter-free layer norm.
struct Modulation {
    scale: Linear,
    shift: Linear,
}

impl Modulation {
    fn init(rng: &mut SeededRng, d: usize, scale: f64) -> Self {
        Modulation { scale: Linear::init(rng, d, d, scale), shift: Linear::init(rng, d, d, scale) }
    }

    fn apply(&self, h: &Mat, cond: &[f64]) -> Mat {
        let scale = self.scale.apply_vec(cond);
        let shift = self.shift.apply_vec(cond);
        let mut out = h.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            layer_norm_token(row);
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * (1.0 + scale[k]) + shift[k];
            }
        }
        out
    }
}

struct MultiBlock {
    mod_text: Modulation,
    mod_image: Modulation,
    q_text: Linear,
    k_text: Linear,
    v_text: Linear,
    q_image: Linear,
    k_image: Linear,
    v_image: Linear,
    out_text: Linear,
    out_image: Linear,
    ff_text: FeedForward,
    ff_image: FeedForward,
}

struct SingleBlock {
    modulation: Modulation,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ff: FeedForward,
}

/// The model itself. Weights are immutable after construction; `eval` is
/// re-entrant. Hooks carry run-local state and must not be shared between
/// concurrent solves.
pub struct ToyMMDiT {
    cfg: ToyMMDiTConfig,
    embedding: Mat,
    patch: Linear,
    pos_enc: Mat,
    cond_lin1: Linear,
    cond_lin2: Linear,
    multi_blocks: Vec<MultiBlock>,
    single_blocks: Vec<SingleBlock>,
    head: Linear,
}

/// Fixed 2-D sinusoidal position code for the image token grid.
fn positional_encoding(n_image: usize, grid_w: usize, d: usize) -> Mat {
    Mat::from_fn(n_image, d, |p, k| {
        let y = (p / grid_w) as f64;
        let x = (p % grid_w) as f64;
        let quarter = d / 4;
        let (coord, idx) = if k < d / 2 { (y, k) } else { (x, k - d / 2) };
        let pair = idx / 2;
        let omega = libm::pow(10000.0, -(pair as f64) / quarter as f64);
        if idx % 2 == 0 {
            libm::sin(coord * omega)
        } else {
            libm::cos(coord * omega)
        }
    })
}

/// Sinusoidal code of (t, guidance): first half over t, second over guidance.
fn time_guidance_embedding(t: f64, guidance: f64, d: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; d];
    let quarter = d / 4;
    for (k, v) in out.iter_mut().enumerate() {
        let (coord, idx) = if k < d / 2 { (t, k) } else { (guidance, k - d / 2) };
        let pair = idx / 2;
        let omega = libm::pow(10000.0, -(pair as f64) / quarter as f64);
        *v = if idx % 2 == 0 { libm::sin(coord * omega) } else { libm::cos(coord * omega) };
    }
    out
}

fn layer_norm_mat(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..out.rows() {
        layer_norm_token(out.row_mut(i));
    }
    out
}

/// Short-lived reborrow of an optional trait-object hook.
fn reborrow<'a>(
    hook: &'a mut Option<&mut dyn AttentionHook>,
) -> Option<&'a mut dyn AttentionHook> {
    match hook {
        Some(h) => Some(&mut **h),
        None => None,
    }
}

impl ToyMMDiT {
    pub fn new(cfg: ToyMMDiTConfig) -> Result<Self, VelocityError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut rng = SeededRng::new(cfg.seed);

        // Draw order is fixed; changing it changes every seeded artifact.
        let embedding =
            Mat::from_fn(VOCAB_SIZE as usize + 1, d, |_, _| scale * rng.next_normal());
        let patch = Linear::init(&mut rng, cfg.channels, d, scale);
        let cond_lin1 = Linear::init(&mut rng, d, d, scale);
        let cond_lin2 = Linear::init(&mut rng, d, d, scale);

        let mut multi_blocks = Vec::with_capacity(cfg.l_multi);
        for _ in 0..cfg.l_multi {
            multi_blocks.push(MultiBlock {
                mod_text: Modulation::init(&mut rng, d, scale),
                mod_image: Modulation::init(&mut rng, d, scale),
                q_text: Linear::init(&mut rng, d, d, scale),
                k_text: Linear::init(&mut rng, d, d, scale),
                v_text: Linear::init(&mut rng, d, d, scale),
                q_image: Linear::init(&mut rng, d, d, scale),
                k_image: Linear::init(&mut rng, d, d, scale),
                v_image: Linear::init(&mut rng, d, d, scale),
                out_text: Linear::init(&mut rng, d, d, scale),
                out_image: Linear::init(&mut rng, d, d, scale),
                ff_text: FeedForward::init(&mut rng, d, scale),
                ff_image: FeedForward::init(&mut rng, d, scale),
            });
        }
        let mut single_blocks = Vec::with_capacity(cfg.l_single);
        for _ in 0..cfg.l_single {
            single_blocks.push(SingleBlock {
                modulation: Modulation::init(&mut rng, d, scale),
                q: Linear::init(&mut rng, d, d, scale),
                k: Linear::init(&mut rng, d, d, scale),
                v: Linear::init(&mut rng, d, d, scale),
                out: Linear::init(&mut rng, d, d, scale),
                ff: FeedForward::init(&mut rng, d, scale),
            });
        }
        let head = Linear::init(&mut rng, d, cfg.channels, scale);
        let pos_enc = positional_encoding(cfg.n_image(), cfg.grid_w, d);

        Ok(ToyMMDiT {
            cfg,
            embedding,
            patch,
            pos_enc,
            cond_lin1,
            cond_lin2,
            multi_blocks,
            single_blocks,
            head,
        })
    }

    pub fn config(&self) -> &ToyMMDiTConfig {
        &self.cfg
    }

    pub fn latent_shape(&self) -> Shape {
        self.cfg.latent_shape()
    }

    /// Deterministic embedding lookup, padded to the text length.
    pub fn embed_prompt(&self, tokens: &[u32]) -> Result<PromptEmbedding, VelocityError> {
        if tokens.is_empty() {
            return Err(VelocityError::BadParams { message: "prompt needs at least one token".into() });
        }
        if tokens.len() > self.cfg.n_text {
            return Err(VelocityError::PromptTooLong { len: tokens.len(), max: self.cfg.n_text });
        }
        for &id in tokens {
            if id >= VOCAB_SIZE {
                return Err(VelocityError::TokenOutOfRange { id, vocab: VOCAB_SIZE });
            }
        }
        let mut padded = tokens.to_vec();
        padded.resize(self.cfg.n_text, PAD_ID);
        let vectors = Mat::from_fn(self.cfg.n_text, self.cfg.d_model, |i, j| {
            self.embedding.get(padded[i] as usize, j)
        });
        Ok(PromptEmbedding { tokens: padded, vectors })
    }

    fn conditioning_vector(&self, t: f64, guidance: f64) -> Vec<f64> {
        let raw = time_guidance_embedding(t, guidance, self.cfg.d_model);
        let mut hidden = self.cond_lin1.apply_vec(&raw);
        for v in &mut hidden {
            *v = gelu(*v);
        }
        self.cond_lin2.apply_vec(&hidden)
    }

    /// Patch-embed the latent into one token per grid position and add the
    /// positional code.
    fn embed_latent(&self, z: &LatentState) -> Mat {
        let s = self.cfg.latent_shape();
        let tokens = Mat::from_fn(self.cfg.n_image(), s.channels, |p, c| {
            z.at(c, p / s.grid_w, p % s.grid_w)
        });
        let mut out = self.patch.apply(&tokens);
        out.add_assign(&self.pos_enc);
        out
    }

    /// Joint softmax attention with the decoupled seam. Q, K, V are
    /// (n_text + n_image) x d_model with text rows first.
    fn attention_core(
        &self,
        q: &Mat,
        k: &Mat,
        v: &Mat,
        kind: BlockKind,
        layer: usize,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Mat, VelocityError> {
        let n = q.rows();
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let d_head = d / n_heads;
        let inv_sqrt = 1.0 / libm::sqrt(d_head as f64);

        let mut maps = Vec::with_capacity(n_heads);
        let mut values = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = q.block(0, n, h * d_head, (h + 1) * d_head);
            let kh = k.block(0, n, h * d_head, (h + 1) * d_head);
            let vh = v.block(0, n, h * d_head, (h + 1) * d_head);
            let mut logits = qh.matmul(&kh.transpose());
            logits.scale_assign(inv_sqrt);
            logits.softmax_rows();
            maps.push(logits);
            values.push(vh);
        }

        let att = decompose_attention(&maps, &values, self.cfg.n_text)
            .expect("joint attention dimensions are consistent by construction");
        let att = match hook {
            Some(h) => h.on_attention(kind, layer, att)?,
            None => att,
        };
        if att.n_cond != self.cfg.n_text
            || att.n_image != self.cfg.n_image()
            || att.heads.len() != n_heads
        {
            return Err(VelocityError::Hook(HookError {
                message: format!(
                    "hook changed the attention layout at {kind} layer {layer}"
                ),
            }));
        }
        let (maps, values) = recompose_attention(&att).map_err(HookError::from)?;
        if values[0].cols() != d_head || maps[0].rows() != n {
            return Err(VelocityError::Hook(HookError {
                message: format!("hook changed head dimensions at {kind} layer {layer}"),
            }));
        }

        let mut out = Mat::zeros(n, d);
        for h in 0..n_heads {
            let oh = maps[h].matmul(&values[h]);
            out.set_block(0, h * d_head, &oh);
        }
        Ok(out)
    }
}

impl VelocityField for ToyMMDiT {
    fn eval(
        &self,
        z: &LatentState,
        t: f64,
        condition: Option<&PromptEmbedding>,
        guidance: f64,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<LatentState, VelocityError> {
        let cfg = &self.cfg;
        let expected = cfg.latent_shape();
        if z.shape() != expected {
            return Err(VelocityError::ShapeMismatch { expected, got: z.shape() });
        }
        let prompt = condition.ok_or(VelocityError::MissingCondition)?;
        if prompt.vectors.rows() != cfg.n_text || prompt.vectors.cols() != cfg.d_model {
            return Err(VelocityError::BadParams {
                message: format!(
                    "prompt embedding is {}x{}, model expects {}x{}",
                    prompt.vectors.rows(),
                    prompt.vectors.cols(),
                    cfg.n_text,
                    cfg.d_model
                ),
            });
        }
        let mut hook = hook;

        let cond = self.conditioning_vector(t, guidance);
        let mut h_text = prompt.vectors.clone();
        let mut h_image = self.embed_latent(z);

        for (layer, block) in self.multi_blocks.iter().enumerate() {
            let x_text = block.mod_text.apply(&h_text, &cond);
            let x_image = block.mod_image.apply(&h_image, &cond);

            let q = Mat::vstack(&block.q_text.apply(&x_text), &block.q_image.apply(&x_image));
            let k = Mat::vstack(&block.k_text.apply(&x_text), &block.k_image.apply(&x_image));
            let v = Mat::vstack(&block.v_text.apply(&x_text), &block.v_image.apply(&x_image));

            let joint =
                self.attention_core(&q, &k, &v, BlockKind::Multi, layer, reborrow(&mut hook))?;
            let attn_text = joint.row_block(0, cfg.n_text);
            let attn_image = joint.row_block(cfg.n_text, joint.rows());
            h_text.add_assign(&block.out_text.apply(&attn_text));
            h_image.add_assign(&block.out_image.apply(&attn_image));

            h_text.add_assign(&block.ff_text.apply(&layer_norm_mat(&h_text)));
            h_image.add_assign(&block.ff_image.apply(&layer_norm_mat(&h_image)));
        }

        let mut h = Mat::vstack(&h_text, &h_image);
        for (layer, block) in self.single_blocks.iter().enumerate() {
            let x = block.modulation.apply(&h, &cond);
            let q = block.q.apply(&x);
            let k = block.k.apply(&x);
            let v = block.v.apply(&x);
            let joint =
                self.attention_core(&q, &k, &v, BlockKind::Single, layer, reborrow(&mut hook))?;
            h.add_assign(&block.out.apply(&joint));
            h.add_assign(&block.ff.apply(&layer_norm_mat(&h)));
        }

        let image_rows = layer_norm_mat(&h.row_block(cfg.n_text, h.rows()));
        let vel_tokens = self.head.apply(&image_rows);
        let out = LatentState::from_fn(expected, |flat| {
            let per_plane = cfg.grid_h * cfg.grid_w;
            let c = flat / per_plane;
            let p = flat % per_plane;
            vel_tokens.get(p, c)
        });
        Ok(out)
    }

    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

impl ToyMMDiT {
    /// Empirical Lipschitz bound: max finite-difference quotient
    /// ||v(z + eps u) - v(z)|| / eps over seeded probes of states, times and
    /// directions.
    pub fn estimate_lipschitz(
        &self,
        condition: &PromptEmbedding,
        guidance: f64,
        n_probes: usize,
        seed: u64,
    ) -> Result<f64, VelocityError> {
        let mut rng = SeededRng::new(seed);
        let shape = self.latent_shape();
        let eps = 1e-3;
        let mut best: f64 = 0.0;
        for _ in 0..n_probes {
            let z = rng.normal_latent(shape);
            let mut u = rng.normal_latent(shape);
            let norm = u.norm_l2();
            for v in u.data_mut() {
                *v /= norm;
            }
            let t = rng.next_f64();
            let v0 = self.eval(&z, t, Some(condition), guidance, None)?;
            let mut z_probe = z.clone();
            z_probe.axpy(eps, &u);
            let v1 = self.eval(&z_probe, t, Some(condition), guidance, None)?;
            let quotient = v1.dist_l2(&v0) / eps;
            if quotient > best {
                best = quotient;
            }
        }
        Ok(best)
    }
}

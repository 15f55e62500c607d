//! Model weights.
//!
//! A `Model` is immutable during any forward or gradient call; editing
//! mutates it through `&mut` so the borrow checker enforces the
//! snapshot-or-exclusive contract: concurrent read-only passes share
//! `&Model`, weight mutation requires exclusive access, and sweeps clone
//! an independent snapshot per layer.

use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::tokenizer::Tokenizer;
use crate::error::Result;
use crate::rng::fill_normal;
use crate::tensor::Mat;

/// One pre-layernorm decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_w: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub attn_q_w: Mat, // [d_model x d_model]
    pub attn_q_b: Vec<f32>,
    pub attn_k_w: Mat,
    pub attn_k_b: Vec<f32>,
    pub attn_v_w: Mat,
    pub attn_v_b: Vec<f32>,
    pub attn_o_w: Mat,
    pub attn_o_b: Vec<f32>,
    pub ln2_w: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub w_fc: Mat, // [d_model x d_mlp]
    pub b_fc: Vec<f32>,
    pub w_proj: Mat, // [d_mlp x d_model]
    pub b_proj: Vec<f32>,
}

impl Block {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dm = cfg.d_mlp;
        Block {
            ln1_w: vec![1.0; d],
            ln1_b: vec![0.0; d],
            attn_q_w: Mat::zeros(d, d),
            attn_q_b: vec![0.0; d],
            attn_k_w: Mat::zeros(d, d),
            attn_k_b: vec![0.0; d],
            attn_v_w: Mat::zeros(d, d),
            attn_v_b: vec![0.0; d],
            attn_o_w: Mat::zeros(d, d),
            attn_o_b: vec![0.0; d],
            ln2_w: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w_fc: Mat::zeros(d, dm),
            b_fc: vec![0.0; dm],
            w_proj: Mat::zeros(dm, d),
            b_proj: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Mat, // [vocab_size x d_model]
    pub pos_emb: Mat, // [max_seq x d_model]
    pub blocks: Vec<Block>,
    pub ln_f_w: Vec<f32>,
    pub ln_f_b: Vec<f32>,
    pub unembed: Mat, // [d_model x vocab_size]
    pub tokenizer: Tokenizer,
}

impl Model {
    /// All-zero weights (layernorm gains at 1). Logits are uniform.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = Tokenizer::for_mode(cfg.tokenizer_mode)?;
        Ok(Model {
            tok_emb: Mat::zeros(cfg.vocab_size, cfg.d_model),
            pos_emb: Mat::zeros(cfg.max_seq, cfg.d_model),
            blocks: (0..cfg.n_layers).map(|_| Block::zeros(&cfg)).collect(),
            ln_f_w: vec![1.0; cfg.d_model],
            ln_f_b: vec![0.0; cfg.d_model],
            unembed: Mat::zeros(cfg.d_model, cfg.vocab_size),
            tokenizer,
            config: cfg,
        })
    }

    /// Gaussian init at GPT-2-like scales, deterministic for a given rng.
    pub fn random(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut m = Model::zeros(cfg)?;
        let d = m.config.d_model as f32;
        let emb_scale = 0.12;
        let w_scale = 1.0 / d.sqrt();
        fill_normal(rng, &mut m.tok_emb.data, emb_scale);
        fill_normal(rng, &mut m.pos_emb.data, emb_scale * 0.5);
        for blk in &mut m.blocks {
            fill_normal(rng, &mut blk.attn_q_w.data, w_scale);
            fill_normal(rng, &mut blk.attn_k_w.data, w_scale);
            fill_normal(rng, &mut blk.attn_v_w.data, w_scale);
            fill_normal(rng, &mut blk.attn_o_w.data, w_scale);
            fill_normal(rng, &mut blk.w_fc.data, w_scale);
            fill_normal(rng, &mut blk.w_proj.data, w_scale / (2.0 * m.config.n_layers as f32).sqrt());
        }
        fill_normal(rng, &mut m.unembed.data, w_scale);
        Ok(m)
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Frobenius norm of each layer's projection matrix.
    pub fn proj_norms(&self) -> Vec<f32> {
        self.blocks.iter().map(|b| b.w_proj.frobenius()).collect()
    }

    pub fn all_finite(&self) -> bool {
        let vecs_ok = |b: &Block| {
            b.ln1_w.iter().all(|v| v.is_finite())
                && b.ln1_b.iter().all(|v| v.is_finite())
                && b.attn_q_b.iter().all(|v| v.is_finite())
                && b.attn_k_b.iter().all(|v| v.is_finite())
                && b.attn_v_b.iter().all(|v| v.is_finite())
                && b.attn_o_b.iter().all(|v| v.is_finite())
                && b.ln2_w.iter().all(|v| v.is_finite())
                && b.ln2_b.iter().all(|v| v.is_finite())
                && b.b_fc.iter().all(|v| v.is_finite())
                && b.b_proj.iter().all(|v| v.is_finite())
        };
        self.tok_emb.is_finite()
            && self.pos_emb.is_finite()
            && self.unembed.is_finite()
            && self.ln_f_w.iter().all(|v| v.is_finite())
            && self.ln_f_b.iter().all(|v| v.is_finite())
            && self.blocks.iter().all(|b| {
                b.attn_q_w.is_finite()
                    && b.attn_k_w.is_finite()
                    && b.attn_v_w.is_finite()
                    && b.attn_o_w.is_finite()
                    && b.w_fc.is_finite()
                    && b.w_proj.is_finite()
                    && vecs_ok(b)
            })
    }
}

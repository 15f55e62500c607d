//! Reverse-mode gradients through the decoder stack.
//!
//! One backward walk serves two callers: gradients with respect to an
//! injected site value (value optimization, gradient checks) and full
//! parameter gradients (the toy trainer). Sites whose forward value was
//! replaced cut the gradient flowing into the replaced branch, mirroring
//! the forward intervention semantics.

use std::collections::BTreeMap;

use super::forward::{gelu_prime, Activations, CaptureMap, LnCache, Site, SiteKind};
use super::weights::{Block, Model};
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nt, matmul_tn, softmax_inplace, Mat};

/// Parameter gradients, shaped exactly like the model's weights.
/// Layernorm fields hold gradients (zero-initialized), not gains.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<Block>,
    pub ln_f_w: Vec<f32>,
    pub ln_f_b: Vec<f32>,
    pub unembed: Mat,
}

fn zeroed_block(cfg: &crate::model::ModelConfig) -> Block {
    let mut b = Block::zeros(cfg);
    b.ln1_w.iter_mut().for_each(|v| *v = 0.0);
    b.ln2_w.iter_mut().for_each(|v| *v = 0.0);
    b
}

impl ParamGrads {
    pub fn zeros(cfg: &crate::model::ModelConfig) -> Self {
        ParamGrads {
            tok_emb: Mat::zeros(cfg.vocab_size, cfg.d_model),
            pos_emb: Mat::zeros(cfg.max_seq, cfg.d_model),
            blocks: (0..cfg.n_layers).map(|_| zeroed_block(cfg)).collect(),
            ln_f_w: vec![0.0; cfg.d_model],
            ln_f_b: vec![0.0; cfg.d_model],
            unembed: Mat::zeros(cfg.d_model, cfg.vocab_size),
        }
    }

    /// Flat views over every gradient tensor, in the model's canonical
    /// parameter order (matches [`Model::param_slices_mut`]).
    pub fn param_slices(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![&self.tok_emb.data, &self.pos_emb.data];
        for b in &self.blocks {
            v.push(&b.ln1_w);
            v.push(&b.ln1_b);
            v.push(&b.attn_q_w.data);
            v.push(&b.attn_q_b);
            v.push(&b.attn_k_w.data);
            v.push(&b.attn_k_b);
            v.push(&b.attn_v_w.data);
            v.push(&b.attn_v_b);
            v.push(&b.attn_o_w.data);
            v.push(&b.attn_o_b);
            v.push(&b.ln2_w);
            v.push(&b.ln2_b);
            v.push(&b.w_fc.data);
            v.push(&b.b_fc);
            v.push(&b.w_proj.data);
            v.push(&b.b_proj);
        }
        v.push(&self.ln_f_w);
        v.push(&self.ln_f_b);
        v.push(&self.unembed.data);
        v
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        fn add(dst: &mut [f32], src: &[f32]) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
        add(&mut self.tok_emb.data, &other.tok_emb.data);
        add(&mut self.pos_emb.data, &other.pos_emb.data);
        for (db, sb) in self.blocks.iter_mut().zip(&other.blocks) {
            add(&mut db.ln1_w, &sb.ln1_w);
            add(&mut db.ln1_b, &sb.ln1_b);
            add(&mut db.attn_q_w.data, &sb.attn_q_w.data);
            add(&mut db.attn_q_b, &sb.attn_q_b);
            add(&mut db.attn_k_w.data, &sb.attn_k_w.data);
            add(&mut db.attn_k_b, &sb.attn_k_b);
            add(&mut db.attn_v_w.data, &sb.attn_v_w.data);
            add(&mut db.attn_v_b, &sb.attn_v_b);
            add(&mut db.attn_o_w.data, &sb.attn_o_w.data);
            add(&mut db.attn_o_b, &sb.attn_o_b);
            add(&mut db.ln2_w, &sb.ln2_w);
            add(&mut db.ln2_b, &sb.ln2_b);
            add(&mut db.w_fc.data, &sb.w_fc.data);
            add(&mut db.b_fc, &sb.b_fc);
            add(&mut db.w_proj.data, &sb.w_proj.data);
            add(&mut db.b_proj, &sb.b_proj);
        }
        add(&mut self.ln_f_w, &other.ln_f_w);
        add(&mut self.ln_f_b, &other.ln_f_b);
        add(&mut self.unembed.data, &other.unembed.data);
    }
}

impl Model {
    /// Mutable flat views over every weight tensor, in canonical order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for b in &mut self.blocks {
            v.push(&mut b.ln1_w);
            v.push(&mut b.ln1_b);
            v.push(&mut b.attn_q_w.data);
            v.push(&mut b.attn_q_b);
            v.push(&mut b.attn_k_w.data);
            v.push(&mut b.attn_k_b);
            v.push(&mut b.attn_v_w.data);
            v.push(&mut b.attn_v_b);
            v.push(&mut b.attn_o_w.data);
            v.push(&mut b.attn_o_b);
            v.push(&mut b.ln2_w);
            v.push(&mut b.ln2_b);
            v.push(&mut b.w_fc.data);
            v.push(&mut b.b_fc);
            v.push(&mut b.w_proj.data);
            v.push(&mut b.b_proj);
        }
        v.push(&mut self.ln_f_w);
        v.push(&mut self.ln_f_b);
        v.push(&mut self.unembed.data);
        v
    }
}

/// Scalar functional of the logits, differentiable at the current point.
pub trait LossFn {
    fn eval(&self, logits: &Mat) -> f64;
    /// d(loss)/d(logits), same shape as logits.
    fn dlogits(&self, logits: &Mat) -> Mat;
}

/// Teacher-forced negative log-likelihood summed over (position, target)
/// pairs, scaled by `weight`.
pub struct NllLoss {
    pub positions: Vec<(usize, u32)>,
    pub weight: f64,
}

impl NllLoss {
    pub fn new(positions: Vec<(usize, u32)>) -> Self {
        NllLoss {
            positions,
            weight: 1.0,
        }
    }
}

impl LossFn for NllLoss {
    fn eval(&self, logits: &Mat) -> f64 {
        let mut nll = 0.0;
        for &(pos, tgt) in &self.positions {
            nll -= crate::tensor::log_softmax_at(logits.row(pos), tgt as usize);
        }
        nll * self.weight
    }

    fn dlogits(&self, logits: &Mat) -> Mat {
        let mut d = Mat::zeros(logits.rows, logits.cols);
        for &(pos, tgt) in &self.positions {
            let mut p = logits.row(pos).to_vec();
            softmax_inplace(&mut p);
            let dr = d.row_mut(pos);
            let w = self.weight as f32;
            for (c, &pc) in p.iter().enumerate() {
                dr[c] += pc * w;
            }
            dr[tgt as usize] -= w;
        }
        d
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOptions {
    pub want_param_grads: bool,
    pub site_grads: Vec<Site>,
}

/// Layernorm backward for one activation matrix.
///
/// `dx_extra` receives the input gradient (added in place); `dw`/`db`
/// accumulate affine-parameter gradients when present.
fn ln_backward(
    cache: &LnCache,
    w: &[f32],
    dout: &Mat,
    dx: &mut Mat,
    mut dw: Option<&mut Vec<f32>>,
    mut db: Option<&mut Vec<f32>>,
) {
    let cols = cache.normed.cols;
    for r in 0..cache.normed.rows {
        let y = cache.normed.row(r);
        let dr = dout.row(r);
        let mut g = vec![0.0f32; cols];
        let mut mg = 0.0f32;
        let mut mgy = 0.0f32;
        for c in 0..cols {
            let gc = dr[c] * w[c];
            g[c] = gc;
            mg += gc;
            mgy += gc * y[c];
        }
        mg /= cols as f32;
        mgy /= cols as f32;
        let is = cache.inv_std[r];
        let dxr = dx.row_mut(r);
        for c in 0..cols {
            dxr[c] += (g[c] - mg - y[c] * mgy) * is;
        }
        if let Some(dw) = dw.as_deref_mut() {
            for c in 0..cols {
                dw[c] += dr[c] * y[c];
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for c in 0..cols {
                db[c] += dr[c];
            }
        }
    }
}

fn affine_from_ln(cache: &LnCache, w: &[f32], b: &[f32]) -> Mat {
    let (rows, cols) = (cache.normed.rows, cache.normed.cols);
    let mut out = Mat::zeros(rows, cols);
    for r in 0..rows {
        let y = cache.normed.row(r);
        let o = out.row_mut(r);
        for c in 0..cols {
            o[c] = y[c] * w[c] + b[c];
        }
    }
    out
}

fn colsum_into(m: &Mat, out: &mut [f32]) {
    for r in 0..m.rows {
        let row = m.row(r);
        for c in 0..m.cols {
            out[c] += row[c];
        }
    }
}

/// Reverse pass from a logits cotangent.
///
/// Returns parameter gradients (when requested) and the gradient of the
/// loss with respect to each requested site's (post-intervention) value.
pub fn backward(
    model: &Model,
    acts: &Activations,
    dlogits: &Mat,
    opts: &BackwardOptions,
) -> (Option<ParamGrads>, CaptureMap) {
    let cfg = &model.config;
    let seq = acts.tokens.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let inv_sqrt_hd = 1.0 / (hd as f32).sqrt();

    let mut grads = opts.want_param_grads.then(|| ParamGrads::zeros(cfg));
    let mut site_out: CaptureMap = BTreeMap::new();
    let want: BTreeMap<Site, ()> = opts.site_grads.iter().map(|&s| (s, ())).collect();
    let mut collect = |site: Site, values: &Mat, site_out: &mut CaptureMap| {
        if want.contains_key(&site) {
            site_out.insert(site, values.row(site.token).to_vec());
        }
    };

    // logits = hf @ unembed
    let mut d_hf = matmul_nt(dlogits, &model.unembed);
    if let Some(g) = grads.as_mut() {
        let du = matmul_tn(&acts.hf, dlogits);
        for (a, b) in g.unembed.data.iter_mut().zip(&du.data) {
            *a += *b;
        }
    }

    // final layernorm
    let mut d_h = Mat::zeros(seq, d);
    {
        let (dw, db) = match grads.as_mut() {
            Some(g) => (Some(&mut g.ln_f_w), Some(&mut g.ln_f_b)),
            None => (None, None),
        };
        ln_backward(&acts.ln_f, &model.ln_f_w, &d_hf, &mut d_h, dw, db);
    }
    drop(d_hf);

    for l in (0..cfg.n_layers).rev() {
        let la = &acts.layers[l];
        let blk = &model.blocks[l];

        // h_out (post any hidden replacement) is what downstream consumed.
        for t in 0..seq {
            collect(Site::new(l, t, SiteKind::HiddenState), &d_h, &mut site_out);
        }
        // Replacement cuts the gradient into everything below at that token.
        for t in 0..seq {
            if la.hidden_replaced[t] {
                d_h.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
            }
        }

        // h_out = h_mid + mlp_out
        let mut d_mlp_out = d_h.clone();
        let mut d_h_mid = d_h.clone();
        for t in 0..seq {
            collect(Site::new(l, t, SiteKind::MlpOut), &d_mlp_out, &mut site_out);
        }
        for t in 0..seq {
            if la.mlp_replaced[t] {
                d_mlp_out.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
            }
        }

        // mlp_out = gelu(ln2_out @ w_fc + b_fc) @ w_proj + b_proj
        let mut dg = matmul_nt(&d_mlp_out, &blk.w_proj);
        if let Some(g) = grads.as_mut() {
            let dwp = matmul_tn(&la.g, &d_mlp_out);
            for (a, b) in g.blocks[l].w_proj.data.iter_mut().zip(&dwp.data) {
                *a += *b;
            }
            colsum_into(&d_mlp_out, &mut g.blocks[l].b_proj);
        }
        for t in 0..seq {
            let ur = la.u.row(t);
            let dgr = dg.row_mut(t);
            for c in 0..cfg.d_mlp {
                dgr[c] *= gelu_prime(ur[c]);
            }
        }
        let du = dg; // renamed: now gradient wrt pre-gelu
        let d_ln2out = matmul_nt(&du, &blk.w_fc);
        if let Some(g) = grads.as_mut() {
            let ln2_out = affine_from_ln(&la.ln2, &blk.ln2_w, &blk.ln2_b);
            let dwf = matmul_tn(&ln2_out, &du);
            for (a, b) in g.blocks[l].w_fc.data.iter_mut().zip(&dwf.data) {
                *a += *b;
            }
            colsum_into(&du, &mut g.blocks[l].b_fc);
        }
        {
            let (dw, db) = match grads.as_mut() {
                Some(g) => {
                    let gb = &mut g.blocks[l];
                    (Some(&mut gb.ln2_w), Some(&mut gb.ln2_b))
                }
                None => (None, None),
            };
            ln_backward(&la.ln2, &blk.ln2_w, &d_ln2out, &mut d_h_mid, dw, db);
        }

        // h_mid = h_in + attn_out
        for t in 0..seq {
            collect(Site::new(l, t, SiteKind::AttnOut), &d_h_mid, &mut site_out);
        }
        let mut d_attn_out = d_h_mid.clone();
        for t in 0..seq {
            if la.attn_replaced[t] {
                d_attn_out.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut d_h_in = d_h_mid; // residual path

        // attn_out = ctx @ w_o + b_o
        let dctx = matmul_nt(&d_attn_out, &blk.attn_o_w);
        if let Some(g) = grads.as_mut() {
            let dwo = matmul_tn(&la.ctx, &d_attn_out);
            for (a, b) in g.blocks[l].attn_o_w.data.iter_mut().zip(&dwo.data) {
                *a += *b;
            }
            colsum_into(&d_attn_out, &mut g.blocks[l].attn_o_b);
        }

        let mut dq = Mat::zeros(seq, d);
        let mut dk = Mat::zeros(seq, d);
        let mut dv = Mat::zeros(seq, d);
        for head in 0..nh {
            let c0 = head * hd;
            let p = &la.probs[head];
            for ti in 0..seq {
                let dctx_h = &dctx.row(ti)[c0..c0 + hd];
                // dv and dp over the causal prefix
                let mut dp = vec![0.0f32; ti + 1];
                for tj in 0..=ti {
                    dp[tj] = dot(dctx_h, &la.v.row(tj)[c0..c0 + hd]);
                }
                let pr = &p.row(ti)[..=ti];
                for tj in 0..=ti {
                    let w = pr[tj];
                    if w != 0.0 {
                        let dvr = &mut dv.row_mut(tj)[c0..c0 + hd];
                        for c in 0..hd {
                            dvr[c] += w * dctx_h[c];
                        }
                    }
                }
                // softmax backward: ds = p * (dp - <dp, p>)
                let inner: f32 = dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                for tj in 0..=ti {
                    let ds = pr[tj] * (dp[tj] - inner) * inv_sqrt_hd;
                    if ds == 0.0 {
                        continue;
                    }
                    let kr = &la.k.row(tj)[c0..c0 + hd];
                    let dqr = &mut dq.row_mut(ti)[c0..c0 + hd];
                    for c in 0..hd {
                        dqr[c] += ds * kr[c];
                    }
                    let qr = &la.q.row(ti)[c0..c0 + hd];
                    let dkr = &mut dk.row_mut(tj)[c0..c0 + hd];
                    for c in 0..hd {
                        dkr[c] += ds * qr[c];
                    }
                }
            }
        }

        let mut d_ln1out = matmul_nt(&dq, &blk.attn_q_w);
        let dk_contrib = matmul_nt(&dk, &blk.attn_k_w);
        let dv_contrib = matmul_nt(&dv, &blk.attn_v_w);
        for i in 0..d_ln1out.data.len() {
            d_ln1out.data[i] += dk_contrib.data[i] + dv_contrib.data[i];
        }
        if let Some(g) = grads.as_mut() {
            let ln1_out = affine_from_ln(&la.ln1, &blk.ln1_w, &blk.ln1_b);
            for (which, dsrc) in [(0usize, &dq), (1, &dk), (2, &dv)] {
                let dw = matmul_tn(&ln1_out, dsrc);
                let gb = &mut g.blocks[l];
                let (wt, bt) = match which {
                    0 => (&mut gb.attn_q_w, &mut gb.attn_q_b),
                    1 => (&mut gb.attn_k_w, &mut gb.attn_k_b),
                    _ => (&mut gb.attn_v_w, &mut gb.attn_v_b),
                };
                for (a, b) in wt.data.iter_mut().zip(&dw.data) {
                    *a += *b;
                }
                colsum_into(dsrc, bt);
            }
        }
        {
            let (dw, db) = match grads.as_mut() {
                Some(g) => {
                    let gb = &mut g.blocks[l];
                    (Some(&mut gb.ln1_w), Some(&mut gb.ln1_b))
                }
                None => (None, None),
            };
            ln_backward(&la.ln1, &blk.ln1_w, &d_ln1out, &mut d_h_in, dw, db);
        }

        d_h = d_h_in;
    }

    for t in 0..seq {
        collect(Site::new(0, t, SiteKind::Embedding), &d_h, &mut site_out);
    }
    if let Some(g) = grads.as_mut() {
        for t in 0..seq {
            if acts.emb_replaced[t] {
                continue;
            }
            let dr = d_h.row(t);
            let te = g.tok_emb.row_mut(acts.tokens[t] as usize);
            for c in 0..d {
                te[c] += dr[c];
            }
            let pe = g.pos_emb.row_mut(t);
            for c in 0..d {
                pe[c] += dr[c];
            }
        }
    }

    (grads, site_out)
}

/// Gradient of `loss` with respect to a value injected at `site`,
/// evaluated at the current clean value.
pub fn grad_at_site(
    model: &Model,
    tokens: &[u32],
    site: Site,
    loss: &dyn LossFn,
) -> Result<Vec<f32>> {
    if !matches!(site.kind, SiteKind::MlpOut | SiteKind::HiddenState) {
        return Err(Error::InvalidSite(format!(
            "grad_at_site supports mlp_out and hidden_state, got {:?}",
            site.kind
        )));
    }
    let acts = super::forward::forward_full(model, tokens, &[])?;
    let dlogits = loss.dlogits(&acts.logits);
    let opts = BackwardOptions {
        want_param_grads: false,
        site_grads: vec![site],
    };
    let (_, sites) = backward(model, &acts, &dlogits, &opts);
    let g = sites
        .get(&site)
        .cloned()
        .ok_or_else(|| Error::InvalidSite(format!("site {site:?} not reached")))?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grad_at_site".into()));
    }
    Ok(g)
}

//! Patch embedding and the transformer blocks of the encoder backbone.
//!
//! Tokens carry provenance (source frame, spatial cell, kind) beside their
//! embeddings; blocks never reorder or drop tokens themselves. Pruning is
//! the relevance module's job and happens between blocks.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Anchor,
    Template,
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub frame_id: i64,
    pub spatial_index: u32,
    pub kind: TokenKind,
}

/// Token embeddings plus per-token provenance, outside any graph.
#[derive(Debug, Clone)]
pub struct TokenSeq {
    pub embeddings: Tensor,
    pub meta: Vec<TokenMeta>,
}

impl TokenSeq {
    pub fn new(embeddings: Tensor, meta: Vec<TokenMeta>) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.shape()[0] != meta.len() {
            return Err(Error::shape(
                "token_seq",
                format!("{:?} with {} meta entries", embeddings.shape(), meta.len()),
            ));
        }
        Ok(TokenSeq { embeddings, meta })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Concatenate along the token axis.
    pub fn concat(parts: &[&TokenSeq]) -> Result<TokenSeq> {
        let dim = parts
            .first()
            .ok_or_else(|| Error::shape("token_seq.concat", "empty"))?
            .dim();
        let mut data = Vec::new();
        let mut meta = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(Error::shape("token_seq.concat", "dim mismatch"));
            }
            data.extend_from_slice(p.embeddings.data());
            meta.extend_from_slice(&p.meta);
        }
        TokenSeq::new(Tensor::new(vec![meta.len(), dim], data)?, meta)
    }

    pub fn select(&self, idx: &[usize]) -> Result<TokenSeq> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut meta = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::shape("token_seq.select", format!("index {i}")));
            }
            data.extend_from_slice(&self.embeddings.data()[i * dim..(i + 1) * dim]);
            meta.push(self.meta[i]);
        }
        TokenSeq::new(Tensor::new(vec![idx.len(), dim], data)?, meta)
    }
}

/// A token sequence inside a graph: embeddings as a live `Var`, provenance
/// tracked alongside.
#[derive(Debug, Clone)]
pub struct Tokens {
    pub var: Var,
    pub meta: Vec<TokenMeta>,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn detach(&self, g: &Graph) -> Result<TokenSeq> {
        TokenSeq::new(g.value(self.var).detached(), self.meta.clone())
    }
}

// ── parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, std: f64) -> Self {
        LinearParams {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    pub fn bind(&self, g: &mut Graph) -> LinVars {
        LinVars {
            w: g.leaf(&self.w),
            b: g.leaf(&self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub fn bind(&self, g: &mut Graph) -> LnVars {
        LnVars {
            gamma: g.leaf(&self.gamma),
            beta: g.leaf(&self.beta),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub ln2: LayerNormParams,
    pub ffn1: LinearParams,
    pub ffn2: LinearParams,
}

impl BlockParams {
    pub fn init(rng: &mut Rng, dim: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        BlockParams {
            ln1: LayerNormParams::init(dim),
            q: LinearParams::init(rng, dim, dim, 0.02),
            k: LinearParams::init(rng, dim, dim, 0.02),
            v: LinearParams::init(rng, dim, dim, 0.02),
            o: LinearParams::init(rng, dim, dim, 0.02),
            ln2: LayerNormParams::init(dim),
            ffn1: LinearParams::init(rng, dim, hidden, 0.02),
            ffn2: LinearParams::init(rng, hidden, dim, 0.02),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.q.collect(&format!("{prefix}.q"), out);
        self.k.collect(&format!("{prefix}.k"), out);
        self.v.collect(&format!("{prefix}.v"), out);
        self.o.collect(&format!("{prefix}.o"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.ffn1.collect(&format!("{prefix}.ffn1"), out);
        self.ffn2.collect(&format!("{prefix}.ffn2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ln1.collect_mut(&format!("{prefix}.ln1"), out);
        self.q.collect_mut(&format!("{prefix}.q"), out);
        self.k.collect_mut(&format!("{prefix}.k"), out);
        self.v.collect_mut(&format!("{prefix}.v"), out);
        self.o.collect_mut(&format!("{prefix}.o"), out);
        self.ln2.collect_mut(&format!("{prefix}.ln2"), out);
        self.ffn1.collect_mut(&format!("{prefix}.ffn1"), out);
        self.ffn2.collect_mut(&format!("{prefix}.ffn2"), out);
    }

    pub fn bind(&self, g: &mut Graph) -> BlockVars {
        BlockVars {
            ln1: self.ln1.bind(g),
            q: self.q.bind(g),
            k: self.k.bind(g),
            v: self.v.bind(g),
            o: self.o.bind(g),
            ln2: self.ln2.bind(g),
            ffn1: self.ffn1.bind(g),
            ffn2: self.ffn2.bind(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1: LnVars,
    pub q: LinVars,
    pub k: LinVars,
    pub v: LinVars,
    pub o: LinVars,
    pub ln2: LnVars,
    pub ffn1: LinVars,
    pub ffn2: LinVars,
}

#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub proj: LinearParams,
    pub pos_template: Tensor,
    pub pos_search: Tensor,
}

impl EmbedParams {
    pub fn init(rng: &mut Rng, cfg: &EncoderConfig) -> Self {
        let patch_dim = 3 * cfg.patch_size_px * cfg.patch_size_px;
        EmbedParams {
            proj: LinearParams::init(rng, patch_dim, cfg.dim, 0.02),
            pos_template: Tensor::randn(&[cfg.n_z(), cfg.dim], 0.02, rng),
            pos_search: Tensor::randn(&[cfg.n_x(), cfg.dim], 0.02, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.proj.collect(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.pos_template"), &self.pos_template));
        out.push((format!("{prefix}.pos_search"), &self.pos_search));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.proj.collect_mut(&format!("{prefix}.proj"), out);
        out.push((format!("{prefix}.pos_template"), &mut self.pos_template));
        out.push((format!("{prefix}.pos_search"), &mut self.pos_search));
    }

    pub fn bind(&self, g: &mut Graph) -> EmbedVars {
        EmbedVars {
            proj: self.proj.bind(g),
            pos_template: g.leaf(&self.pos_template),
            pos_search: g.leaf(&self.pos_search),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    pub proj: LinVars,
    pub pos_template: Var,
    pub pos_search: Var,
}

// ── operations ──────────────────────────────────────────────────────────

/// Cut a `[3, H, W]` image into non-overlapping S x S patches in row-major
/// spatial order; each patch is flattened channel-major to `3*S*S` values.
pub fn patchify(image: &Tensor, s: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("patchify", format!("{shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {s}"
        )));
    }
    let (gh, gw) = (h / s, w / s);
    let n = gh * gw;
    let pd = 3 * s * s;
    let mut out = vec![0.0; n * pd];
    let d = image.data();
    for py in 0..gh {
        for px in 0..gw {
            let row = (py * gw + px) * pd;
            for c in 0..3 {
                for dy in 0..s {
                    for dx in 0..s {
                        out[row + (c * s + dy) * s + dx] =
                            d[(c * h + py * s + dy) * w + px * s + dx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, pd], out)
}

/// Inverse of [`patchify`]; used to verify the partition property.
pub fn unpatchify(patches: &Tensor, s: usize, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = (h / s, w / s);
    let pd = 3 * s * s;
    if patches.shape() != [gh * gw, pd] {
        return Err(Error::shape("unpatchify", format!("{:?}", patches.shape())));
    }
    let mut out = vec![0.0; 3 * h * w];
    let d = patches.data();
    for py in 0..gh {
        for px in 0..gw {
            let row = (py * gw + px) * pd;
            for c in 0..3 {
                for dy in 0..s {
                    for dx in 0..s {
                        out[(c * h + py * s + dy) * w + px * s + dx] =
                            d[row + (c * s + dy) * s + dx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Project patches to tokens and fill in provenance.
pub fn embed(
    g: &mut Graph,
    patches: Var,
    proj: LinVars,
    kind: TokenKind,
    frame_id: i64,
) -> Result<Tokens> {
    let n = g.shape(patches)[0];
    let var = g.linear(patches, proj.w, proj.b)?;
    let meta = (0..n)
        .map(|i| TokenMeta {
            frame_id,
            spatial_index: i as u32,
            kind,
        })
        .collect();
    Ok(Tokens { var, meta })
}

/// Add the learned positional table matching the tokens' kind.
pub fn add_pos(g: &mut Graph, tokens: &Tokens, e: &EmbedVars) -> Result<Tokens> {
    let pos = match tokens.meta.first().map(|m| m.kind) {
        Some(TokenKind::Search) => e.pos_search,
        _ => e.pos_template,
    };
    if g.shape(pos) != g.shape(tokens.var) {
        return Err(Error::shape(
            "add_pos",
            format!("{:?} vs {:?}", g.shape(pos), g.shape(tokens.var)),
        ));
    }
    let var = g.add(tokens.var, pos)?;
    Ok(Tokens {
        var,
        meta: tokens.meta.clone(),
    })
}

/// Post-softmax column mask for reference keys, applied inside attention.
#[derive(Debug, Clone, Copy)]
pub struct MaskSpec {
    /// Per-reference-token multiplier, length `key_len`.
    pub d: Var,
    /// First query row the mask applies to (search tokens start here).
    pub query_start: usize,
    /// Number of leading key columns that are reference tokens.
    pub key_len: usize,
    /// Renormalize masked rows back to sum 1.
    pub renormalize: bool,
}

pub struct MhaOutput {
    pub out: Var,
    /// Pre-mask post-softmax weights, `[h, N_q, N_kv]`.
    pub weights: Var,
}

/// Multi-head attention. Returns the attention output and the post-softmax
/// weights (before any masking) for downstream token ranking.
pub fn mha(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &BlockVars,
    heads: usize,
    mask: Option<MaskSpec>,
) -> Result<MhaOutput> {
    if g.shape(k_in)[0] != g.shape(v_in)[0] {
        return Err(Error::shape(
            "mha",
            format!(
                "k has {} tokens, v has {}",
                g.shape(k_in)[0],
                g.shape(v_in)[0]
            ),
        ));
    }
    let dim = g.shape(q_in)[1];
    let hd = dim / heads;
    let q = g.linear(q_in, p.q.w, p.q.b)?;
    let k = g.linear(k_in, p.k.w, p.k.b)?;
    let v = g.linear(v_in, p.v.w, p.v.b)?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let kt = g.transpose_last(kh)?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let weights = g.softmax_last(scores)?;
    let used = match mask {
        None => weights,
        Some(m) => {
            let masked = g.mask_ref_keys(weights, m.d, m.query_start, m.key_len)?;
            if m.renormalize {
                let sums = g.sum_last(masked)?;
                g.div_by_last(masked, sums)?
            } else {
                masked
            }
        }
    };
    let ctx = g.bmm(used, vh)?;
    let merged = g.merge_heads(ctx)?;
    let out = g.linear(merged, p.o.w, p.o.b)?;
    Ok(MhaOutput { out, weights })
}

/// Pre-norm transformer block: x + MHA(LN(x)), then + FFN(LN(.)).
/// Token count and provenance pass through untouched.
pub fn vit_block(
    g: &mut Graph,
    tokens: &Tokens,
    p: &BlockVars,
    heads: usize,
    mask: Option<MaskSpec>,
) -> Result<(Tokens, Var)> {
    let x = tokens.var;
    let normed = g.layer_norm(x, p.ln1.gamma, p.ln1.beta)?;
    let attn = mha(g, normed, normed, normed, p, heads, mask)?;
    let x2 = g.add(x, attn.out)?;
    let normed2 = g.layer_norm(x2, p.ln2.gamma, p.ln2.beta)?;
    let f1 = g.linear(normed2, p.ffn1.w, p.ffn1.b)?;
    let f1 = g.gelu(f1);
    let f2 = g.linear(f1, p.ffn2.w, p.ffn2.b)?;
    let out = g.add(x2, f2)?;
    Ok((
        Tokens {
            var: out,
            meta: tokens.meta.clone(),
        },
        attn.weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tokens_of(g: &mut Graph, t: Tensor, kind: TokenKind) -> Tokens {
        let n = t.shape()[0];
        let var = g.constant(t);
        Tokens {
            var,
            meta: (0..n)
                .map(|i| TokenMeta {
                    frame_id: 0,
                    spatial_index: i as u32,
                    kind,
                })
                .collect(),
        }
    }

    #[test]
    fn patchify_counts() {
        let img = Tensor::zeros(&[3, 128, 128]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[64, 768]);
        let img = Tensor::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[16, 192]);
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = Rng::new(3);
        let img = Tensor::randn(&[3, 16, 24], 1.0, &mut rng);
        let p = patchify(&img, 8).unwrap();
        let back = unpatchify(&p, 8, 16, 24).unwrap();
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Tensor::zeros(&[3, 30, 30]);
        assert!(patchify(&img, 8).is_err());
    }

    #[test]
    fn embed_zero_image_gives_equal_tokens() {
        let mut rng = Rng::new(5);
        let cfg = ModelConfig::desk().encoder;
        let e = EmbedParams::init(&mut rng, &cfg);
        let mut g = Graph::new();
        let ev = e.bind(&mut g);
        let patches = g.constant(Tensor::zeros(&[cfg.n_z(), 3 * 64]));
        let toks = embed(&mut g, patches, ev.proj, TokenKind::Template, 7).unwrap();
        let d = g.data(toks.var);
        let first = &d[..cfg.dim];
        for r in 1..cfg.n_z() {
            assert_eq!(&d[r * cfg.dim..(r + 1) * cfg.dim], first);
        }
        assert_eq!(toks.meta[3].frame_id, 7);
        assert_eq!(toks.meta[3].spatial_index, 3);
    }

    #[test]
    fn single_token_self_attention_weight_is_one() {
        let mut rng = Rng::new(9);
        let p = BlockParams::init(&mut rng, 8, 4);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let out = mha(&mut g, x, x, x, &pv, 2, None).unwrap();
        for w in g.data(out.weights) {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(11);
        let p = BlockParams::init(&mut rng, 8, 4);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let out = mha(&mut g, x, x, x, &pv, 2, None).unwrap();
        let w = g.data(out.weights);
        let shape = g.shape(out.weights).to_vec();
        assert_eq!(shape, vec![2, 5, 5]);
        for row in 0..(2 * 5) {
            let s: f64 = w[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_keys_permutes_weight_columns() {
        let mut rng = Rng::new(13);
        let p = BlockParams::init(&mut rng, 8, 4);
        let q = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut kv_perm_data = vec![0.0; 4 * 8];
        for (r, &src) in perm.iter().enumerate() {
            kv_perm_data[r * 8..(r + 1) * 8].copy_from_slice(&kv.data()[src * 8..(src + 1) * 8]);
        }
        let kv_perm = Tensor::new(vec![4, 8], kv_perm_data).unwrap();

        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let qv = g.constant(q.clone());
        let kvv = g.constant(kv.clone());
        let a = mha(&mut g, qv, kvv, kvv, &pv, 2, None).unwrap();
        let wa = g.data(a.weights).to_vec();

        let mut g2 = Graph::new();
        let pv2 = p.bind(&mut g2);
        let qv2 = g2.constant(q);
        let kvv2 = g2.constant(kv_perm);
        let b = mha(&mut g2, qv2, kvv2, kvv2, &pv2, 2, None).unwrap();
        let wb = g2.data(b.weights).to_vec();

        for h in 0..2 {
            for qi in 0..2 {
                for (r, &src) in perm.iter().enumerate() {
                    let lhs = wb[(h * 2 + qi) * 4 + r];
                    let rhs = wa[(h * 2 + qi) * 4 + src];
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_preserves_token_count_and_meta() {
        let mut rng = Rng::new(17);
        let p = BlockParams::init(&mut rng, 8, 4);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let toks = tokens_of(
            &mut g,
            Tensor::randn(&[6, 8], 1.0, &mut rng),
            TokenKind::Search,
        );
        let meta_before = toks.meta.clone();
        let (out, _) = vit_block(&mut g, &toks, &pv, 2, None).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.meta, meta_before);
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut rng = Rng::new(19);
        let mut p = BlockParams::init(&mut rng, 8, 4);
        p.o.w = Tensor::zeros(&[8, 8]);
        p.o.b = Tensor::zeros(&[8]);
        p.ffn2.w = Tensor::zeros(&[32, 8]);
        p.ffn2.b = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let toks = tokens_of(&mut g, x.clone(), TokenKind::Search);
        let (out, _) = vit_block(&mut g, &toks, &pv, 2, None).unwrap();
        assert_eq!(g.data(out.var), x.data());
    }

    #[test]
    fn two_stacked_blocks_gradcheck() {
        use crate::gradcheck::{finite_diff_check, CoordPlan, FdConfig};
        let mut rng = Rng::new(23);
        let p1 = BlockParams::init(&mut rng, 8, 2);
        let p2 = BlockParams::init(&mut rng, 8, 2);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mut params: Vec<(String, &Tensor)> = Vec::new();
        p1.collect("b1", &mut params);
        p2.collect("b2", &mut params);
        let mut flat: Vec<Tensor> = vec![x];
        flat.extend(params.iter().map(|(_, t)| (*t).clone()));

        let err = finite_diff_check(
            |g, vs| {
                let rebuild = |off: usize| BlockVars {
                    ln1: LnVars {
                        gamma: vs[off],
                        beta: vs[off + 1],
                    },
                    q: LinVars {
                        w: vs[off + 2],
                        b: vs[off + 3],
                    },
                    k: LinVars {
                        w: vs[off + 4],
                        b: vs[off + 5],
                    },
                    v: LinVars {
                        w: vs[off + 6],
                        b: vs[off + 7],
                    },
                    o: LinVars {
                        w: vs[off + 8],
                        b: vs[off + 9],
                    },
                    ln2: LnVars {
                        gamma: vs[off + 10],
                        beta: vs[off + 11],
                    },
                    ffn1: LinVars {
                        w: vs[off + 12],
                        b: vs[off + 13],
                    },
                    ffn2: LinVars {
                        w: vs[off + 14],
                        b: vs[off + 15],
                    },
                };
                let bv1 = rebuild(1);
                let bv2 = rebuild(17);
                let toks = Tokens {
                    var: vs[0],
                    meta: (0..3)
                        .map(|i| TokenMeta {
                            frame_id: 0,
                            spatial_index: i as u32,
                            kind: TokenKind::Search,
                        })
                        .collect(),
                };
                let (t1, _) = vit_block(g, &toks, &bv1, 2, None)?;
                let (t2, _) = vit_block(g, &t1, &bv2, 2, None)?;
                let sq = g.mul(t2.var, t2.var)?;
                Ok(g.sum(sq))
            },
            &flat,
            &FdConfig {
                eps: 1e-5,
                coords: CoordPlan::Sample {
                    per_tensor: 6,
                    seed: 2,
                },
            },
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}

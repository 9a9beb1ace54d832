//! Relevance attention: rank reference tokens by how much the current search
//! region attends to them, then keep only the best.
//!
//! Training keeps every token but multiplies masked reference-key columns of
//! the post-softmax attention by a straight-through Gumbel decision, so the
//! ranking MLP learns from task gradients. Inference ranks with the same MLP
//! and gathers the top-k block outputs, shrinking all later layers.

use crate::encoder::{vit_block, BlockVars, LinVars, LinearParams, Tokens};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RankMlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub l3: LinearParams,
}

impl RankMlpParams {
    /// Maps pooled per-head weights (dim `heads`) to a 2-way keep/drop score.
    pub fn init(rng: &mut Rng, heads: usize, hidden: [usize; 2]) -> Self {
        RankMlpParams {
            l1: LinearParams::init(rng, heads, hidden[0], 0.02),
            l2: LinearParams::init(rng, hidden[0], hidden[1], 0.02),
            l3: LinearParams::init(rng, hidden[1], 2, 0.02),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.l1.collect(&format!("{prefix}.l1"), out);
        self.l2.collect(&format!("{prefix}.l2"), out);
        self.l3.collect(&format!("{prefix}.l3"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.l1.collect_mut(&format!("{prefix}.l1"), out);
        self.l2.collect_mut(&format!("{prefix}.l2"), out);
        self.l3.collect_mut(&format!("{prefix}.l3"), out);
    }

    pub fn bind(&self, g: &mut Graph) -> RankMlpVars {
        RankMlpVars {
            l1: self.l1.bind(g),
            l2: self.l2.bind(g),
            l3: self.l3.bind(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RankMlpVars {
    pub l1: LinVars,
    pub l2: LinVars,
    pub l3: LinVars,
}

/// Outcome of the keep decision for one relevance stage.
#[derive(Debug, Clone)]
pub enum KeepDecision {
    /// Straight-through mask over reference tokens; `hard` mirrors the
    /// forward value of `d`.
    Train { d: Var, hard: Vec<f64> },
    /// Ascending indices of kept reference tokens.
    Infer { kept: Vec<usize> },
}

/// Slice the reference-key x search-query block out of full attention
/// weights `[h, N, N]` and orient it as `[h, N_ref, N_x]`.
pub fn ref_search_block(g: &mut Graph, weights: Var, n_ref: usize, n_x: usize) -> Result<Var> {
    let s = g.shape(weights);
    if s.len() != 3 || s[1] != n_ref + n_x || s[2] != n_ref + n_x {
        return Err(Error::shape(
            "ref_search_block",
            format!("{s:?} for n_ref {n_ref}, n_x {n_x}"),
        ));
    }
    let rows = g.narrow(weights, 1, n_ref, n_x)?; // search queries
    let block = g.narrow(rows, 2, 0, n_ref)?; // reference keys
    g.transpose_last(block) // [h, N_ref, N_x]
}

/// Mean over the search-query axis: `[h, N_ref, N_x]` -> `[h, N_ref]`.
pub fn pool_weights(g: &mut Graph, w: Var) -> Result<Var> {
    if g.shape(w).len() != 3 {
        return Err(Error::shape("pool_weights", format!("{:?}", g.shape(w))));
    }
    g.mean_last(w)
}

/// Per-token keep/drop distribution from pooled weights: `[h, N_ref]` ->
/// softmax rows `[N_ref, 2]`.
pub fn predict_scores(g: &mut Graph, w_prime: Var, mlp: &RankMlpVars) -> Result<Var> {
    let x = g.transpose_last(w_prime)?; // [N_ref, h]
    if g.shape(x)[1] != g.shape(mlp.l1.w)[0] {
        return Err(Error::shape(
            "predict_scores",
            format!("{:?} into {:?}", g.shape(x), g.shape(mlp.l1.w)),
        ));
    }
    let h1 = g.linear(x, mlp.l1.w, mlp.l1.b)?;
    let h1 = g.gelu(h1);
    let h2 = g.linear(h1, mlp.l2.w, mlp.l2.b)?;
    let h2 = g.gelu(h2);
    let logits = g.linear(h2, mlp.l3.w, mlp.l3.b)?;
    g.softmax_last(logits)
}

/// Standard Gumbel(0,1) noise for an `[n, 2]` decision, addressed by key so
/// the draw is reproducible per (stage, token, component).
pub fn gumbel_noise(rng: &Rng, key: &[u64], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * 2);
    let mut full_key = Vec::with_capacity(key.len() + 2);
    for i in 0..n {
        for c in 0..2u64 {
            full_key.clear();
            full_key.extend_from_slice(key);
            full_key.push(i as u64);
            full_key.push(c);
            data.push(rng.gumbel_at(&full_key));
        }
    }
    Tensor::new(vec![n, 2], data).unwrap()
}

pub struct GumbelKeep {
    /// Keep mask over reference tokens, `[N_ref]`. With `straight_through`
    /// its forward values are the hard 0/1 decision; gradients always follow
    /// the soft sample.
    pub d: Var,
    /// Hard decision values, regardless of what `d` carries forward.
    pub hard: Vec<f64>,
    /// Soft two-way sample, `[N_ref, 2]`; rows sum to 1.
    pub soft: Var,
}

/// Two-way Gumbel-Softmax per token: hard one-hot forward, soft backward.
/// Passing `straight_through = false` leaves the soft keep column as the
/// forward value, which finite-difference checks need: a hard forward is
/// piecewise constant and has no slope to measure.
pub fn gumbel_keep(
    g: &mut Graph,
    pi: Var,
    tau: f64,
    noise: &Tensor,
    straight_through: bool,
) -> Result<GumbelKeep> {
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "gumbel temperature {tau} must be positive"
        )));
    }
    let s = g.shape(pi).to_vec();
    if s.len() != 2 || s[1] != 2 || noise.shape() != s {
        return Err(Error::shape(
            "gumbel_keep",
            format!("pi {:?} noise {:?}", s, noise.shape()),
        ));
    }
    let n = s[0];
    let logp = g.ln(pi)?;
    let noise_var = g.constant(noise.clone());
    let pert = g.add(logp, noise_var)?;
    let scaled = g.scale(pert, 1.0 / tau);
    let soft = g.softmax_last(scaled)?;
    let keep_col = g.narrow(soft, 1, 0, 1)?;
    let keep_col = g.reshape(keep_col, vec![n])?;
    let hard: Vec<f64> = g
        .data(soft)
        .chunks(2)
        .map(|row| if row[0] >= row[1] { 1.0 } else { 0.0 })
        .collect();
    let d = if straight_through {
        g.straight_through(keep_col, hard.clone())?
    } else {
        keep_col
    };
    Ok(GumbelKeep { d, hard, soft })
}

/// Multiply every reference-key column of `w` (`[h, N_ref, N_x]`) by its
/// keep decision; no renormalization.
pub fn mask_weights(g: &mut Graph, w: Var, d: Var) -> Result<Var> {
    let s = g.shape(w);
    if s.len() != 3 || g.shape(d) != [s[1]] {
        return Err(Error::shape(
            "mask_weights",
            format!("w {:?} d {:?}", s, g.shape(d)),
        ));
    }
    g.scale_axis(w, d, 1)
}

/// Indices of the k largest scores, ties broken toward the lower index,
/// returned in ascending order.
pub fn topk_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!(
            "k {k} out of range 1..={}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Absolute per-stage keep counts from the initial reference count.
pub fn stage_keep_counts(n_ref: usize, ratios: &[f64]) -> Vec<usize> {
    ratios
        .iter()
        .map(|q| ((n_ref as f64) * q).floor() as usize)
        .collect()
}

pub enum RelevanceMode<'a> {
    /// Keep the top `k` reference tokens after the block.
    Infer { k: usize },
    /// Keep everything; mask attention with a Gumbel decision at `tau`,
    /// using the provided frozen noise. `hard` selects the straight-through
    /// forward; gradient checks run with `hard = false`.
    Train {
        tau: f64,
        noise: &'a Tensor,
        hard: bool,
    },
}

pub struct RelevanceOutput {
    pub ref_tokens: Tokens,
    pub search_tokens: Tokens,
    pub decision: KeepDecision,
    /// Keep-probability column of the ranking output, `[N_ref]`.
    pub pi: Var,
}

/// One encoder block with relevance ranking attached.
///
/// The block always attends over the full `ref ∪ search` concatenation; in
/// inference the ranked top-k reference outputs (plus all search outputs)
/// are gathered for subsequent layers, so pruning pays off downstream.
pub fn relevance_block(
    g: &mut Graph,
    ref_tokens: &Tokens,
    search_tokens: &Tokens,
    block: &BlockVars,
    rank: &RankMlpVars,
    heads: usize,
    renormalize: bool,
    mode: RelevanceMode,
) -> Result<RelevanceOutput> {
    let n_ref = ref_tokens.len();
    let n_x = search_tokens.len();
    if n_ref == 0 || n_x == 0 {
        return Err(Error::shape("relevance_block", "empty token set"));
    }
    let x = g.concat0(&[ref_tokens.var, search_tokens.var])?;
    let mut meta = ref_tokens.meta.clone();
    meta.extend_from_slice(&search_tokens.meta);
    let joint = Tokens { var: x, meta };

    match mode {
        RelevanceMode::Infer { k } => {
            if k > n_ref {
                return Err(Error::Config(format!(
                    "keep count {k} exceeds reference count {n_ref}"
                )));
            }
            let (out, weights) = vit_block(g, &joint, block, heads, None)?;
            let w_block = ref_search_block(g, weights, n_ref, n_x)?;
            let pooled = pool_weights(g, w_block)?;
            let pi = predict_scores(g, pooled, rank)?;
            let keep_scores: Vec<f64> = g.data(pi).chunks(2).map(|r| r[0]).collect();
            let kept = topk_select(&keep_scores, k)?;
            let mut all_idx = kept.clone();
            all_idx.extend(n_ref..n_ref + n_x);
            let gathered = g.gather_rows(out.var, &all_idx)?;
            let ref_var = g.narrow(gathered, 0, 0, k)?;
            let search_var = g.narrow(gathered, 0, k, n_x)?;
            let pi_keep = g.narrow(pi, 1, 0, 1)?;
            let pi_keep = g.reshape(pi_keep, vec![n_ref])?;
            Ok(RelevanceOutput {
                ref_tokens: Tokens {
                    var: ref_var,
                    meta: kept.iter().map(|&i| out.meta[i]).collect(),
                },
                search_tokens: Tokens {
                    var: search_var,
                    meta: out.meta[n_ref..].to_vec(),
                },
                decision: KeepDecision::Infer { kept },
                pi: pi_keep,
            })
        }
        RelevanceMode::Train { tau, noise, hard } => {
            // Inline the block so the same post-softmax weights feed both the
            // ranking MLP and the masked value product.
            let normed = g.layer_norm(joint.var, block.ln1.gamma, block.ln1.beta)?;
            let q = g.linear(normed, block.q.w, block.q.b)?;
            let k = g.linear(normed, block.k.w, block.k.b)?;
            let v = g.linear(normed, block.v.w, block.v.b)?;
            let qh = g.split_heads(q, heads)?;
            let kh = g.split_heads(k, heads)?;
            let vh = g.split_heads(v, heads)?;
            let kt = g.transpose_last(kh)?;
            let scores = g.bmm(qh, kt)?;
            let hd = g.shape(joint.var)[1] / heads;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
            let weights = g.softmax_last(scores)?;

            let w_block = ref_search_block(g, weights, n_ref, n_x)?;
            let pooled = pool_weights(g, w_block)?;
            let pi = predict_scores(g, pooled, rank)?;
            let keep = gumbel_keep(g, pi, tau, noise, hard)?;

            let masked = g.mask_ref_keys(weights, keep.d, n_ref, n_ref)?;
            let used = if renormalize {
                let sums = g.sum_last(masked)?;
                g.div_by_last(masked, sums)?
            } else {
                masked
            };
            let ctx = g.bmm(used, vh)?;
            let merged = g.merge_heads(ctx)?;
            let attn_out = g.linear(merged, block.o.w, block.o.b)?;
            let x2 = g.add(joint.var, attn_out)?;
            let normed2 = g.layer_norm(x2, block.ln2.gamma, block.ln2.beta)?;
            let f1 = g.linear(normed2, block.ffn1.w, block.ffn1.b)?;
            let f1 = g.gelu(f1);
            let f2 = g.linear(f1, block.ffn2.w, block.ffn2.b)?;
            let out = g.add(x2, f2)?;

            let ref_var = g.narrow(out, 0, 0, n_ref)?;
            let search_var = g.narrow(out, 0, n_ref, n_x)?;
            let pi_keep = g.narrow(pi, 1, 0, 1)?;
            let pi_keep = g.reshape(pi_keep, vec![n_ref])?;
            Ok(RelevanceOutput {
                ref_tokens: Tokens {
                    var: ref_var,
                    meta: joint.meta[..n_ref].to_vec(),
                },
                search_tokens: Tokens {
                    var: search_var,
                    meta: joint.meta[n_ref..].to_vec(),
                },
                decision: KeepDecision::Train {
                    d: keep.d,
                    hard: keep.hard,
                },
                pi: pi_keep,
            })
        }
    }
}

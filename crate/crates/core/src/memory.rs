//! Global-representation memory: an immutable anchor block from frame 0 plus
//! dynamically selected tokens from later templates, bounded by a total
//! capacity. The token filter (three dedicated transformer blocks and a
//! ranking MLP) scores candidates against the current search region; baseline
//! policies (single template, whole-template FIFO, score replacement) share
//! the same storage.

use crate::config::ScheduleConfig;
use crate::encoder::{vit_block, BlockParams, TokenKind, TokenSeq, Tokens};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::relevance::{
    pool_weights, predict_scores, ref_search_block, topk_select, RankMlpParams, RankMlpVars,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryPolicy {
    OneTemplate,
    Fifo,
    Score,
    Gr,
}

impl std::str::FromStr for MemoryPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_template" => Ok(MemoryPolicy::OneTemplate),
            "fifo" => Ok(MemoryPolicy::Fifo),
            "score" => Ok(MemoryPolicy::Score),
            "gr" => Ok(MemoryPolicy::Gr),
            other => Err(Error::Config(format!(
                "unknown policy '{other}' (expected one_template|fifo|score|gr)"
            ))),
        }
    }
}

impl std::fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MemoryPolicy::OneTemplate => "one_template",
            MemoryPolicy::Fifo => "fifo",
            MemoryPolicy::Score => "score",
            MemoryPolicy::Gr => "gr",
        };
        f.write_str(s)
    }
}

/// Update cadence: a short interval early in the video that doubles every
/// `doubling_period_frames` until settling at the terminal interval.
#[derive(Debug, Clone)]
pub struct UpdateSchedule {
    cfg: ScheduleConfig,
}

impl UpdateSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        if cfg.base_interval_frames == 0
            || cfg.doubling_period_frames == 0
            || cfg.terminal_interval_frames < cfg.base_interval_frames
        {
            return Err(Error::Config("invalid update schedule".into()));
        }
        Ok(UpdateSchedule { cfg })
    }

    /// Frames between memory updates at frame index `t` (1-based).
    pub fn interval(&self, t: usize) -> usize {
        if t > self.cfg.doubling_until_frame {
            return self.cfg.terminal_interval_frames;
        }
        let doublings = t.saturating_sub(1) / self.cfg.doubling_period_frames;
        let iv = self.cfg.base_interval_frames << doublings;
        iv.min(self.cfg.terminal_interval_frames)
    }

    pub fn due(&self, t: usize, frames_since_update: usize) -> bool {
        frames_since_update >= self.interval(t)
    }
}

#[derive(Debug, Clone)]
pub struct GRMemory {
    anchor: TokenSeq,
    dynamic: TokenSeq,
    n_max: usize,
    /// (frame_id, recorded center score) per stored template; used by the
    /// score-replacement policy.
    template_scores: Vec<(i64, f64)>,
}

fn empty_tokens(dim: usize) -> TokenSeq {
    TokenSeq::new(Tensor::zeros(&[0, dim]), Vec::new()).unwrap()
}

impl GRMemory {
    /// Store the ground-truth template as the permanent anchor block.
    pub fn init(template: TokenSeq, n_max: usize) -> Result<Self> {
        if template.is_empty() {
            return Err(Error::shape("memory.init", "empty template"));
        }
        if n_max < template.len() {
            return Err(Error::Config(format!(
                "capacity {n_max} below anchor size {}",
                template.len()
            )));
        }
        let dim = template.dim();
        let mut anchor = template;
        for m in &mut anchor.meta {
            m.kind = TokenKind::Anchor;
        }
        Ok(GRMemory {
            anchor,
            dynamic: empty_tokens(dim),
            n_max,
            template_scores: Vec::new(),
        })
    }

    pub fn anchor(&self) -> &TokenSeq {
        &self.anchor
    }

    pub fn dynamic(&self) -> &TokenSeq {
        &self.dynamic
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn n_z(&self) -> usize {
        self.anchor.len()
    }

    pub fn len(&self) -> usize {
        self.anchor.len() + self.dynamic.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the anchor is always present
    }

    fn dynamic_capacity(&self) -> usize {
        self.n_max - self.anchor.len()
    }

    /// All stored tokens, anchor first.
    pub fn all_tokens(&self) -> Result<TokenSeq> {
        TokenSeq::concat(&[&self.anchor, &self.dynamic])
    }

    /// Apply one scheduled update under the given policy.
    ///
    /// `new_score` is the decoder's center score recorded when the template
    /// was cropped (score policy only). `gr_scores`, required by the gr
    /// policy once the capacity forces a choice, holds one keep score per
    /// candidate token in `dynamic ∪ new_template` order.
    pub fn apply_update(
        &mut self,
        policy: MemoryPolicy,
        new_template: &TokenSeq,
        new_score: f64,
        gr_scores: Option<&[f64]>,
    ) -> Result<()> {
        if new_template.dim() != self.anchor.dim() {
            return Err(Error::shape(
                "memory.update",
                format!(
                    "token dim {} vs memory dim {}",
                    new_template.dim(),
                    self.anchor.dim()
                ),
            ));
        }
        match policy {
            MemoryPolicy::OneTemplate => {}
            MemoryPolicy::Fifo => {
                self.dynamic = TokenSeq::concat(&[&self.dynamic, new_template])?;
                self.note_template(new_template, new_score);
            }
            MemoryPolicy::Score => {
                if self.dynamic.len() + new_template.len() <= self.dynamic_capacity() {
                    self.dynamic = TokenSeq::concat(&[&self.dynamic, new_template])?;
                    self.note_template(new_template, new_score);
                } else if let Some(&(weakest_frame, weakest_score)) = self
                    .template_scores
                    .iter()
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                {
                    if new_score > weakest_score {
                        self.remove_frame(weakest_frame)?;
                        self.dynamic = TokenSeq::concat(&[&self.dynamic, new_template])?;
                        self.note_template(new_template, new_score);
                    }
                }
            }
            MemoryPolicy::Gr => {
                let cap = self.dynamic_capacity();
                if self.dynamic.len() + new_template.len() <= cap {
                    self.dynamic = TokenSeq::concat(&[&self.dynamic, new_template])?;
                } else {
                    let candidates = TokenSeq::concat(&[&self.dynamic, new_template])?;
                    let scores = gr_scores.ok_or_else(|| {
                        Error::Config("gr update at capacity requires token scores".into())
                    })?;
                    if scores.len() != candidates.len() {
                        return Err(Error::shape(
                            "memory.update",
                            format!(
                                "{} scores for {} candidates",
                                scores.len(),
                                candidates.len()
                            ),
                        ));
                    }
                    let kept = topk_select(scores, cap)?;
                    self.dynamic = candidates.select(&kept)?;
                }
            }
        }
        // Policies can leave partial templates behind (a gr selection keeps
        // individual tokens), so the bound and the score table are enforced
        // after every update rather than trusted to each arm.
        while self.dynamic.len() > self.dynamic_capacity() {
            self.evict_oldest_template()?;
        }
        let live: std::collections::HashSet<i64> =
            self.dynamic.meta.iter().map(|m| m.frame_id).collect();
        self.template_scores.retain(|(f, _)| live.contains(f));
        Ok(())
    }

    fn note_template(&mut self, t: &TokenSeq, score: f64) {
        if let Some(m) = t.meta.first() {
            self.template_scores.push((m.frame_id, score));
        }
    }

    fn evict_oldest_template(&mut self) -> Result<()> {
        let Some(oldest) = self.dynamic.meta.iter().map(|m| m.frame_id).min() else {
            return Ok(());
        };
        self.remove_frame(oldest)?;
        self.template_scores.retain(|(f, _)| *f != oldest);
        Ok(())
    }

    fn remove_frame(&mut self, frame_id: i64) -> Result<()> {
        let keep: Vec<usize> = self
            .dynamic
            .meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.frame_id != frame_id)
            .map(|(i, _)| i)
            .collect();
        self.dynamic = if keep.is_empty() {
            empty_tokens(self.anchor.dim())
        } else {
            self.dynamic.select(&keep)?
        };
        Ok(())
    }
}

// ── token filter ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TokenFilterParams {
    pub blocks: Vec<BlockParams>,
    pub rank: RankMlpParams,
}

impl TokenFilterParams {
    pub fn init(
        rng: &mut Rng,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rank_hidden: [usize; 2],
    ) -> Self {
        TokenFilterParams {
            blocks: (0..3)
                .map(|_| BlockParams::init(rng, dim, mlp_ratio))
                .collect(),
            rank: RankMlpParams::init(rng, heads, rank_hidden),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.blocks.{i}"), out);
        }
        self.rank.collect(&format!("{prefix}.rank"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.blocks.{i}"), out);
        }
        self.rank.collect_mut(&format!("{prefix}.rank"), out);
    }

    pub fn bind(&self, g: &mut Graph) -> TokenFilterVars {
        TokenFilterVars {
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            rank: self.rank.bind(g),
        }
    }
}

pub struct TokenFilterVars {
    pub blocks: Vec<crate::encoder::BlockVars>,
    pub rank: RankMlpVars,
}

/// Keep/drop distribution over memory and new-template tokens against the
/// search region: three transformer blocks over the full concatenation, then
/// attention pooling and the ranking MLP on the final block's weights.
/// Returns softmax rows `[n_cand, 2]` in memory-then-new-template order.
pub fn token_filter_pi(
    g: &mut Graph,
    memory_tokens: &Tokens,
    new_template: &Tokens,
    search: &Tokens,
    p: &TokenFilterVars,
    heads: usize,
) -> Result<Var> {
    let n_cand = memory_tokens.len() + new_template.len();
    let n_x = search.len();
    if n_x == 0 || n_cand == 0 {
        return Err(Error::shape("token_filter", "empty inputs"));
    }
    let joined = g.concat0(&[memory_tokens.var, new_template.var, search.var])?;
    let mut meta = memory_tokens.meta.clone();
    meta.extend_from_slice(&new_template.meta);
    meta.extend_from_slice(&search.meta);
    let mut toks = Tokens { var: joined, meta };
    let mut last_weights = None;
    for b in &p.blocks {
        let (out, w) = vit_block(g, &toks, b, heads, None)?;
        toks = out;
        last_weights = Some(w);
    }
    let weights = last_weights.expect("filter has blocks");
    let block = ref_search_block(g, weights, n_cand, n_x)?;
    let pooled = pool_weights(g, block)?;
    predict_scores(g, pooled, &p.rank)
}

/// Keep column of [`token_filter_pi`], reshaped to `[n_cand]`.
pub fn token_filter(
    g: &mut Graph,
    memory_tokens: &Tokens,
    new_template: &Tokens,
    search: &Tokens,
    p: &TokenFilterVars,
    heads: usize,
) -> Result<Var> {
    let n_cand = memory_tokens.len() + new_template.len();
    let pi = token_filter_pi(g, memory_tokens, new_template, search, p, heads)?;
    let keep = g.narrow(pi, 1, 0, 1)?;
    g.reshape(keep, vec![n_cand])
}

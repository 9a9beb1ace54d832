//! End-to-end tracking: the full parameter bundle, frame cropping, the joint
//! encoder forward with relevance stages, the tracker loop with scheduled
//! memory updates, and the training step.

use crate::config::{EncoderConfig, ModelConfig};
use crate::encoder::{
    add_pos, embed, patchify, vit_block, BlockParams, BlockVars, EmbedParams, EmbedVars, LinVars,
    LnVars, TokenKind, TokenSeq, Tokens,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{
    argmax_cell, assemble_box, center_cell, gaussian_target, head_forward, BBox, HeadParams,
    HeadVars,
};
use crate::img::Image;
use crate::loss::{focal_loss, giou_loss, l1_loss, ratio_loss, teacher_box, total_loss, LossParts};
use crate::memory::{
    token_filter, token_filter_pi, GRMemory, MemoryPolicy, TokenFilterParams, TokenFilterVars,
    UpdateSchedule,
};
use crate::metrics::ResultRow;
use crate::optim::{tau_at, AdamW};
use crate::relevance::{
    gumbel_keep, gumbel_noise, stage_keep_counts, KeepDecision, RankMlpParams, RankMlpVars,
    RelevanceMode, RelevanceOutput,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Keyed-noise domains for the training stream.
const DOM_STAGE_NOISE: u64 = 11;
const DOM_FILTER_NOISE: u64 = 12;
const DOM_FRAME_PICK: u64 = 13;

// ── parameter bundle ────────────────────────────────────────────────────

/// Every learnable tensor in the model, addressable by dotted name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
    pub rank_mlps: Vec<RankMlpParams>,
    pub token_filter: TokenFilterParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn init(rng: &mut Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        Ok(ModelParams {
            embed: EmbedParams::init(rng, e),
            blocks: (0..e.depth)
                .map(|_| BlockParams::init(rng, e.dim, e.mlp_ratio))
                .collect(),
            rank_mlps: (0..e.relevance_layers.len())
                .map(|_| RankMlpParams::init(rng, e.heads, e.rank_hidden))
                .collect(),
            token_filter: TokenFilterParams::init(rng, e.dim, e.heads, e.mlp_ratio, e.rank_hidden),
            head: HeadParams::init(rng, e.dim)?,
        })
    }

    pub fn collect(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.embed.collect("embed", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}"), &mut out);
        }
        for (i, r) in self.rank_mlps.iter().enumerate() {
            r.collect(&format!("rank_mlps.{i}"), &mut out);
        }
        self.token_filter.collect("token_filter", &mut out);
        self.head.collect("head", &mut out);
        out
    }

    pub fn collect_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.embed.collect_mut("embed", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("blocks.{i}"), &mut out);
        }
        for (i, r) in self.rank_mlps.iter_mut().enumerate() {
            r.collect_mut(&format!("rank_mlps.{i}"), &mut out);
        }
        self.token_filter.collect_mut("token_filter", &mut out);
        self.head.collect_mut("head", &mut out);
        out
    }

    /// Flip gradient participation for every tensor. Tracking binds the
    /// parameters read-only; training turns this on before each step.
    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.collect_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.collect().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            embed: self.embed.bind(g),
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            rank_mlps: self.rank_mlps.iter().map(|r| r.bind(g)).collect(),
            token_filter: self.token_filter.bind(g),
            head: self.head.bind(g),
        }
    }
}

/// Graph handles for one bound copy of the parameters.
pub struct ModelVars {
    pub embed: EmbedVars,
    pub blocks: Vec<BlockVars>,
    pub rank_mlps: Vec<RankMlpVars>,
    pub token_filter: TokenFilterVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Leaf vars in the same order `ModelParams::collect` lists tensors,
    /// so names, values, and gradients can be zipped positionally. The
    /// correspondence is pinned by a test that compares values name by name.
    pub fn ordered_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        push_embed(&self.embed, &mut out);
        for b in &self.blocks {
            push_block(b, &mut out);
        }
        for r in &self.rank_mlps {
            push_rank(r, &mut out);
        }
        for b in &self.token_filter.blocks {
            push_block(b, &mut out);
        }
        push_rank(&self.token_filter.rank, &mut out);
        for br in [&self.head.score, &self.head.offset, &self.head.size] {
            for c in [&br.c1, &br.c2, &br.c3] {
                out.push(c.w);
                out.push(c.b);
            }
        }
        out
    }

    /// Rebuild the handle structure from a flat var list in `ordered_vars`
    /// order; the gradient checker supplies the list.
    pub fn from_slice(vars: &[Var], cfg: &ModelConfig) -> Result<ModelVars> {
        let e = &cfg.encoder;
        let mut c = Cursor { vars, pos: 0 };
        let embed = EmbedVars {
            proj: take_lin(&mut c)?,
            pos_template: c.take()?,
            pos_search: c.take()?,
        };
        let blocks = (0..e.depth)
            .map(|_| take_block(&mut c))
            .collect::<Result<Vec<_>>>()?;
        let rank_mlps = (0..e.relevance_layers.len())
            .map(|_| take_rank(&mut c))
            .collect::<Result<Vec<_>>>()?;
        let token_filter = TokenFilterVars {
            blocks: (0..3)
                .map(|_| take_block(&mut c))
                .collect::<Result<Vec<_>>>()?,
            rank: take_rank(&mut c)?,
        };
        let head = HeadVars {
            score: take_branch(&mut c)?,
            offset: take_branch(&mut c)?,
            size: take_branch(&mut c)?,
        };
        if c.pos != vars.len() {
            return Err(Error::Config(format!(
                "{} vars supplied, {} consumed",
                vars.len(),
                c.pos
            )));
        }
        Ok(ModelVars {
            embed,
            blocks,
            rank_mlps,
            token_filter,
            head,
        })
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Config("var list too short for model".into()))?;
        self.pos += 1;
        Ok(v)
    }
}

fn take_lin(c: &mut Cursor) -> Result<LinVars> {
    Ok(LinVars {
        w: c.take()?,
        b: c.take()?,
    })
}

fn take_ln(c: &mut Cursor) -> Result<LnVars> {
    Ok(LnVars {
        gamma: c.take()?,
        beta: c.take()?,
    })
}

fn take_block(c: &mut Cursor) -> Result<BlockVars> {
    Ok(BlockVars {
        ln1: take_ln(c)?,
        q: take_lin(c)?,
        k: take_lin(c)?,
        v: take_lin(c)?,
        o: take_lin(c)?,
        ln2: take_ln(c)?,
        ffn1: take_lin(c)?,
        ffn2: take_lin(c)?,
    })
}

fn take_rank(c: &mut Cursor) -> Result<RankMlpVars> {
    Ok(RankMlpVars {
        l1: take_lin(c)?,
        l2: take_lin(c)?,
        l3: take_lin(c)?,
    })
}

fn take_branch(c: &mut Cursor) -> Result<crate::head::BranchVars> {
    Ok(crate::head::BranchVars {
        c1: take_conv(c)?,
        c2: take_conv(c)?,
        c3: take_conv(c)?,
    })
}

fn take_conv(c: &mut Cursor) -> Result<crate::head::ConvVars> {
    Ok(crate::head::ConvVars {
        w: c.take()?,
        b: c.take()?,
    })
}

fn push_embed(e: &EmbedVars, out: &mut Vec<Var>) {
    out.push(e.proj.w);
    out.push(e.proj.b);
    out.push(e.pos_template);
    out.push(e.pos_search);
}

fn push_block(b: &BlockVars, out: &mut Vec<Var>) {
    out.push(b.ln1.gamma);
    out.push(b.ln1.beta);
    for l in [&b.q, &b.k, &b.v, &b.o] {
        out.push(l.w);
        out.push(l.b);
    }
    out.push(b.ln2.gamma);
    out.push(b.ln2.beta);
    for l in [&b.ffn1, &b.ffn2] {
        out.push(l.w);
        out.push(l.b);
    }
}

fn push_rank(r: &RankMlpVars, out: &mut Vec<Var>) {
    for l in [&r.l1, &r.l2, &r.l3] {
        out.push(l.w);
        out.push(l.b);
    }
}

// ── cropping ────────────────────────────────────────────────────────────

/// Mapping between frame pixels and the normalized [0,1] coordinates of one
/// square crop.
#[derive(Debug, Clone, Copy)]
pub struct CropTransform {
    /// Crop center in frame pixels.
    pub cx: f64,
    pub cy: f64,
    /// Square side in frame pixels.
    pub side: f64,
    /// Output resolution the crop was resampled to.
    pub out: usize,
    /// Channel means used for out-of-frame padding.
    pub mean: [f64; 3],
}

impl CropTransform {
    pub fn to_crop(&self, b: &BBox) -> BBox {
        let left = self.cx - self.side / 2.0;
        let top = self.cy - self.side / 2.0;
        BBox::new(
            (b.cx - left) / self.side,
            (b.cy - top) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        let left = self.cx - self.side / 2.0;
        let top = self.cy - self.side / 2.0;
        BBox::new(
            left + b.cx * self.side,
            top + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

/// Cut a square region around `b` covering `area_factor` times its area and
/// resample it to `out`x`out`. Regions reaching past the frame are padded
/// with the frame's channel means.
pub fn crop_region(
    img: &Image,
    b: &BBox,
    area_factor: f64,
    out: usize,
) -> Result<(Image, CropTransform)> {
    if !b.is_valid() {
        return Err(Error::Data(format!("cannot crop around box {b:?}")));
    }
    if area_factor <= 0.0 || out == 0 {
        return Err(Error::Config(format!(
            "crop factor {area_factor}, size {out}"
        )));
    }
    let side = (area_factor * b.w * b.h).sqrt();
    let mean = img.channel_means();
    let tf = CropTransform {
        cx: b.cx,
        cy: b.cy,
        side,
        out,
        mean,
    };
    let left = tf.cx - side / 2.0;
    let top = tf.cy - side / 2.0;
    let step = side / out as f64;
    let mut crop = Image::blank(out, out, [0.0; 3]);
    for oy in 0..out {
        let sy = top + (oy as f64 + 0.5) * step - 0.5;
        for ox in 0..out {
            let sx = left + (ox as f64 + 0.5) * step - 0.5;
            let px = img.sample(sx, sy, mean);
            for ch in 0..3 {
                crop.set(ch, oy, ox, px[ch]);
            }
        }
    }
    Ok((crop, tf))
}

// ── joint encoder forward ───────────────────────────────────────────────

/// How the relevance stages behave during one forward pass.
pub enum StageMode<'a> {
    /// Rank and prune: each stage keeps the count derived from the ratios
    /// against the reference count at encoder entry.
    Infer,
    /// Keep everything, mask with Gumbel decisions; one frozen noise tensor
    /// per stage. `hard` picks the straight-through forward.
    Train {
        tau: f64,
        noises: &'a [Tensor],
        hard: bool,
    },
}

pub struct EncoderOutput {
    pub ref_tokens: Tokens,
    pub search_tokens: Tokens,
    /// One entry per relevance stage, in depth order.
    pub decisions: Vec<KeepDecision>,
}

/// Run the shared encoder over `reference ∪ search`, applying relevance
/// ranking at the configured layers.
pub fn encoder_forward(
    g: &mut Graph,
    ref_tokens: &Tokens,
    search_tokens: &Tokens,
    m: &ModelVars,
    cfg: &EncoderConfig,
    mode: StageMode,
) -> Result<EncoderOutput> {
    let n_stages = cfg.relevance_layers.len();
    if m.blocks.len() != cfg.depth || m.rank_mlps.len() != n_stages {
        return Err(Error::Config(format!(
            "{} blocks / {} rank mlps bound for depth {} with {} stages",
            m.blocks.len(),
            m.rank_mlps.len(),
            cfg.depth,
            n_stages
        )));
    }
    let keeps = stage_keep_counts(ref_tokens.len(), &cfg.keep_ratios);
    if let StageMode::Train { noises, .. } = &mode {
        if noises.len() != n_stages {
            return Err(Error::Config(format!(
                "{} noise tensors for {} stages",
                noises.len(),
                n_stages
            )));
        }
    }

    let mut rt = ref_tokens.clone();
    let mut st = search_tokens.clone();
    let mut decisions = Vec::with_capacity(n_stages);
    let mut stage = 0usize;
    for layer in 1..=cfg.depth {
        let is_stage = stage < n_stages && cfg.relevance_layers[stage] == layer;
        if is_stage {
            let stage_mode = match &mode {
                StageMode::Infer => RelevanceMode::Infer { k: keeps[stage] },
                StageMode::Train { tau, noises, hard } => RelevanceMode::Train {
                    tau: *tau,
                    noise: &noises[stage],
                    hard: *hard,
                },
            };
            let out: RelevanceOutput = crate::relevance::relevance_block(
                g,
                &rt,
                &st,
                &m.blocks[layer - 1],
                &m.rank_mlps[stage],
                cfg.heads,
                cfg.renormalize_masked,
                stage_mode,
            )?;
            rt = out.ref_tokens;
            st = out.search_tokens;
            decisions.push(out.decision);
            stage += 1;
        } else {
            let joint_var = g.concat0(&[rt.var, st.var])?;
            let mut meta = rt.meta.clone();
            meta.extend_from_slice(&st.meta);
            let joint = Tokens {
                var: joint_var,
                meta,
            };
            let (out, _) = vit_block(g, &joint, &m.blocks[layer - 1], cfg.heads, None)?;
            let n_ref = rt.len();
            let n_x = st.len();
            let rv = g.narrow(out.var, 0, 0, n_ref)?;
            let sv = g.narrow(out.var, 0, n_ref, n_x)?;
            rt = Tokens {
                var: rv,
                meta: out.meta[..n_ref].to_vec(),
            };
            st = Tokens {
                var: sv,
                meta: out.meta[n_ref..].to_vec(),
            };
        }
    }
    Ok(EncoderOutput {
        ref_tokens: rt,
        search_tokens: st,
        decisions,
    })
}

fn seq_to_tokens(g: &mut Graph, seq: &TokenSeq) -> Tokens {
    Tokens {
        var: g.constant(seq.embeddings.clone()),
        meta: seq.meta.clone(),
    }
}

/// Patchify a crop, embed it, and add the kind-matched positional table.
fn embed_crop(
    g: &mut Graph,
    crop: &Image,
    e: &EmbedVars,
    patch: usize,
    kind: TokenKind,
    frame_id: i64,
) -> Result<Tokens> {
    let patches = patchify(&crop.pixels, patch)?;
    let pv = g.constant(patches);
    let toks = embed(g, pv, e.proj, kind, frame_id)?;
    add_pos(g, &toks, e)
}

// ── tracking loop ───────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrackerState {
    pub memory: GRMemory,
    pub schedule: UpdateSchedule,
    pub policy: MemoryPolicy,
    /// Index of the last processed frame; 0 after initialization.
    pub t: usize,
    pub frames_since_update: usize,
    /// Last prediction in frame pixels.
    pub last_box: BBox,
    /// Frames at which a memory update ran.
    pub update_trace: Vec<usize>,
}

pub struct StepOutput {
    /// Prediction in frame pixels, clamped to the frame.
    pub pred: BBox,
    /// Peak of the center score map.
    pub score: f64,
}

/// Set up tracking from the first frame and its ground-truth box. The
/// template becomes the memory's permanent anchor.
pub fn init_tracker(
    img: &Image,
    gt: &BBox,
    params: &ModelParams,
    cfg: &ModelConfig,
    policy: MemoryPolicy,
) -> Result<TrackerState> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let (crop, _) = crop_region(img, gt, cfg.crop.template_area_factor, e.template_size_px)?;
    let mut g = Graph::new();
    let ev = params.embed.bind(&mut g);
    let toks = embed_crop(&mut g, &crop, &ev, e.patch_size_px, TokenKind::Template, 0)?;
    let seq = toks.detach(&g)?;
    let memory = GRMemory::init(seq, cfg.memory.n_max(e.n_z()))?;
    Ok(TrackerState {
        memory,
        schedule: UpdateSchedule::new(cfg.schedule.clone())?,
        policy,
        t: 0,
        frames_since_update: 0,
        last_box: *gt,
        update_trace: Vec::new(),
    })
}

fn clamp_to_frame(b: &BBox, img: &Image) -> BBox {
    let (w, h) = (img.width() as f64, img.height() as f64);
    BBox::new(
        b.cx.clamp(0.0, w),
        b.cy.clamp(0.0, h),
        b.w.clamp(1.0, w),
        b.h.clamp(1.0, h),
    )
}

/// Process one frame: crop around the previous prediction, run the pruned
/// encoder and the head, and apply a scheduled memory update when due.
pub fn track_step(
    state: &mut TrackerState,
    img: &Image,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<StepOutput> {
    let e = &cfg.encoder;
    state.t += 1;
    let t = state.t;
    let (scrop, stf) = crop_region(
        img,
        &state.last_box,
        cfg.crop.search_area_factor,
        e.search_size_px,
    )?;

    let mut g = Graph::new();
    let mv = params.bind(&mut g);
    let mem_seq = state.memory.all_tokens()?;
    let ref_tokens = seq_to_tokens(&mut g, &mem_seq);
    let search_tokens = embed_crop(
        &mut g,
        &scrop,
        &mv.embed,
        e.patch_size_px,
        TokenKind::Search,
        t as i64,
    )?;

    let enc = encoder_forward(
        &mut g,
        &ref_tokens,
        &search_tokens,
        &mv,
        e,
        StageMode::Infer,
    )?;
    let head = head_forward(&mut g, &enc.search_tokens, &mv.head)?;
    let maps = head.detach(&g);
    let pred_crop = assemble_box(&maps);
    let pred = clamp_to_frame(&stf.to_frame(&pred_crop), img);
    let (px, py) = argmax_cell(&maps.r);
    let score = maps.r.data()[px * maps.grid() + py];

    state.last_box = pred;
    state.frames_since_update += 1;

    if state.policy != MemoryPolicy::OneTemplate && state.schedule.due(t, state.frames_since_update)
    {
        let (tcrop, _) = crop_region(
            img,
            &pred,
            cfg.crop.template_area_factor,
            e.template_size_px,
        )?;
        let new_toks = embed_crop(
            &mut g,
            &tcrop,
            &mv.embed,
            e.patch_size_px,
            TokenKind::Template,
            t as i64,
        )?;
        let new_seq = new_toks.detach(&g)?;
        let gr_scores = if state.policy == MemoryPolicy::Gr {
            let mem_tokens = seq_to_tokens(&mut g, &mem_seq);
            let keep = token_filter(
                &mut g,
                &mem_tokens,
                &new_toks,
                &search_tokens,
                &mv.token_filter,
                e.heads,
            )?;
            // the anchor is scored but never up for eviction
            Some(g.data(keep)[state.memory.n_z()..].to_vec())
        } else {
            None
        };
        state
            .memory
            .apply_update(state.policy, &new_seq, score, gr_scores.as_deref())?;
        state.frames_since_update = 0;
        state.update_trace.push(t);
    }
    Ok(StepOutput { pred, score })
}

/// Track a whole sequence. Frame 0 initializes from ground truth and is
/// reported as a perfect prediction, matching the usual one-pass protocol.
pub fn track_sequence(
    frames: &[Image],
    gts: &[BBox],
    params: &ModelParams,
    cfg: &ModelConfig,
    policy: MemoryPolicy,
) -> Result<(Vec<ResultRow>, TrackerState)> {
    if frames.is_empty() || frames.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} frames vs {} ground-truth boxes",
            frames.len(),
            gts.len()
        )));
    }
    let mut state = init_tracker(&frames[0], &gts[0], params, cfg, policy)?;
    let mut rows = vec![ResultRow {
        frame: 0,
        pred: gts[0],
        gt: gts[0],
    }];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let out = track_step(&mut state, frame, params, cfg)?;
        rows.push(ResultRow {
            frame: t,
            pred: out.pred,
            gt: gts[t],
        });
    }
    Ok((rows, state))
}

// ── training ────────────────────────────────────────────────────────────

/// One training example: template crops (the first acts as the anchor), a
/// search crop, and the target box in normalized search-crop coordinates.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub templates: Vec<Tensor>,
    pub search: Tensor,
    pub gt_crop: BBox,
}

/// Assemble a sample from a sequence: templates cropped at their
/// ground-truth boxes, the search window centered on the frame before the
/// search frame so the target sits off-center the way it does when tracking.
pub fn make_sample(
    frames: &[Image],
    gts: &[BBox],
    cfg: &ModelConfig,
    search_frame: usize,
    template_frames: &[usize],
) -> Result<TrainSample> {
    if frames.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} frames vs {} boxes",
            frames.len(),
            gts.len()
        )));
    }
    if search_frame == 0 || search_frame >= frames.len() {
        return Err(Error::Data(format!(
            "search frame {search_frame} out of range 1..{}",
            frames.len()
        )));
    }
    if template_frames.is_empty() {
        return Err(Error::Data("no template frames".into()));
    }
    let e = &cfg.encoder;
    let mut templates = Vec::with_capacity(template_frames.len());
    for &f in template_frames {
        if f >= search_frame {
            return Err(Error::Data(format!(
                "template frame {f} not before search frame {search_frame}"
            )));
        }
        let (crop, _) = crop_region(
            &frames[f],
            &gts[f],
            cfg.crop.template_area_factor,
            e.template_size_px,
        )?;
        templates.push(crop.pixels);
    }
    let (scrop, stf) = crop_region(
        &frames[search_frame],
        &gts[search_frame - 1],
        cfg.crop.search_area_factor,
        e.search_size_px,
    )?;
    Ok(TrainSample {
        templates,
        search: scrop.pixels,
        gt_crop: stf.to_crop(&gts[search_frame]),
    })
}

/// Keyed pick of one search frame and `n_templates` template frames (frame 0
/// first, the rest drawn from the preceding window, ascending).
pub fn pick_training_frames(
    rng: &Rng,
    seq_tag: u64,
    step: u64,
    len: usize,
    n_templates: usize,
) -> (usize, Vec<usize>) {
    debug_assert!(len >= 2 && n_templates >= 1);
    let u = rng.uniform_at(&[DOM_FRAME_PICK, seq_tag, step, 0]);
    let search_frame = 1 + ((u * (len - 1) as f64) as usize).min(len - 2);
    let mut templates = vec![0usize];
    for i in 1..n_templates {
        let u = rng.uniform_at(&[DOM_FRAME_PICK, seq_tag, step, i as u64]);
        templates.push(((u * search_frame as f64) as usize).min(search_frame - 1));
    }
    templates[1..].sort_unstable();
    (search_frame, templates)
}

/// Frozen randomness for one training forward.
pub struct TrainForward<'a> {
    pub tau: f64,
    /// One `[N_ref, 2]` Gumbel tensor per relevance stage.
    pub stage_noises: &'a [Tensor],
    /// Gumbel tensor for the token-filter decision; required with two or
    /// more templates.
    pub filter_noise: Option<&'a Tensor>,
    /// Straight-through forward. Gradient checks run with `false`.
    pub hard: bool,
}

/// Build the full training loss for one sample.
///
/// All templates enter the encoder as reference tokens. The token filter
/// sees the leading templates as stored memory and the last as the incoming
/// update; its Gumbel decision masks the non-anchor reference rows straight
/// through, so the filter learns from the tracking loss like the relevance
/// stages do. Its ratio target is the dynamic share of memory capacity.
pub fn build_train_loss(
    g: &mut Graph,
    mv: &ModelVars,
    sample: &TrainSample,
    cfg: &ModelConfig,
    fwd: &TrainForward<'_>,
) -> Result<(Var, LossParts)> {
    let e = &cfg.encoder;
    let n_z = e.n_z();
    if sample.templates.is_empty() {
        return Err(Error::Data("sample has no templates".into()));
    }
    if !sample.gt_crop.is_valid() {
        return Err(Error::Data(format!(
            "sample target box {:?} is degenerate",
            sample.gt_crop
        )));
    }

    let mut template_tokens = Vec::with_capacity(sample.templates.len());
    for (i, t) in sample.templates.iter().enumerate() {
        let kind = if i == 0 {
            TokenKind::Anchor
        } else {
            TokenKind::Template
        };
        let crop = Image::new(t.clone())?;
        template_tokens.push(embed_crop(
            g,
            &crop,
            &mv.embed,
            e.patch_size_px,
            kind,
            i as i64,
        )?);
    }
    let search = Image::new(sample.search.clone())?;
    let search_tokens = embed_crop(
        g,
        &search,
        &mv.embed,
        e.patch_size_px,
        TokenKind::Search,
        sample.templates.len() as i64,
    )?;

    let mut ref_var = template_tokens[0].var;
    let mut ref_meta = template_tokens[0].meta.clone();
    if template_tokens.len() > 1 {
        let vars: Vec<Var> = template_tokens.iter().map(|t| t.var).collect();
        ref_var = g.concat0(&vars)?;
        ref_meta = template_tokens
            .iter()
            .flat_map(|t| t.meta.iter().copied())
            .collect();
    }

    // Token-filter decision over the non-anchor templates.
    let mut filter_decision = None;
    if template_tokens.len() > 1 {
        let noise = fwd.filter_noise.ok_or_else(|| {
            Error::Config("token-filter noise required with multiple templates".into())
        })?;
        let n_new = template_tokens.len() - 1;
        let stored_vars: Vec<Var> = template_tokens[..n_new].iter().map(|t| t.var).collect();
        let stored = Tokens {
            var: if stored_vars.len() == 1 {
                stored_vars[0]
            } else {
                g.concat0(&stored_vars)?
            },
            meta: template_tokens[..n_new]
                .iter()
                .flat_map(|t| t.meta.iter().copied())
                .collect(),
        };
        let newest = &template_tokens[n_new];
        let pi = token_filter_pi(
            g,
            &stored,
            newest,
            &search_tokens,
            &mv.token_filter,
            e.heads,
        )?;
        let non_anchor = g.narrow(pi, 0, n_z, n_new * n_z)?;
        let keep = gumbel_keep(g, non_anchor, fwd.tau, noise, fwd.hard)?;
        let ones = g.constant(Tensor::full(&[n_z], 1.0));
        let mask = g.concat0(&[ones, keep.d])?;
        ref_var = g.scale_axis(ref_var, mask, 0)?;
        filter_decision = Some(keep.d);
    }
    let ref_tokens = Tokens {
        var: ref_var,
        meta: ref_meta,
    };

    let enc = encoder_forward(
        g,
        &ref_tokens,
        &search_tokens,
        mv,
        e,
        StageMode::Train {
            tau: fwd.tau,
            noises: fwd.stage_noises,
            hard: fwd.hard,
        },
    )?;

    let head = head_forward(g, &enc.search_tokens, &mv.head)?;
    let target = gaussian_target(&sample.gt_crop, e.grid())?;
    let focal = focal_loss(
        g,
        head.r,
        &target,
        cfg.loss.focal_alpha,
        cfg.loss.focal_beta,
    )?;
    let cell = center_cell(&sample.gt_crop, e.grid());
    let teacher = teacher_box(g, &head, cell)?;
    let giou = giou_loss(g, &teacher, &sample.gt_crop)?;
    let l1 = l1_loss(g, &teacher, &sample.gt_crop)?;

    let mut decisions = Vec::new();
    let mut ratios = Vec::new();
    for (d, q) in enc.decisions.iter().zip(&e.keep_ratios) {
        match d {
            KeepDecision::Train { d, .. } => {
                decisions.push(*d);
                ratios.push(*q);
            }
            KeepDecision::Infer { .. } => {
                return Err(Error::Config(
                    "inference decision in training forward".into(),
                ))
            }
        }
    }
    if let Some(d) = filter_decision {
        let n_max = cfg.memory.n_max(n_z) as f64;
        decisions.push(d);
        ratios.push((n_max - n_z as f64) / n_max);
    }
    let ratio = ratio_loss(g, &decisions, &ratios)?;

    let parts = LossParts {
        focal,
        giou,
        l1,
        ratio,
    };
    let total = total_loss(g, &parts, &cfg.loss)?;
    Ok((total, parts))
}

#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
    pub ratio: f64,
}

/// One optimizer step on one sample. The Gumbel noises are keyed by the
/// optimizer's step count, so a run is reproducible from the seed alone.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    sample: &TrainSample,
    cfg: &ModelConfig,
    rng: &Rng,
) -> Result<LossReport> {
    let e = &cfg.encoder;
    let step = opt.step_count();
    let tau = tau_at(&cfg.train, step);
    let n_ref = sample.templates.len() * e.n_z();
    let stage_noises: Vec<Tensor> = (0..e.relevance_layers.len())
        .map(|s| gumbel_noise(rng, &[DOM_STAGE_NOISE, step, s as u64], n_ref))
        .collect();
    let filter_noise = if sample.templates.len() > 1 {
        Some(gumbel_noise(
            rng,
            &[DOM_FILTER_NOISE, step],
            (sample.templates.len() - 1) * e.n_z(),
        ))
    } else {
        None
    };

    params.set_trainable(true);
    let mut g = Graph::new();
    let mv = params.bind(&mut g);
    let (total, parts) = build_train_loss(
        &mut g,
        &mv,
        sample,
        cfg,
        &TrainForward {
            tau,
            stage_noises: &stage_noises,
            filter_noise: filter_noise.as_ref(),
            hard: true,
        },
    )?;
    let report = LossReport {
        total: g.data(total)[0],
        focal: g.data(parts.focal)[0],
        giou: g.data(parts.giou)[0],
        l1: g.data(parts.l1)[0],
        ratio: g.data(parts.ratio)[0],
    };
    g.backward(total)?;

    let vars = mv.ordered_vars();
    opt.begin_step();
    let zeros_for: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|gr| gr.to_vec()))
        .collect();
    for ((name, tensor), grad) in params.collect_mut().into_iter().zip(zeros_for) {
        let grad = grad.unwrap_or_else(|| vec![0.0; tensor.numel()]);
        opt.update(&name, tensor, &grad)
            .map_err(|err| Error::Config(format!("updating {name}: {err}")))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        CropConfig, EncoderConfig, LossConfig, MemoryConfig, ModelConfig, ScheduleConfig,
        TrainConfig,
    };
    use crate::gradcheck::{finite_diff_check, CoordPlan, FdConfig};
    use crate::synth::{gen_sequence, SynthConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            name: "tiny".into(),
            encoder: EncoderConfig {
                depth: 2,
                dim: 8,
                heads: 2,
                patch_size_px: 8,
                template_size_px: 16,
                search_size_px: 32,
                relevance_layers: vec![1],
                keep_ratios: vec![0.75],
                mlp_ratio: 2,
                rank_hidden: [8, 4],
                renormalize_masked: false,
            },
            memory: MemoryConfig { capacity_factor: 3 },
            schedule: ScheduleConfig {
                base_interval_frames: 5,
                doubling_period_frames: 100,
                doubling_until_frame: 500,
                terminal_interval_frames: 160,
            },
            crop: CropConfig {
                search_area_factor: 4.0,
                template_area_factor: 2.0,
            },
            loss: LossConfig {
                lambda_score: 1.0,
                lambda_iou: 2.0,
                lambda_l1: 5.0,
                lambda_ratio: 1.0,
                focal_alpha: 2.0,
                focal_beta: 4.0,
            },
            train: TrainConfig {
                lr_rank_and_head: 4e-4,
                lr_backbone: 4e-5,
                weight_decay: 1e-4,
                tau_start: 1.0,
                tau_end: 0.1,
                steps: 40,
                templates_stage1: 2,
                templates_stage2: 3,
            },
        }
    }

    fn tiny_scene() -> (Vec<Image>, Vec<BBox>) {
        let cfg = SynthConfig {
            frames: 30,
            height: 64,
            width: 64,
            target_w: 14.0,
            target_h: 12.0,
            velocity: (1.0, 0.7),
            jitter: 0.2,
            ..SynthConfig::default()
        };
        gen_sequence(&cfg, 7).unwrap()
    }

    #[test]
    fn ordered_vars_matches_collect() {
        let cfg = tiny_config();
        let mut rng = Rng::new(3);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let mut g = Graph::new();
        let mv = params.bind(&mut g);
        let named = params.collect();
        let vars = mv.ordered_vars();
        assert_eq!(named.len(), vars.len());
        for ((name, tensor), var) in named.iter().zip(&vars) {
            assert_eq!(
                tensor.data(),
                g.data(*var),
                "value mismatch for {name}, bind order broke"
            );
        }
        let rebuilt = ModelVars::from_slice(&vars, &cfg).unwrap();
        assert_eq!(rebuilt.ordered_vars(), vars);
    }

    #[test]
    fn collect_names_cover_components() {
        let cfg = tiny_config();
        let mut rng = Rng::new(3);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let names: Vec<String> = params.collect().into_iter().map(|(n, _)| n).collect();
        for prefix in [
            "embed.proj.w",
            "blocks.0.q.w",
            "blocks.1.ffn2.b",
            "rank_mlps.0.l1.w",
            "token_filter.blocks.2.o.w",
            "token_filter.rank.l3.b",
            "head.size.c3.w",
        ] {
            assert!(names.iter().any(|n| n == prefix), "missing {prefix}");
        }
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");
    }

    #[test]
    fn crop_transform_round_trip() {
        let img = Image::blank(64, 64, [0.3, 0.4, 0.5]);
        let around = BBox::new(20.0, 30.0, 10.0, 8.0);
        let (_, tf) = crop_region(&img, &around, 4.0, 32).unwrap();
        let b = BBox::new(23.0, 27.5, 6.0, 5.0);
        let back = tf.to_frame(&tf.to_crop(&b));
        assert!((back.cx - b.cx).abs() < 1e-9);
        assert!((back.cy - b.cy).abs() < 1e-9);
        assert!((back.w - b.w).abs() < 1e-9);
        assert!((back.h - b.h).abs() < 1e-9);
        // the box itself maps to the crop center at relative scale
        let c = tf.to_crop(&around);
        assert!((c.cx - 0.5).abs() < 1e-9 && (c.cy - 0.5).abs() < 1e-9);
    }

    #[test]
    fn crop_of_constant_image_is_constant_with_padding() {
        let img = Image::blank(32, 32, [0.25, 0.5, 0.75]);
        // box at the corner: most of the crop hangs outside and takes the
        // channel means, which equal the constant colors here
        let around = BBox::new(2.0, 2.0, 8.0, 8.0);
        let (crop, _) = crop_region(&img, &around, 4.0, 16).unwrap();
        for c in 0..3 {
            let want = [0.25, 0.5, 0.75][c];
            for y in 0..16 {
                for x in 0..16 {
                    assert!((crop.get(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn keep_all_one_template_matches_vanilla_blocks() {
        // ratios of 1.0 keep every reference token, so the staged forward
        // must reproduce a plain block stack bit for bit
        let mut cfg = tiny_config();
        cfg.encoder.keep_ratios = vec![1.0];
        let mut rng = Rng::new(11);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let e = &cfg.encoder;

        let mut t_rng = Rng::new(99);
        let tpl = Tensor::randn(&[e.n_z(), e.dim], 1.0, &mut t_rng);
        let srch = Tensor::randn(&[e.n_x(), e.dim], 1.0, &mut t_rng);

        let mut g = Graph::new();
        let mv = params.bind(&mut g);
        let mk = |g: &mut Graph, t: &Tensor, kind, n| {
            let var = g.constant(t.clone());
            Tokens {
                var,
                meta: (0..n)
                    .map(|i| crate::encoder::TokenMeta {
                        frame_id: 0,
                        spatial_index: i as u32,
                        kind,
                    })
                    .collect(),
            }
        };
        let rt = mk(&mut g, &tpl, TokenKind::Template, e.n_z());
        let st = mk(&mut g, &srch, TokenKind::Search, e.n_x());
        let enc = encoder_forward(&mut g, &rt, &st, &mv, e, StageMode::Infer).unwrap();
        let staged = g.data(enc.search_tokens.var).to_vec();

        let mut g2 = Graph::new();
        let mv2 = params.bind(&mut g2);
        let rt2 = mk(&mut g2, &tpl, TokenKind::Template, e.n_z());
        let st2 = mk(&mut g2, &srch, TokenKind::Search, e.n_x());
        let joint_var = g2.concat0(&[rt2.var, st2.var]).unwrap();
        let mut meta = rt2.meta.clone();
        meta.extend_from_slice(&st2.meta);
        let mut toks = Tokens {
            var: joint_var,
            meta,
        };
        for b in &mv2.blocks {
            let (out, _) = vit_block(&mut g2, &toks, b, e.heads, None).unwrap();
            toks = out;
        }
        let vanilla: Vec<f64> = g2.data(toks.var)[e.n_z() * e.dim..].to_vec();
        assert_eq!(staged.len(), vanilla.len());
        for (a, b) in staged.iter().zip(&vanilla) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn tracker_runs_updates_on_schedule() {
        let cfg = tiny_config();
        let mut rng = Rng::new(5);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let (frames, gts) = tiny_scene();
        let frames = &frames[..12];
        let gts = &gts[..12];
        let (rows, state) = track_sequence(frames, gts, &params, &cfg, MemoryPolicy::Fifo).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(state.update_trace, vec![5, 10]);
        // anchor 4 tokens + two stored templates of 4 at capacity 12
        assert_eq!(state.memory.len(), 12);
        for r in &rows {
            assert!(r.pred.is_valid());
            assert!(r.pred.cx >= 0.0 && r.pred.cx <= 64.0);
        }
    }

    #[test]
    fn tracker_is_deterministic() {
        let cfg = tiny_config();
        let mut rng = Rng::new(5);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let (frames, gts) = tiny_scene();
        let (a, _) =
            track_sequence(&frames[..8], &gts[..8], &params, &cfg, MemoryPolicy::Gr).unwrap();
        let (b, _) =
            track_sequence(&frames[..8], &gts[..8], &params, &cfg, MemoryPolicy::Gr).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pred.to_xywh(), y.pred.to_xywh());
        }
    }

    #[test]
    fn tracking_leaves_params_untouched() {
        let cfg = tiny_config();
        let mut rng = Rng::new(5);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let before: Vec<Vec<f64>> = params
            .collect()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let (frames, gts) = tiny_scene();
        track_sequence(&frames[..7], &gts[..7], &params, &cfg, MemoryPolicy::Score).unwrap();
        for ((_, t), old) in params.collect().iter().zip(&before) {
            assert_eq!(t.data(), old.as_slice());
        }
    }

    #[test]
    fn policies_diverge_in_memory_content() {
        let cfg = tiny_config();
        let mut rng = Rng::new(5);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let (frames, gts) = tiny_scene();
        let (_, one) = track_sequence(
            &frames[..12],
            &gts[..12],
            &params,
            &cfg,
            MemoryPolicy::OneTemplate,
        )
        .unwrap();
        let (_, fifo) =
            track_sequence(&frames[..12], &gts[..12], &params, &cfg, MemoryPolicy::Fifo).unwrap();
        assert_eq!(one.memory.len(), cfg.encoder.n_z());
        assert!(one.update_trace.is_empty());
        assert!(fifo.memory.len() > one.memory.len());
    }

    #[test]
    fn make_sample_shapes_and_target() {
        let cfg = tiny_config();
        let (frames, gts) = tiny_scene();
        let s = make_sample(&frames, &gts, &cfg, 5, &[0, 2, 4]).unwrap();
        assert_eq!(s.templates.len(), 3);
        for t in &s.templates {
            assert_eq!(t.shape(), &[3, 16, 16]);
        }
        assert_eq!(s.search.shape(), &[3, 32, 32]);
        assert!(s.gt_crop.is_valid());
        assert!(s.gt_crop.cx > 0.0 && s.gt_crop.cx < 1.0);
        assert!(make_sample(&frames, &gts, &cfg, 5, &[0, 5]).is_err());
        assert!(make_sample(&frames, &gts, &cfg, 0, &[0]).is_err());
    }

    #[test]
    fn pick_training_frames_in_range() {
        let rng = Rng::new(0xfeed);
        for step in 0..200 {
            let (sf, tf) = pick_training_frames(&rng, 4, step, 30, 3);
            assert!((1..30).contains(&sf));
            assert_eq!(tf[0], 0);
            assert_eq!(tf.len(), 3);
            assert!(tf[1..].iter().all(|&f| f < sf));
            assert!(tf[1] <= tf[2]);
        }
    }

    #[test]
    fn train_step_decreases_loss_on_repeated_sample() {
        let cfg = tiny_config();
        let mut rng = Rng::new(21);
        let mut params = ModelParams::init(&mut rng, &cfg).unwrap();
        let (frames, gts) = tiny_scene();
        let sample = make_sample(&frames, &gts, &cfg, 4, &[0, 2]).unwrap();
        let mut opt = AdamW::new(&cfg.train);
        let train_rng = Rng::new(77);
        let first = train_step(&mut params, &mut opt, &sample, &cfg, &train_rng).unwrap();
        assert!(first.total.is_finite());
        let mut last = first;
        for _ in 0..24 {
            last = train_step(&mut params, &mut opt, &sample, &cfg, &train_rng).unwrap();
        }
        assert!(
            last.total < first.total,
            "loss did not drop: {} -> {}",
            first.total,
            last.total
        );
        assert_eq!(opt.step_count(), 25);
    }

    #[test]
    fn train_path_gradcheck() {
        let cfg = tiny_config();
        let mut rng = Rng::new(31);
        let params = ModelParams::init(&mut rng, &cfg).unwrap();
        let (frames, gts) = tiny_scene();
        let sample = make_sample(&frames, &gts, &cfg, 3, &[0, 1]).unwrap();

        let e = &cfg.encoder;
        let n_ref = sample.templates.len() * e.n_z();
        let noise_rng = Rng::new(4242);
        let stage_noises: Vec<Tensor> = (0..e.relevance_layers.len())
            .map(|s| gumbel_noise(&noise_rng, &[DOM_STAGE_NOISE, 0, s as u64], n_ref))
            .collect();
        let filter_noise = gumbel_noise(&noise_rng, &[DOM_FILTER_NOISE, 0], e.n_z());

        let tensors: Vec<Tensor> = params
            .collect()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let err = finite_diff_check(
            |g, vs| {
                let mv = ModelVars::from_slice(vs, &cfg)?;
                let (total, _) = build_train_loss(
                    g,
                    &mv,
                    &sample,
                    &cfg,
                    &TrainForward {
                        tau: 0.8,
                        stage_noises: &stage_noises,
                        filter_noise: Some(&filter_noise),
                        hard: false,
                    },
                )?;
                Ok(total)
            },
            &tensors,
            &FdConfig {
                eps: 1e-5,
                coords: CoordPlan::Sample {
                    per_tensor: 2,
                    seed: 97,
                },
            },
        )
        .unwrap();
        assert!(err < 1e-4, "worst relative gradient error {err}");
    }
}

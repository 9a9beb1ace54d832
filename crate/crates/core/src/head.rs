//! Decoder head: three convolutional branches over the search-region feature
//! map producing a center-score map R, a within-cell offset map E, and a
//! size map O, plus the box assembly rule and the Gaussian training target.
//!
//! Maps are laid out `[channel, x, y]` where x indexes the horizontal grid
//! cell, so `r[0][3][4]` scores the cell whose normalized center column is
//! 3/G. Flat row order throughout the head is `x * G + y`.

use crate::encoder::Tokens;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Center-size box. Units are whatever the caller works in: the head
/// produces coordinates normalized to the search crop, the tracker converts
/// to frame pixels. Overlap math is scale-invariant either way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From corner-size (x, y, w, h) as stored in groundtruth files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn to_xywh(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.w,
            self.h,
        )
    }

    /// (x0, y0, x1, y1)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

/// Detached decoder outputs for one search region.
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    /// `[1, G, G]` center scores in [0,1].
    pub r: Tensor,
    /// `[2, G, G]` within-cell offsets in [0,1]; channel 0 is x.
    pub e: Tensor,
    /// `[2, G, G]` normalized sizes in [0,1]; channel 0 is width.
    pub o: Tensor,
}

impl ScoreMaps {
    pub fn grid(&self) -> usize {
        self.r.shape()[1]
    }
}

// ── parameters ──────────────────────────────────────────────────────────

/// One 3x3 convolution as an im2col matmul: `w` is `[9 * c_in, c_out]` with
/// row index `(c * 3 + ky) * 3 + kx`, `b` is `[c_out]`.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init(rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        ConvParams {
            w: Tensor::randn(&[9 * c_in, c_out], 0.02, rng),
            b: Tensor::zeros(&[c_out]),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    fn bind(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            w: g.leaf(&self.w),
            b: g.leaf(&self.b),
        }
    }
}

pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

/// Three stacked 3x3 convs: C -> C/2 -> C/4 -> out, GELU between layers.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub c1: ConvParams,
    pub c2: ConvParams,
    pub c3: ConvParams,
}

impl BranchParams {
    fn init(rng: &mut Rng, dim: usize, out: usize) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(Error::Config(format!(
                "head needs dim divisible by 4, got {dim}"
            )));
        }
        Ok(BranchParams {
            c1: ConvParams::init(rng, dim, dim / 2),
            c2: ConvParams::init(rng, dim / 2, dim / 4),
            c3: ConvParams::init(rng, dim / 4, out),
        })
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.c1.collect(&format!("{prefix}.c1"), out);
        self.c2.collect(&format!("{prefix}.c2"), out);
        self.c3.collect(&format!("{prefix}.c3"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.c1.collect_mut(&format!("{prefix}.c1"), out);
        self.c2.collect_mut(&format!("{prefix}.c2"), out);
        self.c3.collect_mut(&format!("{prefix}.c3"), out);
    }

    fn bind(&self, g: &mut Graph) -> BranchVars {
        BranchVars {
            c1: self.c1.bind(g),
            c2: self.c2.bind(g),
            c3: self.c3.bind(g),
        }
    }
}

pub struct BranchVars {
    pub c1: ConvVars,
    pub c2: ConvVars,
    pub c3: ConvVars,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub score: BranchParams,
    pub offset: BranchParams,
    pub size: BranchParams,
}

impl HeadParams {
    pub fn init(rng: &mut Rng, dim: usize) -> Result<Self> {
        Ok(HeadParams {
            score: BranchParams::init(rng, dim, 1)?,
            offset: BranchParams::init(rng, dim, 2)?,
            size: BranchParams::init(rng, dim, 2)?,
        })
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.score.collect(&format!("{prefix}.score"), out);
        self.offset.collect(&format!("{prefix}.offset"), out);
        self.size.collect(&format!("{prefix}.size"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.score.collect_mut(&format!("{prefix}.score"), out);
        self.offset.collect_mut(&format!("{prefix}.offset"), out);
        self.size.collect_mut(&format!("{prefix}.size"), out);
    }

    pub fn bind(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            score: self.score.bind(g),
            offset: self.offset.bind(g),
            size: self.size.bind(g),
        }
    }
}

pub struct HeadVars {
    pub score: BranchVars,
    pub offset: BranchVars,
    pub size: BranchVars,
}

// ── forward ─────────────────────────────────────────────────────────────

/// Live decoder outputs. Maps are `[c, G, G]`; flats are `[G*G, c]` with row
/// `x * G + y`, kept for cheap per-cell extraction in the losses.
pub struct HeadOut {
    pub r: Var,
    pub e: Var,
    pub o: Var,
    pub r_flat: Var,
    pub e_flat: Var,
    pub o_flat: Var,
    pub grid: usize,
}

impl HeadOut {
    pub fn detach(&self, g: &Graph) -> ScoreMaps {
        ScoreMaps {
            r: g.value(self.r).detached(),
            e: g.value(self.e).detached(),
            o: g.value(self.o).detached(),
        }
    }
}

fn flat_to_map(g: &mut Graph, flat: Var, ch: usize, grid: usize) -> Result<Var> {
    let t = g.transpose_last(flat)?;
    g.reshape(t, vec![ch, grid, grid])
}

fn conv3x3(g: &mut Graph, map: Var, p: &ConvVars, geom: ConvGeom) -> Result<Var> {
    let cols = g.im2col(map, geom)?;
    let prod = g.matmul(cols, p.w)?;
    g.add_row_bcast(prod, p.b)
}

fn branch(g: &mut Graph, map: Var, p: &BranchVars, dim: usize, grid: usize) -> Result<(Var, Var)> {
    let geom = |channels| ConvGeom {
        channels,
        height: grid,
        width: grid,
        kernel: 3,
        pad: 1,
    };
    let h1 = conv3x3(g, map, &p.c1, geom(dim))?;
    let h1 = g.gelu(h1);
    let m1 = flat_to_map(g, h1, dim / 2, grid)?;
    let h2 = conv3x3(g, m1, &p.c2, geom(dim / 2))?;
    let h2 = g.gelu(h2);
    let m2 = flat_to_map(g, h2, dim / 4, grid)?;
    let h3 = conv3x3(g, m2, &p.c3, geom(dim / 4))?;
    let flat = g.sigmoid(h3);
    let out_ch = g.shape(flat)[1];
    let map = flat_to_map(g, flat, out_ch, grid)?;
    Ok((map, flat))
}

/// Run the three branches over the surviving search tokens. Tokens must form
/// a full row-major G×G grid (token p sits at column p mod G, row p div G).
pub fn head_forward(g: &mut Graph, search: &Tokens, p: &HeadVars) -> Result<HeadOut> {
    let shape = g.shape(search.var).to_vec();
    let (n, dim) = (shape[0], shape[1]);
    let grid = (n as f64).sqrt() as usize;
    if grid * grid != n {
        return Err(Error::shape(
            "head_forward",
            format!("{n} search tokens do not form a square grid"),
        ));
    }
    // [N, C] -> [C, y, x] -> [C, x, y]
    let t = g.transpose_last(search.var)?;
    let by_row = g.reshape(t, vec![dim, grid, grid])?;
    let map = g.transpose_last(by_row)?;
    let (r, r_flat) = branch(g, map, &p.score, dim, grid)?;
    let (e, e_flat) = branch(g, map, &p.offset, dim, grid)?;
    let (o, o_flat) = branch(g, map, &p.size, dim, grid)?;
    Ok(HeadOut {
        r,
        e,
        o,
        r_flat,
        e_flat,
        o_flat,
        grid,
    })
}

// ── box assembly ────────────────────────────────────────────────────────

/// Argmax cell of an `[1, G, G]` score map, ties to the lowest row-major
/// index. Returns (x, y).
pub fn argmax_cell(r: &Tensor) -> (usize, usize) {
    let grid = r.shape()[1];
    let data = r.data();
    let mut best = 0usize;
    for (i, v) in data.iter().enumerate() {
        if *v > data[best] {
            best = i;
        }
    }
    (best / grid, best % grid)
}

/// Box from decoder maps: center at the argmax cell plus the learned
/// within-cell offset, size read from the size map, cell units divided by G.
pub fn assemble_box(maps: &ScoreMaps) -> BBox {
    let grid = maps.grid();
    let (xr, yr) = argmax_cell(&maps.r);
    let e = |c: usize| maps.e.data()[(c * grid + xr) * grid + yr];
    let o = |c: usize| maps.o.data()[(c * grid + xr) * grid + yr];
    BBox {
        cx: (xr as f64 + e(0)) / grid as f64,
        cy: (yr as f64 + e(1)) / grid as f64,
        w: o(0),
        h: o(1),
    }
}

// ── training target ─────────────────────────────────────────────────────

/// Gaussian score target with peak 1.0 at the ground-truth center cell and
/// per-axis spread proportional to the box size in cells.
pub fn gaussian_target(gt: &BBox, grid: usize) -> Result<Tensor> {
    if !gt.is_valid() {
        return Err(Error::Data("degenerate ground-truth box".into()));
    }
    let cell = |v: f64| ((v * grid as f64) as isize).clamp(0, grid as isize - 1);
    let (cx, cy) = (cell(gt.cx), cell(gt.cy));
    let sigma = |s: f64| (s * grid as f64 / 6.0).max(0.5);
    let (sx, sy) = (sigma(gt.w), sigma(gt.h));
    let mut data = vec![0.0; grid * grid];
    for x in 0..grid as isize {
        for y in 0..grid as isize {
            let dx = (x - cx) as f64;
            let dy = (y - cy) as f64;
            let v = (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
            data[(x * grid as isize + y) as usize] = v;
        }
    }
    Tensor::new(vec![1, grid, grid], data)
}

/// Ground-truth center cell (x, y) used for teacher-forced box extraction.
pub fn center_cell(gt: &BBox, grid: usize) -> (usize, usize) {
    let cell = |v: f64| (((v * grid as f64) as isize).clamp(0, grid as isize - 1)) as usize;
    (cell(gt.cx), cell(gt.cy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{TokenKind, TokenMeta};

    fn search_tokens(g: &mut Graph, n: usize, dim: usize, rng: &mut Rng) -> Tokens {
        Tokens {
            var: g.constant(Tensor::randn(&[n, dim], 1.0, rng)),
            meta: (0..n)
                .map(|i| TokenMeta {
                    frame_id: 1,
                    spatial_index: i as u32,
                    kind: TokenKind::Search,
                })
                .collect(),
        }
    }

    fn maps(r: Tensor, e: Tensor, o: Tensor) -> ScoreMaps {
        ScoreMaps { r, e, o }
    }

    #[test]
    fn shapes_and_bounds() {
        let mut rng = Rng::new(11);
        let p = HeadParams::init(&mut rng, 8).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let toks = search_tokens(&mut g, 64, 8, &mut rng);
        let out = head_forward(&mut g, &toks, &pv).unwrap();
        assert_eq!(g.shape(out.r), &[1, 8, 8]);
        assert_eq!(g.shape(out.e), &[2, 8, 8]);
        assert_eq!(g.shape(out.o), &[2, 8, 8]);
        for v in [out.r, out.e, out.o] {
            assert!(g.data(v).iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn non_square_token_count_rejected() {
        let mut rng = Rng::new(12);
        let p = HeadParams::init(&mut rng, 8).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let toks = search_tokens(&mut g, 63, 8, &mut rng);
        assert!(head_forward(&mut g, &toks, &pv).is_err());
    }

    #[test]
    fn map_layout_follows_token_grid() {
        // a distinctive token at grid (row 2, col 5) must land at map[.., x=5, y=2]
        let mut rng = Rng::new(13);
        let p = HeadParams::init(&mut rng, 4).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let grid = 8usize;
        let mut data = vec![0.0; 64 * 4];
        let hot = 2 * grid + 5;
        for c in 0..4 {
            data[hot * 4 + c] = 9.0;
        }
        let toks = Tokens {
            var: g.constant(Tensor::new(vec![64, 4], data).unwrap()),
            meta: (0..64)
                .map(|i| TokenMeta {
                    frame_id: 0,
                    spatial_index: i as u32,
                    kind: TokenKind::Search,
                })
                .collect(),
        };
        // check the internal rearrangement directly
        let t = g.transpose_last(toks.var).unwrap();
        let by_row = g.reshape(t, vec![4, grid, grid]).unwrap();
        let map = g.transpose_last(by_row).unwrap();
        let d = g.data(map);
        let idx = |c: usize, y: usize, x: usize| (c * grid + y) * grid + x;
        assert_eq!(d[idx(0, 5, 2)], 9.0);
        assert_eq!(d[idx(0, 2, 5)], 0.0);
        let out = head_forward(&mut g, &toks, &pv).unwrap();
        assert_eq!(g.shape(out.r), &[1, grid, grid]);
    }

    #[test]
    fn assemble_peak_with_zero_offset() {
        let grid = 8;
        let mut r = vec![0.0; grid * grid];
        r[3 * grid + 4] = 1.0;
        let e = Tensor::zeros(&[2, grid, grid]);
        let mut o = vec![0.0; 2 * grid * grid];
        let idx = |c: usize, y: usize, x: usize| (c * grid + y) * grid + x;
        o[idx(0, 3, 4)] = 0.5;
        o[idx(1, 3, 4)] = 0.25;
        let m = maps(
            Tensor::new(vec![1, grid, grid], r).unwrap(),
            e,
            Tensor::new(vec![2, grid, grid], o).unwrap(),
        );
        let b = assemble_box(&m);
        assert_eq!((b.cx, b.cy, b.w, b.h), (3.0 / 8.0, 4.0 / 8.0, 0.5, 0.25));
    }

    #[test]
    fn offset_shifts_by_half_cell() {
        let grid = 8;
        let mut r = vec![0.0; grid * grid];
        r[3 * grid + 4] = 1.0;
        let r = Tensor::new(vec![1, grid, grid], r).unwrap();
        let o = Tensor::full(&[2, grid, grid], 0.3);
        let zero = assemble_box(&maps(r.clone(), Tensor::zeros(&[2, grid, grid]), o.clone()));
        let half = assemble_box(&maps(r, Tensor::full(&[2, grid, grid], 0.5), o));
        let cell = 1.0 / grid as f64;
        assert!((half.cx - zero.cx - 0.5 * cell).abs() < 1e-12);
        assert!((half.cy - zero.cy - 0.5 * cell).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_tie_break_to_origin() {
        let grid = 8;
        let m = maps(
            Tensor::full(&[1, grid, grid], 0.5),
            Tensor::zeros(&[2, grid, grid]),
            Tensor::full(&[2, grid, grid], 0.1),
        );
        let b = assemble_box(&m);
        assert_eq!((b.cx, b.cy), (0.0, 0.0));
    }

    #[test]
    fn assemble_invariant_under_monotone_rescale() {
        let mut rng = Rng::new(17);
        for case in 0..50 {
            let grid = 6;
            let r: Vec<f64> = (0..grid * grid)
                .map(|i| rng.uniform_at(&[case, i as u64]))
                .collect();
            let e = Tensor::randn(&[2, grid, grid], 0.1, &mut rng);
            let o = Tensor::randn(&[2, grid, grid], 0.1, &mut rng);
            let base = maps(
                Tensor::new(vec![1, grid, grid], r.clone()).unwrap(),
                e.clone(),
                o.clone(),
            );
            let scaled: Vec<f64> = r.iter().map(|v| 0.05 + 0.9 * v * v * v).collect();
            let mono = maps(Tensor::new(vec![1, grid, grid], scaled).unwrap(), e, o);
            assert_eq!(assemble_box(&base), assemble_box(&mono));
        }
    }

    #[test]
    fn gaussian_peaks_at_one_and_decays() {
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4);
        let grid = 8;
        let t = gaussian_target(&gt, grid).unwrap();
        let d = t.data();
        let (cx, cy) = center_cell(&gt, grid);
        assert_eq!((cx, cy), (4, 4));
        assert_eq!(d[cx * grid + cy], 1.0);
        // symmetric around the center cell for a square box
        for k in 1..4 {
            let left = d[(cx - k) * grid + cy];
            let right = d[(cx + k).min(grid - 1) * grid + cy];
            if cx + k < grid {
                assert!((left - right).abs() < 1e-12);
            }
            let up = d[cx * grid + cy - k];
            let down = d[cx * grid + (cy + k).min(grid - 1)];
            if cy + k < grid {
                assert!((up - down).abs() < 1e-12);
            }
        }
        // monotone decay along both axes
        for k in 1..4 {
            assert!(d[(cx + k) * grid + cy] < d[(cx + k - 1) * grid + cy]);
            assert!(d[cx * grid + cy + k] < d[cx * grid + cy + k - 1]);
        }
        assert!(gaussian_target(&BBox::new(0.5, 0.5, 0.0, 0.1), grid).is_err());
    }

    #[test]
    fn head_gradcheck() {
        use crate::gradcheck::{finite_diff_check, CoordPlan, FdConfig};
        let mut rng = Rng::new(19);
        let p = HeadParams::init(&mut rng, 4).unwrap();
        let x = Tensor::randn(&[16, 4], 1.0, &mut rng);
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        p.collect("head", &mut named);
        let mut flat: Vec<Tensor> = vec![x.clone()];
        flat.extend(named.iter().map(|(_, t)| (*t).clone()));
        let err = finite_diff_check(
            |g, vs| {
                let conv = |off: usize| ConvVars {
                    w: vs[off],
                    b: vs[off + 1],
                };
                let br = |off: usize| BranchVars {
                    c1: conv(off),
                    c2: conv(off + 2),
                    c3: conv(off + 4),
                };
                let pv = HeadVars {
                    score: br(1),
                    offset: br(7),
                    size: br(13),
                };
                let toks = Tokens {
                    var: vs[0],
                    meta: (0..16)
                        .map(|i| TokenMeta {
                            frame_id: 0,
                            spatial_index: i as u32,
                            kind: TokenKind::Search,
                        })
                        .collect(),
                };
                let out = head_forward(g, &toks, &pv)?;
                let s1 = g.sum(out.r);
                let s2 = g.sum(out.e);
                let s3 = g.sum(out.o);
                let t = g.add(s1, s2)?;
                g.add(t, s3)
            },
            &flat,
            &FdConfig {
                eps: 1e-5,
                coords: CoordPlan::Sample {
                    per_tensor: 4,
                    seed: 3,
                },
            },
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}

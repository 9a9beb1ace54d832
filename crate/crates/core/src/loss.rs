//! Training objective: penalty-reduced focal loss on the center-score map,
//! GIoU and L1 on the teacher-forced box, and the keep-ratio regularizer on
//! the per-stage pruning decisions, combined with fixed weights.

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{BBox, HeadOut};
use crate::tensor::Tensor;

const LN_GUARD: f64 = 1e-12;

/// A box whose coordinates are live graph scalars (each shape `[1]`).
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

pub fn box_constant(g: &mut Graph, b: &BBox) -> BoxVars {
    BoxVars {
        cx: g.constant(Tensor::scalar(b.cx)),
        cy: g.constant(Tensor::scalar(b.cy)),
        w: g.constant(Tensor::scalar(b.w)),
        h: g.constant(Tensor::scalar(b.h)),
    }
}

/// Assemble the predicted box at a fixed (ground-truth) cell so the offset
/// and size branches receive gradients regardless of where the score map
/// currently peaks.
pub fn teacher_box(g: &mut Graph, head: &HeadOut, cell: (usize, usize)) -> Result<BoxVars> {
    let grid = head.grid;
    let (x, y) = cell;
    if x >= grid || y >= grid {
        return Err(Error::shape(
            "teacher_box",
            format!("cell ({x},{y}) outside {grid}x{grid}"),
        ));
    }
    let row = x * grid + y;
    let e_row = g.narrow(head.e_flat, 0, row, 1)?;
    let o_row = g.narrow(head.o_flat, 0, row, 1)?;
    let pick = |g: &mut Graph, m: Var, c: usize| -> Result<Var> {
        let v = g.narrow(m, 1, c, 1)?;
        g.reshape(v, vec![1])
    };
    let e0 = pick(g, e_row, 0)?;
    let e1 = pick(g, e_row, 1)?;
    let inv = 1.0 / grid as f64;
    let cx = g.add_scalar(e0, x as f64);
    let cx = g.scale(cx, inv);
    let cy = g.add_scalar(e1, y as f64);
    let cy = g.scale(cy, inv);
    Ok(BoxVars {
        cx,
        cy,
        w: pick(g, o_row, 0)?,
        h: pick(g, o_row, 1)?,
    })
}

/// Penalty-reduced focal loss against a Gaussian target. Cells where the
/// target is exactly 1 are positives; everywhere else the penalty is scaled
/// by (1 - y)^beta. Normalized by the positive count.
pub fn focal_loss(g: &mut Graph, r: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
    let numel = g.value(r).numel();
    if numel != target.numel() {
        return Err(Error::shape(
            "focal_loss",
            format!("{numel} predictions vs {} targets", target.numel()),
        ));
    }
    let mut pos = vec![0.0; numel];
    let mut neg_w = vec![0.0; numel];
    let mut n_pos = 0usize;
    for (i, &y) in target.data().iter().enumerate() {
        if y >= 1.0 {
            pos[i] = 1.0;
            n_pos += 1;
        } else {
            neg_w[i] = (1.0 - y).powf(beta);
        }
    }
    if n_pos == 0 {
        return Err(Error::Data("focal target has no positive cell".into()));
    }
    let shape = g.shape(r).to_vec();
    let pos = g.constant(Tensor::new(shape.clone(), pos)?);
    let neg_w = g.constant(Tensor::new(shape, neg_w)?);

    let p_safe = g.add_scalar(r, LN_GUARD);
    let ln_p = g.ln(p_safe)?;
    let one_minus_p = g.scale(r, -1.0);
    let one_minus_p = g.add_scalar(one_minus_p, 1.0);
    let q_safe = g.add_scalar(one_minus_p, LN_GUARD);
    let ln_q = g.ln(q_safe)?;

    let pow_q = g.pow_const(one_minus_p, alpha);
    let pos_term = g.mul(pow_q, ln_p)?;
    let pos_term = g.mul(pos, pos_term)?;

    let pow_p = g.pow_const(r, alpha);
    let neg_term = g.mul(pow_p, ln_q)?;
    let neg_term = g.mul(neg_w, neg_term)?;

    let both = g.add(pos_term, neg_term)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / n_pos as f64))
}

/// 1 - GIoU between a predicted box (graph scalars) and a fixed target.
pub fn giou_loss(g: &mut Graph, pred: &BoxVars, gt: &BBox) -> Result<Var> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Data(format!(
            "degenerate ground-truth box {}x{}",
            gt.w, gt.h
        )));
    }
    let gv = box_constant(g, gt);
    let corners = |g: &mut Graph, b: &BoxVars| -> Result<(Var, Var, Var, Var)> {
        let hw = g.scale(b.w, 0.5);
        let hh = g.scale(b.h, 0.5);
        Ok((
            g.sub(b.cx, hw)?,
            g.sub(b.cy, hh)?,
            g.add(b.cx, hw)?,
            g.add(b.cy, hh)?,
        ))
    };
    let (px0, py0, px1, py1) = corners(g, pred)?;
    let (gx0, gy0, gx1, gy1) = corners(g, &gv)?;

    let ix0 = g.maximum(px0, gx0)?;
    let iy0 = g.maximum(py0, gy0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.clamp_min(iw, 0.0);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.clamp_min(ih, 0.0);
    let inter = g.mul(iw, ih)?;

    let area_p = g.mul(pred.w, pred.h)?;
    let area_g = g.mul(gv.w, gv.h)?;
    let sum_areas = g.add(area_p, area_g)?;
    let union = g.sub(sum_areas, inter)?;

    let hx0 = g.minimum(px0, gx0)?;
    let hy0 = g.minimum(py0, gy0)?;
    let hx1 = g.maximum(px1, gx1)?;
    let hy1 = g.maximum(py1, gy1)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap_frac = g.div(gap, hull)?;
    let giou = g.sub(iou, gap_frac)?;
    let neg = g.scale(giou, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean absolute error over the four box coordinates.
pub fn l1_loss(g: &mut Graph, pred: &BoxVars, gt: &BBox) -> Result<Var> {
    let gv = box_constant(g, gt);
    let stacked_p = g.concat0(&[pred.cx, pred.cy, pred.w, pred.h])?;
    let stacked_g = g.concat0(&[gv.cx, gv.cy, gv.w, gv.h])?;
    let diff = g.sub(stacked_p, stacked_g)?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// Keep-ratio regularizer: mean squared gap between each stage's target
/// ratio and the realized mean of its keep decisions.
pub fn ratio_loss(g: &mut Graph, decisions: &[Var], ratios: &[f64]) -> Result<Var> {
    if decisions.len() != ratios.len() || decisions.is_empty() {
        return Err(Error::shape(
            "ratio_loss",
            format!("{} decisions vs {} ratios", decisions.len(), ratios.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&d, &q) in decisions.iter().zip(ratios) {
        let m = g.mean(d);
        let neg = g.scale(m, -1.0);
        let gap = g.add_scalar(neg, q);
        let sq = g.mul(gap, gap)?;
        acc = Some(match acc {
            None => sq,
            Some(a) => g.add(a, sq)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / decisions.len() as f64))
}

pub struct LossParts {
    pub focal: Var,
    pub giou: Var,
    pub l1: Var,
    pub ratio: Var,
}

/// Weighted sum of the four parts. Rejects non-finite parts by name so a
/// diverging run fails loudly instead of poisoning the optimizer.
pub fn total_loss(g: &mut Graph, parts: &LossParts, cfg: &LossConfig) -> Result<Var> {
    for (name, v) in [
        ("focal", parts.focal),
        ("giou", parts.giou),
        ("l1", parts.l1),
        ("ratio", parts.ratio),
    ] {
        if !g.data(v).iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let a = g.scale(parts.focal, cfg.lambda_score);
    let b = g.scale(parts.giou, cfg.lambda_iou);
    let c = g.scale(parts.l1, cfg.lambda_l1);
    let d = g.scale(parts.ratio, cfg.lambda_ratio);
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::gradcheck::{finite_diff_check, CoordPlan, FdConfig};

    #[test]
    fn focal_single_positive_matches_hand_value() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::new(vec![1, 1, 1], vec![0.9]).unwrap());
        let t = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let loss = focal_loss(&mut g, r, &t, 2.0, 4.0).unwrap();
        let want = -(0.1f64.powi(2)) * 0.9f64.ln();
        assert!((g.data(loss)[0] - want).abs() < 1e-9);
        assert!((want - 1.0536e-3).abs() < 1e-7);
    }

    #[test]
    fn focal_negative_cells_are_penalty_reduced() {
        // one positive plus one soft-negative cell
        let mut g = Graph::new();
        let r = g.constant(Tensor::new(vec![2], vec![0.9, 0.3]).unwrap());
        let t = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        let loss = focal_loss(&mut g, r, &t, 2.0, 4.0).unwrap();
        let want =
            -((0.1f64.powi(2)) * 0.9f64.ln() + 0.5f64.powi(4) * 0.3f64.powi(2) * 0.7f64.ln());
        assert!((g.data(loss)[0] - want).abs() < 1e-9);
        // all-soft target is rejected
        let t2 = Tensor::new(vec![2], vec![0.9, 0.5]).unwrap();
        assert!(focal_loss(&mut g, r, &t2, 2.0, 4.0).is_err());
    }

    #[test]
    fn giou_identity_is_zero() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3);
        let mut g = Graph::new();
        let pv = box_constant(&mut g, &b);
        let loss = giou_loss(&mut g, &pv, &b).unwrap();
        assert!(g.data(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn giou_corner_boxes_match_hand_value() {
        // corner form [0,0,2,2] and [1,1,3,3]: IoU 1/7, hull 9, GIoU 1/7 - 2/9
        let p = BBox::from_xywh(0.0, 0.0, 2.0, 2.0);
        let gt = BBox::from_xywh(1.0, 1.0, 2.0, 2.0);
        let mut g = Graph::new();
        let pv = box_constant(&mut g, &p);
        let loss = giou_loss(&mut g, &pv, &gt).unwrap();
        let want = 1.0 - (1.0 / 7.0 - 2.0 / 9.0);
        assert!((g.data(loss)[0] - want).abs() < 1e-12);
        assert!((want - 1.0794).abs() < 1e-4);
        // degenerate gt is an error
        assert!(giou_loss(&mut g, &pv, &BBox::new(0.5, 0.5, 0.0, 1.0)).is_err());
    }

    #[test]
    fn giou_stays_in_range() {
        let rng = crate::rng::Rng::new(31);
        for case in 0..200u64 {
            let draw = |k: u64| rng.uniform_at(&[case, k]);
            let p = BBox::new(draw(0), draw(1), 0.05 + draw(2), 0.05 + draw(3));
            let t = BBox::new(draw(4), draw(5), 0.05 + draw(6), 0.05 + draw(7));
            let mut g = Graph::new();
            let pv = box_constant(&mut g, &p);
            let loss = giou_loss(&mut g, &pv, &t).unwrap();
            let giou = 1.0 - g.data(loss)[0];
            assert!(giou > -1.0 && giou <= 1.0 + 1e-12, "giou = {giou}");
        }
    }

    #[test]
    fn l1_identity_and_shift() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3);
        let mut g = Graph::new();
        let pv = box_constant(&mut g, &b);
        let z = l1_loss(&mut g, &pv, &b).unwrap();
        assert!(g.data(z)[0].abs() < 1e-12);
        let shifted = BBox::new(0.5, 0.6, 0.2, 0.3);
        let pv2 = box_constant(&mut g, &shifted);
        let l = l1_loss(&mut g, &pv2, &b).unwrap();
        assert!((g.data(l)[0] - 0.1 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_keep_all_matches_hand_value() {
        let mut g = Graph::new();
        let ds: Vec<Var> = (0..3).map(|_| g.constant(Tensor::ones(&[10]))).collect();
        let loss = ratio_loss(&mut g, &ds, &[0.9, 0.8, 0.7]).unwrap();
        assert!((g.data(loss)[0] - 0.14 / 3.0).abs() < 1e-12);
        assert!((0.14_f64 / 3.0 - 0.046667).abs() < 1e-6);
        // exact-ratio decisions give zero
        let mut g2 = Graph::new();
        let exact: Vec<Var> = [0.9_f64, 0.8, 0.7]
            .iter()
            .map(|&q| {
                let mut v = vec![0.0; 10];
                for slot in v.iter_mut().take((q * 10.0).round() as usize) {
                    *slot = 1.0;
                }
                g2.constant(Tensor::new(vec![10], v).unwrap())
            })
            .collect();
        let z = ratio_loss(&mut g2, &exact, &[0.9, 0.8, 0.7]).unwrap();
        assert!(g2.data(z)[0].abs() < 1e-12);
    }

    #[test]
    fn total_weights_and_nonfinite_guard() {
        let cfg = ModelConfig::desk().loss;
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            focal: one,
            giou: one,
            l1: one,
            ratio: one,
        };
        let t = total_loss(&mut g, &parts, &cfg).unwrap();
        assert_eq!(g.data(t)[0], 9.0);
        let zero = g.constant(Tensor::scalar(0.0));
        let zp = LossParts {
            focal: zero,
            giou: zero,
            l1: zero,
            ratio: zero,
        };
        let tz = total_loss(&mut g, &zp, &cfg).unwrap();
        assert_eq!(g.data(tz)[0], 0.0);
        let bad = g.constant(Tensor::scalar(f64::NAN));
        let bp = LossParts {
            focal: one,
            giou: bad,
            l1: one,
            ratio: one,
        };
        let err = total_loss(&mut g, &bp, &cfg).unwrap_err();
        assert!(err.to_string().contains("giou"));
    }

    #[test]
    fn losses_gradcheck() {
        // focal w.r.t. the score map
        let r0 = Tensor::new(vec![4], vec![0.9, 0.2, 0.4, 0.7]).unwrap();
        let target = Tensor::new(vec![4], vec![1.0, 0.6, 0.1, 0.0]).unwrap();
        let err = finite_diff_check(
            |g, vs| focal_loss(g, vs[0], &target, 2.0, 4.0),
            std::slice::from_ref(&r0),
            &FdConfig {
                eps: 1e-6,
                coords: CoordPlan::All,
            },
        )
        .unwrap();
        assert!(err < 1e-4, "focal err = {err}");

        // giou + l1 w.r.t. the predicted box
        // corners chosen to avoid exact min/max ties, which are kinks
        let coords = Tensor::new(vec![4], vec![0.44, 0.55, 0.3, 0.25]).unwrap();
        let gt = BBox::new(0.5, 0.5, 0.2, 0.2);
        let err = finite_diff_check(
            |g, vs| {
                let pick = |g: &mut Graph, i: usize| -> Result<Var> {
                    let v = g.narrow(vs[0], 0, i, 1)?;
                    g.reshape(v, vec![1])
                };
                let pv = BoxVars {
                    cx: pick(g, 0)?,
                    cy: pick(g, 1)?,
                    w: pick(g, 2)?,
                    h: pick(g, 3)?,
                };
                let gl = giou_loss(g, &pv, &gt)?;
                let ll = l1_loss(g, &pv, &gt)?;
                let s = g.scale(ll, 2.0);
                g.add(gl, s)
            },
            std::slice::from_ref(&coords),
            &FdConfig {
                eps: 1e-6,
                coords: CoordPlan::All,
            },
        )
        .unwrap();
        assert!(err < 1e-4, "box err = {err}");

        // ratio w.r.t. the decisions
        let d = Tensor::new(vec![5], vec![0.9, 0.4, 0.8, 0.6, 0.95]).unwrap();
        let err = finite_diff_check(
            |g, vs| ratio_loss(g, &[vs[0]], &[0.7]),
            std::slice::from_ref(&d),
            &FdConfig {
                eps: 1e-6,
                coords: CoordPlan::All,
            },
        )
        .unwrap();
        assert!(err < 1e-4, "ratio err = {err}");

        // total gradient is the weighted sum of part gradients
        let cfg = ModelConfig::desk().loss;
        let x = Tensor::new(vec![1], vec![0.3]).unwrap();
        let err = finite_diff_check(
            |g, vs| {
                let sq = g.mul(vs[0], vs[0])?;
                let parts = LossParts {
                    focal: sq,
                    giou: vs[0],
                    l1: sq,
                    ratio: vs[0],
                };
                total_loss(g, &parts, &cfg)
            },
            std::slice::from_ref(&x),
            &FdConfig {
                eps: 1e-6,
                coords: CoordPlan::All,
            },
        )
        .unwrap();
        assert!(err < 1e-4, "total err = {err}");
    }
}

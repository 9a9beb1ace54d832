//! Analytic multiply-accumulate accounting for the encoder forward pass.
//!
//! Counts cover the patch embedding and every attention/FFN matmul, with
//! per-layer token counts reflecting the pruning schedule. The ranking MLPs
//! are intentionally excluded (sub-0.1% of total), which keeps the keep-all
//! identity with a vanilla encoder exact. The numbers are cross-checked in
//! tests against the `Graph::macs` counter instrumented into the matmul and
//! bmm kernels.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::relevance::stage_keep_counts;

#[derive(Debug, Clone)]
pub struct MacReport {
    /// ("embed", n) followed by ("layer01", n) .. in depth order.
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
}

/// MACs of one encoder layer over `n` live tokens.
fn layer_macs(n: u64, c: u64, mlp_ratio: u64) -> u64 {
    let proj = 4 * n * c * c; // q, k, v, out
    let attn = 2 * n * n * c; // scores and context products
    let ffn = 2 * mlp_ratio * n * c * c;
    proj + attn + ffn
}

/// Analytic encoder MACs for one joint forward over `n_ref` reference tokens
/// plus the search grid. `keep_counts` gives the absolute reference count
/// surviving each active relevance stage (fewer entries than configured
/// stages leaves the remaining stages un-pruned); empty means vanilla.
pub fn count_macs(cfg: &EncoderConfig, n_ref: usize, keep_counts: &[usize]) -> Result<MacReport> {
    cfg.validate()?;
    if keep_counts.len() > cfg.relevance_layers.len() {
        return Err(Error::Config(format!(
            "{} keep counts for {} relevance layers",
            keep_counts.len(),
            cfg.relevance_layers.len()
        )));
    }
    let mut live_ref = n_ref;
    for &k in keep_counts {
        if k == 0 || k > live_ref {
            return Err(Error::Config(format!(
                "keep count {k} out of range 1..={live_ref}"
            )));
        }
        live_ref = k;
    }

    let c = cfg.dim as u64;
    let n_x = cfg.n_x() as u64;
    let patch_dim = (3 * cfg.patch_size_px * cfg.patch_size_px) as u64;
    let mut per_layer = Vec::with_capacity(cfg.depth + 1);

    let embed = (n_ref as u64 + n_x) * patch_dim * c;
    per_layer.push(("embed".to_string(), embed));

    let mut live = n_ref;
    let mut stage = 0usize;
    for layer in 1..=cfg.depth {
        let n = (live + cfg.n_x()) as u64;
        per_layer.push((
            format!("layer{layer:02}"),
            layer_macs(n, c, cfg.mlp_ratio as u64),
        ));
        if stage < keep_counts.len() && cfg.relevance_layers[stage] == layer {
            live = keep_counts[stage];
            stage += 1;
        }
    }
    let total = per_layer.iter().map(|(_, v)| v).sum();
    Ok(MacReport { per_layer, total })
}

/// Convenience: MACs with the first `stages` relevance stages active, keep
/// counts derived from the configured ratios against `n_ref`.
pub fn count_macs_staged(cfg: &EncoderConfig, n_ref: usize, stages: usize) -> Result<MacReport> {
    let all = stage_keep_counts(n_ref, &cfg.keep_ratios);
    if stages > all.len() {
        return Err(Error::Config(format!(
            "{stages} stages exceed the {} configured",
            all.len()
        )));
    }
    count_macs(cfg, n_ref, &all[..stages])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::encoder::{embed, vit_block, EmbedParams, TokenKind};
    use crate::graph::Graph;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn keep_all_equals_vanilla() {
        let cfg = ModelConfig::desk().encoder;
        let n_ref = 48;
        let vanilla = count_macs(&cfg, n_ref, &[]).unwrap();
        let keep_all = count_macs(&cfg, n_ref, &[n_ref, n_ref, n_ref]).unwrap();
        assert_eq!(vanilla.total, keep_all.total);
        assert_eq!(vanilla.per_layer, keep_all.per_layer);
    }

    #[test]
    fn more_stages_cost_less() {
        let cfg = ModelConfig::desk().encoder;
        let totals: Vec<u64> = (0..=3)
            .map(|s| count_macs_staged(&cfg, 48, s).unwrap().total)
            .collect();
        assert!(totals[3] < totals[2]);
        assert!(totals[2] < totals[1]);
        assert!(totals[1] < totals[0]);
    }

    #[test]
    fn three_stage_reduction_ratio() {
        let cfg = ModelConfig::full().encoder;
        let n_ref = 192;
        let counts = stage_keep_counts(n_ref, &cfg.keep_ratios);
        assert_eq!(counts, vec![172, 153, 134]);
        let dense = count_macs(&cfg, n_ref, &[]).unwrap().total;
        let pruned = count_macs(&cfg, n_ref, &counts).unwrap().total;
        let ratio = pruned as f64 / dense as f64;
        let published = 37.66 / 40.00;
        assert!(
            (ratio - published).abs() / published < 0.02,
            "ratio {ratio:.4} vs published {published:.4}"
        );
    }

    #[test]
    fn analytic_matches_instrumented_forward() {
        // brute-force oracle: run the real embed + blocks with token sets
        // sliced to the keep schedule and compare the matmul MAC counter
        let mut model = ModelConfig::desk();
        model.encoder.depth = 4;
        model.encoder.relevance_layers = vec![2, 3];
        model.encoder.keep_ratios.truncate(2);
        let cfg = &model.encoder;
        let n_ref = 32; // two templates
        let keeps = stage_keep_counts(n_ref, &cfg.keep_ratios);

        let mut rng = Rng::new(55);
        let ep = EmbedParams::init(&mut rng, cfg);
        let blocks: Vec<_> = (0..cfg.depth)
            .map(|_| crate::encoder::BlockParams::init(&mut rng, cfg.dim, cfg.mlp_ratio))
            .collect();

        let mut g = Graph::new();
        let ev = ep.bind(&mut g);
        let bvs: Vec<_> = blocks.iter().map(|b| b.bind(&mut g)).collect();
        let patch_dim = 3 * cfg.patch_size_px * cfg.patch_size_px;
        let ref_patches = g.constant(Tensor::randn(&[n_ref, patch_dim], 1.0, &mut rng));
        let x_patches = g.constant(Tensor::randn(&[cfg.n_x(), patch_dim], 1.0, &mut rng));
        let rt = embed(&mut g, ref_patches, ev.proj, TokenKind::Template, 0).unwrap();
        let xt = embed(&mut g, x_patches, ev.proj, TokenKind::Search, 1).unwrap();

        let mut toks = {
            let v = g.concat0(&[rt.var, xt.var]).unwrap();
            let mut meta = rt.meta.clone();
            meta.extend_from_slice(&xt.meta);
            crate::encoder::Tokens { var: v, meta }
        };
        let mut live = n_ref;
        let mut stage = 0;
        for (i, bv) in bvs.iter().enumerate() {
            let (out, _) = vit_block(&mut g, &toks, bv, cfg.heads, None).unwrap();
            toks = out;
            if stage < keeps.len() && cfg.relevance_layers[stage] == i + 1 {
                let keep: Vec<usize> = (0..keeps[stage]).chain(live..live + cfg.n_x()).collect();
                let v = g.gather_rows(toks.var, &keep).unwrap();
                let meta = keep.iter().map(|&j| toks.meta[j]).collect();
                toks = crate::encoder::Tokens { var: v, meta };
                live = keeps[stage];
                stage += 1;
            }
        }
        let analytic = count_macs(cfg, n_ref, &keeps).unwrap();
        assert_eq!(g.macs, analytic.total, "instrumented vs analytic");
    }

    #[test]
    fn per_layer_breakdown_shape() {
        let cfg = ModelConfig::desk().encoder;
        let r = count_macs_staged(&cfg, 48, 3).unwrap();
        assert_eq!(r.per_layer.len(), cfg.depth + 1);
        assert_eq!(r.per_layer[0].0, "embed");
        assert_eq!(r.total, r.per_layer.iter().map(|(_, v)| v).sum::<u64>());
    }
}

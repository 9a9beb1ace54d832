use criterion::{criterion_group, criterion_main, Criterion};
use grtrack_bench::{desk_model, fake_tokens};
use grtrack_core::encoder::TokenKind;
use grtrack_core::pipeline::{encoder_forward, StageMode};
use grtrack_core::relevance::topk_select;
use grtrack_core::{Graph, Rng};

/// Full desk-scale memory (48 reference tokens) against an empty one-template
/// memory (16), both through the pruned inference path.
fn encoder(c: &mut Criterion) {
    let (cfg, params) = desk_model();
    let e = cfg.encoder.clone();
    let mut group = c.benchmark_group("encoder_forward");
    for (label, n_ref) in [("one_template_16ref", e.n_z()), ("full_memory_48ref", 48)] {
        group.bench_function(label, |b| {
            b.iter(|| {
                let mut rng = Rng::new(7);
                let mut g = Graph::new();
                let mv = params.bind(&mut g);
                let rt = fake_tokens(&mut g, n_ref, e.dim, TokenKind::Template, &mut rng);
                let st = fake_tokens(&mut g, e.n_x(), e.dim, TokenKind::Search, &mut rng);
                encoder_forward(&mut g, &rt, &st, &mv, &e, StageMode::Infer).unwrap()
            })
        });
    }
    group.finish();
}

fn topk(c: &mut Criterion) {
    let rng = Rng::new(3);
    let scores: Vec<f64> = (0..192).map(|i| rng.uniform_at(&[40, i])).collect();
    c.bench_function("topk_select_192_to_134", |b| {
        b.iter(|| topk_select(&scores, 134).unwrap())
    });
}

criterion_group!(benches, encoder, topk);
criterion_main!(benches);

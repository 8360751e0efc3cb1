use std::hint::black_box;

use anatomy_core::{Exec, MergeTable};
use anatomy_distill::model::{EncoderConfig, Params};
use anatomy_distill::train::loss_and_grads;
use anatomy_distill::{synthetic_prompts, LossWeights, PromptSet};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_step(c: &mut Criterion) {
    let table = MergeTable::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/clip_merges.txt")).unwrap();
    let texts = synthetic_prompts(64, 1);
    let set = PromptSet::build(&table, &texts, 16).unwrap();
    let config = EncoderConfig { n_layers: 2, width: 32, n_heads: 2, context: 16, vocab: set.vocab.len(), out_dim: 16 };
    let params = Params::<f32>::init(&config, 0).unwrap();
    let seqs: Vec<_> = set.prompts.iter().take(32).map(|p| p.sequence(16)).collect();
    let perms: Vec<_> = set.prompts.iter().take(32).enumerate().map(|(i, p)| p.permuted(i as u64, 16)).collect();
    let base: Vec<&[u32]> = seqs.iter().map(|s| &s.ids[..s.content_len]).collect();
    let perm: Vec<&[u32]> = perms.iter().map(|s| &s.ids[..s.content_len]).collect();
    let target = vec![0.5f32; 16];
    let targets: Vec<&[f32]> = (0..32).map(|_| target.as_slice()).collect();
    let weights = LossWeights::default();

    let mut g = c.benchmark_group("train_step_w32_b32");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                loss_and_grads(&config, black_box(&params), &base, Some(&perm), &targets, &weights, exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_step);
criterion_main!(benches);

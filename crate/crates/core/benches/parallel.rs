use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::Rng as _;

use ctrscan::dataio::knn_neighbors;
use ctrscan::fusion::{EmbeddedView, VrbcaConfig, VrbcaModel};
use ctrscan::par::set_parallel;
use ctrscan::rng::seeded;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>() - 0.5)
}

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    for n in [500usize, 2000] {
        let coords = random(n, 2, 1) * 1000.0;
        for (name, on) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &coords, |b, coords| {
                set_parallel(on);
                b.iter(|| knn_neighbors(coords.view(), 6).unwrap());
            });
        }
    }
    group.finish();
}

fn fusion_embed(c: &mut Criterion) {
    let cfg = VrbcaConfig {
        d_model: 64,
        enc_hidden: [64, 32],
        latent_dim: 16,
        ..VrbcaConfig::default()
    };
    let model = VrbcaModel::new(cfg.clone(), &mut seeded(2)).unwrap();
    let n = 400;
    let coords = random(n, 2, 3);
    let neighbors = knn_neighbors(coords.view(), cfg.k).unwrap();
    let h_img = random(n, cfg.d_model, 4);
    let h_gene = random(n, cfg.d_model, 5);
    let view = EmbeddedView {
        h_img: &h_img,
        h_gene: &h_gene,
        neighbors: &neighbors,
        labels: None,
    };
    let mut group = c.benchmark_group("fusion_embed");
    group.sample_size(20);
    for (name, on) in MODES {
        group.bench_function(name, |b| {
            set_parallel(on);
            b.iter(|| model.embed(&view).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, knn, fusion_embed);
criterion_main!(benches);

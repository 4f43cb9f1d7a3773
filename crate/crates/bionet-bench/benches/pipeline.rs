use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array4;

use bionet_core::metrics;
use bionet_core::nn::{build_unet, cascade_forward, NetworkConfig, SegHead};
use bionet_core::phantom::{generate_phantom, PhantomConfig};

fn bench_phantom(c: &mut Criterion) {
    let config = PhantomConfig::default();
    c.bench_function("phantom/generate_128", |b| {
        let mut index = 0u64;
        b.iter(|| {
            index += 1;
            generate_phantom(&config, index).unwrap()
        });
    });
}

fn bench_metrics(c: &mut Criterion) {
    let config = PhantomConfig {
        height: 512,
        width: 512,
        min_band_thickness: 8,
        choroid_thickness_range: (60.0, 140.0),
        ..PhantomConfig::default()
    };
    let a = generate_phantom(&config, 0).unwrap();
    let b_sample = generate_phantom(&config, 1).unwrap();
    let mut group = c.benchmark_group("metrics_512");
    group.bench_function("dice", |b| {
        b.iter(|| metrics::dice(&a.choroid, &b_sample.choroid).unwrap())
    });
    group.bench_function("choroid_ausde", |b| {
        b.iter(|| metrics::choroid_ausde(&a.choroid, &b_sample.choroid).unwrap())
    });
    group.bench_function("thickness_of", |b| {
        b.iter(|| metrics::thickness_of(&a.choroid))
    });
    group.finish();
}

fn bench_cascade(c: &mut Criterion) {
    let mut group = c.benchmark_group("cascade_forward");
    group.sample_size(10);
    for base in [8usize, 16] {
        let g_cfg = NetworkConfig {
            in_channels: 1,
            out_channels: 12,
            base_width: base,
            depth: 4,
            bio_head_width: 16,
        };
        let c_cfg = NetworkConfig {
            in_channels: 13,
            out_channels: 1,
            ..g_cfg.clone()
        };
        let mut u_g = build_unet(&g_cfg, SegHead::Softmax, 1).unwrap();
        let mut u_c = build_unet(&c_cfg, SegHead::Sigmoid, 2).unwrap();
        let x = Array4::<f64>::from_elem((1, 1, 128, 128), 0.5);
        group.bench_with_input(BenchmarkId::new("base_width", base), &base, |b, _| {
            b.iter(|| cascade_forward(&x, &mut u_g, &mut u_c).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_phantom, bench_metrics, bench_cascade);
criterion_main!(benches);

//! Benchmarks for the hot paths: box suppression, overlap ratio, the
//! dense first-stage scan, single-patch forward passes, and a whole
//! detector run on a synthetic scene.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascadet::cascade::{detect, nms, DetectConfig, NmsMode};
use cascadet::dataset::{synth_dataset, SynthConfig};
use cascadet::model::CascadeModel;
use cascadet::net::{forward, forward_dense, NetId, NetworkSpec, Parameters};
use cascadet::sampler::{iou, BoundingBox};
use cascadet::Tensor;

fn random_boxes(n: usize, seed: u64) -> Vec<BoundingBox> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            BoundingBox::with_score(
                r.gen_range(0.0..300.0),
                r.gen_range(0.0..200.0),
                r.gen_range(8.0..60.0),
                r.gen_range(8.0..60.0),
                r.gen_range(0.0..1.0),
            )
        })
        .collect()
}

fn bench_nms(c: &mut Criterion) {
    let boxes = random_boxes(200, 1);
    c.bench_function("nms_union_200", |b| {
        b.iter(|| nms(&boxes, 0.5, NmsMode::Union).unwrap())
    });
    c.bench_function("nms_min_200", |b| {
        b.iter(|| nms(&boxes, 0.7, NmsMode::Min).unwrap())
    });
}

fn bench_iou(c: &mut Criterion) {
    let boxes = random_boxes(64, 2);
    c.bench_function("iou_pairwise_64", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for a in &boxes {
                for q in &boxes {
                    acc += iou(a, q).unwrap();
                }
            }
            acc
        })
    });
}

fn bench_dense_scan(c: &mut Criterion) {
    let spec = NetworkSpec::net12();
    let params = Parameters::<f32>::init(&spec, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<f32> = (0..3 * 120 * 160).map(|_| r.gen_range(-1.0..1.0)).collect();
    let image = Tensor::from_vec(&[3, 120, 160], data).unwrap();
    c.bench_function("dense_scan_160x120", |b| {
        b.iter(|| forward_dense(&spec, &params, &image).unwrap())
    });
}

fn bench_patch_forward(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for (name, id) in [
        ("forward_12", NetId::Net12),
        ("forward_24", NetId::Net24),
        ("forward_48", NetId::Net48),
    ] {
        let spec = match id {
            NetId::Net12 => NetworkSpec::net12(),
            NetId::Net24 => NetworkSpec::net24(false),
            NetId::Net48 => NetworkSpec::net48(false),
        };
        let params = Parameters::<f32>::init(&spec, 6).unwrap();
        let s = id.input_size();
        let data: Vec<f32> = (0..3 * s * s).map(|_| r.gen_range(-1.0..1.0)).collect();
        let patch = Tensor::from_vec(&[3, s, s], data).unwrap();
        c.bench_function(name, |b| {
            b.iter(|| forward(&spec, &params, &patch, None).unwrap())
        });
    }
}

fn bench_detect(c: &mut Criterion) {
    let model = CascadeModel::<f32>::init(7, false).unwrap();
    let scene = synth_dataset(&SynthConfig {
        count: 1,
        width: 320,
        height: 240,
        faces_min: 2,
        faces_max: 2,
        seed: 8,
    })
    .unwrap()
    .remove(0);
    let cfg = DetectConfig::default();
    c.bench_function("detect_320x240", |b| {
        b.iter_batched(
            || scene.image.clone(),
            |img| detect(&model, &img, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(
    benches,
    bench_nms,
    bench_iou,
    bench_dense_scan,
    bench_patch_forward,
    bench_detect
);
criterion_main!(benches);

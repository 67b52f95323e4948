use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use colt_core::autograd::Graph;
use colt_core::detector::{BackboneKind, Mode, Trainable};
use colt_core::metrics::{average_precision, GtBox, ScoredBox};
use colt_core::{generate_task_stream, BBox, Detector, DetectorConfig, StreamConfig, Tensor};

fn filled(shape: &[usize], salt: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (((i * 7919 + salt) % 1000) as f64 / 500.0) - 1.0)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn autograd_ops(c: &mut Criterion) {
    let x = filled(&[8, 16, 16, 16], 1);
    let w = filled(&[32, 16, 3, 3], 2);
    c.bench_function("conv2d 8x16x16x16 -> 32, fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 1);
            let loss = g.sum(y);
            black_box(g.backward(loss));
        })
    });

    let a = filled(&[256, 64], 3);
    let m = filled(&[64, 64], 4);
    c.bench_function("linear 256x64 . 64x64, fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let mv = g.param(m.clone());
            let y = g.linear(av, mv, None);
            let loss = g.sum(y);
            black_box(g.backward(loss));
        })
    });
}

fn detector(c: &mut Criterion) {
    let stream = generate_task_stream(
        &StreamConfig {
            scale: 0.02,
            image_size: 32,
            ..StreamConfig::default()
        },
        0,
    )
    .unwrap();
    let batch: Vec<_> = stream.tasks[0].train.iter().take(8).collect();
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    for kind in [BackboneKind::Transformer, BackboneKind::Cnn] {
        let mut cfg = DetectorConfig {
            input_size: 32,
            neck_width: 16,
            ..DetectorConfig::default()
        };
        cfg.backbone.kind = kind;
        cfg.backbone.widths = vec![16, 32, 32];
        let mut det = Detector::new(cfg).unwrap();
        det.route_task(0, 0).unwrap();
        c.bench_function(&format!("{kind} train step, batch 8 at 32px"), |b| {
            b.iter(|| {
                black_box(
                    det.loss_and_grads(&batch, 0, Mode::Train, Trainable::routed(0))
                        .unwrap(),
                )
            })
        });
        c.bench_function(&format!("{kind} predict, batch 8 at 32px"), |b| {
            b.iter(|| black_box(det.predict_batch_with_head(&images, 0).unwrap()))
        });
    }
}

fn ap(c: &mut Criterion) {
    let gts: Vec<GtBox> = (0..600)
        .map(|i| {
            let x = (i % 20) as f64 * 6.0;
            GtBox {
                image: i / 3,
                bbox: BBox::new(x, x, x + 10.0, x + 12.0),
            }
        })
        .collect();
    let preds: Vec<ScoredBox> = (0..3000)
        .map(|i| {
            let g = &gts[i % gts.len()].bbox;
            let shift = (i % 7) as f64;
            ScoredBox {
                image: (i % gts.len()) / 3,
                bbox: BBox::new(g.x1 + shift, g.y1, g.x2 + shift, g.y2),
                score: ((i * 37) % 101) as f64 / 100.0,
            }
        })
        .collect();
    c.bench_function("average_precision 3000 preds / 600 gt", |b| {
        b.iter_batched(
            || preds.clone(),
            |p| black_box(average_precision(&p, &gts, 0.5).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = autograd_ops, detector, ap
}
criterion_main!(benches);

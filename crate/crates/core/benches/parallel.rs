use std::collections::HashMap;

use composer_forge_core::dataset::Piece;
use composer_forge_core::eval::{predict_pieces, VotingSimulation};
use composer_forge_core::nn::{conv2d_forward, Depth, ModelConfig, ResNet, Tensor};
use composer_forge_core::parallel::Parallelism;
use composer_forge_core::pianoroll::{encode, PianoRoll, Variant};
use composer_forge_core::smf::NoteEvent;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn modes() -> [(&'static str, Parallelism); 2] {
    [("sequential", Parallelism::sequential()), ("parallel", Parallelism::available())]
}

fn pattern(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect()
}

fn conv_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_forward");
    let x = Tensor::from_vec(&[8, 16, 100, 32], pattern(8 * 16 * 100 * 32)).unwrap();
    let w = Tensor::from_vec(&[16, 16, 3, 3], pattern(16 * 16 * 9)).unwrap();
    for (name, par) in modes() {
        g.bench_function(BenchmarkId::new(name, par.workers()), |b| {
            b.iter(|| par.install(|| conv2d_forward(&x, &w, None, 1, 1).unwrap()))
        });
    }
    g.finish();
}

fn piece(i: usize) -> (Piece, PianoRoll) {
    let notes: Vec<NoteEvent> = (0..400)
        .map(|k| {
            let t = k as f64 * 0.1;
            NoteEvent {
                onset_seconds: t,
                offset_seconds: t + 0.3,
                pitch: (40 + (k * 7 + i) % 40) as u8,
                velocity: 80,
                channel: 0,
            }
        })
        .collect();
    let p = Piece {
        composer_label: i % 3,
        composer: format!("c{}", i % 3),
        canonical_title: format!("t{i}"),
        midi_filename: format!("p{i}.midi"),
        n_eval_segments: 4,
    };
    (p, encode(&notes))
}

fn batch_eval(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict_pieces");
    g.sample_size(10);
    let cfg = ModelConfig {
        depth: Depth::D18,
        width_multiplier: 0.125,
        in_channels: 2,
        n_classes: 3,
    };
    let model = ResNet::<f32>::new(cfg, 0).unwrap();
    let (pieces, rolls): (Vec<Piece>, Vec<PianoRoll>) = (0..4).map(piece).unzip();
    let rolls: HashMap<String, PianoRoll> = pieces.iter().map(|p| p.midi_filename.clone()).zip(rolls).collect();
    for (name, par) in modes() {
        g.bench_function(BenchmarkId::new(name, par.workers()), |b| {
            b.iter(|| par.install(|| predict_pieces(&model, &pieces, &rolls, 4, Variant::Full).unwrap()))
        });
    }
    g.finish();
}

fn voting_simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("voting_simulation");
    g.sample_size(10);
    let sim = VotingSimulation {
        n_classes: 13,
        segment_accuracy: 0.6,
        pieces_per_trial: 158,
    };
    for (name, par) in modes() {
        g.bench_function(BenchmarkId::new(name, par.workers()), |b| {
            b.iter(|| par.install(|| sim.run(&[5, 90], 100, 1)))
        });
    }
    g.finish();
}

criterion_group!(benches, conv_forward, batch_eval, voting_simulation);
criterion_main!(benches);

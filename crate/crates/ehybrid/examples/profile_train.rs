//! Times the pieces of one desk-scale training step. Used for performance
//! work; not part of the test suite.

use std::time::Instant;

use ehybrid::data::generate_texture_dataset;
use ehybrid::fusion::AblationMode;
use ehybrid::network::{build_spec, Model, SpecOptions};
use ehybrid::tape::{Mode, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let opts = SpecOptions {
        resolution: 32,
        input_channels: 1,
        num_classes: 8,
        ..SpecOptions::default()
    };
    let spec = build_spec(&opts).unwrap();
    let model = Model::new(spec, 0).unwrap();

    let t0 = Instant::now();
    let (train_set, _) = generate_texture_dataset(8, 10, 32, 0).unwrap();
    println!("datagen (80 images):    {:>8.1?}", t0.elapsed());

    let t0 = Instant::now();
    let mut scats = Vec::new();
    for img in &train_set.images {
        scats.push(model.compute_scatterings(img).unwrap());
    }
    println!(
        "scattering (64 images): {:>8.1?} ({:?}/image)",
        t0.elapsed(),
        t0.elapsed() / train_set.len() as u32
    );

    let batch: Vec<usize> = (0..8).collect();
    let x = train_set.batch(&batch).unwrap();
    let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
    let mut stacked = std::collections::BTreeMap::new();
    for &j in &model.spec().fusion_scales() {
        let per: Vec<&ehybrid::tensor::Tensor> = batch.iter().map(|&i| &scats[i][&j]).collect();
        let s = per[0].shape();
        let mut data = Vec::with_capacity(8 * s.count());
        for t in &per {
            data.extend_from_slice(t.data());
        }
        stacked.insert(
            j,
            ehybrid::tensor::Tensor::from_vec(
                ehybrid::tensor::Shape::new(8, s.c, s.h, s.w),
                data,
            )
            .unwrap(),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reps = 3;

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let pass = model
            .forward(&mut tape, &x, Mode::Train, AblationMode::None, &mut rng, Some(&stacked))
            .unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        std::hint::black_box(tape.value(loss).data()[0]);
    }
    let fwd = t0.elapsed() / reps;
    println!("forward (batch 8):      {fwd:>8.1?}");

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let pass = model
            .forward(&mut tape, &x, Mode::Train, AblationMode::None, &mut rng, Some(&stacked))
            .unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        std::hint::black_box(grads.get(pass.logits).is_some());
    }
    let both = t0.elapsed() / reps;
    println!("forward+backward:       {both:>8.1?} (backward {:?})", both - fwd);
    println!("epoch estimate (200 batches): {:?}", both * 200);
}

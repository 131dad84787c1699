use elastic_infogan::data::{load_canonical_splits, load_mnist, subsample, DatasetKind, MnistSplit};
use elastic_infogan::model::NetworkConfig;
use elastic_infogan::training::{batch_to, init_state, train_step, Baseline, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let data = load_mnist(std::path::Path::new("data/mnist"), MnistSplit::Train).unwrap();
    println!("load mnist: {:?} ({} images)", t0.elapsed(), data.len());

    let split = load_canonical_splits(DatasetKind::Mnist).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t0 = Instant::now();
    let sub = subsample(&data, &split, 10_000, &mut rng).unwrap();
    println!(
        "subsample: {:?} ({} images, counts {:?})",
        t0.elapsed(),
        sub.len(),
        sub.class_counts()
    );

    for (name, net) in [("desk", NetworkConfig::mnist_desk()), ("full", NetworkConfig::mnist())] {
        for baseline in [Baseline::Elastic, Baseline::Uniform] {
            let mut cfg = TrainConfig::mnist_defaults(baseline, 0);
            cfg.net = net.clone();
            cfg.split = Some(split.clone());
            let mut state = init_state::<f32>(&cfg).unwrap();
            let idx: Vec<usize> = (0..64).collect();
            let batch = batch_to::<f32>(&sub.images, &idx);
            train_step(&mut state, &batch).unwrap();
            let t0 = Instant::now();
            let reps = if name == "desk" { 10 } else { 3 };
            for _ in 0..reps {
                train_step(&mut state, &batch).unwrap();
            }
            let per = t0.elapsed().as_secs_f64() / reps as f64;
            println!(
                "{name} {b:?}: {per:.3} s/step -> {est:.1} min for 50 epochs x 156 steps",
                b = baseline,
                est = per * 156.0 * 50.0 / 60.0
            );
        }
    }
}

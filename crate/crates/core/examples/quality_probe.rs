use elastic_infogan::data::{load_canonical_splits, load_mnist, subsample, DatasetKind, MnistSplit};
use elastic_infogan::evaluation::{build_confusion, metrics_report, train_eval_classifier};
use elastic_infogan::model::NetworkConfig;
use elastic_infogan::training::{run_training, Baseline, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);

    let data = load_mnist(std::path::Path::new("data/mnist"), MnistSplit::Train).unwrap();
    let split = load_canonical_splits(DatasetKind::Mnist).unwrap().remove(0);

    let t0 = Instant::now();
    let mut clf_rng = ChaCha8Rng::seed_from_u64(999);
    let clf = train_eval_classifier(&data, 3, &mut clf_rng).unwrap();
    println!(
        "classifier: val acc {:.4} in {:?}",
        clf.validation_accuracy,
        t0.elapsed()
    );

    let mut sub_rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = subsample(&data, &split, 10_000, &mut sub_rng).unwrap();

    let handles: Vec<std::thread::JoinHandle<()>> = [Baseline::Elastic, Baseline::Uniform]
        .into_iter()
        .map(|baseline| {
            let sub = sub.clone();
            let split = split.clone();
            let clf_acc = clf.validation_accuracy;
            let _ = clf_acc;
            std::thread::spawn(move || {
                let mut cfg = TrainConfig::mnist_defaults(baseline, seed);
                cfg.net = NetworkConfig::mnist_desk();
                cfg.split = Some(split);
                cfg.epochs = epochs;
                let t0 = Instant::now();
                let out = run_training::<f32>(&cfg, &sub, None).unwrap();
                let train_time = t0.elapsed();
                // re-train classifier per thread to keep threads independent
                let data =
                    load_mnist(std::path::Path::new("data/mnist"), MnistSplit::Train).unwrap();
                let mut clf_rng = ChaCha8Rng::seed_from_u64(999);
                let clf = train_eval_classifier(&data, 3, &mut clf_rng).unwrap();
                let mut eval_rng = ChaCha8Rng::seed_from_u64(1234);
                let m =
                    build_confusion(&out.state.gen, &cfg.net, &clf, 1000, &mut eval_rng).unwrap();
                let report = metrics_report(&m, None).unwrap();
                let probs = out.state.prior.probabilities();
                println!(
                    "{:?} seed {}: NMI {:.4} ENT {:.4} (rows {:.4} cols {:.4}) train {:?}",
                    baseline, seed, report.nmi, report.ent, report.ent_rows, report.ent_cols, train_time
                );
                println!("  final prior: {:?}", probs.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>());
                println!("  counts:\n{:?}", m.counts);
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

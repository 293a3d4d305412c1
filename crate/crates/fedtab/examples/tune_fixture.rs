// probe: tune the skewed 3-class fixture for the mitigation and dp-sweep checks
use std::sync::Arc;

use fedtab::covariance::{add_dp_noise, aggregate_covariance, psd_cholesky, DpParams};
use fedtab::gmm::{fit_federated_gmm, GmmPrior};
use fedtab::partition::{dirichlet_partition, PartitionPlan};
use fedtab::synthesis::{augment_client, synthesize, SynthesisRequest};
use fedtab::table::{Cell, ColumnKind, ColumnSchema, Schema, Table};
use fedtab::train::{train_federated, Featurizer, TrainConfig};
use fedtab::transforms::{encode_table, IcdmCodec, MdtCodec, ModePolicy, TableCodecs, DEFAULT_LAMBDA};
use fedtab::covariance::local_moments;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn fixture_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ColumnSchema { name: "f1".into(), kind: ColumnKind::Continuous, label: false },
            ColumnSchema { name: "f2".into(), kind: ColumnKind::Continuous, label: false },
            ColumnSchema { name: "channel".into(), kind: ColumnKind::Discrete, label: false },
            ColumnSchema { name: "segment".into(), kind: ColumnKind::Discrete, label: true },
        ])
        .unwrap(),
    )
}

fn fixture_table(n: usize, seed: u64, sigma: f64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Classes separate along f1 - f2 (small variance); a shared component g
    // dominates both coordinates, so per-column scaling cannot remove it and
    // plain gradient descent crawls along the discriminative direction.
    let shared = Normal::new(0.0, 5.0 * sigma).unwrap();
    let noise = Normal::new(0.0, 0.5 * sigma).unwrap();
    let t_class = [-1.5, 0.0, 1.5];
    let rows = (0..n)
        .map(|_| {
            let class = rng.random_range(0..3usize);
            let g = shared.sample(&mut rng);
            let f1 = g + t_class[class] + noise.sample(&mut rng);
            let f2 = g + noise.sample(&mut rng);
            let p_web = 0.5;
            let channel = if rng.random::<f64>() < p_web { "web" } else { "store" };
            vec![
                Cell::Continuous(f1),
                Cell::Continuous(f2),
                Cell::Discrete(channel.into()),
                Cell::Discrete(format!("c{class}")),
            ]
        })
        .collect();
    Table::new(fixture_schema(), rows).unwrap()
}

struct Fitted {
    codecs: TableCodecs,
    cov: fedtab::covariance::GlobalCovariance,
    shards: Vec<Table>,
}

fn fit(table: &Table, seed: u64, beta: f64, k: usize, modes: usize) -> Fitted {
    let plan = PartitionPlan { beta, num_clients: k, seed: seed ^ 0xa5a5 };
    let shards = dirichlet_partition(table, &plan).unwrap();
    let schema = table.schema();
    let mut continuous = Vec::new();
    for &col in &schema.continuous_indices() {
        let columns: Vec<Vec<f64>> = shards.iter().map(|s| s.continuous_column(col).unwrap()).collect();
        let refs: Vec<&[f64]> = columns.iter().map(|c| c.as_slice()).collect();
        let (lo, hi) = columns.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let mut prior = GmmPrior::for_range(modes, lo, hi);
        prior.max_rounds = 100;
        let fit = fit_federated_gmm(&refs, &prior).unwrap();
        let name = schema.columns()[col].name.clone();
        let mdt = MdtCodec::from_posterior(name.clone(), &fit.posterior, ModePolicy::SampleResponsibility).unwrap();
        let ind = IcdmCodec::for_mode_indicator(name, &mdt, DEFAULT_LAMBDA).unwrap();
        continuous.push((mdt, ind));
    }
    let mut discrete = Vec::new();
    for &col in &schema.discrete_indices() {
        let name = schema.columns()[col].name.clone();
        let mut counts = std::collections::BTreeMap::<String, u64>::new();
        for shard in &shards {
            for tok in shard.discrete_column(col).unwrap() {
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        let total: u64 = counts.values().sum();
        let freqs: Vec<(String, f64)> = counts.into_iter().map(|(c, n)| (c, n as f64 / total as f64)).collect();
        discrete.push(IcdmCodec::from_frequencies(name, &freqs, DEFAULT_LAMBDA).unwrap());
    }
    let codecs = TableCodecs::new(Arc::clone(schema), continuous, discrete).unwrap();
    let moments: Vec<_> = shards
        .iter()
        .enumerate()
        .filter(|(_, s)| s.row_count() > 0)
        .map(|(i, s)| local_moments(&encode_table(s, &codecs, seed ^ i as u64).unwrap()).unwrap())
        .collect();
    let cov = aggregate_covariance(&moments).unwrap();
    Fitted { codecs, cov, shards }
}

fn run_trains(f: &Fitted, test: &Table, epsilon: f64, seed: u64, cfg: &TrainConfig, mult: usize) -> (Vec<f64>, Vec<f64>) {
    let dp = DpParams::new(epsilon, 1e-4, seed ^ 0x77).unwrap();
    let noisy = add_dp_noise(&f.cov, &dp);
    let factor = psd_cholesky(&noisy).unwrap();
    let featurizer = Featurizer::from_codecs(&f.codecs);
    let test_data = featurizer.featurize(test).unwrap();
    let raw: Vec<_> = f.shards.iter().map(|s| featurizer.featurize(s).unwrap()).collect();
    let aug: Vec<_> = f
        .shards
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let synth = synthesize(&f.codecs, &factor, &SynthesisRequest { n_rows: s.row_count() * mult, seed: seed ^ (i as u64) << 3 }).unwrap();
            featurizer.featurize(&augment_client(s, &synth).unwrap().table).unwrap()
        })
        .collect();
    let mut c = cfg.clone();
    c.seed = seed ^ 1;
    let raw_out = train_federated(&raw, &test_data, &c, None).unwrap();
    c.seed = seed ^ 2;
    let aug_out = train_federated(&aug, &test_data, &c, None).unwrap();
    (
        raw_out.curve.iter().map(|p| p.metrics.accuracy).collect(),
        aug_out.curve.iter().map(|p| p.metrics.accuracy).collect(),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.4);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let rounds: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let n: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mult: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = TrainConfig { rounds, local_epochs: epochs, learning_rate: lr, batch_size: 64, seed: 0 };
    println!("sigma={sigma} lr={lr} rounds={rounds} n={n} epochs={epochs} mult={mult}");

    // mitigation check: eps = inf over 5 seeds
    let mut raw_curves = Vec::new();
    let mut aug_curves = Vec::new();
    for seed in 1..=5u64 {
        let train = fixture_table(n, seed, sigma);
        let test = fixture_table(n / 3, seed + 100, sigma);
        let fitted = fit(&train, seed, 0.05, 5, 6);
        let (r, a) = run_trains(&fitted, &test, f64::INFINITY, seed, &cfg, mult);
        println!(
            "  seed {seed}: raw {:.3} aug {:.3} (gap {:+.1} pts)",
            r.last().unwrap(),
            a.last().unwrap(),
            (a.last().unwrap() - r.last().unwrap()) * 100.0
        );
        raw_curves.push(r);
        aug_curves.push(a);
    }
    let mean_at = |curves: &[Vec<f64>], i: usize| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64;
    let last = raw_curves[0].len() - 1;
    println!(
        "  mean final: raw {:.3} aug {:.3} gap {:+.1} pts",
        mean_at(&raw_curves, last),
        mean_at(&aug_curves, last),
        (mean_at(&aug_curves, last) - mean_at(&raw_curves, last)) * 100.0
    );
    if std::env::var("CURVES").is_ok() {
        for i in (0..=last).step_by(2) {
            println!("  round {i:3}: raw {:.3} aug {:.3}", mean_at(&raw_curves, i), mean_at(&aug_curves, i));
        }
    }
    let mut dominated = true;
    for i in 21..=last {
        if mean_at(&aug_curves, i) <= mean_at(&raw_curves, i) {
            if dominated {
                println!("  NOT dominated from round {i}: aug {:.3} raw {:.3}", mean_at(&aug_curves, i), mean_at(&raw_curves, i));
            }
            dominated = false;
        }
    }
    println!("  dominated after round 20: {dominated}");

    // dp sweep: mean aug accuracy per epsilon
    if args.get(6).map(|s| s == "dp").unwrap_or(false) { for eps in [1.0, 4.0, 16.0, f64::INFINITY] {
        let mut accs = Vec::new();
        for seed in 1..=5u64 {
            let train = fixture_table(n, seed, sigma);
            let test = fixture_table(n / 3, seed + 100, sigma);
            let fitted = fit(&train, seed, 0.05, 5, 6);
            let (_, a) = run_trains(&fitted, &test, eps, seed, &cfg, mult);
            accs.push(*a.last().unwrap());
        }
        println!("  eps {eps}: mean aug acc {:.4}  {:?}", accs.iter().sum::<f64>() / 5.0, accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    } }
}

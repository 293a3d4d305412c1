// probe: recovery across fixtures and T after merge step
use fedtab::gmm::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn fixture_two_mode(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = Normal::new(0.0, 1.0).unwrap();
    let hi = Normal::new(5.0, 1.0).unwrap();
    (0..n)
        .map(|_| if rng.random::<f64>() < 0.5 { lo.sample(&mut rng) } else { hi.sample(&mut rng) })
        .collect()
}

fn fixture_std_normal(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..3000).map(|_| n.sample(&mut rng)).collect()
}

fn run(name: &str, values: &[f64], t: usize, rounds: usize) {
    let third = values.len() / 3;
    let shards = [&values[..third], &values[third..2 * third], &values[2 * third..]];
    let mut prior = GmmPrior::with_modes(t);
    prior.conv_eps = 1e-6;
    prior.max_rounds = rounds;
    let fit = fit_federated_gmm(&shards, &prior).unwrap();
    print!("{name} T={t} rounds={}: ", fit.rounds);
    let mut modes = fit.posterior.modes.clone();
    modes.sort_by(|a, b| a.mu.partial_cmp(&b.mu).unwrap());
    for m in &modes {
        print!("(pi={:.4} mu={:.3} s={:.3}) ", m.pi, m.mu, m.sigma);
    }
    println!();
}

fn main() {
    for seed in [17, 18, 19, 20, 21] {
        run("two-mode T5 ", &fixture_two_mode(seed, 5000), 5, 500);
        run("two-mode T10", &fixture_two_mode(seed, 5000), 10, 500);
    }
    for seed in [3, 4, 5, 6, 7] {
        run("std-norm T3 ", &fixture_std_normal(seed), 3, 500);
        run("std-norm T10", &fixture_std_normal(seed), 10, 500);
    }
}

use tgdd::data::{generate_toy_dataset, sample_class_batch, NormStats, ToySpec};
use tgdd::rng::Stream;

#[test]
fn channel_mean_matches_brute_force() {
    let data = generate_toy_dataset(&ToySpec::new(3, 30, (8, 8), 3), 4).unwrap();
    let stats = NormStats::compute(data.images());
    let plane = 64;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for n in 0..data.len() {
            for i in 0..plane {
                sum += data.images().data()[(n * 3 + c) * plane + i];
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((stats.mean[c] - mean).abs() <= 1e-12 * mean.abs());
    }
}

#[test]
fn class_batch_draws_are_uniform() {
    let data = generate_toy_dataset(&ToySpec::new(2, 20, (4, 4), 1), 1).unwrap();
    let pool = data.class_index(1).unwrap().to_vec();
    let mut counts = vec![0usize; pool.len()];
    let mut s = Stream::new(3, "freq");
    let draws = 10_000;
    for _ in 0..draws {
        let b = sample_class_batch(&data, 1, 1, &mut s).unwrap();
        let row = &b.images.data()[..16];
        let hit = pool
            .iter()
            .position(|&i| data.normalized().rows(i, 1).unwrap().data() == row)
            .unwrap();
        counts[hit] += 1;
    }
    let p = 1.0 / pool.len() as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for &c in &counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

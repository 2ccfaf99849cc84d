use tgdd::data::{generate_toy_dataset, ToySpec};
use tgdd::models::{ConvNetConfig, ModelSnapshot};
use tgdd::rng::Stream;
use tgdd::training::accuracy;
use tgdd::trajectory::{
    sample_expert, sample_extractor, train_trajectory, ExpertTrajectory, TrajectoryStore, TrajectoryTraining,
};
use tgdd::Error;

/// A store of untrained snapshots, cheap enough for sampling tests.
fn fake_store(n: usize, epochs: usize) -> TrajectoryStore {
    let config = ConvNetConfig::new(1, 2, 1, (4, 4)).with_width(2);
    let base = ModelSnapshot::build(config, &mut Stream::new(0, "fake")).unwrap();
    let trajectories = (0..n)
        .map(|id| ExpertTrajectory {
            id,
            snapshots: (0..=epochs)
                .map(|j| {
                    let mut s = base.clone();
                    s.epoch_index = j as u32;
                    s
                })
                .collect(),
            training: TrajectoryTraining {
                epochs,
                ..Default::default()
            },
            epoch_losses: vec![1.0; epochs],
        })
        .collect();
    TrajectoryStore::new(trajectories).unwrap()
}

fn within_3_sigma(counts: &[usize], draws: usize) {
    let k = counts.len() as f64;
    let p = 1.0 / k;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - expected).abs() <= 3.0 * sigma,
            "bin {i}: {c} draws, expected {expected:.1} ± {:.1}",
            3.0 * sigma
        );
    }
}

#[test]
fn trains_snapshots_for_every_epoch() {
    let data = generate_toy_dataset(&ToySpec::new(3, 200, (16, 16), 3), 1).unwrap();
    let net = ConvNetConfig::new(2, 3, 3, (16, 16)).with_width(32);
    let training = TrajectoryTraining {
        epochs: 10,
        seed: 7,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let t = train_trajectory(&data, net, &training, 0, |e, _| seen.push(e)).unwrap();
    assert_eq!(t.snapshots.len(), 11);
    assert_eq!(seen, (1..=10).collect::<Vec<_>>());
    for (j, s) in t.snapshots.iter().enumerate() {
        assert_eq!(s.epoch_index as usize, j);
    }
    let first = accuracy(&t.snapshots[0], data.normalized(), data.labels()).unwrap();
    let last = accuracy(&t.snapshots[10], data.normalized(), data.labels()).unwrap();
    assert!(last >= 0.95, "final train accuracy {last}");
    assert!(last - first >= 0.30, "accuracy {first} -> {last}");

    // 3-epoch moving average of the loss is non-increasing, one slip allowed.
    let avg: Vec<f64> = t.epoch_losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let slips = avg.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(slips <= 1, "losses {:?}", t.epoch_losses);

    let again = train_trajectory(&data, net, &training, 0, |_, _| {}).unwrap();
    for (a, b) in t.snapshots.iter().zip(&again.snapshots) {
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
    let other = train_trajectory(&data, net, &training, 1, |_, _| {}).unwrap();
    assert_ne!(t.snapshots[0].checksum(), other.snapshots[0].checksum());
}

#[test]
fn rejects_mismatched_dataset() {
    let data = generate_toy_dataset(&ToySpec::new(3, 4, (8, 8), 1), 1).unwrap();
    let net = ConvNetConfig::new(1, 4, 1, (8, 8)).with_width(2);
    let r = train_trajectory(&data, net, &TrajectoryTraining::default(), 0, |_, _| {});
    assert!(matches!(r, Err(Error::Incompatible(_))));
}

#[test]
fn store_round_trip() {
    let data = generate_toy_dataset(&ToySpec::new(2, 6, (8, 8), 1), 3).unwrap();
    let net = ConvNetConfig::new(1, 2, 1, (8, 8)).with_width(4);
    let training = TrajectoryTraining {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    };
    let trajs = (0..2)
        .map(|id| train_trajectory(&data, net, &training, id, |_, _| {}).unwrap())
        .collect();
    let store = TrajectoryStore::new(trajs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest")).unwrap();
    assert!(manifest.contains("n_trajectories=2\n"));
    assert!(manifest.contains("epochs=2\n"));
    assert!(dir.path().join("traj_1/epoch_2.snap").exists());

    let back = TrajectoryStore::load(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back.epochs(), 2);
    assert_eq!(back.manifest(), manifest);
    for i in 0..2 {
        for j in 0..=2 {
            assert_eq!(back.snapshot(i, j).to_bytes(), store.snapshot(i, j).to_bytes());
        }
    }

    std::fs::remove_file(dir.path().join("traj_1/epoch_1.snap")).unwrap();
    assert!(matches!(TrajectoryStore::load(dir.path()), Err(Error::Io { .. })));

    store.save(dir.path()).unwrap();
    let tampered = manifest.replace("width=4", "width=5");
    std::fs::write(dir.path().join("manifest"), tampered).unwrap();
    assert!(matches!(TrajectoryStore::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn extractor_and_expert_sampling_is_uniform() {
    let store = fake_store(3, 10);
    let l = 3;
    let draws = 10_000;
    let mut stream = Stream::new(11, "sampling");
    let mut traj = vec![0; 3];
    let mut start = vec![0; 10 - l + 2];
    let mut offset = vec![0; l];
    for _ in 0..draws {
        let (ext, region) = sample_extractor(&store, l, &mut stream).unwrap();
        assert_eq!(ext.epoch_index as usize, region.start);
        traj[region.trajectory] += 1;
        start[region.start] += 1;
        let expert = sample_expert(&store, &region, &mut stream);
        offset[expert.epoch_index as usize - region.start] += 1;
    }
    within_3_sigma(&traj, draws);
    within_3_sigma(&start, draws);
    within_3_sigma(&offset, draws);
}

#[test]
fn region_never_runs_past_the_trajectory() {
    let mut stream = Stream::new(5, "stress");
    let stores: Vec<TrajectoryStore> = (0..4).map(|m| fake_store(2, m)).collect();
    for _ in 0..100_000 {
        let m = stream.below(4);
        let l = 1 + stream.below(m + 1);
        let (_, region) = sample_extractor(&stores[m], l, &mut stream).unwrap();
        assert!(region.start + l - 1 <= m);
        let e = sample_expert(&stores[m], &region, &mut stream).epoch_index as usize;
        assert!(e >= region.start && e <= region.last());
    }
}

#[test]
fn region_length_limits() {
    let store = fake_store(2, 4);
    let mut stream = Stream::new(0, "limits");
    for _ in 0..100 {
        let (ext, _) = sample_extractor(&store, 5, &mut stream).unwrap();
        assert_eq!(ext.epoch_index, 0);
    }
    assert!(matches!(sample_extractor(&store, 6, &mut stream), Err(Error::Config(_))));
    assert!(matches!(sample_extractor(&store, 0, &mut stream), Err(Error::Config(_))));
}

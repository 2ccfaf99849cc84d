use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tgdd::data::{LabeledDataset, SyntheticSet};
use tgdd::trajectory::TrajectoryStore;

fn tgdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgdd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tgdd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small toy data and a two-trajectory store under `root`.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(&[
        "--out", s(&data), "--seed", "3", "--quiet", "toygen", "--per-class", "20", "--test-per-class", "10",
        "--size", "8",
    ]);
    let store = root.join("store");
    ok(&[
        "--out", s(&store), "--seed", "7", "--quiet", "pretrain", "--data", s(&data.join("toy.tgdd")),
        "--trajectories", "2", "--epochs", "4", "--depth", "2", "--width", "4", "--batch", "16",
    ]);
    (data, store)
}

fn distill_args<'a>(data: &'a Path, store: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "--out", s(out), "--quiet", "distill", "--data", s(data), "--store", s(store), "--ipc", "2", "--region",
        "3", "--iters", "6", "--real-batch", "8",
    ]
}

#[test]
fn pretrain_writes_a_store_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let manifest = std::fs::read_to_string(store.join("manifest")).unwrap();
    assert!(manifest.contains("n_trajectories=2\n"));
    assert!(manifest.contains("epochs=4\n"));
    let loaded = TrajectoryStore::load(&store).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded.config().depth, 2);

    let again = dir.path().join("store2");
    ok(&[
        "--out", s(&again), "--seed", "7", "--quiet", "pretrain", "--data", s(&data.join("toy.tgdd")),
        "--trajectories", "2", "--epochs", "4", "--depth", "2", "--width", "4", "--batch", "16",
    ]);
    for i in 0..2 {
        for j in 0..=4 {
            let f = format!("traj_{i}/epoch_{j}.snap");
            assert_eq!(std::fs::read(store.join(&f)).unwrap(), std::fs::read(again.join(&f)).unwrap());
        }
    }
    assert_eq!(
        std::fs::read(store.join("manifest")).unwrap(),
        std::fs::read(again.join("manifest")).unwrap()
    );
}

#[test]
fn missing_data_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tgdd");
    let out = tgdd(&["--out", s(&dir.path().join("o")), "pretrain", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn distill_outputs_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let toy = data.join("toy.tgdd");
    let run1 = dir.path().join("run1");
    ok(&distill_args(&toy, &store, &run1));
    for f in ["synthetic.tgdd", "synthetic.meta", "report.csv", "tgdd_config.txt"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(run1.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("iter,ext_epoch,exp_epoch,l_mmd,l_sdc,l_total"));
    assert_eq!(report.lines().count(), 7);
    let syn = SyntheticSet::load(&run1.join("synthetic.tgdd")).unwrap();
    assert_eq!(syn.labels().len(), 3 * 2);

    // Same flags into a fresh directory: identical primary outputs.
    let run2 = dir.path().join("run2");
    ok(&distill_args(&toy, &store, &run2));
    for f in ["synthetic.tgdd", "synthetic.meta", "report.csv"] {
        assert_eq!(std::fs::read(run1.join(f)).unwrap(), std::fs::read(run2.join(f)).unwrap(), "{f}");
    }

    let base = dir.path().join("base");
    let mut args = distill_args(&toy, &store, &base);
    args.extend(["--alpha", "0", "--dm-baseline"]);
    ok(&args);
    let report = std::fs::read_to_string(base.join("report.csv")).unwrap();
    for line in report.lines().skip(1) {
        assert_eq!(line.split(',').nth(1), Some("0"));
    }
}

#[test]
fn alpha_default_follows_ipc() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let toy = data.join("toy.tgdd");
    for (ipc, alpha) in [("1", "2.5"), ("10", "2.5"), ("50", "0.5")] {
        let out = dir.path().join(format!("ipc{ipc}"));
        ok(&[
            "--out", s(&out), "--quiet", "distill", "--data", s(&toy), "--store", s(&store), "--ipc", ipc, "--iters",
            "0", "--region", "3",
        ]);
        let echo = std::fs::read_to_string(out.join("tgdd_config.txt")).unwrap();
        assert!(echo.contains(&format!("alpha = {alpha}\n")), "ipc {ipc}: {echo}");
    }
}

#[test]
fn config_file_merges_with_flags_and_echo_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# distillation settings\ndata = {}\nstore = {}\nipc = 3\nregion = 3\niters = 4\nreal-batch = 8\nseed = 11\n",
            s(&data.join("toy.tgdd")),
            s(&store)
        ),
    )
    .unwrap();
    let first = dir.path().join("first");
    ok(&["--config", s(&cfg), "--out", s(&first), "--quiet", "distill", "--ipc", "2"]);
    let echo = std::fs::read_to_string(first.join("tgdd_config.txt")).unwrap();
    assert!(echo.contains("ipc = 2\n"));
    assert!(echo.contains("seed = 11\n"));
    assert!(echo.contains("iters = 4\n"));

    let second = dir.path().join("second");
    ok(&["--config", s(&first.join("tgdd_config.txt")), "--out", s(&second), "--quiet", "distill"]);
    for f in ["synthetic.tgdd", "synthetic.meta", "report.csv"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let toy = data.join("toy.tgdd");

    let bad = tgdd(&["--out", s(&dir.path().join("b")), "distill", "--data", s(&toy), "--store", s(&store), "--alpha", "-1"]);
    assert_eq!(bad.status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "ipc = lots\n").unwrap();
    let bad = tgdd(&["--config", s(&cfg), "--out", s(&dir.path().join("c")), "distill", "--data", s(&toy), "--store", s(&store)]);
    assert_eq!(bad.status.code(), Some(2));

    let other = dir.path().join("other");
    ok(&["--out", s(&other), "--quiet", "toygen", "--classes", "4", "--per-class", "5", "--test-per-class", "5", "--size", "8"]);
    let mismatch = tgdd(&[
        "--out", s(&dir.path().join("m")), "distill", "--data", s(&other.join("toy.tgdd")), "--store", s(&store),
        "--region", "3",
    ]);
    assert_eq!(mismatch.status.code(), Some(5));

    let blown = tgdd(&[
        "--out", s(&dir.path().join("n")), "pretrain", "--data", s(&toy), "--trajectories", "1", "--epochs", "8",
        "--depth", "1", "--width", "4", "--lr", "1e300",
    ]);
    assert_eq!(blown.status.code(), Some(4), "{}", String::from_utf8_lossy(&blown.stderr));

    let corrupt = dir.path().join("corrupt.tgdd");
    let bytes = std::fs::read(&toy).unwrap();
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    let trunc = tgdd(&["--out", s(&dir.path().join("t")), "pretrain", "--data", s(&corrupt)]);
    assert_eq!(trunc.status.code(), Some(3));
}

#[test]
fn eval_reports_per_seed_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let run = dir.path().join("run");
    ok(&distill_args(&data.join("toy.tgdd"), &store, &run));
    let syn = run.join("synthetic.tgdd");
    let test = data.join("toy_test.tgdd");
    let ev = dir.path().join("ev");
    let out = ok(&[
        "--out", s(&ev), "--quiet", "eval", "--synthetic", s(&syn), "--test", s(&test), "--epochs", "3", "--repeats",
        "5", "--depth", "2", "--width", "4",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let seeds = text.lines().find(|l| l.trim_start().starts_with("per seed:")).unwrap();
    assert_eq!(seeds.split_whitespace().count(), 2 + 5);
    assert!(text.contains("accuracy:"));
    let csv = std::fs::read_to_string(ev.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let one = dir.path().join("one");
    let out = ok(&[
        "--out", s(&one), "--quiet", "eval", "--synthetic", s(&syn), "--test", s(&test), "--epochs", "2", "--repeats",
        "1", "--arch-sweep", "1,2", "--width", "4",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("± 0.00").count(), 2);
    assert!(text.contains("ConvNet-1") && text.contains("ConvNet-2"));

    let again = dir.path().join("again");
    ok(&[
        "--out", s(&again), "--quiet", "eval", "--synthetic", s(&syn), "--test", s(&test), "--epochs", "2", "--repeats",
        "1", "--arch-sweep", "1,2", "--width", "4",
    ]);
    assert_eq!(
        std::fs::read(one.join("eval_report.txt")).unwrap(),
        std::fs::read(again.join("eval_report.txt")).unwrap()
    );

    let whole = dir.path().join("whole");
    let out = ok(&[
        "--out", s(&whole), "--quiet", "eval", "--real", s(&data.join("toy.tgdd")), "--test", s(&test), "--epochs",
        "2", "--repeats", "1", "--depth", "1", "--width", "4",
    ]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("accuracy:"));
}

#[test]
fn grid_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, store) = fixture(dir.path());
    let toy = data.join("toy.tgdd");
    let run = dir.path().join("run");
    ok(&distill_args(&toy, &store, &run));
    let g1 = dir.path().join("g1");
    let g2 = dir.path().join("g2");
    for g in [&g1, &g2] {
        ok(&["--out", s(g), "--quiet", "export-grid", "--synthetic", s(&run.join("synthetic.tgdd"))]);
    }
    let a = std::fs::read(g1.join("grid.png")).unwrap();
    assert_eq!(a, std::fs::read(g2.join("grid.png")).unwrap());
    let img = image::load_from_memory(&a).unwrap();
    assert_eq!((img.width(), img.height()), (2 * 8 + 3 * 2, 3 * 8 + 4 * 2));

    let rho = dir.path().join("rho");
    let mut args = distill_args(&toy, &store, &rho);
    args.extend(["--rho", "2"]);
    ok(&args);
    let g3 = dir.path().join("g3");
    ok(&["--out", s(&g3), "--quiet", "export-grid", "--synthetic", s(&rho.join("synthetic.tgdd"))]);
    let img = image::open(g3.join("grid.png")).unwrap();
    assert_eq!(img.width() as usize, 8 * 8 + 9 * 2);
}

#[test]
fn convert_reads_class_folders() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("imgs");
    for (c, name) in ["cat", "dog"].iter().enumerate() {
        let d = root.join(name);
        std::fs::create_dir_all(&d).unwrap();
        for k in 0..3u8 {
            let img = image::RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8 * 10, y as u8 * 20, c as u8 * 100 + k]));
            img.save(d.join(format!("{k}.png"))).unwrap();
        }
    }
    let out = dir.path().join("out");
    ok(&["--out", s(&out), "--quiet", "convert", "--input", s(&root), "--name", "pets"]);
    let ds = LabeledDataset::load(&out.join("pets.tgdd")).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.num_classes(), 2);
    assert_eq!(ds.image_hw(), (3, 4));
    assert_eq!(ds.labels(), &[0, 0, 0, 1, 1, 1]);
    // Image 4 is dog/1.png; pixel (x=2, y=1) channel 0 holds 20 / 255.
    let px = ds.images().data()[((4 * 3) * 3 + 1) * 4 + 2];
    assert!((px - 20.0 / 255.0).abs() < 1e-6);
    let blue = ds.images().data()[((4 * 3 + 2) * 3) * 4];
    assert!((blue - 101.0 / 255.0).abs() < 1e-6);
    assert_eq!(std::fs::read_to_string(out.join("pets.classes")).unwrap(), "cat\ndog\n");

    std::fs::write(root.join("dog/broken.png"), b"not a png").unwrap();
    let bad = tgdd(&["--out", s(&out), "--quiet", "convert", "--input", s(&root)]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn quiet_silences_progress() {
    let dir = tempfile::tempdir().unwrap();
    let out = tgdd(&["--out", s(&dir.path().join("t")), "--quiet", "toygen", "--per-class", "2", "--test-per-class", "2"]);
    assert!(out.status.success());
    assert!(out.stderr.is_empty());
    let loud = tgdd(&["--out", s(&dir.path().join("t")), "toygen", "--per-class", "2", "--test-per-class", "2"]);
    assert!(!loud.stderr.is_empty());
}

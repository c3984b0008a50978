use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
seed=5
variant=sequential_relay
model.depth=2
model.width=16
model.heads=2
model.patch_size=4
model.num_classes=4
model.local_size=16
model.global_extent=64
model.relay_count=2
optim.lr0=0.003
optim.steps=6
optim.batch=4
train.eval_every=3
train.checkpoint_every=0
train.infer_batch=8
sampler.aug_prob=0
synth.size=128
synth.cell=16
synth.beacon_spacing=128
synth.beacon_offset=64
synth.beacon_half=16
synth.margin=32
synth.train=3
synth.val=1
synth.test=2
";

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn relaygrid(args: &[&str]) -> Output {
    relaygrid_in(Path::new("."), args)
}

fn relaygrid_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relaygrid"))
        .args(args)
        .current_dir(dir)
        .env("RELAYGRID_THREADS", "1")
        .output()
        .expect("spawn relaygrid")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Writes the tiny config into `root` and generates its data there. Commands
/// run from `root` so the recorded data path is the same relative one
/// everywhere.
fn setup(root: &Path) -> String {
    fs::write(root.join("tiny.cfg"), format!("{TINY}paths.data=data\n")).unwrap();
    ok(relaygrid_in(root, &["synth", "--config", "tiny.cfg"]));
    "tiny.cfg".to_string()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_counts_match() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = a.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.display().to_string();
    let out_a = ok(relaygrid(&["synth", "--config", &cfg, "--out", &a.path().join("d").display().to_string()]));
    let out_b = ok(relaygrid(&["synth", "--config", &cfg, "--out", &b.path().join("d").display().to_string()]));
    assert_eq!(out_a, "train=3\nval=1\ntest=2\n");
    assert_eq!(out_a, out_b);
    let ta = tree(&a.path().join("d"));
    assert_eq!(ta, tree(&b.path().join("d")));
    for (split, n) in [("train", 3), ("val", 1), ("test", 2)] {
        let m = fs::read_to_string(a.path().join("d").join(format!("{split}.manifest"))).unwrap();
        assert_eq!(m.lines().filter(|l| !l.starts_with('#')).count(), n);
    }
    assert_eq!(ta.len(), 3 + 2 * 6);
}

#[test]
fn cost_reports_relay_near_twice_baseline() {
    let out = ok(relaygrid(&["cost"]));
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let ratio_col = header.iter().position(|h| *h == "flops_vs_baseline").unwrap();
    let row = lines.find(|l| l.starts_with("sequential_relay,")).unwrap();
    let ratio: f64 = row.split(',').nth(ratio_col).unwrap().parse().unwrap();
    assert!((1.95..=2.15).contains(&ratio), "ratio {ratio}");
    let base = out.lines().find(|l| l.starts_with("local_only,")).unwrap();
    assert!(base.ends_with(",1.0000"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let root = tempfile::tempdir().unwrap();
    let cfg = setup(root.path());
    let split = root.path().join("split").display().to_string();
    let whole = root.path().join("whole").display().to_string();

    ok(relaygrid_in(root.path(), &["train", "--config", &cfg, "--out", &split, "--steps", "1"]));
    let last = format!("{split}/checkpoints/last.rlyt");
    let out = ok(relaygrid_in(root.path(), &["train", "--config", &cfg, "--out", &split, "--steps", "2", "--checkpoint", &last]));
    assert!(out.starts_with("steps=1..2\n"), "{out}");
    ok(relaygrid_in(root.path(), &["train", "--config", &cfg, "--out", &whole, "--steps", "2"]));

    let a = fs::read(&last).unwrap();
    let b = fs::read(format!("{whole}/checkpoints/last.rlyt")).unwrap();
    assert!(a == b, "resumed checkpoint differs from uninterrupted run");
    assert_eq!(
        fs::read_to_string(format!("{split}/log.csv")).unwrap(),
        fs::read_to_string(format!("{whole}/log.csv")).unwrap()
    );
}

/// Set `RELAYGRID_BLESS=1` to regenerate the golden files.
#[test]
fn golden_checkpoint_and_eval_report() {
    let root = tempfile::tempdir().unwrap();
    let cfg = setup(root.path());
    let r = root.path();
    ok(relaygrid_in(r, &["train", "--config", &cfg, "--out", "run"]));
    let ckpt = r.join("run/checkpoints/last.rlyt");
    let report = ok(relaygrid_in(r, &["eval", "--config", &cfg, "--checkpoint", "run/checkpoints/last.rlyt"]));

    let g = golden_dir();
    if std::env::var_os("RELAYGRID_BLESS").is_some() {
        fs::create_dir_all(&g).unwrap();
        fs::copy(&ckpt, g.join("tiny.rlyt")).unwrap();
        fs::write(g.join("tiny_eval.txt"), &report).unwrap();
    }
    let golden = fs::read(g.join("tiny.rlyt")).unwrap();
    assert!(fs::read(&ckpt).unwrap() == golden, "trained checkpoint differs from golden");
    // the frozen checkpoint alone reproduces the frozen report
    let frozen = ok(relaygrid_in(r, &["eval", "--config", &cfg, "--checkpoint", &g.join("tiny.rlyt").display().to_string()]));
    assert_eq!(frozen, fs::read_to_string(g.join("tiny_eval.txt")).unwrap());
    assert_eq!(report, frozen);
    assert!(report.starts_with("miou=") && report.contains("\nmiou_exact="));
}

#[test]
fn eval_and_attn_write_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let cfg = setup(root.path());
    let ckpt = golden_dir().join("tiny.rlyt").display().to_string();
    let ev = root.path().join("ev");
    ok(relaygrid_in(root.path(), &["eval", "--config", &cfg, "--checkpoint", &ckpt, "--out", &ev.display().to_string()]));
    assert!(fs::read_to_string(ev.join("metrics.csv")).unwrap().starts_with("class,iou,tp,fp,fn\n"));
    assert!(ev.join("rasters/pred_0001.pgm").exists());

    let at = root.path().join("at");
    let out = ok(relaygrid_in(root.path(), &["attn", "--config", &cfg, "--checkpoint", &ckpt, "--out", &at.display().to_string()]));
    assert!(out.starts_with("maps=2\n"));
    let csv = fs::read_to_string(at.join("attn.csv")).unwrap();
    // 2 relays x 2 scales x 16 patches
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 16);
    assert!(at.join("rasters/attn_global_r1.pgm").exists());
}

#[test]
fn errors_are_one_structured_line() {
    let out = relaygrid(&["eval"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: kind=config msg="), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "model.depth=two\n").unwrap();
    let out = relaygrid(&["cost", "--config", &bad.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind=config msg="));

    let junk = dir.path().join("junk.rlyt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = relaygrid(&["eval", "--checkpoint", &junk.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: kind=checkpoint msg="));
}

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rumor-adapt")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 14] = [
    "--set", "dim=16", "--set", "heads=2", "--set", "ffn_dim=16", "--set", "synth_samples=12", "--set",
    "batch_size_source=6", "--set", "batch_size_target=6", "--set", "epochs=1",
];

fn synth(dir: &Path) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    args.extend(SMALL);
    let o = bin(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["synth"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for bad in ["alpha1=0.5", "beta2=0.9", "gamma1=0.5", "tau=0", "no_such_key=1", "heads=7"] {
        let o = bin(&["synth", "--out", p(&out), "--set", bad]);
        assert_eq!(o.status.code(), Some(1), "{bad}");
        assert!(!o.stderr.is_empty());
    }
    let o = bin(&["synth", "--out", p(&out), "--config", p(&dir.path().join("missing.cfg"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = bin(&["eval", "--checkpoint", p(&dir.path().join("none")), "--target", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small corpus\nsynth_samples = 7\nsynth_seed = 3\n").unwrap();
    let out = dir.path().join("d");
    let o = bin(&["synth", "--config", p(&cfg), "--set", "synth_samples=5", "--out", p(&out)]);
    assert!(o.status.success());
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("synth_samples = 5"));
    assert!(manifest.contains("synth_seed = 3"));
    assert_eq!(std::fs::read_to_string(out.join("source.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn synth_is_deterministic_and_allows_empty() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a);
    synth(&b);
    for f in ["source.jsonl", "target.jsonl", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let e = dir.path().join("e");
    let o = bin(&["synth", "--out", p(&e), "--set", "synth_samples=0"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(e.join("source.jsonl")).unwrap(), "");
    assert!(stdout(&o).contains("wrote 0 source"));
}

#[test]
fn train_eval_resume_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let (src, tgt) = (data.join("source.jsonl"), data.join("target.jsonl"));
    let run = dir.path().join("run");
    let mut args = vec!["train", "--source", p(&src), "--target", p(&tgt), "--out", p(&run)];
    args.extend(SMALL);
    let o = bin(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("trained 2 steps"));
    assert!(stdout(&o).contains("R-F1"));
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(std::fs::read_to_string(run.join("predictions.jsonl")).unwrap().lines().count(), 12);
    let eval_txt = std::fs::read_to_string(run.join("eval.txt")).unwrap();
    assert!(eval_txt.contains("accuracy = "));

    let ckpt = run.join("checkpoint.txt");
    let preds = dir.path().join("p.jsonl");
    let o = bin(&["eval", "--checkpoint", p(&ckpt), "--target", p(&tgt), "--predictions", p(&preds)]);
    assert!(o.status.success());
    let acc_line = stdout(&o).lines().next().unwrap().to_string();
    let acc: f64 = acc_line.trim_start_matches("accuracy ").parse().unwrap();
    let saved: f64 = eval_txt.lines().next().unwrap().trim_start_matches("accuracy = ").parse().unwrap();
    assert!((acc - saved).abs() < 0.01);
    assert_eq!(std::fs::read(&preds).unwrap(), std::fs::read(run.join("predictions.jsonl")).unwrap());

    // resume to two epochs; must match a fresh two-epoch run
    let resumed = dir.path().join("resumed");
    let mut args = vec!["train", "--source", p(&src), "--target", p(&tgt), "--out", p(&resumed), "--resume", p(&ckpt)];
    args.extend(SMALL);
    args.extend(["--set", "epochs=2"]);
    assert!(bin(&args).status.success());
    let fresh = dir.path().join("fresh");
    let mut args = vec!["train", "--source", p(&src), "--target", p(&tgt), "--out", p(&fresh)];
    args.extend(SMALL);
    args.extend(["--set", "epochs=2"]);
    assert!(bin(&args).status.success());
    assert_eq!(
        std::fs::read_to_string(resumed.join("checkpoint.txt")).unwrap(),
        std::fs::read_to_string(fresh.join("checkpoint.txt")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap(),
        std::fs::read_to_string(fresh.join("metrics.jsonl")).unwrap()
    );

    // resuming under a different model is refused
    let mut args = vec!["train", "--source", p(&src), "--target", p(&tgt), "--out", p(&fresh), "--resume", p(&ckpt)];
    args.extend(SMALL);
    args.extend(["--set", "tau=0.5"]);
    let o = bin(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));

    let o = bin(&["inspect-pseudo", "--checkpoint", p(&ckpt), "--source", p(&src), "--target", p(&tgt)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with('{')).count(), 12);
    assert!(out.lines().last().unwrap().starts_with("pseudo_accuracy "));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let mut args = vec!["sweep", "--grid", "alpha=0.9/0.1,0.5/0.5;gamma=1/0/0", "--out", p(&csv)];
    args.extend(SMALL);
    let o = bin(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "group,alpha1,alpha2,beta1,beta2,gamma1,gamma2,gamma3,accuracy,f1_N,f1_R");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("gamma,0.9,0.1,0.7,0.3,1,0,0,"));

    let o = bin(&["sweep", "--grid", "alpha=0.5/0.6"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bin(&["sweep", "--grid", "delta=1/0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_command_passes() {
    let o = bin(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("gradcheck passed"));
}

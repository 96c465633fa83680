use std::path::Path;
use std::process::{Command, Output};

fn chanloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanloc"))
        .args(args)
        .env("CHANLOC_THREADS", "1")
        .output()
        .expect("spawn chanloc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_run(out: &Path) -> Output {
    chanloc(&[
        "train",
        "--arch",
        "plane",
        "--attn",
        "clocal",
        "--synthetic",
        "512",
        "--epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ])
}

/// CSV contents with the wall-clock column removed.
fn without_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| if l.starts_with('#') { l.to_string() } else { l.rsplit_once(',').unwrap().0.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn inspect_plane_clocal() {
    let o = chanloc(&["inspect", "--arch", "plane", "--attn", "clocal"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("config: arch=plane attn=clocal strand_ratio=8"));
    let table_end = text.lines().position(|l| l.starts_with("parameters:")).unwrap();
    assert!(text.lines().nth(table_end - 1).unwrap().ends_with("global average pool, 10-d fc, softmax"));
    assert!(text.contains("attention overhead: 1452 params"));
}

#[test]
fn inspect_prose_strand_rule() {
    let o = chanloc(&["inspect", "--arch", "plane", "--attn", "clocal", "--strand-ratio", "4"]);
    assert!(o.status.success());
    // L doubles, adding (C/8)·F stage-2 weights per block
    assert!(stdout(&o).contains(&format!("attention overhead: {} params", 1452 + 8 * 4 + 16 * 8 + 2 * 32 * 16)));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(chanloc(&["inspect", "--arch", "plane", "--attn", "bogus"]).status.code(), Some(1));
    assert_eq!(chanloc(&["inspect", "--arch", "plane", "--attn", "se", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(chanloc(&["train", "--arch", "plane", "--attn", "se"]).status.code(), Some(1));
    assert_eq!(chanloc(&["gradcheck", "--op", "nope"]).status.code(), Some(1));
    assert_eq!(chanloc(&["inspect", "--arch", "resnet", "--attn", "clocal", "--strand-ratio", "3"]).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_chanloc"))
        .args(["inspect", "--arch", "plane", "--attn", "se"])
        .env("CHANLOC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_all_passes() {
    let o = chanloc(&["gradcheck", "--op", "all", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("clocal_block#3"));
    assert!(text.contains("se_block#3"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_failure_exits_3() {
    let o = chanloc(&["gradcheck", "--op", "relu", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanloc(&[
        "train",
        "--arch",
        "plane",
        "--attn",
        "none",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data_batch_1.bin"));
}

#[test]
fn diverging_run_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanloc(&[
        "train",
        "--arch",
        "plane",
        "--attn",
        "none",
        "--synthetic",
        "64",
        "--epochs",
        "3",
        "--lr",
        "1e30",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss at epoch"));
}

#[test]
fn train_writes_metrics_and_checkpoint_then_eval_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = train_run(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# arch=plane attn=clocal strand_ratio=8 synthetic=512"));
    assert!(lines[0].contains("epochs=2"));
    assert_eq!(lines[1], "epoch,lr,train_loss,train_acc,test_loss,test_acc,seconds");
    assert_eq!(lines.len(), 4);
    assert!(stdout(&o).starts_with("config: "));

    assert!(train_run(&b).status.success());
    let again = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(without_seconds(&csv), without_seconds(&again));

    let ckpt = a.join("best.clkb");
    let o = chanloc(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--synthetic", "100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("arch=plane attn=clocal strand_ratio=8"));
    assert!(text.contains("test accuracy "));

    let bogus = dir.path().join("bogus.clkb");
    std::fs::write(&bogus, b"NOPE").unwrap();
    let o = chanloc(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--synthetic", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

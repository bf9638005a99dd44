use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gcrpnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcrpnet"))
        .args(args)
        .current_dir(dir)
        .env("GCRP_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    stdout(&gcrpnet(p, &["synth", "--n", "3", "--size", "32", "--seed", "2", "--out", "ds"]));
    fs::write(p.join("cfg.txt"), "preset = tiny\nbatch_size = 2\n").unwrap();
    let out = stdout(&gcrpnet(p, &["train", "--config", "cfg.txt", "--data", "ds", "--out", "run", "--set", "epochs=2"]));
    assert!(out.starts_with("steps=4 "), "{out}");
    assert!(p.join("run/loss.csv").exists());
    stdout(&gcrpnet(p, &["infer", "--ckpt", "run/last.gcrp", "--images", "ds/images", "--out", "pred"]));
    assert_eq!(fs::read_dir(p.join("pred")).unwrap().count(), 3);
    let rep = stdout(&gcrpnet(p, &["eval", "--pred", "ds/GT", "--gt", "ds/GT", "--report", "r.txt"]));
    assert!(rep.contains("mae=0.000000") && rep.contains("f_max=1.000000"), "{rep}");
    assert_eq!(fs::read_to_string(p.join("r.txt")).unwrap(), rep);
}

#[test]
fn scan_dump_prints_the_block_order() {
    let d = tempfile::tempdir().unwrap();
    let out = stdout(&gcrpnet(d.path(), &["scan-dump", "--h", "4", "--w", "4", "--grid", "2", "--dir", "right"]));
    assert_eq!(out.trim(), "[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]");
}

#[test]
fn exit_codes_distinguish_validation_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = gcrpnet(d.path(), &["scan-dump", "--h", "6", "--w", "6", "--grid", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible"));
    fs::write(d.path().join("bad.txt"), "preset = tiny\nlr = -1\n").unwrap();
    let o = gcrpnet(d.path(), &["train", "--config", "bad.txt", "--data", "none", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gcrpnet(d.path(), &["eval", "--pred", "a", "--gt", "b", "--report", "r.txt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_timings() {
    let d = tempfile::tempdir().unwrap();
    let out = stdout(&gcrpnet(d.path(), &["bench", "--op", "gat", "--shape", "6,6,8", "--iters", "2"]));
    assert!(out.contains("median_ms="), "{out}");
}

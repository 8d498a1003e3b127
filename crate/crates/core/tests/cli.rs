use std::path::Path;
use std::process::{Command, Output};

fn tauflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tauflow")).args(args).output().expect("spawn tauflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{"input_size": 32, "base_channel": 8, "hidden_channels": 8, "group_embed_dim": 4,
    "norm_groups": 4, "train": {"batch_size": 2, "max_epochs": 3}}"#;

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let o = tauflow(&["cost", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[usage]: "), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn runtime_errors_are_one_line_with_a_kind() {
    let o = tauflow(&["eval", "--ckpt", "/nonexistent/model.ckpt", "--synth", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]: "), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"max_groups": 0}"#).unwrap();
    let o = tauflow(&["cost", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]: "), "{}", stderr(&o));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = tauflow(&["eval", "--ckpt", junk.to_str().unwrap(), "--synth", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[checkpoint]: "), "{}", stderr(&o));
}

#[test]
fn cost_reports_every_group_count() {
    let o = tauflow(&["cost"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("params_total     151988"));
    assert_eq!(text.lines().filter(|l| l.starts_with("flops G=")).count(), 5);

    let o = tauflow(&["cost", "--groups", "3"]);
    assert_eq!(stdout(&o).trim(), "params_total 151988\tflops G=3 4661724650");
    assert_eq!(tauflow(&["cost", "--groups", "6"]).status.code(), Some(1));

    let json: serde_json::Value = serde_json::from_slice(&tauflow(&["cost", "--json"]).stdout).unwrap();
    assert_eq!(json["params_total"], 151988);
}

#[test]
fn gradcheck_single_module() {
    let o = tauflow(&["gradcheck", "--module", "loss"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("loss") && text.trim_end().ends_with("ok"), "{text}");
    assert_eq!(tauflow(&["gradcheck", "--module", "decoder"]).status.code(), Some(1));
}

#[test]
fn train_then_eval_reproduces_best_dice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let data = dir.path().join("data");
    let o = tauflow(&["synth", "--n", "10", "--size", "32", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ckpt = dir.path().join("model.ckpt");
    let o = tauflow(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("training on 8 samples, validating on 2"), "{text}");
    let best: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("best val_dice "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();

    let log = std::fs::read_to_string(ckpt.with_extension("tsv")).unwrap();
    assert!(log.starts_with("# epoch\t"));
    assert_eq!(log.lines().count(), 4);

    // Re-evaluate on the same hold-out: the two validation images.
    let val_dir = dir.path().join("val");
    std::fs::create_dir(&val_dir).unwrap();
    let split = tauflow::data::holdout(10, 2, 42).unwrap();
    for &i in &split.val {
        for name in [format!("synth_42_{i:05}.ppm"), format!("synth_42_{i:05}_mask.pgm")] {
            std::fs::copy(data.join(&name), val_dir.join(&name)).unwrap();
        }
    }
    let o = tauflow(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", val_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stdout(&o);
    let dice: f64 = summary
        .lines()
        .last()
        .and_then(|l| l.strip_prefix("dice "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((dice - best).abs() <= 1e-6, "eval {dice} vs training {best}");
}

#[test]
fn infer_writes_a_binary_mask_at_input_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let o = tauflow(&["train", "--config", &cfg, "--synth", "4", "--epochs", "1", "--out", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let data = dir.path().join("imgs");
    assert!(tauflow(&["synth", "--n", "1", "--size", "48", "--out", data.to_str().unwrap()]).status.success());
    let mask = dir.path().join("pred.pgm");
    let o = tauflow(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", data.join("synth_42_00000.ppm").to_str().unwrap(), "--out", mask.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("groups "));

    let raw = tauflow::data::pnm::read(&mask).unwrap();
    assert_eq!((raw.width, raw.height, raw.channels), (48, 48, 1));
    assert!(raw.pixels.iter().all(|&p| p == 0 || p == 255));
}

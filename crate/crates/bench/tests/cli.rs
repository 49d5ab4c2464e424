use std::path::Path;
use std::process::{Command, Output};

fn krst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krst")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn gen(dir: &Path, task: &str) -> Output {
    krst(&["gen", "--task", task, "--seed", "3", "--n-train", "8", "--n-val", "4", "--n-test", "4", "--out", dir.to_str().unwrap()])
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let out = gen(&data, "frame_relpos");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("test/samples.jsonl").exists());

    let out = krst(&[
        "train",
        "--task",
        "frame_relpos",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.krst", "train_log.jsonl", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let eval_dir = tmp.path().join("eval");
    let ckpt = run.join("checkpoint.krst");
    let out =
        krst(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(evaluated, printed);
    let preds = std::fs::read_to_string(eval_dir.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);

    let trace = tmp.path().join("trace.json");
    let out = krst(&[
        "dump-attn",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--id",
        "test-000001",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(trace).unwrap()).unwrap();
    assert_eq!(v["id"], "test-000001");
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    assert_eq!(code(&krst(&["gen", "--task", "frame_relpos", "--n-train", "0", "--out", d])), 2);
    assert_eq!(code(&krst(&["gen", "--task", "juggling", "--out", d])), 2);
    assert_eq!(code(&krst(&["train", "--task", "frame_relpos", "--without", "everything"])), 2);
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"task": "frame_relpos", "learning_speed": 3}"#).unwrap();
    assert_eq!(code(&krst(&["train", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn data_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = krst(&["train", "--task", "frame_relpos", "--data", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3);

    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "transition")), 0);
    let out = krst(&["train", "--task", "frame_relpos", "--data", data.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "task mismatch");

    let junk = tmp.path().join("junk.krst");
    std::fs::write(&junk, b"KRST1\x05\0\0\0\0\0\0\0{").unwrap();
    let out = krst(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes_on_the_desk_preset() {
    let out = krst(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["pass"] == true));
}

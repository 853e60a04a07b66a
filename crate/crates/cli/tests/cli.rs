use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const STAGES: [&str; 9] = [
    "synth",
    "ingest",
    "train-quantizer",
    "prepare-corpus",
    "train-tokenizer",
    "pretrain",
    "prepare-task",
    "finetune",
    "evaluate",
];

fn heartbert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heartbert"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "seed = 5\n\
         paths.work_dir = {work}\n\
         paths.input = {raw}\n\
         synth.n_records = 3\n\
         synth.duration_secs = 30\n\
         signal.max_window = 720\n\
         tokenizer.vocab_size = 250\n\
         tokenizer.max_seq_len = 64\n\
         model.n_layers = 2\n\
         model.n_heads = 2\n\
         model.d_model = 8\n\
         model.d_ff = 16\n\
         pretrain.epochs = 2\n\
         pretrain.batch_size = 8\n\
         pretrain.lr = 1e-3\n\
         finetune.epochs = 2\n\
         finetune.learning_rates = 4e-3, 5e-3\n\
         finetune.freeze = last-1\n\
         {extra}",
        work = dir.join("out").display(),
        raw = dir.join("raw").display(),
    );
    let path = dir.join("pipeline.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_stages(cfg: &str, stages: &[&str]) {
    for stage in stages {
        let o = heartbert(&["-c", cfg, stage]);
        assert!(o.status.success(), "{stage} failed: {}", stderr(&o));
    }
}

fn digests(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path).unwrap(),
        );
    }
    out
}

#[test]
fn inspect_params_prints_grouped_counts() {
    let o = heartbert(&["inspect-params", "--pretrain"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "83,504,416");
    let o = heartbert(&["inspect-params", "--freeze", "all-frozen", "--classes", "3"]);
    assert_eq!(stdout(&o).trim(), "1,510,915");
    let o = heartbert(&["inspect-params", "--freeze", "half", "--classes", "5"]);
    assert_eq!(stdout(&o).trim(), "22,775,045");
}

#[test]
fn config_errors_exit_with_code_2() {
    let o = heartbert(&["-s", "model.n_heads=5", "inspect-params"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.n_heads"), "{}", stderr(&o));
    assert!(stderr(&o).contains("divisible"));

    let o = heartbert(&["-s", "model.depth=4", "inspect-params"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`model.depth`"));

    let o = heartbert(&["-s", "pretrain.lr=fast", "inspect-params"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pretrain.lr"));
}

#[test]
fn empty_config_file_is_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cfg");
    std::fs::write(&path, "").unwrap();
    let o = heartbert(&["-c", path.to_str().unwrap(), "inspect-params", "--pretrain"]);
    assert_eq!(stdout(&o).trim(), "83,504,416");
}

#[test]
fn missing_artifacts_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = heartbert(&["-c", &cfg, "train-quantizer"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("windows.hbw"), "{}", stderr(&o));
    let o = heartbert(&["-c", dir.path().join("nope.cfg").to_str().unwrap(), "ingest"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.cfg"));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (write_config(a.path(), ""), write_config(b.path(), ""));
    run_stages(&ca, &STAGES);
    run_stages(&cb, &STAGES);
    let (da, db) = (digests(&a.path().join("out")), digests(&b.path().join("out")));
    assert!(da.contains_key("metrics.json") && da.contains_key("hybrid.hbck.prov"));
    assert_eq!(da.keys().collect::<Vec<_>>(), db.keys().collect::<Vec<_>>());
    for (name, bytes) in &da {
        assert!(db[name] == *bytes, "{name} differs between runs");
    }

    // Provenance chain: the encoder records the tokenizer it was trained with.
    let enc = std::fs::read_to_string(a.path().join("out/encoder.hbck.prov")).unwrap();
    let vocab = std::fs::read_to_string(a.path().join("out/vocab.txt.prov")).unwrap();
    let vocab_hash = vocab.lines().find_map(|l| l.strip_prefix("output=")).unwrap();
    assert!(enc.contains(&format!("input.vocab.txt={vocab_hash}")));
    assert!(enc.contains("override.model.n_layers=2"));
}

#[test]
fn tokenizer_rerun_gives_identical_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_stages(&cfg, &STAGES[..5]);
    let vocab = dir.path().join("out/vocab.txt");
    let first = std::fs::read(&vocab).unwrap();
    run_stages(&cfg, &["train-tokenizer"]);
    assert_eq!(std::fs::read(&vocab).unwrap(), first);

    // Edited upstream artifacts are rejected.
    let corpus = dir.path().join("out/corpus.hbc");
    let mut text = std::fs::read_to_string(&corpus).unwrap();
    text.push_str("!!!\n");
    std::fs::write(&corpus, text).unwrap();
    let o = heartbert(&["-c", &cfg, "train-tokenizer"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_with_code_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_stages(&cfg, &STAGES[..5]);
    let o = heartbert(&["-c", &cfg, "-s", "pretrain.lr=1e300", "pretrain"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn sleep_task_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "task.name = sleep3\nsynth.sleep_epochs = 12\n");
    run_stages(&cfg, &STAGES);
    let report = std::fs::read_to_string(dir.path().join("out/metrics.json")).unwrap();
    assert!(report.contains("\"task\": \"sleep3\""));
    assert!(report.contains("\"n_classes\": 3"));
}

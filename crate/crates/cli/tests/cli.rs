use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_synalign")
}

fn synalign(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small corpus and a fast config next to it.
fn setup(dir: &Path, extra: &str) -> PathBuf {
    let atoms = dir.join("atoms.txt");
    let out = synalign(&["synth", "--concepts", "15", "--out", atoms.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = dir.join("exp.toml");
    fs::write(
        &config,
        format!(
            "atoms = \"atoms.txt\"\nseed = 3\nnegative_ratio = 2.0\nembed_dim = 8\nlstm_hidden = 4\n\
             dense1_units = 8\ndense2_units = 4\nbatch_size = 32\nepochs = 2\n{extra}"
        ),
    )
    .unwrap();
    config
}

fn run_pipeline(config: &Path, out: &Path) {
    let o = synalign(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn pipeline_writes_a_complete_run_and_refuses_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "");
    let run = dir.path().join("run");
    run_pipeline(&config, &run);
    for f in [
        "manifest.jsonl",
        "pairs/all.tsv",
        "embeddings.vec",
        "model.json",
        "metrics.md",
        "sweep.tsv",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);

    let args = [
        "gen-pairs",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    let again = synalign(&args);
    assert_eq!(code(&again), 3);
    assert!(stderr(&again).contains("--force"));
    let forced = synalign(&[&args[..], &["--force"]].concat());
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(
        fs::read_to_string(run.join("manifest.jsonl")).unwrap().lines().count(),
        6
    );
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "");
    let c = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        code(&synalign(&["gen-pairs", "--config", c, "--out", a.to_str().unwrap()])),
        0
    );
    assert_eq!(
        code(&synalign(&[
            "gen-pairs",
            "--config",
            c,
            "--out",
            b.to_str().unwrap(),
            "--seed",
            "4"
        ])),
        0
    );
    assert_ne!(
        fs::read(a.join("pairs/train.tsv")).unwrap(),
        fs::read(b.join("pairs/train.tsv")).unwrap()
    );
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&synalign(&["train"])), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "atoms = \"a.txt\"\nepochz = 3\n").unwrap();
    let o = synalign(&[
        "gen-pairs",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, "atoms = \"nowhere.txt\"\n").unwrap();
    let o = synalign(&["ingest", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let malformed = dir.path().join("bad_atoms.txt");
    fs::write(&malformed, "A1|headache|SRC\n").unwrap();
    let o = synalign(&["ingest", malformed.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let config = setup(dir.path(), "");
    let o = synalign(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("r2").to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
    assert!(
        stderr(&o).contains("gen-pairs") || stderr(&o).contains("extract"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn report_merges_runs_sorted_by_model_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "model_name = \"zeta\"\n");
    let other = dir.path().join("other.toml");
    fs::write(&other, fs::read_to_string(&config).unwrap().replace("zeta", "alpha")).unwrap();
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    run_pipeline(&config, &r1);
    run_pipeline(&other, &r2);

    let o = synalign(&["report", r1.to_str().unwrap(), r2.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(
        rows[0].starts_with("| alpha |") && rows[1].starts_with("| zeta |"),
        "{table}"
    );

    let csv = dir.path().join("merged.csv");
    let o = synalign(&[
        "report",
        r1.to_str().unwrap(),
        r2.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 3);
}

#[test]
fn replay_reproduces_outputs_and_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "");
    let run = dir.path().join("run");
    run_pipeline(&config, &run);
    let manifest = run.join("manifest.jsonl");

    let o = synalign(&[
        "replay",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("re").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all outputs identical"));

    // corrupt one recorded output hash
    let text = fs::read_to_string(&manifest).unwrap();
    let mut entries: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    entries[1]["outputs"][0]["sha256"] = serde_json::Value::String("0".repeat(64));
    let tampered = dir.path().join("tampered.jsonl");
    let lines: Vec<String> = entries.iter().map(|e| e.to_string()).collect();
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let o = synalign(&[
        "replay",
        tampered.to_str().unwrap(),
        "--out",
        dir.path().join("re2").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 6, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("MISMATCH gen-pairs"), "{}", stdout(&o));
}

#[test]
fn cross_eval_through_a_served_process_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let extra = format!(
        "encoder = \"process:{} serve-encoder builtin:hashing\"\nembed_dim = 32\n",
        bin()
    );
    let config = setup(dir.path(), "");
    let text = fs::read_to_string(&config).unwrap().replace("embed_dim = 8\n", &extra);
    fs::write(&config, text).unwrap();
    let run = dir.path().join("run");
    run_pipeline(&config, &run);

    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(run.join("cross_metrics.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    let configs: Vec<&str> = rows.iter().map(|r| r["config"].as_str().unwrap()).collect();
    assert!(configs[0].ends_with("ij") && configs[1].ends_with("ji"), "{configs:?}");
    let dump = fs::read_to_string(run.join("cross_scores.tsv")).unwrap();
    let test_pairs = fs::read_to_string(run.join("pairs/test.tsv")).unwrap().lines().count() - 1;
    assert_eq!(dump.lines().count() - 1, 2 * test_pairs);
    for line in dump.lines().skip(1) {
        let score: f64 = line.split('\t').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&score), "{line}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("embeddings.json")).unwrap()).unwrap();
    assert_eq!(meta["dim"], 32);
    assert!(meta["source"].as_str().unwrap().starts_with("process:"));
}

#[test]
fn threads_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "");
    let c = config.to_str().unwrap();
    let mut models = Vec::new();
    for t in ["1", "3"] {
        let out = dir.path().join(format!("t{t}"));
        let o = synalign(&[
            "--threads",
            t,
            "pipeline",
            "--config",
            c,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        models.push(fs::read(out.join("model.json")).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mvcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_SPEC: &str = r#"{
  "classes": [
    {"slope": -0.05, "frequency": 2.0, "amplitude": 1.0, "noise_std": 0.2, "label": 0},
    {"slope": 0.05, "frequency": 5.0, "amplitude": 1.0, "noise_std": 0.2, "label": 1}
  ],
  "length": 16,
  "channels": 1,
  "source": {"train": 32, "val": 8, "test": 8},
  "target": {"train": 16, "val": 8, "test": 16},
  "slope_offset": 0.0,
  "frequency_offset": 0.5,
  "seed": 0
}"#;

/// Tiny model and schedule so each training command takes well under a second.
const FAST: &[&str] = &[
    "--profile",
    "desk",
    "--set",
    "train.model.length=16",
    "--set",
    "train.model.hidden=8",
    "--set",
    "train.model.layers=1",
    "--set",
    "train.pretrain.batch_size=8",
    "--set",
    "train.pretrain.max_epochs=2",
    "--set",
    "train.finetune.batch_size=8",
    "--set",
    "train.finetune.max_epochs=2",
];

fn small_data(dir: &Path) {
    fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    let o = mvcl(dir, &["gen-synth", "--spec", "spec.json", "--out", "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(FAST);
    v
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mvcl(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(mvcl(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mvcl(tmp.path(), &["finetune", "--profile", "huge"]).status.code(), Some(1));
}

#[test]
fn gen_synth_is_byte_identical_per_seed_and_echoes_the_spec() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(mvcl(tmp.path(), &["gen-synth", "--seed", "7", "--out", out]).status.success());
    }
    for domain in ["source", "target"] {
        for file in ["meta.json", "data.jsonl"] {
            let a = fs::read(tmp.path().join("a").join(domain).join(file)).unwrap();
            let b = fs::read(tmp.path().join("b").join(domain).join(file)).unwrap();
            assert!(a == b, "{domain}/{file} differs");
        }
    }
    let meta = json(&tmp.path().join("a/source/meta.json"));
    assert_eq!(meta["classes"], 2);
    let latents = meta["synthetic_spec"]["classes"].as_array().unwrap();
    assert_eq!(latents.len(), 4);
    assert_eq!(meta["synthetic_spec"]["seed"], 7);
}

#[test]
fn gen_synth_rejects_an_aliasing_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SMALL_SPEC.replace("\"frequency\": 5.0", "\"frequency\": 9.0");
    fs::write(tmp.path().join("spec.json"), spec).unwrap();
    let o = mvcl(tmp.path(), &["gen-synth", "--spec", "spec.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("aliasing"), "{}", stderr(&o));
}

#[test]
fn gen_synth_overrides_address_spec_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["gen-synth", "--preset", "shift", "--out", "s", "--set", "source.train=8", "--set", "target.test=4"];
    let o = mvcl(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = json(&tmp.path().join("s/source/meta.json"));
    assert_eq!(meta["splits"]["train"], 8);
    let lines = fs::read_to_string(tmp.path().join("s/target/data.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 60 + 20 + 4);

    let o = mvcl(tmp.path(), &["gen-synth", "--set", "train.lr=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
    let o = mvcl(tmp.path(), &["gradcheck", "--profile", "desk"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_are_line_anchored() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), "{\n  \"train\": {\n    \"tau\": 0\n  }\n}\n").unwrap();
    let o = mvcl(tmp.path(), &["finetune", "--config", "c.json", "--synthetic", "xor"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("c.json:3:"), "{}", stderr(&o));

    let o = mvcl(tmp.path(), &["finetune", "--synthetic", "xor", "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--set train.lr=-1"), "{}", stderr(&o));

    let o = mvcl(tmp.path(), &["finetune", "--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mvcl(tmp.path(), &["finetune", "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn pretrain_then_finetune_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    fs::write(dir.join("c.json"), "{ \"train\": { \"lr\": 0.002, \"lambda\": 0.5 } }").unwrap();

    let o = mvcl(dir, &with_fast(&["pretrain", "--data", "synth/source", "--out", "pre"]));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["resolved_config.json", "seeds.json", "steps.csv", "epochs.csv", "checkpoint.mvcl", "metrics.json"] {
        assert!(dir.join("pre").join(f).is_file(), "missing {f}");
    }

    let args = with_fast(&[
        "finetune",
        "--config",
        "c.json",
        "--data",
        "synth/target",
        "--checkpoint",
        "pre/checkpoint.mvcl",
        "--lambda",
        "0.25",
        "--views",
        "d,f",
        "--freeze-encoders",
        "--seed",
        "3",
        "--out",
        "ft",
    ]);
    let o = mvcl(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = json(&dir.join("ft/resolved_config.json"));
    let cfg = &resolved["config"]["train"];
    assert_eq!(cfg["lr"], 0.002, "file value kept");
    assert_eq!(cfg["lambda"], 0.25, "flag beats file");
    assert_eq!(cfg["model"]["views"], "d,f");
    assert_eq!(cfg["freeze_encoders"], true);
    assert_eq!(cfg["seed"], 3);
    assert!(resolved["config_file"].as_str().unwrap().ends_with("c.json"));
    let keys: Vec<&str> = resolved["overrides"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["key"].as_str().unwrap())
        .collect();
    assert!(keys.contains(&"train.lambda") && keys.contains(&"train.freeze_encoders"));
    assert_eq!(json(&dir.join("ft/seeds.json"))["seed"], 3);

    let metrics = json(&dir.join("ft/metrics.json"));
    let acc = metrics["test"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(!metrics["transfer"]["loaded"].as_array().unwrap().is_empty());

    let o = mvcl(
        dir,
        &with_fast(&["eval", "--data", "synth/target", "--checkpoint", "ft/checkpoint.mvcl", "--out", "ev"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&dir.join("ev/metrics.json"))["metrics"]["accuracy"].as_f64().unwrap(), acc);

    let o = mvcl(dir, &["eval", "--data", "synth/target"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn finetune_with_checkpoint_none_starts_from_scratch() {
    let tmp = tempfile::tempdir().unwrap();
    small_data(tmp.path());
    let o = mvcl(
        tmp.path(),
        &with_fast(&["finetune", "--data", "synth/target", "--checkpoint", "none", "--out", "ft"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(json(&tmp.path().join("ft/metrics.json"))["transfer"].is_null());
}

#[test]
fn ablate_over_view_subsets_emits_matching_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir);
    let args = with_fast(&[
        "ablate",
        "--data",
        "synth/target",
        "--all-subsets",
        "--seeds",
        "0",
        "--set",
        "train.finetune.max_epochs=1",
        "--out",
        "ab",
    ]);
    let o = mvcl(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = json(&dir.join("ab/results.json"));
    assert_eq!(results["aggregates"].as_array().unwrap().len(), 7);
    assert_eq!(fs::read_dir(dir.join("ab/runs")).unwrap().count(), 7);

    let csv = fs::read_to_string(dir.join("ab/results.csv")).unwrap();
    let md = fs::read_to_string(dir.join("ab/results.md")).unwrap();
    let mut means = 0;
    for line in csv.lines().skip(1) {
        let (views, rest) = line[1..].split_once('"').unwrap();
        let cells: Vec<&str> = rest[1..].split(',').collect();
        if cells[2] == "mean" {
            means += 1;
            let row = md.lines().find(|l| l.starts_with(&format!("| {{{views}}} |"))).unwrap();
            let acc: f64 = cells[3].parse().unwrap();
            assert!(row.contains(&format!("{acc:.4} ±")), "{row} vs {line}");
        }
    }
    assert_eq!(means, 7);
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mvcl(tmp.path(), &["gradcheck", "--seeds", "2", "--out", "gc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("ok") && l.contains("attention")));
    assert!(tmp.path().join("gc/gradcheck.json").is_file());

    let o = mvcl(tmp.path(), &["gradcheck", "--seeds", "1", "--inject-fault", "softmax"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("softmax"), "{}", stderr(&o));

    let o = mvcl(tmp.path(), &["gradcheck", "--inject-fault", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn convert_csv_and_extract_views() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (i, rows) in ["1,0\n2,1\n3,0\n4,1\n", "0,0\n1,1\n0,2\n1,3\n5,4\n"].iter().enumerate() {
        fs::write(dir.join(format!("s{i}.csv")), rows).unwrap();
    }
    fs::write(dir.join("manifest.csv"), "file,label,split\ns0.csv,0,train\ns1.csv,1,test\n").unwrap();
    let o = mvcl(dir, &["convert-csv", "--manifest", "manifest.csv", "--out", "ds"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = json(&dir.join("ds/meta.json"));
    assert_eq!(meta["channels"], 2);
    assert_eq!(meta["classes"], 2);

    let o = mvcl(
        dir,
        &["extract-views", "--data", "ds", "--samples", "1", "--set", "train.model.length=8", "--out", "v"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for view in ["temporal", "derivative", "frequency"] {
        let text = fs::read_to_string(dir.join("v").join(format!("{view}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample,step,c0,c1");
        assert_eq!(lines.len(), 9);
        assert!(lines[1..].iter().all(|l| l.starts_with("1,")));
    }
}

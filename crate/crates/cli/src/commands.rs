use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mvcl_core::dataio::csv_import::{convert_manifest, CsvOptions};
use mvcl_core::dataio::synthetic::SyntheticShiftSpec;
use mvcl_core::dataio::{generate_synthetic, load_dataset, save_dataset, TimeSeriesDataset};
use mvcl_core::model::{load_checkpoint, save_checkpoint, Model, ViewMask};
use mvcl_core::objectives::Stage;
use mvcl_core::training::{self, AblationGrid, AblationRow, TrainOutcome};
use mvcl_core::views::View;
use mvcl_core::{rng, verify, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve, Domain, ExperimentConfig, Override, Resolved};
use crate::fail::Failure;
use crate::{Cli, Command, DataArgs, Global, TrainArgs};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    let g = &cli.global;
    match &cli.command {
        Command::Pretrain(a) => pretrain(g, a),
        Command::Finetune(a) => {
            let mut extra = train_overrides(&a.train)?;
            if a.freeze_encoders {
                extra.push(Override::new("train.freeze_encoders", true));
            }
            finetune(g, extra)
        }
        Command::Eval(a) => {
            let mut extra = data_overrides(&a.data);
            if let Some(c) = &a.checkpoint {
                extra.push(Override::new("checkpoint", c.as_str()));
            }
            if let Some(s) = a.split {
                extra.push(Override::new("eval_split", s.name()));
            }
            eval(g, extra)
        }
        Command::Ablate(a) => {
            let mut extra = train_overrides(&a.train)?;
            if a.freeze_encoders {
                extra.push(Override::new("train.freeze_encoders", true));
            }
            if a.all_subsets {
                extra.push(Override::new("grid.views", json!(AblationGrid::view_subsets().views)));
            }
            if let Some(seeds) = &a.seeds {
                extra.push(Override::new("grid.seeds", json!(seeds)));
            }
            ablate(g, extra)
        }
        Command::Gradcheck(a) => {
            unconfigured(g, "gradcheck")?;
            gradcheck(g, a.seeds, &a.inject_fault)
        }
        Command::GenSynth(a) => gen_synth(g, a.preset.into(), a.spec.as_deref()),
        Command::ExtractViews(a) => extract_views(g, &a.data, a.samples.as_deref()),
        Command::ConvertCsv(a) => {
            unconfigured(g, "convert-csv")?;
            let opts = CsvOptions {
                time_column: a.time_column,
            };
            let ds = convert_manifest(&a.manifest, &opts, a.classes, a.freq_hz)?;
            let out = out_dir(g, "dataset")?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
    }
}

/// Commands that take no experiment config reject the flags that build one.
fn unconfigured(g: &Global, command: &str) -> Outcome {
    if g.config.is_some() || g.profile.is_some() || !g.set.is_empty() {
        return Err(Failure::validation(format!("{command} takes no --config, --profile or --set")));
    }
    Ok(())
}

fn data_overrides(d: &DataArgs) -> Vec<Override> {
    let mut v = Vec::new();
    if let Some(dir) = &d.data {
        v.push(Override::new("data.dir", dir.to_string_lossy().as_ref()));
        v.push(Override::new("data.synthetic", Value::Null));
    }
    if let Some(p) = d.synthetic {
        v.push(Override::new("data.dir", Value::Null));
        v.push(Override::new("data.synthetic", json!({ "preset": crate::config::Preset::from(p) })));
    }
    v
}

fn train_overrides(a: &TrainArgs) -> Result<Vec<Override>, Failure> {
    let mut v = data_overrides(&a.data);
    if let Some(views) = &a.views {
        let mask: ViewMask = views.parse().map_err(|e| Failure::validation(format!("--views {views}: {e}")))?;
        v.push(Override::new("train.model.views", mask.to_string()));
    }
    if let Some(l) = a.lambda {
        v.push(Override::new("train.lambda", l));
    }
    if let Some(c) = &a.checkpoint {
        v.push(Override::new("checkpoint", c.as_str()));
    }
    Ok(v)
}

/// Dedicated flags first, then `--set` in command-line order, so the
/// generic form has the last word.
fn resolve_with(g: &Global, stage: Option<Stage>, extra: Vec<Override>) -> Result<Resolved, Failure> {
    let mut overrides = Vec::new();
    if let Some(stage) = stage {
        overrides.push(Override::new("train.stage", json!(stage)));
    }
    if let Some(seed) = g.seed {
        overrides.push(Override::new("train.seed", seed));
    }
    overrides.extend(extra);
    for s in &g.set {
        overrides.push(Override::parse(s)?);
    }
    resolve(g.config.as_deref(), g.profile, overrides)
}

fn out_dir(g: &Global, default: &str) -> Result<PathBuf, Failure> {
    let dir = g.out.clone().unwrap_or_else(|| Path::new("runs").join(default));
    fs::create_dir_all(&dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    text.push('\n');
    write(path, text)
}

fn load_data(cfg: &ExperimentConfig, default: Domain) -> Result<TimeSeriesDataset, Failure> {
    match (&cfg.data.dir, &cfg.data.synthetic) {
        (Some(dir), _) => Ok(load_dataset(dir)?),
        (None, Some(syn)) => {
            let (source, target) = generate_synthetic(&syn.preset.spec(syn.seed))?;
            Ok(match syn.domain.unwrap_or(default) {
                Domain::Source => source,
                Domain::Target => target,
            })
        }
        (None, None) => Err(Failure::validation(
            "no dataset: pass --data DIR or --synthetic PRESET (data.dir / data.synthetic)",
        )),
    }
}

fn start(cfg: &ExperimentConfig) -> Result<Option<Model>, Failure> {
    cfg.checkpoint_path().map(|p| load_checkpoint(p).map_err(Failure::from)).transpose()
}

/// The config record and seed list every run directory starts with.
fn open_run(dir: &Path, resolved: &Resolved, grid_seeds: Option<&[u64]>) -> Outcome {
    write_json(&dir.join("resolved_config.json"), resolved)?;
    let cfg = &resolved.config;
    let seed = cfg.train.seed;
    let seeds = json!({
        "seed": seed,
        "init": rng::derive(seed, &[rng::tag::INIT]),
        "shuffle": rng::derive(seed, &[rng::tag::SHUFFLE]),
        "augment": rng::derive(seed, &[rng::tag::AUGMENT]),
        "data": cfg.data.synthetic.as_ref().map(|s| s.seed),
        "grid": grid_seeds,
    });
    write_json(&dir.join("seeds.json"), &seeds)
}

fn save_outcome(dir: &Path, outcome: &TrainOutcome) -> Outcome {
    write(&dir.join("steps.csv"), outcome.log.steps_csv())?;
    write(&dir.join("epochs.csv"), outcome.log.epochs_csv())?;
    save_checkpoint(&outcome.model, dir.join("checkpoint.mvcl"))?;
    let metrics = json!({
        "best_epoch": outcome.best_epoch,
        "best_loss": outcome.best_loss,
        "epochs": outcome.log.epochs.len(),
        "steps": outcome.log.steps.len(),
        "stopped_early": outcome.log.stopped_early,
        "test": outcome.test,
        "transfer": outcome.transfer,
    });
    write_json(&dir.join("metrics.json"), &metrics)
}

fn pretrain(g: &Global, a: &TrainArgs) -> Outcome {
    let resolved = resolve_with(g, Some(Stage::Pretrain), train_overrides(a)?)?;
    let cfg = &resolved.config;
    let dir = out_dir(g, "pretrain")?;
    open_run(&dir, &resolved, None)?;
    let source = load_data(cfg, Domain::Source)?;
    let mut mcfg = cfg.train.model.clone();
    mcfg.channels = source.channels();
    if let Some(c) = source.num_classes() {
        mcfg.classes = c;
    }
    let mut model = Model::new(mcfg, rng::derive(cfg.train.seed, &[rng::tag::INIT]))?;
    if let Some(init) = start(cfg)? {
        model.load_matching(&init);
    }
    let outcome = training::pretrain(model, &source, &cfg.train)?;
    save_outcome(&dir, &outcome)?;
    println!(
        "pretrain: {} epochs, best loss {:.6} at epoch {}; wrote {}",
        outcome.log.epochs.len(),
        outcome.best_loss,
        outcome.best_epoch,
        dir.display()
    );
    Ok(())
}

fn print_metrics(label: &str, m: &training::MetricsReport) {
    println!(
        "{label}: accuracy {:.4}  macro-P {:.4}  macro-R {:.4}  macro-F1 {:.4}",
        m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
    );
}

fn finetune(g: &Global, extra: Vec<Override>) -> Outcome {
    let resolved = resolve_with(g, Some(Stage::Finetune), extra)?;
    let cfg = &resolved.config;
    let dir = out_dir(g, "finetune")?;
    open_run(&dir, &resolved, None)?;
    let target = load_data(cfg, Domain::Target)?;
    let init = start(cfg)?;
    let outcome = training::finetune(init.as_ref(), &target, &cfg.train)?;
    save_outcome(&dir, &outcome)?;
    if let Some(t) = &outcome.transfer {
        println!("transfer: {} loaded, {} re-initialized", t.loaded.len(), t.reinitialized.len());
    }
    match &outcome.test {
        Some(m) => print_metrics("test", m),
        None => println!("test split empty; no metrics"),
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval(g: &Global, extra: Vec<Override>) -> Outcome {
    let resolved = resolve_with(g, None, extra)?;
    let cfg = &resolved.config;
    let model = start(cfg)?.ok_or_else(|| Failure::validation("eval needs --checkpoint PATH"))?;
    let dir = out_dir(g, "eval")?;
    open_run(&dir, &resolved, None)?;
    let data = load_data(cfg, Domain::Target)?;
    let m = training::evaluate(&model, &data, cfg.eval_split, &cfg.train)?;
    write_json(&dir.join("metrics.json"), &json!({ "split": cfg.eval_split, "metrics": m }))?;
    print_metrics(cfg.eval_split.name(), &m);
    Ok(())
}

fn run_label(row: &AblationRow) -> String {
    let s = &row.setting;
    format!(
        "{}_{}_l{}_s{}",
        s.views.to_string().replace(',', ""),
        if s.fusion { "fused" } else { "concat" },
        s.lambda,
        row.seed
    )
}

fn ablate(g: &Global, extra: Vec<Override>) -> Outcome {
    let resolved = resolve_with(g, Some(Stage::Finetune), extra)?;
    let cfg = &resolved.config;
    let dir = out_dir(g, "ablate")?;
    open_run(&dir, &resolved, Some(&cfg.grid.seeds))?;
    let target = load_data(cfg, Domain::Target)?;
    let init = start(cfg)?;
    let runs = dir.join("runs");
    let total = cfg.grid.settings().len() * cfg.grid.seeds.len();
    let mut done = 0;
    let mut progress = |row: &AblationRow, outcome: &TrainOutcome| -> mvcl_core::Result<()> {
        done += 1;
        let run_dir = runs.join(run_label(row));
        fs::create_dir_all(&run_dir)?;
        save_outcome(&run_dir, outcome).map_err(|f| mvcl_core::Error::Io(std::io::Error::other(f.message)))?;
        println!(
            "[{done}/{total}] views {{{}}} fusion {} λ {} seed {}: accuracy {:.4} macro-F1 {:.4}",
            row.setting.views, row.setting.fusion, row.setting.lambda, row.seed, row.metrics.accuracy, row.metrics.macro_f1
        );
        let _ = std::io::stdout().flush();
        Ok(())
    };
    let results = training::run_ablation_grid(&cfg.train, &cfg.grid, &target, init.as_ref(), &mut progress)?;
    write(&dir.join("results.csv"), results.to_csv())?;
    write(&dir.join("results.md"), results.to_markdown())?;
    write_json(&dir.join("results.json"), &results)?;
    print!("{}", results.to_markdown());
    Ok(())
}

fn gradcheck(g: &Global, seeds: u64, faults: &[String]) -> Outcome {
    let known = verify::op_names();
    for f in faults {
        if f != "model_loss" && !known.contains(&f.as_str()) {
            return Err(Failure::validation(format!(
                "--inject-fault {f}: unknown op (expected one of {}, model_loss)",
                known.join(", ")
            )));
        }
    }
    if seeds == 0 {
        return Err(Failure::validation("--seeds must be at least 1"));
    }
    let faults: Vec<&str> = faults.iter().map(String::as_str).collect();
    let report = verify::full_battery(seeds, &faults)?;
    for case in &report.cases {
        println!("{case}");
    }
    if let Some(out) = &g.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        println!("all {} checks passed", report.cases.len());
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
        Err(Failure::runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn gen_synth(g: &Global, preset: crate::config::Preset, spec_file: Option<&Path>) -> Outcome {
    let seed = g.seed.unwrap_or(0);
    let spec = match spec_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))?;
            let mut spec: SyntheticShiftSpec = serde_json::from_str(&text)
                .map_err(|e| Failure::validation(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column())))?;
            if g.seed.is_some() {
                spec.seed = seed;
            }
            spec
        }
        None => preset.spec(seed),
    };
    if g.config.is_some() || g.profile.is_some() {
        return Err(Failure::validation(
            "gen-synth takes --spec or --preset; --set keys are generator spec fields, e.g. source.train=512",
        ));
    }
    let overrides = g.set.iter().map(|s| Override::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let spec = if overrides.is_empty() {
        spec
    } else {
        let mut tree = serde_json::to_value(&spec).map_err(|e| Failure::validation(e.to_string()))?;
        crate::config::apply_overrides(&mut tree, &overrides)?;
        serde_json::from_value(tree).map_err(|e| Failure::validation(format!("--set: {e}")))?
    };
    let (source, target) = generate_synthetic(&spec)?;
    let dir = out_dir(g, "synthetic")?;
    save_dataset(&source, dir.join("source"))?;
    save_dataset(&target, dir.join("target"))?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        dir.display()
    );
    Ok(())
}

fn csv_rows(out: &mut String, sample: usize, view: &Tensor<f64>) {
    let d = view.shape()[1];
    for (step, row) in view.data().chunks(d).enumerate() {
        out.push_str(&format!("{sample},{step}"));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
}

fn extract_views(g: &Global, data: &DataArgs, samples: Option<&[usize]>) -> Outcome {
    let resolved = resolve_with(g, None, data_overrides(data))?;
    let mut train = resolved.config.train.clone();
    let ds = load_data(&resolved.config, Domain::Target)?;
    train.model.channels = ds.channels();
    let prepared = training::prepare(&ds, &train)?;
    let picked: Vec<usize> = match samples {
        Some(s) => s.to_vec(),
        None => (0..prepared.len()).collect(),
    };
    if let Some(&bad) = picked.iter().find(|&&i| i >= prepared.len()) {
        return Err(Failure::validation(format!(
            "--samples: index {bad} out of range for {} samples",
            prepared.len()
        )));
    }
    let dir = out_dir(g, "views")?;
    let header: String = std::iter::once("sample,step".to_string())
        .chain((0..ds.channels()).map(|c| format!("c{c}")))
        .collect::<Vec<_>>()
        .join(",");
    for view in View::ALL {
        let mut text = format!("{header}\n");
        for &i in &picked {
            let vs = prepared.views(i);
            let t = match view {
                View::Temporal => &vs.temporal,
                View::Derivative => &vs.derivative,
                View::Frequency => &vs.frequency,
            };
            csv_rows(&mut text, i, t);
        }
        write(&dir.join(format!("{}.csv", view.name())), text)?;
    }
    println!("wrote views of {} samples to {}", picked.len(), dir.display());
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use looc_core::curriculum::{run_curriculum, RunOptions};
use looc_core::dataset::{read_counts_only, read_dataset, write_dataset, write_map_png, write_png, DatasetSplit};
use looc_core::eval::{write_metrics_csv, MetricsRow};
use looc_core::experiment::{
    self, evaluate, find_runs, generate_splits, load_outcome, run_dir, save_outcome, train_count_supervised,
    train_from_dir, train_point_supervised, write_audit_csv, ExperimentConfig, Method, TrainedModel,
};
use looc_core::{ExecMode, LoocError, Result};

use crate::Common;

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn mode(common: &Common) -> ExecMode {
    if common.deterministic {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LoocError::io(dir, e))
}

fn write_config_echo(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = out.join("config.toml");
    fs::write(&path, config.to_toml_string()?).map_err(|e| LoocError::io(&path, e))
}

pub fn gen_data(common: &Common, seed: u64) -> Result<()> {
    let config = load_config(common)?;
    let (train, test) = generate_splits(&config, seed, mode(common))?;
    create_dir(&common.out)?;
    for split in [&train, &test] {
        let dir = common.out.join(split.split_name.as_str());
        let manifest = write_dataset(split, &dir)?;
        println!("{}", manifest.display());
    }
    write_config_echo(&config, &common.out)
}

/// The split on disk under `data/<name>`, or one generated from the config.
fn load_split(config: &ExperimentConfig, data: Option<&Path>, seed: u64, name: &str, mode: ExecMode) -> Result<DatasetSplit> {
    match data {
        Some(dir) => read_dataset(&dir.join(name)),
        None => {
            let (train, test) = generate_splits(config, seed, mode)?;
            Ok(if name == "train" { train } else { test })
        }
    }
}

pub fn train(
    common: &Common,
    seed: u64,
    method: &str,
    data: Option<&Path>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<()> {
    let method: Method = method.parse()?;
    let config = load_config(common)?;
    let mode = mode(common);
    let dir = run_dir(&common.out, method, seed);
    create_dir(&dir)?;
    let options = RunOptions {
        state_dir: Some(dir.join("curriculum")),
        resume,
        stop_after,
    };
    if stop_after.is_some() {
        let variant = method
            .curriculum()
            .ok_or_else(|| LoocError::Config("--stop-after applies to looc and topk only".into()))?;
        let counts = match data {
            Some(d) => read_counts_only(&d.join("train"))?,
            None => generate_splits(&config, seed, mode)?.0.counts_only(),
        };
        let out = run_curriculum(
            variant,
            &counts,
            &config.proposals,
            &config.localizer.localizer(),
            &config.curriculum,
            seed,
            mode,
            &options,
        )?;
        println!("stopped after {} rounds", out.state.round);
        return Ok(());
    }
    let outcome = match data {
        Some(d) => train_from_dir(method, &config, &d.join("train"), seed, mode, &options)?,
        None => {
            let (train, _) = generate_splits(&config, seed, mode)?;
            if method.is_count_supervised() {
                train_count_supervised(method, &config, &train.counts_only(), seed, mode, &options)?
            } else {
                train_point_supervised(&config, &train, seed, mode)?
            }
        }
    };
    save_outcome(&dir, &outcome, &config)?;
    write_config_echo(&config, &common.out)?;
    println!("{}", dir.display());
    Ok(())
}

fn selected_runs(out: &Path, seed: Option<u64>, method: Option<&str>) -> Result<Vec<(Method, u64, PathBuf)>> {
    let method = method.map(str::parse::<Method>).transpose()?;
    let runs: Vec<_> = find_runs(out)?
        .into_iter()
        .filter(|(m, s, _)| method.map_or(true, |x| x == *m) && seed.map_or(true, |x| x == *s))
        .collect();
    if runs.is_empty() {
        return Err(LoocError::Config(format!("no trained runs under {}", out.display())));
    }
    Ok(runs)
}

pub fn eval(common: &Common, data: Option<&Path>, seed: Option<u64>, method: Option<&str>) -> Result<()> {
    let config = load_config(common)?;
    let mode = mode(common);
    let runs = selected_runs(&common.out, seed, method)?;
    let mut rows = Vec::new();
    for (method, seed, dir) in runs {
        let outcome = load_outcome(&dir)?;
        let test = load_split(&config, data, seed, "test", mode)?;
        let result = evaluate(&outcome, &config, &test, mode)?;
        rows.push(MetricsRow::from(&result));
        if let TrainedModel::Localizer(model) = &outcome.model {
            let previews = common.out.join("previews").join(format!("{}_seed{seed}", method.as_str()));
            create_dir(&previews)?;
            for scene in test.scenes.iter().take(config.eval.previews) {
                let cpm = model.forward(&scene.image)?;
                write_map_png(&cpm.probs, &previews.join(format!("{}_cpm.png", scene.scene_id)))?;
                write_png(&scene.image, &previews.join(format!("{}_image.png", scene.scene_id)))?;
            }
        }
    }
    let path = common.out.join("metrics.csv");
    write_metrics_csv(&path, &rows)?;
    println!("{}", path.display());
    Ok(())
}

pub fn audit(common: &Common, data: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    let mode = mode(common);
    let mut rows = Vec::new();
    for (method, seed, dir) in selected_runs(&common.out, None, None)? {
        let outcome = load_outcome(&dir)?;
        if outcome.pseudolabels.is_empty() {
            continue;
        }
        let train = load_split(&config, data, seed, "train", mode)?;
        rows.push(experiment::audit(&outcome.pseudolabels, &train, method, seed)?);
    }
    let path = common.out.join("audit.csv");
    write_audit_csv(&path, &rows)?;
    println!("{}", path.display());
    Ok(())
}

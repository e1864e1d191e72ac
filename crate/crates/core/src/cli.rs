//! Operator pipeline: `generate` the reference dataset, `train` models
//! against it, `evaluate` checkpoints, and `report` the comparison table
//! with ordering verdicts.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::FsiDataset;
use crate::eval::{emit_profiles, evaluate_model, field_statistics, statistics_csv, EvalResult};
use crate::pinn::{train, Checkpoint, ModelConfig, TrainError};
use crate::sampling::build_training_set;
use crate::solver::run_simulation_with;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("output `{0}` exists; pass --force to overwrite")]
    WouldOverwrite(PathBuf),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 2 config error, 3 numerical failure, 4 missing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::WouldOverwrite(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
            CliError::MissingInput(_) => 4,
        }
    }
}

const USAGE: &str = "\
fsilab <command> [--config FILE] [--force] [--KEY VALUE]...

Commands:
  generate   run the reference solver and write the dataset
  train      train the selected models against the dataset
  evaluate   write relative-L2 metrics CSVs for every checkpoint
  report     combined comparison table plus ordering verdicts

Any configuration key can be overridden on the command line, e.g.
  fsilab generate --grid 32 --t-end 1.0 --output-dir out37
";

pub fn usage() -> &'static str {
    USAGE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Evaluate,
    Report,
}

/// Parse the command line into a command and a resolved configuration
/// (config file first, then overrides, in order).
pub fn parse_args(args: &[String]) -> Result<(Command, RunConfig), CliError> {
    let mut it = args.iter().peekable();
    let cmd = match it.next().map(String::as_str) {
        Some("generate") => Command::Generate,
        Some("train") => Command::Train,
        Some("evaluate") => Command::Evaluate,
        Some("report") => Command::Report,
        Some("-h") | Some("--help") | None => return Err(CliError::Usage(USAGE.into())),
        Some(other) => return Err(CliError::Usage(format!("unknown command `{other}`\n\n{USAGE}"))),
    };

    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut config_path: Option<PathBuf> = None;
    let mut force = false;
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument `{arg}`\n\n{USAGE}")));
        };
        let key = flag.replace('-', "_");
        match key.as_str() {
            "help" => return Err(CliError::Usage(USAGE.into())),
            "force" => force = true,
            "config" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
                config_path = Some(PathBuf::from(v));
            }
            _ => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("--{flag} needs a value")))?;
                overrides.push((key, v.clone()));
            }
        }
    }

    let mut config = RunConfig::default();
    if let Some(path) = config_path {
        config.load_file(&path)?;
    }
    for (k, v) in overrides {
        config.set(&k, &v)?;
    }
    if force {
        config.force = true;
    }
    Ok((cmd, config))
}

pub fn run(cmd: Command, config: &RunConfig) -> Result<(), CliError> {
    match cmd {
        Command::Generate => cmd_generate(config),
        Command::Train => cmd_train(config),
        Command::Evaluate => cmd_evaluate(config),
        Command::Report => cmd_report(config),
    }
}

fn write_snapshot(config: &RunConfig, cmd: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.output_dir)?;
    let path = config.output_dir.join(format!("resolved_config_{cmd}.txt"));
    std::fs::write(path, config.resolved())?;
    Ok(())
}

fn guard_overwrite(config: &RunConfig, path: &Path) -> Result<(), CliError> {
    if path.exists() && !config.force {
        return Err(CliError::WouldOverwrite(path.to_path_buf()));
    }
    Ok(())
}

pub fn cmd_generate(config: &RunConfig) -> Result<(), CliError> {
    write_snapshot(config, "generate")?;
    let path = config.dataset_path();
    let probe = if config.dataset_format == "csv" {
        PathBuf::from(format!("{}.eulerian.csv", path.display()))
    } else {
        path.clone()
    };
    guard_overwrite(config, &probe)?;

    let solver_config = config.solver_config();
    println!(
        "generating: grid {}x{}, dt {}, t_end {}, Re {}, disc {}",
        solver_config.grid_n,
        solver_config.grid_n,
        solver_config.dt,
        solver_config.t_end,
        solver_config.re,
        solver_config.disc.is_some()
    );
    let result = run_simulation_with(&solver_config, config.near_wall_policy());
    let (dataset, failure) = match result {
        Ok(ds) => (ds, None),
        Err(abort) => {
            let msg = abort.error.to_string();
            (abort.partial, Some(msg))
        }
    };
    if config.dataset_format == "csv" {
        dataset.write_csv(&path)?;
    } else {
        dataset.write_binary(&path)?;
    }
    let stats = field_statistics(&dataset);
    let (summary, hist) = statistics_csv(&stats);
    std::fs::write(config.output_dir.join("dataset_statistics.csv"), summary)?;
    std::fs::write(config.output_dir.join("dataset_histograms.csv"), hist)?;
    println!(
        "dataset: {} slices, {} eulerian records, {} marker records -> {}",
        dataset.n_times(),
        dataset.n_eulerian_records(),
        dataset.n_marker_records(),
        path.display()
    );
    match failure {
        Some(msg) => Err(CliError::Numerical(format!("partial dataset written; {msg}"))),
        None => Ok(()),
    }
}

fn load_dataset(config: &RunConfig) -> Result<FsiDataset, CliError> {
    let path = config.dataset_path();
    let probe = if config.dataset_format == "csv" {
        PathBuf::from(format!("{}.eulerian.csv", path.display()))
    } else {
        path.clone()
    };
    if !probe.exists() {
        return Err(CliError::MissingInput(format!(
            "dataset not found at {}; run `fsilab generate` first or pass --dataset",
            probe.display()
        )));
    }
    FsiDataset::read(&path).map_err(CliError::Io)
}

fn checkpoint_stem(model: &str, seed: u64) -> String {
    format!("{model}-s{seed}")
}

pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    write_snapshot(config, "train")?;
    let dataset = load_dataset(config)?;
    if config.models.is_empty() || config.seeds.is_empty() {
        return Err(CliError::Usage("train needs at least one model and one seed".into()));
    }

    for &seed in &config.seeds {
        let set = build_training_set(&dataset, &config.sampling_config(seed))
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        set.write_manifest(&config.output_dir.join(format!("training_set_s{seed}.txt")))?;

        for model in &config.models {
            let mut mc = ModelConfig::preset(model, seed, config.desk_scale)
                .ok_or_else(|| CliError::Usage(format!("unknown model `{model}` (expected M1..M4)")))?;
            if let Some(iters) = config.iterations {
                mc.iterations = iters;
            }
            mc.lr0 = config.lr0;
            mc.batch_size = config.batch_size;

            let stem = checkpoint_stem(model, seed);
            let ckpt_path = config.output_dir.join(format!("{stem}.ckpt"));
            guard_overwrite(config, &ckpt_path)?;

            println!(
                "training {model} seed {seed}: widths {:?}, {} iterations",
                mc.widths, mc.iterations
            );
            let report = match train(&mc, &set, &dataset, true) {
                Ok(r) => r,
                Err(TrainError::NonFiniteLoss { at_iter, report }) => {
                    std::fs::write(config.output_dir.join(format!("{stem}_train.csv")), report.log_csv())?;
                    return Err(CliError::Numerical(format!(
                        "{model} seed {seed}: non-finite loss at iteration {at_iter} (log written)"
                    )));
                }
                Err(e) => return Err(CliError::Numerical(format!("{model} seed {seed}: {e}"))),
            };

            let ckpt = Checkpoint {
                model_id: mc.model_id.clone(),
                architecture: mc.architecture,
                seed,
                params: report.params.clone(),
            };
            ckpt.write(&ckpt_path)?;
            std::fs::write(config.output_dir.join(format!("{stem}_train.csv")), report.log_csv())?;
            let mut info = format!(
                "model = {}\nseed = {}\nparameters = {}\nparameter_formula = {}\ninitial_loss = {}\nfinal_loss = {}\nwall_clock_secs = {:.1}\n",
                mc.model_id,
                seed,
                report.param_count,
                report.param_count_formula,
                report.initial_loss,
                report.final_loss,
                report.wall_clock_secs
            );
            if let Some(eval) = &report.eval {
                std::fs::write(
                    config.output_dir.join(format!("{stem}_all_all_metrics.csv")),
                    eval.metrics_csv(),
                )?;
                for c in &eval.cells {
                    info.push_str(&format!("rel_l2_{}_{} = {}\n", c.domain, c.field, c.rel_l2_percent));
                }
            }
            std::fs::write(config.output_dir.join(format!("{stem}_summary.txt")), info)?;
            println!(
                "  done in {:.1}s: loss {} -> {}",
                report.wall_clock_secs, report.initial_loss, report.final_loss
            );
        }
    }
    Ok(())
}

fn find_checkpoints(config: &RunConfig) -> Result<Vec<(String, u64, PathBuf)>, CliError> {
    let mut found = Vec::new();
    let dir = std::fs::read_dir(&config.output_dir).map_err(|_| {
        CliError::MissingInput(format!("output dir {} does not exist", config.output_dir.display()))
    })?;
    for entry in dir {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(stem) = name.strip_suffix(".ckpt") {
            if let Some((model, seed)) = stem.rsplit_once("-s") {
                if let Ok(seed) = seed.parse() {
                    found.push((model.to_string(), seed, path));
                }
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no checkpoints (*.ckpt) in {}",
            config.output_dir.display()
        )));
    }
    Ok(found)
}

fn default_profile_times(ds: &FsiDataset) -> Vec<f64> {
    let nt = ds.n_times();
    vec![ds.times[nt / 2], ds.times[nt - 1]]
}

fn default_profile_lines(ds: &FsiDataset) -> Vec<f64> {
    let n = ds.n;
    vec![ds.cell_y(n / 4), ds.cell_y(n / 2), ds.cell_y(n - n / 10 - 1)]
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<(), CliError> {
    write_snapshot(config, "evaluate")?;
    let dataset = load_dataset(config)?;
    let checkpoints = find_checkpoints(config)?;
    let times = if config.profile_times.is_empty() {
        default_profile_times(&dataset)
    } else {
        config.profile_times.clone()
    };
    let lines = if config.profile_lines.is_empty() {
        default_profile_lines(&dataset)
    } else {
        config.profile_lines.clone()
    };

    for (model, seed, path) in &checkpoints {
        let ckpt = Checkpoint::read(path)?;
        let result = evaluate_model(&ckpt, &dataset);
        let stem = checkpoint_stem(model, *seed);
        std::fs::write(
            config.output_dir.join(format!("{stem}_all_all_metrics.csv")),
            result.metrics_csv(),
        )?;
        // Profile/contour CSVs carry the per-seed stem as the model label.
        let mut labelled = ckpt.clone();
        labelled.model_id = stem.clone();
        emit_profiles(&labelled, &dataset, &times, &lines, &config.output_dir)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        for c in &result.cells {
            println!("{stem} {} {} rel_l2 = {:.3}%", c.domain, c.field, c.rel_l2_percent);
        }
    }
    Ok(())
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Final total loss from a written training log.
fn final_loss_from_log(path: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(path).ok()?;
    let last = text.lines().filter(|l| !l.is_empty()).next_back()?;
    last.split(',').nth(2)?.parse().ok()
}

pub fn cmd_report(config: &RunConfig) -> Result<(), CliError> {
    write_snapshot(config, "report")?;
    let dataset = load_dataset(config)?;
    let checkpoints = find_checkpoints(config)?;

    // Evaluate everything, grouped by model.
    let mut by_model: Vec<(String, Vec<(u64, EvalResult)>)> = Vec::new();
    for (model, seed, path) in &checkpoints {
        let ckpt = Checkpoint::read(path)?;
        let result = evaluate_model(&ckpt, &dataset);
        match by_model.iter_mut().find(|(m, _)| m == model) {
            Some((_, v)) => v.push((*seed, result)),
            None => by_model.push((model.clone(), vec![(*seed, result)])),
        }
    }

    // One row per (model, domain, field): median across seeds.
    let mut table = String::from("model,domain,field,rel_l2_percent\n");
    let cell_median = |model: &str, domain: &str, field: &str| -> Option<f64> {
        let (_, seeds) = by_model.iter().find(|(m, _)| m == model)?;
        let vals: Vec<f64> = seeds.iter().filter_map(|(_, r)| r.cell(domain, field)).collect();
        (!vals.is_empty()).then(|| median(vals))
    };
    for (model, _) in &by_model {
        for domain in ["fluid", "interface"] {
            for field in ["u", "v", "p"] {
                if let Some(v) = cell_median(model, domain, field) {
                    table.push_str(&format!("{model},{domain},{field},{v}\n"));
                }
            }
        }
    }
    std::fs::write(config.output_dir.join("report.csv"), &table)?;

    // Ordering verdicts.
    let interface_velocity = |model: &str| -> Option<f64> {
        Some(0.5 * (cell_median(model, "interface", "u")? + cell_median(model, "interface", "v")?))
    };
    let mut verdicts = String::new();
    let mut pairs_checked = 0;
    let mut pairs_passed = 0;
    for (single, el) in [("M1", "M3"), ("M2", "M4")] {
        if let (Some(s), Some(e)) = (interface_velocity(single), interface_velocity(el)) {
            pairs_checked += 1;
            if e < s {
                pairs_passed += 1;
            }
            verdicts.push_str(&format!(
                "# interface velocity rel_l2: {el} = {e:.3}% vs {single} = {s:.3}%\n"
            ));
        }
    }
    verdicts.push_str(&format!(
        "EL<Single: {}\n",
        if pairs_checked > 0 && pairs_passed == pairs_checked { "pass" } else { "fail" }
    ));

    let final_loss_median = |model: &str| -> Option<f64> {
        let (_, seeds) = by_model.iter().find(|(m, _)| m == model)?;
        let vals: Vec<f64> = seeds
            .iter()
            .filter_map(|(seed, _)| {
                final_loss_from_log(
                    &config.output_dir.join(format!("{}_train.csv", checkpoint_stem(model, *seed))),
                )
            })
            .collect();
        (!vals.is_empty()).then(|| median(vals))
    };
    let mut loss_checked = 0;
    let mut loss_passed = 0;
    for (tanh, bspline) in [("M1", "M2"), ("M3", "M4")] {
        if let (Some(t), Some(b)) = (final_loss_median(tanh), final_loss_median(bspline)) {
            loss_checked += 1;
            if b < t {
                loss_passed += 1;
            }
            verdicts.push_str(&format!("# final loss: {bspline} = {b:.6} vs {tanh} = {t:.6}\n"));
        }
    }
    verdicts.push_str(&format!(
        "BSpline<Tanh: {}\n",
        if loss_checked > 0 && loss_passed == loss_checked { "pass" } else { "fail" }
    ));

    std::fs::write(config.output_dir.join("report_verdicts.txt"), &verdicts)?;
    print!("{table}");
    print!("{verdicts}");
    std::io::stdout().flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn args_parse_commands_and_overrides() {
        let (cmd, cfg) = parse_args(&[
            "generate".into(),
            "--grid".into(),
            "32".into(),
            "--t-end".into(),
            "1.0".into(),
        ])
        .unwrap();
        assert_eq!(cmd, Command::Generate);
        assert_eq!(cfg.grid, 32);
        assert_eq!(cfg.t_end, 1.0);

        let (cmd, cfg) = parse_args(&[
            "train".into(),
            "--models".into(),
            "M1,M4".into(),
            "--seeds".into(),
            "0,1,2".into(),
            "--force".into(),
        ])
        .unwrap();
        assert_eq!(cmd, Command::Train);
        assert_eq!(cfg.models, vec!["M1", "M4"]);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert!(cfg.force);
    }

    #[test]
    fn args_reject_unknown() {
        assert!(matches!(parse_args(&["destroy".into()]), Err(CliError::Usage(_))));
        let err = parse_args(&["generate".into(), "--no-such-key".into(), "1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(ConfigError::UnknownKey(_))));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::MissingInput("x".into()).exit_code(), 4);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 3);
        assert_eq!(CliError::WouldOverwrite("x".into()).exit_code(), 2);
    }

    #[test]
    fn median_is_middle_seed() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![5.0]), 5.0);
    }
}

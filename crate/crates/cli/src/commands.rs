use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1};
use nubot_core::dataset::{load_csv, split, LoadOptions, SplitSpec, WeightedPointCloud};
use nubot_core::metrics::{
    cluster_weight_means, cluster_weight_sums, mass_fraction_correlation, weighted_mmd, write_report_csv, MetricRow,
};
use nubot_core::oracle::run_suite;
use nubot_core::predictor::{push_backward, push_forward, write_prediction_csv};
use nubot_core::synthgen::{generate, ScenarioSpec};
use nubot_core::trainer::{train_model, NubotModel};

use crate::config::{
    output_dir, write_resolved, Columns, Direction, EvalRun, OracleRun, PredictRun, SynthRun, TrainRun,
};
use crate::CliError;

fn prepare(out: &Path, command: &str) -> Result<PathBuf, CliError> {
    let dir = output_dir(out, command)?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn header(path: &Path) -> Result<Vec<String>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let mut line = String::new();
    BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(line.trim_end().split(',').map(|h| h.trim().to_string()).collect())
}

/// Loads a cloud, picking up `weight` and `label` columns when present
/// unless the run names other columns.
fn load(path: &Path, columns: &Columns) -> Result<WeightedPointCloud, CliError> {
    let cols = header(path)?;
    let pick = |explicit: &Option<String>, name: &str| {
        explicit.clone().or_else(|| cols.iter().any(|c| c == name).then(|| name.to_string()))
    };
    let opts = LoadOptions {
        weight_column: pick(&columns.weight, "weight"),
        label_column: pick(&columns.label, "label"),
        normalize: false,
    };
    Ok(load_csv(path, &opts)?)
}

pub fn synth(run: SynthRun) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&run.holdout) {
        return Err(CliError::Usage(format!("holdout must lie in [0, 1), got {}", run.holdout)));
    }
    if !(run.scale > 0.0) {
        return Err(CliError::Usage(format!("scale must be positive, got {}", run.scale)));
    }
    let dir = prepare(&run.out, "synth")?;
    let spec = ScenarioSpec::new(run.scenario, run.seed).with_n(run.n).scaled(run.scale);
    let (source, target) = generate(&spec)?;
    for (name, cloud) in [("source", source), ("target", target)] {
        if run.holdout > 0.0 {
            let spec = SplitSpec {
                train_fraction: 1.0 - run.holdout,
                seed: run.seed,
            };
            let (train, test) = split(&cloud, spec)?;
            train.write_csv(&dir.join(format!("{name}.csv")))?;
            test.write_csv(&dir.join(format!("{name}_test.csv")))?;
        } else {
            cloud.write_csv(&dir.join(format!("{name}.csv")))?;
        }
    }
    write_resolved(&dir, &run)?;
    println!("wrote scenario {} to {}", run.scenario, dir.display());
    Ok(())
}

pub fn train(mut run: TrainRun) -> Result<(), CliError> {
    let dir = prepare(&run.out, "train")?;
    let source = load(&run.source, &run.columns)?;
    let target = load(&run.target, &run.columns)?;
    if source.dim() != target.dim() {
        return Err(CliError::Usage(format!(
            "source has {} features, target has {}",
            source.dim(),
            target.dim()
        )));
    }
    let mut model = match &run.resume {
        Some(path) => {
            let mut m = NubotModel::load(path)?;
            m.config.steps = run.train.steps;
            run.train = m.config.clone();
            m
        }
        None => NubotModel::new(source.dim(), run.train.clone())?,
    };
    let diag_path = dir.join("diagnostics.ndjson");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(run.resume.is_some())
        .truncate(run.resume.is_none())
        .open(&diag_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", diag_path.display())))?;
    let mut diag_out = BufWriter::new(file);
    let every = run.checkpoint_every;
    let mut unconverged = 0u64;
    let result = train_model(&mut model, &source, &target, |d, m| {
        d.write_ndjson(&mut diag_out)?;
        if !(d.gamma1_converged && d.gamma2_converged) {
            unconverged += 1;
        }
        if every > 0 && d.step % every == 0 {
            m.save(&dir.join(format!("checkpoint_{}.json", d.step)))?;
        }
        Ok(())
    });
    diag_out
        .flush()
        .map_err(|e| CliError::Io(format!("{}: {e}", diag_path.display())))?;
    result?;
    model.save(&dir.join("model.json"))?;
    write_resolved(&dir, &run)?;
    if unconverged > 0 {
        eprintln!("note: {unconverged} steps hit the Sinkhorn iteration limit");
    }
    println!("trained {} steps; model in {}", model.step, dir.display());
    Ok(())
}

pub fn predict(run: PredictRun) -> Result<(), CliError> {
    let dir = prepare(&run.out, "predict")?;
    let model = NubotModel::load(&run.model)?;
    let input = load(&run.input, &run.columns)?;
    let prediction = match run.direction {
        Direction::Forward => push_forward(&model, input.points(), input.masses())?,
        Direction::Backward => push_backward(&model, input.points(), input.masses())?,
    };
    write_prediction_csv(&dir.join("prediction.csv"), input.points(), input.masses(), &prediction)?;
    write_resolved(&dir, &run)?;
    println!("mapped {} points; prediction in {}", input.len(), dir.display());
    Ok(())
}

/// Class ids in ascending order.
fn classes(labels: &[i64]) -> Vec<i64> {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// `(means, correlation of summed weights with target fractions)`.
fn class_summary(
    weights: &Array1<f64>,
    labels: Option<&[i64]>,
    target_labels: Option<&[i64]>,
) -> Result<(Vec<f64>, Option<f64>), CliError> {
    let Some(labels) = labels else {
        return Ok((Vec::new(), None));
    };
    let ids = classes(labels);
    let means = cluster_weight_means(weights.view(), labels, &ids)?;
    let corr = match target_labels {
        Some(t) if ids.len() >= 2 => {
            let sums = cluster_weight_sums(weights.view(), labels, &ids)?;
            let fractions: Vec<f64> = ids
                .iter()
                .map(|c| t.iter().filter(|l| *l == c).count() as f64 / t.len() as f64)
                .collect();
            mass_fraction_correlation(&sums, &fractions).ok()
        }
        _ => None,
    };
    Ok((means, corr))
}

pub fn eval(run: EvalRun) -> Result<(), CliError> {
    let dir = prepare(&run.out, "eval")?;
    // Prediction columns: inputs, mapped, mass_in, mass_out.
    let pred = load_csv(
        &run.prediction,
        &LoadOptions {
            weight_column: Some("mass_out".into()),
            ..Default::default()
        },
    )?;
    let width = pred.dim();
    if width % 2 != 1 {
        return Err(CliError::Usage(format!("{} is not a prediction file", run.prediction.display())));
    }
    let d = width / 2;
    let mapped = pred.points().slice(s![.., d..2 * d]).to_owned();
    let masses = pred.masses().to_owned();

    let control = load(&run.control, &run.columns)?;
    let target = load(&run.target, &run.columns)?;
    if control.len() != pred.len() {
        return Err(CliError::Usage(format!(
            "control has {} points but the prediction has {}",
            control.len(),
            pred.len()
        )));
    }
    if control.dim() != d || target.dim() != d {
        return Err(CliError::Usage("feature dimensions of prediction, control and target differ".into()));
    }
    let (observed, reference) = split(
        &target,
        SplitSpec {
            train_fraction: 0.5,
            seed: run.seed,
        },
    )?;
    let k = &run.kernel;
    let tl = target.labels();

    let (means, corr) = class_summary(&masses, control.labels(), tl)?;
    let ones = Array1::ones(control.len());
    let (id_means, id_corr) = class_summary(&ones, control.labels(), tl)?;
    let rows = vec![
        MetricRow {
            scenario: run.scenario.clone(),
            method: run.method.clone(),
            mmd: weighted_mmd(mapped.view(), masses.view(), reference.points(), k)?,
            cluster_means: means,
            correlation: corr,
        },
        MetricRow {
            scenario: run.scenario.clone(),
            method: "identity".into(),
            mmd: weighted_mmd(control.points(), ones.view(), reference.points(), k)?,
            cluster_means: id_means,
            correlation: id_corr,
        },
        MetricRow {
            scenario: run.scenario.clone(),
            method: "observed".into(),
            mmd: weighted_mmd(
                observed.points(),
                Array1::ones(observed.len()).view(),
                reference.points(),
                k,
            )?,
            cluster_means: Vec::new(),
            correlation: None,
        },
    ];
    for r in &rows {
        println!("{:<10} mmd {:.6e}", r.method, r.mmd);
    }
    write_report_csv(&dir.join("metrics.csv"), &rows)?;
    write_resolved(&dir, &run)?;
    Ok(())
}

pub fn oracle(run: OracleRun) -> Result<(), CliError> {
    let dir = prepare(&run.out, "oracle")?;
    let checks = run_suite(run.seed)?;
    let path = dir.join("oracle.csv");
    let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?);
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    writeln!(w, "check,value,threshold,pass").map_err(io)?;
    for c in &checks {
        println!("{} {:<28} {:.3e} (limit {:.0e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
        writeln!(w, "{},{:?},{:?},{}", c.name, c.value, c.threshold, c.pass).map_err(io)?;
    }
    w.flush().map_err(io)?;
    write_resolved(&dir, &run)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}

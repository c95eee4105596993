use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use podnet_core::data::{generate_dataset, load_dataset, save_dataset};
use podnet_core::evaluation::{dynamics_option_sensitivity, segment as segment_dataset};
use podnet_core::planner::{execute, plan as plan_path};
use podnet_core::training::{discover_num_options, downsample_dataset, train_with_progress};
use podnet_core::{Checkpoint, Dataset, EnvSpec, SegmentationReport, TrainConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, DiscoverArgs, EvalArgs, GenDataArgs, PlanArgs, PlotArgs, SegmentArgs, TrainArgs};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path).with_context(|| format!("cannot load dataset {}", path.display()))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?)
}

fn load_spec(path: &Path) -> Result<EnvSpec, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let spec: EnvSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid environment spec {}: {e}", path.display())))?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn required(flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or(fallback)
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let spec = match &a.spec {
        Some(path) => load_spec(path)?,
        None => EnvSpec::for_kind(a.env, a.k_true.unwrap_or(3), a.env_seed.unwrap_or(a.seed))
            .map_err(|e| CliError::Usage(e.to_string()))?,
    };
    if spec.name != a.env {
        return Err(CliError::Usage(format!(
            "spec describes `{}` but --env is `{}`",
            spec.name.name(),
            a.env.name()
        )));
    }
    let dataset = generate_dataset(&spec, a.n, a.seed)?;
    save_dataset(&dataset, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let spec_out = a.spec_out.unwrap_or_else(|| a.out.with_extension("env.json"));
    write_json(Some(&spec_out), &spec)?;
    println!(
        "wrote {} trajectories to {} and the environment spec to {}",
        dataset.len(),
        a.out.display(),
        spec_out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(a.config.as_deref())?;
    config.resolve_seed(a.seed)?;
    let data = required(a.data, config.paths.data.clone(), "data")?;
    let out = required(a.out, config.paths.out.clone(), "out")?;
    config.paths.data = Some(data.clone());
    config.paths.out = Some(out.clone());

    let dataset = load_data(&data)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let quiet = a.quiet;
    let (checkpoint, history) = train_with_progress(&dataset, &config.train, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  total {:.6}  odc {:.6}  bc {:.6}  kl {:.4}  heldout_bc {:.6}  tau {:.3}",
                r.epoch, r.total, r.odc, r.bc, r.kl, r.heldout_bc, r.tau
            );
        }
    })?;
    checkpoint
        .save(out.join("checkpoint.json"))
        .context("cannot write checkpoint")?;
    write_file(&out.join("history.csv"), &history.to_csv())?;
    write_json(Some(&out.join("config.resolved.json")), &config)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} epochs, final total {:.6}, held-out bc {:.6}; outputs in {}",
        history.len(),
        last.total,
        last.heldout_bc,
        out.display()
    );
    Ok(())
}

pub fn discover_k(a: DiscoverArgs) -> Result<(), CliError> {
    if a.kmin < 2 || a.kmin > a.kmax {
        return Err(CliError::Usage(format!(
            "need 2 <= --kmin ({}) <= --kmax ({})",
            a.kmin, a.kmax
        )));
    }
    let mut config = RunConfig::load(a.config.as_deref())?;
    config.resolve_seed(a.seed)?;
    let data = required(a.data, config.paths.data.clone(), "data")?;
    let dataset = load_data(&data)?;
    let start = TrainConfig {
        num_options: config.train.num_options.clamp(a.kmin, a.kmax),
        ..config.train
    };
    let (best, table) = discover_num_options(&dataset, &start, a.kmin, a.kmax)?;
    let mut csv = String::from("num_options,heldout_bc\n");
    for row in &table {
        let _ = writeln!(csv, "{},{}", row.num_options, row.heldout_bc);
    }
    print!("{csv}");
    println!("K_best={best}");
    if let Some(out) = &a.out {
        write_file(out, &csv)?;
    }
    Ok(())
}

pub fn segment(a: SegmentArgs) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let dataset = load_data(&a.data)?;
    let seg = segment_dataset(&checkpoint, &dataset, a.stride)?;
    let mut writer = create(&a.out)?;
    seg.write_labels(&mut writer)?;
    writer.flush()?;
    match (&seg.report, &a.report) {
        (Some(report), Some(path)) => write_json(Some(path), report)?,
        (None, Some(_)) => eprintln!("note: no ground-truth labels in the data; report not written"),
        _ => {}
    }
    if let Some(r) = &seg.report {
        println!(
            "matched_accuracy {:.4}  nmi {:.4}  boundary_f1 {:.4}",
            r.matched_accuracy, r.nmi, r.boundary_f1
        );
    }
    println!("labeled {} trajectories into {}", seg.labels.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    segmentation: SegmentationReport,
    dynamics_option_sensitivity: f64,
    bc_loss: f64,
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let dataset = load_data(&a.data)?;
    let seg = segment_dataset(&checkpoint, &dataset, a.stride)?;
    let segmentation = seg
        .report
        .ok_or_else(|| anyhow::anyhow!("{} carries no ground-truth labels", a.data.display()))?;
    let output = EvalOutput {
        segmentation,
        dynamics_option_sensitivity: dynamics_option_sensitivity(&checkpoint, &dataset)?,
        bc_loss: podnet_core::training::evaluate_bc_loss(&checkpoint, &dataset)?,
    };
    write_json(a.out.as_deref(), &output)
}

#[derive(Serialize)]
struct PlanOutput {
    start: Vec<f64>,
    goal: Vec<f64>,
    #[serde(flatten)]
    plan: podnet_core::Plan,
    /// Predicted states mapped back to environment units.
    predicted_states_env: Vec<Vec<f64>>,
}

pub fn plan(a: PlanArgs) -> Result<(), CliError> {
    let config = RunConfig::load(a.config.as_deref())?;
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let norm = checkpoint.norm();
    let start = a.start.clone().unwrap_or_else(|| norm.mean.clone());
    let plan = plan_path(&checkpoint, &start, &a.goal, &config.planner)?;
    let predicted_states_env = plan
        .predicted_states
        .iter()
        .map(|s| norm.denormalize_state(s))
        .collect::<podnet_core::Result<Vec<_>>>()?;
    eprintln!(
        "plan: options {:?}, feasible {}, terminal distance {:.4}",
        plan.options, plan.feasible, plan.terminal_distance
    );
    let output = PlanOutput {
        start: start.clone(),
        goal: a.goal.clone(),
        plan,
        predicted_states_env,
    };
    write_json(a.out.as_deref(), &output)?;

    if let Some(spec_path) = &a.execute {
        let spec = load_spec(spec_path)?;
        let trace = execute(&checkpoint, &spec, &start, &a.goal, &config.planner)?;
        eprintln!(
            "execution: reached {} after {} steps with {} plan(s)",
            trace.reached,
            trace.actions.len(),
            trace.plans.len()
        );
        if let Some(path) = &a.trace {
            write_json(Some(path), &trace)?;
        }
        if let Some(path) = &a.trace_csv {
            let mut writer = create(path)?;
            trace.write_csv(&mut writer)?;
            writer.flush()?;
        }
    }
    Ok(())
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn plot_data(a: PlotArgs) -> Result<(), CliError> {
    let dataset = load_data(&a.data)?;
    let d = dataset.state_dim;
    let mut writer = create(&a.out)?;
    let states_header = join(&(0..d).map(|i| format!("s{i}")).collect::<Vec<_>>());
    match &a.checkpoint {
        None => {
            writeln!(writer, "id,step,{states_header},true_label")?;
            for traj in &dataset.trajectories {
                for (t, s) in traj.states.iter().enumerate() {
                    let label = traj
                        .true_labels
                        .as_ref()
                        .and_then(|l| l.get(t))
                        .map_or(String::new(), usize::to_string);
                    writeln!(writer, "{},{t},{},{label}", traj.id, join(s))?;
                }
            }
        }
        Some(path) => {
            let checkpoint = load_checkpoint(path)?;
            let seg = segment_dataset(&checkpoint, &dataset, None)?;
            let stride = checkpoint.config.stride;
            let downsampled = downsample_dataset(&dataset, stride)?;
            writeln!(writer, "id,step,raw_step,{states_header},true_label,pred_label")?;
            for (traj, labels) in downsampled.trajectories.iter().zip(&seg.labels) {
                for (t, s) in traj.states.iter().enumerate() {
                    let truth = traj
                        .true_labels
                        .as_ref()
                        .and_then(|l| l.get(t))
                        .map_or(String::new(), usize::to_string);
                    let pred = labels.labels.get(t).map_or(String::new(), usize::to_string);
                    writeln!(writer, "{},{t},{},{},{truth},{pred}", traj.id, t * stride, join(s))?;
                }
            }
        }
    }
    writer.flush()?;
    println!("wrote {}", a.out.display());
    Ok(())
}

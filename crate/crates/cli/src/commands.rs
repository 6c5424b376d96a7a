use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::Value;
use spanproto::evaluator::evaluate_with;
use spanproto::inspect::dump_episode;
use spanproto::synthetic::generate_splits;
use spanproto::trainer::train_with;
use spanproto::{read_episodes, write_episodes, EvalReport, SpanProto, StepReport};

use crate::config::{grid_points, RunConfig};
use crate::run::{write_json, ConfigEcho, RunDir};
use crate::{Common, EvalArgs, GenerateArgs, InspectArgs, TrainArgs};

/// Bad arguments that clap cannot catch, such as an episode index past the
/// end of the file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    for s in &common.sets {
        config.set_str(s)?;
    }
    Ok(config)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    let g = &mut config.generator;
    if let Some(v) = args.ways {
        g.ways = v;
    }
    if let Some(v) = args.shots {
        g.shots = v;
    }
    if let Some(v) = args.query {
        g.query_count = v;
    }
    if let Some(v) = args.episodes {
        g.episodes = v;
    }
    if let Some(v) = args.mode {
        g.mode = v;
    }
    if let Some(v) = args.distractor_prob {
        g.distractor_prob = v;
    }
    if let Some(v) = args.eval_episodes {
        config.eval_episodes = v;
    }
    let out = args.out.unwrap_or(args.common.data_dir);
    let splits = generate_splits(&config.generator, config.eval_episodes, args.seed)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for split in &splits {
        let path = out.join(format!("{}.jsonl", split.split));
        write_episodes(split, &path)?;
        println!("wrote {} episodes to {}", split.episodes.len(), path.display());
    }
    #[derive(Serialize)]
    struct GenerateEcho<'a> {
        program: &'static str,
        version: &'static str,
        seed: u64,
        generator: &'a spanproto::GeneratorConfig,
        eval_episodes: usize,
    }
    write_json(
        &out.join("generate.json"),
        &GenerateEcho {
            program: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: args.seed,
            generator: &config.generator,
            eval_episodes: config.eval_episodes,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    run_dir: PathBuf,
    seed: u64,
    steps: usize,
    final_loss: f64,
    /// Mean objective over the last 100 steps.
    recent_loss: f64,
    eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Serialize)]
struct EvalSummary {
    precision: f64,
    recall: f64,
    f1: f64,
    fp_span_pct: f64,
    fp_type_pct: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        EvalSummary {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fp_span_pct: r.errors.fp_span_pct,
            fp_type_pct: r.errors.fp_type_pct,
        }
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = base_config(&args.common)?;
    let t = &mut config.train;
    if let Some(v) = args.steps {
        t.total_steps = v;
    }
    if let Some(v) = args.pretrain_steps {
        t.pretrain_steps = v;
    }
    if let Some(v) = args.threshold {
        t.decode.threshold = v;
    }
    if let Some(v) = args.radius {
        t.margin.radius = v;
    }
    if args.no_margin_loss {
        t.margin.margin_loss = false;
    }
    if let Some(v) = args.lr {
        t.optimizer.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }

    {
        let t = &config.train;
        eprintln!(
            "T={} T'={} theta={} r={} margin_loss={} lr={} batch={}",
            t.total_steps,
            t.pretrain_steps,
            t.decode.threshold,
            t.margin.radius,
            t.margin.margin_loss,
            t.optimizer.learning_rate,
            t.batch_size
        );
    }
    let data_dir = &args.common.data_dir;
    let train_path = args.train.clone().unwrap_or_else(|| data_dir.join("train.jsonl"));
    let eval_path = match (&args.eval, args.no_eval) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => None,
        (None, false) => Some(data_dir.join("test.jsonl")).filter(|p| p.is_file()),
    };
    let train_data = read_episodes(&train_path).with_context(|| format!("loading {}", train_path.display()))?;
    let eval_data = match &eval_path {
        Some(p) => Some(read_episodes(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };

    let points = match &args.sweep {
        Some(grid) => grid_points(grid)?,
        None => vec![Vec::new()],
    };
    let seeds = if args.seeds.is_empty() { vec![config.train.seed] } else { args.seeds.clone() };

    let mut groups = Vec::new();
    for point in &points {
        let mut point_config = config.clone();
        for (key, value) in point {
            point_config.set(key, value.clone())?;
        }
        let label = point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        let mut summaries = Vec::new();
        for &seed in &seeds {
            let mut run_config = point_config.clone();
            run_config.train.seed = seed;
            run_config.validate()?;
            let mut echo = ConfigEcho::new("train", &run_config).input("train", &train_path)?;
            if let Some(p) = &eval_path {
                echo = echo.input("eval", p)?;
            }
            let summary = train_one(&run_config, &echo, &args.common.runs_dir, &train_data, eval_data.as_ref())?;
            summaries.push(summary);
        }
        groups.push((label, point.clone(), summaries));
    }

    if seeds.len() > 1 || points.len() > 1 {
        let dir = RunDir::create(&args.common.runs_dir, "aggregate")?;
        #[derive(Serialize)]
        struct Group<'a> {
            overrides: serde_json::Map<String, Value>,
            runs: &'a [RunSummary],
            f1_mean: Option<f64>,
            f1_std: Option<f64>,
        }
        let mut report = Vec::new();
        println!();
        for (label, point, runs) in &groups {
            let f1s: Vec<f64> = runs.iter().filter_map(|r| r.eval.as_ref().map(|e| e.f1)).collect();
            let stats = (!f1s.is_empty()).then(|| mean_std(&f1s));
            let name = if label.is_empty() { "runs".to_string() } else { label.clone() };
            match stats {
                Some((m, s)) => println!("{name}: F1 {:.2} ± {:.2} over {} seeds", 100.0 * m, 100.0 * s, f1s.len()),
                None => {
                    let (m, s) = mean_std(&runs.iter().map(|r| r.recent_loss).collect::<Vec<_>>());
                    println!("{name}: final loss {m:.4} ± {s:.4} over {} seeds", runs.len());
                }
            }
            report.push(Group {
                overrides: point.iter().cloned().collect(),
                runs,
                f1_mean: stats.map(|s| s.0),
                f1_std: stats.map(|s| s.1),
            });
        }
        let path = dir.write_json("aggregate.json", &report)?;
        println!("aggregate written to {}", path.display());
    }
    Ok(())
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn train_one(
    config: &RunConfig,
    echo: &ConfigEcho,
    runs_dir: &Path,
    train_data: &spanproto::EpisodeDataset,
    eval_data: Option<&spanproto::EpisodeDataset>,
) -> Result<RunSummary> {
    let t = &config.train;
    let dir = RunDir::create(runs_dir, &format!("seed{}", t.seed))?;
    eprintln!("seed {} -> {}", t.seed, dir.path.display());
    dir.write_json("config.json", echo)?;
    let checkpoints = dir.file("checkpoints");
    std::fs::create_dir_all(&checkpoints)?;
    let steps_path = dir.file("steps.jsonl");
    let mut steps = BufWriter::new(File::create(&steps_path).with_context(|| format!("creating {}", steps_path.display()))?);

    let mut recent: VecDeque<f64> = VecDeque::with_capacity(100);
    let mut last: Option<StepReport> = None;
    let result = train_with(train_data, t, |report, model| {
        serde_json::to_writer(&mut steps, report)?;
        steps.write_all(b"\n").map_err(|e| spanproto::Error::io(&steps_path, e))?;
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(report.total);
        if report.step % t.checkpoint_every == 0 || report.step == t.total_steps {
            model.save(checkpoints.join(format!("step-{:06}.json", report.step)))?;
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            info!("step {}/{} loss {:.4} lambda {} lr {:.2e}", report.step, t.total_steps, mean, report.lambda, report.learning_rate);
        }
        last = Some(report.clone());
        Ok(())
    });
    steps.flush()?;
    let model = match result {
        Ok(m) => m,
        Err(e) => {
            if let Some(r) = &last {
                eprintln!("last step report: {}", serde_json::to_string(r)?);
            }
            return Err(e).context(format!("training aborted, partial run in {}", dir.path.display()));
        }
    };
    model.save(dir.file("model.json"))?;

    let eval = match eval_data {
        Some(data) => {
            let report = evaluate_with(data, &model, &t.decode, &t.margin, t.execution)?;
            dir.write_json("report.json", &report)?;
            std::fs::write(dir.file("episodes.csv"), report.episodes_csv())?;
            Some(report)
        }
        None => None,
    };
    let last = last.expect("at least one step");
    let summary = RunSummary {
        run_dir: dir.path.clone(),
        seed: t.seed,
        steps: last.step,
        final_loss: last.total,
        recent_loss: recent.iter().sum::<f64>() / recent.len() as f64,
        eval: eval.as_ref().map(EvalSummary::from),
    };
    dir.write_json("summary.json", &summary)?;
    println!(
        "seed {}: step {} loss {:.4} (last-100 mean {:.4})",
        summary.seed, summary.steps, summary.final_loss, summary.recent_loss
    );
    if let Some(r) = &eval {
        print_table(r);
    }
    Ok(summary)
}

fn print_table(r: &EvalReport) {
    println!("{:>8} {:>8} {:>8} {:>9} {:>9}", "P", "R", "F1", "FP-Span", "FP-Type");
    println!(
        "{:>8.2} {:>8.2} {:>8.2} {:>9.1} {:>9.1}",
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.f1,
        r.errors.fp_span_pct,
        r.errors.fp_type_pct
    );
}

/// A checkpoint path plus the config echo of the run that produced it, if
/// one sits next to it.
fn locate_model(path: &Path) -> (PathBuf, Option<PathBuf>) {
    let (file, run) = if path.is_dir() {
        (path.join("model.json"), Some(path.to_path_buf()))
    } else {
        let parent = path.parent().map(Path::to_path_buf);
        let run = match &parent {
            Some(p) if p.file_name().is_some_and(|n| n == "checkpoints") => p.parent().map(Path::to_path_buf),
            other => other.clone(),
        };
        (path.to_path_buf(), run)
    };
    let echo = run.map(|r| r.join("config.json")).filter(|p| p.is_file());
    (file, echo)
}

/// The config given on the command line, or else the one the model was
/// trained with.
fn model_config(common: &Common, echo: Option<&Path>) -> Result<RunConfig> {
    match (common.config.as_ref(), echo) {
        (None, Some(echo)) => {
            let text = std::fs::read_to_string(echo)?;
            let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", echo.display()))?;
            let mut config: RunConfig = match value.get("config") {
                Some(c) => serde_json::from_value(c.clone())?,
                None => RunConfig::default(),
            };
            for s in &common.sets {
                config.set_str(s)?;
            }
            Ok(config)
        }
        _ => base_config(common),
    }
}

fn load_model(path: &Path) -> Result<SpanProto> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    SpanProto::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (model_path, echo) = locate_model(&args.model);
    let mut config = model_config(&args.common, echo.as_deref())?;
    if let Some(v) = args.threshold {
        config.train.decode.threshold = v;
    }
    if let Some(v) = args.radius {
        config.train.margin.radius = v;
    }
    config.validate()?;
    let model = load_model(&model_path)?;
    let data_path = args.data.clone().unwrap_or_else(|| args.common.data_dir.join("test.jsonl"));
    let data = read_episodes(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let t = &config.train;
    let report = evaluate_with(&data, &model, &t.decode, &t.margin, t.execution)?;

    let out = match args.out {
        Some(p) => {
            std::fs::create_dir_all(&p)?;
            RunDir { path: p }
        }
        None => RunDir::create(&args.common.runs_dir, "eval")?,
    };
    let echo = ConfigEcho::new("eval", &config).input("model", &model_path)?.input("data", &data_path)?;
    out.write_json("config.json", &echo)?;
    out.write_json("report.json", &report)?;
    std::fs::write(out.file("episodes.csv"), report.episodes_csv())?;
    println!(
        "{} episodes, threshold {}, radius {}",
        data.episodes.len(),
        t.decode.threshold,
        t.margin.radius
    );
    print_table(&report);
    println!("report written to {}", out.file("report.json").display());
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let (model_path, echo) = locate_model(&args.model);
    let mut config = model_config(&args.common, echo.as_deref())?;
    if let Some(v) = args.threshold {
        config.train.decode.threshold = v;
    }
    if let Some(v) = args.radius {
        config.train.margin.radius = v;
    }
    config.validate()?;
    let model = load_model(&model_path)?;
    let data_path = args.data.clone().unwrap_or_else(|| args.common.data_dir.join("test.jsonl"));
    let data = read_episodes(&data_path).with_context(|| format!("loading {}", data_path.display()))?;
    let Some(episode) = data.episodes.get(args.episode) else {
        return Err(UsageError(format!(
            "episode {} out of range, {} has {} episodes",
            args.episode,
            data_path.display(),
            data.episodes.len()
        ))
        .into());
    };
    let t = &config.train;
    let dump = dump_episode(&model, episode, &t.decode, &t.margin, args.dump_embeddings)?;
    let out = match args.out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            p
        }
        None => {
            let dir = RunDir::create(&args.common.runs_dir, "inspect")?;
            let echo = ConfigEcho::new("inspect", &config).input("model", &model_path)?.input("data", &data_path)?;
            dir.write_json("config.json", &echo)?;
            dir.file(&format!("episode-{}.json", args.episode))
        }
    };
    write_json(&out, &dump)?;
    println!("dump written to {}", out.display());
    Ok(())
}

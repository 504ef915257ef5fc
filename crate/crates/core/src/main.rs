use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use amplify_core::attribution::{attribute, AttributionMethod, AttributionOptions};
use amplify_core::corpus::{load_task, Split};
use amplify_core::harness::{
    build_client, eval_proxy, render_proxy_table, render_report, run_sweep, train_proxy,
    EvalReport, ExperimentConfig, ProxyEvalRow, ReportFormat, Runner, SweepAxis, SyntheticSpec,
};
use amplify_core::proxy::{load_model, save_model, GradientTarget};

#[derive(Parser)]
#[command(name = "amplify", version, about = "Proxy-model rationales for few-shot prompting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a proxy classifier on a task's train split.
    TrainProxy {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Proxy accuracy per split, for saved models or freshly trained ones.
    EvalProxy {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Saved proxy files to evaluate.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Train and evaluate at each of these epoch counts.
        #[arg(long = "at-epochs", value_delimiter = ',')]
        at_epochs: Vec<usize>,
    },
    /// Attribute a proxy prediction to the words of one input.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "id")]
        text: Option<String>,
        /// Example id, looked up in --task.
        #[arg(long, requires = "task")]
        id: Option<String>,
        #[arg(long)]
        task: Option<PathBuf>,
        /// Label to explain; default is the predicted label.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "grad_x_input")]
        method: AttributionMethod,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        probability: bool,
    },
    /// Run the probe and shot selection, printing the chosen shots.
    Select {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Print the prompt that would be sent for one test example.
    BuildPrompt {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Defaults to the first test example.
        #[arg(long)]
        example_id: Option<String>,
    },
    /// Run one experiment and print its report.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run one experiment per value of a single axis.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// ks, strategy, method, epochs or mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the default grid when omitted.
        #[arg(long, default_value = "")]
        values: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Write a planted-signal task and its lexicon.
    Synth {
        #[arg(long, value_delimiter = ',', default_value = "Yes,No")]
        labels: Vec<String>,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_validation: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 4)]
        signals_per_label: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output path with extension `.lexicon.json`.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Tabulate saved reports (report.json files or run directories).
    Report {
        paths: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

/// Experiment settings: a config file, then individual flags on top.
#[derive(Args)]
struct ExperimentArgs {
    /// Flat `key: value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// ao, cot or amplify.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, short = 'k')]
    k: Option<String>,
    #[arg(long, short = 's')]
    s: Option<String>,
    #[arg(long, short = 'E')]
    epochs: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// random[:SEED], l-mcs, h-mcs or f-exp.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    template: Option<String>,
    /// http:MODEL, mock:echo-gold, mock:fixed:TEXT, mock:gated:LEXICON, replay:FIXTURES.
    #[arg(long)]
    llm: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    concurrency: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    cache_dir: Option<String>,
    #[arg(long)]
    proxy_model: Option<String>,
    /// Any other config key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("task", &self.task),
            ("mode", &self.mode),
            ("k", &self.k),
            ("s", &self.s),
            ("epochs", &self.epochs),
            ("method", &self.method),
            ("strategy", &self.strategy),
            ("template", &self.template),
            ("llm", &self.llm),
            ("seed", &self.seed),
            ("concurrency", &self.concurrency),
            ("out_dir", &self.out_dir),
            ("cache_dir", &self.cache_dir),
            ("proxy_model", &self.proxy_model),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            cfg.set(k, v)?;
        }
        if cfg.task.as_os_str().is_empty() {
            bail!("no task given (--task or `task:` in the config file)");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_reports(reports: &[EvalReport], format: Format) -> Result<()> {
    let out = match format {
        Format::Text => render_report(reports, ReportFormat::Text)?,
        Format::Csv => render_report(reports, ReportFormat::Csv)?,
        Format::Json => serde_json::to_string_pretty(reports)? + "\n",
    };
    print!("{out}");
    Ok(())
}

fn collect_reports(path: &Path, out: &mut Vec<EvalReport>) -> Result<()> {
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        out.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
    } else if path.join("report.json").is_file() {
        collect_reports(&path.join("report.json"), out)?;
    } else if path.is_dir() {
        let mut children: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("report.json").is_file())
            .collect();
        children.sort();
        for c in children {
            collect_reports(&c.join("report.json"), out)?;
        }
    } else {
        bail!("{} not found", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::TrainProxy { exp, out } => {
            let cfg = exp.resolve()?;
            let task = load_task(&cfg.task)?;
            let (model, trace) = train_proxy(&task, &cfg)?;
            save_model(&model, &out)?;
            if let Some(last) = trace.last() {
                println!("epochs {}  final loss {last:.6}", trace.len());
            }
            for (split, acc) in eval_proxy(&model, &task)? {
                println!("{split:<10}  {acc:.1}");
            }
            println!("saved {}", out.display());
        }
        Command::EvalProxy { exp, models, at_epochs } => {
            let cfg = exp.resolve()?;
            let task = load_task(&cfg.task)?;
            let mut rows = Vec::new();
            let row = |acc: std::collections::BTreeMap<Split, f64>, epochs| ProxyEvalRow {
                task: task.name.clone(),
                epochs,
                train: acc.get(&Split::Train).copied(),
                validation: acc.get(&Split::Validation).copied(),
                test: acc.get(&Split::Test).copied(),
            };
            for m in &models {
                let model = load_model(m).with_context(|| format!("loading {}", m.display()))?;
                rows.push(row(eval_proxy(&model, &task)?, None));
            }
            let epochs = if models.is_empty() && at_epochs.is_empty() { vec![cfg.epochs] } else { at_epochs };
            for e in epochs {
                let (model, _) = train_proxy(&task, &ExperimentConfig { epochs: e, ..cfg.clone() })?;
                rows.push(row(eval_proxy(&model, &task)?, Some(e)));
            }
            print!("{}", render_proxy_table(&rows));
        }
        Command::Explain { model, text, id, task, label, method, k, probability } => {
            let model = load_model(&model)?;
            let text = match (text, id) {
                (Some(t), _) => t,
                (None, Some(id)) => {
                    let task = load_task(task.as_ref().expect("clap requires --task"))?;
                    let e = task.get(&id).with_context(|| format!("no example {id:?}"))?;
                    e.display_text(&model.labels)
                }
                (None, None) => bail!("give --text or --id"),
            };
            let (seg, input) = model.tokenize_text(&text);
            let probs = model.forward(&input)?;
            let target = match label {
                Some(l) => model.labels.index_of(&l).with_context(|| format!("unknown label {l:?}"))?,
                None => model.predict_index(&input)?,
            };
            let options = AttributionOptions {
                gradient_target: if probability { GradientTarget::Probability } else { GradientTarget::Logit },
                ..AttributionOptions::default()
            };
            let result = attribute(&model, &input, &seg, target, method, &options)?;
            let out = serde_json::json!({
                "text": text,
                "probabilities": model.labels.iter().zip(&probs).map(|(l, p)| (l.to_string(), *p)).collect::<std::collections::BTreeMap<_, _>>(),
                "target": result.target_label,
                "contrast": result.contrast_label,
                "method": method.as_str(),
                "keywords": result.top_k(k),
                "words": seg.surfaces().zip(&result.word_scores).map(|(w, s)| serde_json::json!([w, s])).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Select { exp } => {
            let cfg = exp.resolve()?;
            let runner = Runner::for_config(&cfg)?;
            let plan = runner.plan_shots(&cfg)?;
            if let Some(probe) = &plan.probe {
                println!(
                    "probe: {} validation examples, {} misclassified, {} unparsed",
                    probe.evaluated, probe.misclassified, probe.parse_failures
                );
            }
            if plan.shortfall > 0 {
                println!("shortfall: {} shots", plan.shortfall);
            }
            let scores = plan.selection.as_ref().map(|s| &s.chosen);
            for (i, id) in plan.shot_ids.iter().enumerate() {
                let score = scores
                    .and_then(|c| c[i].score)
                    .map_or(String::new(), |s| format!("  {s:.6}"));
                println!("{id}{score}");
            }
            for a in &plan.attributions {
                println!("{}: {}", a.example_id, a.rationale);
            }
        }
        Command::BuildPrompt { exp, example_id } => {
            let cfg = exp.resolve()?;
            let runner = Runner::for_config(&cfg)?;
            let task = runner.task();
            let example = match &example_id {
                Some(id) => task.get(id).with_context(|| format!("no example {id:?}"))?,
                None => task.split(Split::Test).next().context("task has no test examples")?,
            };
            let plan = runner.plan_shots(&cfg)?;
            print!("{}", runner.prompt_for(&cfg, &plan, example)?.rendered);
            println!();
        }
        Command::Run { exp, format } => {
            let cfg = exp.resolve()?;
            let outcome = Runner::for_config(&cfg)?.run(&cfg)?;
            print_reports(std::slice::from_ref(&outcome.report), format)?;
            let r = &outcome.report;
            eprintln!(
                "{} correct, {} incorrect, {} unparsed; {} cache hits, {} endpoint calls, {} ms",
                r.correct, r.incorrect, r.parse_failures, r.run.cache_hits, r.run.endpoint_calls, r.run.wall_time_ms
            );
            if let Some(dir) = &outcome.run_dir {
                eprintln!("artifacts in {}", dir.display());
            }
        }
        Command::Sweep { exp, axis, values, format } => {
            let cfg = exp.resolve()?;
            let axis = SweepAxis::parse(&axis, &values, &cfg)?;
            let task = load_task(&cfg.task)?;
            let client = Arc::new(build_client(&cfg, &task)?);
            let runner = Runner::new(task, client);
            let table = run_sweep(&runner, &cfg, &axis)?;
            let reports: Vec<EvalReport> = table.reports().into_iter().cloned().collect();
            print_reports(&reports, format)?;
            if let Some(dir) = &cfg.out_dir {
                fs::create_dir_all(dir)?;
                let path = dir.join(format!("sweep-{}.csv", table.axis));
                fs::write(&path, render_report(&reports, ReportFormat::Csv)?)?;
                eprintln!("wrote {}", path.display());
            }
            let failures = table.failures();
            for (label, err) in &failures {
                eprintln!("cell {label} failed: {err}");
            }
            if !failures.is_empty() && reports.is_empty() {
                bail!("every sweep cell failed");
            }
        }
        Command::Synth { labels, n_train, n_validation, n_test, signals_per_label, seed, name, out, lexicon } => {
            let spec = SyntheticSpec {
                name,
                labels,
                n_train,
                n_validation,
                n_test,
                signals_per_label,
                seed,
                ..SyntheticSpec::default()
            };
            let (task, lex) = amplify_core::harness::make_synthetic_task(&spec)?;
            task.save(&out)?;
            let lex_path = lexicon.unwrap_or_else(|| out.with_extension("lexicon.json"));
            lex.save(&lex_path)?;
            println!("wrote {} ({} examples) and {}", out.display(), task.examples.len(), lex_path.display());
        }
        Command::Report { paths, format } => {
            if paths.is_empty() {
                bail!("give at least one report.json or run directory");
            }
            let mut reports = Vec::new();
            for p in &paths {
                collect_reports(p, &mut reports)?;
            }
            print_reports(&reports, format)?;
        }
    }
    Ok(())
}

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionMethod, AttributionOptions, Keyword};
use crate::corpus::{load_task, Example, Split, Task};
use crate::llmclient::{
    load_fixtures, parse_answer, CompletionRequest, CompletionResponse, Endpoint, HttpEndpoint,
    LlmClient, LlmError, MockEndpoint, MockPolicy, ParsedAnswer, ResponseCache, ResponseSource,
    WrongLabelRule,
};
use crate::prompting::{
    build_prompt, render_rationale, PromptMode, PromptSpec, RationaleTemplate, Shot,
};
use crate::proxy::{load_model, save_model, train, ProxyModel, TrainConfig, Vocab};
use crate::selection::{
    filter_llm_misclassified, select_shots, ScoringContext, Selection, SelectionRecord,
    SelectionStrategy,
};

use super::config::{ExperimentConfig, LlmSpec};
use super::synth::{gates_for_task, Lexicon};
use super::HarnessError;

const VOCAB_SIZE: usize = 8000;
const HTTP_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub wall_time_ms: u64,
    pub cache_hits: usize,
    pub endpoint_calls: usize,
}

/// Answer-only pass over validation used to find LLM mistakes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub shot_ids: Vec<String>,
    pub evaluated: usize,
    pub misclassified: usize,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: PromptMode,
    pub k: usize,
    pub s: usize,
    pub epochs: usize,
    pub method: AttributionMethod,
    pub strategy: SelectionStrategy,
    pub template: String,
    pub llm: String,
    pub config_digest: String,
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub parse_failures: usize,
    /// Percent of test examples predicted correctly; parse failures count
    /// as wrong.
    pub accuracy: f64,
    pub proxy_validation_accuracy: Option<f64>,
    pub selected_shot_ids: Vec<String>,
    pub shortfall: usize,
    pub probe: Option<ProbeSummary>,
    /// Timing and cache counters; excluded from [`EvalReport::content`].
    pub run: RunStats,
}

impl EvalReport {
    /// Everything except run statistics, as JSON. Identical experiments
    /// produce identical bytes.
    pub fn content(&self) -> String {
        let mut c = self.clone();
        c.run = RunStats::default();
        serde_json::to_string(&c).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotAttribution {
    pub example_id: String,
    pub gold: String,
    pub method: AttributionMethod,
    pub contrast_label: Option<String>,
    pub keywords: Vec<Keyword>,
    pub word_scores: Vec<f64>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub gold: String,
    pub raw_text: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub source: ResponseSource,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub shots: Vec<Shot>,
    pub attributions: Vec<ShotAttribution>,
    pub selection: Option<Selection>,
    pub probe_records: Vec<SelectionRecord>,
    pub predictions: Vec<PredictionRecord>,
    /// Rendered test prompts by example id, in test order.
    pub prompts: Vec<(String, String)>,
    pub run_dir: Option<PathBuf>,
}

/// Everything that goes into the prompts before the test set is queried.
#[derive(Debug, Clone)]
pub struct ShotPlan {
    pub shots: Vec<Shot>,
    pub shot_ids: Vec<String>,
    pub attributions: Vec<ShotAttribution>,
    pub selection: Option<Selection>,
    pub probe: Option<ProbeSummary>,
    pub probe_records: Vec<SelectionRecord>,
    pub proxy_validation_accuracy: Option<f64>,
    pub shortfall: usize,
    pub proxy: Option<Arc<ProxyModel>>,
}

/// Accuracy (percent) of `model` on each split present in `task`.
pub fn eval_proxy(model: &ProxyModel, task: &Task) -> Result<BTreeMap<Split, f64>, HarnessError> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let examples: Vec<&Example> = task.split(split).collect();
        if examples.is_empty() {
            continue;
        }
        out.insert(split, proxy_accuracy(model, &examples)?);
    }
    Ok(out)
}

fn proxy_accuracy(model: &ProxyModel, examples: &[&Example]) -> Result<f64, HarnessError> {
    let mut correct = 0;
    for ex in examples {
        let (_, input) = model.tokenize_text(&ex.display_text(&model.labels));
        if model.predict(&input)? == ex.gold {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Vocabulary from the train and validation texts.
pub fn task_vocab(task: &Task) -> Vocab {
    let texts: Vec<String> = task
        .examples
        .iter()
        .filter(|e| e.split != Split::Test)
        .map(|e| e.display_text(&task.label_set))
        .collect();
    Vocab::build(&texts, VOCAB_SIZE)
}

/// Initial proxy for `cfg`: the pretrained model if given, otherwise a
/// fresh seeded one.
pub fn initial_proxy(task: &Task, cfg: &ExperimentConfig) -> Result<ProxyModel, HarnessError> {
    match &cfg.proxy_model {
        Some(path) => {
            let m = load_model(path)?;
            if m.labels != task.label_set {
                return Err(HarnessError::Config(format!(
                    "proxy {} was trained for labels {:?}",
                    path.display(),
                    m.labels.as_slice()
                )));
            }
            Ok(m)
        }
        None => Ok(ProxyModel::new(cfg.proxy, task_vocab(task), task.label_set.clone(), cfg.seed)?),
    }
}

/// Fine-tunes the proxy on the train split for `cfg.epochs` epochs.
pub fn train_proxy(task: &Task, cfg: &ExperimentConfig) -> Result<(ProxyModel, Vec<f64>), HarnessError> {
    let model = initial_proxy(task, cfg)?;
    let train_set: Vec<&Example> = task.split(Split::Train).collect();
    let tc = TrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &train_set, &tc)?;
    Ok((outcome.model, outcome.loss_trace))
}

pub fn resolve_template(name: &str) -> Result<RationaleTemplate, HarnessError> {
    match RationaleTemplate::builtin(name) {
        Ok(t) => Ok(t),
        Err(_) if Path::new(name).is_file() => Ok(RationaleTemplate::from_file(name)?),
        Err(e) => Err(e.into()),
    }
}

fn endpoint_for(cfg: &ExperimentConfig, task: &Task) -> Result<Arc<dyn Endpoint>, HarnessError> {
    let labels = task.label_set.as_slice().to_vec();
    Ok(match &cfg.llm {
        LlmSpec::Http { .. } => Arc::new(HttpEndpoint::from_env(HTTP_TIMEOUT)?),
        LlmSpec::EchoGold => Arc::new(MockEndpoint::new(MockPolicy::EchoGold(
            task.examples.iter().map(|e| (e.id.clone(), e.gold.clone())).collect(),
        ))),
        LlmSpec::Fixed { text } => Arc::new(MockEndpoint::new(MockPolicy::Fixed(text.clone()))),
        LlmSpec::KeywordGated { lexicon, wrong } => {
            let lexicon = Lexicon::load(lexicon)?;
            let wrong = match wrong {
                WrongLabelRule::Fixed(l) if l.is_empty() => WrongLabelRule::Fixed(labels[0].clone()),
                other => other.clone(),
            };
            Arc::new(MockEndpoint::new(MockPolicy::KeywordGated {
                gates: gates_for_task(task, &lexicon),
                labels,
                wrong,
            }))
        }
        LlmSpec::Replay { fixtures } => Arc::new(MockEndpoint::new(MockPolicy::Replay {
            fixtures: load_fixtures(fixtures)?,
        })),
    })
}

pub fn build_client(cfg: &ExperimentConfig, task: &Task) -> Result<LlmClient, HarnessError> {
    let cache = cfg.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
    Ok(LlmClient::new(endpoint_for(cfg, task)?, cache).with_max_in_flight(cfg.concurrency))
}

/// Runs `requests` on up to `workers` threads; results keep input order.
pub fn query_all(
    client: &LlmClient,
    requests: &[CompletionRequest],
    workers: usize,
) -> Vec<Result<CompletionResponse, LlmError>> {
    let results: Vec<Mutex<Option<Result<CompletionResponse, LlmError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, requests.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                *results[i].lock().unwrap() = Some(client.complete(&requests[i]));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every request ran"))
        .collect()
}

fn random_train_shots<'t>(task: &'t Task, s: usize, seed: u64, need_cot: bool) -> Vec<&'t Example> {
    let mut pool: Vec<&Example> = task
        .split(Split::Train)
        .filter(|e| !need_cot || e.cot_rationale.is_some())
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.truncate(s);
    pool
}

fn answer_only_shot(task: &Task, e: &Example) -> Shot {
    Shot {
        input_text: e.display_text(&task.label_set),
        rationale: None,
        label: e.gold.clone(),
    }
}

/// Holds the task, the client and trained proxies so sweeps can share them.
pub struct Runner {
    task: Task,
    client: Arc<LlmClient>,
    proxies: Mutex<HashMap<String, Arc<ProxyModel>>>,
}

#[derive(Serialize)]
struct ProxyKey<'a> {
    proxy: &'a crate::proxy::ProxyConfig,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    start: &'a Option<PathBuf>,
}

impl Runner {
    pub fn new(task: Task, client: Arc<LlmClient>) -> Self {
        Runner {
            task,
            client,
            proxies: Mutex::new(HashMap::new()),
        }
    }

    /// Loads the task named by `cfg` and builds its client.
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let task = load_task(&cfg.task)?;
        let client = build_client(cfg, &task)?;
        Ok(Runner::new(task, Arc::new(client)))
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn client(&self) -> &LlmClient {
        &self.client
    }

    /// Trained proxy for `cfg`, reused across calls with the same
    /// training settings.
    pub fn proxy(&self, cfg: &ExperimentConfig) -> Result<Arc<ProxyModel>, HarnessError> {
        let key = serde_json::to_string(&ProxyKey {
            proxy: &cfg.proxy,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            start: &cfg.proxy_model,
        })?;
        if let Some(m) = self.proxies.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let (model, trace) = train_proxy(&self.task, cfg)?;
        if let Some(last) = trace.last() {
            log::info!("proxy trained for {} epochs, final loss {last:.4}", cfg.epochs);
        }
        let model = Arc::new(model);
        self.proxies.lock().unwrap().insert(key, model.clone());
        Ok(model)
    }

    fn request(&self, cfg: &ExperimentConfig, prompt: String, id: &str) -> CompletionRequest {
        let mut r = CompletionRequest::new(cfg.llm.model_name(), prompt).for_example(id);
        r.stop = vec!["\n\n".to_string()];
        r
    }

    fn parse(&self, raw: &str, e: &Example) -> Option<String> {
        match parse_answer(raw, Some(e), &self.task.label_set, &self.task.answer_delimiter) {
            ParsedAnswer::Label(l) => Some(l),
            ParsedAnswer::ParseFailure => None,
        }
    }

    /// Runs one experiment. With `out_dir` set, artifacts go to a fresh
    /// run directory, and a `FAILED` marker is left there on error.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
        cfg.validate()?;
        let run_dir = match &cfg.out_dir {
            Some(root) => Some(create_run_dir(root, cfg)?),
            None => None,
        };
        match self.run_inner(cfg, run_dir.as_deref()) {
            Ok(mut outcome) => {
                outcome.run_dir = run_dir;
                Ok(outcome)
            }
            Err(e) => {
                if let Some(dir) = &run_dir {
                    let _ = fs::write(dir.join("FAILED"), format!("{e}\n"));
                }
                Err(e)
            }
        }
    }

    /// Shots for `cfg.mode`: random train examples for the baselines; for
    /// AMPLIFY the proxy, the answer-only probe, selection and rationales.
    pub fn plan_shots(&self, cfg: &ExperimentConfig) -> Result<ShotPlan, HarnessError> {
        cfg.validate()?;
        let task = &self.task;
        let template = resolve_template(&cfg.template)?;
        let baseline_shots = random_train_shots(task, cfg.s, cfg.seed, false);

        let mut proxy = None;
        let mut proxy_validation_accuracy = None;
        let mut selection = None;
        let mut probe = None;
        let mut probe_records = Vec::new();
        let mut attributions = Vec::new();
        let shortfall;
        let mut shot_ids: Vec<String> = baseline_shots.iter().map(|e| e.id.clone()).collect();

        let shots: Vec<Shot> = match cfg.mode {
            PromptMode::AnswerOnly => {
                shortfall = cfg.s.saturating_sub(baseline_shots.len());
                baseline_shots.iter().map(|e| answer_only_shot(task, e)).collect()
            }
            PromptMode::ChainOfThought => {
                let picked = random_train_shots(task, cfg.s, cfg.seed, true);
                if picked.is_empty() {
                    return Err(HarnessError::MissingRationales);
                }
                shortfall = cfg.s.saturating_sub(picked.len());
                shot_ids = picked.iter().map(|e| e.id.clone()).collect();
                picked
                    .iter()
                    .map(|e| Shot {
                        rationale: e.cot_rationale.clone(),
                        ..answer_only_shot(task, e)
                    })
                    .collect()
            }
            PromptMode::Amplify => {
                let model = self.proxy(cfg)?;
                proxy = Some(model.clone());
                let validation: Vec<&Example> = task.split(Split::Validation).collect();
                proxy_validation_accuracy = Some(proxy_accuracy(&model, &validation)?);

                // step: answer-only probe over validation
                let probe_shots: Vec<Shot> = baseline_shots.iter().map(|e| answer_only_shot(task, e)).collect();
                let requests = validation
                    .iter()
                    .map(|e| {
                        let p = build_prompt(
                            PromptMode::AnswerOnly,
                            probe_shots.clone(),
                            &e.display_text(&task.label_set),
                            &task.answer_delimiter,
                        )?;
                        Ok(self.request(cfg, p.rendered, &e.id))
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()?;
                let mut predictions = HashMap::new();
                let mut failures = 0;
                for (e, resp) in validation.iter().zip(query_all(&self.client, &requests, cfg.concurrency)) {
                    let parsed = self.parse(&resp?.raw_text, e);
                    failures += usize::from(parsed.is_none());
                    predictions.insert(e.id.clone(), parsed);
                }
                let candidates = filter_llm_misclassified(&validation, &predictions)?;
                probe = Some(ProbeSummary {
                    shot_ids: baseline_shots.iter().map(|e| e.id.clone()).collect(),
                    evaluated: validation.len(),
                    misclassified: candidates.examples.len(),
                    parse_failures: failures,
                });

                let options = AttributionOptions {
                    gradient_target: cfg.gradient_target,
                    contrast_fallback: cfg.contrast_fallback,
                    contrast_override: None,
                };
                let ctx = ScoringContext {
                    model: Some(&model),
                    method: cfg.method,
                    k: cfg.k,
                    options,
                };
                let sel = select_shots(cfg.strategy, &candidates.examples, &ctx, cfg.s)?;
                shortfall = sel.shortfall;
                let scores: HashMap<&str, Option<f64>> =
                    sel.scored.iter().map(|c| (c.example_id.as_str(), c.score)).collect();
                probe_records = candidates.records.clone();
                for r in &mut probe_records {
                    let score = scores.get(r.example_id.as_str()).copied().flatten();
                    match cfg.strategy {
                        SelectionStrategy::FaithfulExp => r.faithfulness = score,
                        SelectionStrategy::Random { .. } => {}
                        _ => r.mcs = score,
                    }
                }

                // keywords and rationales for the chosen shots
                let mut shots = Vec::new();
                for chosen in &sel.chosen {
                    let e = task
                        .get(&chosen.example_id)
                        .expect("selected ids come from the task");
                    let text = e.display_text(&task.label_set);
                    let (seg, input) = model.tokenize_text(&text);
                    let result = attribute(&model, &input, &seg, task.gold_index(e), cfg.method, &options)?;
                    let keywords = result.top_k(cfg.k).to_vec();
                    let surfaces: Vec<&str> = keywords.iter().map(|k| k.surface.as_str()).collect();
                    let rationale = render_rationale(&surfaces, &e.gold, &template)?;
                    attributions.push(ShotAttribution {
                        example_id: e.id.clone(),
                        gold: e.gold.clone(),
                        method: cfg.method,
                        contrast_label: result.contrast_label.clone(),
                        keywords,
                        word_scores: result.word_scores.clone(),
                        rationale: rationale.clone(),
                    });
                    shots.push(Shot {
                        input_text: text,
                        rationale: Some(rationale),
                        label: e.gold.clone(),
                    });
                }
                shot_ids = sel.chosen.iter().map(|c| c.example_id.clone()).collect();
                selection = Some(sel);
                shots
            }
        };

        Ok(ShotPlan {
            shots,
            shot_ids,
            attributions,
            selection,
            probe,
            probe_records,
            proxy_validation_accuracy,
            shortfall,
            proxy,
        })
    }

    /// The rendered prompt for one example under `plan`.
    pub fn prompt_for(&self, cfg: &ExperimentConfig, plan: &ShotPlan, example: &Example) -> Result<PromptSpec, HarnessError> {
        Ok(build_prompt(
            cfg.mode,
            plan.shots.clone(),
            &example.display_text(&self.task.label_set),
            &self.task.answer_delimiter,
        )?)
    }

    fn run_inner(&self, cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ExperimentOutcome, HarnessError> {
        let started = Instant::now();
        let before = self.client.stats();
        let task = &self.task;
        if let Some(d) = dir {
            fs::write(d.join("config.txt"), cfg.to_document())?;
        }

        let plan = self.plan_shots(cfg)?;
        if let (Some(d), Some(model)) = (dir, &plan.proxy) {
            save_model(model, d.join("proxy.ampx"))?;
        }

        // test-set querying
        let test: Vec<&Example> = task.split(Split::Test).collect();
        let mut prompts = Vec::with_capacity(test.len());
        let mut requests = Vec::with_capacity(test.len());
        for e in &test {
            let p = self.prompt_for(cfg, &plan, e)?;
            requests.push(self.request(cfg, p.rendered.clone(), &e.id));
            prompts.push((e.id.clone(), p.rendered));
        }
        let mut predictions = Vec::with_capacity(test.len());
        let (mut correct, mut parse_failures) = (0, 0);
        for (e, resp) in test.iter().zip(query_all(&self.client, &requests, cfg.concurrency)) {
            let resp = resp?;
            let predicted = self.parse(&resp.raw_text, e);
            let ok = predicted.as_deref() == Some(e.gold.as_str());
            correct += usize::from(ok);
            parse_failures += usize::from(predicted.is_none());
            predictions.push(PredictionRecord {
                example_id: e.id.clone(),
                gold: e.gold.clone(),
                raw_text: resp.raw_text,
                predicted,
                correct: ok,
                source: resp.source,
            });
        }
        let total = test.len();
        let after = self.client.stats();
        let uses_proxy = cfg.mode == PromptMode::Amplify;
        let report = EvalReport {
            task: task.name.clone(),
            mode: cfg.mode,
            k: cfg.k,
            s: cfg.s,
            epochs: if uses_proxy { cfg.epochs } else { 0 },
            method: cfg.method,
            strategy: cfg.strategy,
            template: cfg.template.clone(),
            llm: cfg.llm.to_string(),
            config_digest: cfg.digest(),
            total,
            correct,
            incorrect: total - correct - parse_failures,
            parse_failures,
            accuracy: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
            proxy_validation_accuracy: plan.proxy_validation_accuracy,
            selected_shot_ids: plan.shot_ids.clone(),
            shortfall: plan.shortfall,
            probe: plan.probe.clone(),
            run: RunStats {
                wall_time_ms: started.elapsed().as_millis() as u64,
                cache_hits: after.cache_hits - before.cache_hits,
                endpoint_calls: after.endpoint_calls - before.endpoint_calls,
            },
        };

        let outcome = ExperimentOutcome {
            report,
            shots: plan.shots,
            attributions: plan.attributions,
            selection: plan.selection,
            probe_records: plan.probe_records,
            predictions,
            prompts,
            run_dir: None,
        };
        if let Some(d) = dir {
            write_artifacts(d, &outcome)?;
        }
        Ok(outcome)
    }
}

fn create_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let digest = cfg.digest();
    let base = format!("{stamp}-{}", &digest[..12]);
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(dir.join("prompts"))?;
    Ok(dir)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_artifacts(dir: &Path, o: &ExperimentOutcome) -> Result<(), HarnessError> {
    write_jsonl(&dir.join("attributions.jsonl"), &o.attributions)?;
    write_jsonl(&dir.join("probe.jsonl"), &o.probe_records)?;
    write_jsonl(&dir.join("predictions.jsonl"), &o.predictions)?;
    if let Some(sel) = &o.selection {
        fs::write(dir.join("selection.json"), serde_json::to_string_pretty(sel)?)?;
    }
    for (id, prompt) in &o.prompts {
        fs::write(dir.join("prompts").join(format!("{id}.txt")), prompt)?;
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&o.report)?)?;
    Ok(())
}

/// Loads the task, builds a client and runs a single experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    Runner::for_config(cfg)?.run(cfg)
}

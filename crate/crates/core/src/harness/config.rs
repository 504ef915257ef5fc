use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::AttributionMethod;
use crate::llmclient::WrongLabelRule;
use crate::prompting::{PromptMode, DEFAULT_K};
use crate::proxy::{GradientTarget, ProxyConfig};
use crate::selection::SelectionStrategy;

use super::HarnessError;

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmSpec {
    /// Live endpoint from the environment, querying this model name.
    Http { model: String },
    EchoGold,
    Fixed { text: String },
    /// Gates built from a lexicon file; see [`crate::llmclient::MockPolicy`].
    KeywordGated { lexicon: PathBuf, wrong: WrongLabelRule },
    Replay { fixtures: PathBuf },
}

impl LlmSpec {
    pub fn model_name(&self) -> &str {
        match self {
            LlmSpec::Http { model } => model,
            _ => "mock",
        }
    }
}

impl fmt::Display for LlmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LlmSpec::Http { model } => write!(f, "http:{model}"),
            LlmSpec::EchoGold => f.write_str("mock:echo-gold"),
            LlmSpec::Fixed { text } => write!(f, "mock:fixed:{text}"),
            LlmSpec::KeywordGated { lexicon, wrong } => {
                write!(f, "mock:gated:{}", lexicon.display())?;
                match wrong {
                    WrongLabelRule::NextLabel => f.write_str(":next"),
                    WrongLabelRule::Fixed(l) if l.is_empty() => Ok(()),
                    WrongLabelRule::Fixed(l) => write!(f, ":fixed={l}"),
                }
            }
            LlmSpec::Replay { fixtures } => write!(f, "replay:{}", fixtures.display()),
        }
    }
}

impl FromStr for LlmSpec {
    type Err = String;

    /// `http:MODEL`, `mock:echo-gold`, `mock:fixed:TEXT`,
    /// `mock:gated:LEXICON[:next|:fixed=LABEL]`, `replay:FIXTURES`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(model) = s.strip_prefix("http:") {
            return Ok(LlmSpec::Http { model: model.to_string() });
        }
        if s == "mock:echo-gold" {
            return Ok(LlmSpec::EchoGold);
        }
        if let Some(text) = s.strip_prefix("mock:fixed:") {
            return Ok(LlmSpec::Fixed { text: text.to_string() });
        }
        if let Some(rest) = s.strip_prefix("mock:gated:") {
            let (path, wrong) = if let Some(p) = rest.strip_suffix(":next") {
                (p, WrongLabelRule::NextLabel)
            } else if let Some((p, label)) = rest.rsplit_once(":fixed=") {
                (p, WrongLabelRule::Fixed(label.to_string()))
            } else {
                // first label of the task, resolved when the mock is built
                (rest, WrongLabelRule::Fixed(String::new()))
            };
            return Ok(LlmSpec::KeywordGated { lexicon: path.into(), wrong });
        }
        if let Some(path) = s.strip_prefix("replay:") {
            return Ok(LlmSpec::Replay { fixtures: path.into() });
        }
        Err(format!("unknown llm spec {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: PathBuf,
    pub mode: PromptMode,
    pub k: usize,
    pub s: usize,
    pub epochs: usize,
    pub method: AttributionMethod,
    pub strategy: SelectionStrategy,
    /// Builtin name or a template file path.
    pub template: String,
    pub llm: LlmSpec,
    pub seed: u64,
    pub concurrency: usize,
    pub proxy: ProxyConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_target: GradientTarget,
    pub contrast_fallback: bool,
    /// Pretrained proxy to start from instead of a fresh initialization.
    pub proxy_model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: PathBuf::new(),
            mode: PromptMode::Amplify,
            k: DEFAULT_K,
            s: 10,
            epochs: 10,
            method: AttributionMethod::GradXInput,
            strategy: SelectionStrategy::HighMcs,
            template: "standard".into(),
            llm: LlmSpec::EchoGold,
            seed: 0,
            concurrency: 4,
            proxy: ProxyConfig::default(),
            learning_rate: 1e-3,
            batch_size: 16,
            gradient_target: GradientTarget::Logit,
            contrast_fallback: true,
            proxy_model: None,
            out_dir: None,
            cache_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| HarnessError::Config(format!("{key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl ExperimentConfig {
    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let value = value.trim();
        match key.replace('-', "_").as_str() {
            "task" => self.task = value.into(),
            "mode" => self.mode = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "s" => self.s = parse(key, value)?,
            "epochs" | "e" => self.epochs = parse(key, value)?,
            "method" => self.method = parse(key, value)?,
            "strategy" => self.strategy = parse(key, value)?,
            "template" => self.template = value.to_string(),
            "llm" => self.llm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "concurrency" => self.concurrency = parse(key, value)?,
            "d_model" => self.proxy.d_model = parse(key, value)?,
            "heads" => self.proxy.heads = parse(key, value)?,
            "layers" => self.proxy.layers = parse(key, value)?,
            "max_len" => self.proxy.max_len = parse(key, value)?,
            "ff_mult" => self.proxy.ff_mult = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "gradient_target" => {
                self.gradient_target = match value {
                    "logit" => GradientTarget::Logit,
                    "probability" | "prob" => GradientTarget::Probability,
                    _ => return Err(HarnessError::Config(format!("{key}: {value:?}"))),
                }
            }
            "contrast_fallback" => self.contrast_fallback = parse_bool(key, value)?,
            "proxy_model" => self.proxy_model = optional_path(value),
            "out_dir" => self.out_dir = optional_path(value),
            "cache_dir" => self.cache_dir = optional_path(value),
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key: value` document. Blank lines and `#` comments
    /// are skipped; `=` works as a separator too.
    pub fn apply_document(&mut self, text: &str) -> Result<(), HarnessError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .filter(|(k, _)| !k.contains('='))
                .or_else(|| line.split_once('='))
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key: value", no + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_document(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.k == 0 {
            return Err(HarnessError::Config("k must be at least 1".into()));
        }
        if self.s == 0 {
            return Err(HarnessError::Config("s must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(HarnessError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the fields that affect results (not output
    /// locations or concurrency).
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.cache_dir = None;
        c.concurrency = 1;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The config as a `key: value` document accepted by
    /// [`apply_document`](Self::apply_document).
    pub fn to_document(&self) -> String {
        let gt = match self.gradient_target {
            GradientTarget::Logit => "logit",
            GradientTarget::Probability => "probability",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut lines = vec![
            format!("task: {}", self.task.display()),
            format!("mode: {}", self.mode.as_str().to_ascii_lowercase()),
            format!("k: {}", self.k),
            format!("s: {}", self.s),
            format!("epochs: {}", self.epochs),
            format!("method: {}", self.method.as_str()),
            format!("strategy: {}", self.strategy),
            format!("template: {}", self.template),
            format!("llm: {}", self.llm),
            format!("seed: {}", self.seed),
            format!("concurrency: {}", self.concurrency),
            format!("d_model: {}", self.proxy.d_model),
            format!("heads: {}", self.proxy.heads),
            format!("layers: {}", self.proxy.layers),
            format!("max_len: {}", self.proxy.max_len),
            format!("ff_mult: {}", self.proxy.ff_mult),
            format!("learning_rate: {}", self.learning_rate),
            format!("batch_size: {}", self.batch_size),
            format!("gradient_target: {gt}"),
            format!("contrast_fallback: {}", self.contrast_fallback),
            format!("proxy_model: {}", path(&self.proxy_model)),
            format!("out_dir: {}", path(&self.out_dir)),
            format!("cache_dir: {}", path(&self.cache_dir)),
        ];
        lines.push(String::new());
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn document_overrides_defaults() {
        let mut c = ExperimentConfig::default();
        c.apply_document("# sweep base\ntask: data/t.jsonl\nk: 7\ns=3\nstrategy: random:4\nllm: mock:gated:lex.json:next\n\nlayers: 1\n")
            .unwrap();
        assert_eq!(c.task, PathBuf::from("data/t.jsonl"));
        assert_eq!((c.k, c.s, c.proxy.layers), (7, 3, 1));
        assert_eq!(c.strategy, SelectionStrategy::Random { seed: 4 });
        assert_eq!(
            c.llm,
            LlmSpec::KeywordGated { lexicon: "lex.json".into(), wrong: WrongLabelRule::NextLabel }
        );
    }

    #[test]
    fn document_round_trip() {
        let mut c = ExperimentConfig::default();
        c.task = "x.jsonl".into();
        c.method = AttributionMethod::ContrastiveGrad;
        c.llm = LlmSpec::Replay { fixtures: "f.json".into() };
        c.gradient_target = GradientTarget::Probability;
        c.cache_dir = Some("cache".into());
        let mut back = ExperimentConfig::default();
        back.apply_document(&c.to_document()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_reported() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("k", "many").is_err());
        assert!(c.set("colour", "red").is_err());
        assert!(c.apply_document("no separator here").is_err());
        c.s = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_ignores_output_locations() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        b.concurrency = 16;
        assert_eq!(a.digest(), b.digest());
        b.k = 2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn llm_spec_strings() {
        for s in ["http:gpt-x", "mock:echo-gold", "mock:fixed: (A)", "replay:fx.json", "mock:gated:l.json:fixed=No"] {
            let spec: LlmSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("carrier-pigeon".parse::<LlmSpec>().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMethod;
use crate::prompting::PromptMode;
use crate::selection::SelectionStrategy;

use super::config::ExperimentConfig;
use super::experiment::{EvalReport, Runner};
use super::HarnessError;

/// One swept dimension; every other field comes from the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KeywordsShots(Vec<(usize, usize)>),
    Strategy(Vec<SelectionStrategy>),
    Method(Vec<AttributionMethod>),
    Epochs(Vec<usize>),
    Mode(Vec<PromptMode>),
}

impl SweepAxis {
    pub fn keywords_shots() -> Self {
        SweepAxis::KeywordsShots(vec![(2, 5), (5, 5), (5, 10), (7, 10)])
    }

    pub fn strategies(random_seed: u64) -> Self {
        SweepAxis::Strategy(vec![
            SelectionStrategy::Random { seed: random_seed },
            SelectionStrategy::LowMcs,
            SelectionStrategy::HighMcs,
            SelectionStrategy::FaithfulExp,
        ])
    }

    pub fn methods() -> Self {
        SweepAxis::Method(AttributionMethod::ALL.to_vec())
    }

    pub fn epochs() -> Self {
        SweepAxis::Epochs(vec![0, 10, 200])
    }

    pub fn modes() -> Self {
        SweepAxis::Mode(PromptMode::ALL.to_vec())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::KeywordsShots(_) => "ks",
            SweepAxis::Strategy(_) => "strategy",
            SweepAxis::Method(_) => "method",
            SweepAxis::Epochs(_) => "epochs",
            SweepAxis::Mode(_) => "mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::KeywordsShots(v) => v.len(),
            SweepAxis::Strategy(v) => v.len(),
            SweepAxis::Method(v) => v.len(),
            SweepAxis::Epochs(v) => v.len(),
            SweepAxis::Mode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axis from its name and comma-separated values; empty values give
    /// the default grid. `ks` values look like `2x5`.
    pub fn parse(name: &str, values: &str, base: &ExperimentConfig) -> Result<Self, HarnessError> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        let bad = |v: &str| HarnessError::Config(format!("bad {name} value {v:?}"));
        let random_seed = match base.strategy {
            SelectionStrategy::Random { seed } => seed,
            _ => base.seed,
        };
        let axis = match (name, items.is_empty()) {
            ("ks", true) => Self::keywords_shots(),
            ("strategy", true) => Self::strategies(random_seed),
            ("method", true) => Self::methods(),
            ("epochs", true) => Self::epochs(),
            ("mode", true) => Self::modes(),
            ("ks", false) => SweepAxis::KeywordsShots(
                items
                    .iter()
                    .map(|v| {
                        let (k, s) = v.split_once(['x', ':']).ok_or_else(|| bad(v))?;
                        Ok((k.parse().map_err(|_| bad(v))?, s.parse().map_err(|_| bad(v))?))
                    })
                    .collect::<Result<_, HarnessError>>()?,
            ),
            ("strategy", false) => SweepAxis::Strategy(
                items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?,
            ),
            ("method", false) => SweepAxis::Method(
                items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?,
            ),
            ("epochs", false) => SweepAxis::Epochs(
                items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?,
            ),
            ("mode", false) => SweepAxis::Mode(
                items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?,
            ),
            _ => return Err(HarnessError::Config(format!("unknown sweep axis {name:?}"))),
        };
        Ok(axis)
    }

    /// Config and display label for grid point `i`.
    pub fn cell(&self, base: &ExperimentConfig, i: usize) -> (ExperimentConfig, String) {
        let mut c = base.clone();
        let label = match self {
            SweepAxis::KeywordsShots(v) => {
                (c.k, c.s) = v[i];
                format!("({}, {})", c.k, c.s)
            }
            SweepAxis::Strategy(v) => {
                c.strategy = v[i];
                c.strategy.short_name().to_string()
            }
            SweepAxis::Method(v) => {
                c.method = v[i];
                c.method.to_string()
            }
            SweepAxis::Epochs(v) => {
                c.epochs = v[i];
                format!("E = {}", c.epochs)
            }
            SweepAxis::Mode(v) => {
                c.mode = v[i];
                c.mode.to_string()
            }
        };
        (c, label)
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub config: ExperimentConfig,
    /// A failed cell keeps its error text; the sweep carries on.
    pub result: Result<EvalReport, String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub axis: &'static str,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn reports(&self) -> Vec<&EvalReport> {
        self.cells.iter().filter_map(|c| c.result.as_ref().ok()).collect()
    }

    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.result.as_ref().err().map(|e| (c.label.as_str(), e.as_str())))
            .collect()
    }

    pub fn report_for(&self, label: &str) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.label == label)
            .and_then(|c| c.result.as_ref().ok())
    }
}

/// Runs every grid point in order, sharing the runner's client, cache and
/// trained proxies.
pub fn run_sweep(runner: &Runner, base: &ExperimentConfig, axis: &SweepAxis) -> Result<SweepTable, HarnessError> {
    if axis.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    let cells = (0..axis.len())
        .map(|i| {
            let (config, label) = axis.cell(base, i);
            let result = runner.run(&config).map(|o| o.report).map_err(|e| {
                log::error!("sweep cell {label} failed: {e}");
                e.to_string()
            });
            SweepCell { label, config, result }
        })
        .collect();
    Ok(SweepTable { axis: axis.name(), cells })
}

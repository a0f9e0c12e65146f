//! Train-and-evaluate sweeps over one configuration axis.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ThresholdMode, TsfMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::train::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    TimeSteps,
    Rank,
    Threshold,
    Slots,
    Tsf,
    Glp,
    Lkc,
    Losses,
    LossWeights,
    Components,
}

impl Axis {
    pub const ALL: &'static [Axis] = &[
        Axis::TimeSteps,
        Axis::Rank,
        Axis::Threshold,
        Axis::Slots,
        Axis::Tsf,
        Axis::Glp,
        Axis::Lkc,
        Axis::Losses,
        Axis::LossWeights,
        Axis::Components,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::TimeSteps => "time_steps",
            Axis::Rank => "rank",
            Axis::Threshold => "threshold",
            Axis::Slots => "slots",
            Axis::Tsf => "tsf",
            Axis::Glp => "glp",
            Axis::Lkc => "lkc",
            Axis::Losses => "losses",
            Axis::LossWeights => "loss_weights",
            Axis::Components => "components",
        }
    }

    /// Grid values used when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::TimeSteps => &["2", "4", "8", "16"],
            Axis::Rank => &["20", "40", "60", "80"],
            Axis::Threshold => &["dynamic", "fixed:0.5", "fixed:1", "fixed:2"],
            Axis::Slots => &["1", "2", "3", "4", "5", "6"],
            Axis::Tsf | Axis::Glp | Axis::Lkc => &["on", "off"],
            Axis::Losses => &["full", "no_pr", "no_p", "no_r"],
            Axis::LossWeights => &["0.2:0.8", "0.8:0.2", "0.7:0.3", "0.3:0.7", "0.5:0.5"],
            Axis::Components => &["full", "no_tsf", "no_glp", "no_dth", "no_lkc"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Axis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown ablation axis {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: ModelConfig,
}

fn parse_usize(v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("grid value {v:?} is not a non-negative integer")))
}

fn on_off(v: &str) -> Result<bool> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::Config(format!("grid value {v:?}: expected `on` or `off`"))),
    }
}

/// One validated configuration per grid value; every field other than the
/// swept one is taken from `base`.
pub fn grid(axis: Axis, base: &ModelConfig, values: &[String]) -> Result<Vec<GridPoint>> {
    if values.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut c = base.clone();
        let label = match axis {
            Axis::TimeSteps => {
                c.time_steps = parse_usize(v)?;
                format!("T={v}")
            }
            Axis::Rank => {
                c.rank = parse_usize(v)?;
                format!("rank={v}")
            }
            Axis::Slots => {
                c.slot_count = parse_usize(v)?;
                format!("slots={v}")
            }
            Axis::Threshold => {
                c.threshold_mode = ThresholdMode::from_str(v)?;
                c.threshold_mode.to_string()
            }
            Axis::Tsf => {
                c.tsf_mode = if on_off(v)? { base.tsf_mode } else { TsfMode::Uniform };
                format!("tsf {v}")
            }
            Axis::Glp => {
                c.glp = on_off(v)?;
                format!("glp {v}")
            }
            Axis::Lkc => {
                c.lkc = on_off(v)?;
                format!("lkc {v}")
            }
            Axis::Losses => {
                let (p, r, label) = match v.as_str() {
                    "full" => (true, true, "Full"),
                    "no_pr" => (false, false, "W/o L_p+L_r"),
                    "no_p" => (false, true, "W/o L_p"),
                    "no_r" => (true, false, "W/o L_r"),
                    _ => {
                        return Err(Error::Config(format!(
                            "losses value {v:?}: expected full, no_pr, no_p or no_r"
                        )))
                    }
                };
                c.use_projection_loss = p;
                c.use_reconstruction_loss = r;
                label.to_string()
            }
            Axis::LossWeights => {
                let parsed = v
                    .split_once(':')
                    .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)));
                let Some((a, b)) = parsed else {
                    return Err(Error::Config(format!("loss weight pair {v:?}: expected `a:b`")));
                };
                c.w_triplet = a;
                c.w_proj_recon = b;
                format!("{a} & {b}")
            }
            Axis::Components => {
                let label = match v.as_str() {
                    "full" => "Full",
                    "no_tsf" => {
                        c.tsf_mode = TsfMode::Uniform;
                        "W/o TSF"
                    }
                    "no_glp" => {
                        c.glp = false;
                        "W/o GLP"
                    }
                    "no_dth" => {
                        c.threshold_mode = ThresholdMode::Fixed(base.v_th_init);
                        "W/o DTH"
                    }
                    "no_lkc" => {
                        c.lkc = false;
                        "W/o LKC"
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "components value {v:?}: expected full, no_tsf, no_glp, no_dth or no_lkc"
                        )))
                    }
                };
                label.to_string()
            }
        };
        c.validate()?;
        points.push(GridPoint { label, config: c });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    /// Learnable scalars in both modalities' fusion factors.
    pub fusion_params: usize,
    pub report: EvalReport,
    /// Spikes per neuron-step over the final epoch.
    pub spike_rate: f64,
    pub final_loss: f64,
}

/// Trains and evaluates every point from the same seed. When `out_dir` is
/// given, each point's metrics log goes to `<out_dir>/<index>.jsonl`.
pub fn run(points: &[GridPoint], data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut trainer = Trainer::new(&p.config)?;
        let mut log = match out_dir {
            Some(dir) => Some(fs::File::create(dir.join(format!("{i}.jsonl")))?),
            None => None,
        };
        trainer.fit(data, 0, log.as_mut().map(|f| f as &mut dyn std::io::Write))?;
        let last = trainer.history.last().expect("at least one epoch");
        let neurons: usize = last.spikes.iter().map(|s| s.neurons).sum();
        let report = trainer.evals.last().expect("final evaluation").report;
        rows.push(AblationRow {
            label: p.label.clone(),
            config_hash: p.config.hash(),
            fusion_params: trainer.model.fusion_param_count(),
            report,
            spike_rate: last.total_spikes() as f64 / neurons.max(1) as f64,
            final_loss: last.loss.total,
        });
    }
    Ok(rows)
}

/// Plain-text table with accuracies in percent.
pub fn format_table(axis: Axis, rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(axis.as_str().len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>10}  {:>10}  {:>9}",
        axis.as_str(),
        "S",
        "U",
        "HM",
        "ZSL",
        "fusion",
        "spike_rate",
        "loss"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>10}  {:>10.4}  {:>9.4}",
            r.label,
            100.0 * r.report.seen,
            100.0 * r.report.unseen,
            100.0 * r.report.hm,
            100.0 * r.report.zsl,
            r.fusion_params,
            r.spike_rate,
            r.final_loss
        );
    }
    out
}

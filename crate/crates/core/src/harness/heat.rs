use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PolicyNet;
use crate::app_model::{AppModel, FunctionId};
use crate::coordinator::{guided_explore, DirectedRunConfig, Policy, QEvaluator};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatStudyConfig {
    pub repeats: usize,
    /// Events per attempt at a single function.
    pub budget: usize,
    /// A function counts as a success when covered in more than this
    /// fraction of repeats.
    pub success_fraction: f64,
    /// Bucket lower bounds, descending, before scaling.
    pub thresholds: Vec<f64>,
    /// Mean heat at which `thresholds` apply unscaled.
    pub reference_mean: f64,
}

impl Default for HeatStudyConfig {
    fn default() -> Self {
        HeatStudyConfig {
            repeats: 13,
            budget: 200,
            success_fraction: 0.3,
            thresholds: vec![300.0, 100.0, 50.0, 20.0, 10.0],
            reference_mean: 100.0,
        }
    }
}

impl HeatStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.budget == 0 {
            return Err(Error::Config("heat study repeats and budget must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.success_fraction) {
            return Err(Error::Config("success_fraction must lie in [0, 1)".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("heat thresholds must be non-empty and strictly descending".into()));
        }
        if !(self.reference_mean > 0.0) {
            return Err(Error::Config("reference_mean must be positive".into()));
        }
        Ok(())
    }

    /// Thresholds scaled so that `mean_heat` plays the role of the reference mean.
    pub fn scaled_thresholds(&self, mean_heat: f64) -> Vec<f64> {
        let scale = mean_heat / self.reference_mean;
        self.thresholds.iter().map(|t| t * scale).collect()
    }
}

/// Mean trigger count over every function of the app, untriggered ones included.
pub fn mean_heat(heat: &BTreeMap<FunctionId, u64>, functions: &[FunctionId]) -> f64 {
    if functions.is_empty() {
        return 0.0;
    }
    let total: u64 = functions.iter().map(|f| heat.get(f).copied().unwrap_or(0)).sum();
    total as f64 / functions.len() as f64
}

/// Splits `functions` by heat: bucket 0 is `>= thresholds[0]`, bucket i is
/// `[thresholds[i], thresholds[i-1])`, and the last bucket is below every
/// threshold.
pub fn heat_buckets(
    heat: &BTreeMap<FunctionId, u64>,
    functions: &[FunctionId],
    thresholds: &[f64],
) -> Vec<Vec<FunctionId>> {
    let mut out = vec![Vec::new(); thresholds.len() + 1];
    for &f in functions {
        let h = heat.get(&f).copied().unwrap_or(0) as f64;
        let b = thresholds.iter().position(|&t| h >= t).unwrap_or(thresholds.len());
        out[b].push(f);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionOutcome {
    pub function_id: FunctionId,
    pub heat: u64,
    pub covered_repeats: usize,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatBucket {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub functions: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
}

impl HeatBucket {
    pub fn label(&self) -> String {
        match (self.lo, self.hi) {
            (Some(lo), None) => format!(">={lo:.0}"),
            (Some(lo), Some(hi)) => format!("{lo:.0}-{hi:.0}"),
            (None, Some(hi)) => format!("<{hi:.0}"),
            (None, None) => "all".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatTable {
    pub mean_heat: f64,
    pub thresholds: Vec<f64>,
    pub repeats: usize,
    pub budget: usize,
    pub success_fraction: f64,
    /// Hottest bucket first.
    pub buckets: Vec<HeatBucket>,
    pub functions: Vec<FunctionOutcome>,
}

impl HeatTable {
    /// Success rates never rise from a hotter bucket to a colder one
    /// (empty buckets are skipped).
    pub fn is_monotone(&self) -> bool {
        let rates: Vec<f64> = self.buckets.iter().filter_map(|b| b.success_rate).collect();
        rates.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn render_markdown(&self) -> String {
        let mut out = String::from("| heat |");
        for b in &self.buckets {
            write!(out, " {} |", b.label()).unwrap();
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.buckets.len()));
        out.push_str("\n| functions |");
        for b in &self.buckets {
            write!(out, " {} |", b.functions).unwrap();
        }
        out.push_str("\n| success rate |");
        for b in &self.buckets {
            match b.success_rate {
                Some(r) => write!(out, " {:.1}% ({}/{}) |", 100.0 * r, b.successes, b.functions).unwrap(),
                None => out.push_str(" - |"),
            }
        }
        write!(
            out,
            "\n\nMean heat {:.1}; success means covered in more than {:.0}% of {} attempts of {} events.\n",
            self.mean_heat,
            100.0 * self.success_fraction,
            self.repeats,
            self.budget
        )
        .unwrap();
        out
    }
}

/// Tries every function of `functions` `repeats` times with the greedy
/// policy from a fresh launch and tabulates success by heat bucket.
pub fn heat_study(
    model: &AppModel,
    net: &PolicyNet,
    heat: &BTreeMap<FunctionId, u64>,
    functions: &[FunctionId],
    cfg: &HeatStudyConfig,
    seed: u64,
) -> Result<HeatTable> {
    cfg.validate()?;
    let mean = mean_heat(heat, functions);
    let thresholds = cfg.scaled_thresholds(mean);
    let run_cfg = DirectedRunConfig {
        max_directed_steps: cfg.budget,
        event_budget: cfg.budget,
        epsilon: 0.0,
        loop_escape: None,
    };
    let mut q = QEvaluator::new(net.featurizer.clone());
    let mut outcomes = Vec::with_capacity(functions.len());
    for &f in functions {
        let mut covered = 0;
        for r in 0..cfg.repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (u64::from(f) << 20) ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let mut policy = Policy::Greedy {
                params: &net.params,
                q: &mut q,
            };
            let rep = guided_explore(model, &mut policy, &[f], &run_cfg, &mut rng, &mut |_| {})?;
            covered += rep.covered_count();
        }
        outcomes.push(FunctionOutcome {
            function_id: f,
            heat: heat.get(&f).copied().unwrap_or(0),
            covered_repeats: covered,
            success: covered as f64 > cfg.success_fraction * cfg.repeats as f64,
        });
    }
    let by_id: BTreeMap<FunctionId, bool> = outcomes.iter().map(|o| (o.function_id, o.success)).collect();
    let buckets = heat_buckets(heat, functions, &thresholds)
        .into_iter()
        .enumerate()
        .map(|(i, members)| {
            let successes = members.iter().filter(|f| by_id[f]).count();
            HeatBucket {
                lo: thresholds.get(i).copied(),
                hi: i.checked_sub(1).map(|j| thresholds[j]),
                functions: members.len(),
                successes,
                success_rate: (!members.is_empty()).then(|| successes as f64 / members.len() as f64),
            }
        })
        .collect();
    Ok(HeatTable {
        mean_heat: mean,
        thresholds,
        repeats: cfg.repeats,
        budget: cfg.budget,
        success_fraction: cfg.success_fraction,
        buckets,
        functions: outcomes,
    })
}

/// Pools per-app tables into one suite table by summing bucket counts.
/// Each input was bucketed at its own scaled thresholds, so the pooled
/// bounds are given in reference units (mean heat = `cfg.reference_mean`).
pub fn pool_heat_tables(cfg: &HeatStudyConfig, tables: &[HeatTable]) -> Result<HeatTable> {
    let n = cfg.thresholds.len() + 1;
    if tables.is_empty() || tables.iter().any(|t| t.buckets.len() != n) {
        return Err(Error::Validation(format!("pooling needs tables with {n} buckets each")));
    }
    let buckets = (0..n)
        .map(|i| {
            let functions: usize = tables.iter().map(|t| t.buckets[i].functions).sum();
            let successes: usize = tables.iter().map(|t| t.buckets[i].successes).sum();
            HeatBucket {
                lo: cfg.thresholds.get(i).copied(),
                hi: i.checked_sub(1).map(|j| cfg.thresholds[j]),
                functions,
                successes,
                success_rate: (functions > 0).then(|| successes as f64 / functions as f64),
            }
        })
        .collect();
    Ok(HeatTable {
        mean_heat: cfg.reference_mean,
        thresholds: cfg.thresholds.clone(),
        repeats: cfg.repeats,
        budget: cfg.budget,
        success_fraction: cfg.success_fraction,
        buckets,
        functions: tables.iter().flat_map(|t| t.functions.iter().cloned()).collect(),
    })
}

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::PolicyKind;
use crate::app_model::FunctionId;
use crate::coordinator::TargetResult;
use crate::error::{Error, Result};

/// One directed run: a policy walking a target list under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub app_fingerprint: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub budget: usize,
    pub max_directed_steps: usize,
    pub targets: Vec<TargetResult>,
    pub covered: usize,
    pub total_events: usize,
    pub loop_escapes: usize,
    /// Training-time trigger counts of the model that drove the run.
    pub heat: BTreeMap<FunctionId, u64>,
    pub manifest: String,
}

impl RunReport {
    pub fn target_ids(&self) -> Vec<FunctionId> {
        self.targets.iter().map(|t| t.function_id).collect()
    }

    pub fn all_covered(&self) -> bool {
        self.targets.iter().all(|t| t.covered)
    }

    /// Mean `events_used` over covered targets.
    pub fn mean_events(&self) -> Option<f64> {
        let used: Vec<usize> = self.targets.iter().filter(|t| t.covered).map(|t| t.events_used).collect();
        if used.is_empty() {
            return None;
        }
        Some(used.iter().sum::<usize>() as f64 / used.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub covered: usize,
    pub mean_events: Option<f64>,
    pub total_events: usize,
    pub all_covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub app_fingerprint: String,
    pub seed: u64,
    pub targets: usize,
    /// One entry per column of [`MergedReport::policies`].
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub policy: PolicyKind,
    pub runs: usize,
    pub covered: usize,
    pub mean_covered: f64,
    /// Fraction of runs that covered every target within budget.
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub policies: Vec<PolicyKind>,
    pub rows: Vec<MergedRow>,
    pub summary: Vec<ColumnSummary>,
}

/// Joins runs on (app, seed). Runs sharing a key must have walked the same
/// target list, and each policy may appear once per key.
pub fn merge_reports(runs: &[RunReport]) -> Result<MergedReport> {
    if runs.is_empty() {
        return Err(Error::Validation("no run reports to merge".into()));
    }
    let mut policies: Vec<PolicyKind> = runs.iter().map(|r| r.policy).collect();
    policies.sort();
    policies.dedup();
    let mut groups: BTreeMap<(String, u64), Vec<&RunReport>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.app_fingerprint.clone(), r.seed)).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((app, seed), group) in groups {
        let ids = group[0].target_ids();
        let mut cells: Vec<Option<Cell>> = vec![None; policies.len()];
        for r in &group {
            if r.target_ids() != ids {
                return Err(Error::ReportMismatch(format!(
                    "app {app} seed {seed}: {} and {} walked different target sets",
                    group[0].policy, r.policy
                )));
            }
            let col = policies.iter().position(|p| *p == r.policy).expect("policy listed");
            if cells[col].is_some() {
                return Err(Error::ReportMismatch(format!(
                    "app {app} seed {seed}: more than one {} run",
                    r.policy
                )));
            }
            cells[col] = Some(Cell {
                covered: r.covered,
                mean_events: r.mean_events(),
                total_events: r.total_events,
                all_covered: r.all_covered(),
            });
        }
        rows.push(MergedRow {
            app_fingerprint: app,
            seed,
            targets: ids.len(),
            cells,
        });
    }
    let summary = policies
        .iter()
        .enumerate()
        .map(|(col, &policy)| {
            let cells: Vec<&Cell> = rows.iter().filter_map(|r| r.cells[col].as_ref()).collect();
            let covered: usize = cells.iter().map(|c| c.covered).sum();
            let runs = cells.len();
            ColumnSummary {
                policy,
                runs,
                covered,
                mean_covered: covered as f64 / runs as f64,
                success_rate: cells.iter().filter(|c| c.all_covered).count() as f64 / runs as f64,
            }
        })
        .collect();
    Ok(MergedReport {
        policies,
        rows,
        summary,
    })
}

fn opt2(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_default()
}

pub fn render_csv(m: &MergedReport) -> String {
    let mut out = String::from("app,seed,targets");
    for p in &m.policies {
        write!(out, ",{p}_covered,{p}_mean_events,{p}_total_events,{p}_all_covered").unwrap();
    }
    out.push('\n');
    for r in &m.rows {
        write!(out, "{},{},{}", r.app_fingerprint, r.seed, r.targets).unwrap();
        for c in &r.cells {
            match c {
                Some(c) => write!(
                    out,
                    ",{},{},{},{}",
                    c.covered,
                    opt2(c.mean_events),
                    c.total_events,
                    c.all_covered
                )
                .unwrap(),
                None => out.push_str(",,,,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Column of the unique best coverage in a row, if there is one.
fn row_winner(r: &MergedRow) -> Option<usize> {
    if r.cells.len() < 2 {
        return None;
    }
    let best = r.cells.iter().flatten().map(|c| c.covered).max()?;
    let mut at = r.cells.iter().enumerate().filter(|(_, c)| c.as_ref().is_some_and(|c| c.covered == best));
    let first = at.next()?.0;
    at.next().is_none().then_some(first)
}

pub fn render_markdown(m: &MergedReport) -> String {
    let mut out = String::from("| app | seed | targets |");
    for p in &m.policies {
        write!(out, " {p} |").unwrap();
    }
    out.push_str("\n|---|---:|---:|");
    out.push_str(&"---:|".repeat(m.policies.len()));
    out.push('\n');
    for r in &m.rows {
        write!(out, "| {} | {} | {} |", r.app_fingerprint, r.seed, r.targets).unwrap();
        let winner = row_winner(r);
        for (col, c) in r.cells.iter().enumerate() {
            match c {
                Some(c) => {
                    let n = if winner == Some(col) {
                        format!("**{}**", c.covered)
                    } else {
                        c.covered.to_string()
                    };
                    match c.mean_events {
                        Some(e) => write!(out, " {n} ({e:.1}) |").unwrap(),
                        None => write!(out, " {n} |").unwrap(),
                    }
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\nCells: targets covered (mean events to cover).\n\n");
    out.push_str("| policy | runs | covered | mean covered | success rate |\n|---|---:|---:|---:|---:|\n");
    for s in &m.summary {
        writeln!(
            out,
            "| {} | {} | {} | {:.2} | {:.1}% |",
            s.policy,
            s.runs,
            s.covered,
            s.mean_covered,
            100.0 * s.success_rate
        )
        .unwrap();
    }
    out
}

/// One changed set walked by one policy under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitRow {
    pub set: String,
    pub members: Vec<FunctionId>,
    pub seed: u64,
    pub policy: PolicyKind,
    /// Events until every member was covered, or the budget when some
    /// member never was.
    pub events: usize,
    pub all_covered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitSummary {
    pub policy: PolicyKind,
    pub runs: usize,
    pub mean_events: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitReport {
    pub app_fingerprint: String,
    pub budget: usize,
    pub policies: Vec<PolicyKind>,
    pub sets: Vec<String>,
    pub rows: Vec<CommitRow>,
    pub summary: Vec<CommitSummary>,
    pub manifest: String,
}

/// Censored events-to-cover-all for a directed run over a set's members.
pub fn events_to_cover_all(targets: &[TargetResult], budget: usize) -> (usize, bool) {
    if targets.iter().all(|t| t.covered) {
        (targets.iter().map(|t| t.events_used).max().unwrap_or(0), true)
    } else {
        (budget, false)
    }
}

pub(crate) fn summarize_commits(policies: &[PolicyKind], rows: &[CommitRow]) -> Vec<CommitSummary> {
    policies
        .iter()
        .map(|&policy| {
            let mine: Vec<&CommitRow> = rows.iter().filter(|r| r.policy == policy).collect();
            let runs = mine.len().max(1) as f64;
            CommitSummary {
                policy,
                runs: mine.len(),
                mean_events: mine.iter().map(|r| r.events as f64).sum::<f64>() / runs,
                success_rate: mine.iter().filter(|r| r.all_covered).count() as f64 / runs,
            }
        })
        .collect()
}

impl CommitReport {
    /// Mean censored events for `set` under `policy`, across seeds.
    pub fn mean_for(&self, set: &str, policy: PolicyKind) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.set == set && r.policy == policy)
            .map(|r| r.events as f64)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary_for(&self, policy: PolicyKind) -> Option<&CommitSummary> {
        self.summary.iter().find(|s| s.policy == policy)
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("set,members,seed,policy,events,all_covered\n");
        for r in &self.rows {
            let members: Vec<String> = r.members.iter().map(|m| m.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.set,
                members.join(" "),
                r.seed,
                r.policy,
                r.events,
                r.all_covered
            )
            .unwrap();
        }
        out
    }

    /// Rows are changed sets, columns are policies.
    pub fn render_markdown(&self) -> String {
        let mut out = String::from("| commit | size |");
        for p in &self.policies {
            write!(out, " {p} |").unwrap();
        }
        out.push_str("\n|---|---:|");
        out.push_str(&"---:|".repeat(self.policies.len()));
        out.push('\n');
        for set in &self.sets {
            let size = self.rows.iter().find(|r| &r.set == set).map_or(0, |r| r.members.len());
            write!(out, "| {set} | {size} |").unwrap();
            for &p in &self.policies {
                write!(out, " {} |", opt2(self.mean_for(set, p))).unwrap();
            }
            out.push('\n');
        }
        out.push_str("| Avg. | |");
        for s in &self.summary {
            write!(out, " {:.2} |", s.mean_events).unwrap();
        }
        out.push_str("\n| Success rate | |");
        for s in &self.summary {
            write!(out, " {:.1}% |", 100.0 * s.success_rate).unwrap();
        }
        write!(out, "\n\nEvents to cover every changed function; runs that miss one count as {}.\n", self.budget).unwrap();
        out
    }
}

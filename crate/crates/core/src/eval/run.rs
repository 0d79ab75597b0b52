use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{aucpr, auroc, mean_std, pr_curve, roc_curve};
use crate::data::{AgentId, LabelRecord};
use crate::error::{Error, Result};
use crate::scoring::{ReportRow, Variant};
use crate::sim::ANOMALY_TYPES;

/// Subset name covering every anomaly type.
pub const MIXED: &str = "mixed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Event,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub level: Level,
    pub variant: String,
    pub subset: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: f64,
    pub aucpr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    /// Subsets that had no positives and were skipped.
    pub skipped: Vec<String>,
}

impl MetricsTable {
    pub fn get(&self, level: Level, variant: Variant, subset: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.level == level && r.variant == variant.name() && r.subset == subset)
    }
}

/// Joins report rows with labels one-to-one on `(agent, event index)`.
pub fn align<'a>(
    rows: &'a [ReportRow],
    labels: &'a [LabelRecord],
) -> Result<Vec<(&'a ReportRow, &'a LabelRecord)>> {
    let by_key: BTreeMap<(AgentId, usize), &LabelRecord> = labels
        .iter()
        .map(|l| ((l.agent_id, l.event_index), l))
        .collect();
    if by_key.len() != labels.len() {
        return Err(Error::Alignment("duplicate label rows".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} report rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut seen = BTreeSet::new();
    rows.iter()
        .map(|r| {
            let key = (r.agent_id, r.event_index);
            if !seen.insert(key) {
                return Err(Error::Alignment(format!("duplicate report row {key:?}")));
            }
            by_key
                .get(&key)
                .map(|l| (r, *l))
                .ok_or_else(|| Error::Alignment(format!("no label for event {key:?}")))
        })
        .collect()
}

fn subsets() -> Vec<&'static str> {
    std::iter::once(MIXED).chain(ANOMALY_TYPES).collect()
}

/// Positives of `subset` plus every non-anomalous unit.
fn select(subset: &str, anomalous: bool, types: &BTreeSet<&str>) -> Option<bool> {
    if !anomalous {
        Some(false)
    } else if subset == MIXED || types.contains(subset) {
        Some(true)
    } else {
        None
    }
}

/// Event- and agent-level AUROC/AUCPR for every variant on the mixed set
/// and on each anomaly type against all normal units.
pub fn evaluate_run(rows: &[ReportRow], labels: &[LabelRecord]) -> Result<MetricsTable> {
    let joined = align(rows, labels)?;
    let mut agents: BTreeMap<AgentId, (bool, BTreeSet<&str>, Vec<&ReportRow>)> = BTreeMap::new();
    for (r, l) in &joined {
        let a = agents.entry(r.agent_id).or_default();
        if l.is_anomalous == 1 {
            a.0 = true;
            a.1.insert(l.anomaly_type.as_str());
        }
        a.2.push(r);
    }
    let mut table = MetricsTable::default();
    for subset in subsets() {
        let events: Vec<(bool, &ReportRow)> = joined
            .iter()
            .filter_map(|(r, l)| {
                let types = BTreeSet::from([l.anomaly_type.as_str()]);
                select(subset, l.is_anomalous == 1, &types).map(|y| (y, *r))
            })
            .collect();
        let agent_units: Vec<(bool, &Vec<&ReportRow>)> = agents
            .values()
            .filter_map(|(anom, types, rs)| select(subset, *anom, types).map(|y| (y, rs)))
            .collect();
        let n_pos = events.iter().filter(|e| e.0).count();
        if n_pos == 0 {
            log::warn!("stage=evaluate subset={subset} skipped=no_anomalies");
            table.skipped.push(subset.to_string());
            continue;
        }
        for variant in Variant::ALL {
            let labels: Vec<bool> = events.iter().map(|e| e.0).collect();
            let scores: Vec<f64> = events.iter().map(|e| variant.score(e.1)).collect();
            table.rows.push(MetricRow {
                level: Level::Event,
                variant: variant.name().into(),
                subset: subset.into(),
                n_pos,
                n_neg: labels.len() - n_pos,
                auroc: auroc(&labels, &scores)?,
                aucpr: aucpr(&labels, &scores)?,
            });
            let labels: Vec<bool> = agent_units.iter().map(|a| a.0).collect();
            let scores: Vec<f64> = agent_units
                .iter()
                .map(|a| a.1.iter().map(|r| variant.score(r)).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let pos = labels.iter().filter(|l| **l).count();
            table.rows.push(MetricRow {
                level: Level::Agent,
                variant: variant.name().into(),
                subset: subset.into(),
                n_pos: pos,
                n_neg: labels.len() - pos,
                auroc: auroc(&labels, &scores)?,
                aucpr: aucpr(&labels, &scores)?,
            });
        }
    }
    table.rows.sort_by(|a, b| (a.level, &a.subset).cmp(&(b.level, &b.subset)));
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub level: Level,
    pub variant: String,
    pub subset: String,
    pub runs: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub aucpr_mean: f64,
    pub aucpr_std: f64,
}

/// Mean ± sample standard deviation of each metric over runs.
pub fn aggregate(tables: &[MetricsTable]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Level, String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in tables {
        for r in &t.rows {
            let g = groups
                .entry((r.level, r.subset.clone(), r.variant.clone()))
                .or_default();
            g.0.push(r.auroc);
            g.1.push(r.aucpr);
        }
    }
    let order = |v: &str| Variant::ALL.iter().position(|x| x.name() == v).unwrap_or(usize::MAX);
    let mut out: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((level, subset, variant), (roc, pr))| {
            let (auroc_mean, auroc_std) = mean_std(&roc);
            let (aucpr_mean, aucpr_std) = mean_std(&pr);
            AggregateRow {
                level,
                variant,
                subset,
                runs: roc.len(),
                auroc_mean,
                auroc_std,
                aucpr_mean,
                aucpr_std,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.level, &a.subset, order(&a.variant)).cmp(&(b.level, &b.subset, order(&b.variant)))
    });
    out
}

/// Flat rows for external plotting: score histograms per class, ROC and PR
/// points, for every variant on the mixed event-level set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub kind: String,
    pub variant: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn plot_data(rows: &[ReportRow], labels: &[LabelRecord]) -> Result<Vec<PlotPoint>> {
    let joined = align(rows, labels)?;
    let y: Vec<bool> = joined.iter().map(|(_, l)| l.is_anomalous == 1).collect();
    let mut out = Vec::new();
    let point = |kind: &str, v: Variant, series: &str, x: f64, y: f64| PlotPoint {
        kind: kind.into(),
        variant: v.name().into(),
        series: series.into(),
        x,
        y,
    };
    for v in Variant::ALL {
        let s: Vec<f64> = joined.iter().map(|(r, _)| v.score(r)).collect();
        for (class, flag) in [("normal", false), ("anomalous", true)] {
            let mut counts = [0usize; HISTOGRAM_BINS];
            for (score, _) in s.iter().zip(&y).filter(|p| *p.1 == flag) {
                let bin = ((score * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                counts[bin] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let center = (b as f64 + 0.5) / HISTOGRAM_BINS as f64;
                out.push(point("histogram", v, class, center, *c as f64));
            }
        }
        if y.iter().any(|l| *l) && y.iter().any(|l| !*l) {
            for (x, t) in roc_curve(&y, &s)? {
                out.push(point("roc", v, MIXED, x, t));
            }
            for (r, p) in pr_curve(&y, &s)? {
                out.push(point("pr", v, MIXED, r, p));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Term;
    use crate::sim::{TAG_ABSENCE, TAG_ABSENCE_SOURCE, TAG_NORMAL, TAG_UNEXPECTED};

    fn row(agent: AgentId, e: usize, node: f64, obs: f64, notobs: f64) -> ReportRow {
        ReportRow {
            agent_id: agent,
            event_index: e,
            node_pct: node,
            obs_pct: obs,
            notobs_pct: notobs,
            combined: node.max(obs).max(notobs),
            argmax_term: Term::Node,
        }
    }

    fn label(agent: AgentId, e: usize, tag: &str) -> LabelRecord {
        let anomalous = tag != TAG_NORMAL && tag != TAG_ABSENCE_SOURCE;
        LabelRecord {
            agent_id: agent,
            event_index: e,
            is_anomalous: u8::from(anomalous),
            anomaly_type: tag.into(),
        }
    }

    #[test]
    fn variants_and_subsets() {
        let rows = vec![
            row(1, 0, 0.2, 0.9, 0.0),
            row(2, 0, 0.3, 0.0, 0.8),
            row(3, 0, 0.5, 0.1, 0.1),
            row(3, 1, 0.4, 0.2, 0.3),
            row(4, 0, 0.1, 0.0, 0.0),
        ];
        let labels = vec![
            label(1, 0, TAG_UNEXPECTED),
            label(2, 0, TAG_ABSENCE),
            label(3, 0, TAG_NORMAL),
            label(3, 1, TAG_ABSENCE_SOURCE),
            label(4, 0, TAG_NORMAL),
        ];
        let t = evaluate_run(&rows, &labels).unwrap();
        // Coordination has no positives.
        assert_eq!(t.skipped, vec!["synthetic_coordination".to_string()]);
        assert_eq!(t.rows.len(), 2 * 3 * 4);
        let get = |v, s| t.get(Level::Event, v, s).unwrap().auroc;
        assert_eq!(get(Variant::NodeObs, TAG_UNEXPECTED), 1.0);
        assert_eq!(get(Variant::Node, TAG_UNEXPECTED), 1.0 / 3.0);
        assert_eq!(get(Variant::NodeNotobs, TAG_ABSENCE), 1.0);
        let agent = t.get(Level::Agent, Variant::Full, MIXED).unwrap();
        assert_eq!((agent.n_pos, agent.n_neg), (2, 2));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let rows = vec![row(1, 0, 0.2, 0.0, 0.0)];
        assert!(matches!(
            evaluate_run(&rows, &[label(1, 1, TAG_NORMAL)]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(evaluate_run(&rows, &[]), Err(Error::Alignment(_))));
    }

    #[test]
    fn aggregate_mean_and_std() {
        let mk = |a| MetricsTable {
            rows: vec![MetricRow {
                level: Level::Event,
                variant: "full".into(),
                subset: MIXED.into(),
                n_pos: 1,
                n_neg: 1,
                auroc: a,
                aucpr: 1.0,
            }],
            skipped: vec![],
        };
        let agg = aggregate(&[mk(0.6), mk(0.8)]);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].auroc_mean - 0.7).abs() < 1e-12);
        assert!((agg[0].auroc_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg[0].aucpr_std, 0.0);
    }
}

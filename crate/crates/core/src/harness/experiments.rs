use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::report::{fmt_ratio, ExperimentReport, Table, INSUFFICIENT_DATA};
use super::{CellOutcome, ConceptSplit, HarnessError, Workbench};
use crate::cells::{compute_injection_values, count_at_threshold, ranked, scan_columns, Metric, ValueMethod};
use crate::injection::{decide, CompiledPlan, ConceptState, InjectionPlan};
use crate::probes::Probe;
use crate::seeds;

impl Workbench {
    /// Inputs that determine every report, echoed next to it.
    pub fn fingerprint(&self) -> serde_json::Value {
        let mut h = Sha256::new();
        for p in self.model.flat_params() {
            h.update(p.to_le_bytes());
        }
        let params: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let mut h = Sha256::new();
        for r in &self.manifest.records {
            h.update(r.id.as_bytes());
            h.update(serde_json::to_vec(&r.train).expect("train serialises"));
        }
        let manifest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        serde_json::json!({
            "harness": self.config,
            "model_params_sha256": params,
            "manifest_sha256": manifest,
            "manifest_samples": self.manifest.len(),
            "scope_neurons": self.scope().len(),
        })
    }

    fn report(&self, id: &str, extra: serde_json::Value, tables: Vec<Table>, notes: Vec<String>) -> ExperimentReport {
        let mut config = self.fingerprint();
        config["experiment"] = extra;
        ExperimentReport { id: id.to_string(), seed: self.config.seed, config, tables, notes }
    }

    fn splits(&self, concepts: &[String]) -> Result<Vec<ConceptSplit>, HarnessError> {
        concepts.iter().map(|c| self.split(c)).collect()
    }

    /// Concepts whose forced change can flip the task label.
    pub fn relevant_set(&self) -> Result<BTreeSet<String>, HarnessError> {
        Ok(self.dag.relevant_concepts(self.dag.task())?)
    }
}

fn cells_table(name: &str, cells: &[CellOutcome]) -> Table {
    let mut t = Table::new(name, &CellOutcome::HEADER);
    for c in cells {
        t.push(c.row());
    }
    t
}

/// Concept rows by condition columns of mean success.
fn wide_table(name: &str, cells: &[CellOutcome], conditions: &[String]) -> Table {
    let mut header = vec!["concept".to_string()];
    header.extend(conditions.iter().cloned());
    let mut t = Table { name: name.to_string(), header, rows: Vec::new() };
    let mut concepts: Vec<&str> = Vec::new();
    for c in cells {
        if !concepts.contains(&c.concept.as_str()) {
            concepts.push(&c.concept);
        }
    }
    for concept in concepts {
        let mut row = vec![concept.to_string()];
        for cond in conditions {
            let cell = cells.iter().find(|c| c.concept == concept && &c.condition == cond);
            row.push(fmt_ratio(cell.and_then(|c| c.mean)));
        }
        t.push(row);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metrics: Vec<Metric>,
    pub cells: Vec<CellOutcome>,
}

impl MetricComparison {
    pub fn cell(&self, concept: &str, metric: Metric) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.concept == concept && c.condition == metric.name())
    }

    /// Mean over concepts of the non-null cells for `metric`.
    pub fn average(&self, metric: Metric) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.condition == metric.name()).filter_map(|c| c.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Full pipeline per (concept, metric) with median values.
pub fn metric_comparison(wb: &Workbench, concepts: &[String], metrics: &[Metric]) -> Result<MetricComparison, HarnessError> {
    let mut cells = Vec::new();
    for split in wb.splits(concepts)? {
        for &m in metrics {
            cells.push(wb.pipeline_cell(&split, m, ValueMethod::Median, usize::MAX, usize::MAX, m.name())?);
        }
    }
    Ok(MetricComparison { metrics: metrics.to_vec(), cells })
}

impl MetricComparison {
    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        let conditions: Vec<String> = self.metrics.iter().map(|m| m.name().to_string()).collect();
        let mut success = wide_table("success", &self.cells, &conditions);
        let mut avg = vec!["average".to_string()];
        avg.extend(self.metrics.iter().map(|&m| fmt_ratio(self.average(m))));
        success.push(avg);
        wb.report(
            "metrics",
            serde_json::json!({ "metrics": conditions, "values": "median" }),
            vec![cells_table("cells", &self.cells), success],
            vec!["null: no neuron above the sensitivity floor".into()],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationComparison {
    pub cells: Vec<CellOutcome>,
}

impl ActivationComparison {
    pub fn average(&self, method: ValueMethod) -> Option<f64> {
        let name = method.to_string();
        let v: Vec<f64> = self.cells.iter().filter(|c| c.condition == name).filter_map(|c| c.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        let conditions = vec!["median".to_string(), "mode".to_string()];
        let mut success = wide_table("success", &self.cells, &conditions);
        success.push(vec!["average".into(), fmt_ratio(self.average(ValueMethod::Median)), fmt_ratio(self.average(ValueMethod::Mode))]);
        wb.report(
            "activation",
            serde_json::json!({ "metric": "intersection", "methods": conditions }),
            vec![cells_table("cells", &self.cells), success],
            vec![],
        )
    }
}

/// One selection per concept (intersection metric), evaluated with median and with mode values.
pub fn activation_method_comparison(wb: &Workbench, concepts: &[String]) -> Result<ActivationComparison, HarnessError> {
    let mut cells = Vec::new();
    for split in wb.splits(concepts)? {
        let selected = wb.select(&split, Metric::Intersection, usize::MAX, usize::MAX)?;
        for method in [ValueMethod::Median, ValueMethod::Mode] {
            cells.push(wb.outcome(&split, selected.as_ref(), method, usize::MAX, usize::MAX, &method.to_string())?);
        }
    }
    Ok(ActivationComparison { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub concept: String,
    /// Sweep parameter of each point.
    pub xs: Vec<usize>,
    pub points: Vec<CellOutcome>,
}

impl Curve {
    pub fn values(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.mean).collect()
    }

    pub fn at(&self, x: usize) -> Option<f64> {
        self.xs.iter().position(|&v| v == x).and_then(|i| self.points[i].mean)
    }

    pub fn max(&self) -> Option<f64> {
        self.points.iter().filter_map(|p| p.mean).reduce(f64::max)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.mean)
    }
}

fn curves_report(wb: &Workbench, id: &str, param: &str, curves: &[Curve], extra: serde_json::Value) -> ExperimentReport {
    let cells: Vec<CellOutcome> = curves.iter().flat_map(|c| c.points.iter().cloned()).collect();
    let mut shape = Table::new("shape", &["concept", "max", "argmax", "first", "last"]);
    for c in curves {
        let argmax = c
            .points
            .iter()
            .zip(&c.xs)
            .filter_map(|(p, x)| p.mean.map(|m| (m, *x)))
            .fold(None, |best: Option<(f64, usize)>, cur| if best.is_none_or(|b| cur.0 > b.0) { Some(cur) } else { best });
        shape.push(vec![
            c.concept.clone(),
            fmt_ratio(c.max()),
            argmax.map_or_else(|| "null".into(), |a| a.1.to_string()),
            fmt_ratio(c.points.first().and_then(|p| p.mean)),
            fmt_ratio(c.last()),
        ]);
    }
    let conditions: Vec<String> = curves.first().map(|c| c.xs.iter().map(|x| x.to_string()).collect()).unwrap_or_default();
    let wide = wide_table("curve", &cells, &conditions);
    wb.report(id, extra, vec![cells_table("cells", &cells), wide, shape], vec![format!("condition column: {param}")])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeuronSweep {
    pub curves: Vec<Curve>,
}

impl NeuronSweep {
    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        curves_report(wb, "neurons", "injected neurons", &self.curves, serde_json::json!({ "ranking": "intersection", "values": "median" }))
    }
}

/// Success when injecting the top-k neurons by intersection sensitivity, for
/// each k in `counts` plus the full scope.
pub fn neuron_count_sweep(wb: &Workbench, concepts: &[String], counts: &[usize]) -> Result<NeuronSweep, HarnessError> {
    let total = wb.scope().len();
    let mut xs: Vec<usize> = counts.iter().map(|&k| k.min(total)).collect();
    xs.push(total);
    xs.sort_unstable();
    xs.dedup();
    let mut curves = Vec::new();
    for split in wb.splits(concepts)? {
        let ds = wb.dataset(&split, usize::MAX, usize::MAX)?;
        let order: Vec<_> = ranked(&scan_columns(&ds, Metric::Intersection)).into_iter().map(|r| r.neuron).collect();
        let mut points = Vec::new();
        for &k in &xs {
            let (present, absent) = if k == 0 {
                (InjectionPlan::empty(&split.concept, ConceptState::Present), InjectionPlan::empty(&split.concept, ConceptState::Absent))
            } else {
                compute_injection_values(&ds, &order[..k], ValueMethod::Median)?
            };
            let sets = wb.evaluate(&split.sets, &present, &absent)?;
            points.push(CellOutcome {
                concept: split.concept.clone(),
                condition: k.to_string(),
                positives: ds.acts_p.rows(),
                negatives: ds.acts_n.rows(),
                neurons: k,
                threshold: None,
                mean: super::mean_ratio(&sets),
                sets,
            });
        }
        curves.push(Curve { concept: split.concept.clone(), xs: xs.clone(), points });
    }
    Ok(NeuronSweep { curves })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSweep {
    pub curves: Vec<Curve>,
}

impl DataSweep {
    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        curves_report(
            wb,
            "data",
            "labeled samples (half positive)",
            &self.curves,
            serde_json::json!({ "metric": "intersection", "values": "median" }),
        )
    }
}

/// Full pipeline with `size/2` positives and `size/2` negatives; the
/// validation set stays fixed.
pub fn data_efficiency_sweep(wb: &Workbench, concepts: &[String], sizes: &[usize]) -> Result<DataSweep, HarnessError> {
    let mut curves = Vec::new();
    for split in wb.splits(concepts)? {
        let points = sizes
            .iter()
            .map(|&s| wb.pipeline_cell(&split, Metric::Intersection, ValueMethod::Median, s / 2, s / 2, &s.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        curves.push(Curve { concept: split.concept.clone(), xs: sizes.to_vec(), points });
    }
    Ok(DataSweep { curves })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub concept: String,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains one probe per concept over the harness scope.
pub fn train_probes(wb: &Workbench, concepts: &[String]) -> Result<Vec<(Probe, ProbeSummary)>, HarnessError> {
    wb.splits(concepts)?
        .iter()
        .map(|split| {
            let fit = wb.train_probe(split)?;
            let summary = ProbeSummary {
                concept: split.concept.clone(),
                test_accuracy: fit.test_accuracy,
                train_size: fit.train_size,
                test_size: fit.test_size,
            };
            Ok((fit.probe, summary))
        })
        .collect()
}

fn probes_table(probes: &[ProbeSummary]) -> Table {
    let mut t = Table::new("probes", &["concept", "test_accuracy", "train_size", "test_size"]);
    for p in probes {
        t.push(vec![p.concept.clone(), fmt_ratio(Some(p.test_accuracy)), p.train_size.to_string(), p.test_size.to_string()]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationRow {
    /// Concept whose present plan is injected.
    pub injected: String,
    /// Concept whose probe is read.
    pub probed: String,
    pub samples: usize,
    pub flip_rate: Option<f64>,
    pub empty_plan_flip_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationResult {
    pub probes: Vec<ProbeSummary>,
    pub rows: Vec<RelationRow>,
}

impl RelationResult {
    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        let mut t = Table::new("relation", &["injected", "probed", "samples", "flip_rate", "empty_plan_flip_rate"]);
        for r in &self.rows {
            t.push(vec![
                r.injected.clone(),
                r.probed.clone(),
                r.samples.to_string(),
                r.flip_rate.map_or_else(|| INSUFFICIENT_DATA.into(), |v| fmt_ratio(Some(v))),
                r.empty_plan_flip_rate.map_or_else(|| INSUFFICIENT_DATA.into(), |v| fmt_ratio(Some(v))),
            ]);
        }
        wb.report(
            "relation",
            serde_json::json!({ "cap": wb.config.relation_cap, "probe_arch": wb.config.probe_arch }),
            vec![t, probes_table(&self.probes)],
            vec!["samples: eval-pool trains where both the ground truth and the probe report the probed concept".into()],
        )
    }
}

/// Injects each concept's present plan into samples that have the other
/// concept, and measures how often the other concept's probe stops firing.
pub fn relation_experiment(wb: &Workbench, a: &str, b: &str) -> Result<RelationResult, HarnessError> {
    let concepts = [wb.canonical(a)?, wb.canonical(b)?];
    let trained = train_probes(wb, &concepts)?;
    let splits = wb.splits(&concepts)?;
    let mut rows = Vec::new();
    for (src, dst) in [(0, 1), (1, 0)] {
        let probe = &trained[dst].0;
        let probed = &concepts[dst];
        let mut candidates = Vec::new();
        for &r in wb.eval_pool() {
            if wb.label(r, probed)? && wb.probe_presence(probe, r)? {
                candidates.push(r);
            }
        }
        let mut rng = seeds::rng(seeds::derive_named(wb.config.seed, &format!("relation:{probed}")));
        let mut picked: Vec<usize> = candidates.choose_multiple(&mut rng, wb.config.relation_cap.min(candidates.len())).copied().collect();
        picked.sort_unstable();
        let plan = wb.concept_plans(&splits[src])?.map(|p| p.0);
        let (flip, empty) = if picked.is_empty() {
            (None, None)
        } else {
            let empty = InjectionPlan::empty(&concepts[src], ConceptState::Present);
            let flip = plan.as_ref().map(|p| wb.flip_rate(p, probe, &picked)).transpose()?;
            (flip, Some(wb.flip_rate(&empty, probe, &picked)?))
        };
        rows.push(RelationRow {
            injected: concepts[src].clone(),
            probed: probed.clone(),
            samples: picked.len(),
            flip_rate: flip,
            empty_plan_flip_rate: empty,
        });
    }
    Ok(RelationResult { probes: trained.into_iter().map(|t| t.1).collect(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionRow {
    pub concept: String,
    /// False negatives where the probe misses the concept although it is present.
    pub cases: usize,
    pub corrected: usize,
    /// `None` when `cases` is below the configured minimum.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionResult {
    pub false_negatives: usize,
    pub probes: Vec<ProbeSummary>,
    pub rows: Vec<CorrectionRow>,
}

impl CorrectionResult {
    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        let mut t = Table::new("correction", &["concept", "false_negatives", "cases", "corrected", "ratio"]);
        for r in &self.rows {
            t.push(vec![
                r.concept.clone(),
                self.false_negatives.to_string(),
                r.cases.to_string(),
                r.corrected.to_string(),
                r.ratio.map_or_else(|| INSUFFICIENT_DATA.into(), |v| fmt_ratio(Some(v))),
            ]);
        }
        wb.report(
            "correction",
            serde_json::json!({ "min_cases": wb.config.min_false_negatives, "probe_arch": wb.config.probe_arch }),
            vec![t, probes_table(&self.probes)],
            vec![format!("{INSUFFICIENT_DATA}: fewer than {} correctable false negatives", wb.config.min_false_negatives)],
        )
    }
}

/// Among the model's false negatives on the whole manifest, injects each
/// concept the probe misses but the sample has, and counts label corrections.
pub fn correction_experiment(wb: &Workbench, concepts: &[String]) -> Result<CorrectionResult, HarnessError> {
    let concepts: Vec<String> = concepts.iter().map(|c| wb.canonical(c)).collect::<Result<_, _>>()?;
    let task = wb.dag.task().to_string();
    let mut false_negatives = Vec::new();
    for r in 0..wb.manifest.len() {
        if wb.label(r, &task)? && !decide(wb.plain_score(r)) {
            false_negatives.push(r);
        }
    }
    let trained = train_probes(wb, &concepts)?;
    let splits = wb.splits(&concepts)?;
    let mut rows = Vec::new();
    for ((concept, (probe, _)), split) in concepts.iter().zip(&trained).zip(&splits) {
        let mut cases = Vec::new();
        for &r in &false_negatives {
            if wb.label(r, concept)? && !wb.probe_presence(probe, r)? {
                cases.push(r);
            }
        }
        let corrected = match wb.concept_plans(split)? {
            Some((present, _)) if !cases.is_empty() => {
                let plan = CompiledPlan::new(&wb.model, &[&present])?;
                wb.scores(&cases, &plan)?.into_iter().filter(|&s| decide(s)).count()
            }
            _ => 0,
        };
        let ratio = (!cases.is_empty() && cases.len() >= wb.config.min_false_negatives).then(|| corrected as f64 / cases.len() as f64);
        rows.push(CorrectionRow { concept: concept.clone(), cases: cases.len(), corrected, ratio });
    }
    Ok(CorrectionResult { false_negatives: false_negatives.len(), probes: trained.into_iter().map(|t| t.1).collect(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CensusRow {
    pub concept: String,
    pub relevant: bool,
    pub metric: Metric,
    pub max_sensitivity: f64,
    pub count_fixed: usize,
    /// Counts at each configured census threshold.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TunedRow {
    pub concept: String,
    pub relevant: bool,
    /// Threshold found by selection with the intersection metric.
    pub threshold: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pairing {
    pub relevant: String,
    pub nonrelevant: String,
    pub metric: Metric,
    pub relevant_max: f64,
    pub nonrelevant_max: f64,
}

impl Pairing {
    pub fn holds(&self) -> bool {
        self.relevant_max > self.nonrelevant_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CensusResult {
    pub thresholds: Vec<f64>,
    pub rows: Vec<CensusRow>,
    pub tuned: Vec<TunedRow>,
    pub pairings: Vec<Pairing>,
}

impl CensusResult {
    pub fn row(&self, concept: &str, metric: Metric) -> Option<&CensusRow> {
        self.rows.iter().find(|r| r.concept == concept && r.metric == metric)
    }

    pub fn report(&self, wb: &Workbench) -> ExperimentReport {
        let mut counts = Table::new("counts", &["concept", "relevant", "metric", "fixed_threshold", "count", "max_sensitivity"]);
        for r in &self.rows {
            counts.push(vec![
                r.concept.clone(),
                r.relevant.to_string(),
                r.metric.to_string(),
                format!("{:.2}", r.metric.census_threshold()),
                r.count_fixed.to_string(),
                fmt_ratio(Some(r.max_sensitivity)),
            ]);
        }
        let mut header = vec!["concept".to_string(), "metric".to_string()];
        header.extend(self.thresholds.iter().map(|t| format!("{t:.2}")));
        let mut sweep = Table { name: "threshold_sweep".into(), header, rows: Vec::new() };
        for r in &self.rows {
            let mut row = vec![r.concept.clone(), r.metric.to_string()];
            row.extend(r.counts.iter().map(|c| c.to_string()));
            sweep.push(row);
        }
        let mut tuned = Table::new("tuned", &["concept", "relevant", "threshold", "count"]);
        for r in &self.tuned {
            tuned.push(vec![r.concept.clone(), r.relevant.to_string(), fmt_ratio(r.threshold), r.count.to_string()]);
        }
        let mut pairs =
            Table::new("pairings", &["relevant", "nonrelevant", "metric", "relevant_max", "nonrelevant_max", "relevant_higher"]);
        for p in &self.pairings {
            pairs.push(vec![
                p.relevant.clone(),
                p.nonrelevant.clone(),
                p.metric.to_string(),
                fmt_ratio(Some(p.relevant_max)),
                fmt_ratio(Some(p.nonrelevant_max)),
                p.holds().to_string(),
            ]);
        }
        wb.report(
            "census",
            serde_json::json!({ "thresholds": self.thresholds }),
            vec![counts, sweep, tuned, pairs],
            vec!["relevant: the concept can flip the task label by intervention in the concept graph".into()],
        )
    }
}

/// Neuron counts per (concept, metric) at the fixed thresholds, the tuned
/// threshold, and relevant-versus-non-relevant maxima paired by position.
pub fn census(wb: &Workbench, relevant: &[String], nonrelevant: &[String]) -> Result<CensusResult, HarnessError> {
    let truth = wb.relevant_set()?;
    let mut thresholds = wb.config.census_thresholds.clone();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let all: Vec<String> = relevant.iter().chain(nonrelevant).cloned().collect();
    let mut rows = Vec::new();
    let mut tuned = Vec::new();
    for split in wb.splits(&all)? {
        let is_relevant = truth.contains(&split.concept);
        let ds = wb.dataset(&split, usize::MAX, usize::MAX)?;
        for metric in Metric::ALL {
            let records = scan_columns(&ds, metric);
            rows.push(CensusRow {
                concept: split.concept.clone(),
                relevant: is_relevant,
                metric,
                max_sensitivity: records.iter().map(|r| r.value).fold(0.0, f64::max),
                count_fixed: count_at_threshold(&records, metric.census_threshold()),
                counts: thresholds.iter().map(|&t| count_at_threshold(&records, t)).collect(),
            });
        }
        let selected = wb.select(&split, Metric::Intersection, usize::MAX, usize::MAX)?;
        let threshold = selected.as_ref().map(|s| s.1.threshold);
        let count = match threshold {
            Some(t) => count_at_threshold(&scan_columns(&ds, Metric::Intersection), t),
            None => 0,
        };
        tuned.push(TunedRow { concept: split.concept.clone(), relevant: is_relevant, threshold, count });
    }
    let canon = |c: &String| wb.canonical(c);
    let mut pairings = Vec::new();
    for (r, n) in relevant.iter().zip(nonrelevant) {
        let (r, n) = (canon(r)?, canon(n)?);
        for metric in Metric::ALL {
            let max = |c: &str| rows.iter().find(|x: &&CensusRow| x.concept == c && x.metric == metric).map_or(0.0, |x| x.max_sensitivity);
            pairings.push(Pairing { relevant: r.clone(), nonrelevant: n.clone(), metric, relevant_max: max(&r), nonrelevant_max: max(&n) });
        }
    }
    Ok(CensusResult { thresholds, rows, tuned, pairings })
}

//! Binary BHD-vs-rest evaluation: confusion counts, the five reported
//! metrics, test-set runs, k sweeps and the retriever x expert ablation grid.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassLabel, Split};
use crate::corpus::SliceRecord;
use crate::error::{Error, Result};
use crate::featurizer::FeatureSet;
use crate::generator::DiagnosisLabel;
use crate::orchestrator::{Diagnosis, Pipeline, PipelineConfig};

/// Confusion counts with BHD as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies one case. An unparseable prediction is scored as the wrong label.
    pub fn record(&mut self, truth_bhd: bool, predicted: Option<DiagnosisLabel>) {
        let predicted_bhd = match predicted {
            Some(label) => label.is_bhd(),
            None => !truth_bhd,
        };
        match (truth_bhd, predicted_bhd) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub counts: ConfusionCounts,
    pub unparseable: u64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall, F1 and specificity; a 0/0 metric is 0 and flagged.
pub fn metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let ConfusionCounts { tp, fp, fn_, tn } = counts;
    let mut undefined = Vec::new();
    let accuracy = (tp + tn) as f64 / total as f64;
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    let specificity = ratio(tn, tn + fp, "specificity", &mut undefined);
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        specificity,
        counts,
        unparseable: 0,
        undefined,
    })
}

/// How test slices are grouped into evaluation cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseUnit {
    /// One case per test slice.
    Slice,
    /// The first listed slice of each test patient.
    #[default]
    KeySlicePerPatient,
    /// Every slice of a patient diagnosed; majority label wins, ties to non-BHD.
    PatientMajority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceLog {
    pub slice_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLog {
    pub case_id: String,
    pub patient_id: String,
    pub truth: ClassLabel,
    pub predicted: Option<DiagnosisLabel>,
    pub correct: bool,
    pub slices: Vec<String>,
    pub evidence: Vec<Vec<EvidenceLog>>,
    pub raw_output: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub case_unit: CaseUnit,
    /// When set, every prompt bundle is written to `<dir>/<slice_id>.json`.
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub cases: Vec<CaseLog>,
}

/// Rejects test sets that overlap the retrieval corpus by slice or patient.
pub fn check_leakage(pipeline: &Pipeline<'_>, tests: &[SliceRecord]) -> Result<()> {
    for t in tests {
        if t.split == Split::Train {
            return Err(Error::LeakageError(format!("{} is a train-split slice", t.slice_id)));
        }
        if pipeline.is_in_corpus(t) {
            return Err(Error::LeakageError(format!(
                "{} (patient {}) overlaps the retrieval corpus",
                t.slice_id, t.patient_id
            )));
        }
    }
    Ok(())
}

fn group_cases(tests: &[SliceRecord], unit: CaseUnit) -> Vec<Vec<&SliceRecord>> {
    match unit {
        CaseUnit::Slice => tests.iter().map(|t| vec![t]).collect(),
        CaseUnit::KeySlicePerPatient | CaseUnit::PatientMajority => {
            let mut order: Vec<&str> = Vec::new();
            let mut groups: BTreeMap<&str, Vec<&SliceRecord>> = BTreeMap::new();
            for t in tests {
                let g = groups.entry(&t.patient_id).or_default();
                if g.is_empty() {
                    order.push(&t.patient_id);
                }
                g.push(t);
            }
            order
                .into_iter()
                .map(|p| {
                    let g = groups.remove(p).expect("grouped");
                    if unit == CaseUnit::KeySlicePerPatient {
                        vec![g[0]]
                    } else {
                        g
                    }
                })
                .collect()
        }
    }
}

/// Runs `job` over `0..n` on at most `parallelism` threads; results keep input order.
fn run_bounded<T: Send>(n: usize, parallelism: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

fn majority(labels: &[Option<DiagnosisLabel>]) -> Option<DiagnosisLabel> {
    let bhd = labels.iter().filter(|l| **l == Some(DiagnosisLabel::Bhd)).count();
    let non = labels.iter().filter(|l| **l == Some(DiagnosisLabel::NonBhd)).count();
    if bhd + non == 0 {
        None
    } else {
        Some(DiagnosisLabel::from_bhd(bhd > non))
    }
}

/// Diagnoses every case and scores the predictions.
pub fn evaluate(
    pipeline: &Pipeline<'_>,
    tests: &[SliceRecord],
    features: &FeatureSet,
    config: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    config.validate()?;
    check_leakage(pipeline, tests)?;
    let cases = group_cases(tests, opts.case_unit);
    if cases.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let slices: Vec<&SliceRecord> = cases.iter().flatten().copied().collect();
    let mut seen = HashSet::new();
    for s in &slices {
        if !seen.insert(s.slice_id.as_str()) {
            return Err(Error::DuplicateSlice(s.slice_id.clone()));
        }
    }

    let results: Vec<Result<Diagnosis>> = run_bounded(slices.len(), config.parallelism, |i| {
        let s = slices[i];
        let f = features
            .get(&s.slice_id)
            .ok_or_else(|| Error::MissingFeature(s.slice_id.clone()).in_stage("embed"))?;
        pipeline.diagnose(s, f, config)
    });
    let diagnoses: Vec<Diagnosis> = results.into_iter().collect::<Result<_>>()?;

    if let Some(dir) = &opts.prompt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in &diagnoses {
            let path = dir.join(format!("{}.json", d.bundle.query.slice_id));
            fs::write(&path, d.bundle.serialize()).map_err(|e| Error::io(&path, e))?;
        }
    }

    let mut counts = ConfusionCounts::default();
    let mut unparseable = 0;
    let mut logs = Vec::with_capacity(cases.len());
    let mut cursor = 0;
    for case in &cases {
        let ds = &diagnoses[cursor..cursor + case.len()];
        cursor += case.len();
        let labels: Vec<Option<DiagnosisLabel>> = ds.iter().map(|d| d.response.label).collect();
        let predicted = if case.len() == 1 { labels[0] } else { majority(&labels) };
        let truth = case[0].class_label;
        counts.record(truth.is_bhd(), predicted);
        if predicted.is_none() {
            unparseable += 1;
        }
        logs.push(CaseLog {
            case_id: if opts.case_unit == CaseUnit::PatientMajority {
                case[0].patient_id.clone()
            } else {
                case[0].slice_id.clone()
            },
            patient_id: case[0].patient_id.clone(),
            truth,
            predicted,
            correct: predicted.map(|p| p.is_bhd() == truth.is_bhd()).unwrap_or(false),
            slices: case.iter().map(|s| s.slice_id.clone()).collect(),
            evidence: ds
                .iter()
                .map(|d| {
                    d.bundle
                        .evidence
                        .iter()
                        .map(|e| EvidenceLog {
                            slice_id: e.entry.slice_id().to_string(),
                            similarity: e.similarity,
                        })
                        .collect()
                })
                .collect(),
            raw_output: ds.iter().map(|d| d.response.raw_output.clone()).collect(),
        });
    }
    logs.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut report = metrics(counts)?;
    report.unparseable = unparseable;
    Ok(Evaluation { report, cases: logs })
}

/// One row of a CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub use_retriever: bool,
    pub use_typical_features: bool,
    pub retrieval_mode: String,
    pub k: usize,
    pub metrics: MetricsReport,
}

impl ReportRow {
    pub fn new(config: &PipelineConfig, metrics: MetricsReport) -> Self {
        Self {
            use_retriever: config.use_retriever,
            use_typical_features: config.use_typical_features,
            retrieval_mode: config.retrieval_mode().to_string(),
            k: config.k,
            metrics,
        }
    }
}

pub const REPORT_HEADER: &str = "use_retriever,use_typical_features,retrieval_mode,k,accuracy,precision,recall,f1,specificity,tp,fp,fn,tn,unparseable";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let c = &m.counts;
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{},{},{}\n",
            r.use_retriever,
            r.use_typical_features,
            r.retrieval_mode,
            r.k,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.specificity,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            m.unparseable
        ));
    }
    out
}

/// Writes `<out_dir>/<run_id>/report.csv` and `cases.jsonl`; returns the run directory.
pub fn write_reports(out_dir: &Path, run_id: &str, rows: &[ReportRow], cases: &[CaseLog]) -> Result<PathBuf> {
    let dir = out_dir.join(run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let path = dir.join("cases.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// One evaluation per `k`, otherwise identical configuration.
pub fn k_sweep(
    pipeline: &Pipeline<'_>,
    tests: &[SliceRecord],
    features: &FeatureSet,
    config: &PipelineConfig,
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<(ReportRow, Vec<CaseLog>)>> {
    if ks.is_empty() {
        return Err(Error::InvalidConfig("k sweep needs at least one k".into()));
    }
    ks.iter()
        .map(|&k| {
            let cfg = PipelineConfig { k, ..config.clone() };
            let eval = evaluate(pipeline, tests, features, &cfg, opts)?;
            Ok((ReportRow::new(&cfg, eval.report), eval.cases))
        })
        .collect()
}

/// Rows in order (off, off), (on, off), (off, on), (on, on) for
/// (retriever, typical features), all with the same seed.
pub fn ablation_grid(
    pipeline: &Pipeline<'_>,
    tests: &[SliceRecord],
    features: &FeatureSet,
    config: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<Vec<(ReportRow, Vec<CaseLog>)>> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(use_retriever, use_typical_features)| {
            let cfg = PipelineConfig {
                use_retriever,
                use_typical_features,
                ..config.clone()
            };
            let eval = evaluate(pipeline, tests, features, &cfg, opts)?;
            Ok((ReportRow::new(&cfg, eval.report), eval.cases))
        })
        .collect()
}

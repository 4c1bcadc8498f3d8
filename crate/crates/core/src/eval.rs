//! Evaluation harness.
//!
//! Two protocols run on every sequence, always scored against the complete
//! ground-truth sequence:
//!
//! * **horizon**: the first two observed scans are the anchors and every
//!   later scan is predicted from them. Cells are keyed by the gap between
//!   the later anchor and the target, in closed-open year buckets, and by
//!   the target's age decade.
//! * **interpolation**: every interior scan is predicted from the nearest
//!   observed scans before and after it (never from itself). With scans
//!   removed by [`apply_missing`](crate::synth::apply_missing) the gaps
//!   widen, which is what the missing-ratio comparison measures.
//!
//! Each cell also carries the copy-the-later-anchor baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::predictor::{self, ModelParams, TimeSpec};
use crate::synth::{self, SubjectSequence};
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub missing_ratio: f64,
    pub missing_seed: u64,
    /// Lower edges of the horizon buckets in years; the last bucket is open.
    pub horizon_edges: Vec<f64>,
    #[serde(skip)]
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            missing_ratio: 0.0,
            missing_seed: 0,
            horizon_edges: vec![0.0, 5.0],
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
}

pub fn score(pred: &Tensor3, truth: &Tensor3) -> Result<Scores> {
    let mse = metrics::mse(pred, truth)?;
    Ok(Scores {
        ssim: metrics::ssim(pred, truth)?,
        psnr: metrics::psnr_from_mse(mse),
        mse,
    })
}

/// Population mean and standard deviation of each metric.
pub fn summarize(scores: &[Scores]) -> MetricSummary {
    let n = scores.len() as f64;
    let stat = |f: fn(&Scores) -> f64| {
        let m = scores.iter().map(f).sum::<f64>() / n;
        let v = scores.iter().map(|s| (f(s) - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let (ssim_mean, ssim_std) = stat(|s| s.ssim);
    let (psnr_mean, psnr_std) = stat(|s| s.psnr);
    let (mse_mean, mse_std) = stat(|s| s.mse);
    MetricSummary {
        count: scores.len(),
        ssim_mean,
        ssim_std,
        psnr_mean,
        psnr_std,
        mse_mean,
        mse_std,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub section: String,
    pub key: String,
    pub model: MetricSummary,
    pub baseline: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub missing_ratio: f64,
    pub subjects: usize,
    /// Cells with at least one prediction, in section order
    /// `interpolation`, `horizon`, `age`, `overall`.
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    pub fn cell(&self, section: &str, key: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.section == section && c.key == key)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "missing_ratio,section,key,predictor,count,ssim_mean,ssim_std,psnr_mean,psnr_std,mse_mean,mse_std\n",
        );
        for c in &self.cells {
            for (name, m) in [("model", &c.model), ("copy_i1", &c.baseline)] {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    self.missing_ratio,
                    c.section,
                    c.key,
                    name,
                    m.count,
                    m.ssim_mean,
                    m.ssim_std,
                    m.psnr_mean,
                    m.psnr_std,
                    m.mse_mean,
                    m.mse_std
                ));
            }
        }
        out
    }
}

/// One prediction task: anchors and target are indices into the full
/// sequence.
#[derive(Clone, Copy, Debug)]
struct Task {
    subject: usize,
    a: usize,
    b: usize,
    target: usize,
    interpolation: bool,
}

fn bucket_key(edges: &[f64], gap: f64) -> Option<String> {
    let pos = edges.iter().rposition(|&lo| gap >= lo)?;
    Some(match edges.get(pos + 1) {
        Some(hi) => format!("[{},{})", edges[pos], hi),
        None => format!("[{},inf)", edges[pos]),
    })
}

fn decade_key(age: f64) -> String {
    let lo = (age / 10.0).floor() * 10.0;
    format!("[{lo},{})", lo + 10.0)
}

fn observed_indices(full: &SubjectSequence, observed: &SubjectSequence) -> Vec<usize> {
    let ages = full.ages();
    observed
        .ages()
        .iter()
        .map(|a| ages.iter().position(|x| x == a).expect("observed scans come from the full sequence"))
        .collect()
}

fn tasks_for(subject: usize, full: &SubjectSequence, observed: &[usize]) -> Vec<Task> {
    let n = full.scans().len();
    let mut out = Vec::new();
    for target in 1..n - 1 {
        let a = *observed.iter().rev().find(|&&k| k < target).expect("first scan is observed");
        let b = *observed.iter().find(|&&k| k > target).expect("last scan is observed");
        out.push(Task {
            subject,
            a,
            b,
            target,
            interpolation: true,
        });
    }
    let (a, b) = (observed[0], observed[1]);
    for target in b + 1..n {
        out.push(Task {
            subject,
            a,
            b,
            target,
            interpolation: false,
        });
    }
    out
}

fn run_task(model: &ModelParams, seqs: &[&SubjectSequence], task: &Task) -> Result<(Scores, Scores)> {
    let scans = seqs[task.subject].scans();
    let (i0, i1, truth): (&ImageTensor, &ImageTensor, &ImageTensor) =
        (&scans[task.a], &scans[task.b], &scans[task.target]);
    let t = TimeSpec::new(i0.age_years(), i1.age_years(), truth.age_years())?;
    let pred = predictor::tnig_forward(i0, i1, &t, model)?;
    if !(pred.fused.is_valid() && pred.al_map.all_finite() && pred.ep_map.all_finite()) {
        return Err(Error::Numerical("invalid uncertainty maps during evaluation".into()));
    }
    Ok((score(pred.image.pixels(), truth.pixels())?, score(i1.pixels(), truth.pixels())?))
}

/// Scores `model` on `dataset` after removing `cfg.missing_ratio` of the
/// interior scans. Sequences are processed in subject-id order, so the
/// report does not depend on the input order.
pub fn evaluate(model: &ModelParams, dataset: &[SubjectSequence], cfg: &EvalConfig) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    if cfg.horizon_edges.is_empty() || cfg.horizon_edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("horizon edges must be non-empty and increasing".into()));
    }
    let mut seqs: Vec<&SubjectSequence> = dataset.iter().collect();
    seqs.sort_by(|a, b| a.subject_id().cmp(b.subject_id()));
    if let Some(s) = seqs.iter().find(|s| s.scans().len() < 3) {
        return Err(Error::Data(format!("{}: evaluation needs at least 3 scans", s.subject_id())));
    }
    let owned: Vec<SubjectSequence> = seqs.iter().map(|s| (*s).clone()).collect();
    let observed = synth::apply_missing(&owned, cfg.missing_ratio, cfg.missing_seed)?;

    let mut tasks = Vec::new();
    for (k, (full, obs)) in seqs.iter().zip(&observed).enumerate() {
        tasks.extend(tasks_for(k, full, &observed_indices(full, obs)));
    }
    let results = par_scores(model, &seqs, &tasks, cfg.threads)?;

    let mut groups: BTreeMap<(u8, String), (Vec<Scores>, Vec<Scores>)> = BTreeMap::new();
    let mut push = |order: u8, key: String, r: &(Scores, Scores)| {
        let e = groups.entry((order, key)).or_default();
        e.0.push(r.0);
        e.1.push(r.1);
    };
    for (task, r) in tasks.iter().zip(&results) {
        let scans = seqs[task.subject].scans();
        if task.interpolation {
            push(0, "interior".into(), r);
        } else {
            let gap = scans[task.target].age_years() - scans[task.b].age_years();
            if let Some(key) = bucket_key(&cfg.horizon_edges, gap) {
                push(1, key, r);
            }
            push(2, decade_key(scans[task.target].age_years()), r);
        }
        push(3, "all".into(), r);
    }

    let section = ["interpolation", "horizon", "age", "overall"];
    let cells = groups
        .into_iter()
        .filter(|(_, (m, _))| !m.is_empty())
        .map(|((order, key), (m, b))| ReportCell {
            section: section[order as usize].to_string(),
            key,
            model: summarize(&m),
            baseline: summarize(&b),
        })
        .collect();
    Ok(EvalReport {
        missing_ratio: cfg.missing_ratio,
        subjects: seqs.len(),
        cells,
    })
}

fn par_scores(
    model: &ModelParams,
    seqs: &[&SubjectSequence],
    tasks: &[Task],
    threads: usize,
) -> Result<Vec<(Scores, Scores)>> {
    let threads = threads.max(1).min(tasks.len().max(1));
    if threads == 1 {
        return tasks.iter().map(|t| run_task(model, seqs, t)).collect();
    }
    let chunk = tasks.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|t| run_task(model, seqs, t)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::ModelConfig;
    use crate::synth::{synth_dataset, Label, SynthConfig};

    #[test]
    fn bucket_keys_are_closed_open() {
        let edges = [0.0, 5.0];
        assert_eq!(bucket_key(&edges, 0.0).unwrap(), "[0,5)");
        assert_eq!(bucket_key(&edges, 4.999).unwrap(), "[0,5)");
        assert_eq!(bucket_key(&edges, 5.0).unwrap(), "[5,inf)");
        assert!(bucket_key(&edges, -0.1).is_none());
        assert_eq!(decade_key(69.9), "[60,70)");
        assert_eq!(decade_key(70.0), "[70,80)");
    }

    fn constant_dataset(n: usize) -> Vec<SubjectSequence> {
        (0..n)
            .map(|k| {
                let scans = (0..5)
                    .map(|s| ImageTensor::from_rows(16, 16, vec![0.5; 256], 60.0 + 1.7 * s as f64).unwrap())
                    .collect();
                SubjectSequence::new(format!("C{k}"), Label::CN, scans).unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        // A zero model outputs exactly 0.5 everywhere.
        let model = ModelParams::zeros(ModelConfig::default());
        let report = evaluate(&model, &constant_dataset(3), &EvalConfig::default()).unwrap();
        assert!(!report.cells.is_empty());
        for c in &report.cells {
            assert!(c.model.count > 0);
            assert_eq!(c.model.ssim_mean, 1.0);
            assert_eq!(c.model.mse_mean, 0.0);
            assert_eq!(c.model.psnr_mean, 100.0);
        }
        // Gaps of 1.7 years: targets 1.7, 3.4 and 5.1 years past the anchor.
        assert_eq!(report.cell("horizon", "[0,5)").unwrap().model.count, 6);
        assert_eq!(report.cell("horizon", "[5,inf)").unwrap().model.count, 3);
        assert_eq!(report.cell("interpolation", "interior").unwrap().model.count, 9);
    }

    #[test]
    fn empty_buckets_are_omitted() {
        let model = ModelParams::zeros(ModelConfig::default());
        let cfg = EvalConfig {
            horizon_edges: vec![0.0, 5.0, 50.0],
            ..EvalConfig::default()
        };
        let report = evaluate(&model, &constant_dataset(2), &cfg).unwrap();
        assert!(report.cell("horizon", "[50,inf)").is_none());
        assert!(report.cells.iter().all(|c| c.model.count > 0 && c.model.ssim_mean.is_finite()));
    }

    #[test]
    fn order_independent_and_deterministic() {
        let ds = synth_dataset(&SynthConfig {
            subjects: 4,
            height: 16,
            width: 16,
            scans_min: 5,
            scans_max: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let model = ModelParams::init(ModelConfig::default(), 1).unwrap();
        let cfg = EvalConfig {
            missing_ratio: 0.2,
            ..EvalConfig::default()
        };
        let a = evaluate(&model, &ds, &cfg).unwrap();
        let mut rev = ds.clone();
        rev.reverse();
        assert_eq!(a, evaluate(&model, &rev, &cfg).unwrap());
        assert_eq!(a, evaluate(&model, &ds, &EvalConfig { threads: 3, ..cfg.clone() }).unwrap());
        assert_eq!(a.to_csv().lines().count(), 1 + 2 * a.cells.len());
    }

    #[test]
    fn short_sequences_are_rejected() {
        let scans = (0..2)
            .map(|s| ImageTensor::from_rows(16, 16, vec![0.5; 256], 60.0 + s as f64).unwrap())
            .collect();
        let ds = vec![SubjectSequence::new("A", Label::AD, scans).unwrap()];
        let model = ModelParams::zeros(ModelConfig::default());
        assert!(matches!(evaluate(&model, &ds, &EvalConfig::default()), Err(Error::Data(_))));
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{average_precision, pr_curve, roc_auc, roc_curve, EvalReport};
use crate::data::{read_feature_file, read_frame_labels, Manifest};
use crate::error::{Error, FormatError, Result};
use crate::losses::LossConfig;
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::trainer::{expand_frames, infer_snapshot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub eps: f64,
    pub beta: f64,
    /// Skip videos without frame labels instead of failing.
    pub allow_missing_labels: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eps: LossConfig::default().eps,
            beta: 0.0,
            allow_missing_labels: false,
        }
    }
}

/// Frame scores and labels of one test video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTrace {
    pub path: PathBuf,
    pub label: u8,
    pub scores: Vec<f64>,
    pub original: Vec<f64>,
    pub frame_labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub traces: Vec<VideoTrace>,
    /// Videos skipped for lack of frame labels.
    pub skipped: Vec<PathBuf>,
}

fn truncate(mut scores: Vec<f64>, frames: usize, path: &Path) -> Result<Vec<f64>> {
    if scores.len() < frames {
        return Err(Error::format(
            path,
            FormatError::Invalid(format!(
                "{frames} labelled frames but only {} scored",
                scores.len()
            )),
        ));
    }
    scores.truncate(frames);
    Ok(scores)
}

/// Infers every video of a test manifest and scores the concatenated frames.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    manifest: &Manifest,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for entry in &manifest.entries {
        let path = manifest.features_path(entry);
        let Some(labels_path) = manifest.frame_labels_path(entry) else {
            if opts.allow_missing_labels {
                skipped.push(path);
                continue;
            }
            return Err(Error::format(
                &path,
                FormatError::Invalid("no frame labels listed for this video".into()),
            ));
        };
        let frame_labels = read_frame_labels(&labels_path)?;
        let features = read_feature_file(&path)?.cast::<S>();
        let snap = infer_snapshot(params, &features, opts.eps, opts.beta)?;
        let widen = |v: &[S]| {
            expand_frames(v)
                .into_iter()
                .map(|s| s.to_f64_lossy())
                .collect()
        };
        let scores = truncate(widen(&snap.s_a), frame_labels.len(), &path)?;
        let original = truncate(widen(&snap.s_o), frame_labels.len(), &path)?;
        traces.push(VideoTrace {
            path,
            label: entry.label,
            scores,
            original,
            frame_labels,
        });
    }
    let report = report_from_traces(&traces)?;
    Ok(Evaluation {
        report,
        traces,
        skipped,
    })
}

pub(crate) fn report_from_traces(traces: &[VideoTrace]) -> Result<EvalReport> {
    let gather = |only_abnormal: bool, original: bool| {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for t in traces.iter().filter(|t| !only_abnormal || t.label == 1) {
            s.extend_from_slice(if original { &t.original } else { &t.scores });
            l.extend_from_slice(&t.frame_labels);
        }
        (s, l)
    };
    let (scores, labels) = gather(false, false);
    let (sub_scores, sub_labels) = gather(true, false);
    let (orig, _) = gather(false, true);
    Ok(EvalReport {
        auc: roc_auc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        auc_sub: roc_auc(&sub_scores, &sub_labels)?,
        ap_sub: average_precision(&sub_scores, &sub_labels)?,
        auc_original: roc_auc(&orig, &labels)?,
        n_videos: traces.len(),
        n_frames: labels.len(),
        n_positive: labels.iter().filter(|&&l| l == 1).count(),
        roc_points: roc_curve(&scores, &labels)?,
        pr_points: pr_curve(&scores, &labels)?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn curve_csv(header: &str, pts: &[(f64, f64)]) -> String {
    let mut s = format!("index,{header}\n");
    for (i, (x, y)) in pts.iter().enumerate() {
        writeln!(s, "{i},{x},{y}").unwrap();
    }
    s
}

/// Writes `report.json`, `roc.csv`, `pr.csv` and one trace CSV per video
/// under `dir/traces`.
pub fn write_outputs(eval: &Evaluation, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    let json = serde_json::to_string_pretty(&eval.report).expect("reports always serialize");
    write(&dir.join("report.json"), &(json + "\n"))?;
    write(
        &dir.join("roc.csv"),
        &curve_csv("fpr,tpr", &eval.report.roc_points),
    )?;
    write(
        &dir.join("pr.csv"),
        &curve_csv("recall,precision", &eval.report.pr_points),
    )?;
    for (i, t) in eval.traces.iter().enumerate() {
        let stem = t
            .path
            .file_stem()
            .map_or_else(|| format!("{i:04}"), |s| s.to_string_lossy().into_owned());
        let mut s = String::from("index,value,label\n");
        for (f, (v, l)) in t.scores.iter().zip(&t.frame_labels).enumerate() {
            writeln!(s, "{f},{v},{l}").unwrap();
        }
        write(&traces.join(format!("{i:04}_{stem}.csv")), &s)?;
    }
    Ok(())
}

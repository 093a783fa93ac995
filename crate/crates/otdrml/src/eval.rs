//! Metrics and experiment sweeps: per-SNR-bin detection/localization/
//! reflectance reports for any detector, detector comparison at equal
//! false-alarm rate, and deterministic CSV/SVG/raw-score persistence.
//!
//! All sweeps route through [`RawScores`]: scores are computed once per
//! (detector, dataset) pair, persisted, and every metric row is derived
//! from them, so regenerating a report from the persisted scores is
//! byte-identical.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{Dataset, Sequence, Split};
use crate::detectors::{glrt_detect, mc_matched_filter_pd, optimum_bound_pd};
use crate::error::{OtdrError, Result};
use crate::model::MultiTaskNet;
use crate::sim::PulseTemplate;
use crate::svg::{line_chart, ChartSpec, Series};

/// False-alarm levels swept by detection reports.
pub const P_FA_LEVELS: [f64; 3] = [0.01, 0.05, 0.1];

/// Number of 1-dB SNR bins; bin b covers [b, b+1) dB, clamped at the ends.
pub const N_SNR_BINS: i32 = 30;

/// Bin index for a sequence SNR.
pub fn snr_bin(snr_db: f64) -> i32 {
    (snr_db.floor() as i32).clamp(0, N_SNR_BINS - 1)
}

/// Confusion counts for one decision set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// P_d = TP / (TP + FN); absent without positives.
    pub fn p_d(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    /// P_FA = FP / (FP + TN); absent without negatives.
    pub fn p_fa(&self) -> Option<f64> {
        let neg = self.fp + self.tn;
        (neg > 0).then(|| self.fp as f64 / neg as f64)
    }
}

/// Tallies decisions against labels; the vectors must be aligned.
pub fn confusion_counts(decisions: &[bool], labels: &[bool]) -> Result<Confusion> {
    if decisions.len() != labels.len() {
        return Err(OtdrError::Shape(format!(
            "{} decisions vs {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&d, &y) in decisions.iter().zip(labels) {
        match (d, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Threshold giving the target false-alarm rate: the empirical
/// (1 − p_fa_target) quantile of negative-class scores, decided as
/// score ≥ τ. Requires at least 1/p_fa_target negatives so the tail is
/// resolvable.
pub fn calibrate_threshold_for_pfa(negative_scores: &[f64], p_fa_target: f64) -> Result<f64> {
    if !(p_fa_target > 0.0 && p_fa_target < 1.0) {
        return Err(OtdrError::Calibration(format!(
            "p_fa_target must lie in (0, 1), got {p_fa_target}"
        )));
    }
    let n = negative_scores.len();
    if (n as f64) < 1.0 / p_fa_target {
        return Err(OtdrError::Calibration(format!(
            "calibrating P_FA = {p_fa_target} needs at least {} negatives, got {n}",
            (1.0 / p_fa_target).ceil() as usize
        )));
    }
    let mut sorted = negative_scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let k = ((1.0 - p_fa_target) * n as f64).ceil() as usize;
    Ok(sorted[k.min(n - 1)])
}

/// One scored sequence: everything needed to recompute every metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawScoreEntry {
    pub class_id: u8,
    pub snr_db: f32,
    pub score: f64,
    pub position_idx_hat: f64,
    /// NaN when the sequence has no position label.
    pub position_idx_label: f32,
    /// NaN when the detector does not estimate reflectance.
    pub reflectance_db_hat: f64,
    /// NaN when the sequence has no reflectance label.
    pub reflectance_db_label: f32,
}

/// Persisted scores of one detector on one dataset split, with the
/// calibrated thresholds used to derive decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScores {
    pub detector_name: String,
    pub dataset_variant: String,
    pub sample_spacing_m: f64,
    /// (p_fa level, threshold) pairs, in report order.
    pub thresholds: Vec<(f64, f64)>,
    pub entries: Vec<RawScoreEntry>,
}

const RAW_MAGIC: &[u8; 8] = b"OTDRRAWS";
const RAW_VERSION: u32 = 1;

impl RawScores {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
        for s in [&self.detector_name, &self.dataset_variant] {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
        buf.extend_from_slice(&self.sample_spacing_m.to_le_bytes());
        buf.extend_from_slice(&(self.thresholds.len() as u32).to_le_bytes());
        for &(level, tau) in &self.thresholds {
            buf.extend_from_slice(&level.to_le_bytes());
            buf.extend_from_slice(&tau.to_le_bytes());
        }
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            buf.push(e.class_id);
            buf.extend_from_slice(&e.snr_db.to_le_bytes());
            buf.extend_from_slice(&e.score.to_le_bytes());
            buf.extend_from_slice(&e.position_idx_hat.to_le_bytes());
            buf.extend_from_slice(&e.position_idx_label.to_le_bytes());
            buf.extend_from_slice(&e.reflectance_db_hat.to_le_bytes());
            buf.extend_from_slice(&e.reflectance_db_label.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RawScores> {
        let bytes = fs::read(path)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(OtdrError::Format("raw scores file truncated".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 8)? != RAW_MAGIC {
            return Err(OtdrError::Format("not a raw scores file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != RAW_VERSION {
            return Err(OtdrError::Format(format!(
                "unsupported raw scores version {version} (reader supports {RAW_VERSION})"
            )));
        }
        let read_string = |off: &mut usize| -> Result<String> {
            let n = u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize;
            String::from_utf8(take(off, n)?.to_vec())
                .map_err(|_| OtdrError::Format("raw scores: invalid UTF-8 name".into()))
        };
        let detector_name = read_string(&mut off)?;
        let dataset_variant = read_string(&mut off)?;
        let sample_spacing_m = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let n_thr = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut thresholds = Vec::with_capacity(n_thr);
        for _ in 0..n_thr {
            let level = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            let tau = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            thresholds.push((level, tau));
        }
        let n = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(RawScoreEntry {
                class_id: take(&mut off, 1)?[0],
                snr_db: f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()),
                score: f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()),
                position_idx_hat: f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()),
                position_idx_label: f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()),
                reflectance_db_hat: f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()),
                reflectance_db_label: f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()),
            });
        }
        if off != bytes.len() {
            return Err(OtdrError::Format(format!(
                "raw scores file has {} trailing bytes",
                bytes.len() - off
            )));
        }
        Ok(RawScores {
            detector_name,
            dataset_variant,
            sample_spacing_m,
            thresholds,
            entries,
        })
    }
}

/// One report row: metrics for a (p_fa level, SNR bin) cell. Empty bins
/// are emitted with zero counts so gaps are visible rather than silent.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub detector_name: String,
    pub dataset_variant: String,
    pub p_fa_level: f64,
    pub threshold: f64,
    pub snr_bin_db: i32,
    pub n_pos: u64,
    pub n_neg: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub p_d: Option<f64>,
    pub p_fa: Option<f64>,
    /// RMSE over true positives, meters; absent when the bin has none.
    pub rmse_position_m: Option<f64>,
    /// RMSE over true positives with both estimate and label, dB.
    pub rmse_reflectance_db: Option<f64>,
}

/// A deterministic, regenerable metrics report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// CSV with one row per report row; float fields use the shortest
    /// round-trip representation so bytes are stable across runs.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "detector,variant,p_fa_level,threshold,snr_bin_db,n_pos,n_neg,\
             tp,fp,tn,fn,p_d,p_fa,rmse_position_m,rmse_reflectance_db\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.detector_name,
                r.dataset_variant,
                r.p_fa_level,
                r.threshold,
                r.snr_bin_db,
                r.n_pos,
                r.n_neg,
                r.tp,
                r.fp,
                r.tn,
                r.fn_,
                fmt_opt(r.p_d),
                fmt_opt(r.p_fa),
                fmt_opt(r.rmse_position_m),
                fmt_opt(r.rmse_reflectance_db),
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Rows of one detector at one p_fa level, ordered by bin.
    pub fn curve(&self, detector: &str, variant: &str, level: f64) -> Vec<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| {
                r.detector_name == detector
                    && r.dataset_variant == variant
                    && r.p_fa_level == level
            })
            .collect()
    }
}

/// Scores the test split of a dataset with the network: score = p_event,
/// with position/reflectance estimates attached. Thresholds are calibrated
/// on the validation-split negatives at each requested level.
pub fn raw_scores_model(
    net: &MultiTaskNet,
    dataset: &Dataset,
    levels: &[f64],
) -> Result<RawScores> {
    let score_fn = |seqs: &[&Sequence]| -> Result<Vec<(f64, f64, f64)>> {
        Ok(net
            .predict(seqs)?
            .into_iter()
            .map(|p| (p.p_event, p.position_idx_hat, p.reflectance_db_hat))
            .collect())
    };
    raw_scores_with(dataset, levels, "ml", score_fn)
}

/// Scores the test split with the matched-subspace GLRT: score = the GLRT
/// statistic. The GLRT does not estimate reflectance.
pub fn raw_scores_glrt(
    template: &PulseTemplate,
    dataset: &Dataset,
    levels: &[f64],
) -> Result<RawScores> {
    let score_fn = |seqs: &[&Sequence]| -> Result<Vec<(f64, f64, f64)>> {
        seqs.par_iter()
            .map(|s| {
                let values: Vec<f64> = s.values.iter().map(|&v| v as f64).collect();
                let r = glrt_detect(&values, template, f64::INFINITY)?;
                Ok((r.statistic, r.position_idx_hat, f64::NAN))
            })
            .collect()
    };
    raw_scores_with(dataset, levels, "glrt", score_fn)
}

fn raw_scores_with<F>(
    dataset: &Dataset,
    levels: &[f64],
    detector_name: &str,
    score_fn: F,
) -> Result<RawScores>
where
    F: Fn(&[&Sequence]) -> Result<Vec<(f64, f64, f64)>>,
{
    let val = dataset.subset(Split::Val);
    let val_neg: Vec<&Sequence> = val.iter().copied().filter(|s| s.class_id == 0).collect();
    let neg_scores: Vec<f64> = score_fn(&val_neg)?.into_iter().map(|(s, _, _)| s).collect();
    let mut thresholds = Vec::with_capacity(levels.len());
    for &level in levels {
        thresholds.push((level, calibrate_threshold_for_pfa(&neg_scores, level)?));
    }

    let test = dataset.subset(Split::Test);
    let scored = score_fn(&test)?;
    let entries = test
        .iter()
        .zip(&scored)
        .map(|(s, &(score, pos_hat, refl_hat))| RawScoreEntry {
            class_id: s.class_id,
            snr_db: s.snr_db,
            score,
            position_idx_hat: pos_hat,
            position_idx_label: s.position_idx.unwrap_or(f32::NAN),
            reflectance_db_hat: refl_hat,
            reflectance_db_label: s.reflectance_db.unwrap_or(f32::NAN),
        })
        .collect();

    Ok(RawScores {
        detector_name: detector_name.to_string(),
        dataset_variant: dataset.manifest.variant.as_str().to_string(),
        sample_spacing_m: dataset.manifest.sim.sample_spacing_m,
        thresholds,
        entries,
    })
}

/// Derives the full per-(level, bin) report from persisted scores. This is
/// the only path from scores to metrics, so persisted scores regenerate
/// reports bit-identically.
pub fn rows_from_raw(raw: &RawScores) -> EvalReport {
    let mut rows = Vec::with_capacity(raw.thresholds.len() * N_SNR_BINS as usize);
    for &(level, tau) in &raw.thresholds {
        for bin in 0..N_SNR_BINS {
            let mut c = Confusion::default();
            let mut pos_sq = 0.0f64;
            let mut pos_n = 0u64;
            let mut refl_sq = 0.0f64;
            let mut refl_n = 0u64;
            for e in &raw.entries {
                if snr_bin(e.snr_db as f64) != bin {
                    continue;
                }
                let detected = e.score >= tau;
                match (detected, e.class_id == 1) {
                    (true, true) => {
                        c.tp += 1;
                        if e.position_idx_label.is_finite() {
                            let err = (e.position_idx_hat - e.position_idx_label as f64)
                                * raw.sample_spacing_m;
                            pos_sq += err * err;
                            pos_n += 1;
                        }
                        if e.reflectance_db_hat.is_finite()
                            && e.reflectance_db_label.is_finite()
                        {
                            let err = e.reflectance_db_hat - e.reflectance_db_label as f64;
                            refl_sq += err * err;
                            refl_n += 1;
                        }
                    }
                    (true, false) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (false, true) => c.fn_ += 1,
                }
            }
            rows.push(EvalRow {
                detector_name: raw.detector_name.clone(),
                dataset_variant: raw.dataset_variant.clone(),
                p_fa_level: level,
                threshold: tau,
                snr_bin_db: bin,
                n_pos: c.tp + c.fn_,
                n_neg: c.fp + c.tn,
                tp: c.tp,
                fp: c.fp,
                tn: c.tn,
                fn_: c.fn_,
                p_d: c.p_d(),
                p_fa: c.p_fa(),
                rmse_position_m: (pos_n > 0).then(|| (pos_sq / pos_n as f64).sqrt()),
                rmse_reflectance_db: (refl_n > 0).then(|| (refl_sq / refl_n as f64).sqrt()),
            });
        }
    }
    EvalReport { rows }
}

/// Detection sweep: model scores on the test split, thresholds at every
/// requested false-alarm level, one row per (level, SNR bin).
pub fn sweep_detection(
    net: &MultiTaskNet,
    dataset: &Dataset,
    levels: &[f64],
) -> Result<(EvalReport, RawScores)> {
    let raw = raw_scores_model(net, dataset, levels)?;
    Ok((rows_from_raw(&raw), raw))
}

/// Localization sweep over dataset variants at one false-alarm level;
/// position RMSE is computed over true positives only.
pub fn sweep_localization(
    net: &MultiTaskNet,
    variants: &[&Dataset],
    p_fa: f64,
) -> Result<(EvalReport, Vec<RawScores>)> {
    let mut report = EvalReport::default();
    let mut raws = Vec::with_capacity(variants.len());
    for ds in variants {
        let raw = raw_scores_model(net, ds, &[p_fa])?;
        report.extend(rows_from_raw(&raw));
        raws.push(raw);
    }
    Ok((report, raws))
}

/// Reflectance sweep at one false-alarm level on one dataset.
pub fn sweep_reflectance(
    net: &MultiTaskNet,
    dataset: &Dataset,
    p_fa: f64,
) -> Result<(EvalReport, RawScores)> {
    let raw = raw_scores_model(net, dataset, &[p_fa])?;
    Ok((rows_from_raw(&raw), raw))
}

/// Detector comparison on a whole-pattern-only dataset at one false-alarm
/// level: ML and GLRT rows from scored sequences, plus per-bin analytic
/// (closed-form) and Monte Carlo matched-filter bound rows evaluated at
/// bin centers. Bound rows carry zero counts — they are references, not
/// measurements.
pub fn compare_detectors(
    net: &MultiTaskNet,
    template: &PulseTemplate,
    dataset: &Dataset,
    p_fa: f64,
    mc_trials: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<RawScores>)> {
    let ml = raw_scores_model(net, dataset, &[p_fa])?;
    let glrt = raw_scores_glrt(template, dataset, &[p_fa])?;
    let mut report = rows_from_raw(&ml);
    report.extend(rows_from_raw(&glrt));

    let variant = dataset.manifest.variant.as_str().to_string();
    for bin in 0..N_SNR_BINS {
        let snr_db = bin as f64 + 0.5;
        let bound = optimum_bound_pd(snr_db, p_fa)?;
        let mc = mc_matched_filter_pd(
            template,
            snr_db,
            p_fa,
            mc_trials,
            crate::util::derive_seed(seed, &[0xB0, bin as u64]),
        )?;
        for (name, p_d, threshold) in
            [("bound_eq5", bound.p_d, bound.delta), ("bound_mc_mf", mc, f64::NAN)]
        {
            report.rows.push(EvalRow {
                detector_name: name.to_string(),
                dataset_variant: variant.clone(),
                p_fa_level: p_fa,
                threshold,
                snr_bin_db: bin,
                n_pos: 0,
                n_neg: 0,
                tp: 0,
                fp: 0,
                tn: 0,
                fn_: 0,
                p_d: Some(p_d),
                p_fa: None,
                rmse_position_m: None,
                rmse_reflectance_db: None,
            });
        }
    }
    Ok((report, vec![ml, glrt]))
}

fn curve_points(rows: &[&EvalRow], y: impl Fn(&EvalRow) -> Option<f64>) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|r| y(r).map(|v| (r.snr_bin_db as f64, v)))
        .collect()
}

/// Fig. 4 analogue: P_d vs SNR, one curve per false-alarm level present
/// in the report.
pub fn render_fig4(report: &EvalReport, variant: &str, path: &Path) -> Result<()> {
    let mut levels: Vec<f64> = Vec::new();
    for r in &report.rows {
        if r.detector_name == "ml" && !levels.contains(&r.p_fa_level) {
            levels.push(r.p_fa_level);
        }
    }
    let mut series = Vec::new();
    for level in levels {
        let rows = report.curve("ml", variant, level);
        if rows.is_empty() {
            continue;
        }
        series.push(Series {
            label: format!("P_FA = {level}"),
            points: curve_points(&rows, |r| r.p_d),
        });
    }
    let spec = ChartSpec {
        title: "Detection probability vs SNR".into(),
        x_label: "SNR bin (dB)".into(),
        y_label: "P_d".into(),
        y_range: Some((0.0, 1.05)),
        ..ChartSpec::default()
    };
    fs::write(path, line_chart(&spec, &series))?;
    Ok(())
}

/// Fig. 5 analogue: position RMSE vs SNR per dataset variant.
pub fn render_fig5(report: &EvalReport, p_fa: f64, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for variant in ["whole", "partial", "mixed"] {
        let rows = report.curve("ml", variant, p_fa);
        if rows.is_empty() {
            continue;
        }
        series.push(Series {
            label: variant.to_string(),
            points: curve_points(&rows, |r| r.rmse_position_m),
        });
    }
    let spec = ChartSpec {
        title: "Position RMSE vs SNR".into(),
        x_label: "SNR bin (dB)".into(),
        y_label: "RMSE (m)".into(),
        y_range: None,
        ..ChartSpec::default()
    };
    fs::write(path, line_chart(&spec, &series))?;
    Ok(())
}

/// Fig. 6 analogue: reflectance RMSE vs SNR.
pub fn render_fig6(report: &EvalReport, variant: &str, p_fa: f64, path: &Path) -> Result<()> {
    let rows = report.curve("ml", variant, p_fa);
    let series = [Series {
        label: "ml".into(),
        points: curve_points(&rows, |r| r.rmse_reflectance_db),
    }];
    let spec = ChartSpec {
        title: "Reflectance RMSE vs SNR".into(),
        x_label: "SNR bin (dB)".into(),
        y_label: "RMSE (dB)".into(),
        y_range: None,
        ..ChartSpec::default()
    };
    fs::write(path, line_chart(&spec, &series))?;
    Ok(())
}

/// Fig. 7 analogue: P_d vs SNR for ML, GLRT, and both bound curves.
pub fn render_fig7(report: &EvalReport, variant: &str, p_fa: f64, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for (name, label) in [
        ("ml", "ML model"),
        ("glrt", "R1MSDE-style GLRT"),
        ("bound_eq5", "closed-form bound"),
        ("bound_mc_mf", "MC matched filter"),
    ] {
        let rows = report.curve(name, variant, p_fa);
        if rows.is_empty() {
            continue;
        }
        series.push(Series {
            label: label.to_string(),
            points: curve_points(&rows, |r| r.p_d),
        });
    }
    let spec = ChartSpec {
        title: format!("Detector comparison at P_FA = {p_fa}"),
        x_label: "SNR bin (dB)".into(),
        y_label: "P_d".into(),
        y_range: Some((0.0, 1.05)),
        ..ChartSpec::default()
    };
    fs::write(path, line_chart(&spec, &series))?;
    Ok(())
}

/// Fig. 8 analogue: position RMSE vs SNR for ML and GLRT.
pub fn render_fig8(report: &EvalReport, variant: &str, p_fa: f64, path: &Path) -> Result<()> {
    let mut series = Vec::new();
    for (name, label) in [("ml", "ML model"), ("glrt", "R1MSDE-style GLRT")] {
        let rows = report.curve(name, variant, p_fa);
        if rows.is_empty() {
            continue;
        }
        series.push(Series {
            label: label.to_string(),
            points: curve_points(&rows, |r| r.rmse_position_m),
        });
    }
    let spec = ChartSpec {
        title: format!("Position error comparison at P_FA = {p_fa}"),
        x_label: "SNR bin (dB)".into(),
        y_label: "RMSE (m)".into(),
        y_range: None,
        ..ChartSpec::default()
    };
    fs::write(path, line_chart(&spec, &series))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_eval_variant, DatasetVariant};
    use crate::sim::{build_pulse_template, SimConfig};

    #[test]
    fn confusion_examples() {
        let all_right = confusion_counts(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((all_right.fp, all_right.fn_), (0, 0));
        assert_eq!(all_right.p_d(), Some(1.0));
        assert_eq!(all_right.p_fa(), Some(0.0));

        let inverted = confusion_counts(&[false, true], &[true, false]).unwrap();
        assert_eq!(inverted.p_d(), Some(0.0));
        assert_eq!(inverted.p_fa(), Some(1.0));

        let c = Confusion { tp: 3, fn_: 1, ..Confusion::default() };
        assert_eq!(c.p_d(), Some(0.75));

        assert!(matches!(
            confusion_counts(&[true], &[true, false]),
            Err(OtdrError::Shape(_))
        ));
    }

    #[test]
    fn threshold_calibration_quantile_properties() {
        // Median case: with an even count the conservative quantile
        // (k = ceil((1 − p)·n)) lands exactly on the split point.
        let scores = [0.1, 0.9, 0.5, 0.3, 0.7, 0.2];
        let tau = calibrate_threshold_for_pfa(&scores, 0.5).unwrap();
        assert_eq!(tau, 0.5);
        // Odd count rounds toward fewer false alarms, never more.
        let tau = calibrate_threshold_for_pfa(&[0.1, 0.9, 0.5, 0.3, 0.7], 0.5).unwrap();
        assert_eq!(tau, 0.7);

        // Uniform grid on [0, 1]: target 0.1 → τ near 0.9, and applying τ
        // back reproduces the target within 1/n.
        let n = 1000;
        let uniform: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let tau = calibrate_threshold_for_pfa(&uniform, 0.1).unwrap();
        assert!((tau - 0.9).abs() < 0.01, "tau {tau}");
        let p_fa = uniform.iter().filter(|&&s| s >= tau).count() as f64 / n as f64;
        assert!((p_fa - 0.1).abs() <= 1.0 / n as f64 + 1e-12, "p_fa {p_fa}");

        // Too few negatives for the target tail.
        assert!(matches!(
            calibrate_threshold_for_pfa(&[0.5; 5], 0.1),
            Err(OtdrError::Calibration(_))
        ));
        assert!(matches!(
            calibrate_threshold_for_pfa(&uniform, 0.0),
            Err(OtdrError::Calibration(_))
        ));
    }

    fn synthetic_raw(entries: Vec<RawScoreEntry>, thresholds: Vec<(f64, f64)>) -> RawScores {
        RawScores {
            detector_name: "synthetic".into(),
            dataset_variant: "mixed".into(),
            sample_spacing_m: 1.0,
            thresholds,
            entries,
        }
    }

    fn entry(class_id: u8, snr_db: f32, score: f64) -> RawScoreEntry {
        RawScoreEntry {
            class_id,
            snr_db,
            score,
            position_idx_hat: 0.0,
            position_idx_label: f32::NAN,
            reflectance_db_hat: f64::NAN,
            reflectance_db_label: f32::NAN,
        }
    }

    #[test]
    fn perfect_detector_scores_give_pd_one_everywhere() {
        // Scores equal to labels: τ anywhere in (0, 1] separates perfectly.
        let mut entries = Vec::new();
        for bin in 0..N_SNR_BINS {
            for _ in 0..3 {
                entries.push(entry(1, bin as f32 + 0.4, 1.0));
                entries.push(entry(0, bin as f32 + 0.4, 0.0));
            }
        }
        let report = rows_from_raw(&synthetic_raw(entries, vec![(0.1, 0.5)]));
        assert_eq!(report.rows.len(), N_SNR_BINS as usize);
        for row in &report.rows {
            assert_eq!(row.p_d, Some(1.0));
            assert_eq!(row.p_fa, Some(0.0));
            assert_eq!(row.n_pos, 3);
            assert_eq!(row.n_neg, 3);
        }
    }

    #[test]
    fn oracle_regressor_has_zero_rmse() {
        let mut e = entry(1, 10.0, 1.0);
        e.position_idx_hat = 17.25;
        e.position_idx_label = 17.25;
        e.reflectance_db_hat = -20.5;
        e.reflectance_db_label = -20.5;
        let report = rows_from_raw(&synthetic_raw(vec![e], vec![(0.1, 0.5)]));
        let row = &report.rows[10];
        assert_eq!(row.tp, 1);
        assert_eq!(row.rmse_position_m, Some(0.0));
        assert_eq!(row.rmse_reflectance_db, Some(0.0));
    }

    #[test]
    fn rmse_counts_true_positives_only_and_is_reweighable() {
        // One detected positive (err 2 m), one missed positive (err would
        // be 10 m), one false positive: RMSE must use only the TP.
        let mut detected = entry(1, 5.0, 0.9);
        detected.position_idx_hat = 12.0;
        detected.position_idx_label = 10.0;
        let mut missed = entry(1, 5.0, 0.1);
        missed.position_idx_hat = 0.0;
        missed.position_idx_label = 10.0;
        let false_pos = entry(0, 5.0, 0.9);
        let report =
            rows_from_raw(&synthetic_raw(vec![detected, missed, false_pos], vec![(0.1, 0.5)]));
        let row = &report.rows[5];
        assert_eq!((row.tp, row.fn_, row.fp, row.tn), (1, 1, 1, 0));
        assert_eq!(row.p_d, Some(0.5));
        assert_eq!(row.rmse_position_m, Some(2.0));
        // Eq. (3)/(4) identities from stored counts.
        assert_eq!(row.p_d.unwrap(), row.tp as f64 / (row.tp + row.fn_) as f64);
        assert_eq!(row.p_fa.unwrap(), row.fp as f64 / (row.fp + row.tn) as f64);
        // Empty bins are present with zero counts and absent metrics.
        let empty = &report.rows[20];
        assert_eq!((empty.n_pos, empty.n_neg), (0, 0));
        assert_eq!(empty.p_d, None);
        assert_eq!(empty.rmse_position_m, None);
    }

    #[test]
    fn roc_monotone_in_pfa_level() {
        // Noisy synthetic scorer: higher allowed P_FA (lower τ) can only
        // increase P_d at each bin.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut neg_scores: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let entries: Vec<RawScoreEntry> = (0..4000)
            .map(|i| {
                let class = (i % 2 == 0) as u8;
                let snr = rng.random_range(0.0f32..30.0);
                let boost = if class == 1 { 0.1 + snr as f64 / 40.0 } else { 0.0 };
                entry(class, snr, rng.random::<f64>() + boost)
            })
            .collect();
        neg_scores.sort_by(|a, b| a.total_cmp(b));
        let thresholds: Vec<(f64, f64)> = P_FA_LEVELS
            .iter()
            .map(|&l| (l, calibrate_threshold_for_pfa(&neg_scores, l).unwrap()))
            .collect();
        let report = rows_from_raw(&synthetic_raw(entries, thresholds));
        for bin in 0..N_SNR_BINS {
            let pd_at = |level: f64| {
                report
                    .curve("synthetic", "mixed", level)
                    .iter()
                    .find(|r| r.snr_bin_db == bin)
                    .and_then(|r| r.p_d)
            };
            if let (Some(a), Some(b), Some(c)) = (pd_at(0.01), pd_at(0.05), pd_at(0.1)) {
                assert!(a <= b + 1e-12 && b <= c + 1e-12, "bin {bin}: {a} {b} {c}");
            }
        }
    }

    #[test]
    fn raw_scores_round_trip_and_rejections() {
        let raw = synthetic_raw(
            vec![entry(1, 3.5, 0.25), entry(0, 29.9, 0.75)],
            vec![(0.1, 0.5), (0.01, 0.9)],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw_scores.bin");
        raw.save(&path).unwrap();
        let loaded = RawScores::load(&path).unwrap();
        // Derived PartialEq fails on the NaN sentinels, so compare the
        // non-NaN fields directly plus the re-serialized bytes.
        assert_eq!(loaded.detector_name, raw.detector_name);
        assert_eq!(loaded.thresholds, raw.thresholds);
        assert_eq!(loaded.entries.len(), raw.entries.len());
        let resaved = dir.path().join("resaved.bin");
        loaded.save(&resaved).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&resaved).unwrap());

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(RawScores::load(&path), Err(OtdrError::Format(_))));
        fs::write(&path, b"junk").unwrap();
        assert!(matches!(RawScores::load(&path), Err(OtdrError::Format(_))));
    }

    #[test]
    fn report_regenerates_bit_identically_from_persisted_scores() {
        let cfg = SimConfig { trace_len_samples: 200, rng_seed: 5, ..SimConfig::default() };
        let template = build_pulse_template(&cfg).unwrap();
        let ds = build_eval_variant(&cfg, 30, DatasetVariant::Mixed).unwrap();
        let raw = raw_scores_glrt(&template, &ds, &[0.1, 0.05]).unwrap();
        let report = rows_from_raw(&raw);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw_scores.bin");
        raw.save(&path).unwrap();
        let regenerated = rows_from_raw(&RawScores::load(&path).unwrap());
        assert_eq!(report.to_csv_string(), regenerated.to_csv_string());
        assert!(report.to_csv_string().starts_with("detector,variant,"));
    }

    #[test]
    fn glrt_localizes_noise_free_whole_patterns_under_half_meter() {
        // Zero-noise hook: a degenerate SNR range far above the working
        // band leaves the event shape untouched by noise.
        let cfg = SimConfig {
            trace_len_samples: 200,
            snr_db_range: [100.0, 100.0],
            rng_seed: 31,
            ..SimConfig::default()
        };
        let template = build_pulse_template(&cfg).unwrap();
        let ds = build_eval_variant(&cfg, 25, DatasetVariant::Whole).unwrap();
        let raw = raw_scores_glrt(&template, &ds, &[0.1]).unwrap();
        let report = rows_from_raw(&raw);
        let mut n_tp = 0;
        for row in report.curve("glrt", "whole", 0.1) {
            if let Some(rmse) = row.rmse_position_m {
                assert!(rmse < 0.5, "bin {}: RMSE {rmse}", row.snr_bin_db);
                n_tp += row.tp;
            }
        }
        assert!(n_tp >= 20, "only {n_tp} true positives scored");
    }

    #[test]
    fn compare_emits_all_four_detectors_with_monotone_bounds() {
        let cfg = SimConfig { trace_len_samples: 200, rng_seed: 8, ..SimConfig::default() };
        let template = build_pulse_template(&cfg).unwrap();
        let ds = build_eval_variant(&cfg, 30, DatasetVariant::Whole).unwrap();
        // An untrained net is a valid (weak) detector for plumbing checks.
        let net = MultiTaskNet::new(
            &crate::model::ModelConfig {
                conv_filters: [4, 4, 4, 4],
                head_hidden: 4,
                ..crate::model::ModelConfig::default()
            },
            cfg.reflectance_db_range,
        )
        .unwrap();
        let (report, raws) = compare_detectors(&net, &template, &ds, 0.1, 4000, 77).unwrap();
        assert_eq!(raws.len(), 2);
        for name in ["ml", "glrt", "bound_eq5", "bound_mc_mf"] {
            assert_eq!(
                report.curve(name, "whole", 0.1).len(),
                N_SNR_BINS as usize,
                "{name} rows"
            );
        }
        // Bound curves are nondecreasing in SNR up to MC jitter.
        let eq5: Vec<f64> = report
            .curve("bound_eq5", "whole", 0.1)
            .iter()
            .filter_map(|r| r.p_d)
            .collect();
        assert!(eq5.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let mc: Vec<f64> = report
            .curve("bound_mc_mf", "whole", 0.1)
            .iter()
            .filter_map(|r| r.p_d)
            .collect();
        assert!(mc.windows(2).all(|w| w[1] >= w[0] - 0.02));

        // Figures render to non-empty SVG documents.
        let dir = tempfile::tempdir().unwrap();
        let fig7 = dir.path().join("fig7.svg");
        let fig8 = dir.path().join("fig8.svg");
        render_fig7(&report, "whole", 0.1, &fig7).unwrap();
        render_fig8(&report, "whole", 0.1, &fig8).unwrap();
        for p in [fig7, fig8] {
            let text = fs::read_to_string(p).unwrap();
            assert!(text.starts_with("<svg"));
            assert!(text.contains("polyline"));
        }
    }
}

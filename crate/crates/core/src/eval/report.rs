//! Rendered evaluation artifacts: CSV matrices, CAM overlays, summaries.

use std::path::Path;

use serde::Serialize;

use super::confusion::ConfusionMatrix;
use super::gradcam::CamMap;
use super::EvalReport;
use crate::data::png;
use crate::error::Result;

pub fn write_confusion_csv(matrix: &ConfusionMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, matrix.to_csv())?;
    Ok(())
}

/// Five-stop blue-to-red heat colormap.
fn heat_color(v: f64) -> [u8; 3] {
    let stops: [(f64, [f64; 3]); 5] = [
        (0.0, [15.0, 15.0, 120.0]),
        (0.25, [30.0, 120.0, 220.0]),
        (0.5, [40.0, 200.0, 80.0]),
        (0.75, [235.0, 200.0, 30.0]),
        (1.0, [220.0, 40.0, 30.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for pair in stops.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return [
                (ca[0] + (cb[0] - ca[0]) * t) as u8,
                (ca[1] + (cb[1] - ca[1]) * t) as u8,
                (ca[2] + (cb[2] - ca[2]) * t) as u8,
            ];
        }
    }
    [220, 40, 30]
}

/// Alpha-blends the heatmap over an RGB frame.
pub fn cam_overlay(frame_rgb: &[u8], cam: &CamMap) -> Vec<u8> {
    let mut out = frame_rgb.to_vec();
    for p in 0..cam.height * cam.width {
        let v = cam.upsampled[p];
        let color = heat_color(v);
        let alpha = 0.55 * v;
        for c in 0..3 {
            let base = out[p * 3 + c] as f64;
            out[p * 3 + c] = (base * (1.0 - alpha) + color[c] as f64 * alpha) as u8;
        }
    }
    out
}

/// Writes the pure heatmap and the overlay next to each other.
pub fn save_cam_pngs(
    cam: &CamMap,
    frame_rgb: &[u8],
    heat_path: &Path,
    overlay_path: &Path,
) -> Result<()> {
    let mut heat = vec![0u8; cam.height * cam.width * 3];
    for p in 0..cam.height * cam.width {
        let c = heat_color(cam.upsampled[p]);
        heat[p * 3..p * 3 + 3].copy_from_slice(&c);
    }
    png::save_rgb(heat_path, cam.width, cam.height, &heat)?;
    png::save_rgb(overlay_path, cam.width, cam.height, &cam_overlay(frame_rgb, cam))?;
    Ok(())
}

#[derive(Serialize)]
struct JsonReport<'a> {
    split: String,
    scenario: String,
    total: usize,
    accuracy: f64,
    per_class: Vec<JsonClass>,
    confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

#[derive(Serialize)]
struct JsonClass {
    class: usize,
    samples: u64,
    correct: u64,
    recall: f64,
}

pub fn write_summary_json(report: &EvalReport, path: &Path) -> Result<()> {
    let k = report.matrix.classes();
    let confusion: Vec<Vec<u64>> = (0..k)
        .map(|t| (0..k).map(|p| report.matrix.count(t, p)).collect())
        .collect();
    let body = JsonReport {
        split: report.split.to_string(),
        scenario: report
            .scenario
            .map(|s| s.to_string())
            .unwrap_or_else(|| "all".to_string()),
        total: report.total,
        accuracy: report.accuracy,
        per_class: report
            .matrix
            .per_class()
            .iter()
            .enumerate()
            .map(|(class, &(samples, correct, recall))| JsonClass { class, samples, correct, recall })
            .collect(),
        confusion,
        note: None,
    };
    let text = serde_json::to_string_pretty(&body)
        .map_err(|e| crate::error::Error::Data(format!("report serialization: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_summary_markdown(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str("# Evaluation summary\n\n");
    text.push_str(&format!("- split: {}\n", report.split));
    text.push_str(&format!(
        "- scenario: {}\n",
        report.scenario.map(|s| s.to_string()).unwrap_or_else(|| "all".into())
    ));
    text.push_str(&format!("- sequences: {}\n", report.total));
    text.push_str(&format!("- accuracy: {:.4}\n\n", report.accuracy));
    text.push_str("| class | samples | correct | recall |\n");
    text.push_str("|------:|--------:|--------:|-------:|\n");
    for (class, (samples, correct, recall)) in report.matrix.per_class().iter().enumerate() {
        text.push_str(&format!("| {class} | {samples} | {correct} | {recall:.4} |\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Scenario, Split};

    fn sample_report() -> EvalReport {
        let mut matrix = ConfusionMatrix::new(2);
        matrix.record(0, 0).unwrap();
        matrix.record(0, 0).unwrap();
        matrix.record(1, 0).unwrap();
        matrix.record(1, 1).unwrap();
        EvalReport {
            accuracy: matrix.accuracy(),
            total: 4,
            matrix,
            split: Split::Test,
            scenario: Some(Scenario::Walking),
        }
    }

    #[test]
    fn csv_row_sums_equal_counts() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("confusion.csv");
        write_confusion_csv(&report.matrix, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let row1: Vec<u64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(row1.iter().sum::<u64>(), report.matrix.row_sum(0));
    }

    #[test]
    fn renders_are_deterministic() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        write_summary_json(&report, &a).unwrap();
        write_summary_json(&report, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn overlay_dims_match_input() {
        let cam = CamMap {
            layer_h: 2,
            layer_w: 3,
            raw: vec![0.0; 6],
            height: 8,
            width: 12,
            upsampled: vec![0.5; 96],
            target_class: 1,
            predicted_class: 1,
        };
        let frame = vec![100u8; 8 * 12 * 3];
        let overlay = cam_overlay(&frame, &cam);
        assert_eq!(overlay.len(), frame.len());
        let dir = tempfile::tempdir().unwrap();
        save_cam_pngs(
            &cam,
            &frame,
            &dir.path().join("heat.png"),
            &dir.path().join("overlay.png"),
        )
        .unwrap();
        let back = png::load_rgb(&dir.path().join("overlay.png")).unwrap();
        assert_eq!((back.width, back.height), (12, 8));
    }
}

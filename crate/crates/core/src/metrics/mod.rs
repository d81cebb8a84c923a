//! Pixel F1 evaluation, JPEG robustness sweep and report emission.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::codecs::jpeg::JpegEncoder;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::STRIDE;
use crate::dataio::Sample;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::model::{priors_to_tensors, Scaf};
use crate::{nn, raster};

pub use plot::{plot_per_image, plot_robustness};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`; 1 when both prediction and truth are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Counts with a pixel predicted manipulated when `prob > threshold`.
pub fn confusion(probs: &Array2<f32>, gt: &Array2<bool>, threshold: f32) -> Result<Confusion> {
    if probs.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            probs.dim(),
            gt.dim()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in probs.iter().zip(gt.iter()) {
        match (p > threshold, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn f1_at_threshold(probs: &Array2<f32>, gt: &Array2<bool>, threshold: f32) -> Result<f64> {
    Ok(confusion(probs, gt, threshold)?.f1())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub threshold: f32,
    pub per_image_f1: BTreeMap<String, f64>,
    pub mean_f1: f64,
    /// Images that could not be scored, with the reason.
    pub errors: BTreeMap<String, String>,
}

/// Inference wrapper: resizes to a valid input size and back.
pub struct Predictor<'a> {
    pub model: &'a Scaf,
    pub md: &'a Discriminator,
    /// Side length used for inputs whose size is not a multiple of 32.
    pub fallback_size: usize,
}

impl Predictor<'_> {
    /// `sigmoid(M1)` at the image's own resolution.
    pub fn predict(&self, image: &Array3<f32>) -> Result<Array2<f32>> {
        let (h, w, _) = image.dim();
        let resized;
        let input = if h % STRIDE == 0 && w % STRIDE == 0 {
            image
        } else {
            resized = raster::resize_bilinear(image, self.fallback_size, self.fallback_size);
            &resized
        };
        let priors = self.md.prior_map(input)?;
        let dtype = self.model.store().dtype();
        let x = raster::images_to_tensor(&[input], dtype)?;
        let (mp, ap) = priors_to_tensors(&[&priors], dtype)?;
        let out = self.model.forward(&x, &mp, &ap, false)?;
        let probs = raster::tensor_to_map(&nn::sigmoid(&out.m1)?.to_dtype(DType::F32)?, 0)?;
        if probs.dim() == (h, w) {
            Ok(probs)
        } else {
            Ok(raster::resize_map_bilinear(&probs, h, w))
        }
    }

    pub fn evaluate(&self, dataset: &str, samples: &[Sample]) -> Result<EvalResult> {
        self.evaluate_with(dataset, samples, |img| Ok(img.clone()))
    }

    fn evaluate_with(
        &self,
        dataset: &str,
        samples: &[Sample],
        degrade: impl Fn(&Array3<f32>) -> Result<Array3<f32>>,
    ) -> Result<EvalResult> {
        if samples.is_empty() {
            return Err(Error::Empty(format!("dataset `{dataset}` has no samples")));
        }
        let mut per_image_f1 = BTreeMap::new();
        let mut errors = BTreeMap::new();
        for s in samples {
            let Some(gt) = &s.dense_mask else {
                errors.insert(s.id.clone(), "missing dense mask".to_string());
                continue;
            };
            let probs = self.predict(&degrade(&s.image)?)?;
            per_image_f1.insert(s.id.clone(), f1_at_threshold(&probs, gt, DEFAULT_THRESHOLD)?);
        }
        if !errors.is_empty() {
            log::warn!("{} image(s) in `{dataset}` could not be scored", errors.len());
        }
        let mean_f1 = if per_image_f1.is_empty() {
            0.0
        } else {
            per_image_f1.values().sum::<f64>() / per_image_f1.len() as f64
        };
        Ok(EvalResult {
            dataset: dataset.to_string(),
            threshold: DEFAULT_THRESHOLD,
            per_image_f1,
            mean_f1,
            errors,
        })
    }

    /// Mean F1 after re-encoding every image as JPEG at each quality, in the
    /// order given.
    pub fn robustness_sweep(&self, dataset: &str, samples: &[Sample], qualities: &[u8]) -> Result<RobustnessTable> {
        for &q in qualities {
            validate_quality(q)?;
        }
        let baseline = self.evaluate(dataset, samples)?.mean_f1;
        let mut rows = Vec::with_capacity(qualities.len());
        for &q in qualities {
            let r = self.evaluate_with(dataset, samples, |img| jpeg_roundtrip(img, q))?;
            rows.push(RobustnessRow {
                quality: q,
                mean_f1: r.mean_f1,
            });
        }
        Ok(RobustnessTable {
            dataset: dataset.to_string(),
            baseline_f1: baseline,
            rows,
        })
    }
}

fn validate_quality(q: u8) -> Result<()> {
    if !(1..=100).contains(&q) {
        return Err(Error::Invalid(format!("JPEG quality must be in 1..=100, got {q}")));
    }
    Ok(())
}

/// Encode as JPEG at `quality` and decode again.
pub fn jpeg_roundtrip(img: &Array3<f32>, quality: u8) -> Result<Array3<f32>> {
    validate_quality(quality)?;
    let rgb = raster::array_to_rgb(img);
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::Invalid(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Invalid(format!("jpeg decode: {e}")))?
        .to_rgb8();
    Ok(raster::rgb_to_array(&decoded))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub quality: u8,
    pub mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub dataset: String,
    pub baseline_f1: f64,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quality,mean_f1\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6}\n", r.quality, r.mean_f1));
        }
        s
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializable"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Evaluation files: `eval.json`, `per_image.csv`, `per_image_f1.svg`.
pub fn write_eval(dir: &Path, result: &EvalResult) -> Result<Vec<PathBuf>> {
    let json = dir.join("eval.json");
    write_json(&json, result)?;
    let csv = dir.join("per_image.csv");
    let mut text = String::from("id,f1\n");
    for (id, f1) in &result.per_image_f1 {
        text.push_str(&format!("{id},{f1:.6}\n"));
    }
    write_text(&csv, &text)?;
    let svg = dir.join("per_image_f1.svg");
    plot_per_image(&svg, result)?;
    Ok(vec![json, csv, svg])
}

/// Robustness files: `robustness.json`, `robustness.csv`, `robustness.svg`.
pub fn write_robustness(dir: &Path, table: &RobustnessTable) -> Result<Vec<PathBuf>> {
    let json = dir.join("robustness.json");
    write_json(&json, table)?;
    let csv = dir.join("robustness.csv");
    write_text(&csv, &table.to_csv())?;
    let svg = dir.join("robustness.svg");
    plot_robustness(&svg, table)?;
    Ok(vec![json, csv, svg])
}

/// Markdown summary of whatever results exist under `dir`; every file the
/// report links to is checked to exist.
pub fn write_report(dir: &Path, out: &Path) -> Result<PathBuf> {
    let mut text = String::from("# Evaluation report\n\n");
    let mut linked: Vec<PathBuf> = Vec::new();
    let eval_path = dir.join("eval.json");
    let robust_path = dir.join("robustness.json");
    if !eval_path.exists() && !robust_path.exists() {
        return Err(Error::Empty(format!(
            "no eval.json or robustness.json under {}",
            dir.display()
        )));
    }
    if eval_path.exists() {
        let r: EvalResult = read_json(&eval_path)?;
        text.push_str(&format!(
            "## Localization ({})\n\nMean F1@{}: **{:.4}** over {} image(s)",
            r.dataset,
            r.threshold,
            r.mean_f1,
            r.per_image_f1.len()
        ));
        if !r.errors.is_empty() {
            text.push_str(&format!(", {} unscored", r.errors.len()));
        }
        text.push_str("\n\n| image | F1 |\n|---|---|\n");
        for (id, f1) in &r.per_image_f1 {
            text.push_str(&format!("| {id} | {f1:.4} |\n"));
        }
        text.push_str("\n![per-image F1](per_image_f1.svg)\n\n");
        linked.extend([eval_path, dir.join("per_image.csv"), dir.join("per_image_f1.svg")]);
    }
    if robust_path.exists() {
        let t: RobustnessTable = read_json(&robust_path)?;
        text.push_str(&format!(
            "## JPEG robustness ({})\n\nUncompressed mean F1: {:.4}\n\n| quality | mean F1 |\n|---|---|\n",
            t.dataset, t.baseline_f1
        ));
        for r in &t.rows {
            text.push_str(&format!("| {} | {:.4} |\n", r.quality, r.mean_f1));
        }
        text.push_str("\n![F1 vs quality](robustness.svg)\n");
        linked.extend([robust_path, dir.join("robustness.csv"), dir.join("robustness.svg")]);
    }
    if let Some(missing) = linked.iter().find(|p| !p.exists()) {
        return Err(Error::Empty(format!("report input {} is missing", missing.display())));
    }
    write_text(out, &text)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Array2<bool> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(r, c)| rows[r].as_bytes()[c] == b'#')
    }

    #[test]
    fn f1_cases() {
        let gt = mask(&["##..", "....", "..#.", "...."]);
        let probs = gt.mapv(|g| if g { 0.9 } else { 0.1 });
        assert_eq!(f1_at_threshold(&probs, &gt, 0.5).unwrap(), 1.0);
        let none = Array2::from_elem((4, 4), 0.2f32);
        assert_eq!(f1_at_threshold(&none, &gt, 0.5).unwrap(), 0.0);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(f1_at_threshold(&none, &empty, 0.5).unwrap(), 1.0);
        assert!(f1_at_threshold(&none, &mask(&["#"]), 0.5).is_err());
    }

    #[test]
    fn two_two_one_one() {
        let gt = mask(&["###.", "....", "....", "...."]);
        let pred = mask(&["##.#", "....", "....", "...."]).mapv(|p| if p { 1.0f32 } else { 0.0 });
        let c = confusion(&pred, &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        assert!((c.f1() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_strict() {
        let gt = mask(&["#"]);
        assert_eq!(f1_at_threshold(&Array2::from_elem((1, 1), 0.5), &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn jpeg_quality_bounds() {
        let img = Array3::from_elem((8, 8, 3), 0.5f32);
        assert!(jpeg_roundtrip(&img, 0).is_err());
        assert!(jpeg_roundtrip(&img, 101).is_err());
        let back = jpeg_roundtrip(&img, 100).unwrap();
        assert!(back.iter().all(|&v| (v - 0.5).abs() < 0.02));
    }

    #[test]
    fn report_requires_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(dir.path(), &dir.path().join("report.md")).is_err());
        let r = EvalResult {
            dataset: "toy".into(),
            threshold: 0.5,
            per_image_f1: [("a".to_string(), 0.5), ("b".to_string(), 1.0)].into(),
            mean_f1: 0.75,
            errors: BTreeMap::new(),
        };
        let files = write_eval(dir.path(), &r).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let table = RobustnessTable {
            dataset: "toy".into(),
            baseline_f1: 0.75,
            rows: vec![
                RobustnessRow { quality: 90, mean_f1: 0.7 },
                RobustnessRow { quality: 10, mean_f1: 0.4 },
            ],
        };
        write_robustness(dir.path(), &table).unwrap();
        assert_eq!(table.to_csv(), "quality,mean_f1\n90,0.700000\n10,0.400000\n");
        let out = write_report(dir.path(), &dir.path().join("report.md")).unwrap();
        let text = fs::read_to_string(out).unwrap();
        assert!(text.contains("0.7500") && text.contains("| 10 | 0.4000 |"));
    }
}

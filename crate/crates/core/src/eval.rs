//! RMSE scoring against a bicubic baseline, and PPM rendering of count
//! images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{arg, shape, Result};
use crate::event::PolarFrame;
use crate::model::{estimate_flops, ModelState};
use crate::sim::bicubic_plane;
use crate::tensor::Real;
use crate::train::Sample;

/// `√(mean squared difference)` over every frame, channel and pixel.
pub fn rmse(sr: &[PolarFrame], hr: &[PolarFrame]) -> Result<f64> {
    if sr.is_empty() || sr.len() != hr.len() {
        return Err(shape(format!(
            "rmse needs equal non-zero lengths, got {} and {}",
            sr.len(),
            hr.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in sr.iter().zip(hr) {
        if !a.same_shape(b) {
            return Err(shape(format!(
                "frame {}x{} vs {}x{}",
                a.width(),
                a.height(),
                b.width(),
                b.height()
            )));
        }
        for (x, y) in a.pos().iter().chain(a.neg()).zip(b.pos().iter().chain(b.neg())) {
            sum += (x - y) * (x - y);
        }
        n += 2 * a.width() * a.height();
    }
    Ok((sum / n as f64).sqrt())
}

/// Bicubic `S×` upsampling of both count channels, clamped at zero.
pub fn bicubic_upsample_frame(frame: &PolarFrame, scale: usize) -> Result<PolarFrame> {
    if scale == 0 {
        return Err(arg("scale must be at least 1"));
    }
    let (w, h) = (frame.width(), frame.height());
    let up = |plane: &[f64]| -> Vec<f64> {
        bicubic_plane(plane, w, h, w * scale, h * scale)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect()
    };
    PolarFrame::from_maps(w * scale, h * scale, up(frame.pos()), up(frame.neg()), frame.window())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub rmse: f64,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRow {
    pub index: usize,
    pub model_rmse: f64,
    pub bicubic_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodRow>,
    pub sequences: Vec<SequenceRow>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodRow> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,rmse,params,flops\n");
        for m in &self.methods {
            let _ = writeln!(out, "{},{},{},{}", m.method, m.rmse, m.params, m.flops);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>12} {:>12} {:>16}\n", "method", "rmse", "params", "flops/step");
        for m in &self.methods {
            let _ = writeln!(out, "{:<10} {:>12.6} {:>12} {:>16}", m.method, m.rmse, m.params, m.flops);
        }
        if self.sequences.len() > 1 {
            out.push('\n');
            let _ = writeln!(out, "{:<10} {:>12} {:>12}", "sequence", "model", "bicubic");
            for s in &self.sequences {
                let _ = writeln!(out, "{:<10} {:>12.6} {:>12.6}", s.index, s.model_rmse, s.bicubic_rmse);
            }
        }
        out
    }
}

/// Scores the model and the bicubic baseline on the same inputs. Dataset
/// RMSE is the mean of per-sequence RMSE.
pub fn evaluate<F: Real>(model: &ModelState<F>, dataset: &[Sample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(arg("evaluation set is empty"));
    }
    let scale = model.config().scale;
    let mut sequences = Vec::with_capacity(dataset.len());
    for (index, sample) in dataset.iter().enumerate() {
        if sample.scale() != scale {
            return Err(shape(format!("sample {index} has scale {}, model {scale}", sample.scale())));
        }
        let sr = model.infer(sample.lr())?;
        let bicubic = sample
            .lr()
            .iter()
            .map(|f| bicubic_upsample_frame(f, scale))
            .collect::<Result<Vec<_>>>()?;
        sequences.push(SequenceRow {
            index,
            model_rmse: rmse(&sr, sample.hr())?,
            bicubic_rmse: rmse(&bicubic, sample.hr())?,
        });
    }
    let n = sequences.len() as f64;
    let (w, h) = dataset[0].lr_size();
    let methods = vec![
        MethodRow {
            method: "bicubic".into(),
            rmse: sequences.iter().map(|s| s.bicubic_rmse).sum::<f64>() / n,
            params: 0,
            flops: 0,
        },
        MethodRow {
            method: format!("bmcnet-{}", model.config().variant),
            rmse: sequences.iter().map(|s| s.model_rmse).sum::<f64>() / n,
            params: model.count_params(),
            flops: estimate_flops(model.config(), h, w),
        },
    ];
    Ok(EvalReport { methods, sequences })
}

const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const BLUE: [f64; 3] = [0.0, 0.0, 255.0];
const RED: [f64; 3] = [255.0, 0.0, 0.0];
const PURPLE: [f64; 3] = [128.0, 0.0, 128.0];

/// Binary PPM of a count frame on white: blue where positive counts
/// dominate, red for negative, purple for ties. Saturation is the count
/// over the frame's largest count.
pub fn frame_ppm(frame: &PolarFrame) -> Vec<u8> {
    let (w, h) = (frame.width(), frame.height());
    let max = frame
        .pos()
        .iter()
        .chain(frame.neg())
        .fold(0.0f64, |m, &v| m.max(v));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for (&p, &n) in frame.pos().iter().zip(frame.neg()) {
        let (count, target) = if p > n {
            (p, BLUE)
        } else if n > p {
            (n, RED)
        } else {
            (p, PURPLE)
        };
        let frac = if max > 0.0 { (count / max).min(1.0) } else { 0.0 };
        for c in 0..3 {
            let v = WHITE[c] + (target[c] - WHITE[c]) * frac;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn render_frame(frame: &PolarFrame, path: &Path) -> Result<()> {
    fs::write(path, frame_ppm(frame))?;
    Ok(())
}

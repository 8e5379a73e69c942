//! Image quality metrics: MSE, PSNR and SSIM, plus per-method aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SsimMode {
    /// One evaluation over the whole image.
    Global,
    /// Mean over Gaussian-weighted `window x window` patches (valid positions only).
    Windowed { window: usize, sigma: f64 },
}

impl SsimMode {
    pub fn label(&self) -> String {
        match self {
            SsimMode::Global => "global".into(),
            SsimMode::Windowed { window, sigma } => format!("windowed{window}x{window}_sigma{sigma}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub peakval: f64,
    /// Defaults to `(0.01 * peakval)^2` when absent.
    pub ssim_c1: Option<f64>,
    /// Defaults to `(0.03 * peakval)^2` when absent.
    pub ssim_c2: Option<f64>,
    pub ssim_mode: SsimMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            peakval: 1.0,
            ssim_c1: None,
            ssim_c2: None,
            ssim_mode: SsimMode::Global,
        }
    }
}

impl MetricsConfig {
    pub fn windowed() -> Self {
        Self {
            ssim_mode: SsimMode::Windowed { window: 7, sigma: 1.5 },
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        self.ssim_c1.unwrap_or((0.01 * self.peakval).powi(2))
    }

    pub fn c2(&self) -> f64 {
        self.ssim_c2.unwrap_or((0.03 * self.peakval).powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peakval > 0.0) {
            return Err(Error::Config(format!("metrics: peakval must be > 0, got {}", self.peakval)));
        }
        if !(self.c1() > 0.0 && self.c2() > 0.0) {
            return Err(Error::Config("metrics: ssim_c1 and ssim_c2 must be > 0".into()));
        }
        if let SsimMode::Windowed { window, sigma } = self.ssim_mode {
            if window == 0 || !(sigma > 0.0) {
                return Err(Error::Config(format!(
                    "metrics: windowed SSIM needs window >= 1 and sigma > 0, got {window} and {sigma}"
                )));
            }
        }
        Ok(())
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<Shape> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(a.shape())
}

/// Mean squared difference over all elements.
pub fn mse(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape("mse", yhat, y)?;
    let s: f64 = yhat.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / yhat.numel() as f64)
}

/// `10 log10(peak^2 / mse)` in dB.
pub fn psnr_from_mse(mse: f64, peakval: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peakval * peakval / mse).log10()
}

/// PSNR in dB; identical images give `f64::INFINITY`.
pub fn psnr(yhat: &Tensor, y: &Tensor, cfg: &MetricsConfig) -> Result<f64> {
    Ok(psnr_from_mse(mse(yhat, y)?, cfg.peakval))
}

fn ssim_terms(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn ssim_global(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cab += dx * dy;
    }
    ssim_terms(ma, mb, va / n, vb / n, cab / n, c1, c2)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

fn ssim_windowed(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64], c1: f64, c2: f64) -> f64 {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let wt = win[u] * win[v];
                    let idx = (i + u) * w + j + v;
                    let (x, y) = (a[idx], b[idx]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            total += ssim_terms(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb, c1, c2);
        }
    }
    total / (oh * ow) as f64
}

/// Structural similarity, averaged over the batch (and over channel planes in windowed mode).
pub fn ssim(yhat: &Tensor, y: &Tensor, cfg: &MetricsConfig) -> Result<f64> {
    let s = same_shape("ssim", yhat, y)?;
    cfg.validate()?;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    match cfg.ssim_mode {
        SsimMode::Global => {
            let item = s.c * s.plane();
            let total: f64 = (0..s.n)
                .map(|n| {
                    let r = n * item..(n + 1) * item;
                    ssim_global(&yhat.data()[r.clone()], &y.data()[r], c1, c2)
                })
                .sum();
            Ok(total / s.n as f64)
        }
        SsimMode::Windowed { window, sigma } => {
            if s.h < window || s.w < window {
                return Err(Error::InvalidArgument(format!(
                    "ssim: image {}x{} is smaller than the {window}x{window} window",
                    s.h, s.w
                )));
            }
            let win = gaussian_window(window, sigma);
            let plane = s.plane();
            let planes = s.n * s.c;
            let total: f64 = (0..planes)
                .map(|p| {
                    let r = p * plane..(p + 1) * plane;
                    ssim_windowed(&yhat.data()[r.clone()], &y.data()[r], s.h, s.w, &win, c1, c2)
                })
                .sum();
            Ok(total / planes as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Score one prediction against its target.
pub fn score(id: impl Into<String>, yhat: &Tensor, y: &Tensor, cfg: &MetricsConfig) -> Result<MetricsRow> {
    let m = mse(yhat, y)?;
    Ok(MetricsRow {
        id: id.into(),
        mse: m,
        psnr: psnr_from_mse(m, cfg.peakval),
        ssim: ssim(yhat, y, cfg)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub params_overhead: usize,
    pub ssim_mode: String,
    pub rows: Vec<MetricsRow>,
    pub mse: f64,
    /// Mean over rows with finite PSNR; infinite if every row is infinite.
    pub psnr: f64,
    pub ssim: f64,
    /// Rows whose PSNR was infinite and therefore left out of `psnr`.
    pub infinite_psnr: usize,
}

/// Arithmetic means of per-image rows.
pub fn aggregate(
    method: impl Into<String>,
    params_overhead: usize,
    cfg: &MetricsConfig,
    rows: Vec<MetricsRow>,
) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("aggregate: no rows".into()));
    }
    let n = rows.len() as f64;
    let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
    let psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(MetricsReport {
        method: method.into(),
        params_overhead,
        ssim_mode: cfg.ssim_mode.label(),
        mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        psnr,
        infinite_psnr: rows.len() - finite.len(),
        rows,
    })
}

/// Fixed six-decimal formatting; infinities print as `inf`.
pub fn fmt6(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

pub fn aggregate_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("method,params_overhead,psnr,mse,ssim\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{},{}", r.method, r.params_overhead, fmt6(r.psnr), fmt6(r.mse), fmt6(r.ssim));
    }
    out
}

pub fn per_image_csv(report: &MetricsReport) -> String {
    let mut out = String::from("id,psnr,mse,ssim\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{}", r.id, fmt6(r.psnr), fmt6(r.mse), fmt6(r.ssim));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Train-and-evaluate sweeps over attention kinds, ranked by SSIM.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::kspace::Dataset;
use crate::metrics::{fmt6, write_text, MetricsConfig, MetricsReport};
use crate::trainer::{evaluate, TrainConfig, TrainLog, Trainer};
use crate::unet::{model_param_count, UNetConfig, UNetModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub kinds: Vec<AttentionKind>,
    /// Backbone shared by every run; its `attention` field is replaced per kind.
    pub unet: UNetConfig,
    /// Shared recipe; its `seed` is replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub metrics: MetricsConfig,
}

impl BenchSpec {
    /// Kinds to run: the requested ones, deduplicated by name, with the
    /// `none` baseline added up front when missing.
    pub fn resolved_kinds(&self) -> Result<Vec<AttentionKind>> {
        let mut out: Vec<AttentionKind> = Vec::new();
        if !self.kinds.iter().any(AttentionKind::is_none) {
            out.push(AttentionKind::None);
        }
        for k in &self.kinds {
            if out.iter().any(|o| o.name() == k.name()) {
                return Err(Error::Config(format!("bench: attention kind '{}' listed twice", k.name())));
            }
            out.push(k.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("bench: seeds must not be empty".into()));
        }
        self.resolved_kinds()?;
        self.train.validate()?;
        self.metrics.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub psnr: f64,
    pub mse: f64,
    pub ssim: f64,
    pub overhead: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub parameters: String,
    pub computational_overhead: usize,
    /// Medians over successful seeds; `None` when every seed failed.
    pub metrics: Option<(f64, f64, f64)>,
    pub failures: Vec<String>,
}

impl BenchRow {
    pub fn ssim(&self) -> Option<f64> {
        self.metrics.map(|m| m.2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    /// Sorted by SSIM descending; failed rows last.
    pub rows: Vec<BenchRow>,
    pub runs: Vec<RunResult>,
    pub zero_filled: MetricsReport,
    pub ssim_mode: String,
}

/// Median of a nonempty list (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stable descending sort by SSIM; ties keep input order, failed rows go last.
pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by(|a, b| match (a.ssim(), b.ssim()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// One build, train and evaluate cycle.
pub fn run_one(
    kind: &AttentionKind,
    seed: u64,
    spec: &BenchSpec,
    train: &Dataset,
    test: &Dataset,
) -> Result<(UNetModel, TrainLog, MetricsReport)> {
    let unet = UNetConfig {
        attention: kind.clone(),
        ..spec.unet.clone()
    };
    let cfg = TrainConfig { seed, ..spec.train.clone() };
    let mut trainer = Trainer::new(&unet, &cfg)?;
    let mut log = TrainLog::default();
    trainer.fit(train, None, &mut log)?;
    let report = evaluate(&trainer.model, test, &spec.metrics)?;
    Ok((trainer.model, log, report.model))
}

/// Every kind x seed run; failures become failed rows instead of aborting.
/// `on_run` sees each finished run (in completion order) for progress output.
pub fn run_bench(
    spec: &BenchSpec,
    train: &Dataset,
    test: &Dataset,
    on_run: &(dyn Fn(&RunResult) + Sync),
) -> Result<BenchTable> {
    spec.validate()?;
    let kinds = spec.resolved_kinds()?;
    let jobs: Vec<(&AttentionKind, u64)> = kinds
        .iter()
        .flat_map(|k| spec.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let outcome = run_one(kind, seed, spec, train, test)
                .map(|(model, log, report)| RunMetrics {
                    psnr: report.psnr,
                    mse: report.mse,
                    ssim: report.ssim,
                    overhead: model_param_count(&model).1,
                    final_loss: log.losses.last().map_or(f64::NAN, |l| l.1),
                })
                .map_err(|e| e.to_string());
            let r = RunResult {
                method: kind.name().to_string(),
                seed,
                outcome,
            };
            on_run(&r);
            r
        })
        .collect();

    let mut rows = Vec::with_capacity(kinds.len());
    for kind in &kinds {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.method == kind.name()).collect();
        let ok: Vec<&RunMetrics> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let failures = mine
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| format!("seed {}: {e}", r.seed)))
            .collect();
        let overhead = match ok.first() {
            Some(m) => m.overhead,
            None => UNetConfig {
                attention: kind.clone(),
                ..spec.unet.clone()
            }
            .attention_overhead(),
        };
        let metrics = (!ok.is_empty()).then(|| {
            let col = |f: fn(&RunMetrics) -> f64| median(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            (col(|m| m.psnr), col(|m| m.mse), col(|m| m.ssim))
        });
        rows.push(BenchRow {
            method: kind.name().to_string(),
            parameters: kind.settings_label(),
            computational_overhead: overhead,
            metrics,
            failures,
        });
    }
    sort_rows(&mut rows);
    let zero_filled = zero_filled_report(test, &spec.metrics)?;
    Ok(BenchTable {
        rows,
        runs,
        zero_filled,
        ssim_mode: spec.metrics.ssim_mode.label(),
    })
}

fn zero_filled_report(test: &Dataset, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let rows = test
        .ids
        .iter()
        .zip(&test.inputs)
        .zip(&test.targets)
        .map(|((id, x), y)| crate::metrics::score(id.clone(), x, y, cfg))
        .collect::<Result<Vec<_>>>()?;
    crate::metrics::aggregate("zero_filled", 0, cfg, rows)
}

impl BenchTable {
    /// `method,parameters,computational_overhead,psnr,mse,ssim`.
    pub fn csv(&self) -> String {
        let mut out = String::from("method,parameters,computational_overhead,psnr,mse,ssim\n");
        for r in &self.rows {
            let (p, m, s) = match r.metrics {
                Some((p, m, s)) => (fmt6(p), fmt6(m), fmt6(s)),
                None => ("failed".into(), "failed".into(), "failed".into()),
            };
            let _ = writeln!(out, "{},{},{},{p},{m},{s}", r.method, r.parameters, r.computational_overhead);
        }
        out
    }

    /// `method,seed,status,psnr,mse,ssim,final_loss` for every run.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("method,seed,status,psnr,mse,ssim,final_loss\n");
        for r in &self.runs {
            match &r.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        out,
                        "{},{},ok,{},{},{},{:.9e}",
                        r.method,
                        r.seed,
                        fmt6(m.psnr),
                        fmt6(m.mse),
                        fmt6(m.ssim),
                        m.final_loss
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{},{},failed: {},,,,", r.method, r.seed, e.replace([',', '\n'], ";"));
                }
            }
        }
        out
    }

    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Write `bench.csv`, `runs.csv` and `zero_filled.csv`; the bench table goes to
    /// `table_path` if given, else into `dir`.
    pub fn write(&self, dir: &Path, table_path: Option<&Path>) -> Result<Vec<PathBuf>> {
        let table = table_path.map_or_else(|| dir.join("bench.csv"), Path::to_path_buf);
        let files = vec![
            (table, self.csv()),
            (dir.join("runs.csv"), self.runs_csv()),
            (dir.join("zero_filled.csv"), crate::metrics::aggregate_csv(std::slice::from_ref(&self.zero_filled))),
        ];
        for (path, text) in &files {
            write_text(path, text)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Mean absolute errors behind one set of exported maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMapSummary {
    pub id: String,
    pub model_mae: f64,
    pub input_mae: f64,
}

fn to_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// `|a - b|` rescaled by its maximum; an all-zero difference stays zero.
pub fn normalized_error(a: &[f64], b: &[f64]) -> Vec<f64> {
    let err: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    let max = err.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        err.iter().map(|e| e / max).collect()
    } else {
        err
    }
}

/// Per image: prediction, target, input and their normalised error maps as 8-bit PGM.
pub fn export_error_maps(model: &UNetModel, data: &Dataset, out_dir: &Path, limit: Option<usize>) -> Result<Vec<ErrorMapSummary>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = limit.unwrap_or(data.len()).min(data.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (id, x, y) = (&data.ids[i], &data.inputs[i], &data.targets[i]);
        let pred = model.predict(x)?;
        let s = y.shape();
        let images = [
            ("pred", pred.data().to_vec()),
            ("target", y.data().to_vec()),
            ("input", x.data().to_vec()),
            ("error", normalized_error(pred.data(), y.data())),
            ("input_error", normalized_error(x.data(), y.data())),
        ];
        for (tag, values) in &images {
            let path = out_dir.join(format!("{id}_{tag}.pgm"));
            std::fs::write(&path, to_pgm(values, s.h, s.w)).map_err(|e| Error::io(&path, e))?;
        }
        let mae = |a: &[f64]| a.iter().zip(y.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / a.len() as f64;
        out.push(ErrorMapSummary {
            id: id.clone(),
            model_mae: mae(pred.data()),
            input_mae: mae(x.data()),
        });
    }
    Ok(out)
}

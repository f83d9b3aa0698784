//! Subcommand implementations and the artifact helpers they share.

pub mod bimodal_icnn;
pub mod fpf;
pub mod gauss_enkf;
pub mod prop1;

use std::path::PathBuf;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Write one artifact into the configured output directory (created on
/// demand) and note it on stdout.
pub fn write_artifact(cfg: &RunConfig, name: &str, content: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| {
        CliError::Config(format!(
            "output directory {} is not writable: {e}",
            cfg.out.display()
        ))
    })?;
    let path = cfg.out.join(name);
    std::fs::write(&path, content)?;
    println!("wrote {}", path.display());
    Ok(path)
}

/// Mean and unbiased variance of a scalar sample.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Equal-width histogram over `[lo, hi]` normalized to a density; returns
/// `(bin center, density)` pairs. Samples outside the interval are dropped.
pub fn histogram_density(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        if x >= lo && x < hi {
            counts[((x - lo) / width) as usize] += 1;
        } else if x == hi {
            counts[bins - 1] += 1;
        }
    }
    let norm = 1.0 / (samples.len() as f64 * width);
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (lo + (i as f64 + 0.5) * width, c as f64 * norm))
        .collect()
}

/// Smoothed mode: the height-weighted centroid of the tallest bar and up to
/// two neighbours on each side, restricted to centers selected by `keep`.
///
/// Averaging over the peak's neighbourhood keeps the estimate from jumping by
/// a whole bin width under sampling noise, which matters when the tolerance
/// is only a few bins wide. `None` if no kept bar has positive height.
pub fn mode_location(hist: &[(f64, f64)], keep: impl Fn(f64) -> bool) -> Option<f64> {
    let peak = hist
        .iter()
        .enumerate()
        .filter(|(_, (center, _))| keep(*center))
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)?;
    let window = peak.saturating_sub(2)..(peak + 3).min(hist.len());
    let (mut num, mut den) = (0.0, 0.0);
    for &(center, height) in &hist[window] {
        if keep(center) {
            num += height * center;
            den += height;
        }
    }
    (den > 0.0).then(|| num / den)
}

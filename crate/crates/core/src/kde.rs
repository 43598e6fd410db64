//! Support estimation by Gaussian KDE with a bootstrap confidence band, and
//! the fidelity/diversity/Top-F1 metrics built on it.

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdeConfig {
    /// None selects the median pairwise distance.
    pub bandwidth: Option<f64>,
    pub bootstrap_iters: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig { bandwidth: None, bootstrap_iters: 100, alpha: 0.1, seed: 0 }
    }
}

/// Estimated support predicate for one point set.
pub struct KdeSupport {
    points: Vec<f64>,
    dim: usize,
    bandwidth: f64,
    threshold: f64,
    /// all-identical fallback: support collapses to the point itself
    degenerate: bool,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_bandwidth(points: &Tensor) -> f64 {
    let (m, d) = (points.rows(), points.cols());
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    let p: Vec<f64> = points.data.iter().map(|x| *x as f64).collect();
    for i in 0..m {
        for j in i + 1..m {
            dists.push(sqdist(&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]).sqrt());
        }
    }
    median(dists)
}

impl KdeSupport {
    /// Bootstrap threshold: the (1-alpha) quantile over resamples of the
    /// sup-deviation between resampled and full KDE at the sample points.
    pub fn fit(points: &Tensor, cfg: &KdeConfig) -> Result<Self> {
        let m = points.rows();
        if m < 10 {
            return Err(CoreError::InvalidArgument(format!("need >= 10 points, got {m}")));
        }
        let s = Self::fit_lenient(points, cfg)?;
        if s.degenerate {
            return Err(CoreError::InvalidArgument("degenerate (all-identical) point set".into()));
        }
        Ok(s)
    }

    /// Like `fit` but collapses an all-identical set to exact-match support
    /// instead of erroring (used for the mode-collapse direction of toppr).
    pub fn fit_lenient(points: &Tensor, cfg: &KdeConfig) -> Result<Self> {
        let (m, d) = (points.rows(), points.cols());
        if m < 2 {
            return Err(CoreError::InvalidArgument("need >= 2 points".into()));
        }
        let p: Vec<f64> = points.data.iter().map(|x| *x as f64).collect();
        let h = match cfg.bandwidth {
            Some(h) if h > 0.0 => h,
            Some(h) => {
                return Err(CoreError::InvalidArgument(format!("bandwidth {h} must be > 0")))
            }
            None => median_bandwidth(points),
        };
        if h <= 1e-12 {
            return Ok(KdeSupport { points: p, dim: d, bandwidth: 0.0, threshold: 0.0, degenerate: true });
        }

        // kernel matrix once; bootstrap iterations reuse it
        let inv2h2 = 1.0 / (2.0 * h * h);
        let mut kmat = vec![0.0f64; m * m];
        for i in 0..m {
            kmat[i * m + i] = 1.0;
            for j in i + 1..m {
                let v = (-sqdist(&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]) * inv2h2).exp();
                kmat[i * m + j] = v;
                kmat[j * m + i] = v;
            }
        }
        let full: Vec<f64> =
            (0..m).map(|j| (0..m).map(|i| kmat[i * m + j]).sum::<f64>() / m as f64).collect();

        use rand::Rng;
        let mut r = rng::seeded(rng::derive_seed(cfg.seed, &[0xb007]));
        let mut devs = Vec::with_capacity(cfg.bootstrap_iters);
        let mut counts = vec![0u32; m];
        for _ in 0..cfg.bootstrap_iters {
            counts.fill(0);
            for _ in 0..m {
                counts[r.gen_range(0..m)] += 1;
            }
            let mut sup = 0.0f64;
            for j in 0..m {
                let mut est = 0.0;
                for i in 0..m {
                    if counts[i] > 0 {
                        est += counts[i] as f64 * kmat[i * m + j];
                    }
                }
                est /= m as f64;
                sup = sup.max((est - full[j]).abs());
            }
            devs.push(sup);
        }
        devs.sort_by(f64::total_cmp);
        let q = ((1.0 - cfg.alpha) * (devs.len() - 1) as f64).round() as usize;
        let threshold = devs[q];
        Ok(KdeSupport { points: p, dim: d, bandwidth: h, threshold, degenerate: false })
    }

    pub fn density(&self, v: &[f32]) -> f64 {
        assert_eq!(v.len(), self.dim);
        let q: Vec<f64> = v.iter().map(|x| *x as f64).collect();
        let m = self.points.len() / self.dim;
        if self.degenerate {
            return if sqdist(&q, &self.points[..self.dim]) < 1e-12 { 1.0 } else { 0.0 };
        }
        let inv2h2 = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        (0..m)
            .map(|i| (-sqdist(&q, &self.points[i * self.dim..(i + 1) * self.dim]) * inv2h2).exp())
            .sum::<f64>()
            / m as f64
    }

    pub fn contains(&self, v: &[f32]) -> bool {
        if self.degenerate {
            return self.density(v) > 0.5;
        }
        self.density(v) > self.threshold
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TopprScores {
    pub fidelity: f64,
    pub diversity: f64,
    pub top_f1: f64,
}

pub fn harmonic_f1(f: f64, d: f64) -> f64 {
    if f <= 0.0 || d <= 0.0 {
        0.0
    } else {
        2.0 * f * d / (f + d)
    }
}

/// fidelity = fraction of fake points in the real support; diversity =
/// fraction of real points in the fake support.
pub fn toppr(real: &Tensor, fake: &Tensor, cfg: &KdeConfig) -> Result<TopprScores> {
    if real.cols() != fake.cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "feature dims {} vs {}",
            real.cols(),
            fake.cols()
        )));
    }
    let rs = KdeSupport::fit(real, cfg)?;
    let fs = KdeSupport::fit_lenient(fake, cfg)?;
    let d = real.cols();
    let fid = (0..fake.rows())
        .filter(|i| rs.contains(&fake.data[i * d..(i + 1) * d]))
        .count() as f64
        / fake.rows() as f64;
    let div = (0..real.rows())
        .filter(|i| fs.contains(&real.data[i * d..(i + 1) * d]))
        .count() as f64
        / real.rows() as f64;
    Ok(TopprScores { fidelity: fid, diversity: div, top_f1: harmonic_f1(fid, div) })
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of points in the shared density grid.
pub const GRID_POINTS: usize = 512;
/// Kernel contributions beyond this many bandwidths are below 1e-13 and skipped.
const KERNEL_CUTOFF: f64 = 8.0;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Spearman,
    Accuracy,
    Intersection,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Spearman, Metric::Accuracy, Metric::Intersection];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Spearman => "spearman",
            Metric::Accuracy => "accuracy",
            Metric::Intersection => "intersection",
        }
    }

    /// Fixed census threshold.
    pub fn census_threshold(self) -> f64 {
        match self {
            Metric::Spearman => 0.85,
            Metric::Accuracy => 0.95,
            Metric::Intersection => 0.9,
        }
    }

    /// Sensitivity of one neuron. A neuron whose pooled activations are all
    /// equal scores 0 under every metric.
    pub fn eval(self, p: &[f64], n: &[f64]) -> f64 {
        if is_constant(p, n) {
            return 0.0;
        }
        match self {
            Metric::Spearman => spearman_sensitivity(p, n),
            Metric::Accuracy => accuracy_sensitivity(p, n),
            Metric::Intersection => intersection_sensitivity(p, n),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric '{s}' (expected spearman, accuracy or intersection)"))
    }
}

fn is_constant(p: &[f64], n: &[f64]) -> bool {
    let mut all = p.iter().chain(n);
    match all.next() {
        Some(first) => all.all(|x| x == first),
        None => true,
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Midranks (1-based) of `xs`.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = rank);
        i = j + 1;
    }
    ranks
}

/// |Spearman correlation| between pooled activations and the binary label
/// (1 for `p`, 0 for `n`), ties given midranks.
pub fn spearman_sensitivity(p: &[f64], n: &[f64]) -> f64 {
    let pooled: Vec<f64> = p.iter().chain(n).copied().collect();
    let m = pooled.len() as f64;
    let ranks = midranks(&pooled);
    let mean_r = (m + 1.0) / 2.0;
    let mean_y = p.len() as f64 / m;
    let (mut cov, mut var_r, mut var_y) = (0.0, 0.0, 0.0);
    for (i, r) in ranks.iter().enumerate() {
        let y = if i < p.len() { 1.0 } else { 0.0 };
        cov += (r - mean_r) * (y - mean_y);
        var_r += (r - mean_r).powi(2);
        var_y += (y - mean_y).powi(2);
    }
    if var_r <= 0.0 || var_y <= 0.0 {
        return 0.0;
    }
    (cov / (var_r * var_y).sqrt()).abs().min(1.0)
}

/// Best accuracy of a one-feature threshold classifier in either orientation.
pub fn accuracy_sensitivity(p: &[f64], n: &[f64]) -> f64 {
    let mut pooled: Vec<(f64, bool)> = p.iter().map(|&x| (x, true)).chain(n.iter().map(|&x| (x, false))).collect();
    let total = pooled.len();
    if total == 0 {
        return 0.0;
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rule "x > t means positive"; start with t below every value.
    let mut correct = p.len();
    let mut best = correct.max(total - correct);
    let mut i = 0;
    while i < total {
        let v = pooled[i].0;
        while i < total && pooled[i].0 == v {
            if pooled[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        best = best.max(correct.max(total - correct));
    }
    best as f64 / total as f64
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct Kde {
    samples: Vec<f64>,
    h: f64,
}

impl Kde {
    /// Silverman bandwidth `0.9 min(sd, IQR/1.34) m^(-1/5)`, using whichever
    /// spread is nonzero; fully degenerate samples get `max(1e-6, 1e-3 * pooled_range)`.
    pub fn new(samples: &[f64], pooled_range: f64) -> Self {
        let samples = sorted(samples);
        let (_, sd) = mean_sd(&samples);
        let iqr = (quantile(&samples, 0.75) - quantile(&samples, 0.25)) / 1.34;
        let spread = match (sd > 0.0, iqr > 0.0) {
            (true, true) => sd.min(iqr),
            (true, false) => sd,
            (false, true) => iqr,
            (false, false) => 0.0,
        };
        let h = if spread > 0.0 { 0.9 * spread * (samples.len() as f64).powf(-0.2) } else { (1e-3 * pooled_range).max(1e-6) };
        Self { samples, h }
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn density(&self, x: f64) -> f64 {
        let reach = KERNEL_CUTOFF * self.h;
        let lo = self.samples.partition_point(|&s| s < x - reach);
        let hi = self.samples.partition_point(|&s| s <= x + reach);
        let sum: f64 = self.samples[lo..hi].iter().map(|s| (-0.5 * ((x - s) / self.h).powi(2)).exp()).sum();
        sum * INV_SQRT_2PI / (self.h * self.samples.len() as f64)
    }

    /// Mean-shift ascent to the nearest local maximum.
    pub fn climb(&self, start: f64) -> f64 {
        let mut x = start;
        for _ in 0..200 {
            let reach = KERNEL_CUTOFF * self.h;
            let lo = self.samples.partition_point(|&s| s < x - reach);
            let hi = self.samples.partition_point(|&s| s <= x + reach);
            let (mut num, mut den) = (0.0, 0.0);
            for s in &self.samples[lo..hi] {
                let w = (-0.5 * ((x - s) / self.h).powi(2)).exp();
                num += w * s;
                den += w;
            }
            if den == 0.0 {
                break;
            }
            let next = num / den;
            let done = (next - x).abs() <= 1e-12 * (1.0 + x.abs());
            x = next;
            if done {
                break;
            }
        }
        x
    }
}

/// Evenly spaced points covering both sample sets plus three bandwidths either side.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub lo: f64,
    pub step: f64,
    pub kde_p: Kde,
    pub kde_n: Kde,
}

impl DensityGrid {
    pub fn new(p: &[f64], n: &[f64]) -> Self {
        let (min, max) = p.iter().chain(n).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let range = max - min;
        let kde_p = Kde::new(p, range);
        let kde_n = Kde::new(n, range);
        let pad = 3.0 * kde_p.h.max(kde_n.h);
        let lo = min - pad;
        let step = (range + 2.0 * pad) / (GRID_POINTS - 1) as f64;
        Self { lo, step, kde_p, kde_n }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..GRID_POINTS).map(move |i| self.lo + self.step * i as f64)
    }

    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        let inner: f64 = values[1..values.len() - 1].iter().sum();
        self.step * (inner + 0.5 * (values[0] + values[values.len() - 1]))
    }
}

/// `1 - overlap` of the two kernel density estimates, clamped to `[0, 1]`.
pub fn intersection_sensitivity(p: &[f64], n: &[f64]) -> f64 {
    let grid = DensityGrid::new(p, n);
    let overlap: Vec<f64> = grid.points().map(|x| grid.kde_p.density(x).min(grid.kde_n.density(x))).collect();
    (1.0 - grid.trapezoid(&overlap)).clamp(0.0, 1.0)
}

pub fn median(xs: &[f64]) -> f64 {
    let s = sorted(xs);
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

/// Modes of the positive and negative densities: grid argmax refined by mean shift.
pub fn kde_modes(p: &[f64], n: &[f64]) -> (f64, f64) {
    let grid = DensityGrid::new(p, n);
    let mode = |kde: &Kde| {
        let best = grid
            .points()
            .map(|x| (x, kde.density(x)))
            .fold((f64::NAN, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        kde.climb(best.0)
    };
    (mode(&grid.kde_p), mode(&grid.kde_n))
}

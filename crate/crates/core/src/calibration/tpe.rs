//! Tree-structured Parzen Estimator.
//!
//! Completed trials are split at the `gamma` quantile of their objective.
//! Two joint densities are fitted, `l` over the good trials and `g` over the
//! rest; candidates are drawn from `l` and the one maximizing `l / g` is
//! proposed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SearchSpace;
use crate::alignment::HyperParams;

#[derive(Clone, Copy, Debug)]
pub struct TpeSettings {
    pub gamma: f64,
    /// Trials sampled uniformly before the density model kicks in.
    pub n_startup: usize,
    /// Candidates drawn from `l` per trial.
    pub n_candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        TpeSettings {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
        }
    }
}

/// Mixture of product kernels over `(tau_function, tau_solution,
/// tau_application, top_n)`, one component per observed trial plus a broad
/// prior component. Continuous axes use truncated Gaussians; the top_n axis
/// puts half its mass on the observed choice and spreads the rest uniformly.
struct JointParzen {
    ranges: [[f64; 2]; 3],
    n_choices: usize,
    mus: Vec<[f64; 3]>,
    sigmas: Vec<[f64; 3]>,
    /// `None` marks the prior component (uniform over choices).
    choices: Vec<Option<usize>>,
}

impl JointParzen {
    fn new(points: &[([f64; 3], usize)], ranges: [[f64; 2]; 3], n_choices: usize) -> Self {
        let n = points.len() + 1;
        let mut mus: Vec<[f64; 3]> = points.iter().map(|p| p.0).collect();
        mus.push(ranges.map(|[lo, hi]| 0.5 * (lo + hi)));
        let mut choices: Vec<Option<usize>> = points.iter().map(|p| Some(p.1)).collect();
        choices.push(None);

        let mut sigmas = vec![[0.0; 3]; n];
        for (dim, [lo, hi]) in ranges.into_iter().enumerate() {
            let width = hi - lo;
            let min_sigma = width / (1.0 + n as f64).min(100.0);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| mus[a][dim].total_cmp(&mus[b][dim]));
            for (pos, &i) in order.iter().enumerate() {
                let x = mus[i][dim];
                let left = if pos == 0 { x - lo } else { x - mus[order[pos - 1]][dim] };
                let right = if pos + 1 == n { hi - x } else { mus[order[pos + 1]][dim] - x };
                sigmas[i][dim] = left.max(right).clamp(min_sigma, width);
            }
            sigmas[n - 1][dim] = width;
        }
        JointParzen {
            ranges,
            n_choices,
            mus,
            sigmas,
            choices,
        }
    }

    fn choice_prob(&self, k: usize, c: usize) -> f64 {
        let uniform = 1.0 / self.n_choices as f64;
        match self.choices[k] {
            Some(obs) if obs == c => 0.5 + 0.5 * uniform,
            Some(_) => 0.5 * uniform,
            None => uniform,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> ([f64; 3], usize) {
        let k = rng.random_range(0..self.mus.len());
        let mut x = [0.0; 3];
        for (dim, [lo, hi]) in self.ranges.into_iter().enumerate() {
            let normal = Normal::new(self.mus[k][dim], self.sigmas[k][dim]).expect("positive sigma");
            x[dim] = (0..64)
                .map(|_| normal.sample(rng))
                .find(|v| *v >= lo && *v < hi)
                .unwrap_or_else(|| self.mus[k][dim].clamp(lo, hi));
        }
        let weights: Vec<f64> = (0..self.n_choices).map(|c| self.choice_prob(k, c)).collect();
        (x, sample_categorical(&weights, rng))
    }

    fn log_density(&self, x: &[f64; 3], c: usize) -> f64 {
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let density: f64 = (0..self.mus.len())
            .map(|k| {
                let mut d = self.choice_prob(k, c);
                for dim in 0..3 {
                    let sigma = self.sigmas[k][dim];
                    let z = (x[dim] - self.mus[k][dim]) / sigma;
                    d *= (-0.5 * z * z).exp() / (sigma * norm);
                }
                d
            })
            .sum::<f64>()
            / self.mus.len() as f64;
        density.max(f64::MIN_POSITIVE).ln()
    }
}

fn sample_categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub(super) fn suggest(
    settings: &TpeSettings,
    space: &SearchSpace,
    history: &[(HyperParams, f64)],
    rng: &mut impl Rng,
) -> HyperParams {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[a].1.total_cmp(&history[b].1).then(a.cmp(&b)));
    let n_good = ((settings.gamma * history.len() as f64).ceil() as usize).clamp(1, history.len());
    let (good, bad) = order.split_at(n_good);

    let points = |idx: &[usize]| -> Vec<([f64; 3], usize)> {
        idx.iter()
            .filter_map(|&i| {
                let p = &history[i].0;
                let c = space.top_n.iter().position(|&n| n == p.top_n)?;
                Some(([p.tau_function, p.tau_solution, p.tau_application], c))
            })
            .collect()
    };
    let ranges = space.ranges();
    let l = JointParzen::new(&points(good), ranges, space.top_n.len());
    let g = JointParzen::new(&points(bad), ranges, space.top_n.len());

    let mut best = (f64::NEG_INFINITY, ([0.0; 3], 0));
    for _ in 0..settings.n_candidates {
        let (x, c) = l.sample(rng);
        let score = l.log_density(&x, c) - g.log_density(&x, c);
        if score > best.0 {
            best = (score, (x, c));
        }
    }
    let (taus, c) = best.1;
    space.params(taus, space.top_n[c])
}

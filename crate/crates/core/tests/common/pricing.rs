use nested_covar::rng::RngSeed;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `E[e^{-rT}(S_T − K)⁺]` by integrating the lognormal payoff against the
/// normal density from the exercise boundary.
pub fn bs_by_quadrature(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> f64 {
    let drift = (r - 0.5 * sigma * sigma) * t;
    let vol = sigma * t.sqrt();
    let x0 = ((k / s).ln() - drift) / vol;
    let payoff = |x: f64| (-r * t).exp() * (s * (drift + vol * x).exp() - k) * phi(x);
    simpson(payoff, x0, x0.max(0.0) + 14.0, 400_000)
}

pub struct McStats {
    pub mean: f64,
    pub se: f64,
}

pub fn stats(sum: f64, sum_sq: f64, n: usize) -> McStats {
    let nf = n as f64;
    let mean = sum / nf;
    McStats {
        mean,
        se: ((sum_sq / nf - mean * mean) / (nf - 1.0)).sqrt(),
    }
}

/// Up-and-out call on a 50-step risk-neutral GBM grid: bridge-weighted and
/// discretely monitored estimates.
pub fn barrier_mc(paths: usize, s0: f64, k: f64, b: f64, r: f64, sigma: f64, t: f64) -> (McStats, McStats) {
    const STEPS: usize = 50;
    const CHUNK: usize = 10_000;
    let dt = t / STEPS as f64;
    let drift = (r - 0.5 * sigma * sigma) * dt;
    let vol = sigma * dt.sqrt();
    let disc = (-r * t).exp();
    let sums = (0..paths / CHUNK)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngSeed(0xBA55).stream(c as u64, 0);
            let mut acc = [0.0f64; 4];
            for _ in 0..CHUNK {
                let mut s = s0;
                let mut survive = 1.0;
                let mut alive = true;
                for _ in 0..STEPS {
                    let z: f64 = rng.sample(StandardNormal);
                    let next = s * (drift + vol * z).exp();
                    if next >= b {
                        alive = false;
                        survive = 0.0;
                    } else if survive > 0.0 {
                        let p = (-2.0 * (b / s).ln() * (b / next).ln() / (sigma * sigma * dt)).exp();
                        survive *= 1.0 - p;
                    }
                    s = next;
                }
                let pay = disc * (s - k).max(0.0);
                let corrected = pay * survive;
                let plain = if alive { pay } else { 0.0 };
                acc[0] += corrected;
                acc[1] += corrected * corrected;
                acc[2] += plain;
                acc[3] += plain * plain;
            }
            acc
        })
        .collect::<Vec<_>>();
    let mut tot = [0.0; 4];
    for a in sums {
        for j in 0..4 {
            tot[j] += a[j];
        }
    }
    (stats(tot[0], tot[1], paths), stats(tot[2], tot[3], paths))
}

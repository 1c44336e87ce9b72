#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use robust_sae::frame::{size_class_for, wp_band, Population, Sample, Unit};

pub fn unit(id: usize, ind: &str, wp: u32, tax1: f64, tto: f64) -> Unit {
    Unit {
        id: format!("u{id}"),
        ind: ind.to_string(),
        sc: size_class_for(wp).expect("wp in 1..=49"),
        wp,
        tax1,
        tto,
    }
}

pub fn census(pop: Population) -> Sample {
    let pop = Arc::new(pop);
    let n = pop.len();
    Sample::new(pop, (0..n).collect(), vec![1.0; n]).unwrap()
}

pub fn subsample(pop: &Arc<Population>, rows: Vec<usize>, pi: Vec<f64>) -> Sample {
    Sample::new(pop.clone(), rows, pi).unwrap()
}

/// `y = b0 + b1 x + u_d + e`, `x ~ U(0, 10)`, size classes uniform.
pub fn linear_mixed_population(
    sizes: &[usize],
    beta: (f64, f64),
    sigma_u: f64,
    sigma_e: f64,
    seed: u64,
) -> Population {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units = Vec::new();
    let mut id = 0;
    for (d, &m) in sizes.iter().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let u = sigma_u * z;
        for _ in 0..m {
            let x: f64 = rng.random_range(0.0..10.0);
            let sc = rng.random_range(1..=5u8);
            let (lo, hi) = wp_band(sc).unwrap();
            let wp = rng.random_range(lo..=hi);
            let e: f64 = StandardNormal.sample(&mut rng);
            units.push(unit(id, &format!("D{d:02}"), wp, x, beta.0 + beta.1 * x + u + sigma_e * e));
            id += 1;
        }
    }
    Population::new(units).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Simple-regression M-quantile fit by plain IRLS loops (scale: median |r| / 0.6745).
pub fn mq_line_oracle(x: &[f64], y: &[f64], w: &[f64], q: f64, b: f64) -> (f64, f64) {
    let n = x.len();
    let wfit = |v: &[f64]| {
        let sw: f64 = v.iter().sum();
        let xb = (0..n).map(|i| v[i] * x[i]).sum::<f64>() / sw;
        let yb = (0..n).map(|i| v[i] * y[i]).sum::<f64>() / sw;
        let sxy: f64 = (0..n).map(|i| v[i] * (x[i] - xb) * (y[i] - yb)).sum();
        let sxx: f64 = (0..n).map(|i| v[i] * (x[i] - xb).powi(2)).sum();
        (yb - sxy / sxx * xb, sxy / sxx)
    };
    let (mut a, mut s) = wfit(w);
    for _ in 0..100_000 {
        let r: Vec<f64> = (0..n).map(|i| y[i] - a - s * x[i]).collect();
        let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let med = if n % 2 == 1 { abs[n / 2] } else { 0.5 * (abs[n / 2 - 1] + abs[n / 2]) };
        let scale = med / 0.6745;
        let v: Vec<f64> = (0..n)
            .map(|i| {
                let u = r[i] / scale;
                let side = if u > 0.0 { q } else { 1.0 - q };
                w[i] * 2.0 * side * (b / u.abs()).min(1.0)
            })
            .collect();
        let (a2, s2) = wfit(&v);
        let done = (a2 - a).abs() < 1e-13 * a.abs().max(1.0) && (s2 - s).abs() < 1e-13 * s.abs().max(1.0);
        a = a2;
        s = s2;
        if done {
            break;
        }
    }
    (a, s)
}

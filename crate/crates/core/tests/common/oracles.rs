//! Independent reference implementations with explicit dense matrices and
//! plain loops.

use nalgebra::{DMatrix, DVector};
use robust_sae::frame::Sample;
use robust_sae::mixed::{fit_lmm, Criterion, MixedFit};
use robust_sae::model::{Formula, ModelSpec};
use robust_sae::robust::{huber_consistency, HuberConfig};

pub struct Dense {
    pub beta: DVector<f64>,
    pub u_hat: Vec<f64>,
    pub log_lik: f64,
}

/// Textbook BLUP and Gaussian likelihood with explicit n x n matrices.
pub fn dense_lmm(sample: &Sample, fit: &MixedFit) -> Dense {
    let spec = fit.spec;
    let pop = sample.parent();
    let n = sample.len();
    let p = spec.formula.ncols();
    let x = DMatrix::from_fn(n, p, |i, j| spec.formula.row(sample.unit(i))[j]);
    let y = DVector::from_fn(n, |i, _| sample.unit(i).tto);
    let v = DMatrix::from_fn(n, n, |i, j| {
        let mut s = 0.0;
        if sample.domain_of(i) == sample.domain_of(j) {
            s += fit.sigma2_u;
        }
        if i == j {
            s += fit.level1_variance(sample.unit(i));
        }
        s
    });
    let vinv = v.clone().try_inverse().unwrap();
    let xvx = x.transpose() * &vinv * &x;
    let beta = xvx.clone().try_inverse().unwrap() * x.transpose() * &vinv * &y;
    let r = &y - &x * &beta;
    let vr = &vinv * &r;
    let mut u_hat = vec![0.0; pop.domains().len()];
    for i in 0..n {
        u_hat[sample.domain_of(i)] += fit.sigma2_u * vr[i];
    }
    let two_pi = (2.0 * std::f64::consts::PI).ln();
    let logdet = v.determinant().ln();
    let quad = r.dot(&vr);
    let log_lik = match fit.criterion {
        Criterion::Ml => -0.5 * (n as f64 * two_pi + logdet + quad),
        Criterion::Reml => {
            -0.5 * ((n - p) as f64 * two_pi + logdet + xvx.determinant().ln() + quad)
        }
    };
    Dense { beta, u_hat, log_lik }
}

pub fn dense_lmm_total(sample: &Sample, fit: &MixedFit, o: &Dense, domain: usize) -> f64 {
    let pop = sample.parent();
    let sampled: std::collections::HashSet<usize> = sample.rows().iter().copied().collect();
    pop.domain_rows(domain)
        .iter()
        .map(|&r| {
            let u = pop.unit(r);
            if sampled.contains(&r) {
                u.tto
            } else {
                fit.spec.formula.predict(u, o.beta.as_slice()) + o.u_hat[domain]
            }
        })
        .sum()
}

/// Plain simple-regression IRLS with closed-form weighted fits.
pub fn simple_irls_oracle(x: &[f64], y: &[f64], b: f64) -> (f64, f64) {
    let n = x.len();
    let wfit = |w: &[f64]| {
        let sw: f64 = w.iter().sum();
        let xb = (0..n).map(|i| w[i] * x[i]).sum::<f64>() / sw;
        let yb = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / sw;
        let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - xb) * (y[i] - yb)).sum();
        let sxx: f64 = (0..n).map(|i| w[i] * (x[i] - xb).powi(2)).sum();
        let slope = sxy / sxx;
        (yb - slope * xb, slope)
    };
    let (mut a, mut s) = wfit(&vec![1.0; n]);
    for _ in 0..10_000 {
        let r: Vec<f64> = (0..n).map(|i| y[i] - a - s * x[i]).collect();
        let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let med = if n % 2 == 1 { abs[n / 2] } else { 0.5 * (abs[n / 2 - 1] + abs[n / 2]) };
        let scale = med / 0.6745;
        let w: Vec<f64> = r.iter().map(|v| (b * scale / v.abs()).min(1.0)).collect();
        let (a2, s2) = wfit(&w);
        let done = (a2 - a).abs() < 1e-13 * a.abs().max(1.0) && (s2 - s).abs() < 1e-13 * s.abs().max(1.0);
        a = a2;
        s = s2;
        if done {
            break;
        }
    }
    (a, s)
}

/// Damped fixed point of the same estimating equations with explicit matrices.
pub fn dense_reblup(sample: &Sample, b: f64) -> (DVector<f64>, f64, f64, Vec<f64>) {
    let n = sample.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { sample.unit(i).tax1 });
    let y = DVector::from_fn(n, |i, _| sample.unit(i).tto);
    let zz = DMatrix::from_fn(n, n, |i, j| if sample.domain_of(i) == sample.domain_of(j) { 1.0 } else { 0.0 });
    let psi = |v: f64| v.clamp(-b, b);
    let c = huber_consistency(HuberConfig::new(b).unwrap());
    let ml = fit_lmm(sample, &ModelSpec::new(Formula::Linear), Criterion::Ml).unwrap();
    let mut beta = DVector::from_column_slice(&ml.beta);
    let (mut s2u, mut s2e) = (ml.sigma2_u, ml.level1[0]);
    for _ in 0..20_000 {
        let v = &zz * s2u + DMatrix::identity(n, n) * s2e;
        let vi = v.clone().try_inverse().unwrap();
        let sd = (s2u + s2e).sqrt();
        // beta: X' V^-1 W (y - X beta) = 0
        let r = &y - &x * &beta;
        let w = DMatrix::from_fn(n, n, |i, j| {
            if i != j {
                0.0
            } else if r[i] == 0.0 {
                1.0
            } else {
                psi(r[i] / sd) / (r[i] / sd)
            }
        });
        let a = x.transpose() * &vi * &w * &x;
        let nb = a.lu().solve(&(x.transpose() * &vi * &w * &y)).unwrap();
        let r = &y - &x * &nb;
        let up = DVector::from_fn(n, |i, _| sd * psi(r[i] / sd));
        let z = &vi * &up;
        let au = (zz.transpose() * &z).dot(&z);
        let ae = z.dot(&z);
        let d = [&zz, &DMatrix::identity(n, n)].map(|m| &vi * m);
        let t = |p: usize, q: usize| (&d[p] * &d[q]).trace() * c;
        let m = nalgebra::Matrix2::new(t(0, 0), t(0, 1), t(1, 0), t(1, 1));
        let th = m.lu().solve(&nalgebra::Vector2::new(au, ae)).unwrap();
        let (tu, te) = if th[0] < 0.0 { (0.0, up.dot(&up) / (c * n as f64)) } else { (th[0], th[1]) };
        let step = (nb.clone() - &beta).amax() / nb.amax() + ((tu - s2u).abs() + (te - s2e).abs()) / (s2u + s2e);
        beta = nb;
        s2u += 0.5 * (tu - s2u);
        s2e += 0.5 * (te - s2e);
        if step < 1e-12 {
            break;
        }
    }
    // random effects via reweighted normal equations
    let pop = sample.parent();
    let mut u_hat = vec![0.0; pop.domains().len()];
    let (su, se) = (s2u.sqrt(), s2e.sqrt());
    for (d, u_out) in u_hat.iter_mut().enumerate() {
        let e: Vec<f64> = sample.domain_members(d).iter().map(|&k| y[k] - (x.row(k) * &beta)[0]).collect();
        if e.is_empty() {
            continue;
        }
        let wt = |a: f64| if a == 0.0 { 1.0 } else { psi(a) / a };
        let mut u = 0.0;
        for _ in 0..10_000 {
            let (mut num, mut den) = (0.0, 0.0);
            for ej in &e {
                let w = wt((ej - u) / se);
                num += w * ej / s2e;
                den += w / s2e;
            }
            den += wt(u / su) / s2u;
            let nu = num / den;
            if (nu - u).abs() < 1e-14 * (1.0 + u.abs()) {
                u = nu;
                break;
            }
            u = nu;
        }
        *u_out = u;
    }
    (beta, s2u, s2e, u_hat)
}


/// Homoscedastic ML by golden-section search over `log(sigma_u^2 / sigma_e^2)`
/// of the dense profile likelihood, compared against the boundary `sigma_u^2 = 0`.
/// Returns `(beta, sigma_u^2, sigma_e^2, log_lik)`.
pub fn brute_force_ml(sample: &Sample, formula: Formula) -> (Vec<f64>, f64, f64, f64) {
    let n = sample.len();
    let p = formula.ncols();
    let x = DMatrix::from_fn(n, p, |i, j| formula.row(sample.unit(i))[j]);
    let y = DVector::from_fn(n, |i, _| sample.unit(i).tto);
    let profile = |ratio: f64| {
        let v0 = DMatrix::from_fn(n, n, |i, j| {
            let mut s = if sample.domain_of(i) == sample.domain_of(j) { ratio } else { 0.0 };
            if i == j {
                s += 1.0;
            }
            s
        });
        let vi = v0.clone().try_inverse().unwrap();
        let beta = (x.transpose() * &vi * &x).try_inverse().unwrap() * x.transpose() * &vi * &y;
        let r = &y - &x * &beta;
        let s2e = r.dot(&(&vi * &r)) / n as f64;
        let ll = -0.5 * (n as f64 * ((2.0 * std::f64::consts::PI).ln() + s2e.ln() + 1.0) + v0.determinant().ln());
        (ll, beta, s2e)
    };
    let (mut a, mut b) = (-25.0f64, 15.0f64);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let f = |t: f64| profile(t.exp()).0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-11 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    let (ll, beta, s2e) = profile(t.exp());
    let (ll0, beta0, s2e0) = profile(0.0);
    if ll0 >= ll {
        (beta0.iter().copied().collect(), 0.0, s2e0, ll0)
    } else {
        (beta.iter().copied().collect(), t.exp() * s2e, s2e, ll)
    }
}

/// GREG by explicit calibration: `w = d (1 + z' lambda)` with
/// `(Z' D Z) lambda = X - Z' d`, where `Z` holds one `tax1` column per
/// `ind x {sc <= split, sc > split}` cell. Returns the weights and the
/// population cell totals of `tax1` keyed like the columns.
pub fn dense_greg(sample: &Sample, split_sc: u8) -> (Vec<f64>, Vec<((usize, usize), f64)>) {
    let pop = sample.parent();
    let cell = |u: &robust_sae::frame::Unit, d: usize| (d, usize::from(u.sc > split_sc));
    let mut keys: Vec<(usize, usize)> =
        pop.units().iter().enumerate().map(|(r, u)| cell(u, pop.domain_of(r))).collect();
    keys.sort();
    keys.dedup();
    let col = |key: (usize, usize)| keys.binary_search(&key).unwrap();
    let c = keys.len();
    let mut totals = vec![0.0; c];
    for (r, u) in pop.units().iter().enumerate() {
        totals[col(cell(u, pop.domain_of(r)))] += u.tax1;
    }
    let n = sample.len();
    let z = DMatrix::from_fn(n, c, |i, j| {
        let u = sample.unit(i);
        if col(cell(u, sample.domain_of(i))) == j {
            u.tax1
        } else {
            0.0
        }
    });
    let d = DVector::from_fn(n, |i, _| sample.d(i));
    let dd = DMatrix::from_diagonal(&d);
    let t = z.transpose() * &dd * &z;
    let gap = DVector::from_column_slice(&totals) - z.transpose() * &d;
    let lambda = t.lu().solve(&gap).unwrap();
    let w: Vec<f64> = (0..n).map(|i| d[i] * (1.0 + (z.row(i) * &lambda)[0])).collect();
    (w, keys.into_iter().zip(totals).collect())
}

//! Independent brute-force reference implementations.

/// Squared MMD as one signed sum over the pooled sample: weight `1/n²` within
/// X, `1/m²` within Y and `−1/(nm)` across.
pub fn mmd_squared(x: &[f64], y: &[f64], bw: f64) -> f64 {
    let pooled: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    let (n, m) = (x.len() as f64, y.len() as f64);
    let w = |a: bool| if a { 1.0 / n } else { -1.0 / m };
    let mut acc = 0.0;
    for &(a, fa) in &pooled {
        for &(b, fb) in &pooled {
            let k = (-((a - b).powi(2)) / (2.0 * bw * bw)).exp();
            acc += w(fa) * w(fb) * k;
        }
    }
    acc
}

pub fn brier(pairs: &[(f64, bool)]) -> f64 {
    let mut acc = 0.0;
    for &(p, o) in pairs {
        let target = if o { 1.0 } else { 0.0 };
        acc += (p - target) * (p - target);
    }
    acc / pairs.len() as f64
}

/// Population variance, two-pass.
pub fn variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

/// `(total, epistemic, aleatoric)` from explicit member groups.
pub fn grouped_variance(values: &[f64], groups: &[usize], n_groups: usize) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let grand = values.iter().sum::<f64>() / n;
    let mut epi = 0.0;
    let mut alea = 0.0;
    for g in 0..n_groups {
        let members: Vec<f64> = values
            .iter()
            .zip(groups)
            .filter(|(_, &k)| k == g)
            .map(|(&v, _)| v)
            .collect();
        if members.is_empty() {
            continue;
        }
        let w = members.len() as f64 / n;
        let mu = members.iter().sum::<f64>() / members.len() as f64;
        epi += w * (mu - grand).powi(2);
        alea += w * variance(&members);
    }
    (variance(values), epi, alea)
}

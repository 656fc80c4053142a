//! Rank and product-moment correlation, one-way ANOVA, and 95% intervals.
//!
//! The F and t distribution functions are evaluated through a regularized
//! incomplete beta function (Lentz continued fraction) and a Lanczos
//! log-gamma, so no statistics dependency is needed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("undefined correlation: an input has zero variance")]
    UndefinedCorrelation,
    #[error("input contains a non-finite value")]
    NonFinite,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: a.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(StatsError::UndefinedCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_stat: f64,
    pub p_value: f64,
    pub df_between: usize,
    pub df_within: usize,
    /// Zero within-group variance with differing group means: `F` is
    /// infinite and `p` is reported as 0.
    pub degenerate: bool,
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: groups.len() });
    }
    for g in groups {
        if g.len() < 2 {
            return Err(StatsError::TooFew { needed: 2, got: g.len() });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / total as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = total - groups.len();
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;
    // sums of squares below this scale are rounding noise
    let scale = groups.iter().flatten().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let tiny = 1e-24 * scale;
    if ss_within <= tiny {
        if ss_between <= tiny {
            return Ok(AnovaResult {
                f_stat: 0.0,
                p_value: 1.0,
                df_between,
                df_within,
                degenerate: false,
            });
        }
        return Ok(AnovaResult {
            f_stat: f64::INFINITY,
            p_value: 0.0,
            df_between,
            df_within,
            degenerate: true,
        });
    }
    let f = ms_between / ms_within;
    Ok(AnovaResult {
        f_stat: f,
        p_value: f_survival(f, df_between as f64, df_within as f64),
        df_between,
        df_within,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Percentile,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub method: IntervalMethod,
}

/// Linear-interpolation quantile of sorted data (`q ∈ [0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn interval95(samples: &[f64], method: IntervalMethod) -> Result<Interval, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: samples.len() });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (low, high) = match method {
        IntervalMethod::Percentile => {
            let mut s = samples.to_vec();
            s.sort_by(f64::total_cmp);
            (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.975))
        }
        IntervalMethod::T => {
            let n = samples.len() as f64;
            let m = samples.iter().sum::<f64>() / n;
            let sd = (samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let half = t_quantile(0.975, n - 1.0) * sd / n.sqrt();
            (m - half, m + half)
        }
    };
    Ok(Interval {
        low,
        high,
        level: 0.95,
        method,
    })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn betainc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// `P(F > f)` for `F ~ F(d1, d2)`.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    // P(F > f) = I_{d2/(d2 + d1 f)}(d2/2, d1/2)
    betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Student-t CDF.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Student-t quantile by bisection on the CDF.
pub fn t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    let (mut lo, mut hi) = (-1.0, 1.0);
    while t_cdf(lo, df) > p {
        lo *= 2.0;
    }
    while t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// F(d1, d2) density.
    fn f_density(x: f64, d1: f64, d2: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let ln = 0.5 * d1 * (d1 / d2).ln() + (0.5 * d1 - 1.0) * x.ln() - 0.5 * (d1 + d2) * (1.0 + d1 * x / d2).ln()
            - (ln_gamma(d1 / 2.0) + ln_gamma(d2 / 2.0) - ln_gamma((d1 + d2) / 2.0));
        ln.exp()
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }

    /// `∫_w^∞ f(x) dx` via `x = w/u²` on `u ∈ (0, 1]`.
    fn tail_by_quadrature(w: f64, d1: f64, d2: f64) -> f64 {
        let g = |u: f64| {
            if u <= 0.0 {
                0.0
            } else {
                f_density(w / (u * u), d1, d2) * 2.0 * w / (u * u * u)
            }
        };
        let (a, b) = (0.0, 1.0);
        let (fa, fm, fb) = (g(a), g(0.5), g(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        simpson(&g, a, b, fa, fm, fb, whole, 1e-12, 50)
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let b = [1.0, 3.0, 2.0, 4.0];
        let d2: f64 = average_ranks(&a).iter().zip(average_ranks(&b)).map(|(x, y)| (x - y).powi(2)).sum();
        let brute = 1.0 - 6.0 * d2 / (4.0 * 15.0);
        assert!((spearman(&a, &b).unwrap() - brute).abs() < 1e-12);
        assert!((brute - 0.8).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &a[..3]), Err(StatsError::UndefinedCorrelation));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(StatsError::TooFew { .. })));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 7.0];
        let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&a, &affine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        // hand computation: Sxy = 3, Sxx = 2, Syy = 14/3
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-14);
        assert!((r - 0.982).abs() < 5e-4);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::UndefinedCorrelation));
    }

    #[test]
    fn anova_examples() {
        let same = vec![vec![1.0, 2.0, 3.0]; 3];
        let r = anova_oneway(&same).unwrap();
        assert_eq!((r.f_stat, r.p_value), (0.0, 1.0));

        let groups = vec![vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], vec![3.0, 4.0, 5.0]];
        let r = anova_oneway(&groups).unwrap();
        // SSB = 3·(1 + 0 + 1) = 6 on 2 df, SSW = 3·2 = 6 on 6 df
        assert!((r.f_stat - 3.0).abs() < 1e-12);
        assert_eq!((r.df_between, r.df_within), (2, 6));
        let oracle = tail_by_quadrature(3.0, 2.0, 6.0);
        assert!((r.p_value - oracle).abs() < 1e-8);
        // F(2, d2) tail has the closed form (1 + 2f/d2)^(−d2/2)
        assert!((r.p_value - 0.125).abs() < 1e-12);

        let permuted = vec![vec![3.0, 1.0, 2.0], vec![4.0, 2.0, 3.0], vec![5.0, 3.0, 4.0]];
        assert_eq!(anova_oneway(&permuted).unwrap(), r);

        let degenerate = anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(degenerate.degenerate && degenerate.p_value == 0.0);
        assert!(anova_oneway(&[vec![1.0, 2.0]]).is_err());
        assert!(anova_oneway(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn anova_p_decreases_with_offset() {
        let base = vec![vec![0.1, -0.3, 0.5, 0.2], vec![0.0, 0.4, -0.2, 0.3], vec![-0.1, 0.2, 0.1, 0.6]];
        let mut prev = 1.1;
        for k in 0..20 {
            let mut g = base.clone();
            g[2].iter_mut().for_each(|v| *v += 0.1 * k as f64);
            let p = anova_oneway(&g).unwrap().p_value;
            assert!(p <= prev, "offset {k}: {p} > {prev}");
            prev = p;
        }
    }

    #[test]
    fn f_tail_matches_quadrature() {
        let mut worst: f64 = 0.0;
        for &d1 in &[1.0, 2.0, 3.0, 5.0, 10.0, 30.0, 100.0] {
            for &d2 in &[2.0, 4.0, 7.0, 20.0, 60.0, 100.0] {
                for &f in &[0.05, 0.5, 1.0, 2.0, 4.0, 10.0] {
                    let err = (f_survival(f, d1, d2) - tail_by_quadrature(f, d1, d2)).abs();
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-6, "worst {worst:e}");
    }

    #[test]
    fn special_functions() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((betainc(2.0, 3.0, 0.4) - 0.5248).abs() < 1e-12);
        assert!((t_quantile(0.975, 10.0) - 2.228_138_851_986_27).abs() < 1e-9);
        assert!((t_quantile(0.975, 1.0) - 12.706_204_736_174_7).abs() < 1e-8);
    }

    #[test]
    fn interval_examples() {
        let c = interval95(&[2.5; 10], IntervalMethod::Percentile).unwrap();
        assert_eq!((c.low, c.high), (2.5, 2.5));
        let c = interval95(&[2.5; 10], IntervalMethod::T).unwrap();
        assert_eq!((c.low, c.high), (2.5, 2.5));

        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let i = interval95(&s, IntervalMethod::Percentile).unwrap();
        assert!((i.low - 3.475).abs() < 1e-12 && (i.high - 97.525).abs() < 1e-12);

        let sym = [-3.0, -1.0, 0.5, 1.0, 3.0, -0.5];
        let i = interval95(&sym, IntervalMethod::T).unwrap();
        assert!((i.low + i.high).abs() < 1e-12);
        assert_eq!(i.level, 0.95);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            a in prop::collection::vec(-100.0f64..100.0, 3..30),
            seed in 0u64..1000,
        ) {
            let mut r = crate::rng::RngStream::new(seed);
            let b: Vec<f64> = a.iter().map(|_| r.normal_one()).collect();
            prop_assume!(spearman(&a, &b).is_ok());
            let rho = spearman(&a, &b).unwrap();
            let mapped: Vec<f64> = a.iter().map(|v| (v / 50.0).exp() + v.powi(3)).collect();
            prop_assert!((spearman(&mapped, &b).unwrap() - rho).abs() < 1e-12);
            prop_assert!((spearman(&b, &a).unwrap() - rho).abs() < 1e-12);
            let rev: Vec<f64> = b.iter().map(|v| -v).collect();
            prop_assert!((spearman(&a, &rev).unwrap() + rho).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&rho));
        }
    }
}

//! One-tailed paired t-test, Student-t tail probabilities and
//! classification metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("paired test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("degrees of freedom must be positive, got {0}")]
    BadDegreesOfFreedom(f64),
    #[error("incomplete beta outside its domain: x = {x}, a = {a}, b = {b}")]
    BetaDomain { x: f64, a: f64, b: f64 },
    #[error("no scenarios to evaluate")]
    Empty,
    #[error("p-value {0} outside [0, 1]")]
    BadPValue(f64),
    #[error("metrics need both illegal and legal scenarios")]
    SingleClass,
}

/// Default significance level.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// Mean paired difference.
    pub mean_diff: f64,
    /// Sample standard deviation of the differences (K - 1 denominator).
    pub sd_diff: f64,
    /// Infinite when every difference is equal and non-zero.
    #[serde(with = "extended_float")]
    pub t: f64,
    pub df: usize,
    /// One-tailed p-value for H1: mean(a - b) > 0.
    pub p: f64,
    pub alpha: f64,
}

impl TTestResult {
    pub fn rejects_null(&self) -> bool {
        self.p < self.alpha
    }
}

/// Paired t-test of `a` against `b` with H1: `mean(a - b) > 0`.
///
/// When all differences are identical (`s_d = 0`) the statistic is taken at
/// its limit: `p = 0` for a positive mean, `1` for a negative one and `0.5`
/// for zero.
pub fn paired_ttest_one_tailed(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let k = a.len();
    if k < 2 {
        return Err(StatsError::TooFewPairs(k));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let kf = k as f64;
    let mean = d.iter().sum::<f64>() / kf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (kf - 1.0);
    let sd = var.sqrt();
    let df = k - 1;

    let (t, p) = if sd == 0.0 {
        if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        }
    } else {
        let t = mean / (sd / kf.sqrt());
        let two_tailed = 2.0 * student_t_sf(t.abs(), df as f64)?;
        let p = if t > 0.0 { two_tailed / 2.0 } else { 1.0 - two_tailed / 2.0 };
        (t, p)
    };
    Ok(TTestResult {
        mean_diff: mean,
        sd_diff: sd,
        t,
        df,
        p: p.clamp(0.0, 1.0),
        alpha,
    })
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> Result<f64, StatsError> {
    if !(df > 0.0 && df.is_finite()) {
        return Err(StatsError::BadDegreesOfFreedom(df));
    }
    if !t.is_finite() {
        return Err(StatsError::NonFinite);
    }
    if t == 0.0 {
        return Ok(0.5);
    }
    let t2 = t * t;
    // x = df / (df + t^2) and its complement, each computed without cancellation
    let x = df / (df + t2);
    let y = t2 / (df + t2);
    let tail = 0.5 * beta_reg(x, y, df / 2.0, 0.5);
    Ok(if t > 0.0 { tail } else { 1.0 - tail })
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn incomplete_beta_reg(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(StatsError::BetaDomain { x, a, b });
    }
    Ok(beta_reg(x, 1.0 - x, a, b))
}

/// `I_x(a, b)` given both `x` and `y = 1 - x`.
fn beta_reg(x: f64, y: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    // The continued fraction converges fast below the mean; use the
    // reflection I_x(a, b) = 1 - I_y(b, a) above it.
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(y, b, a) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

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
    for m in 1..=MAX_ITER {
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

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// One verification outcome with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub illegal: bool,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub auroc: f64,
    pub alpha: f64,
    pub scenarios: Vec<Scenario>,
}

/// Sensitivity and specificity at the decision rule `p < alpha` (predict
/// illegal), and AUROC with illegal scenarios scored by `-p`, ties counted
/// as one half.
pub fn classification_metrics(scenarios: &[Scenario], alpha: f64) -> Result<MetricsReport, StatsError> {
    if scenarios.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(s) = scenarios.iter().find(|s| !(0.0..=1.0).contains(&s.p)) {
        return Err(StatsError::BadPValue(s.p));
    }
    let pos: Vec<f64> = scenarios.iter().filter(|s| s.illegal).map(|s| s.p).collect();
    let neg: Vec<f64> = scenarios.iter().filter(|s| !s.illegal).map(|s| s.p).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(StatsError::SingleClass);
    }
    let tp = pos.iter().filter(|&&p| p < alpha).count();
    let tn = neg.iter().filter(|&&p| p >= alpha).count();
    let mut wins = 0.0;
    for &pp in &pos {
        for &pn in &neg {
            wins += if pp < pn {
                1.0
            } else if pp == pn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(MetricsReport {
        sensitivity: tp as f64 / pos.len() as f64,
        specificity: tn as f64 / neg.len() as f64,
        auroc: wins / (pos.len() * neg.len()) as f64,
        alpha,
        scenarios: scenarios.to_vec(),
    })
}

/// Serializes `±inf` as the strings `"inf"` / `"-inf"` so reports stay
/// valid JSON.
pub(crate) mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad float {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_series_give_half() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_ttest_one_tailed(&a, &a, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.p, 0.5);
        assert_eq!(r.t, 0.0);
    }

    #[test]
    fn hand_worked_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = paired_ttest_one_tailed(&a, &b, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.mean_diff, 3.0);
        assert!((r.sd_diff - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((r.t - 18f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 4);
        // 0.0066178 at full precision
        assert!((r.p - 0.00661).abs() < 1e-5, "{}", r.p);
        assert!(r.rejects_null());
    }

    #[test]
    fn negative_differences_take_upper_branch() {
        let r = paired_ttest_one_tailed(&[-1.0, -2.0, -3.0], &[0.0; 3], DEFAULT_ALPHA).unwrap();
        assert!(r.t < 0.0);
        assert!(r.p > 0.5);
    }

    #[test]
    fn degenerate_constant_differences() {
        let r = paired_ttest_one_tailed(&[2.0, 2.0], &[1.0, 1.0], DEFAULT_ALPHA).unwrap();
        assert_eq!((r.p, r.t), (0.0, f64::INFINITY));
        let r = paired_ttest_one_tailed(&[1.0, 1.0], &[2.0, 2.0], DEFAULT_ALPHA).unwrap();
        assert_eq!((r.p, r.t), (1.0, f64::NEG_INFINITY));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"-inf\""));
        let back: TTestResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn input_errors() {
        assert_eq!(paired_ttest_one_tailed(&[1.0], &[1.0], 0.05), Err(StatsError::TooFewPairs(1)));
        assert_eq!(
            paired_ttest_one_tailed(&[1.0, 2.0], &[1.0], 0.05),
            Err(StatsError::LengthMismatch(2, 1))
        );
        assert_eq!(
            paired_ttest_one_tailed(&[1.0, f64::NAN], &[1.0, 2.0], 0.05),
            Err(StatsError::NonFinite)
        );
        assert!(student_t_sf(1.0, 0.0).is_err());
    }

    #[test]
    fn t_tail_closed_forms() {
        for df in [1.0, 2.0, 7.0, 300.0] {
            assert_eq!(student_t_sf(0.0, df).unwrap(), 0.5);
        }
        assert!((student_t_sf(1.0, 1.0).unwrap() - 0.25).abs() < 1e-12);
        // df = 2: sf(t) = (1 - t / sqrt(t^2 + 2)) / 2
        let t: f64 = 1.3;
        let want = 0.5 * (1.0 - t / (t * t + 2.0).sqrt());
        assert!((student_t_sf(t, 2.0).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn t_tail_approaches_normal() {
        assert!((student_t_sf(1.96, 10_000.0).unwrap() - 0.0250).abs() < 1e-4);
    }

    #[test]
    fn incomplete_beta_values() {
        for x in [0.0, 0.1, 0.5, 0.93, 1.0] {
            assert!((incomplete_beta_reg(x, 1.0, 1.0).unwrap() - x).abs() < 1e-14);
        }
        for a in [0.5, 1.0, 3.7, 20.0] {
            assert!((incomplete_beta_reg(0.5, a, a).unwrap() - 0.5).abs() < 1e-13);
        }
        assert!((incomplete_beta_reg(0.25, 2.0, 3.0).unwrap() - 0.261_718_75).abs() < 1e-14);
        assert!(incomplete_beta_reg(1.5, 1.0, 1.0).is_err());
        assert!(incomplete_beta_reg(0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12 * fact.ln().max(1.0));
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    fn sc(illegal: bool, p: f64) -> Scenario {
        Scenario {
            label: String::new(),
            illegal,
            p,
        }
    }

    #[test]
    fn metrics_examples() {
        let m = classification_metrics(&[sc(true, 0.001), sc(true, 0.01), sc(false, 0.6), sc(false, 0.99)], 0.05).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.auroc), (1.0, 1.0, 1.0));

        let m = classification_metrics(&[sc(true, 0.0), sc(false, 0.0), sc(false, 0.0)], 0.05).unwrap();
        assert_eq!((m.specificity, m.auroc), (0.0, 0.5));

        let m = classification_metrics(&[sc(true, 0.01), sc(true, 0.2), sc(false, 0.1), sc(false, 0.9)], 0.05).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.auroc), (0.5, 1.0, 0.75));

        assert_eq!(classification_metrics(&[], 0.05), Err(StatsError::Empty));
        assert_eq!(classification_metrics(&[sc(true, 0.1)], 0.05), Err(StatsError::SingleClass));
    }

    proptest! {
        #[test]
        fn shift_lowers_p(
            d in proptest::collection::vec(-5.0f64..5.0, 2..30),
            shift in 0.01f64..3.0,
        ) {
            let zeros = vec![0.0; d.len()];
            let r0 = paired_ttest_one_tailed(&d, &zeros, 0.05).unwrap();
            prop_assume!(r0.sd_diff > 1e-9);
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            let r1 = paired_ttest_one_tailed(&shifted, &zeros, 0.05).unwrap();
            prop_assert!(r1.p < r0.p || (r0.p == 0.0 && r1.p == 0.0));
            prop_assert!((0.0..=1.0).contains(&r1.p));
            prop_assert_eq!(r1.t.signum(), r1.mean_diff.signum());
        }

        #[test]
        fn tail_symmetry_and_monotone(t in -30.0f64..30.0, dt in 0.01f64..5.0, df in 1u32..200) {
            let df = f64::from(df);
            let s = student_t_sf(t, df).unwrap();
            prop_assert!((s + student_t_sf(-t, df).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!(student_t_sf(t + dt, df).unwrap() <= s);
        }

        #[test]
        fn auroc_rank_invariant(ps in proptest::collection::vec((any::<bool>(), 0.0f64..1.0), 2..20)) {
            let scen: Vec<Scenario> = ps.iter().map(|&(i, p)| sc(i, p)).collect();
            prop_assume!(scen.iter().any(|s| s.illegal) && scen.iter().any(|s| !s.illegal));
            let a = classification_metrics(&scen, 0.05).unwrap().auroc;
            let warped: Vec<Scenario> = scen.iter().map(|s| sc(s.illegal, s.p.powi(3))).collect();
            let b = classification_metrics(&warped, 0.05).unwrap().auroc;
            prop_assert_eq!(a, b);
        }
    }
}

//! Two-sample comparison of distance distributions.

use std::cmp::Ordering;
use std::f64::consts::{PI, SQRT_2};
use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::profiles::{distances_by_class, DistanceRecord};

pub const DEFAULT_ALPHA: f64 = 0.005;
pub const DEFAULT_ES_POINTS: [f64; 2] = [0.4, 0.8];
pub const ES_MIN_SAMPLE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    pub fn of(delta: f64) -> Self {
        let d = delta.abs();
        if d < 0.147 {
            Magnitude::Negligible
        } else if d < 0.33 {
            Magnitude::Small
        } else if d < 0.474 {
            Magnitude::Medium
        } else {
            Magnitude::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Magnitude::Negligible => "negligible",
            Magnitude::Small => "small",
            Magnitude::Medium => "medium",
            Magnitude::Large => "large",
        }
    }
}

impl fmt::Display for Magnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub delta: f64,
    pub magnitude: Magnitude,
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_nonempty(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("two-sample test needs both samples non-empty".into()));
    }
    check_finite(a, "first sample")?;
    check_finite(b, "second sample")
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation percentile of a sorted sample, `q` in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let h = x / 2.0;
    let p = match df {
        0 => 0.0,
        1 => erfc(h.sqrt()),
        2 => (-h).exp(),
        3 => erfc(h.sqrt()) + (2.0 * x / PI).sqrt() * (-h).exp(),
        4 => (-h).exp() * (1.0 + h),
        _ => gamma_ur(df as f64 / 2.0, h),
    };
    p.clamp(0.0, 1.0)
}

/// Two-sided p-value of a standard normal score.
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / SQRT_2).clamp(0.0, 1.0)
}

/// Survival function of the limiting Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        // theta-function form of the CDF converges fast for small x
        let c = -PI * PI / (8.0 * x * x);
        let mut cdf = 0.0;
        for k in 1..=20 {
            let m = (2 * k - 1) as f64;
            let term = (c * m * m).exp();
            cdf += term;
            if term < 1e-18 * cdf {
                break;
            }
        }
        (1.0 - (2.0 * PI).sqrt() / x * cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * x * x).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 * sum.abs() || term == 0.0 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

/// Epps-Singleton test on the empirical characteristic functions.
///
/// `t` is scaled by the semi-interquartile range of the pooled sample. The
/// small-sample correction applies when the larger sample has fewer than 25
/// values. Degrees of freedom are the rank of the covariance pseudo-inverse.
pub fn epps_singleton(a: &[f64], b: &[f64], t: &[f64]) -> Result<TestResult> {
    let (nx, ny) = (a.len(), b.len());
    if nx < ES_MIN_SAMPLE || ny < ES_MIN_SAMPLE {
        return Err(Error::SampleTooSmall(format!(
            "Epps-Singleton needs at least {ES_MIN_SAMPLE} values per sample, got {nx} and {ny}"
        )));
    }
    check_nonempty(a, b)?;
    if t.is_empty() || t.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Parameter("evaluation points must be positive".into()));
    }
    let pooled = sorted(&[a, b].concat());
    let sigma = (percentile(&pooled, 75.0) - percentile(&pooled, 25.0)) / 2.0;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("pooled interquartile range is zero".into()));
    }
    let ts: Vec<f64> = t.iter().map(|v| v / sigma).collect();
    let dim = 2 * ts.len();

    let features = |xs: &[f64]| -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), dim, |r, c| {
            let arg = ts[c % ts.len()] * xs[r];
            if c < ts.len() {
                arg.cos()
            } else {
                arg.sin()
            }
        })
    };
    let biased_cov = |g: &DMatrix<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let n = g.nrows() as f64;
        let mean = g.row_mean().transpose();
        let mut centered = g.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        (mean, centered.transpose() * centered / n)
    };
    let (mx, cx) = biased_cov(&features(a));
    let (my, cy) = biased_cov(&features(b));
    let n = (nx + ny) as f64;
    let est_cov = cx * (n / nx as f64) + cy * (n / ny as f64);

    let svd = est_cov.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = 1e-15 * smax;
    let inv_s = svd.singular_values.map(|s| if s > cutoff { 1.0 / s } else { 0.0 });
    let u = svd.u.expect("svd computed with u");
    let vt = svd.v_t.expect("svd computed with v_t");
    let pinv = vt.transpose() * DMatrix::from_diagonal(&inv_s) * u.transpose();

    let inv_smax = inv_s.max();
    let rank_tol = inv_smax * dim as f64 * f64::EPSILON;
    let df = inv_s.iter().filter(|&&s| s > rank_tol).count();

    let diff = mx - my;
    let mut w = n * (diff.transpose() * &pinv * &diff)[(0, 0)];
    if nx.max(ny) < 25 {
        let corr = 1.0 / (1.0 + n.powf(-0.45) + 10.1 * ((nx as f64).powf(-1.7) + (ny as f64).powf(-1.7)));
        w *= corr;
    }
    if !w.is_finite() {
        return Err(Error::Degenerate("Epps-Singleton statistic is not finite".into()));
    }
    Ok(TestResult { statistic: w, p_value: chi2_sf(w, df) })
}

/// Epps-Singleton with the default evaluation points.
pub fn epps_singleton_default(a: &[f64], b: &[f64]) -> Result<TestResult> {
    epps_singleton(a, b, &DEFAULT_ES_POINTS)
}

/// Cliff's delta, computed by binary search over the sorted second sample.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<EffectSize> {
    check_nonempty(a, b)?;
    let sb = sorted(b);
    let mut greater: i128 = 0;
    let mut less: i128 = 0;
    for &x in a {
        let below = sb.partition_point(|&y| y < x);
        let not_above = sb.partition_point(|&y| y <= x);
        greater += below as i128;
        less += (sb.len() - not_above) as i128;
    }
    let delta = (greater - less) as f64 / (a.len() as f64 * b.len() as f64);
    Ok(EffectSize { delta, magnitude: Magnitude::of(delta) })
}

/// Standardized mean difference with the pooled `(n_a + n_b − 2)` deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::SampleTooSmall(format!(
            "Cohen's d needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_nonempty(a, b)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ss = |xs: &[f64], m: f64| xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    let (ma, mb) = (mean(a), mean(b));
    let pooled = ((ss(a, ma) + ss(b, mb)) / (a.len() + b.len() - 2) as f64).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::Degenerate("pooled standard deviation is zero".into()));
    }
    Ok((ma - mb) / pooled)
}

/// Wilcoxon rank-sum test: tie-corrected normal score of the first sample's
/// rank sum, two-sided, without continuity correction.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    check_nonempty(a, b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let count = (j - i + 1) as f64;
        tie_term += count * count * count - count;
        rank_sum += avg_rank * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Err(Error::Degenerate("rank-sum variance is zero".into()));
    }
    let z = (rank_sum - n1 * (n + 1.0) / 2.0) / var.sqrt();
    Ok(TestResult { statistic: z, p_value: normal_two_sided(z) })
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    check_nonempty(a, b)?;
    let (sa, sb) = (sorted(a), sorted(b));
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = sa[i].min(sb[j]);
        while i < n && sa[i] == x {
            i += 1;
        }
        while j < m && sb[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = (n as f64 * m as f64 / (n + m) as f64).sqrt();
    Ok(TestResult { statistic: d, p_value: kolmogorov_sf(en * d) })
}

/// Benjamini-Hochberg step-up procedure; returns one rejection flag per input.
pub fn benjamini_hochberg(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| p_values[x].partial_cmp(&p_values[y]).unwrap_or(Ordering::Equal));
    let cut = (1..=m)
        .rev()
        .find(|&r| p_values[order[r - 1]] <= r as f64 * alpha / m as f64)
        .unwrap_or(0);
    let mut flags = vec![false; m];
    for &idx in &order[..cut] {
        flags[idx] = true;
    }
    Ok(flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub class_id: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub es: Option<TestResult>,
    pub cliffs: Option<EffectSize>,
    pub cohens_d: Option<f64>,
    pub rank_sum: Option<TestResult>,
    pub ks: Option<TestResult>,
    /// Only set for rows with an Epps-Singleton result.
    pub bh_rejected: Option<bool>,
}

/// Per-class comparison of two record lists grouped by predicted class.
///
/// Statistics that cannot be computed for a class (empty or too small
/// samples, degenerate spread) are left blank. The Benjamini-Hochberg flags
/// cover the Epps-Singleton p-values of the classes that have one.
pub fn compare_categories(
    records_a: &[DistanceRecord],
    records_b: &[DistanceRecord],
    num_classes: usize,
    alpha: f64,
) -> Result<Vec<ComparisonRow>> {
    let ga = distances_by_class(records_a, num_classes);
    let gb = distances_by_class(records_b, num_classes);
    let mut rows: Vec<ComparisonRow> = ga
        .iter()
        .zip(&gb)
        .enumerate()
        .map(|(k, (a, b))| ComparisonRow {
            class_id: k,
            n_a: a.len(),
            n_b: b.len(),
            es: epps_singleton_default(a, b).ok(),
            cliffs: cliffs_delta(a, b).ok(),
            cohens_d: cohens_d(a, b).ok(),
            rank_sum: rank_sum_test(a, b).ok(),
            ks: ks_test(a, b).ok(),
            bh_rejected: None,
        })
        .collect();
    let tested: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.es.is_some()).map(|(i, _)| i).collect();
    let ps: Vec<f64> = tested.iter().map(|&i| rows[i].es.unwrap().p_value).collect();
    for (&i, flag) in tested.iter().zip(benjamini_hochberg(&ps, alpha)?) {
        rows[i].bh_rejected = Some(flag);
    }
    Ok(rows)
}

pub const COMPARISON_HEADER: &str = "class,es_statistic,es_pvalue,cliffs_delta,magnitude,bh_rejected";
pub const EXTRAS_HEADER: &str =
    "class,n_a,n_b,cohens_d,rank_sum_z,rank_sum_pvalue,ks_statistic,ks_pvalue";

fn cell<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn comparison_csv(rows: &[ComparisonRow], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str(COMPARISON_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.class_id,
            cell(r.es.map(|t| t.statistic)),
            cell(r.es.map(|t| t.p_value)),
            cell(r.cliffs.map(|c| c.delta)),
            cell(r.cliffs.map(|c| c.magnitude)),
            cell(r.bh_rejected),
        );
    }
    s
}

pub fn extras_csv(rows: &[ComparisonRow], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str(EXTRAS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.class_id,
            r.n_a,
            r.n_b,
            cell(r.cohens_d),
            cell(r.rank_sum.map(|t| t.statistic)),
            cell(r.rank_sum.map(|t| t.p_value)),
            cell(r.ks.map(|t| t.statistic)),
            cell(r.ks.map(|t| t.p_value)),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Category;

    #[test]
    fn magnitude_thresholds() {
        assert_eq!(Magnitude::of(0.146), Magnitude::Negligible);
        assert_eq!(Magnitude::of(-0.147), Magnitude::Small);
        assert_eq!(Magnitude::of(0.33), Magnitude::Medium);
        assert_eq!(Magnitude::of(-0.474), Magnitude::Large);
    }

    #[test]
    fn cliffs_examples() {
        let e = cliffs_delta(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((e.delta + 5.0 / 9.0).abs() < 1e-15);
        assert_eq!(e.magnitude, Magnitude::Large);
        assert_eq!(cliffs_delta(&[1.0, 2.0], &[1.0, 2.0]).unwrap().delta, 0.0);
        assert_eq!(cliffs_delta(&[1.0, 2.0], &[3.0, 4.0]).unwrap().delta, -1.0);
        assert!(cliffs_delta(&[], &[1.0]).is_err());
    }

    #[test]
    fn cohens_examples() {
        let d = cohens_d(&[0.0, 1.0], &[1.0, 2.0]).unwrap();
        assert!((d + 1.0 / 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(cohens_d(&[1.0], &[1.0, 2.0]).is_err());
        assert!(matches!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn es_preconditions() {
        let five = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(epps_singleton_default(&[1.0, 2.0, 3.0], &five), Err(Error::SampleTooSmall(_))));
        assert!(matches!(epps_singleton_default(&[1.0; 5], &[1.0; 6]), Err(Error::Degenerate(_))));
        let r = epps_singleton_default(&five, &five).unwrap();
        assert!(r.statistic.abs() < 1e-12 && r.p_value > 0.9);
    }

    #[test]
    fn chi2_matches_reference_values() {
        let xs = [0.1, 1.0, 3.7, 12.0, 40.0];
        let reference: [(usize, [f64; 5]); 6] = [
            (1, [0.7518296340458492, 0.31731050786291115, 0.054412467991601404, 0.0005320055051392492, 2.5396285894708634e-10]),
            (2, [0.951229424500714, 0.6065306597126334, 0.1572371663136276, 0.002478752176666357, 2.0611536224385566e-09]),
            (3, [0.9918374237318764, 0.8012519569012009, 0.29573403237527585, 0.007383160505359769, 1.065509033425585e-08]),
            (4, [0.9987908957257497, 0.9097959895689501, 0.44812592399383866, 0.01735126523666451, 4.328422607120966e-08]),
            (5, [0.9998376833880774, 0.9625657732472964, 0.5933639617818078, 0.03478778050624185, 1.493367900050393e-07]),
            (7, [0.9999976885812014, 0.9948285365165155, 0.8136101095426413, 0.10055886850835878, 1.258790387371308e-06]),
        ];
        for (df, row) in reference {
            for (&x, &want) in xs.iter().zip(&row) {
                let got = chi2_sf(x, df);
                assert!((got - want).abs() <= 1e-10 * want, "df {df} x {x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn kolmogorov_matches_reference_values() {
        let cases = [
            (0.3, 0.9999906941986655),
            (0.7, 0.7112351950296893),
            (0.99, 0.2808738392255489),
            (1.0, 0.26999967167735456),
            (1.5, 0.022217962616525127),
            (3.0, 3.045995948942526e-08),
        ];
        for (x, want) in cases {
            assert!((kolmogorov_sf(x) - want).abs() <= 1e-12 * want.max(1e-3), "x {x}");
        }
        assert_eq!(kolmogorov_sf(0.0), 1.0);
        assert!(kolmogorov_sf(5.0) < 1e-20);
    }

    #[test]
    fn ks_extremes() {
        let a: Vec<f64> = (0..100).map(f64::from).collect();
        let b: Vec<f64> = (200..300).map(f64::from).collect();
        assert_eq!(ks_test(&a, &a).unwrap().statistic, 0.0);
        assert_eq!(ks_test(&a, &a).unwrap().p_value, 1.0);
        assert_eq!(ks_test(&a, &b).unwrap().statistic, 1.0);
    }

    #[test]
    fn bh_examples() {
        // step-up: the largest r with p_(r) <= r * alpha / m is r = 4 (0.041 <= 0.05)
        assert_eq!(benjamini_hochberg(&[0.001, 0.008, 0.039, 0.041], 0.05).unwrap(), vec![true; 4]);
        assert_eq!(
            benjamini_hochberg(&[0.001, 0.008, 0.039, 0.051], 0.05).unwrap(),
            vec![true, true, false, false]
        );
        assert_eq!(benjamini_hochberg(&[1.0; 4], 0.005).unwrap(), vec![false; 4]);
        assert_eq!(benjamini_hochberg(&[0.0; 4], 0.005).unwrap(), vec![true; 4]);
        assert!(benjamini_hochberg(&[1.5], 0.05).is_err());
        assert!(benjamini_hochberg(&[], 0.05).unwrap().is_empty());
    }

    fn recs(values: &[(usize, f64)]) -> Vec<DistanceRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| DistanceRecord { input_id: i as u64, category: Category::Train, predicted_class: k, distance: d })
            .collect()
    }

    #[test]
    fn compare_same_records() {
        let vals: Vec<(usize, f64)> = (0..60).map(|i| (i % 3, (i * 7 % 13) as f64 + 0.1 * i as f64)).collect();
        let r = recs(&vals);
        let rows = compare_categories(&r, &r, 4, DEFAULT_ALPHA).unwrap();
        for row in &rows[..3] {
            assert_eq!(row.cliffs.unwrap().delta, 0.0);
            assert_eq!(row.cliffs.unwrap().magnitude, Magnitude::Negligible);
            assert_eq!(row.bh_rejected, Some(false));
        }
        assert!(rows[3].es.is_none() && rows[3].cliffs.is_none() && rows[3].bh_rejected.is_none());
        let text = comparison_csv(&rows, "");
        assert!(text.starts_with(COMPARISON_HEADER));
        assert!(text.ends_with("3,-,-,-,-,-\n"));
        assert_eq!(extras_csv(&rows, "").lines().count(), 5);
    }
}

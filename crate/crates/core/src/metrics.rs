//! Segmentation metrics (Dice, PPV, sensitivity, Hausdorff distance) and
//! the statistics used for connectivity analysis (Pearson correlation,
//! Fisher z, Student t-tests, Benjamini–Hochberg FDR, least-squares fits).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::post::Mask;

// ------------------------------------------------------------ overlap

/// Overlap scores of a prediction `Y` against ground truth `X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// `2|X∩Y| / (|X|+|Y|)`; 1 when both masks are empty.
    pub dice: f64,
    /// `|X∩Y| / |Y|`; `None` when the prediction is empty.
    pub ppv: Option<f64>,
    /// `|X∩Y| / |X|`; `None` when the ground truth is empty.
    pub sen: Option<f64>,
    /// Set when both masks are empty and `dice` holds the convention value.
    pub both_empty: bool,
}

fn check_pair(truth: &Mask, pred: &Mask) -> Result<()> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape(format!(
            "ground truth {:?} and prediction {:?} differ in shape",
            truth.shape(),
            pred.shape()
        )));
    }
    Ok(())
}

pub fn seg_metrics(truth: &Mask, pred: &Mask) -> Result<SegMetrics> {
    check_pair(truth, pred)?;
    let (mut x, mut y, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in truth.data().iter().zip(pred.data()) {
        x += a as usize;
        y += b as usize;
        both += (a && b) as usize;
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(SegMetrics {
        dice: ratio(2 * both, x + y).unwrap_or(1.0),
        ppv: ratio(both, y),
        sen: ratio(both, x),
        both_empty: x + y == 0,
    })
}

// ----------------------------------------------------------- Hausdorff

/// Squared Euclidean distance from every voxel to the nearest foreground
/// voxel of `features` (`+∞` everywhere if there is none).
///
/// Exact separable transform (lower envelope of parabolas, one pass per
/// axis). With unit spacing all intermediate values are small integers, so
/// the result is exact in `f64`.
pub fn edt_squared(features: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let shape = features.shape();
    let mut dist: Vec<f64> = features
        .data()
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in (0..3).rev() {
        let n = shape[axis];
        let weight = spacing[axis] * spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..shape[o1] {
            for b in 0..shape[o2] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..n).map(|i| dist[base + i * strides[axis]]));
                envelope_1d(&line, weight, &mut out);
                for (i, &v) in out.iter().enumerate() {
                    dist[base + i * strides[axis]] = v;
                }
            }
        }
    }
    dist
}

/// `out[q] = min_p f[p] + w (q − p)²`.
fn envelope_1d(f: &[f64], w: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let key = |p: usize| f[p] + w * (p * p) as f64;
    let meet = |p: usize, q: usize| (key(q) - key(p)) / (2.0 * w * (q - p) as f64);
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        loop {
            match v.last() {
                Some(&top) => {
                    let s = meet(top, q);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out.push(f[v[k]] + w * d * d);
    }
}

/// `max_{a∈from} min_{b∈to} ‖a − b‖`.
pub fn directed_hausdorff(from: &Mask, to: &Mask, spacing: Option<[f64; 3]>) -> Result<f64> {
    check_pair(from, to)?;
    if from.count() == 0 || to.count() == 0 {
        return Err(Error::Degenerate("Hausdorff distance of an empty mask".into()));
    }
    let dt = edt_squared(to, spacing.unwrap_or([1.0; 3]));
    let worst = from
        .data()
        .iter()
        .zip(&dt)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max);
    Ok(worst.sqrt())
}

/// Symmetric Hausdorff distance, in voxel units unless `spacing` is given.
pub fn hausdorff(truth: &Mask, pred: &Mask, spacing: Option<[f64; 3]>) -> Result<f64> {
    Ok(directed_hausdorff(truth, pred, spacing)?.max(directed_hausdorff(pred, truth, spacing)?))
}

// ----------------------------------------------------------- statistics

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::shape(format!(
            "pearson needs equal lengths >= 3, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("pearson correlation of a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `atanh(r)`, evaluated on `|r|` so that it is exactly odd; `|r| = 1` is
/// reported as degenerate.
pub fn fisher_z(r: f64) -> Result<f64> {
    if !(r.abs() <= 1.0) {
        return Err(Error::Contract(format!("correlation must lie in [-1, 1], got {r}")));
    }
    if r.abs() == 1.0 {
        return Err(Error::Degenerate(format!("fisher z of r = {r} is infinite")));
    }
    Ok(r.signum() * r.abs().atanh())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// Mean (difference) greater than the null value.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    OneSample,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: f64,
    pub kind: TestKind,
    pub alternative: Alternative,
    /// Zero sample variance: `statistic` is 0 or ±∞ and `p_value` is 0 or 1.
    pub degenerate: bool,
}

/// `P(T > t)` for Student's t with `df` degrees of freedom, through the
/// regularized incomplete beta function.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

fn p_value(t: f64, df: f64, alt: Alternative) -> f64 {
    match alt {
        Alternative::Greater => student_t_sf(t, df),
        Alternative::Less => student_t_sf(-t, df),
        Alternative::TwoSided => (2.0 * student_t_sf(t.abs(), df)).min(1.0),
    }
}

fn t_from_samples(d: &[f64], mu0: f64, kind: TestKind, alt: Alternative) -> Result<StatResult> {
    if d.len() < 2 {
        return Err(Error::shape(format!("t-test needs at least 2 samples, got {}", d.len())));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("t-test samples must be finite".into()));
    }
    let n = d.len() as f64;
    let m = mean(d);
    let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        let statistic = if m == mu0 {
            0.0
        } else {
            (m - mu0).signum() * f64::INFINITY
        };
        let p_value = if statistic == 0.0 { 1.0 } else { p_value(statistic, df, alt) };
        return Ok(StatResult {
            statistic,
            p_value,
            df,
            kind,
            alternative: alt,
            degenerate: true,
        });
    }
    let statistic = (m - mu0) / (var / n).sqrt();
    Ok(StatResult {
        statistic,
        p_value: p_value(statistic, df, alt),
        df,
        kind,
        alternative: alt,
        degenerate: false,
    })
}

/// One-sample t-test of `mean(samples) = mu0`.
pub fn t_test_one_sample(samples: &[f64], mu0: f64, alt: Alternative) -> Result<StatResult> {
    t_from_samples(samples, mu0, TestKind::OneSample, alt)
}

/// Paired t-test of `mean(a − b) = 0`.
pub fn t_test_paired(a: &[f64], b: &[f64], alt: Alternative) -> Result<StatResult> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    t_from_samples(&d, 0.0, TestKind::Paired, alt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub rejected: Vec<bool>,
    /// Benjamini–Hochberg adjusted p-values, in input order.
    pub adjusted: Vec<f64>,
}

/// Benjamini–Hochberg step-up procedure at level `q`.
pub fn fdr_bh(p_values: &[f64], q: f64) -> Result<FdrResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("fdr level must lie in (0, 1), got {q}")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("p-values must lie in [0, 1], got {p}")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    // Largest rank k with p_(k) <= k q / m.
    let cutoff = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * q / m as f64)
        .unwrap_or(0);
    let mut rejected = vec![false; m];
    for &i in &order[..cutoff] {
        rejected[i] = true;
    }
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for k in (1..=m).rev() {
        let i = order[k - 1];
        running = running.min(p_values[i] * m as f64 / k as f64);
        // Guard against rounding below p when m = k.
        running = running.max(p_values[i]);
        adjusted[i] = running;
    }
    Ok(FdrResult { rejected, adjusted })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation of the pairs; 0 when `y` is constant.
    pub r: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape(format!(
            "linear fit needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("linear fit with constant x".into()));
    }
    let slope = sxy / sxx;
    let r = if syy == 0.0 {
        0.0
    } else {
        // One square root keeps r = 1 exact for identical inputs.
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

// -------------------------------------------------------------- reports

/// Per-subject evaluation row. Undefined scores are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub subject_id: String,
    pub dice: f64,
    pub ppv: Option<f64>,
    pub hd: Option<f64>,
    pub sen: Option<f64>,
}

impl MetricsRow {
    /// Scores one subject; the Hausdorff distance is left undefined when
    /// either mask is empty.
    pub fn evaluate(subject_id: impl Into<String>, truth: &Mask, pred: &Mask, spacing: Option<[f64; 3]>) -> Result<Self> {
        let m = seg_metrics(truth, pred)?;
        let hd = match hausdorff(truth, pred, spacing) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsRow {
            subject_id: subject_id.into(),
            dice: m.dice,
            ppv: m.ppv,
            hd,
            sen: m.sen,
        })
    }
}

/// Mean and sample standard deviation of one metric over its defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary { mean: None, std: None, n: 0 };
        }
        let m = mean(&v);
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary {
            mean: Some(m),
            std: Some(std),
            n: v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: Summary,
    pub ppv: Summary,
    pub hd: Summary,
    pub sen: Summary,
}

/// Metric selector for cross-report comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dice,
    Ppv,
    Hd,
    Sen,
}

impl Metric {
    pub fn of(self, row: &MetricsRow) -> Option<f64> {
        match self {
            Metric::Dice => Some(row.dice),
            Metric::Ppv => row.ppv,
            Metric::Hd => row.hd,
            Metric::Sen => row.sen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn new(rows: Vec<MetricsRow>) -> Self {
        let summary = |m: Metric| Summary::of(rows.iter().filter_map(|r| m.of(r)));
        let aggregate = Aggregate {
            dice: summary(Metric::Dice),
            ppv: summary(Metric::Ppv),
            hd: summary(Metric::Hd),
            sen: summary(Metric::Sen),
        };
        MetricsReport { rows, aggregate }
    }

    /// CSV with columns `subject_id,dice,ppv,hd,sen`, one row per subject
    /// followed by `mean` and `std` rows. Undefined values are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
        w.write_record(["subject_id", "dice", "ppv", "hd", "sen"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.subject_id.clone(), r.dice.to_string(), fmt_opt(r.ppv), fmt_opt(r.hd), fmt_opt(r.sen)])
                .map_err(csv_err)?;
        }
        let a = &self.aggregate;
        for (label, pick) in [("mean", (|s: &Summary| s.mean) as fn(&Summary) -> Option<f64>), ("std", |s: &Summary| s.std)] {
            w.write_record([
                label.to_string(),
                fmt_opt(pick(&a.dice)),
                fmt_opt(pick(&a.ppv)),
                fmt_opt(pick(&a.hd)),
                fmt_opt(pick(&a.sen)),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Contract(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Paired t-test of one metric against another report, matching
    /// subjects by id; subjects where either value is undefined are skipped.
    pub fn paired_test(&self, other: &MetricsReport, metric: Metric, alt: Alternative) -> Result<StatResult> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in &self.rows {
            let Some(o) = other.rows.iter().find(|o| o.subject_id == r.subject_id) else {
                continue;
            };
            if let (Some(x), Some(y)) = (metric.of(r), metric.of(o)) {
                a.push(x);
                b.push(y);
            }
        }
        t_test_paired(&a, &b, alt)
    }
}

//! Segmentation metrics: overlap ratios from confusion counts and boundary
//! Hausdorff distances in pixels.

use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("prediction has {a} pixels, ground truth {b}")));
    }
    Ok(())
}

/// `num / den`, or `empty` when the denominator is zero.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn from_binary(pred: &[bool], gt: &[bool]) -> Result<Self> {
        check_len("ConfusionCounts", pred.len(), gt.len())?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// One-vs-rest counts for `class`.
    pub fn for_class(pred: &[u8], gt: &[u8], class: u8) -> Result<Self> {
        check_len("ConfusionCounts", pred.len(), gt.len())?;
        let p: Vec<bool> = pred.iter().map(|&c| c == class).collect();
        let g: Vec<bool> = gt.iter().map(|&c| c == class).collect();
        Self::from_binary(&p, &g)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, 1.0)
    }

    /// `tp / (tp + fp + fn)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, 1.0)
    }

    /// Sensitivity `tp / (tp + fn)`; 1 when there are no positives to find.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, 1.0)
    }

    /// Specificity `tn / (tn + fp)`; 1 when there are no negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, 1.0)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), 1.0)
    }
}

/// Mask pixels with at least one of their 8 neighbours off the mask or
/// outside the image, as `(row, col)`.
pub fn boundary_points(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = (-1..=1).any(|dy| (-1..=1).any(|dx| (dy, dx) != (0, 0) && !on(yi + dy, xi + dx)));
            if edge {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Exact squared Euclidean distance to the nearest seed, by separable
/// lower envelopes of parabolas along columns then rows.
fn squared_distance_transform(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid = vec![inf; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let mut line = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid[y * w + x]));
        for (y, v) in envelope(&line).into_iter().enumerate() {
            grid[y * w + x] = v;
        }
    }
    for y in 0..h {
        let row = envelope(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// One-dimensional transform `d(p) = min_q (p - q)² + f(q)`.
fn envelope(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for &q in &finite {
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    (0..n)
        .map(|p| {
            let pf = p as f64;
            while z[k + 1] < pf {
                k += 1;
            }
            let d = pf - v[k] as f64;
            d * d + f[v[k]]
        })
        .collect()
}

/// Linear-interpolation percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Distances from each boundary point of `from` to the boundary of `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let dt = squared_distance_transform(to, h, w);
    let mut d: Vec<f64> = from.iter().map(|&(y, x)| dt[y * w + x].sqrt()).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Symmetric boundary Hausdorff distance in pixels. `percentile = 100`
/// gives the maximum; lower values take that percentile of each directed
/// distance set and return the larger of the two.
pub fn hausdorff(pred: &[bool], gt: &[bool], h: usize, w: usize, pct: f64) -> Result<f64> {
    check_len("hausdorff", pred.len(), gt.len())?;
    check_len("hausdorff", pred.len(), h * w)?;
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Contract(format!("percentile {pct} outside [0, 100]")));
    }
    let a = boundary_points(pred, h, w);
    let b = boundary_points(gt, h, w);
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("Hausdorff distance of an empty mask".into()));
    }
    let ab = directed(&a, &b, h, w);
    let ba = directed(&b, &a, h, w);
    Ok(percentile(&ab, pct).max(percentile(&ba, pct)))
}

/// Metrics of one class over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// 95th percentile Hausdorff distance; `None` when no sample had both
    /// masks non-empty.
    pub hd95: Option<f64>,
    pub hd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    /// Foreground classes `1..K`, ascending.
    pub classes: Vec<ClassMetrics>,
    /// Average of the per-class rows; Hausdorff averages defined rows only.
    pub mean: ClassMetrics,
}

/// Per-sample metrics of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub counts: ConfusionCounts,
    pub hd95: Option<f64>,
    pub hd: Option<f64>,
}

pub fn sample_metrics(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Result<SampleMetrics> {
    let counts = ConfusionCounts::for_class(pred, gt, class)?;
    let p: Vec<bool> = pred.iter().map(|&c| c == class).collect();
    let g: Vec<bool> = gt.iter().map(|&c| c == class).collect();
    let hd = |pct| match hausdorff(&p, &g, h, w, pct) {
        Ok(d) => Ok(Some(d)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(SampleMetrics {
        counts,
        hd95: hd(95.0)?,
        hd: hd(100.0)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn average_rows(class: usize, rows: &[SampleMetrics]) -> ClassMetrics {
    let avg = |f: fn(&ConfusionCounts) -> f64| mean(rows.iter().map(|r| f(&r.counts))).unwrap_or(f64::NAN);
    ClassMetrics {
        class,
        dice: avg(ConfusionCounts::dice),
        iou: avg(ConfusionCounts::iou),
        sensitivity: avg(ConfusionCounts::sensitivity),
        specificity: avg(ConfusionCounts::specificity),
        accuracy: avg(ConfusionCounts::accuracy),
        hd95: mean(rows.iter().filter_map(|r| r.hd95)),
        hd: mean(rows.iter().filter_map(|r| r.hd)),
    }
}

/// Scores `(prediction, ground truth)` mask pairs of size `h × w` for
/// foreground classes `1..classes`. Each class row averages per-sample
/// values.
pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>, h: usize, w: usize, classes: usize) -> Result<MetricTable> {
    if classes < 2 {
        return Err(Error::config("need at least one foreground class"));
    }
    let mut per_class: Vec<Vec<SampleMetrics>> = vec![Vec::new(); classes - 1];
    let mut n = 0;
    for (pred, gt) in pairs {
        check_len("evaluate", pred.len(), h * w)?;
        for (c, rows) in per_class.iter_mut().enumerate() {
            rows.push(sample_metrics(pred, gt, h, w, (c + 1) as u8)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let classes: Vec<ClassMetrics> = per_class.iter().enumerate().map(|(c, rows)| average_rows(c + 1, rows)).collect();
    let avg = |f: fn(&ClassMetrics) -> f64| mean(classes.iter().map(f)).unwrap_or(f64::NAN);
    let mean_row = ClassMetrics {
        class: 0,
        dice: avg(|c| c.dice),
        iou: avg(|c| c.iou),
        sensitivity: avg(|c| c.sensitivity),
        specificity: avg(|c| c.specificity),
        accuracy: avg(|c| c.accuracy),
        hd95: mean(classes.iter().filter_map(|c| c.hd95)),
        hd: mean(classes.iter().filter_map(|c| c.hd)),
    };
    Ok(MetricTable { classes, mean: mean_row })
}

/// Scores `predict` on every sample.
pub fn evaluate_dataset(samples: &[Sample], classes: usize, mut predict: impl FnMut(&Sample) -> Result<Vec<u8>>) -> Result<MetricTable> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    };
    let (h, w) = (first.height(), first.width());
    let preds = samples.iter().map(&mut predict).collect::<Result<Vec<_>>>()?;
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::dim("evaluate_dataset", format!("mixed sizes {h}x{w} and {}x{}", s.height(), s.width())));
    }
    evaluate(preds.iter().zip(samples).map(|(p, s)| (p.as_slice(), s.mask.as_slice())), h, w, classes)
}

/// Formats like C's `%.6g`.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

impl MetricTable {
    fn rows(&self) -> impl Iterator<Item = (String, &ClassMetrics)> {
        self.classes
            .iter()
            .map(|c| (c.class.to_string(), c))
            .chain(std::iter::once(("mean".to_string(), &self.mean)))
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "class", "dice", "iou", "se", "sp", "acc", "hd95", "hd"
        );
        for (name, r) in self.rows() {
            let _ = writeln!(
                s,
                "{name:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                cell(Some(r.dice)),
                cell(Some(r.iou)),
                cell(Some(r.sensitivity)),
                cell(Some(r.specificity)),
                cell(Some(r.accuracy)),
                cell(r.hd95),
                cell(r.hd),
            );
        }
        s
    }

    /// Machine-readable `metric,class,value` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (name, r) in self.rows() {
            let values = [
                ("dice", Some(r.dice)),
                ("iou", Some(r.iou)),
                ("se", Some(r.sensitivity)),
                ("sp", Some(r.specificity)),
                ("acc", Some(r.accuracy)),
                ("hd95", r.hd95),
                ("hd", r.hd),
            ];
            for (metric, v) in values {
                let _ = writeln!(s, "{metric},{name},{}", sig6(v.unwrap_or(f64::NAN)));
            }
        }
        s
    }

    pub fn report(&self) -> String {
        format!("{}\n{}", self.to_table(), self.to_csv())
    }
}

//! Segmentation and image-quality metrics, threshold selection and grouped
//! summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::denoiser::Treatment;
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::losses::dice_loss;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_mask_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Argument(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Dice similarity `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
/// Evaluated as one minus the training dice loss so the two agree exactly.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_mask_shape(pred, gt)?;
    Ok(1.0 - dice_loss(&pred.to_f64(), &gt.to_f64())?)
}

/// Signed relative volume difference `(|pred| - |gt|) / |gt|`.
pub fn rvd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_mask_shape(pred, gt)?;
    let g = gt.area();
    if g == 0 {
        return Err(Error::UndefinedMetric("RVD needs a nonempty ground-truth mask".into()));
    }
    Ok((pred.area() as f64 - g as f64) / g as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over every window fully inside the image.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(yo + k) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `height x width` planes with an 11x11
/// Gaussian window (sigma 1.5), averaged over all fully contained windows.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, dynamic_range: f64) -> Result<f64> {
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::Argument(format!(
            "ssim inputs of length {}/{} do not match {height}x{width}",
            a.len(),
            b.len()
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {height}x{width}"
        )));
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::Argument("ssim dynamic range must be positive".into()));
    }
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let g = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, height, width, &g);
    let mu_b = filter_valid(b, height, width, &g);
    let aa = filter_valid(&prod(|x, _| x * x), height, width, &g);
    let bb = filter_valid(&prod(|_, y| y * y), height, width, &g);
    let ab = filter_valid(&prod(|x, y| x * y), height, width, &g);
    let n = mu_a.len() as f64;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n)
}

/// `(psnr, mse)` with `psnr = 10 log10(peak^2 / mse)`; identical inputs give
/// `psnr = +inf`.
pub fn psnr_mse(a: &[f64], b: &[f64], peak: f64) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument(format!(
            "psnr inputs of length {}/{}",
            a.len(),
            b.len()
        )));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Argument("psnr peak must be positive".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok((f64::INFINITY, 0.0));
    }
    Ok((10.0 * (peak * peak / mse).log10(), mse))
}

/// Value range of `gt`, falling back to 1 for constant images.
fn data_range(gt: &[f64]) -> f64 {
    let (lo, hi) = gt
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let r = hi - lo;
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// Image-quality triple `(ssim, psnr, mse)`, each computed per channel with
/// the ground-truth channel range as dynamic range, then averaged.
pub fn image_metrics(pred: &ImageTensor, gt: &ImageTensor) -> Result<(f64, f64, f64)> {
    pred.ensure_same_shape(gt, "image metrics")?;
    let s = gt.shape();
    let (mut ss, mut ps, mut ms) = (0.0, 0.0, 0.0);
    for c in 0..s.channels {
        let (p, g) = (pred.channel(c), gt.channel(c));
        let dr = data_range(g);
        ss += ssim(p, g, s.height, s.width, dr)?;
        let (psnr, mse) = psnr_mse(p, g, dr)?;
        ps += psnr;
        ms += mse;
    }
    let k = s.channels as f64;
    Ok((ss / k, ps / k, ms / k))
}

/// Candidate thresholds `0.05, 0.10, ..., 0.95`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Global threshold maximizing mean DSC over `(probabilities, ground truth)`
/// pairs; ties go to the smallest threshold.
pub fn optimize_threshold(pairs: &[(&[f64], &BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("threshold search needs a nonempty split".into()));
    }
    if pairs.iter().all(|(_, g)| g.area() == 0) {
        return Err(Error::UndefinedMetric(
            "every ground-truth mask in the split is empty".into(),
        ));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for tau in threshold_grid() {
        let mut sum = 0.0;
        for (p, g) in pairs {
            let bin = BinaryMask::from_probabilities(g.height(), g.width(), p, tau)?;
            sum += dsc(&bin, g)?;
        }
        let mean = sum / pairs.len() as f64;
        if mean > best.0 {
            best = (mean, tau);
        }
    }
    Ok(best.1)
}

/// Treatment-day ranges used for summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DayBin {
    Early,
    Short,
    OneYear,
    TwoYear,
    Beyond,
}

impl DayBin {
    pub const ALL: [DayBin; 5] = [
        DayBin::Early,
        DayBin::Short,
        DayBin::OneYear,
        DayBin::TwoYear,
        DayBin::Beyond,
    ];

    pub fn of(day: u32) -> Self {
        match day {
            0..=50 => DayBin::Early,
            51..=220 => DayBin::Short,
            221..=365 => DayBin::OneYear,
            366..=720 => DayBin::TwoYear,
            _ => DayBin::Beyond,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DayBin::Early => "0-50",
            DayBin::Short => "51-220",
            DayBin::OneYear => "221-365",
            DayBin::TwoYear => "366-720",
            DayBin::Beyond => "721+",
        }
    }
}

impl fmt::Display for DayBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One evaluated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case_id: String,
    pub slice_id: usize,
    pub target_day: u32,
    pub treatment: Treatment,
    pub dsc: f64,
    pub rvd: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Patient,
    Treatment,
    DayRange,
}

impl GroupKey {
    pub const ALL: [GroupKey; 3] = [GroupKey::Patient, GroupKey::Treatment, GroupKey::DayRange];

    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Patient => "patient",
            GroupKey::Treatment => "treatment",
            GroupKey::DayRange => "day-range",
        }
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKey::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown aggregation key `{s}`")))
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Statistics over the finite values; `+inf` mean if there are none but
    /// some infinite values (identical images in every row).
    pub fn of(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            let mean = if values.contains(&f64::INFINITY) {
                f64::INFINITY
            } else {
                f64::NAN
            };
            return Stat { mean, std: 0.0 };
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub group: String,
    pub n: usize,
    pub dsc: Stat,
    pub rvd: Stat,
    pub ssim: Stat,
    pub psnr: Stat,
    pub mse: Stat,
}

/// Groups rows by `key` and summarizes every metric. Day ranges come out in
/// chronological order, other keys in lexical order.
pub fn aggregate(rows: &[MetricRow], key: GroupKey) -> Result<Vec<Summary>> {
    if rows.is_empty() {
        return Err(Error::Argument("aggregation needs at least one row".into()));
    }
    let mut groups: BTreeMap<(usize, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let k = match key {
            GroupKey::Patient => (0, r.case_id.clone()),
            GroupKey::Treatment => (0, r.treatment.name().to_string()),
            GroupKey::DayRange => {
                let b = DayBin::of(r.target_day);
                (b as usize, b.label().to_string())
            }
        };
        groups.entry(k).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((_, group), rs)| {
            let col = |f: fn(&MetricRow) -> f64| Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Summary {
                group,
                n: rs.len(),
                dsc: col(|r| r.dsc),
                rvd: col(|r| r.rvd),
                ssim: col(|r| r.ssim),
                psnr: col(|r| r.psnr),
                mse: col(|r| r.mse),
            }
        })
        .collect())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes one row per evaluated prediction.
pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["case_id", "slice_id", "target_day", "treatment", "dsc", "rvd", "ssim", "psnr", "mse"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.case_id.clone(),
            r.slice_id.to_string(),
            r.target_day.to_string(),
            r.treatment.name().to_string(),
            r.dsc.to_string(),
            r.rvd.to_string(),
            r.ssim.to_string(),
            r.psnr.to_string(),
            r.mse.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes grouped summaries; the first line records the mask threshold.
pub fn write_summary(path: &Path, key: GroupKey, threshold: f64, summaries: &[Summary]) -> Result<()> {
    let mut buf = format!("# threshold={threshold}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec![key.name().to_string(), "n".into()];
        for m in ["dsc", "rvd", "ssim", "psnr", "mse"] {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for s in summaries {
            let mut rec = vec![s.group.clone(), s.n.to_string()];
            for st in [s.dsc, s.rvd, s.ssim, s.psnr, s.mse] {
                rec.push(st.mean.to_string());
                rec.push(st.std.to_string());
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    crate::data::tgv::write_atomic(path, &buf)
}

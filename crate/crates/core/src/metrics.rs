//! Forecast verification scores on mm/h grids.
//!
//! Scores that can have a zero denominator return `None` ("undefined") instead
//! of failing, so a batch evaluation never aborts on a dry scene.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, ArrayView3, Zip};

use crate::{config_check, contract, Error, Result};

/// Binary event definitions used in the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Band {
    /// Light or no rain: value ≤ 2 mm/h.
    Light,
    /// Exceedance: value > threshold.
    Above(f64),
}

impl Band {
    pub const REPORT: [Band; 4] = [
        Band::Light,
        Band::Above(2.0),
        Band::Above(4.0),
        Band::Above(8.0),
    ];

    pub fn event(&self, value: f64) -> bool {
        match *self {
            Band::Light => value <= 2.0,
            Band::Above(t) => value > t,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Band::Light => f.write_str("0-2"),
            Band::Above(t) => write!(f, ">{t}"),
        }
    }
}

/// `field > threshold` elementwise.
pub fn binarize(field: ArrayView2<'_, f64>, threshold: f64) -> Array2<bool> {
    field.mapv(|v| v > threshold)
}

pub fn band_mask(field: ArrayView2<'_, f64>, band: Band) -> Array2<bool> {
    field.mapv(|v| band.event(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(
    pred: ArrayView2<'_, bool>,
    obs: ArrayView2<'_, bool>,
) -> Result<ConfusionCounts> {
    contract!(
        pred.dim() == obs.dim(),
        "mask shapes {:?} and {:?} differ",
        pred.dim(),
        obs.dim()
    );
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(obs).for_each(|&p, &o| match (p, o) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// TP / (TP + FP + FN).
pub fn csi(c: &ConfusionCounts) -> Option<f64> {
    let den = c.tp + c.fp + c.fn_;
    (den > 0).then(|| c.tp as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HssMode {
    /// 2(TP·TN − FN·FP) / [(TP+FN)(FN+TN) + (TP+FP)(FP+TN)]
    #[default]
    Standard,
    /// (TP·TN − FN·FP) / [(TP+TN)(FN+TN) + (TP+FP)(FP+TN)]; a perfect
    /// forecast does not score 1 under this form.
    Paper,
}

impl FromStr for HssMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(HssMode::Standard),
            "paper" => Ok(HssMode::Paper),
            other => Err(Error::Config(format!(
                "unknown hss mode `{other}` (expected standard|paper)"
            ))),
        }
    }
}

impl fmt::Display for HssMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HssMode::Standard => "standard",
            HssMode::Paper => "paper",
        })
    }
}

pub fn hss(c: &ConfusionCounts, mode: HssMode) -> Option<f64> {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let num = tp * tn - fn_ * fp;
    let (num, den) = match mode {
        HssMode::Standard => (2.0 * num, (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn)),
        HssMode::Paper => (num, (tp + tn) * (fn_ + tn) + (tp + fp) * (fp + tn)),
    };
    (den != 0.0).then(|| num / den)
}

/// Fraction of events in the `n`×`n` window around each cell. Windows are
/// truncated at the border and averaged over the cells they cover.
pub fn fractions(mask: ArrayView2<'_, bool>, n: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let r = n / 2;
    // Summed-area table of event counts.
    let mut sat = Array2::<u64>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            sat[[i + 1, j + 1]] =
                mask[[i, j]] as u64 + sat[[i, j + 1]] + sat[[i + 1, j]] - sat[[i, j]];
        }
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
        let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
        let count = sat[[i1, j1]] + sat[[i0, j0]] - sat[[i0, j1]] - sat[[i1, j0]];
        count as f64 / ((i1 - i0) * (j1 - j0)) as f64
    })
}

/// Fractions skill score of `pred` against `obs` for events `> threshold`.
pub fn fss(
    pred: ArrayView2<'_, f64>,
    obs: ArrayView2<'_, f64>,
    threshold: f64,
    n: usize,
) -> Result<Option<f64>> {
    fss_band(pred, obs, Band::Above(threshold), n)
}

pub fn fss_band(
    pred: ArrayView2<'_, f64>,
    obs: ArrayView2<'_, f64>,
    band: Band,
    n: usize,
) -> Result<Option<f64>> {
    check_n(n)?;
    contract!(
        pred.dim() == obs.dim(),
        "field shapes {:?} and {:?} differ",
        pred.dim(),
        obs.dim()
    );
    let mut sums = FssSums::default();
    sums.accumulate(&band_mask(pred, band), &band_mask(obs, band), n);
    Ok(sums.score())
}

fn check_n(n: usize) -> Result<()> {
    config_check!(
        n >= 1 && n % 2 == 1,
        "FSS neighbourhood must be odd and positive, got {n}"
    );
    Ok(())
}

/// Sums of (P_f − P_o)², P_f² and P_o² over all cells, in row-major order.
#[derive(Debug, Clone, Copy, Default)]
struct FssSums {
    diff: f64,
    pred: f64,
    obs: f64,
    cells: usize,
}

impl FssSums {
    fn accumulate(&mut self, pred: &Array2<bool>, obs: &Array2<bool>, n: usize) {
        let pf = fractions(pred.view(), n);
        let po = fractions(obs.view(), n);
        for (f, o) in pf.iter().zip(po.iter()) {
            self.diff += (f - o) * (f - o);
            self.pred += f * f;
            self.obs += o * o;
        }
        self.cells += pf.len();
    }

    /// 1 − MSE(n) / MSE_ref with MSE_ref = mean(P_f²) + mean(P_o²).
    fn score(&self) -> Option<f64> {
        let n = self.cells as f64;
        let mse = self.diff / n;
        let reference = self.pred / n + self.obs / n;
        (reference > 0.0).then(|| 1.0 - mse / reference)
    }
}

/// Mean squared difference.
pub fn mse_metric(pred: ArrayView2<'_, f64>, obs: ArrayView2<'_, f64>) -> Result<f64> {
    contract!(
        pred.dim() == obs.dim(),
        "field shapes {:?} and {:?} differ",
        pred.dim(),
        obs.dim()
    );
    let mut sum = 0.0;
    for (p, o) in pred.iter().zip(obs.iter()) {
        sum += (p - o) * (p - o);
    }
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandScores {
    pub band: Band,
    pub counts: ConfusionCounts,
    pub csi: Option<f64>,
    pub hss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillReport {
    pub bands: Vec<BandScores>,
    pub hss_mode: HssMode,
    pub fss_band: Band,
    pub fss_n: usize,
    pub fss: Option<f64>,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub fss_n: usize,
    pub fss_threshold: f64,
    pub hss_mode: HssMode,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            fss_n: 9,
            fss_threshold: 2.0,
            hss_mode: HssMode::Standard,
        }
    }
}

/// Scores a `(frames, H, W)` forecast against observations. Confusion counts,
/// FSS sums and squared errors are pooled over every frame and pixel.
pub fn evaluate_report(
    pred: ArrayView3<'_, f64>,
    obs: ArrayView3<'_, f64>,
    opts: &ReportOptions,
) -> Result<SkillReport> {
    check_n(opts.fss_n)?;
    contract!(
        pred.dim() == obs.dim(),
        "forecast {:?} and observation {:?} differ in shape",
        pred.dim(),
        obs.dim()
    );
    contract!(pred.len() > 0, "cannot score an empty forecast");
    let fss_band = Band::Above(opts.fss_threshold);
    let mut counts = [ConfusionCounts::default(); 4];
    let mut sums = FssSums::default();
    let mut sq = 0.0;
    for (p, o) in pred.outer_iter().zip(obs.outer_iter()) {
        for (c, band) in counts.iter_mut().zip(Band::REPORT) {
            *c = *c + confusion(band_mask(p, band).view(), band_mask(o, band).view())?;
        }
        sums.accumulate(&band_mask(p, fss_band), &band_mask(o, fss_band), opts.fss_n);
        for (a, b) in p.iter().zip(o.iter()) {
            sq += (a - b) * (a - b);
        }
    }
    let bands = counts
        .iter()
        .zip(Band::REPORT)
        .map(|(c, band)| BandScores {
            band,
            counts: *c,
            csi: csi(c),
            hss: hss(c, opts.hss_mode),
        })
        .collect();
    Ok(SkillReport {
        bands,
        hss_mode: opts.hss_mode,
        fss_band,
        fss_n: opts.fss_n,
        fss: sums.score(),
        mse: sq / pred.len() as f64,
    })
}

/// `"undefined"` for `None`, otherwise six decimals.
pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "undefined".to_string(),
    }
}

impl SkillReport {
    pub fn rows(&self) -> Vec<(String, String, Option<f64>)> {
        let mut rows = Vec::new();
        for b in &self.bands {
            rows.push(("csi".to_string(), b.band.to_string(), b.csi));
        }
        for b in &self.bands {
            rows.push(("hss".to_string(), b.band.to_string(), b.hss));
        }
        rows.push(("fss".to_string(), self.fss_band.to_string(), self.fss));
        rows.push(("mse".to_string(), "all".to_string(), Some(self.mse)));
        rows
    }

    /// CSV with header `metric,band,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,band,value\n");
        for (metric, band, value) in self.rows() {
            out.push_str(&format!("{metric},{band},{}\n", format_value(value)));
        }
        out
    }
}

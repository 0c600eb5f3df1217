//! Periodogram band powers and ERD/ERS indices.

use std::fmt::Write as _;
use std::ops::Range;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("signal has {0} samples, need at least 8")]
    TooShort(usize),
    #[error("sampling rate must be positive and finite, got {0}")]
    SampleRate(f64),
    #[error("band {name} [{low}, {high}] Hz is invalid for Nyquist {nyquist} Hz")]
    InvalidBand { name: String, low: f64, high: f64, nyquist: f64 },
    #[error("band {name} [{low}, {high}] Hz contains no frequency bin at resolution {resolution} Hz")]
    EmptyBand { name: String, low: f64, high: f64, resolution: f64 },
    #[error("baseline power must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("window {start}..{end} is invalid for {len} samples")]
    Window { start: usize, end: usize, len: usize },
    #[error("signal contains non-finite samples")]
    NonFinite,
    #[error("{0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

impl BandDefinition {
    pub fn new(name: &str, low: f64, high: f64) -> Self {
        Self { name: name.to_string(), low, high }
    }

    pub fn delta_theta() -> Self {
        Self::new("delta_theta", 1.0, 7.0)
    }

    pub fn alpha() -> Self {
        Self::new("alpha", 8.0, 12.0)
    }

    pub fn beta() -> Self {
        Self::new("beta", 13.0, 30.0)
    }

    pub fn gamma() -> Self {
        Self::new("gamma", 31.0, 45.0)
    }

    /// Sensorimotor band used as the ERD/ERS reference.
    pub fn mu_beta() -> Self {
        Self::new("mu_beta", 8.0, 30.0)
    }

    /// The four rhythm bands used for node features, low to high.
    pub fn rhythms() -> [Self; 4] {
        [Self::delta_theta(), Self::alpha(), Self::beta(), Self::gamma()]
    }

    pub fn fits(&self, fs: f64) -> bool {
        0.0 < self.low && self.low < self.high && self.high < fs / 2.0
    }

    fn check(&self, fs: f64) -> Result<(), DspError> {
        if self.fits(fs) {
            Ok(())
        } else {
            Err(DspError::InvalidBand { name: self.name.clone(), low: self.low, high: self.high, nyquist: fs / 2.0 })
        }
    }
}

/// One-sided power spectrum; `power` sums to the signal variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub resolution: f64,
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.resolution
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Sum of bins whose centre frequency lies in `[low, high]`.
    pub fn band(&self, band: &BandDefinition) -> Result<f64, DspError> {
        let mut total = 0.0;
        let mut any = false;
        for (k, p) in self.power.iter().enumerate() {
            let f = self.frequency(k);
            if f >= band.low && f <= band.high {
                total += p;
                any = true;
            }
        }
        if !any {
            return Err(DspError::EmptyBand { name: band.name.clone(), low: band.low, high: band.high, resolution: self.resolution });
        }
        Ok(total)
    }
}

fn check_fs(fs: f64) -> Result<(), DspError> {
    if fs > 0.0 && fs.is_finite() {
        Ok(())
    } else {
        Err(DspError::SampleRate(fs))
    }
}

/// Rectangular-window periodogram of the mean-removed signal: bin `k` holds
/// `|X_k|² / T²`, doubled for bins with a negative-frequency twin, at
/// resolution `fs / T`.
pub fn power_spectrum(signal: &[f64], fs: f64) -> Result<Spectrum, DspError> {
    check_fs(fs)?;
    let t = signal.len();
    if t < 8 {
        return Err(DspError::TooShort(t));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(DspError::NonFinite);
    }
    let mean = signal.iter().sum::<f64>() / t as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);
    let norm = 1.0 / (t as f64 * t as f64);
    let half = t / 2;
    let power = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() * norm;
            if k == 0 || (t % 2 == 0 && k == half) {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    Ok(Spectrum { resolution: fs / t as f64, power })
}

pub fn band_power(signal: &[f64], fs: f64, band: &BandDefinition) -> Result<f64, DspError> {
    band.check(fs)?;
    power_spectrum(signal, fs)?.band(band)
}

/// `(A − R) / R × 100`: negative values are desynchronization.
pub fn erd_ers_index(task_power: f64, baseline_power: f64) -> Result<f64, DspError> {
    if !(baseline_power > 0.0) {
        return Err(DspError::NonPositiveBaseline(baseline_power));
    }
    Ok((task_power - baseline_power) / baseline_power * 100.0)
}

pub fn variance(signal: &[f64]) -> f64 {
    if signal.is_empty() {
        return 0.0;
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErdErsReport {
    pub channels: Vec<String>,
    pub index_percent: Vec<f64>,
    pub task: Range<usize>,
    pub baseline: Range<usize>,
    pub band: BandDefinition,
}

impl ErdErsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,index_percent,band_low,band_high\n");
        for (c, v) in self.channels.iter().zip(&self.index_percent) {
            let _ = writeln!(out, "{},{},{},{}", c, v, self.band.low, self.band.high);
        }
        out
    }
}

fn window<'a>(row: &'a [f64], w: &Range<usize>) -> Result<&'a [f64], DspError> {
    if w.start >= w.end || w.end > row.len() {
        return Err(DspError::Window { start: w.start, end: w.end, len: row.len() });
    }
    Ok(&row[w.clone()])
}

/// ERD/ERS index per channel of a `[C, T]` row-major signal, comparing band
/// power in the task window against the baseline window.
pub fn erd_report(
    signal: &[f64],
    channels: &[String],
    fs: f64,
    task: Range<usize>,
    baseline: Range<usize>,
    band: &BandDefinition,
) -> Result<ErdErsReport, DspError> {
    erd_report_averaged(&[signal], channels, fs, task, baseline, band)
}

/// As [`erd_report`], with band power averaged over several trials of equal
/// shape before the index is taken.
pub fn erd_report_averaged(
    signals: &[&[f64]],
    channels: &[String],
    fs: f64,
    task: Range<usize>,
    baseline: Range<usize>,
    band: &BandDefinition,
) -> Result<ErdErsReport, DspError> {
    band.check(fs)?;
    let c = channels.len();
    let len = signals.first().map_or(0, |s| s.len());
    if signals.is_empty() || signals.iter().any(|s| s.len() != len) {
        return Err(DspError::Shape(format!("need one or more trials of equal length, got {}", signals.len())));
    }
    let t = if c == 0 { 0 } else { len / c };
    if t * c != len {
        return Err(DspError::Shape(format!("{len} samples do not split into {c} channels")));
    }
    let mut index = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut a, mut r) = (0.0, 0.0);
        for s in signals {
            let row = &s[ch * t..(ch + 1) * t];
            a += band_power(window(row, &task)?, fs, band)?;
            r += band_power(window(row, &baseline)?, fs, band)?;
        }
        index.push(erd_ers_index(a, r)?);
    }
    Ok(ErdErsReport { channels: channels.to_vec(), index_percent: index, task, baseline, band: band.clone() })
}

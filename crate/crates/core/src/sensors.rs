//! Vital-sign sensing: pulse oximetry, heart rate from the pulsatile (AC)
//! component, and thermistor temperature, plus the inverse models used by the
//! simulator to produce raw signals from latent truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SensorError {
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("no pulse detected ({peaks} peaks found)")]
    NoPulse { peaks: usize },
    #[error("ADC reading {0} outside (0, 1023)")]
    AdcOutOfRange(f64),
    #[error("Steinhart-Hart denominator not positive for R = {0} ohm")]
    CoefficientDomain(f64),
    #[error("temperature {0} F outside thermistor validity range")]
    TemperatureOutOfRange(f64),
    #[error("invalid truth: {0}")]
    InvalidTruth(String),
}

pub type Result<T> = std::result::Result<T, SensorError>;

/// One pulse-oximeter frame: AC and DC light-intensity components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpgFrame {
    pub ac_red: f64,
    pub dc_red: f64,
    pub ac_ir: f64,
    pub dc_ir: f64,
}

impl PpgFrame {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ac_red, self.dc_red, self.ac_ir, self.dc_ir];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SensorError::InvalidSignal("non-finite component".into()));
        }
        if self.dc_red <= 0.0 || self.dc_ir <= 0.0 {
            return Err(SensorError::InvalidSignal("DC component must be positive".into()));
        }
        if self.ac_red < 0.0 || self.ac_ir < 0.0 {
            return Err(SensorError::InvalidSignal("AC component must be non-negative".into()));
        }
        if self.ac_red >= self.dc_red || self.ac_ir >= self.dc_ir {
            return Err(SensorError::InvalidSignal("AC component must be below DC".into()));
        }
        Ok(())
    }
}

/// Molar absorptivities of oxygenated hemoglobin, L/(mol cm), and optical path depth in cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticalConstants {
    pub eps_red: f64,
    pub eps_ir: f64,
    pub path_depth: f64,
}

impl Default for OpticalConstants {
    fn default() -> Self {
        Self {
            eps_red: 1.5e4,
            eps_ir: 8.83e3,
            path_depth: 1.0,
        }
    }
}

impl OpticalConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_red", self.eps_red),
            ("eps_ir", self.eps_ir),
            ("path_depth", self.path_depth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SensorError::InvalidSignal(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Kelvin to Fahrenheit conversion convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureMode {
    /// `T_k * 9 / 5 + 32` applied to the Kelvin value as-is.
    Literal,
    /// Subtracts 273.15 before scaling.
    #[default]
    Corrected,
}

/// Voltage-divider thermistor with Steinhart-Hart coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermistorConfig {
    pub r_series: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub adc_max: f64,
}

impl Default for ThermistorConfig {
    fn default() -> Self {
        // Canonical 10k NTC coefficients.
        Self {
            r_series: 10_000.0,
            c1: 1.009249522e-3,
            c2: 2.378405444e-4,
            c3: 2.019202697e-7,
            adc_max: 1023.0,
        }
    }
}

impl ThermistorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_series.is_finite() && self.r_series > 0.0) {
            return Err(SensorError::InvalidSignal("r_series must be positive".into()));
        }
        if ![self.c1, self.c2, self.c3].iter().all(|c| c.is_finite()) {
            return Err(SensorError::InvalidSignal("coefficients must be finite".into()));
        }
        if self.adc_max != 1023.0 {
            return Err(SensorError::InvalidSignal("adc_max must be 1023".into()));
        }
        Ok(())
    }
}

/// One measurement of a patient's vitals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitalSigns {
    /// Beats per minute.
    pub heart_rate: f64,
    /// Percent.
    pub spo2: f64,
    /// Degrees Fahrenheit.
    pub temp_f: f64,
    /// Seconds since scenario start.
    pub timestamp: f64,
}

impl VitalSigns {
    pub fn new(heart_rate: f64, spo2: f64, temp_f: f64, timestamp: f64) -> Result<Self> {
        let v = Self {
            heart_rate,
            spo2,
            temp_f,
            timestamp,
        };
        v.validate().map_err(|e| match e {
            SensorError::InvalidTruth(m) => SensorError::InvalidSignal(m),
            other => other,
        })?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spo2 > 0.0 && self.spo2 <= 100.0) {
            return Err(SensorError::InvalidTruth(format!("spo2 {} outside (0, 100]", self.spo2)));
        }
        if !(self.heart_rate.is_finite() && self.heart_rate > 0.0) {
            return Err(SensorError::InvalidTruth(format!(
                "heart rate {} must be positive",
                self.heart_rate
            )));
        }
        if !self.temp_f.is_finite() || !self.timestamp.is_finite() {
            return Err(SensorError::InvalidTruth("non-finite field".into()));
        }
        Ok(())
    }
}

/// Ratio-metric SpO2 (percent) from the AC components of the red and infrared channels.
pub fn spo2_from_frames(frame: &PpgFrame, k: &OpticalConstants) -> Result<f64> {
    frame.validate()?;
    k.validate()?;
    let l = k.path_depth;
    let red = k.eps_red * l * frame.ac_red;
    let ir = k.eps_ir * l * frame.ac_ir;
    let denom = ir + red;
    if denom <= 0.0 {
        return Err(SensorError::InvalidSignal("no AC component on either channel".into()));
    }
    Ok(100.0 * red / denom)
}

pub fn heart_rate_from_period(period: f64) -> Result<f64> {
    if !(period.is_finite() && period > 0.0) {
        return Err(SensorError::InvalidSignal(format!("period {period} must be positive")));
    }
    Ok(60.0 / period)
}

/// Refractory window after an accepted peak, seconds.
pub const PEAK_REFRACTORY_S: f64 = 0.25;
/// Rising threshold as a fraction of the local peak-to-peak span.
pub const PEAK_THRESHOLD: f64 = 0.6;
/// Falling level that re-arms the detector.
const REARM_THRESHOLD: f64 = 0.4;
/// Half-width of the rolling min/max window, seconds. Covers one beat at 40 BPM.
const ROLLING_HALF_WINDOW_S: f64 = 1.0;

/// Mean inter-peak interval (seconds) of a pulsatile waveform.
///
/// Peaks are found by threshold crossing at 60% of the rolling peak-to-peak
/// span. After a rising crossing the detector tracks the maximum until the
/// signal falls below 40% of the span; the maximum is refined with a
/// parabolic fit. Crossings within 0.25 s of the previous peak are ignored,
/// and a peak still open at the end of the signal is discarded.
pub fn detect_ac_period(signal: &[f64], sample_rate: f64) -> Result<f64> {
    if !(sample_rate.is_finite() && sample_rate >= 50.0) {
        return Err(SensorError::InvalidSignal(format!(
            "sample rate {sample_rate} Hz below 50 Hz"
        )));
    }
    if (signal.len() as f64) < 3.0 * sample_rate {
        return Err(SensorError::InvalidSignal(format!(
            "{} samples is less than 3 s of signal",
            signal.len()
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(SensorError::InvalidSignal("non-finite sample".into()));
    }

    let n = signal.len();
    let half = (ROLLING_HALF_WINDOW_S * sample_rate).round() as usize;
    let scale = signal.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let levels: Vec<Option<(f64, f64)>> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let window = &signal[lo..hi];
            let min = window.iter().copied().fold(f64::INFINITY, f64::min);
            let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min;
            (span > 1e-9 * scale)
                .then_some((min + PEAK_THRESHOLD * span, min + REARM_THRESHOLD * span))
        })
        .collect();

    let refractory = PEAK_REFRACTORY_S * sample_rate;
    let mut peaks: Vec<f64> = Vec::new();
    // Armed once the signal sits below the rising level, so a recording
    // that starts mid-peak does not count a partial one.
    let mut armed = levels[0].is_some_and(|(rise, _)| signal[0] < rise);
    let mut i = 1;
    while i < n {
        let Some((rise, _)) = levels[i] else {
            i += 1;
            continue;
        };
        if signal[i] < rise {
            armed = true;
            i += 1;
            continue;
        }
        let clear = peaks.last().is_none_or(|&p| i as f64 - p >= refractory);
        if !(armed && clear) {
            i += 1;
            continue;
        }
        // Track the maximum until the re-arm level.
        let mut best = i;
        let mut j = i;
        let mut closed = false;
        while j < n {
            if signal[j] > signal[best] {
                best = j;
            }
            if let Some((_, rearm)) = levels[j] {
                if signal[j] < rearm {
                    closed = true;
                    break;
                }
            }
            j += 1;
        }
        if !closed {
            break;
        }
        peaks.push(refine_peak(signal, best));
        armed = true;
        i = j + 1;
    }

    if peaks.len() < 2 {
        return Err(SensorError::NoPulse { peaks: peaks.len() });
    }
    let span = peaks[peaks.len() - 1] - peaks[0];
    Ok(span / (peaks.len() - 1) as f64 / sample_rate)
}

fn refine_peak(signal: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= signal.len() {
        return i as f64;
    }
    let (a, b, c) = (signal[i - 1], signal[i], signal[i + 1]);
    let curvature = a - 2.0 * b + c;
    if curvature >= 0.0 {
        return i as f64;
    }
    let offset = 0.5 * (a - c) / curvature;
    i as f64 + offset.clamp(-0.5, 0.5)
}

/// Thermistor resistance from the divider's ADC reading.
pub fn thermistor_resistance(v_adc: f64, cfg: &ThermistorConfig) -> Result<f64> {
    if !(v_adc > 0.0 && v_adc < cfg.adc_max) {
        return Err(SensorError::AdcOutOfRange(v_adc));
    }
    Ok(cfg.r_series * (cfg.adc_max / v_adc - 1.0))
}

/// Absolute temperature (K) from thermistor resistance.
pub fn steinhart_kelvin(r2: f64, cfg: &ThermistorConfig) -> Result<f64> {
    if !(r2.is_finite() && r2 > 0.0) {
        return Err(SensorError::InvalidSignal(format!("resistance {r2} must be positive")));
    }
    let ln_r = r2.ln();
    let denom = cfg.c1 + cfg.c2 * ln_r + cfg.c3 * ln_r.powi(3);
    if !(denom > 0.0) {
        return Err(SensorError::CoefficientDomain(r2));
    }
    Ok(1.0 / denom)
}

pub const KELVIN_OFFSET: f64 = 273.15;

pub fn kelvin_to_fahrenheit(t_k: f64, mode: TemperatureMode) -> f64 {
    match mode {
        TemperatureMode::Literal => t_k * 9.0 / 5.0 + 32.0,
        TemperatureMode::Corrected => (t_k - KELVIN_OFFSET) * 9.0 / 5.0 + 32.0,
    }
}

/// Full thermistor chain: ADC count to degrees Fahrenheit.
pub fn temperature_from_adc(v_adc: f64, cfg: &ThermistorConfig, mode: TemperatureMode) -> Result<f64> {
    let r2 = thermistor_resistance(v_adc, cfg)?;
    let t_k = steinhart_kelvin(r2, cfg)?;
    Ok(kelvin_to_fahrenheit(t_k, mode))
}

/// Validity range of the default coefficients, Fahrenheit (0 to 70 C).
pub const THERMISTOR_RANGE_F: (f64, f64) = (32.0, 158.0);

/// ADC count that the corrected-mode chain maps back to `temp_f_true`.
pub fn synthesize_thermistor(temp_f_true: f64, cfg: &ThermistorConfig) -> Result<f64> {
    let (lo, hi) = THERMISTOR_RANGE_F;
    if !(temp_f_true >= lo - 1e-9 && temp_f_true <= hi + 1e-9) {
        return Err(SensorError::TemperatureOutOfRange(temp_f_true));
    }
    cfg.validate()?;
    let t_k = (temp_f_true - 32.0) * 5.0 / 9.0 + KELVIN_OFFSET;
    let ln_r = solve_steinhart_log(cfg, 1.0 / t_k)?;
    let r2 = ln_r.exp();
    Ok(cfg.adc_max / (r2 / cfg.r_series + 1.0))
}

/// Solves `c1 + c2 x + c3 x^3 = target` for `x = ln R`.
fn solve_steinhart_log(cfg: &ThermistorConfig, target: f64) -> Result<f64> {
    let f = |x: f64| cfg.c1 + cfg.c2 * x + cfg.c3 * x.powi(3) - target;
    let df = |x: f64| cfg.c2 + 3.0 * cfg.c3 * x * x;
    let mut x = if cfg.c3 > 0.0 && cfg.c2 > 0.0 {
        // Depressed cubic with p > 0 has exactly one real root (Cardano).
        let p = cfg.c2 / cfg.c3;
        let q = (cfg.c1 - target) / cfg.c3;
        let disc = (q * q / 4.0 + p.powi(3) / 27.0).sqrt();
        (-q / 2.0 + disc).cbrt() + (-q / 2.0 - disc).cbrt()
    } else if cfg.c2 != 0.0 {
        (target - cfg.c1) / cfg.c2
    } else {
        return Err(SensorError::CoefficientDomain(f64::NAN));
    };
    for _ in 0..4 {
        let d = df(x);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        x -= f(x) / d;
    }
    if !x.is_finite() {
        return Err(SensorError::CoefficientDomain(f64::NAN));
    }
    Ok(x)
}

/// Raw red and infrared intensities sampled at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PpgStream {
    pub sample_rate: f64,
    pub red: Vec<f64>,
    pub ir: Vec<f64>,
}

impl PpgStream {
    pub fn len(&self) -> usize {
        self.red.len()
    }

    pub fn is_empty(&self) -> bool {
        self.red.is_empty()
    }

    /// Reduces the stream to one frame: DC as the channel mean, AC as the
    /// sinusoid-equivalent amplitude (RMS about the mean times sqrt 2).
    pub fn frame(&self) -> Result<PpgFrame> {
        let (ac_red, dc_red) = ac_dc(&self.red)?;
        let (ac_ir, dc_ir) = ac_dc(&self.ir)?;
        Ok(PpgFrame {
            ac_red,
            dc_red,
            ac_ir,
            dc_ir,
        })
    }
}

fn ac_dc(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(SensorError::InvalidSignal("empty channel".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((var.sqrt() * std::f64::consts::SQRT_2, mean))
}

/// Shape of the synthetic photoplethysmogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpgSynthConfig {
    pub sample_rate: f64,
    pub duration_s: f64,
    pub ac_red: f64,
    pub dc_red: f64,
    pub dc_ir: f64,
}

impl Default for PpgSynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 100.0,
            duration_s: 5.0,
            ac_red: 40.0,
            dc_red: 2000.0,
            dc_ir: 2000.0,
        }
    }
}

/// Generates a raw PPG stream whose AC ratio and pulse period encode `truth`.
///
/// Noise is uniform in `±noise_level` of each channel's AC amplitude.
pub fn synthesize_ppg(
    truth: &VitalSigns,
    optics: &OpticalConstants,
    synth: &PpgSynthConfig,
    noise_level: f64,
    seed: u64,
) -> Result<PpgStream> {
    if !(truth.spo2 > 0.0 && truth.spo2 <= 100.0) {
        return Err(SensorError::InvalidTruth(format!("spo2 {} outside (0, 100]", truth.spo2)));
    }
    truth.validate()?;
    optics.validate()?;
    if !(0.0..0.2).contains(&noise_level) {
        return Err(SensorError::InvalidTruth(format!("noise level {noise_level} outside [0, 0.2)")));
    }
    let s = truth.spo2 / 100.0;
    // Inverse of the ratio-metric formula: ac_ir / ac_red = eps_red (1 - s) / (eps_ir s).
    let ac_red = synth.ac_red;
    let ac_ir = ac_red * optics.eps_red * (1.0 - s) / (optics.eps_ir * s);
    if ac_ir >= synth.dc_ir {
        return Err(SensorError::InvalidTruth(format!(
            "spo2 {} needs an IR AC component above DC",
            truth.spo2
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let period = 60.0 / truth.heart_rate;
    let n = (synth.duration_s * synth.sample_rate).round() as usize;
    let mut red = Vec::with_capacity(n);
    let mut ir = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / synth.sample_rate;
        let pulse = (std::f64::consts::TAU * t / period + phase0).sin();
        let (nr, ni) = if noise_level > 0.0 {
            (
                rng.random_range(-1.0..=1.0) * noise_level * ac_red,
                rng.random_range(-1.0..=1.0) * noise_level * ac_ir,
            )
        } else {
            (0.0, 0.0)
        };
        red.push(synth.dc_red + ac_red * pulse + nr);
        ir.push(synth.dc_ir + ac_ir * pulse + ni);
    }
    Ok(PpgStream {
        sample_rate: synth.sample_rate,
        red,
        ir,
    })
}

/// Everything needed to turn latent truth into a measured [`VitalSigns`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSuite {
    pub optics: OpticalConstants,
    pub thermistor: ThermistorConfig,
    pub ppg: PpgSynthConfig,
    pub temperature_mode: TemperatureMode,
    pub noise_level: f64,
}

/// Synthesizes raw signals for `truth` and runs the full conversion pipeline.
pub fn measure_vitals(truth: &VitalSigns, suite: &SensorSuite, seed: u64) -> Result<VitalSigns> {
    let stream = synthesize_ppg(truth, &suite.optics, &suite.ppg, suite.noise_level, seed)?;
    let frame = stream.frame()?;
    let spo2 = spo2_from_frames(&frame, &suite.optics)?;
    let period = detect_ac_period(&stream.red, stream.sample_rate)?;
    let heart_rate = heart_rate_from_period(period)?;
    let adc = synthesize_thermistor(truth.temp_f, &suite.thermistor)?;
    let temp_f = temperature_from_adc(adc, &suite.thermistor, suite.temperature_mode)?;
    VitalSigns::new(heart_rate, spo2, temp_f, truth.timestamp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn frame(ac_red: f64, ac_ir: f64) -> PpgFrame {
        PpgFrame {
            ac_red,
            dc_red: 100.0,
            ac_ir,
            dc_ir: 100.0,
        }
    }

    #[test]
    fn spo2_equal_ac() {
        // 100 * 15000 / (8830 + 15000)
        let expected = 1_500_000.0 / 23_830.0;
        let got = spo2_from_frames(&frame(1.0, 1.0), &OpticalConstants::default()).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert!((got - 62.946).abs() < 1e-3);
    }

    #[test]
    fn spo2_limits() {
        let k = OpticalConstants::default();
        assert_eq!(spo2_from_frames(&frame(1.0, 0.0), &k).unwrap(), 100.0);
        assert_eq!(spo2_from_frames(&frame(0.0, 1.0), &k).unwrap(), 0.0);
        assert!(matches!(
            spo2_from_frames(&frame(0.0, 0.0), &k),
            Err(SensorError::InvalidSignal(_))
        ));
    }

    #[test]
    fn spo2_rejects_bad_frames() {
        let k = OpticalConstants::default();
        let mut f = frame(1.0, 1.0);
        f.dc_red = 0.0;
        assert!(spo2_from_frames(&f, &k).is_err());
        assert!(spo2_from_frames(&frame(150.0, 1.0), &k).is_err());
        assert!(spo2_from_frames(&frame(-1.0, 1.0), &k).is_err());
    }

    #[test]
    fn heart_rate_examples() {
        assert_eq!(heart_rate_from_period(1.0).unwrap(), 60.0);
        assert_eq!(heart_rate_from_period(0.5).unwrap(), 120.0);
        assert_relative_eq!(heart_rate_from_period(0.8).unwrap(), 75.0, epsilon = 1e-12);
        assert!(heart_rate_from_period(0.0).is_err());
        assert!(heart_rate_from_period(-1.0).is_err());
    }

    fn sinusoid(freq: f64, fs: f64, secs: f64) -> Vec<f64> {
        (0..(fs * secs) as usize)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / fs + 0.3).sin())
            .collect()
    }

    #[test]
    fn detects_sinusoid_period() {
        let p = detect_ac_period(&sinusoid(1.25, 100.0, 5.0), 100.0).unwrap();
        assert!((p - 0.8).abs() <= 0.01, "{p}");
    }

    #[test]
    fn detects_noisy_sinusoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let signal: Vec<f64> = sinusoid(2.0, 100.0, 5.0)
            .into_iter()
            .map(|v| v + rng.random_range(-0.05..=0.05))
            .collect();
        let p = detect_ac_period(&signal, 100.0).unwrap();
        assert!((p - 0.5).abs() <= 0.02, "{p}");
    }

    #[test]
    fn threshold_dropping_past_the_signal_still_counts_the_beat() {
        // In this stream the rolling rise level drops below the signal
        // between two samples on one upstroke.
        let truth = VitalSigns::new(107.0, 97.0, 98.6, 0.0).unwrap();
        let s = synthesize_ppg(&truth, &OpticalConstants::default(), &PpgSynthConfig::default(), 0.02, 750).unwrap();
        let p = detect_ac_period(&s.red, 100.0).unwrap();
        assert!((60.0 / p - 107.0).abs() < 2.0, "{}", 60.0 / p);
    }

    #[test]
    fn constant_signal_has_no_pulse() {
        let signal = vec![512.0; 500];
        assert!(matches!(
            detect_ac_period(&signal, 100.0),
            Err(SensorError::NoPulse { .. })
        ));
    }

    #[test]
    fn detect_preconditions() {
        assert!(detect_ac_period(&sinusoid(1.0, 100.0, 2.0), 100.0).is_err());
        assert!(detect_ac_period(&sinusoid(1.0, 40.0, 5.0), 40.0).is_err());
    }

    #[test]
    fn thermistor_divider() {
        let cfg = ThermistorConfig::default();
        assert_relative_eq!(thermistor_resistance(511.5, &cfg).unwrap(), 10_000.0, epsilon = 1e-9);
        assert_relative_eq!(thermistor_resistance(341.0, &cfg).unwrap(), 20_000.0, epsilon = 1e-9);
        assert!(thermistor_resistance(1023.0, &cfg).is_err());
        assert!(thermistor_resistance(0.0, &cfg).is_err());
    }

    #[test]
    fn steinhart_room_temperature() {
        let t = steinhart_kelvin(10_000.0, &ThermistorConfig::default()).unwrap();
        assert!((t - 298.15).abs() < 0.5, "{t}");
    }

    #[test]
    fn steinhart_is_ntc() {
        let cfg = ThermistorConfig::default();
        let lo = steinhart_kelvin(3_000.0, &cfg).unwrap();
        let hi = steinhart_kelvin(30_000.0, &cfg).unwrap();
        assert!(lo > hi);
    }

    #[test]
    fn steinhart_at_3k_matches_log10_route() {
        // Same polynomial evaluated through log10 and a change of base.
        let cfg = ThermistorConfig::default();
        let ln_r = 3_000f64.log10() * std::f64::consts::LN_10;
        let mut acc = cfg.c3;
        acc *= ln_r; // c3 x
        acc *= ln_r; // c3 x^2
        acc = (acc + cfg.c2) * ln_r + cfg.c1; // c3 x^3 + c2 x + c1
        let expected = acc.recip();
        assert_relative_eq!(
            steinhart_kelvin(3_000.0, &cfg).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn steinhart_domain_error() {
        let cfg = ThermistorConfig {
            c1: -1.0,
            ..ThermistorConfig::default()
        };
        assert!(matches!(
            steinhart_kelvin(10_000.0, &cfg),
            Err(SensorError::CoefficientDomain(_))
        ));
    }

    #[test]
    fn fahrenheit_modes() {
        assert_relative_eq!(
            kelvin_to_fahrenheit(273.15, TemperatureMode::Literal),
            523.67,
            epsilon = 1e-9
        );
        assert_eq!(kelvin_to_fahrenheit(0.0, TemperatureMode::Literal), 32.0);
        assert_relative_eq!(
            kelvin_to_fahrenheit(273.15, TemperatureMode::Corrected),
            32.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn thermistor_round_trip_77f() {
        let cfg = ThermistorConfig::default();
        let adc = synthesize_thermistor(77.0, &cfg).unwrap();
        let back = temperature_from_adc(adc, &cfg, TemperatureMode::Corrected).unwrap();
        assert!((back - 77.0).abs() <= 0.2);
    }

    #[test]
    fn thermistor_boundary_count_inside_range() {
        let cfg = ThermistorConfig::default();
        let adc = synthesize_thermistor(32.0, &cfg).unwrap();
        assert!(adc > 0.0 && adc < 1023.0);
        assert!(synthesize_thermistor(20.0, &cfg).is_err());
        assert!(synthesize_thermistor(170.0, &cfg).is_err());
    }

    fn truth(hr: f64, spo2: f64) -> VitalSigns {
        VitalSigns::new(hr, spo2, 98.6, 0.0).unwrap()
    }

    #[test]
    fn ppg_round_trip_noiseless() {
        let k = OpticalConstants::default();
        let target = 1_500_000.0 / 23_830.0;
        let stream = synthesize_ppg(&truth(60.0, target), &k, &PpgSynthConfig::default(), 0.0, 1).unwrap();
        let spo2 = spo2_from_frames(&stream.frame().unwrap(), &k).unwrap();
        assert!((spo2 - target).abs() < 1e-9);
        let period = detect_ac_period(&stream.red, stream.sample_rate).unwrap();
        assert!((period - 1.0).abs() <= 0.01);
    }

    #[test]
    fn ppg_round_trip_noisy() {
        let suite = SensorSuite {
            noise_level: 0.02,
            ..SensorSuite::default()
        };
        let measured = measure_vitals(&truth(75.0, 97.0), &suite, 99).unwrap();
        assert!((measured.heart_rate - 75.0).abs() <= 2.0);
        assert!((measured.spo2 - 97.0).abs() <= 1.0);
    }

    #[test]
    fn ppg_is_deterministic() {
        let k = OpticalConstants::default();
        let cfg = PpgSynthConfig::default();
        let a = synthesize_ppg(&truth(75.0, 97.0), &k, &cfg, 0.05, 3).unwrap();
        let b = synthesize_ppg(&truth(75.0, 97.0), &k, &cfg, 0.05, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ppg_rejects_invalid_truth() {
        let bad = VitalSigns {
            heart_rate: 70.0,
            spo2: 101.0,
            temp_f: 98.6,
            timestamp: 0.0,
        };
        let r = synthesize_ppg(&bad, &OpticalConstants::default(), &PpgSynthConfig::default(), 0.0, 0);
        assert!(matches!(r, Err(SensorError::InvalidTruth(_))));
    }
}

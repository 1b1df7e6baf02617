//! Recorded IQ captures to GPS-located path-gain traces.
//!
//! A capture is raw interleaved little-endian `f32` I/Q pairs with a JSON
//! sidecar at `<capture path>.json`:
//!
//! ```json
//! {"sample_rate_hz": 32766, "center_freq_hz": 910e6, "start_unix_s": 1700000000}
//! ```
//!
//! GPS logs are CSV with header `t_unix_s,lat_deg,lon_deg`; traces are
//! written as CSV with header `t_unix_s,lat_deg,lon_deg,pg_db`.

use std::path::{Path, PathBuf};

use num_complex::{Complex32, Complex64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::calib::{ota_received_power, path_gain_ota, CalibrationParams};
use super::dsp::{bpsk, correlate_cir, received_power_db, resample_periodic, PeakDetector, Tap};
use super::lfsr::glfsr14;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    pub start_unix_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t_unix_s: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
}

/// One second of sounding output.
#[derive(Debug, Clone, PartialEq)]
pub struct CirFrame {
    pub taps: Vec<Tap>,
    pub t_second: i64,
    pub sample_rate_hz: f64,
    pub position: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t_unix_s: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub pg_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathGainTrace {
    pub points: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SounderConfig {
    pub chip_rate_hz: f64,
    pub lfsr_seed: u16,
    pub calibration: CalibrationParams,
    pub detector: PeakDetector,
    /// Largest allowed gap between a segment timestamp and its GPS fix.
    pub gps_tolerance_s: f64,
}

impl SounderConfig {
    pub fn new(chip_rate_hz: f64, calibration: CalibrationParams) -> Self {
        Self {
            chip_rate_hz,
            lfsr_seed: 1,
            calibration,
            detector: PeakDetector::default(),
            gps_tolerance_s: 0.5,
        }
    }

    /// BPSK reference at the receiver sample rate, one codeword period.
    pub fn reference(&self, sample_rate_hz: f64) -> Result<Vec<f64>> {
        let (up, down) = rate_ratio(sample_rate_hz, self.chip_rate_hz)?;
        let chips = bpsk(&glfsr14(self.lfsr_seed)?.bits);
        resample_periodic(&chips, up, down)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Integer ratio `sample_rate / chip_rate`; both rates must be whole Hz.
fn rate_ratio(sample_rate_hz: f64, chip_rate_hz: f64) -> Result<(usize, usize)> {
    let whole = |v: f64, name: &str| -> Result<u64> {
        if v > 0.0 && v.fract() == 0.0 && v < 1e15 {
            Ok(v as u64)
        } else {
            Err(Error::domain(format!("{name} must be a positive whole number of Hz, got {v}")))
        }
    };
    let (s, c) = (whole(sample_rate_hz, "sample rate")?, whole(chip_rate_hz, "chip rate")?);
    let g = gcd(s, c);
    Ok(((s / g) as usize, (c / g) as usize))
}

pub fn sidecar_path(iq_path: &Path) -> PathBuf {
    let mut s = iq_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_capture(iq_path: impl AsRef<Path>) -> Result<(CaptureMeta, Vec<Complex64>)> {
    let iq_path = iq_path.as_ref();
    let bytes = std::fs::read(iq_path).map_err(|e| Error::io(iq_path, e))?;
    let side = sidecar_path(iq_path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CaptureMeta = serde_json::from_str(&text)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Truncated {
            path: iq_path.to_path_buf(),
            msg: format!("{} bytes is not a whole number of I/Q pairs", bytes.len()),
        });
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let i = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let q = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(f64::from(i), f64::from(q))
        })
        .collect();
    Ok((meta, samples))
}

pub fn write_capture(iq_path: impl AsRef<Path>, meta: &CaptureMeta, samples: &[Complex32]) -> Result<()> {
    let iq_path = iq_path.as_ref();
    let mut bytes = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        bytes.extend_from_slice(&s.re.to_le_bytes());
        bytes.extend_from_slice(&s.im.to_le_bytes());
    }
    std::fs::write(iq_path, bytes).map_err(|e| Error::io(iq_path, e))?;
    let side = sidecar_path(iq_path);
    std::fs::write(&side, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

pub fn read_gps(path: impl AsRef<Path>) -> Result<Vec<GpsFix>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn write_gps(path: impl AsRef<Path>, fixes: &[GpsFix]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for f in fixes {
        w.serialize(f).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace(path: impl AsRef<Path>, trace: &PathGainTrace) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(["t_unix_s", "lat_deg", "lon_deg", "pg_db"])
        .map_err(|e| csv_err(path, e))?;
    for p in &trace.points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<PathGainTrace> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let points = csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect::<Result<Vec<TracePoint>>>()?;
    Ok(PathGainTrace { points })
}

/// Nearest fix within `tolerance` seconds of `t`.
fn nearest_fix(fixes: &[GpsFix], t: f64, tolerance: f64) -> Option<&GpsFix> {
    fixes
        .iter()
        .map(|f| ((f.t_unix_s - t).abs(), f))
        .filter(|(dt, _)| *dt <= tolerance)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, f)| f)
}

/// Correlates and detects one block; `None` when no significant peak is
/// found.
pub fn sound_block(block: &[Complex64], reference: &[f64], detector: &PeakDetector) -> Result<Option<Vec<Tap>>> {
    let cir = correlate_cir(block, reference)?;
    let taps = detector.detect(&cir)?;
    Ok((!taps.is_empty()).then_some(taps))
}

/// Splits a capture into whole seconds and sounds each one.
pub fn sound_capture(meta: &CaptureMeta, samples: &[Complex64], cfg: &SounderConfig) -> Result<Vec<CirFrame>> {
    let per_second = meta.sample_rate_hz.floor() as usize;
    let reference = cfg.reference(meta.sample_rate_hz)?;
    if per_second < reference.len() {
        return Err(Error::domain(format!(
            "one second ({per_second} samples) is shorter than one codeword ({})",
            reference.len()
        )));
    }
    let seconds = samples.len() / per_second;
    let frames: Vec<Option<CirFrame>> = (0..seconds)
        .into_par_iter()
        .map(|s| -> Result<Option<CirFrame>> {
            let block = &samples[s * per_second..(s + 1) * per_second];
            Ok(sound_block(block, &reference, &cfg.detector)?.map(|taps| CirFrame {
                taps,
                t_second: s as i64,
                sample_rate_hz: meta.sample_rate_hz,
                position: None,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(frames.into_iter().flatten().collect())
}

/// Calibrated trace from in-memory capture data.
pub fn trace_from_samples(
    meta: &CaptureMeta,
    samples: &[Complex64],
    gps: &[GpsFix],
    cfg: &SounderConfig,
) -> Result<PathGainTrace> {
    cfg.calibration.validate()?;
    let mut points = Vec::new();
    for frame in sound_capture(meta, samples, cfg)? {
        let t = meta.start_unix_s + frame.t_second as f64;
        let Some(fix) = nearest_fix(gps, t, cfg.gps_tolerance_s) else {
            continue;
        };
        let p_rx = received_power_db(&frame.taps)?;
        points.push(TracePoint {
            t_unix_s: t,
            lat_deg: fix.lat_deg,
            lon_deg: fix.lon_deg,
            pg_db: path_gain_ota(p_rx, &cfg.calibration),
        });
    }
    if points.is_empty() {
        return Err(Error::NoUsableSeconds);
    }
    Ok(PathGainTrace { points })
}

/// Processes a capture file and its GPS log into a calibrated trace.
pub fn process_capture(
    iq_path: impl AsRef<Path>,
    gps_path: impl AsRef<Path>,
    cfg: &SounderConfig,
) -> Result<PathGainTrace> {
    let (meta, samples) = read_capture(iq_path)?;
    let gps = read_gps(gps_path)?;
    trace_from_samples(&meta, &samples, &gps, cfg)
}

/// Centred moving average of the dB values. Windows are truncated at the
/// ends of the trace; times and positions are kept.
pub fn moving_average(trace: &PathGainTrace, window: usize) -> Result<PathGainTrace> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::domain(format!("window must be odd and positive, got {window}")));
    }
    let half = window / 2;
    let n = trace.points.len();
    let points = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let slice = &trace.points[lo..=hi];
            let mean = slice.iter().map(|p| p.pg_db).sum::<f64>() / slice.len() as f64;
            TracePoint {
                pg_db: mean,
                ..trace.points[i]
            }
        })
        .collect();
    Ok(PathGainTrace { points })
}

/// A sparse channel used to synthesise test captures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticChannel {
    /// `(delay in samples, relative complex amplitude)`.
    pub taps: Vec<(usize, f64, f64)>,
    /// Injected path gain; tap amplitudes are scaled to match it.
    pub path_gain_db: f64,
    /// Per-sample signal-to-noise ratio; `None` for a noiseless capture.
    pub snr_db: Option<f64>,
}

/// Received samples for `seconds` seconds of the given channel, calibrated
/// so that a perfect sounder recovers `path_gain_db`.
pub fn synthesize_capture(
    meta: &CaptureMeta,
    cfg: &SounderConfig,
    channel: &SyntheticChannel,
    seconds: usize,
    seed: u64,
) -> Result<Vec<Complex64>> {
    let reference = cfg.reference(meta.sample_rate_hz)?;
    let p = reference.len();
    let per_second = meta.sample_rate_hz.floor() as usize;
    let rel_power: f64 = channel.taps.iter().map(|(_, re, im)| re * re + im * im).sum();
    let target = 10f64.powf(ota_received_power(channel.path_gain_db, &cfg.calibration) / 10.0);
    let scale = (target / rel_power).sqrt();
    let taps: Vec<(usize, Complex64)> = channel
        .taps
        .iter()
        .map(|(d, re, im)| (*d % p, Complex64::new(*re, *im) * scale))
        .collect();
    let ref_power = reference.iter().map(|r| r * r).sum::<f64>() / p as f64;
    let sigma = channel
        .snr_db
        .map(|snr| (target * ref_power / 10f64.powf(snr / 10.0) / 2.0).sqrt());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = seconds * per_second;
    let mut out = Vec::with_capacity(total);
    for n in 0..total {
        let mut s: Complex64 = taps
            .iter()
            .map(|(d, a)| a * reference[(n % p + p - d) % p])
            .sum();
        if let Some(sigma) = sigma {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            s += Complex64::new(re, im) * sigma;
        }
        out.push(s);
    }
    Ok(out)
}

/// Pure complex Gaussian noise of unit power.
pub fn synthesize_noise(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.5f64.sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im) * sigma
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cal() -> CalibrationParams {
        CalibrationParams {
            p_tx_dbm: 0.0,
            g_amp_db: 38.0,
            g_ant_db: 16.0,
            l_cable_db: 2.0,
            l_att_db: 60.0,
            p_rx_otc_dbm: 0.0,
        }
        .with_nominal_reference()
    }

    fn meta() -> CaptureMeta {
        CaptureMeta {
            sample_rate_hz: 2.0 * 16_383.0,
            center_freq_hz: 910e6,
            start_unix_s: 1_700_000_000.0,
        }
    }

    fn fixes(seconds: &[f64]) -> Vec<GpsFix> {
        seconds
            .iter()
            .map(|s| GpsFix {
                t_unix_s: 1_700_000_000.0 + s,
                lat_deg: 42.34 + s * 1e-5,
                lon_deg: -71.09,
            })
            .collect()
    }

    fn channel() -> SyntheticChannel {
        SyntheticChannel {
            taps: vec![(12, 1.0, 0.0), (40, 0.0, 0.5), (95, -0.3, 0.2)],
            path_gain_db: -97.0,
            snr_db: Some(20.0),
        }
    }

    fn pt(t: f64, pg: f64) -> TracePoint {
        TracePoint {
            t_unix_s: t,
            lat_deg: 1.0,
            lon_deg: 2.0,
            pg_db: pg,
        }
    }

    #[test]
    fn file_round_trip_three_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SounderConfig::new(2.0 * 16_383.0, cal());
        let samples = synthesize_capture(&meta(), &cfg, &channel(), 3, 5).unwrap();
        let s32: Vec<Complex32> = samples
            .iter()
            .map(|c| Complex32::new(c.re as f32, c.im as f32))
            .collect();
        let iq = dir.path().join("cap.bin");
        let gps = dir.path().join("gps.csv");
        write_capture(&iq, &meta(), &s32).unwrap();
        write_gps(&gps, &fixes(&[0.1, 1.0, 2.2])).unwrap();
        let trace = process_capture(&iq, &gps, &cfg).unwrap();
        assert_eq!(trace.points.len(), 3);
        for p in &trace.points {
            assert!((p.pg_db + 97.0).abs() < 0.5, "{p:?}");
        }
        let out = dir.path().join("trace.csv");
        write_trace(&out, &trace).unwrap();
        let back = read_trace(&out).unwrap();
        assert_eq!(back.points.len(), 3);
        let header = std::fs::read_to_string(&out).unwrap();
        assert!(header.starts_with("t_unix_s,lat_deg,lon_deg,pg_db\n"));
    }

    #[test]
    fn seconds_without_fix_are_dropped() {
        let cfg = SounderConfig::new(2.0 * 16_383.0, cal());
        let samples = synthesize_capture(&meta(), &cfg, &channel(), 3, 6).unwrap();
        let trace = trace_from_samples(&meta(), &samples, &fixes(&[0.0, 1.0, 2.6]), &cfg).unwrap();
        let times: Vec<f64> = trace.points.iter().map(|p| p.t_unix_s - 1_700_000_000.0).collect();
        assert_eq!(times, vec![0.0, 1.0]);
    }

    #[test]
    fn noise_only_capture_is_rejected() {
        let cfg = SounderConfig::new(2.0 * 16_383.0, cal());
        let noise = synthesize_noise(3 * 32_766, 8);
        assert!(sound_capture(&meta(), &noise, &cfg).unwrap().is_empty());
        assert!(matches!(
            trace_from_samples(&meta(), &noise, &fixes(&[0.0, 1.0, 2.0]), &cfg),
            Err(Error::NoUsableSeconds)
        ));
    }

    #[test]
    fn partial_trailing_second_is_discarded() {
        let cfg = SounderConfig::new(2.0 * 16_383.0, cal());
        let mut samples = synthesize_capture(&meta(), &cfg, &channel(), 2, 1).unwrap();
        samples.truncate(32_766 + 20_000);
        assert_eq!(sound_capture(&meta(), &samples, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn oversampled_reference_is_periodic() {
        // Two samples per chip.
        let cfg = SounderConfig::new(16_383.0, cal());
        let reference = cfg.reference(32_766.0).unwrap();
        assert_eq!(reference.len(), 32_766);
        let m = CaptureMeta {
            sample_rate_hz: 32_766.0,
            ..meta()
        };
        let ch = SyntheticChannel {
            taps: vec![(30, 1.0, 0.0)],
            path_gain_db: -90.0,
            snr_db: None,
        };
        let samples = synthesize_capture(&m, &cfg, &ch, 1, 0).unwrap();
        let frames = sound_capture(&m, &samples, &cfg).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].taps[0].delay_index, 30);
    }

    #[test]
    fn file_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SounderConfig::new(2.0 * 16_383.0, cal());
        let missing = dir.path().join("nope.bin");
        assert!(matches!(
            process_capture(&missing, dir.path().join("g.csv"), &cfg),
            Err(Error::Io { .. })
        ));
        let iq = dir.path().join("cap.bin");
        std::fs::write(&iq, [0u8; 16]).unwrap();
        assert!(matches!(read_capture(&iq), Err(Error::MissingSidecar(_))));
    }

    #[test]
    fn rate_ratio_rules() {
        assert_eq!(rate_ratio(122_880_000.0, 61_440_000.0).unwrap(), (2, 1));
        assert!(rate_ratio(1.5, 1.0).is_err());
    }

    #[test]
    fn moving_average_rules() {
        let t = PathGainTrace {
            points: vec![pt(0.0, 0.0), pt(1.0, 3.0), pt(2.0, 6.0)],
        };
        assert_eq!(moving_average(&t, 1).unwrap(), t);
        let m = moving_average(&t, 3).unwrap();
        let v: Vec<f64> = m.points.iter().map(|p| p.pg_db).collect();
        assert_eq!(v, vec![1.5, 3.0, 4.5]);
        assert_eq!(m.points[2].t_unix_s, 2.0);
        let c = PathGainTrace {
            points: (0..9).map(|k| pt(k as f64, -80.0)).collect(),
        };
        assert_eq!(moving_average(&c, 5).unwrap(), c);
        assert!(moving_average(&t, 4).is_err());
        assert!(moving_average(&t, 0).is_err());
    }
}

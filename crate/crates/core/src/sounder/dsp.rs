//! Correlation sounding: modulation, resampling, matched filtering and
//! significant-peak extraction.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Half-width of the resampling filter, in input samples per side.
const HALF_TAPS_PER_PHASE: usize = 32;
const KAISER_BETA: f64 = 8.6;

/// One resolved propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub delay_index: usize,
    pub amplitude: Complex64,
}

/// BPSK mapping: bit 0 to +1, bit 1 to -1.
pub fn bpsk(bits: &[u8]) -> Vec<f64> {
    bits.iter()
        .map(|b| if *b == 0 { 1.0 } else { -1.0 })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc low-pass for an `up`/`down` rational resampler,
/// `2 * 32 * up + 1` taps, scaled so the taps sum to `up`.
fn resampling_filter(up: usize, down: usize) -> Vec<f64> {
    let half = HALF_TAPS_PER_PHASE * up;
    let len = 2 * half + 1;
    let rate = up.max(down) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..len)
        .map(|k| {
            let n = k as f64 - half as f64;
            let r = n / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            sinc(n / rate) / rate * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / sum);
    h
}

/// Rational resampling by `up / down` with a windowed-sinc filter.
/// Output length is `ceil(len * up / down)` and sample `m` is aligned with
/// input time `m * down / up`.
pub fn resample(signal: &[Complex64], up: usize, down: usize) -> Result<Vec<Complex64>> {
    if up == 0 || down == 0 {
        return Err(Error::domain("resampling factors must be at least 1"));
    }
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    if up == 1 && down == 1 {
        return Ok(signal.to_vec());
    }
    let h = resampling_filter(up, down);
    let half = (h.len() - 1) / 2;
    let out_len = (signal.len() * up).div_ceil(down);
    let out = (0..out_len)
        .map(|m| {
            // Upsampled-domain time of this output sample.
            let t = m * down;
            // Input n contributes through tap half + t - n*up.
            let n_lo = (t + half + 1).saturating_sub(h.len()).div_ceil(up);
            let n_hi = ((t + half) / up).min(signal.len() - 1);
            let mut acc = Complex64::new(0.0, 0.0);
            for n in n_lo..=n_hi {
                acc += signal[n] * h[half + t - n * up];
            }
            acc
        })
        .collect();
    Ok(out)
}

/// Resamples one period of a periodic real sequence, so the result is
/// itself periodic. `len * up / down` must be an integer.
pub fn resample_periodic(period: &[f64], up: usize, down: usize) -> Result<Vec<f64>> {
    if up == 0 || down == 0 {
        return Err(Error::domain("resampling factors must be at least 1"));
    }
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    let n = period.len();
    if (n * up) % down != 0 {
        return Err(Error::domain(format!(
            "period of {n} samples does not resample to an integer length at {up}/{down}"
        )));
    }
    let out_len = n * up / down;
    if up == 1 && down == 1 {
        return Ok(period.to_vec());
    }
    let tripled: Vec<Complex64> = (0..3 * n)
        .map(|k| Complex64::new(period[k % n], 0.0))
        .collect();
    let full = resample(&tripled, up, down)?;
    Ok(full[out_len..2 * out_len].iter().map(|c| c.re).collect())
}

/// Circular cross-correlation of a received block against one reference
/// period, normalised by the reference energy. Every whole reference
/// period contained in `rx` is averaged coherently; lag `tau` of the output
/// estimates the path amplitude at delay `tau`.
pub fn correlate_cir(rx: &[Complex64], reference: &[f64]) -> Result<Vec<Complex64>> {
    let p = reference.len();
    if p == 0 || rx.is_empty() {
        return Err(Error::domain("correlation needs non-empty inputs"));
    }
    if rx.len() < p {
        return Err(Error::domain(format!(
            "received block of {} samples is shorter than the {p}-sample reference",
            rx.len()
        )));
    }
    let energy: f64 = reference.iter().map(|s| s * s).sum();
    if energy == 0.0 {
        return Err(Error::domain("reference has zero energy"));
    }
    let periods = rx.len() / p;
    let mut folded = vec![Complex64::new(0.0, 0.0); p];
    for chunk in rx[..periods * p].chunks_exact(p) {
        for (f, x) in folded.iter_mut().zip(chunk) {
            *f += x;
        }
    }
    let mut spectrum: Vec<Complex64> = reference.iter().map(|r| Complex64::new(*r, 0.0)).collect();

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(p);
    let inv = planner.plan_fft_inverse(p);
    fwd.process(&mut folded);
    fwd.process(&mut spectrum);
    for (f, r) in folded.iter_mut().zip(&spectrum) {
        *f *= r.conj();
    }
    inv.process(&mut folded);
    let scale = 1.0 / (p as f64 * periods as f64 * energy);
    folded.iter_mut().for_each(|c| *c *= scale);
    Ok(folded)
}

/// Significant-peak rule for a correlator output.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PeakDetector {
    /// Required excess over the mean power of the guard neighbourhood, dB.
    pub threshold_db: f64,
    /// Neighbours considered on each side.
    pub guard: usize,
    /// Required excess over the median power of the whole response, dB.
    pub floor_db: f64,
}

impl Default for PeakDetector {
    fn default() -> Self {
        Self {
            threshold_db: 3.0,
            guard: 5,
            floor_db: 15.0,
        }
    }
}

impl PeakDetector {
    /// Index `k` is kept when `|h[k]|^2` is a strict local maximum, exceeds
    /// the mean power of its `2 * guard` circular neighbours by
    /// `threshold_db`, and exceeds the median power of `h` by `floor_db`.
    pub fn detect(&self, cir: &[Complex64]) -> Result<Vec<Tap>> {
        let n = cir.len();
        let g = self.guard;
        if g == 0 || n < 2 * g + 1 {
            return Err(Error::domain(format!(
                "response of {n} samples too short for guard {g}"
            )));
        }
        let power: Vec<f64> = cir.iter().map(|c| c.norm_sqr()).collect();
        let mut sorted = power.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let local_ratio = 10f64.powf(self.threshold_db / 10.0);
        let floor = median * 10f64.powf(self.floor_db / 10.0);

        let at = |k: isize| power[k.rem_euclid(n as isize) as usize];
        let mut taps = Vec::new();
        for k in 0..n {
            let pk = power[k];
            let ki = k as isize;
            if pk <= floor || !(pk > at(ki - 1) && pk > at(ki + 1)) {
                continue;
            }
            let neighbours: f64 = (1..=g as isize).map(|d| at(ki - d) + at(ki + d)).sum();
            let mean = neighbours / (2 * g) as f64;
            if pk >= local_ratio * mean {
                taps.push(Tap {
                    delay_index: k,
                    amplitude: cir[k],
                });
            }
        }
        Ok(taps)
    }
}

/// Peaks under [`PeakDetector`] with the given local rule and the default
/// median floor.
pub fn detect_peaks(cir: &[Complex64], threshold_db: f64, guard: usize) -> Result<Vec<Tap>> {
    PeakDetector {
        threshold_db,
        guard,
        ..PeakDetector::default()
    }
    .detect(cir)
}

/// Received power `10 log10(sum |alpha|^2)` of a sparse channel.
pub fn received_power_db(taps: &[Tap]) -> Result<f64> {
    let total: f64 = taps.iter().map(|t| t.amplitude.norm_sqr()).sum();
    if taps.is_empty() || total <= 0.0 {
        return Err(Error::NoSignal);
    }
    Ok(10.0 * total.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sounder::glfsr14;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn reference() -> Vec<f64> {
        bpsk(&glfsr14(1).unwrap().bits)
    }

    fn delayed(r: &[f64], delay: usize, gain: Complex64) -> Vec<Complex64> {
        let p = r.len();
        (0..p).map(|n| gain * r[(n + p - delay) % p]).collect()
    }

    fn dft_mag(x: &[Complex64], freq: f64) -> f64 {
        let s: Complex64 = x
            .iter()
            .enumerate()
            .map(|(n, v)| v * Complex64::from_polar(1.0, -2.0 * PI * freq * n as f64))
            .sum();
        s.norm() / x.len() as f64
    }

    #[test]
    fn bpsk_mapping() {
        assert_eq!(bpsk(&[0, 1, 1, 0]), vec![1.0, -1.0, -1.0, 1.0]);
        assert!(bpsk(&[]).is_empty());
        let r = reference();
        assert_abs_diff_eq!(r.iter().sum::<f64>() / r.len() as f64, -1.0 / 16_383.0, epsilon = 1e-15);
    }

    #[test]
    fn periodic_autocorrelation_is_two_valued() {
        let r = reference();
        let p = r.len();
        for lag in [0usize, 1, 2, 100, 8191, 16_382] {
            let s: f64 = (0..p).map(|n| r[n] * r[(n + lag) % p]).sum();
            assert_eq!(s, if lag == 0 { 16_383.0 } else { -1.0 });
        }
    }

    #[test]
    fn resample_identity_and_length() {
        let x: Vec<Complex64> = (0..10).map(|k| Complex64::new(k as f64, -1.0)).collect();
        assert_eq!(resample(&x, 1, 1).unwrap(), x);
        assert_eq!(resample(&x, 3, 3).unwrap(), x);
        assert_eq!(resample(&x, 2, 1).unwrap().len(), 20);
        assert_eq!(resample(&x, 2, 3).unwrap().len(), 7);
        assert!(resample(&[], 2, 1).unwrap().is_empty());
        assert!(resample(&x, 0, 1).is_err());
    }

    #[test]
    fn resample_preserves_dc() {
        let x = vec![Complex64::new(1.0, 0.0); 400];
        for (up, down) in [(2, 1), (3, 2), (1, 2), (5, 3)] {
            let y = resample(&x, up, down).unwrap();
            let margin = y.len() / 4;
            for v in &y[margin..y.len() - margin] {
                assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn resample_tone_frequency_and_amplitude() {
        let n = 1000;
        let x: Vec<Complex64> = (0..n)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * 0.1 * k as f64))
            .collect();
        let y = resample(&x, 2, 1).unwrap();
        let interior = &y[200..1800];
        let at_half = dft_mag(interior, 0.05);
        assert!((at_half - 1.0).abs() < 0.01, "amplitude {at_half}");
        assert!(dft_mag(interior, 0.1) < 0.02);
    }

    #[test]
    fn correlation_recovers_single_path() {
        let r = reference();
        let rx = delayed(&r, 7, Complex64::new(0.5, 0.0));
        let cir = correlate_cir(&rx, &r).unwrap();
        assert_eq!(cir.len(), r.len());
        assert_abs_diff_eq!(cir[7].re, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(cir[7].im, 0.0, epsilon = 1e-9);
        let peak = (0..cir.len()).max_by(|a, b| cir[*a].norm().total_cmp(&cir[*b].norm()));
        assert_eq!(peak, Some(7));
    }

    #[test]
    fn correlation_two_paths_leakage_bound() {
        let r = reference();
        let a = Complex64::new(0.8, 0.0);
        let b = Complex64::new(0.0, 0.3);
        let rx: Vec<Complex64> = delayed(&r, 3, a)
            .iter()
            .zip(delayed(&r, 20, b))
            .map(|(x, y)| x + y)
            .collect();
        let cir = correlate_cir(&rx, &r).unwrap();
        let p = 16_383.0;
        assert!((cir[3] - a).norm() <= b.norm() / p + 1e-12);
        assert!((cir[20] - b).norm() <= a.norm() / p + 1e-12);
        for (k, c) in cir.iter().enumerate() {
            if k != 3 && k != 20 {
                assert!(c.norm() <= (a.norm() + b.norm()) / p + 1e-12);
            }
        }
    }

    #[test]
    fn correlation_averages_whole_periods() {
        let r = reference();
        let mut rx = delayed(&r, 11, Complex64::new(0.25, 0.1));
        rx.extend(rx.clone());
        rx.extend(&rx[..500].to_vec());
        let cir = correlate_cir(&rx, &r).unwrap();
        assert_abs_diff_eq!(cir[11].re, 0.25, epsilon = 1e-9);
        assert!(correlate_cir(&rx[..100], &r).is_err());
        assert!(correlate_cir(&[], &r).is_err());
    }

    #[test]
    fn correlation_under_noise() {
        let r = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // 20 dB SNR on a unit-power signal.
        let sigma = (0.01f64 / 2.0).sqrt();
        for _ in 0..100 {
            let rx: Vec<Complex64> = delayed(&r, 42, Complex64::new(1.0, 0.0))
                .into_iter()
                .map(|s| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    s + Complex64::new(re, im) * sigma
                })
                .collect();
            let cir = correlate_cir(&rx, &r).unwrap();
            let peak = (0..cir.len())
                .max_by(|a, b| cir[*a].norm().total_cmp(&cir[*b].norm()))
                .unwrap();
            assert_eq!(peak, 42);
            assert!((cir[42].norm() - 1.0).abs() < 0.05);
        }
    }

    fn profile_db(db: &[f64]) -> Vec<Complex64> {
        db.iter()
            .map(|d| Complex64::new(10f64.powf(d / 20.0), 0.0))
            .collect()
    }

    #[test]
    fn peak_rules() {
        let mut db = vec![-30.0; 41];
        db[20] = -10.0;
        let taps = detect_peaks(&profile_db(&db), 3.0, 5).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].delay_index, 20);

        assert!(detect_peaks(&profile_db(&[-30.0; 41]), 3.0, 5).unwrap().is_empty());

        // 2 dB above a neighbourhood made of the -30 floor and a -28 plateau.
        let mut db = vec![-60.0; 41];
        for d in db.iter_mut().take(26).skip(15) {
            *d = -30.0;
        }
        db[20] = -28.0;
        assert!(detect_peaks(&profile_db(&db), 3.0, 5).unwrap().is_empty());

        assert!(detect_peaks(&profile_db(&[-1.0; 10]), 3.0, 5).is_err());
    }

    #[test]
    fn received_power_values() {
        let tap = |a: Complex64| Tap {
            delay_index: 0,
            amplitude: a,
        };
        assert_eq!(received_power_db(&[tap(Complex64::new(1.0, 0.0))]).unwrap(), 0.0);
        let p = received_power_db(&[tap(Complex64::new(0.5, 0.0)), tap(Complex64::new(0.0, 0.5))])
            .unwrap();
        assert_abs_diff_eq!(p, -3.0103, epsilon = 1e-4);
        assert_abs_diff_eq!(
            received_power_db(&[tap(Complex64::new(0.1, 0.0))]).unwrap(),
            -20.0,
            epsilon = 1e-12
        );
        assert!(matches!(received_power_db(&[]), Err(Error::NoSignal)));
    }
}

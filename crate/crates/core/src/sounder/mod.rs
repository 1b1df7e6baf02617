//! Channel sounder: PN codeword generation, correlation, peak detection,
//! calibration and per-second path-gain traces.

mod calib;
mod capture;
mod dsp;
mod lfsr;

pub use calib::{conducted_reference, ota_received_power, path_gain_ota, CalibrationParams};
pub use capture::{
    moving_average, process_capture, read_capture, read_gps, read_trace, sidecar_path, sound_block,
    sound_capture, synthesize_capture, synthesize_noise, trace_from_samples, write_capture,
    write_gps, write_trace, CaptureMeta, CirFrame, GpsFix, PathGainTrace, SounderConfig,
    SyntheticChannel, TracePoint,
};
pub use dsp::{
    bpsk, correlate_cir, detect_peaks, received_power_db, resample, resample_periodic,
    PeakDetector, Tap,
};
pub use lfsr::{glfsr14, Codeword, GaloisLfsr, GLFSR14_TAPS};

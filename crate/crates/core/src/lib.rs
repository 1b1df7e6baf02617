//! Refinement of fast, coarse radio path-gain estimates into high-fidelity
//! path-gain heatmaps.
//!
//! The crate is organised along the processing pipeline:
//!
//! * [`geodata`] loads elevation rasters, crops transmitter-centred tiles,
//!   rotates them and samples terrain profiles.
//! * [`propagate`] holds the physics generators: a cheap coarse estimate
//!   (free space plus one knife edge) and a denser synthetic reference
//!   (multi-edge diffraction plus a two-ray ground term).
//! * [`sounder`] turns recorded IQ captures into calibrated, GPS-located
//!   path-gain traces.
//! * [`dataset`] assembles training samples and persists them.
//! * [`unet`] is the encoder-decoder refinement network, written from
//!   scratch with analytic gradients.
//! * [`evalkit`] computes error metrics and runs the experiments.

pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod geodata;
pub mod propagate;
pub mod sounder;
pub mod unet;

pub use error::{Error, Result};

/// Lower end of the evaluated path-gain range, dB.
pub const PG_MIN_DB: f64 = -250.0;
/// Upper end of the evaluated path-gain range, dB.
pub const PG_MAX_DB: f64 = -50.0;
/// Width of the evaluated path-gain range, dB.
pub const PG_RANGE_DB: f64 = PG_MAX_DB - PG_MIN_DB;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Independent sub-seed number `stream` of a master seed, so stochastic
/// stages never share a random stream.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

//! Physics-based path-gain generators.
//!
//! [`rough_estimate`] is the fast input channel: free-space loss plus the
//! single dominant knife edge, evaluated on a coarse grid and bilinearly
//! upsampled. [`oracle_truth`] is the dense reference: free-space loss,
//! three-edge Deygout diffraction and, on unobstructed links, a two-ray
//! ground-reflection term.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::geodata::{crop_tile, sample_profile, ElevationMap, GridTile, MapPoint};
use crate::{Error, Result, PG_MAX_DB, PG_MIN_DB, SPEED_OF_LIGHT};

/// Knife edges with a Fresnel parameter at or below this value add no loss.
pub const NU_CLEAR: f64 = -0.78;

/// Minimum number of samples in any terrain profile.
pub const MIN_PROFILE_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkGeometry {
    /// TX antenna height above the raster at the TX position.
    pub tx_height_agl_m: f64,
    /// RX antenna height above the raster at each receiver pixel.
    pub rx_height_agl_m: f64,
    pub frequency_hz: f64,
    pub wavelength_m: f64,
    /// Ground reflection coefficient of the two-ray term; 0 disables it.
    pub reflection_coeff: f64,
}

impl LinkGeometry {
    pub fn new(tx_height_agl_m: f64, rx_height_agl_m: f64, frequency_hz: f64) -> Result<Self> {
        if !(frequency_hz > 0.0 && frequency_hz.is_finite()) {
            return Err(Error::domain(format!("frequency must be positive, got {frequency_hz}")));
        }
        if !(tx_height_agl_m >= 0.0 && rx_height_agl_m >= 0.0) {
            return Err(Error::domain("antenna heights must be non-negative"));
        }
        Ok(Self {
            tx_height_agl_m,
            rx_height_agl_m,
            frequency_hz,
            wavelength_m: SPEED_OF_LIGHT / frequency_hz,
            reflection_coeff: -0.9,
        })
    }

    pub fn with_reflection(mut self, gamma: f64) -> Self {
        self.reflection_coeff = gamma;
        self
    }
}

impl Default for LinkGeometry {
    fn default() -> Self {
        Self::new(2.0, 1.5, 910e6).expect("default geometry is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Rough,
    Oracle,
    Model,
    Measurement,
}

/// Path-gain raster in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub tile: GridTile,
    pub generator: Generator,
}

impl Heatmap {
    /// Valid values clamped to the evaluated range.
    pub fn clamped(&self) -> Heatmap {
        Heatmap {
            tile: self.tile.map_valid(|v| v.clamp(PG_MIN_DB, PG_MAX_DB)),
            generator: self.generator,
        }
    }

    /// Writes an 8-bit grayscale PNG: -250 dB is black, -50 dB white and
    /// invalid pixels 0.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_gray_png(&self.tile, PG_MIN_DB, PG_MAX_DB, path)
    }
}

/// Maps valid values linearly from `[lo, hi]` onto `0..=255` and writes them
/// as a grayscale PNG with the top row first.
pub fn write_gray_png(tile: &GridTile, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = tile.size_px;
    let mut pixels = Vec::with_capacity(n * n);
    for row in (0..n).rev() {
        for col in 0..n {
            let k = tile.idx(row, col);
            let byte = if tile.mask[k] {
                ((tile.values[k] - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            pixels.push(byte);
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), n as u32, n as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Free-space loss `20 log10(4 pi d / lambda)` in dB.
pub fn fspl_db(distance_m: f64, frequency_hz: f64) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::domain(format!("distance must be positive, got {distance_m}")));
    }
    if !(frequency_hz > 0.0) {
        return Err(Error::domain(format!("frequency must be positive, got {frequency_hz}")));
    }
    Ok(fspl_unchecked(distance_m, SPEED_OF_LIGHT / frequency_hz))
}

#[inline]
fn fspl_unchecked(distance_m: f64, wavelength_m: f64) -> f64 {
    20.0 * (4.0 * PI * distance_m / wavelength_m).log10()
}

/// Fresnel-Kirchhoff diffraction parameter for an edge `h_m` above the
/// sightline at distances `d1_m`, `d2_m` from the terminals.
pub fn fresnel_nu(h_m: f64, d1_m: f64, d2_m: f64, wavelength_m: f64) -> Result<f64> {
    if !(d1_m > 0.0 && d2_m > 0.0 && wavelength_m > 0.0) {
        return Err(Error::domain(format!(
            "d1, d2 and wavelength must be positive, got {d1_m}, {d2_m}, {wavelength_m}"
        )));
    }
    Ok(nu_unchecked(h_m, d1_m, d2_m, wavelength_m))
}

#[inline]
fn nu_unchecked(h: f64, d1: f64, d2: f64, wavelength: f64) -> f64 {
    h * (2.0 * (d1 + d2) / (wavelength * d1 * d2)).sqrt()
}

/// Single knife-edge loss approximation
/// `J(nu) = 6.9 + 20 log10(sqrt((nu - 0.1)^2 + 1) + nu - 0.1)`, zero for
/// `nu <= -0.78`.
pub fn knife_edge_loss_db(nu: f64) -> f64 {
    if nu <= NU_CLEAR {
        return 0.0;
    }
    let v = nu - 0.1;
    (6.9 + 20.0 * ((v * v + 1.0).sqrt() + v).log10()).max(0.0)
}

/// Two-ray interference term `20 log10 |1 + gamma e^{j dphi}|` for antennas
/// `ht`, `hr` above a reflecting plane at horizontal distance `d`.
pub fn two_ray_gain_db(d: f64, ht: f64, hr: f64, wavelength: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    // sqrt(d^2 + (ht+hr)^2) - sqrt(d^2 + (ht-hr)^2), without cancellation.
    let direct = d.hypot(ht - hr);
    let reflected = d.hypot(ht + hr);
    let delta = 4.0 * ht * hr / (direct + reflected);
    let phi = 2.0 * PI * delta / wavelength;
    let re = 1.0 + gamma * phi.cos();
    let im = gamma * phi.sin();
    20.0 * re.hypot(im).max(1e-6).log10()
}

/// Profile samples as `(distance, ground height)` plus the absolute heights
/// of the two terminals.
struct LinkPath<'a> {
    samples: &'a [(f64, f64)],
    lambda: f64,
}

impl LinkPath<'_> {
    /// Highest Fresnel parameter among samples strictly between `lo` and
    /// `hi`, against the line joining `(d_lo, h_lo)` and `(d_hi, h_hi)`.
    fn dominant_edge(&self, lo: usize, hi: usize, h_lo: f64, h_hi: f64) -> Option<(usize, f64)> {
        let (d_lo, d_hi) = (self.samples[lo].0, self.samples[hi].0);
        let span = d_hi - d_lo;
        if hi <= lo + 1 || span <= 0.0 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for k in lo + 1..hi {
            let (d, ground) = self.samples[k];
            let (d1, d2) = (d - d_lo, d_hi - d);
            if d1 <= 0.0 || d2 <= 0.0 {
                continue;
            }
            let line = h_lo + (h_hi - h_lo) * d1 / span;
            let nu = nu_unchecked(ground - line, d1, d2, self.lambda);
            if best.map_or(true, |(_, b)| nu > b) {
                best = Some((k, nu));
            }
        }
        best
    }

    fn single_edge_loss(&self, h_tx: f64, h_rx: f64) -> f64 {
        let last = self.samples.len() - 1;
        self.dominant_edge(0, last, h_tx, h_rx)
            .map_or(0.0, |(_, nu)| knife_edge_loss_db(nu))
    }

    /// Deygout: the dominant edge, then one dominant edge on each side of
    /// it (three edges at most). Every edge must clear `NU_CLEAR`.
    fn deygout_loss(&self, lo: usize, hi: usize, h_lo: f64, h_hi: f64, depth: u32) -> f64 {
        let Some((k, nu)) = self.dominant_edge(lo, hi, h_lo, h_hi) else {
            return 0.0;
        };
        if nu <= NU_CLEAR {
            return 0.0;
        }
        let mut loss = knife_edge_loss_db(nu);
        if depth == 0 {
            let edge = self.samples[k].1;
            loss += self.deygout_loss(lo, k, h_lo, edge, 1);
            loss += self.deygout_loss(k, hi, edge, h_hi, 1);
        }
        loss
    }
}

/// Everything needed to evaluate one TX -> pixel link.
struct Scene<'a> {
    map: &'a ElevationMap,
    tx: MapPoint,
    tx_abs: f64,
    geom: LinkGeometry,
    /// Horizontal distance floor at the TX pixel.
    min_dist: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fidelity {
    Rough,
    Oracle,
}

impl<'a> Scene<'a> {
    fn new(map: &'a ElevationMap, tx: MapPoint, geom: LinkGeometry) -> Result<Self> {
        if !map.contains(tx) {
            return Err(Error::domain(format!("TX ({}, {}) outside map", tx.x, tx.y)));
        }
        let (ground, _) = map.bilinear(tx);
        Ok(Self {
            map,
            tx,
            tx_abs: ground + geom.tx_height_agl_m,
            geom,
            min_dist: map.cell_size_m / 2.0,
        })
    }

    /// Path gain in dB at receiver position `rx`, `None` off the map.
    fn path_gain(&self, rx: MapPoint, fidelity: Fidelity) -> Option<f64> {
        if !self.map.contains(rx) {
            return None;
        }
        let dh = self.tx.distance(&rx);
        let lambda = self.geom.wavelength_m;

        let (rx_ground, profile) = if dh > 0.0 {
            let n = ((dh / self.map.cell_size_m).ceil() as usize + 1).max(MIN_PROFILE_SAMPLES);
            let p = sample_profile(self.map, self.tx, rx, dh, n);
            (p.samples[n - 1].1, Some(p))
        } else {
            (self.map.bilinear(rx).0, None)
        };
        let rx_abs = rx_ground + self.geom.rx_height_agl_m;
        let d_floor = dh.max(self.min_dist);
        let d3 = d_floor.hypot(self.tx_abs - rx_abs);
        let mut pg = -fspl_unchecked(d3, lambda);

        let diffraction = profile.as_ref().map_or(0.0, |p| {
            let path = LinkPath {
                samples: &p.samples,
                lambda,
            };
            match fidelity {
                Fidelity::Rough => path.single_edge_loss(self.tx_abs, rx_abs),
                Fidelity::Oracle => path.deygout_loss(0, p.len() - 1, self.tx_abs, rx_abs, 0),
            }
        });
        pg -= diffraction;

        if fidelity == Fidelity::Oracle && diffraction == 0.0 {
            let ht = (self.tx_abs - rx_ground).max(0.0);
            pg += two_ray_gain_db(
                d_floor,
                ht,
                self.geom.rx_height_agl_m,
                lambda,
                self.geom.reflection_coeff,
            );
        }
        Some(pg.min(0.0))
    }

    /// Evaluates a `size_px` grid of `cell` spacing centred on the TX.
    fn render(&self, size_px: usize, cell: f64, fidelity: Fidelity) -> GridTile {
        let rows: Vec<Vec<Option<f64>>> = (0..size_px)
            .into_par_iter()
            .map(|i| {
                (0..size_px)
                    .map(|j| {
                        let rx = MapPoint::new(
                            self.tx.x + GridTile::centered_offset(size_px, j) * cell,
                            self.tx.y + GridTile::centered_offset(size_px, i) * cell,
                        );
                        self.path_gain(rx, fidelity)
                    })
                    .collect()
            })
            .collect();
        let mut tile = GridTile {
            size_px,
            cell_size_m: cell,
            values: vec![0.0; size_px * size_px],
            mask: vec![false; size_px * size_px],
        };
        for (k, v) in rows.into_iter().flatten().enumerate() {
            if let Some(v) = v {
                tile.values[k] = v;
                tile.mask[k] = true;
            }
        }
        tile
    }
}

/// Coarse free-space plus single-knife-edge estimate on a
/// `tile_px / coarse_factor` grid, upsampled to `tile_px`.
pub fn rough_estimate(
    map: &ElevationMap,
    tx: MapPoint,
    geom: &LinkGeometry,
    tile_px: usize,
    coarse_factor: usize,
) -> Result<Heatmap> {
    if coarse_factor == 0 || tile_px == 0 || tile_px % coarse_factor != 0 {
        return Err(Error::domain(format!(
            "coarse factor {coarse_factor} must divide tile size {tile_px}"
        )));
    }
    let scene = Scene::new(map, tx, *geom)?;
    let coarse_px = tile_px / coarse_factor;
    let coarse = scene.render(
        coarse_px,
        map.cell_size_m * coarse_factor as f64,
        Fidelity::Rough,
    );
    let mut tile = upsample_bilinear(&coarse, coarse_factor);
    let footprint = crop_tile(map, tx, tile_px);
    for (m, f) in tile.mask.iter_mut().zip(&footprint.mask) {
        *m &= *f;
    }
    tile.zero_invalid();
    Ok(Heatmap {
        tile,
        generator: Generator::Rough,
    })
}

/// Dense reference path gain for every pixel of a `tile_px` tile.
pub fn oracle_truth(
    map: &ElevationMap,
    tx: MapPoint,
    geom: &LinkGeometry,
    tile_px: usize,
) -> Result<Heatmap> {
    let scene = Scene::new(map, tx, *geom)?;
    let mut tile = scene.render(tile_px, map.cell_size_m, Fidelity::Oracle);
    let footprint = crop_tile(map, tx, tile_px);
    for (m, f) in tile.mask.iter_mut().zip(&footprint.mask) {
        *m &= *f;
    }
    tile.zero_invalid();
    Ok(Heatmap {
        tile,
        generator: Generator::Oracle,
    })
}

/// Bilinear upsampling by an integer factor, pixel centres aligned
/// (`src = (dst + 0.5) / factor - 0.5`, clamped at the border). A fine pixel
/// is valid only when every coarse pixel with non-zero weight is valid.
pub fn upsample_bilinear(coarse: &GridTile, factor: usize) -> GridTile {
    let factor = factor.max(1);
    let n = coarse.size_px;
    let m = n * factor;
    let mut out = GridTile {
        size_px: m,
        cell_size_m: coarse.cell_size_m / factor as f64,
        values: vec![0.0; m * m],
        mask: vec![false; m * m],
    };
    let last = (n - 1) as f64;
    let axis: Vec<(usize, usize, f64)> = (0..m)
        .map(|k| {
            let u = ((k as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let k0 = u.floor() as usize;
            let k1 = (k0 + 1).min(n - 1);
            (k0, k1, u - k0 as f64)
        })
        .collect();
    for (i, &(r0, r1, ty)) in axis.iter().enumerate() {
        for (j, &(c0, c1, tx)) in axis.iter().enumerate() {
            let mut acc = 0.0;
            let mut valid = true;
            for (r, c, w) in [
                (r0, c0, (1.0 - tx) * (1.0 - ty)),
                (r0, c1, tx * (1.0 - ty)),
                (r1, c0, (1.0 - tx) * ty),
                (r1, c1, tx * ty),
            ] {
                if w == 0.0 {
                    continue;
                }
                let k = coarse.idx(r, c);
                if !coarse.mask[k] {
                    valid = false;
                    break;
                }
                acc += w * coarse.values[k];
            }
            if valid {
                let k = out.idx(i, j);
                out.values[k] = acc;
                out.mask[k] = true;
            }
        }
    }
    out
}

//! Elevation rasters, transmitter-centred tiles and terrain profiles.
//!
//! Map coordinates are metres. Cell `(row, col)` of an [`ElevationMap`] has
//! its centre at `origin + ((col + 0.5) * cell, (row + 0.5) * cell)`, with
//! row 0 at the bottom (south) edge.
//!
//! A [`GridTile`] of `n` pixels per side is centred on a map point: pixel
//! `(i, j)` sits at `center + ((j - (n-1)/2) * cell, (i - (n-1)/2) * cell)`.
//! For odd `n` the centre point is the centre of pixel `(n/2, n/2)`; for even
//! `n` it is the corner shared by the four central pixels. Rotations act
//! about the same point, so quarter turns are exact permutations for every
//! tile size.

mod ascii;
pub mod synth;

pub use ascii::{load_elevation, parse_elevation, write_elevation};

use crate::{Error, Result};

/// A map coordinate in metres.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
}

impl MapPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &MapPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Geo-referenced raster of terrain plus building heights.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationMap {
    pub width_px: usize,
    pub height_px: usize,
    pub cell_size_m: f64,
    /// Lower-left corner of the raster.
    pub origin: MapPoint,
    /// Row-major heights, row 0 at the bottom.
    pub heights: Vec<f64>,
    pub nodata: f64,
}

impl ElevationMap {
    /// Builds a map, checking the raster invariants.
    pub fn new(
        width_px: usize,
        height_px: usize,
        cell_size_m: f64,
        origin: MapPoint,
        heights: Vec<f64>,
        nodata: f64,
    ) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::domain("elevation map must be at least 1x1"));
        }
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(Error::domain(format!("invalid cell size {cell_size_m}")));
        }
        if heights.len() != width_px * height_px {
            return Err(Error::Shape(format!(
                "{} heights for a {width_px}x{height_px} map",
                heights.len()
            )));
        }
        if let Some(bad) = heights.iter().find(|h| **h != nodata && !h.is_finite()) {
            return Err(Error::domain(format!("non-finite height {bad}")));
        }
        Ok(Self {
            width_px,
            height_px,
            cell_size_m,
            origin,
            heights,
            nodata,
        })
    }

    /// A map of constant height.
    pub fn flat(width_px: usize, height_px: usize, cell_size_m: f64, height_m: f64) -> Self {
        Self::new(
            width_px,
            height_px,
            cell_size_m,
            MapPoint::new(0.0, 0.0),
            vec![height_m; width_px * height_px],
            -9999.0,
        )
        .expect("valid flat map")
    }

    pub fn width_m(&self) -> f64 {
        self.width_px as f64 * self.cell_size_m
    }

    pub fn height_m(&self) -> f64 {
        self.height_px as f64 * self.cell_size_m
    }

    /// Height of cell `(row, col)`, `None` for sentinel cells.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let h = self.heights[row * self.width_px + col];
        (h != self.nodata).then_some(h)
    }

    pub fn set(&mut self, row: usize, col: usize, h: f64) {
        self.heights[row * self.width_px + col] = h;
    }

    pub fn contains(&self, p: MapPoint) -> bool {
        let (u, v) = self.to_cell_units(p);
        (0.0..=self.width_px as f64).contains(&u) && (0.0..=self.height_px as f64).contains(&v)
    }

    /// Map point to fractional cell units measured from the lower-left corner.
    fn to_cell_units(&self, p: MapPoint) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.cell_size_m,
            (p.y - self.origin.y) / self.cell_size_m,
        )
    }

    /// Cell containing `p`, or `None` when `p` lies outside the raster.
    pub fn cell_at(&self, p: MapPoint) -> Option<(usize, usize)> {
        let (u, v) = self.to_cell_units(p);
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (col, row) = (u.floor() as usize, v.floor() as usize);
        (col < self.width_px && row < self.height_px).then_some((row, col))
    }

    /// Nearest-cell lookup; sentinel and out-of-map points give `None`.
    pub fn nearest(&self, p: MapPoint) -> Option<f64> {
        self.cell_at(p).and_then(|(r, c)| self.get(r, c))
    }

    /// Bilinear interpolation between cell centres, clamped at the edges.
    ///
    /// Sentinel cells read as height 0. Returns the height and whether any
    /// sentinel cell contributed.
    pub fn bilinear(&self, p: MapPoint) -> (f64, bool) {
        let (u, v) = self.to_cell_units(p);
        let fx = (u - 0.5).clamp(0.0, (self.width_px - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height_px - 1) as f64);
        let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
        let c1 = (c0 + 1).min(self.width_px - 1);
        let r1 = (r0 + 1).min(self.height_px - 1);
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);

        let mut hit_nodata = false;
        let mut h = |r: usize, c: usize, w: f64| -> f64 {
            if w == 0.0 {
                return 0.0;
            }
            match self.get(r, c) {
                Some(h) => h * w,
                None => {
                    hit_nodata = true;
                    0.0
                }
            }
        };
        let z = h(r0, c0, (1.0 - tx) * (1.0 - ty))
            + h(r0, c1, tx * (1.0 - ty))
            + h(r1, c0, (1.0 - tx) * ty)
            + h(r1, c1, tx * ty);
        (z, hit_nodata)
    }

    /// The raster turned by `quarter_turns` x 90 degrees counter-clockwise
    /// about its own centre (north up), keeping the same lower-left origin.
    pub fn rotated_quarter(&self, quarter_turns: u32) -> ElevationMap {
        let mut map = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (w, h) = (map.width_px, map.height_px);
            let mut out = vec![0.0; w * h];
            // Counter-clockwise: new (row, col) = (c, h - 1 - r), new width = h.
            for r in 0..h {
                for c in 0..w {
                    out[c * h + (h - 1 - r)] = map.heights[r * w + c];
                }
            }
            map.width_px = h;
            map.height_px = w;
            map.heights = out;
        }
        map
    }

    /// Where `p` lands after [`rotated_quarter`](Self::rotated_quarter).
    pub fn rotate_point_quarter(&self, p: MapPoint, quarter_turns: u32) -> MapPoint {
        let (mut u, mut v) = self.to_cell_units(p);
        let (mut w, mut h) = (self.width_px as f64, self.height_px as f64);
        for _ in 0..quarter_turns % 4 {
            (u, v) = (h - v, u);
            (w, h) = (h, w);
        }
        MapPoint::new(
            self.origin.x + u * self.cell_size_m,
            self.origin.y + v * self.cell_size_m,
        )
    }
}

/// Square raster tile with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTile {
    pub size_px: usize,
    pub cell_size_m: f64,
    /// Row-major values, row 0 at the bottom.
    pub values: Vec<f64>,
    /// `true` marks a valid pixel.
    pub mask: Vec<bool>,
}

impl GridTile {
    pub fn new(size_px: usize, cell_size_m: f64, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = size_px * size_px;
        if values.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "tile of {size_px}px needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            size_px,
            cell_size_m,
            values,
            mask,
        })
    }

    /// A fully valid tile holding `value` everywhere.
    pub fn filled(size_px: usize, cell_size_m: f64, value: f64) -> Self {
        Self {
            size_px,
            cell_size_m,
            values: vec![value; size_px * size_px],
            mask: vec![true; size_px * size_px],
        }
    }

    /// Builds a fully valid tile from rows listed bottom row first.
    pub fn from_rows(rows: &[Vec<f64>], cell_size_m: f64) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("tile rows must form a square".into()));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(n, cell_size_m, values, vec![true; n * n])
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.size_px).map(|r| r.to_vec()).collect()
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.size_px + col
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.idx(row, col)]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.idx(row, col)]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Pixel offset of index `k` from the tile centre, in pixels.
    #[inline]
    pub fn centered_offset(size_px: usize, k: usize) -> f64 {
        k as f64 - (size_px as f64 - 1.0) / 2.0
    }

    /// Map coordinate of pixel `(row, col)` for a tile centred on `center`.
    pub fn pixel_point(&self, center: MapPoint, row: usize, col: usize) -> MapPoint {
        MapPoint::new(
            center.x + Self::centered_offset(self.size_px, col) * self.cell_size_m,
            center.y + Self::centered_offset(self.size_px, row) * self.cell_size_m,
        )
    }

    /// Pixel value at the tile centre point: the centre pixel for odd sizes,
    /// the mean of the four central pixels for even sizes.
    pub fn center_value(&self) -> f64 {
        let n = self.size_px;
        if n % 2 == 1 {
            self.get(n / 2, n / 2)
        } else {
            let (a, b) = (n / 2 - 1, n / 2);
            (self.get(a, a) + self.get(a, b) + self.get(b, a) + self.get(b, b)) / 4.0
        }
    }

    /// Zeroes every invalid value, so equal tiles compare equal bit for bit.
    pub fn zero_invalid(&mut self) {
        for (v, m) in self.values.iter_mut().zip(&self.mask) {
            if !*m {
                *v = 0.0;
            }
        }
    }

    /// Applies `f` to every valid value.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> GridTile {
        let mut out = self.clone();
        for (v, m) in out.values.iter_mut().zip(&out.mask) {
            if *m {
                *v = f(*v);
            }
        }
        out
    }
}

/// Heights sampled along a straight transmitter-to-receiver segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainProfile {
    /// `(distance from TX in m, ground height in m)`.
    pub samples: Vec<(f64, f64)>,
    pub total_length_m: f64,
    /// Number of samples that touched a sentinel cell (read as height 0).
    pub nodata_samples: usize,
}

impl TerrainProfile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn heights(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.1)
    }
}

/// Crops a `size_px` tile centred on `center`, reading the nearest map cell
/// for each pixel. Pixels off the map or on sentinel cells are masked out.
pub fn crop_tile(map: &ElevationMap, center: MapPoint, size_px: usize) -> GridTile {
    let mut tile = GridTile {
        size_px,
        cell_size_m: map.cell_size_m,
        values: vec![0.0; size_px * size_px],
        mask: vec![false; size_px * size_px],
    };
    for i in 0..size_px {
        for j in 0..size_px {
            let p = tile.pixel_point(center, i, j);
            if let Some(h) = map.nearest(p) {
                let k = tile.idx(i, j);
                tile.values[k] = h;
                tile.mask[k] = true;
            }
        }
    }
    tile
}

/// Normalises an angle to `[0, 360)` and reports whole quarter turns.
fn quarter_turns(angle_deg: f64) -> Option<u32> {
    let a = angle_deg.rem_euclid(360.0);
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .position(|q| *q == a)
        .map(|q| q as u32)
}

/// Rotates a tile about its centre point.
///
/// Output pixel at centred position `p` reads the source at `R(angle) p`
/// (columns as x, rows as y), so `angle = 90` maps
/// `[[1,2,3],[4,5,6],[7,8,9]]` to `[[3,6,9],[2,5,8],[1,4,7]]`. Quarter turns
/// are exact permutations; other angles interpolate bilinearly and a target
/// pixel is valid only when every source pixel with non-zero weight is valid
/// and inside the tile.
pub fn rotate_tile(tile: &GridTile, angle_deg: f64) -> GridTile {
    let n = tile.size_px;
    let mut out = GridTile {
        size_px: n,
        cell_size_m: tile.cell_size_m,
        values: vec![0.0; n * n],
        mask: vec![false; n * n],
    };

    if let Some(q) = quarter_turns(angle_deg) {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match q {
                    0 => (i, j),
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                let (k, s) = (out.idx(i, j), tile.idx(si, sj));
                out.values[k] = tile.values[s];
                out.mask[k] = tile.mask[s];
            }
        }
        return out;
    }

    const SNAP: f64 = 1e-9;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (n as f64 - 1.0) / 2.0;
    let last = (n - 1) as f64;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - c, i as f64 - c);
            let mut sx = x * cos - y * sin + c;
            let mut sy = x * sin + y * cos + c;
            if (sx - sx.round()).abs() < SNAP {
                sx = sx.round();
            }
            if (sy - sy.round()).abs() < SNAP {
                sy = sy.round();
            }
            if sx < 0.0 || sy < 0.0 || sx > last || sy > last {
                continue;
            }
            let (c0, r0) = (sx.floor() as usize, sy.floor() as usize);
            let (tx, ty) = (sx - c0 as f64, sy - r0 as f64);
            let mut acc = 0.0;
            let mut valid = true;
            for (r, c, w) in [
                (r0, c0, (1.0 - tx) * (1.0 - ty)),
                (r0, c0 + 1, tx * (1.0 - ty)),
                (r0 + 1, c0, (1.0 - tx) * ty),
                (r0 + 1, c0 + 1, tx * ty),
            ] {
                if w == 0.0 {
                    continue;
                }
                if r >= n || c >= n || !tile.mask[tile.idx(r, c)] {
                    valid = false;
                    break;
                }
                acc += w * tile.values[tile.idx(r, c)];
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

/// Samples `n_samples` equally spaced heights on the segment `tx -> rx`.
pub fn terrain_profile(
    map: &ElevationMap,
    tx: MapPoint,
    rx: MapPoint,
    n_samples: usize,
) -> Result<TerrainProfile> {
    if n_samples < 2 {
        return Err(Error::domain("terrain profile needs at least 2 samples"));
    }
    for (name, p) in [("TX", tx), ("RX", rx)] {
        if !map.contains(p) {
            return Err(Error::domain(format!(
                "{name} endpoint ({}, {}) outside map",
                p.x, p.y
            )));
        }
    }
    let total = tx.distance(&rx);
    if total == 0.0 {
        return Err(Error::domain("degenerate profile: TX and RX coincide"));
    }
    Ok(sample_profile(map, tx, rx, total, n_samples))
}

/// Profile sampling without endpoint checks. Sample `k` uses the weights
/// `((n-1-k)/(n-1), k/(n-1))`, so swapping the endpoints reverses the
/// samples bit for bit.
pub(crate) fn sample_profile(
    map: &ElevationMap,
    tx: MapPoint,
    rx: MapPoint,
    total: f64,
    n_samples: usize,
) -> TerrainProfile {
    let last = (n_samples - 1) as f64;
    let mut nodata_samples = 0;
    let samples = (0..n_samples)
        .map(|k| {
            let a = (n_samples - 1 - k) as f64 / last;
            let b = k as f64 / last;
            let p = MapPoint::new(tx.x * a + rx.x * b, tx.y * a + rx.y * b);
            let (h, nodata) = map.bilinear(p);
            nodata_samples += usize::from(nodata);
            let d = if k == n_samples - 1 { total } else { total * b };
            (d, h)
        })
        .collect();
    TerrainProfile {
        samples,
        total_length_m: total,
        nodata_samples,
    }
}

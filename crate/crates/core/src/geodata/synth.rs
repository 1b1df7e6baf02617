//! Seeded synthetic cities: smooth rolling terrain with box buildings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ElevationMap, MapPoint};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CityConfig {
    pub size_px: usize,
    pub cell_size_m: f64,
    /// Number of Gaussian terrain bumps.
    pub hills: usize,
    pub hill_height_m: f64,
    pub buildings: usize,
    pub building_min_m: f64,
    pub building_max_m: f64,
    /// Building footprint side range, in cells.
    pub footprint_px: (usize, usize),
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            size_px: 225,
            cell_size_m: 1.929,
            hills: 6,
            hill_height_m: 8.0,
            buildings: 40,
            building_min_m: 6.0,
            building_max_m: 30.0,
            footprint_px: (5, 18),
        }
    }
}

/// A synthetic elevation map together with the rooftop corners of its
/// buildings, which serve as candidate transmitter sites.
#[derive(Debug, Clone)]
pub struct City {
    pub map: ElevationMap,
    pub rooftop_sites: Vec<MapPoint>,
}

pub fn random_city(cfg: &CityConfig, seed: u64) -> City {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size_px;
    let mut heights = vec![0.0; n * n];

    let bumps: Vec<(f64, f64, f64, f64)> = (0..cfg.hills)
        .map(|_| {
            (
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(n as f64 / 10.0..n as f64 / 3.0),
                rng.gen_range(-0.5..1.0) * cfg.hill_height_m,
            )
        })
        .collect();
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            heights[r * n + c] = bumps
                .iter()
                .map(|(bx, by, s, a)| {
                    let d2 = (x - bx).powi(2) + (y - by).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum::<f64>();
        }
    }
    let floor = heights.iter().copied().fold(f64::INFINITY, f64::min);
    heights.iter_mut().for_each(|h| *h -= floor);

    let mut sites = Vec::new();
    let (fmin, fmax) = cfg.footprint_px;
    for _ in 0..cfg.buildings {
        let w = rng.gen_range(fmin..=fmax).min(n - 2);
        let h = rng.gen_range(fmin..=fmax).min(n - 2);
        let c0 = rng.gen_range(1..n - w);
        let r0 = rng.gen_range(1..n - h);
        let storey = rng.gen_range(cfg.building_min_m..cfg.building_max_m);
        let base = (r0..r0 + h)
            .flat_map(|r| (c0..c0 + w).map(move |c| (r, c)))
            .map(|(r, c)| heights[r * n + c])
            .fold(0.0f64, f64::max);
        let roof = (base + storey).round();
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                heights[r * n + c] = heights[r * n + c].max(roof);
            }
        }
        // One cell in from each corner, on a cell corner so that every
        // surrounding cell is roof.
        for (cc, rr) in [
            (c0 + 1, r0 + 1),
            (c0 + w - 1, r0 + 1),
            (c0 + 1, r0 + h - 1),
            (c0 + w - 1, r0 + h - 1),
        ] {
            sites.push(MapPoint::new(
                cc as f64 * cfg.cell_size_m,
                rr as f64 * cfg.cell_size_m,
            ));
        }
    }

    let map = ElevationMap::new(
        n,
        n,
        cfg.cell_size_m,
        MapPoint::new(0.0, 0.0),
        heights,
        -9999.0,
    )
    .expect("synthetic map is valid");
    City {
        map,
        rooftop_sites: sites,
    }
}

/// Picks `count` transmitter sites whose `tile_px` tile lies fully inside
/// the map. Rooftop corners are preferred; the rest fall on random cell
/// corners at ground level.
pub fn pick_tx_sites(city: &City, count: usize, tile_px: usize, seed: u64) -> Vec<MapPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = &city.map;
    let half = (tile_px as f64 / 2.0 + 1.0) * map.cell_size_m;
    let inside = |p: &MapPoint| {
        p.x - half >= map.origin.x
            && p.y - half >= map.origin.y
            && p.x + half <= map.origin.x + map.width_m()
            && p.y + half <= map.origin.y + map.height_m()
    };
    let mut roofs: Vec<MapPoint> = city.rooftop_sites.iter().copied().filter(inside).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if !roofs.is_empty() && rng.gen_bool(0.7) {
            let k = rng.gen_range(0..roofs.len());
            out.push(roofs.swap_remove(k));
            continue;
        }
        let lo = (half / map.cell_size_m).ceil() as usize;
        let hi = map.width_px.min(map.height_px) - lo;
        if hi <= lo {
            // Map too small for a fully interior tile; fall back to the centre.
            out.push(MapPoint::new(
                map.origin.x + map.width_m() / 2.0,
                map.origin.y + map.height_m() / 2.0,
            ));
            continue;
        }
        let c = rng.gen_range(lo..=hi);
        let r = rng.gen_range(lo..=hi);
        out.push(MapPoint::new(
            map.origin.x + c as f64 * map.cell_size_m,
            map.origin.y + r as f64 * map.cell_size_m,
        ));
    }
    out
}

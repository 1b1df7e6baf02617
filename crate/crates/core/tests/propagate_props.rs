use pgrefine::geodata::synth::{random_city, CityConfig};
use pgrefine::geodata::{rotate_tile, ElevationMap, GridTile, MapPoint};
use pgrefine::propagate::*;

const F: f64 = 910e6;

fn flat(n: usize) -> ElevationMap {
    ElevationMap::flat(n, n, 1.0, 0.0)
}

fn geom(gamma: f64) -> LinkGeometry {
    LinkGeometry::new(2.0, 1.5, F).unwrap().with_reflection(gamma)
}

fn offset(tile: &GridTile, row: usize, col: usize) -> (f64, f64) {
    let n = tile.size_px;
    (
        GridTile::centered_offset(n, col) * tile.cell_size_m,
        GridTile::centered_offset(n, row) * tile.cell_size_m,
    )
}

#[test]
fn flat_map_is_free_space() {
    let map = flat(64);
    let tx = MapPoint::new(32.0, 32.0);
    let h = rough_estimate(&map, tx, &geom(-0.9), 40, 1).unwrap();
    for i in 0..40 {
        for j in 0..40 {
            let (dx, dy) = offset(&h.tile, i, j);
            let d3 = dx.hypot(dy).hypot(0.5);
            let want = -fspl_db(d3, F).unwrap();
            assert!((h.tile.get(i, j) - want).abs() < 1e-9, "({i},{j})");
        }
    }
}

/// A one-cell wall crossing the TX row, checked against the scalar models.
#[test]
fn wall_matches_scalar_knife_edge() {
    let mut map = flat(81);
    let wall_h = 10.0;
    for r in 0..81 {
        map.set(r, 45, wall_h);
    }
    let tx = MapPoint::new(40.5, 40.5);
    let g = geom(-0.9);
    let rough = rough_estimate(&map, tx, &g, 41, 1).unwrap();
    let oracle = oracle_truth(&map, tx, &g, 41).unwrap();
    for m in 15..20usize {
        let d = m as f64;
        let (d1, d2) = (5.0, d - 5.0);
        let line = 2.0 + (1.5 - 2.0) * d1 / d;
        let nu = fresnel_nu(wall_h - line, d1, d2, g.wavelength_m).unwrap();
        let want = -(fspl_db(d.hypot(0.5), F).unwrap() + knife_edge_loss_db(nu));
        let got = rough.tile.get(20, 20 + m);
        assert!((got - want).abs() < 1e-9, "m={m}: {got} vs {want}");
        // Side edges sit below the sub-paths, so Deygout adds nothing and
        // two-ray stays off behind the wall.
        assert!((oracle.tile.get(20, 20 + m) - want).abs() < 1e-9);
    }
}

#[test]
fn generators_are_pure() {
    let city = random_city(&CityConfig { size_px: 90, buildings: 12, ..CityConfig::default() }, 5);
    let tx = city.rooftop_sites[0];
    let g = LinkGeometry::default();
    let dense = rough_estimate(&city.map, tx, &g, 40, 1).unwrap();
    let again = rough_estimate(&city.map, tx, &g, 40, 1).unwrap();
    assert_eq!(dense, again);
    assert_eq!(oracle_truth(&city.map, tx, &g, 40).unwrap(), oracle_truth(&city.map, tx, &g, 40).unwrap());
    let coarse = rough_estimate(&city.map, tx, &g, 40, 4).unwrap();
    assert_eq!(coarse.tile.size_px, 40);
    assert!(coarse.tile.values.iter().all(|v| *v <= 0.0));
}

#[test]
fn flat_without_reflection_oracle_equals_dense_rough() {
    let map = flat(70);
    let tx = MapPoint::new(35.0, 35.0);
    let g = geom(0.0);
    let rough = rough_estimate(&map, tx, &g, 50, 1).unwrap();
    let oracle = oracle_truth(&map, tx, &g, 50).unwrap();
    assert_eq!(rough.tile.values, oracle.tile.values);
    assert_eq!(rough.tile.mask, oracle.tile.mask);
}

#[test]
fn two_ray_lobes_on_flat_ground() {
    let map = flat(200);
    let tx = MapPoint::new(100.0, 100.0);
    let g = geom(-0.9);
    let oracle = oracle_truth(&map, tx, &g, 100).unwrap();
    let mut seen = Vec::new();
    for j in [55, 70, 99] {
        let (dx, dy) = offset(&oracle.tile, 50, j);
        let d = dx.hypot(dy);
        let want = (-fspl_db(d.hypot(0.5), F).unwrap()
            + two_ray_gain_db(d, 2.0, 1.5, g.wavelength_m, -0.9))
        .min(0.0);
        assert!((oracle.tile.get(50, j) - want).abs() < 1e-9);
        seen.push(oracle.tile.get(50, j) + fspl_db(d.hypot(0.5), F).unwrap());
    }
    // The interference term differs between distances.
    assert!(seen.iter().any(|s| s.abs() > 0.5));
}

#[test]
fn stacked_walls_lose_at_least_a_single_wall() {
    let mut one = flat(81);
    for r in 0..81 {
        one.set(r, 45, 8.0);
    }
    let mut two = one.clone();
    for r in 0..81 {
        two.set(r, 52, 8.0);
    }
    let tx = MapPoint::new(40.5, 40.5);
    let g = geom(0.0);
    let a = oracle_truth(&one, tx, &g, 41).unwrap();
    let b = oracle_truth(&two, tx, &g, 41).unwrap();
    for m in 13..20 {
        assert!(b.tile.get(20, 20 + m) <= a.tile.get(20, 20 + m) + 1e-12);
    }
    assert!(b.tile.get(20, 39) < a.tile.get(20, 39) - 1.0);
}

#[test]
fn quarter_rotation_equivariance() {
    let city = random_city(&CityConfig { size_px: 80, buildings: 15, ..CityConfig::default() }, 9);
    let map = &city.map;
    let tx = MapPoint::new(map.width_m() / 2.0 + 3.1, map.height_m() / 2.0 - 4.7);
    let g = LinkGeometry::default();
    let base_r = rough_estimate(map, tx, &g, 40, 4).unwrap();
    let base_o = oracle_truth(map, tx, &g, 40).unwrap();
    for q in 1..4u32 {
        let rmap = map.rotated_quarter(q);
        let rtx = map.rotate_point_quarter(tx, q);
        for (base, rot) in [
            (&base_r, rough_estimate(&rmap, rtx, &g, 40, 4).unwrap()),
            (&base_o, oracle_truth(&rmap, rtx, &g, 40).unwrap()),
        ] {
            let want = rotate_tile(&base.tile, -90.0 * q as f64);
            assert_eq!(want.mask, rot.tile.mask, "q={q}");
            for (a, b) in want.values.iter().zip(&rot.tile.values) {
                assert!((a - b).abs() < 1e-9, "q={q}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn free_space_decreases_with_distance() {
    let map = flat(120);
    let tx = MapPoint::new(60.0, 60.0);
    let h = rough_estimate(&map, tx, &geom(0.0), 100, 4).unwrap();
    let row: Vec<f64> = (50..100).map(|j| h.tile.get(50, j)).collect();
    assert!(row.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn oracle_bounded_by_rough_plus_six_db() {
    let city = random_city(&CityConfig { size_px: 100, buildings: 20, ..CityConfig::default() }, 21);
    let g = LinkGeometry::default().with_reflection(0.0);
    for tx in city.rooftop_sites.iter().take(3) {
        let rough = rough_estimate(&city.map, *tx, &g, 50, 1).unwrap();
        let oracle = oracle_truth(&city.map, *tx, &g, 50).unwrap();
        for k in 0..rough.tile.values.len() {
            if rough.tile.mask[k] {
                assert!(oracle.tile.values[k] <= rough.tile.values[k] + 6.0);
            }
        }
    }

    // Gentle terrain keeps the coarse grid within the slack as well.
    let mut hills = flat(120);
    for r in 0..120 {
        for c in 0..120 {
            let (x, y) = (c as f64 / 120.0, r as f64 / 120.0);
            hills.set(r, c, 3.0 * (6.0 * x).sin() * (5.0 * y).cos());
        }
    }
    let tx = MapPoint::new(60.0, 60.0);
    let rough = rough_estimate(&hills, tx, &g, 100, 4).unwrap();
    let oracle = oracle_truth(&hills, tx, &g, 100).unwrap();
    for k in 0..rough.tile.values.len() {
        if rough.tile.mask[k] && oracle.tile.mask[k] {
            assert!(oracle.tile.values[k] <= rough.tile.values[k] + 6.0);
        }
    }
}

#[test]
fn tile_off_the_map_is_masked() {
    let map = flat(60);
    let h = oracle_truth(&map, MapPoint::new(5.0, 5.0), &LinkGeometry::default(), 40).unwrap();
    let valid = h.tile.valid_count();
    assert!(valid > 0 && valid < 40 * 40);
    for k in 0..h.tile.values.len() {
        if !h.tile.mask[k] {
            assert_eq!(h.tile.values[k], 0.0);
        }
    }
}

use pgrefine::geodata::synth::{random_city, CityConfig};
use pgrefine::geodata::{crop_tile, rotate_tile, GridTile, MapPoint};
use proptest::prelude::*;

fn tile(n: usize, values: Vec<f64>, mask: Vec<bool>) -> GridTile {
    GridTile::new(n, 1.0, values, mask).unwrap()
}

fn tile_strategy() -> impl Strategy<Value = GridTile> {
    (2usize..9).prop_flat_map(|n| {
        (
            proptest::collection::vec(-50.0f64..50.0, n * n),
            proptest::collection::vec(any::<bool>(), n * n),
        )
            .prop_map(move |(v, m)| tile(n, v, m))
    })
}

proptest! {
    #[test]
    fn four_quarter_turns_are_identity(t in tile_strategy()) {
        let mut r = t.clone();
        for _ in 0..4 {
            r = rotate_tile(&r, 90.0);
        }
        prop_assert_eq!(r, t);
    }

    #[test]
    fn quarter_turns_compose(t in tile_strategy(), a in 0u32..4, b in 0u32..4) {
        let ab = rotate_tile(&rotate_tile(&t, 90.0 * a as f64), 90.0 * b as f64);
        prop_assert_eq!(ab, rotate_tile(&t, 90.0 * (a + b) as f64));
    }

    #[test]
    fn crop_commutes_with_map_rotation(seed in 0u64..200, q in 1u32..4, dx in -6i32..6, dy in -6i32..6) {
        let city = random_city(&CityConfig { size_px: 40, buildings: 6, ..CityConfig::default() }, seed);
        let map = &city.map;
        // An even tile centred on a cell corner samples cell centres.
        let c = MapPoint::new(
            (20 + dx) as f64 * map.cell_size_m,
            (20 + dy) as f64 * map.cell_size_m,
        );
        let crop = crop_tile(map, c, 16);
        let rotated = crop_tile(&map.rotated_quarter(q), map.rotate_point_quarter(c, q), 16);
        prop_assert_eq!(rotate_tile(&crop, -90.0 * q as f64), rotated);
    }

    #[test]
    fn any_angle_keeps_centre_of_odd_tiles(t in tile_strategy(), angle in 0.0f64..360.0) {
        prop_assume!(t.size_px % 2 == 1);
        let c = t.size_px / 2;
        prop_assume!(t.is_valid(c, c));
        let r = rotate_tile(&t, angle);
        prop_assert!(r.is_valid(c, c));
        prop_assert!((r.get(c, c) - t.get(c, c)).abs() < 1e-9);
    }
}

//! Training samples: transmitter-centred (elevation, rough estimate) inputs
//! paired with reference targets, rotation augmentation, scenario-level
//! splits and on-disk persistence.

mod pgt;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pgt::{PgtArray, PgtData, PGT_MAGIC, PGT_VERSION};

use crate::geodata::synth::{pick_tx_sites, random_city, CityConfig};
use crate::geodata::{crop_tile, rotate_tile, ElevationMap, GridTile, MapPoint};
use crate::propagate::{oracle_truth, rough_estimate, Generator, Heatmap, LinkGeometry};
use crate::{derive_seed, Error, Result, PG_MIN_DB, PG_RANGE_DB};

/// Elevation scale of the model input channel, metres.
pub const ELEVATION_SCALE_M: f64 = 100.0;

/// Maps path gain in dB onto `[0, 1]` over the evaluated range.
pub fn normalize_pg(pg_db: f64) -> f64 {
    ((pg_db - PG_MIN_DB) / PG_RANGE_DB).clamp(0.0, 1.0)
}

pub fn denormalize_pg(v: f64) -> f64 {
    PG_MIN_DB + v * PG_RANGE_DB
}

/// Rounds to the nearest `f32`, the precision samples are stored at.
fn to_f32_precision(v: f64) -> f64 {
    f64::from(v as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scenario_id: u64,
    pub augmentation_index: u32,
    pub augmentation_angle_deg: f64,
    pub cell_size_m: f64,
    pub frequency_hz: f64,
}

/// One training image. All three tiles carry `mask` as their validity and
/// hold zero on invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Terrain heights, metres.
    pub elevation: GridTile,
    /// Rough estimate, normalized.
    pub estimate: GridTile,
    /// Reference path gain, normalized.
    pub target: GridTile,
    pub mask: Vec<bool>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn size_px(&self) -> usize {
        self.mask.len().isqrt()
    }

    /// Channel-major `[elevation, estimate]` model input with elevation
    /// scaled by [`ELEVATION_SCALE_M`] and invalid pixels zero.
    pub fn model_input(&self) -> Vec<f32> {
        model_input(&self.elevation, &self.estimate, &self.mask)
    }

    pub fn target_f32(&self) -> Vec<f32> {
        self.target.values.iter().map(|v| *v as f32).collect()
    }

    /// Target as a dB heatmap.
    pub fn target_heatmap(&self) -> Heatmap {
        Heatmap {
            tile: self.target.map_valid(denormalize_pg),
            generator: Generator::Oracle,
        }
    }

    /// Rough-estimate channel as a dB heatmap.
    pub fn estimate_heatmap(&self) -> Heatmap {
        Heatmap {
            tile: self.estimate.map_valid(denormalize_pg),
            generator: Generator::Rough,
        }
    }
}

/// Builds the two-channel model input from an elevation tile in metres and
/// a normalized estimate tile.
pub fn model_input(elevation: &GridTile, estimate: &GridTile, mask: &[bool]) -> Vec<f32> {
    let n = mask.len();
    let mut out = vec![0f32; 2 * n];
    for k in 0..n {
        if mask[k] {
            out[k] = (elevation.values[k] / ELEVATION_SCALE_M).clamp(0.0, 1.0) as f32;
            out[n + k] = estimate.values[k].clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// How the reference channel of a scenario is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    /// Overrides the ground reflection coefficient of the reference.
    pub reflection_coeff: Option<f64>,
    /// Per-scenario dB offset drawn uniformly from this range.
    pub offset_db: (f64, f64),
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            reflection_coeff: None,
            offset_db: (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub tile_px: usize,
    /// Downsampling of the rough estimate grid.
    pub coarse_factor: usize,
    pub geom: LinkGeometry,
    pub truth: TruthSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            tile_px: 100,
            coarse_factor: 4,
            geom: LinkGeometry::default(),
            truth: TruthSpec::default(),
        }
    }
}

fn normalized(tile: &GridTile, mask: &[bool], offset_db: f64) -> GridTile {
    let mut out = tile.clone();
    for (k, v) in out.values.iter_mut().enumerate() {
        *v = if mask[k] {
            to_f32_precision(normalize_pg(*v + offset_db))
        } else {
            0.0
        };
    }
    out.mask = mask.to_vec();
    out
}

/// Generates the samples of one transmitter placement: the unrotated
/// sample followed by `n_augment - 1` copies rotated by seeded uniform
/// angles in `[0, 360)`. All channels rotate together and the masks are
/// intersected.
pub fn build_scenario(
    map: &ElevationMap,
    tx: MapPoint,
    cfg: &ScenarioConfig,
    scenario_id: u64,
    n_augment: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n_augment == 0 {
        return Err(Error::domain("n_augment must be at least 1"));
    }
    let rough = rough_estimate(map, tx, &cfg.geom, cfg.tile_px, cfg.coarse_factor)?;
    let truth_geom = match cfg.truth.reflection_coeff {
        Some(g) => cfg.geom.with_reflection(g),
        None => cfg.geom,
    };
    let truth = oracle_truth(map, tx, &truth_geom, cfg.tile_px)?;
    let elevation = crop_tile(map, tx, cfg.tile_px);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.truth.offset_db;
    let offset = if hi > lo { rng.gen_range(lo..hi) } else { lo };

    let mut out = Vec::with_capacity(n_augment);
    for a in 0..n_augment {
        let angle = if a == 0 { 0.0 } else { rng.gen_range(0.0..360.0) };
        let (el, est, tru) = if a == 0 {
            (elevation.clone(), rough.tile.clone(), truth.tile.clone())
        } else {
            (
                rotate_tile(&elevation, angle),
                rotate_tile(&rough.tile, angle),
                rotate_tile(&truth.tile, angle),
            )
        };
        let mask: Vec<bool> = (0..el.mask.len())
            .map(|k| el.mask[k] && est.mask[k] && tru.mask[k])
            .collect();
        let mut elevation = el;
        for (k, v) in elevation.values.iter_mut().enumerate() {
            *v = if mask[k] { to_f32_precision(*v) } else { 0.0 };
        }
        elevation.mask = mask.clone();
        out.push(Sample {
            elevation,
            estimate: normalized(&est, &mask, 0.0),
            target: normalized(&tru, &mask, offset),
            mask,
            meta: SampleMeta {
                scenario_id,
                augmentation_index: a as u32,
                augmentation_angle_deg: angle,
                cell_size_m: map.cell_size_m,
                frequency_hz: cfg.geom.frequency_hz,
            },
        });
    }
    Ok(out)
}

/// A seeded corpus of synthetic cities with several transmitters each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub city: CityConfig,
    pub cities: usize,
    pub tx_per_city: usize,
    pub n_augment: usize,
    pub scenario: ScenarioConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            city: CityConfig::default(),
            cities: 8,
            tx_per_city: 6,
            n_augment: 4,
            scenario: ScenarioConfig::default(),
        }
    }
}

/// Generates every scenario of the corpus. Scenario ids run from 0 in city
/// order; generation is parallel across scenarios and the result is
/// independent of the thread count.
pub fn synthetic_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut jobs = Vec::new();
    let mut maps = Vec::new();
    for c in 0..cfg.cities {
        let city = random_city(&cfg.city, derive_seed(seed, 2 * c as u64));
        let sites = pick_tx_sites(
            &city,
            cfg.tx_per_city,
            cfg.scenario.tile_px,
            derive_seed(seed, 2 * c as u64 + 1),
        );
        for tx in sites {
            jobs.push((c, tx));
        }
        maps.push(city.map);
    }
    let per_scenario: Vec<Vec<Sample>> = jobs
        .par_iter()
        .enumerate()
        .map(|(id, (c, tx))| {
            let scenario_seed = derive_seed(seed, (1 << 32) + id as u64);
            build_scenario(&maps[*c], *tx, &cfg.scenario, id as u64, cfg.n_augment, scenario_seed)
        })
        .collect::<Result<_>>()?;
    Ok(per_scenario.into_iter().flatten().collect())
}

/// Distinct scenario ids of a sample list, ascending.
pub fn scenario_ids(samples: &[Sample]) -> Vec<u64> {
    samples
        .iter()
        .map(|s| s.meta.scenario_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitPlan {
    /// Partitions samples into (train, test) by scenario.
    pub fn apply<'a>(&self, samples: &'a [Sample]) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
        let train: BTreeSet<u64> = self.train_ids.iter().copied().collect();
        samples
            .iter()
            .partition(|s| train.contains(&s.meta.scenario_id))
    }
}

/// Seeded scenario-level split; the first `round(ratio * N)` shuffled ids
/// (ties rounding up) form the training side.
pub fn split_scenarios(ids: &[u64], ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::domain(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut ids: Vec<u64> = ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 scenarios to split, got {n}")));
    }
    let n_train = (ratio * n as f64 + 0.5).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::domain(format!(
            "ratio {ratio} over {n} scenarios leaves one side empty"
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_ids = ids[..n_train].to_vec();
    let mut test_ids = ids[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitPlan {
        train_ids,
        test_ids,
        ratio,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tile_px: usize,
    samples: Vec<String>,
}

const CHANNELS: [&str; 3] = ["elevation", "estimate", "target"];

/// Directory name of a stored sample, `s<scenario>_a<augmentation>`.
pub fn sample_dir_name(meta: &SampleMeta) -> String {
    format!("s{:06}_a{:04}", meta.scenario_id, meta.augmentation_index)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes samples under `dir`, one sub-directory per sample ordered by
/// (scenario id, augmentation index), plus `manifest.json`.
pub fn write_samples(samples: &[Sample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by_key(|s| (s.meta.scenario_id, s.meta.augmentation_index));
    let tile_px = order.first().map_or(0, |s| s.size_px());
    let mut names = Vec::with_capacity(order.len());
    for s in order {
        let n = s.size_px();
        if n != tile_px {
            return Err(Error::Shape(format!("mixed tile sizes {n} and {tile_px}")));
        }
        let name = sample_dir_name(&s.meta);
        let sd = dir.join(&name);
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        let dims = vec![n as u32, n as u32];
        for (ch, tile) in CHANNELS.iter().zip([&s.elevation, &s.estimate, &s.target]) {
            PgtArray {
                dims: dims.clone(),
                data: PgtData::F32(tile.values.iter().map(|v| *v as f32).collect()),
            }
            .write(sd.join(format!("{ch}.pgt")))?;
        }
        PgtArray {
            dims,
            data: PgtData::Bool(s.mask.clone()),
        }
        .write(sd.join("mask.pgt"))?;
        write_json(&sd.join("meta.json"), &s.meta)?;
        names.push(name);
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            format: "pgrefine-samples".into(),
            version: 1,
            tile_px,
            samples: names,
        },
    )
}

fn read_square(path: &Path, dims: &[u32], len: usize) -> Result<usize> {
    match dims {
        [a, b] if a == b && (*a as usize) * (*a as usize) == len => Ok(*a as usize),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a square 2-D array, got dims {dims:?}"),
        }),
    }
}

/// Reads a directory written by [`write_samples`].
pub fn read_samples(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::Version {
            path: mpath,
            found: manifest.version.min(255) as u8,
            expected: 1,
        });
    }
    manifest
        .samples
        .par_iter()
        .map(|name| {
            let sd = dir.join(name);
            let mp = sd.join("meta.json");
            let meta: SampleMeta = serde_json::from_str(
                &std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?,
            )?;
            let kp = sd.join("mask.pgt");
            let (dims, mask) = PgtArray::read(&kp)?.into_bool(&kp)?;
            let n = read_square(&kp, &dims, mask.len())?;
            let mut tiles = Vec::with_capacity(3);
            for ch in CHANNELS {
                let p = sd.join(format!("{ch}.pgt"));
                let (dims, values) = PgtArray::read(&p)?.into_f32(&p)?;
                if read_square(&p, &dims, values.len())? != n {
                    return Err(Error::Format {
                        path: p,
                        msg: "channel size differs from mask".into(),
                    });
                }
                tiles.push(GridTile {
                    size_px: n,
                    cell_size_m: meta.cell_size_m,
                    values: values.into_iter().map(f64::from).collect(),
                    mask: mask.clone(),
                });
            }
            let target = tiles.pop().unwrap();
            let estimate = tiles.pop().unwrap();
            let elevation = tiles.pop().unwrap();
            Ok(Sample {
                elevation,
                estimate,
                target,
                mask,
                meta,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::synth::CityConfig;

    fn small_city(seed: u64) -> (ElevationMap, MapPoint) {
        let cfg = CityConfig {
            size_px: 48,
            buildings: 8,
            footprint_px: (3, 8),
            ..CityConfig::default()
        };
        let city = random_city(&cfg, seed);
        let tx = pick_tx_sites(&city, 1, 21, seed)[0];
        (city.map, tx)
    }

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            tile_px: 21,
            coarse_factor: 1,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn normalization_points() {
        assert_eq!(normalize_pg(-250.0), 0.0);
        assert_eq!(normalize_pg(-50.0), 1.0);
        assert_eq!(normalize_pg(-150.0), 0.5);
        assert_eq!(normalize_pg(-300.0), 0.0);
        assert_eq!(normalize_pg(0.0), 1.0);
        assert!((denormalize_pg(normalize_pg(-137.3)) + 137.3).abs() < 1e-9);
        assert_eq!(denormalize_pg(0.5), -150.0);
    }

    #[test]
    fn single_augment_is_unrotated() {
        let (map, tx) = small_city(1);
        let s = build_scenario(&map, tx, &small_cfg(), 4, 1, 9).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].meta.augmentation_angle_deg, 0.0);
        assert_eq!(s[0].meta.scenario_id, 4);
        let oracle = oracle_truth(&map, tx, &small_cfg().geom, 21).unwrap();
        for k in 0..s[0].mask.len() {
            if s[0].mask[k] {
                let want = normalize_pg(oracle.tile.values[k]);
                assert!((s[0].target.values[k] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn augmentation_contract() {
        let (map, tx) = small_city(2);
        let a = build_scenario(&map, tx, &small_cfg(), 0, 6, 11).unwrap();
        let b = build_scenario(&map, tx, &small_cfg(), 0, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let el0 = a[0].elevation.center_value();
        let pg0 = a[0].target.center_value();
        for s in &a {
            let n = s.size_px();
            assert_eq!(n, 21);
            assert!((0.0..360.0).contains(&s.meta.augmentation_angle_deg));
            // Centre pixel survives any rotation.
            assert_eq!(s.elevation.center_value(), el0);
            assert_eq!(s.target.center_value(), pg0);
            for k in 0..n * n {
                for t in [&s.elevation, &s.estimate, &s.target] {
                    assert_eq!(t.mask[k], s.mask[k]);
                    if !s.mask[k] {
                        assert_eq!(t.values[k], 0.0);
                    }
                }
                if s.mask[k] {
                    assert!((0.0..=1.0).contains(&s.estimate.values[k]));
                    assert!((0.0..=1.0).contains(&s.target.values[k]));
                }
            }
        }
        assert!(a[1..].iter().any(|s| s.mask.iter().any(|m| !m)));
        assert!(build_scenario(&map, tx, &small_cfg(), 0, 0, 1).is_err());
    }

    #[test]
    fn truth_offset_shifts_target() {
        let (map, tx) = small_city(3);
        let mut cfg = small_cfg();
        let base = build_scenario(&map, tx, &cfg, 0, 1, 5).unwrap();
        cfg.truth.offset_db = (2.0, 2.0);
        let shifted = build_scenario(&map, tx, &cfg, 0, 1, 5).unwrap();
        let k = base[0].mask.iter().position(|m| *m).unwrap();
        let d = denormalize_pg(shifted[0].target.values[k]) - denormalize_pg(base[0].target.values[k]);
        assert!((d - 2.0).abs() < 1e-3, "{d}");
        assert_eq!(base[0].estimate, shifted[0].estimate);
    }

    #[test]
    fn split_rules() {
        let ids: Vec<u64> = (0..10).collect();
        let p = split_scenarios(&ids, 0.6, 1).unwrap();
        assert_eq!((p.train_ids.len(), p.test_ids.len()), (6, 4));
        assert_eq!(split_scenarios(&ids, 0.6, 1).unwrap(), p);
        let mut all: Vec<u64> = p.train_ids.iter().chain(&p.test_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        let differing = (2..102).filter(|s| split_scenarios(&ids, 0.6, *s).unwrap() != p).count();
        assert!(differing >= 95, "{differing}");
        assert!(matches!(split_scenarios(&ids, 0.99, 1), Err(Error::Domain(_))));
        assert!(split_scenarios(&ids, 0.0, 1).is_err());
        assert!(split_scenarios(&[3], 0.5, 1).is_err());
        // 0.25 * 10 = 2.5 rounds up.
        assert_eq!(split_scenarios(&ids, 0.25, 0).unwrap().train_ids.len(), 3);
    }

    #[test]
    fn split_keeps_augmentations_together() {
        let (map, tx) = small_city(4);
        let mut samples = Vec::new();
        for id in 0..5 {
            samples.extend(build_scenario(&map, tx, &small_cfg(), id, 3, id).unwrap());
        }
        let plan = split_scenarios(&scenario_ids(&samples), 0.6, 2).unwrap();
        let (train, test) = plan.apply(&samples);
        assert_eq!(train.len() + test.len(), 15);
        for s in &test {
            assert!(!plan.train_ids.contains(&s.meta.scenario_id));
        }
        assert_eq!(train.len(), 9);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (map, tx) = small_city(5);
        let mut samples = build_scenario(&map, tx, &small_cfg(), 7, 3, 1).unwrap();
        samples.extend(build_scenario(&map, tx, &small_cfg(), 2, 2, 1).unwrap());
        write_samples(&samples, dir.path()).unwrap();
        let back = read_samples(dir.path()).unwrap();
        let mut want = samples.clone();
        want.sort_by_key(|s| (s.meta.scenario_id, s.meta.augmentation_index));
        assert_eq!(back, want);
        assert!(dir.path().join("s000007_a0002/target.pgt").exists());

        let p = dir.path().join("s000002_a0000/mask.pgt");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[1] = b'?';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_samples(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_sample_list() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("empty");
        write_samples(&[], &out).unwrap();
        assert!(out.join("manifest.json").exists());
        assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);
        assert!(read_samples(&out).unwrap().is_empty());
    }

    #[test]
    fn model_input_layout() {
        let (map, tx) = small_city(6);
        let s = &build_scenario(&map, tx, &small_cfg(), 0, 2, 3).unwrap()[1];
        let x = s.model_input();
        let n = s.mask.len();
        assert_eq!(x.len(), 2 * n);
        for k in 0..n {
            if !s.mask[k] {
                assert_eq!((x[k], x[n + k]), (0.0, 0.0));
            } else {
                assert!((0.0..=1.0).contains(&x[k]));
                assert_eq!(x[n + k], s.estimate.values[k] as f32);
            }
        }
    }
}

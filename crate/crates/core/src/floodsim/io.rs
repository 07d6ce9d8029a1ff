//! On-disk suite layout.
//!
//! A suite directory holds `meta.json` and three raw little-endian f32 arrays:
//!
//! * `depths.f32`   `[scenario][frame][cell]`
//! * `features.f32` `[scenario][frame][cell][feature]`
//! * `insitu.f32`   `[scenario][frame][cell][channel]`
//!
//! Cells are row-major over the grid. Terrain and task instances live in `meta.json`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::scenario::{EvacTask, MatchTask, Region, Scenario, ScenarioSuite, FEATURE_DIM, INSITU_DIM};
use super::terrain::Terrain;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "dfsense-suite/1";
pub const META_FILE: &str = "meta.json";
pub const DEPTHS_FILE: &str = "depths.f32";
pub const FEATURES_FILE: &str = "features.f32";
pub const INSITU_FILE: &str = "insitu.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub scenarios: usize,
    pub window: usize,
    pub cells: usize,
    pub features: usize,
    pub insitu: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub seed: u64,
    pub initial_volume: f64,
    pub rain_volume: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteMeta {
    pub version: String,
    pub layout: String,
    pub seed: u64,
    pub shapes: Shapes,
    pub config: ScenarioConfig,
    pub terrain: Terrain,
    pub evac: EvacTask,
    pub matching: MatchTask,
    pub scenarios: Vec<ScenarioMeta>,
}

fn write_f32(path: &Path, parts: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = parts.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn save_suite(suite: &ScenarioSuite, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let region = &suite.region;
    let meta = SuiteMeta {
        version: FORMAT_VERSION.into(),
        layout: "little-endian f32, row-major: depths[scenario][frame][cell], \
                 features[scenario][frame][cell][feature], insitu[scenario][frame][cell][channel]; \
                 features = precip_mm, elevation_m, dist_to_channel, roughness; \
                 insitu = depth_m, depth_change_m"
            .into(),
        seed: region.config.seed,
        shapes: Shapes {
            scenarios: suite.len(),
            window: region.window(),
            cells: region.n_cells(),
            features: FEATURE_DIM,
            insitu: INSITU_DIM,
        },
        config: region.config.clone(),
        terrain: region.terrain.clone(),
        evac: region.evac.clone(),
        matching: region.matching.clone(),
        scenarios: suite
            .scenarios
            .iter()
            .map(|s| ScenarioMeta {
                seed: s.seed,
                initial_volume: s.initial_volume,
                rain_volume: s.rain_volume.clone(),
            })
            .collect(),
    };
    let meta_path = dir.join(META_FILE);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let all = |f: fn(&Scenario) -> &Vec<f32>| suite.scenarios.iter().flat_map(move |s| f(s).iter().copied());
    write_f32(&dir.join(DEPTHS_FILE), all(|s| &s.depths))?;
    write_f32(&dir.join(FEATURES_FILE), all(|s| &s.features))?;
    write_f32(&dir.join(INSITU_FILE), all(|s| &s.insitu))?;
    Ok(())
}

pub fn load_suite(dir: &Path) -> Result<ScenarioSuite> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SuiteMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Format {
            path: meta_path.clone(),
            reason: format!("unsupported version {:?}", meta.version),
        });
    }
    let sh = &meta.shapes;
    if sh.features != FEATURE_DIM || sh.insitu != INSITU_DIM || sh.scenarios != meta.scenarios.len() {
        return Err(Error::Format {
            path: meta_path.clone(),
            reason: "shape block disagrees with this build".into(),
        });
    }
    let frame = sh.window * sh.cells;
    let depths = read_f32(&dir.join(DEPTHS_FILE), sh.scenarios * frame)?;
    let features = read_f32(&dir.join(FEATURES_FILE), sh.scenarios * frame * FEATURE_DIM)?;
    let insitu = read_f32(&dir.join(INSITU_FILE), sh.scenarios * frame * INSITU_DIM)?;

    let region = Region::from_parts(meta.config, meta.terrain, meta.evac, meta.matching)?;
    if region.n_cells() != sh.cells || region.window() != sh.window {
        return Err(Error::Format {
            path: meta_path.clone(),
            reason: "config grid or window disagrees with stored shapes".into(),
        });
    }
    let scenarios = meta
        .scenarios
        .into_iter()
        .enumerate()
        .map(|(k, m)| {
            let s = Scenario {
                seed: m.seed,
                window: sh.window,
                n_cells: sh.cells,
                depths: depths[k * frame..(k + 1) * frame].to_vec(),
                features: features[k * frame * FEATURE_DIM..(k + 1) * frame * FEATURE_DIM].to_vec(),
                insitu: insitu[k * frame * INSITU_DIM..(k + 1) * frame * INSITU_DIM].to_vec(),
                initial_volume: m.initial_volume,
                rain_volume: m.rain_volume,
            };
            s.validate()?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioSuite {
        region: Arc::new(region),
        scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floodsim::{run_suite, MatchConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ScenarioConfig {
            rows: 8,
            cols: 9,
            count: 3,
            seed: 5,
            matching: MatchConfig { aircraft: 4, hangars: 6 },
            ..ScenarioConfig::default()
        };
        let suite = run_suite(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_suite(&suite, dir.path()).unwrap();
        let back = load_suite(dir.path()).unwrap();
        assert_eq!(back.scenarios, suite.scenarios);
        assert_eq!(back.region.terrain, suite.region.terrain);
        assert_eq!(back.region.evac, suite.region.evac);
        assert_eq!(back.region.matching, suite.region.matching);
        assert_eq!(back.region.config, suite.region.config);

        let again = tempfile::tempdir().unwrap();
        save_suite(&back, again.path()).unwrap();
        for f in [META_FILE, DEPTHS_FILE, FEATURES_FILE, INSITU_FILE] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn truncated_array_is_a_format_error() {
        let cfg = ScenarioConfig {
            rows: 6,
            cols: 6,
            count: 1,
            matching: MatchConfig { aircraft: 2, hangars: 2 },
            ..ScenarioConfig::default()
        };
        let suite = run_suite(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_suite(&suite, dir.path()).unwrap();
        fs::write(dir.path().join(DEPTHS_FILE), [0u8; 3]).unwrap();
        assert!(matches!(load_suite(dir.path()), Err(Error::Format { .. })));
    }
}

//! Hazy/clean pair synthesis, patch sampling and dataset manifests.

pub mod png_io;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DehazeError, Result};
use crate::haze::{synthesize_haze, transmission_from_depth, AtmosphericLight, DepthMap, HazeParams};
use crate::image::Image;

pub use png_io::{read_depth, read_image, write_depth, write_image, DEFAULT_DEPTH_SCALE};
pub use synth::{generate_depth, synthetic_scene, DepthKind};

/// Scattering coefficients sampled for training data.
pub const BETA_GRID: [f64; 11] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5];
/// Bounds of each sampled airlight component.
pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);
pub const PATCH_SIZE: usize = 50;

/// Seed of entry `index` in a dataset generated from `global`.
///
/// A SplitMix64 step, so any entry can be regenerated on its own.
pub fn entry_seed(global: u64, index: u64) -> u64 {
    let mut z = global.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn entry_rng(global: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(entry_seed(global, index))
}

pub fn sample_haze_params<R: Rng>(rng: &mut R) -> HazeParams {
    let beta = BETA_GRID[rng.random_range(0..BETA_GRID.len())];
    let (lo, hi) = AIRLIGHT_RANGE;
    let rgb = std::array::from_fn(|_| rng.random_range(lo..=hi));
    HazeParams {
        beta,
        airlight: AtmosphericLight::new(rgb).expect("sampled inside (0, 1]"),
    }
}

/// Draws haze parameters and renders the hazy observation of `clean`.
pub fn make_hazy_pair<R: Rng>(clean: &Image, depth: &DepthMap, rng: &mut R) -> Result<(Image, HazeParams)> {
    if clean.dims() != depth.dims() {
        return Err(DehazeError::invalid(format!(
            "image is {:?} but depth is {:?}",
            clean.dims(),
            depth.dims()
        )));
    }
    let params = sample_haze_params(rng);
    let t = transmission_from_depth(depth, params.beta)?;
    Ok((synthesize_haze(clean, &t, &params.airlight)?, params))
}

/// Co-located crops of a hazy image and its clean counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub hazy: Image,
    pub clean: Image,
    pub entry: usize,
    pub top: usize,
    pub left: usize,
    pub beta: f64,
}

/// Cuts `count` square patches at uniformly drawn positions.
pub fn extract_patches<R: Rng>(
    hazy: &Image,
    clean: &Image,
    size: usize,
    count: usize,
    entry: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    if hazy.dims() != clean.dims() {
        return Err(DehazeError::invalid(format!(
            "hazy is {:?} but clean is {:?}",
            hazy.dims(),
            clean.dims()
        )));
    }
    let (h, w) = hazy.dims();
    if size == 0 || h < size || w < size {
        return Err(DehazeError::invalid(format!(
            "{h}x{w} image cannot hold a {size}x{size} patch"
        )));
    }
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            Ok(PatchPair {
                hazy: hazy.crop(top, left, size, size)?,
                clean: clean.crop(top, left, size, size)?,
                entry,
                top,
                left,
                beta,
            })
        })
        .collect()
}

/// A full-size training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub hazy: Image,
    pub clean: Image,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub depth_path: PathBuf,
    pub hazy_path: PathBuf,
    pub beta: f64,
    pub airlight: AtmosphericLight,
    pub rng_seed: u64,
}

/// Index of a synthesized dataset. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    pub entries: Vec<ManifestEntry>,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

fn base_dir(manifest_path: &Path) -> &Path {
    manifest_path.parent().unwrap_or(Path::new(""))
}

impl DatasetManifest {
    pub const SCHEMA_VERSION: u32 = 1;
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DehazeError::invalid(e.to_string()))
    }

    /// Parses and range-checks a manifest; `origin` is only used in errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| DehazeError::CorruptManifest {
            path: origin.to_path_buf(),
            reason,
        };
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        if m.schema_version != Self::SCHEMA_VERSION {
            return Err(DehazeError::VersionMismatch {
                expected: Self::SCHEMA_VERSION,
                found: m.schema_version,
            });
        }
        if !(m.depth_scale.is_finite() && m.depth_scale > 0.0) {
            return Err(corrupt(format!("depth_scale must be positive, got {}", m.depth_scale)));
        }
        for (i, e) in m.entries.iter().enumerate() {
            if !BETA_GRID.iter().any(|b| (b - e.beta).abs() < 1e-9) {
                return Err(corrupt(format!(
                    "entry {i}: beta {} is not on the sampling grid",
                    e.beta
                )));
            }
            let (lo, hi) = AIRLIGHT_RANGE;
            if e.airlight.rgb().iter().any(|&a| !(lo..=hi).contains(&a)) {
                return Err(corrupt(format!(
                    "entry {i}: airlight {:?} outside [{lo}, {hi}]",
                    e.airlight.rgb()
                )));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DehazeError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| DehazeError::io(path, e))
    }

    /// Reads every entry's images and depth map, checking that they agree in size.
    pub fn load_pairs(&self, manifest_path: &Path) -> Result<Vec<TrainingPair>> {
        let base = base_dir(manifest_path);
        self.entries
            .iter()
            .map(|e| {
                let clean = read_image(&base.join(&e.clean_path))?;
                let hazy = read_image(&base.join(&e.hazy_path))?;
                let depth = read_depth(&base.join(&e.depth_path), self.depth_scale)?;
                if hazy.dims() != clean.dims() || depth.dims() != clean.dims() {
                    return Err(DehazeError::invalid(format!(
                        "entry {}: clean {:?}, hazy {:?} and depth {:?} disagree",
                        e.clean_path.display(),
                        clean.dims(),
                        hazy.dims(),
                        depth.dims()
                    )));
                }
                Ok(TrainingPair {
                    hazy,
                    clean,
                    beta: e.beta,
                })
            })
            .collect()
    }
}

/// One clean scene with its depth, the input of dataset synthesis.
#[derive(Clone, Debug)]
pub struct SceneSource {
    pub name: String,
    pub clean: Image,
    pub depth: DepthMap,
}

/// `count` square synthetic scenes, alternating ramp depth (even indices) and
/// step depth (odd indices) with the step drifting right by three columns per scene.
pub fn toy_sources(count: usize, size: usize, seed: u64) -> Result<Vec<SceneSource>> {
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 {
                DepthKind::Ramp { min: 0.2, max: 2.5 }
            } else {
                DepthKind::Step {
                    column: (size * 5 / 16 + 3 * i).min(size),
                    near: 0.3,
                    far: 2.0,
                }
            };
            Ok(SceneSource {
                name: format!("toy{i}"),
                clean: synthetic_scene(size, size, seed.wrapping_add(i as u64))?,
                depth: generate_depth(&kind, size, size)?,
            })
        })
        .collect()
}

/// Synthesizes one hazy observation per source into `out_dir` and writes the
/// manifest there.
///
/// Clean image and depth are quantized to their file precision first, so the
/// stored hazy image is exactly what the stored inputs produce.
pub fn make_dataset(sources: &[SceneSource], out_dir: &Path, seed: u64, depth_scale: f64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| DehazeError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let clean = png_io::quantize_image(&src.clean);
        let depth = png_io::quantize_depth(&src.depth, depth_scale)?;
        let rng_seed = entry_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (hazy, params) = make_hazy_pair(&clean, &depth, &mut rng)?;
        let entry = ManifestEntry {
            clean_path: format!("{:04}_{}_clean.png", i, src.name).into(),
            depth_path: format!("{:04}_{}_depth.png", i, src.name).into(),
            hazy_path: format!("{:04}_{}_hazy.png", i, src.name).into(),
            beta: params.beta,
            airlight: params.airlight,
            rng_seed,
        };
        write_image(&clean, &out_dir.join(&entry.clean_path))?;
        write_depth(&depth, &out_dir.join(&entry.depth_path), depth_scale)?;
        write_image(&hazy, &out_dir.join(&entry.hazy_path))?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        schema_version: DatasetManifest::SCHEMA_VERSION,
        depth_scale,
        entries,
    };
    manifest.save(&out_dir.join(DatasetManifest::FILE_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(h: usize, w: usize) -> Image {
        Image::from_fn_clamped(h, w, |y, x, c| ((y * 7 + x * 3 + c * 5) % 17) as f64 / 16.0).unwrap()
    }

    #[test]
    fn beta_frequencies_are_uniform() {
        let mut rng = entry_rng(42, 0);
        let mut counts = [0usize; 11];
        let n = 10_000;
        for _ in 0..n {
            let p = sample_haze_params(&mut rng);
            let i = BETA_GRID.iter().position(|&b| b == p.beta).expect("beta on the grid");
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 11.0).abs() <= 0.01);
        }
    }

    #[test]
    fn airlight_mean_and_range() {
        let mut rng = entry_rng(43, 0);
        let n = 10_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let a = sample_haze_params(&mut rng).airlight.rgb();
            for c in 0..3 {
                assert!((0.7..=1.0).contains(&a[c]));
                sums[c] += a[c];
            }
        }
        for s in sums {
            assert!((s / n as f64 - 0.85).abs() <= 0.005);
        }
    }

    #[test]
    fn hazy_pair_is_deterministic_and_matches_synthesis() {
        let clean = scene(6, 7);
        let depth = generate_depth(&DepthKind::Ramp { min: 0.0, max: 2.0 }, 6, 7).unwrap();
        let (a, pa) = make_hazy_pair(&clean, &depth, &mut entry_rng(1, 3)).unwrap();
        let (b, pb) = make_hazy_pair(&clean, &depth, &mut entry_rng(1, 3)).unwrap();
        assert_eq!((&a, pa), (&b, pb));
        let t = transmission_from_depth(&depth, pa.beta).unwrap();
        assert_eq!(a, synthesize_haze(&clean, &t, &pa.airlight).unwrap());
        let wrong = DepthMap::filled(6, 6, 1.0).unwrap();
        assert!(make_hazy_pair(&clean, &wrong, &mut entry_rng(1, 3)).is_err());
    }

    #[test]
    fn patches_copy_exact_windows() {
        let clean = scene(60, 70);
        let hazy = Image::from_fn_clamped(60, 70, |y, x, c| clean.get(y, x, c) * 0.5 + 0.4).unwrap();
        let patches = extract_patches(&hazy, &clean, PATCH_SIZE, 20, 3, 0.7, &mut entry_rng(5, 0)).unwrap();
        assert_eq!(patches.len(), 20);
        for p in &patches {
            assert_eq!(p.hazy.dims(), (50, 50));
            assert_eq!((p.entry, p.beta), (3, 0.7));
            for y in 0..50 {
                for x in 0..50 {
                    for c in 0..3 {
                        assert_eq!(p.clean.get(y, x, c), clean.get(p.top + y, p.left + x, c));
                        assert_eq!(p.hazy.get(y, x, c), hazy.get(p.top + y, p.left + x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn exact_fit_has_one_position() {
        let img = scene(50, 50);
        for p in extract_patches(&img, &img, 50, 5, 0, 1.0, &mut entry_rng(0, 0)).unwrap() {
            assert_eq!((p.top, p.left), (0, 0));
        }
        assert!(extract_patches(&scene(49, 60), &scene(49, 60), 50, 1, 0, 1.0, &mut entry_rng(0, 0)).is_err());
    }

    #[test]
    fn entry_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..100).map(|i| entry_seed(7, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_ne!(entry_seed(7, 0), entry_seed(8, 0));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sources: Vec<SceneSource> = (0..3)
            .map(|i| SceneSource {
                name: format!("s{i}"),
                clean: synthetic_scene(12, 16, i).unwrap(),
                depth: generate_depth(&DepthKind::Ramp { min: 0.5, max: 3.0 }, 12, 16).unwrap(),
            })
            .collect();
        let m = make_dataset(&sources, dir.path(), 11, DEFAULT_DEPTH_SCALE).unwrap();
        let path = dir.path().join(DatasetManifest::FILE_NAME);
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(DatasetManifest::parse(&m.to_json().unwrap(), &path).unwrap(), m);

        let pairs = loaded.load_pairs(&path).unwrap();
        assert_eq!(pairs.len(), 3);
        // the stored hazy image is reproducible from the stored inputs
        let e = &loaded.entries[1];
        let clean = read_image(&dir.path().join(&e.clean_path)).unwrap();
        let depth = read_depth(&dir.path().join(&e.depth_path), loaded.depth_scale).unwrap();
        let (hazy, params) = make_hazy_pair(&clean, &depth, &mut ChaCha8Rng::seed_from_u64(e.rng_seed)).unwrap();
        assert_eq!(params.beta, e.beta);
        assert_eq!(png_io::quantize_image(&hazy), pairs[1].hazy);
    }

    #[test]
    fn manifest_errors() {
        let p = Path::new("m.json");
        assert!(matches!(
            DatasetManifest::parse("{", p),
            Err(DehazeError::CorruptManifest { .. })
        ));
        assert!(matches!(
            DatasetManifest::parse(r#"{"schema_version": 2, "entries": []}"#, p),
            Err(DehazeError::VersionMismatch { .. })
        ));
        let bad_beta = r#"{"schema_version": 1, "entries": [{"clean_path": "a", "depth_path": "b",
            "hazy_path": "c", "beta": 0.55, "airlight": [0.8, 0.8, 0.8], "rng_seed": 1}]}"#;
        assert!(matches!(
            DatasetManifest::parse(bad_beta, p),
            Err(DehazeError::CorruptManifest { .. })
        ));
        let m = DatasetManifest::parse(r#"{"schema_version": 1, "entries": []}"#, p).unwrap();
        assert_eq!(m.depth_scale, 10.0);
    }
}

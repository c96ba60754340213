//! On-disk paired datasets.
//!
//! ```text
//! DIR/manifest.json
//! DIR/pair_0000/{clean.png, degraded.png, scene.json}
//! ...
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_scene, Difficulty, ScenePair};
use crate::error::{Error, Result};
use crate::imageio::{quantize, read_image, write_image};
use crate::tensor::{Float, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_PAIRS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Directory relative to the dataset root.
    pub dir: String,
    /// Generator seed of this pair.
    pub seed: u64,
    pub size: usize,
    pub difficulty: Difficulty,
    /// SHA-256 of the 8-bit clean then degraded pixels, hex.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub difficulty: Difficulty,
    pub pairs: Vec<ManifestEntry>,
}

/// Contents of a pair's `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub id: String,
    pub background: [f64; 3],
    pub beta: [f64; 3],
    pub depth_seed: u64,
    pub size: usize,
    pub difficulty: Difficulty,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator seed of pair `index` of a dataset with seed `seed`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Hex SHA-256 over the quantised clean and degraded images.
pub fn images_checksum<T: Float>(clean: &Tensor<T>, degraded: &Tensor<T>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(quantize(clean)?.0);
    h.update(quantize(degraded)?.0);
    Ok(hex::encode(h.finalize()))
}

pub fn pair_checksum(pair: &ScenePair) -> Result<String> {
    images_checksum(&pair.clean, &pair.degraded)
}

/// Reads the `(clean, degraded)` images of a pair and checks them against
/// the manifest's size and checksum.
pub fn load_pair<T: Float>(root: &Path, entry: &ManifestEntry) -> Result<(Tensor<T>, Tensor<T>)> {
    let dir = root.join(&entry.dir);
    let clean: Tensor<T> = read_image(&dir.join("clean.png"))?;
    let degraded: Tensor<T> = read_image(&dir.join("degraded.png"))?;
    let want = [3, entry.size, entry.size];
    if clean.shape() != want || degraded.shape() != want {
        return Err(Error::InvalidArgument(format!(
            "pair {} does not have the {} x {} size listed in the manifest",
            entry.id, entry.size, entry.size
        )));
    }
    if images_checksum(&clean, &degraded)? != entry.sha256.to_ascii_lowercase() {
        return Err(Error::InvalidArgument(format!("pair {} does not match its manifest checksum", entry.id)));
    }
    Ok((clean, degraded))
}

pub fn regenerate(entry: &ManifestEntry) -> Result<ScenePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    sample_scene(&mut rng, entry.size, entry.difficulty, entry.id.clone())
}

/// Generates `n` pairs and the manifest describing them.
pub fn make_dataset(n: usize, size: usize, seed: u64, difficulty: Difficulty) -> Result<(Vec<ScenePair>, Manifest)> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one pair".into()));
    }
    let mut pairs = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("pair_{i:04}");
        let entry_seed = pair_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
        let pair = sample_scene(&mut rng, size, difficulty, id.clone())?;
        entries.push(ManifestEntry {
            dir: id.clone(),
            id,
            seed: entry_seed,
            size,
            difficulty,
            sha256: pair_checksum(&pair)?,
        });
        pairs.push(pair);
    }
    Ok((
        pairs,
        Manifest {
            seed,
            size,
            difficulty,
            pairs: entries,
        },
    ))
}

/// Writes pairs and manifest under `dir`. An existing dataset (a manifest
/// in `dir`) is only overwritten with `force`.
pub fn write_dataset(dir: &Path, pairs: &[ScenePair], manifest: &Manifest, force: bool) -> Result<()> {
    if dir.join(MANIFEST_FILE).exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already holds a dataset (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    for (pair, entry) in pairs.iter().zip(&manifest.pairs) {
        let pdir = dir.join(&entry.dir);
        fs::create_dir_all(&pdir)?;
        write_image(&pair.clean, &pdir.join("clean.png"))?;
        write_image(&pair.degraded, &pdir.join("degraded.png"))?;
        let scene = SceneFile {
            id: pair.id.clone(),
            background: pair.scene.background,
            beta: pair.scene.beta,
            depth_seed: pair.depth_seed,
            size: entry.size,
            difficulty: pair.difficulty,
        };
        fs::write(pdir.join("scene.json"), serde_json::to_vec_pretty(&scene)?)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

fn safe_relative(dir: &str) -> bool {
    let p = Path::new(dir);
    !dir.is_empty()
        && p.components()
            .all(|c| matches!(c, std::path::Component::Normal(_)))
}

/// Parses and validates manifest JSON.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(bytes)?;
    if m.pairs.is_empty() || m.pairs.len() > MAX_PAIRS {
        return Err(Error::InvalidArgument(format!("manifest lists {} pairs", m.pairs.len())));
    }
    for e in &m.pairs {
        if !safe_relative(&e.dir) {
            return Err(Error::InvalidArgument(format!("pair directory {:?} is not a plain relative path", e.dir)));
        }
        if !e.size.is_power_of_two() || e.size < 16 || e.size > 4096 {
            return Err(Error::InvalidArgument(format!("pair {} has invalid size {}", e.id, e.size)));
        }
        if e.sha256.len() != 64 || !e.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::InvalidArgument(format!("pair {} has a malformed checksum", e.id)));
        }
    }
    Ok(m)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    parse_manifest(&fs::read(dir.join(MANIFEST_FILE))?)
}

pub fn parse_scene(bytes: &[u8]) -> Result<SceneFile> {
    let s: SceneFile = serde_json::from_slice(bytes)?;
    let finite = s.background.iter().chain(&s.beta).all(|v| v.is_finite());
    if !finite || s.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("scene background light outside [0, 1]".into()));
    }
    if !(s.beta[0] >= s.beta[1] && s.beta[1] >= s.beta[2] && s.beta[2] > 0.0) {
        return Err(Error::InvalidArgument("scene attenuation must satisfy beta_r >= beta_g >= beta_b > 0".into()));
    }
    Ok(s)
}

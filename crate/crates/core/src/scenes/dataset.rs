//! Dataset assembly and on-disk format.
//!
//! A dataset directory holds `index.txt` (key=value header followed by one
//! pipe-separated record per sample) and `images.bin` (fixed-size raw
//! H*W*C byte rasters concatenated in id order). The sha256 of both files is
//! the dataset digest.

use super::{generate_scene, IntentionMode, Scene, SceneSpec};
use crate::action::Action;
use crate::error::{Error, Result};
use crate::geometry::{
    build_egocentric_transform, label_positions, resample_unit_arc, Path, Pose,
    UNIT_SPACING_TOL,
};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path as FsPath;

pub const DEFAULT_F: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub path_len: usize,
    /// Fraction of each action group that goes to the train split.
    pub train_fraction: f64,
    /// Largest tolerated relative deviation of per-action counts from count/9.
    pub balance_tolerance: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 900,
            seed: 7,
            image_size: 64,
            path_len: crate::geometry::DEFAULT_PATH_LEN,
            train_fraction: 0.9,
            balance_tolerance: 0.05,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One training/eval tuple: scene reference, unit-spaced path, global
/// intention, per-position local intentions, and speed.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub maneuver: Action,
    pub scene_seed: u64,
    /// Majority intention over the first `default_f` local labels; training
    /// re-draws from the same window each epoch.
    pub a: Action,
    pub local_intentions: Vec<Action>,
    pub path: Path,
    pub speed: f64,
    pub image_offset: u64,
}

pub struct Dataset {
    pub count: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub path_len: usize,
    pub seed: u64,
    pub default_f: usize,
    pub samples: Vec<Sample>,
    images: Vec<u8>,
}

impl Dataset {
    pub fn image_tensor(&self, sample: &Sample) -> Tensor {
        let rec = self.image_record_len();
        let off = sample.image_offset as usize;
        let bytes = &self.images[off..off + rec];
        let (s, c) = (self.image_size, self.image_channels);
        let mut data = vec![0.0; rec];
        for yy in 0..s {
            for xx in 0..s {
                for cc in 0..c {
                    data[cc * s * s + yy * s + xx] = bytes[(yy * s + xx) * c + cc] as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![c, s, s], data)
    }

    pub fn image_bytes(&self, sample: &Sample) -> &[u8] {
        let rec = self.image_record_len();
        let off = sample.image_offset as usize;
        &self.images[off..off + rec]
    }

    fn image_record_len(&self) -> usize {
        self.image_size * self.image_size * self.image_channels
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load(dir: &FsPath) -> Result<Dataset> {
        let index = std::fs::read_to_string(dir.join("index.txt"))?;
        let images = std::fs::read(dir.join("images.bin"))?;
        let mut header = std::collections::HashMap::new();
        let mut samples = Vec::new();
        let mut in_records = false;
        for line in index.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "records" {
                in_records = true;
                continue;
            }
            if !in_records {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad header line '{line}'")))?;
                header.insert(k.to_string(), v.to_string());
            } else {
                samples.push(parse_record(line)?);
            }
        }
        let get = |k: &str| -> Result<String> {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing header key '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad {k}")))
        };
        if get("format")? != "egopath-dataset-v1" {
            return Err(Error::Config("unknown dataset format".into()));
        }
        let ds = Dataset {
            count: parse_usize("count")?,
            image_size: parse_usize("image_size")?,
            image_channels: parse_usize("image_channels")?,
            path_len: parse_usize("path_len")?,
            seed: get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?,
            default_f: parse_usize("default_f")?,
            samples,
            images,
        };
        if ds.samples.len() != ds.count {
            return Err(Error::Config(format!(
                "index declares {} samples, found {}",
                ds.count,
                ds.samples.len()
            )));
        }
        if ds.images.len() != ds.count * ds.image_record_len() {
            return Err(Error::Config("images.bin size mismatch".into()));
        }
        Ok(ds)
    }
}

/// Everything derived for one sample before persistence.
pub struct Synthesized {
    pub spec: SceneSpec,
    pub scene: Scene,
    pub path: Path,
    pub local_intentions: Vec<Action>,
    pub a: Action,
}

/// Rebuild the full sample pipeline for a (maneuver, seed) pair: scene
/// generation, a random global pose, the egocentric transform, unit-spaced
/// resampling, and label transfer.
pub fn synthesize(
    maneuver: Action,
    scene_seed: u64,
    image_size: usize,
    path_len: usize,
) -> Result<Synthesized> {
    let spec = SceneSpec::random_for(maneuver, scene_seed, image_size);
    let scene = generate_scene(&spec)?;

    // The scene trajectory lives in the ego frame. Place it at a random
    // global pose, then map it back the way real logs are processed.
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ POSE_STREAM);
    let pose = Pose::new(
        rng.gen_range(-500.0..500.0),
        rng.gen_range(-500.0..500.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )?;
    let transform = build_egocentric_transform(&pose)?;
    let global = crate::geometry::LabeledTrajectory::new(
        scene
            .trajectory
            .positions
            .iter()
            .map(|&p| transform.apply_inverse(p))
            .collect(),
        scene.trajectory.labels.clone(),
    )?;
    let ego = global.transformed(&transform);
    let path = resample_unit_arc(&ego.positions, path_len)?;
    let violation = path.unit_spacing_violation();
    if violation > UNIT_SPACING_TOL {
        return Err(Error::invalid(format!(
            "unit spacing violated by {violation:e} for seed {scene_seed}"
        )));
    }
    let local_intentions = label_positions(&path, &ego)?;
    let a = super::select_global_intention(
        &local_intentions[..DEFAULT_F.min(local_intentions.len())],
        IntentionMode::Test,
        &mut rng,
    )?;
    Ok(Synthesized { spec, scene, path, local_intentions, a })
}

/// RNG stream separator for the pose draw.
const POSE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct BuildReport {
    pub digest: String,
    pub per_action: [usize; crate::action::ACTION_COUNT],
    pub train_count: usize,
    pub test_count: usize,
}

/// Generate, balance, split, and persist a dataset into `dir`.
pub fn build_dataset(config: &DatasetConfig, dir: &FsPath) -> Result<BuildReport> {
    if config.count < crate::action::ACTION_COUNT {
        return Err(Error::Config("need at least one sample per action".into()));
    }
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::Config("train_fraction outside [0,1]".into()));
    }
    let n_actions = crate::action::ACTION_COUNT;
    let base = config.count / n_actions;
    // Round-robin assignment keeps per-action counts within one of each other.
    let worst_dev = (n_actions as f64) / config.count as f64;
    if worst_dev > config.balance_tolerance && config.count % n_actions != 0 {
        return Err(Error::Config(format!(
            "count {} cannot satisfy balance tolerance {} over {} actions",
            config.count, config.balance_tolerance, n_actions
        )));
    }

    let mut plan: Vec<(usize, Action, u64, Split)> = Vec::with_capacity(config.count);
    let mut per_action = [0usize; crate::action::ACTION_COUNT];
    let mut id = 0usize;
    for (ai, action) in crate::action::ALL_ACTIONS.iter().enumerate() {
        let group = base + usize::from(ai < config.count % n_actions);
        let test_count = ((1.0 - config.train_fraction) * group as f64).round() as usize;
        for j in 0..group {
            let scene_seed = mix_seed(config.seed, id as u64);
            let split = if j + test_count >= group { Split::Test } else { Split::Train };
            plan.push((id, *action, scene_seed, split));
            per_action[ai] += 1;
            id += 1;
        }
    }

    let results: Vec<Result<(Synthesized, usize, Action, u64, Split)>> = plan
        .par_iter()
        .map(|&(id, action, seed, split)| {
            synthesize(action, seed, config.image_size, config.path_len)
                .map(|s| (s, id, action, seed, split))
        })
        .collect();

    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    index.push_str("format=egopath-dataset-v1\n");
    index.push_str(&format!("count={}\n", config.count));
    index.push_str(&format!("image_size={}\n", config.image_size));
    index.push_str("image_channels=3\n");
    index.push_str(&format!("path_len={}\n", config.path_len));
    index.push_str(&format!("seed={}\n", config.seed));
    index.push_str(&format!("default_f={DEFAULT_F}\n"));
    index.push_str("records\n");

    let mut images: Vec<u8> = Vec::with_capacity(
        config.count * config.image_size * config.image_size * 3,
    );
    let (mut train_count, mut test_count) = (0usize, 0usize);
    for r in results {
        let (synth, id, action, seed, split) = r?;
        let offset = images.len() as u64;
        images.extend_from_slice(&synth.scene.image.pixels);
        match split {
            Split::Train => train_count += 1,
            Split::Test => test_count += 1,
        }
        index.push_str(&format_record(&Sample {
            id,
            split,
            maneuver: action,
            scene_seed: seed,
            a: synth.a,
            local_intentions: synth.local_intentions.clone(),
            path: synth.path.clone(),
            speed: synth.scene.speed_mps,
            image_offset: offset,
        }));
        index.push('\n');
    }

    let index_path = dir.join("index.txt");
    let images_path = dir.join("images.bin");
    std::fs::File::create(&index_path)?.write_all(index.as_bytes())?;
    std::fs::File::create(&images_path)?.write_all(&images)?;

    let mut hasher = Sha256::new();
    hasher.update(index.as_bytes());
    hasher.update(&images);
    let digest = hex_string(&hasher.finalize());

    Ok(BuildReport { digest, per_action, train_count, test_count })
}

/// Digest of a persisted dataset (rebuild determinism checks).
pub fn dataset_digest(dir: &FsPath) -> Result<String> {
    let index = std::fs::read(dir.join("index.txt"))?;
    let images = std::fs::read(dir.join("images.bin"))?;
    let mut hasher = Sha256::new();
    hasher.update(&index);
    hasher.update(&images);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn mix_seed(master: u64, idx: u64) -> u64 {
    // splitmix64 step keeps per-sample seeds disjoint across indices.
    let mut z = master ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn format_record(s: &Sample) -> String {
    let path = s
        .path
        .positions()
        .iter()
        .map(|p| format!("{},{}", p[0], p[1]))
        .collect::<Vec<_>>()
        .join(";");
    let labels = s
        .local_intentions
        .iter()
        .map(|a| a.name())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{}|{}|{}|{}|{}|{}|{}|{}|{}",
        s.id,
        s.split.as_str(),
        s.maneuver.name(),
        s.a.name(),
        s.speed,
        s.scene_seed,
        s.image_offset,
        path,
        labels
    )
}

fn parse_record(line: &str) -> Result<Sample> {
    let parts: Vec<&str> = line.split('|').collect();
    if parts.len() != 9 {
        return Err(Error::Config(format!("bad record '{line}'")));
    }
    let bad = |what: &str| Error::Config(format!("bad {what} in record"));
    let positions: Vec<[f64; 2]> = parts[7]
        .split(';')
        .map(|pair| {
            let (x, y) = pair.split_once(',').ok_or_else(|| bad("path"))?;
            Ok([
                x.parse().map_err(|_| bad("path x"))?,
                y.parse().map_err(|_| bad("path y"))?,
            ])
        })
        .collect::<Result<_>>()?;
    let labels: Vec<Action> = parts[8]
        .split(',')
        .map(Action::from_name)
        .collect::<Result<_>>()?;
    Ok(Sample {
        id: parts[0].parse().map_err(|_| bad("id"))?,
        split: Split::parse(parts[1])?,
        maneuver: Action::from_name(parts[2])?,
        a: Action::from_name(parts[3])?,
        speed: parts[4].parse().map_err(|_| bad("speed"))?,
        scene_seed: parts[5].parse().map_err(|_| bad("scene_seed"))?,
        image_offset: parts[6].parse().map_err(|_| bad("image_offset"))?,
        path: Path::new(positions)?,
        local_intentions: labels,
    })
}

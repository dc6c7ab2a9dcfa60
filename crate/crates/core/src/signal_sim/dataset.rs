use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::channel::{add_awgn, complex_gaussian, convolve_causal};
use super::{
    apply_channel, apply_device, gen_preamble, ChannelSpec, ComplexSignal, DeviceProfile,
    ImpairmentSpread, PreambleConfig,
};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
const BYTES_PER_SAMPLE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevicePool {
    /// Devices available for training.
    Known,
    /// Held-out devices, never seen during training.
    Unknown,
}

/// How the channel of each record is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChannelRecipe {
    /// Line-of-sight capture: a random flat complex gain per record
    /// (uniform phase, magnitude in `gain_magnitude`) plus AWGN with SNR
    /// uniform in `snr_db`.
    ///
    /// With `position_taps > 1`, every device additionally sits behind its
    /// own static weak multipath profile (drawn once per device), so
    /// devices captured in one room still see slightly different channels.
    Los {
        gain_magnitude: [f64; 2],
        snr_db: [f64; 2],
        #[serde(default)]
        position_taps: usize,
        #[serde(default)]
        position_echo_db: f64,
    },
    /// A fresh realization of `spec` per record, after a uniform carrier phase.
    Channel { spec: ChannelSpec },
}

impl ChannelRecipe {
    pub fn los() -> Self {
        ChannelRecipe::Los {
            gain_magnitude: [0.9, 1.1],
            snr_db: [20.0, 30.0],
            position_taps: 0,
            position_echo_db: 0.0,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            ChannelRecipe::Los { .. } => "los".to_string(),
            ChannelRecipe::Channel { spec } => spec.tag(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ChannelRecipe::Los {
                gain_magnitude,
                snr_db,
                position_echo_db,
                ..
            } => {
                let ok = gain_magnitude[0] > 0.0
                    && gain_magnitude[0] <= gain_magnitude[1]
                    && snr_db[0] <= snr_db[1]
                    && snr_db.iter().chain(gain_magnitude).all(|v| v.is_finite())
                    && position_echo_db.is_finite();
                if ok {
                    Ok(())
                } else {
                    Err(Error::config("invalid los channel recipe ranges"))
                }
            }
            ChannelRecipe::Channel { spec } => spec.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub name: String,
    pub pool: DevicePool,
    pub num_devices: usize,
    pub per_device: usize,
    /// Record `r` of each device uses recipe `r % channels.len()`.
    pub channels: Vec<ChannelRecipe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub sample_rate: f64,
    pub samples_per_chip: usize,
    pub num_symbols: usize,
    pub known_devices: usize,
    pub unknown_devices: usize,
    pub impairments: ImpairmentSpread,
    /// Explicit profiles for the known pool; drawn from `impairments` when empty.
    pub known_profiles: Vec<DeviceProfile>,
    pub splits: Vec<SplitConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let fir5 = ChannelRecipe::Channel {
            spec: ChannelSpec::multipath(5, 0.5, Some(25.0)),
        };
        Self {
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            samples_per_chip: 5,
            num_symbols: 8,
            known_devices: 8,
            unknown_devices: 5,
            impairments: ImpairmentSpread::default(),
            known_profiles: Vec::new(),
            splits: vec![
                SplitConfig {
                    name: "train".into(),
                    pool: DevicePool::Known,
                    num_devices: 8,
                    per_device: 200,
                    channels: vec![ChannelRecipe::los()],
                },
                SplitConfig {
                    name: "val".into(),
                    pool: DevicePool::Known,
                    num_devices: 8,
                    per_device: 25,
                    channels: vec![ChannelRecipe::los()],
                },
                SplitConfig {
                    name: "test_known".into(),
                    pool: DevicePool::Known,
                    num_devices: 8,
                    per_device: 25,
                    channels: vec![ChannelRecipe::los()],
                },
                SplitConfig {
                    name: "test_unknown_multipath".into(),
                    pool: DevicePool::Unknown,
                    num_devices: 5,
                    per_device: 40,
                    channels: vec![fir5],
                },
            ],
        }
    }
}

impl DatasetConfig {
    pub fn preamble(&self) -> PreambleConfig {
        PreambleConfig {
            sample_rate: self.sample_rate,
            samples_per_chip: self.samples_per_chip,
            num_symbols: self.num_symbols,
            ..PreambleConfig::default()
        }
    }

    pub fn split(&self, name: &str) -> Result<&SplitConfig> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::config(format!("no split named {name:?}")))
    }

    /// Device profiles of a pool, deterministic in `seed`.
    pub fn pool_profiles(&self, pool: DevicePool, seed: u64) -> Result<Vec<DeviceProfile>> {
        let profiles = match pool {
            DevicePool::Known if !self.known_profiles.is_empty() => self.known_profiles.clone(),
            DevicePool::Known => (0..self.known_devices)
                .map(|d| self.impairments.draw(d, &mut rng::stream(seed, "device/known", d as u64)))
                .collect(),
            DevicePool::Unknown => (0..self.unknown_devices)
                .map(|d| {
                    self.impairments
                        .draw(d, &mut rng::stream(seed, "device/unknown", d as u64))
                })
                .collect(),
        };
        let mut seen = BTreeSet::new();
        for p in &profiles {
            p.validate()?;
            if !seen.insert(p.device_id) {
                return Err(Error::DuplicateDevice(p.device_id));
            }
        }
        Ok(profiles)
    }

    pub fn validate(&self) -> Result<()> {
        self.preamble().signal_len();
        let mut names = BTreeSet::new();
        for s in &self.splits {
            if !names.insert(s.name.as_str()) {
                return Err(Error::config(format!("duplicate split name {:?}", s.name)));
            }
            if s.channels.is_empty() {
                return Err(Error::config(format!("split {:?} has no channels", s.name)));
            }
            if s.num_devices == 0 || s.per_device == 0 {
                return Err(Error::config(format!("split {:?} is empty", s.name)));
            }
            for c in &s.channels {
                c.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub device_id: usize,
    pub channel_tag: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub signal_length: usize,
    pub num_devices: usize,
    pub seed: u64,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn record_bytes(&self) -> u64 {
        self.signal_length as u64 * BYTES_PER_SAMPLE
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(malformed(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let size = self.record_bytes();
        for (i, r) in self.records.iter().enumerate() {
            if r.byte_offset % size != 0 {
                return Err(malformed(format!("record {i} offset not aligned")));
            }
            if i > 0 && r.byte_offset <= self.records[i - 1].byte_offset {
                return Err(malformed(format!("record {i} offset not increasing")));
            }
        }
        let ids: BTreeSet<usize> = self.records.iter().map(|r| r.device_id).collect();
        if !self.records.is_empty() && ids.len() != self.num_devices {
            return Err(malformed(format!(
                "num_devices {} but {} distinct ids",
                self.num_devices,
                ids.len()
            )));
        }
        Ok(())
    }
}

/// `<dir>/<name>.iq` and `<dir>/<name>.manifest.json`.
pub fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.iq")),
        dir.join(format!("{name}.manifest.json")),
    )
}

fn position_taps(
    device: usize,
    taps: usize,
    echo_db: f64,
    seed: u64,
    pool: DevicePool,
) -> Vec<Complex64> {
    let label = match pool {
        DevicePool::Known => "position/known",
        DevicePool::Unknown => "position/unknown",
    };
    let mut r = rng::stream(seed, label, device as u64);
    let amp = 10f64.powf(echo_db / 20.0);
    let mut h = vec![Complex64::new(1.0, 0.0)];
    for _ in 1..taps {
        h.push(complex_gaussian(&mut r) * amp);
    }
    h
}

fn synthesize_record(
    clean: &ComplexSignal,
    recipe: &ChannelRecipe,
    device_idx: usize,
    pool: DevicePool,
    seed: u64,
    r: &mut rng::StreamRng,
) -> Result<ComplexSignal> {
    let x = match recipe {
        ChannelRecipe::Los {
            gain_magnitude,
            snr_db,
            position_taps: taps,
            position_echo_db,
        } => {
            let mut x = clean.clone();
            if *taps > 1 {
                let h = position_taps(device_idx, *taps, *position_echo_db, seed, pool);
                x.samples = convolve_causal(&x.samples, &h);
            }
            let mag = if gain_magnitude[1] > gain_magnitude[0] {
                r.random_range(gain_magnitude[0]..gain_magnitude[1])
            } else {
                gain_magnitude[0]
            };
            let gain = Complex64::from_polar(mag, r.random_range(0.0..std::f64::consts::TAU));
            for v in &mut x.samples {
                *v *= gain;
            }
            let snr = if snr_db[1] > snr_db[0] {
                r.random_range(snr_db[0]..snr_db[1])
            } else {
                snr_db[0]
            };
            add_awgn(&x, snr, r)
        }
        ChannelRecipe::Channel { spec } => {
            let phase = Complex64::from_polar(1.0, r.random_range(0.0..std::f64::consts::TAU));
            let rotated =
                ComplexSignal::new(clean.samples.iter().map(|&v| v * phase).collect(), clean.sample_rate);
            apply_channel(&rotated, spec, r)?
        }
    };
    Ok(x)
}

/// Generates one split and writes `<name>.iq` plus `<name>.manifest.json`
/// into `out_dir`. Output is a pure function of `(config, split, seed)`.
pub fn gen_dataset(
    config: &DatasetConfig,
    split: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let split_cfg = config.split(split)?;
    let profiles = config.pool_profiles(split_cfg.pool, seed)?;
    if split_cfg.num_devices > profiles.len() {
        return Err(Error::config(format!(
            "split {split:?} wants {} devices, pool has {}",
            split_cfg.num_devices,
            profiles.len()
        )));
    }
    let preamble = gen_preamble(&config.preamble())?;
    let m = preamble.len();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (iq_path, manifest_path) = split_paths(out_dir, split);
    let file = fs::File::create(&iq_path).map_err(|e| Error::io(&iq_path, e))?;
    let mut writer = BufWriter::new(file);

    let mut records = Vec::with_capacity(split_cfg.num_devices * split_cfg.per_device);
    let record_label = format!("record/{split}");
    let mut index = 0u64;
    for (dev_idx, profile) in profiles.iter().take(split_cfg.num_devices).enumerate() {
        let tx = apply_device(&preamble, profile)?;
        for r in 0..split_cfg.per_device {
            let recipe = &split_cfg.channels[r % split_cfg.channels.len()];
            let mut stream = rng::stream(seed, &record_label, index);
            let x = synthesize_record(&tx, recipe, dev_idx, split_cfg.pool, seed, &mut stream)?;
            let mut buf = Vec::with_capacity(m * BYTES_PER_SAMPLE as usize);
            for v in &x.samples {
                buf.extend_from_slice(&(v.re as f32).to_le_bytes());
                buf.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
            writer.write_all(&buf).map_err(|e| Error::io(&iq_path, e))?;
            records.push(ManifestRecord {
                device_id: profile.device_id,
                channel_tag: recipe.tag(),
                byte_offset: index * m as u64 * BYTES_PER_SAMPLE,
            });
            index += 1;
        }
    }
    writer.flush().map_err(|e| Error::io(&iq_path, e))?;

    let manifest = DatasetManifest {
        records,
        signal_length: m,
        num_devices: split_cfg.num_devices,
        seed,
        format_version: MANIFEST_FORMAT_VERSION,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// A loaded split with dense labels `0..K`.
#[derive(Debug, Clone)]
pub struct LabeledSignals {
    pub signals: Vec<ComplexSignal>,
    pub labels: Vec<usize>,
    pub device_ids: Vec<usize>,
    pub channel_tags: Vec<String>,
    pub num_classes: usize,
}

impl LabeledSignals {
    pub fn new(signals: Vec<ComplexSignal>, device_ids: Vec<usize>) -> Self {
        let tags = vec![String::new(); signals.len()];
        Self::with_tags(signals, device_ids, tags)
    }

    pub fn with_tags(
        signals: Vec<ComplexSignal>,
        device_ids: Vec<usize>,
        channel_tags: Vec<String>,
    ) -> Self {
        let ids: Vec<usize> = device_ids
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labels = device_ids
            .iter()
            .map(|d| ids.binary_search(d).expect("id present"))
            .collect();
        Self {
            signals,
            labels,
            device_ids,
            channel_tags,
            num_classes: ids.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSignals {
        LabeledSignals::with_tags(
            idx.iter().map(|&i| self.signals[i].clone()).collect(),
            idx.iter().map(|&i| self.device_ids[i]).collect(),
            idx.iter().map(|&i| self.channel_tags[i].clone()).collect(),
        )
    }
}

/// Reads a split back from its manifest (the `.iq` file sits beside it).
pub fn read_signals(manifest_path: &Path, sample_rate: f64) -> Result<LabeledSignals> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate(manifest_path)?;
    let name = manifest_path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(".manifest.json"))
        .ok_or_else(|| Error::Malformed {
            path: manifest_path.to_path_buf(),
            reason: "manifest file must be named <name>.manifest.json".into(),
        })?;
    let iq_path = manifest_path.with_file_name(format!("{name}.iq"));
    let bytes = fs::read(&iq_path).map_err(|e| Error::io(&iq_path, e))?;
    let size = manifest.record_bytes();

    let mut signals = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let start = r.byte_offset as usize;
        let end = start + size as usize;
        let chunk = bytes.get(start..end).ok_or_else(|| Error::Malformed {
            path: iq_path.clone(),
            reason: format!("record at offset {} runs past end of file", r.byte_offset),
        })?;
        let samples = chunk
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        signals.push(ComplexSignal::new(samples, sample_rate));
    }
    Ok(LabeledSignals::with_tags(
        signals,
        manifest.records.iter().map(|r| r.device_id).collect(),
        manifest.records.iter().map(|r| r.channel_tag.clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        let mut cfg = DatasetConfig::default();
        for s in &mut cfg.splits {
            s.per_device = 3;
        }
        cfg
    }

    #[test]
    fn record_count_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = DatasetConfig::default();
        cfg.splits.truncate(1);
        let m = gen_dataset(&cfg, "train", 1, dir.path()).unwrap();
        assert_eq!(m.records.len(), 1600);
        let ids: BTreeSet<usize> = m.records.iter().map(|r| r.device_id).collect();
        assert_eq!(ids, (0..8).collect());
        for d in 0..8 {
            assert_eq!(m.records.iter().filter(|r| r.device_id == d).count(), 200);
        }
        let (iq, _) = split_paths(dir.path(), "train");
        assert_eq!(fs::metadata(iq).unwrap().len(), 1600 * 1280 * 8);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = small_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for split in ["train", "test_unknown_multipath"] {
            gen_dataset(&cfg, split, 42, a.path()).unwrap();
            gen_dataset(&cfg, split, 42, b.path()).unwrap();
            let (ia, ma) = split_paths(a.path(), split);
            let (ib, mb) = split_paths(b.path(), split);
            assert_eq!(fs::read(ia).unwrap(), fs::read(ib).unwrap());
            assert_eq!(fs::read(ma).unwrap(), fs::read(mb).unwrap());
        }
        let c = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, "train", 43, c.path()).unwrap();
        let (ia, _) = split_paths(a.path(), "train");
        let (ic, _) = split_paths(c.path(), "train");
        assert_ne!(fs::read(ia).unwrap(), fs::read(ic).unwrap());
    }

    #[test]
    fn round_trips_through_disk() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(&cfg, "test_unknown_multipath", 3, dir.path()).unwrap();
        let (_, mp) = split_paths(dir.path(), "test_unknown_multipath");
        let data = read_signals(&mp, 1e7).unwrap();
        assert_eq!(data.len(), m.records.len());
        assert_eq!(data.num_classes, 5);
        assert!(data.channel_tags.iter().all(|t| t == "fir5"));
        assert!(data.signals.iter().all(|s| s.len() == 1280 && s.is_finite()));
        for w in m.records.windows(2) {
            assert!(w[1].byte_offset > w[0].byte_offset);
            assert_eq!(w[1].byte_offset % m.record_bytes(), 0);
        }
    }

    #[test]
    fn duplicate_profiles_are_rejected() {
        let mut cfg = small_config();
        cfg.known_profiles = vec![DeviceProfile::identity(3), DeviceProfile::identity(3)];
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            gen_dataset(&cfg, "train", 0, dir.path()),
            Err(Error::DuplicateDevice(3))
        ));
    }

    #[test]
    fn known_pool_is_shared_between_splits() {
        let cfg = small_config();
        let a = cfg.pool_profiles(DevicePool::Known, 5).unwrap();
        let b = cfg.pool_profiles(DevicePool::Known, 5).unwrap();
        let u = cfg.pool_profiles(DevicePool::Unknown, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], u[0]);
    }
}

//! Bags, the synthetic bag generator, the on-disk bag and manifest formats,
//! stratified splits and instance subsampling.
//!
//! # Bag file layout (little-endian)
//!
//! | offset | size      | field                     |
//! |--------|-----------|---------------------------|
//! | 0      | 8         | magic `MILBAG01`          |
//! | 8      | 4         | `u32` instance count N    |
//! | 12     | 4         | `u32` feature dim D       |
//! | 16     | 4         | `u32` label               |
//! | 20     | 4         | `u32` reserved, must be 0 |
//! | 24     | 4·N·D     | `f32` features, row-major |

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BAG_MAGIC: &[u8; 8] = b"MILBAG01";
pub const BAG_HEADER_LEN: usize = 24;

/// One multiple-instance example.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: usize,
    /// `N × D` instance features.
    pub features: Matrix,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: usize, features: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if !features.is_finite() {
            return Err(Error::Numeric("bag features must be finite".into()));
        }
        Ok(Self {
            id: id.into(),
            label,
            features,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// `⌈fraction·n⌉` clamped to `[1, n]`, tolerant of representation error in
/// `fraction` (so `0.3·10` gives 3, not 4).
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub bags_per_class: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Fraction of witness instances in a non-negative bag, in `(0, 1]`.
    pub witness_rate: f64,
    /// Distance of the witness mean from the origin along its class axis.
    pub separation: f64,
    /// Per-coordinate standard deviation of every instance.
    pub noise: f64,
    pub label_flip: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            dim: 32,
            bags_per_class: 50,
            min_instances: 20,
            max_instances: 60,
            witness_rate: 0.1,
            separation: 2.0,
            noise: 1.0,
            label_flip: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.dim < self.n_classes - 1 {
            return fail(format!(
                "dim {} cannot hold {} class directions",
                self.dim,
                self.n_classes - 1
            ));
        }
        if self.bags_per_class == 0 {
            return fail("bags_per_class must be at least 1".into());
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail(format!(
                "invalid bag size range [{}, {}]",
                self.min_instances, self.max_instances
            ));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return fail(format!("witness_rate {} not in (0, 1]", self.witness_rate));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return fail(format!("separation {} must be > 0", self.separation));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return fail(format!("noise {} must be >= 0", self.noise));
        }
        if !(self.label_flip >= 0.0 && self.label_flip < 1.0) {
            return fail(format!("label_flip {} not in [0, 1)", self.label_flip));
        }
        Ok(())
    }

    pub fn n_bags(&self) -> usize {
        self.n_classes * self.bags_per_class
    }
}

/// Generates `bags_per_class` bags for each class.
///
/// Class-0 bags hold only background instances `N(0, σ²I)`. A class-`c` bag
/// additionally carries `⌈r·N⌉` witnesses drawn from `N(δ·e_{c−1}, σ²I)` at
/// random positions. Features are stored at `f32` precision so bags survive
/// the on-disk format unchanged.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Bag>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bags = Vec::with_capacity(cfg.n_bags());
    for class in 0..cfg.n_classes {
        for _ in 0..cfg.bags_per_class {
            let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
            let mut features = Matrix::zeros(n, cfg.dim);
            for v in features.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * cfg.noise;
            }
            if class > 0 {
                let k = ceil_count(cfg.witness_rate, n);
                for row in index::sample(&mut rng, n, k) {
                    features.row_mut(row)[class - 1] += cfg.separation;
                }
            }
            features
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
            let label = if cfg.label_flip > 0.0 && rng.random::<f64>() < cfg.label_flip {
                let other = rng.random_range(0..cfg.n_classes - 1);
                if other >= class {
                    other + 1
                } else {
                    other
                }
            } else {
                class
            };
            let id = format!("bag{:05}", bags.len());
            bags.push(Bag::new(id, label, features)?);
        }
    }
    Ok(bags)
}

/// Serializes a bag to the binary layout documented at module level.
pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds u32")))
    };
    let (n, d) = bag.features.shape();
    let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * n * d);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&as_u32(n, "instance count")?.to_le_bytes());
    out.extend_from_slice(&as_u32(d, "feature dim")?.to_le_bytes());
    out.extend_from_slice(&as_u32(bag.label, "label")?.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in bag.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_bag(bytes: &[u8], id: impl Into<String>) -> Result<Bag> {
    if let Some(i) = BAG_MAGIC
        .iter()
        .zip(bytes)
        .position(|(expected, actual)| expected != actual)
    {
        let message = if i >= 6 {
            "unsupported bag format version"
        } else {
            "bad magic, not a bag file"
        };
        return Err(format_error(i, message));
    }
    if bytes.len() < BAG_HEADER_LEN {
        return Err(format_error(
            bytes.len(),
            format!(
                "truncated header: expected {BAG_HEADER_LEN} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let n = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    let label = read_u32(bytes, 16) as usize;
    if read_u32(bytes, 20) != 0 {
        return Err(format_error(20, "reserved field must be zero"));
    }
    if n == 0 {
        return Err(format_error(8, "bag has no instances"));
    }
    if d == 0 {
        return Err(format_error(12, "feature dimension is zero"));
    }
    let expected = (BAG_HEADER_LEN as u64) + 4 * n as u64 * d as u64;
    if bytes.len() as u64 != expected {
        return Err(format_error(
            bytes.len().min(expected as usize),
            format!(
                "length mismatch: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[BAG_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let features = Matrix::new(n, d, data)?;
    if let Some(i) = features.data().iter().position(|v| !v.is_finite()) {
        return Err(format_error(
            BAG_HEADER_LEN + 4 * i,
            "non-finite feature value",
        ));
    }
    Bag::new(id, label, features)
}

pub fn write_bag(bag: &Bag, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_bag(bag)?)?;
    Ok(())
}

/// Reads a bag file; the bag id is the file stem.
pub fn read_bag(path: impl AsRef<Path>) -> Result<Bag> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&bytes, id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// One manifest line: `<relative-path>,<label>,<split>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: SplitName,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Config(format!("manifest line {}: {m}", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [path, label, split] = fields[..] else {
            return Err(bad("expected `<path>,<label>,<split>`"));
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(path),
            label: label.parse().map_err(|_| bad("label is not an integer"))?,
            split: split.parse().map_err(|_| bad("split must be train, val or test"))?,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# path,label,split")?;
    for e in entries {
        writeln!(f, "{},{},{}", e.path.display(), e.label, e.split)?;
    }
    Ok(())
}

/// Loads every bag listed in a manifest, resolving paths against the
/// manifest's directory. Manifest and file labels must agree.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(Bag, SplitName)>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let bag = read_bag(base.join(&e.path))?;
            if bag.label != e.label {
                return Err(Error::Config(format!(
                    "{}: manifest label {} disagrees with file label {}",
                    e.path.display(),
                    e.label,
                    bag.label
                )));
            }
            Ok((bag, e.split))
        })
        .collect()
}

/// Writes each bag to `<dir>/<id>.bag` and a manifest at `<dir>/manifest.csv`.
pub fn export_dataset(
    dir: impl AsRef<Path>,
    bags: &[Bag],
    split: &DatasetSplit,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(bags.len());
    for bag in bags {
        let name = format!("{}.bag", bag.id);
        write_bag(bag, dir.join(&name))?;
        let Some(s) = split.split_of(&bag.id) else {
            continue;
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(name),
            label: bag.label,
            split: s,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Partition of bag ids into train/val/test.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn ids(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<SplitName> {
        [SplitName::Train, SplitName::Val, SplitName::Test]
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|x| x == id))
    }

    /// Resolves the bags of one split, in split order.
    pub fn select<'a>(&self, bags: &'a [Bag], split: SplitName) -> Vec<&'a Bag> {
        let by_id: BTreeMap<&str, &Bag> = bags.iter().map(|b| (b.id.as_str(), b)).collect();
        self.ids(split)
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }
}

/// Per-class part sizes from cumulative rounding; every part with a positive
/// ratio receives at least one bag.
fn part_sizes(n: usize, ratios: &[f64; 3]) -> Vec<usize> {
    let mut bounds = [0usize; 4];
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        bounds[i + 1] = ((cum * n as f64).round() as usize).min(n);
    }
    bounds[3] = n;
    let mut sizes: Vec<usize> = (0..3).map(|i| bounds[i + 1] - bounds[i]).collect();
    for i in 0..3 {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], 3 - j)).expect("three parts");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

/// Stratified, seeded train/val/test split.
pub fn make_splits(bags: &[Bag], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = bags.iter().find(|b| !seen.insert(b.id.as_str())) {
        return Err(Error::Config(format!("duplicate bag id `{}`", dup.id)));
    }
    let parts = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for b in bags {
        by_class.entry(b.label).or_default().push(b.id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        ratios,
    };
    for (class, mut ids) in by_class {
        if ids.len() < parts {
            return Err(Error::Config(format!(
                "class {class} has {} bags, fewer than the {parts} split parts",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let sizes = part_sizes(ids.len(), &ratios);
        let mut it = ids.into_iter();
        split.train.extend(it.by_ref().take(sizes[0]));
        split.val.extend(it.by_ref().take(sizes[1]));
        split.test.extend(it);
    }
    Ok(split)
}

/// Keeps `⌈ρ·N⌉` instances drawn uniformly without replacement, in their
/// original order.
pub fn subsample_bag<R: Rng + ?Sized>(bag: &Bag, keep_fraction: f64, rng: &mut R) -> Bag {
    let n = bag.n_instances();
    let k = ceil_count(keep_fraction.clamp(f64::MIN_POSITIVE, 1.0), n);
    if k == n {
        return bag.clone();
    }
    let mut rows = index::sample(rng, n, k).into_vec();
    rows.sort_unstable();
    Bag {
        id: bag.id.clone(),
        label: bag.label,
        features: bag.features.select_rows(&rows),
    }
}

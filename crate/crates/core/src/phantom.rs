//! Deterministic multi-contrast ellipsoid phantoms.
//!
//! A phantom is a label map of tissue classes built from 3 to 6 random
//! ellipsoids. Each contrast is rendered by looking up the class intensity,
//! averaging over the 3x3x3 neighbourhood (edge-replicated) and adding clipped
//! Gaussian noise. Because the blur is an average of 27 table values, every
//! noiseless voxel equals `sum_k count_k * table_k / 27` for some class counts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ovol::{write_volume, Sidecar};
use crate::pipeline::{Contrast, SubjectVolumes};
use crate::volume::{Dims, Volume};

pub const MIN_SIZE: usize = 16;
pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_NOISE_STD: f64 = 0.02;
pub const BLUR_TAPS: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Background,
    CsfLike,
    GmLike,
    WmLike,
    LesionLike,
}

impl Tissue {
    pub const ALL: [Tissue; 5] = [
        Tissue::Background,
        Tissue::CsfLike,
        Tissue::GmLike,
        Tissue::WmLike,
        Tissue::LesionLike,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Intensity of each tissue class in each contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueTable {
    /// `(pd, t2, t1)` indexed by [`Tissue::index`].
    pub entries: [(f64, f64, f64); 5],
}

impl Default for TissueTable {
    /// Roughly brain-like orderings (CSF bright in PD/T2, dark in T1; white matter
    /// the reverse). The values are chosen so that no blend of 27 class samples
    /// reproduces a pure class intensity in PD or T2.
    fn default() -> Self {
        TissueTable {
            entries: [
                (0.0, 0.0, 0.0),
                (0.9448, 0.9702, 0.2081),
                (0.8041, 0.6093, 0.5138),
                (0.6880, 0.4006, 0.7993),
                (0.7702, 0.9022, 0.3757),
            ],
        }
    }
}

impl TissueTable {
    pub fn value(&self, tissue: usize, contrast: Contrast) -> f64 {
        let (pd, t2, t1) = self.entries[tissue];
        match contrast {
            Contrast::Pd => pd,
            Contrast::T2 => t2,
            Contrast::T1 => t1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            for v in [e.0, e.1, e.2] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("tissue {i} intensity {v} outside [0, 1]")));
                }
            }
            for other in &self.entries[i + 1..] {
                if e == other {
                    return Err(Error::Config("tissue intensity triples must be distinct".into()));
                }
            }
        }
        Ok(())
    }
}

/// One generated subject with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub seed: u64,
    pub volumes: SubjectVolumes,
    /// Tissue index per voxel before blurring, same layout as the volumes.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rotation about the z axis.
    angle: f64,
    tissue: Tissue,
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let (dz, dy, dx) = (z - self.center[0], y - self.center[1], x - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let ry = c * dy + s * dx;
        let rx = -s * dy + c * dx;
        (dz / self.radii[0]).powi(2) + (ry / self.radii[1]).powi(2) + (rx / self.radii[2]).powi(2) <= 1.0
    }
}

fn random_ellipsoids(rng: &mut Xoshiro256PlusPlus, size: usize) -> Vec<Ellipsoid> {
    let n = size as f64;
    let mid = (n - 1.0) / 2.0;
    let count = rng.random_range(3..=6usize);
    let head = Ellipsoid {
        center: [0; 3].map(|_| mid + rng.random_range(-0.04..0.04) * n),
        radii: [0; 3].map(|_| rng.random_range(0.34..0.44) * n),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        tissue: Tissue::GmLike,
    };
    let mut out = vec![head];
    let inner = [Tissue::WmLike, Tissue::CsfLike, Tissue::GmLike, Tissue::LesionLike];
    for i in 1..count {
        let (radii, tissue) = if i == 1 {
            // Core white-matter-like region.
            (head.radii.map(|r| r * rng.random_range(0.55..0.75)), Tissue::WmLike)
        } else {
            (
                [0; 3].map(|_| rng.random_range(0.08..0.22) * n),
                inner[rng.random_range(0..inner.len())],
            )
        };
        let spread = if i == 1 { 0.1 } else { 0.45 };
        let center = [0, 1, 2].map(|a| head.center[a] + rng.random_range(-spread..spread) * head.radii[a]);
        out.push(Ellipsoid {
            center,
            radii: radii.map(|r| r.max(2.0)),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            tissue,
        });
    }
    out
}

/// Per-voxel counts of each tissue in the edge-replicated 3x3x3 neighbourhood.
pub fn neighbourhood_counts(labels: &[u8], dims: Dims) -> Vec<[u8; 5]> {
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![[0u8; 5]; dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let counts = &mut out[dims.index(z, y, x)];
                for dz in -1..=1isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let zz = clamp(z as isize + dz, dims.nz);
                            let yy = clamp(y as isize + dy, dims.ny);
                            let xx = clamp(x as isize + dx, dims.nx);
                            counts[labels[dims.index(zz, yy, xx)] as usize] += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `sum_k counts[k] * value_k / 27`.
pub fn blend(table: &TissueTable, counts: &[u8; 5], contrast: Contrast) -> f64 {
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| c as f64 * table.value(k, contrast))
        .sum::<f64>()
        / BLUR_TAPS as f64
}

pub fn generate_phantom(
    id: &str,
    seed: u64,
    size: usize,
    table: &TissueTable,
    noise_std: f64,
) -> Result<PhantomSubject> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("phantom size must be >= {MIN_SIZE}, got {size}")));
    }
    if !(0.0..=0.1).contains(&noise_std) {
        return Err(Error::Config(format!("noise_std must be in [0, 0.1], got {noise_std}")));
    }
    table.validate()?;
    let dims = Dims::cube(size);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let shapes = random_ellipsoids(&mut rng, size);

    let mut labels = vec![Tissue::Background as u8; dims.len()];
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                if let Some(e) = shapes.iter().rev().find(|e| e.contains(zf, yf, xf)) {
                    labels[dims.index(z, y, x)] = e.tissue as u8;
                }
            }
        }
    }
    let counts = neighbourhood_counts(&labels, dims);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut render = |contrast: Contrast| -> Result<Volume> {
        let data = counts
            .iter()
            .map(|c| {
                let clean = blend(table, c, contrast);
                let v = if noise_std > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                };
                v.clamp(0.0, 1.0) as f32
            })
            .collect();
        Volume::new(dims, data)
    };
    let pd = render(Contrast::Pd)?;
    let t2 = render(Contrast::T2)?;
    let t1 = render(Contrast::T1)?;
    let sources = BTreeMap::from([(Contrast::Pd, pd), (Contrast::T2, t2)]);
    Ok(PhantomSubject {
        id: id.to_string(),
        seed,
        volumes: SubjectVolumes::new(id, sources, Some(t1))?,
        labels,
    })
}

/// SplitMix64 finalizer; a bijection on `u64`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub master_seed: u64,
    pub noise_std: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train: 35,
            n_val: 5,
            n_test: 10,
            size: DEFAULT_SIZE,
            master_seed: 7,
            noise_std: DEFAULT_NOISE_STD,
        }
    }
}

impl DatasetSpec {
    pub fn dataset_id(&self) -> String {
        format!(
            "phantom-seed{}-size{}-{}-{}-{}",
            self.master_seed, self.size, self.n_train, self.n_val, self.n_test
        )
    }

    /// Seed of the subject at global position `index` (train, then val, then test).
    pub fn subject_seed(&self, index: usize) -> u64 {
        splitmix64(splitmix64(self.master_seed).wrapping_add(index as u64))
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one subject".into()));
        }
        Ok(())
    }

    fn entries(&self) -> [(Split, Vec<SubjectEntry>); 3] {
        let mut index = 0;
        let mut make = |split: Split, n: usize| {
            let v = (0..n)
                .map(|i| {
                    let e = SubjectEntry {
                        id: format!("{}-{i:03}", split.name()),
                        seed: self.subject_seed(index),
                    };
                    index += 1;
                    e
                })
                .collect();
            (split, v)
        };
        [
            make(Split::Train, self.n_train),
            make(Split::Val, self.n_val),
            make(Split::Test, self.n_test),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub master_seed: u64,
    pub size: usize,
    pub noise_std: f64,
    pub table: TissueTable,
    pub train: Vec<SubjectEntry>,
    pub val: Vec<SubjectEntry>,
    pub test: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[SubjectEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<PhantomSubject>,
    pub val: Vec<PhantomSubject>,
    pub test: Vec<PhantomSubject>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PhantomSubject] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn volumes(&self, split: Split) -> Vec<SubjectVolumes> {
        self.split(split).iter().map(|s| s.volumes.clone()).collect()
    }
}

pub fn generate_subjects(spec: &DatasetSpec, table: &TissueTable) -> Result<Dataset> {
    spec.validate()?;
    let [(_, train), (_, val), (_, test)] = spec.entries();
    let render = |entries: &[SubjectEntry]| -> Result<Vec<PhantomSubject>> {
        entries
            .iter()
            .map(|e| generate_phantom(&e.id, e.seed, spec.size, table, spec.noise_std))
            .collect()
    };
    Ok(Dataset {
        train: render(&train)?,
        val: render(&val)?,
        test: render(&test)?,
        manifest: DatasetManifest {
            dataset_id: spec.dataset_id(),
            master_seed: spec.master_seed,
            size: spec.size,
            noise_std: spec.noise_std,
            table: table.clone(),
            train,
            val,
            test,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// File stem of each contrast inside a subject directory.
pub fn contrast_file(c: Contrast) -> &'static str {
    match c {
        Contrast::Pd => "pd.ovol",
        Contrast::T2 => "t2.ovol",
        Contrast::T1 => "t1.ovol",
    }
}

/// Writes a dataset to `out_dir/<subject>/{pd,t2,t1}.ovol` plus `manifest.json`.
pub fn generate_dataset(
    spec: &DatasetSpec,
    table: &TissueTable,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass overwrite to replace)",
                out_dir.display()
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = generate_subjects(spec, table)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        for subject in data.split(split) {
            let dir = out_dir.join(&subject.id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let vols = &subject.volumes;
            let target = vols.target.as_ref().expect("phantoms always carry a target");
            for (contrast, vol) in vols.sources.iter().chain([(&Contrast::T1, target)]) {
                let sidecar = Sidecar {
                    subject: subject.id.clone(),
                    contrast: contrast.name().to_string(),
                    scale_max: 1.0,
                    seed: Some(subject.seed),
                };
                write_volume(&dir.join(contrast_file(*contrast)), vol, Some(&sidecar))?;
            }
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&data.manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(data.manifest)
}

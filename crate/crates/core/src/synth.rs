//! Phantom longitudinal sequences and the on-disk dataset layout.
//!
//! Each subject is a skull ellipse around a textured tissue band with a
//! dark central ventricle. The ventricle area grows linearly with age at a
//! label-dependent rate and the tissue texture is advected along a fixed
//! random flow, so consecutive scans differ in both shape and texture.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ImageTensor, Tensor3, MIN_IMAGE_SIDE};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;

const BACKGROUND: f64 = 0.05;
const SKULL: f64 = 0.85;
const SKULL_THICKNESS: f64 = 0.1;
const TISSUE: f64 = 0.55;
const TISSUE_CONTRAST: f64 = 0.15;
const VENTRICLE: f64 = 0.15;
const TEXTURE_MODES: usize = 6;
const FLOW_MODES: usize = 3;
/// Sub-samples per pixel side; edges are anti-aliased by averaging.
const SUPERSAMPLE: usize = 3;
const FIRST_AGE: (f64, f64) = (55.0, 75.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    CN,
    MCI,
    AD,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::CN, Label::MCI, Label::AD];

    pub fn name(&self) -> &'static str {
        match self {
            Label::CN => "CN",
            Label::MCI => "MCI",
            Label::AD => "AD",
        }
    }
}

/// Scans of one subject, ordered by strictly increasing age.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSequence {
    subject_id: String,
    label: Label,
    scans: Vec<ImageTensor>,
}

impl SubjectSequence {
    pub fn new(subject_id: impl Into<String>, label: Label, scans: Vec<ImageTensor>) -> Result<Self> {
        let subject_id = subject_id.into();
        if scans.len() < 2 {
            return Err(Error::Data(format!("{subject_id}: need at least 2 scans, got {}", scans.len())));
        }
        if scans.windows(2).any(|w| w[1].age_years() <= w[0].age_years()) {
            return Err(Error::Data(format!("{subject_id}: ages must be strictly increasing")));
        }
        if scans.iter().any(|s| !s.same_shape(&scans[0])) {
            return Err(Error::Data(format!("{subject_id}: scans differ in size")));
        }
        Ok(Self { subject_id, label, scans })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn scans(&self) -> &[ImageTensor] {
        &self.scans
    }

    pub fn ages(&self) -> Vec<f64> {
        self.scans.iter().map(|s| s.age_years()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtrophyRates {
    pub cn: f64,
    pub mci: f64,
    pub ad: f64,
}

impl AtrophyRates {
    pub fn of(&self, label: Label) -> f64 {
        match label {
            Label::CN => self.cn,
            Label::MCI => self.mci,
            Label::AD => self.ad,
        }
    }
}

impl Default for AtrophyRates {
    fn default() -> Self {
        Self {
            cn: 0.01,
            mci: 0.025,
            ad: 0.04,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    pub height: usize,
    pub width: usize,
    pub scans_min: usize,
    pub scans_max: usize,
    pub interval_min: f64,
    pub interval_max: f64,
    /// Relative ventricle-area growth per year, per label.
    pub atrophy_rate: AtrophyRates,
    /// Texture displacement per year, in units of the half image width.
    pub texture_drift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 32,
            height: 32,
            width: 32,
            scans_min: 7,
            scans_max: 9,
            interval_min: 0.5,
            interval_max: 2.5,
            atrophy_rate: AtrophyRates::default(),
            texture_drift: 0.02,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.subjects == 0 {
            return fail("subjects must be at least 1".into());
        }
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return fail(format!("image size must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"));
        }
        if self.scans_min < 2 || self.scans_max < self.scans_min {
            return fail(format!(
                "scan counts must satisfy 2 <= min <= max, got {}..{}",
                self.scans_min, self.scans_max
            ));
        }
        if !(self.interval_min > 0.0 && self.interval_max >= self.interval_min && self.interval_max.is_finite()) {
            return fail(format!(
                "intervals must satisfy 0 < min <= max, got {}..{}",
                self.interval_min, self.interval_max
            ));
        }
        let r = self.atrophy_rate;
        if [r.cn, r.mci, r.ad].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("atrophy rates must be finite and >= 0".into());
        }
        if !(self.texture_drift.is_finite() && self.texture_drift >= 0.0) {
            return fail("texture drift must be finite and >= 0".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail("noise sigma must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, count: usize, freq: (f64, f64)) -> Vec<Wave> {
    (0..count)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let f = rng.random_range(freq.0..freq.1);
            Wave {
                kx: f * angle.cos(),
                ky: f * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: rng.random_range(0.5..1.0) / count as f64,
            }
        })
        .collect()
}

fn eval_waves(ws: &[Wave], u: f64, v: f64) -> f64 {
    ws.iter().map(|w| w.amp * (w.kx * u + w.ky * v + w.phase).sin()).sum()
}

/// Geometry and texture of one subject, fixed across its scans.
struct Phantom {
    skull: (f64, f64),
    ventricle: (f64, f64),
    texture: Vec<Wave>,
    flow: [Vec<Wave>; 2],
    rate: f64,
    drift: f64,
}

impl Phantom {
    fn draw(rng: &mut ChaCha8Rng, rate: f64, drift: f64) -> Self {
        Self {
            skull: (rng.random_range(0.8..0.9), rng.random_range(0.86..0.95)),
            ventricle: (rng.random_range(0.15..0.2), rng.random_range(0.24..0.3)),
            texture: waves(rng, TEXTURE_MODES, (4.0, 12.0)),
            flow: [waves(rng, FLOW_MODES, (1.0, 3.0)), waves(rng, FLOW_MODES, (1.0, 3.0))],
            rate,
            drift,
        }
    }

    /// Intensity at normalised coordinates `(u, v)`, `dt` years after
    /// baseline.
    fn value(&self, u: f64, v: f64, dt: f64) -> f64 {
        let rs = ((u / self.skull.0).powi(2) + (v / self.skull.1).powi(2)).sqrt();
        if rs > 1.0 {
            return BACKGROUND;
        }
        if rs > 1.0 - SKULL_THICKNESS {
            return SKULL;
        }
        // Area scales with the square of the axes.
        let grow = (1.0 + self.rate * dt).sqrt();
        let rv = (u / (self.ventricle.0 * grow)).powi(2) + (v / (self.ventricle.1 * grow)).powi(2);
        if rv <= 1.0 {
            return VENTRICLE;
        }
        let shift = self.drift * dt;
        let (fu, fv) = (eval_waves(&self.flow[0], u, v), eval_waves(&self.flow[1], u, v));
        TISSUE + TISSUE_CONTRAST * eval_waves(&self.texture, u - shift * fu, v - shift * fv)
    }

    fn render(&self, h: usize, w: usize, dt: f64) -> Tensor3 {
        let s = SUPERSAMPLE as f64;
        Tensor3::from_fn(h, w, 1, |i, j, _| {
            let mut acc = 0.0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let v = ((i as f64 + (a as f64 + 0.5) / s) / h as f64) * 2.0 - 1.0;
                    let u = ((j as f64 + (b as f64 + 0.5) / s) / w as f64) * 2.0 - 1.0;
                    acc += self.value(u, v, dt);
                }
            }
            acc / (s * s)
        })
    }
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn subject_id(index: usize) -> String {
    format!("S{index:04}")
}

/// Generates subject `index`. The result depends only on `(cfg, index)`.
pub fn synth_subject(cfg: &SynthConfig, index: usize) -> Result<SubjectSequence> {
    cfg.validate()?;
    let label = Label::ALL[index % 3];
    let mut rng = subject_rng(cfg.seed, index);
    let phantom = Phantom::draw(&mut rng, cfg.atrophy_rate.of(label), cfg.texture_drift);
    let count = rng.random_range(cfg.scans_min..=cfg.scans_max);
    let mut age = rng.random_range(FIRST_AGE.0..FIRST_AGE.1);
    let mut elapsed = 0.0;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut scans = Vec::with_capacity(count);
    for k in 0..count {
        if k > 0 {
            let step = if cfg.interval_max > cfg.interval_min {
                rng.random_range(cfg.interval_min..cfg.interval_max)
            } else {
                cfg.interval_min
            };
            age += step;
            elapsed += step;
        }
        let mut img = phantom.render(cfg.height, cfg.width, elapsed);
        if cfg.noise_sigma > 0.0 {
            for p in img.data_mut() {
                *p += noise.sample(&mut rng);
            }
        }
        for p in img.data_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        tensor::quantize_f32(img.data_mut());
        scans.push(ImageTensor::new(img, age)?);
    }
    SubjectSequence::new(subject_id(index), label, scans)
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SubjectSequence>> {
    (0..cfg.subjects).map(|i| synth_subject(cfg, i)).collect()
}

fn stream_of(id: &str) -> u64 {
    // FNV-1a; keeps the removal pattern independent of dataset order.
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Number of scans removed from an `n`-scan sequence at `ratio`.
pub fn removed_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Drops interior scans from every sequence. The first and last scans are
/// always kept; `round(ratio * n)` scans are removed. For a fixed seed the
/// removals are nested: a higher ratio removes a superset of the scans a
/// lower ratio removes.
pub fn apply_missing(dataset: &[SubjectSequence], ratio: f64, seed: u64) -> Result<Vec<SubjectSequence>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("missing ratio must be in [0, 1), got {ratio}")));
    }
    dataset
        .iter()
        .map(|seq| {
            let n = seq.scans.len();
            let k = removed_count(n, ratio);
            if k == 0 {
                return Ok(seq.clone());
            }
            if n < 3 || n - k < 3 {
                return Err(Error::Data(format!(
                    "{}: removing {k} of {n} scans would leave fewer than 3",
                    seq.subject_id
                )));
            }
            let mut interior: Vec<usize> = (1..n - 1).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_of(&seq.subject_id));
            interior.shuffle(&mut rng);
            let drop = &interior[..k];
            let kept = (0..n)
                .filter(|i| !drop.contains(i))
                .map(|i| seq.scans[i].clone())
                .collect();
            SubjectSequence::new(seq.subject_id.clone(), seq.label, kept)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestScan {
    path: String,
    age_years: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestSubject {
    subject_id: String,
    label: Label,
    scans: Vec<ManifestScan>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    subjects: Vec<ManifestSubject>,
}

pub fn write_dataset(dataset: &[SubjectSequence], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let sub = dir.join(&seq.subject_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut scans = Vec::with_capacity(seq.scans.len());
        for (k, scan) in seq.scans.iter().enumerate() {
            let rel = format!("{}/scan_{k:02}.tnig", seq.subject_id);
            tensor::write_map(&dir.join(&rel), scan.pixels())?;
            scans.push(ManifestScan {
                path: rel,
                age_years: scan.age_years(),
            });
        }
        subjects.push(ManifestSubject {
            subject_id: seq.subject_id.clone(),
            label: seq.label,
            scans,
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        subjects,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SubjectSequence>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
    }
    let mut out = Vec::with_capacity(manifest.subjects.len());
    for sub in manifest.subjects {
        let mut scans = Vec::with_capacity(sub.scans.len());
        for scan in &sub.scans {
            let file: PathBuf = dir.join(&scan.path);
            let bytes = fs::read(&file).map_err(|e| Error::format(&file, format!("cannot read scan: {e}")))?;
            let (dims, values) = tensor::decode_tensor(&bytes, &file)?;
            let [h, w] = dims[..] else {
                return Err(Error::format(&file, format!("expected a 2-d scan, got {} dims", dims.len())));
            };
            let img = ImageTensor::from_rows(h, w, values, scan.age_years)
                .map_err(|e| Error::format(&file, e.to_string()))?;
            scans.push(img);
        }
        out.push(
            SubjectSequence::new(sub.subject_id, sub.label, scans).map_err(|e| Error::format(&path, e.to_string()))?,
        );
    }
    Ok(out)
}

//! Volumes, the RVOL file format, intensity preprocessing, body masks,
//! synthetic phantom pairs and patch sampling.
//!
//! RVOL layout: a 256-byte ASCII header followed by little-endian `f32`
//! voxels with W varying fastest, then H, then D. The header holds
//! newline-terminated lines
//!
//! ```text
//! RVOL1
//! extents <D> <H> <W>
//! spacing <sd> <sh> <sw>
//! unit <HU|normalized|arbitrary>
//! modality <MRI|CT|SCT|MASK>
//! comment <free text>
//! ```
//!
//! padded with spaces; byte 255 is `\n`.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use byteorder::{ByteOrder, LittleEndian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RVOL_MAGIC: &str = "RVOL1";
pub const RVOL_HEADER_BYTES: usize = 256;

/// HU clip window used for normalisation.
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3000.0;
const HU_MID: f32 = (HU_MIN + HU_MAX) / 2.0;
const HU_HALF_SPAN: f32 = (HU_MAX - HU_MIN) / 2.0;

/// MRI percentiles mapped to -1 and +1.
pub const MRI_PERCENTILES: (f64, f64) = (0.5, 99.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Mri,
    Ct,
    Sct,
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[serde(rename = "HU")]
    Hu,
    Normalized,
    Arbitrary,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Mri => "MRI",
            Modality::Ct => "CT",
            Modality::Sct => "SCT",
            Modality::Mask => "MASK",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MRI" => Ok(Modality::Mri),
            "CT" => Ok(Modality::Ct),
            "SCT" => Ok(Modality::Sct),
            "MASK" => Ok(Modality::Mask),
            _ => Err(Error::Format(format!("unknown modality {s:?}"))),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Hu => "HU",
            Unit::Normalized => "normalized",
            Unit::Arbitrary => "arbitrary",
        })
    }
}

impl FromStr for Unit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HU" => Ok(Unit::Hu),
            "normalized" => Ok(Unit::Normalized),
            "arbitrary" => Ok(Unit::Arbitrary),
            _ => Err(Error::Format(format!("unknown unit {s:?}"))),
        }
    }
}

/// A 3-D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    /// Millimetres per voxel along D, H, W.
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub unit: Unit,
    pub comment: String,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], modality: Modality, unit: Unit, data: Vec<f32>) -> Result<Self> {
        let v = Self { extents, spacing, modality, unit, comment: String::new(), data };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], modality: Modality, unit: Unit, value: f32) -> Result<Self> {
        Self::new(extents, spacing, modality, unit, vec![value; extents.iter().product()])
    }

    /// Checks extents, spacing and the intensity contract of the unit.
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.extents.iter().product();
        if n == 0 || n != self.data.len() {
            return Err(Error::Data(format!("extents {:?} hold {n} voxels, data has {}", self.extents, self.data.len())));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Data(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume holds non-finite voxels".into()));
        }
        if self.modality == Modality::Mask && self.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("mask voxels must be exactly 0 or 1".into()));
        }
        if self.unit == Unit::Normalized && self.data.iter().any(|v| v.abs() > 1.0) {
            return Err(Error::Data("normalized volume has voxels outside [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, [d, h, w]: [usize; 3]) -> usize {
        (d * self.extents[1] + h) * self.extents[2] + w
    }

    pub fn get(&self, p: [usize; 3]) -> f32 {
        self.data[self.index(p)]
    }

    pub fn same_grid(&self, other: &Volume) -> Result<()> {
        if self.extents != other.extents {
            return Err(Error::Data(format!("extents differ: {:?} vs {:?}", self.extents, other.extents)));
        }
        Ok(())
    }

    /// Copies the box `origin .. origin + extents`.
    pub fn crop(&self, origin: [usize; 3], extents: [usize; 3]) -> Result<Vec<f32>> {
        if (0..3).any(|a| origin[a] + extents[a] > self.extents[a]) {
            return Err(Error::Data(format!("crop {origin:?}+{extents:?} exceeds {:?}", self.extents)));
        }
        let mut out = Vec::with_capacity(extents.iter().product());
        for d in 0..extents[0] {
            for h in 0..extents[1] {
                let start = self.index([origin[0] + d, origin[1] + h, origin[2]]);
                out.extend_from_slice(&self.data[start..start + extents[2]]);
            }
        }
        Ok(out)
    }

    /// `[1, 1, D, H, W]` view of the voxels.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.extents;
        Tensor::new([1, 1, d, h, w], self.data.clone()).expect("volume extents")
    }

    fn derived(&self, modality: Modality, unit: Unit, data: Vec<f32>) -> Volume {
        Volume { extents: self.extents, spacing: self.spacing, modality, unit, comment: String::new(), data }
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comment = comment.into();
        self
    }

    pub fn to_rvol_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        if self.comment.contains('\n') {
            return Err(Error::Format("RVOL comment must be a single line".into()));
        }
        let [d, h, w] = self.extents;
        let [sd, sh, sw] = self.spacing;
        let header = format!(
            "{RVOL_MAGIC}\nextents {d} {h} {w}\nspacing {sd:?} {sh:?} {sw:?}\nunit {}\nmodality {}\ncomment {}\n",
            self.unit, self.modality, self.comment
        );
        if header.len() > RVOL_HEADER_BYTES - 1 || !header.is_ascii() {
            return Err(Error::Format(format!("RVOL header needs {} ASCII bytes, limit is {}", header.len(), RVOL_HEADER_BYTES - 1)));
        }
        let mut out = header.into_bytes();
        out.resize(RVOL_HEADER_BYTES - 1, b' ');
        out.push(b'\n');
        let start = out.len();
        out.resize(start + 4 * self.data.len(), 0);
        LittleEndian::write_f32_into(&self.data, &mut out[start..]);
        Ok(out)
    }

    pub fn from_rvol_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < RVOL_HEADER_BYTES {
            return Err(Error::Format(format!("RVOL file too short ({} bytes)", bytes.len())));
        }
        let header = std::str::from_utf8(&bytes[..RVOL_HEADER_BYTES]).map_err(|_| Error::Format("RVOL header is not text".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(RVOL_MAGIC) {
            return Err(Error::Format("missing RVOL1 magic".into()));
        }
        let (mut extents, mut spacing, mut unit, mut modality, mut comment) = (None, None, None, None, String::new());
        for line in lines {
            let line = line.trim_end_matches(' ');
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "extents" => extents = Some(parse3::<usize>(rest, "extents")?),
                "spacing" => spacing = Some(parse3::<f64>(rest, "spacing")?),
                "unit" => unit = Some(rest.parse::<Unit>()?),
                "modality" => modality = Some(rest.parse::<Modality>()?),
                "comment" => comment = rest.to_string(),
                _ => return Err(Error::Format(format!("unknown RVOL header key {key:?}"))),
            }
        }
        let missing = |k: &str| Error::Format(format!("RVOL header lacks {k}"));
        let extents = extents.ok_or_else(|| missing("extents"))?;
        let spacing = spacing.ok_or_else(|| missing("spacing"))?;
        let unit = unit.ok_or_else(|| missing("unit"))?;
        let modality = modality.ok_or_else(|| missing("modality"))?;
        let n: usize = extents.iter().product();
        let body = &bytes[RVOL_HEADER_BYTES..];
        if body.len() != 4 * n {
            return Err(Error::Format(format!("RVOL payload has {} bytes, extents {extents:?} need {}", body.len(), 4 * n)));
        }
        let mut data = vec![0f32; n];
        LittleEndian::read_f32_into(body, &mut data);
        let mut v = Volume::new(extents, spacing, modality, unit, data)?;
        v.comment = comment;
        Ok(v)
    }

    pub fn write_rvol(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_rvol_bytes()?)?;
        Ok(())
    }

    pub fn read_rvol(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_rvol_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn parse3<T: FromStr>(s: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = s
        .split_whitespace()
        .map(|p| p.parse::<T>().map_err(|_| Error::Format(format!("bad {key} value {p:?}"))))
        .collect::<Result<_>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::Format(format!("{key} needs three values")))
}

pub fn normalize_hu_value(hu: f32) -> f32 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MID) / HU_HALF_SPAN
}

pub fn denormalize_hu_value(x: f32) -> f32 {
    x.clamp(-1.0, 1.0) * HU_HALF_SPAN + HU_MID
}

/// Clips to `[HU_MIN, HU_MAX]` and maps affinely onto `[-1, 1]`.
pub fn normalize_hu(v: &Volume) -> Result<Volume> {
    if v.unit != Unit::Hu {
        return Err(Error::Data(format!("normalize_hu expects HU, got {}", v.unit)));
    }
    Ok(v.derived(v.modality, Unit::Normalized, v.data.iter().map(|&x| normalize_hu_value(x)).collect()))
}

pub fn denormalize_hu(v: &Volume) -> Result<Volume> {
    if v.unit != Unit::Normalized {
        return Err(Error::Data(format!("denormalize_hu expects normalized data, got {}", v.unit)));
    }
    Ok(v.derived(v.modality, Unit::Hu, v.data.iter().map(|&x| denormalize_hu_value(x)).collect()))
}

/// Linear-interpolated percentile of unsorted data, `q` in percent.
pub fn percentile(data: &[f32], q: f64) -> f64 {
    let mut s: Vec<f32> = data.to_vec();
    s.sort_by(f32::total_cmp);
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let t = pos - lo as f64;
    s[lo] as f64 * (1.0 - t) + s[hi] as f64 * t
}

/// Clips MRI intensities to the robust range given by [`MRI_PERCENTILES`] and maps it onto `[-1, 1]`.
pub fn normalize_mri(v: &Volume) -> Result<Volume> {
    if v.unit == Unit::Normalized {
        return Ok(v.clone());
    }
    let lo = percentile(&v.data, MRI_PERCENTILES.0);
    let hi = percentile(&v.data, MRI_PERCENTILES.1);
    let data = if hi > lo {
        v.data.iter().map(|&x| ((2.0 * (x as f64 - lo) / (hi - lo)) - 1.0).clamp(-1.0, 1.0) as f32).collect()
    } else {
        vec![0.0; v.len()]
    };
    Ok(v.derived(v.modality, Unit::Normalized, data))
}

/// Trilinear resampling to `target_mm` spacing. The first voxel centre stays
/// fixed; sample `i` along an axis reads source position `i·target/spacing`,
/// clamped to the last source voxel.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::Config(format!("target spacing must be positive, got {target_mm}")));
    }
    let new_ext: [usize; 3] = std::array::from_fn(|a| ((v.extents[a] as f64 * v.spacing[a] / target_mm).round() as usize).max(1));
    let taps: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
        let n = v.extents[a];
        (0..new_ext[a])
            .map(|i| {
                let x = (i as f64 * target_mm / v.spacing[a]).min((n - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    });
    let mut data = Vec::with_capacity(new_ext.iter().product());
    let [_, sh, sw] = v.extents;
    let at = |d: usize, h: usize, w: usize| v.data[(d * sh + h) * sw + w] as f64;
    for &(d0, d1, td) in &taps[0] {
        for &(h0, h1, th) in &taps[1] {
            for &(w0, w1, tw) in &taps[2] {
                let lerp = |d: usize, h: usize| at(d, h, w0) * (1.0 - tw) + at(d, h, w1) * tw;
                let plane = |d: usize| lerp(d, h0) * (1.0 - th) + lerp(d, h1) * th;
                data.push((plane(d0) * (1.0 - td) + plane(d1) * td) as f32);
            }
        }
    }
    let mut out = v.derived(v.modality, v.unit, data);
    out.extents = new_ext;
    out.spacing = [target_mm; 3];
    Ok(out)
}

/// HU threshold for body voxels.
pub const BODY_THRESHOLD_HU: f32 = -500.0;

/// `HU > -500`, largest 6-connected component, holes filled per axial slice.
pub fn body_mask(ct: &Volume) -> Result<Volume> {
    if ct.unit != Unit::Hu {
        return Err(Error::Data(format!("body_mask expects HU, got {}", ct.unit)));
    }
    let raw: Vec<bool> = ct.data.iter().map(|&v| v > BODY_THRESHOLD_HU).collect();
    let mask = fill_slice_holes(&largest_component(&raw, ct.extents), ct.extents);
    Ok(ct.derived(Modality::Mask, Unit::Arbitrary, mask.iter().map(|&b| b as u8 as f32).collect()))
}

/// Largest component and slice hole filling applied to an existing mask.
pub fn refine_mask(mask: &Volume) -> Result<Volume> {
    if mask.modality != Modality::Mask {
        return Err(Error::Data("refine_mask expects a mask".into()));
    }
    let raw: Vec<bool> = mask.data.iter().map(|&v| v > 0.5).collect();
    let out = fill_slice_holes(&largest_component(&raw, mask.extents), mask.extents);
    Ok(mask.derived(Modality::Mask, mask.unit, out.iter().map(|&b| b as u8 as f32).collect()))
}

/// Voxels strictly above `hu`, as a mask.
pub fn threshold_mask(v: &Volume, hu: f32) -> Result<Volume> {
    if v.unit != Unit::Hu {
        return Err(Error::Data(format!("threshold_mask expects HU, got {}", v.unit)));
    }
    Ok(v.derived(Modality::Mask, Unit::Arbitrary, v.data.iter().map(|&x| (x > hu) as u8 as f32).collect()))
}

fn neighbours6(i: usize, [d, h, w]: [usize; 3]) -> impl Iterator<Item = usize> {
    let (z, rem) = (i / (h * w), i % (h * w));
    let (y, x) = (rem / w, rem % w);
    let cand = [
        (z > 0).then(|| i - h * w),
        (z + 1 < d).then(|| i + h * w),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ];
    cand.into_iter().flatten()
}

fn largest_component(fg: &[bool], ext: [usize; 3]) -> Vec<bool> {
    let mut label = vec![0u32; fg.len()];
    let (mut best, mut best_size, mut next) = (0u32, 0usize, 0u32);
    let mut queue = VecDeque::new();
    for seed in 0..fg.len() {
        if !fg[seed] || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours6(i, ext) {
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best_size {
            best = next;
            best_size = size;
        }
    }
    label.iter().map(|&l| best != 0 && l == best).collect()
}

fn fill_slice_holes(mask: &[bool], [d, h, w]: [usize; 3]) -> Vec<bool> {
    let mut out = mask.to_vec();
    let plane = h * w;
    let mut outside = vec![false; plane];
    let mut queue = VecDeque::new();
    for z in 0..d {
        let sl = &mask[z * plane..(z + 1) * plane];
        outside.iter_mut().for_each(|o| *o = false);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !sl[i] && !outside[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            let cand = [(y > 0).then(|| i - w), (y + 1 < h).then(|| i + w), (x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1)];
            for j in cand.into_iter().flatten() {
                if !sl[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
        for i in 0..plane {
            out[z * plane + i] = !outside[i];
        }
    }
    out
}

/// Tissue classes with fixed MRI/CT appearance. The MRI→CT lookup is
/// deliberately non-monotonic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Soft,
    Fat,
    Bone,
    Fluid,
}

impl Tissue {
    /// MRI signal (air is 0).
    pub fn mri(self) -> f32 {
        match self {
            Tissue::Bone => 0.2,
            Tissue::Soft => 0.5,
            Tissue::Fluid => 0.75,
            Tissue::Fat => 1.0,
        }
    }

    pub fn hu(self) -> f32 {
        match self {
            Tissue::Bone => 1200.0,
            Tissue::Soft => 40.0,
            Tissue::Fluid => 10.0,
            Tissue::Fat => -100.0,
        }
    }
}

pub const AIR_HU: f32 = -1024.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    /// Centre in voxel coordinates (D, H, W).
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub tissue: Tissue,
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

/// Paired phantom description. Later components paint over earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the Gaussian noise added to the MRI.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub components: Vec<Ellipsoid>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_noise() -> f64 {
    0.02
}

impl PhantomSpec {
    /// Body with a fat pad, two bones and a fluid pocket, scaled to `extents`.
    pub fn desk(extents: [usize; 3], seed: u64) -> Self {
        let [d, h, w] = extents.map(|n| n as f64);
        let c = [(d - 1.0) / 2.0, (h - 1.0) / 2.0, (w - 1.0) / 2.0];
        let e = |center: [f64; 3], radii: [f64; 3], tissue| Ellipsoid { center, radii, tissue };
        let components = vec![
            e(c, [0.42 * d, 0.42 * h, 0.38 * w], Tissue::Soft),
            e([c[0], c[1] - 0.22 * h, c[2]], [0.22 * d, 0.12 * h, 0.22 * w], Tissue::Fat),
            e([c[0], c[1] + 0.08 * h, c[2] - 0.16 * w], [0.28 * d, 0.13 * h, 0.1 * w], Tissue::Bone),
            e([c[0], c[1] + 0.08 * h, c[2] + 0.16 * w], [0.28 * d, 0.1 * h, 0.12 * w], Tissue::Bone),
            e([c[0], c[1] + 0.26 * h, c[2]], [0.18 * d, 0.07 * h, 0.08 * w], Tissue::Fluid),
        ];
        Self { extents, spacing: [1.0; 3], seed, noise_std: default_noise(), components }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::Config("phantom: extents must be positive".into()));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("phantom: spacing must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("phantom: noise_std must be nonnegative".into()));
        }
        for (i, c) in self.components.iter().enumerate() {
            for a in 0..3 {
                let (lo, hi) = (c.center[a] - c.radii[a], c.center[a] + c.radii[a]);
                if !(c.radii[a] > 0.0) || lo < -0.5 || hi > self.extents[a] as f64 - 0.5 {
                    return Err(Error::Config(format!("phantom: component {i} leaves the volume along axis {a}")));
                }
            }
        }
        Ok(())
    }
}

/// Voxel-wise tissue labels (`None` is air).
pub fn phantom_labels(spec: &PhantomSpec) -> Vec<Option<Tissue>> {
    let [d, h, w] = spec.extents;
    let mut labels = vec![None; d * h * w];
    for c in &spec.components {
        let mut i = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if c.contains([z, y, x]) {
                        labels[i] = Some(c.tissue);
                    }
                    i += 1;
                }
            }
        }
    }
    labels
}

/// Co-registered `(mri, ct)` pair. MRI is in arbitrary units with additive
/// noise; CT is noise-free HU.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    spec.validate()?;
    let labels = phantom_labels(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(format!("phantom noise: {e}")))?;
    let mri = labels.iter().map(|l| l.map_or(0.0, Tissue::mri) + noise.sample(&mut rng) as f32).collect();
    let ct = labels.iter().map(|l| l.map_or(AIR_HU, Tissue::hu)).collect();
    Ok((
        Volume::new(spec.extents, spec.spacing, Modality::Mri, Unit::Arbitrary, mri)?,
        Volume::new(spec.extents, spec.spacing, Modality::Ct, Unit::Hu, ct)?,
    ))
}

/// Centre voxel of a patch with the given origin.
pub fn patch_center(origin: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| origin[a] + patch[a] / 2)
}

/// Uniform sampler over patch origins whose centre lies in a mask and whose
/// box fits inside the volume.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    pub extents: [usize; 3],
    pub patch: [usize; 3],
    origins: Vec<[usize; 3]>,
}

impl PatchSampler {
    pub fn new(mask: &Volume, patch: [usize; 3]) -> Result<Self> {
        let ext = mask.extents;
        if (0..3).any(|a| patch[a] == 0 || patch[a] > ext[a]) {
            return Err(Error::Data(format!("patch {patch:?} does not fit volume {ext:?}")));
        }
        let mut origins = Vec::new();
        for d in 0..=ext[0] - patch[0] {
            for h in 0..=ext[1] - patch[1] {
                for w in 0..=ext[2] - patch[2] {
                    if mask.get(patch_center([d, h, w], patch)) > 0.5 {
                        origins.push([d, h, w]);
                    }
                }
            }
        }
        if origins.is_empty() {
            return Err(Error::Data(format!("no {patch:?} patch has its centre inside the mask")));
        }
        Ok(Self { extents: ext, patch, origins })
    }

    pub fn candidates(&self) -> usize {
        self.origins.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        self.origins[rng.random_range(0..self.origins.len())]
    }
}

/// MRI and CT crops taken at one origin.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub origin: [usize; 3],
    pub extents: [usize; 3],
    pub mri: Vec<f32>,
    pub ct: Vec<f32>,
}

pub fn crop_pair(mri: &Volume, ct: &Volume, origin: [usize; 3], patch: [usize; 3]) -> Result<PatchPair> {
    mri.same_grid(ct)?;
    Ok(PatchPair { origin, extents: patch, mri: mri.crop(origin, patch)?, ct: ct.crop(origin, patch)? })
}

pub fn sample_patch<R: Rng + ?Sized>(mri: &Volume, ct: &Volume, mask: &Volume, patch: [usize; 3], rng: &mut R) -> Result<PatchPair> {
    mri.same_grid(mask)?;
    let origin = PatchSampler::new(mask, patch)?.sample(rng);
    crop_pair(mri, ct, origin, patch)
}

//! Whole-volume synthesis by overlapping patches with uniform averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::Tensor;
use crate::train::{load_generator, model_config};
use crate::volume::{denormalize_hu, normalize_mri, Modality, Unit, Volume};

/// Window origins along one axis: `0, s, 2s, …`, with the last origin clamped
/// so the window ends at the volume edge.
pub fn axis_origins(n: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || patch > n || stride > patch {
        return Err(Error::Config(format!("window plan needs 0 < stride <= patch <= extent, got extent {n}, patch {patch}, stride {stride}")));
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o.min(n - patch));
        if o + patch >= n {
            break;
        }
        o += stride;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowPlan {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Origins in evaluation order (D outermost, W innermost).
    pub origins: Vec<[usize; 3]>,
    /// Windows covering each voxel.
    pub coverage: Vec<u32>,
}

/// Default stride: half the patch, at least one voxel.
pub fn default_stride(patch: [usize; 3]) -> [usize; 3] {
    patch.map(|p| (p / 2).max(1))
}

pub fn plan_windows(volume: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<SlidingWindowPlan> {
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(volume[a], patch[a], stride[a])).collect::<Result<_>>()?;
    let mut origins = Vec::new();
    for &d in &axes[0] {
        for &h in &axes[1] {
            for &w in &axes[2] {
                origins.push([d, h, w]);
            }
        }
    }
    // coverage is separable: product of per-axis counts
    let per_axis: Vec<Vec<u32>> = (0..3)
        .map(|a| {
            let mut c = vec![0u32; volume[a]];
            for &o in &axes[a] {
                c[o..o + patch[a]].iter_mut().for_each(|v| *v += 1);
            }
            c
        })
        .collect();
    let mut coverage = Vec::with_capacity(volume.iter().product());
    for &cd in &per_axis[0] {
        for &ch in &per_axis[1] {
            for &cw in &per_axis[2] {
                coverage.push(cd * ch * cw);
            }
        }
    }
    Ok(SlidingWindowPlan { volume, patch, stride, origins, coverage })
}

impl SlidingWindowPlan {
    /// One-line description for provenance records.
    pub fn describe(&self) -> String {
        let f = |v: [usize; 3]| format!("{}x{}x{}", v[0], v[1], v[2]);
        format!("patch={} stride={} windows={}", f(self.patch), f(self.stride), self.origins.len())
    }
}

/// Runs `predict` on every window of `plan` and averages overlapping outputs.
/// Contributions are accumulated in 64-bit in plan order, then divided by coverage.
pub fn blend_windows(
    input: &Volume,
    plan: &SlidingWindowPlan,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<f32>> {
    if input.extents != plan.volume {
        return Err(Error::Data(format!("plan is for {:?}, volume is {:?}", plan.volume, input.extents)));
    }
    let [pd, ph, pw] = plan.patch;
    let [_, h, w] = plan.volume;
    let mut acc = vec![0f64; input.len()];
    for &o in &plan.origins {
        let x = Tensor::new([1, 1, pd, ph, pw], input.crop(o, plan.patch)?)?;
        let y = predict(&x)?;
        if y.shape() != x.shape() {
            return Err(Error::Data(format!("window prediction has shape {:?}, expected {:?}", y.shape(), x.shape())));
        }
        let mut src = y.data().chunks(pw);
        for d in 0..pd {
            for hh in 0..ph {
                let row = src.next().expect("patch rows");
                let start = ((o[0] + d) * h + o[1] + hh) * w + o[2];
                acc[start..start + pw].iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
            }
        }
    }
    Ok(acc.iter().zip(&plan.coverage).map(|(&s, &c)| (s / c as f64) as f32).collect())
}

/// Normalised sCT for a normalised MRI.
pub fn synthesize_volume(mri: &Volume, generator: &Generator<f32>, plan: &SlidingWindowPlan) -> Result<Volume> {
    if mri.unit != Unit::Normalized {
        return Err(Error::Data(format!("synthesis expects a normalized MRI, got {}", mri.unit)));
    }
    generator.config.check_extents(plan.patch).map_err(|e| Error::Config(format!("patch {:?} incompatible with generator: {e}", plan.patch)))?;
    let data = blend_windows(mri, plan, |x| generator.predict(x))?;
    let mut out = Volume::new(mri.extents, mri.spacing, Modality::Sct, Unit::Normalized, data)?;
    out.comment = plan.describe();
    Ok(out)
}

/// File-to-file pipeline: read MRI, normalise, synthesise, map back to HU,
/// record provenance in the header comment and write the result.
pub fn synthesize_to_hu(mri_path: &Path, ckpt_path: &Path, out_path: &Path, stride: Option<[usize; 3]>) -> Result<Volume> {
    let (ck, sha) = Checkpoint::read(ckpt_path)?;
    let patch = model_config(&ck)?.train.patch;
    let generator = load_generator(&ck)?;
    let mri = normalize_mri(&Volume::read_rvol(mri_path)?)?;
    let plan = plan_windows(mri.extents, patch, stride.unwrap_or_else(|| default_stride(patch)))?;
    let sct = denormalize_hu(&synthesize_volume(&mri, &generator, &plan)?)?;
    let sct = Volume { modality: Modality::Sct, comment: format!("ckpt_sha256={sha} {}", plan.describe()), ..sct };
    sct.write_rvol(out_path)?;
    Ok(sct)
}

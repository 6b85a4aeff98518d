//! Masked image-quality metrics (MAE, PSNR, SSIM) and Dice overlap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, Volume};

/// Clip span of the HU normalisation window.
pub const DEFAULT_DATA_RANGE: f64 = 4024.0;
/// Reported PSNR for a zero masked error.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        self.c += if self.s.abs() >= x.abs() { (self.s - t) + x } else { (x - t) + self.s };
        self.s = t;
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

fn check_mask(mask: &Volume) -> Result<()> {
    if mask.modality != Modality::Mask {
        return Err(Error::Data(format!("expected a mask volume, got {}", mask.modality)));
    }
    Ok(())
}

fn check_triple(pred: &Volume, reference: &Volume, mask: &Volume) -> Result<()> {
    pred.same_grid(reference)?;
    pred.same_grid(mask)?;
    check_mask(mask)
}

fn masked_mean(pred: &Volume, reference: &Volume, mask: &Volume, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_triple(pred, reference, mask)?;
    let (mut s, mut n) = (Sum::default(), 0usize);
    for ((&p, &r), &m) in pred.data.iter().zip(&reference.data).zip(&mask.data) {
        if m > 0.5 {
            s.add(f(p as f64 - r as f64));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("mask is empty".into()));
    }
    Ok(s.value() / n as f64)
}

/// Mean absolute difference inside the mask.
pub fn mae(pred: &Volume, reference: &Volume, mask: &Volume) -> Result<f64> {
    masked_mean(pred, reference, mask, f64::abs)
}

pub fn masked_mse(pred: &Volume, reference: &Volume, mask: &Volume) -> Result<f64> {
    masked_mean(pred, reference, mask, |d| d * d)
}

/// `10·log10(range² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(pred: &Volume, reference: &Volume, mask: &Volume, data_range: f64) -> Result<f64> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::Config(format!("data_range must be positive, got {data_range}")));
    }
    Ok(psnr_from_mse(masked_mse(pred, reference, mask)?, data_range))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Cubic window edge (odd).
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: DEFAULT_DATA_RANGE }
    }
}

/// Sums of `f(x)` over every full `k`-wide box along the last axis of `[a, b, n]` data,
/// giving `[a, b, n - k + 1]`.
fn box_sum_axis(data: &[f64], ext: [usize; 3], axis: usize, k: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_ext = ext;
    out_ext[axis] = ext[axis] + 1 - k;
    let st = [ext[1] * ext[2], ext[2], 1];
    let mut out = Vec::with_capacity(out_ext.iter().product());
    for d in 0..out_ext[0] {
        for h in 0..out_ext[1] {
            for w in 0..out_ext[2] {
                let base = d * st[0] + h * st[1] + w * st[2];
                let mut s = 0.0;
                for j in 0..k {
                    s += data[base + j * st[axis]];
                }
                out.push(s);
            }
        }
    }
    (out, out_ext)
}

fn box_sum(data: Vec<f64>, ext: [usize; 3], k: usize) -> Vec<f64> {
    let (a, e) = box_sum_axis(&data, ext, 2, k);
    let (b, e) = box_sum_axis(&a, e, 1, k);
    box_sum_axis(&b, e, 0, k).0
}

/// SSIM of one window from its population statistics.
pub fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean local SSIM over cubic windows that lie fully inside the volume and
/// whose centre voxel is in the mask. Windows use uniform weights and
/// population (biased) variances.
pub fn ssim(pred: &Volume, reference: &Volume, mask: &Volume, params: &SsimParams) -> Result<f64> {
    check_triple(pred, reference, mask)?;
    let k = params.window;
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("SSIM window must be odd, got {k}")));
    }
    let ext = pred.extents;
    if ext.iter().any(|&n| n < k) {
        return Err(Error::Data(format!("volume {ext:?} smaller than the {k}^3 SSIM window")));
    }
    let x: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = reference.data.iter().map(|&v| v as f64).collect();
    let sx = box_sum(x.clone(), ext, k);
    let sy = box_sum(y.clone(), ext, k);
    let sxx = box_sum(x.iter().map(|v| v * v).collect(), ext, k);
    let syy = box_sum(y.iter().map(|v| v * v).collect(), ext, k);
    let sxy = box_sum(x.iter().zip(&y).map(|(a, b)| a * b).collect(), ext, k);
    let n = (k * k * k) as f64;
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let r = k / 2;
    let out = ext.map(|e| e + 1 - k);
    let (mut total, mut count) = (Sum::default(), 0usize);
    let mut i = 0;
    for d in 0..out[0] {
        for h in 0..out[1] {
            for w in 0..out[2] {
                if mask.get([d + r, h + r, w + r]) > 0.5 {
                    let (mx, my) = (sx[i] / n, sy[i] / n);
                    let vx = sxx[i] / n - mx * mx;
                    let vy = syy[i] / n - my * my;
                    let cxy = sxy[i] / n - mx * my;
                    total.add(ssim_from_stats(mx, my, vx, vy, cxy, c1, c2));
                    count += 1;
                }
                i += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no SSIM window has its centre inside the mask".into()));
    }
    Ok(total.value() / count as f64)
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    a.same_grid(b)?;
    check_mask(a)?;
    check_mask(b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x > 0.5, y > 0.5);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Predicted and reference segmentation of one structure.
#[derive(Clone, Debug)]
pub struct StructureMasks {
    pub name: String,
    pub pred: Volume,
    pub reference: Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelCounts {
    pub total: usize,
    pub body: usize,
    /// Reference-mask voxels per structure.
    pub structures: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub ssim: SsimParams,
    pub psnr_data_range: f64,
    pub psnr_cap_db: f64,
    pub empty_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_hu: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub dice: BTreeMap<String, f64>,
    pub voxel_counts: VoxelCounts,
    /// Where the body mask came from.
    pub mask: String,
    pub config: MetricsConfig,
}

/// All metrics for an sCT against the reference CT (both in HU).
pub fn evaluate(
    pred_ct: &Volume,
    ref_ct: &Volume,
    body_mask: &Volume,
    mask_id: &str,
    structures: &[StructureMasks],
    ssim_params: &SsimParams,
) -> Result<MetricsReport> {
    check_triple(pred_ct, ref_ct, body_mask)?;
    let mut dice_map = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for s in structures {
        s.pred.same_grid(ref_ct)?;
        dice_map.insert(s.name.clone(), dice(&s.pred, &s.reference)?);
        counts.insert(s.name.clone(), s.reference.data.iter().filter(|&&v| v > 0.5).count());
    }
    Ok(MetricsReport {
        mae_hu: mae(pred_ct, ref_ct, body_mask)?,
        ssim: ssim(pred_ct, ref_ct, body_mask, ssim_params)?,
        psnr_db: psnr(pred_ct, ref_ct, body_mask, ssim_params.data_range)?,
        dice: dice_map,
        voxel_counts: VoxelCounts {
            total: ref_ct.len(),
            body: body_mask.data.iter().filter(|&&v| v > 0.5).count(),
            structures: counts,
        },
        mask: mask_id.to_string(),
        config: MetricsConfig { ssim: *ssim_params, psnr_data_range: ssim_params.data_range, psnr_cap_db: PSNR_CAP_DB, empty_dice: 1.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Unit;

    fn mask_from(ext: [usize; 3], f: impl Fn([usize; 3]) -> bool) -> Volume {
        let mut data = Vec::new();
        for d in 0..ext[0] {
            for h in 0..ext[1] {
                for w in 0..ext[2] {
                    data.push(f([d, h, w]) as u8 as f32);
                }
            }
        }
        Volume::new(ext, [1.0; 3], Modality::Mask, Unit::Arbitrary, data).unwrap()
    }

    #[test]
    fn dice_shifted_cube() {
        let a = mask_from([4, 4, 4], |p| p.iter().all(|&c| c < 2));
        let b = mask_from([4, 4, 4], |p| p[0] >= 1 && p[0] < 3 && p[1] < 2 && p[2] < 2);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let empty = mask_from([4, 4, 4], |_| false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 2.0) - 26.0206).abs() < 1e-4);
        assert_eq!(psnr_from_mse(4.0, 2.0), 0.0);
        assert_eq!(psnr_from_mse(0.0, 2.0), PSNR_CAP_DB);
    }

    #[test]
    fn compensated_sum() {
        let mut s = Sum::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }
}

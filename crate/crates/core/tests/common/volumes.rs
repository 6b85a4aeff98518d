//! Volume fixtures and the brute-force sliding-window oracle.

use med2t::generator::Generator;
use med2t::tensor::Tensor;
use med2t::volume::{Modality, Unit, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_volume(ext: [usize; 3], seed: u64, lo: f32, hi: f32, unit: Unit) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ext.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Volume::new(ext, [1.0; 3], Modality::Ct, unit, data).unwrap()
}

pub fn mask_where(ext: [usize; 3], mut f: impl FnMut([usize; 3]) -> bool) -> Volume {
    let mut data = Vec::new();
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                data.push(if f([d, h, w]) { 1.0 } else { 0.0 });
            }
        }
    }
    Volume::new(ext, [1.0; 3], Modality::Mask, Unit::Arbitrary, data).unwrap()
}

pub fn normalized_mri(ext: [usize; 3], seed: u64) -> Volume {
    let mut v = random_volume(ext, seed, -1.0, 1.0, Unit::Normalized);
    v.modality = Modality::Mri;
    v
}

/// Window origins and per-voxel coverage by direct enumeration.
pub fn brute_coverage(volume: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> (Vec<[usize; 3]>, Vec<u32>) {
    // origins: every multiple of the stride that still starts inside, with the
    // final one pulled back so the window ends at the edge
    let axis = |n: usize, p: usize, s: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).step_by(s).filter(|&o| o + p <= n).collect();
        if *v.last().unwrap() + p < n {
            v.push(n - p);
        }
        v
    };
    let axes: Vec<Vec<usize>> = (0..3).map(|a| axis(volume[a], patch[a], stride[a])).collect();
    let mut origins = Vec::new();
    for &a in &axes[0] {
        for &b in &axes[1] {
            for &c in &axes[2] {
                origins.push([a, b, c]);
            }
        }
    }
    let mut cov = Vec::new();
    for d in 0..volume[0] {
        for h in 0..volume[1] {
            for w in 0..volume[2] {
                let p = [d, h, w];
                cov.push(origins.iter().filter(|o| (0..3).all(|a| o[a] <= p[a] && p[a] < o[a] + patch[a])).count() as u32);
            }
        }
    }
    (origins, cov)
}

/// Largest deviation of `out` from the average of independent per-window
/// predictions over every window covering each voxel.
pub fn blend_deviation(mri: &Volume, g: &Generator<f32>, patch: [usize; 3], stride: [usize; 3], out: &Volume) -> f64 {
    let ext = mri.extents;
    let (origins, _) = brute_coverage(ext, patch, stride);
    let preds: Vec<_> = origins
        .iter()
        .map(|&o| g.predict(&Tensor::new([1, 1, patch[0], patch[1], patch[2]], mri.crop(o, patch).unwrap()).unwrap()).unwrap())
        .collect();
    let mut worst = 0f64;
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                let p = [d, h, w];
                let mut stack = Vec::new();
                for (o, y) in origins.iter().zip(&preds) {
                    if (0..3).all(|a| o[a] <= p[a] && p[a] < o[a] + patch[a]) {
                        stack.push(y.at(&[0, 0, d - o[0], h - o[1], w - o[2]]) as f64);
                    }
                }
                let avg = stack.iter().sum::<f64>() / stack.len() as f64;
                worst = worst.max((avg - out.get(p) as f64).abs());
            }
        }
    }
    worst
}

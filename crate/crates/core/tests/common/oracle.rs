//! Independent brute-force Agatston scorer and random test volumes.

use cac_core::volume::Dims;
use cac_core::CtVolume;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Union-find over candidate voxels, then per (component, slice) weight
/// from the peak HU. Deliberately shares no code with the library scorer.
pub fn brute_force(volume: &CtVolume, mask: &[bool], three_d: bool) -> f64 {
    let d = volume.dims;
    let n = d.len();
    let candidate: Vec<bool> = (0..n).map(|i| mask[i] && volume.voxels[i] >= 130).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for z in 0..d.slices {
        for y in 0..d.rows {
            for x in 0..d.cols {
                let i = (z * d.rows + y) * d.cols + x;
                if !candidate[i] {
                    continue;
                }
                for dz in if three_d { -1i64..=1 } else { 0..=0 } {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if nz < 0
                                || ny < 0
                                || nx < 0
                                || nz >= d.slices as i64
                                || ny >= d.rows as i64
                                || nx >= d.cols as i64
                            {
                                continue;
                            }
                            let j = ((nz as usize) * d.rows + ny as usize) * d.cols + nx as usize;
                            if candidate[j] {
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                parent[a] = b;
                            }
                        }
                    }
                }
            }
        }
    }
    // (root, slice) -> (count, peak)
    let mut groups = std::collections::HashMap::<(usize, usize), (u64, i16)>::new();
    for i in 0..n {
        if candidate[i] {
            let key = (find(&mut parent, i), i / (d.rows * d.cols));
            let e = groups.entry(key).or_insert((0, i16::MIN));
            e.0 += 1;
            e.1 = e.1.max(volume.voxels[i]);
        }
    }
    let weighted: u64 = groups
        .values()
        .map(|&(count, peak)| {
            let w = match peak {
                p if p >= 400 => 4,
                p if p >= 300 => 3,
                p if p >= 200 => 2,
                _ => 1,
            };
            count * w
        })
        .sum();
    let voxel_area = volume.pixel_spacing_mm.0 * volume.pixel_spacing_mm.1;
    weighted as f64 * voxel_area
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (CtVolume, Vec<bool>) {
    let dims = Dims::new(rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=32));
    let spacing = (rng.gen_range(0.4..=1.0), rng.gen_range(0.4..=1.0));
    let calcium_rate = rng.gen_range(0.02..0.4);
    let voxels: Vec<i16> = (0..dims.len())
        .map(|_| if rng.gen_bool(calcium_rate) { rng.gen_range(100..=700) } else { rng.gen_range(-1000..130) })
        .collect();
    let mask_rate = rng.gen_range(0.1..0.9);
    let mask: Vec<bool> = (0..dims.len()).map(|_| rng.gen_bool(mask_rate)).collect();
    (super::volume("study", dims, spacing, voxels), mask)
}

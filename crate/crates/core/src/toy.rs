//! Procedural nuclei data used by tests, the verification suites and the
//! toy end-to-end run.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use rand::Rng;

use crate::structure::{encode_structure, NucleiStructure};
use crate::{ImageRaster, InstanceMap, Raster};

/// Instance map with disk-shaped nuclei whose radii are drawn from `radius`
/// and whose pairwise gaps are at least `gap` background pixels. Fewer nuclei
/// than requested are placed if the raster fills up.
pub fn random_blob_map<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    count: RangeInclusive<usize>,
    radius: RangeInclusive<usize>,
    gap: usize,
) -> InstanceMap {
    let target = rng.random_range(count);
    let mut labels = vec![0u32; height * width];
    // pixels within `gap` (Chebyshev) of an existing nucleus
    let mut blocked = vec![false; height * width];
    let mut placed = 0u32;
    for _ in 0..target * 50 {
        if placed as usize == target {
            break;
        }
        let r = rng.random_range(radius.clone()) as i64;
        if 2 * r + 1 > height.min(width) as i64 {
            continue;
        }
        let cy = rng.random_range(r..height as i64 - r);
        let cx = rng.random_range(r..width as i64 - r);
        let pixels: Vec<usize> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .map(|(dy, dx)| ((cy + dy) as usize) * width + (cx + dx) as usize)
            .collect();
        if pixels.iter().any(|&p| blocked[p]) {
            continue;
        }
        placed += 1;
        let g = gap as i64;
        for &p in &pixels {
            labels[p] = placed;
            let (y, x) = ((p / width) as i64, (p % width) as i64);
            for yy in (y - g).max(0)..=(y + g).min(height as i64 - 1) {
                for xx in (x - g).max(0)..=(x + g).min(width as i64 - 1) {
                    blocked[yy as usize * width + xx as usize] = true;
                }
            }
        }
    }
    InstanceMap { height, width, labels }.canonicalize()
}

const BACKGROUND: [f32; 3] = [0.75, 0.35, 0.6];
const NUCLEUS: [f32; 3] = [-0.35, -0.55, 0.15];

/// Deterministic stain-like rendering of a structure: pink background and
/// purple nuclei that darken towards their centers.
pub fn render_image(ns: &NucleiStructure) -> ImageRaster {
    let (h, w) = (ns.height(), ns.width());
    let n = h * w;
    let mut r = Raster::zeros(3, h, w);
    for i in 0..n {
        let fg = ns.semantic()[i] > 0.0;
        let (hd, vd) = (ns.hdist()[i], ns.vdist()[i]);
        let shade = 1.0 - 0.5 * (hd * hd + vd * vd);
        for c in 0..3 {
            r.data[c * n + i] = if fg { NUCLEUS[c] - 0.3 * shade } else { BACKGROUND[c] };
        }
    }
    ImageRaster::clamped(r).expect("three channels")
}

/// One toy training pair: instance map, its structure and the rendered image.
pub fn toy_sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> (InstanceMap, NucleiStructure, ImageRaster) {
    let lo = (size / 10).max(2);
    let hi = (size / 6).max(lo);
    let inst = random_blob_map(rng, size, size, 2..=4, lo..=hi, 2);
    let ns = encode_structure(&inst);
    let img = render_image(&ns);
    (inst, ns, img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn blobs_respect_gap() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..10 {
            let m = random_blob_map(&mut rng, 64, 64, 3..=8, 3..=6, 2);
            assert!(m.count() >= 3);
            for y in 0..64 {
                for x in 0..64 {
                    let a = m.get(y, x);
                    if a == 0 {
                        continue;
                    }
                    for yy in y.saturating_sub(2)..(y + 3).min(64) {
                        for xx in x.saturating_sub(2)..(x + 3).min(64) {
                            let b = m.get(yy, xx);
                            assert!(b == 0 || b == a);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_a_function_of_structure() {
        let mut rng = stream_rng(2, 0);
        let (_, ns, img) = toy_sample(&mut rng, 32);
        assert_eq!(render_image(&ns), img);
        assert_eq!(img.height(), 32);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{unit, Macro, PhantomSpec, PhantomTruth};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Mask2d, SliceAnnotation, VoxelVolume};

/// A rendered phantom with its truth masks and analytic truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub volume: VoxelVolume,
    pub tissue: BinaryMask,
    /// Lipid pools without the calcifications embedded in them.
    pub lipid: BinaryMask,
    pub calcification: BinaryMask,
    pub collagen: Option<BinaryMask>,
    pub truth: PhantomTruth,
}

impl Phantom {
    pub fn annotation(&self, z: usize) -> Result<SliceAnnotation> {
        if z >= self.volume.nz() {
            return Err(Error::InvalidParameter(format!(
                "slice {z} outside a stack of {}",
                self.volume.nz()
            )));
        }
        SliceAnnotation::new(z, self.tissue.slice(z), self.lipid.slice(z))
    }

    pub fn annotations(&self, zs: &[usize]) -> Result<Vec<SliceAnnotation>> {
        zs.iter().map(|&z| self.annotation(z)).collect()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn macro_contains(m: &Macro, p: [f64; 3], seed: u64, voxel: u64) -> bool {
    let d = [p[0] - m.center[0], p[1] - m.center[1], p[2] - m.center[2]];
    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if r2 <= m.core_radius * m.core_radius {
        return true;
    }
    for s in &m.spikes {
        let u = unit(s.direction);
        let t = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
        if t >= 0.0 && t <= m.core_radius + s.length && r2 - t * t <= s.radius * s.radius {
            return true;
        }
    }
    if let Some(sh) = &m.shell {
        let r = r2.sqrt();
        let r0 = m.core_radius + sh.gap;
        if r > r0 && r <= r0 + sh.thickness {
            let h = splitmix(seed ^ splitmix(voxel)) as f64 / u64::MAX as f64;
            return h >= sh.porosity;
        }
    }
    false
}

struct SliceOut {
    values: Vec<f32>,
    tissue: Vec<bool>,
    lipid: Vec<bool>,
    calc: Vec<bool>,
    collagen: Vec<bool>,
}

fn render_slice(spec: &PhantomSpec, z: usize, streak_angles: &[Vec<f64>]) -> SliceOut {
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny;
    let zf = z as f64;
    let it = &spec.intensities;
    let mut values = vec![it.background; n];
    let mut tissue = vec![false; n];
    let mut lipid = vec![false; n];
    let mut calc = vec![false; n];
    let mut collagen = vec![false; n];

    let c = spec.tube.center_at(zf, nz);
    let (r0, r1) = (spec.tube.inner_radius.powi(2), spec.tube.outer_radius.powi(2));
    let sigma = spec.lipid_blur_sigma;
    for y in 0..ny {
        for x in 0..nx {
            let i = y * nx + x;
            let p = [x as f64, y as f64, zf];
            let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if r2 < r0 || r2 > r1 {
                continue;
            }
            tissue[i] = true;
            // strongest lipid contribution over all pools
            let mut s: f64 = 0.0;
            for pool in &spec.lipid_pools {
                let rho = pool.rho(p);
                if rho <= 1.0 {
                    lipid[i] = true;
                }
                let w = if sigma > 0.0 {
                    let d = (rho - 1.0) * pool.semi_axes[0].min(pool.semi_axes[1]);
                    0.5 * libm::erfc(d / (sigma * std::f64::consts::SQRT_2))
                } else if rho <= 1.0 {
                    1.0
                } else {
                    0.0
                };
                s = s.max(w);
            }
            values[i] = it.tissue + (it.lipid - it.tissue) * s;
        }
    }
    if let Some(h) = &spec.holder {
        for y in h.y[0]..h.y[1].min(ny) {
            for x in h.x[0]..h.x[1].min(nx) {
                let i = y * nx + x;
                if !tissue[i] {
                    values[i] = it.holder;
                }
            }
        }
    }

    let mut mark = |x0: f64, y0: f64, r: f64, f: &dyn Fn([f64; 3], u64) -> bool| {
        let xa = (x0 - r).floor().max(0.0) as usize;
        let xb = ((x0 + r).ceil() as usize).min(nx - 1);
        let ya = (y0 - r).floor().max(0.0) as usize;
        let yb = ((y0 + r).ceil() as usize).min(ny - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                let voxel = (z * ny + y) as u64 * nx as u64 + x as u64;
                if f([x as f64, y as f64, zf], voxel) {
                    calc[y * nx + x] = true;
                }
            }
        }
    };
    for m in &spec.micros {
        if (zf - m.center[2]).abs() <= m.radius {
            let r2 = m.radius * m.radius;
            let ctr = m.center;
            mark(ctr[0], ctr[1], m.radius, &|p, _| {
                (p[0] - ctr[0]).powi(2) + (p[1] - ctr[1]).powi(2) + (p[2] - ctr[2]).powi(2) <= r2
            });
        }
    }
    for m in &spec.macros {
        let e = m.extent();
        if (zf - m.center[2]).abs() <= e {
            mark(m.center[0], m.center[1], e, &|p, v| macro_contains(m, p, spec.seed, v));
        }
    }
    for i in 0..n {
        if calc[i] {
            values[i] = it.calcification;
            lipid[i] = false;
        }
    }

    let art = &spec.artifacts;
    if let Some(ring) = &art.ring {
        for y in 0..ny {
            for x in 0..nx {
                let r = ((x as f64 - ring.center[0]).powi(2) + (y as f64 - ring.center[1]).powi(2)).sqrt();
                values[y * nx + x] += ring.amplitude * (2.0 * std::f64::consts::PI * r / ring.period).sin();
            }
        }
    }
    if let Some(st) = &art.streaks {
        for (m, angles) in spec.macros.iter().zip(streak_angles) {
            if (zf - m.center[2]).abs() > m.core_radius {
                continue;
            }
            for (k, &a) in angles.iter().enumerate() {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let (s, co) = a.sin_cos();
                for y in 0..ny {
                    for x in 0..nx {
                        let (dx, dy) = (x as f64 - m.center[0], y as f64 - m.center[1]);
                        let t = dx * co + dy * s;
                        if t <= m.core_radius {
                            continue;
                        }
                        let perp = -dx * s + dy * co;
                        values[y * nx + x] +=
                            sign * st.intensity * (-perp * perp / (2.0 * st.width * st.width)).exp();
                    }
                }
            }
        }
    }
    if art.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(z as u64);
        let normal = Normal::new(0.0, art.noise_sigma).expect("finite sigma");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if let Some(cs) = &spec.collagen {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc011_a6e2);
        rng.set_stream(z as u64);
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                let p = if cs.in_low_zone([x as f64, y as f64, zf]) {
                    cs.low_fraction
                } else {
                    cs.high_fraction
                };
                let draw = rng.random_bool(p);
                collagen[i] = tissue[i] && draw;
            }
        }
    }
    SliceOut {
        values: values.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        tissue,
        lipid,
        calc,
        collagen,
    }
}

/// Renders a spec. Identical specs (including the seed) give identical output.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    let truth = spec.truth()?;
    let [nx, ny, nz] = spec.dims;
    let streak_angles: Vec<Vec<f64>> = spec
        .macros
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let count = spec.artifacts.streaks.as_ref().map_or(0, |s| s.count);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1000 + k as u64));
            (0..count)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect()
        })
        .collect();
    let slices: Vec<SliceOut> = (0..nz)
        .into_par_iter()
        .map(|z| render_slice(spec, z, &streak_angles))
        .collect();
    let mut data = Vec::with_capacity(nx * ny * nz);
    let (mut tissue, mut lipid, mut calc, mut coll) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in slices {
        data.extend(s.values);
        tissue.push(Mask2d::new(nx, ny, s.tissue)?);
        lipid.push(Mask2d::new(nx, ny, s.lipid)?);
        calc.push(Mask2d::new(nx, ny, s.calc)?);
        coll.push(Mask2d::new(nx, ny, s.collagen)?);
    }
    Ok(Phantom {
        spec: spec.clone(),
        volume: VoxelVolume::new(nx, ny, nz, spec.spacing_um, data)?,
        tissue: BinaryMask::from_slices(nx, ny, &tissue)?,
        lipid: BinaryMask::from_slices(nx, ny, &lipid)?,
        calcification: BinaryMask::from_slices(nx, ny, &calc)?,
        collagen: match spec.collagen {
            Some(_) => Some(BinaryMask::from_slices(nx, ny, &coll)?),
            None => None,
        },
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::PhantomTemplate;

    #[test]
    fn compact_is_deterministic_and_nested() {
        let spec = PhantomTemplate::Compact.spec(3).unwrap();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.volume, b.volume);
        assert!(a.lipid.is_subset_of(&a.tissue));
        assert!(a.calcification.is_subset_of(&a.tissue));
        assert!(a.lipid.count() > 0);
        let other = generate(&PhantomTemplate::Compact.spec(4).unwrap()).unwrap();
        assert_ne!(a.volume, other.volume);
    }

    #[test]
    fn clean_rendering_thresholds_to_truth() {
        let mut spec = PhantomTemplate::Compact.spec(0).unwrap();
        spec.artifacts = Default::default();
        let p = generate(&spec).unwrap();
        let calc = crate::segnet::threshold_segment(&p.volume, 0.7).unwrap();
        assert_eq!(calc, p.calcification);
    }

    #[test]
    fn rasterized_volumes_track_analytic_truth() {
        let p = generate(&PhantomTemplate::Compact.spec(0).unwrap()).unwrap();
        let v3 = p.spec.spacing_um.powi(3);
        let rel = |count: usize, truth: f64| (count as f64 * v3 - truth).abs() / truth;
        assert!(rel(p.tissue.count(), p.truth.tissue_um3) < 0.02);
        assert!(rel(p.lipid.count(), p.truth.lipid_um3) < 0.05);
        assert!(rel(p.calcification.count(), p.truth.calcification_um3) < 0.1);
    }
}

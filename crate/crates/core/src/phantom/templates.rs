use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Artifacts, CollagenSpec, Ellipsoid, Holder, Intensities, LowZone, Macro, Micro, PhantomSpec,
    RingArtifact, Spike, StreakArtifact, Tube,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomTemplate {
    /// 256^3 vessel wall with lipid pools, clustered and isolated micros,
    /// spiked macros and the full artifact set.
    Standard,
    /// Small, lightly corrupted stack for quick runs.
    Compact,
    /// Tissue-filled stack with a two-level collagen field; clustered micros
    /// sit in low-density zones and isolated ones in high-density tissue.
    Collagen,
}

impl FromStr for PhantomTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "compact" => Ok(Self::Compact),
            "collagen" => Ok(Self::Collagen),
            _ => Err(Error::InvalidParameter(format!(
                "unknown phantom template {s:?} (standard, compact, collagen)"
            ))),
        }
    }
}

impl PhantomTemplate {
    pub fn spec(self, seed: u64) -> Result<PhantomSpec> {
        match self {
            Self::Standard => Ok(standard(seed)),
            Self::Compact => Ok(compact(seed)),
            Self::Collagen => collagen(seed),
        }
    }
}

/// `n` slice indices spread uniformly over a stack of `nz` slices.
pub fn annotated_slices(nz: usize, n: usize) -> Vec<usize> {
    let n = n.min(nz);
    (0..n)
        .map(|k| (((k as f64 + 0.5) * nz as f64 / n as f64).floor() as usize).min(nz - 1))
        .collect()
}

/// Point on a circle of radius `r` around `c` at `deg` degrees, slice `z`.
fn polar(c: [f64; 2], deg: f64, r: f64, z: f64) -> [f64; 3] {
    let a = deg.to_radians();
    [c[0] + r * a.cos(), c[1] + r * a.sin(), z]
}

/// Four micros on a regular tetrahedron with edge `edge` around `center`.
fn tetra(center: [f64; 3], edge: f64, radius: f64, cluster: usize) -> Vec<Micro> {
    let h = edge / 2.0;
    let s = h / 2f64.sqrt();
    [[h, 0.0, -s], [-h, 0.0, -s], [0.0, h, s], [0.0, -h, s]]
        .iter()
        .map(|d| Micro {
            center: [center[0] + d[0], center[1] + d[1], center[2] + d[2]],
            radius,
            cluster: Some(cluster),
        })
        .collect()
}

fn spiked_macro(c: [f64; 2], deg: f64, r: f64, z: f64) -> Macro {
    let a = deg.to_radians();
    let tangent = [-a.sin(), a.cos(), 0.0];
    let spike = |d: [f64; 3]| Spike {
        direction: d,
        length: 40.0,
        radius: 7.0,
    };
    Macro {
        center: polar(c, deg, r, z),
        core_radius: 26.0,
        spikes: vec![
            spike([0.0, 0.0, 1.0]),
            spike([0.0, 0.0, -1.0]),
            spike(tangent),
            spike([-tangent[0], -tangent[1], 0.0]),
        ],
        shell: None,
    }
}

fn standard(seed: u64) -> PhantomSpec {
    let c = [128.0, 128.0];
    let mid = 82.5;
    let pool = |deg: f64| Ellipsoid {
        center: polar(c, deg, mid, 128.0),
        semi_axes: [18.0, 35.0, 230.0],
        angle: deg.to_radians(),
    };
    let mut micros = Vec::new();
    let clusters = [(30.0, 128.0), (75.0, 200.0), (160.0, 40.0), (160.0, 200.0), (260.0, 60.0), (340.0, 60.0), (90.0, 40.0)];
    for (k, &(deg, z)) in clusters.iter().enumerate() {
        micros.extend(tetra(polar(c, deg, mid, z), 10.0, 3.0, k));
    }
    let isolated = [
        (210.0, 90.0),
        (210.0, 170.0),
        (75.0, 60.0),
        (90.0, 150.0),
        (150.0, 120.0),
        (170.0, 240.0),
        (250.0, 200.0),
        (270.0, 110.0),
        (330.0, 140.0),
        (350.0, 230.0),
    ];
    for &(deg, z) in &isolated {
        micros.push(Micro {
            center: polar(c, deg, mid, z),
            radius: 3.0,
            cluster: None,
        });
    }
    PhantomSpec {
        dims: [256, 256, 256],
        spacing_um: 10.0,
        tube: Tube {
            center: c,
            drift: [2.0, -2.0],
            inner_radius: 50.0,
            outer_radius: 115.0,
        },
        holder: Some(Holder { x: [241, 256], y: [122, 135] }),
        lipid_pools: vec![pool(30.0), pool(210.0)],
        lipid_blur_sigma: 1.5,
        micros,
        macros: vec![spiked_macro(c, 120.0, mid, 80.0), spiked_macro(c, 300.0, mid, 176.0)],
        artifacts: Artifacts {
            noise_sigma: 0.06,
            ring: Some(RingArtifact {
                amplitude: 0.04,
                center: c,
                period: 12.0,
            }),
            streaks: Some(StreakArtifact {
                count: 6,
                intensity: 0.08,
                width: 1.5,
            }),
        },
        collagen: None,
        intensities: Intensities::default(),
        seed,
    }
}

fn compact(seed: u64) -> PhantomSpec {
    let c = [32.0, 32.0];
    let mid = 18.0;
    let mut micros = tetra(polar(c, 225.0, mid, 16.0), 10.0, 3.0, 0);
    for &(deg, z) in &[(45.0, 16.0), (135.0, 10.0), (315.0, 22.0)] {
        micros.push(Micro {
            center: polar(c, deg, mid, z),
            radius: 3.0,
            cluster: None,
        });
    }
    PhantomSpec {
        dims: [64, 64, 32],
        spacing_um: 10.0,
        tube: Tube {
            center: c,
            drift: [0.0, 0.0],
            inner_radius: 8.0,
            outer_radius: 28.0,
        },
        holder: None,
        lipid_pools: vec![Ellipsoid {
            center: polar(c, 45.0, mid, 16.0),
            semi_axes: [7.0, 10.0, 40.0],
            angle: 45f64.to_radians(),
        }],
        lipid_blur_sigma: 1.0,
        micros,
        macros: Vec::new(),
        artifacts: Artifacts {
            noise_sigma: 0.03,
            ring: None,
            streaks: None,
        },
        collagen: None,
        intensities: Intensities::default(),
        seed,
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn collagen(seed: u64) -> Result<PhantomSpec> {
    let n = 128usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_11a6);
    let draw = |margin: f64, rng: &mut ChaCha8Rng| -> [f64; 3] {
        let hi = n as f64 - 1.0 - margin;
        [rng.random_range(margin..hi), rng.random_range(margin..hi), rng.random_range(margin..hi)]
    };
    let (zone_r, n_isolated) = (20.0, 16);
    // one zone per octant, jittered
    let mut zones: Vec<[f64; 3]> = Vec::new();
    for k in 0..8 {
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            let base = if (k >> a) & 1 == 0 { 32.0 } else { 96.0 };
            *v = base + rng.random_range(-4.0..4.0);
        }
        zones.push(p);
    }
    let mut tries = 0;
    let mut isolated: Vec<[f64; 3]> = Vec::new();
    while isolated.len() < n_isolated {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Phantom("could not place isolated micros".into()));
        }
        let p = draw(6.0, &mut rng);
        if zones.iter().all(|&q| dist(p, q) >= zone_r + 10.0) && isolated.iter().all(|&q| dist(p, q) >= 30.0) {
            isolated.push(p);
        }
    }
    let mut micros = Vec::new();
    for (k, &z) in zones.iter().enumerate() {
        micros.extend(tetra(z, 10.0, 3.0, k));
    }
    micros.extend(isolated.into_iter().map(|center| Micro {
        center,
        radius: 3.0,
        cluster: None,
    }));
    let half = n as f64 / 2.0 - 0.5;
    Ok(PhantomSpec {
        dims: [n, n, n],
        spacing_um: 10.0,
        tube: Tube {
            center: [half, half],
            drift: [0.0, 0.0],
            inner_radius: 0.0,
            // covers every pixel of the slice
            outer_radius: n as f64 * PI.sqrt(),
        },
        holder: None,
        lipid_pools: Vec::new(),
        lipid_blur_sigma: 0.0,
        micros,
        macros: Vec::new(),
        artifacts: Artifacts {
            noise_sigma: 0.03,
            ring: None,
            streaks: None,
        },
        collagen: Some(CollagenSpec {
            high_fraction: 0.7,
            low_fraction: 0.2,
            low_zones: zones
                .into_iter()
                .map(|center| LowZone { center, radius: zone_r })
                .collect(),
        }),
        intensities: Intensities::default(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_are_uniform_and_distinct() {
        let s = annotated_slices(256, 25);
        assert_eq!(s.len(), 25);
        assert_eq!(s[0], 5);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(annotated_slices(3, 10), vec![0, 1, 2]);
    }

    #[test]
    fn templates_validate() {
        for t in [PhantomTemplate::Standard, PhantomTemplate::Compact, PhantomTemplate::Collagen] {
            t.spec(7).unwrap().validate().unwrap();
        }
        assert!("nope".parse::<PhantomTemplate>().is_err());
    }

    #[test]
    fn standard_truth_counts() {
        let t = PhantomTemplate::Standard.spec(1).unwrap().truth().unwrap();
        assert_eq!(t.n_micro, 38);
        assert_eq!(t.n_macro, 2);
        assert_eq!(t.n_clusters, 7);
        assert_eq!(t.counts["athero-clustered-micro"], 4);
        assert_eq!(t.counts["athero-isolated-micro"], 2);
        assert_eq!(t.counts["non-athero-dense-macro"], 2);
        assert!(t.macro_sparse_fractions.iter().all(|&f| f > 0.15 && f < 0.4));
    }
}

//! Binary morphology with digitized Euclidean balls, computed through exact
//! squared distance transforms.
//!
//! The ball of radius `r` (in voxels) is `{v in Z^3 : |v|^2 <= r^2}`. Erosion
//! keeps voxels whose nearest background voxel is farther than `r`; dilation
//! adds voxels within `r` of the set. Both match the brute-force definitions
//! exactly because the distance transform is exact on the integer lattice.

/// A dense boolean grid with x fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub bits: Vec<bool>,
}

impl Grid3 {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            nx,
            ny,
            nz,
            bits: vec![false; nx * ny * nz],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

const INF: f64 = 1e30;

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] >= INF {
            continue;
        }
        if f[v[0]] >= INF {
            // first finite sample replaces the infinite seed
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if f[v[0]] >= INF {
        out.iter_mut().for_each(|o| *o = INF);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel of
/// `features` (infinite-ish when there is none).
pub fn squared_distance_to(features: &Grid3) -> Vec<f64> {
    let (nx, ny, nz) = (features.nx, features.ny, features.nz);
    let mut d: Vec<f64> = features
        .bits
        .iter()
        .map(|&b| if b { 0.0 } else { INF })
        .collect();
    let nmax = nx.max(ny).max(nz);
    let mut f = vec![0.0; nmax];
    let mut out = vec![0.0; nmax];
    let mut v = vec![0usize; nmax];
    let mut zb = vec![0.0; nmax + 1];
    // x
    for z in 0..nz {
        for y in 0..ny {
            let base = nx * (y + ny * z);
            f[..nx].copy_from_slice(&d[base..base + nx]);
            edt_1d(&f[..nx], &mut out[..nx], &mut v, &mut zb);
            d[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    // y
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                f[y] = d[x + nx * (y + ny * z)];
            }
            edt_1d(&f[..ny], &mut out[..ny], &mut v, &mut zb);
            for y in 0..ny {
                d[x + nx * (y + ny * z)] = out[y];
            }
        }
    }
    // z
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                f[z] = d[x + nx * (y + ny * z)];
            }
            edt_1d(&f[..nz], &mut out[..nz], &mut v, &mut zb);
            for z in 0..nz {
                d[x + nx * (y + ny * z)] = out[z];
            }
        }
    }
    d
}

/// Erosion by the digitized ball of radius `r` voxels. Voxels outside the grid
/// count as background.
pub fn erode_ball(set: &Grid3, r: f64) -> Grid3 {
    // pad by one so the grid border is background
    let padded = pad(set, 1);
    let background = Grid3 {
        bits: padded.bits.iter().map(|b| !b).collect(),
        ..padded.clone()
    };
    let d = squared_distance_to(&background);
    let r2 = r * r;
    let eroded = Grid3 {
        bits: d.iter().map(|&v| v > r2).collect(),
        ..padded
    };
    unpad(&eroded, 1)
}

/// Dilation by the digitized ball of radius `r` voxels, clipped to the grid.
pub fn dilate_ball(set: &Grid3, r: f64) -> Grid3 {
    let d = squared_distance_to(set);
    let r2 = r * r;
    Grid3 {
        bits: d.iter().map(|&v| v <= r2).collect(),
        ..set.clone()
    }
}

/// Opening (erosion then dilation). Correct on the whole grid as long as the
/// set keeps a background margin of at least one voxel inside the grid, or
/// the grid border is the domain border.
pub fn open_ball(set: &Grid3, r: f64) -> Grid3 {
    dilate_ball(&erode_ball(set, r), r)
}

fn pad(g: &Grid3, m: usize) -> Grid3 {
    let mut out = Grid3::new(g.nx + 2 * m, g.ny + 2 * m, g.nz + 2 * m);
    for z in 0..g.nz {
        for y in 0..g.ny {
            for x in 0..g.nx {
                if g.bits[g.index(x, y, z)] {
                    let i = out.index(x + m, y + m, z + m);
                    out.bits[i] = true;
                }
            }
        }
    }
    out
}

fn unpad(g: &Grid3, m: usize) -> Grid3 {
    let mut out = Grid3::new(g.nx - 2 * m, g.ny - 2 * m, g.nz - 2 * m);
    for z in 0..out.nz {
        for y in 0..out.ny {
            for x in 0..out.nx {
                let i = out.index(x, y, z);
                out.bits[i] = g.bits[g.index(x + m, y + m, z + m)];
            }
        }
    }
    out
}

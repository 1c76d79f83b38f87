use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    /// Neighborhood radius on centroid distance.
    pub eps_um: f64,
    /// Neighbors needed (self included) for a core point.
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            eps_um: 150.0,
            min_pts: 3,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_um > 0.0) || !self.eps_um.is_finite() {
            return Err(Error::InvalidParameter("eps_um must be a positive number".into()));
        }
        if self.min_pts < 2 {
            return Err(Error::InvalidParameter("min_pts must be >= 2".into()));
        }
        Ok(())
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Neighbor lists (self included, ascending) using a uniform hash grid with
/// cell edge `eps`.
fn neighbor_lists(points: &[[f64; 3]], eps: f64) -> Vec<Vec<usize>> {
    use std::collections::HashMap;
    let cell = |p: &[f64; 3]| -> [i64; 3] {
        [
            (p[0] / eps).floor() as i64,
            (p[1] / eps).floor() as i64,
            (p[2] / eps).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    points
        .iter()
        .map(|p| {
            let c = cell(p);
            let mut out = Vec::new();
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            out.extend(ids.iter().copied().filter(|&j| dist2(p, &points[j]) <= eps2));
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Density-based clustering of points. Returns one label per point, `None`
/// for noise (isolated points).
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters are the connected components of the core points under the
/// `eps` relation; a non-core point within `eps` of a core point joins the
/// cluster of its lowest-index core neighbor. Cluster ids are numbered by the
/// smallest point index they contain.
pub fn dbscan(points: &[[f64; 3]], params: &ClusterParams) -> Result<Vec<Option<usize>>> {
    params.validate()?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite point coordinate".into()));
    }
    let n = points.len();
    let neighbors = neighbor_lists(points, params.eps_um);
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut n_clusters = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(n_clusters);
        stack.push(start);
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && label[j].is_none() {
                    label[j] = Some(n_clusters);
                    stack.push(j);
                }
            }
        }
        n_clusters += 1;
    }
    for i in 0..n {
        if !core[i] {
            label[i] = neighbors[i].iter().find(|&&j| core[j]).and_then(|&j| label[j]);
        }
    }

    // renumber by smallest member index
    let mut remap = vec![usize::MAX; n_clusters];
    let mut next = 0;
    for l in label.iter().flatten() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
    }
    Ok(label.into_iter().map(|l| l.map(|c| remap[c])).collect())
}

/// Number of distinct clusters in a label vector.
pub fn cluster_count(labels: &[Option<usize>]) -> usize {
    labels.iter().flatten().max().map_or(0, |m| m + 1)
}

//! Point-cloud geometry: normalization, farthest point sampling, k-NN
//! patches and edge features.
//!
//! Everything here is a pure function of its inputs and uses exhaustive
//! distance computation; at the desk scale this crate targets (clouds of at
//! most a few thousand points) that is both simpler and faster than a
//! spatial index.

use std::fmt::Write as _;
use std::path::Path;

use rand::RngCore;

use crate::tensor::{Element, Tensor};
use crate::{rng, Error, Result};

/// A set of N points in 3-space with an optional class label.
#[derive(Clone, Debug)]
pub struct PointCloud<E: Element> {
    pub points: Vec<[E; 3]>,
    pub label: Option<usize>,
}

impl<E: Element> PointCloud<E> {
    pub fn new(points: Vec<[E; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("point cloud with no points".into()));
        }
        if points
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric("point cloud with non-finite coordinate".into()));
        }
        Ok(PointCloud {
            points,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major [N, 3] tensor of the coordinates (a graph leaf).
    pub fn to_tensor(&self) -> Tensor<E> {
        let mut data = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            data.extend_from_slice(p);
        }
        Tensor::from_vec(&[self.points.len(), 3], data).expect("cloud tensor")
    }

    pub fn from_flat(data: &[E]) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::Dimension(format!(
                "flat cloud length {} is not a multiple of 3",
                data.len()
            )));
        }
        Self::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn centroid_f64(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for (ci, &v) in c.iter_mut().zip(p) {
                *ci += v.as_f64();
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }
}

/// The sparse anchor subgraph: M anchors sampled from the cloud, their k
/// nearest neighbours, and the edge vectors expressing each neighbour in its
/// anchor's local frame.
#[derive(Clone, Debug)]
pub struct AnchorSubgraph<E: Element> {
    /// Distinct indices into the cloud, in selection order.
    pub anchor_indices: Vec<usize>,
    /// For each anchor, k neighbour indices sorted by ascending distance.
    pub neighbor_indices: Vec<Vec<usize>>,
    /// Flat [M, k, 3] buffer of `points[neighbor] - points[anchor]`.
    pub edge_features: Vec<E>,
    pub k: usize,
}

impl<E: Element> AnchorSubgraph<E> {
    /// Anchor coordinates as an [M, 3] tensor.
    pub fn anchor_tensor(&self, cloud: &PointCloud<E>) -> Tensor<E> {
        let mut data = Vec::with_capacity(self.anchor_indices.len() * 3);
        for &i in &self.anchor_indices {
            data.extend_from_slice(&cloud.points[i]);
        }
        Tensor::from_vec(&[self.anchor_indices.len(), 3], data).expect("anchor tensor")
    }

    /// Edge features as an [M, k, 3] tensor.
    pub fn edge_tensor(&self) -> Tensor<E> {
        Tensor::from_vec(
            &[self.anchor_indices.len(), self.k, 3],
            self.edge_features.clone(),
        )
        .expect("edge tensor")
    }
}

fn dist2_f64<E: Element>(a: &[E; 3], b: &[E; 3]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.as_f64() - y.as_f64();
        s += d * d;
    }
    s
}

/// Lexicographic comparison of coordinate triples, the permutation-invariant
/// tie rule used by farthest point sampling.
fn lex_less<E: Element>(a: &[E; 3], b: &[E; 3]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Centers the cloud on its centroid and scales it so the farthest point
/// sits at distance 1 from the origin.
pub fn normalize<E: Element>(cloud: &PointCloud<E>) -> Result<PointCloud<E>> {
    let c = cloud.centroid_f64();
    let centered: Vec<[E; 3]> = cloud
        .points
        .iter()
        .map(|p| {
            [
                E::from_f64(p[0].as_f64() - c[0]),
                E::from_f64(p[1].as_f64() - c[1]),
                E::from_f64(p[2].as_f64() - c[2]),
            ]
        })
        .collect();
    let r2 = centered
        .iter()
        .map(|p| p.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .fold(0.0, f64::max);
    if r2 <= 0.0 {
        return Err(Error::Degenerate(
            "normalize: all points identical".into(),
        ));
    }
    let inv = E::from_f64(1.0 / r2.sqrt());
    let points = centered
        .iter()
        .map(|p| p.map(|v| v * inv))
        .collect();
    Ok(PointCloud {
        points,
        label: cloud.label,
    })
}

/// Greedy farthest point sampling of `m` anchors.
///
/// The seed is the point farthest from the centroid; every later pick
/// maximizes the minimum distance to the anchors chosen so far. Ties break
/// to the lexicographically smallest coordinate triple, so the selected
/// coordinate set does not depend on the input row order.
pub fn farthest_point_sample<E: Element>(cloud: &PointCloud<E>, m: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::Argument(format!(
            "farthest_point_sample: m = {m} outside 1..={n}"
        )));
    }
    let c64 = cloud.centroid_f64();
    let centroid = [
        E::from_f64(c64[0]),
        E::from_f64(c64[1]),
        E::from_f64(c64[2]),
    ];
    let pts = &cloud.points;

    let pick_best = |dist: &[f64]| -> usize {
        let mut best = 0usize;
        for i in 1..n {
            if dist[i] > dist[best]
                || (dist[i] == dist[best] && lex_less(&pts[i], &pts[best]))
            {
                best = i;
            }
        }
        best
    };

    let from_centroid: Vec<f64> = pts.iter().map(|p| dist2_f64(p, &centroid)).collect();
    let seed = pick_best(&from_centroid);

    let mut chosen = Vec::with_capacity(m);
    chosen.push(seed);
    let mut min_dist: Vec<f64> = pts.iter().map(|p| dist2_f64(p, &pts[seed])).collect();
    while chosen.len() < m {
        let next = pick_best(&min_dist);
        chosen.push(next);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = dist2_f64(&pts[i], &pts[next]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// The k nearest points to each anchor, excluding the anchor index itself.
/// Distance ties break to the smaller point index; each list is sorted by
/// ascending distance.
pub fn knn_neighbors<E: Element>(
    cloud: &PointCloud<E>,
    anchor_indices: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(Error::Argument(format!(
            "knn_neighbors: k = {k} outside 1..={}",
            n - 1
        )));
    }
    let mut out = Vec::with_capacity(anchor_indices.len());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for &a in anchor_indices {
        if a >= n {
            return Err(Error::Argument(format!(
                "knn_neighbors: anchor index {a} out of range (N = {n})"
            )));
        }
        scored.clear();
        for (j, p) in cloud.points.iter().enumerate() {
            if j != a {
                scored.push((dist2_f64(&cloud.points[a], p), j));
            }
        }
        scored.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
        out.push(scored[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Edge features `e_mj = x_j - x_m` as a flat [M, k, 3] buffer; exact
/// differences in the element type, so translating the whole cloud leaves
/// them unchanged (up to rounding of the translated inputs).
pub fn edge_features<E: Element>(
    cloud: &PointCloud<E>,
    anchor_indices: &[usize],
    neighbor_indices: &[Vec<usize>],
) -> Vec<E> {
    let k = neighbor_indices.first().map_or(0, |l| l.len());
    let mut out = Vec::with_capacity(anchor_indices.len() * k * 3);
    for (&a, nbrs) in anchor_indices.iter().zip(neighbor_indices) {
        let pa = &cloud.points[a];
        for &j in nbrs {
            let pj = &cloud.points[j];
            out.push(pj[0] - pa[0]);
            out.push(pj[1] - pa[1]);
            out.push(pj[2] - pa[2]);
        }
    }
    out
}

/// FPS + kNN + edge features in one step.
pub fn build_subgraph<E: Element>(
    cloud: &PointCloud<E>,
    m: usize,
    k: usize,
) -> Result<AnchorSubgraph<E>> {
    let anchor_indices = farthest_point_sample(cloud, m)?;
    let neighbor_indices = knn_neighbors(cloud, &anchor_indices, k)?;
    let edges = edge_features(cloud, &anchor_indices, &neighbor_indices);
    Ok(AnchorSubgraph {
        anchor_indices,
        neighbor_indices,
        edge_features: edges,
        k,
    })
}

/// Uniformly random rotation matrix (via a random unit quaternion).
pub fn random_rotation(rng: &mut impl RngCore) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| rng::normal(rng)).collect();
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation about a uniformly random axis by an angle drawn uniformly from
/// [-max_angle, max_angle] (radians).
pub fn bounded_rotation(rng: &mut impl RngCore, max_angle: f64) -> [[f64; 3]; 3] {
    let axis: Vec<f64> = (0..3).map(|_| rng::normal(rng)).collect();
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let angle = rng::uniform(rng, -max_angle, max_angle);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn apply_rigid<E: Element>(
    cloud: &PointCloud<E>,
    rot: &[[f64; 3]; 3],
    shift: [f64; 3],
) -> PointCloud<E> {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let v = [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()];
            let mut out = [E::default(); 3];
            for (r, o) in rot.iter().zip(out.iter_mut()) {
                *o = E::from_f64(r[0] * v[0] + r[1] * v[1] + r[2] * v[2]);
            }
            [
                E::from_f64(out[0].as_f64() + shift[0]),
                E::from_f64(out[1].as_f64() + shift[1]),
                E::from_f64(out[2].as_f64() + shift[2]),
            ]
        })
        .collect();
    PointCloud {
        points,
        label: cloud.label,
    }
}

/// Writes the ASCII XYZ format: one `x y z` line per point, plus an optional
/// trailing `# label <int>` line.
pub fn write_xyz<E: Element>(path: &Path, cloud: &PointCloud<E>) -> Result<()> {
    let mut out = String::new();
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).expect("write to string");
    }
    if let Some(label) = cloud.label {
        writeln!(out, "# label {label}").expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_xyz<E: Element>(path: &Path) -> Result<PointCloud<E>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut label = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("label") {
                label = Some(v.trim().parse::<usize>().map_err(|_| {
                    Error::Format(format!("bad label line at {}", lineno + 1))
                })?);
            }
            continue;
        }
        let mut it = line.split_whitespace();
        let mut p = [E::default(); 3];
        for slot in p.iter_mut() {
            let tok = it.next().ok_or_else(|| {
                Error::Format(format!("expected 3 coordinates at line {}", lineno + 1))
            })?;
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Format(format!("bad number at line {}", lineno + 1)))?;
            *slot = E::from_f64(v);
        }
        if it.next().is_some() {
            return Err(Error::Format(format!(
                "trailing tokens at line {}",
                lineno + 1
            )));
        }
        points.push(p);
    }
    let mut cloud = PointCloud::new(points)?;
    cloud.label = label;
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud<f32> {
        let mut r = rng::from_seed(seed);
        let points = (0..n)
            .map(|_| {
                [
                    rng::uniform(&mut r, -1.0, 1.0) as f32,
                    rng::uniform(&mut r, -1.0, 1.0) as f32,
                    rng::uniform(&mut r, -1.0, 1.0) as f32,
                ]
            })
            .collect();
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn fps_unit_square_picks_diagonal() {
        let cloud = PointCloud::new(vec![
            [0.0f32, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        let picked = farthest_point_sample(&cloud, 2).unwrap();
        let (a, b) = (cloud.points[picked[0]], cloud.points[picked[1]]);
        let d2: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        // Enumerate all pairs: the only pairs at squared distance 2 are the
        // two diagonals, the maximum possible.
        assert_eq!(d2, 2.0, "picked {a:?} / {b:?}");
    }

    #[test]
    fn fps_m_equals_n_selects_everything() {
        let cloud = random_cloud(1, 17);
        let mut picked = farthest_point_sample(&cloud, 17).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_m_above_n() {
        let cloud = random_cloud(2, 5);
        assert!(farthest_point_sample(&cloud, 6).is_err());
        assert!(farthest_point_sample(&cloud, 0).is_err());
    }

    #[test]
    fn fps_is_permutation_invariant() {
        for seed in 0..50 {
            let cloud = random_cloud(100 + seed, 8 + (seed as usize % 57));
            let m = 1 + (seed as usize % 7);
            let base = farthest_point_sample(&cloud, m).unwrap();
            let mut base_coords: Vec<[f32; 3]> =
                base.iter().map(|&i| cloud.points[i]).collect();

            let mut r = rng::from_seed(7000 + seed);
            let perm = rng::permutation(&mut r, cloud.len());
            let shuffled =
                PointCloud::new(perm.iter().map(|&i| cloud.points[i]).collect()).unwrap();
            let picked = farthest_point_sample(&shuffled, m).unwrap();
            let mut coords: Vec<[f32; 3]> =
                picked.iter().map(|&i| shuffled.points[i]).collect();

            let key = |p: &[f32; 3]| (p[0].to_bits(), p[1].to_bits(), p[2].to_bits());
            base_coords.sort_by_key(key);
            coords.sort_by_key(key);
            assert_eq!(base_coords, coords, "seed {seed}");
        }
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let cloud = random_cloud(11, 48);
        let m = 8;
        let min_pair = |idx: &[usize]| -> f64 {
            let mut best = f64::INFINITY;
            for (i, &a) in idx.iter().enumerate() {
                for &b in &idx[i + 1..] {
                    best = best.min(dist2_f64(&cloud.points[a], &cloud.points[b]));
                }
            }
            best
        };
        let fps = min_pair(&farthest_point_sample(&cloud, m).unwrap());
        let mut r = rng::from_seed(12);
        for _ in 0..1000 {
            let subset: Vec<usize> = rng::permutation(&mut r, cloud.len())[..m].to_vec();
            assert!(fps >= min_pair(&subset));
        }
    }

    #[test]
    fn knn_collinear_example() {
        let cloud = PointCloud::new(vec![
            [0.0f32, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ])
        .unwrap();
        let nbrs = knn_neighbors(&cloud, &[0], 2).unwrap();
        assert_eq!(nbrs[0], vec![1, 2]);
    }

    #[test]
    fn knn_k_equals_n_minus_1_returns_all_others() {
        let cloud = random_cloud(3, 9);
        let nbrs = knn_neighbors(&cloud, &[4], 8).unwrap();
        let mut got = nbrs[0].clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 5, 6, 7, 8]);
        assert!(knn_neighbors(&cloud, &[4], 9).is_err());
    }

    #[test]
    fn knn_duplicate_point_is_a_zero_edge_neighbor() {
        let cloud = PointCloud::new(vec![
            [0.5f32, 0.5, 0.5],
            [0.5, 0.5, 0.5],
            [1.0, 0.0, 0.0],
        ])
        .unwrap();
        let nbrs = knn_neighbors(&cloud, &[0], 1).unwrap();
        assert_eq!(nbrs[0], vec![1]);
        let e = edge_features(&cloud, &[0], &nbrs);
        assert_eq!(e, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_matches_exhaustive_sort_oracle() {
        for seed in 0..20 {
            let cloud = random_cloud(500 + seed, 12 + (seed as usize % 30));
            let anchors: Vec<usize> = (0..cloud.len()).step_by(3).collect();
            let k = 1 + (seed as usize % 5).min(cloud.len() - 2);
            let got = knn_neighbors(&cloud, &anchors, k).unwrap();
            for (ai, &a) in anchors.iter().enumerate() {
                let mut all: Vec<(f64, usize)> = (0..cloud.len())
                    .filter(|&j| j != a)
                    .map(|j| (dist2_f64(&cloud.points[a], &cloud.points[j]), j))
                    .collect();
                all.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let want: Vec<usize> = all[..k].iter().map(|&(_, j)| j).collect();
                assert_eq!(got[ai], want, "seed {seed} anchor {a}");
            }
        }
    }

    #[test]
    fn edge_features_single_pair() {
        let cloud =
            PointCloud::new(vec![[0.0f32, 0.0, 0.0], [1.0, 2.0, 3.0]]).unwrap();
        let e = edge_features(&cloud, &[0], &[vec![1]]);
        assert_eq!(e, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn edge_features_translation_invariant_on_dyadic_coords() {
        // Coordinates that are multiples of 1/64 stay exact after adding 5,
        // so the differences must match bit for bit.
        let mut r = rng::from_seed(21);
        let snap = |v: f64| ((v * 64.0).round() / 64.0) as f32;
        let pts: Vec<[f32; 3]> = (0..20)
            .map(|_| {
                [
                    snap(rng::uniform(&mut r, -1.0, 1.0)),
                    snap(rng::uniform(&mut r, -1.0, 1.0)),
                    snap(rng::uniform(&mut r, -1.0, 1.0)),
                ]
            })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let moved =
            PointCloud::new(pts.iter().map(|p| p.map(|v| v + 5.0)).collect()).unwrap();
        let anchors: Vec<usize> = (0..4).collect();
        let nbrs = knn_neighbors(&cloud, &anchors, 3).unwrap();
        let e0 = edge_features(&cloud, &anchors, &nbrs);
        let e1 = edge_features(&moved, &anchors, &nbrs);
        assert_eq!(e0, e1);
    }

    #[test]
    fn edge_features_rotation_equivariant() {
        let cloud = random_cloud(31, 24);
        let anchors = farthest_point_sample(&cloud, 5).unwrap();
        let nbrs = knn_neighbors(&cloud, &anchors, 4).unwrap();
        let e = edge_features(&cloud, &anchors, &nbrs);

        let mut r = rng::from_seed(32);
        let rot = random_rotation(&mut r);
        let rotated = apply_rigid(&cloud, &rot, [0.0; 3]);
        // Neighbour sets are invariant under rotation (distances preserved).
        let e_rot = edge_features(&rotated, &anchors, &nbrs);
        for (i, chunk) in e.chunks_exact(3).enumerate() {
            let v = [chunk[0] as f64, chunk[1] as f64, chunk[2] as f64];
            for c in 0..3 {
                let want = rot[c][0] * v[0] + rot[c][1] * v[1] + rot[c][2] * v[2];
                let got = e_rot[i * 3 + c] as f64;
                assert!((got - want).abs() < 1e-5, "edge {i} component {c}");
            }
        }
    }

    #[test]
    fn normalize_centers_and_scales() {
        let cloud = random_cloud(41, 33);
        let n = normalize(&cloud).unwrap();
        let c = n.centroid_f64();
        assert!(c.iter().all(|v| v.abs() < 1e-5), "centroid {c:?}");
        let r = n
            .points
            .iter()
            .map(|p| p.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt();
        assert!((r - 1.0).abs() < 1e-5, "radius {r}");
    }

    #[test]
    fn normalize_is_idempotent_and_scale_invariant() {
        let cloud = random_cloud(42, 20);
        let once = normalize(&cloud).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.points.iter().zip(&twice.points) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let scaled =
            PointCloud::new(cloud.points.iter().map(|p| p.map(|v| v * 10.0)).collect())
                .unwrap();
        let ns = normalize(&scaled).unwrap();
        for (a, b) in once.points.iter().zip(&ns.points) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalize_rejects_degenerate_cloud() {
        let cloud = PointCloud::new(vec![[1.0f32, 1.0, 1.0]; 4]).unwrap();
        assert!(matches!(normalize(&cloud), Err(Error::Degenerate(_))));
    }

    #[test]
    fn xyz_round_trip_with_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        let cloud = random_cloud(51, 19).with_label(3);
        write_xyz(&path, &cloud).unwrap();
        let back: PointCloud<f32> = read_xyz(&path).unwrap();
        assert_eq!(back.label, Some(3));
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut r = rng::from_seed(61);
        for rot in [random_rotation(&mut r), bounded_rotation(&mut r, 0.5)] {
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|c| rot[i][c] * rot[j][c]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }
}

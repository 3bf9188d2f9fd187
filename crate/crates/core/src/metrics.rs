//! Interaction quality metrics: interpenetration volume and depth, jerk and
//! sample diversity.
//!
//! Geometry is handled in meters; the sequence-level entry points convert to
//! cm (depth) and cm³ (volume) on the way out.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{CoreError, Result};
use crate::geometry::{ArticulatedObjectModel, HandModel, PartBox, RigidTransform};
use crate::types::{HandSide, HandType, MotionSequence, ObjectState};

pub const M3_TO_CM3: f64 = 1e6;
pub const M_TO_CM: f64 = 100.0;
const MAX_VOXELS: u64 = 500_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn intersect(&self, other: &Aabb) -> Option<Aabb> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (0..3).all(|k| min[k] <= max[k]).then_some(Aabb { min, max })
    }

    fn is_finite(&self) -> bool {
        self.min.iter().chain(self.max.iter()).all(|v| v.is_finite())
    }
}

/// A solid region that can be voxelized.
pub trait Occupancy {
    fn bounds(&self) -> Aabb;
    fn contains(&self, p: &Vector3<f64>) -> bool;

    /// Voxel indices that may be occupied, restricted to `window`.
    /// Voxel `k` has its center at `(k + 0.5) * voxel`.
    fn candidate_voxels(&self, window: &Aabb, voxel: f64) -> Vec<[i64; 3]> {
        voxel_range(window, voxel).collect()
    }
}

fn voxel_range(b: &Aabb, voxel: f64) -> impl Iterator<Item = [i64; 3]> {
    let lo: Vec<i64> = (0..3).map(|k| (b.min[k] / voxel - 0.5).ceil() as i64).collect();
    let hi: Vec<i64> = (0..3).map(|k| (b.max[k] / voxel - 0.5).floor() as i64).collect();
    let (x0, y0, z0, x1, y1, z1) = (lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]);
    (x0..=x1).flat_map(move |x| (y0..=y1).flat_map(move |y| (z0..=z1).map(move |z| [x, y, z])))
}

fn voxel_center(k: &[i64; 3], voxel: f64) -> Vector3<f64> {
    Vector3::new(
        (k[0] as f64 + 0.5) * voxel,
        (k[1] as f64 + 0.5) * voxel,
        (k[2] as f64 + 0.5) * voxel,
    )
}

/// Box in its own frame, placed in the world by `pose`.
#[derive(Debug, Clone, Copy)]
pub struct OrientedBox {
    pub local: PartBox,
    pub pose: RigidTransform,
}

impl OrientedBox {
    pub fn axis_aligned(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        OrientedBox {
            local: PartBox { min, max },
            pose: RigidTransform {
                rot: nalgebra::Matrix3::identity(),
                trans: Vector3::zeros(),
            },
        }
    }

    /// Penetration depth of `p` (distance to the nearest face), 0 outside.
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        (-self.local.signed_distance(&self.pose.apply_inverse(p))).max(0.0)
    }
}

impl Occupancy for OrientedBox {
    fn bounds(&self) -> Aabb {
        let (lo, hi) = (self.local.min, self.local.max);
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for c in 0..8 {
            let corner = Vector3::new(
                if c & 1 == 0 { lo.x } else { hi.x },
                if c & 2 == 0 { lo.y } else { hi.y },
                if c & 4 == 0 { lo.z } else { hi.z },
            );
            let w = self.pose.apply(&corner);
            min = min.inf(&w);
            max = max.sup(&w);
        }
        Aabb { min, max }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        self.local.contains(&self.pose.apply_inverse(p))
    }
}

/// Union of equal-radius balls around hand surface points.
#[derive(Debug, Clone)]
pub struct BallUnion {
    pub centers: Vec<Vector3<f64>>,
    pub radius: f64,
}

impl Occupancy for BallUnion {
    fn bounds(&self) -> Aabb {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for c in &self.centers {
            min = min.inf(&c.add_scalar(-self.radius));
            max = max.sup(&c.add_scalar(self.radius));
        }
        Aabb { min, max }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        let r2 = self.radius * self.radius;
        self.centers.iter().any(|c| (p - c).norm_squared() <= r2)
    }

    fn candidate_voxels(&self, window: &Aabb, voxel: f64) -> Vec<[i64; 3]> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for c in &self.centers {
            let ball = Aabb {
                min: c.add_scalar(-self.radius),
                max: c.add_scalar(self.radius),
            };
            if let Some(w) = ball.intersect(window) {
                for k in voxel_range(&w, voxel) {
                    if seen.insert(k) {
                        out.push(k);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Solid proxy of an articulated object: one oriented box per part.
#[derive(Debug, Clone)]
pub struct ObjectOccupancy {
    pub parts: Vec<OrientedBox>,
}

impl ObjectOccupancy {
    pub fn from_model(model: &ArticulatedObjectModel, state: &ObjectState) -> Result<Self> {
        let parts = (0..2)
            .map(|k| {
                Ok(OrientedBox {
                    local: model.part_box(k),
                    pose: model.part_transform(state, k)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ObjectOccupancy { parts })
    }

    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        self.parts.iter().map(|b| b.depth(p)).fold(0.0, f64::max)
    }
}

impl Occupancy for ObjectOccupancy {
    fn bounds(&self) -> Aabb {
        let mut it = self.parts.iter().map(|p| p.bounds());
        let first = it.next().unwrap_or(Aabb {
            min: Vector3::zeros(),
            max: Vector3::zeros(),
        });
        it.fold(first, |a, b| Aabb {
            min: a.min.inf(&b.min),
            max: a.max.sup(&b.max),
        })
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        self.parts.iter().any(|b| b.contains(p))
    }
}

/// Voxelized intersection volume of two solids, in the inputs' units cubed.
/// Voxels are enumerated from `a`'s candidates.
pub fn overlap_volume(a: &dyn Occupancy, b: &dyn Occupancy, voxel: f64) -> Result<f64> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(CoreError::InvalidGeometry(format!("voxel size {voxel}")));
    }
    let (ba, bb) = (a.bounds(), b.bounds());
    if !ba.is_finite() || !bb.is_finite() {
        return Err(CoreError::InvalidGeometry("unbounded geometry".into()));
    }
    let Some(window) = ba.intersect(&bb) else {
        return Ok(0.0);
    };
    let cells: f64 = (0..3)
        .map(|k| ((window.max[k] - window.min[k]) / voxel).ceil() + 1.0)
        .product();
    if cells > MAX_VOXELS as f64 {
        return Err(CoreError::InvalidGeometry(format!(
            "overlap region needs {cells:e} voxels"
        )));
    }
    let count = a
        .candidate_voxels(&window, voxel)
        .iter()
        .map(|k| voxel_center(k, voxel))
        .filter(|c| a.contains(c) && b.contains(c))
        .count();
    Ok(count as f64 * voxel.powi(3))
}

/// Maximum penetration depth of any point into the object proxy (units of input).
pub fn penetration_depth(points: &[Vector3<f64>], object: &ObjectOccupancy) -> f64 {
    points.iter().map(|p| object.depth(p)).fold(0.0, f64::max)
}

/// Mean magnitude of the third finite difference over frames and points,
/// divided by `dt³`. `traj[i][v]` is point `v` at frame `i`.
pub fn jerk(traj: &[Vec<Vector3<f64>>], dt: f64) -> Result<f64> {
    let n = traj.len();
    if n < 4 {
        return Err(CoreError::InsufficientFrames { needed: 4, got: n });
    }
    let v = traj[0].len();
    if traj.iter().any(|f| f.len() != v) {
        return Err(CoreError::ShapeMismatch("point count varies across frames".into()));
    }
    if v == 0 {
        return Err(CoreError::EmptyGeometry("no trajectory points".into()));
    }
    let mut total = 0.0;
    for i in 0..n - 3 {
        for k in 0..v {
            let d3 = traj[i + 3][k] - traj[i + 2][k] * 3.0 + traj[i + 1][k] * 3.0 - traj[i][k];
            total += d3.norm();
        }
    }
    Ok(total / ((n - 3) * v) as f64 / dt.powi(3))
}

/// Mean over unordered pairs of `||a - b|| / sqrt(dim)`.
pub fn pairwise_diversity(samples: &[&[f64]]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(CoreError::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(CoreError::ShapeMismatch(
            "diversity samples must share a non-zero length".into(),
        ));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..samples.len() {
        for b in a + 1..samples.len() {
            let d2: f64 = samples[a]
                .iter()
                .zip(samples[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            sum += (d2 / dim as f64).sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMode {
    /// Average of the within-condition diversities.
    Sample,
    /// Diversity of all samples pooled together.
    Overall,
}

/// `groups[c]` holds the flattened samples generated for condition `c`.
pub fn diversity(groups: &[Vec<Vec<f64>>], mode: DiversityMode) -> Result<f64> {
    match mode {
        DiversityMode::Sample => {
            let per: Vec<f64> = groups
                .iter()
                .filter(|g| g.len() >= 2)
                .map(|g| pairwise_diversity(&g.iter().map(Vec::as_slice).collect::<Vec<_>>()))
                .collect::<Result<_>>()?;
            if per.is_empty() {
                let got = groups.iter().map(Vec::len).max().unwrap_or(0);
                return Err(CoreError::InsufficientSamples { needed: 2, got });
            }
            Ok(per.iter().sum::<f64>() / per.len() as f64)
        }
        DiversityMode::Overall => {
            let pooled: Vec<&[f64]> = groups.iter().flatten().map(Vec::as_slice).collect();
            pairwise_diversity(&pooled)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    /// Radius of the ball around each hand point, meters.
    pub hand_radius: f64,
    /// Voxel edge, meters.
    pub voxel: f64,
    /// Frame spacing, seconds.
    pub dt: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            hand_radius: 0.008,
            voxel: 0.002,
            dt: 1.0 / 30.0,
        }
    }
}

/// Geometric metrics of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMetrics {
    /// Mean over frames, cm³, indexed by [`HandSide::index`].
    pub iv: [f64; 2],
    /// Max over frames, cm.
    pub id: [f64; 2],
    pub jerk: f64,
    pub iv_frames: [Vec<f64>; 2],
    pub id_frames: [Vec<f64>; 2],
}

/// Hand surface points of every frame for one side.
pub fn hand_trajectory(
    seq: &MotionSequence,
    side: HandSide,
    model: &impl HandModel,
) -> Result<Vec<Vec<Vector3<f64>>>> {
    seq.hands()
        .iter()
        .map(|h| model.forward(h.pose(side), h.trans(side)))
        .collect()
}

pub fn evaluate_sequence<H: HandModel>(
    seq: &MotionSequence,
    hand_type: HandType,
    hands: &[H; 2],
    object: &ArticulatedObjectModel,
    cfg: &MetricConfig,
) -> Result<SequenceMetrics> {
    let occupancies = seq
        .objects()
        .iter()
        .map(|o| ObjectOccupancy::from_model(object, o))
        .collect::<Result<Vec<_>>>()?;
    let mut iv = [0.0; 2];
    let mut id = [0.0; 2];
    let mut iv_frames: [Vec<f64>; 2] = Default::default();
    let mut id_frames: [Vec<f64>; 2] = Default::default();
    let mut jerk_trajs = Vec::new();
    for side in HandSide::BOTH {
        let s = side.index();
        let traj = hand_trajectory(seq, side, &hands[s])?;
        for (pts, occ) in traj.iter().zip(&occupancies) {
            let balls = BallUnion {
                centers: pts.clone(),
                radius: cfg.hand_radius,
            };
            iv_frames[s].push(overlap_volume(&balls, occ, cfg.voxel)? * M3_TO_CM3);
            id_frames[s].push(penetration_depth(pts, occ) * M_TO_CM);
        }
        iv[s] = iv_frames[s].iter().sum::<f64>() / seq.len() as f64;
        id[s] = id_frames[s].iter().copied().fold(0.0, f64::max);
        if hand_type.is_active(side) {
            jerk_trajs.push(traj);
        }
    }
    let jerk = if seq.len() >= 4 {
        let merged: Vec<Vec<Vector3<f64>>> = (0..seq.len())
            .map(|i| jerk_trajs.iter().flat_map(|t| t[i].iter().copied()).collect())
            .collect();
        jerk(&merged, cfg.dt)?
    } else {
        return Err(CoreError::InsufficientFrames {
            needed: 4,
            got: seq.len(),
        });
    };
    Ok(SequenceMetrics {
        iv,
        id,
        jerk,
        iv_frames,
        id_frames,
    })
}

/// Aggregate report over a set of generated sequences, Table-1 style.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub iv_right: f64,
    pub iv_left: f64,
    pub id_right: f64,
    pub id_left: f64,
    pub jerk: f64,
    pub sd: Option<f64>,
    pub od: Option<f64>,
    /// Overall diversity of the real reference set, when supplied.
    pub od_real: Option<f64>,
    pub dt: f64,
    pub num_sequences: usize,
    pub per_sequence: Vec<SequenceMetrics>,
}

pub const TABLE_COLUMNS: [&str; 7] = ["iv_right", "iv_left", "id_right", "id_left", "jerk", "sd", "od"];

impl MetricReport {
    pub fn from_sequences(per_sequence: Vec<SequenceMetrics>, dt: f64) -> Result<Self> {
        let n = per_sequence.len();
        if n == 0 {
            return Err(CoreError::InsufficientSamples { needed: 1, got: 0 });
        }
        let mean = |f: &dyn Fn(&SequenceMetrics) -> f64| per_sequence.iter().map(f).sum::<f64>() / n as f64;
        Ok(MetricReport {
            iv_right: mean(&|m| m.iv[1]),
            iv_left: mean(&|m| m.iv[0]),
            id_right: mean(&|m| m.id[1]),
            id_left: mean(&|m| m.id[0]),
            jerk: mean(&|m| m.jerk),
            sd: None,
            od: None,
            od_real: None,
            dt,
            num_sequences: n,
            per_sequence,
        })
    }

    pub fn table_values(&self) -> [Option<f64>; 7] {
        [
            Some(self.iv_right),
            Some(self.iv_left),
            Some(self.id_right),
            Some(self.id_left),
            Some(self.jerk),
            self.sd,
            self.od,
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "# units: iv cm^3, id cm, jerk per dt^3");
        let _ = writeln!(s, "dt = {:.6}", self.dt);
        let _ = writeln!(s, "num_sequences = {}", self.num_sequences);
        for (k, v) in TABLE_COLUMNS.iter().zip(self.table_values()) {
            let _ = writeln!(s, "{k} = {}", fmt(v));
        }
        let _ = writeln!(s, "od_real = {}", fmt(self.od_real));
        for (i, m) in self.per_sequence.iter().enumerate() {
            let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(s, "seq{i}.iv_left_frames = {}", join(&m.iv_frames[0]));
            let _ = writeln!(s, "seq{i}.iv_right_frames = {}", join(&m.iv_frames[1]));
            let _ = writeln!(s, "seq{i}.id_left_frames = {}", join(&m.id_frames[0]));
            let _ = writeln!(s, "seq{i}.id_right_frames = {}", join(&m.id_frames[1]));
        }
        s
    }

    /// CSV header plus one row in the Table-1 column order.
    pub fn to_table(&self) -> String {
        let vals: Vec<String> = self
            .table_values()
            .iter()
            .chain([&self.od_real])
            .map(|v| v.map_or(String::new(), |x| format!("{x:.6}")))
            .collect();
        format!("{},od_real\n{}\n", TABLE_COLUMNS.join(","), vals.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cube(offset: f64) -> OrientedBox {
        OrientedBox::axis_aligned(Vector3::new(offset, 0.0, 0.0), Vector3::new(1.0 + offset, 1.0, 1.0))
    }

    #[test]
    fn identical_cubes_overlap_fully() {
        let v = overlap_volume(&cube(0.0), &cube(0.0), 0.05).unwrap();
        assert!((v - 1.0).abs() <= 0.05, "{v}");
    }

    #[test]
    fn offset_cubes_overlap_half() {
        let v = overlap_volume(&cube(0.0), &cube(0.5), 0.05).unwrap();
        assert!((v - 0.5).abs() <= 0.05, "{v}");
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(overlap_volume(&cube(0.0), &cube(3.0), 0.05).unwrap(), 0.0);
    }

    #[test]
    fn bad_voxel_or_unbounded() {
        assert!(overlap_volume(&cube(0.0), &cube(0.0), 0.0).is_err());
        let inf = OrientedBox::axis_aligned(Vector3::repeat(f64::NEG_INFINITY), Vector3::repeat(1.0));
        assert!(matches!(
            overlap_volume(&inf, &cube(0.0), 0.05),
            Err(CoreError::InvalidGeometry(_))
        ));
    }

    #[test]
    fn ball_volume_converges() {
        let ball = BallUnion {
            centers: vec![Vector3::new(0.013, -0.021, 0.007)],
            radius: 0.1,
        };
        let big = OrientedBox::axis_aligned(Vector3::repeat(-1.0), Vector3::repeat(1.0));
        let v = overlap_volume(&ball, &big, 0.005).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 1e-3;
        assert!((v - exact).abs() / exact < 0.02);
    }

    #[test]
    fn depth_at_cube_center() {
        let occ = ObjectOccupancy { parts: vec![cube(0.0)] };
        assert_relative_eq!(penetration_depth(&[Vector3::repeat(0.5)], &occ), 0.5, epsilon = 1e-12);
        assert_eq!(penetration_depth(&[Vector3::repeat(2.0)], &occ), 0.0);
        let pts = [Vector3::new(0.1, 0.5, 0.5), Vector3::new(0.3, 0.5, 0.5)];
        assert_relative_eq!(penetration_depth(&pts, &occ), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn jerk_cases() {
        let traj = |f: &dyn Fn(f64) -> f64| -> Vec<Vec<Vector3<f64>>> {
            (0..10).map(|i| vec![Vector3::new(f(i as f64), 0.0, 0.0)]).collect()
        };
        assert_eq!(jerk(&traj(&|_| 2.0), 1.0).unwrap(), 0.0);
        assert_eq!(jerk(&traj(&|t| 3.0 * t), 1.0).unwrap(), 0.0);
        assert_eq!(jerk(&traj(&|t| t * t * t), 1.0).unwrap(), 6.0);
        assert!(matches!(
            jerk(&traj(&|t| t)[..3], 1.0),
            Err(CoreError::InsufficientFrames { .. })
        ));
    }

    #[test]
    fn diversity_cases() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(pairwise_diversity(&[&a, &a]).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        assert_relative_eq!(pairwise_diversity(&[&a, &b]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            pairwise_diversity(&[&a]),
            Err(CoreError::InsufficientSamples { .. })
        ));
        let groups = vec![vec![a.clone(), a.clone()], vec![a.clone(), b.clone()]];
        assert_relative_eq!(diversity(&groups, DiversityMode::Sample).unwrap(), 0.5);
        // pooled pairs: (a,a)=0, (a,a)=0, (a,b)=1 three times
        assert_relative_eq!(diversity(&groups, DiversityMode::Overall).unwrap(), 0.5);
    }

    #[test]
    fn report_column_order() {
        let m = SequenceMetrics {
            iv: [1.0, 2.0],
            id: [3.0, 4.0],
            jerk: 5.0,
            iv_frames: [vec![1.0], vec![2.0]],
            id_frames: [vec![3.0], vec![4.0]],
        };
        let mut r = MetricReport::from_sequences(vec![m], 0.5).unwrap();
        r.sd = Some(6.0);
        r.od = Some(7.0);
        let table = r.to_table();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), "iv_right,iv_left,id_right,id_left,jerk,sd,od,od_real");
        assert_eq!(
            lines.next().unwrap(),
            "2.000000,1.000000,4.000000,3.000000,5.000000,6.000000,7.000000,"
        );
        assert!(r.to_text().contains("iv_right = 2.000000"));
    }
}

//! Per-frame hand and object states and the sequence container.

use crate::error::{CoreError, Result};
use crate::rotation::{rot6d_to_matrix, Rotation6D};

pub const MAX_FRAMES: usize = 150;
pub const NUM_JOINTS: usize = 16;
pub const POSE_DIM: usize = NUM_JOINTS * 6;
/// `[trans_l(3), trans_r(3), pose_l(96), pose_r(96), obj_trans(3), obj_rot(6), angle(1)]`
pub const FRAME_DIM: usize = 3 + 3 + POSE_DIM + POSE_DIM + 3 + 6 + 1;

pub type Vec3 = [f64; 3];

/// One global rotation followed by 15 finger joint rotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandPose(pub [Rotation6D; NUM_JOINTS]);

impl HandPose {
    pub fn identity() -> Self {
        HandPose([Rotation6D::IDENTITY; NUM_JOINTS])
    }

    pub fn zeros() -> Self {
        HandPose([Rotation6D([0.0; 6]); NUM_JOINTS])
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(CoreError::ShapeMismatch(format!(
                "hand pose needs {POSE_DIM} values, got {}",
                values.len()
            )));
        }
        let mut rows = [Rotation6D::IDENTITY; NUM_JOINTS];
        for (row, chunk) in rows.iter_mut().zip(values.chunks_exact(6)) {
            *row = Rotation6D::from_slice(chunk)?;
        }
        Ok(HandPose(rows))
    }

    pub fn to_flat(&self) -> [f64; POSE_DIM] {
        let mut out = [0.0; POSE_DIM];
        for (chunk, row) in out.chunks_exact_mut(6).zip(self.0.iter()) {
            chunk.copy_from_slice(&row.0);
        }
        out
    }

    pub fn global(&self) -> &Rotation6D {
        &self.0[0]
    }

    /// Snaps every row onto the rotation manifold.
    pub fn canonical(&self) -> Result<Self> {
        let mut rows = self.0;
        for r in rows.iter_mut() {
            *r = r.canonical()?;
        }
        Ok(HandPose(rows))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub const BOTH: [HandSide; 2] = [HandSide::Left, HandSide::Right];

    pub fn index(self) -> usize {
        match self {
            HandSide::Left => 0,
            HandSide::Right => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandState {
    pub trans_left: Vec3,
    pub trans_right: Vec3,
    pub pose_left: HandPose,
    pub pose_right: HandPose,
}

impl HandState {
    pub fn zeros() -> Self {
        HandState {
            trans_left: [0.0; 3],
            trans_right: [0.0; 3],
            pose_left: HandPose::zeros(),
            pose_right: HandPose::zeros(),
        }
    }

    pub fn trans(&self, side: HandSide) -> &Vec3 {
        match side {
            HandSide::Left => &self.trans_left,
            HandSide::Right => &self.trans_right,
        }
    }

    pub fn pose(&self, side: HandSide) -> &HandPose {
        match side {
            HandSide::Left => &self.pose_left,
            HandSide::Right => &self.pose_right,
        }
    }

    pub fn pose_mut(&mut self, side: HandSide) -> &mut HandPose {
        match side {
            HandSide::Left => &mut self.pose_left,
            HandSide::Right => &mut self.pose_right,
        }
    }

    pub fn trans_mut(&mut self, side: HandSide) -> &mut Vec3 {
        match side {
            HandSide::Left => &mut self.trans_left,
            HandSide::Right => &mut self.trans_right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState {
    pub trans: Vec3,
    pub rot: Rotation6D,
    pub joint_angle: f64,
}

impl ObjectState {
    pub fn zeros() -> Self {
        ObjectState {
            trans: [0.0; 3],
            rot: Rotation6D([0.0; 6]),
            joint_angle: 0.0,
        }
    }

    pub fn rest() -> Self {
        ObjectState {
            trans: [0.0; 3],
            rot: Rotation6D::IDENTITY,
            joint_angle: 0.0,
        }
    }
}

/// Which hands take part in the interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HandType {
    LeftOnly,
    RightOnly,
    Bimanual,
}

impl HandType {
    pub const ALL: [HandType; 3] = [HandType::LeftOnly, HandType::RightOnly, HandType::Bimanual];

    pub fn index(self) -> usize {
        match self {
            HandType::LeftOnly => 0,
            HandType::RightOnly => 1,
            HandType::Bimanual => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        HandType::ALL
            .get(i)
            .copied()
            .ok_or_else(|| CoreError::InvalidHandType(format!("index {i}")))
    }

    pub fn one_hot(self) -> HandTypeFlag {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        HandTypeFlag(v)
    }

    pub fn is_active(self, side: HandSide) -> bool {
        matches!(
            (self, side),
            (HandType::Bimanual, _)
                | (HandType::LeftOnly, HandSide::Left)
                | (HandType::RightOnly, HandSide::Right)
        )
    }

    pub fn active_sides(self) -> &'static [HandSide] {
        match self {
            HandType::LeftOnly => &[HandSide::Left],
            HandType::RightOnly => &[HandSide::Right],
            HandType::Bimanual => &HandSide::BOTH,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HandType::LeftOnly => "left",
            HandType::RightOnly => "right",
            HandType::Bimanual => "bimanual",
        }
    }
}

impl std::str::FromStr for HandType {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" | "left-only" => Ok(HandType::LeftOnly),
            "right" | "right-only" => Ok(HandType::RightOnly),
            "bimanual" | "both" => Ok(HandType::Bimanual),
            other => Err(CoreError::InvalidHandType(other.to_string())),
        }
    }
}

/// Raw 3-way indicator as consumed by the networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandTypeFlag(pub [f64; 3]);

impl HandTypeFlag {
    /// Recovers the hand type, rejecting anything that is not exactly one-hot.
    pub fn hand_type(&self) -> Result<HandType> {
        let ones: Vec<usize> = (0..3).filter(|&i| self.0[i] == 1.0).collect();
        let zeros = self.0.iter().filter(|&&v| v == 0.0).count();
        match (ones.as_slice(), zeros) {
            ([i], 2) => HandType::from_index(*i),
            _ => Err(CoreError::InvalidHandType(format!("{:?} is not one-hot", self.0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    hands: Vec<HandState>,
    objects: Vec<ObjectState>,
}

impl MotionSequence {
    /// Checks the structural invariants: `1 <= N <= 150`, equal lengths and
    /// finite values. Rotation validity is checked by [`Self::check_rotations`].
    pub fn new(hands: Vec<HandState>, objects: Vec<ObjectState>) -> Result<Self> {
        if hands.len() != objects.len() {
            return Err(CoreError::InvalidSequence(format!(
                "{} hand frames vs {} object frames",
                hands.len(),
                objects.len()
            )));
        }
        check_length(hands.len())?;
        let seq = MotionSequence { hands, objects };
        for (i, frame) in seq.flatten().chunks_exact(FRAME_DIM).enumerate() {
            if let Some(k) = frame.iter().position(|v| !v.is_finite()) {
                return Err(CoreError::InvalidSequence(format!(
                    "non-finite value at frame {i}, slot {k}"
                )));
            }
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.hands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hands.is_empty()
    }

    pub fn hands(&self) -> &[HandState] {
        &self.hands
    }

    pub fn objects(&self) -> &[ObjectState] {
        &self.objects
    }

    pub fn frame(&self, i: usize) -> (&HandState, &ObjectState) {
        (&self.hands[i], &self.objects[i])
    }

    pub fn joint_angles(&self) -> Vec<f64> {
        self.objects.iter().map(|o| o.joint_angle).collect()
    }

    /// Every pose row and object rotation decodes to a proper rotation.
    pub fn check_rotations(&self) -> Result<()> {
        for (i, (h, o)) in self.hands.iter().zip(&self.objects).enumerate() {
            for r in h.pose_left.0.iter().chain(h.pose_right.0.iter()).chain([&o.rot]) {
                rot6d_to_matrix(r).map_err(|e| {
                    CoreError::InvalidSequence(format!("frame {i}: {e}"))
                })?;
            }
        }
        Ok(())
    }

    pub fn check_joint_limits(&self, min: f64, max: f64) -> Result<()> {
        for o in &self.objects {
            if !(min..=max).contains(&o.joint_angle) {
                return Err(CoreError::JointLimitViolation {
                    angle: o.joint_angle,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    /// Full invariant check used before writing sequences to disk.
    pub fn validate(&self, limits: (f64, f64)) -> Result<()> {
        self.check_rotations()?;
        self.check_joint_limits(limits.0, limits.1)
    }

    /// Row-major `N x 208` frame array.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * FRAME_DIM);
        for (h, o) in self.hands.iter().zip(&self.objects) {
            out.extend_from_slice(&flatten_frame(h, o));
        }
        out
    }

    pub fn unflatten(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() % FRAME_DIM != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "{} values is not a whole number of {FRAME_DIM}-value frames",
                values.len()
            )));
        }
        let (hands, objects) = values.chunks_exact(FRAME_DIM).map(unflatten_frame).unzip();
        MotionSequence::new(hands, objects)
    }
}

pub fn check_length(n: usize) -> Result<()> {
    if n == 0 || n > MAX_FRAMES {
        return Err(CoreError::InvalidSequence(format!(
            "frame count {n} outside 1..={MAX_FRAMES}"
        )));
    }
    Ok(())
}

pub fn flatten_frame(h: &HandState, o: &ObjectState) -> [f64; FRAME_DIM] {
    let mut out = [0.0; FRAME_DIM];
    out[0..3].copy_from_slice(&h.trans_left);
    out[3..6].copy_from_slice(&h.trans_right);
    out[6..102].copy_from_slice(&h.pose_left.to_flat());
    out[102..198].copy_from_slice(&h.pose_right.to_flat());
    out[198..201].copy_from_slice(&o.trans);
    out[201..207].copy_from_slice(&o.rot.0);
    out[207] = o.joint_angle;
    out
}

fn unflatten_frame(f: &[f64]) -> (HandState, ObjectState) {
    let v3 = |s: &[f64]| [s[0], s[1], s[2]];
    // slice lengths are fixed by the layout, so these cannot fail
    let hand = HandState {
        trans_left: v3(&f[0..3]),
        trans_right: v3(&f[3..6]),
        pose_left: HandPose::from_flat(&f[6..102]).expect("pose slice"),
        pose_right: HandPose::from_flat(&f[102..198]).expect("pose slice"),
    };
    let object = ObjectState {
        trans: v3(&f[198..201]),
        rot: Rotation6D::from_slice(&f[201..207]).expect("rotation slice"),
        joint_angle: f[207],
    };
    (hand, object)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_dim_is_208() {
        assert_eq!(FRAME_DIM, 208);
    }

    #[test]
    fn all_zero_frame_flattens_to_zeros() {
        let seq = MotionSequence::new(vec![HandState::zeros()], vec![ObjectState::zeros()]).unwrap();
        let flat = seq.flatten();
        assert_eq!(flat.len(), 208);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_length_sequence_shape() {
        let hands = vec![HandState::zeros(); 150];
        let objs = vec![ObjectState::rest(); 150];
        let seq = MotionSequence::new(hands, objs).unwrap();
        assert_eq!(seq.flatten().len(), 150 * 208);
    }

    #[test]
    fn length_bounds() {
        assert!(MotionSequence::new(vec![], vec![]).is_err());
        assert!(MotionSequence::new(vec![HandState::zeros(); 151], vec![ObjectState::rest(); 151]).is_err());
        assert!(MotionSequence::new(vec![HandState::zeros(); 2], vec![ObjectState::rest(); 3]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut h = HandState::zeros();
        h.trans_left[1] = f64::INFINITY;
        assert!(MotionSequence::new(vec![h], vec![ObjectState::rest()]).is_err());
    }

    #[test]
    fn one_hot_round_trip() {
        for t in HandType::ALL {
            assert_eq!(t.one_hot().hand_type().unwrap(), t);
        }
        assert!(HandTypeFlag([1.0, 1.0, 0.0]).hand_type().is_err());
        assert!(HandTypeFlag([0.0, 0.0, 0.0]).hand_type().is_err());
        assert!(HandTypeFlag([0.5, 0.5, 0.0]).hand_type().is_err());
    }

    #[test]
    fn limits_checked() {
        let mut o = ObjectState::rest();
        o.joint_angle = 2.0;
        let seq = MotionSequence::new(vec![HandState::zeros()], vec![o]).unwrap();
        assert!(matches!(
            seq.check_joint_limits(0.0, 1.5),
            Err(CoreError::JointLimitViolation { .. })
        ));
    }
}

//! Least-squares window problem over joint rotation vectors.
//!
//! Variables are rotation vectors `a` of the masked joints, `L = exp(a)`,
//! stored frame-major. Every rotational residual is `log` of a product of
//! constant and joint factors, so one Jacobian routine serves all terms:
//! perturbing factor `k` on the right gives `dr = Jr⁻¹(r)·Sₖᵀ·ε` with `Sₖ`
//! the product of the factors after `k`.

use nalgebra::{DVector, Matrix3, Vector3};

use super::{FusionError, GuidanceWeights, TrackedFrame};
use crate::skeleton::{forward_kinematics_unchecked, Kinematics, PoseFrame, SkeletonModel, TrackedBone};
use crate::so3::{right_jacobian, right_jacobian_inv, skew, Rotation, RotationVector};

/// Bone pairs whose relative rotation is one joint chain observed by two
/// trackers: elbows, hips, knees.
pub const DIRECT_PAIRS: [(TrackedBone, TrackedBone); 6] = [
    (TrackedBone::LeftUpperArm, TrackedBone::LeftForearm),
    (TrackedBone::RightUpperArm, TrackedBone::RightForearm),
    (TrackedBone::Pelvis, TrackedBone::LeftThigh),
    (TrackedBone::Pelvis, TrackedBone::RightThigh),
    (TrackedBone::LeftThigh, TrackedBone::LeftShank),
    (TrackedBone::RightThigh, TrackedBone::RightShank),
];

/// Pelvis to upper arm: spans the unobserved spine and collar.
pub const RELATIVE_PAIRS: [(TrackedBone, TrackedBone); 2] = [
    (TrackedBone::Pelvis, TrackedBone::LeftUpperArm),
    (TrackedBone::Pelvis, TrackedBone::RightUpperArm),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Direct,
    Relative,
    Temporal,
    Contact,
    Smooth,
}

/// Weighted sum of squared residuals per guidance term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermCosts {
    pub direct: f64,
    pub relative: f64,
    pub temporal: f64,
    pub contact: f64,
    pub smooth: f64,
}

impl TermCosts {
    fn add(&mut self, term: Term, v: f64) {
        match term {
            Term::Direct => self.direct += v,
            Term::Relative => self.relative += v,
            Term::Temporal => self.temporal += v,
            Term::Contact => self.contact += v,
            Term::Smooth => self.smooth += v,
        }
    }

    pub fn total(&self) -> f64 {
        self.direct + self.relative + self.temporal + self.contact + self.smooth
    }

    pub fn accumulate(&mut self, o: &TermCosts) {
        self.direct += o.direct;
        self.relative += o.relative;
        self.temporal += o.temporal;
        self.contact += o.contact;
        self.smooth += o.smooth;
    }
}

impl std::fmt::Display for TermCosts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "direct={:.3e} relative={:.3e} temporal={:.3e} contact={:.3e} smooth={:.3e}",
            self.direct, self.relative, self.temporal, self.contact, self.smooth
        )
    }
}

pub(crate) struct Residual {
    pub term: Term,
    pub r: Vector3<f64>,
    /// `(first column, 3×3 block)`; rows beyond the residual length are zero.
    pub blocks: Vec<(usize, Matrix3<f64>)>,
}

#[derive(Clone, Copy)]
enum Factor {
    Const(Rotation),
    Joint { frame: usize, joint: usize, inverse: bool },
}

struct RelSpec {
    a: TrackedBone,
    b: TrackedBone,
    rest_a: Rotation,
    rest_b: Rotation,
    path: Vec<usize>,
}

/// Ground contact inputs for a window.
#[derive(Clone, Debug)]
pub struct ContactTerm {
    pub ground: f64,
    /// `[left, right]` per window frame.
    pub flags: Vec<[bool; 2]>,
}

struct State {
    locals: Vec<Vec<Rotation>>,
    vecs: Vec<Vec<Vector3<f64>>>,
    jr: Vec<Vec<Matrix3<f64>>>,
    kin: Vec<Kinematics>,
}

/// One optimization window. The first `fixed` frames are context: they enter
/// the smoothness and temporal terms but are not variables.
pub struct PoseProblem<'a> {
    skeleton: &'a SkeletonModel,
    frames: &'a [TrackedFrame],
    base: Vec<PoseFrame>,
    mask: Vec<usize>,
    slot_of: Vec<Option<usize>>,
    fixed: usize,
    context: Vec<Vec<Vector3<f64>>>,
    weights: GuidanceWeights,
    temporal_mask: [bool; 9],
    contact: Option<ContactTerm>,
    direct: Vec<RelSpec>,
    relative: Vec<RelSpec>,
    temporal: Vec<RelSpec>,
    feet: [(usize, Vec<usize>); 2],
}

fn rel_spec(skeleton: &SkeletonModel, a: TrackedBone, b: TrackedBone) -> Result<RelSpec, FusionError> {
    let (ba, bb) = (skeleton.tracked(a), skeleton.tracked(b));
    let path = skeleton
        .chain(ba.joint, bb.joint)
        .ok_or_else(|| FusionError::Input(format!("{} is not above {} in the skeleton", a.name(), b.name())))?;
    Ok(RelSpec {
        a,
        b,
        rest_a: ba.rest,
        rest_b: bb.rest,
        path,
    })
}

impl<'a> PoseProblem<'a> {
    /// `base` supplies the root pose and every unmasked joint per frame;
    /// `context` holds the rotation vectors of the `fixed` leading frames.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        skeleton: &'a SkeletonModel,
        frames: &'a [TrackedFrame],
        base: Vec<PoseFrame>,
        mask: &[usize],
        context: Vec<Vec<Vector3<f64>>>,
        weights: GuidanceWeights,
        temporal_mask: [bool; 9],
        contact: Option<ContactTerm>,
    ) -> Result<Self, FusionError> {
        let n = frames.len();
        if base.len() != n {
            return Err(FusionError::Input(format!("{} base poses for {n} frames", base.len())));
        }
        if context.len() >= n.max(1) {
            return Err(FusionError::Input("window has no free frames".into()));
        }
        if let Some(c) = &contact {
            if c.flags.len() != n {
                return Err(FusionError::Input("contact flags do not cover the window".into()));
            }
        }
        let mut slot_of = vec![None; skeleton.joint_count()];
        for (s, &j) in mask.iter().enumerate() {
            if j == skeleton.root() || j >= skeleton.joint_count() || slot_of[j].is_some() {
                return Err(FusionError::Input(format!("joint {j} cannot be optimized")));
            }
            slot_of[j] = Some(s);
        }
        if context.iter().any(|c| c.len() != mask.len()) {
            return Err(FusionError::Input("context frames do not match the joint mask".into()));
        }
        let direct = DIRECT_PAIRS.iter().map(|&(a, b)| rel_spec(skeleton, a, b)).collect::<Result<_, _>>()?;
        let relative = RELATIVE_PAIRS.iter().map(|&(a, b)| rel_spec(skeleton, a, b)).collect::<Result<_, _>>()?;
        let temporal = TrackedBone::ALL[1..]
            .iter()
            .filter(|t| temporal_mask[t.id() as usize])
            .map(|&t| rel_spec(skeleton, TrackedBone::Pelvis, t))
            .collect::<Result<_, _>>()?;
        let foot = |name: &str| -> Result<(usize, Vec<usize>), FusionError> {
            let j = skeleton.joint_index(name).map_err(|e| FusionError::Input(e.to_string()))?;
            let chain = skeleton.chain(skeleton.root(), j).unwrap_or_default();
            Ok((j, chain))
        };
        let feet = [foot("left_foot")?, foot("right_foot")?];
        Ok(Self {
            skeleton,
            frames,
            base,
            mask: mask.to_vec(),
            slot_of,
            fixed: context.len(),
            context,
            weights,
            temporal_mask,
            contact,
            direct,
            relative,
            temporal,
            feet,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn fixed_frames(&self) -> usize {
        self.fixed
    }

    pub fn n_vars(&self) -> usize {
        (self.frames.len() - self.fixed) * self.mask.len() * 3
    }

    pub fn temporal_mask(&self) -> [bool; 9] {
        self.temporal_mask
    }

    fn col(&self, frame: usize, slot: usize) -> Option<usize> {
        (frame >= self.fixed).then(|| ((frame - self.fixed) * self.mask.len() + slot) * 3)
    }

    /// Rotation vectors of the masked joints at a free frame.
    pub fn vectors_at(&self, x: &DVector<f64>, frame: usize) -> Vec<Vector3<f64>> {
        (0..self.mask.len())
            .map(|s| match self.col(frame, s) {
                Some(c) => Vector3::new(x[c], x[c + 1], x[c + 2]),
                None => self.context[frame][s],
            })
            .collect()
    }

    /// Variable vector taking masked joints from `init` at the free frames.
    pub fn pack(&self, init: &[Vec<Vector3<f64>>]) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_vars());
        for t in self.fixed..self.frames.len() {
            for s in 0..self.mask.len() {
                let c = self.col(t, s).unwrap();
                x.fixed_rows_mut::<3>(c).copy_from(&init[t - self.fixed][s]);
            }
        }
        x
    }

    /// Full poses for every window frame.
    pub fn poses(&self, x: &DVector<f64>) -> Vec<PoseFrame> {
        (0..self.frames.len())
            .map(|t| {
                let mut p = self.base[t].clone();
                for (s, v) in self.vectors_at(x, t).iter().enumerate() {
                    p.set_local_rotation(self.mask[s], Rotation::exp(&RotationVector(*v)));
                }
                p
            })
            .collect()
    }

    fn state(&self, x: &DVector<f64>, jacobian: bool) -> State {
        let n = self.frames.len();
        let mut st = State {
            locals: Vec::with_capacity(n),
            vecs: Vec::with_capacity(n),
            jr: Vec::with_capacity(n),
            kin: Vec::new(),
        };
        let need_kin = self.contact.is_some() && self.weights.contact > 0.0;
        for t in 0..n {
            let vecs = self.vectors_at(x, t);
            let mut pose = self.base[t].clone();
            for (s, v) in vecs.iter().enumerate() {
                pose.set_local_rotation(self.mask[s], Rotation::exp(&RotationVector(*v)));
            }
            st.locals.push((0..self.skeleton.joint_count()).map(|j| pose.local_rotation(j)).collect());
            if jacobian {
                st.jr.push(vecs.iter().map(right_jacobian).collect());
            }
            if need_kin {
                st.kin.push(forward_kinematics_unchecked(self.skeleton, &pose));
            }
            st.vecs.push(vecs);
        }
        st
    }

    fn rot_residual(&self, st: &State, term: Term, factors: &[Factor], sw: f64, jacobian: bool) -> Residual {
        let mats: Vec<Rotation> = factors
            .iter()
            .map(|f| match *f {
                Factor::Const(r) => r,
                Factor::Joint { frame, joint, inverse } => {
                    let l = st.locals[frame][joint];
                    if inverse {
                        l.inverse()
                    } else {
                        l
                    }
                }
            })
            .collect();
        let k = mats.len();
        let mut suffix = vec![Rotation::identity(); k];
        for i in (0..k.saturating_sub(1)).rev() {
            suffix[i] = mats[i + 1] * suffix[i + 1];
        }
        let total = if k == 0 { Rotation::identity() } else { mats[0] * suffix[0] };
        let r = total.log().0;
        let mut blocks = Vec::new();
        if jacobian {
            let jinv = right_jacobian_inv(&r) * sw;
            for (i, f) in factors.iter().enumerate() {
                let Factor::Joint { frame, joint, inverse } = *f else { continue };
                let (Some(slot), true) = (self.slot_of[joint], frame >= self.fixed) else { continue };
                let col = self.col(frame, slot).unwrap();
                let jr = st.jr[frame][slot];
                let s_t = suffix[i].matrix().transpose();
                let block = if inverse { -(jinv * s_t * jr.transpose()) } else { jinv * s_t * jr };
                blocks.push((col, block));
            }
        }
        Residual { term, r: r * sw, blocks }
    }

    /// Factors of `(FK(a)ᵀ·FK(b))ᵀ` in bone frames at `frame`.
    fn rel_factors_transposed(&self, spec: &RelSpec, frame: usize, out: &mut Vec<Factor>) {
        out.push(Factor::Const(spec.rest_b.inverse()));
        out.extend(spec.path.iter().rev().map(|&j| Factor::Joint { frame, joint: j, inverse: true }));
        out.push(Factor::Const(spec.rest_a));
    }

    fn measured(&self, frame: usize, a: TrackedBone, b: TrackedBone) -> Option<(Rotation, f64)> {
        let f = &self.frames[frame];
        let (ra, rb) = (f.bone(a)?, f.bone(b)?);
        let w = f.weight(a).min(f.weight(b));
        (w > 0.0).then(|| (ra.inverse() * rb, w))
    }

    pub(crate) fn residuals(&self, x: &DVector<f64>, jacobian: bool) -> Vec<Residual> {
        let st = self.state(x, jacobian);
        let n = self.frames.len();
        let w = &self.weights;
        let mut out = Vec::new();
        let mut factors = Vec::new();
        for t in self.fixed..n {
            for (specs, term, wt) in [(&self.direct, Term::Direct, w.direct), (&self.relative, Term::Relative, w.relative)] {
                if wt <= 0.0 {
                    continue;
                }
                for spec in specs.iter() {
                    let Some((m, stale)) = self.measured(t, spec.a, spec.b) else { continue };
                    factors.clear();
                    self.rel_factors_transposed(spec, t, &mut factors);
                    factors.push(Factor::Const(m));
                    out.push(self.rot_residual(&st, term, &factors, (wt * stale).sqrt(), jacobian));
                }
            }
        }
        if w.temporal > 0.0 {
            for t in self.fixed.saturating_sub(1)..n.saturating_sub(1) {
                for spec in &self.temporal {
                    let (Some((m0, w0)), Some((m1, w1))) =
                        (self.measured(t, spec.a, spec.b), self.measured(t + 1, spec.a, spec.b))
                    else {
                        continue;
                    };
                    // Rel(t+1)ᵀ·Rel(t)·Δ with the inner rest_a·rest_aᵀ cancelled
                    factors.clear();
                    factors.push(Factor::Const(spec.rest_b.inverse()));
                    factors.extend(spec.path.iter().rev().map(|&j| Factor::Joint { frame: t + 1, joint: j, inverse: true }));
                    factors.extend(spec.path.iter().map(|&j| Factor::Joint { frame: t, joint: j, inverse: false }));
                    factors.push(Factor::Const(spec.rest_b * m0.inverse() * m1));
                    out.push(self.rot_residual(&st, Term::Temporal, &factors, (w.temporal * w0.min(w1)).sqrt(), jacobian));
                }
            }
        }
        if w.smooth > 0.0 {
            let sw = w.smooth.sqrt();
            for t in self.fixed.saturating_sub(1).max(1)..n.saturating_sub(1) {
                for s in 0..self.mask.len() {
                    let r = (st.vecs[t + 1][s] - 2.0 * st.vecs[t][s] + st.vecs[t - 1][s]) * sw;
                    let mut blocks = Vec::new();
                    if jacobian {
                        for (dt, c) in [(t - 1, 1.0), (t, -2.0), (t + 1, 1.0)] {
                            if let Some(col) = self.col(dt, s) {
                                blocks.push((col, Matrix3::identity() * (c * sw)));
                            }
                        }
                    }
                    out.push(Residual { term: Term::Smooth, r, blocks });
                }
            }
        }
        if let (Some(c), true) = (&self.contact, w.contact > 0.0) {
            self.contact_residuals(&st, c, w.contact.sqrt(), jacobian, &mut out);
        }
        out
    }

    /// `d p_foot / d a` for the masked joints above the foot, rows are world xyz.
    fn foot_jacobian(&self, st: &State, frame: usize, side: usize) -> Vec<(usize, Matrix3<f64>)> {
        let (foot, chain) = &self.feet[side];
        let kin = &st.kin[frame];
        let p = kin.positions[*foot];
        chain
            .iter()
            .filter_map(|&k| {
                let slot = self.slot_of[k]?;
                let col = self.col(frame, slot)?;
                let g = kin.orientations[k].matrix();
                Some((col, -skew(&(p - kin.positions[k])) * g * st.jr[frame][slot]))
            })
            .collect()
    }

    fn contact_residuals(&self, st: &State, c: &ContactTerm, sw: f64, jacobian: bool, out: &mut Vec<Residual>) {
        let n = self.frames.len();
        let xy = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let zfirst = Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for t in self.fixed..n {
            for side in 0..2 {
                let z = st.kin[t].positions[self.feet[side].0].z;
                let below = (z - c.ground).min(0.0);
                let mut blocks = Vec::new();
                if jacobian && below < 0.0 {
                    blocks = self
                        .foot_jacobian(st, t, side)
                        .into_iter()
                        .map(|(col, j)| (col, zfirst * j * sw))
                        .collect();
                }
                out.push(Residual { term: Term::Contact, r: Vector3::new(below * sw, 0.0, 0.0), blocks });
            }
        }
        for t in self.fixed.saturating_sub(1)..n.saturating_sub(1) {
            for side in 0..2 {
                if !(c.flags[t][side] && c.flags[t + 1][side]) {
                    continue;
                }
                let foot = self.feet[side].0;
                let d = xy * (st.kin[t + 1].positions[foot] - st.kin[t].positions[foot]) * sw;
                let mut blocks = Vec::new();
                if jacobian {
                    for (col, j) in self.foot_jacobian(st, t + 1, side) {
                        blocks.push((col, xy * j * sw));
                    }
                    for (col, j) in self.foot_jacobian(st, t, side) {
                        blocks.push((col, -(xy * j * sw)));
                    }
                }
                out.push(Residual { term: Term::Contact, r: d, blocks });
            }
        }
    }

    pub fn term_costs(&self, x: &DVector<f64>) -> TermCosts {
        let mut c = TermCosts::default();
        for r in self.residuals(x, false) {
            c.add(r.term, r.r.norm_squared());
        }
        c
    }

    /// `E(x) = Σ ‖r‖²`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.residuals(x, false).iter().map(|r| r.r.norm_squared()).sum()
    }

    /// `∇E = 2·Jᵀr`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_vars());
        for r in self.residuals(x, true) {
            for (col, j) in &r.blocks {
                let v = j.transpose() * r.r * 2.0;
                let mut seg = g.fixed_rows_mut::<3>(*col);
                seg += v;
            }
        }
        g
    }
}

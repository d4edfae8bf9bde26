//! Scene files and trajectory dumps.
//!
//! A scene is a JSON document describing a kinematic tree, its colliders,
//! an initial state and optionally an optimization task. Angles are in
//! radians and all quantities SI. Quaternions are `[w, x, y, z]`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::collision::{Collider, Shape};
use crate::error::{Error, Result};
use crate::format::float;
use crate::skeleton::{Body, Joint, Skeleton};
use crate::spatial::{SpatialInertia, Transform};
use crate::world::{StepContext, World, WorldState};

pub const FORMAT_VERSION: u32 = 1;

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_rotation")]
    pub rotation: [f64; 4],
}

impl Default for Pose {
    fn default() -> Self {
        Self { translation: [0.0; 3], rotation: identity_rotation() }
    }
}

impl Pose {
    fn transform(&self) -> Transform {
        Transform::from_quaternion(self.rotation, Vector3::from(self.translation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    Prismatic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDesc {
    #[serde(rename = "type")]
    pub kind: JointType,
    pub axis: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyDesc {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub joint: JointDesc,
    /// Joint frame in the parent frame.
    #[serde(default)]
    pub placement: Pose,
    pub mass: f64,
    #[serde(default)]
    pub com: [f64; 3],
    /// `[Ixx, Iyy, Izz, Ixy, Ixz, Iyz]` about the center of mass.
    pub inertia: [f64; 6],
    #[serde(default = "yes")]
    pub actuated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColliderDesc {
    pub name: String,
    /// Owning body; absent for static geometry.
    #[serde(default)]
    pub body: Option<String>,
    pub shape: Shape,
    #[serde(default)]
    pub pose: Pose,
    #[serde(default)]
    pub restitution: f64,
    #[serde(default)]
    pub friction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateVar {
    Q,
    Qd,
}

/// One quadratic terminal term `weight * (x[index] - target)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDesc {
    pub state: StateVar,
    pub index: usize,
    pub target: f64,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sgd,
    MultipleShooting,
}

/// Optimization problem attached to a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDesc {
    pub steps: usize,
    pub terminal: Vec<TargetDesc>,
    /// Weight of `sum_t ||tau_t||^2`.
    #[serde(default)]
    pub control_weight: f64,
    /// Constant initial control per dof; empty means zero.
    #[serde(default)]
    pub initial_control: Vec<f64>,
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "one")]
    pub segments: usize,
    /// Weight of the squared segment defects in multiple shooting.
    #[serde(default)]
    pub defect_weight: f64,
}

fn default_method() -> Method {
    Method::Sgd
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub version: u32,
    pub name: String,
    pub gravity: [f64; 3],
    pub dt: f64,
    pub bodies: Vec<BodyDesc>,
    #[serde(default)]
    pub colliders: Vec<ColliderDesc>,
    /// Initial coordinates; empty means zero.
    #[serde(default)]
    pub q: Vec<f64>,
    #[serde(default)]
    pub qd: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskDesc>,
}

/// Parses and validates a scene. Omitted optional fields are filled in, so
/// the result serializes to canonical form.
pub fn parse(text: &str) -> Result<SceneDescription> {
    let mut desc: SceneDescription = serde_json::from_str(text)
        .map_err(|e| Error::Parse { line: e.line(), column: e.column(), reason: e.to_string() })?;
    let n = desc.bodies.len();
    if desc.q.is_empty() {
        desc.q = vec![0.0; n];
    }
    if desc.qd.is_empty() {
        desc.qd = vec![0.0; n];
    }
    if let Some(task) = desc.task.as_mut() {
        if task.initial_control.is_empty() {
            task.initial_control = vec![0.0; n];
        }
    }
    desc.validate()?;
    Ok(desc)
}

/// Canonical text: pretty JSON with every field present.
pub fn serialize(desc: &SceneDescription) -> String {
    let mut s = serde_json::to_string_pretty(desc).expect("scene values serialize");
    s.push('\n');
    s
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation { field: field.into(), reason: reason.into() }
}

fn finite(field: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(field, "must be finite"))
    }
}

impl SceneDescription {
    pub fn dofs(&self) -> usize {
        self.bodies.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(invalid("version", format!("unsupported version {}, expected {FORMAT_VERSION}", self.version)));
        }
        finite("gravity", &self.gravity)?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", "must be positive"));
        }
        if self.bodies.is_empty() {
            return Err(invalid("bodies", "a scene needs at least one body"));
        }
        for (i, b) in self.bodies.iter().enumerate() {
            let at = |f: &str| format!("bodies[{i}].{f}");
            if self.bodies[..i].iter().any(|o| o.name == b.name) {
                return Err(invalid(at("name"), format!("duplicate body name `{}`", b.name)));
            }
            if let Some(p) = &b.parent {
                if !self.bodies[..i].iter().any(|o| &o.name == p) {
                    return Err(invalid(at("parent"), format!("`{p}` is not an earlier body")));
                }
            }
            finite(&at("joint.axis"), &b.joint.axis)?;
            if Vector3::from(b.joint.axis).norm() < 1e-12 {
                return Err(invalid(at("joint.axis"), "axis is zero"));
            }
            self.check_pose(&at("placement"), &b.placement)?;
            if !(b.mass > 0.0 && b.mass.is_finite()) {
                return Err(invalid(at("mass"), format!("mass of body `{}` must be positive", b.name)));
            }
            finite(&at("com"), &b.com)?;
            finite(&at("inertia"), &b.inertia)?;
            if !body_inertia(b).is_physical() {
                return Err(invalid(at("inertia"), format!("inertia of body `{}` is not physical", b.name)));
            }
        }
        for (i, c) in self.colliders.iter().enumerate() {
            let at = |f: &str| format!("colliders[{i}].{f}");
            if let Some(b) = &c.body {
                if self.body_index(b).is_none() {
                    return Err(invalid(at("body"), format!("unknown body `{b}`")));
                }
            }
            self.check_pose(&at("pose"), &c.pose)?;
            let ok = match &c.shape {
                Shape::Sphere { radius } => *radius > 0.0,
                Shape::Capsule { radius, half_length } => *radius > 0.0 && *half_length > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
                Shape::HalfSpace { normal, offset } => {
                    offset.is_finite() && normal.iter().all(|v| v.is_finite()) && Vector3::from(*normal).norm() > 1e-12
                }
            };
            if !ok {
                return Err(invalid(at("shape"), "dimensions must be positive and finite"));
            }
            if !(0.0..=1.0).contains(&c.restitution) {
                return Err(invalid(at("restitution"), "must lie in [0, 1]"));
            }
            if !(c.friction >= 0.0 && c.friction.is_finite()) {
                return Err(invalid(at("friction"), "must be nonnegative"));
            }
        }
        let n = self.dofs();
        for (field, v) in [("q", &self.q), ("qd", &self.qd)] {
            if v.len() != n {
                return Err(invalid(field, format!("has {} entries for {n} dofs", v.len())));
            }
            finite(field, v)?;
        }
        if let Some(t) = &self.task {
            if t.steps == 0 {
                return Err(invalid("task.steps", "must be positive"));
            }
            for (k, term) in t.terminal.iter().enumerate() {
                if term.index >= n {
                    return Err(invalid(format!("task.terminal[{k}].index"), format!("{} out of range", term.index)));
                }
                finite(&format!("task.terminal[{k}]"), &[term.target, term.weight])?;
            }
            if t.initial_control.len() != n {
                return Err(invalid("task.initial_control", format!("has {} entries for {n} dofs", t.initial_control.len())));
            }
            finite("task.initial_control", &t.initial_control)?;
            if !(t.control_weight >= 0.0 && t.defect_weight >= 0.0) {
                return Err(invalid("task", "weights must be nonnegative"));
            }
            if !(t.step_size > 0.0 && t.step_size.is_finite()) {
                return Err(invalid("task.step_size", "must be positive"));
            }
            if t.segments == 0 || t.segments > t.steps {
                return Err(invalid("task.segments", "must lie in 1..=steps"));
            }
        }
        Ok(())
    }

    fn check_pose(&self, field: &str, p: &Pose) -> Result<()> {
        finite(field, &p.translation)?;
        finite(field, &p.rotation)?;
        if p.rotation.iter().map(|v| v * v).sum::<f64>() < 1e-12 {
            return Err(invalid(format!("{field}.rotation"), "quaternion is zero"));
        }
        Ok(())
    }

    fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    /// Builds the world and initial state (zero controls).
    pub fn build(&self) -> Result<(World, WorldState)> {
        self.validate()?;
        let bodies = self
            .bodies
            .iter()
            .map(|b| {
                let axis = Vector3::from(b.joint.axis).normalize();
                let joint = match b.joint.kind {
                    JointType::Revolute => Joint::revolute(axis),
                    JointType::Prismatic => Joint::prismatic(axis),
                };
                Body {
                    name: b.name.clone(),
                    parent: b.parent.as_deref().and_then(|p| self.body_index(p)),
                    placement: b.placement.transform(),
                    joint,
                    inertia: body_inertia(b),
                }
            })
            .collect();
        let skel = Skeleton::new(bodies, Vector3::from(self.gravity))?;
        let colliders = self
            .colliders
            .iter()
            .map(|c| Collider {
                name: c.name.clone(),
                body: c.body.as_deref().and_then(|b| self.body_index(b)),
                local: c.pose.transform(),
                shape: c.shape.clone(),
                restitution: c.restitution,
                friction: c.friction,
            })
            .collect();
        let actuated = self.bodies.iter().map(|b| b.actuated).collect();
        let world = World::new(skel, colliders, actuated)?;
        let n = self.dofs();
        let state = WorldState::new(
            DVector::from_vec(self.q.clone()),
            DVector::from_vec(self.qd.clone()),
            DVector::zeros(n),
            self.dt,
        );
        Ok((world, state))
    }
}

fn body_inertia(b: &BodyDesc) -> SpatialInertia {
    let [xx, yy, zz, xy, xz, yz] = b.inertia;
    SpatialInertia::new(b.mass, Vector3::from(b.com), Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz))
}

/// A parsed scene with its world and initial state.
#[derive(Clone, Debug)]
pub struct Scene {
    pub desc: SceneDescription,
    pub world: World,
    pub initial: WorldState,
}

impl Scene {
    pub fn from_text(text: &str) -> Result<Scene> {
        let desc = parse(text)?;
        let (world, initial) = desc.build()?;
        Ok(Scene { desc, world, initial })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

/// Header of a trajectory dump for `n` dofs.
pub fn trajectory_header(n: usize) -> String {
    let mut h = String::from("step,t");
    for i in 0..n {
        write!(h, ",q{i}").unwrap();
    }
    for i in 0..n {
        write!(h, ",qd{i}").unwrap();
    }
    h.push_str(",contacts");
    h
}

/// One frame: the state produced by step `step` and the contacts that step
/// resolved, as `kind:first:second:depth:normal_impulse` entries joined by
/// `;`.
pub fn trajectory_record(step: usize, ctx: &StepContext) -> String {
    let s = &ctx.next;
    let mut line = format!("{},{}", step, float((step + 1) as f64 * s.dt));
    for v in s.q.iter().chain(s.qd.iter()) {
        line.push(',');
        line.push_str(&float(*v));
    }
    line.push(',');
    let mut normal_row = 0;
    let mut parts = Vec::new();
    for (r, row) in ctx.rows.iter().enumerate() {
        if row.direction == crate::collision::RowDirection::Normal {
            let c = &ctx.contacts[row.contact];
            parts.push(format!(
                "{}:{}:{}:{}:{}",
                c.kind,
                c.first,
                c.second,
                float(c.depth),
                float(ctx.solution.f[r])
            ));
            normal_row += 1;
        }
    }
    debug_assert_eq!(normal_row, ctx.contacts.len());
    line.push_str(&parts.join(";"));
    line
}

/// Full trajectory dump, one frame per step.
pub fn trajectory_csv(contexts: &[StepContext], n: usize) -> String {
    let mut out = trajectory_header(n);
    out.push('\n');
    for (k, ctx) in contexts.iter().enumerate() {
        out.push_str(&trajectory_record(k, ctx));
        out.push('\n');
    }
    out
}

/// A frame read back from a dump.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub step: usize,
    pub t: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub contacts: Vec<String>,
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Frame>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse { line: 1, column: 1, reason: "empty dump".into() })?;
    let cols = header.split(',').count();
    if cols < 3 || (cols - 3) % 2 != 0 {
        return Err(Error::Parse { line: 1, column: 1, reason: "malformed header".into() });
    }
    let n = (cols - 3) / 2;
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |reason: &str| Error::Parse { line: i + 2, column: 1, reason: reason.into() };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(bad("wrong number of fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("not a number"));
        let step = fields[0].parse::<usize>().map_err(|_| bad("bad step index"))?;
        let t = num(fields[1])?;
        let q = DVector::from_iterator(n, fields[2..2 + n].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
        let qd = DVector::from_iterator(n, fields[2 + n..2 + 2 * n].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
        let last = fields[cols - 1];
        let contacts = if last.is_empty() { vec![] } else { last.split(';').map(String::from).collect() };
        frames.push(Frame { step, t, q, qd, contacts });
    }
    Ok(frames)
}

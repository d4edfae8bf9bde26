//! Contact detection between primitive shapes and analytic derivatives of
//! contact points and normals.
//!
//! Every contact records the geometric features that generated it. The same
//! formula is evaluated once for values during detection and again with
//! tracked Jacobians when gradients are requested.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Kinematics, Skeleton};
use crate::spatial::Transform;
use crate::tracked::{TScalar, TVec, Tracker};

/// Contacts closer than this to a change of contact kind refuse to produce
/// gradients.
pub const KIND_BOUNDARY_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Segment along the local z axis with the given half length, swept by a sphere.
    Capsule { radius: f64, half_length: f64 },
    Box { half_extents: [f64; 3] },
    /// Solid region `normal . x <= offset` in the collider frame.
    HalfSpace { normal: [f64; 3], offset: f64 },
}

impl Shape {
    fn rank(&self) -> u8 {
        match self {
            Shape::Sphere { .. } => 0,
            Shape::Capsule { .. } => 1,
            Shape::Box { .. } => 2,
            Shape::HalfSpace { .. } => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Collider {
    pub name: String,
    /// Attached body, or `None` for static world geometry.
    pub body: Option<usize>,
    /// Pose of the shape in the body frame.
    pub local: Transform,
    pub shape: Shape,
    pub restitution: f64,
    pub friction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContactKind {
    VertexFace,
    FaceVertex,
    EdgeEdge,
    SphereFace,
    SphereEdge,
    SphereVertex,
    SphereSphere,
    PipePipe,
    PipeSphere,
    VertexPipe,
    EdgePipe,
}

impl ContactKind {
    pub const ALL: [ContactKind; 11] = [
        ContactKind::VertexFace,
        ContactKind::FaceVertex,
        ContactKind::EdgeEdge,
        ContactKind::SphereFace,
        ContactKind::SphereEdge,
        ContactKind::SphereVertex,
        ContactKind::SphereSphere,
        ContactKind::PipePipe,
        ContactKind::PipeSphere,
        ContactKind::VertexPipe,
        ContactKind::EdgePipe,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ContactKind::VertexFace => "vertex-face",
            ContactKind::FaceVertex => "face-vertex",
            ContactKind::EdgeEdge => "edge-edge",
            ContactKind::SphereFace => "sphere-face",
            ContactKind::SphereEdge => "sphere-edge",
            ContactKind::SphereVertex => "sphere-vertex",
            ContactKind::SphereSphere => "sphere-sphere",
            ContactKind::PipePipe => "pipe-pipe",
            ContactKind::PipeSphere => "pipe-sphere",
            ContactKind::VertexPipe => "vertex-pipe",
            ContactKind::EdgePipe => "edge-pipe",
        }
    }

    fn swapped(self) -> Self {
        match self {
            ContactKind::VertexFace => ContactKind::FaceVertex,
            ContactKind::FaceVertex => ContactKind::VertexFace,
            k => k,
        }
    }
}

impl std::fmt::Display for ContactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// World-space primitive elements, each rigidly attached to a body.
#[derive(Clone, Debug, PartialEq)]
struct Pt {
    body: Option<usize>,
    p: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Seg {
    body: Option<usize>,
    a: Vector3<f64>,
    b: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Face {
    body: Option<usize>,
    origin: Vector3<f64>,
    normal: Vector3<f64>,
}

/// Geometric recipe for one contact. The formula yields a normal pointing
/// from element `y` toward element `x`; `negate` flips it so the stored
/// normal always points from the second collider toward the first.
#[derive(Clone, Debug, PartialEq)]
enum Feature {
    PointPoint { x: Pt, rx: f64, y: Pt, ry: f64 },
    PointFace { x: Pt, rx: f64, y: Face },
    PointSegment { x: Pt, rx: f64, y: Seg, ry: f64 },
    SegmentSegment { x: Seg, rx: f64, y: Seg, ry: f64 },
    /// `sign` orients `dx x dy` from `y` toward `x`.
    EdgeEdge { x: Seg, y: Seg, sign: f64 },
}

#[derive(Clone, Debug, PartialEq)]
struct Candidate {
    kind: ContactKind,
    feature: Feature,
    negate: bool,
    margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contact {
    pub kind: ContactKind,
    /// Index of the first collider of the pair.
    pub first: usize,
    pub second: usize,
    pub body_first: Option<usize>,
    pub body_second: Option<usize>,
    pub point: Vector3<f64>,
    /// Unit normal pointing from the second collider toward the first.
    pub normal: Vector3<f64>,
    pub depth: f64,
    pub restitution: f64,
    pub friction: f64,
    /// Distance (in configuration-space units of length) to the nearest
    /// change of contact kind, including losing the contact.
    pub margin: f64,
    feature: Feature,
    negate: bool,
}

/// Contact point and normal with their Jacobians in `q` (3 x n each).
#[derive(Clone, Debug)]
pub struct ContactGradient {
    pub point: TVec,
    pub normal: TVec,
    pub depth: TScalar,
}

impl Contact {
    fn evaluate(&self, tr: &Tracker) -> ContactGradient {
        let (p, n, depth) = evaluate_feature(&self.feature, tr);
        let n = if self.negate { n.neg() } else { n };
        ContactGradient { point: p, normal: n, depth }
    }

    /// Analytic derivatives of the contact point and normal.
    pub fn gradient(&self, skel: &Skeleton, kin: &Kinematics) -> ContactGradient {
        self.evaluate(&Tracker::new(skel, kin, true))
    }

    /// Friction directions: `t1` is the least normal-aligned world axis with
    /// the normal component removed, `t2 = n x t1`.
    pub fn tangents(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = TVec::constant(self.normal, 0);
        let (t1, t2) = tangent_basis(&n, tangent_seed(&self.normal));
        (t1.v, t2.v)
    }
}

fn tangent_seed(n: &Vector3<f64>) -> Vector3<f64> {
    let a = n.abs();
    if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    }
}

fn tangent_basis(n: &TVec, seed: Vector3<f64>) -> (TVec, TVec) {
    let s = TVec::constant(seed, n.ncols());
    let t1 = s.sub(&n.scale_by(&n.dot(&s))).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

fn tpoint(tr: &Tracker, x: &Pt) -> TVec {
    tr.point(x.body, x.p)
}

/// Closest-point parameter of `c` on the line through `a` with direction `d`.
fn line_param(c: &TVec, a: &TVec, d: &TVec) -> TScalar {
    c.sub(a).dot(d).div(&d.dot(d))
}

fn evaluate_feature(f: &Feature, tr: &Tracker) -> (TVec, TVec, TScalar) {
    match f {
        Feature::PointPoint { x, rx, y, ry } => {
            let a = tpoint(tr, x);
            let b = tpoint(tr, y);
            sphere_pair(&a, *rx, &b, *ry)
        }
        Feature::PointFace { x, rx, y } => {
            let a = tpoint(tr, x);
            let o = tr.point(y.body, y.origin);
            let n = tr.direction(y.body, y.normal);
            let dist = a.sub(&o).dot(&n);
            let depth = TScalar::constant(*rx, tr.n).sub(&dist);
            let p = a.sub(&n.scale(*rx));
            (p, n, depth)
        }
        Feature::PointSegment { x, rx, y, ry } => {
            let a = tpoint(tr, x);
            let s0 = tr.point(y.body, y.a);
            let d = tr.point(y.body, y.b).sub(&s0);
            let t = line_param(&a, &s0, &d);
            let c = s0.add(&d.scale_by(&t));
            sphere_pair(&a, *rx, &c, *ry)
        }
        Feature::SegmentSegment { x, rx, y, ry } => {
            let (pa, pb) = segment_closest(tr, x, y);
            sphere_pair(&pa, *rx, &pb, *ry)
        }
        Feature::EdgeEdge { x, y, sign } => {
            let (pa, pb) = segment_closest(tr, x, y);
            let dx = tr.point(x.body, x.b).sub(&tr.point(x.body, x.a));
            let dy = tr.point(y.body, y.b).sub(&tr.point(y.body, y.a));
            let n = dx.cross(&dy).normalize().scale(*sign);
            let depth = pb.sub(&pa).dot(&n);
            let p = pa.add(&pb).scale(0.5);
            (p, n, depth)
        }
    }
}

/// Two spheres (radius zero for points): normal from `b` toward `a`, point
/// weighted by the opposite radii.
fn sphere_pair(a: &TVec, ra: f64, b: &TVec, rb: f64) -> (TVec, TVec, TScalar) {
    let diff = a.sub(b);
    let dist = diff.norm();
    let n = diff.normalize();
    let depth = TScalar::constant(ra + rb, a.ncols()).sub(&dist);
    let p = TVec::weighted(a, rb, b, ra);
    (p, n, depth)
}

/// Closest points between two infinite lines through the segments; callers
/// guarantee both parameters are interior.
fn segment_closest(tr: &Tracker, x: &Seg, y: &Seg) -> (TVec, TVec) {
    let a0 = tr.point(x.body, x.a);
    let da = tr.point(x.body, x.b).sub(&a0);
    let b0 = tr.point(y.body, y.a);
    let db = tr.point(y.body, y.b).sub(&b0);
    let r = a0.sub(&b0);
    let a = da.dot(&da);
    let b = da.dot(&db);
    let c = da.dot(&r);
    let e = db.dot(&db);
    let f = db.dot(&r);
    let denom = a.mul(&e).sub(&b.mul(&b));
    let s = b.mul(&f).sub(&c.mul(&e)).div(&denom);
    let t = a.mul(&f).sub(&b.mul(&c)).div(&denom);
    (a0.add(&da.scale_by(&s)), b0.add(&db.scale_by(&t)))
}

// ---------------------------------------------------------------------------
// detection

struct Placed<'a> {
    body: Option<usize>,
    pose: Transform,
    shape: &'a Shape,
}

impl Placed<'_> {
    fn box_half(&self) -> Vector3<f64> {
        match self.shape {
            Shape::Box { half_extents } => Vector3::from(*half_extents),
            _ => unreachable!(),
        }
    }

    fn segment(&self) -> Seg {
        match self.shape {
            Shape::Capsule { half_length, .. } => Seg {
                body: self.body,
                a: self.pose.transform_point(&Vector3::new(0.0, 0.0, -half_length)),
                b: self.pose.transform_point(&Vector3::new(0.0, 0.0, *half_length)),
            },
            _ => unreachable!(),
        }
    }

    fn radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } | Shape::Capsule { radius, .. } => *radius,
            _ => 0.0,
        }
    }

    fn center(&self) -> Pt {
        Pt { body: self.body, p: self.pose.translation }
    }

    fn box_vertices(&self) -> Vec<Pt> {
        let h = self.box_half();
        let mut out = Vec::with_capacity(8);
        for i in 0..8 {
            let l = Vector3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            out.push(Pt { body: self.body, p: self.pose.transform_point(&l) });
        }
        out
    }

    fn box_edges(&self) -> Vec<Seg> {
        let v = self.box_vertices();
        let mut out = Vec::with_capacity(12);
        for i in 0..8usize {
            for bit in [1usize, 2, 4] {
                if i & bit == 0 {
                    out.push(Seg { body: self.body, a: v[i].p, b: v[i | bit].p });
                }
            }
        }
        out
    }

    fn box_face(&self, axis: usize, sign: f64) -> Face {
        let h = self.box_half();
        let mut ln = Vector3::zeros();
        ln[axis] = sign;
        let n = self.pose.transform_vector(&ln);
        Face { body: self.body, origin: self.pose.translation + n * h[axis], normal: n }
    }

    /// Local coordinates of a world point.
    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }

    fn plane(&self) -> Face {
        match self.shape {
            Shape::HalfSpace { normal, offset } => {
                let ln = Vector3::from(*normal).normalize();
                let n = self.pose.transform_vector(&ln);
                Face { body: self.body, origin: self.pose.transform_point(&(ln * *offset)), normal: n }
            }
            _ => unreachable!(),
        }
    }
}

/// Finds every penetrating contact among `colliders`.
pub fn detect(skel: &Skeleton, kin: &Kinematics, colliders: &[Collider]) -> Vec<Contact> {
    let placed: Vec<Placed> = colliders
        .iter()
        .map(|c| Placed { body: c.body, pose: kin.pose(c.body).compose(&c.local), shape: &c.shape })
        .collect();
    let tr = Tracker::new(skel, kin, false);
    let mut out = Vec::new();
    for i in 0..colliders.len() {
        for j in (i + 1)..colliders.len() {
            if !collidable(skel, colliders[i].body, colliders[j].body) {
                continue;
            }
            let (a, b, swapped) = if placed[i].shape.rank() <= placed[j].shape.rank() {
                (&placed[i], &placed[j], false)
            } else {
                (&placed[j], &placed[i], true)
            };
            for mut cand in pair_candidates(a, b) {
                if swapped {
                    cand.negate = !cand.negate;
                    cand.kind = cand.kind.swapped();
                }
                let (p, n, depth) = evaluate_feature(&cand.feature, &tr);
                if !(depth.v > 0.0) || !p.v.iter().chain(n.v.iter()).all(|v| v.is_finite()) {
                    continue;
                }
                let normal = if cand.negate { -n.v } else { n.v };
                out.push(Contact {
                    kind: cand.kind,
                    first: i,
                    second: j,
                    body_first: colliders[i].body,
                    body_second: colliders[j].body,
                    point: p.v,
                    normal,
                    depth: depth.v,
                    restitution: colliders[i].restitution * colliders[j].restitution,
                    friction: colliders[i].friction.min(colliders[j].friction),
                    margin: cand.margin.min(depth.v),
                    feature: cand.feature,
                    negate: cand.negate,
                });
            }
        }
    }
    out
}

fn collidable(skel: &Skeleton, a: Option<usize>, b: Option<usize>) -> bool {
    match (a, b) {
        (None, None) => false,
        (Some(x), Some(y)) => x != y && skel.parent(x) != Some(y) && skel.parent(y) != Some(x),
        _ => true,
    }
}

/// Fails with `KindBoundary` when any contact sits too close to a change of
/// contact kind for its gradient to be meaningful.
pub fn check_kind_margins(contacts: &[Contact]) -> Result<()> {
    for (i, c) in contacts.iter().enumerate() {
        if c.margin < KIND_BOUNDARY_MARGIN {
            return Err(Error::KindBoundary { contact: i, margin: c.margin });
        }
    }
    Ok(())
}

fn pair_candidates(a: &Placed, b: &Placed) -> Vec<Candidate> {
    use Shape::*;
    match (a.shape, b.shape) {
        (Sphere { .. }, Sphere { .. }) => vec![Candidate {
            kind: ContactKind::SphereSphere,
            feature: Feature::PointPoint { x: a.center(), rx: a.radius(), y: b.center(), ry: b.radius() },
            negate: false,
            margin: f64::INFINITY,
        }],
        (Sphere { .. }, Capsule { .. }) => point_vs_capsule(a.center(), a.radius(), b, false),
        (Sphere { .. }, Box { .. }) => sphere_vs_box(a.center(), a.radius(), b),
        (Sphere { .. }, HalfSpace { .. }) => vec![Candidate {
            kind: ContactKind::SphereFace,
            feature: Feature::PointFace { x: a.center(), rx: a.radius(), y: b.plane() },
            negate: false,
            margin: f64::INFINITY,
        }],
        (Capsule { .. }, Capsule { .. }) => capsule_vs_capsule(a, b),
        (Capsule { .. }, Box { .. }) => capsule_vs_box(a, b),
        (Capsule { .. }, HalfSpace { .. }) => {
            let s = a.segment();
            let plane = b.plane();
            [s.a, s.b]
                .into_iter()
                .map(|p| Candidate {
                    kind: ContactKind::SphereFace,
                    feature: Feature::PointFace { x: Pt { body: a.body, p }, rx: a.radius(), y: plane.clone() },
                    negate: false,
                    margin: f64::INFINITY,
                })
                .collect()
        }
        (Box { .. }, Box { .. }) => box_vs_box(a, b),
        (Box { .. }, HalfSpace { .. }) => {
            let plane = b.plane();
            a.box_vertices()
                .into_iter()
                .map(|v| Candidate {
                    kind: ContactKind::VertexFace,
                    feature: Feature::PointFace { x: v, rx: 0.0, y: plane.clone() },
                    negate: false,
                    margin: f64::INFINITY,
                })
                .collect()
        }
        (HalfSpace { .. }, HalfSpace { .. }) => vec![],
        _ => unreachable!("pairs are ordered by shape rank"),
    }
}

/// Raw (unclamped) closest-point parameter of `c` on segment `s`.
fn seg_param(c: &Vector3<f64>, s: &Seg) -> f64 {
    let d = s.b - s.a;
    (c - s.a).dot(&d) / d.norm_squared()
}

/// A sphere (or point, `r = 0`) against a capsule. `negate_point` states
/// that the point belongs to the second argument of the pair routine.
fn point_vs_capsule(x: Pt, rx: f64, cap: &Placed, negate_point: bool) -> Vec<Candidate> {
    let seg = cap.segment();
    let ry = cap.radius();
    let t = seg_param(&x.p, &seg);
    let len = (seg.b - seg.a).norm();
    let margin = (t.abs().min((1.0 - t).abs())) * len;
    if t > 0.0 && t < 1.0 {
        let kind = if rx > 0.0 { ContactKind::PipeSphere } else { ContactKind::VertexPipe };
        vec![Candidate { kind, feature: Feature::PointSegment { x, rx, y: seg, ry }, negate: negate_point, margin }]
    } else {
        if rx == 0.0 {
            // vertex against a capsule cap; covered by the sphere-vs-box routine
            return vec![];
        }
        let end = if t <= 0.0 { seg.a } else { seg.b };
        vec![Candidate {
            kind: ContactKind::SphereSphere,
            feature: Feature::PointPoint { x, rx, y: Pt { body: cap.body, p: end }, ry },
            negate: negate_point,
            margin,
        }]
    }
}

fn sphere_vs_box(c: Pt, r: f64, bx: &Placed) -> Vec<Candidate> {
    let h = bx.box_half();
    let l = bx.to_local(&c.p);
    let mut clamped = [false; 3];
    let mut margin = f64::INFINITY;
    for k in 0..3 {
        clamped[k] = l[k].abs() > h[k];
        margin = margin.min((l[k].abs() - h[k]).abs());
    }
    let nclamped = clamped.iter().filter(|&&b| b).count();
    let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
    let local_corner = |mask: [bool; 3]| {
        Vector3::new(
            if mask[0] { sgn(l.x) * h.x } else { 0.0 },
            if mask[1] { sgn(l.y) * h.y } else { 0.0 },
            if mask[2] { sgn(l.z) * h.z } else { 0.0 },
        )
    };
    match nclamped {
        0 => {
            let mut pen: Vec<(f64, usize)> = (0..3).map(|k| (h[k] - l[k].abs(), k)).collect();
            pen.sort_by(|a, b| a.0.total_cmp(&b.0));
            let k = pen[0].1;
            vec![Candidate {
                kind: ContactKind::SphereFace,
                feature: Feature::PointFace { x: c, rx: r, y: bx.box_face(k, sgn(l[k])) },
                negate: false,
                margin: margin.min(pen[1].0 - pen[0].0),
            }]
        }
        1 => {
            let k = clamped.iter().position(|&b| b).unwrap();
            vec![Candidate {
                kind: ContactKind::SphereFace,
                feature: Feature::PointFace { x: c, rx: r, y: bx.box_face(k, sgn(l[k])) },
                negate: false,
                margin,
            }]
        }
        2 => {
            let free = clamped.iter().position(|&b| !b).unwrap();
            let base = local_corner(clamped);
            let mut a = base;
            let mut b = base;
            a[free] = -h[free];
            b[free] = h[free];
            let seg = Seg { body: bx.body, a: bx.pose.transform_point(&a), b: bx.pose.transform_point(&b) };
            vec![Candidate {
                kind: ContactKind::SphereEdge,
                feature: Feature::PointSegment { x: c, rx: r, y: seg, ry: 0.0 },
                negate: false,
                margin,
            }]
        }
        _ => {
            let v = bx.pose.transform_point(&local_corner([true; 3]));
            vec![Candidate {
                kind: ContactKind::SphereVertex,
                feature: Feature::PointPoint { x: c, rx: r, y: Pt { body: bx.body, p: v }, ry: 0.0 },
                negate: false,
                margin,
            }]
        }
    }
}

/// Unclamped closest-point parameters of two lines; `None` when parallel.
fn line_params(x: &Seg, y: &Seg) -> Option<(f64, f64)> {
    let da = x.b - x.a;
    let db = y.b - y.a;
    let r = x.a - y.a;
    let (a, b, c, e, f) = (da.dot(&da), da.dot(&db), da.dot(&r), db.dot(&db), db.dot(&r));
    let denom = a * e - b * b;
    if denom <= 1e-12 * a * e {
        return None;
    }
    Some(((b * f - c * e) / denom, (a * f - b * c) / denom))
}

fn interior_margin(t: f64, len: f64) -> f64 {
    t.min(1.0 - t) * len
}

fn capsule_vs_capsule(a: &Placed, b: &Placed) -> Vec<Candidate> {
    let sa = a.segment();
    let sb = b.segment();
    let (ra, rb) = (a.radius(), b.radius());
    if let Some((s, t)) = line_params(&sa, &sb) {
        if s > 0.0 && s < 1.0 && t > 0.0 && t < 1.0 {
            let margin = interior_margin(s, (sa.b - sa.a).norm()).min(interior_margin(t, (sb.b - sb.a).norm()));
            return vec![Candidate {
                kind: ContactKind::PipePipe,
                feature: Feature::SegmentSegment { x: sa, rx: ra, y: sb, ry: rb },
                negate: false,
                margin,
            }];
        }
    }
    // an endpoint is involved: the deepest endpoint-vs-capsule candidate wins
    let line_margin = match line_params(&sa, &sb) {
        Some((s, t)) => outside_margin(s, (sa.b - sa.a).norm()).min(outside_margin(t, (sb.b - sb.a).norm())),
        None => 0.0,
    };
    let mut out: Vec<(f64, Candidate)> = Vec::new();
    for (pt, owner, r, cap, negate) in [
        (sa.a, a, ra, b, false),
        (sa.b, a, ra, b, false),
        (sb.a, b, rb, a, true),
        (sb.b, b, rb, a, true),
    ] {
        for mut cand in point_vs_capsule(Pt { body: owner.body, p: pt }, r, cap, negate) {
            cand.margin = cand.margin.min(line_margin);
            out.push((plain_depth(&cand.feature), cand));
        }
    }
    out.into_iter()
        .max_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, c)| vec![c])
        .unwrap_or_default()
}

/// Distance of a parameter outside `[0, 1]` from the interval, scaled by length.
fn outside_margin(t: f64, len: f64) -> f64 {
    if t <= 0.0 {
        -t * len
    } else if t >= 1.0 {
        (t - 1.0) * len
    } else {
        f64::INFINITY
    }
}

fn plain_depth(f: &Feature) -> f64 {
    evaluate_feature(f, &Tracker::values()).2.v
}

fn capsule_vs_box(cap: &Placed, bx: &Placed) -> Vec<Candidate> {
    let seg = cap.segment();
    let r = cap.radius();
    let mut out = Vec::new();
    for p in [seg.a, seg.b] {
        out.extend(sphere_vs_box(Pt { body: cap.body, p }, r, bx));
    }
    let len = (seg.b - seg.a).norm();
    for edge in bx.box_edges() {
        if let Some((s, t)) = line_params(&seg, &edge) {
            if s > 0.0 && s < 1.0 && t > 0.0 && t < 1.0 {
                let margin = interior_margin(s, len).min(interior_margin(t, (edge.b - edge.a).norm()));
                out.push(Candidate {
                    kind: ContactKind::EdgePipe,
                    feature: Feature::SegmentSegment { x: seg.clone(), rx: r, y: edge, ry: 0.0 },
                    negate: false,
                    margin,
                });
            }
        }
    }
    for v in bx.box_vertices() {
        let t = seg_param(&v.p, &seg);
        if t > 0.0 && t < 1.0 {
            out.push(Candidate {
                kind: ContactKind::VertexPipe,
                feature: Feature::PointSegment { x: v, rx: 0.0, y: seg.clone(), ry: r },
                negate: true,
                margin: interior_margin(t, len),
            });
        }
    }
    out
}

/// Penetration of a world point into a box: the shallowest face, its depth
/// and the gap to the next face. `None` when outside.
fn inside_box(bx: &Placed, p: &Vector3<f64>) -> Option<(usize, f64, f64, f64)> {
    let h = bx.box_half();
    let l = bx.to_local(p);
    let mut pen: Vec<(f64, usize)> = (0..3).map(|k| (h[k] - l[k].abs(), k)).collect();
    if pen.iter().any(|&(d, _)| d <= 0.0) {
        return None;
    }
    pen.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = pen[0].1;
    let sign = if l[k] >= 0.0 { 1.0 } else { -1.0 };
    Some((k, sign, pen[0].0, pen[1].0 - pen[0].0))
}

fn box_vs_box(a: &Placed, b: &Placed) -> Vec<Candidate> {
    let mut out = Vec::new();
    for v in a.box_vertices() {
        if let Some((k, sign, depth, gap)) = inside_box(b, &v.p) {
            out.push(Candidate {
                kind: ContactKind::VertexFace,
                feature: Feature::PointFace { x: v, rx: 0.0, y: b.box_face(k, sign) },
                negate: false,
                margin: depth.min(gap),
            });
        }
    }
    for v in b.box_vertices() {
        if let Some((k, sign, depth, gap)) = inside_box(a, &v.p) {
            out.push(Candidate {
                kind: ContactKind::FaceVertex,
                feature: Feature::PointFace { x: v, rx: 0.0, y: a.box_face(k, sign) },
                negate: true,
                margin: depth.min(gap),
            });
        }
    }
    let center_gap = a.pose.translation - b.pose.translation;
    for ea in a.box_edges() {
        for eb in b.box_edges() {
            let Some((s, t)) = line_params(&ea, &eb) else { continue };
            if !(s > 0.0 && s < 1.0 && t > 0.0 && t < 1.0) {
                continue;
            }
            let pa = ea.a + (ea.b - ea.a) * s;
            let pb = eb.a + (eb.b - eb.a) * t;
            let (Some(ia), Some(ib)) = (inside_box(b, &pa), inside_box(a, &pb)) else { continue };
            let axis = (ea.b - ea.a).cross(&(eb.b - eb.a));
            let sign = if axis.dot(&center_gap) >= 0.0 { 1.0 } else { -1.0 };
            let margin = interior_margin(s, (ea.b - ea.a).norm())
                .min(interior_margin(t, (eb.b - eb.a).norm()))
                .min(ia.2)
                .min(ib.2)
                .min(axis.dot(&center_gap).abs() / axis.norm());
            out.push(Candidate {
                kind: ContactKind::EdgeEdge,
                feature: Feature::EdgeEdge { x: ea.clone(), y: eb, sign },
                negate: false,
                margin,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// contact Jacobians

/// One row of the contact Jacobian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowDirection {
    Normal,
    Tangent1,
    Tangent2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContactRow {
    pub contact: usize,
    pub direction: RowDirection,
}

/// Row layout for a contact list: a normal row per contact followed by two
/// tangent rows when the contact has friction.
pub fn contact_rows(contacts: &[Contact]) -> Vec<ContactRow> {
    let mut rows = Vec::new();
    for (i, c) in contacts.iter().enumerate() {
        rows.push(ContactRow { contact: i, direction: RowDirection::Normal });
        if c.friction > 0.0 {
            rows.push(ContactRow { contact: i, direction: RowDirection::Tangent1 });
            rows.push(ContactRow { contact: i, direction: RowDirection::Tangent2 });
        }
    }
    rows
}

/// Contact Jacobian `J` (rows as in [`contact_rows`]) and, when requested, its
/// derivative `dJ[r][(i, j)] = d J_{r i} / d q_j`.
pub fn contact_jacobian(
    skel: &Skeleton,
    kin: &Kinematics,
    contacts: &[Contact],
    with_derivative: bool,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = skel.dofs();
    let rows = contact_rows(contacts);
    let mut jac = DMatrix::zeros(rows.len(), n);
    let mut djac = Vec::new();
    let tr = if with_derivative { Tracker::new(skel, kin, true) } else { Tracker::values() };
    let mut r = 0;
    for c in contacts {
        let g = c.evaluate(&tr);
        let n_t = g.normal.clone();
        let mut dirs = vec![n_t.clone()];
        if c.friction > 0.0 {
            let (t1, t2) = tangent_basis(&n_t, tangent_seed(&c.normal));
            dirs.push(t1);
            dirs.push(t2);
        }
        for d in dirs {
            let (row, drow) = jacobian_row(skel, kin, c, &g.point, &d, with_derivative);
            jac.set_row(r, &row.transpose());
            if let Some(dr) = drow {
                djac.push(dr);
            }
            r += 1;
        }
    }
    (jac, djac)
}

fn psi(skel: &Skeleton, c: &Contact, i: usize) -> f64 {
    let a = c.body_first.is_some_and(|b| skel.supports(i, b));
    let b = c.body_second.is_some_and(|b| skel.supports(i, b));
    match (a, b) {
        (true, false) => 1.0,
        (false, true) => -1.0,
        _ => 0.0,
    }
}

fn jacobian_row(
    skel: &Skeleton,
    kin: &Kinematics,
    c: &Contact,
    p: &TVec,
    d: &TVec,
    with_derivative: bool,
) -> (nalgebra::DVector<f64>, Option<DMatrix<f64>>) {
    let n = skel.dofs();
    let pxd = p.cross(d);
    let mut row = nalgebra::DVector::zeros(n);
    let mut drow = if with_derivative { Some(DMatrix::zeros(n, n)) } else { None };
    for i in 0..n {
        let s = psi(skel, c, i);
        if s == 0.0 {
            continue;
        }
        let a = &kin.screws[i];
        row[i] = s * (a.angular.dot(&pxd.v) + a.linear.dot(&d.v));
        if let Some(dm) = drow.as_mut() {
            for j in 0..n {
                // d(screw_i)/dq_j = [screw_j, screw_i] for ancestors j of i
                let mut v = a.angular.dot(&pxd.d.column(j)) + a.linear.dot(&d.d.column(j));
                if j != i && skel.supports(j, i) {
                    let da = crate::spatial::lie_bracket(&kin.screws[j], a);
                    v += da.angular.dot(&pxd.v) + da.linear.dot(&d.v);
                }
                dm[(i, j)] = s * v;
            }
        }
    }
    (row, drow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{Body, Joint};
    use crate::spatial::SpatialInertia;
    use nalgebra::{DVector, Matrix3};

    /// Six-dof floating body chains, one per entry; the last body of each
    /// chain carries the shape.
    fn floating(shapes: &[(Shape, Transform)], statics: &[(Shape, Transform)]) -> (Skeleton, Vec<Collider>) {
        let mut bodies = Vec::new();
        let mut colliders = Vec::new();
        for (k, (shape, pose)) in shapes.iter().enumerate() {
            let base = bodies.len();
            let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
            for (d, axis) in axes.iter().chain(axes.iter()).enumerate() {
                bodies.push(Body {
                    name: format!("b{k}_{d}"),
                    parent: if d == 0 { None } else { Some(bodies.len() - 1) },
                    placement: if d == 0 { Transform::from_translation(pose.translation) } else { Transform::identity() },
                    joint: if d < 3 { Joint::prismatic(*axis) } else { Joint::revolute(*axis) },
                    inertia: SpatialInertia::new(1.0, Vector3::zeros(), Matrix3::identity() * 0.1),
                });
            }
            colliders.push(Collider {
                name: format!("c{k}"),
                body: Some(base + 5),
                local: Transform::new(pose.rotation, Vector3::zeros()),
                shape: shape.clone(),
                restitution: 0.0,
                friction: 0.5,
            });
        }
        for (k, (shape, pose)) in statics.iter().enumerate() {
            colliders.push(Collider {
                name: format!("s{k}"),
                body: None,
                local: *pose,
                shape: shape.clone(),
                restitution: 0.0,
                friction: 0.5,
            });
        }
        (Skeleton::new(bodies, Vector3::zeros()).unwrap(), colliders)
    }

    fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        Transform::from_axis_angle(&axis, angle).rotation
    }

    fn at(r: Matrix3<f64>, p: [f64; 3]) -> Transform {
        Transform::new(r, Vector3::from(p))
    }

    fn sphere(r: f64) -> Shape {
        Shape::Sphere { radius: r }
    }

    fn capsule(r: f64, h: f64) -> Shape {
        Shape::Capsule { radius: r, half_length: h }
    }

    fn cuboid(h: [f64; 3]) -> Shape {
        Shape::Box { half_extents: h }
    }

    fn ground() -> Shape {
        Shape::HalfSpace { normal: [0.0, 0.0, 1.0], offset: 0.0 }
    }

    fn id() -> Matrix3<f64> {
        Matrix3::identity()
    }

    fn along_x() -> Matrix3<f64> {
        rot(Vector3::y(), std::f64::consts::FRAC_PI_2)
    }

    fn tilted() -> Matrix3<f64> {
        rot(Vector3::new(0.3, 0.5, 0.1), 0.4)
    }

    fn scenes() -> Vec<(ContactKind, Skeleton, Vec<Collider>)> {
        let mut out = Vec::new();
        let mut add = |k, dynamic: Vec<(Shape, Transform)>, statics: Vec<(Shape, Transform)>| {
            let (s, c) = floating(&dynamic, &statics);
            out.push((k, s, c));
        };
        add(
            ContactKind::SphereSphere,
            vec![(sphere(0.5), at(id(), [0.0, 0.0, 0.0])), (sphere(0.4), at(id(), [0.8, 0.1, 0.05]))],
            vec![],
        );
        add(
            ContactKind::SphereFace,
            vec![(sphere(0.5), at(id(), [0.1, 0.2, 0.4])), (cuboid([1.0, 1.0, 0.5]), at(tilted() * 0.0 + id(), [0.0, 0.0, -0.5]))],
            vec![],
        );
        add(
            ContactKind::SphereEdge,
            vec![(sphere(0.3), at(id(), [1.2, 0.2, 0.15])), (cuboid([1.0, 1.0, 0.5]), at(id(), [0.0, 0.0, -0.5]))],
            vec![],
        );
        add(
            ContactKind::SphereVertex,
            vec![(sphere(0.3), at(id(), [1.15, 1.1, 0.1])), (cuboid([1.0, 1.0, 0.5]), at(id(), [0.0, 0.0, -0.5]))],
            vec![],
        );
        add(
            ContactKind::PipePipe,
            vec![
                (capsule(0.2, 1.0), at(along_x(), [0.1, 0.05, 0.3])),
                (capsule(0.2, 1.0), at(rot(Vector3::x(), 1.4), [0.0, 0.0, 0.0])),
            ],
            vec![],
        );
        add(
            ContactKind::PipeSphere,
            vec![(sphere(0.2), at(id(), [0.3, 0.0, 0.35])), (capsule(0.2, 1.0), at(along_x(), [0.0, 0.0, 0.0]))],
            vec![],
        );
        add(
            ContactKind::VertexPipe,
            vec![
                (capsule(0.2, 1.0), at(along_x(), [0.0, 0.0, 0.0])),
                (cuboid([0.3, 0.3, 0.3]), at(rot(Vector3::new(1.0, 1.0, 0.0), 0.9), [0.1, 0.05, 0.62])),
            ],
            vec![],
        );
        add(
            ContactKind::EdgePipe,
            vec![
                (capsule(0.2, 1.0), at(along_x(), [0.0, 0.0, 0.0])),
                (cuboid([0.2, 0.2, 0.2]), at(rot(Vector3::new(0.05, 1.0, 0.0), std::f64::consts::FRAC_PI_4), [0.1, 0.03, 0.45])),
            ],
            vec![],
        );
        add(
            ContactKind::VertexFace,
            vec![(cuboid([0.3, 0.2, 0.25]), at(tilted(), [0.0, 0.0, 0.33]))],
            vec![(ground(), Transform::identity())],
        );
        add(
            ContactKind::FaceVertex,
            vec![
                (cuboid([1.0, 1.0, 0.5]), at(id(), [0.0, 0.0, -0.5])),
                (cuboid([0.3, 0.2, 0.25]), at(tilted(), [0.1, -0.1, 0.33])),
            ],
            vec![],
        );
        add(
            ContactKind::EdgeEdge,
            vec![
                (cuboid([0.5, 0.3, 0.3]), at(rot(Vector3::new(1.0, 0.02, 0.0), std::f64::consts::FRAC_PI_4), [0.02, 0.01, 0.8])),
                (cuboid([0.3, 0.5, 0.3]), at(rot(Vector3::new(0.03, 1.0, 0.0), std::f64::consts::FRAC_PI_4), [0.0, 0.0, 0.0])),
            ],
            vec![],
        );
        out
    }

    #[test]
    fn every_kind_is_detected() {
        for (kind, skel, colliders) in scenes() {
            let q = DVector::zeros(skel.dofs());
            let kin = skel.forward_kinematics(&q);
            let contacts = detect(&skel, &kin, &colliders);
            assert!(contacts.iter().any(|c| c.kind == kind), "{kind}: got {:?}", contacts.iter().map(|c| c.kind).collect::<Vec<_>>());
            for c in &contacts {
                assert!(c.depth > 0.0);
                assert!((c.normal.norm() - 1.0).abs() < 1e-12);
                // normal points from the second collider toward the first
                let pa = kin.pose(colliders[c.first].body).compose(&colliders[c.first].local).translation;
                let pb = kin.pose(colliders[c.second].body).compose(&colliders[c.second].local).translation;
                if !matches!(colliders[c.second].shape, Shape::HalfSpace { .. }) {
                    assert!(c.normal.dot(&(pa - pb)) > 0.0, "{kind} normal orientation");
                }
            }
        }
    }

    fn matching<'a>(contacts: &'a [Contact], c: &Contact) -> &'a Contact {
        contacts
            .iter()
            .filter(|o| o.kind == c.kind && o.first == c.first && o.second == c.second)
            .min_by(|a, b| (a.point - c.point).norm().total_cmp(&(b.point - c.point).norm()))
            .expect("contact persists under perturbation")
    }

    #[test]
    fn point_and_normal_gradients_match_finite_differences() {
        for (kind, skel, colliders) in scenes() {
            let n = skel.dofs();
            let q = DVector::from_fn(n, |i, _| 0.01 * ((i as f64) * 0.7).sin());
            let kin = skel.forward_kinematics(&q);
            let contacts = detect(&skel, &kin, &colliders);
            check_kind_margins(&contacts).unwrap();
            let (_, dj) = contact_jacobian(&skel, &kin, &contacts, true);
            let h = 1e-6;
            for c in &contacts {
                let g = c.gradient(&skel, &kin);
                assert!((g.point.v - c.point).norm() < 1e-14);
                for j in 0..n {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[j] += h;
                    qm[j] -= h;
                    let kp = skel.forward_kinematics(&qp);
                    let km = skel.forward_kinematics(&qm);
                    let cp = detect(&skel, &kp, &colliders);
                    let cm = detect(&skel, &km, &colliders);
                    let (a, b) = (matching(&cp, c), matching(&cm, c));
                    let dp = (a.point - b.point) / (2.0 * h);
                    let dn = (a.normal - b.normal) / (2.0 * h);
                    assert!((dp - g.point.d.column(j)).norm() < 1e-6, "{kind} dp/dq{j}");
                    assert!((dn - g.normal.d.column(j)).norm() < 1e-6, "{kind} dn/dq{j}");
                }
            }
            // the Jacobian derivative tensor
            for j in 0..n {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                let kp = skel.forward_kinematics(&qp);
                let km = skel.forward_kinematics(&qm);
                let cp: Vec<Contact> = contacts.iter().map(|c| matching(&detect(&skel, &kp, &colliders), c).clone()).collect();
                let cm: Vec<Contact> = contacts.iter().map(|c| matching(&detect(&skel, &km, &colliders), c).clone()).collect();
                let jp = contact_jacobian(&skel, &kp, &cp, false).0;
                let jm = contact_jacobian(&skel, &km, &cm, false).0;
                let fd = (jp - jm) / (2.0 * h);
                for (r, d) in dj.iter().enumerate() {
                    for i in 0..n {
                        assert!((fd[(r, i)] - d[(i, j)]).abs() < 1e-6, "{kind} dJ[{r}][{i},{j}]");
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_rows_are_relative_point_velocities() {
        for (kind, skel, colliders) in scenes() {
            let n = skel.dofs();
            let q = DVector::zeros(n);
            let kin = skel.forward_kinematics(&q);
            let contacts = detect(&skel, &kin, &colliders);
            let (jac, _) = contact_jacobian(&skel, &kin, &contacts, false);
            let c = &contacts[0];
            let ja = kin.point_jacobian(&skel, c.body_first, &c.point);
            let jb = kin.point_jacobian(&skel, c.body_second, &c.point);
            let expect = c.normal.transpose() * (ja - jb);
            assert!((jac.row(0) - expect).amax() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn tangents_form_an_orthonormal_frame() {
        for n in [Vector3::z(), Vector3::new(0.3, -0.2, 0.9).normalize(), Vector3::new(1.0, 1.0, 0.0).normalize()] {
            let nt = TVec::constant(n, 0);
            let (t1, t2) = tangent_basis(&nt, tangent_seed(&n));
            assert!(t1.v.dot(&n).abs() < 1e-14 && t2.v.dot(&n).abs() < 1e-14);
            assert!((t1.v.norm() - 1.0).abs() < 1e-14 && (t2.v.norm() - 1.0).abs() < 1e-14);
            assert!((t1.v.cross(&t2.v) - n).norm() < 1e-14);
        }
    }

    #[test]
    fn separated_and_static_pairs_produce_nothing() {
        let (skel, colliders) = floating(&[(sphere(0.2), at(id(), [0.0, 0.0, 1.0]))], &[(ground(), Transform::identity()), (sphere(1.0), Transform::from_translation(Vector3::new(5.0, 0.0, 0.0)))]);
        let kin = skel.forward_kinematics(&DVector::zeros(6));
        assert!(detect(&skel, &kin, &colliders).is_empty());
    }

    #[test]
    fn kind_boundary_is_flagged() {
        // sphere centre exactly above the box edge plane
        let (skel, colliders) = floating(
            &[(sphere(0.3), at(id(), [1.0, 0.2, 0.7])), (cuboid([1.0, 1.0, 0.5]), at(id(), [0.0, 0.0, 0.0]))],
            &[],
        );
        let kin = skel.forward_kinematics(&DVector::zeros(12));
        let contacts = detect(&skel, &kin, &colliders);
        assert_eq!(contacts.len(), 1);
        assert!(matches!(check_kind_margins(&contacts), Err(Error::KindBoundary { .. })));
    }
}

//! Single-DOF stage tree and the recursive algorithms over it.
//!
//! Every joint is expanded into a chain of single-axis stages (one per
//! generalized coordinate); intermediate stages are massless and the last
//! stage of a joint carries the child link. The free root is three prismatic
//! stages followed by a rotation group whose three axes stay fixed in the
//! parent frame; its coordinates are a rotation vector and its velocities
//! the angular velocity in the parent frame. All spatial quantities are
//! expressed in world coordinates with Plücker vectors referenced at the
//! world origin, so motion subspaces need no per-node frame transforms.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};

use crate::charmodel::{Joint, JointKind, Link};

/// Spatial vector `(angular, linear)`; used for both motions and forces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SVec {
    pub ang: Vector3<f64>,
    pub lin: Vector3<f64>,
}

impl SVec {
    pub const ZERO: SVec = SVec {
        ang: Vector3::new(0.0, 0.0, 0.0),
        lin: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(ang: Vector3<f64>, lin: Vector3<f64>) -> Self {
        Self { ang, lin }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.ang * s, self.lin * s)
    }

    pub fn add(&self, o: &SVec) -> Self {
        Self::new(self.ang + o.ang, self.lin + o.lin)
    }

    pub fn sub(&self, o: &SVec) -> Self {
        Self::new(self.ang - o.ang, self.lin - o.lin)
    }

    /// Motion-force pairing.
    pub fn dot(&self, f: &SVec) -> f64 {
        self.ang.dot(&f.ang) + self.lin.dot(&f.lin)
    }

    /// Motion cross motion, `self ×m m`.
    pub fn cross_motion(&self, m: &SVec) -> SVec {
        SVec::new(
            self.ang.cross(&m.ang),
            self.ang.cross(&m.lin) + self.lin.cross(&m.ang),
        )
    }

    /// Motion cross force, `self ×* f`.
    pub fn cross_force(&self, f: &SVec) -> SVec {
        SVec::new(
            self.ang.cross(&f.ang) + self.lin.cross(&f.lin),
            self.ang.cross(&f.lin),
        )
    }

    /// Velocity of the world point `p` for this spatial motion.
    pub fn point_velocity(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.lin + self.ang.cross(p)
    }
}

/// Rigid-body inertia about the world origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbi {
    pub mass: f64,
    /// First mass moment `m c`.
    pub h: Vector3<f64>,
    /// Rotational inertia about the origin.
    pub ibar: Matrix3<f64>,
}

impl Rbi {
    pub const ZERO: Rbi = Rbi {
        mass: 0.0,
        h: Vector3::new(0.0, 0.0, 0.0),
        ibar: Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    };

    /// Body of `mass` with COM at `c` and COM-frame inertia `ic` (world axes).
    pub fn from_com(mass: f64, c: Vector3<f64>, ic: Matrix3<f64>) -> Self {
        let cc = c.dot(&c);
        let ibar = ic + (Matrix3::identity() * cc - c * c.transpose()) * mass;
        Self { mass, h: c * mass, ibar }
    }

    pub fn add(&self, o: &Rbi) -> Rbi {
        Rbi {
            mass: self.mass + o.mass,
            h: self.h + o.h,
            ibar: self.ibar + o.ibar,
        }
    }

    pub fn mul(&self, v: &SVec) -> SVec {
        SVec::new(
            self.ibar * v.ang + self.h.cross(&v.lin),
            v.lin * self.mass - self.h.cross(&v.ang),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Prismatic,
    Revolute,
    /// Axis `k` of a rotation-vector group; the group rotation is applied at `k = 2`.
    Spherical(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub parent: Option<usize>,
    /// Stage origin in the parent stage frame.
    pub offset: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub stage: Stage,
    /// Node whose velocity moves this node's motion axis.
    pub carrier: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct BodyInertia {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct KinematicTree {
    pub nodes: Vec<Node>,
    pub link_node: Vec<usize>,
    pub bodies: Vec<BodyInertia>,
    pub damping: Vec<f64>,
}

const FREE_STAGES: [(Stage, [f64; 3]); 6] = [
    (Stage::Prismatic, [1.0, 0.0, 0.0]),
    (Stage::Prismatic, [0.0, 1.0, 0.0]),
    (Stage::Prismatic, [0.0, 0.0, 1.0]),
    (Stage::Spherical(0), [1.0, 0.0, 0.0]),
    (Stage::Spherical(1), [0.0, 1.0, 0.0]),
    (Stage::Spherical(2), [0.0, 0.0, 1.0]),
];

impl KinematicTree {
    /// Expects joints already validated and topologically ordered.
    pub(crate) fn build(links: &[Link], joints: &[Joint]) -> Self {
        let mut nodes: Vec<Node> = Vec::new();
        let mut link_node = vec![usize::MAX; links.len()];
        let mut damping = Vec::new();
        for j in joints {
            let mut parent = j.parent_link.map(|p| link_node[p]);
            let stages: Vec<(Stage, Vector3<f64>)> = match j.kind {
                JointKind::Free6 => FREE_STAGES
                    .iter()
                    .map(|(p, a)| (*p, Vector3::from(*a)))
                    .collect(),
                _ => j.axes.iter().map(|a| (Stage::Revolute, *a)).collect(),
            };
            let mut group_base = parent;
            for (k, (stage, axis)) in stages.into_iter().enumerate() {
                let idx = nodes.len();
                if stage == Stage::Spherical(0) {
                    group_base = parent;
                }
                nodes.push(Node {
                    parent,
                    offset: if k == 0 { j.anchor } else { Vector3::zeros() },
                    axis,
                    stage,
                    carrier: match stage {
                        Stage::Spherical(_) => group_base,
                        _ => parent,
                    },
                });
                damping.push(if j.kind == JointKind::Free6 { 0.0 } else { j.damping });
                parent = Some(idx);
            }
            link_node[j.child_link] = nodes.len() - 1;
        }
        let bodies = links
            .iter()
            .map(|l| BodyInertia {
                mass: l.mass,
                com: l.com_offset,
                inertia: l.inertia,
            })
            .collect();
        Self {
            nodes,
            link_node,
            bodies,
            damping,
        }
    }

    pub fn kinematics(&self, q: &DVector<f64>) -> Kinematics {
        let n = self.nodes.len();
        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            let (rp, pp) = match node.parent {
                Some(p) => (rot[p], pos[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            let axis_w: Vector3<f64> = rp * node.axis;
            match node.stage {
                Stage::Prismatic => {
                    let p = pp + rp * (node.offset + node.axis * q[i]);
                    rot.push(rp);
                    pos.push(p);
                    s.push(SVec::new(Vector3::zeros(), axis_w));
                }
                Stage::Revolute => {
                    let r = Rotation3::from_axis_angle(&Unit::new_unchecked(node.axis), q[i]);
                    let p = pp + rp * node.offset;
                    rot.push(rp * r.matrix());
                    pos.push(p);
                    s.push(SVec::new(axis_w, p.cross(&axis_w)));
                }
                Stage::Spherical(k) => {
                    let p = pp + rp * node.offset;
                    let r = if k == 2 {
                        rp * rotation_vector(q, i)
                    } else {
                        rp
                    };
                    rot.push(r);
                    pos.push(p);
                    s.push(SVec::new(axis_w, p.cross(&axis_w)));
                }
            }
        }
        let mut inertia = vec![Rbi::ZERO; n];
        let mut com = Vec::with_capacity(self.link_node.len());
        for (l, &ni) in self.link_node.iter().enumerate() {
            let b = &self.bodies[l];
            let r = rot[ni];
            let c = pos[ni] + r * b.com;
            com.push(c);
            inertia[ni] = Rbi::from_com(b.mass, c, r * b.inertia * r.transpose());
        }
        Kinematics {
            link_node: self.link_node.clone(),
            rot,
            pos,
            s,
            inertia,
            com,
        }
    }

    /// Parent chain of `node`, starting at the node itself.
    pub fn support(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(node), move |&i| self.nodes[i].parent)
    }

    /// Composite-rigid-body algorithm.
    pub fn mass_matrix(&self, kin: &Kinematics) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut ic = kin.inertia.clone();
        for i in (0..n).rev() {
            if let Some(p) = self.nodes[i].parent {
                ic[p] = ic[p].add(&ic[i]);
            }
        }
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let f = ic[i].mul(&kin.s[i]);
            m[(i, i)] = kin.s[i].dot(&f);
            let mut j = self.nodes[i].parent;
            while let Some(jj) = j {
                let v = kin.s[jj].dot(&f);
                m[(i, jj)] = v;
                m[(jj, i)] = v;
                j = self.nodes[jj].parent;
            }
        }
        m
    }

    pub fn velocities(&self, kin: &Kinematics, qd: &DVector<f64>) -> Vec<SVec> {
        let mut v: Vec<SVec> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let vp = node.parent.map_or(SVec::ZERO, |p| v[p]);
            v.push(vp.add(&kin.s[i].scale(qd[i])));
        }
        v
    }

    /// Recursive Newton-Euler inverse dynamics.
    ///
    /// `gravity` is the world gravity vector; `ext` holds one world spatial
    /// force per node (about the world origin).
    pub fn inverse_dynamics(
        &self,
        kin: &Kinematics,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
        gravity: &Vector3<f64>,
        ext: &[SVec],
    ) -> DVector<f64> {
        let n = self.nodes.len();
        let a0 = SVec::new(Vector3::zeros(), -gravity);
        let mut v: Vec<SVec> = Vec::with_capacity(n);
        let mut a: Vec<SVec> = Vec::with_capacity(n);
        let mut f: Vec<SVec> = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            let (vp, ap) = node.parent.map_or((SVec::ZERO, a0), |p| (v[p], a[p]));
            let vc = node.carrier.map_or(SVec::ZERO, |c| v[c]);
            let sq = kin.s[i].scale(qd[i]);
            let vi = vp.add(&sq);
            let ai = ap.add(&kin.s[i].scale(qdd[i])).add(&vc.cross_motion(&sq));
            let iv = kin.inertia[i].mul(&vi);
            let fi = kin.inertia[i]
                .mul(&ai)
                .add(&vi.cross_force(&iv))
                .sub(&ext[i]);
            v.push(vi);
            a.push(ai);
            f.push(fi);
        }
        let mut tau = DVector::zeros(n);
        for i in (0..n).rev() {
            tau[i] = kin.s[i].dot(&f[i]);
            if let Some(p) = self.nodes[i].parent {
                f[p] = f[p].add(&f[i]);
            }
        }
        tau
    }

    /// Position update `q + dt * qd`, composing rotation groups on SO(3).
    pub fn integrate(&self, q: &DVector<f64>, qd: &DVector<f64>, dt: f64) -> DVector<f64> {
        let mut out = q + qd * dt;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.stage == Stage::Spherical(2) {
                let w = Vector3::new(qd[i - 2], qd[i - 1], qd[i]) * dt;
                let r = Rotation3::new(w) * Rotation3::from_matrix_unchecked(rotation_vector(q, i));
                let v = r.scaled_axis();
                out[i - 2] = v.x;
                out[i - 1] = v.y;
                out[i] = v.z;
            }
        }
        out
    }

    /// Columns of the world-frame linear Jacobian of point `p` fixed to `link`.
    pub fn point_jacobian(
        &self,
        kin: &Kinematics,
        link: usize,
        p: &Vector3<f64>,
    ) -> Vec<(usize, Vector3<f64>)> {
        self.support(self.link_node[link])
            .map(|j| (j, kin.s[j].point_velocity(p)))
            .collect()
    }
}

fn rotation_vector(q: &DVector<f64>, last: usize) -> Matrix3<f64> {
    Rotation3::new(Vector3::new(q[last - 2], q[last - 1], q[last])).into_inner()
}

/// Per-node world poses and motion subspaces for one configuration.
#[derive(Debug, Clone)]
pub struct Kinematics {
    link_node: Vec<usize>,
    /// Node frame to world rotation.
    pub rot: Vec<Matrix3<f64>>,
    /// Node origin in world coordinates.
    pub pos: Vec<Vector3<f64>>,
    /// Motion subspace column of each node, world Plücker coordinates.
    pub s: Vec<SVec>,
    /// World inertia of the link attached to each node (zero if massless).
    pub inertia: Vec<Rbi>,
    /// World COM of each link.
    pub com: Vec<Vector3<f64>>,
}

impl Kinematics {
    /// Rotation of a link frame.
    pub fn link_rotation(&self, link: usize) -> &Matrix3<f64> {
        &self.rot[self.link_node[link]]
    }

    /// Origin of a link frame (its joint anchor) in world coordinates.
    pub fn link_origin(&self, link: usize) -> &Vector3<f64> {
        &self.pos[self.link_node[link]]
    }

    /// Local point of a link expressed in world coordinates.
    pub fn link_point(&self, link: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.link_origin(link) + self.link_rotation(link) * local
    }

    pub fn link_node(&self, link: usize) -> usize {
        self.link_node[link]
    }
}

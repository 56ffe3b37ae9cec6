//! Ground contact and joint-limit impulses.
//!
//! Constraints are solved at the velocity level with projected Gauss-Seidel.
//! Each sphere touching (or about to touch) the plane `y = 0` contributes a
//! normal row and two tangent rows; joints near a limit contribute one
//! unilateral row. Friction impulses are projected onto the disk of radius
//! `mu * lambda_n`. The iterate then seeds an exact active-set solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};

use super::tree::Kinematics;
use super::World;
use crate::charmodel::CharacterModel;

/// A collision sphere near or below the ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPoint {
    pub link: usize,
    /// Lowest point of the sphere, world frame.
    pub point: Vector3<f64>,
    /// Signed distance to the plane; negative when penetrating.
    pub gap: f64,
}

/// Impulse applied at one contact during a step, N·s.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactImpulse {
    pub link: usize,
    pub point: Vector3<f64>,
    pub gap: f64,
    pub normal: f64,
    /// Impulse along world X and Z.
    pub tangent: [f64; 2],
}

/// Everything the constraint solver did during one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub contacts: Vec<ContactImpulse>,
    /// `(dof, impulse)`; positive pushes away from the limit.
    pub limits: Vec<(usize, f64)>,
    pub iterations: usize,
}

/// All spheres whose gap is at most `margin`.
pub fn sphere_contacts(model: &CharacterModel, kin: &Kinematics, margin: f64) -> Vec<ContactPoint> {
    let mut out = Vec::new();
    for (l, link) in model.links.iter().enumerate() {
        for shape in &link.collision_shapes {
            for (center, radius) in shape.contact_spheres() {
                let c = kin.link_point(l, &center);
                let gap = c.y - radius;
                if gap <= margin {
                    out.push(ContactPoint {
                        link: l,
                        point: Vector3::new(c.x, c.y - radius, c.z),
                        gap,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Row {
    Normal,
    Tangent { normal: usize, pair: usize },
    Limit,
}

fn target_velocity(gap: f64, dt: f64, world: &World) -> f64 {
    if gap >= 0.0 {
        -gap / dt
    } else {
        (world.baumgarte / dt * -gap).min(world.max_correction_velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Off,
    Stick,
    /// Sliding along the unit tangential direction `(x, z)`.
    Slide([f64; 2]),
}

/// Refines the iterative result by solving its active set exactly, then
/// adjusting the set until the complementarity conditions hold. Sliding
/// contacts carry the friction impulse `-mu * lambda_n` along their sliding
/// direction, which is iterated to a fixed point. Returns `None` if the set
/// does not settle, leaving the iterative result in place.
///
/// Exact solutions do not depend on the row order, which keeps mirrored
/// configurations mirrored.
fn polish(
    rows: &[Row],
    n_contacts: usize,
    w: &DMatrix<f64>,
    v_free: &DVector<f64>,
    target: &DVector<f64>,
    start: &DVector<f64>,
    mu: f64,
) -> Option<DVector<f64>> {
    let m = rows.len();
    let base = 3 * n_contacts;
    let v_start = v_free + w * start;
    let mut modes: Vec<Mode> = (0..n_contacts)
        .map(|c| {
            let r = 3 * c;
            let ln = start[r];
            let lt = (start[r + 1].powi(2) + start[r + 2].powi(2)).sqrt();
            let vt = (v_start[r + 1].powi(2) + v_start[r + 2].powi(2)).sqrt();
            if ln <= 0.0 {
                Mode::Off
            } else if lt < mu * ln * (1.0 - 1e-6) || vt < 1e-9 {
                Mode::Stick
            } else {
                Mode::Slide([v_start[r + 1] / vt, v_start[r + 2] / vt])
            }
        })
        .collect();
    let mut active: Vec<bool> = (base..m).map(|i| start[i] > 0.0).collect();
    let scale = (0..m).map(|i| w[(i, i)]).fold(0.0, f64::max);

    for _ in 0..8 {
        // unknown k acts on the rows listed with its column weights
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut eqs: Vec<(usize, f64)> = Vec::new();
        for (c, mode) in modes.iter().enumerate() {
            let r = 3 * c;
            match mode {
                Mode::Off => {}
                Mode::Stick => {
                    for k in 0..3 {
                        cols.push(vec![(r + k, 1.0)]);
                        eqs.push((r + k, if k == 0 { target[r] } else { 0.0 }));
                    }
                }
                Mode::Slide(d) => {
                    cols.push(vec![(r, 1.0), (r + 1, -mu * d[0]), (r + 2, -mu * d[1])]);
                    eqs.push((r, target[r]));
                }
            }
        }
        for (k, a) in active.iter().enumerate() {
            if *a {
                cols.push(vec![(base + k, 1.0)]);
                eqs.push((base + k, target[base + k]));
            }
        }
        let n = cols.len();
        let mut lambda = DVector::zeros(m);
        if n > 0 {
            let mut a = DMatrix::from_fn(n, n, |e, u| cols[u].iter().map(|&(i, s)| s * w[(eqs[e].0, i)]).sum());
            for d in 0..n {
                a[(d, d)] += 1e-12 * scale;
            }
            let rhs = DVector::from_fn(n, |e, _| eqs[e].1 - v_free[eqs[e].0]);
            let x = a.lu().solve(&rhs)?;
            for (u, col) in cols.iter().enumerate() {
                for &(i, s) in col {
                    lambda[i] = s * x[u];
                }
            }
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return None;
        }
        let v = v_free + w * &lambda;
        let mut changed = false;
        for (c, mode) in modes.iter_mut().enumerate() {
            let r = 3 * c;
            let tol = 1e-9 * (1.0 + target[r].abs());
            let ln = lambda[r];
            let next = match *mode {
                Mode::Off if v[r] < target[r] - tol => {
                    let vt = (v[r + 1].powi(2) + v[r + 2].powi(2)).sqrt();
                    if vt > 1e-9 {
                        Mode::Slide([v[r + 1] / vt, v[r + 2] / vt])
                    } else {
                        Mode::Stick
                    }
                }
                Mode::Off => Mode::Off,
                _ if ln < 0.0 => Mode::Off,
                Mode::Stick => {
                    let lt = (lambda[r + 1].powi(2) + lambda[r + 2].powi(2)).sqrt();
                    if lt > mu * ln * (1.0 + 1e-12) {
                        Mode::Slide([-lambda[r + 1] / lt, -lambda[r + 2] / lt])
                    } else {
                        Mode::Stick
                    }
                }
                Mode::Slide(d) => {
                    let vt = (v[r + 1].powi(2) + v[r + 2].powi(2)).sqrt();
                    if vt < 1e-12 || v[r + 1] * d[0] + v[r + 2] * d[1] < 0.0 {
                        Mode::Stick
                    } else {
                        let nd = [v[r + 1] / vt, v[r + 2] / vt];
                        if (nd[0] - d[0]).abs() + (nd[1] - d[1]).abs() > 1e-10 {
                            Mode::Slide(nd)
                        } else {
                            Mode::Slide(d)
                        }
                    }
                }
            };
            if next != *mode {
                *mode = next;
                changed = true;
            }
        }
        for (k, a) in active.iter_mut().enumerate() {
            let i = base + k;
            let tol = 1e-9 * (1.0 + target[i].abs());
            if *a && lambda[i] < 0.0 {
                *a = false;
                changed = true;
            } else if !*a && v[i] < target[i] - tol {
                *a = true;
                changed = true;
            }
        }
        if !changed {
            return Some(lambda);
        }
    }
    None
}

/// Solves the contact and limit impulses and returns the corrected velocity.
pub(crate) fn solve(
    model: &CharacterModel,
    kin: &Kinematics,
    q: &DVector<f64>,
    qd_pre: &DVector<f64>,
    qd_star: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
    dt: f64,
    world: &World,
) -> (DVector<f64>, StepReport) {
    let n = model.dof();
    let points = sphere_contacts(model, kin, world.contact_margin);
    let mut limit_rows: Vec<(usize, f64, f64)> = Vec::new();
    for (i, (lo, hi)) in model.position_limits().into_iter().enumerate() {
        if q[i] - lo < world.contact_margin {
            limit_rows.push((i, 1.0, q[i] - lo));
        }
        if hi - q[i] < world.contact_margin {
            limit_rows.push((i, -1.0, hi - q[i]));
        }
    }
    let m = 3 * points.len() + limit_rows.len();
    if m == 0 {
        return (qd_star.clone(), StepReport::default());
    }

    let mut jac = DMatrix::zeros(m, n);
    let mut rows = Vec::with_capacity(m);
    let mut target = DVector::zeros(m);
    for (c, p) in points.iter().enumerate() {
        let r = 3 * c;
        for (dof, col) in model.tree.point_jacobian(kin, p.link, &p.point) {
            jac[(r, dof)] = col.y;
            jac[(r + 1, dof)] = col.x;
            jac[(r + 2, dof)] = col.z;
        }
        rows.push(Row::Normal);
        rows.push(Row::Tangent { normal: r, pair: r + 2 });
        rows.push(Row::Tangent { normal: r, pair: r + 1 });
        target[r] = target_velocity(p.gap, dt, world);
    }
    let e = model.contact.restitution;
    if e > 0.0 {
        let v_pre = &jac * qd_pre;
        for c in 0..points.len() {
            let vn = v_pre[3 * c];
            if vn < -world.restitution_threshold {
                target[3 * c] = target[3 * c].max(-e * vn);
            }
        }
    }
    let base = 3 * points.len();
    for (k, &(dof, sign, gap)) in limit_rows.iter().enumerate() {
        jac[(base + k, dof)] = sign;
        rows.push(Row::Limit);
        target[base + k] = target_velocity(gap, dt, world);
    }

    let minv_jt = chol.solve(&jac.transpose());
    let w = &jac * &minv_jt;
    let v_free = &jac * qd_star;
    let mut v = v_free.clone();
    let mut lambda = DVector::<f64>::zeros(m);
    let mu = model.contact.friction;

    let mut iterations = 0;
    for _ in 0..world.solver_iterations {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for i in 0..m {
            let wii = w[(i, i)];
            if wii <= 0.0 {
                continue;
            }
            match rows[i] {
                Row::Normal | Row::Limit => {
                    let new = (lambda[i] - (v[i] - target[i]) / wii).max(0.0);
                    let d = new - lambda[i];
                    if d != 0.0 {
                        lambda[i] = new;
                        v.axpy(d, &w.column(i), 1.0);
                        max_change = max_change.max((d * wii).abs());
                    }
                }
                Row::Tangent { normal, pair } => {
                    // the pair is updated together the first time it is met
                    if pair < i {
                        continue;
                    }
                    let wjj = w[(pair, pair)];
                    let mut a = lambda[i] - v[i] / wii;
                    let mut b = if wjj > 0.0 { lambda[pair] - v[pair] / wjj } else { 0.0 };
                    let bound = mu * lambda[normal];
                    let mag = (a * a + b * b).sqrt();
                    if mag > bound {
                        let s = if mag > 0.0 { bound / mag } else { 0.0 };
                        a *= s;
                        b *= s;
                    }
                    for (idx, new, wd) in [(i, a, wii), (pair, b, wjj)] {
                        let d = new - lambda[idx];
                        if d != 0.0 {
                            lambda[idx] = new;
                            v.axpy(d, &w.column(idx), 1.0);
                            max_change = max_change.max((d * wd).abs());
                        }
                    }
                }
            }
        }
        if max_change < world.solver_tolerance {
            break;
        }
    }

    if let Some(exact) = polish(&rows, points.len(), &w, &v_free, &target, &lambda, mu) {
        lambda = exact;
    }

    let qd = qd_star + &minv_jt * &lambda;
    let contacts = points
        .iter()
        .enumerate()
        .map(|(c, p)| ContactImpulse {
            link: p.link,
            point: p.point,
            gap: p.gap,
            normal: lambda[3 * c],
            tangent: [lambda[3 * c + 1], lambda[3 * c + 2]],
        })
        .collect();
    let limits = limit_rows
        .iter()
        .enumerate()
        .map(|(k, &(dof, _, _))| (dof, lambda[base + k]))
        .collect();
    (
        qd,
        StepReport {
            contacts,
            limits,
            iterations,
        },
    )
}

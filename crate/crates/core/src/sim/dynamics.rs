//! Floating-base rigid-body dynamics in generalized coordinates.
//!
//! Generalized velocity layout: `ν = [v_root (3), ω_root (3), q̇ (n)]`, with
//! `v_root` the world velocity of the root frame origin and `ω_root` the world
//! angular velocity. Its time derivative is therefore the plain world
//! acceleration of the root origin, which keeps the recursions below free of
//! frame-change terms.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3};

use crate::frame::Frame;
use crate::morphology::Morphology;

/// Kinematic quantities shared by the mass matrix and the bias forces.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub frames: Vec<Frame>,
    /// World joint axes.
    pub axes: Vec<Vector3<f64>>,
}

impl Kinematics {
    pub fn new(morph: &Morphology, root: &Frame, q: &[f64], qd: &[f64]) -> Self {
        let mut frames = Vec::with_capacity(morph.n_bodies());
        morph.forward_kinematics_into(q, Some(qd), root, &mut frames);
        let axes = morph.joints.iter().map(|j| frames[j.parent].rotation * j.axis).collect();
        Self { frames, axes }
    }
}

/// Per-body list of the joints between the root and that body.
#[derive(Debug, Clone)]
pub struct Chains {
    pub ancestors: Vec<Vec<usize>>,
}

impl Chains {
    pub fn new(morph: &Morphology) -> Self {
        let ancestors = (0..morph.n_bodies())
            .map(|mut b| {
                let mut chain = Vec::new();
                while let Some(j) = morph.parent_joint[b] {
                    chain.push(j);
                    b = morph.joints[j].parent;
                }
                chain.reverse();
                chain
            })
            .collect();
        Self { ancestors }
    }
}

/// Adds `Jᵀ f` for a world force `f` applied at world point `p` on `body`.
pub fn add_point_force(
    morph: &Morphology,
    chains: &Chains,
    kin: &Kinematics,
    body: usize,
    p: &Vector3<f64>,
    f: &Vector3<f64>,
    out: &mut DVector<f64>,
) {
    let r = p - kin.frames[morph.root].position;
    let torque = r.cross(f);
    for k in 0..3 {
        out[k] += f[k];
        out[3 + k] += torque[k];
    }
    for &j in &chains.ancestors[body] {
        let x_j = kin.frames[morph.joints[j].child].position;
        out[6 + j] += kin.axes[j].dot(&(p - x_j).cross(f));
    }
}

/// Adds `J_ωᵀ τ` for a world torque `τ` acting on `body`.
fn add_body_torque(chains: &Chains, kin: &Kinematics, body: usize, tau: &Vector3<f64>, out: &mut DVector<f64>) {
    for k in 0..3 {
        out[3 + k] += tau[k];
    }
    for &j in &chains.ancestors[body] {
        out[6 + j] += kin.axes[j].dot(tau);
    }
}

fn world_inertia(frame: &Frame, inertia: &Matrix3<f64>) -> Matrix3<f64> {
    let r = frame.rotation.matrix();
    r * inertia * r.transpose()
}

/// Joint-space inertia `M = Σ m J_cᵀ J_c + J_ωᵀ I_w J_ω`, with `J_c` the
/// Jacobian of each body's centre of mass.
pub fn mass_matrix(morph: &Morphology, chains: &Chains, kin: &Kinematics) -> DMatrix<f64> {
    let n = 6 + morph.n_joints();
    let mut m = DMatrix::zeros(n, n);
    let root_x = kin.frames[morph.root].position;
    let mut jc = DMatrix::<f64>::zeros(3, n);
    let mut jw = DMatrix::<f64>::zeros(3, n);
    for (b, body) in morph.bodies.iter().enumerate() {
        let f = &kin.frames[b];
        let c = f.transform_point(&body.com);
        jc.fill(0.0);
        jw.fill(0.0);
        let r = c - root_x;
        for k in 0..3 {
            jc[(k, k)] = 1.0;
            jw[(k, 3 + k)] = 1.0;
        }
        // ω × r = −r × ω
        let neg_skew = -crate::rotmath::skew(&r);
        jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&neg_skew);
        for &j in &chains.ancestors[b] {
            let x_j = kin.frames[morph.joints[j].child].position;
            let a = kin.axes[j];
            jc.fixed_view_mut::<3, 1>(0, 6 + j).copy_from(&a.cross(&(c - x_j)));
            jw.fixed_view_mut::<3, 1>(0, 6 + j).copy_from(&a);
        }
        let iw = world_inertia(f, &body.inertia);
        m += (jc.transpose() * &jc) * body.mass + jw.transpose() * (iw * &jw);
    }
    // exact symmetry for the Cholesky factorization
    let sym = (&m + m.transpose()) * 0.5;
    sym
}

/// Inverse dynamics: the generalized force producing acceleration `nu_dot`
/// at the current velocities under gravity `g`.
pub fn inverse_dynamics(
    morph: &Morphology,
    chains: &Chains,
    kin: &Kinematics,
    qd: &[f64],
    nu_dot: &DVector<f64>,
    g: &Vector3<f64>,
) -> DVector<f64> {
    let nb = morph.n_bodies();
    let mut acc = vec![Vector3::zeros(); nb];
    let mut alpha = vec![Vector3::zeros(); nb];
    acc[morph.root] = Vector3::new(nu_dot[0], nu_dot[1], nu_dot[2]);
    alpha[morph.root] = Vector3::new(nu_dot[3], nu_dot[4], nu_dot[5]);
    for &j in &morph.topo_joints {
        let joint = &morph.joints[j];
        let (p, c) = (joint.parent, joint.child);
        let fp = &kin.frames[p];
        let r = kin.frames[c].position - fp.position;
        let w = fp.angular_velocity;
        alpha[c] = alpha[p] + kin.axes[j] * nu_dot[6 + j] + w.cross(&(kin.axes[j] * qd[j]));
        acc[c] = acc[p] + alpha[p].cross(&r) + w.cross(&w.cross(&r));
    }
    let mut out = DVector::zeros(6 + morph.n_joints());
    for (b, body) in morph.bodies.iter().enumerate() {
        let f = &kin.frames[b];
        let rc = f.rotation * body.com;
        let w = f.angular_velocity;
        let a_com = acc[b] + alpha[b].cross(&rc) + w.cross(&w.cross(&rc));
        let force = (a_com - g) * body.mass;
        let iw = world_inertia(f, &body.inertia);
        let torque = iw * alpha[b] + w.cross(&(iw * w));
        add_point_force(morph, chains, kin, b, &(f.position + rc), &force, &mut out);
        add_body_torque(chains, kin, b, &torque, &mut out);
    }
    out
}

/// Generalized acceleration for applied generalized force `tau`.
pub fn forward_dynamics(
    morph: &Morphology,
    chains: &Chains,
    kin: &Kinematics,
    qd: &[f64],
    tau: &DVector<f64>,
    g: &Vector3<f64>,
) -> Option<DVector<f64>> {
    let zero = DVector::zeros(tau.len());
    let bias = inverse_dynamics(morph, chains, kin, qd, &zero, g);
    let m = mass_matrix(morph, chains, kin);
    let chol = Cholesky::new(m)?;
    Some(chol.solve(&(tau - bias)))
}

/// World linear momentum and angular momentum about the world origin.
pub fn momentum(morph: &Morphology, kin: &Kinematics) -> (Vector3<f64>, Vector3<f64>) {
    let mut p = Vector3::zeros();
    let mut l = Vector3::zeros();
    for (b, body) in morph.bodies.iter().enumerate() {
        let f = &kin.frames[b];
        let c = f.transform_point(&body.com);
        let v = f.point_velocity(&body.com) * body.mass;
        p += v;
        l += c.cross(&v) + world_inertia(f, &body.inertia) * f.angular_velocity;
    }
    (p, l)
}

/// Total kinetic energy `½ νᵀ M ν`, computed body by body.
pub fn kinetic_energy(morph: &Morphology, kin: &Kinematics) -> f64 {
    morph
        .bodies
        .iter()
        .enumerate()
        .map(|(b, body)| {
            let f = &kin.frames[b];
            let v = f.point_velocity(&body.com);
            let w = f.angular_velocity;
            0.5 * body.mass * v.norm_squared() + 0.5 * w.dot(&(world_inertia(f, &body.inertia) * w))
        })
        .sum()
}

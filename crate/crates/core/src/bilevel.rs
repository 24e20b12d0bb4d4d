//! Upper-level optimizer: retargeting parameters, projection onto the
//! constraint set, the batch gradient estimate and the projected step.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::morphology::{Calibration, Correspondences};
use crate::objective::{body_losses, LossWeights};
use crate::refmap::{map_reference_unchecked, reference_jacobian_unchecked};

/// Per-pair position/orientation offsets and per-motion vertical offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetParams {
    pub pos: Vec<Vector3<f64>>,
    pub ori: Vec<Vector3<f64>>,
    pub p_z: Vec<f64>,
    pub motion_ids: Vec<String>,
    #[serde(default)]
    pub iteration: u64,
}

impl RetargetParams {
    pub fn zeros(n_pairs: usize, motion_ids: &[String]) -> Self {
        Self {
            pos: vec![Vector3::zeros(); n_pairs],
            ori: vec![Vector3::zeros(); n_pairs],
            p_z: vec![0.0; motion_ids.len()],
            motion_ids: motion_ids.to_vec(),
            iteration: 0,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.pos.len()
    }

    pub fn motion_index(&self, id: &str) -> Option<usize> {
        self.motion_ids.iter().position(|m| m == id)
    }

    /// Flat layout: all `pos`, then all `ori`, then `p_z`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(6 * self.n_pairs() + self.p_z.len());
        v.extend(self.pos.iter().flat_map(|p| p.iter().copied()));
        v.extend(self.ori.iter().flat_map(|p| p.iter().copied()));
        v.extend(&self.p_z);
        v
    }

    pub fn from_vec(&self, v: &[f64]) -> Self {
        let n = self.n_pairs();
        assert_eq!(v.len(), 6 * n + self.p_z.len(), "flat parameter length");
        let vec3 = |i: usize| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
        Self {
            pos: (0..n).map(vec3).collect(),
            ori: (n..2 * n).map(vec3).collect(),
            p_z: v[6 * n..].to_vec(),
            motion_ids: self.motion_ids.clone(),
            iteration: self.iteration,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn satisfies(&self, b: &ConstraintBox) -> bool {
        self.pos.iter().all(|p| p.norm() <= b.delta_pos)
            && self.ori.iter().all(|p| p.norm() <= b.delta_ori)
            && self.p_z.iter().all(|z| z.abs() <= b.delta_z)
    }

    /// Fractions of position balls, orientation balls and vertical offsets
    /// sitting on their constraint boundary.
    pub fn saturation(&self, b: &ConstraintBox) -> [f64; 3] {
        let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        let on = |norm: f64, delta: f64| norm >= delta * (1.0 - 1e-9);
        [
            frac(self.pos.iter().filter(|p| on(p.norm(), b.delta_pos)).count(), self.pos.len()),
            frac(self.ori.iter().filter(|p| on(p.norm(), b.delta_ori)).count(), self.ori.len()),
            frac(self.p_z.iter().filter(|z| on(z.abs(), b.delta_z)).count(), self.p_z.len()),
        ]
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if p.pos.len() != p.ori.len() || p.p_z.len() != p.motion_ids.len() {
            return Err(Error::parse(path, "inconsistent parameter lengths"));
        }
        Ok(p)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintBox {
    pub delta_pos: f64,
    pub delta_ori: f64,
    pub delta_z: f64,
}

impl Default for ConstraintBox {
    fn default() -> Self {
        Self {
            delta_pos: 0.5,
            delta_ori: 0.5,
            delta_z: 0.5,
        }
    }
}

impl ConstraintBox {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("delta_pos", self.delta_pos), ("delta_ori", self.delta_ori), ("delta_z", self.delta_z)] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub eta: f64,
    pub alpha: f64,
    /// Iterations over which the step size halves, `η_k = η / (1 + k / decay)`.
    /// Zero keeps `η` constant.
    pub decay: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            alpha: 0.0,
            decay: 0.0,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be finite and >= 0, got {}", self.decay)));
        }
        Ok(())
    }

    /// Step size at upper iteration `k`.
    pub fn eta_at(&self, k: u64) -> f64 {
        if self.decay > 0.0 {
            self.eta / (1.0 + k as f64 / self.decay)
        } else {
            self.eta
        }
    }

    /// `(1 − α) η`, the only combination that reaches the update.
    pub fn effective_step(&self) -> f64 {
        (1.0 - self.alpha) * self.eta
    }
}

/// One state/reference pair collected during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperSample {
    pub pair: usize,
    pub motion: usize,
    /// Source frame `m_t` of the pair's source body.
    pub source: Frame,
    /// Simulated frame `s_t` of the pair's target body.
    pub sim: Frame,
}

/// Upper-level data batch. Only fully retargeted steps (ψ = 1) are admitted.
#[derive(Debug, Clone, Default)]
pub struct UpperBatch {
    samples: Vec<UpperSample>,
    rejected: usize,
}

impl UpperBatch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a sample if `psi == 1`; returns whether it was kept.
    pub fn push(&mut self, sample: UpperSample, psi: f64) -> bool {
        if psi < 1.0 {
            self.rejected += 1;
            return false;
        }
        self.samples.push(sample);
        true
    }

    pub fn extend(&mut self, other: UpperBatch) {
        self.samples.extend(other.samples);
        self.rejected += other.rejected;
    }

    pub fn samples(&self) -> &[UpperSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples refused because ψ < 1.
    pub fn rejected(&self) -> usize {
        self.rejected
    }
}

/// Rescales each ball-constrained vector onto its ball and clamps `p_z`.
pub fn project(params: &RetargetParams, b: &ConstraintBox) -> RetargetParams {
    let ball = |v: &Vector3<f64>, r: f64| {
        let n = v.norm();
        if n <= r {
            return *v;
        }
        // shrink past rounding so that a second projection is a no-op
        let mut out = v * (r / n);
        while out.norm() > r {
            out *= 1.0 - f64::EPSILON;
        }
        out
    };
    RetargetParams {
        pos: params.pos.iter().map(|v| ball(v, b.delta_pos)).collect(),
        ori: params.ori.iter().map(|v| ball(v, b.delta_ori)).collect(),
        p_z: params.p_z.iter().map(|z| z.clamp(-b.delta_z, b.delta_z)).collect(),
        motion_ids: params.motion_ids.clone(),
        iteration: params.iteration,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    /// Same layout as the parameters.
    pub grad: RetargetParams,
    /// Mean weighted tracking loss over the batch.
    pub loss: f64,
    pub samples: usize,
    /// Samples whose orientation split was degenerate.
    pub degenerate: usize,
}

/// `(1 − α) / |D| · Σ ∂ℓ/∂g · dg/dp` over the batch, with the simulated frames
/// held fixed. `z_nom` is indexed by motion. An empty batch yields a zero
/// gradient and `samples == 0`.
pub fn grad_estimate(
    batch: &UpperBatch,
    params: &RetargetParams,
    cal: &Calibration,
    pairs: &Correspondences,
    z_nom: &[f64],
    w: &LossWeights,
    alpha: f64,
) -> GradEstimate {
    let mut grad = RetargetParams::zeros(params.n_pairs(), &params.motion_ids);
    grad.iteration = params.iteration;
    let mut loss = 0.0;
    let mut degenerate = 0;
    for s in batch.samples() {
        let vertical = z_nom[s.motion] + params.p_z[s.motion];
        let g = map_reference_unchecked(cal, params, s.pair, vertical, &s.source);
        let e = body_losses(&g, &s.sim, &pairs.resolved[s.pair]);
        degenerate += usize::from(e.degenerate);
        loss += e.weighted(w);
        let j = reference_jacobian_unchecked(cal, params, s.pair, &s.source);
        let dl_dx = e.e_x * (2.0 * w.w_x);
        let dl_dv = e.e_v * (2.0 * w.w_v);
        grad.pos[s.pair] += j.dx_dpos.transpose() * dl_dx + j.dv_dpos.transpose() * dl_dv;
        grad.ori[s.pair] += j.dr_dori.transpose() * e.grad_r * w.w_r;
        grad.p_z[s.motion] += j.dx_dpz.dot(&dl_dx);
    }
    let n = batch.len();
    if n == 0 {
        log::debug!("upper-level batch empty; gradient step skipped");
        return GradEstimate {
            grad,
            loss: 0.0,
            samples: 0,
            degenerate: 0,
        };
    }
    let scale = (1.0 - alpha) / n as f64;
    for v in grad.pos.iter_mut().chain(grad.ori.iter_mut()) {
        *v *= scale;
    }
    for z in &mut grad.p_z {
        *z *= scale;
    }
    GradEstimate {
        grad,
        loss: loss / n as f64,
        samples: n,
        degenerate,
    }
}

/// `project(p − η g)`; returns the new parameters and `‖Δp‖`.
pub fn ttsa_step(params: &RetargetParams, grad: &RetargetParams, eta: f64, b: &ConstraintBox) -> Result<(RetargetParams, f64)> {
    if !grad.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite upper-level gradient at iteration {}",
            params.iteration
        )));
    }
    let p = params.to_vec();
    let g = grad.to_vec();
    if p.len() != g.len() {
        return Err(Error::Dimension {
            what: "upper-level gradient",
            expected: p.len(),
            got: g.len(),
        });
    }
    let stepped: Vec<f64> = p.iter().zip(&g).map(|(p, g)| p - eta * g).collect();
    let mut next = project(&params.from_vec(&stepped), b);
    next.iteration = params.iteration + 1;
    let delta = next
        .to_vec()
        .iter()
        .zip(&p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((next, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{OrientationMode, PairCalibration, ResolvedPair};
    use crate::rotmath::exp_unchecked;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn project_examples() {
        let b = ConstraintBox::default();
        let mut p = RetargetParams::zeros(1, &ids(1));
        p.pos[0] = Vector3::new(0.1, 0.2, 0.0);
        assert_eq!(project(&p, &b), p);
        p.pos[0] = Vector3::new(1.0, 0.0, 0.0);
        p.p_z[0] = -0.7;
        let q = project(&p, &b);
        assert_eq!(q.pos[0], Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(q.p_z[0], -0.5);
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let p = RetargetParams::zeros(2, &ids(1));
        let (q, rate) = ttsa_step(&p, &p.clone(), 0.1, &ConstraintBox::default()).unwrap();
        assert_eq!(q.to_vec(), p.to_vec());
        assert_eq!(rate, 0.0);
        assert_eq!(q.iteration, 1);
    }

    #[test]
    fn interior_step_is_exact() {
        let p = RetargetParams::zeros(1, &ids(1));
        let mut g = p.clone();
        g.pos[0] = Vector3::new(1.0, -2.0, 0.5);
        g.p_z[0] = 3.0;
        let (q, rate) = ttsa_step(&p, &g, 0.01, &ConstraintBox::default()).unwrap();
        assert_eq!(q.pos[0], Vector3::new(-0.01, 0.02, -0.005));
        assert_eq!(q.p_z[0], -0.03);
        assert_relative_eq!(rate, 0.01 * g.norm(), epsilon = 1e-15);
    }

    #[test]
    fn exiting_step_lands_on_boundary() {
        let mut p = RetargetParams::zeros(1, &ids(0));
        p.pos[0] = Vector3::new(0.45, 0.0, 0.0);
        let mut g = RetargetParams::zeros(1, &ids(0));
        g.pos[0] = Vector3::new(-1.0, -1.0, 0.0);
        let (q, _) = ttsa_step(&p, &g, 0.2, &ConstraintBox::default()).unwrap();
        assert_relative_eq!(q.pos[0].norm(), 0.5, epsilon = 1e-15);
        let expected = Vector3::new(0.65, 0.2, 0.0).normalize() * 0.5;
        assert_relative_eq!(q.pos[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let p = RetargetParams::zeros(1, &ids(1));
        let mut g = p.clone();
        g.ori[0].y = f64::NAN;
        assert!(matches!(ttsa_step(&p, &g, 0.1, &ConstraintBox::default()), Err(Error::Numerical(_))));
    }

    #[test]
    fn batch_refuses_partial_phase() {
        let mut b = UpperBatch::new();
        let s = UpperSample {
            pair: 0,
            motion: 0,
            source: Frame::identity(),
            sim: Frame::identity(),
        };
        assert!(!b.push(s, 0.5));
        assert!(b.push(s, 1.0));
        assert_eq!((b.len(), b.rejected()), (1, 1));
    }

    #[test]
    fn update_config_validation() {
        assert!(UpdateConfig::default().validate().is_ok());
        let base = UpdateConfig::default();
        assert!(UpdateConfig { eta: 0.0, ..base }.validate().is_err());
        assert!(UpdateConfig { alpha: 1.0, ..base }.validate().is_err());
        assert!(UpdateConfig { decay: -1.0, ..base }.validate().is_err());
    }

    #[test]
    fn step_size_schedule() {
        let c = UpdateConfig { eta: 0.2, alpha: 0.0, decay: 10.0 };
        assert_eq!(c.eta_at(0), 0.2);
        assert_eq!(c.eta_at(10), 0.1);
        assert_eq!(c.eta_at(30), 0.05);
        let flat = UpdateConfig { decay: 0.0, ..c };
        assert_eq!(flat.eta_at(1000), 0.2);
        assert!(ConstraintBox { delta_pos: 0.0, ..Default::default() }.validate().is_err());
    }

    struct Problem {
        cal: Calibration,
        pairs: Correspondences,
        z_nom: Vec<f64>,
        batch: UpperBatch,
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Frame {
            position: v(),
            rotation: exp_unchecked(&v()),
            linear_velocity: v(),
            angular_velocity: v(),
        }
    }

    fn problem(seed: u64, modes: &[OrientationMode]) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = modes.len();
        let cal = Calibration {
            scale: 0.6,
            pairs: (0..n)
                .map(|_| {
                    let f = random_frame(&mut rng);
                    PairCalibration {
                        x_nom: f.position * 0.2,
                        r_nom: f.rotation,
                    }
                })
                .collect(),
            z_nom_policy: Default::default(),
        };
        let pairs = Correspondences::from_resolved(
            modes
                .iter()
                .enumerate()
                .map(|(i, &mode)| ResolvedPair {
                    source: i,
                    target: i,
                    mode,
                    twist_axis: Vector3::new(0.3, -0.2, 0.9).normalize(),
                })
                .collect(),
            0,
        );
        let mut batch = UpperBatch::new();
        for k in 0..12 {
            let s = UpperSample {
                pair: k % n,
                motion: k % 2,
                source: random_frame(&mut rng),
                sim: random_frame(&mut rng),
            };
            batch.push(s, 1.0);
        }
        Problem {
            cal,
            pairs,
            z_nom: vec![0.1, -0.05],
            batch,
        }
    }

    fn mean_loss(pr: &Problem, p: &RetargetParams, w: &LossWeights) -> f64 {
        grad_estimate(&pr.batch, p, &pr.cal, &pr.pairs, &pr.z_nom, w, 0.0).loss
    }

    #[test]
    fn gradient_matches_central_differences() {
        let modes = [OrientationMode::Full, OrientationMode::Swing, OrientationMode::Twist];
        let w = LossWeights {
            w_x: 10.0,
            w_r: 1.0,
            w_v: 0.5,
            w_w: 0.3,
        };
        for seed in 0..5 {
            let pr = problem(seed, &modes);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut p = RetargetParams::zeros(modes.len(), &ids(2));
            let flat: Vec<f64> = p.to_vec().iter().map(|_| rng.random_range(-0.2..0.2)).collect();
            p = p.from_vec(&flat);
            let alpha = 0.25;
            let est = grad_estimate(&pr.batch, &p, &pr.cal, &pr.pairs, &pr.z_nom, &w, alpha);
            let g = est.grad.to_vec();
            let h = 1e-6;
            for k in 0..flat.len() {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[k] += h;
                minus[k] -= h;
                let fd = (1.0 - alpha) * (mean_loss(&pr, &p.from_vec(&plus), &w) - mean_loss(&pr, &p.from_vec(&minus), &w)) / (2.0 * h);
                let rel = (g[k] - fd).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-5, "seed {seed} coord {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn alpha_one_and_empty_batch_give_zero() {
        let pr = problem(3, &[OrientationMode::Full]);
        let p = RetargetParams::zeros(1, &ids(2));
        let est = grad_estimate(&pr.batch, &p, &pr.cal, &pr.pairs, &pr.z_nom, &LossWeights::default(), 1.0);
        assert!(est.grad.to_vec().iter().all(|x| *x == 0.0));
        let est = grad_estimate(&UpperBatch::new(), &p, &pr.cal, &pr.pairs, &pr.z_nom, &LossWeights::default(), 0.0);
        assert_eq!(est.samples, 0);
        assert!(est.grad.to_vec().iter().all(|x| *x == 0.0));
    }

    fn arb_params() -> impl Strategy<Value = RetargetParams> {
        prop::collection::vec(-2.0..2.0f64, 6 * 2 + 3).prop_map(|v| RetargetParams::zeros(2, &ids(3)).from_vec(&v))
    }

    proptest! {
        #[test]
        fn project_is_idempotent_and_feasible(p in arb_params(), d in 0.05..1.0f64) {
            let b = ConstraintBox { delta_pos: d, delta_ori: d * 0.7, delta_z: d * 1.3 };
            let once = project(&p, &b);
            prop_assert!(once.satisfies(&b));
            prop_assert_eq!(project(&once, &b), once);
        }

        #[test]
        fn ttsa_step_stays_feasible(p in arb_params(), g in arb_params(), eta in 0.0..3.0f64) {
            let b = ConstraintBox::default();
            let (q, rate) = ttsa_step(&project(&p, &b), &g, eta, &b).unwrap();
            prop_assert!(q.satisfies(&b));
            prop_assert!(rate >= 0.0);
        }

        #[test]
        fn zero_gradient_at_generating_params(seed in 0u64..1000, p in arb_params()) {
            let modes = [OrientationMode::Full, OrientationMode::Swing];
            let mut pr = problem(seed, &modes);
            let star = project(&p, &ConstraintBox::default());
            let mut batch = UpperBatch::new();
            for s in pr.batch.samples() {
                let vertical = pr.z_nom[s.motion] + star.p_z[s.motion];
                let sim = map_reference_unchecked(&pr.cal, &star, s.pair, vertical, &s.source);
                batch.push(UpperSample { sim, ..*s }, 1.0);
            }
            pr.batch = batch;
            let est = grad_estimate(&pr.batch, &star, &pr.cal, &pr.pairs, &pr.z_nom, &LossWeights::default(), 0.0);
            prop_assert!(est.grad.norm() < 1e-9, "{}", est.grad.norm());
        }
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = RetargetParams::zeros(2, &ids(2));
        p.pos[1] = Vector3::new(0.1, 0.2, 0.3);
        p.p_z[1] = -0.25;
        p.iteration = 7;
        let path = dir.path().join("p.json");
        p.write_json(&path).unwrap();
        assert_eq!(RetargetParams::read_json(&path).unwrap(), p);
    }
}

//! Kinematic quality metrics of simulated trajectories: ground and self
//! penetration, foot sliding and foot floating, with per-dataset aggregation.
//!
//! Depths and heights are reported in cm, speeds in cm/s.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::morphology::{Collider, Correspondences, Morphology};
use crate::refmap::SourceMotionClip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Lowest-point height below which a foot may be in contact, m.
    pub h_thresh: f64,
    /// Lowest-point speed below which a foot may be in contact, m/s.
    pub v_thresh: f64,
    /// Penetration depth that must be exceeded to count a frame, m.
    pub penetration_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            h_thresh: 0.05,
            v_thresh: 0.15,
            penetration_threshold: 0.01,
        }
    }
}

/// Per-frame contact flags for a set of bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactEstimate {
    pub fps: f64,
    pub bodies: Vec<usize>,
    /// `flags[frame][k]` refers to `bodies[k]`.
    pub flags: Vec<Vec<bool>>,
}

impl ContactEstimate {
    /// Flags of the clip frame nearest to time `t`.
    pub fn at_time(&self, t: f64) -> &[bool] {
        let i = ((t * self.fps).round().max(0.0) as usize).min(self.flags.len() - 1);
        &self.flags[i]
    }

    /// Re-keys source contact bodies to the target bodies they correspond to.
    /// Source contact bodies without a counterpart are dropped.
    pub fn to_target(&self, pairs: &Correspondences, target: &Morphology) -> ContactEstimate {
        let mut keep = Vec::new();
        let mut bodies = Vec::new();
        for (k, &src) in self.bodies.iter().enumerate() {
            if let Some(p) = pairs.resolved.iter().find(|p| p.source == src && target.contact_bodies.contains(&p.target)) {
                keep.push(k);
                bodies.push(p.target);
            }
        }
        ContactEstimate {
            fps: self.fps,
            bodies,
            flags: self.flags.iter().map(|f| keep.iter().map(|&k| f[k]).collect()).collect(),
        }
    }
}

fn lowest_contact(body: &crate::morphology::Body, frame: &Frame) -> Option<(Vector3<f64>, Vector3<f64>)> {
    body.collision
        .iter()
        .map(|c| {
            let (p, _) = c.lowest_point(frame);
            (p, frame.point_velocity(&frame.rotation.transpose().transform_vector(&(p - frame.position))))
        })
        .min_by(|a, b| a.0.z.total_cmp(&b.0.z))
}

/// A contact body is in contact when its lowest collision point is below
/// `h_thresh` and moves slower than `v_thresh`.
pub fn estimate_reference_contacts(clip: &SourceMotionClip, source: &Morphology, cfg: &MetricConfig) -> Result<ContactEstimate> {
    let slots = source
        .contact_bodies
        .iter()
        .map(|&b| clip.slot(source.body_name(b)))
        .collect::<Result<Vec<_>>>()?;
    let flags = clip
        .frames
        .iter()
        .map(|frame| {
            source
                .contact_bodies
                .iter()
                .zip(&slots)
                .map(|(&b, &slot)| {
                    lowest_contact(&source.bodies[b], &frame[slot])
                        .is_some_and(|(p, v)| p.z < cfg.h_thresh && v.norm() < cfg.v_thresh)
                })
                .collect()
        })
        .collect();
    Ok(ContactEstimate {
        fps: clip.fps,
        bodies: source.contact_bodies.clone(),
        flags,
    })
}

/// Time fraction of violating frames and mean per-frame maximum depth over
/// those frames, in cm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Penetration {
    pub time_fraction: f64,
    pub mean_depth_cm: f64,
}

fn summarize_depths(depths: impl Iterator<Item = f64>, threshold: f64) -> Penetration {
    let mut total = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for d in depths {
        total += 1;
        if d > threshold {
            hits += 1;
            sum += d;
        }
    }
    if hits == 0 {
        return Penetration::default();
    }
    Penetration {
        time_fraction: hits as f64 / total as f64,
        mean_depth_cm: 100.0 * sum / hits as f64,
    }
}

/// Deepest ground penetration of any collision sphere in one frame, m.
pub fn ground_depth(morph: &Morphology, frames: &[Frame]) -> f64 {
    let mut depth: f64 = 0.0;
    for (body, frame) in morph.bodies.iter().zip(frames) {
        for c in &body.collision {
            for center in c.contact_centers() {
                depth = depth.max(c.radius() - frame.transform_point(&center).z);
            }
        }
    }
    depth
}

pub fn ground_penetration(traj: &[Vec<Frame>], morph: &Morphology, cfg: &MetricConfig) -> Penetration {
    summarize_depths(traj.iter().map(|f| ground_depth(morph, f)), cfg.penetration_threshold)
}

/// Squared distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_distance(p1: &Vector3<f64>, q1: &Vector3<f64>, p2: &Vector3<f64>, q2: &Vector3<f64>) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-14;
    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p1 + d1 * s) - (p2 + d2 * t)).norm_squared()
}

fn collider_depth(a: &Collider, fa: &Frame, b: &Collider, fb: &Frame) -> f64 {
    let (a0, a1) = a.segment();
    let (b0, b1) = b.segment();
    let d = segment_distance(&fa.transform_point(&a0), &fa.transform_point(&a1), &fb.transform_point(&b0), &fb.transform_point(&b1)).sqrt();
    a.radius() + b.radius() - d
}

/// Deepest overlap between collision primitives of non-adjacent bodies, m.
pub fn self_depth(morph: &Morphology, frames: &[Frame]) -> f64 {
    let mut depth: f64 = 0.0;
    for a in 0..morph.n_bodies() {
        for b in a + 1..morph.n_bodies() {
            if morph.adjacent(a, b) {
                continue;
            }
            for ca in &morph.bodies[a].collision {
                for cb in &morph.bodies[b].collision {
                    depth = depth.max(collider_depth(ca, &frames[a], cb, &frames[b]));
                }
            }
        }
    }
    depth
}

pub fn self_penetration(traj: &[Vec<Frame>], morph: &Morphology, cfg: &MetricConfig) -> Penetration {
    summarize_depths(traj.iter().map(|f| self_depth(morph, f)), cfg.penetration_threshold)
}

/// Mean over in-contact (frame, foot) samples, with a flag when there were none.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactMean {
    pub value: f64,
    pub no_contact: bool,
}

fn contact_mean(
    traj: &[Vec<Frame>],
    fps: f64,
    morph: &Morphology,
    contacts: &ContactEstimate,
    f: impl Fn(Vector3<f64>, Vector3<f64>) -> f64,
) -> ContactMean {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, frames) in traj.iter().enumerate() {
        let flags = contacts.at_time(k as f64 / fps);
        for (&body, &on) in contacts.bodies.iter().zip(flags) {
            if !on {
                continue;
            }
            if let Some((p, v)) = lowest_contact(&morph.bodies[body], &frames[body]) {
                sum += f(p, v);
                n += 1;
            }
        }
    }
    if n == 0 {
        ContactMean {
            value: 0.0,
            no_contact: true,
        }
    } else {
        ContactMean {
            value: sum / n as f64,
            no_contact: false,
        }
    }
}

/// Horizontal speed of each foot's lowest point during reference contacts, cm/s.
pub fn foot_sliding(traj: &[Vec<Frame>], fps: f64, morph: &Morphology, contacts: &ContactEstimate) -> ContactMean {
    contact_mean(traj, fps, morph, contacts, |_, v| 100.0 * v.xy().norm())
}

/// Height of each foot's lowest point above ground during reference
/// contacts, clamped at zero, cm.
pub fn foot_floating(traj: &[Vec<Frame>], fps: f64, morph: &Morphology, contacts: &ContactEstimate) -> ContactMean {
    contact_mean(traj, fps, morph, contacts, |p, _| 100.0 * p.z.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionMetrics {
    pub motion: String,
    pub frames: usize,
    pub ground_pen: Penetration,
    pub self_pen: Penetration,
    pub foot_slide: ContactMean,
    pub foot_float: ContactMean,
}

impl MotionMetrics {
    pub const COLUMNS: [&'static str; 6] = [
        "ground_pen_time",
        "ground_pen_depth_cm",
        "self_pen_time",
        "self_pen_depth_cm",
        "foot_slide_cm_s",
        "foot_float_cm",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.ground_pen.time_fraction,
            self.ground_pen.mean_depth_cm,
            self.self_pen.time_fraction,
            self.self_pen.mean_depth_cm,
            self.foot_slide.value,
            self.foot_float.value,
        ]
    }
}

/// All four metrics of one trajectory, sampled at `fps`.
pub fn evaluate_motion(
    motion: &str,
    traj: &[Vec<Frame>],
    fps: f64,
    morph: &Morphology,
    contacts: &ContactEstimate,
    cfg: &MetricConfig,
) -> MotionMetrics {
    MotionMetrics {
        motion: motion.to_string(),
        frames: traj.len(),
        ground_pen: ground_penetration(traj, morph, cfg),
        self_pen: self_penetration(traj, morph, cfg),
        foot_slide: foot_sliding(traj, fps, morph, contacts),
        foot_float: foot_floating(traj, fps, morph, contacts),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per-column statistics of the per-motion values, columns as in
/// [`MotionMetrics::COLUMNS`].
pub fn aggregate(reports: &[MotionMetrics]) -> Result<[Stat; 6]> {
    if reports.is_empty() {
        return Err(Error::Config("no motions to aggregate".into()));
    }
    Ok(std::array::from_fn(|c| {
        let col: Vec<f64> = reports.iter().map(|r| r.values()[c]).collect();
        Stat::of(&col)
    }))
}

/// CSV with one row per motion followed by mean, std, min and max rows.
pub fn write_report<W: Write>(out: W, reports: &[MotionMetrics]) -> Result<()> {
    let summary = aggregate(reports)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Numerical(format!("writing metrics report: {e}"));
    let mut header = vec!["motion", "frames"];
    header.extend(MotionMetrics::COLUMNS);
    header.push("no_contact");
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![r.motion.clone(), r.frames.to_string()];
        row.extend(r.values().iter().map(|v| format!("{v:.6}")));
        row.push((r.foot_slide.no_contact as u8).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    for (name, pick) in [
        ("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64),
        ("std", |s| s.std),
        ("min", |s| s.min),
        ("max", |s| s.max),
    ] {
        let mut row = vec![format!("[{name}]"), String::new()];
        row.extend(summary.iter().map(|s| format!("{:.6}", pick(s))));
        row.push(String::new());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Numerical(format!("writing metrics report: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn segment_distance_cases() {
        let z = Vector3::zeros();
        let x = Vector3::x();
        assert_relative_eq!(segment_distance(&z, &x, &Vector3::new(0.5, 1.0, 0.0), &Vector3::new(0.5, 2.0, 0.0)), 1.0, epsilon = 1e-15);
        // parallel segments
        assert_relative_eq!(
            segment_distance(&z, &x, &Vector3::new(0.2, 0.0, 0.3), &Vector3::new(1.2, 0.0, 0.3)),
            0.09,
            epsilon = 1e-15
        );
        // crossing segments
        assert!(segment_distance(&Vector3::new(-1.0, 0.0, 0.0), &x, &Vector3::new(0.0, -1.0, 0.0), &Vector3::y()) < 1e-20);
        // points
        assert_relative_eq!(segment_distance(&z, &z, &x, &x), 1.0);
    }

    #[test]
    fn aggregate_examples() {
        let r = |v: f64| MotionMetrics {
            motion: "m".into(),
            frames: 1,
            ground_pen: Penetration {
                time_fraction: v,
                mean_depth_cm: 0.0,
            },
            self_pen: Penetration::default(),
            foot_slide: ContactMean::default(),
            foot_float: ContactMean::default(),
        };
        let s = aggregate(&[r(1.0), r(3.0)]).unwrap();
        assert_eq!((s[0].mean, s[0].std, s[0].min, s[0].max), (2.0, 1.0, 1.0, 3.0));
        assert_eq!(s[1], Stat::default());
        let one = aggregate(&[r(0.4)]).unwrap();
        assert_eq!((one[0].mean, one[0].std, one[0].min, one[0].max), (0.4, 0.0, 0.4, 0.4));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn strict_threshold() {
        let p = summarize_depths([0.01, 0.01, 0.0].into_iter(), 0.01);
        assert_eq!(p, Penetration::default());
        let p = summarize_depths([0.02, 0.0, 0.0, 0.02].into_iter(), 0.01);
        assert_relative_eq!(p.time_fraction, 0.5);
        assert_relative_eq!(p.mean_depth_cm, 2.0, epsilon = 1e-12);
    }
}

//! Gait measurements and trajectory files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charmodel::CharacterModel;
use crate::env::{LocomotionEnv, RewardComponents};
use crate::error::{Error, Result};

/// State and controls after one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// Applied (clamped) action.
    pub action: Vec<f64>,
    pub torques: Vec<f64>,
    pub components: RewardComponents,
    pub contacts: Vec<bool>,
    pub assist_fx: f64,
    pub assist_fz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dof: usize,
    pub act_dim: usize,
    pub n_contacts: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn new(dof: usize, act_dim: usize, n_contacts: usize) -> Self {
        Self {
            dof,
            act_dim,
            n_contacts,
            steps: Vec::new(),
        }
    }

    pub fn for_model(model: &CharacterModel) -> Self {
        Self::new(model.dof(), model.action_dim(), model.end_effectors.len())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: TrajectoryStep) -> Result<()> {
        let dims = [
            (self.dof, step.q.len()),
            (self.dof, step.qd.len()),
            (self.act_dim, step.action.len()),
            (self.act_dim, step.torques.len()),
            (self.n_contacts, step.contacts.len()),
        ];
        for (expected, got) in dims {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if let Some(last) = self.steps.last() {
            if !(step.t > last.t) {
                return Err(Error::Validation(format!("time must increase, got {} after {}", step.t, last.t)));
            }
        }
        self.steps.push(step);
        Ok(())
    }

    /// Records the step the environment has just taken.
    pub fn record(&mut self, env: &LocomotionEnv, action: &[f64], info: &crate::env::StepInfo) -> Result<()> {
        let s = env.state();
        self.push(TrajectoryStep {
            t: env.time(),
            q: s.q.as_slice().to_vec(),
            qd: s.qd.as_slice().to_vec(),
            action: action.iter().map(|a| a.clamp(-1.0, 1.0)).collect(),
            torques: info.torques.clone(),
            components: info.components,
            contacts: s.contacts.clone(),
            assist_fx: info.assist_fx,
            assist_fz: info.assist_fz,
        })
    }

    /// The same motion seen in a mirror: actions and torques mapped through
    /// the model's action mirror.
    pub fn mirrored(&self, model: &CharacterModel) -> Result<Self> {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.action = model.mirror_action(&s.action)?;
            s.torques = model.mirror_action(&s.torques)?;
        }
        Ok(out)
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..self.dof).map(|i| format!("q_{i}")));
        cols.extend((0..self.dof).map(|i| format!("qd_{i}")));
        cols.extend((0..self.act_dim).map(|i| format!("a_{i}")));
        cols.extend((0..self.act_dim).map(|i| format!("tau_{i}")));
        cols.extend(["E_v", "E_u", "E_l", "E_a", "E_e"].map(String::from));
        cols.extend((0..self.n_contacts).map(|i| format!("c_{i}")));
        cols.push("assist_fx".into());
        cols.push("assist_fz".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for s in &self.steps {
            let c = &s.components;
            let values = std::iter::once(s.t)
                .chain(s.q.iter().copied())
                .chain(s.qd.iter().copied())
                .chain(s.action.iter().copied())
                .chain(s.torques.iter().copied())
                .chain([c.e_v, c.e_u, c.e_l, c.e_a, c.e_e])
                .chain(s.contacts.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .chain([s.assist_fx, s.assist_fz]);
            let mut first = true;
            for v in values {
                if !first {
                    out.push(',');
                }
                first = false;
                let _ = write!(out, "{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
        let names: Vec<&str> = header.split(',').collect();
        let count = |prefix: &str| names.iter().filter(|n| n.strip_prefix(prefix).is_some_and(|r| r.parse::<usize>().is_ok())).count();
        let traj = Self::new(count("q_"), count("a_"), count("c_"));
        if traj.header() != header {
            return Err(Error::Parse("unrecognized trajectory header".into()));
        }
        let mut traj = traj;
        let width = names.len();
        for (n, line) in lines.enumerate() {
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 2)))?;
            if v.len() != width {
                return Err(Error::Parse(format!("line {}: expected {width} columns, got {}", n + 2, v.len())));
            }
            let (d, a, k) = (traj.dof, traj.act_dim, traj.n_contacts);
            let mut i = 1;
            let mut take = |len: usize| {
                let s = v[i..i + len].to_vec();
                i += len;
                s
            };
            let q = take(d);
            let qd = take(d);
            let action = take(a);
            let torques = take(a);
            let e = take(5);
            let contacts = take(k).iter().map(|c| *c != 0.0).collect();
            let assist = take(2);
            traj.push(TrajectoryStep {
                t: v[0],
                q,
                qd,
                action,
                torques,
                components: RewardComponents {
                    e_v: e[0],
                    e_u: e[1],
                    e_l: e[2],
                    e_a: e[3],
                    e_e: e[4],
                },
                contacts,
                assist_fx: assist[0],
                assist_fz: assist[1],
            })?;
        }
        Ok(traj)
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// `2|xl - xr| / (xl + xr)`, as a fraction.
pub fn symmetry_index_of(xl: f64, xr: f64) -> Result<f64> {
    let sum = xl + xr;
    if !(sum > 0.0) || xl < 0.0 || xr < 0.0 {
        return Err(Error::DegenerateInput(format!(
            "symmetry index needs non-negative averages with a positive sum, got {xl} and {xr}"
        )));
    }
    Ok(2.0 * (xl - xr).abs() / sum)
}

/// Mean absolute torque over steps and the given action entries.
pub fn mean_abs_torque(traj: &Trajectory, dofs: &[usize]) -> Result<f64> {
    if traj.is_empty() || dofs.is_empty() {
        return Err(Error::DegenerateInput("no steps or no joints to average".into()));
    }
    if let Some(&bad) = dofs.iter().find(|&&i| i >= traj.act_dim) {
        return Err(Error::DimensionMismatch {
            expected: traj.act_dim,
            got: bad + 1,
        });
    }
    // Summed in sorted order so the result depends only on the multiset of
    // values; a mirrored copy then gives bit-identical left and right sums.
    let mut values: Vec<f64> = traj
        .steps
        .iter()
        .flat_map(|s| dofs.iter().map(|&i| s.torques[i].abs()))
        .collect();
    values.sort_by(f64::total_cmp);
    let sum: f64 = values.iter().sum();
    Ok(sum / values.len() as f64)
}

/// Symmetry index of the left and right leg torques.
pub fn symmetry_index(traj: &Trajectory, model: &CharacterModel) -> Result<f64> {
    let xl = mean_abs_torque(traj, &model.left_leg_dofs)?;
    let xr = mean_abs_torque(traj, &model.right_leg_dofs)?;
    symmetry_index_of(xl, xr)
}

/// Time mean of the action norm, the magnitude penalized by the reward.
pub fn avg_actuation(traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = traj
        .steps
        .iter()
        .map(|s| s.action.iter().map(|a| a * a).sum::<f64>().sqrt())
        .sum();
    Ok(sum / traj.len() as f64)
}

/// Lag of the first autocorrelation peak of a 0/1 series, in samples.
pub fn dominant_period(series: &[f64]) -> Option<usize> {
    let n = series.len();
    if n < 4 {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let r0: f64 = c.iter().map(|v| v * v).sum();
    if r0 <= 0.0 {
        return None;
    }
    let r: Vec<f64> = (0..n / 2 + 1)
        .map(|lag| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0)
        .collect();
    // Skip the central lobe, then take the highest positive peak.
    let start = r.iter().position(|v| *v < 0.0)?;
    let mut best: Option<(usize, f64)> = None;
    for lag in start.max(1)..r.len().saturating_sub(1) {
        if r[lag] > 0.0 && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] && best.is_none_or(|(_, v)| r[lag] > v) {
            best = Some((lag, r[lag]));
        }
    }
    best.map(|(lag, _)| lag)
}

/// Gait period from the contact flags, averaged over the end effectors
/// whose contact pattern is periodic.
pub fn gait_period(traj: &Trajectory, control_dt: f64) -> Option<f64> {
    let periods: Vec<usize> = (0..traj.n_contacts)
        .filter_map(|k| {
            let s: Vec<f64> = traj.steps.iter().map(|st| if st.contacts[k] { 1.0 } else { 0.0 }).collect();
            dominant_period(&s)
        })
        .collect();
    if periods.is_empty() {
        return None;
    }
    Some(periods.iter().sum::<usize>() as f64 / periods.len() as f64 * control_dt)
}

/// Evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rollouts: usize,
    pub avg_return: f64,
    pub avg_len: f64,
    pub symmetry_index: Option<f64>,
    pub avg_actuation: Option<f64>,
    pub gait_period_s: Option<f64>,
    pub assist_kp: f64,
    pub assist_kd: f64,
}

//! Euler sampling of the latent flow with optional physics guidance.
//!
//! Each step evaluates the velocity `v_k`, forms the clean estimate, decodes
//! it and differentiates the physics energy back to the latent (with `v_k`
//! held fixed). The normalized gradient drives an exponentially averaged
//! control term `theta`, clipped to a trust region around `|v_k|` and
//! projected so it never points uphill. The update is
//! `x <- x - dt * (v + theta)`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_same_resolution, Error, Result};
use crate::flow::{clean_estimate, clean_estimate_denominator, norm, LatentCode, VelocityField};
use crate::grid::SdfGrid;
use crate::objectives::{saturate, saturate_derivative, sign, LossWeights};
use crate::touch::TouchTensor;

pub use crate::flow::{LatentDecoder, ScaledDecoder};

/// Floor for the gradient norm in normalization.
pub const GRAD_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Last time of the grid from 1.
    pub t_end: f64,
    /// Grid warp: `t_k = t_end + (1 - t_end)(1 - k/N)^p`. 1 is uniform;
    /// larger values take shorter steps near the data end.
    pub time_power: f64,
    pub sigma_min: f64,
    pub beta: f64,
    pub eta: f64,
    pub trust_ratio: f64,
    pub lambda_ni: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub guidance_enabled: bool,
    pub projection_enabled: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            t_end: 0.001,
            time_power: 1.0,
            sigma_min: 1e-3,
            beta: 0.9,
            eta: 0.05,
            trust_ratio: 0.5,
            lambda_ni: 1.0,
            lambda_c: 1.0,
            tau: 0.1,
            guidance_enabled: true,
            projection_enabled: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if !(0.0..1.0).contains(&self.t_end) {
            return bad("t_end must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return bad("sigma_min must lie in [0, 1)");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be > 0");
        }
        if !(self.trust_ratio >= 0.0) {
            return bad("trust_ratio must be >= 0");
        }
        if !(self.lambda_ni >= 0.0 && self.lambda_c >= 0.0) {
            return bad("energy weights must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.time_power > 0.0 && self.time_power.is_finite()) {
            return bad("time_power must be a finite value > 0");
        }
        if self.time_grid().windows(2).any(|w| !(w[1] < w[0])) {
            return bad("time grid is not strictly decreasing");
        }
        Ok(())
    }

    /// Grid `t_0 = 1 > ... > t_steps = t_end`, uniform unless `time_power` warps it.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.steps;
        (0..=n)
            .map(|k| {
                if k == 0 {
                    1.0
                } else if k == n {
                    self.t_end
                } else {
                    let u = 1.0 - k as f64 / n as f64;
                    self.t_end + (1.0 - self.t_end) * u.powf(self.time_power)
                }
            })
            .collect()
    }

    pub fn with_weights(mut self, w: &LossWeights) -> Self {
        self.lambda_ni = w.lambda_ni;
        self.lambda_c = w.lambda_c;
        self.tau = w.tau;
        self
    }
}

/// Control term and the last raw energy gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub theta: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ControlState {
    pub fn zeros(k: usize) -> Self {
        Self {
            theta: vec![0.0; k],
            grad: vec![0.0; k],
        }
    }
}

/// Hand geometry and touch observations that define the physics energy.
#[derive(Debug, Clone, Copy)]
pub struct PhysicsContext<'a> {
    pub hand: &'a SdfGrid,
    pub touch: &'a TouchTensor,
}

/// Energy terms of a decoded latent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEval {
    pub energy: f64,
    pub ni: f64,
    pub c: f64,
    /// Gradient with respect to the latent the energy was evaluated at.
    pub grad: Vec<f64>,
}

/// Voxels the physics energy depends on: the hand interior and the contact
/// voxels, in index order.
#[derive(Debug, Clone)]
pub struct EnergySupport {
    idx: Vec<usize>,
    in_hand: Vec<bool>,
    in_contact: Vec<bool>,
    n_hand: usize,
    n_contact: usize,
}

impl EnergySupport {
    pub fn new(physics: PhysicsContext<'_>) -> Result<Self> {
        check_same_resolution(physics.hand.resolution(), physics.touch.resolution())?;
        let occ = physics.touch.occupancy();
        let (mut idx, mut in_hand, mut in_contact) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (h, c)) in physics.hand.values().iter().zip(occ).enumerate() {
            let (h, c) = (*h < 0.0, *c != 0);
            if h || c {
                idx.push(i);
                in_hand.push(h);
                in_contact.push(c);
            }
        }
        let n_hand = in_hand.iter().filter(|b| **b).count();
        let n_contact = in_contact.iter().filter(|b| **b).count();
        Ok(Self {
            idx,
            in_hand,
            in_contact,
            n_hand,
            n_contact,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    /// Energy of a decoded latent and its latent gradient. Matches
    /// `ni_loss` and `contact_loss` on the full grid.
    pub fn evaluate(&self, z: &[f64], decoder: &dyn LatentDecoder, cfg: &SamplerConfig) -> Result<EnergyEval> {
        let values = decoder.decode_at(z, &self.idx)?;
        let dn = (self.n_hand as f64).max(1.0);
        let dc = (self.n_contact as f64).max(1.0);
        let (mut ni, mut c) = (0.0, 0.0);
        let mut g = vec![0.0; values.len()];
        for (t, s) in values.iter().enumerate() {
            if self.in_hand[t] {
                ni += saturate(-s, cfg.tau);
                g[t] -= cfg.lambda_ni * saturate_derivative(-s, cfg.tau) / dn;
            }
            if self.in_contact[t] {
                c += s.abs();
                g[t] += cfg.lambda_c * sign(*s) / dc;
            }
        }
        let (ni, c) = (ni / dn, c / dc);
        Ok(EnergyEval {
            energy: cfg.lambda_ni * ni + cfg.lambda_c * c,
            ni,
            c,
            grad: decoder.pullback_at(&self.idx, &g)?,
        })
    }
}

/// Energy `lambda_ni L_NI + lambda_c L_C` of `decode(z)` and its latent
/// gradient through the decoder.
pub fn latent_energy(z: &[f64], codec: &dyn LatentDecoder, physics: PhysicsContext<'_>, cfg: &SamplerConfig) -> Result<EnergyEval> {
    EnergySupport::new(physics)?.evaluate(z, codec, cfg)
}

/// Energy at the clean estimate of `(x, v, t)` and its gradient with
/// respect to `x`, holding `v` fixed.
pub fn guidance_gradient(
    x: &[f64],
    v: &[f64],
    t: f64,
    codec: &dyn LatentDecoder,
    physics: PhysicsContext<'_>,
    cfg: &SamplerConfig,
) -> Result<EnergyEval> {
    guidance_gradient_on(x, v, t, codec, &EnergySupport::new(physics)?, cfg)
}

/// [`guidance_gradient`] with a precomputed support.
pub fn guidance_gradient_on(
    x: &[f64],
    v: &[f64],
    t: f64,
    codec: &dyn LatentDecoder,
    support: &EnergySupport,
    cfg: &SamplerConfig,
) -> Result<EnergyEval> {
    let est = clean_estimate(x, v, t, cfg.sigma_min)?;
    let mut e = support.evaluate(&est, codec, cfg)?;
    let d = (1.0 - cfg.sigma_min) / clean_estimate_denominator(t, cfg.sigma_min);
    e.grad.iter_mut().for_each(|g| *g *= d);
    Ok(e)
}

/// One control update: normalized gradient into the moving average, trust
/// region `|theta| <= rho |v|`, then (optionally) removal of any component
/// along `-g`.
pub fn stabilize(g: &[f64], v: &[f64], state: &ControlState, cfg: &SamplerConfig) -> Result<ControlState> {
    if g.len() != state.theta.len() || v.len() != state.theta.len() {
        return Err(Error::DimensionMismatch {
            expected: state.theta.len(),
            got: g.len().min(v.len()),
        });
    }
    if g.iter().chain(v).chain(&state.theta).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite control input".into()));
    }
    let gn = norm(g).max(GRAD_NORM_EPS);
    let ghat: Vec<f64> = g.iter().map(|x| x / gn).collect();
    let mut theta: Vec<f64> = state
        .theta
        .iter()
        .zip(&ghat)
        .map(|(th, gh)| cfg.beta * th + cfg.eta * gh)
        .collect();
    let limit = cfg.trust_ratio * norm(v);
    let tn = norm(&theta);
    if tn > limit {
        let f = if tn > 0.0 { limit / tn } else { 0.0 };
        theta.iter_mut().for_each(|x| *x *= f);
    }
    if cfg.projection_enabled {
        let along: f64 = theta.iter().zip(&ghat).map(|(a, b)| a * b).sum();
        if along < 0.0 {
            theta.iter_mut().zip(&ghat).for_each(|(x, gh)| *x -= along * gh);
        }
    }
    Ok(ControlState {
        theta,
        grad: g.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub t: f64,
    /// Energy terms; absent when no physics context was given.
    #[serde(rename = "E")]
    pub energy: Option<f64>,
    pub ni: Option<f64>,
    pub c: Option<f64>,
    pub theta_norm: f64,
    pub v_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: LatentCode,
    pub grid: SdfGrid,
    pub trajectory: Vec<StepLog>,
}

/// Initial noise `x_1 ~ N(0, I)` for a seed.
pub fn initial_noise(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Integrates from `t = 1` to `t_end` from seeded noise. Guidance needs a
/// physics context; without one the energy columns of the log are empty.
pub fn sample(
    field: &dyn VelocityField,
    cond: &[f64],
    codec: &dyn LatentDecoder,
    physics: Option<PhysicsContext<'_>>,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    sample_from(field, cond, codec, physics, cfg, initial_noise(field.dim(), cfg.seed))
}

/// As [`sample`], from an explicit starting latent.
pub fn sample_from(
    field: &dyn VelocityField,
    cond: &[f64],
    codec: &dyn LatentDecoder,
    physics: Option<PhysicsContext<'_>>,
    cfg: &SamplerConfig,
    start: Vec<f64>,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let k = field.dim();
    if codec.latent_dim() != k || start.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: if start.len() != k { start.len() } else { codec.latent_dim() },
        });
    }
    if cfg.guidance_enabled && physics.is_none() {
        return Err(Error::InvalidArgument("guidance needs hand and touch observations".into()));
    }
    let support = physics.map(EnergySupport::new).transpose()?;
    let times = cfg.time_grid();
    let mut x = start;
    let mut state = ControlState::zeros(k);
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (t, dt) = (times[step], times[step] - times[step + 1]);
        let v = field.velocity(&x, t, cond)?;
        let eval = match &support {
            Some(s) => Some(guidance_gradient_on(&x, &v, t, codec, s, cfg)?),
            None => None,
        };
        if cfg.guidance_enabled {
            let e = eval.as_ref().expect("checked above");
            state = stabilize(&e.grad, &v, &state, cfg)?;
        }
        trajectory.push(StepLog {
            k: step,
            t,
            energy: eval.as_ref().map(|e| e.energy),
            ni: eval.as_ref().map(|e| e.ni),
            c: eval.as_ref().map(|e| e.c),
            theta_norm: norm(&state.theta),
            v_norm: norm(&v),
        });
        for ((xi, vi), th) in x.iter_mut().zip(&v).zip(&state.theta) {
            *xi -= dt * (vi + th);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                what: "latent state".into(),
            });
        }
    }
    let latent = LatentCode::new(x)?;
    let grid = codec.decode(&latent)?;
    Ok(SampleOutput {
        latent,
        grid,
        trajectory,
    })
}

/// Writes a trajectory as JSON lines.
pub fn write_trajectory(path: impl AsRef<Path>, log: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for entry in log {
        serde_json::to_writer(&mut f, entry)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

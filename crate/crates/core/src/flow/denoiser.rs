//! A small tanh MLP velocity model with hand-written backpropagation,
//! trained by plain gradient descent on the flow-matching objective and
//! optionally finetuned with time-weighted physics losses on the decoded
//! clean-latent estimate.
//!
//! Weight file layout (little-endian): magic `b"TDNZ"`, `u32` version (1),
//! `u32` K, `u32` condition length, `f64` alpha, `u32` layer count, then per
//! layer `u32` outputs, `u32` inputs, the row-major `f64` weights and the
//! `f64` biases.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    clean_estimate_denominator, interpolate, noise_scale, target_velocity, FlowConfig,
    LatentCode, LatentDecoder, ShapeLibrary, VelocityField,
};
use crate::error::{Error, Result};
use crate::grid::SdfGrid;
use crate::objectives::{contact_loss, ni_loss, time_weight, LossWeights, WEIGHT_EPS};

const MAGIC: &[u8; 4] = b"TDNZ";
/// Sine/cosine frequencies in the time embedding.
const TIME_FREQS: usize = 4;
pub const TIME_FEATURES: usize = 1 + 2 * TIME_FREQS;
/// Training loss above which a run is declared diverged.
const DIVERGENCE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    out: usize,
    inp: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|o| {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    k: usize,
    cond_dim: usize,
    alpha: f64,
    layers: Vec<Dense>,
}

/// Parameter gradients, shaped like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl ParamGrad {
    fn zeros_like(net: &TinyDenoiser) -> Self {
        Self {
            w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    fn norm(&self) -> f64 {
        self.w
            .iter()
            .chain(&self.b)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, c: f64) {
        self.w.iter_mut().chain(self.b.iter_mut()).flatten().for_each(|g| *g *= c);
    }

    /// Flattened view in parameter order (weights then biases per layer).
    pub fn flatten(&self) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

/// Adam moment estimates over the flattened parameters.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, net: &mut TinyDenoiser, grad: &ParamGrad, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let g = grad.flatten();
        for (((p, g), m), v) in net.params_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

struct Cache {
    /// Input to each layer; the last entry is the network output.
    acts: Vec<Vec<f64>>,
}

/// `[t, sin(pi 2^j t), cos(pi 2^j t)]` of the rescaled time divided by
/// alpha, i.e. of `t` itself.
pub fn time_embedding(tau: f64, alpha: f64) -> [f64; TIME_FEATURES] {
    let u = tau / alpha;
    let mut e = [0.0; TIME_FEATURES];
    e[0] = u;
    for j in 0..TIME_FREQS {
        let w = std::f64::consts::PI * (1u32 << j) as f64 * u;
        e[1 + 2 * j] = w.sin();
        e[2 + 2 * j] = w.cos();
    }
    e
}

impl TinyDenoiser {
    pub fn new(k: usize, cond_dim: usize, cfg: &FlowConfig) -> Result<Self> {
        cfg.validate()?;
        if k == 0 {
            return Err(Error::InvalidArgument("latent dimension must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7d_e0);
        let mut widths = vec![k + TIME_FEATURES + cond_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
        widths.push(k);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let bound = (6.0 / (inp + out) as f64).sqrt();
                Dense {
                    out,
                    inp,
                    w: (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect(),
                    b: vec![0.0; out],
                }
            })
            .collect();
        Ok(Self {
            k,
            cond_dim,
            alpha: cfg.alpha,
            layers,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.k
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn input(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: x.len(),
            });
        }
        if cond.len() != self.cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cond_dim,
                got: cond.len(),
            });
        }
        let mut v = x.to_vec();
        v.extend_from_slice(&time_embedding(self.alpha * t, self.alpha));
        v.extend_from_slice(cond);
        Ok(v)
    }

    fn forward_cached(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Cache> {
        let mut acts = vec![self.input(x, t, cond)?];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = layer.forward(acts.last().unwrap());
            if i + 1 < self.layers.len() {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(a);
        }
        Ok(Cache { acts })
    }

    pub fn forward(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t, cond)?.acts.pop().unwrap())
    }

    /// Accumulates `d loss / d params` given `d loss / d output`.
    fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut ParamGrad) {
        let mut delta = dout.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.acts[li];
            for o in 0..layer.out {
                grad.b[li][o] += delta[o];
                let row = &mut grad.w[li][o * layer.inp..(o + 1) * layer.inp];
                row.iter_mut().zip(input).for_each(|(g, v)| *g += delta[o] * v);
            }
            if li == 0 {
                break;
            }
            // Back through the weights, then through tanh of the previous layer.
            let mut prev = vec![0.0; layer.inp];
            for o in 0..layer.out {
                let row = &layer.w[o * layer.inp..(o + 1) * layer.inp];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += delta[o] * w);
            }
            prev.iter_mut()
                .zip(input)
                .for_each(|(p, a)| *p *= 1.0 - a * a);
            delta = prev;
        }
    }

    /// Gradient of `dout . forward(x, t, cond)` with respect to all
    /// parameters, flattened in parameter order.
    pub fn param_gradient(&self, x: &[f64], t: f64, cond: &[f64], dout: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x, t, cond)?;
        let mut g = ParamGrad::zeros_like(self);
        self.backward(&cache, dout, &mut g);
        Ok(g.flatten())
    }

    /// Mutable access to parameter `i` in flattened order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if i < layer.w.len() {
                return &mut layer.w[i];
            }
            i -= layer.w.len();
            if i < layer.b.len() {
                return &mut layer.b[i];
            }
            i -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.cond_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.out as u32).to_le_bytes());
            out.extend_from_slice(&(l.inp as u32).to_le_bytes());
            for v in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::format(path, why.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated denoiser file"))? != MAGIC {
            return Err(bad("missing TDNZ magic"));
        }
        let header = (|| Some((r.u32()?, r.u32()?, r.u32()?, r.f64()?, r.u32()?)))();
        let (version, k, cond_dim, alpha, n_layers) =
            header.ok_or_else(|| bad("truncated denoiser header"))?;
        if version != 1 {
            return Err(bad("unsupported denoiser version"));
        }
        if n_layers == 0 || n_layers > 64 || !(alpha > 0.0) || k == 0 {
            return Err(bad("bad denoiser header"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut expected_in = k + TIME_FEATURES + cond_dim;
        for _ in 0..n_layers {
            let (out, inp) = (|| Some((r.u32()?, r.u32()?)))().ok_or_else(|| bad("truncated layer"))?;
            if inp != expected_in || out == 0 || out > 1 << 16 {
                return Err(bad("inconsistent layer shapes"));
            }
            let mut vals = Vec::with_capacity(out * inp + out);
            for _ in 0..out * inp + out {
                let v = r.f64().ok_or_else(|| bad("truncated weights"))?;
                if !v.is_finite() {
                    return Err(bad("non-finite weight"));
                }
                vals.push(v);
            }
            let b = vals.split_off(out * inp);
            layers.push(Dense { out, inp, w: vals, b });
            expected_in = out;
        }
        if expected_in != k || r.pos != bytes.len() {
            return Err(bad("inconsistent denoiser output size"));
        }
        Ok(Self {
            k,
            cond_dim,
            alpha,
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

impl VelocityField for TinyDenoiser {
    fn dim(&self) -> usize {
        self.k
    }

    fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, t, cond)
    }
}

/// Physics targets for the finetuning phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsTarget {
    pub hand: SdfGrid,
    /// Contact occupancy over the grid.
    pub contacts: Vec<u8>,
}

/// One conditioning context: clean latents to draw from, the condition
/// vector, and optional physics targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub library: ShapeLibrary,
    pub cond: Vec<f64>,
    pub physics: Option<PhysicsTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub fm: f64,
    pub ni: f64,
    pub c: f64,
    pub total: f64,
}

fn draw_x0<'a>(lib: &'a ShapeLibrary, rng: &mut ChaCha8Rng) -> &'a LatentCode {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (e, w) in lib.entries().iter().zip(lib.weights()) {
        acc += w;
        if u < acc {
            return e;
        }
    }
    lib.entries().last().unwrap()
}

/// Pretrains on the flow-matching loss for `cfg.pretrain_steps`, then, when
/// a codec and physics targets are available, finetunes for
/// `cfg.finetune_steps` with the added time-weighted physics terms
/// evaluated on the decoded clean-latent estimate of each batch element.
pub fn train_denoiser(
    examples: &[TrainExample],
    codec: Option<&dyn LatentDecoder>,
    cfg: &FlowConfig,
    weights: &LossWeights,
) -> Result<(TinyDenoiser, Vec<TrainLogEntry>)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Empty("no training examples".into()))?;
    let k = first.library.dim();
    let cond_dim = first.cond.len();
    if let Some(e) = examples.iter().find(|e| e.library.dim() != k || e.cond.len() != cond_dim) {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: e.library.dim(),
        });
    }
    weights.validate()?;
    let mut net = TinyDenoiser::new(k, cond_dim, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut adam = Adam::new(net.param_count());
    let physics_ready = codec.is_some() && examples.iter().any(|e| e.physics.is_some());
    let total_steps = cfg.pretrain_steps + if physics_ready { cfg.finetune_steps } else { 0 };
    let sig = cfg.sigma_min;

    for step in 0..total_steps {
        let finetune = step >= cfg.pretrain_steps;
        let lambda_ni = if finetune {
            weights.ni_weight_at((step - cfg.pretrain_steps) as u64)
        } else {
            0.0
        };
        let mut grad = ParamGrad::zeros_like(&net);
        // Physics gradients carry the raw time weight; the batch normalizer
        // sum w(t_b) is applied once the batch is complete.
        let mut phys_grad = ParamGrad::zeros_like(&net);
        let (mut fm_sum, mut ni_sum, mut c_sum, mut w_sum) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let x0 = draw_x0(&ex.library, &mut rng).clone();
            let eps: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let t: f64 = rng.random_range(0.0..1.0);
            let xt = interpolate(&x0, &eps, t, sig)?;
            let target = target_velocity(&x0, &eps, sig)?;
            let cache = net.forward_cached(&xt, t, &ex.cond)?;
            let out = cache.acts.last().unwrap();
            let diff: Vec<f64> = out.iter().zip(target.iter()).map(|(o, g)| o - g).collect();
            fm_sum += diff.iter().map(|d| d * d).sum::<f64>();
            let dout: Vec<f64> = diff.iter().map(|d| 2.0 * d / cfg.batch_size as f64).collect();
            net.backward(&cache, &dout, &mut grad);

            let (true, Some(codec), Some(phys)) = (finetune, codec, ex.physics.as_ref()) else {
                continue;
            };
            let s = noise_scale(t, sig);
            let den = clean_estimate_denominator(t, sig);
            let est: Vec<f64> = xt
                .iter()
                .zip(out)
                .map(|(x, v)| ((1.0 - sig) * x - s * v) / den)
                .collect();
            let grid = codec.decode(&est)?;
            let ni = ni_loss(&grid, &phys.hand, weights.tau)?;
            let c = contact_loss(&grid, &phys.contacts)?;
            let w = time_weight(t)?;
            ni_sum += w * ni.value;
            c_sum += w * c.value;
            w_sum += w;
            if w == 0.0 {
                continue;
            }
            let g: Vec<f64> = ni
                .grad
                .iter()
                .zip(&c.grad)
                .map(|(a, b)| lambda_ni * a + weights.lambda_c * b)
                .collect();
            // The estimate depends on the output through -s / den.
            let dphys: Vec<f64> = codec.pullback(&g)?.iter().map(|d| -w * s / den * d).collect();
            net.backward(&cache, &dphys, &mut phys_grad);
        }
        let norm_w = w_sum.max(WEIGHT_EPS);
        let fm = fm_sum / cfg.batch_size as f64;
        let (ni, c) = (ni_sum / norm_w, c_sum / norm_w);
        let total = fm + lambda_ni * ni + if finetune { weights.lambda_c * c } else { 0.0 };
        if !total.is_finite() || total > DIVERGENCE {
            return Err(Error::Diverged { step, loss: total });
        }
        log.push(TrainLogEntry {
            step,
            fm,
            ni,
            c,
            total,
        });
        phys_grad.scale(1.0 / norm_w);
        for (a, b) in grad
            .w
            .iter_mut()
            .chain(grad.b.iter_mut())
            .flatten()
            .zip(phys_grad.w.iter().chain(&phys_grad.b).flatten())
        {
            *a += b;
        }
        let gn = grad.norm();
        if gn > cfg.grad_clip {
            grad.scale(cfg.grad_clip / gn);
        }
        adam.apply(&mut net, &grad, cfg.learning_rate);
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::oracle_velocity;

    fn lib2() -> ShapeLibrary {
        ShapeLibrary::uniform(
            vec![
                LatentCode::new(vec![3.0, 2.0]).unwrap(),
                LatentCode::new(vec![3.0, 0.0]).unwrap(),
            ],
            1e-3,
        )
        .unwrap()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let cfg = FlowConfig {
            hidden: 6,
            layers: 2,
            ..FlowConfig::default()
        };
        let mut net = TinyDenoiser::new(3, 2, &cfg).unwrap();
        let x = [0.3, -0.2, 0.9];
        let cond = [0.5, -1.0];
        let dout = [0.7, -0.4, 1.1];
        let t = 0.37;
        let g = net.param_gradient(&x, t, &cond, &dout).unwrap();
        assert_eq!(g.len(), net.param_count());
        let f = |n: &TinyDenoiser| -> f64 {
            n.forward(&x, t, &cond).unwrap().iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..net.param_count()).step_by(3) {
            let orig = *net.param_mut(i);
            *net.param_mut(i) = orig + h;
            let up = f(&net);
            *net.param_mut(i) = orig - h;
            let dn = f(&net);
            *net.param_mut(i) = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn weights_round_trip_and_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let net = TinyDenoiser::new(2, 3, &FlowConfig::default()).unwrap();
        let p = dir.path().join("d.tdnz");
        net.save(&p).unwrap();
        assert_eq!(TinyDenoiser::load(&p).unwrap(), net);
        let mut bytes = net.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(TinyDenoiser::from_bytes(Path::new("x"), &bytes).is_err());
    }

    fn eval_set(lib: &ShapeLibrary, n: usize) -> Vec<(Vec<f64>, f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        (0..n)
            .map(|_| {
                let x0 = draw_x0(lib, &mut rng).clone();
                let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                let t = rng.random_range(0.0..1.0);
                let xt = interpolate(&x0, &eps, t, 1e-3).unwrap();
                (xt.into_vec(), t, target_velocity(&x0, &eps, 1e-3).unwrap().into_vec())
            })
            .collect()
    }

    fn mean_sq(set: &[(Vec<f64>, f64, Vec<f64>)], f: impl Fn(&[f64], f64) -> Vec<f64>) -> f64 {
        set.iter()
            .map(|(x, t, y)| f(x, *t).iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / set.len() as f64
    }

    #[test]
    fn pretraining_reduces_flow_loss_tenfold() {
        let lib = lib2();
        let ex = TrainExample {
            library: lib.clone(),
            cond: vec![],
            physics: None,
        };
        let cfg = FlowConfig {
            pretrain_steps: 2000,
            ..FlowConfig::default()
        };
        let init = TinyDenoiser::new(2, 0, &cfg).unwrap();
        let (net, _) = train_denoiser(&[ex], None, &cfg, &LossWeights::default()).unwrap();
        let set = eval_set(&lib, 4000);
        let before = mean_sq(&set, |x, t| init.forward(x, t, &[]).unwrap());
        let after = mean_sq(&set, |x, t| net.forward(x, t, &[]).unwrap());
        let floor = mean_sq(&set, |x, t| oracle_velocity(x, t, &lib).unwrap().into_vec());
        eprintln!("fm before {before} after {after} oracle floor {floor}");
        assert!(after * 10.0 <= before, "{before} -> {after}");
    }

    #[test]
    fn trained_velocity_tracks_the_oracle() {
        let lib = lib2();
        let ex = TrainExample {
            library: lib.clone(),
            cond: vec![],
            physics: None,
        };
        let cfg = FlowConfig {
            pretrain_steps: 6000,
            ..FlowConfig::default()
        };
        let (net, _) = train_denoiser(&[ex], None, &cfg, &LossWeights::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rel = 0.0;
        let n = 400;
        for _ in 0..n {
            let x0 = draw_x0(&lib, &mut rng).clone();
            let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let t = rng.random_range(0.05..1.0);
            let xt = interpolate(&x0, &eps, t, 1e-3).unwrap();
            let o = oracle_velocity(&xt, t, &lib).unwrap();
            let v = net.forward(&xt, t, &[]).unwrap();
            let err: f64 = v.iter().zip(o.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            rel += err / o.norm().max(1e-12);
        }
        let mean = rel / n as f64;
        assert!(mean <= 0.15, "mean relative error {mean}");
    }

    #[test]
    fn runaway_loss_aborts_with_diagnostic() {
        let far = ShapeLibrary::uniform(vec![LatentCode::new(vec![1e4, -1e4]).unwrap()], 1e-3).unwrap();
        let ex = TrainExample {
            library: far,
            cond: vec![],
            physics: None,
        };
        let err = train_denoiser(&[ex], None, &FlowConfig::default(), &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }
}

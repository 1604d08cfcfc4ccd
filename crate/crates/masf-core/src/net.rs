//! Time-conditioned MLP for the prior score, trained by denoising score
//! matching with hand-written reverse-mode gradients and Adam.
//!
//! The network maps `[x_t ; embed(t)] -> score estimate` through SiLU
//! hidden layers and a linear head. The final layer starts at zero so the
//! untrained net returns the zero score and the first sampler invocation
//! degenerates gracefully to the prior flow.
//!
//! The DSM objective at diffusion time t (one shared t per minibatch):
//!
//! ```text
//! L(t) = mean_i  w(t) ||S_theta(x_t_i, t) + eps_i / (sigma gamma(t))||^2,
//! x_t_i = A(t) x_i + sigma gamma(t) eps_i,
//! ```
//!
//! whose minimizer is the marginal prior score. `w(t) = 1` is the verbatim
//! objective ("score" weighting); the optional "noise" weighting
//! `w(t) = sigma^2 gamma^2(t)` tames the target blow-up as t -> 0.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measurement::ForwardProcess;
use crate::rng::NoiseSource;

/// Anything that can stand in for the prior score: the trained network in
/// production, analytic Gaussian scores in oracle tests.
pub trait PriorScore: Sync {
    fn prior_score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
}

fn default_hidden_width() -> usize {
    64
}

fn default_depth() -> usize {
    3
}

fn default_time_embed_width() -> usize {
    16
}

/// Architecture description (the learned parameters live in [`ScoreNet`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    /// Number of hidden layers.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_time_embed_width")]
    pub time_embed_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_width: default_hidden_width(),
            depth: default_depth(),
            time_embed_width: default_time_embed_width(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.depth == 0 {
            return Err(Error::invalid_config(
                "net hidden_width and depth must be >= 1",
            ));
        }
        if self.time_embed_width < 2 || self.time_embed_width % 2 != 0 {
            return Err(Error::invalid_config(format!(
                "time_embed_width must be even and >= 2, got {}",
                self.time_embed_width
            )));
        }
        Ok(())
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_prime(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal embedding: pairs (sin(2^j pi t), cos(2^j pi t)).
fn time_embedding(t: f64, width: usize) -> DVector<f64> {
    let mut e = DVector::zeros(width);
    for j in 0..width / 2 {
        let freq = std::f64::consts::PI * (1u64 << j) as f64;
        e[2 * j] = (freq * t).sin();
        e[2 * j + 1] = (freq * t).cos();
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Per-layer gradients, same shapes as the network parameters.
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(net: &ScoreNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    layers: Vec<Layer>,
    state_dim: usize,
    time_embed_width: usize,
}

impl ScoreNet {
    /// Kaiming-uniform weights, zero biases, zero-initialized final layer.
    pub fn new(state_dim: usize, cfg: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 {
            return Err(Error::invalid_config("state_dim must be >= 1"));
        }
        let mut widths = vec![state_dim + cfg.time_embed_width];
        widths.extend(std::iter::repeat(cfg.hidden_width).take(cfg.depth));
        widths.push(state_dim);
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let weight = if l == n_layers - 1 {
                DMatrix::zeros(fan_out, fan_in)
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound))
            };
            layers.push(Layer {
                weight,
                bias: DVector::zeros(fan_out),
            });
        }
        Ok(ScoreNet {
            layers,
            state_dim,
            time_embed_width: cfg.time_embed_width,
        })
    }

    /// Builds a net from explicit layers (checkpoint loading, tests).
    pub fn from_layers(
        layers: Vec<Layer>,
        state_dim: usize,
        time_embed_width: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid_config("net needs at least one layer"));
        }
        if time_embed_width < 2 || time_embed_width % 2 != 0 {
            return Err(Error::invalid_config("time_embed_width must be even >= 2"));
        }
        let mut expect = state_dim + time_embed_width;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.ncols() != expect || l.bias.len() != l.weight.nrows() {
                return Err(Error::invalid_config(format!(
                    "layer {i} shape {}x{} inconsistent with input width {expect}",
                    l.weight.nrows(),
                    l.weight.ncols()
                )));
            }
            expect = l.weight.nrows();
        }
        if expect != state_dim {
            return Err(Error::invalid_config(format!(
                "output width {expect} must equal state dim {state_dim}"
            )));
        }
        Ok(ScoreNet {
            layers,
            state_dim,
            time_embed_width,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn time_embed_width(&self) -> usize {
        self.time_embed_width
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.state_dim + self.time_embed_width];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn input(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        check_dim(self.state_dim, x.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("net time t = {t} outside [0, 1]")));
        }
        let emb = time_embedding(t, self.time_embed_width);
        let mut u = DVector::zeros(self.state_dim + self.time_embed_width);
        u.rows_mut(0, self.state_dim).copy_from(x);
        u.rows_mut(self.state_dim, self.time_embed_width).copy_from(&emb);
        Ok(u)
    }

    pub fn forward(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let mut u = self.input(x, t)?;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &u + &layer.bias;
            if l < last {
                z.apply(|v| *v = silu(*v));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("net output at layer {l}")));
            }
            u = z;
        }
        Ok(u)
    }

    /// Forward pass retaining pre-activations and activations for backprop.
    /// Returns (activations u_0..u_L, pre-activations z_0..z_{L-1}).
    fn forward_cached(
        &self,
        x: &DVector<f64>,
        t: f64,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(self.input(x, t)?);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * acts.last().unwrap() + &layer.bias;
            let mut a = z.clone();
            if l < last {
                a.apply(|v| *v = silu(*v));
            }
            pre.push(z);
            acts.push(a);
        }
        Ok((acts, pre))
    }

    /// Backward pass: given dL/d(output), accumulate parameter gradients
    /// into `grads`. `down_to` bounds how far the delta needs to travel
    /// (layers below the first trainable one contribute nothing).
    fn backward_into(
        &self,
        acts: &[DVector<f64>],
        pre: &[DVector<f64>],
        mut delta: DVector<f64>,
        down_to: usize,
        grads: &mut Gradients,
    ) {
        for l in (down_to..self.layers.len()).rev() {
            grads.layers[l].weight += &delta * acts[l].transpose();
            grads.layers[l].bias += &delta;
            if l > down_to {
                let mut e = self.layers[l].weight.transpose() * delta;
                for (v, z) in e.iter_mut().zip(pre[l - 1].iter()) {
                    *v *= silu_prime(*z);
                }
                delta = e;
            }
        }
    }
}

impl PriorScore for ScoreNet {
    fn prior_score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.forward(x, t)
    }
}

/// One prepared DSM example: perturbed input and the (weighted) residual
/// target. Separating preparation from the pass keeps the loss a
/// deterministic function of the parameters, which the gradient
/// finite-difference checks rely on.
#[derive(Debug, Clone)]
pub struct DsmExample {
    pub x_t: DVector<f64>,
    /// `eps / (sigma gamma(t))`: the quantity the score must cancel.
    pub target: DVector<f64>,
    pub t: f64,
    /// Loss weight w(t).
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    /// Verbatim objective: unit weight.
    Score,
    /// Multiply by sigma^2 gamma^2(t); same minimizer, bounded targets.
    Noise,
}

impl Default for LossWeighting {
    fn default() -> Self {
        LossWeighting::Score
    }
}

/// Which layers a finetune pass updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FinetuneMask {
    All,
    None,
    /// Update only the last n layers.
    Last(usize),
}

impl Default for FinetuneMask {
    fn default() -> Self {
        FinetuneMask::Last(2)
    }
}

impl FinetuneMask {
    pub fn layer_mask(&self, n_layers: usize) -> Vec<bool> {
        match self {
            FinetuneMask::All => vec![true; n_layers],
            FinetuneMask::None => vec![false; n_layers],
            FinetuneMask::Last(n) => {
                let frozen = n_layers.saturating_sub(*n);
                (0..n_layers).map(|l| l >= frozen).collect()
            }
        }
    }
}

impl TryFrom<String> for FinetuneMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        match s.as_str() {
            "all" => Ok(FinetuneMask::All),
            "none" => Ok(FinetuneMask::None),
            other => other
                .strip_prefix("last-")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| *n >= 1)
                .map(FinetuneMask::Last)
                .ok_or_else(|| {
                    Error::invalid_config(format!(
                        "finetune_mask must be 'all', 'none' or 'last-N', got '{other}'"
                    ))
                }),
        }
    }
}

impl From<FinetuneMask> for String {
    fn from(m: FinetuneMask) -> String {
        match m {
            FinetuneMask::All => "all".to_string(),
            FinetuneMask::None => "none".to_string(),
            FinetuneMask::Last(n) => format!("last-{n}"),
        }
    }
}

fn default_epochs() -> usize {
    500
}

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    3e-4
}

fn default_t_min() -> f64 {
    1e-3
}

fn default_validation_split() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// One epoch = one minibatch Adam step (the training set is a small
    /// ensemble, not a large dataset).
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Lower clamp for t ~ U(t_min, 1); the DSM target diverges at t = 0.
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default)]
    pub loss_weighting: LossWeighting,
    #[serde(default)]
    pub finetune_mask: FinetuneMask,
    /// Epochs for finetune passes; defaults to `epochs` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_epochs: Option<usize>,
    #[serde(default = "default_validation_split")]
    pub validation_split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            t_min: default_t_min(),
            loss_weighting: LossWeighting::default(),
            finetune_mask: FinetuneMask::default(),
            finetune_epochs: None,
            validation_split: default_validation_split(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid_config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid_config("batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid_config("learning_rate must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::invalid_config(format!(
                "t_min must lie in (0, 1), got {}",
                self.t_min
            )));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(Error::invalid_config(format!(
                "validation_split must lie in [0, 1), got {}",
                self.validation_split
            )));
        }
        Ok(())
    }
}

/// Adam with (0.9, 0.999, 1e-8), no weight decay, no LR schedule.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl Adam {
    pub fn new(net: &ScoreNet, lr: f64) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect::<Vec<_>>()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; layers where `mask` is false stay bitwise unchanged.
    pub fn update(&mut self, net: &mut ScoreNet, grads: &Gradients, mask: &[bool]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            if !mask[l] {
                continue;
            }
            let g = &grads.layers[l];
            let (m, v) = (&mut self.m[l], &mut self.v[l]);
            for (p, gp, mp, vp) in [
                (
                    layer.weight.as_mut_slice(),
                    g.weight.as_slice(),
                    m.weight.as_mut_slice(),
                    v.weight.as_mut_slice(),
                ),
                (
                    layer.bias.as_mut_slice(),
                    g.bias.as_slice(),
                    m.bias.as_mut_slice(),
                    v.bias.as_mut_slice(),
                ),
            ] {
                for i in 0..p.len() {
                    mp[i] = self.beta1 * mp[i] + (1.0 - self.beta1) * gp[i];
                    vp[i] = self.beta2 * vp[i] + (1.0 - self.beta2) * gp[i] * gp[i];
                    let m_hat = mp[i] / bc1;
                    let v_hat = vp[i] / bc2;
                    p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Draws the per-example noise and builds DSM examples at a shared time t.
pub fn prepare_dsm_batch(
    batch: &[DVector<f64>],
    fp: &ForwardProcess,
    t: f64,
    weighting: LossWeighting,
    rng: &mut impl NoiseSource,
) -> Result<Vec<DsmExample>> {
    let std = fp.marginal_std(t)?;
    if std <= 0.0 {
        return Err(Error::domain(format!("sigma*gamma(t) = 0 at t = {t}")));
    }
    let weight = match weighting {
        LossWeighting::Score => 1.0,
        LossWeighting::Noise => std * std,
    };
    let at = fp.interp_operator(t)?;
    batch
        .iter()
        .map(|x| {
            let eps = rng.standard_normal_vec(fp.dim());
            let x_t = at.matvec(x)? + &eps * std;
            Ok(DsmExample {
                x_t,
                target: eps / std,
                t,
                weight,
            })
        })
        .collect()
}

/// Loss and exact gradients on already-prepared examples. Deterministic in
/// the parameters, independent of thread count (fixed-chunk reduction).
pub fn dsm_loss_prepared(net: &ScoreNet, examples: &[DsmExample]) -> Result<(f64, Gradients)> {
    dsm_loss_prepared_masked(net, examples, 0)
}

fn dsm_loss_prepared_masked(
    net: &ScoreNet,
    examples: &[DsmExample],
    down_to: usize,
) -> Result<(f64, Gradients)> {
    if examples.is_empty() {
        return Err(Error::invalid_config("empty DSM batch"));
    }
    let n = examples.len() as f64;
    // fixed chunk count, independent of the rayon pool size, so that the
    // floating-point reduction order (and thus the result bits) never
    // depends on --jobs
    let n_chunks = 8.min(examples.len());
    let chunk_size = examples.len().div_ceil(n_chunks);
    let partials: Vec<Result<(f64, Gradients)>> = examples
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(net);
            let mut loss = 0.0;
            for ex in chunk {
                let (acts, pre) = net.forward_cached(&ex.x_t, ex.t)?;
                let residual = acts.last().unwrap() + &ex.target;
                loss += ex.weight * residual.norm_squared();
                let delta = residual * (2.0 * ex.weight / n);
                net.backward_into(&acts, &pre, delta, down_to, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for p in partials {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss / n, total))
}

/// DSM loss at time `t` on a minibatch: draws fresh noise, perturbs, and
/// returns (loss, exact gradients). `t` below `cfg.t_min` is rejected
/// because the target `eps/(sigma gamma(t))` blows up there.
pub fn dsm_loss(
    net: &ScoreNet,
    batch: &[DVector<f64>],
    fp: &ForwardProcess,
    t: f64,
    cfg: &TrainConfig,
    rng: &mut impl NoiseSource,
) -> Result<(f64, Gradients)> {
    if !(t >= cfg.t_min && t <= 1.0) {
        return Err(Error::domain(format!(
            "dsm_loss requires t in [{}, 1], got {t}",
            cfg.t_min
        )));
    }
    let examples = prepare_dsm_batch(batch, fp, t, cfg.loss_weighting, rng)?;
    dsm_loss_prepared(net, &examples)
}

/// Per-epoch loss history from a train/finetune pass.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    /// Empty when validation_split rounds down to zero members.
    pub val_loss: Vec<f64>,
}

fn loss_only(net: &ScoreNet, examples: &[DsmExample]) -> Result<f64> {
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let out = net.forward(&ex.x_t, ex.t)?;
            Ok(ex.weight * (out + &ex.target).norm_squared())
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}

fn run_optimizer(
    net: &mut ScoreNet,
    prior: &[DVector<f64>],
    fp: &ForwardProcess,
    cfg: &TrainConfig,
    epochs: usize,
    mask: &[bool],
    rng: &mut (impl Rng + NoiseSource),
) -> Result<TrainReport> {
    cfg.validate()?;
    if prior.is_empty() {
        return Err(Error::invalid_config("training ensemble is empty"));
    }
    for x in prior {
        check_dim(net.state_dim, x.len())?;
    }

    // deterministic train/validation split
    let mut indices: Vec<usize> = (0..prior.len()).collect();
    for i in (1..indices.len()).rev() {
        indices.swap(i, rng.random_range(0..=i));
    }
    let n_val = ((prior.len() as f64) * cfg.validation_split).floor() as usize;
    let n_val = n_val.min(prior.len().saturating_sub(1));
    let (val_idx, train_idx) = indices.split_at(n_val);

    // the validation set uses frozen (t, eps) pairs so its loss is
    // comparable across epochs
    let mut val_examples = Vec::with_capacity(val_idx.len());
    for &i in val_idx {
        let t = rng.random_range(cfg.t_min..1.0);
        let mut ex = prepare_dsm_batch(
            std::slice::from_ref(&prior[i]),
            fp,
            t,
            cfg.loss_weighting,
            rng,
        )?;
        val_examples.push(ex.pop().unwrap());
    }

    let trainable = mask.iter().any(|&m| m);
    let down_to = mask.iter().position(|&m| m).unwrap_or(net.layers.len());
    let mut adam = Adam::new(net, cfg.learning_rate);
    let mut report = TrainReport::default();

    for epoch in 0..epochs {
        let t = rng.random_range(cfg.t_min..1.0);
        // fresh minibatch: without replacement when the pool allows it,
        // with replacement otherwise
        let batch: Vec<DVector<f64>> = if train_idx.len() >= cfg.batch_size {
            let mut pool = train_idx.to_vec();
            for i in 0..cfg.batch_size {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool[..cfg.batch_size].iter().map(|&i| prior[i].clone()).collect()
        } else {
            (0..cfg.batch_size)
                .map(|_| prior[train_idx[rng.random_range(0..train_idx.len())]].clone())
                .collect()
        };
        let examples = prepare_dsm_batch(&batch, fp, t, cfg.loss_weighting, rng)?;
        let (loss, grads) = dsm_loss_prepared_masked(net, &examples, down_to)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                context: format!("non-finite training loss at t = {t:.4}"),
            });
        }
        if trainable {
            adam.update(net, &grads, mask);
        }
        report.train_loss.push(loss);
        if !val_examples.is_empty() {
            let vl = loss_only(net, &val_examples)?;
            if !vl.is_finite() {
                return Err(Error::Training {
                    epoch,
                    context: "non-finite validation loss".into(),
                });
            }
            report.val_loss.push(vl);
        }
    }
    Ok(report)
}

/// Full training pass: all layers update.
pub fn train(
    net: &mut ScoreNet,
    prior: &[DVector<f64>],
    fp: &ForwardProcess,
    cfg: &TrainConfig,
    rng: &mut (impl Rng + NoiseSource),
) -> Result<TrainReport> {
    let mask = vec![true; net.layers.len()];
    run_optimizer(net, prior, fp, cfg, cfg.epochs, &mask, rng)
}

/// Finetune pass: only the layers selected by `cfg.finetune_mask` update,
/// for `cfg.finetune_epochs` (defaulting to `cfg.epochs`) iterations.
/// Frozen layers stay bitwise unchanged.
pub fn finetune(
    net: &mut ScoreNet,
    prior: &[DVector<f64>],
    fp: &ForwardProcess,
    cfg: &TrainConfig,
    rng: &mut (impl Rng + NoiseSource),
) -> Result<TrainReport> {
    let mask = cfg.finetune_mask.layer_mask(net.layers.len());
    let epochs = cfg.finetune_epochs.unwrap_or(cfg.epochs);
    run_optimizer(net, prior, fp, cfg, epochs, &mask, rng)
}

pub mod checkpoint {
    //! Versioned binary parameter checkpoints with a JSON sidecar.
    //!
    //! Layout: magic `MASFNET1`, then u32 layer count, u64 state dim,
    //! u64 embed width, then per layer (u64 rows, u64 cols, row-major f64
    //! weights, f64 bias), all little-endian.

    use std::io::{Read, Write};
    use std::path::Path;

    use super::{Layer, ScoreNet};
    use crate::error::{Error, Result};
    use crate::hashing;
    use crate::schedule::Schedule;
    use nalgebra::{DMatrix, DVector};

    const MAGIC: &[u8; 8] = b"MASFNET1";

    pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        std::path::PathBuf::from(p)
    }

    /// Writes `<path>` (binary parameters) and `<path>.json` (metadata).
    pub fn save(net: &ScoreNet, schedule: &Schedule, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(net.state_dim as u64).to_le_bytes());
        buf.extend_from_slice(&(net.time_embed_width as u64).to_le_bytes());
        for l in &net.layers {
            buf.extend_from_slice(&(l.weight.nrows() as u64).to_le_bytes());
            buf.extend_from_slice(&(l.weight.ncols() as u64).to_le_bytes());
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    buf.extend_from_slice(&l.weight[(i, j)].to_le_bytes());
                }
            }
            for v in l.bias.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;

        let meta = serde_json::json!({
            "widths": net.widths(),
            "activation": "silu",
            "time_embed_width": net.time_embed_width,
            "param_count": net.param_count(),
            "schedule_hash": format!("{:016x}", hashing::hash_value(schedule)),
        });
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(Error::Checkpoint("file truncated".into()));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub fn load(path: &Path) -> Result<ScoreNet> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let n_layers = r.u32()? as usize;
        let state_dim = r.u64()? as usize;
        let embed = r.u64()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            if rows == 0 || cols == 0 || rows.saturating_mul(cols) > 1 << 28 {
                return Err(Error::Checkpoint(format!("implausible layer shape {rows}x{cols}")));
            }
            let mut w = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    w[(i, j)] = r.f64()?;
                }
            }
            let mut b = DVector::zeros(rows);
            for i in 0..rows {
                b[i] = r.f64()?;
            }
            layers.push(Layer { weight: w, bias: b });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        ScoreNet::from_layers(layers, state_dim, embed)
            .map_err(|e| Error::Checkpoint(format!("inconsistent shapes: {e}")))
    }
}

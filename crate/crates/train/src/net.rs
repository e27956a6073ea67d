//! Latent-weight network with quantized forward pass and straight-through
//! backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tnnsim_core::tnn::{InputSpec, Ternary};

use crate::error::{Error, Result};
use crate::quant::{binarize, ternarize};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Binary weights and sign activations.
    Bnn,
    /// Ternary weights and dead-zone activations.
    Tnn,
}

/// How quantizers act in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantization {
    Hard,
    /// Every quantizer replaced by the clipped identity it backpropagates as.
    Surrogate,
}

/// Hidden block of the network; a dense classifier and logit scale are
/// appended automatically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// 3x3 convolution, optional 2x2 max pool, batchnorm, activation.
    Conv { filters: usize, pool: bool },
    /// Dense, batchnorm, activation.
    Dense { units: usize },
}

/// Parses `"c16,c16p,c32,d512"`-style descriptions: `cN` is a convolution
/// with `N` filters (`p` suffix adds pooling), `dN` a dense layer.
pub fn parse_arch(s: &str) -> Result<Vec<Block>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let bad = || Error::config(format!("bad architecture token {tok:?}"));
            let (kind, rest) = tok.split_at(tok.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?);
            let (num, pool) = match rest.strip_suffix('p') {
                Some(n) => (n, true),
                None => (rest, false),
            };
            let n: usize = num.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            match (kind, pool) {
                ("c", _) => Ok(Block::Conv { filters: n, pool }),
                ("d", false) => Ok(Block::Dense { units: n }),
                _ => Err(bad()),
            }
        })
        .collect()
}

pub fn format_arch(blocks: &[Block]) -> String {
    blocks
        .iter()
        .map(|b| match b {
            Block::Conv { filters, pool } => format!("c{filters}{}", if *pool { "p" } else { "" }),
            Block::Dense { units } => format!("d{units}"),
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Real-valued shadow of a quantized weight tensor, kept in `[-1, 1]`.
    Latent,
    Gamma,
    Beta,
    /// Log of the positive scale applied to the logits.
    LogScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub kind: ParamKind,
    pub values: Vec<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Node {
    Conv { cin: usize, cout: usize, h: usize, w: usize, param: usize },
    Dense { inputs: usize, outputs: usize, param: usize },
    Pool { c: usize, h: usize, w: usize },
    Bn { c: usize, plane: usize, gamma: usize, beta: usize, stats: usize },
    Act,
    Scale { param: usize },
}

/// Running batchnorm statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowModel<F> {
    pub(crate) input: InputSpec,
    pub(crate) classes: usize,
    pub(crate) mode: Mode,
    pub(crate) weight_delta: f64,
    pub(crate) activation_delta: f64,
    pub(crate) bn_eps: f64,
    pub(crate) blocks: Vec<Block>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<Param<F>>,
    pub(crate) running: Vec<RunningStats<F>>,
}

/// Hyperparameters fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSpec {
    pub mode: Mode,
    pub weight_delta: f64,
    pub activation_delta: f64,
    pub bn_eps: f64,
}

impl<F: Real> ShadowModel<F> {
    /// Builds the layer graph with zeroed weights.
    pub fn empty(input: InputSpec, classes: usize, blocks: &[Block], spec: NetSpec) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(spec.weight_delta >= 0.0 && spec.activation_delta >= 0.0 && spec.bn_eps > 0.0) {
            return Err(Error::config("deltas must be >= 0 and batchnorm epsilon > 0"));
        }
        let mut m = Self {
            input,
            classes,
            mode: spec.mode,
            weight_delta: spec.weight_delta,
            activation_delta: spec.activation_delta,
            bn_eps: spec.bn_eps,
            blocks: blocks.to_vec(),
            nodes: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
        };
        let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
        let mut flat = false;
        for b in blocks {
            let out = match *b {
                Block::Conv { filters, pool } => {
                    if flat {
                        return Err(Error::config("convolution after a dense layer"));
                    }
                    if pool && (h < 2 || w < 2) {
                        return Err(Error::config(format!("cannot pool a {h}x{w} map")));
                    }
                    let param = m.add_param(ParamKind::Latent, filters * c * 9, F::zero());
                    m.nodes.push(Node::Conv { cin: c, cout: filters, h, w, param });
                    if pool {
                        m.nodes.push(Node::Pool { c: filters, h, w });
                        h /= 2;
                        w /= 2;
                    }
                    c = filters;
                    filters
                }
                Block::Dense { units } => {
                    let param = m.add_param(ParamKind::Latent, units * c * h * w, F::zero());
                    m.nodes.push(Node::Dense { inputs: c * h * w, outputs: units, param });
                    (c, h, w, flat) = (units, 1, 1, true);
                    units
                }
            };
            let gamma = m.add_param(ParamKind::Gamma, out, F::one());
            let beta = m.add_param(ParamKind::Beta, out, F::zero());
            m.running.push(RunningStats { mean: vec![F::zero(); out], var: vec![F::one(); out] });
            m.nodes.push(Node::Bn { c: out, plane: h * w, gamma, beta, stats: m.running.len() - 1 });
            m.nodes.push(Node::Act);
        }
        let param = m.add_param(ParamKind::Latent, classes * c * h * w, F::zero());
        m.nodes.push(Node::Dense { inputs: c * h * w, outputs: classes, param });
        let param = m.add_param(ParamKind::LogScale, 1, F::of(-0.5 * ((c * h * w) as f64).ln()));
        m.nodes.push(Node::Scale { param });
        Ok(m)
    }

    /// Builds the network and draws latent weights uniformly in
    /// `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn new<R: Rng + ?Sized>(input: InputSpec, classes: usize, blocks: &[Block], spec: NetSpec, rng: &mut R) -> Result<Self> {
        let mut m = Self::empty(input, classes, blocks, spec)?;
        let nodes = m.nodes.clone();
        for node in nodes {
            let (param, fan_in, fan_out) = match node {
                Node::Conv { cin, cout, param, .. } => (param, cin * 9, cout * 9),
                Node::Dense { inputs, outputs, param } => (param, inputs, outputs),
                _ => continue,
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt().min(1.0);
            for v in &mut m.params[param].values {
                *v = F::of(rng.random_range(-a..=a));
            }
        }
        Ok(m)
    }

    fn add_param(&mut self, kind: ParamKind, n: usize, init: F) -> usize {
        self.params.push(Param { kind, values: vec![init; n] });
        self.params.len() - 1
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn running(&self) -> &[RunningStats<F>] {
        &self.running
    }

    pub fn weight_delta(&self) -> f64 {
        self.weight_delta
    }

    pub fn activation_delta(&self) -> f64 {
        self.activation_delta
    }

    pub fn bn_eps(&self) -> f64 {
        self.bn_eps
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Quantized value of one latent weight.
    pub fn quantize(&self, w: f64) -> Ternary {
        match self.mode {
            Mode::Bnn => binarize(w),
            Mode::Tnn => ternarize(w, self.weight_delta),
        }
    }

    fn weight_values(&self, param: usize, q: Quantization) -> Vec<F> {
        let one = F::one();
        self.params[param]
            .values
            .iter()
            .map(|&w| match q {
                Quantization::Hard => F::of(self.quantize(w.to_f64().unwrap()).value() as f64),
                Quantization::Surrogate => w.max(-one).min(one),
            })
            .collect()
    }

    fn activate(&self, x: F, q: Quantization) -> F {
        let one = F::one();
        match q {
            Quantization::Surrogate => x.max(-one).min(one),
            Quantization::Hard => {
                let d = F::of(self.activation_delta);
                match self.mode {
                    Mode::Bnn => {
                        if x >= F::zero() {
                            one
                        } else {
                            -one
                        }
                    }
                    Mode::Tnn => {
                        if x > d {
                            one
                        } else if x < -d {
                            -one
                        } else {
                            F::zero()
                        }
                    }
                }
            }
        }
    }
}

pub(crate) enum Entry<F> {
    Linear { input: Vec<F>, weights: Vec<F> },
    Pool { argmax: Vec<u32> },
    Bn { xhat: Vec<F>, inv_std: Vec<F>, mean: Vec<F>, var: Vec<F> },
    BnEval,
    Act { input: Vec<F> },
    Scale { input: Vec<F> },
}

/// Intermediate values kept for the backward pass.
pub struct Cache<F> {
    pub(crate) entries: Vec<Entry<F>>,
    pub(crate) batch: usize,
}

pub struct Forward<F> {
    /// `batch x classes`, row-major.
    pub logits: Vec<F>,
    pub cache: Cache<F>,
}

fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, col: &mut [F]) {
    let hw = h * w;
    for ch in 0..c {
        for tap in 0..9 {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let row = &mut col[(ch * 9 + tap) * hw..(ch * 9 + tap + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy;
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    row[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        x[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        F::zero()
                    };
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], c: usize, h: usize, w: usize, dx: &mut [F]) {
    let hw = h * w;
    for ch in 0..c {
        for tap in 0..9 {
            let (dy, dxo) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let row = &col[(ch * 9 + tap) * hw..(ch * 9 + tap + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dxo;
                    if sx >= 0 && sx < w as isize {
                        dx[(ch * h + sy as usize) * w + sx as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
}

impl<F: Real> ShadowModel<F> {
    /// Forward pass over a batch of `batch` inputs laid out CHW each. In
    /// training mode batchnorm uses batch statistics, otherwise the running
    /// ones.
    pub fn forward(&self, x: &[F], batch: usize, training: bool, q: Quantization) -> Result<Forward<F>> {
        if batch == 0 || x.len() != batch * self.input.len() {
            return Err(Error::config(format!(
                "forward expects {batch} x {} inputs, got {}",
                self.input.len(),
                x.len()
            )));
        }
        let mut cur = x.to_vec();
        let mut entries = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            match *node {
                Node::Conv { cin, cout, h, w, param } => {
                    let wq = self.weight_values(param, q);
                    let hw = h * w;
                    let mut col = vec![F::zero(); cin * 9 * hw];
                    let mut out = vec![F::zero(); batch * cout * hw];
                    for b in 0..batch {
                        im2col(&cur[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
                        F::gemm(false, false, cout, hw, cin * 9, F::one(), &wq, &col, F::zero(), &mut out[b * cout * hw..(b + 1) * cout * hw]);
                    }
                    entries.push(Entry::Linear { input: std::mem::replace(&mut cur, out), weights: wq });
                }
                Node::Dense { inputs, outputs, param } => {
                    let wq = self.weight_values(param, q);
                    let mut out = vec![F::zero(); batch * outputs];
                    F::gemm(false, true, batch, outputs, inputs, F::one(), &cur, &wq, F::zero(), &mut out);
                    entries.push(Entry::Linear { input: std::mem::replace(&mut cur, out), weights: wq });
                }
                Node::Pool { c, h, w } => {
                    let (ho, wo) = (h / 2, w / 2);
                    let mut out = Vec::with_capacity(batch * c * ho * wo);
                    let mut argmax = Vec::with_capacity(batch * c * ho * wo);
                    for bc in 0..batch * c {
                        let base = bc * h * w;
                        for y in 0..ho {
                            for xx in 0..wo {
                                let mut best = base + 2 * y * w + 2 * xx;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                                    if cur[i] > cur[best] {
                                        best = i;
                                    }
                                }
                                out.push(cur[best]);
                                argmax.push(best as u32);
                            }
                        }
                    }
                    cur = out;
                    entries.push(Entry::Pool { argmax });
                }
                Node::Bn { c, plane, gamma, beta, stats } => {
                    let (g, bt) = (&self.params[gamma].values, &self.params[beta].values);
                    let eps = F::of(self.bn_eps);
                    if training {
                        let n = F::of((batch * plane) as f64);
                        let mut mean = vec![F::zero(); c];
                        let mut var = vec![F::zero(); c];
                        for (i, &v) in cur.iter().enumerate() {
                            mean[(i / plane) % c] += v;
                        }
                        mean.iter_mut().for_each(|m| *m = *m / n);
                        for (i, &v) in cur.iter().enumerate() {
                            let d = v - mean[(i / plane) % c];
                            var[(i / plane) % c] += d * d;
                        }
                        var.iter_mut().for_each(|s| *s = *s / n);
                        let inv_std: Vec<F> = var.iter().map(|&s| (s + eps).sqrt().recip()).collect();
                        let mut xhat = cur.clone();
                        for (i, v) in cur.iter_mut().enumerate() {
                            let ch = (i / plane) % c;
                            let xh = (*v - mean[ch]) * inv_std[ch];
                            xhat[i] = xh;
                            *v = g[ch] * xh + bt[ch];
                        }
                        entries.push(Entry::Bn { xhat, inv_std, mean, var });
                    } else {
                        let rs = &self.running[stats];
                        for (i, v) in cur.iter_mut().enumerate() {
                            let ch = (i / plane) % c;
                            *v = g[ch] * (*v - rs.mean[ch]) / (rs.var[ch] + eps).sqrt() + bt[ch];
                        }
                        entries.push(Entry::BnEval);
                    }
                }
                Node::Act => {
                    let out = cur.iter().map(|&v| self.activate(v, q)).collect();
                    entries.push(Entry::Act { input: std::mem::replace(&mut cur, out) });
                }
                Node::Scale { param } => {
                    let a = self.params[param].values[0].exp();
                    let out = cur.iter().map(|&v| v * a).collect();
                    entries.push(Entry::Scale { input: std::mem::replace(&mut cur, out) });
                }
            }
        }
        Ok(Forward { logits: cur, cache: Cache { entries, batch } })
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// gradient at the logits. Quantizers pass gradients where their input
    /// lies in `[-1, 1]` and block them elsewhere.
    pub fn backward(&self, cache: &Cache<F>, dlogits: &[F]) -> Vec<Vec<F>> {
        let batch = cache.batch;
        let mut grads: Vec<Vec<F>> = self.params.iter().map(|p| vec![F::zero(); p.values.len()]).collect();
        let mut g = dlogits.to_vec();
        for (k, (node, entry)) in self.nodes.iter().zip(&cache.entries).enumerate().rev() {
            let need_input_grad = k > 0;
            match (*node, entry) {
                (Node::Scale { param }, Entry::Scale { input }) => {
                    let a = self.params[param].values[0].exp();
                    let s: F = g.iter().zip(input).map(|(&d, &x)| d * x).sum();
                    grads[param][0] = s * a;
                    g.iter_mut().for_each(|d| *d = *d * a);
                }
                (Node::Dense { inputs, outputs, param }, Entry::Linear { input, weights }) => {
                    let one = F::one();
                    F::gemm(true, false, outputs, inputs, batch, one, &g, input, F::zero(), &mut grads[param]);
                    clip_latent_grad(&mut grads[param], &self.params[param].values);
                    if need_input_grad {
                        let mut dx = vec![F::zero(); batch * inputs];
                        F::gemm(false, false, batch, inputs, outputs, one, &g, weights, F::zero(), &mut dx);
                        g = dx;
                    }
                }
                (Node::Conv { cin, cout, h, w, param }, Entry::Linear { input, weights }) => {
                    let hw = h * w;
                    let one = F::one();
                    let mut col = vec![F::zero(); cin * 9 * hw];
                    let mut dcol = vec![F::zero(); cin * 9 * hw];
                    let mut dx = vec![F::zero(); if need_input_grad { batch * cin * hw } else { 0 }];
                    for b in 0..batch {
                        let gb = &g[b * cout * hw..(b + 1) * cout * hw];
                        im2col(&input[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
                        F::gemm(false, true, cout, cin * 9, hw, one, gb, &col, one, &mut grads[param]);
                        if need_input_grad {
                            F::gemm(true, false, cin * 9, hw, cout, one, weights, gb, F::zero(), &mut dcol);
                            col2im(&dcol, cin, h, w, &mut dx[b * cin * hw..(b + 1) * cin * hw]);
                        }
                    }
                    clip_latent_grad(&mut grads[param], &self.params[param].values);
                    g = dx;
                }
                (Node::Pool { c, h, w }, Entry::Pool { argmax }) => {
                    let mut dx = vec![F::zero(); batch * c * h * w];
                    for (&i, &d) in argmax.iter().zip(&g) {
                        dx[i as usize] += d;
                    }
                    g = dx;
                }
                (Node::Bn { c, plane, gamma, beta, .. }, Entry::Bn { xhat, inv_std, .. }) => {
                    let n = F::of((batch * plane) as f64);
                    let mut sum_d = vec![F::zero(); c];
                    let mut sum_dx = vec![F::zero(); c];
                    for (i, (&d, &xh)) in g.iter().zip(xhat).enumerate() {
                        let ch = (i / plane) % c;
                        sum_d[ch] += d;
                        sum_dx[ch] += d * xh;
                    }
                    grads[gamma].copy_from_slice(&sum_dx);
                    grads[beta].copy_from_slice(&sum_d);
                    let gm = &self.params[gamma].values;
                    for (i, (d, &xh)) in g.iter_mut().zip(xhat).enumerate() {
                        let ch = (i / plane) % c;
                        *d = gm[ch] * inv_std[ch] / n * (n * *d - sum_d[ch] - xh * sum_dx[ch]);
                    }
                }
                (Node::Bn { .. }, Entry::BnEval) => panic!("backward through an evaluation-mode forward pass"),
                (Node::Act, Entry::Act { input }) => {
                    for (d, &x) in g.iter_mut().zip(input) {
                        if x.abs() > F::one() {
                            *d = F::zero();
                        }
                    }
                }
                _ => unreachable!("cache does not match model"),
            }
        }
        grads
    }

    /// Moves running batchnorm statistics toward the batch statistics in
    /// `cache`: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, cache: &Cache<F>, momentum: f64) {
        let m = F::of(momentum);
        let one = F::one();
        for (node, entry) in self.nodes.iter().zip(&cache.entries) {
            if let (Node::Bn { stats, .. }, Entry::Bn { mean, var, .. }) = (node, entry) {
                let rs = &mut self.running[*stats];
                for (r, &b) in rs.mean.iter_mut().zip(mean) {
                    *r = m * *r + (one - m) * b;
                }
                for (r, &b) in rs.var.iter_mut().zip(var) {
                    *r = m * *r + (one - m) * b;
                }
            }
        }
    }
}

fn clip_latent_grad<F: Real>(grad: &mut [F], latent: &[F]) {
    for (g, &w) in grad.iter_mut().zip(latent) {
        if w.abs() > F::one() {
            *g = F::zero();
        }
    }
}

/// Mean softmax cross-entropy and its gradient at the logits.
pub fn softmax_cross_entropy<F: Real>(logits: &[F], labels: &[u8], classes: usize) -> (F, Vec<F>) {
    let batch = labels.len();
    let mut grad = vec![F::zero(); logits.len()];
    let mut loss = F::zero();
    let inv_b = F::of(1.0 / batch as f64);
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let z: F = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label as usize];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let t = if j == label as usize { F::one() } else { F::zero() };
            grad[b * classes + j] = (p - t) * inv_b;
        }
    }
    (loss * inv_b, grad)
}

//! Layered ternary network description and integer-only inference.

use super::ops::{dot_planes, ActivationKind, BatchNormParams, FoldedThreshold, NeuronParams};
use super::ternary::{words_for, Ternary, TernaryTensor, WORD};
use crate::error::{Error, Result};

/// Shape of the 8-bit pixel input, channel-planar (CHW).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Same-padded stride-1 3x3 convolution; weights shaped `[out, in, 3, 3]`.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        weights: TernaryTensor,
        thresholds: Vec<i64>,
    },
    /// Fully connected layer over the flattened (CHW) input; weights `[out, in]`.
    Dense {
        inputs: usize,
        outputs: usize,
        weights: TernaryTensor,
        thresholds: Vec<i64>,
    },
    /// 2x2 stride-2 max pooling over integer pre-activations.
    MaxPool2,
    BatchNorm(Vec<BatchNormParams>),
    Activation(ActivationKind),
}

impl Layer {
    pub fn weights(&self) -> Option<&TernaryTensor> {
        match self {
            Layer::Conv3x3 { weights, .. } | Layer::Dense { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn weights_mut(&mut self) -> Option<&mut TernaryTensor> {
        match self {
            Layer::Conv3x3 { weights, .. } | Layer::Dense { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Pixels,
    Integer,
    Ternary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input: InputSpec,
    layers: Vec<Layer>,
}

/// Rounds to the 16.16 fixed-point grid used by the model file.
pub fn to_fixed_grid(v: f64) -> f64 {
    (v * 65536.0).round() / 65536.0
}

impl NetworkModel {
    /// Validates the layer chain. Batchnorm parameters and activation
    /// thresholds are snapped to the 16.16 fixed-point grid so that a model
    /// and its serialized form behave identically.
    pub fn new(input: InputSpec, mut layers: Vec<Layer>) -> Result<Self> {
        for layer in &mut layers {
            match layer {
                Layer::BatchNorm(ps) => {
                    for p in ps.iter_mut() {
                        p.gamma = to_fixed_grid(p.gamma);
                        p.beta = to_fixed_grid(p.beta);
                        p.mean = to_fixed_grid(p.mean);
                        p.std = to_fixed_grid(p.std);
                    }
                }
                Layer::Activation(ActivationKind::Phi { delta }) => *delta = to_fixed_grid(*delta),
                _ => {}
            }
        }
        let model = Self { input, layers };
        model.check()?;
        Ok(model)
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// True when every activation is a sign (binarized network).
    pub fn is_binary(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !matches!(l, Layer::Activation(ActivationKind::Phi { .. })))
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    pub fn weight_tensors(&self) -> Vec<&TernaryTensor> {
        self.layers.iter().filter_map(Layer::weights).collect()
    }

    /// Copy of the model with its weight tensors replaced, in layer order.
    pub fn with_weights(&self, weights: Vec<TernaryTensor>) -> Result<Self> {
        let mut model = self.clone();
        let mut it = weights.into_iter();
        for layer in &mut model.layers {
            if let Some(w) = layer.weights_mut() {
                let new = it
                    .next()
                    .ok_or_else(|| Error::domain("too few weight tensors"))?;
                if new.shape() != w.shape() {
                    return Err(Error::Shape {
                        expected: w.shape().to_vec(),
                        actual: new.shape().to_vec(),
                    });
                }
                *w = new;
            }
        }
        if it.next().is_some() {
            return Err(Error::domain("too many weight tensors"));
        }
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Err(Error::config(format!("layer {i}: {msg}")));
        if self.input.is_empty() {
            return Err(Error::config("input spec has zero size"));
        }
        // (channels, height, width); dense outputs are (units, 1, 1)
        let mut shape = (self.input.channels, self.input.height, self.input.width);
        let mut domain = Domain::Pixels;
        let mut spatial = true;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv3x3 { in_channels, out_channels, weights, thresholds } => {
                    if domain == Domain::Integer {
                        return bad(i, "convolution needs pixel or ternary input".into());
                    }
                    if !spatial || *in_channels != shape.0 {
                        return bad(i, format!("expects {in_channels} input channels, got {shape:?}"));
                    }
                    if weights.shape() != [*out_channels, *in_channels, 3, 3] {
                        return bad(i, format!("weight shape {:?}", weights.shape()));
                    }
                    if thresholds.len() != *out_channels {
                        return bad(i, "one threshold per output channel required".into());
                    }
                    shape.0 = *out_channels;
                    domain = Domain::Integer;
                }
                Layer::Dense { inputs, outputs, weights, thresholds } => {
                    if domain == Domain::Integer {
                        return bad(i, "dense layer needs pixel or ternary input".into());
                    }
                    let flat = shape.0 * shape.1 * shape.2;
                    if *inputs != flat {
                        return bad(i, format!("expects {inputs} inputs, previous layer gives {flat}"));
                    }
                    if weights.shape() != [*outputs, *inputs] {
                        return bad(i, format!("weight shape {:?}", weights.shape()));
                    }
                    if thresholds.len() != *outputs {
                        return bad(i, "one threshold per output unit required".into());
                    }
                    shape = (*outputs, 1, 1);
                    spatial = false;
                    domain = Domain::Integer;
                }
                Layer::MaxPool2 => {
                    if domain != Domain::Integer || !spatial {
                        return bad(i, "max pooling applies to convolution pre-activations".into());
                    }
                    if shape.1 < 2 || shape.2 < 2 {
                        return bad(i, format!("cannot pool a {}x{} map", shape.1, shape.2));
                    }
                    shape = (shape.0, shape.1 / 2, shape.2 / 2);
                }
                Layer::BatchNorm(ps) => {
                    if domain != Domain::Integer {
                        return bad(i, "batchnorm applies to pre-activations".into());
                    }
                    if ps.len() != shape.0 {
                        return bad(i, format!("{} batchnorm channels for {} features", ps.len(), shape.0));
                    }
                    if ps.iter().any(|p| !(p.std > 0.0) || !p.gamma.is_finite() || !p.beta.is_finite() || !p.mean.is_finite()) {
                        return bad(i, "batchnorm needs positive std and finite parameters".into());
                    }
                    if !matches!(self.layers.get(i + 1), Some(Layer::Activation(_))) {
                        return bad(i, "batchnorm must be followed by an activation".into());
                    }
                }
                Layer::Activation(kind) => {
                    if domain != Domain::Integer {
                        return bad(i, "activation applies to pre-activations".into());
                    }
                    match kind {
                        ActivationKind::None => return bad(i, "explicit identity activation is not a layer".into()),
                        ActivationKind::Phi { delta } if !(*delta >= 0.0) => {
                            return bad(i, format!("phi threshold must be >= 0, got {delta}"))
                        }
                        _ => {}
                    }
                    domain = Domain::Ternary;
                }
            }
        }
        if domain != Domain::Integer || spatial {
            return Err(Error::config("network must end with a dense layer emitting logits"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub label: usize,
    pub logits: Vec<i64>,
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[i64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
enum Stage {
    ConvPixels {
        in_c: usize,
        out_c: usize,
        /// `[out][in][9]` weights as small integers.
        w: Vec<i8>,
        thresholds: Vec<i64>,
    },
    ConvTernary {
        in_c: usize,
        out_c: usize,
        words: usize,
        /// plus/minus planes indexed `[out][tap][word]`.
        wp: Vec<u64>,
        wm: Vec<u64>,
        thresholds: Vec<i64>,
    },
    DensePixels {
        inputs: usize,
        outputs: usize,
        /// transposed `[in][out]`.
        w_t: Vec<i8>,
        thresholds: Vec<i64>,
    },
    DenseTernary {
        outputs: usize,
        words: usize,
        wp: Vec<u64>,
        wm: Vec<u64>,
        thresholds: Vec<i64>,
    },
    Pool,
    Threshold(Vec<FoldedThreshold>),
}

enum Act {
    Pixels(Vec<u8>),
    Ints(Vec<i64>),
    Tern(Vec<i8>),
}

/// A network prepared for inference: batchnorm folded into integer
/// thresholds, weights packed into bit planes.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    input: InputSpec,
    stages: Vec<(Stage, (usize, usize, usize))>,
}

fn row_planes(weights: &TernaryTensor, rows: usize, cols: usize) -> (usize, Vec<u64>, Vec<u64>) {
    let words = words_for(cols);
    let mut wp = vec![0u64; rows * words];
    let mut wm = vec![0u64; rows * words];
    for r in 0..rows {
        for c in 0..cols {
            let bit = 1u64 << (c % WORD);
            match weights.get(r * cols + c) {
                Ternary::Pos => wp[r * words + c / WORD] |= bit,
                Ternary::Neg => wm[r * words + c / WORD] |= bit,
                Ternary::Zero => {}
            }
        }
    }
    (words, wp, wm)
}

impl CompiledModel {
    pub fn new(model: &NetworkModel) -> Result<Self> {
        model.check()?;
        let mut stages = Vec::new();
        let input = model.input;
        let mut shape = (input.channels, input.height, input.width);
        let mut pixels = true;
        let layers = &model.layers;
        let mut i = 0;
        while i < layers.len() {
            match &layers[i] {
                Layer::Conv3x3 { in_channels, out_channels, weights, thresholds } => {
                    let (in_c, out_c) = (*in_channels, *out_channels);
                    let stage = if pixels {
                        Stage::ConvPixels { in_c, out_c, w: weights.to_i8(), thresholds: thresholds.clone() }
                    } else {
                        let words = words_for(in_c);
                        let mut wp = vec![0u64; out_c * 9 * words];
                        let mut wm = vec![0u64; out_c * 9 * words];
                        for o in 0..out_c {
                            for c in 0..in_c {
                                for tap in 0..9 {
                                    let idx = (o * 9 + tap) * words + c / WORD;
                                    let bit = 1u64 << (c % WORD);
                                    match weights.get((o * in_c + c) * 9 + tap) {
                                        Ternary::Pos => wp[idx] |= bit,
                                        Ternary::Neg => wm[idx] |= bit,
                                        Ternary::Zero => {}
                                    }
                                }
                            }
                        }
                        Stage::ConvTernary { in_c, out_c, words, wp, wm, thresholds: thresholds.clone() }
                    };
                    shape.0 = out_c;
                    stages.push((stage, shape));
                }
                Layer::Dense { inputs, outputs, weights, thresholds } => {
                    let stage = if pixels {
                        let mut w_t = vec![0i8; inputs * outputs];
                        for o in 0..*outputs {
                            for c in 0..*inputs {
                                w_t[c * outputs + o] = weights.get(o * inputs + c).value();
                            }
                        }
                        Stage::DensePixels { inputs: *inputs, outputs: *outputs, w_t, thresholds: thresholds.clone() }
                    } else {
                        let (words, wp, wm) = row_planes(weights, *outputs, *inputs);
                        Stage::DenseTernary { outputs: *outputs, words, wp, wm, thresholds: thresholds.clone() }
                    };
                    shape = (*outputs, 1, 1);
                    stages.push((stage, shape));
                }
                Layer::MaxPool2 => {
                    shape = (shape.0, shape.1 / 2, shape.2 / 2);
                    stages.push((Stage::Pool, shape));
                }
                Layer::BatchNorm(_) | Layer::Activation(_) => {
                    let (bn, act) = match (&layers[i], layers.get(i + 1)) {
                        (Layer::BatchNorm(ps), Some(Layer::Activation(a))) => {
                            i += 1;
                            (Some(ps.as_slice()), *a)
                        }
                        (Layer::Activation(a), _) => (None, *a),
                        _ => unreachable!("checked by NetworkModel::check"),
                    };
                    let folded = (0..shape.0)
                        .map(|c| {
                            NeuronParams { threshold: 0, batchnorm: bn.map(|ps| ps[c]), activation: act }
                                .fold()
                                .expect("activation present")
                        })
                        .collect();
                    stages.push((Stage::Threshold(folded), shape));
                    pixels = false;
                }
            }
            i += 1;
        }
        Ok(Self { input, stages })
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    /// Integer logits for one image given as CHW bytes.
    pub fn logits(&self, image: &[u8]) -> Result<Vec<i64>> {
        if image.len() != self.input.len() {
            return Err(Error::Shape {
                expected: vec![self.input.channels, self.input.height, self.input.width],
                actual: vec![image.len()],
            });
        }
        let mut act = Act::Pixels(image.to_vec());
        let mut shape = (self.input.channels, self.input.height, self.input.width);
        for (stage, out_shape) in &self.stages {
            act = run_stage(stage, act, shape);
            shape = *out_shape;
        }
        match act {
            Act::Ints(v) => Ok(v),
            _ => unreachable!("network ends with a linear layer"),
        }
    }

    pub fn predict(&self, image: &[u8]) -> Result<Prediction> {
        let logits = self.logits(image)?;
        Ok(Prediction { label: argmax(&logits), logits })
    }
}

fn subtract_thresholds(acc: &mut [i64], thresholds: &[i64], plane: usize) {
    for (o, chunk) in acc.chunks_mut(plane).enumerate() {
        let t = thresholds[o];
        chunk.iter_mut().for_each(|v| *v -= t);
    }
}

fn run_stage(stage: &Stage, act: Act, (c_in, h, w): (usize, usize, usize)) -> Act {
    match (stage, act) {
        (Stage::ConvPixels { in_c, out_c, w: wts, thresholds }, Act::Pixels(px)) => {
            let mut acc = vec![0i64; out_c * h * w];
            for o in 0..*out_c {
                for c in 0..*in_c {
                    let plane = &px[c * h * w..(c + 1) * h * w];
                    for tap in 0..9 {
                        let k = wts[(o * in_c + c) * 9 + tap] as i64;
                        if k == 0 {
                            continue;
                        }
                        let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let out_row = &mut acc[(o * h + y) * w..(o * h + y + 1) * w];
                            let in_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                            for (x, out) in out_row.iter_mut().enumerate() {
                                let sx = x as isize + dx;
                                if sx >= 0 && sx < w as isize {
                                    *out += k * in_row[sx as usize] as i64;
                                }
                            }
                        }
                    }
                }
            }
            subtract_thresholds(&mut acc, thresholds, h * w);
            Act::Ints(acc)
        }
        (Stage::ConvTernary { in_c, out_c, words, wp, wm, thresholds }, Act::Tern(t)) => {
            // channel planes per pixel
            let mut xp = vec![0u64; h * w * words];
            let mut xm = vec![0u64; h * w * words];
            for c in 0..*in_c {
                for p in 0..h * w {
                    let bit = 1u64 << (c % WORD);
                    match t[c * h * w + p] {
                        1 => xp[p * words + c / WORD] |= bit,
                        -1 => xm[p * words + c / WORD] |= bit,
                        _ => {}
                    }
                }
            }
            let mut acc = vec![0i64; out_c * h * w];
            for o in 0..*out_c {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0i32;
                        for tap in 0..9 {
                            let (sy, sx) = (y as isize + tap as isize / 3 - 1, x as isize + tap as isize % 3 - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let p = sy as usize * w + sx as usize;
                            let wi = (o * 9 + tap) * words;
                            s += dot_planes(
                                &wp[wi..wi + words],
                                &wm[wi..wi + words],
                                &xp[p * words..(p + 1) * words],
                                &xm[p * words..(p + 1) * words],
                            );
                        }
                        acc[(o * h + y) * w + x] = s as i64 - thresholds[o];
                    }
                }
            }
            Act::Ints(acc)
        }
        (Stage::DensePixels { inputs, outputs, w_t, thresholds }, Act::Pixels(px)) => {
            let mut acc = vec![0i32; *outputs];
            for (i, &p) in px.iter().enumerate().take(*inputs) {
                if p == 0 {
                    continue;
                }
                let row = &w_t[i * outputs..(i + 1) * outputs];
                let p = p as i32;
                for (a, &k) in acc.iter_mut().zip(row) {
                    *a += k as i32 * p;
                }
            }
            Act::Ints(acc.iter().zip(thresholds).map(|(&a, &t)| a as i64 - t).collect())
        }
        (Stage::DenseTernary { outputs, words, wp, wm, thresholds }, Act::Tern(t)) => {
            let mut xp = vec![0u64; *words];
            let mut xm = vec![0u64; *words];
            for (i, &v) in t.iter().enumerate() {
                match v {
                    1 => xp[i / WORD] |= 1 << (i % WORD),
                    -1 => xm[i / WORD] |= 1 << (i % WORD),
                    _ => {}
                }
            }
            let out = (0..*outputs)
                .map(|o| {
                    let r = o * words..(o + 1) * words;
                    dot_planes(&wp[r.clone()], &wm[r], &xp, &xm) as i64 - thresholds[o]
                })
                .collect();
            Act::Ints(out)
        }
        (Stage::Pool, Act::Ints(v)) => {
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(c_in * ho * wo);
            for c in 0..c_in {
                for y in 0..ho {
                    for x in 0..wo {
                        let at = |yy: usize, xx: usize| v[(c * h + yy) * w + xx];
                        let m = at(2 * y, 2 * x)
                            .max(at(2 * y, 2 * x + 1))
                            .max(at(2 * y + 1, 2 * x))
                            .max(at(2 * y + 1, 2 * x + 1));
                        out.push(m);
                    }
                }
            }
            Act::Ints(out)
        }
        (Stage::Threshold(folded), Act::Ints(v)) => {
            let plane = h * w;
            Act::Tern(
                v.iter()
                    .enumerate()
                    .map(|(i, &s)| folded[i / plane].apply(s).value())
                    .collect(),
            )
        }
        _ => unreachable!("stage sequence validated at compile time"),
    }
}

/// Runs the model on every image of a batch.
pub fn infer(model: &NetworkModel, images: &[&[u8]]) -> Result<Vec<Prediction>> {
    let compiled = CompiledModel::new(model)?;
    images.iter().map(|img| compiled.predict(img)).collect()
}

/// Fraction of images whose predicted label matches.
pub fn accuracy(compiled: &CompiledModel, images: &[&[u8]], labels: &[u8]) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::domain("image and label counts differ"));
    }
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(labels) {
        if compiled.predict(img)?.label == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

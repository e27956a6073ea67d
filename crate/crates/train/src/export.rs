//! Conversion of a trained shadow model into an integer inference model.

use tnnsim_core::tnn::{ActivationKind, BatchNormParams, Layer, NetworkModel, TernaryTensor};

use crate::error::Result;
use crate::net::{Mode, Node, ShadowModel};
use crate::scalar::Real;

impl<F: Real> ShadowModel<F> {
    /// Quantized weights of latent parameter `param` with the given shape.
    fn ternary_weights(&self, param: usize, shape: &[usize]) -> Result<TernaryTensor> {
        let values: Vec<_> = self.params[param].values.iter().map(|w| self.quantize(w.to_f64().unwrap())).collect();
        Ok(TernaryTensor::from_values(shape, &values)?)
    }

    /// Running mean of the batchnorm fed by the linear node at `k`, if any.
    fn following_bn_mean(&self, k: usize) -> Option<Vec<f64>> {
        for node in &self.nodes[k + 1..] {
            match node {
                Node::Pool { .. } => continue,
                Node::Bn { stats, .. } => {
                    return Some(self.running[*stats].mean.iter().map(|m| m.to_f64().unwrap()).collect())
                }
                _ => return None,
            }
        }
        None
    }

    /// Integer inference model. The integer part of each running mean moves
    /// into the neuron threshold; the batchnorm keeps the remainder and
    /// `std = sqrt(var + eps)`.
    pub fn to_network(&self) -> Result<NetworkModel> {
        let mut layers = Vec::new();
        let mut pending_thresholds: Vec<i64> = Vec::new();
        for (k, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Conv { cin, cout, param, .. } | Node::Dense { inputs: cin, outputs: cout, param } => {
                    let thresholds: Vec<i64> = match self.following_bn_mean(k) {
                        Some(mean) => mean.iter().map(|m| m.round() as i64).collect(),
                        None => vec![0; cout],
                    };
                    pending_thresholds = thresholds.clone();
                    layers.push(if matches!(node, Node::Conv { .. }) {
                        Layer::Conv3x3 {
                            in_channels: cin,
                            out_channels: cout,
                            weights: self.ternary_weights(param, &[cout, cin, 3, 3])?,
                            thresholds,
                        }
                    } else {
                        Layer::Dense { inputs: cin, outputs: cout, weights: self.ternary_weights(param, &[cout, cin])?, thresholds }
                    });
                }
                Node::Pool { .. } => layers.push(Layer::MaxPool2),
                Node::Bn { c, gamma, beta, stats, .. } => {
                    let rs = &self.running[stats];
                    let f = |v: F| v.to_f64().unwrap();
                    let ps = (0..c)
                        .map(|ch| BatchNormParams {
                            gamma: f(self.params[gamma].values[ch]),
                            beta: f(self.params[beta].values[ch]),
                            mean: f(rs.mean[ch]) - pending_thresholds[ch] as f64,
                            std: (f(rs.var[ch]) + self.bn_eps).sqrt(),
                        })
                        .collect();
                    layers.push(Layer::BatchNorm(ps));
                }
                Node::Act => layers.push(Layer::Activation(match self.mode {
                    Mode::Bnn => ActivationKind::Sign,
                    Mode::Tnn => ActivationKind::Phi { delta: self.activation_delta },
                })),
                Node::Scale { .. } => {}
            }
        }
        Ok(NetworkModel::new(self.input, layers)?)
    }
}

#[cfg(test)]
mod tests {
    use crate::net::{parse_arch, Mode, NetSpec, Quantization, ShadowModel};
    use rand::Rng;
    use tnnsim_core::rng::seeded;
    use tnnsim_core::tnn::{CompiledModel, InputSpec};

    /// The exported integer model reproduces the float evaluation-mode
    /// forward pass whenever no pre-activation sits near a quantizer edge.
    #[test]
    fn export_agrees_with_float_forward() {
        let mut rng = seeded(3);
        let input = InputSpec { channels: 2, height: 6, width: 6 };
        for mode in [Mode::Tnn, Mode::Bnn] {
            let spec = NetSpec { mode, weight_delta: 0.05, activation_delta: 0.05, bn_eps: 1e-5 };
            let mut m = ShadowModel::<f64>::new(input, 4, &parse_arch("c6p,d20").unwrap(), spec, &mut rng).unwrap();
            // nontrivial running statistics and affine parameters
            for rs in &mut m.running {
                rs.mean.iter_mut().for_each(|v| *v = rng.random_range(-300.0..300.0));
                rs.var.iter_mut().for_each(|v| *v = rng.random_range(10.0..4e4));
            }
            for p in &mut m.params {
                if p.kind == crate::net::ParamKind::Gamma {
                    p.values.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
                }
                if p.kind == crate::net::ParamKind::Beta {
                    p.values.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                }
            }
            let net = m.to_network().unwrap();
            let compiled = CompiledModel::new(&net).unwrap();
            let mut agree = 0;
            for _ in 0..200 {
                let img: Vec<u8> = (0..72).map(|_| rng.random()).collect();
                let x: Vec<f64> = img.iter().map(|&p| p as f64).collect();
                let f = m.forward(&x, 1, false, Quantization::Hard).unwrap();
                let ints = compiled.logits(&img).unwrap();
                // logits are the integer sums times the scale
                let a = m.params.last().unwrap().values[0].exp();
                let float_sums: Vec<f64> = f.logits.iter().map(|v| v / a).collect();
                if float_sums.iter().zip(&ints).all(|(x, &y)| (x - y as f64).abs() < 1e-6) {
                    agree += 1;
                }
            }
            assert!(agree >= 190, "{mode:?}: {agree}/200");
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, KERNEL};
use crate::error::{bail, Result};
use crate::tensor::layers::BatchNormState;
use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
    /// Identity 2×3 affine: (1, 0, 0, 0, 1, 0).
    IdentityAffine,
    /// Xavier over the hidden-state inputs, identity over the trailing
    /// warped-frame inputs, so a fresh head passes the warped frame through.
    Fusion,
}

/// All learnable tensors of the three networks plus batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    norms: Vec<(String, BatchNormState)>,
}

/// Parameter layout for a configuration, in canonical order.
fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Vec<String>) {
    let k = KERNEL;
    let mut p: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut norms = Vec::new();
    let mut bn = |p: &mut Vec<(String, Vec<usize>, Init)>, name: String, c: usize| {
        p.push((format!("{name}.gamma"), vec![c], Init::Ones));
        p.push((format!("{name}.beta"), vec![c], Init::Zeros));
        norms.push(name);
    };

    let mut cin = 2 * (cfg.input_len - 1);
    for (i, c) in cfg.ofpn_channels().into_iter().enumerate() {
        p.push((
            format!("ofpn.conv{i}.weight"),
            vec![c, cin, k, k],
            Init::Xavier,
        ));
        bn(&mut p, format!("ofpn.bn{i}"), c);
        cin = c;
    }
    p.push(("ofpn.head.weight".into(), vec![2, cin, k, k], Init::Xavier));
    p.push(("ofpn.head.bias".into(), vec![2], Init::Zeros));

    let mut cin = 2;
    for (i, c) in cfg.men_channels().into_iter().enumerate() {
        p.push((
            format!("men.conv{i}.weight"),
            vec![c, cin, k, k, k],
            Init::Xavier,
        ));
        bn(&mut p, format!("men.bn{i}"), c);
        cin = c;
    }
    p.push(("men.head.weight".into(), vec![6, cin, k, k], Init::Zeros));
    p.push(("men.head.bias".into(), vec![6], Init::IdentityAffine));

    let mut cin = cfg.channels();
    for (l, ch) in cfg.stpn_channels().into_iter().enumerate() {
        p.push((
            format!("stpn.lstm{l}.w_x"),
            vec![4 * ch, cin, k, k],
            Init::Xavier,
        ));
        p.push((
            format!("stpn.lstm{l}.w_h"),
            vec![4 * ch, ch, k, k],
            Init::Xavier,
        ));
        bn(&mut p, format!("stpn.lstm{l}.bn"), 4 * ch);
        cin = ch;
    }
    let c = cfg.channels();
    p.push((
        "stpn.head.weight".into(),
        vec![c, cin + c, 1, 1],
        Init::Fusion,
    ));
    p.push(("stpn.head.bias".into(), vec![c], Init::Zeros));
    (p, norms)
}

pub(crate) fn norm_names(cfg: &ModelConfig) -> Vec<String> {
    layout(cfg).1
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let receptive: usize = shape[2..].iter().product();
    let bound = (6.0 / ((shape[0] + shape[1]) * receptive) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Deterministic initialization from `seed`.
///
/// Convolutions get Xavier-uniform weights and zero biases, batch-norm scales
/// start at one. The motion head starts at zero weights with an identity-affine
/// bias, so a fresh model warps frames by the identity, and the frame head
/// starts as a pass-through of the warped frame plus a small random
/// contribution from the ConvLSTM state.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layout, norms) = layout(&config);
    let params = layout
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::IdentityAffine => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                Init::Xavier => xavier(&mut rng, &shape),
                Init::Fusion => {
                    let (out, cols) = (shape[0], shape[1]);
                    let hidden = cols - out;
                    let w = xavier(&mut rng, &[out, hidden, 1, 1]);
                    let mut data = vec![0.0; n];
                    for o in 0..out {
                        data[o * cols..o * cols + hidden]
                            .copy_from_slice(&w[o * hidden..(o + 1) * hidden]);
                        data[o * cols + hidden + o] = 1.0;
                    }
                    data
                }
            };
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let norms = norms
        .into_iter()
        .map(|n| (n, BatchNormState::default()))
        .collect();
    Ok(ModelParams {
        config,
        params,
        norms,
    })
}

impl ModelParams {
    /// Assemble from explicit parts, validating names and shapes against the layout.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<(String, Tensor)>,
        norms: Vec<(String, BatchNormState)>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, norm_names) = layout(&config);
        if params.len() != layout.len() {
            bail!(
                Format,
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            );
        }
        for ((name, t), (want, shape, _)) in params.iter().zip(&layout) {
            if name != want || t.shape() != shape.as_slice() {
                bail!(
                    Format,
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                );
            }
        }
        if norms.len() != norm_names.len()
            || norms.iter().zip(&norm_names).any(|((a, _), b)| a != b)
        {
            bail!(
                Format,
                "batch-norm layer names do not match the model layout"
            );
        }
        Ok(Self {
            config,
            params,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn norms(&self) -> &[(String, BatchNormState)] {
        &self.norms
    }

    pub fn norm(&self, name: &str) -> Result<&BatchNormState> {
        match self.norms.iter().find(|(n, _)| n == name) {
            Some((_, s)) => Ok(s),
            None => bail!(Contract, "no batch-norm layer named {name}"),
        }
    }

    /// Fold train-mode batch statistics into the running averages, in order.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            match self.norms.iter_mut().find(|(n, _)| n == name) {
                Some((_, s)) => s.update(stats),
                None => bail!(Contract, "no batch-norm layer named {name}"),
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Record every parameter on `tape`, tracking gradients when `trainable`.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<ModelVars<'t>> {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.param(t.clone())?
                } else {
                    tape.constant(t.clone())?
                };
                Ok((n.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars { vars })
    }
}

/// Parameters recorded on a tape, in the same order as [`ModelParams`].
pub struct ModelVars<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> ModelVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        match self.vars.iter().find(|(n, _)| n == name) {
            Some((_, v)) => Ok(*v),
            None => bail!(Contract, "no parameter named {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients in parameter order; untouched parameters get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, v)| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelScale, FrameMode};

    fn cfg(scale: ChannelScale) -> ModelConfig {
        ModelConfig {
            width: 8,
            height: 8,
            input_len: 5,
            mode: FrameMode::Rgb,
            channel_scale: scale,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params(cfg(ChannelScale::new(1, 8).unwrap()), 7).unwrap();
        let b = init_params(cfg(ChannelScale::new(1, 8).unwrap()), 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(cfg(ChannelScale::new(1, 8).unwrap()), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layout_shapes_follow_scale() {
        let p = init_params(cfg(ChannelScale::FULL), 0).unwrap();
        assert_eq!(p.get("ofpn.conv0.weight").unwrap().shape(), &[32, 8, 3, 3]);
        assert_eq!(
            p.get("men.conv2.weight").unwrap().shape(),
            &[64, 64, 3, 3, 3]
        );
        assert_eq!(p.get("stpn.lstm0.w_h").unwrap().shape(), &[512, 128, 3, 3]);
        assert_eq!(p.get("stpn.lstm3.w_x").unwrap().shape(), &[128, 64, 3, 3]);
        assert_eq!(p.get("stpn.head.weight").unwrap().shape(), &[3, 35, 1, 1]);
        assert_eq!(
            p.get("men.head.bias").unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert!(p
            .get("men.head.weight")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_bounds_hold() {
        let p = init_params(cfg(ChannelScale::new(1, 4).unwrap()), 3).unwrap();
        let w = p.get("ofpn.conv1.weight").unwrap();
        let s = w.shape();
        let bound = (6.0 / ((s[0] + s[1]) * 9) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn from_parts_validates_layout() {
        let p = init_params(cfg(ChannelScale::new(1, 8).unwrap()), 1).unwrap();
        let mut params: Vec<(String, Tensor)> =
            p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(ModelParams::from_parts(p.config, params.clone(), p.norms().to_vec()).is_ok());
        params[0].1 = Tensor::zeros(&[1]);
        assert!(ModelParams::from_parts(p.config, params, p.norms().to_vec()).is_err());
    }
}

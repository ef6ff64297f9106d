//! Layer-level building blocks assembled from tape operations.

use super::{BatchStats, Tape, Tensor, Var};
use crate::error::{bail, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running: Option<BatchStats>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormState {
    fn default() -> Self {
        Self {
            running: None,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

impl BatchNormState {
    /// Fold batch statistics in: `running = (1 - m) * running + m * batch`.
    /// The first update adopts the batch statistics directly.
    pub fn update(&mut self, batch: &BatchStats) {
        match &mut self.running {
            None => self.running = Some(batch.clone()),
            Some(r) => {
                let m = self.momentum;
                for (r, b) in r.mean.iter_mut().zip(&batch.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in r.var.iter_mut().zip(&batch.var) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }
}

/// Batch norm in the given mode. In train mode the observed batch statistics
/// are returned; the caller decides when to fold them into `state`.
pub fn batch_norm<'t>(
    x: &Var<'t>,
    gamma: &Var<'t>,
    beta: &Var<'t>,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    match mode {
        Mode::Train => x.batch_norm(gamma, beta, None, state.epsilon),
        Mode::Eval => {
            let Some(running) = &state.running else {
                bail!(
                    StatisticsUnset,
                    "batch norm evaluated before any training update"
                );
            };
            x.batch_norm(gamma, beta, Some(running), state.epsilon)
        }
    }
}

/// Apply one ConvLSTM recurrence given gate pre-activations from the input path.
///
/// `x_gates` is `[B, 4·Ch, H, W]` ordered (input, forget, output, candidate);
/// the hidden-to-state convolution of `h` is added before the nonlinearities.
pub fn lstm_update<'t>(
    x_gates: &Var<'t>,
    h: &Var<'t>,
    c: &Var<'t>,
    w_h: &Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let hs = h.shape();
    let cs = c.shape();
    let gs = x_gates.shape();
    if hs != cs || gs.len() != 4 || gs[0] != hs[0] || gs[1] != 4 * hs[1] || gs[2..] != hs[2..] {
        bail!(
            Dimension,
            "ConvLSTM state mismatch: gates {gs:?}, hidden {hs:?}, cell {cs:?}"
        );
    }
    let ch = hs[1];
    let pad = w_h.shape()[2] / 2;
    let gates = x_gates.add(&h.conv2d(w_h, None, 1, pad)?)?;
    let i = gates.slice(1, 0, ch)?.sigmoid()?;
    let f = gates.slice(1, ch, ch)?.sigmoid()?;
    let o = gates.slice(1, 2 * ch, ch)?.sigmoid()?;
    let g = gates.slice(1, 3 * ch, ch)?.tanh()?;
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh()?)?;
    Ok((h_next, c_next))
}

/// Gate convolutions of one ConvLSTM cell over `[x, h]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights<'t> {
    /// `[4·Ch, Cin, k, k]`
    pub w_x: Var<'t>,
    /// `[4·Ch, Ch, k, k]`
    pub w_h: Var<'t>,
    /// `[4·Ch]`
    pub bias: Var<'t>,
}

/// One ConvLSTM step: gates `i, f, o = σ(·)`, `g = tanh(·)`,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`, all convolutions same-padded.
pub fn convlstm_cell_step<'t>(
    x: &Var<'t>,
    h: &Var<'t>,
    c: &Var<'t>,
    weights: &ConvLstmWeights<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let xs = x.shape();
    let hs = h.shape();
    if xs.len() != 4 || hs.len() != 4 || xs[0] != hs[0] || xs[2..] != hs[2..] {
        bail!(
            Dimension,
            "ConvLSTM input {xs:?} and hidden {hs:?} disagree"
        );
    }
    let pad = weights.w_x.shape()[2] / 2;
    let x_gates = x.conv2d(&weights.w_x, Some(&weights.bias), 1, pad)?;
    lstm_update(&x_gates, h, c, &weights.w_h)
}

/// Zero-initialised `(h, c)` for a ConvLSTM of `channels` hidden maps.
pub fn zero_state<'t>(
    tape: &'t Tape,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let z = Tensor::zeros(&[batch, channels, height, width]);
    Ok((tape.constant(z.clone())?, tape.constant(z)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell<'t>(tape: &'t Tape, cin: usize, ch: usize, fill: f64) -> ConvLstmWeights<'t> {
        ConvLstmWeights {
            w_x: tape
                .param(Tensor::full(&[4 * ch, cin, 3, 3], fill))
                .unwrap(),
            w_h: tape.param(Tensor::full(&[4 * ch, ch, 3, 3], fill)).unwrap(),
            bias: tape.param(Tensor::zeros(&[4 * ch])).unwrap(),
        }
    }

    #[test]
    fn zero_params_zero_state() {
        let tape = Tape::new();
        let w = cell(&tape, 3, 2, 0.0);
        let x = tape
            .constant(Tensor::from_fn(&[1, 3, 4, 5], |i| i as f64 * 0.1))
            .unwrap();
        let (h, c) = zero_state(&tape, 1, 2, 4, 5).unwrap();
        let (h2, c2) = convlstm_cell_step(&x, &h, &c, &w).unwrap();
        assert!(h2.value().data().iter().all(|&v| v == 0.0));
        assert!(c2.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(h2.shape(), vec![1, 2, 4, 5]);
    }

    #[test]
    fn zero_params_halve_cell() {
        let tape = Tape::new();
        let w = cell(&tape, 1, 2, 0.0);
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        let h = tape.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let c0 = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 - 8.0);
        let c = tape.constant(c0.clone()).unwrap();
        let (h2, c2) = convlstm_cell_step(&x, &h, &c, &w).unwrap();
        for ((cv, c2v), h2v) in c0
            .data()
            .iter()
            .zip(c2.value().data())
            .zip(h2.value().data())
        {
            assert!((c2v - 0.5 * cv).abs() < 1e-15);
            assert!((h2v - 0.5 * (0.5 * cv).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let tape = Tape::new();
        let w = cell(&tape, 1, 1, 0.1);
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let (h, c) = zero_state(&tape, 1, 1, 3, 4).unwrap();
        assert!(matches!(
            convlstm_cell_step(&x, &h, &c, &w),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn eval_before_training_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 2, 2])).unwrap();
        let g = tape.constant(Tensor::full(&[1], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        let mut state = BatchNormState::default();
        assert!(matches!(
            batch_norm(&x, &g, &b, &state, Mode::Eval),
            Err(crate::Error::StatisticsUnset(_))
        ));
        let (_, stats) = batch_norm(&x, &g, &b, &state, Mode::Train).unwrap();
        state.update(&stats.unwrap());
        assert!(batch_norm(&x, &g, &b, &state, Mode::Eval).is_ok());
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut s = BatchNormState::default();
        s.update(&BatchStats {
            mean: vec![1.0],
            var: vec![2.0],
        });
        s.update(&BatchStats {
            mean: vec![3.0],
            var: vec![4.0],
        });
        let r = s.running.unwrap();
        assert!((r.mean[0] - (0.9 * 1.0 + 0.1 * 3.0)).abs() < 1e-15);
        assert!((r.var[0] - (0.9 * 2.0 + 0.1 * 4.0)).abs() < 1e-15);
    }
}

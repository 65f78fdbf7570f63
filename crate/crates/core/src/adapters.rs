//! Residual feature adapters: `z = x + MLP(x)` and `z = x + Conv1D(x)`.
//!
//! The convolutional variant runs along the instance axis with the embedding
//! dimensions as channels, using same-padding so the bag length is preserved.
//! Both adapters start as the exact identity because their second layer is
//! zero-initialised.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, mask_matrix, Parameters};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Mlp,
    Conv1d,
    /// No adapter: the MIL backbone sees the frozen features directly.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    /// Bottleneck width; defaults to d/4 (at least 1).
    pub hidden_dim: Option<usize>,
    pub kernel_size: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Mlp,
            hidden_dim: None,
            kernel_size: 3,
        }
    }
}

impl AdapterConfig {
    pub fn hidden_for(&self, d: usize) -> usize {
        self.hidden_dim.unwrap_or((d / 4).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub kind: AdapterKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub kernel_size: usize,
    /// One d×h matrix per kernel tap (a single tap for the MLP).
    pub w1: Vec<Array2<f64>>,
    pub b1: Array2<f64>,
    /// One h×d matrix per kernel tap.
    pub w2: Vec<Array2<f64>>,
    pub b2: Array2<f64>,
}

impl Parameters for AdapterParams {
    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.w1.iter().collect();
        out.push(&self.b1);
        out.extend(self.w2.iter());
        out.push(&self.b2);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self.w1.iter_mut().collect();
        out.push(&mut self.b1);
        out.extend(self.w2.iter_mut());
        out.push(&mut self.b2);
        out
    }
}

/// Tape handles for an adapter, in `tensors()` order.
pub struct AdapterVars {
    w1: Vec<Var>,
    b1: Var,
    w2: Vec<Var>,
    b2: Var,
    pub all: Vec<Var>,
}

pub fn init_adapter(
    kind: AdapterKind,
    input_dim: usize,
    hidden_dim: usize,
    kernel_size: usize,
    seed: u64,
) -> Result<AdapterParams> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "adapter dims must be >= 1 (d={input_dim}, h={hidden_dim})"
        )));
    }
    let taps = match kind {
        AdapterKind::Mlp => 1,
        AdapterKind::Conv1d => {
            if kernel_size.is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "conv1d kernel_size must be odd, got {kernel_size}"
                )));
            }
            kernel_size
        }
        AdapterKind::None => {
            return Err(Error::InvalidArgument("adapter kind `none` has no parameters".into()))
        }
    };
    let mut rng = rng::rng_from(seed);
    let fan_in = input_dim * taps;
    let w1 = (0..taps)
        .map(|_| fan_in_uniform(input_dim, hidden_dim, fan_in, &mut rng))
        .collect();
    let b1 = fan_in_uniform(1, hidden_dim, fan_in, &mut rng);
    Ok(AdapterParams {
        kind,
        input_dim,
        hidden_dim,
        kernel_size: taps,
        w1,
        b1,
        w2: vec![Array2::zeros((hidden_dim, input_dim)); taps],
        b2: Array2::zeros((1, input_dim)),
    })
}

impl AdapterParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let all = Parameters::bind(self, tape, trainable);
        let taps = self.w1.len();
        AdapterVars {
            w1: all[..taps].to_vec(),
            b1: all[taps],
            w2: all[taps + 1..2 * taps + 1].to_vec(),
            b2: all[2 * taps + 1],
            all,
        }
    }

    fn tap_offset(&self, tap: usize) -> isize {
        tap as isize - (self.w1.len() / 2) as isize
    }

    /// Residual forward for one bag (K×d) on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &AdapterVars, x: Var) -> Var {
        let h = self.taps(tape, x, &vars.w1, vars.b1);
        let h = tape.relu(h);
        let delta = self.taps(tape, h, &vars.w2, vars.b2);
        tape.add(x, delta)
    }

    fn taps(&self, tape: &mut Tape, x: Var, w: &[Var], b: Var) -> Var {
        let mut acc: Option<Var> = None;
        for (t, &wt) in w.iter().enumerate() {
            let off = self.tap_offset(t);
            let src = if off == 0 { x } else { tape.shift_rows(x, off) };
            let y = tape.matmul(src, wt);
            acc = Some(match acc {
                Some(a) => tape.add(a, y),
                None => y,
            });
        }
        let acc = acc.expect("adapter has at least one tap");
        tape.add_row(acc, b)
    }

    /// `mask ⊙ adapter(mask ⊙ x)`: padded rows are zero going in and coming out.
    pub fn forward_masked(&self, tape: &mut Tape, vars: &AdapterVars, x: Var, mask: &[bool]) -> Var {
        if mask.iter().all(|&m| m) {
            return self.forward(tape, vars, x);
        }
        let m = tape.constant(mask_matrix(mask, self.input_dim));
        let xin = tape.mul(x, m);
        let z = self.forward(tape, vars, xin);
        tape.mul(z, m)
    }

    fn check_input(&self, x: &Array3<f64>, expect: AdapterKind) -> Result<()> {
        if self.kind != expect {
            return Err(Error::InvalidArgument(format!(
                "expected {expect:?} adapter params, got {:?}",
                self.kind
            )));
        }
        if x.dim().2 != self.input_dim {
            return Err(Error::Dim(format!(
                "adapter expects d={}, input has d={}",
                self.input_dim,
                x.dim().2
            )));
        }
        Ok(())
    }

    fn forward_batch(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut out = Array3::zeros(x.raw_dim());
        for (bag, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let xv = tape.constant(bag.to_owned());
            let z = self.forward(&mut tape, &vars, xv);
            dst.assign(tape.value(z));
        }
        out
    }
}

/// `z = x + W₂·relu(W₁x + b₁) + b₂` per instance, for a B×K×d batch.
pub fn mlp_adapter_forward(x: &Array3<f64>, params: &AdapterParams) -> Result<Array3<f64>> {
    params.check_input(x, AdapterKind::Mlp)?;
    Ok(params.forward_batch(x))
}

/// Two same-padded convolutions along K with a ReLU between, plus the residual.
pub fn conv_adapter_forward(x: &Array3<f64>, params: &AdapterParams) -> Result<Array3<f64>> {
    params.check_input(x, AdapterKind::Conv1d)?;
    Ok(params.forward_batch(x))
}

pub fn adapter_forward(x: &Array3<f64>, params: &AdapterParams) -> Result<Array3<f64>> {
    params.check_input(x, params.kind)?;
    Ok(params.forward_batch(x))
}

/// Stack bags into B×K×d; all bags must share K and d.
pub fn stack_bags(bags: &[Array2<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = bags.iter().map(|b| b.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dim(e.to_string()))
}

//! Trainable pieces that sit next to the encoder: critics, decoder, GRU,
//! probe heads.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Parameterized, Variable};
use crate::tensor::{Scalar, Tensor};

fn linear_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Bilinear critics: `W_g` (F×d_l) for global-local, `W_l` (d_l×d_l) for local-local.
#[derive(Clone, Debug)]
pub struct ScoreHeads<T: Scalar = f32> {
    pub w_g: Variable<T>,
    pub w_l: Variable<T>,
}

impl<T: Scalar> ScoreHeads<T> {
    pub fn new(feature_dim: usize, local_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_g: Variable::uniform("heads.w_g", &[feature_dim, local_dim], linear_bound(feature_dim), rng),
            w_l: Variable::uniform("heads.w_l", &[local_dim, local_dim], linear_bound(local_dim), rng),
        }
    }
}

impl<T: Scalar> Parameterized<T> for ScoreHeads<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        vec![&self.w_g, &self.w_l]
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        vec![&mut self.w_g, &mut self.w_l]
    }
}

/// Mirror image of the encoder: affine layer, then transposed convolutions
/// back to frame size. Hidden layers use relu; the output uses a sigmoid.
#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar = f32> {
    fc_w: Variable<T>,
    fc_b: Variable<T>,
    deconv_w: Vec<Variable<T>>,
    deconv_b: Vec<Variable<T>>,
    strides: Vec<usize>,
    /// `(C, H, W)` entering each encoder conv layer, then its output.
    shapes: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: &EncoderConfig, latent_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let shapes = config.layer_shapes()?;
        let flat = config.flat_dim()?;
        let fc_w = Variable::uniform("decoder.fc.weight", &[flat, latent_dim], linear_bound(latent_dim), rng);
        let fc_b = Variable::zeros("decoder.fc.bias", &[flat]);
        let mut deconv_w = Vec::new();
        let mut deconv_b = Vec::new();
        for (i, c) in config.convs.iter().enumerate() {
            let (in_c, out_c) = (shapes[i].0, shapes[i + 1].0);
            let fan_in = out_c * c.kernel * c.kernel;
            deconv_w.push(Variable::uniform(
                format!("decoder.deconv{i}.weight"),
                &[out_c, in_c, c.kernel, c.kernel],
                linear_bound(fan_in),
                rng,
            ));
            deconv_b.push(Variable::zeros(format!("decoder.deconv{i}.bias"), &[in_c]));
        }
        Ok(Self {
            fc_w,
            fc_b,
            deconv_w,
            deconv_b,
            strides: config.convs.iter().map(|c| c.stride).collect(),
            shapes,
        })
    }

    /// `[B, latent] -> [B, C, H, W]` with values in `(0, 1)`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = z.shape()[0];
        let last = *self.shapes.last().expect("encoder has layers");
        let mut h = z
            .affine(tape.bind(&self.fc_w), tape.bind(&self.fc_b))?
            .relu()
            .reshape(&[b, last.0, last.1, last.2])?;
        for i in (0..self.deconv_w.len()).rev() {
            let (_, oh, ow) = self.shapes[i];
            h = h.conv_transpose2d(
                tape.bind(&self.deconv_w[i]),
                tape.bind(&self.deconv_b[i]),
                self.strides[i],
                (oh, ow),
            )?;
            h = if i == 0 { h.sigmoid() } else { h.relu() };
        }
        Ok(h)
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        let mut v = vec![&self.fc_w, &self.fc_b];
        for (w, b) in self.deconv_w.iter().zip(&self.deconv_b) {
            v.push(w);
            v.push(b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        let mut v = vec![&mut self.fc_w, &mut self.fc_b];
        for (w, b) in self.deconv_w.iter_mut().zip(self.deconv_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v
    }
}

/// A dense layer `x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Variable<T>,
    pub bias: Variable<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Variable::uniform(format!("{name}.weight"), &[fan_out, fan_in], linear_bound(fan_in), rng),
            bias: Variable::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.affine(tape.bind(&self.weight), tape.bind(&self.bias))
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Gated recurrent unit summarizing a sequence of feature vectors.
#[derive(Clone, Debug)]
pub struct Gru<T: Scalar = f32> {
    input: [Linear<T>; 3],
    hidden: [Variable<T>; 3],
    hidden_dim: usize,
}

impl<T: Scalar> Gru<T> {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut lin = |g: &str| Linear::new(&format!("gru.{g}"), input_dim, hidden_dim, rng);
        let input = [lin("update"), lin("reset"), lin("candidate")];
        let b = linear_bound(hidden_dim);
        let hidden = ["update", "reset", "candidate"]
            .map(|g| Variable::uniform(format!("gru.{g}.recurrent"), &[hidden_dim, hidden_dim], b, rng));
        Self {
            input,
            hidden,
            hidden_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// One step: `h' = h + z ⊙ (tanh(x·W_hᵀ + (r ⊙ h)·U_hᵀ + b_h) − h)`.
    pub fn step<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let gate = |i: usize, hh: Var<'t, T>| -> Result<Var<'t, T>> {
            self.input[i].forward(tape, x)?.add(hh.matmul_nt(tape.bind(&self.hidden[i]))?)
        };
        let z = gate(0, h)?.sigmoid();
        let r = gate(1, h)?.sigmoid();
        let cand = gate(2, r.mul(h)?)?.tanh();
        h.add(z.mul(cand.sub(h)?)?)
    }
}

impl<T: Scalar> Parameterized<T> for Gru<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        let mut v = Vec::new();
        for (l, u) in self.input.iter().zip(&self.hidden) {
            v.extend(l.params());
            v.push(u);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        let mut v = Vec::new();
        for (l, u) in self.input.iter_mut().zip(self.hidden.iter_mut()) {
            v.extend(l.params_mut());
            v.push(u);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub enum Aggregator<T: Scalar = f32> {
    Gru(Gru<T>),
    /// `c_t = z_t`
    Identity,
}

impl<T: Scalar> Aggregator<T> {
    /// Context vectors `c_0..c_{n-1}` for the per-step inputs `xs`.
    pub fn contexts<'t>(&self, tape: &'t Tape<T>, xs: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        match self {
            Aggregator::Identity => Ok(xs.to_vec()),
            Aggregator::Gru(g) => {
                let b = xs.first().map_or(0, |x| x.shape()[0]);
                if b == 0 {
                    return Ok(Vec::new());
                }
                let mut h = tape.constant(Tensor::zeros(&[b, g.hidden_dim()]));
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    h = g.step(tape, x, h)?;
                    out.push(h);
                }
                Ok(out)
            }
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Aggregator::Identity => input_dim,
            Aggregator::Gru(g) => g.hidden_dim(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Aggregator<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        match self {
            Aggregator::Identity => Vec::new(),
            Aggregator::Gru(g) => g.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        match self {
            Aggregator::Identity => Vec::new(),
            Aggregator::Gru(g) => g.params_mut(),
        }
    }
}

/// One 256-way linear classifier per state variable.
#[derive(Clone, Debug)]
pub struct ProbeHeads<T: Scalar = f32> {
    pub names: Vec<String>,
    pub heads: Vec<Linear<T>>,
}

pub const PROBE_CLASSES: usize = 256;

impl<T: Scalar> ProbeHeads<T> {
    pub fn new(names: &[String], feature_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            names: names.to_vec(),
            heads: names
                .iter()
                .map(|n| Linear::new(&format!("probe.{n}"), feature_dim, PROBE_CLASSES, rng))
                .collect(),
        }
    }

    pub fn logits<'t>(&self, tape: &'t Tape<T>, features: Var<'t, T>) -> Result<Vec<(String, Var<'t, T>)>> {
        if self.heads.is_empty() {
            return Err(Error::Contract("no probe heads".into()));
        }
        self.names
            .iter()
            .zip(&self.heads)
            .map(|(n, h)| Ok((n.clone(), h.forward(tape, features)?)))
            .collect()
    }
}

impl<T: Scalar> Parameterized<T> for ProbeHeads<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        self.heads.iter().flat_map(|h| h.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        self.heads.iter_mut().flat_map(|h| h.params_mut()).collect()
    }
}

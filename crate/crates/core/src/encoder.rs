//! The shared convolutional encoder.
//!
//! Every method uses the same stack: valid convolutions with relu, then one
//! affine layer producing the global feature vector. The activations of one
//! chosen convolutional layer double as the grid of local feature vectors.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::params::{Parameterized, Variable};
use crate::tensor::{Scalar, Tensor};

/// Largest local receptive field, as a fraction of the frame area.
pub const MAX_LOCAL_RF_FRACTION: f64 = 1.0 / 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub convs: Vec<ConvSpec>,
    /// Index into `convs` of the layer whose activations are the local features.
    pub local_layer: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 1,
            convs: vec![
                ConvSpec {
                    channels: 32,
                    kernel: 8,
                    stride: 4,
                },
                ConvSpec {
                    channels: 64,
                    kernel: 4,
                    stride: 2,
                },
                ConvSpec {
                    channels: 64,
                    kernel: 3,
                    stride: 1,
                },
            ],
            local_layer: 0,
            feature_dim: 256,
            seed: 0,
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.bottom - self.top + 1) * (self.right - self.left + 1)
    }
}

impl EncoderConfig {
    /// A small geometry for 16×16 frames, used by gradient checks.
    pub fn tiny(feature_dim: usize, seed: u64) -> Self {
        Self {
            height: 16,
            width: 16,
            in_channels: 1,
            convs: vec![
                ConvSpec {
                    channels: 4,
                    kernel: 4,
                    stride: 2,
                },
                ConvSpec {
                    channels: 6,
                    kernel: 3,
                    stride: 2,
                },
            ],
            local_layer: 0,
            feature_dim,
            seed,
        }
    }

    /// `(channels, height, width)` of the input followed by each conv output.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![(self.in_channels, self.height, self.width)];
        for (i, c) in self.convs.iter().enumerate() {
            let &(_, h, w) = shapes.last().expect("non-empty");
            let oh = ConvGeom::valid_extent(h, c.kernel, c.stride).ok_or_else(|| {
                Error::Config(format!("conv layer {i}: kernel {} does not fit height {h}", c.kernel))
            })?;
            let ow = ConvGeom::valid_extent(w, c.kernel, c.stride).ok_or_else(|| {
                Error::Config(format!("conv layer {i}: kernel {} does not fit width {w}", c.kernel))
            })?;
            if c.channels == 0 {
                return Err(Error::Config(format!("conv layer {i}: zero channels")));
            }
            shapes.push((c.channels, oh, ow));
        }
        Ok(shapes)
    }

    /// `(size, jump)` of the receptive field of layer `layer`'s units.
    fn rf_params(&self, layer: usize) -> (usize, usize) {
        let (mut size, mut jump) = (1usize, 1usize);
        for c in &self.convs[..=layer] {
            size += (c.kernel - 1) * jump;
            jump *= c.stride;
        }
        (size, jump)
    }

    /// Fraction of the frame covered by one local unit's receptive field.
    pub fn local_rf_fraction(&self) -> f64 {
        let (size, _) = self.rf_params(self.local_layer);
        let h = size.min(self.height);
        let w = size.min(self.width);
        (h * w) as f64 / (self.height * self.width) as f64
    }

    pub fn local_grid(&self) -> Result<(usize, usize, usize)> {
        let shapes = self.layer_shapes()?;
        let (c, h, w) = shapes[self.local_layer + 1];
        Ok((h, w, c))
    }

    /// Width of the flattened last conv layer.
    pub fn flat_dim(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let (c, h, w) = *shapes.last().expect("non-empty");
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.convs.is_empty() {
            return Err(Error::Config("encoder needs at least one conv layer".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.local_layer >= self.convs.len() {
            return Err(Error::Config(format!(
                "local_layer {} out of range for {} conv layers",
                self.local_layer,
                self.convs.len()
            )));
        }
        if self.convs.iter().any(|c| c.stride == 0 || c.kernel == 0) {
            return Err(Error::Config("kernels and strides must be positive".into()));
        }
        self.layer_shapes()?;
        let frac = self.local_rf_fraction();
        if frac > MAX_LOCAL_RF_FRACTION + 1e-9 {
            return Err(Error::Config(format!(
                "local layer {} receptive field covers {:.4} of the frame (limit {:.4})",
                self.local_layer, frac, MAX_LOCAL_RF_FRACTION
            )));
        }
        Ok(())
    }

    /// Input rectangle seen by local unit `(m, n)`.
    pub fn receptive_field(&self, m: usize, n: usize) -> Result<PixelRect> {
        let (gh, gw, _) = self.local_grid()?;
        if m >= gh {
            return Err(Error::Index {
                op: "receptive_field",
                index: m,
                bound: gh,
            });
        }
        if n >= gw {
            return Err(Error::Index {
                op: "receptive_field",
                index: n,
                bound: gw,
            });
        }
        let (size, jump) = self.rf_params(self.local_layer);
        Ok(PixelRect {
            top: m * jump,
            left: n * jump,
            bottom: (m * jump + size - 1).min(self.height - 1),
            right: (n * jump + size - 1).min(self.width - 1),
        })
    }

    /// Canonical `key = value` lines.
    pub fn to_kv(&self) -> String {
        let join = |f: fn(&ConvSpec) -> usize| {
            self.convs
                .iter()
                .map(|c| f(c).to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "encoder.height = {}", self.height);
        let _ = writeln!(s, "encoder.width = {}", self.width);
        let _ = writeln!(s, "encoder.in_channels = {}", self.in_channels);
        let _ = writeln!(s, "encoder.channels = {}", join(|c| c.channels));
        let _ = writeln!(s, "encoder.kernels = {}", join(|c| c.kernel));
        let _ = writeln!(s, "encoder.strides = {}", join(|c| c.stride));
        let _ = writeln!(s, "encoder.local_layer = {}", self.local_layer);
        let _ = writeln!(s, "encoder.feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "encoder.seed = {}", self.seed);
        s
    }

    /// Parses the output of [`EncoderConfig::to_kv`]; unrelated keys are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = EncoderConfig::default();
        let (mut ch, mut ks, mut st) = (None, None, None);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format("encoder config", format!("line `{line}` has no `=`")));
            };
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| Error::format("encoder config", format!("`{k}` is not an integer: `{v}`")))
            };
            let list = |v: &str| -> Result<Vec<usize>> {
                v.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::format("encoder config", format!("bad list `{v}`")))
                    })
                    .collect()
            };
            match k {
                "encoder.height" => cfg.height = num(v)? as usize,
                "encoder.width" => cfg.width = num(v)? as usize,
                "encoder.in_channels" => cfg.in_channels = num(v)? as usize,
                "encoder.channels" => ch = Some(list(v)?),
                "encoder.kernels" => ks = Some(list(v)?),
                "encoder.strides" => st = Some(list(v)?),
                "encoder.local_layer" => cfg.local_layer = num(v)? as usize,
                "encoder.feature_dim" => cfg.feature_dim = num(v)? as usize,
                "encoder.seed" => cfg.seed = num(v)?,
                _ => {}
            }
        }
        if ch.is_some() || ks.is_some() || st.is_some() {
            let ch = ch.unwrap_or_else(|| cfg.convs.iter().map(|c| c.channels).collect());
            let ks = ks.unwrap_or_else(|| cfg.convs.iter().map(|c| c.kernel).collect());
            let st = st.unwrap_or_else(|| cfg.convs.iter().map(|c| c.stride).collect());
            if ch.len() != ks.len() || ch.len() != st.len() {
                return Err(Error::Config("encoder channels/kernels/strides lengths differ".into()));
            }
            cfg.convs = ch
                .into_iter()
                .zip(ks)
                .zip(st)
                .map(|((channels, kernel), stride)| ConvSpec {
                    channels,
                    kernel,
                    stride,
                })
                .collect();
        }
        Ok(cfg)
    }
}

/// Per-frame encoder output outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation<T: Scalar = f32> {
    pub global: Vec<T>,
    /// `grid_h × grid_w × local_dim`, row-major.
    pub local: Vec<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub local_dim: usize,
}

impl<T: Scalar> Representation<T> {
    pub fn local_at(&self, m: usize, n: usize) -> &[T] {
        let i = (m * self.grid_w + n) * self.local_dim;
        &self.local[i..i + self.local_dim]
    }
}

/// Encoder output on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t, T: Scalar> {
    /// `[B, F]`
    pub global: Var<'t, T>,
    /// `[M·N, B, d_l]`
    pub local: Var<'t, T>,
    /// Flattened last conv activation, `[B, D]`.
    pub flat: Var<'t, T>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar = f32> {
    config: EncoderConfig,
    conv_w: Vec<Variable<T>>,
    conv_b: Vec<Variable<T>>,
    fc_w: Variable<T>,
    fc_b: Variable<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Builds and initializes an encoder; parameters depend only on `config`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.layer_shapes()?;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for (i, c) in config.convs.iter().enumerate() {
            let in_c = shapes[i].0;
            let fan_in = in_c * c.kernel * c.kernel;
            conv_w.push(Variable::uniform(
                format!("encoder.conv{i}.weight"),
                &[c.channels, in_c, c.kernel, c.kernel],
                (6.0 / fan_in as f64).sqrt(),
                &mut rng,
            ));
            conv_b.push(Variable::zeros(format!("encoder.conv{i}.bias"), &[c.channels]));
        }
        let flat = config.flat_dim()?;
        let fc_w = Variable::uniform(
            "encoder.fc.weight",
            &[config.feature_dim, flat],
            (3.0 / flat as f64).sqrt(),
            &mut rng,
        );
        let fc_b = Variable::zeros("encoder.fc.bias", &[config.feature_dim]);
        Ok(Self {
            config,
            conv_w,
            conv_b,
            fc_w,
            fc_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// `(M, N, d_l)`
    pub fn local_grid(&self) -> (usize, usize, usize) {
        self.config.local_grid().expect("validated at construction")
    }

    pub fn flat_dim(&self) -> usize {
        self.config.flat_dim().expect("validated at construction")
    }

    /// Parameter checkpoint whose metadata block is the config's `to_kv` text.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self.config.to_kv(), self)
    }

    /// Rebuilds an encoder from [`Encoder::to_checkpoint`] output.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut enc = Self::new(EncoderConfig::from_kv(&ckpt.metadata)?)?;
        ckpt.load_into(&mut enc)?;
        Ok(enc)
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable())
    }

    /// Records the encoder on `tape` for `frames: [B, C, H, W]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, frames: Var<'t, T>) -> Result<Encoded<'t, T>> {
        let shape = frames.shape();
        let want = [self.config.in_channels, self.config.height, self.config.width];
        if shape.len() != 4 {
            return Err(Error::shape("encode", format!("frames must be B×C×H×W, got {shape:?}")));
        }
        for (axis, (&got, &exp)) in ["channels", "height", "width"].iter().zip(shape[1..].iter().zip(&want)) {
            if got != exp {
                return Err(Error::dim("encode", *axis, exp, got));
            }
        }
        let batch = shape[0];
        let mut h = frames;
        let mut local = None;
        for (i, c) in self.config.convs.iter().enumerate() {
            h = h
                .conv2d(tape.bind(&self.conv_w[i]), tape.bind(&self.conv_b[i]), c.stride)?
                .relu();
            if i == self.config.local_layer {
                local = Some(h);
            }
        }
        let local_act = local.expect("local layer validated");
        let s = local_act.shape();
        let grid = (s[2], s[3]);
        let flat = h.reshape(&[batch, self.flat_dim()])?;
        let global = flat.affine(tape.bind(&self.fc_w), tape.bind(&self.fc_b))?;
        Ok(Encoded {
            global,
            local: local_act.location_major()?,
            flat,
            grid,
        })
    }

    /// Global features for many frames, computed in chunks without gradients.
    pub fn features(&self, frames: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = frames.dim(0);
        let mut out = Vec::with_capacity(n * self.feature_dim());
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let tape = Tape::new();
            let x = tape.constant(frames.slice_outer(start, len)?);
            let enc = self.forward_frozen(&tape, x)?;
            out.extend_from_slice(enc.global.value().data());
            start += len;
        }
        Tensor::new(&[n, self.feature_dim()], out)
    }

    /// Per-frame representations (global vector and local grid).
    pub fn represent(&self, frames: &Tensor<T>) -> Result<Vec<Representation<T>>> {
        let tape = Tape::new();
        let enc = self.forward_frozen(&tape, tape.constant(frames.clone()))?;
        let (gh, gw, d) = self.local_grid();
        let g = enc.global.value();
        let l = enc.local.value();
        let b = frames.dim(0);
        Ok((0..b)
            .map(|i| {
                let mut local = Vec::with_capacity(gh * gw * d);
                for p in 0..gh * gw {
                    local.extend_from_slice(&l.data()[(p * b + i) * d..(p * b + i + 1) * d]);
                }
                Representation {
                    global: g.row(i).to_vec(),
                    local,
                    grid_h: gh,
                    grid_w: gw,
                    local_dim: d,
                }
            })
            .collect())
    }

    /// Forward pass with every parameter entering as a constant.
    fn forward_frozen<'t>(&self, tape: &'t Tape<T>, frames: Var<'t, T>) -> Result<Encoded<'t, T>> {
        let mut frozen = self.clone();
        frozen.freeze();
        frozen.forward(tape, frames)
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        let mut v: Vec<&Variable<T>> = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.push(w);
            v.push(b);
        }
        v.push(&self.fc_w);
        v.push(&self.fc_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        let mut v: Vec<&mut Variable<T>> = Vec::new();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.fc_w);
        v.push(&mut self.fc_b);
        v
    }
}

//! Encoder `f` and projector `g`.
//!
//! The encoder is a strided conv stem followed by three residual blocks.
//! Its last feature map is average-pooled to a `(d / width, 1)` grid and
//! flattened, so the latent width is exactly `d` for any input shape fixed
//! at construction.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::{Graph, NormStats, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Whether batchnorm uses batch statistics (and updates running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `2C` feature channels.
    pub in_channels: usize,
    pub bins: usize,
    pub frames: usize,
    /// Stem width followed by the three block widths.
    pub widths: [usize; 4],
    pub kernel: usize,
    /// Latent width `d`.
    pub latent_dim: usize,
    /// Projection width `m`.
    pub projection_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Default architecture for a given feature shape.
    pub fn for_features(in_channels: usize, bins: usize, frames: usize) -> Self {
        ModelConfig {
            in_channels,
            bins,
            frames,
            widths: [8, 16, 32, 64],
            kernel: 3,
            latent_dim: 128,
            projection_dim: 128,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
        (n + 2 * pad).saturating_sub(k) / stride + 1
    }

    /// Spatial size of the last feature map.
    pub fn final_grid(&self) -> (usize, usize) {
        let (k, p) = (self.kernel, self.kernel / 2);
        let mut hw = (self.bins, self.frames);
        for _ in 0..4 {
            hw = (Self::conv_out(hw.0, k, 2, p), Self::conv_out(hw.1, k, 2, p));
        }
        hw
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::param("channel counts must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::param(format!("kernel {} must be odd", self.kernel)));
        }
        if self.projection_dim == 0 {
            return Err(Error::param("projection width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::param("batchnorm momentum must lie in [0, 1] and eps be positive"));
        }
        let last = self.widths[3];
        if self.latent_dim == 0 || self.latent_dim % last != 0 {
            return Err(Error::param(format!(
                "latent width {} must be a positive multiple of the last block width {last}",
                self.latent_dim
            )));
        }
        let (h, _) = self.final_grid();
        if self.bins < self.kernel || self.frames < self.kernel || self.latent_dim / last > h {
            return Err(Error::param(format!(
                "feature map {}x{} is too small for latent width {}",
                self.bins, self.frames, self.latent_dim
            )));
        }
        Ok(())
    }
}

fn kaiming<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape, data).unwrap()
}

fn uniform_fan_in<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-b, b).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect()).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Conv2d {
            weight: kaiming(&[c_out, c_in, k, k], c_in * k * k, rng),
            stride,
            pad: k / 2,
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(self.weight.clone());
        g.conv2d(x, w, self.stride, self.pad).map_err(|e| rename(e, name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNorm<T> {
    fn new(c: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::one()),
            momentum: T::lit(momentum),
            eps: T::lit(eps),
        }
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode, name: &str) -> Result<Var> {
        let gamma = g.param(self.gamma.clone());
        let beta = g.param(self.beta.clone());
        let (y, stats) = match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, NormStats::Batch, self.eps),
            Mode::Eval => g.batch_norm(
                x,
                gamma,
                beta,
                NormStats::Running {
                    mean: self.running_mean.data(),
                    var: self.running_var.data(),
                },
                self.eps,
            ),
        }
        .map_err(|e| rename(e, name))?;
        if let Some(s) = stats {
            let m = self.momentum;
            let n = T::from_usize(s.count).unwrap();
            let unbias = if s.count > 1 { n / (n - T::one()) } else { T::one() };
            for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in self.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
        Ok(y)
    }
}

fn rename(e: Error, layer: &str) -> Error {
    match e {
        Error::Shape { message, .. } => Error::Shape {
            layer: layer.to_string(),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Real> ResidualBlock<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (k, mom, eps) = (cfg.kernel, cfg.bn_momentum, cfg.bn_eps);
        ResidualBlock {
            conv1: Conv2d::new(c_in, c_out, k, 2, rng),
            bn1: BatchNorm::new(c_out, mom, eps),
            conv2: Conv2d::new(c_out, c_out, k, 1, rng),
            bn2: BatchNorm::new(c_out, mom, eps),
            // Strided blocks always change shape, hence a projection shortcut.
            shortcut: Some((Conv2d::new(c_in, c_out, 1, 2, rng), BatchNorm::new(c_out, mom, eps))),
        }
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode, name: &str) -> Result<Var> {
        let y = self.conv1.forward(g, x, &format!("{name}.conv1"))?;
        let y = self.bn1.forward(g, y, mode, &format!("{name}.bn1"))?;
        let y = g.elu(y);
        let y = self.conv2.forward(g, y, &format!("{name}.conv2"))?;
        let y = self.bn2.forward(g, y, mode, &format!("{name}.bn2"))?;
        let s = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x, &format!("{name}.shortcut"))?;
                bn.forward(g, s, mode, &format!("{name}.shortcut_bn"))?
            }
            None => x,
        };
        let sum = g.add(y, s).map_err(|e| rename(e, name))?;
        Ok(g.elu(sum))
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.conv1.weight, &self.bn1.gamma, &self.bn1.beta];
        v.extend([&self.conv2.weight, &self.bn2.gamma, &self.bn2.beta]);
        if let Some((c, b)) = &self.shortcut {
            v.extend([&c.weight, &b.gamma, &b.beta]);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.conv1.weight, &mut self.bn1.gamma, &mut self.bn1.beta];
        v.extend([&mut self.conv2.weight, &mut self.bn2.gamma, &mut self.bn2.beta]);
        if let Some((c, b)) = &mut self.shortcut {
            v.extend([&mut c.weight, &mut b.gamma, &mut b.beta]);
        }
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, b)) = &mut self.shortcut {
            v.push(b);
        }
        v
    }
}

/// Convolutional encoder `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        Ok(Encoder {
            config: config.clone(),
            stem: Conv2d::new(config.in_channels, w[0], config.kernel, 2, rng),
            stem_bn: BatchNorm::new(w[0], config.bn_momentum, config.bn_eps),
            blocks: (0..3).map(|i| ResidualBlock::new(w[i], w[i + 1], config, rng)).collect(),
        })
    }

    /// Latent batch `[B, d]` from features `[B, 2C, F, T]`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let c = &self.config;
        match *g.value(x).shape() {
            [b, ch, f, t] if b > 0 && ch == c.in_channels && f == c.bins && t == c.frames => {}
            ref s => {
                return Err(Error::shape(
                    "encoder.input",
                    format!(
                        "expected [B, {}, {}, {}], got {s:?}",
                        c.in_channels, c.bins, c.frames
                    ),
                ))
            }
        }
        let batch = g.value(x).shape()[0];
        let (d, last) = (c.latent_dim, c.widths[3]);
        let y = self.stem.forward(g, x, "encoder.stem")?;
        let y = self.stem_bn.forward(g, y, mode, "encoder.stem_bn")?;
        let mut y = g.elu(y);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            y = block.forward(g, y, mode, &format!("encoder.block{}", i + 1))?;
        }
        let y = g.avg_pool(y, d / last, 1).map_err(|e| rename(e, "encoder.pool"))?;
        g.reshape(y, &[batch, d])
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.stem.weight, &self.stem_bn.gamma, &self.stem_bn.beta];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem_bn.gamma, &mut self.stem_bn.beta];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            v.extend(b.norms_mut());
        }
        v
    }

    /// Running means and variances, in a fixed order.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut norms = vec![&self.stem_bn];
        for b in &self.blocks {
            norms.extend([&b.bn1, &b.bn2]);
            if let Some((_, bn)) = &b.shortcut {
                norms.push(bn);
            }
        }
        norms
            .into_iter()
            .flat_map(|bn| [&bn.running_mean, &bn.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.norms_mut()
            .into_iter()
            .flat_map(|bn| [&mut bn.running_mean, &mut bn.running_var])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform_fan_in(&[d_out, d_in], d_in, rng),
            bias: uniform_fan_in(&[d_out], d_in, rng),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(self.weight.clone());
        let b = g.param(self.bias.clone());
        g.linear(x, w, b).map_err(|e| rename(e, name))
    }
}

/// Two-layer projector `g` onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Projector<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Self {
        Projector {
            fc1: Linear::new(d, d, rng),
            fc2: Linear::new(d, m, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let y = self.fc1.forward(g, h, "projector.fc1")?;
        let y = g.relu(y);
        let y = self.fc2.forward(g, y, "projector.fc2")?;
        g.normalize_rows(y)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

/// Encoder plus projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub encoder: Encoder<T>,
    pub projector: Projector<T>,
}

/// Graph handles produced by [`Network::forward`].
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub latent: Var,
    pub projection: Var,
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let projector = Projector::new(config.latent_dim, config.projection_dim, rng);
        Ok(Network { encoder, projector })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    /// Parameters are registered on `g` in [`Network::params`] order.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<NetOutput> {
        let latent = self.encoder.forward(g, x, mode)?;
        let projection = self.projector.forward(g, latent)?;
        Ok(NetOutput { latent, projection })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.encoder.params();
        v.extend(self.projector.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.projector.params_mut());
        v
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.encoder.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.encoder.buffers_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Same network with another element type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        fn conv<T: Real, U: Real>(c: &Conv2d<T>) -> Conv2d<U> {
            Conv2d {
                weight: c.weight.cast(),
                stride: c.stride,
                pad: c.pad,
            }
        }
        fn bn<T: Real, U: Real>(b: &BatchNorm<T>) -> BatchNorm<U> {
            BatchNorm {
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                momentum: U::from_f64(b.momentum.to_f64().unwrap()).unwrap(),
                eps: U::from_f64(b.eps.to_f64().unwrap()).unwrap(),
            }
        }
        fn lin<T: Real, U: Real>(l: &Linear<T>) -> Linear<U> {
            Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }
        }
        let e = &self.encoder;
        Network {
            encoder: Encoder {
                config: e.config.clone(),
                stem: conv(&e.stem),
                stem_bn: bn(&e.stem_bn),
                blocks: e
                    .blocks
                    .iter()
                    .map(|b| ResidualBlock {
                        conv1: conv(&b.conv1),
                        bn1: bn(&b.bn1),
                        conv2: conv(&b.conv2),
                        bn2: bn(&b.bn2),
                        shortcut: b.shortcut.as_ref().map(|(c, n)| (conv(c), bn(n))),
                    })
                    .collect(),
            },
            projector: Projector {
                fc1: lin(&self.projector.fc1),
                fc2: lin(&self.projector.fc2),
            },
        }
    }
}

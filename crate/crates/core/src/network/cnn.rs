use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    self, check_finite, conv2d, conv2d_backward, embed, embed_backward, maxpool1d_channels,
    maxpool1d_channels_backward, pbc_pad_2d, pbc_pad_2d_backward, product_head, product_head_backward,
    tconv1d_channels, tconv1d_channels_backward, ConvShape, Tensor3,
};
use super::{Amplitude, Differentiable, NetworkError, Wavefunction};
use crate::lattice::{marshall_sign, Configuration, LatticeGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Raw spins in; blocks of conv, channel max-pool (stride = kernel) and
    /// stride-k transposed convolution.
    #[serde(rename = "cnn1")]
    Cnn1,
    /// Embedded tokens in; blocks of conv and circular stride-one channel max-pool.
    #[serde(rename = "cnn2")]
    Cnn2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub arch: Architecture,
    pub n_blocks: usize,
    pub channels: usize,
    pub conv_kernel: [usize; 2],
    pub pool_kernel: usize,
    pub embedding_dim: usize,
    /// Kernel of the final convolution reducing the channels to one.
    pub head_kernel: [usize; 2],
    pub seed: u64,
    pub kernel_scale: f64,
    pub bias_init: f64,
    pub embedding_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Cnn1,
            n_blocks: 6,
            channels: 8,
            conv_kernel: [3, 3],
            pool_kernel: 2,
            embedding_dim: 4,
            head_kernel: [1, 1],
            seed: 1,
            kernel_scale: 0.05,
            bias_init: 1.0,
            embedding_scale: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn cnn1(n_blocks: usize, channels: usize) -> Self {
        Self {
            n_blocks,
            channels,
            ..Self::default()
        }
    }

    pub fn cnn2(n_blocks: usize, channels: usize, embedding_dim: usize) -> Self {
        Self {
            arch: Architecture::Cnn2,
            n_blocks,
            channels,
            embedding_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.n_blocks == 0 || self.channels == 0 {
            return bad("need at least one block and one channel".into());
        }
        for (name, k) in [("conv", self.conv_kernel), ("head", self.head_kernel)] {
            if k[0] == 0 || k[1] == 0 || k[0] % 2 == 0 || k[1] % 2 == 0 {
                return bad(format!("{name} kernel {k:?} must have odd positive extents"));
            }
        }
        if self.pool_kernel == 0 || self.pool_kernel > self.channels {
            return bad(format!(
                "pool kernel {} on {} channels",
                self.pool_kernel, self.channels
            ));
        }
        if self.arch == Architecture::Cnn1 && !self.channels.is_multiple_of(self.pool_kernel) {
            return Err(NetworkError::IndivisibleChannels {
                channels: self.channels,
                kernel: self.pool_kernel,
            });
        }
        if self.arch == Architecture::Cnn2 && self.embedding_dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(self.kernel_scale.is_finite() && self.bias_init.is_finite() && self.embedding_scale.is_finite()) {
            return bad("non-finite initialization scale".into());
        }
        Ok(())
    }

    /// True when two configurations describe the same parameter layout.
    pub fn same_architecture(&self, other: &NetworkConfig) -> bool {
        self.arch == other.arch
            && self.n_blocks == other.n_blocks
            && self.channels == other.channels
            && self.conv_kernel == other.conv_kernel
            && self.pool_kernel == other.pool_kernel
            && self.head_kernel == other.head_kernel
            && (self.arch == Architecture::Cnn1 || self.embedding_dim == other.embedding_dim)
    }
}

/// Flat double-precision parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    conv: ConvShape,
    conv_w: usize,
    conv_b: usize,
    /// Offset of the transposed-convolution kernel (CNN1 only).
    tconv: Option<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Option<usize>,
    blocks: Vec<BlockLayout>,
    head: ConvShape,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut offset = 0;
        let mut take = |n: usize| {
            let at = offset;
            offset += n;
            at
        };
        let (embed, mut c_in) = match cfg.arch {
            Architecture::Cnn1 => (None, 1),
            Architecture::Cnn2 => (Some(take(3 * cfg.embedding_dim)), cfg.embedding_dim),
        };
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let conv = ConvShape {
                kh: cfg.conv_kernel[0],
                kw: cfg.conv_kernel[1],
                c_in,
                c_out: cfg.channels,
            };
            let conv_w = take(conv.n_weights());
            let conv_b = take(cfg.channels);
            let tconv = (cfg.arch == Architecture::Cnn1).then(|| take(cfg.pool_kernel));
            blocks.push(BlockLayout {
                conv,
                conv_w,
                conv_b,
                tconv,
            });
            c_in = cfg.channels;
        }
        let head = ConvShape {
            kh: cfg.head_kernel[0],
            kw: cfg.head_kernel[1],
            c_in,
            c_out: 1,
        };
        let head_w = take(head.n_weights());
        let head_b = take(1);
        Self {
            embed,
            blocks,
            head,
            head_w,
            head_b,
            total: offset,
        }
    }
}

/// Intermediate tensors of one forward pass, kept for the backward pass.
struct Tape {
    blocks: Vec<BlockTape>,
    head_in: Tensor3,
    head_padded: Tensor3,
    features: Tensor3,
}

struct BlockTape {
    input: Tensor3,
    padded: Tensor3,
    pooled: Tensor3,
    argmax: Vec<u32>,
    conv_channels: usize,
}

/// A CNN architecture with its parameter layout; lattice-size independent.
#[derive(Debug, Clone)]
pub struct Cnn {
    cfg: NetworkConfig,
    layout: Layout,
}

impl Cnn {
    pub fn new(cfg: NetworkConfig) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Number of parameters `R`.
    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Deterministic initial parameters drawn from `cfg.seed`.
    pub fn init_params(&self) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let scale = self.cfg.kernel_scale;
        let mut theta = vec![0.0; self.layout.total];
        let mut uniform = |slot: &mut [f64], centre: f64, half: f64| {
            for v in slot {
                *v = if half > 0.0 {
                    centre + rng.random_range(-half..half)
                } else {
                    centre
                };
            }
        };
        if let Some(e) = self.layout.embed {
            uniform(
                &mut theta[e..e + 3 * self.cfg.embedding_dim],
                0.0,
                self.cfg.embedding_scale,
            );
        }
        for b in &self.layout.blocks {
            uniform(&mut theta[b.conv_w..b.conv_w + b.conv.n_weights()], 0.0, scale);
            uniform(&mut theta[b.conv_b..b.conv_b + b.conv.c_out], self.cfg.bias_init, 0.0);
            if let Some(t) = b.tconv {
                uniform(&mut theta[t..t + self.cfg.pool_kernel], 1.0, scale);
            }
        }
        let hw = self.layout.head_w;
        uniform(&mut theta[hw..hw + self.layout.head.n_weights()], 0.0, scale);
        theta[self.layout.head_b] = self.cfg.bias_init;
        ParameterVector(theta)
    }

    fn check_params(&self, theta: &[f64]) -> Result<(), NetworkError> {
        if theta.len() != self.layout.total {
            return Err(NetworkError::ParameterCount {
                expected: self.layout.total,
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn run(&self, theta: &[f64], s: &Configuration, h: usize, w: usize) -> Result<Tape, NetworkError> {
        self.check_params(theta)?;
        let cfg = &self.cfg;
        let mut x = match self.layout.embed {
            None => layers::site_values(s, h, w)?,
            Some(e) => embed(s, h, w, &theta[e..e + 3 * cfg.embedding_dim], cfg.embedding_dim)?,
        };
        let (ph, pw) = (cfg.conv_kernel[0] / 2, cfg.conv_kernel[1] / 2);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for b in &self.layout.blocks {
            let padded = pbc_pad_2d(&x, ph, pw)?;
            let conv = conv2d(
                &padded,
                b.conv,
                &theta[b.conv_w..b.conv_w + b.conv.n_weights()],
                &theta[b.conv_b..b.conv_b + b.conv.c_out],
            )?;
            let (pooled, argmax, next) = match b.tconv {
                Some(t) => {
                    let k = cfg.pool_kernel;
                    let (pooled, argmax) = maxpool1d_channels(&conv, k, k, false)?;
                    let next = tconv1d_channels(&pooled, &theta[t..t + k])?;
                    (pooled, argmax, next)
                }
                None => {
                    let (pooled, argmax) = maxpool1d_channels(&conv, cfg.pool_kernel, 1, true)?;
                    let next = pooled.clone();
                    (pooled, argmax, next)
                }
            };
            check_finite(&next, "block")?;
            blocks.push(BlockTape {
                input: std::mem::replace(&mut x, next),
                padded,
                pooled,
                argmax,
                conv_channels: conv.c,
            });
        }
        let head = self.layout.head;
        let head_padded = pbc_pad_2d(&x, head.kh / 2, head.kw / 2)?;
        let features = conv2d(
            &head_padded,
            head,
            &theta[self.layout.head_w..self.layout.head_w + head.n_weights()],
            &theta[self.layout.head_b..self.layout.head_b + 1],
        )?;
        check_finite(&features, "head")?;
        Ok(Tape {
            blocks,
            head_in: x,
            head_padded,
            features,
        })
    }

    /// Final-layer neurons whose product is the amplitude.
    pub fn features(&self, theta: &[f64], s: &Configuration, h: usize, w: usize) -> Result<Tensor3, NetworkError> {
        Ok(self.run(theta, s, h, w)?.features)
    }

    /// CNN amplitude without any sign prior.
    pub fn forward(&self, theta: &[f64], s: &Configuration, h: usize, w: usize) -> Result<Amplitude, NetworkError> {
        let features = self.features(theta, s, h, w)?;
        let amp = product_head(&features);
        if amp.sign != 0 && !amp.log_abs.is_finite() {
            return Err(NetworkError::NumericalOverflow("product"));
        }
        Ok(amp)
    }

    pub fn forward_batch(
        &self,
        theta: &[f64],
        batch: &[Configuration],
        h: usize,
        w: usize,
    ) -> Result<Vec<Amplitude>, NetworkError> {
        batch.iter().map(|s| self.forward(theta, s, h, w)).collect()
    }

    /// Writes `∂ ln|W| / ∂θ` into `grad` (overwritten) and returns `W`.
    pub fn backward(
        &self,
        theta: &[f64],
        s: &Configuration,
        h: usize,
        w: usize,
        grad: &mut [f64],
    ) -> Result<Amplitude, NetworkError> {
        let tape = self.run(theta, s, h, w)?;
        let amp = product_head(&tape.features);
        if amp.is_zero() {
            return Err(NetworkError::UndefinedDerivative);
        }
        if grad.len() != self.layout.total {
            return Err(NetworkError::ParameterCount {
                expected: self.layout.total,
                got: grad.len(),
            });
        }
        grad.fill(0.0);
        let cfg = &self.cfg;
        let gf = product_head_backward(&tape.features);
        let head = self.layout.head;
        let (hw, hb) = (self.layout.head_w, self.layout.head_b);
        let (gw, rest) = grad[hw..].split_at_mut(head.n_weights());
        let g_pad = conv2d_backward(
            &tape.head_padded,
            head,
            &theta[hw..hw + head.n_weights()],
            &gf,
            gw,
            &mut rest[hb - hw - head.n_weights()..][..1],
            true,
        )
        .expect("input gradient requested");
        let mut g = pbc_pad_2d_backward(&g_pad, tape.head_in.h, tape.head_in.w, head.kh / 2, head.kw / 2);
        let (ph, pw) = (cfg.conv_kernel[0] / 2, cfg.conv_kernel[1] / 2);
        for (bi, (b, bt)) in self.layout.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let g_pooled = match b.tconv {
                Some(t) => {
                    let k = cfg.pool_kernel;
                    tconv1d_channels_backward(&bt.pooled, &theta[t..t + k], &g, &mut grad[t..t + k])
                }
                None => g,
            };
            let g_conv = maxpool1d_channels_backward(&g_pooled, &bt.argmax, bt.conv_channels);
            let need_input = bi > 0 || self.layout.embed.is_some();
            let (gw, gb) = {
                let (head_part, tail) = grad.split_at_mut(b.conv_b);
                (
                    &mut head_part[b.conv_w..b.conv_w + b.conv.n_weights()],
                    &mut tail[..b.conv.c_out],
                )
            };
            let g_pad = conv2d_backward(
                &bt.padded,
                b.conv,
                &theta[b.conv_w..b.conv_w + b.conv.n_weights()],
                &g_conv,
                gw,
                gb,
                need_input,
            );
            g = match g_pad {
                Some(gp) => pbc_pad_2d_backward(&gp, bt.input.h, bt.input.w, ph, pw),
                None => Tensor3::zeros(0, 0, 0),
            };
        }
        if let Some(e) = self.layout.embed {
            embed_backward(s, &g, &mut grad[e..e + 3 * cfg.embedding_dim]);
        }
        Ok(amp)
    }
}

/// Reuses size-independent parameters on another lattice; only the runtime
/// lattice metadata changes.
pub fn transfer_params(
    source: &NetworkConfig,
    target: &NetworkConfig,
    theta: &ParameterVector,
    geom_small: &LatticeGeometry,
    geom_large: &LatticeGeometry,
) -> Result<ParameterVector, NetworkError> {
    if !source.same_architecture(target) {
        return Err(NetworkError::ArchitectureMismatch(format!("{source:?} vs {target:?}")));
    }
    let cnn = Cnn::new(target.clone())?;
    if theta.len() != cnn.n_params() {
        return Err(NetworkError::ParameterCount {
            expected: cnn.n_params(),
            got: theta.len(),
        });
    }
    for g in [geom_small, geom_large] {
        let (ph, pw) = (target.conv_kernel[0] / 2, target.conv_kernel[1] / 2);
        if ph >= g.ly() || pw >= g.lx() {
            return Err(NetworkError::UnsupportedPad {
                pad: ph.max(pw),
                extent: g.lx().min(g.ly()),
            });
        }
    }
    Ok(theta.clone())
}

/// A CNN with concrete parameters on a concrete lattice.
///
/// With `sign_prior` the Marshall sign multiplies the network amplitude.
#[derive(Debug, Clone)]
pub struct NeuralState {
    cnn: Arc<Cnn>,
    theta: ParameterVector,
    geom: LatticeGeometry,
    sign_prior: bool,
}

impl NeuralState {
    pub fn new(
        cnn: Arc<Cnn>,
        theta: ParameterVector,
        geom: LatticeGeometry,
        sign_prior: bool,
    ) -> Result<Self, NetworkError> {
        cnn.check_params(theta.as_slice())?;
        let (ph, pw) = (cnn.cfg.conv_kernel[0] / 2, cnn.cfg.conv_kernel[1] / 2);
        if ph >= geom.ly() {
            return Err(NetworkError::UnsupportedPad {
                pad: ph,
                extent: geom.ly(),
            });
        }
        if pw >= geom.lx() {
            return Err(NetworkError::UnsupportedPad {
                pad: pw,
                extent: geom.lx(),
            });
        }
        Ok(Self {
            cnn,
            theta,
            geom,
            sign_prior,
        })
    }

    pub fn cnn(&self) -> &Cnn {
        &self.cnn
    }

    pub fn params(&self) -> &ParameterVector {
        &self.theta
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geom
    }

    pub fn sign_prior(&self) -> bool {
        self.sign_prior
    }

    pub fn set_params(&mut self, theta: ParameterVector) -> Result<(), NetworkError> {
        self.cnn.check_params(theta.as_slice())?;
        self.theta = theta;
        Ok(())
    }

    fn prior(&self, s: &Configuration) -> Result<i8, NetworkError> {
        if self.sign_prior {
            marshall_sign(&self.geom, s).map_err(|e| NetworkError::ShapeMismatch(e.to_string()))
        } else {
            Ok(1)
        }
    }
}

impl Wavefunction for NeuralState {
    fn amplitude(&self, s: &Configuration) -> Result<Amplitude, NetworkError> {
        let amp = self
            .cnn
            .forward(self.theta.as_slice(), s, self.geom.ly(), self.geom.lx())?;
        Ok(amp.with_sign_factor(self.prior(s)?))
    }
}

impl Differentiable for NeuralState {
    fn n_params(&self) -> usize {
        self.cnn.n_params()
    }

    fn log_derivative(&self, s: &Configuration, out: &mut [f64]) -> Result<Amplitude, NetworkError> {
        let amp = self
            .cnn
            .backward(self.theta.as_slice(), s, self.geom.ly(), self.geom.lx(), out)?;
        Ok(amp.with_sign_factor(self.prior(s)?))
    }
}

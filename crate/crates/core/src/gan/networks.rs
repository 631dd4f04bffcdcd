use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, reflect_pad, Conv2d, ConvTranspose2d, ParamStore};

/// Residual-block encoder-decoder: 7×7 stem, strided downsampling, residual
/// blocks at the bottleneck, transposed-conv upsampling, 7×7 head with tanh.
#[derive(Debug, Clone)]
pub struct ResnetGenerator {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl ResnetGenerator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        in_c: usize,
        out_c: usize,
        ngf: usize,
        n_down: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stem = Conv2d::new(store, "stem", in_c, ngf, 7, 1, 0, true, rng)?;
        let mut downs = Vec::new();
        let mut ch = ngf;
        for i in 0..n_down {
            downs.push(Conv2d::new(store, &format!("down{i}"), ch, ch * 2, 3, 2, 1, true, rng)?);
            ch *= 2;
        }
        let mut blocks = Vec::new();
        for i in 0..n_blocks {
            let a = Conv2d::new(store, &format!("block{i}.conv0"), ch, ch, 3, 1, 0, true, rng)?;
            let b = Conv2d::new(store, &format!("block{i}.conv1"), ch, ch, 3, 1, 0, true, rng)?;
            blocks.push((a, b));
        }
        let mut ups = Vec::new();
        for i in 0..n_down {
            ups.push(ConvTranspose2d::new(store, &format!("up{i}"), ch, ch / 2, 3, 2, 1, 1, rng)?);
            ch /= 2;
        }
        let head = Conv2d::new(store, "head", ngf, out_c, 7, 1, 0, true, rng)?;
        Ok(Self { stem, downs, blocks, ups, head })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = instance_norm(&self.stem.forward(&reflect_pad(x, 3)?)?)?.relu()?;
        for d in &self.downs {
            h = instance_norm(&d.forward(&h)?)?.relu()?;
        }
        for (a, b) in &self.blocks {
            let r = instance_norm(&a.forward(&reflect_pad(&h, 1)?)?)?.relu()?;
            let r = instance_norm(&b.forward(&reflect_pad(&r, 1)?)?)?;
            h = (h + r)?;
        }
        for u in &self.ups {
            h = instance_norm(&u.forward(&h)?)?.relu()?;
        }
        Ok(self.head.forward(&reflect_pad(&h, 3)?)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
struct UnetLevel {
    down: Conv2d,
    up: ConvTranspose2d,
}

/// Skip-connection encoder-decoder with 4×4 stride-2 convolutions; each level
/// halves the resolution and concatenates its input onto the decoder output.
#[derive(Debug, Clone)]
pub struct UnetGenerator {
    levels: Vec<UnetLevel>,
}

impl UnetGenerator {
    pub fn new(
        store: &mut ParamStore,
        in_c: usize,
        out_c: usize,
        ngf: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(Error::Config(format!("unet depth must be at least 2, got {depth}")));
        }
        let inner = |k: usize| ngf * (1usize << k.min(3));
        let mut levels = Vec::with_capacity(depth);
        for k in 0..depth {
            let (down_in, up_out) = if k == 0 { (in_c, out_c) } else { (inner(k - 1), inner(k - 1)) };
            let up_in = if k == depth - 1 { inner(k) } else { 2 * inner(k) };
            let down = Conv2d::new(store, &format!("level{k}.down"), down_in, inner(k), 4, 2, 1, true, rng)?;
            let up = ConvTranspose2d::new(store, &format!("level{k}.up"), up_in, up_out, 4, 2, 1, 0, rng)?;
            levels.push(UnetLevel { down, up });
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let lvl = &self.levels[k];
        let last = self.levels.len() - 1;
        if k == 0 {
            let d = lvl.down.forward(x)?;
            let s = self.level(1, &d)?;
            return Ok(lvl.up.forward(&s.relu()?)?.tanh()?);
        }
        let d = lvl.down.forward(&leaky_relu(x, 0.2)?)?;
        let u = if k == last {
            lvl.up.forward(&d.relu()?)?
        } else {
            let s = self.level(k + 1, &instance_norm(&d)?)?;
            lvl.up.forward(&s.relu()?)?
        };
        Ok(Tensor::cat(&[x, &instance_norm(&u)?], 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let m = 1usize << self.levels.len();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Dimension(format!("unet of depth {} needs sizes divisible by {m}, got {h}x{w}", self.levels.len())));
        }
        self.level(0, x)
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Resnet(ResnetGenerator),
    Unet(UnetGenerator),
}

impl Generator {
    /// Maps `[B, in_c, H, W]` in `[-1, 1]` to `[B, out_c, H, W]` in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Generator::Resnet(g) => g.forward(x),
            Generator::Unet(g) => g.forward(x),
        }
    }
}

/// PatchGAN discriminator: a fully convolutional stack emitting one realism
/// score per overlapping input patch (70×70 receptive field with the default
/// three strided layers and 4×4 kernels).
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    first: Conv2d,
    mids: Vec<Conv2d>,
    last: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(
        store: &mut ParamStore,
        in_c: usize,
        ndf: usize,
        n_layers: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel < 2 {
            return Err(Error::Config(format!("discriminator kernel must be at least 2, got {kernel}")));
        }
        let first = Conv2d::new(store, "conv0", in_c, ndf, kernel, 2, 1, true, rng)?;
        let mut mids = Vec::new();
        let mut ch = ndf;
        for n in 1..=n_layers {
            let next = ndf * (1usize << n.min(3));
            let stride = if n == n_layers { 1 } else { 2 };
            mids.push(Conv2d::new(store, &format!("conv{n}"), ch, next, kernel, stride, 1, true, rng)?);
            ch = next;
        }
        let last = Conv2d::new(store, "score", ch, 1, kernel, 1, 1, true, rng)?;
        Ok(Self { first, mids, last })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = leaky_relu(&self.first.forward(x)?, 0.2)?;
        for conv in &self.mids {
            h = leaky_relu(&instance_norm(&conv.forward(&h)?)?, 0.2)?;
        }
        self.last.forward(&h)
    }

    /// Same weights, cut out of the autograd graph.
    pub fn detached(&self) -> Self {
        Self {
            first: self.first.detached(),
            mids: self.mids.iter().map(Conv2d::detached).collect(),
            last: self.last.detached(),
        }
    }

    /// Spatial side of the score map for a square input of side `input`.
    pub fn output_size(&self, input: usize) -> usize {
        std::iter::once(&self.first)
            .chain(&self.mids)
            .chain(std::iter::once(&self.last))
            .fold(input, |n, c| {
                let k = c.kernel();
                (n + 2 * c.padding()).saturating_sub(k) / c.stride() + 1
            })
    }
}

//! Minimal neural-network plumbing on top of candle: named parameter stores with
//! seeded initialization, Adam with checkpointable state, conv layers and the
//! differentiable helpers the networks share.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic child seed for a named random stream.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn rng_for(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}

/// Trainable parameters of one network, keyed by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Normal(0, std) initialized parameter.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// All values widened to f64, for exact comparisons and finite differences.
    pub fn values(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)))
            .collect()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        digest_tensors(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?}, network {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.contiguous()?)?;
        }
        Ok(())
    }

    /// Sets a single parameter value; used by finite-difference checks.
    pub fn set_value(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Param(format!("no parameter {name}")))?;
        let mut flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        flat[index] = value;
        let t = Tensor::from_vec(flat, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// L2 norm of the gradients of this store's parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for var in self.vars.values() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// Gradients of this store's parameters, flattened to f64.
    pub fn grad_values(&self, grads: &GradStore) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = match grads.get(v.as_tensor()) {
                    Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                    None => vec![0.0; v.elem_count()],
                };
                Ok((k.clone(), g))
            })
            .collect()
    }
}

pub fn digest_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
            _ => flat
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| h.update(v.to_le_bytes())),
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Adam with the usual bias correction; state is saved alongside parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `params` that has a gradient in `grads`.
    /// Moments are kept in f64 whatever the parameter dtype.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let coef = AdamCoef {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step_size: self.lr / (1.0 - self.beta1.powi(t)),
            bias2_sqrt: (1.0 - self.beta2.powi(t)).sqrt(),
        };
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let n = var.elem_count();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = var.as_tensor();
            let next = match p.dtype() {
                DType::F32 => adam_update::<f32>(p, g, m, v, &coef)?,
                DType::F64 => adam_update::<f64>(p, g, m, v, &coef)?,
                other => return Err(Error::Param(format!("unsupported parameter dtype {other:?}"))),
            };
            var.set(&next)?;
        }
        Ok(())
    }

    pub fn state_tensors(&self, device: &Device) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m.{name}"), Tensor::new(m.as_slice(), device)?);
            out.insert(format!("adam.v.{name}"), Tensor::new(v.as_slice(), device)?);
        }
        out.insert("adam.step".into(), Tensor::new(&[self.step as i64], device)?);
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        let step = tensors
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing adam.step".into()))?
            .to_vec1::<i64>()?[0];
        self.step = step as u64;
        self.moments.clear();
        for (name, var) in params.iter() {
            let m = tensors.get(&format!("adam.m.{name}"));
            let v = tensors.get(&format!("adam.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?) };
                    let (m, v) = (flat(m)?, flat(v)?);
                    if m.len() != var.elem_count() || v.len() != var.elem_count() {
                        return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
                    }
                    self.moments.insert(name.clone(), (m, v));
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            }
        }
        Ok(())
    }
}

struct AdamCoef {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_size: f64,
    bias2_sqrt: f64,
}

fn adam_update<T: candle_core::WithDType>(
    p: &Tensor,
    g: &Tensor,
    m: &mut [f64],
    v: &mut [f64],
    c: &AdamCoef,
) -> Result<Tensor> {
    let pv = p.flatten_all()?.to_vec1::<T>()?;
    let gv = g.flatten_all()?.to_vec1::<T>()?;
    let out: Vec<T> = pv
        .iter()
        .zip(&gv)
        .zip(m.iter_mut().zip(v.iter_mut()))
        .map(|((&p, &g), (m, v))| {
            let g = g.to_f64();
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let denom = v.sqrt() / c.bias2_sqrt + c.eps;
            T::from_f64(p.to_f64() - c.step_size * (*m / denom))
        })
        .collect();
    Ok(Tensor::from_vec(out, p.shape(), p.device())?)
}

/// Saves parameters and optimizer state of one network into a single file.
pub fn save_checkpoint(path: &Path, params: &ParamStore, opt: &Adam) -> Result<()> {
    let mut tensors: HashMap<String, Tensor> =
        params.tensors().into_iter().map(|(k, v)| (format!("param.{k}"), v)).collect();
    tensors.extend(opt.state_tensors(params.device())?);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    candle_core::safetensors::save(&tensors, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_checkpoint(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    candle_core::safetensors::load(path, device)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, params: &ParamStore, opt: Option<&mut Adam>) -> Result<()> {
    let tensors = read_checkpoint(path, params.device())?;
    let param_tensors: HashMap<String, Tensor> = tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("param.").map(|n| (n.to_string(), v.clone())))
        .collect();
    let extra: Vec<&String> = param_tensors.keys().filter(|k| params.get(k).is_none()).collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint has unknown parameters {extra:?}")));
    }
    params.load_tensors(&param_tensors)?;
    if let Some(opt) = opt {
        opt.load_state(&tensors, params)?;
    }
    Ok(())
}

/// 2-d convolution. The weight is held in tap-major `[k, k, c_in, c_out]`
/// layout; [`Conv2d::weight`] returns the conventional `[c_out, c_in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (and `{name}.bias`) in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[kernel, kernel, c_in, c_out], 0.02, rng)?;
        let bias = if bias { Some(store.zeros(&format!("{name}.bias"), &[c_out])?) } else { None };
        Ok(Self { weight, bias, stride, padding })
    }

    /// Wraps a `[c_out, c_in, k, k]` weight.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let weight = weight.permute((2, 3, 1, 0))?.contiguous()?;
        Ok(Self { weight, bias, stride, padding })
    }

    /// Weight as `[c_out, c_in, k, k]`.
    pub fn weight(&self) -> Result<Tensor> {
        Ok(self.weight.permute((3, 2, 0, 1))?.contiguous()?)
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[3]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = gather_conv(x, &self.weight, self.stride, self.padding, false, 0)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Transposed convolution, weight held as `[k, k, c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[kernel, kernel, c_in, c_out], 0.02, rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self { weight, bias, stride, padding, output_padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = gather_conv(x, &self.weight, self.stride, self.padding, true, self.output_padding)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }

    pub fn detached(&self) -> Self {
        Self { weight: self.weight.detach(), bias: self.bias.detach(), ..*self }
    }
}

/// Convolution as a row gather over channels-last pixels followed by a batched
/// matmul against a `[k, k, c_in, c_out]` weight. Out-of-range taps read an
/// appended zero row. `transposed` computes the adjoint of the strided
/// convolution; when the stride divides both the kernel and the output size it
/// can run as `stride^2` sub-pixel phases that skip the structurally zero taps.
fn gather_conv(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    transposed: bool,
    output_padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (k, kw, c_in, c_out) = weight.dims4()?;

    if k != kw {
        return Err(Error::Dimension(format!("square kernels only, got {k}x{kw}")));
    }
    if c_in != c {
        return Err(Error::Dimension(format!("weight expects {c_in} input channels, got {c}")));
    }
    let (ho, wo) = if transposed {
        let extent = |n: usize| ((n - 1) * stride + k + output_padding).checked_sub(2 * padding);
        match (extent(h), extent(w)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => return Err(Error::Dimension(format!("padding {padding} too large for input {h}x{w}"))),
        }
    } else {
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Dimension(format!("kernel {k} larger than padded input {h}x{w}")));
        }
        ((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1)
    };
    if !transposed && k == 1 && stride == 1 && padding == 0 {
        let wt = weight.reshape((c, c_out))?.t()?.contiguous()?;
        let y = wt.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        return Ok(y.reshape((b, c_out, h, w))?);
    }
    let (s, p) = (stride as isize, padding as isize);
    let source = |o: usize, t: usize, n: usize| -> Option<usize> {
        let (o, t) = (o as isize, t as isize);
        let i = if transposed {
            let num = o + p - t;
            if num.rem_euclid(s) != 0 {
                return None;
            }
            num.div_euclid(s)
        } else {
            o * s + t - p
        };
        (0..n as isize).contains(&i).then_some(i as usize)
    };

    // Each phase: output rows/cols it produces and the kernel taps that reach them.
    // Phases cost a weight gather; only worth it when the weight is smaller than the columns.
    let phased = transposed
        && stride > 1
        && k % stride == 0
        && ho % stride == 0
        && wo % stride == 0
        && c_out < b * ho * wo;
    let r = if phased { stride } else { 1 };
    let taps_for = |phase: usize| -> Vec<usize> {
        if phased {
            (0..k).filter(|&t| (phase as isize + p - t as isize).rem_euclid(s) == 0).collect()
        } else {
            (0..k).collect()
        }
    };
    let (ny, nx) = (ho / r, wo / r);
    let zero = (b * h * w) as u32;
    let mut idx = Vec::with_capacity(r * r * b * ny * nx * k * k);
    let mut wsel = Vec::with_capacity(r * r);
    for ry in 0..r {
        let ty = taps_for(ry);
        for rx in 0..r {
            let tx = taps_for(rx);
            for bi in 0..b {
                for my in 0..ny {
                    let oy = ry + my * r;
                    for mx in 0..nx {
                        let ox = rx + mx * r;
                        for &ky in &ty {
                            let iy = source(oy, ky, h);
                            for &kx in &tx {
                                idx.push(match (iy, source(ox, kx, w)) {
                                    (Some(iy), Some(ix)) => ((bi * h + iy) * w + ix) as u32,
                                    _ => zero,
                                });
                            }
                        }
                    }
                }
            }
            let to_idx = |v: &[usize]| Tensor::from_vec(v.iter().map(|&t| t as u32).collect::<Vec<_>>(), v.len(), x.device());
            let sel = if phased { weight.index_select(&to_idx(&ty)?, 0)?.index_select(&to_idx(&tx)?, 1)? } else { weight.clone() };
            wsel.push(sel.reshape((ty.len() * tx.len() * c, c_out))?);
        }
    }
    let taps = wsel[0].dim(0)? / c;
    let n_idx = idx.len();
    let idx = Tensor::from_vec(idx, n_idx, x.device())?;
    let rows = x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
    let rows = Tensor::cat(&[&rows, &Tensor::zeros((1, c), x.dtype(), x.device())?], 0)?;
    let cols = rows.index_select(&idx, 0)?.reshape((r * r, b * ny * nx, taps * c))?;
    let y = cols.matmul(&Tensor::stack(&wsel, 0)?)?;
    let y = y.reshape((r, r, b, ny, nx, c_out))?.permute((2, 5, 3, 0, 4, 1))?;
    Ok(y.reshape((b, c_out, ho, wo))?)
}

/// Per-sample, per-channel normalization over the spatial dimensions, no affine terms.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Edge-excluded reflection padding on both spatial axes (`c b | a b c | b a`),
/// repeated periodically so any pad width works for any size.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for dim in [3usize, 2] {
        let n = out.dim(dim)?;
        let idx: Vec<u32> = (-(pad as isize)..(n + pad) as isize)
            .map(|i| {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n as isize - 1);
                let m = i.rem_euclid(period);
                (if m < n as isize { m } else { period - m }) as u32
            })
            .collect();
        let idx = Tensor::from_vec(idx, n + 2 * pad, out.device())?;
        out = out.index_select(&idx, dim)?;
    }
    Ok(out)
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Row-stochastic `[out, in]` matrix for half-pixel-centred linear interpolation.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of an NCHW tensor, expressed as two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx_t = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let cols = x.broadcast_matmul(&rx_t)?;
    Ok(ry.broadcast_matmul(&cols)?)
}

/// A plain stack of convolutions with ReLU between layers, loadable from a
/// safetensors file whose metadata carries per-layer strides and paddings.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<Conv2d>,
    metadata: BTreeMap<String, String>,
}

impl ConvStack {
    pub fn new(layers: Vec<Conv2d>, metadata: BTreeMap<String, String>) -> Self {
        Self { layers, metadata }
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn out_channels(&self) -> Result<usize> {
        Ok(self.layers.last().ok_or_else(|| Error::Backend("empty conv stack".into()))?.out_channels())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn digest(&self) -> Result<String> {
        let tensors = self.named_tensors()?;
        digest_tensors(tensors.iter().map(|(k, t)| (k.as_str(), t)))
    }

    fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut tensors = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            tensors.push((format!("layer{i}.weight"), l.weight()?));
            if let Some(b) = &l.bias {
                tensors.push((format!("layer{i}.bias"), b.clone()));
            }
        }
        Ok(tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.named_tensors()?;
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert("strides".into(), join(self.layers.iter().map(|l| l.stride)));
        meta.insert("paddings".into(), join(self.layers.iter().map(|l| l.padding)));
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Backend(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Backend(format!("{}: {msg}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let metadata: BTreeMap<String, String> =
            header.metadata().clone().unwrap_or_default().into_iter().collect();
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| bad(e.to_string()))?;
        let strides = split(metadata.get("strides").ok_or_else(|| bad("missing strides metadata".into()))?)
            .map_err(bad)?;
        let paddings = split(metadata.get("paddings").ok_or_else(|| bad("missing paddings metadata".into()))?)
            .map_err(bad)?;
        if strides.len() != paddings.len() || strides.is_empty() {
            return Err(bad("strides and paddings disagree".into()));
        }
        let mut layers = Vec::new();
        for (i, (&s, &p)) in strides.iter().zip(&paddings).enumerate() {
            let w = tensors
                .get(&format!("layer{i}.weight"))
                .ok_or_else(|| bad(format!("missing layer{i}.weight")))?
                .to_dtype(dtype)?;
            if w.rank() != 4 {
                return Err(bad(format!("layer{i}.weight must be 4-d")));
            }
            let b = tensors.get(&format!("layer{i}.bias")).map(|b| b.to_dtype(dtype)).transpose()?;
            layers.push(Conv2d::from_tensors(w, b, s, p)?);
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(bad("consecutive layer channel counts disagree".into()));
            }
        }
        Ok(Self { layers, metadata })
    }
}

fn join(it: impl Iterator<Item = usize>) -> String {
    it.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| format!("bad integer list {s:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor) {
        assert_eq!(a.dims(), b.dims());
        let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn gather_conv_matches_native_ops() {
        let dev = Device::Cpu;
        for (b, c, o, h, w, k, s, p) in
            [(1, 3, 4, 8, 8, 4, 2, 1), (2, 2, 5, 7, 9, 3, 1, 1), (1, 4, 2, 6, 6, 4, 1, 1), (2, 1, 3, 5, 5, 1, 1, 0), (2, 6, 3, 4, 5, 1, 1, 0), (1, 8, 40, 2, 2, 4, 2, 1)]
        {
            let x = Var::randn(0f64, 1., (b, c, h, w), &dev).unwrap();
            let wt = Var::randn(0f64, 1., (o, c, k, k), &dev).unwrap();
            let ours = gather_conv(&x, &wt.permute((2, 3, 1, 0)).unwrap().contiguous().unwrap(), s, p, false, 0).unwrap();
            let native = x.conv2d(&wt, p, s, 1, 1).unwrap();
            close(&ours, &native);
            let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = native.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            close(g1.get(&x).unwrap(), g2.get(&x).unwrap());
            close(g1.get(&wt).unwrap(), g2.get(&wt).unwrap());

            let wt = Var::randn(0f64, 1., (c, o, k, k), &dev).unwrap();
            for op in 0..s {
                let tap_major = wt.permute((2, 3, 0, 1)).unwrap().contiguous().unwrap();
                let ours = gather_conv(&x, &tap_major, s, p, true, op).unwrap();
                let native = x.conv_transpose2d(&wt, p, op, s, 1).unwrap();
                close(&ours, &native);
                let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
                let g2 = native.sqr().unwrap().sum_all().unwrap().backward().unwrap();
                close(g1.get(&x).unwrap(), g2.get(&x).unwrap());
                close(g1.get(&wt).unwrap(), g2.get(&wt).unwrap());
            }
        }
    }

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, "gen"), derive_seed(7, "gen"));
        assert_ne!(derive_seed(7, "gen"), derive_seed(7, "disc"));
        assert_ne!(derive_seed(7, "gen"), derive_seed(8, "gen"));
    }

    #[test]
    fn reflect_pad_matches_manual() {
        let x = t(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 1, 3, 3]);
        let p = reflect_pad(&x, 1).unwrap();
        let row0 = p.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(row0, vec![5., 4., 5., 6., 5.]);
        assert_eq!(p.dims(), &[1, 1, 5, 5]);
        let wide = reflect_pad(&x, 3).unwrap();
        let row = wide.get(0).unwrap().get(0).unwrap().get(3).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(row, vec![2., 3., 2., 1., 2., 3., 2., 1., 2.]);
        let single = t(&[2.], &[1, 1, 1, 1]);
        assert_eq!(reflect_pad(&single, 2).unwrap().dims(), &[1, 1, 5, 5]);
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one() {
        for (a, b) in [(4, 8), (8, 4), (5, 13), (16, 16)] {
            let m = bilinear_matrix(a, b);
            for r in 0..b {
                let s: f64 = m[r * a..(r + 1) * a].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // 2x upsampling of [0, 1]
        let m = bilinear_matrix(2, 4);
        assert_eq!(&m[..], &[1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn resize_bilinear_keeps_constants() {
        let x = Tensor::full(0.25f64, (2, 3, 4, 6), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 9, 5).unwrap();
        assert_eq!(y.dims(), &[2, 3, 9, 5]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let x = t(&[1., -2., 3., 0.5, 100., -100.], &[1, 3, 1, 2]);
        let s = softmax_channels(&x).unwrap();
        let sum = s.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sum.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = t(&[1., 2., 3., 4., 10., 20., 30., 40.], &[1, 2, 2, 2]);
        let y = instance_norm(&x).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for ch in v.chunks(4) {
            let m: f64 = ch.iter().sum::<f64>() / 4.0;
            let var: f64 = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = rng_for(1, "t");
        let w = store.normal("w", &[3, 4], 1.0, &mut rng).unwrap();
        let before = store.values().unwrap();
        let loss = w.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.0, 0.5, 0.999);
        adam.step(&store, &grads).unwrap();
        let after = store.values().unwrap();
        for (a, b) in before["w"].iter().zip(&after["w"]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = rng_for(2, "t");
        let w = store.normal("w", &[5], 1.0, &mut rng).unwrap();
        let before = store.values().unwrap()["w"].clone();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(0.01, 0.5, 0.999);
        adam.step(&store, &grads).unwrap();
        let after = store.values().unwrap()["w"].clone();
        // first bias-corrected Adam step is lr * sign(g) up to eps
        for (b, a) in before.iter().zip(&after) {
            assert!(((b - a).abs() - 0.01).abs() < 1e-6);
            assert_eq!((b - a).signum(), b.signum());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = rng_for(3, "t");
        let w = store.normal("a.w", &[2, 2], 1.0, &mut rng).unwrap();
        store.zeros("a.b", &[2]).unwrap();
        let grads = w.sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(0.1, 0.5, 0.999);
        adam.step(&store, &grads).unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &store, &adam).unwrap();

        let mut store2 = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng2 = rng_for(99, "t");
        store2.normal("a.w", &[2, 2], 1.0, &mut rng2).unwrap();
        store2.zeros("a.b", &[2]).unwrap();
        let mut adam2 = Adam::new(0.1, 0.5, 0.999);
        load_checkpoint(&path, &store2, Some(&mut adam2)).unwrap();
        assert_eq!(store.digest().unwrap(), store2.digest().unwrap());
        assert_eq!(adam2.step_count(), 1);

        let mut wrong = ParamStore::new(DType::F32, Device::Cpu);
        wrong.zeros("a.w", &[3, 2]).unwrap();
        assert!(load_checkpoint(&path, &wrong, None).is_err());
    }
}

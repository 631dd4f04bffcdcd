//! Adversarial segmentation losses and the training step that adds them to a
//! baseline GAN.
//!
//! Generated and real color images go through the frozen segmentation backend;
//! `d_m` judges the full class-probability maps and `d_b` their foreground /
//! background collapse. Only the sketch-to-color direction is segmented.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};

use crate::config::{total_objective, LossWeights, SegDiscriminator, VariantConfig};
use crate::error::{Error, Result};
use crate::gan::{
    adversarial_loss, baseline_generator_loss, discriminator_loss, generator_forward, image_discriminator_step,
    scalar, Batch, NetworkBundle, PatchDiscriminator, UpdateCounters,
};
use crate::nn::resize_bilinear;
use crate::segmentation::{FgBgPartition, SegmentationBackend};

/// Frozen backend plus how its output is shaped for the discriminators.
pub struct SegContext<'a> {
    pub backend: &'a dyn SegmentationBackend,
    pub partition: FgBgPartition,
    /// Side length the maps are bilinearly resized to before discrimination.
    pub map_size: usize,
    kernel: Tensor,
}

impl<'a> SegContext<'a> {
    pub fn new(
        backend: &'a dyn SegmentationBackend,
        partition: FgBgPartition,
        map_size: usize,
        dtype: DType,
    ) -> Result<Self> {
        if partition.num_classes() != backend.num_classes() {
            return Err(Error::Config(format!(
                "partition covers {} classes, backend produces {}",
                partition.num_classes(),
                backend.num_classes()
            )));
        }
        let kernel = partition.kernel(dtype, &candle_core::Device::Cpu)?;
        Ok(Self { backend, partition, map_size, kernel })
    }

    /// Soft class maps of `images`, resized to `map_size`.
    pub fn multi_map(&self, images: &Tensor) -> Result<Tensor> {
        let probs = self.backend.segment(images)?;
        let (_, _, h, w) = probs.dims4()?;
        if h == self.map_size && w == self.map_size {
            Ok(probs)
        } else {
            resize_bilinear(&probs, self.map_size, self.map_size)
        }
    }

    /// Foreground/background collapse of a multi-class map.
    pub fn binary_map(&self, multi: &Tensor) -> Result<Tensor> {
        Ok(multi.conv2d(&self.kernel.to_dtype(multi.dtype())?, 0, 1, 1, 1)?)
    }

    fn maps(&self, images: &Tensor, need_multi: bool, need_binary: bool) -> Result<(Option<Tensor>, Option<Tensor>)> {
        if !need_multi && !need_binary {
            return Ok((None, None));
        }
        let multi = self.multi_map(images)?;
        let binary = if need_binary { Some(self.binary_map(&multi)?) } else { None };
        Ok((need_multi.then_some(multi), binary))
    }
}

fn zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Generator-side auxiliary losses `(l_b, l_m)`: least-squares pressure on each
/// active discriminator to score the fake maps as real. Inactive terms are an
/// exact, graph-free zero. Discriminators are evaluated detached so gradients
/// only reach the generator, through the frozen backend.
pub fn seg_loss_generator(
    fake: &Tensor,
    ctx: &SegContext<'_>,
    v: &VariantConfig,
    d_m: Option<&PatchDiscriminator>,
    d_b: Option<&PatchDiscriminator>,
) -> Result<(Tensor, Tensor)> {
    let use_m = v.is_active(SegDiscriminator::Multi);
    let use_b = v.is_active(SegDiscriminator::Binary);
    let missing = |which: &str| Error::Config(format!("variant {} needs discriminator {which}", v.variant));
    let (multi, binary) = ctx.maps(fake, use_m, use_b)?;
    let l_b = match binary {
        Some(map) => adversarial_loss(&d_b.ok_or_else(|| missing("d_b"))?.detached().forward(&map)?, true)?,
        None => zero(fake)?,
    };
    let l_m = match multi {
        Some(map) => adversarial_loss(&d_m.ok_or_else(|| missing("d_m"))?.detached().forward(&map)?, true)?,
        None => zero(fake)?,
    };
    Ok((l_b, l_m))
}

/// `0.5 * [mse(D(Seg(real)), 1) + mse(D(Seg(fake)), 0)]` with `fake` detached,
/// so only `d` receives gradients.
pub fn seg_loss_discriminator(
    real: &Tensor,
    fake: &Tensor,
    ctx: &SegContext<'_>,
    which: SegDiscriminator,
    d: &PatchDiscriminator,
) -> Result<Tensor> {
    let map = |x: &Tensor| -> Result<Tensor> {
        let multi = ctx.multi_map(x)?;
        match which {
            SegDiscriminator::Multi => Ok(multi),
            SegDiscriminator::Binary => ctx.binary_map(&multi),
        }
    };
    let real_map = map(&real.detach())?;
    let fake_map = map(&fake.detach())?;
    discriminator_loss(&d.forward(&real_map)?, &d.forward(&fake_map)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_g_adv: f64,
    pub l_g_rec: f64,
    pub l_g: f64,
    pub l_b: f64,
    pub l_m: f64,
    pub total: f64,
    pub loss_d_img: f64,
    pub loss_d_m: Option<f64>,
    pub loss_d_b: Option<f64>,
    pub counters: UpdateCounters,
    pub grad_norms: BTreeMap<String, f64>,
}

pub const CSV_NETWORKS: [&str; 6] = ["g_ab", "g_ba", "d_img_b", "d_img_a", "d_m", "d_b"];

impl StepReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["step", "l_g", "l_b", "l_m", "total", "l_g_adv", "l_g_rec", "loss_d_img", "loss_d_m", "loss_d_b"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend(CSV_NETWORKS.iter().map(|n| format!("grad_{n}")));
        cols.join(",")
    }

    /// One CSV row; absent values are empty cells. Floats use the shortest
    /// round-tripping representation so logs compare bit-for-bit.
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cells = vec![
            self.step.to_string(),
            self.l_g.to_string(),
            self.l_b.to_string(),
            self.l_m.to_string(),
            self.total.to_string(),
            self.l_g_adv.to_string(),
            self.l_g_rec.to_string(),
            self.loss_d_img.to_string(),
            opt(self.loss_d_m),
            opt(self.loss_d_b),
        ];
        cells.extend(CSV_NETWORKS.iter().map(|n| opt(self.grad_norms.get(*n).copied())));
        cells.join(",")
    }
}

fn finite(t: &Tensor, term: &str) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::Diverged { term: term.into(), value: v });
    }
    Ok(v)
}

/// One alternating update: generator(s) on `w_g·L_G + w_b·l_b + w_m·l_m`, then
/// the image discriminator(s), then each active segmentation discriminator.
pub fn training_step(
    batch: &Batch,
    nets: &mut NetworkBundle,
    ctx: &SegContext<'_>,
    v: &VariantConfig,
    w: &LossWeights,
) -> Result<StepReport> {
    w.validate()?;
    let out = generator_forward(nets, batch)?;
    let terms = baseline_generator_loss(nets, &out)?;
    let (l_b_t, l_m_t) = seg_loss_generator(&out.fake_b, ctx, v, nets.d_m.as_ref().map(|t| &t.model), nets.d_b.as_ref().map(|t| &t.model))?;

    let l_g = finite(&terms.total, "l_g")?;
    let l_b = finite(&l_b_t, "l_b")?;
    let l_m = finite(&l_m_t, "l_m")?;
    let total_t = (((&terms.total * w.w_g)? + (&l_b_t * w.w_b)?)? + (&l_m_t * w.w_m)?)?;
    let graph_total = finite(&total_t, "total")?;
    let total = total_objective(l_g, l_b, l_m, w)?;
    let tol = if total_t.dtype() == DType::F64 { 1e-9 } else { 1e-4 };
    if (graph_total - total).abs() > tol * total.abs().max(1.0) {
        return Err(Error::Numerical(format!("objective {graph_total} disagrees with its parts ({total})")));
    }

    let mut grad_norms = BTreeMap::new();
    let grads = total_t.backward()?;
    grad_norms.insert(nets.g_ab.name.clone(), nets.g_ab.params.grad_norm(&grads)?);
    nets.g_ab.opt.step(&nets.g_ab.params, &grads)?;
    if let Some(g) = nets.g_ba.as_mut() {
        grad_norms.insert(g.name.clone(), g.params.grad_norm(&grads)?);
        g.opt.step(&g.params, &grads)?;
    }
    drop(grads);
    nets.counters.generator += 1;

    let loss_d_img = image_discriminator_step(nets, &out, &mut grad_norms)?;

    let mut seg_step = |which: SegDiscriminator| -> Result<Option<f64>> {
        if !v.is_active(which) {
            return Ok(None);
        }
        let slot = match which {
            SegDiscriminator::Multi => nets.d_m.as_mut(),
            SegDiscriminator::Binary => nets.d_b.as_mut(),
        };
        let d = slot.ok_or_else(|| Error::Config(format!("variant {} needs discriminator {which}", v.variant)))?;
        let loss = seg_loss_discriminator(&out.real_b, &out.fake_b, ctx, which, &d.model)?;
        let value = finite(&loss, &format!("loss_{which}"))?;
        let grads = loss.backward()?;
        grad_norms.insert(d.name.clone(), d.params.grad_norm(&grads)?);
        d.opt.step(&d.params, &grads)?;
        Ok(Some(value))
    };
    let loss_d_m = seg_step(SegDiscriminator::Multi)?;
    let loss_d_b = seg_step(SegDiscriminator::Binary)?;
    if loss_d_m.is_some() {
        nets.counters.d_m += 1;
    }
    if loss_d_b.is_some() {
        nets.counters.d_b += 1;
    }

    Ok(StepReport {
        step: nets.counters.generator,
        l_g_adv: scalar(&terms.adv)?,
        l_g_rec: scalar(&terms.rec)?,
        l_g,
        l_b,
        l_m,
        total,
        loss_d_img,
        loss_d_m,
        loss_d_b,
        counters: nets.counters,
        grad_norms,
    })
}

/// Gradient norms over the sketch-to-color generator produced by `l_b` and by
/// `l_m` separately, with no parameter update. Inactive terms give 0.
pub fn aux_gradient_norms(
    batch: &Batch,
    nets: &NetworkBundle,
    ctx: &SegContext<'_>,
    v: &VariantConfig,
) -> Result<(f64, f64)> {
    let fake = nets.g_ab.model.forward(&batch.sketch_input()?)?;
    let (l_b, l_m) = seg_loss_generator(&fake, ctx, v, nets.d_m.as_ref().map(|t| &t.model), nets.d_b.as_ref().map(|t| &t.model))?;
    let norm = |l: &Tensor, which: SegDiscriminator| -> Result<f64> {
        if !v.is_active(which) {
            return Ok(0.0);
        }
        nets.g_ab.params.grad_norm(&l.backward()?)
    };
    Ok((norm(&l_b, SegDiscriminator::Binary)?, norm(&l_m, SegDiscriminator::Multi)?))
}

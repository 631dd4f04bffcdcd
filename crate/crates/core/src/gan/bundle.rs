use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::losses::{adversarial_loss, cycle_loss, discriminator_loss, l1_loss, scalar};
use super::networks::{Generator, PatchDiscriminator, ResnetGenerator, UnetGenerator};
use crate::config::{
    ColorImage, GeneratorKind, Scheme, SegDiscriminator, SketchImage, TrainConfig, VariantConfig,
};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, rng_for, save_checkpoint, Adam, ParamStore};

/// Architecture and optimizer settings shared by every network in a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub generator: GeneratorKind,
    pub ngf: usize,
    pub ndf: usize,
    pub n_blocks: usize,
    pub n_downsampling: usize,
    pub unet_depth: usize,
    pub disc_layers: usize,
    pub disc_kernel: usize,
    pub num_classes: usize,
    pub lambda_l1: f64,
    pub lambda_cycle: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub dtype: DType,
}

impl From<&TrainConfig> for ArchConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            generator: c.generator_kind(),
            ngf: c.ngf,
            ndf: c.ndf,
            n_blocks: c.n_blocks,
            n_downsampling: c.n_downsampling,
            unet_depth: c.unet_depth,
            disc_layers: c.disc_layers,
            disc_kernel: c.disc_kernel,
            num_classes: c.num_classes,
            lambda_l1: c.lambda_l1,
            lambda_cycle: c.lambda_cycle,
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            seed: c.seed,
            dtype: c.dtype(),
        }
    }
}

/// A network with its parameters and optimizer.
#[derive(Debug, Clone)]
pub struct Trainable<M> {
    pub name: String,
    pub model: M,
    pub params: ParamStore,
    pub opt: Adam,
}

impl<M> Trainable<M> {
    pub fn checkpoint_path(&self, run_dir: &Path, epoch: usize) -> PathBuf {
        run_dir.join(format!("{epoch}_{}.ckpt", self.name))
    }
}

fn restore<M>(t: &mut Trainable<M>, run_dir: &Path, epoch: usize) -> Result<()> {
    let path = t.checkpoint_path(run_dir, epoch);
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    load_checkpoint(&path, &t.params, Some(&mut t.opt))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub generator: u64,
    pub image_d: u64,
    pub d_m: u64,
    pub d_b: u64,
}

/// All networks of one run.
///
/// Names: `g_ab` maps sketches to colors, `g_ba` colors to sketches (unpaired
/// only); `d_img_b` judges colors (conditioned on the sketch when paired),
/// `d_img_a` judges sketches (unpaired only); `d_m` and `d_b` judge the
/// multi-class and foreground/background segmentation maps.
#[derive(Debug, Clone)]
pub struct NetworkBundle {
    pub scheme: Scheme,
    pub arch: ArchConfig,
    pub g_ab: Trainable<Generator>,
    pub g_ba: Option<Trainable<Generator>>,
    pub d_img_b: Trainable<PatchDiscriminator>,
    pub d_img_a: Option<Trainable<PatchDiscriminator>>,
    pub d_m: Option<Trainable<PatchDiscriminator>>,
    pub d_b: Option<Trainable<PatchDiscriminator>>,
    pub counters: UpdateCounters,
}

fn new_store(arch: &ArchConfig) -> ParamStore {
    ParamStore::new(arch.dtype, Device::Cpu)
}

fn new_opt(arch: &ArchConfig) -> Adam {
    Adam::new(arch.learning_rate, arch.beta1, arch.beta2)
}

fn build_generator(arch: &ArchConfig, name: &str, in_c: usize, out_c: usize) -> Result<Trainable<Generator>> {
    let mut params = new_store(arch);
    let mut rng = rng_for(arch.seed, &format!("init.{name}"));
    let model = match arch.generator {
        GeneratorKind::Resnet => Generator::Resnet(ResnetGenerator::new(
            &mut params,
            in_c,
            out_c,
            arch.ngf,
            arch.n_downsampling,
            arch.n_blocks,
            &mut rng,
        )?),
        GeneratorKind::Unet => {
            Generator::Unet(UnetGenerator::new(&mut params, in_c, out_c, arch.ngf, arch.unet_depth, &mut rng)?)
        }
    };
    Ok(Trainable { name: name.into(), model, params, opt: new_opt(arch) })
}

fn build_discriminator(arch: &ArchConfig, name: &str, in_c: usize) -> Result<Trainable<PatchDiscriminator>> {
    let mut params = new_store(arch);
    let mut rng = rng_for(arch.seed, &format!("init.{name}"));
    let model = PatchDiscriminator::new(&mut params, in_c, arch.ndf, arch.disc_layers, arch.disc_kernel, &mut rng)?;
    Ok(Trainable { name: name.into(), model, params, opt: new_opt(arch) })
}

/// Builds the baseline networks for `scheme` plus the segmentation discriminators
/// `variant` activates. Every network draws its initialization from its own
/// seed stream, so adding auxiliary networks never changes baseline weights.
pub fn build_networks(scheme: Scheme, variant: Option<&VariantConfig>, arch: &ArchConfig) -> Result<NetworkBundle> {
    if arch.num_classes < 2 {
        return Err(Error::Config(format!("num_classes must be at least 2, got {}", arch.num_classes)));
    }
    let g_ab = build_generator(arch, "g_ab", 1, 3)?;
    let (g_ba, d_img_b, d_img_a) = match scheme {
        Scheme::Paired => (None, build_discriminator(arch, "d_img_b", 4)?, None),
        Scheme::Unpaired => (
            Some(build_generator(arch, "g_ba", 3, 1)?),
            build_discriminator(arch, "d_img_b", 3)?,
            Some(build_discriminator(arch, "d_img_a", 1)?),
        ),
    };
    let active = |d| variant.is_some_and(|v| v.is_active(d));
    let d_m = if active(SegDiscriminator::Multi) {
        Some(build_discriminator(arch, "d_m", arch.num_classes)?)
    } else {
        None
    };
    let d_b = if active(SegDiscriminator::Binary) { Some(build_discriminator(arch, "d_b", 2)?) } else { None };
    Ok(NetworkBundle {
        scheme,
        arch: arch.clone(),
        g_ab,
        g_ba,
        d_img_b,
        d_img_a,
        d_m,
        d_b,
        counters: UpdateCounters::default(),
    })
}

impl NetworkBundle {
    pub fn generators(&self) -> Vec<&Trainable<Generator>> {
        std::iter::once(&self.g_ab).chain(self.g_ba.as_ref()).collect()
    }

    pub fn discriminators(&self) -> Vec<&Trainable<PatchDiscriminator>> {
        std::iter::once(&self.d_img_b)
            .chain(self.d_img_a.as_ref())
            .chain(self.d_m.as_ref())
            .chain(self.d_b.as_ref())
            .collect()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.g_ab.opt.lr = lr;
        self.d_img_b.opt.lr = lr;
        for t in [&mut self.g_ba].into_iter().flatten() {
            t.opt.lr = lr;
        }
        for t in [&mut self.d_img_a, &mut self.d_m, &mut self.d_b].into_iter().flatten() {
            t.opt.lr = lr;
        }
    }

    pub fn network_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.generators().iter().map(|t| t.name.clone()).collect();
        names.extend(self.discriminators().iter().map(|t| t.name.clone()));
        names
    }

    /// Digest of every parameter of every network, keyed by network name.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for g in self.generators() {
            out.insert(g.name.clone(), g.params.digest()?);
        }
        for d in self.discriminators() {
            out.insert(d.name.clone(), d.params.digest()?);
        }
        Ok(out)
    }

    /// Writes `{run_dir}/{epoch}_{net}.ckpt` for every network plus the update counters.
    pub fn save(&self, run_dir: &Path, epoch: usize) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for g in self.generators() {
            let p = g.checkpoint_path(run_dir, epoch);
            save_checkpoint(&p, &g.params, &g.opt)?;
            paths.push(p);
        }
        for d in self.discriminators() {
            let p = d.checkpoint_path(run_dir, epoch);
            save_checkpoint(&p, &d.params, &d.opt)?;
            paths.push(p);
        }
        let counters = run_dir.join(format!("{epoch}_counters.json"));
        let tmp = counters.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&self.counters)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &counters).map_err(|e| Error::io(&counters, e))?;
        Ok(paths)
    }

    /// Restores every network (and optimizer state) saved at `epoch`.
    pub fn load(&mut self, run_dir: &Path, epoch: usize) -> Result<()> {
        restore(&mut self.g_ab, run_dir, epoch)?;
        restore(&mut self.d_img_b, run_dir, epoch)?;
        if let Some(t) = self.g_ba.as_mut() {
            restore(t, run_dir, epoch)?;
        }
        for t in [&mut self.d_img_a, &mut self.d_m, &mut self.d_b].into_iter().flatten() {
            restore(t, run_dir, epoch)?;
        }
        let counters = run_dir.join(format!("{epoch}_counters.json"));
        if counters.is_file() {
            let bytes = std::fs::read(&counters).map_err(|e| Error::io(&counters, e))?;
            self.counters = serde_json::from_slice(&bytes)?;
        }
        Ok(())
    }

    /// Loads only the sketch-to-color generator weights from an epoch checkpoint.
    pub fn load_generator(&mut self, path: &Path) -> Result<()> {
        load_checkpoint(path, &self.g_ab.params, None)
    }
}

/// One training batch. Sketches are stored in `[0, 1]`, colors in `[-1, 1]`.
/// Paired batches are aligned by index; unpaired ones are independent draws.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sketch: Tensor,
    pub color: Tensor,
    pub sketch_stems: Vec<String>,
    pub color_stems: Vec<String>,
}

impl Batch {
    pub fn new(
        sketches: &[SketchImage],
        colors: &[ColorImage],
        sketch_stems: Vec<String>,
        color_stems: Vec<String>,
        dtype: DType,
    ) -> Result<Self> {
        if sketches.is_empty() || colors.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let dev = Device::Cpu;
        let s: Vec<Tensor> = sketches.iter().map(|s| s.to_tensor(&dev, dtype)).collect::<Result<_>>()?;
        let c: Vec<Tensor> = colors.iter().map(|c| c.to_tensor(&dev, dtype)).collect::<Result<_>>()?;
        Ok(Self { sketch: Tensor::cat(&s, 0)?, color: Tensor::cat(&c, 0)?, sketch_stems, color_stems })
    }

    /// Sketches mapped to the `[-1, 1]` range the networks use.
    pub fn sketch_input(&self) -> Result<Tensor> {
        Ok(self.sketch.affine(2.0, -1.0)?)
    }
}

/// Generator-side tensors of one step, all still attached to the graph.
#[derive(Debug, Clone)]
pub struct GenOutputs {
    pub real_a: Tensor,
    pub real_b: Tensor,
    pub fake_b: Tensor,
    pub fake_a: Option<Tensor>,
    pub rec_a: Option<Tensor>,
    pub rec_b: Option<Tensor>,
}

pub fn generator_forward(nets: &NetworkBundle, batch: &Batch) -> Result<GenOutputs> {
    let real_a = batch.sketch_input()?;
    let real_b = batch.color.clone();
    let fake_b = nets.g_ab.model.forward(&real_a)?;
    let (fake_a, rec_a, rec_b) = match &nets.g_ba {
        Some(g_ba) => {
            let rec_a = g_ba.model.forward(&fake_b)?;
            let fake_a = g_ba.model.forward(&real_b)?;
            let rec_b = nets.g_ab.model.forward(&fake_a)?;
            (Some(fake_a), Some(rec_a), Some(rec_b))
        }
        None => (None, None, None),
    };
    Ok(GenOutputs { real_a, real_b, fake_b, fake_a, rec_a, rec_b })
}

/// Baseline generator objective `L_G` split into adversarial and reconstruction parts.
#[derive(Debug, Clone)]
pub struct GanTerms {
    pub adv: Tensor,
    pub rec: Tensor,
    pub total: Tensor,
}

/// Paired: LSGAN on the conditional discriminator plus weighted L1 to the target.
/// Unpaired: LSGAN in both directions plus weighted cycle reconstruction.
/// Discriminators are evaluated detached, so gradients reach only the generators.
pub fn baseline_generator_loss(nets: &NetworkBundle, out: &GenOutputs) -> Result<GanTerms> {
    let d_b = nets.d_img_b.model.detached();
    let (adv, rec) = match nets.scheme {
        Scheme::Paired => {
            let scores = d_b.forward(&Tensor::cat(&[&out.real_a, &out.fake_b], 1)?)?;
            let adv = adversarial_loss(&scores, true)?;
            let rec = (l1_loss(&out.fake_b, &out.real_b)? * nets.arch.lambda_l1)?;
            (adv, rec)
        }
        Scheme::Unpaired => {
            let missing = || Error::Config("unpaired bundle lacks its reverse networks".into());
            let d_a = nets.d_img_a.as_ref().ok_or_else(missing)?.model.detached();
            let fake_a = out.fake_a.as_ref().ok_or_else(missing)?;
            let rec_a = out.rec_a.as_ref().ok_or_else(missing)?;
            let rec_b = out.rec_b.as_ref().ok_or_else(missing)?;
            let adv = (adversarial_loss(&d_b.forward(&out.fake_b)?, true)?
                + adversarial_loss(&d_a.forward(fake_a)?, true)?)?;
            let cyc = (cycle_loss(&out.real_a, rec_a)? + cycle_loss(&out.real_b, rec_b)?)?;
            (adv, (cyc * nets.arch.lambda_cycle)?)
        }
    };
    let total = (&adv + &rec)?;
    Ok(GanTerms { adv, rec, total })
}

/// Steps every image discriminator once on real vs detached fake samples.
/// Returns the summed discriminator loss and per-network gradient norms.
pub fn image_discriminator_step(
    nets: &mut NetworkBundle,
    out: &GenOutputs,
    grad_norms: &mut BTreeMap<String, f64>,
) -> Result<f64> {
    let fake_b = out.fake_b.detach();
    let (real_in, fake_in) = match nets.scheme {
        Scheme::Paired => (
            Tensor::cat(&[&out.real_a, &out.real_b], 1)?,
            Tensor::cat(&[&out.real_a, &fake_b], 1)?,
        ),
        Scheme::Unpaired => (out.real_b.clone(), fake_b),
    };
    let mut total = 0.0;
    {
        let d = &mut nets.d_img_b;
        let loss = discriminator_loss(&d.model.forward(&real_in)?, &d.model.forward(&fake_in)?)?;
        total += checked(&loss, "d_img_b")?;
        let grads = loss.backward()?;
        grad_norms.insert(d.name.clone(), d.params.grad_norm(&grads)?);
        d.opt.step(&d.params, &grads)?;
    }
    if let (Some(d), Some(fake_a)) = (nets.d_img_a.as_mut(), out.fake_a.as_ref()) {
        let loss = discriminator_loss(&d.model.forward(&out.real_a)?, &d.model.forward(&fake_a.detach())?)?;
        total += checked(&loss, "d_img_a")?;
        let grads = loss.backward()?;
        grad_norms.insert(d.name.clone(), d.params.grad_norm(&grads)?);
        d.opt.step(&d.params, &grads)?;
    }
    nets.counters.image_d += 1;
    Ok(total)
}

pub(crate) fn checked(t: &Tensor, term: &str) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::Diverged { term: term.into(), value: v });
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub l_g_adv: f64,
    pub l_g_rec: f64,
    pub l_g: f64,
    pub loss_d_img: f64,
}

/// One update of the plain translation GAN: generator(s), then image discriminator(s).
pub fn baseline_step(nets: &mut NetworkBundle, batch: &Batch) -> Result<BaselineReport> {
    let out = generator_forward(nets, batch)?;
    let terms = baseline_generator_loss(nets, &out)?;
    let l_g = checked(&terms.total, "l_g")?;
    let grads = terms.total.backward()?;
    nets.g_ab.opt.step(&nets.g_ab.params, &grads)?;
    if let Some(g) = nets.g_ba.as_mut() {
        g.opt.step(&g.params, &grads)?;
    }
    nets.counters.generator += 1;
    let mut norms = BTreeMap::new();
    let loss_d_img = image_discriminator_step(nets, &out, &mut norms)?;
    Ok(BaselineReport { l_g_adv: scalar(&terms.adv)?, l_g_rec: scalar(&terms.rec)?, l_g, loss_d_img })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LossWeights, Variant};

    pub(crate) fn tiny_arch(generator: GeneratorKind) -> ArchConfig {
        ArchConfig {
            generator,
            ngf: 4,
            ndf: 4,
            n_blocks: 1,
            n_downsampling: 2,
            unet_depth: 3,
            disc_layers: 1,
            disc_kernel: 4,
            num_classes: 135,
            lambda_l1: 100.0,
            lambda_cycle: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 7,
            dtype: DType::F32,
        }
    }

    fn toy_batch(size: usize, seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = rng_for(seed, "batch");
        let s: Vec<f32> = (0..size * size).map(|_| rng.random::<f32>()).collect();
        let c: Vec<f32> = (0..size * size * 3).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        Batch::new(
            &[SketchImage::new(size, size, s).unwrap()],
            &[ColorImage::new(size, size, c).unwrap()],
            vec!["x".into()],
            vec!["x".into()],
            DType::F32,
        )
        .unwrap()
    }

    #[test]
    fn bundle_composition() {
        let arch = tiny_arch(GeneratorKind::Unet);
        let multi = VariantConfig::new(Variant::MultiClass, LossWeights::default());
        let p = build_networks(Scheme::Paired, Some(&multi), &arch).unwrap();
        assert_eq!(p.generators().len(), 1);
        assert_eq!(p.discriminators().len(), 2);
        assert!(p.d_b.is_none());
        let d_m = p.d_m.as_ref().unwrap();
        assert_eq!(d_m.params.get("conv0.weight").unwrap().dims()[2], 135);

        let both = VariantConfig::new(Variant::Both, LossWeights::default());
        let u = build_networks(Scheme::Unpaired, Some(&both), &tiny_arch(GeneratorKind::Resnet)).unwrap();
        assert_eq!(u.generators().len(), 2);
        let image_ds = [&u.d_img_b, u.d_img_a.as_ref().unwrap()];
        assert_eq!(image_ds.len(), 2);
        assert!(u.d_m.is_some() && u.d_b.is_some());
        assert_eq!(u.d_b.as_ref().unwrap().params.get("conv0.weight").unwrap().dims()[2], 2);
    }

    #[test]
    fn auxiliary_networks_do_not_perturb_baseline_init() {
        let arch = tiny_arch(GeneratorKind::Resnet);
        let base = build_networks(Scheme::Unpaired, None, &arch).unwrap();
        let both = VariantConfig::new(Variant::Both, LossWeights::default());
        let full = build_networks(Scheme::Unpaired, Some(&both), &arch).unwrap();
        let a = base.digests().unwrap();
        let b = full.digests().unwrap();
        for (k, v) in &a {
            assert_eq!(&b[k], v, "{k}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        for scheme in [Scheme::Paired, Scheme::Unpaired] {
            let mut arch = tiny_arch(if scheme == Scheme::Paired { GeneratorKind::Unet } else { GeneratorKind::Resnet });
            arch.learning_rate = 0.0;
            let mut nets = build_networks(scheme, None, &arch).unwrap();
            let before = nets.digests().unwrap();
            baseline_step(&mut nets, &toy_batch(16, 1)).unwrap();
            assert_eq!(before, nets.digests().unwrap());
        }
    }

    #[test]
    fn baseline_step_is_deterministic_and_moves_weights() {
        let arch = tiny_arch(GeneratorKind::Unet);
        let run = || {
            let mut nets = build_networks(Scheme::Paired, None, &arch).unwrap();
            let r = baseline_step(&mut nets, &toy_batch(16, 2)).unwrap();
            (r, nets.digests().unwrap())
        };
        let (r1, d1) = run();
        let (r2, d2) = run();
        assert_eq!(r1, r2);
        assert_eq!(d1, d2);
        let fresh = build_networks(Scheme::Paired, None, &arch).unwrap().digests().unwrap();
        assert_ne!(fresh["g_ab"], d1["g_ab"]);
        assert!((r1.l_g - (r1.l_g_adv + r1.l_g_rec)).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_restores_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch(GeneratorKind::Resnet);
        let both = VariantConfig::new(Variant::Both, LossWeights::default());
        let mut nets = build_networks(Scheme::Unpaired, Some(&both), &arch).unwrap();
        baseline_step(&mut nets, &toy_batch(16, 3)).unwrap();
        let paths = nets.save(dir.path(), 1).unwrap();
        assert_eq!(paths.len(), 6);
        assert!(paths.iter().any(|p| p.ends_with("1_g_ab.ckpt")));
        let mut fresh = build_networks(Scheme::Unpaired, Some(&both), &arch).unwrap();
        fresh.load(dir.path(), 1).unwrap();
        assert_eq!(fresh.digests().unwrap(), nets.digests().unwrap());
        assert_eq!(fresh.counters, nets.counters);
        assert_eq!(fresh.g_ab.opt.step_count(), 1);
        assert!(fresh.load(dir.path(), 2).is_err());
    }
}

//! Baseline paired and unpaired translation GANs.

mod bundle;
mod losses;
mod networks;

pub use bundle::{
    baseline_generator_loss, baseline_step, build_networks, generator_forward, image_discriminator_step,
    ArchConfig, BaselineReport, Batch, GanTerms, GenOutputs, NetworkBundle, Trainable, UpdateCounters,
};
pub use losses::{adversarial_loss, cycle_loss, discriminator_loss, l1_loss, scalar};
pub use networks::{Generator, PatchDiscriminator, ResnetGenerator, UnetGenerator};

/// Learning-rate multiplier for 1-based `epoch`: 1 through `constant_epochs`, then
/// linear decay over the remaining epochs.
pub fn lr_factor(epoch: usize, constant_epochs: usize, total_epochs: usize) -> f64 {
    let decay = total_epochs.saturating_sub(constant_epochs);
    let past = epoch.saturating_sub(constant_epochs);
    (1.0 - past as f64 / (decay + 1) as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        for e in 1..=100 {
            assert_eq!(lr_factor(e, 100, 200), 1.0);
        }
        let tail: Vec<f64> = (101..=200).map(|e| lr_factor(e, 100, 200)).collect();
        assert!(tail.windows(2).all(|w| w[1] < w[0]));
        assert!((tail[0] - 100.0 / 101.0).abs() < 1e-12);
        assert!((tail[99] - 1.0 / 101.0).abs() < 1e-12);
        assert_eq!(lr_factor(5, 10, 5), 1.0);
    }
}

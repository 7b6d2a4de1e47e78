//! Learning-rate scheduling for staged fine-tuning.
//!
//! Phase 1 freezes the encoder and trains the heads at the base rate; from
//! `freeze_epochs` on, the chosen encoder stages thaw at a smaller rate. A
//! plateau monitor scales both phases multiplicatively when validation loss
//! stalls, and the scale survives the unfreeze boundary so a decayed run
//! does not jump back up.

use crate::error::{Error, Result};

/// Validation-loss plateau detector with multiplicative decay.
#[derive(Debug, Clone)]
pub struct PlateauState {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Minimum improvement that counts as progress.
    pub threshold: f64,
    best: f64,
    bad_count: usize,
    scale: f64,
}

impl PlateauState {
    pub fn new(factor: f64, patience: usize, min_lr: f64, threshold: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::validation(format!(
                "plateau factor must be in (0, 1), got {factor}"
            )));
        }
        if min_lr < 0.0 || threshold < 0.0 {
            return Err(Error::validation(
                "plateau min_lr and threshold must be nonnegative",
            ));
        }
        Ok(PlateauState {
            factor,
            patience,
            min_lr,
            threshold,
            best: f64::INFINITY,
            bad_count: 0,
            scale: 1.0,
        })
    }

    /// Record one epoch's validation loss; decays the scale after more than
    /// `patience` consecutive non-improving epochs, then restarts the count.
    pub fn observe(&mut self, val_loss: f64) {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_count = 0;
        } else {
            self.bad_count += 1;
            if self.bad_count > self.patience {
                self.scale *= self.factor;
                self.bad_count = 0;
            }
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Apply the decay scale to a phase rate, floored at `min_lr`.
    pub fn apply(&self, lr: f64) -> f64 {
        (lr * self.scale).max(self.min_lr)
    }
}

/// Per-epoch learning rates for the two parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLr {
    pub head_lr: f64,
    /// None while the encoder is frozen.
    pub encoder_lr: Option<f64>,
}

/// Two-phase schedule: frozen encoder, then partial unfreeze.
#[derive(Debug, Clone)]
pub struct StagedSchedule {
    pub base_lr: f64,
    pub unfreeze_lr: f64,
    pub freeze_epochs: usize,
    pub plateau: PlateauState,
}

impl StagedSchedule {
    pub fn new(
        base_lr: f64,
        unfreeze_lr: f64,
        freeze_epochs: usize,
        plateau: PlateauState,
    ) -> Result<Self> {
        if !(base_lr > 0.0 && unfreeze_lr > 0.0) {
            return Err(Error::validation("learning rates must be positive"));
        }
        Ok(StagedSchedule {
            base_lr,
            unfreeze_lr,
            freeze_epochs,
            plateau,
        })
    }

    pub fn encoder_frozen(&self, epoch: usize) -> bool {
        epoch < self.freeze_epochs
    }

    pub fn epoch_lr(&self, epoch: usize) -> EpochLr {
        EpochLr {
            head_lr: self.plateau.apply(self.base_lr),
            encoder_lr: (!self.encoder_frozen(epoch))
                .then(|| self.plateau.apply(self.unfreeze_lr)),
        }
    }

    /// Feed the epoch's validation loss into the plateau monitor.
    pub fn observe(&mut self, val_loss: f64) {
        self.plateau.observe(val_loss);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plateau() -> PlateauState {
        PlateauState::new(0.5, 3, 1e-6, 1e-4).unwrap()
    }

    #[test]
    fn improving_losses_keep_full_scale() {
        let mut p = plateau();
        for loss in [1.0, 0.9, 0.8, 0.7, 0.6] {
            p.observe(loss);
        }
        assert_eq!(p.scale(), 1.0);
    }

    #[test]
    fn stall_decays_after_patience_is_exceeded() {
        let mut p = plateau();
        p.observe(1.0);
        // Three bad epochs tolerated, the fourth trips the decay.
        for _ in 0..3 {
            p.observe(1.0);
            assert_eq!(p.scale(), 1.0);
        }
        p.observe(1.0);
        assert_eq!(p.scale(), 0.5);
        // Counter restarts: three more bad epochs do not decay again yet.
        for _ in 0..3 {
            p.observe(1.0);
        }
        assert_eq!(p.scale(), 0.5);
        p.observe(1.0);
        assert_eq!(p.scale(), 0.25);
    }

    #[test]
    fn sub_threshold_improvement_counts_as_stall() {
        let mut p = plateau();
        p.observe(1.0);
        // Every drop stays within 1e-4 of the recorded best, so none counts.
        for loss in [0.99995, 0.99992, 0.99991, 0.999905] {
            p.observe(loss);
        }
        assert_eq!(p.scale(), 0.5);
    }

    #[test]
    fn lr_floors_at_min() {
        let mut p = plateau();
        for _ in 0..200 {
            p.observe(1.0);
        }
        assert_eq!(p.apply(1e-3), 1e-6);
    }

    #[test]
    fn schedule_freezes_then_thaws() {
        let s = StagedSchedule::new(1e-3, 2e-5, 8, plateau()).unwrap();
        for epoch in 0..8 {
            let lr = s.epoch_lr(epoch);
            assert!(s.encoder_frozen(epoch));
            assert_eq!(lr.head_lr, 1e-3);
            assert_eq!(lr.encoder_lr, None);
        }
        let lr = s.epoch_lr(8);
        assert!(!s.encoder_frozen(8));
        assert_eq!(lr.encoder_lr, Some(2e-5));
    }

    #[test]
    fn decay_persists_across_the_unfreeze_boundary() {
        let mut s = StagedSchedule::new(1e-3, 2e-5, 8, plateau()).unwrap();
        // Two full decays while frozen.
        s.observe(1.0);
        for _ in 0..8 {
            s.observe(1.0);
        }
        assert_eq!(s.plateau.scale(), 0.25);
        let lr = s.epoch_lr(9);
        assert_eq!(lr.head_lr, 2.5e-4);
        assert_eq!(lr.encoder_lr, Some(5e-6));
    }

    #[test]
    fn constructor_rejects_bad_arguments() {
        assert!(PlateauState::new(1.5, 3, 1e-6, 1e-4).is_err());
        assert!(PlateauState::new(0.5, 3, -1.0, 1e-4).is_err());
        assert!(StagedSchedule::new(0.0, 2e-5, 8, plateau()).is_err());
    }
}

//! Unpaired image translation between the demonstration domain (H) and a
//! novel domain (R), synthetic database construction, and the two-stage
//! fine-tuning that adapts a trained policy to a novel scene.

mod adapt;
mod nets;
mod translator;

use pour_nn::Tensor;

pub use adapt::{adapt, AdaptHyper, Adapted};
pub use nets::{Discriminator, Generator};
pub use translator::{
    image_grid_png, observations_to_tensor, synthesize_db, tensor_to_observation, train_translator, TranslatorHyper,
    TranslatorLog, TranslatorPair,
};

#[derive(Debug, thiserror::Error)]
pub enum ImaginaryError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Coarse(#[from] crate::coarse::CoarseError),
    #[error(transparent)]
    Fine(#[from] crate::fine::FineError),
    #[error(transparent)]
    Nn(#[from] pour_nn::NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Image-to-image map on `[B, 3, S, S]` batches.
pub trait ImageFn {
    fn apply(&self, x: &Tensor) -> Tensor;
}

/// One scalar realness score per image of a `[B, 3, S, S]` batch.
pub trait Critic {
    fn score(&self, x: &Tensor) -> Vec<f64>;
}

impl<F: Fn(&Tensor) -> Tensor> ImageFn for F {
    fn apply(&self, x: &Tensor) -> Tensor {
        self(x)
    }
}

/// Wraps a closure as a [`Critic`].
pub struct CriticFn<F>(pub F);

impl<F: Fn(&Tensor) -> Vec<f64>> Critic for CriticFn<F> {
    fn score(&self, x: &Tensor) -> Vec<f64> {
        (self.0)(x)
    }
}

fn mean_sq(scores: &[f64], target: f64) -> f64 {
    assert!(!scores.is_empty(), "empty batch");
    scores.iter().map(|s| (s - target) * (s - target)).sum::<f64>() / scores.len() as f64
}

/// `mean (D_R(x_r) - 1)^2 + mean D_R(G(x_h))^2`.
pub fn adv_loss_r(d_r: &dyn Critic, g: &dyn ImageFn, x_h: &Tensor, x_r: &Tensor) -> f64 {
    mean_sq(&d_r.score(x_r), 1.0) + mean_sq(&d_r.score(&g.apply(x_h)), 0.0)
}

/// `mean (D_H(x_h) - 1)^2 + mean D_H(G'(x_r))^2`.
pub fn adv_loss_h(d_h: &dyn Critic, g_prime: &dyn ImageFn, x_h: &Tensor, x_r: &Tensor) -> f64 {
    mean_sq(&d_h.score(x_h), 1.0) + mean_sq(&d_h.score(&g_prime.apply(x_r)), 0.0)
}

/// Per-image L1 (sum of absolute differences), averaged over the batch.
fn mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "round trip changed the image shape");
    let n = a.dim(0);
    assert!(n > 0, "empty batch");
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / n as f64
}

/// `mean ||G'(G(x_h)) - x_h||_1 + mean ||G(G'(x_r)) - x_r||_1`.
pub fn cycle_loss(g: &dyn ImageFn, g_prime: &dyn ImageFn, x_h: &Tensor, x_r: &Tensor) -> f64 {
    mean_l1(&g_prime.apply(&g.apply(x_h)), x_h) + mean_l1(&g.apply(&g_prime.apply(x_r)), x_r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub adv_r: f64,
    pub adv_h: f64,
    pub cycle: f64,
    pub total: f64,
}

pub fn combine_losses(adv_r: f64, adv_h: f64, cycle: f64, lambda: f64) -> LossParts {
    LossParts { adv_r, adv_h, cycle, total: adv_r + adv_h + lambda * cycle }
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &dyn ImageFn,
    g_prime: &dyn ImageFn,
    d_h: &dyn Critic,
    d_r: &dyn Critic,
    lambda: f64,
    x_h: &Tensor,
    x_r: &Tensor,
) -> LossParts {
    combine_losses(adv_loss_r(d_r, g, x_h, x_r), adv_loss_h(d_h, g_prime, x_h, x_r), cycle_loss(g, g_prime, x_h, x_r), lambda)
}

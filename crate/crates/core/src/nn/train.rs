use super::network::TrainableNetwork;
use super::ops::mse_loss;
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Factor applied to the learning rate at each milestone.
pub const LR_DECAY: f64 = 0.1;

/// Supplies `(corrupted, clean)` minibatches of a fixed shape.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<(Tensor4<f32>, Tensor4<f32>)>;
}

impl<F> BatchSource for F
where
    F: FnMut() -> Result<(Tensor4<f32>, Tensor4<f32>)>,
{
    fn next_batch(&mut self) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        self()
    }
}

/// Learning rate in effect at 0-based `iteration`: the base rate decayed by
/// [`LR_DECAY`] once for every milestone already reached.
pub fn scheduled_lr(base: f64, milestones: &[usize], iteration: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration >= m).count();
    base * LR_DECAY.powi(passed as i32)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Runs `iterations` steps of forward, MSE, backward and ADAM.
pub fn train_steps(
    net: &mut TrainableNetwork<f32>,
    source: &mut dyn BatchSource,
    iterations: usize,
    lr: f64,
    milestones: &[usize],
) -> Result<TrainTrace> {
    let mut trace = TrainTrace {
        losses: Vec::with_capacity(iterations),
        learning_rates: Vec::with_capacity(iterations),
    };
    for it in 0..iterations {
        let (input, target) = source.next_batch()?;
        let (out, cache) = net.forward_cached(&input)?;
        let (loss, grad) = mse_loss(&out, &target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                message: format!("loss is {loss}"),
            });
        }
        let (grads, _) = net.backward(&cache, &grad)?;
        let rate = scheduled_lr(lr, milestones, it);
        net.adam_step(&grads, rate).map_err(|e| match e {
            Error::Diverged { message, .. } => Error::Diverged {
                iteration: it,
                message,
            },
            other => other,
        })?;
        trace.losses.push(f64::from(loss));
        trace.learning_rates.push(rate);
    }
    Ok(trace)
}

/// Anything that maps a corrupted batch to a restored batch of the same shape.
pub trait Restorer {
    fn restore(&self, corrupted: &Tensor4<f32>) -> Result<Tensor4<f32>>;
}

impl Restorer for TrainableNetwork<f32> {
    fn restore(&self, corrupted: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.forward(corrupted)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, corrupted: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Ok(corrupted.clone())
    }
}

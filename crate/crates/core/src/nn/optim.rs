//! Adam optimizer and the plateau-driven learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::array::{Array, Scalar};
use crate::nn::params::ParamStore;

pub const DEFAULT_LEARNING_RATE: Scalar = 3e-4;
const BETA1: Scalar = 0.9;
const BETA2: Scalar = 0.999;
const ADAM_EPS: Scalar = 1e-8;

/// Epochs without a new best validation loss before the rate is halved.
pub const PLATEAU_HALVE_EPOCHS: usize = 3;
/// Epochs without a new best validation loss before training stops.
pub const PLATEAU_STOP_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Halved,
    Stopped,
}

/// Optimizer moments plus the schedule counters, aligned index-wise with
/// the store's entries.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: Scalar,
    pub step: u64,
    pub first_moments: Vec<Array>,
    pub second_moments: Vec<Array>,
    pub best_valid_loss: Option<Scalar>,
    pub plateau_epochs: usize,
    pub stalled_epochs: usize,
    pub stop: bool,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, learning_rate: Scalar) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        OptimizerState {
            learning_rate,
            step: 0,
            first_moments: store
                .entries()
                .iter()
                .map(|e| Array::zeros(e.value.shape()))
                .collect(),
            second_moments: store
                .entries()
                .iter()
                .map(|e| Array::zeros(e.value.shape()))
                .collect(),
            best_valid_loss: None,
            plateau_epochs: 0,
            stalled_epochs: 0,
            stop: false,
        }
    }
}

/// One Adam update over every trainable parameter. Gradients must have
/// been populated by a backward pass; a missing slot is a state error.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first_moments.len() != store.len() {
        return Err(Error::OptimizerState(format!(
            "state tracks {} parameters, store has {}",
            state.first_moments.len(),
            store.len()
        )));
    }
    for entry in store.entries() {
        if entry.trainable && entry.grad.is_none() {
            return Err(Error::OptimizerState(format!(
                "missing gradient for {}",
                entry.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as Scalar;
    let bias1 = 1.0 - BETA1.powf(t);
    let bias2 = 1.0 - BETA2.powf(t);
    for (i, entry) in store.entries_mut().iter_mut().enumerate() {
        if !entry.trainable {
            continue;
        }
        let grad = entry.grad.as_ref().expect("checked above");
        let m = &mut state.first_moments[i];
        let v = &mut state.second_moments[i];
        for ((p, &g), (m_i, v_i)) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m_i = BETA1 * *m_i + (1.0 - BETA1) * g;
            *v_i = BETA2 * *v_i + (1.0 - BETA2) * g * g;
            let m_hat = *m_i / bias1;
            let v_hat = *v_i / bias2;
            *p -= state.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Called once per epoch with the epoch's validation loss. Halves the
/// learning rate after `PLATEAU_HALVE_EPOCHS` consecutive epochs without a
/// new running-minimum loss and raises the stop flag after
/// `PLATEAU_STOP_EPOCHS` of them.
pub fn lr_schedule(state: &mut OptimizerState, valid_loss: Scalar) -> Vec<ScheduleEvent> {
    let improved = match state.best_valid_loss {
        None => true,
        Some(best) => valid_loss < best,
    };
    let mut events = Vec::new();
    if improved {
        state.best_valid_loss = Some(valid_loss);
        state.plateau_epochs = 0;
        state.stalled_epochs = 0;
        events.push(ScheduleEvent::Improved);
    } else {
        state.plateau_epochs += 1;
        state.stalled_epochs += 1;
        if state.plateau_epochs == PLATEAU_HALVE_EPOCHS {
            state.learning_rate /= 2.0;
            state.plateau_epochs = 0;
            events.push(ScheduleEvent::Halved);
        }
        if state.stalled_epochs == PLATEAU_STOP_EPOCHS {
            state.stop = true;
            events.push(ScheduleEvent::Stopped);
        }
    }
    events
}

//! Local training: E epochs of mini-batch SGD per communication round.
//!
//! Each client's mini-batch order is drawn from a stream seeded by
//! (run_seed, client id, round), so results are bitwise independent of the
//! scheduling order of other clients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{FedError, Result};
use crate::model::LossModel;
use crate::schedule::LrSchedule;
use crate::vector::ParamVector;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: LossModel,
    pub p: f64,
    pub w: ParamVector,
}

/// Result of one round of local training.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub w: ParamVector,
    /// F_i at the final local parameters (full-dataset loss).
    pub loss_final: f64,
    /// ‖g‖² for every mini-batch gradient taken this round.
    pub grad_sq: Vec<f64>,
    /// Local parameters after each step, when trajectory recording is on.
    /// `trajectory[k]` is the position after k+1 steps.
    pub trajectory: Option<Vec<ParamVector>>,
    /// Learning rate used at each step.
    pub etas: Vec<f64>,
}

fn round_rng(run_seed: u64, client_id: usize, round: u64) -> ChaCha12Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&run_seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(client_id as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&round.to_le_bytes());
    bytes[24..32].copy_from_slice(&0x636c69656e74_u64.to_le_bytes());
    ChaCha12Rng::from_seed(bytes)
}

/// Mini-batch steps per epoch for a local dataset of `n` and batch size
/// `b` (the last short batch is kept).
pub fn steps_per_epoch(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

/// Run E local epochs of mini-batch SGD starting from `w_global`.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    state: &ClientState,
    w_global: &ParamVector,
    round: u64,
    epochs: usize,
    batch_size: usize,
    schedule: &LrSchedule,
    run_seed: u64,
    record_trajectory: bool,
) -> Result<UpdateResult> {
    let n = state.model.num_samples();
    if n == 0 {
        return Err(FedError::Config(format!("client {} has no data", state.id)));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(FedError::Config("epochs and batch size must be ≥ 1".into()));
    }
    let mut rng = round_rng(run_seed, state.id, round);
    let steps_per_round = (epochs * steps_per_epoch(n, batch_size)) as u64;
    let mut w = w_global.clone();
    let mut grad_sq = Vec::new();
    let mut etas = Vec::new();
    let mut trajectory = record_trajectory.then(Vec::new);
    let mut step: u64 = 0;
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(batch_size) {
            let t = round * steps_per_round + step;
            let eta = schedule.lr_at(t, round);
            let g = state.model.grad_minibatch(&w, batch)?;
            grad_sq.push(g.norm_sq());
            etas.push(eta);
            w.add_scaled(-eta, &g);
            w.check_finite("client_update step")?;
            if let Some(tr) = trajectory.as_mut() {
                tr.push(w.clone());
            }
            step += 1;
        }
    }
    let loss_final = state.model.loss_eval(&w)?;
    Ok(UpdateResult {
        w,
        loss_final,
        grad_sq,
        trajectory,
        etas,
    })
}

//! Temperature-scaled contrastive losses and their weighted combination.
//!
//! Both losses share one kernel:
//!   −log( e^{cos(q,d⁺)/τ} / (e^{cos(q,d⁺)/τ} + Σ e^{cos(q,d⁻)/τ}) )
//! computed through a max-shifted log-sum-exp, so τ as low as 1e-4 with
//! cosines in [−1,1] cannot overflow. The complementary variant applies the
//! same kernel to the masked query against image-only representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub min_match_len: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.01,
            lambda: 0.0011,
            min_match_len: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::contract("temperature must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(Error::contract("lambda must be non-negative"));
        }
        if self.min_match_len == 0 {
            return Err(Error::contract("min_match_len must be at least 1"));
        }
        Ok(())
    }
}

/// Contrastive loss of a query representation against one positive and a
/// non-empty set of negatives.
pub fn contrastive_loss(
    tape: &mut Tape,
    query: Var,
    positive: Var,
    negatives: &[Var],
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::contract("temperature must be positive"));
    }
    if negatives.is_empty() {
        return Err(Error::contract("contrastive loss needs at least one negative"));
    }
    let inv_tau = 1.0 / temperature;
    let pos_cos = tape.cosine(query, positive)?;
    let pos_logit = tape.scale(pos_cos, inv_tau);
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(pos_logit);
    for &neg in negatives {
        let c = tape.cosine(query, neg)?;
        logits.push(tape.scale(c, inv_tau));
    }
    let stacked = tape.stack_scalars(&logits)?;
    let lse = tape.log_sum_exp(stacked)?;
    tape.sub(lse, pos_logit)
}

/// Complementary loss: same kernel, applied to the masked-query
/// representation against image-only document representations.
pub fn complementary_loss(
    tape: &mut Tape,
    masked_query: Var,
    positive_image: Var,
    negative_images: &[Var],
    temperature: f64,
) -> Result<Var> {
    contrastive_loss(tape, masked_query, positive_image, negative_images, temperature)
}

/// Combined objective: L = L_c + λ·L_comp. A missing complementary term
/// (e.g. a query whose positive has no image) contributes zero.
pub fn total_loss(tape: &mut Tape, l_c: Var, l_comp: Option<Var>, lambda: f64) -> Result<Var> {
    match l_comp {
        Some(comp) if lambda != 0.0 => {
            let scaled = tape.scale(comp, lambda);
            tape.add(l_c, scaled)
        }
        _ => Ok(l_c),
    }
}

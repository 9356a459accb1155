//! Support vectors: masked pooling of support features and the split of the
//! ground-truth foreground into the part an initial prediction recovered and
//! the part it missed.
//!
//! Masks never carry gradient. Vectors are differentiable in the features.

use crate::error::{Error, Result};
use crate::numerics::{Mask, Tape, Tensor, Var};

/// The initial, primary and auxiliary vectors with the pixel counts of the
/// masks they were pooled over. `V` is a tape handle or a plain tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportVectors<V> {
    pub v_s: V,
    pub v_pri: V,
    pub v_aux: V,
    pub n_fg: usize,
    pub n_pri: usize,
    pub n_aux: usize,
    /// Foreground pixels the prediction recovered.
    pub primary_mask: Mask,
    /// Foreground pixels the prediction missed.
    pub auxiliary_mask: Mask,
}

/// Masked average of the support features over the support mask.
pub fn initial_vector(tape: &mut Tape<'_>, features: Var, mask: &Mask) -> Result<Var> {
    tape.masked_mean(features, mask)
}

/// Splits the support foreground by the predicted mask `m_hat` and pools each
/// part. `v_s` must be the initial vector of `features` under `m_s`.
///
/// An empty missed region makes `v_aux` equal to `v_pri`; an empty recovered
/// region makes `v_pri` (and then `v_aux`) equal to `v_s`.
pub fn decompose_from(
    tape: &mut Tape<'_>,
    features: Var,
    v_s: Var,
    m_s: &Mask,
    m_hat: &Mask,
) -> Result<SupportVectors<Var>> {
    m_s.check_same_shape(m_hat)?;
    let n_fg = m_s.count();
    if n_fg == 0 {
        return Err(Error::EmptyMask("support mask has no foreground".into()));
    }
    let primary_mask = m_s.and(m_hat)?;
    let auxiliary_mask = m_s.and_not(m_hat)?;
    let (n_pri, n_aux) = (primary_mask.count(), auxiliary_mask.count());
    let (v_pri, v_aux) = if n_pri == 0 {
        (v_s, v_s)
    } else {
        let v_pri = tape.masked_mean(features, &primary_mask)?;
        let v_aux = if n_aux == 0 {
            v_pri
        } else {
            tape.masked_mean(features, &auxiliary_mask)?
        };
        (v_pri, v_aux)
    };
    Ok(SupportVectors {
        v_s,
        v_pri,
        v_aux,
        n_fg,
        n_pri,
        n_aux,
        primary_mask,
        auxiliary_mask,
    })
}

/// [`decompose_from`] with the initial vector computed here.
pub fn decompose(
    tape: &mut Tape<'_>,
    features: Var,
    m_s: &Mask,
    m_hat: &Mask,
) -> Result<SupportVectors<Var>> {
    let v_s = initial_vector(tape, features, m_s)?;
    decompose_from(tape, features, v_s, m_s, m_hat)
}

/// Value-level [`decompose`].
pub fn decompose_values(
    features: &Tensor,
    m_s: &Mask,
    m_hat: &Mask,
) -> Result<SupportVectors<Tensor>> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let sv = decompose(&mut tape, f, m_s, m_hat)?;
    Ok(SupportVectors {
        v_s: tape.value(sv.v_s).clone(),
        v_pri: tape.value(sv.v_pri).clone(),
        v_aux: tape.value(sv.v_aux).clone(),
        n_fg: sv.n_fg,
        n_pri: sv.n_pri,
        n_aux: sv.n_aux,
        primary_mask: sv.primary_mask,
        auxiliary_mask: sv.auxiliary_mask,
    })
}

/// Broadcasts each vector over every pixel of `features` and appends it
/// after the existing channels, in order.
pub fn expand_concat(features: &Tensor, vectors: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let vs: Vec<Var> = vectors.iter().map(|v| tape.input((*v).clone())).collect();
    let out = tape.expand_concat(f, &vs)?;
    Ok(tape.value(out).clone())
}

use pflow_tensor::{Real, Tape, Tensor, Var};

use crate::error::{invalid, Result};

const COS_CLAMP: f64 = 1e-7;

/// Additive angular margin softmax over `emb: [B × D]` (unit rows) and
/// class weights `w: [K × D]`, which are row-normalized here.
///
/// The true-class logit is `s·cos(θ_y + m)`, expanded as
/// `cos θ·cos m − sin θ·sin m` with `cos θ` clamped away from ±1.
pub fn aam_softmax_loss<T: Real>(
    tape: &mut Tape<T>,
    emb: Var,
    w: Var,
    labels: &[usize],
    s: f64,
    m: f64,
) -> Result<Var> {
    let (b, k) = (tape.shape(emb)[0], tape.shape(w)[0]);
    if labels.len() != b {
        return Err(invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    let wsq = tape.square(w);
    let wn = tape.sum(wsq, 1)?;
    let wn = tape.add_scalar(wn, T::lit(1e-12));
    let wn = tape.sqrt(wn)?;
    let w_unit = tape.div(w, wn)?;
    let wt = tape.transpose(w_unit)?;
    let cos = tape.matmul(emb, wt)?;
    let cos = tape.clamp(cos, T::lit(-1.0 + COS_CLAMP), T::lit(1.0 - COS_CLAMP));

    let cos2 = tape.square(cos);
    let one_minus = tape.affine(cos2, T::lit(-1.0), T::one());
    let sin = tape.sqrt(one_minus)?;
    let a = tape.scale(cos, T::lit(m.cos()));
    let bsin = tape.scale(sin, T::lit(m.sin()));
    let cos_m = tape.sub(a, bsin)?;

    let mut mask = vec![T::zero(); b * k];
    for (i, &l) in labels.iter().enumerate() {
        mask[i * k + l] = T::one();
    }
    let mask = tape.constant(Tensor::new(&[b, k], mask)?);
    let delta = tape.sub(cos_m, cos)?;
    let delta = tape.mul(delta, mask)?;
    let logits = tape.add(cos, delta)?;
    let logits = tape.scale(logits, T::lit(s));

    let lse = tape.logsumexp(logits, 1)?;
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum(picked, 1)?;
    let nll = tape.sub(lse, picked)?;
    Ok(tape.mean_all(nll))
}

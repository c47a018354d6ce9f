//! Hinge losses over mixed projection discriminator outputs.

use serde::{Deserialize, Serialize};
use vidpred_tensor::{Real, Tape, Var};

use crate::error::{invalid, Result};
use crate::nets::Scores;

/// How per-time scores are combined into discriminator outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionHead {
    /// `o[b, b′, t] = r_x[b, t] + Σ_t′ r_xy[b′, t′]`.
    #[default]
    Mixed,
    /// `o[b, t] = r_x[b, t] + r_xy[b, t]`.
    Plain,
}

/// `[B, T′]`, `[B, T′]` → `o [B, B, T′]`.
pub fn mixed_projection<F: Real>(tape: &mut Tape<F>, r_x: Var, r_xy: Var) -> Result<Var> {
    let (a, b) = (tape.shape(r_x).to_vec(), tape.shape(r_xy).to_vec());
    if a.len() != 2 || a != b {
        return Err(invalid(format!("r_x {a:?} and r_xy {b:?} must both be [B, T']")));
    }
    let (n, t) = (a[0], a[1]);
    let s = tape.sum_axis(r_xy, 1)?;
    let s = tape.reshape(s, &[1, n, 1])?;
    let s = tape.expand(s, &[n, n, t])?;
    let x = tape.reshape(r_x, &[n, 1, t])?;
    let x = tape.expand(x, &[n, n, t])?;
    Ok(tape.add(x, s)?)
}

/// `o [B, T′] = r_x + r_xy`, the per-time original projection head.
pub fn plain_projection<F: Real>(tape: &mut Tape<F>, r_x: Var, r_xy: Var) -> Result<Var> {
    let (a, b) = (tape.shape(r_x).to_vec(), tape.shape(r_xy).to_vec());
    if a.len() != 2 || a != b {
        return Err(invalid(format!("r_x {a:?} and r_xy {b:?} must both be [B, T']")));
    }
    Ok(tape.add(r_x, r_xy)?)
}

/// Discriminator outputs of every sub-discriminator.
pub fn project_all<F: Real>(tape: &mut Tape<F>, scores: &[Scores], head: ProjectionHead) -> Result<Vec<Var>> {
    scores
        .iter()
        .map(|s| match head {
            ProjectionHead::Mixed => mixed_projection(tape, s.r_x, s.r_xy),
            ProjectionHead::Plain => plain_projection(tape, s.r_x, s.r_xy),
        })
        .collect()
}

/// `Σ_families mean(ReLU(1 + o_fake)) + mean(ReLU(1 − o_real))`.
pub fn hinge_d_loss<F: Real>(tape: &mut Tape<F>, fake: &[Var], real: &[Var]) -> Result<Var> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(invalid(format!(
            "{} fake and {} real discriminator outputs",
            fake.len(),
            real.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&f, &r) in fake.iter().zip(real) {
        let lf = tape.add_scalar(f, F::one());
        let lf = tape.relu(lf);
        let lf = tape.mean(lf);
        let lr = tape.one_minus(r);
        let lr = tape.relu(lr);
        let lr = tape.mean(lr);
        let term = tape.add(lf, lr)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one family"))
}

/// Generator loss split into its terms.
#[derive(Clone, Copy, Debug)]
pub struct GLoss {
    pub total: Var,
    pub adversarial: Var,
    pub penalty: Option<Var>,
}

/// `−Σ_families mean(o_fake)`, plus the orthogonality penalty when given.
pub fn g_loss<F: Real>(tape: &mut Tape<F>, fake: &[Var], penalty: Option<Var>) -> Result<GLoss> {
    if fake.is_empty() {
        return Err(invalid("generator loss needs at least one discriminator output"));
    }
    let mut adv: Option<Var> = None;
    for &f in fake {
        let m = tape.mean(f);
        adv = Some(match adv {
            Some(a) => tape.sub(a, m)?,
            None => tape.neg(m),
        });
    }
    let adversarial = adv.expect("non-empty");
    let total = match penalty {
        Some(p) => tape.add(adversarial, p)?,
        None => adversarial,
    };
    Ok(GLoss {
        total,
        adversarial,
        penalty,
    })
}

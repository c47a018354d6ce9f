//! Convolutional recurrent units with a shared step interface.
//!
//! Every unit maps `(h_{t−1} [B, C, H, W], x_t [B, Cx, H, W])` to
//! `h_t [B, C, H, W]`. ConvLSTM packs its hidden state and memory cell into
//! the two channel halves of the same tensor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vidpred_tensor::{Real, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::layers::Conv;
use crate::params::{Cx, Init};
use crate::warp::{warp_apply, HyperNet, WarpKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    #[serde(rename = "convgru")]
    ConvGru,
    #[serde(rename = "convlstm")]
    ConvLstm,
    #[serde(rename = "tsru_c")]
    TsruC,
    #[serde(rename = "tsru_p")]
    TsruP,
    #[serde(rename = "tsru_s")]
    TsruS,
    #[serde(rename = "ptsru")]
    Ptsru,
    #[serde(rename = "ktrajgru")]
    KTrajGru,
}

impl UnitKind {
    pub const ALL: [UnitKind; 7] = [
        UnitKind::ConvGru,
        UnitKind::ConvLstm,
        UnitKind::TsruC,
        UnitKind::TsruP,
        UnitKind::TsruS,
        UnitKind::Ptsru,
        UnitKind::KTrajGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnitKind::ConvGru => "convgru",
            UnitKind::ConvLstm => "convlstm",
            UnitKind::TsruC => "tsru_c",
            UnitKind::TsruP => "tsru_p",
            UnitKind::TsruS => "tsru_s",
            UnitKind::Ptsru => "ptsru",
            UnitKind::KTrajGru => "ktrajgru",
        }
    }

    /// The warp parameterization, for transformation-based units.
    pub fn warp(self) -> Option<WarpKind> {
        match self {
            UnitKind::TsruC | UnitKind::TsruP | UnitKind::TsruS | UnitKind::KTrajGru => Some(WarpKind::Factorized),
            UnitKind::Ptsru => Some(WarpKind::Pixelwise),
            UnitKind::ConvGru | UnitKind::ConvLstm => None,
        }
    }

    pub fn default_activation(self) -> Activation {
        match self {
            UnitKind::KTrajGru => Activation::Tanh,
            _ => Activation::Relu,
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UnitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown recurrent unit {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitConfig {
    pub kind: UnitKind,
    /// Channels of the carried state (`C`; ConvLSTM splits it in halves).
    pub hidden: usize,
    /// Channels of the per-step input `x_t`.
    pub input: usize,
    pub k: usize,
    /// Number of kernels in a factorized bank.
    pub n_kernels: usize,
    /// `None` selects the unit's default.
    pub activation: Option<Activation>,
    pub kernel_softmax: bool,
}

impl UnitConfig {
    pub fn new(kind: UnitKind, hidden: usize, input: usize) -> Self {
        UnitConfig {
            kind,
            hidden,
            input,
            k: 3,
            n_kernels: 9,
            activation: None,
            kernel_softmax: true,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(self.kind.default_activation())
    }
}

/// Values forced into a step in place of what the unit would compute.
#[derive(Clone, Debug, Default)]
pub struct StepOverrides<F: Real> {
    /// Pixelwise kernels `[B, H, W, k²]` replacing the hypernetwork output.
    pub warp: Option<Tensor<F>>,
    /// Update gate `u`.
    pub u: Option<Tensor<F>>,
    /// Reset gate `r`.
    pub r: Option<Tensor<F>>,
}

/// Result of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepOut {
    pub h: Var,
    /// Pixelwise kernels used to warp `h_{t−1}`, when the unit warps.
    pub warp: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct RecurrentUnit {
    pub cfg: UnitConfig,
    w_r: Option<Conv>,
    w_c: Option<Conv>,
    w_u: Option<Conv>,
    /// ConvLSTM: one convolution producing the four gates.
    w_lstm: Option<Conv>,
    hyper: Option<HyperNet>,
}

impl RecurrentUnit {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, cfg: UnitConfig) -> Result<Self> {
        let (c, cx, k) = (cfg.hidden, cfg.input, cfg.k);
        if c == 0 || cx == 0 || k % 2 == 0 {
            return Err(invalid(format!(
                "recurrent unit needs positive widths and an odd kernel, got C={c}, Cx={cx}, k={k}"
            )));
        }
        let mut s = init.scope(name);
        let mut unit = RecurrentUnit {
            cfg: cfg.clone(),
            w_r: None,
            w_c: None,
            w_u: None,
            w_lstm: None,
            hyper: None,
        };
        match cfg.kind {
            UnitKind::ConvLstm => {
                if c % 2 != 0 {
                    return Err(invalid(format!("ConvLSTM state width {c} must be even")));
                }
                unit.w_lstm = Some(Conv::new(&mut s, "w_gates", c / 2 + cx, 2 * c, k, 2, true));
            }
            kind => {
                if matches!(kind, UnitKind::ConvGru | UnitKind::KTrajGru) {
                    unit.w_r = Some(Conv::new(&mut s, "w_r", c + cx, c, k, 2, true));
                }
                unit.w_c = Some(Conv::new(&mut s, "w_c", c + cx, c, k, 2, true));
                let u_in = if matches!(kind, UnitKind::TsruS | UnitKind::Ptsru) {
                    2 * c
                } else {
                    c + cx
                };
                unit.w_u = Some(Conv::new(&mut s, "w_u", u_in, c, k, 2, true));
                if let Some(wk) = kind.warp() {
                    unit.hyper = Some(HyperNet::new(&mut s, "f", wk, c + cx, k, cfg.n_kernels, cfg.kernel_softmax));
                }
            }
        }
        Ok(unit)
    }

    /// The same parameters stepped with a different gate flow, for example
    /// K-TrajGRU → ConvGRU or TSRU_c → TSRU_p. A gate whose input width
    /// differs between the two flows (the TSRU_s update gate) must then be
    /// forced through [`StepOverrides`].
    pub fn as_kind(&self, kind: UnitKind) -> Result<Self> {
        let mut other = self.clone();
        other.cfg.kind = kind;
        other.cfg.activation = Some(self.cfg.activation());
        let needs_r = matches!(kind, UnitKind::ConvGru | UnitKind::KTrajGru);
        let ok = kind != UnitKind::ConvLstm
            && self.cfg.kind != UnitKind::ConvLstm
            && (!needs_r || self.w_r.is_some())
            && (kind.warp().is_none() || kind.warp() == self.cfg.kind.warp());
        if !ok {
            return Err(invalid(format!("cannot step {} parameters as {kind}", self.cfg.kind)));
        }
        if kind.warp().is_none() {
            other.hyper = None;
        }
        Ok(other)
    }

    fn rho<F: Real>(&self, cx: &mut Cx<'_, F>, x: Var) -> Var {
        match self.cfg.activation() {
            Activation::Relu => cx.tape.relu(x),
            Activation::Tanh => cx.tape.tanh(x),
        }
    }

    fn gate<F: Real>(&self, cx: &mut Cx<'_, F>, conv: &Option<Conv>, inputs: [Var; 2], forced: &Option<Tensor<F>>) -> Result<Var> {
        if let Some(t) = forced {
            return Ok(cx.constant(t.clone()));
        }
        let conv = conv.as_ref().ok_or_else(|| invalid("missing gate convolution"))?;
        let z = cx.tape.concat(&inputs, 1)?;
        let z = conv.forward(cx, z)?;
        Ok(cx.tape.sigmoid(z))
    }

    fn candidate<F: Real>(&self, cx: &mut Cx<'_, F>, h: Var, x: Var) -> Result<Var> {
        let conv = self.w_c.as_ref().ok_or_else(|| invalid("missing candidate convolution"))?;
        let z = cx.tape.concat(&[h, x], 1)?;
        let z = conv.forward(cx, z)?;
        Ok(self.rho(cx, z))
    }

    fn warped<F: Real>(&self, cx: &mut Cx<'_, F>, h: Var, x: Var, ov: &StepOverrides<F>) -> Result<(Var, Var)> {
        let w = match &ov.warp {
            Some(t) => cx.constant(t.clone()),
            None => {
                let f = self.hyper.as_ref().ok_or_else(|| invalid("unit has no hypernetwork"))?;
                f.forward(cx, h, x)?.pixelwise(&mut cx.tape)?
            }
        };
        Ok((warp_apply(&mut cx.tape, h, w)?, w))
    }

    fn check_shapes<F: Real>(&self, cx: &Cx<'_, F>, h: Var, x: Var) -> Result<()> {
        let (hs, xs) = (cx.shape(h), cx.shape(x));
        let ok = hs.len() == 4
            && xs.len() == 4
            && hs[0] == xs[0]
            && hs[1] == self.cfg.hidden
            && xs[1] == self.cfg.input
            && hs[2..] == xs[2..];
        if !ok {
            return Err(invalid(format!(
                "{} step expects h [B, {}, H, W] and x [B, {}, H, W], got {hs:?} and {xs:?}",
                self.cfg.kind, self.cfg.hidden, self.cfg.input
            )));
        }
        Ok(())
    }

    pub fn step<F: Real>(&self, cx: &mut Cx<'_, F>, h_prev: Var, x: Var) -> Result<StepOut> {
        self.step_with(cx, h_prev, x, &StepOverrides::default())
    }

    pub fn step_with<F: Real>(&self, cx: &mut Cx<'_, F>, h: Var, x: Var, ov: &StepOverrides<F>) -> Result<StepOut> {
        self.check_shapes(cx, h, x)?;
        match self.cfg.kind {
            UnitKind::ConvGru => {
                let r = self.gate(cx, &self.w_r, [h, x], &ov.r)?;
                let hr = cx.tape.mul(r, h)?;
                let c = self.candidate(cx, hr, x)?;
                let u = self.gate(cx, &self.w_u, [h, x], &ov.u)?;
                Ok(StepOut {
                    h: cx.tape.lerp(u, h, c)?,
                    warp: None,
                })
            }
            UnitKind::TsruC | UnitKind::TsruP => {
                let (hw, w) = self.warped(cx, h, x, ov)?;
                let c_src = if self.cfg.kind == UnitKind::TsruC { hw } else { h };
                let c = self.candidate(cx, c_src, x)?;
                let u = self.gate(cx, &self.w_u, [h, x], &ov.u)?;
                Ok(StepOut {
                    h: cx.tape.lerp(u, hw, c)?,
                    warp: Some(w),
                })
            }
            UnitKind::TsruS | UnitKind::Ptsru => {
                let (hw, w) = self.warped(cx, h, x, ov)?;
                let c = self.candidate(cx, hw, x)?;
                let u = self.gate(cx, &self.w_u, [hw, c], &ov.u)?;
                Ok(StepOut {
                    h: cx.tape.lerp(u, hw, c)?,
                    warp: Some(w),
                })
            }
            UnitKind::KTrajGru => {
                let (hw, w) = self.warped(cx, h, x, ov)?;
                let r = self.gate(cx, &self.w_r, [hw, x], &ov.r)?;
                let hr = cx.tape.mul(r, hw)?;
                let c = self.candidate(cx, hr, x)?;
                let u = self.gate(cx, &self.w_u, [hw, x], &ov.u)?;
                Ok(StepOut {
                    h: cx.tape.lerp(u, h, c)?,
                    warp: Some(w),
                })
            }
            UnitKind::ConvLstm => self.lstm_step(cx, h, x, ov),
        }
    }

    /// Gates `i, f, o` (sigmoid) and candidate `g` (ρ) from one convolution
    /// over `[h; x]`; `cell' = f⊙cell + i⊙g`, `h' = o⊙ρ(cell')`.
    /// `ov.u` forces the forget gate and `ov.r` the input gate.
    fn lstm_step<F: Real>(&self, cx: &mut Cx<'_, F>, state: Var, x: Var, ov: &StepOverrides<F>) -> Result<StepOut> {
        let half = self.cfg.hidden / 2;
        let h = cx.tape.narrow(state, 1, 0, half)?;
        let cell = cx.tape.narrow(state, 1, half, half)?;
        let conv = self.w_lstm.as_ref().ok_or_else(|| invalid("missing ConvLSTM gates"))?;
        let z = cx.tape.concat(&[h, x], 1)?;
        let z = conv.forward(cx, z)?;
        let gate = |cx: &mut Cx<'_, F>, i: usize| cx.tape.narrow(z, 1, i * half, half);
        let (zi, zf, zo, zg) = (gate(cx, 0)?, gate(cx, 1)?, gate(cx, 2)?, gate(cx, 3)?);
        let i = match &ov.r {
            Some(t) => cx.constant(t.clone()),
            None => cx.tape.sigmoid(zi),
        };
        let f = match &ov.u {
            Some(t) => cx.constant(t.clone()),
            None => cx.tape.sigmoid(zf),
        };
        let o = cx.tape.sigmoid(zo);
        let g = self.rho(cx, zg);
        let keep = cx.tape.mul(f, cell)?;
        let write = cx.tape.mul(i, g)?;
        let cell = cx.tape.add(keep, write)?;
        let act = self.rho(cx, cell);
        let h = cx.tape.mul(o, act)?;
        Ok(StepOut {
            h: cx.tape.concat(&[h, cell], 1)?,
            warp: None,
        })
    }
}

/// Steps `unit` over `inputs` starting from `init`; returns every step's output.
pub fn unit_rollout<F: Real>(cx: &mut Cx<'_, F>, unit: &RecurrentUnit, init: Var, inputs: &[Var]) -> Result<Vec<StepOut>> {
    let mut h = init;
    let mut outs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let o = unit.step(cx, h, x)?;
        h = o.h;
        outs.push(o);
    }
    Ok(outs)
}

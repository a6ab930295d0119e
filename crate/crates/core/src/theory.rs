//! Closed-form values of the quantities that govern the first two training
//! steps, evaluated straight from [`PretrainParams`] with no model in sight.
//!
//! With `z = ½v_0(c) + ½v_0(s)` the per-category margins are
//! `m = ⟨v_0(c) − v_0(s), e_c − softmax(z)⟩`, which factor as `λ · (log-odds gap)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pretrain::PretrainParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueLevels {
    pub v0_cc: f64,
    pub v0_cs_memorized: f64,
    pub o_c: f64,
    pub o_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margins {
    pub m_c: f64,
    pub m_cs: f64,
    pub lambda_c: f64,
    pub lambda_cs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionGains {
    pub a1: f64,
    pub a2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedForms {
    pub levels: ValueLevels,
    pub margins: Margins,
    pub gains: AttentionGains,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn closed_form_v0(params: &PretrainParams) -> ValueLevels {
    ValueLevels {
        v0_cc: params.v0_context(),
        v0_cs_memorized: params.v0_memorized(),
        o_c: params.o_c,
        o_r: params.o_r,
    }
}

pub fn closed_form_m(params: &PretrainParams) -> Margins {
    let b = params.background_mass();
    let ln_b = b.ln();
    let (lc, lm) = (logit(params.delta_c), logit(params.delta_m));
    let lambda_c = 1.0 / (1.0 + (0.5 * lc + 0.5 * ln_b + 0.5 * params.o_c).exp() / b);
    let lambda_cs = 1.0 / (1.0 + (0.5 * lc + 0.5 * lm + ln_b).exp() / b);
    Margins {
        m_c: lambda_c * (params.v0_context() - params.o_c),
        m_cs: lambda_cs * (lc - lm),
        lambda_c,
        lambda_cs,
    }
}

/// Score gains after one step on an evenly split mixture of `n` examples:
/// `A₁ = ((n+2)/n)m_C + m_CS` and `A₂ = m_C + ((n+2)/n)m_CS`.
pub fn closed_form_a(params: &PretrainParams, n: usize) -> Result<AttentionGains> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!("closed-form gains need n >= 2, got {n}")));
    }
    let m = closed_form_m(params);
    let r = (n as f64 + 2.0) / n as f64;
    let gains = AttentionGains {
        a1: r * m.m_c + m.m_cs,
        a2: m.m_c + r * m.m_cs,
    };
    let checks = [
        (m.m_c > 0.0, "m_C > 0"),
        (m.m_cs < 0.0, "m_CS < 0"),
        (m.m_c.abs() > m.m_cs.abs(), "|m_C| > |m_CS|"),
        (gains.a1 > 2.0 / n as f64 * m.m_c, "A1 > (2/n) m_C"),
        (gains.a1 > gains.a2, "A1 > A2"),
    ];
    if let Some((_, name)) = checks.iter().find(|(ok, _)| !ok) {
        return Err(Error::Constraint(format!("closed-form invariant {name} fails")));
    }
    Ok(gains)
}

pub fn closed_forms(params: &PretrainParams, n: usize) -> Result<ClosedForms> {
    Ok(ClosedForms {
        levels: closed_form_v0(params),
        margins: closed_form_m(params),
        gains: closed_form_a(params, n)?,
    })
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ_c` after one step at rate `η`: `1/(1 + exp(−ηA/8))` for C (A₁) and C+S (A₂).
pub fn predict_t1_attention(params: &PretrainParams, n: usize, eta: f64) -> Result<(f64, f64)> {
    let g = closed_form_a(params, n)?;
    Ok((logistic(eta * g.a1 / 8.0), logistic(eta * g.a2 / 8.0)))
}

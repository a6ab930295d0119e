//! `trace.csv` writer. Column order is fixed; quantities that do not apply
//! to a run (no S points, no test set, trainable `W_V`) are left empty.
//! Numbers use Rust's shortest round-trip formatting, so output is
//! byte-stable across runs.

use std::io::Write;

use crate::dynamics::DynamicsTrace;
use crate::model::Category;

pub const COLUMNS: [&str; 12] = [
    "step",
    "loss_total",
    "loss_C",
    "loss_CS",
    "loss_S",
    "sigma_c_C",
    "sigma_c_CS",
    "grad_proj_thetaC",
    "grad_proj_thetaS",
    "M_C",
    "m_C_numeric",
    "m_CS_numeric",
];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace<W: Write>(trace: &DynamicsTrace<f64>, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", COLUMNS.join(","))?;
    for r in &trace.records {
        let get = |m: &std::collections::BTreeMap<Category, f64>, c| m.get(&c).copied();
        let row = [
            r.step.to_string(),
            r.loss_total.to_string(),
            cell(get(&r.loss_by_category, Category::Context)),
            cell(get(&r.loss_by_category, Category::ContextSubject)),
            cell(r.loss_s),
            cell(get(&r.sigma_c_by_category, Category::Context)),
            cell(get(&r.sigma_c_by_category, Category::ContextSubject)),
            r.grad_proj.theta_c.to_string(),
            r.grad_proj.theta_s.to_string(),
            cell(r.conflict_metric),
            cell(get(&r.m_numeric, Category::Context)),
            cell(get(&r.m_numeric, Category::ContextSubject)),
        ];
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn trace_to_string(trace: &DynamicsTrace<f64>) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

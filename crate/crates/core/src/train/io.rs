//! CSV writers. Floats use 17 significant digits so values round-trip exactly.

use std::fmt::Write as _;

use super::records::TrainRecord;
use super::surface::SurfaceDump;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const RECORD_COLUMNS: [&str; 13] = [
    "step",
    "epoch",
    "task_loss",
    "penalty_value",
    "tau",
    "fwd_nfe",
    "bwd_nfe",
    "fwd_rel_residual",
    "bwd_rel_residual",
    "valid_mse",
    "fro_sq_oracle",
    "rho_estimate",
    "lr",
];

pub fn records_csv(records: &[TrainRecord]) -> String {
    let mut out = RECORD_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            fmt_opt(r.task_loss),
            fmt_opt(r.penalty_value),
            u8::from(r.tau),
            r.fwd_nfe,
            r.bwd_nfe,
            fmt_opt(r.fwd_rel_residual),
            fmt_opt(r.bwd_rel_residual),
            fmt_opt(r.valid_mse),
            fmt_opt(r.fro_sq_oracle),
            fmt_opt(r.rho_estimate),
            fmt_f64(r.lr),
        )
        .expect("write to string");
    }
    out
}

/// `x,z,f` triples of the layer surface.
pub fn surface_csv(dump: &SurfaceDump) -> String {
    let mut out = String::from("x,z,f\n");
    for p in &dump.grid {
        writeln!(out, "{},{},{}", fmt_f64(p.x), fmt_f64(p.z), fmt_f64(p.f)).expect("write to string");
    }
    out
}

pub fn equilibrium_csv(dump: &SurfaceDump) -> String {
    let mut out = String::from("x,z_star,rel_residual,nfe\n");
    for p in &dump.equilibrium {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(p.x),
            fmt_f64(p.z_star),
            fmt_f64(p.rel_residual),
            p.nfe
        )
        .expect("write to string");
    }
    out
}

pub fn traces_csv(dump: &SurfaceDump) -> String {
    let mut out = String::from("x,iter,z,f,rel_residual\n");
    for t in &dump.traces {
        for (i, p) in t.points.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt_f64(t.x),
                i,
                fmt_f64(p.0),
                fmt_f64(p.1),
                fmt_f64(p.2)
            )
            .expect("write to string");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for v in [0.1, -3.817_058_030_384_207, 1e-300, 12345.678_901_234_567, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17, "{s}");
        }
    }

    #[test]
    fn header_matches_record_fields() {
        let csv = records_csv(&[]);
        assert_eq!(csv.trim_end(), RECORD_COLUMNS.join(","));
    }
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::Result;
use clap::ValueEnum;
use llsa::bench::{BenchRecord, Phase, SweepOutput};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Opens `path`, or stdout when absent.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Records as CSV with the fixed column order
/// `n,phase,wall_ns,mul_accs,b,k,levels,enrich,mode,seed`.
pub fn write_csv(out: impl Write, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PerToken {
    n: usize,
    phase: Phase,
    ns_per_token: f64,
}

#[derive(Serialize)]
struct Report<'a, S: Serialize> {
    settings: S,
    records: &'a [BenchRecord],
    time_slopes: BTreeMap<&'static str, f64>,
    mul_acc_slopes: BTreeMap<&'static str, f64>,
    per_token: Vec<PerToken>,
    skipped: &'a [(usize, String)],
}

pub fn write_json(out: impl Write, settings: impl Serialize, sweep: &SweepOutput) -> Result<()> {
    let named = |m: BTreeMap<Phase, f64>| m.into_iter().map(|(p, s)| (p.as_str(), s)).collect();
    let mut phases: Vec<Phase> = sweep.records.iter().map(|r| r.phase).collect();
    phases.sort();
    phases.dedup();
    let per_token = phases
        .into_iter()
        .flat_map(|phase| {
            sweep
                .per_token(phase)
                .into_iter()
                .map(move |(n, ns_per_token)| PerToken { n, phase, ns_per_token })
        })
        .collect();
    let report = Report {
        settings,
        records: &sweep.records,
        time_slopes: named(sweep.time_slopes()),
        mul_acc_slopes: named(sweep.mul_acc_slopes()),
        per_token,
        skipped: &sweep.skipped,
    };
    serde_json::to_writer_pretty(out, &report)?;
    Ok(())
}

/// Human-readable slope summary for stderr.
pub fn slope_summary(sweep: &SweepOutput) -> String {
    let mut s = String::new();
    let macs = sweep.mul_acc_slopes();
    for (phase, slope) in sweep.time_slopes() {
        s.push_str(&format!("slope {:<17} time {slope:.3}", phase.as_str()));
        if let Some(m) = macs.get(&phase) {
            s.push_str(&format!("  mul_accs {m:.3}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use llsa::ReweightMode;

    #[test]
    fn csv_columns_are_fixed() {
        let rec = BenchRecord {
            n: 8192,
            phase: Phase::BackwardKv,
            wall_ns: 12,
            mul_accs: 34,
            b: 16,
            k: 8,
            levels: 2,
            enrich: 2,
            mode: ReweightMode::LogitBias,
            seed: 7,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "n,phase,wall_ns,mul_accs,b,k,levels,enrich,mode,seed\n8192,backward_kv,12,34,16,8,2,2,logit-bias,7\n"
        );
    }
}

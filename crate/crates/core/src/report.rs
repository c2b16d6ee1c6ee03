//! Deterministic report serialization.
//!
//! CSV reports carry the metadata as leading `#` comment lines followed by
//! exactly the columns `snr_db,ber,bler,bits,bit_errors,blocks`. Floats are
//! printed with Rust's shortest round-trip formatting, so write -> read ->
//! write is byte-identical. JSON reports serialize the full structure.

use std::path::Path;

use crate::channels::NoiseKind;
use crate::error::{Error, Result};
use crate::eval::{BerPoint, EvalReport, ReportMeta};

/// Output format for report files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let m = &report.meta;
    let mut out = String::new();
    out.push_str("# chanlab eval report v1\n");
    out.push_str(&format!("# code_id={}\n", m.code_id));
    out.push_str(&format!(
        "# channel={}\n",
        serde_json::to_string(&m.channel).expect("channel serializes")
    ));
    out.push_str(&format!("# rate={}\n", m.rate));
    match m.delay {
        Some(d) => out.push_str(&format!("# delay={d}\n")),
        None => out.push_str("# delay=none\n"),
    }
    out.push_str(&format!("# seed={}\n", m.seed));
    out.push_str(&format!("# snr_convention={}\n", m.snr_convention));
    out.push_str(&format!("# tag={}\n", m.tag));
    out.push_str(&format!("# paired={}\n", m.paired));
    let under: Vec<String> = report
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.undersampled)
        .map(|(i, _)| i.to_string())
        .collect();
    out.push_str(&format!("# undersampled_rows={}\n", under.join(",")));
    let blk: Vec<String> = report.rows.iter().map(|r| r.block_errors.to_string()).collect();
    out.push_str(&format!("# block_errors={}\n", blk.join(",")));
    out.push_str("snr_db,ber,bler,bits,bit_errors,blocks\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.snr_db, r.ber, r.bler, r.bits, r.bit_errors, r.blocks
        ));
    }
    out
}

fn meta_line<'a>(lines: &'a [&str], key: &str) -> Result<&'a str> {
    let prefix = format!("# {key}=");
    lines
        .iter()
        .find_map(|l| l.strip_prefix(&prefix))
        .ok_or_else(|| Error::Input(format!("report csv missing metadata line {key}")))
}

pub fn report_from_csv(text: &str) -> Result<EvalReport> {
    let lines: Vec<&str> = text.lines().collect();
    let code_id = meta_line(&lines, "code_id")?.to_string();
    let channel: NoiseKind = serde_json::from_str(meta_line(&lines, "channel")?)
        .map_err(|e| Error::Input(format!("report csv channel: {e}")))?;
    let rate = meta_line(&lines, "rate")?.to_string();
    let delay = match meta_line(&lines, "delay")? {
        "none" => None,
        d => Some(d.parse::<usize>().map_err(|e| Error::Input(format!("delay: {e}")))?),
    };
    let seed: u64 = meta_line(&lines, "seed")?
        .parse()
        .map_err(|e| Error::Input(format!("seed: {e}")))?;
    let snr_convention = meta_line(&lines, "snr_convention")?.to_string();
    let tag = meta_line(&lines, "tag")?.to_string();
    let paired: bool = meta_line(&lines, "paired")?
        .parse()
        .map_err(|e| Error::Input(format!("paired: {e}")))?;
    let undersampled: Vec<usize> = meta_line(&lines, "undersampled_rows")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Input(format!("undersampled_rows: {e}"))))
        .collect::<Result<_>>()?;
    let block_errors: Vec<u64> = meta_line(&lines, "block_errors")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Input(format!("block_errors: {e}"))))
        .collect::<Result<_>>()?;

    let header_idx = lines
        .iter()
        .position(|l| *l == "snr_db,ber,bler,bits,bit_errors,blocks")
        .ok_or_else(|| Error::Input("report csv missing column header".into()))?;
    let mut rows = Vec::new();
    for (i, line) in lines[header_idx + 1..].iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Input(format!("report csv row has {} fields", f.len())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Input(format!("report csv float: {e}")))
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.parse().map_err(|e| Error::Input(format!("report csv int: {e}")))
        };
        rows.push(BerPoint {
            snr_db: parse_f(f[0])?,
            ber: parse_f(f[1])?,
            bler: parse_f(f[2])?,
            bits: parse_u(f[3])?,
            bit_errors: parse_u(f[4])?,
            blocks: parse_u(f[5])?,
            block_errors: block_errors.get(i).copied().unwrap_or(0),
            undersampled: undersampled.contains(&i),
        });
    }
    Ok(EvalReport {
        meta: ReportMeta {
            code_id,
            channel,
            rate,
            delay,
            seed,
            snr_convention,
            tag,
            paired,
        },
        rows,
    })
}

pub fn report_to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn report_from_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::Input(format!("report json: {e}")))
}

/// Write a report to `path` in the chosen format.
pub fn export_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Json => report_to_json(report),
    };
    std::fs::write(path, body).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("writing report to {}: {e}", path.display()),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::SNR_CONVENTION;

    fn sample_report() -> EvalReport {
        EvalReport {
            meta: ReportMeta {
                code_id: "conv m=2 g=(5,7) fb=7 k=100 w10".into(),
                channel: NoiseKind::Atn { nu: 3.0 },
                rate: "1/2".into(),
                delay: Some(10),
                seed: 42,
                snr_convention: SNR_CONVENTION.into(),
                tag: "sweep".into(),
                paired: false,
            },
            rows: vec![
                BerPoint {
                    snr_db: 0.0,
                    ber: 0.1234567890123,
                    bler: 0.5,
                    bits: 100_000,
                    bit_errors: 12345,
                    blocks: 1000,
                    block_errors: 500,
                    undersampled: false,
                },
                BerPoint {
                    snr_db: 2.0,
                    ber: 0.0,
                    bler: 0.0,
                    bits: 400_000,
                    bit_errors: 0,
                    blocks: 4000,
                    block_errors: 0,
                    undersampled: true,
                },
            ],
        }
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let report = sample_report();
        let csv1 = report_to_csv(&report);
        let parsed = report_from_csv(&csv1).unwrap();
        assert_eq!(parsed, report);
        let csv2 = report_to_csv(&parsed);
        assert_eq!(csv1, csv2);
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let report = sample_report();
        let json1 = report_to_json(&report);
        let parsed = report_from_json(&json1).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(report_to_json(&parsed), json1);
        assert!(json1.contains("snr_convention"));
        assert!(json1.contains("seed"));
    }

    #[test]
    fn exports_are_deterministic() {
        let report = sample_report();
        assert_eq!(report_to_csv(&report), report_to_csv(&report));
        assert_eq!(report_to_json(&report), report_to_json(&report));
    }
}

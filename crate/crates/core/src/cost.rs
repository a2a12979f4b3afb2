//! Per-inference operation counts and model sizes.
//!
//! One MAC is one multiply-accumulate pair. A Hamming distance over `D` bits
//! counts as `D` binary MACs; value-table lookups and sign thresholds count
//! as zero.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ldc::{LdcShape, MODEL_HEADER_BYTES};

#[derive(Clone, Debug, PartialEq)]
pub enum ArchSpec {
    LdcPacked(LdcShape),
    /// Classic HDC with `D`-dimensional feature and class hypervectors.
    HdcProfile {
        num_features: usize,
        dim: usize,
        num_classes: usize,
    },
    /// Dense layers with biases, all in 32-bit floats.
    FloatMlp { layer_dims: Vec<usize> },
    /// Dense layers where `binary[l]` marks layer `l` as 1-bit weights.
    /// Biases stay 32-bit floats.
    BinarizedMlp { layer_dims: Vec<usize>, binary: Vec<bool> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub bmacs: u64,
    pub fpmacs: u64,
    pub model_size_bytes: u64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::LdcPacked(s) => s.validate(),
            ArchSpec::HdcProfile {
                num_features,
                dim,
                num_classes,
            } => {
                if *num_features == 0 || *dim == 0 || *num_classes == 0 {
                    Err(Error::invalid("HDC dims must be positive"))
                } else {
                    Ok(())
                }
            }
            ArchSpec::FloatMlp { layer_dims } => check_layers(layer_dims),
            ArchSpec::BinarizedMlp { layer_dims, binary } => {
                check_layers(layer_dims)?;
                if binary.len() + 1 != layer_dims.len() {
                    return Err(Error::invalid(format!(
                        "{} binary flags for {} layers",
                        binary.len(),
                        layer_dims.len() - 1
                    )));
                }
                Ok(())
            }
        }
    }
}

fn check_layers(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::invalid(format!("bad layer dims {dims:?}")));
    }
    Ok(())
}

fn bytes_for_bits(bits: u64) -> u64 {
    bits.div_ceil(8)
}

pub fn count_ops(spec: &ArchSpec) -> Result<CostReport> {
    spec.validate()?;
    let (bmacs, fpmacs) = match spec {
        ArchSpec::LdcPacked(s) => (((s.num_features + s.num_classes) * s.feature_dim) as u64, 0),
        ArchSpec::HdcProfile {
            num_features,
            dim,
            num_classes,
        } => (((num_features + num_classes) * dim) as u64, 0),
        ArchSpec::FloatMlp { layer_dims } => (0, layer_dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()),
        ArchSpec::BinarizedMlp { layer_dims, binary } => {
            let mut b = 0;
            let mut f = 0;
            for (w, &is_bin) in layer_dims.windows(2).zip(binary) {
                let macs = (w[0] * w[1]) as u64;
                if is_bin {
                    b += macs;
                } else {
                    f += macs;
                }
            }
            (b, f)
        }
    };
    Ok(CostReport {
        bmacs,
        fpmacs,
        model_size_bytes: model_size(spec)?,
    })
}

/// Parameter bytes: 1 bit per binary parameter, 4 bytes per float one,
/// each tensor rounded up to whole bytes. For packed LDC this is the payload
/// alone; see [`ldc_overhead_bytes`] for the file framing.
pub fn model_size(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    Ok(match spec {
        ArchSpec::LdcPacked(s) => bytes_for_bits(s.payload_bits() as u64),
        ArchSpec::HdcProfile {
            num_features,
            dim,
            num_classes,
        } => bytes_for_bits((num_features * dim) as u64) + bytes_for_bits((num_classes * dim) as u64),
        ArchSpec::FloatMlp { layer_dims } => layer_dims
            .windows(2)
            .map(|w| 4 * (w[0] * w[1] + w[1]) as u64)
            .sum(),
        ArchSpec::BinarizedMlp { layer_dims, binary } => layer_dims
            .windows(2)
            .zip(binary)
            .map(|(w, &is_bin)| {
                let weights = (w[0] * w[1]) as u64;
                let weight_bytes = if is_bin { bytes_for_bits(weights) } else { 4 * weights };
                weight_bytes + 4 * w[1] as u64
            })
            .sum(),
    })
}

/// Bytes the model file spends on top of the packed payload: magic, shape
/// header, per-vector dimension fields and word padding.
pub fn ldc_overhead_bytes(shape: &LdcShape) -> Result<u64> {
    shape.validate()?;
    Ok((shape.file_len() - bytes_for_bits(shape.payload_bits() as u64) as usize) as u64)
}

/// Header-only part of the overhead (magic and shape fields plus one
/// dimension field per vector), excluding padding to whole words.
pub fn ldc_header_bytes(shape: &LdcShape) -> u64 {
    let vectors = shape.num_features + shape.num_levels + shape.num_classes;
    (MODEL_HEADER_BYTES + 4 * vectors) as u64
}

/// Rows of `(name, BMACs x 1e-6, FPMACs x 1e-6, size in KB)` with
/// KB = 1024 bytes, in input order.
pub fn report_table(specs: &[(String, ArchSpec)]) -> Result<String> {
    if specs.is_empty() {
        return Err(Error::Empty("cost report specs"));
    }
    let width = specs.iter().map(|(n, _)| n.len()).max().unwrap().max(4);
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>12}\n",
        "name", "BMACs(1e6)", "FPMACs(1e6)", "size(KB)"
    );
    for (name, spec) in specs {
        let r = count_ops(spec)?;
        writeln!(
            out,
            "{:<width$}  {:>12.6}  {:>12.6}  {:>12.3}",
            name,
            r.bmacs as f64 * 1e-6,
            r.fpmacs as f64 * 1e-6,
            r.model_size_bytes as f64 / 1024.0
        )
        .unwrap();
    }
    Ok(out)
}

pub fn report_csv(specs: &[(String, ArchSpec)]) -> Result<String> {
    let mut out = String::from("name,bmacs,fpmacs,size_bytes\n");
    for (name, spec) in specs {
        let r = count_ops(spec)?;
        writeln!(out, "{name},{},{},{}", r.bmacs, r.fpmacs, r.model_size_bytes).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ldc(n: usize, m: usize, df: usize, dv: usize, c: usize) -> ArchSpec {
        ArchSpec::LdcPacked(LdcShape {
            num_features: n,
            num_levels: m,
            feature_dim: df,
            value_dim: dv,
            num_classes: c,
        })
    }

    #[test]
    fn spec_examples() {
        let r = count_ops(&ArchSpec::FloatMlp { layer_dims: vec![100, 10] }).unwrap();
        assert_eq!((r.bmacs, r.fpmacs), (0, 1000));
        let r = count_ops(&ldc(10, 4, 8, 2, 2)).unwrap();
        assert_eq!((r.bmacs, r.fpmacs), (96, 0));
        let a = count_ops(&ldc(10, 4, 64, 4, 3)).unwrap().bmacs;
        let b = count_ops(&ldc(10, 4, 128, 4, 3)).unwrap().bmacs;
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn sizes() {
        let bin = ArchSpec::BinarizedMlp {
            layer_dims: vec![128, 4],
            binary: vec![true],
        };
        // 512 weight bits plus 4 float biases
        assert_eq!(model_size(&bin).unwrap(), 64 + 16);
        assert_eq!(model_size(&ArchSpec::FloatMlp { layer_dims: vec![4, 8] }).unwrap(), 160);
        // 32*128 + 16*4 + 5*128 bits
        assert_eq!(model_size(&ldc(32, 16, 128, 4, 5)).unwrap(), (4096 + 64 + 640) / 8);
    }

    #[test]
    fn mixed_mlp() {
        let spec = ArchSpec::BinarizedMlp {
            layer_dims: vec![10, 20, 3],
            binary: vec![false, true],
        };
        let r = count_ops(&spec).unwrap();
        assert_eq!((r.bmacs, r.fpmacs), (60, 200));
        assert!(count_ops(&ArchSpec::BinarizedMlp {
            layer_dims: vec![10, 20, 3],
            binary: vec![true],
        })
        .is_err());
    }

    #[test]
    fn hdc_to_ldc_ratio() {
        let hdc = count_ops(&ArchSpec::HdcProfile {
            num_features: 32,
            dim: 4000,
            num_classes: 5,
        })
        .unwrap();
        let l = count_ops(&ldc(32, 16, 128, 4, 5)).unwrap();
        assert_eq!(hdc.bmacs as f64 / l.bmacs as f64, 31.25);
    }

    #[test]
    fn overhead_accounts_for_file_length() {
        let s = LdcShape {
            num_features: 3,
            num_levels: 4,
            feature_dim: 8,
            value_dim: 2,
            num_classes: 2,
        };
        let payload = model_size(&ArchSpec::LdcPacked(s)).unwrap();
        assert_eq!(payload + ldc_overhead_bytes(&s).unwrap(), s.file_len() as u64);
        assert_eq!(ldc_header_bytes(&s), 24 + 4 * 9);
    }

    #[test]
    fn table_rows_and_units() {
        let specs = vec![
            ("ldc".to_string(), ldc(10, 4, 8, 2, 2)),
            ("mlp".to_string(), ArchSpec::FloatMlp { layer_dims: vec![100, 10] }),
        ];
        let t = report_table(&specs).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("ldc") && lines[1].contains("0.000096"));
        assert!(lines[2].starts_with("mlp") && lines[2].contains("0.001000"));
        assert_eq!(report_table(&specs[..1]).unwrap().lines().count(), 2);
        assert!(report_table(&[]).is_err());
        let csv = report_csv(&specs).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "ldc,96,0,13");
    }
}

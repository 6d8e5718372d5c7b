//! Parameter audits, rank profiles and the serial-stacking demonstration.

mod shape;
mod stacking;

use std::io::Write;

use crate::adapters::{count_params, equivalent_rank, Adapter, AdapterMode};
use crate::error::{Error, Result};
use crate::matrix::svd;

pub use shape::{presets, AdaptedMatrix, ModelShape};
pub use stacking::{serial_stack_rank_demo, StackingDemo};

/// Default singular-value threshold for rank profiles.
pub const DEFAULT_SV_THRESHOLD: f64 = 0.1;

/// Total trainable parameters when every adapted matrix of `shape` gets an
/// adapter with `n` minis of rank `r_mini` (`n = 1` for LoRA).
pub fn audit_params(shape: &ModelShape, mode: AdapterMode, n: usize, r_mini: usize) -> Result<u64> {
    Ok(audit_rows(shape, mode, n, r_mini)?.iter().map(|r| r.params).sum())
}

/// One row per adapted matrix, in layer-major order.
pub fn audit_rows(shape: &ModelShape, mode: AdapterMode, n: usize, r_mini: usize) -> Result<Vec<AnalysisRow>> {
    shape.validate()?;
    if mode == AdapterMode::Lora && n != 1 {
        return Err(Error::InvalidArgument(format!("lora mode requires n = 1, got {n}")));
    }
    if r_mini == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    shape
        .adapted()
        .map(|(name, d_in, d_out)| {
            let params = count_params(d_in, d_out, n, r_mini).map_err(|e| match e {
                Error::NotDivisible { what, dim, n } => Error::NotDivisible {
                    what: format!("{name} {what}"),
                    dim,
                    n,
                },
                other => other,
            })?;
            Ok(AnalysisRow {
                matrix_name: name,
                mode,
                n,
                r_mini,
                params,
                equivalent_rank: equivalent_rank(n, r_mini),
                sv_count: None,
            })
        })
        .collect()
}

/// Exact count plus a 3-significant-figure k/M/B form, e.g. `"294912 (~295k)"`.
pub fn format_count(count: u64) -> String {
    format!("{count} (~{})", human_count(count))
}

pub fn human_count(count: u64) -> String {
    const SUFFIXES: [(f64, &str); 3] = [(1e3, "k"), (1e6, "M"), (1e9, "B")];
    let v = count as f64;
    if v < 1e3 {
        return count.to_string();
    }
    let mut idx = SUFFIXES.iter().rposition(|(base, _)| v >= *base).unwrap_or(0);
    loop {
        let (base, suffix) = SUFFIXES[idx];
        let scaled = v / base;
        let decimals = if scaled >= 100.0 {
            0
        } else if scaled >= 10.0 {
            1
        } else {
            2
        };
        let text = format!("{scaled:.decimals$}");
        if text.parse::<f64>().unwrap_or(0.0) >= 1000.0 && idx + 1 < SUFFIXES.len() {
            idx += 1;
            continue;
        }
        return format!("{text}{suffix}");
    }
}

/// Singular values of an adapter's effective update and how many exceed a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProfile {
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    /// Number of singular values strictly above `threshold`.
    pub count: usize,
    pub equivalent_rank: usize,
    /// Whether the `alpha / r` scale was applied before the SVD.
    pub scaled: bool,
}

/// SVD of `b_eq · a_eq`, times the adapter scale when `scaled` is set.
pub fn rank_profile(adapter: &Adapter, threshold: f64, scaled: bool) -> Result<RankProfile> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let (a_eq, b_eq) = adapter.expand_to_sparse();
    let mut update = b_eq.matmul(&a_eq)?;
    if scaled {
        update = update.scale(adapter.scale());
    }
    let s = svd(&update)?;
    Ok(RankProfile {
        count: s.count_above(threshold),
        singular_values: s.singular_values,
        threshold,
        equivalent_rank: adapter.equivalent_rank(),
        scaled,
    })
}

/// A row of the analysis CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRow {
    pub matrix_name: String,
    pub mode: AdapterMode,
    pub n: usize,
    pub r_mini: usize,
    pub params: u64,
    pub equivalent_rank: usize,
    /// Empty in the CSV when no trained update was analysed.
    pub sv_count: Option<usize>,
}

impl AnalysisRow {
    pub fn for_adapter(name: &str, adapter: &Adapter, profile: Option<&RankProfile>) -> Self {
        AnalysisRow {
            matrix_name: name.to_string(),
            mode: adapter.mode(),
            n: adapter.n(),
            r_mini: adapter.r_mini(),
            params: adapter.param_count(),
            equivalent_rank: adapter.equivalent_rank(),
            sv_count: profile.map(|p| p.count),
        }
    }
}

pub const ANALYSIS_CSV_HEADER: [&str; 7] = [
    "matrix_name",
    "mode",
    "n",
    "r_mini",
    "params",
    "equivalent_rank",
    "sv_count_above_threshold",
];

pub fn write_analysis_csv<W: Write>(rows: &[AnalysisRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ANALYSIS_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.matrix_name.clone(),
            r.mode.to_string(),
            r.n.to_string(),
            r.r_mini.to_string(),
            r.params.to_string(),
            r.equivalent_rank.to_string(),
            r.sv_count.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::InitOptions;

    #[test]
    fn roberta_and_llama_totals() {
        let roberta = ModelShape::preset("roberta-base-qv").unwrap();
        assert_eq!(audit_params(&roberta, AdapterMode::Lora, 1, 8).unwrap(), 294_912);
        for n in [2, 4, 8] {
            assert_eq!(audit_params(&roberta, AdapterMode::Melora, n, 1).unwrap(), 36_864);
        }
        assert_eq!(audit_params(&roberta, AdapterMode::Melora, 2, 4).unwrap(), 147_456);
        let llama = ModelShape::preset("llama2-7b-qv").unwrap();
        assert_eq!(audit_params(&llama, AdapterMode::Lora, 1, 64).unwrap(), 33_554_432);
        assert_eq!(audit_params(&llama, AdapterMode::Melora, 16, 1).unwrap(), 524_288);
    }

    #[test]
    fn divisibility_error_names_the_matrix() {
        let shape = ModelShape::uniform(10, 2, &["q", "v"]).unwrap();
        let err = audit_params(&shape, AdapterMode::Melora, 3, 1).unwrap_err();
        assert!(err.to_string().contains("layer0.q"), "{err}");
        assert!(audit_params(&shape, AdapterMode::Lora, 2, 1).is_err());
    }

    #[test]
    fn human_counts() {
        assert_eq!(format_count(294_912), "294912 (~295k)");
        assert_eq!(human_count(36_864), "36.9k");
        assert_eq!(human_count(147_456), "147k");
        assert_eq!(human_count(33_554_432), "33.6M");
        assert_eq!(human_count(524_288), "524k");
        assert_eq!(human_count(1_536), "1.54k");
        assert_eq!(human_count(999_999), "1.00M");
        assert_eq!(human_count(7_000_000_000), "7.00B");
        assert_eq!(human_count(512), "512");
    }

    #[test]
    fn profiles_of_fresh_and_filled_adapters() {
        let mut ad = Adapter::init(AdapterMode::Melora, 64, 64, 8, 1, &InitOptions::default(), 3).unwrap();
        assert_eq!(rank_profile(&ad, 0.1, true).unwrap().count, 0);
        ad.randomize_b(1.0, 4);
        let p = rank_profile(&ad, 1e-8, true).unwrap();
        assert_eq!(p.count, 8);
        assert_eq!(p.equivalent_rank, 8);
        assert!(rank_profile(&ad, 0.0, true).is_err());
    }

    #[test]
    fn scaling_option_changes_singular_values_by_the_scale() {
        let mut ad = Adapter::init(AdapterMode::Melora, 16, 16, 2, 2, &InitOptions::default(), 1).unwrap();
        ad.randomize_b(1.0, 2);
        let raw = rank_profile(&ad, 0.1, false).unwrap();
        let scaled = rank_profile(&ad, 0.1, true).unwrap();
        for (r, s) in raw.singular_values.iter().zip(&scaled.singular_values) {
            assert!((r * ad.scale() - s).abs() < 1e-9 * s.max(1.0));
        }
    }

    #[test]
    fn csv_layout() {
        let shape = ModelShape::uniform(8, 1, &["q"]).unwrap();
        let rows = audit_rows(&shape, AdapterMode::Melora, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_analysis_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "matrix_name,mode,n,r_mini,params,equivalent_rank,sv_count_above_threshold\nlayer0.q,melora,2,1,16,2,\n"
        );
    }
}

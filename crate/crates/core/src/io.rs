//! Dataset files, run configuration, and result serialization.
//!
//! Reals are written with 17 significant digits so every value read back
//! is bit-identical. Every output file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisConfig, AnalysisInput, ComparisonRow, RatioCurveRow};
use crate::data::{Observation, PooledDataset};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::simulation::{MetricsRow, RawEstimate, ReplicateFailure, RhoCurvePoint, SimConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    atomic_write(path, &csv_bytes(header, rows)?)
}

/// Parses a dataset: header with `r`, `y`, `x1..xd` and optionally
/// `y_pred`. Row order is preserved.
pub fn read_dataset(reader: impl Read) -> Result<AnalysisInput> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let r_col = find("r").ok_or_else(|| Error::Data("missing column 'r'".into()))?;
    let y_col = find("y").ok_or_else(|| Error::Data("missing column 'y'".into()))?;
    let pred_col = find("y_pred");
    let mut x_cols: Vec<(usize, usize)> = Vec::new();
    for (c, h) in header.iter().enumerate() {
        if c == r_col || c == y_col || Some(c) == pred_col {
            continue;
        }
        let k = h
            .strip_prefix('x')
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Data(format!("unexpected column '{h}'")))?;
        x_cols.push((k, c));
    }
    x_cols.sort_unstable();
    if x_cols.is_empty() || x_cols.iter().enumerate().any(|(i, &(k, _))| k != i + 1) {
        return Err(Error::Data("covariate columns must be x1..xd with no gaps".into()));
    }
    let mut rows = Vec::new();
    let mut preds = pred_col.map(|_| Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let real = |c: usize| -> Result<f64> {
            cell(c)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("non-numeric value '{}' at row {row}, column '{}'", cell(c), header[c])))
        };
        let x = x_cols.iter().map(|&(_, c)| real(c)).collect::<Result<Vec<f64>>>()?;
        match cell(r_col) {
            "1" => {
                if cell(y_col).is_empty() {
                    return Err(Error::Data(format!("missing y on labeled row {row}")));
                }
                rows.push(Observation::labeled(real(y_col)?, x));
            }
            "0" => {
                if !cell(y_col).is_empty() {
                    warn!("row {row}: y present on an unlabeled row; ignored");
                }
                rows.push(Observation::unlabeled(x));
            }
            _ => return Err(Error::Data(format!("r must be 0 or 1, row {row}"))),
        }
        if let (Some(p), Some(c)) = (preds.as_mut(), pred_col) {
            p.push(real(c)?);
        }
    }
    AnalysisInput::new(PooledDataset::new(rows)?, preds)
}

pub fn load_dataset(path: &Path) -> Result<PooledDataset> {
    Ok(load_analysis_input(path)?.data)
}

/// The dataset together with its `y_pred` column, if any.
pub fn load_analysis_input(path: &Path) -> Result<AnalysisInput> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(file)
}

/// Writes a dataset in the format read by [`load_dataset`].
pub fn write_dataset(path: &Path, data: &PooledDataset, y_pred: Option<&[f64]>) -> Result<()> {
    let d = data.dim();
    let mut header: Vec<String> = vec!["r".into(), "y".into()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    if y_pred.is_some() {
        header.push("y_pred".into());
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = data.rows().iter().enumerate().map(|(i, o)| {
        let mut row = vec![o.r().to_string(), o.y.map(fmt_real).unwrap_or_default()];
        row.extend(o.x.iter().map(|&v| fmt_real(v)));
        if let Some(p) = y_pred {
            row.push(fmt_real(p[i]));
        }
        row
    });
    write_csv(path, &header_ref, rows)
}

/// Configuration file: a `[simulation]` table for `simulate` and an
/// `[analysis]` table for the data subcommands. Every field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulation: SimConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        atomic_write(&dir.join("config.toml"), self.to_toml()?.as_bytes())
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    report: &'a EstimateReport,
}

pub fn report_json(report: &EstimateReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportFile {
        schema_version: REPORT_SCHEMA_VERSION,
        report,
    })?)
}

pub fn write_report_json(path: &Path, report: &EstimateReport) -> Result<()> {
    let mut text = report_json(report)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Single-row CSV form of a report, one line per component.
pub fn write_report_csv(path: &Path, report: &EstimateReport) -> Result<()> {
    let rows = (0..report.theta_hat.len()).map(|c| {
        vec![
            report.estimator_name.clone(),
            report.estimand.clone(),
            c.to_string(),
            fmt_real(report.theta_hat[c]),
            fmt_real(report.std_err[c]),
            fmt_real(report.ci[c][0]),
            fmt_real(report.ci[c][1]),
            fmt_real(report.ci_level),
        ]
    });
    write_csv(path, &["estimator", "estimand", "component", "theta_hat", "std_err", "ci_lo", "ci_hi", "ci_level"], rows)
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "estimand",
    "estimator",
    "mse_x100",
    "bias_x10",
    "se_x10",
    "are",
    "coverage",
    "mean_sd_x10",
    "replicates",
    "failures",
];

pub fn write_summary_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let rows = rows.iter().map(|m| {
        vec![
            m.estimand.id().to_string(),
            m.estimator.id().to_string(),
            fmt_real(m.mse_x100),
            fmt_real(m.bias_x10),
            fmt_real(m.se_x10),
            fmt_real(m.are),
            fmt_real(m.coverage),
            fmt_real(m.mean_sd_x10),
            m.replicates.to_string(),
            m.failures.to_string(),
        ]
    });
    write_csv(path, &SUMMARY_HEADER, rows)
}

pub fn write_raw_csv(path: &Path, raw: &[RawEstimate]) -> Result<()> {
    let rows = raw.iter().map(|r| {
        vec![
            r.replicate.to_string(),
            r.estimand.id().to_string(),
            r.estimator.id().to_string(),
            fmt_real(r.estimate),
            fmt_real(r.sd),
            fmt_real(r.ci_lo),
            fmt_real(r.ci_hi),
        ]
    });
    write_csv(path, &["replicate", "estimand", "estimator", "estimate", "sd", "ci_lo", "ci_hi"], rows)
}

pub fn write_curves_csv(path: &Path, curves: &[RhoCurvePoint]) -> Result<()> {
    let rows = curves.iter().map(|c| {
        vec![
            c.replicate.to_string(),
            fmt_real(c.y),
            fmt_real(c.rho_true),
            fmt_real(c.rho_star),
            fmt_real(c.rho_tilde),
            fmt_real(c.rho_hat),
        ]
    });
    write_csv(path, &["replicate", "y", "rho_true", "rho_star", "rho_tilde", "rho_hat"], rows)
}

pub fn write_failures_csv(path: &Path, failures: &[ReplicateFailure]) -> Result<()> {
    let rows = failures.iter().map(|f| {
        vec![
            f.replicate.to_string(),
            f.estimand.map(|e| e.id().to_string()).unwrap_or_default(),
            f.estimator.map(|e| e.id().to_string()).unwrap_or_default(),
            f.message.clone(),
        ]
    });
    write_csv(path, &["replicate", "estimand", "estimator", "message"], rows)
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let rows = rows.iter().map(|r| {
        vec![
            r.estimator.clone(),
            r.estimand.clone(),
            fmt_real(r.theta_hat),
            fmt_real(r.std_err),
            fmt_real(r.ci_lo),
            fmt_real(r.ci_hi),
            r.error.clone().unwrap_or_default(),
        ]
    });
    write_csv(path, &["estimator", "estimand", "theta_hat", "std_err", "ci_lo", "ci_hi", "error"], rows)
}

pub fn write_ratio_csv(path: &Path, rows: &[RatioCurveRow]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| vec![fmt_real(r.y), fmt_real(r.rho_star), fmt_real(r.rho_tilde), fmt_real(r.rho_hat)]);
    write_csv(path, &["y", "rho_star", "rho_tilde", "rho_hat"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<AnalysisInput> {
        read_dataset(text.as_bytes())
    }

    #[test]
    fn minimal_file() {
        let d = parse("r,y,x1\n1,0.5,1\n0,,2\n1,1.5,3\n0,,4\n").unwrap().data;
        assert_eq!((d.n(), d.total(), d.pi()), (2, 4, 0.5));
        assert_eq!(d.rows()[2].x, vec![3.0]);
    }

    #[test]
    fn bad_r_names_the_row() {
        let e = parse("r,y,x1\n1,0.5,1\n2,,2\n").unwrap_err();
        assert!(e.to_string().contains("r must be 0 or 1, row 2"), "{e}");
    }

    #[test]
    fn missing_labeled_y_names_the_row() {
        let e = parse("r,y,x1\n0,,1\n1,,2\n").unwrap_err();
        assert!(e.to_string().contains("row 2"), "{e}");
    }

    #[test]
    fn non_numeric_cell_gives_address() {
        let e = parse("r,y,x1,x2\n1,0.5,1,abc\n0,,2,3\n").unwrap_err();
        assert!(e.to_string().contains("row 1, column 'x2'"), "{e}");
    }

    #[test]
    fn y_on_unlabeled_row_is_ignored() {
        let d = parse("r,y,x1\n1,0.5,1\n0,9,2\n").unwrap().data;
        assert_eq!(d.rows()[1].y, None);
    }

    #[test]
    fn empty_partition_is_rejected() {
        assert!(parse("r,y,x1\n1,0.5,1\n1,0.7,2\n").is_err());
    }

    #[test]
    fn covariates_are_ordered_by_index_and_predictions_kept() {
        let inp = parse("x2,r,y_pred,y,x1\n20,1,0.4,0.5,10\n30,0,0.6,,11\n").unwrap();
        assert_eq!(inp.data.rows()[0].x, vec![10.0, 20.0]);
        assert_eq!(inp.y_pred, Some(vec![0.4, 0.6]));
        assert!(parse("r,y,x1,x3\n1,0,1,2\n0,,1,2\n").is_err());
        assert!(parse("r,y,x1,z\n1,0,1,2\n0,,1,2\n").is_err());
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = PooledDataset::from_parts(
            vec![(0.1 + 0.2, vec![1.0 / 3.0, -2.5e-300]), (std::f64::consts::PI, vec![1e300, 0.0])],
            vec![vec![-0.0, 7.0]],
        )
        .unwrap();
        write_dataset(&path, &data, Some(&[0.3, 0.7, f64::MIN_POSITIVE])).unwrap();
        let back = load_analysis_input(&path).unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.y_pred.unwrap()[2], f64::MIN_POSITIVE);
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_real(f64::NAN), "NaN");
        for v in [0.1 + 0.2, 1.0 / 3.0, 6.02e23, -1e-310] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn config_defaults_echo_and_reload() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("[simulation]\nreplicatez = 3\n").is_err());
        assert!(RunConfig::from_toml("[other]\n").is_err());
        let c = RunConfig::from_toml("[simulation]\nreplicates = 3\n[analysis]\nestimand = \"variance\"\n").unwrap();
        assert_eq!(c.simulation.replicates, 3);
    }

    #[test]
    fn report_has_schema_version() {
        let report = EstimateReport {
            estimator_name: "efficient".into(),
            estimand: "mean".into(),
            theta_hat: vec![1.0],
            std_err: vec![0.1],
            ci_level: 0.95,
            ci: vec![[0.8, 1.2]],
            primary: 0,
            diagnostics: Default::default(),
        };
        let v: serde_json::Value = serde_json::from_str(&report_json(&report).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["theta_hat"][0], 1.0);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}

//! Model files (JSON) and report emission (JSON or CSV).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::{sprt_threshold_from_false_alarm, threshold_from_false_alarm, DetectorKind, DetectorSpec};
use crate::discretize::discretize_zoh;
use crate::error::{Error, Result};
use crate::model::{AttackScenario, PlantModel};
use crate::policy::{DesignOutcome, EnforcementPolicy, PolicyVerdict};
use crate::reach::CurvePoint;
use crate::sim::SimulationSummary;
use crate::structure::{AttackabilityVerdict, StructuralReport};

pub const SCHEMA_VERSION: u32 = 1;

/// Dense row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixSpec {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec { rows: m.nrows(), cols: m.ncols(), data: m.transpose().as_slice().to_vec() }
    }

    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Schema(format!(
                "field `{name}`: {} entries for a {}x{} matrix",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// `a` and `b` are continuous-time and get ZOH-discretized on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousTime {
    pub sampling_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorFile {
    pub kind: DetectorKind,
    pub beta: f64,
    /// Derived from `beta` when omitted (SPRT and single-tap chi-square only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Sensor names.
    pub compromised: Vec<String>,
    pub epsilon: f64,
    #[serde(default)]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuous: Option<ContinuousTime>,
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    pub w: MatrixSpec,
    pub r: MatrixSpec,
    pub sensor_names: Vec<String>,
    pub detector: DetectorFile,
    pub scenario: ScenarioFile,
    #[serde(default = "no_policy")]
    pub policy: EnforcementPolicy,
    pub safe_threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn no_policy() -> EnforcementPolicy {
    EnforcementPolicy::None
}

/// Validated in-memory form of a model file.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub name: String,
    pub model: PlantModel,
    pub detector: DetectorSpec,
    pub scenario: AttackScenario,
    pub policy: EnforcementPolicy,
    pub safe_threshold: f64,
    pub file: ModelFile,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files always serialize")
    }

    pub fn into_bundle(self) -> Result<ModelBundle> {
        let mut a = self.a.to_matrix("a")?;
        let mut b = self.b.to_matrix("b")?;
        if let Some(ct) = &self.continuous {
            (a, b) = discretize_zoh(&a, &b, ct.sampling_period)?;
        }
        let model = PlantModel::new(
            a,
            b,
            self.c.to_matrix("c")?,
            self.w.to_matrix("w")?,
            self.r.to_matrix("r")?,
            Some(self.sensor_names.clone()),
        )?;
        let p = model.p();
        let det = &self.detector;
        let threshold_h = match (det.threshold_h, &det.kind) {
            (Some(h), _) => h,
            (None, DetectorKind::Sprt) => sprt_threshold_from_false_alarm(det.beta, p)?,
            (None, DetectorKind::Windowed { coefficients }) if coefficients.as_slice() == [1.0] => {
                threshold_from_false_alarm(det.beta, p)?
            }
            (None, _) => {
                return Err(Error::Schema("field `detector.threshold_h` is required for general windows".into()))
            }
        };
        let detector = DetectorSpec { kind: det.kind.clone(), threshold_h, beta: det.beta };
        detector.validate(p)?;
        let compromised = self
            .scenario
            .compromised
            .iter()
            .map(|s| {
                model
                    .sensor_index(s)
                    .ok_or_else(|| Error::Schema(format!("field `scenario.compromised`: unknown sensor '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let scenario = AttackScenario::new(compromised, self.scenario.epsilon, self.scenario.gamma, p)?;
        self.policy.validate(p)?;
        if !(self.safe_threshold > 0.0) {
            return Err(Error::Validation(format!("safe_threshold must be positive, got {}", self.safe_threshold)));
        }
        Ok(ModelBundle {
            name: self.name.clone(),
            model,
            detector,
            scenario,
            policy: self.policy.clone(),
            safe_threshold: self.safe_threshold,
            file: self,
        })
    }
}

pub fn parse_model(path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(path)?;
    ModelFile::from_json(&text)?.into_bundle()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub detector: String,
    pub p: usize,
    pub beta: f64,
    pub threshold_h: f64,
    pub epsilon: f64,
    /// Stealth radius of a single step.
    pub first_step_alpha: f64,
    /// Radius governing the evaluated policy, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_bounds: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub inputs: BTreeMap<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub structural: Option<StructuralReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attackability: Option<AttackabilityVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
    /// Worst expected error without enforcement.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curve: Vec<CurvePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_verdict: Option<PolicyVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            inputs: BTreeMap::new(),
            structural: None,
            attackability: None,
            calibration: None,
            curve: Vec::new(),
            policy_verdict: None,
            design: None,
            simulation: None,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Validation(format!("unknown format '{other}' (json or csv)"))),
        }
    }
}

/// Render a report. CSV emits the report's main table:
/// simulation → `k,alarm_rate,nominal_rate,ci_low,ci_high,mean_error_norm`;
/// design → `period,status,sup_error,fixpoint_horizon`;
/// otherwise → `k,bound,anchor,enforced,policy_bound`.
pub fn render_report(report: &Report, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Numerical(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => render_csv(report),
    }
}

fn render_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if let Some(sim) = &report.simulation {
        w.write_record(["k", "alarm_rate", "nominal_rate", "ci_low", "ci_high", "mean_error_norm"]).map_err(io)?;
        for s in &sim.per_step {
            let norm = s.mean_error.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.write_record([
                s.k.to_string(),
                s.alarm_rate.to_string(),
                s.nominal_rate.to_string(),
                s.ci_low.to_string(),
                s.ci_high.to_string(),
                norm.to_string(),
            ])
            .map_err(io)?;
        }
    } else if let Some(design) = &report.design {
        w.write_record(["period", "status", "sup_error", "fixpoint_horizon"]).map_err(io)?;
        for s in &design.history {
            let status =
                serde_json::to_value(s.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            w.write_record([
                s.period.to_string(),
                status,
                s.sup_error.to_string(),
                s.fixpoint_horizon.map(|t| t.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
    } else {
        w.write_record(["k", "bound", "anchor", "enforced", "policy_bound"]).map_err(io)?;
        let policy_curve = report.policy_verdict.as_ref().map(|v| v.curve.as_slice()).unwrap_or(&[]);
        let rows = report.curve.len().max(policy_curve.len());
        for i in 0..rows {
            let base = report.curve.get(i);
            let pol = policy_curve.get(i);
            let k = base.or(pol).map(|c| c.k).unwrap_or(i + 1);
            w.write_record([
                k.to_string(),
                base.map(|c| c.bound.to_string()).unwrap_or_default(),
                base.map(|c| c.anchor.to_string()).unwrap_or_default(),
                pol.map(|c| c.enforced.to_string()).unwrap_or_else(|| "false".into()),
                pol.map(|c| c.bound.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Write a rendered report to `path`, or stdout when `path` is `None`.
pub fn emit_report(report: &Report, format: ReportFormat, path: Option<&Path>) -> Result<()> {
    let text = render_report(report, format)?;
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ModelFile {
        ModelFile {
            schema_version: 1,
            name: "toy".into(),
            continuous: None,
            a: MatrixSpec { rows: 1, cols: 1, data: vec![1.2] },
            b: MatrixSpec { rows: 1, cols: 1, data: vec![1.0] },
            c: MatrixSpec { rows: 1, cols: 1, data: vec![1.0] },
            w: MatrixSpec { rows: 1, cols: 1, data: vec![1.0] },
            r: MatrixSpec { rows: 1, cols: 1, data: vec![1.0] },
            sensor_names: vec!["y".into()],
            detector: DetectorFile { kind: DetectorKind::Sprt, beta: 0.015, threshold_h: None },
            scenario: ScenarioFile { compromised: vec!["y".into()], epsilon: 0.001, gamma: 0.0 },
            policy: EnforcementPolicy::None,
            safe_threshold: 0.18,
            notes: vec![],
        }
    }

    #[test]
    fn round_trip() {
        let f = minimal();
        assert_eq!(ModelFile::from_json(&f.to_json()).unwrap(), f);
        let b = f.into_bundle().unwrap();
        assert!((b.detector.threshold_h - 2.458).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut f = minimal();
        f.r.data = vec![-1.0];
        assert!(f.into_bundle().is_err());
        let mut f = minimal();
        f.a.data = vec![1.0, 2.0];
        assert!(matches!(f.into_bundle(), Err(Error::Schema(_))));
        let mut f = minimal();
        f.scenario.compromised = vec!["nope".into()];
        assert!(f.into_bundle().is_err());
        let text = minimal().to_json().replace("\"safe_threshold\"", "\"unexpected\": 1, \"safe_threshold\"");
        let err = ModelFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("unexpected") && err.contains("line"), "{err}");
    }

    #[test]
    fn csv_has_header() {
        let mut r = Report::new("analyze");
        r.curve.push(CurvePoint { k: 1, bound: 0.5, anchor: 1, enforced: false });
        let csv = render_report(&r, ReportFormat::Csv).unwrap();
        assert!(csv.starts_with("k,bound,anchor,enforced,policy_bound\n1,0.5,1,false,\n"));
    }
}

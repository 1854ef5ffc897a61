//! Declarative run file for `btd experiment`.
//!
//! The JSON schema is documented in `docs/runconfig.schema.json`; unknown
//! keys are rejected.

use serde::Deserialize;

use btd::error::{Error, Result};
use btd::estimator::{ConstraintMode, FitConfig, MultiPeakPolicy, Regularization, SignAlignment};
use btd::phantom::{PhantomKind, PhantomSpec};
use btd::tracer::TraceConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rng_seed: u64,
    /// Output directory; a relative path is resolved against the run file's
    /// directory unless overridden on the command line.
    pub out: String,
    pub phantoms: Vec<PhantomCell>,
    pub orders: Vec<usize>,
    /// Also run the deterministic peak-following baseline per phantom.
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomCell {
    /// "hough", "sine", or "circle".
    pub kind: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub r1: Option<f64>,
    #[serde(default)]
    pub r2: Option<f64>,
    /// A number, or "inf" for a noiseless simulation.
    pub snr: SnrValue,
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
    #[serde(default)]
    pub seed_count: Option<usize>,
    #[serde(default)]
    pub bvalue: Option<f64>,
    #[serde(default)]
    pub gradients: Option<usize>,
    /// Use exact analytic peaks instead of the DWI + DTI pipeline.
    #[serde(default)]
    pub analytic: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SnrValue {
    Number(f64),
    Text(String),
}

impl SnrValue {
    pub fn value(&self) -> Result<f64> {
        match self {
            SnrValue::Number(v) => Ok(*v),
            SnrValue::Text(s) if s == "inf" => Ok(f64::INFINITY),
            SnrValue::Text(s) => Err(Error::invalid(format!(
                "snr must be a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// "exact" (default) or "sampled".
    #[serde(default)]
    pub mode: Option<String>,
    /// "auto" (default), or a nonnegative weight.
    #[serde(default)]
    pub ridge: Option<RidgeValue>,
    #[serde(default)]
    pub planar: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RidgeValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub max_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default)]
    pub eval_dilation: Option<usize>,
    #[serde(default)]
    pub signed_deviation: bool,
}

impl PhantomCell {
    pub fn spec(&self) -> Result<PhantomSpec> {
        let kind = match self.kind.as_str() {
            "hough" | "fan" => {
                if self.alpha.is_some() || self.r1.is_some() || self.r2.is_some() {
                    return Err(Error::invalid(
                        "alpha/r1/r2 do not apply to the hough phantom",
                    ));
                }
                PhantomKind::Fan
            }
            "sine" => {
                if self.r1.is_some() || self.r2.is_some() {
                    return Err(Error::invalid("r1/r2 do not apply to the sine phantom"));
                }
                PhantomKind::Sine {
                    alpha: self
                        .alpha
                        .ok_or_else(|| Error::invalid("sine phantom needs alpha"))?,
                }
            }
            "circle" => {
                if self.alpha.is_some() {
                    return Err(Error::invalid("alpha does not apply to the circle phantom"));
                }
                PhantomKind::Circle {
                    r1: self.r1.unwrap_or(10.0),
                    r2: self.r2.unwrap_or(20.0),
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown phantom kind {other:?} (expected hough, sine, or circle)"
                )))
            }
        };
        let mut spec = PhantomSpec::new(kind);
        spec.snr = self.snr.value()?;
        if let Some(dims) = self.dims {
            spec.dims = dims;
        }
        if let Some(n) = self.seed_count {
            spec.seed_count = n;
        }
        if let Some(b) = self.bvalue {
            spec.bvalue = b;
        }
        if let Some(g) = self.gradients {
            spec.n_gradients = g;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Directory-name-safe cell label, stable across runs.
    pub fn label(&self) -> Result<String> {
        let snr = self.snr.value()?;
        let snr_s = if snr.is_finite() {
            format!("{snr}")
        } else {
            "inf".to_string()
        };
        Ok(match self.kind.as_str() {
            "sine" => format!("sine_a{}_snr{snr_s}", self.alpha.unwrap_or(0.0)),
            kind => format!("{kind}_snr{snr_s}"),
        })
    }
}

impl FitSection {
    pub fn config(&self, order: usize) -> Result<FitConfig> {
        let constraint_mode = match self.mode.as_deref() {
            None | Some("exact") => ConstraintMode::ExactDivergenceFree,
            Some("sampled") => ConstraintMode::SampledAtVoxels,
            Some(other) => {
                return Err(Error::invalid(format!(
                    "unknown fit mode {other:?} (expected exact or sampled)"
                )))
            }
        };
        let regularization = match &self.ridge {
            None => Regularization::Auto,
            Some(RidgeValue::Text(s)) if s == "auto" => Regularization::Auto,
            Some(RidgeValue::Text(s)) => {
                return Err(Error::invalid(format!(
                    "ridge must be \"auto\" or a number, got {s:?}"
                )))
            }
            Some(RidgeValue::Number(w)) => Regularization::Fixed(*w),
        };
        let cfg = FitConfig {
            order,
            constraint_mode,
            sign_alignment: SignAlignment::Propagation,
            regularization,
            multi_peak: MultiPeakPolicy::PrimaryOnly,
            planar: self.planar,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TraceSection {
    pub fn config(&self, min_length: f64) -> TraceConfig {
        let mut cfg = TraceConfig {
            min_length,
            ..TraceConfig::default()
        };
        if let Some(s) = self.step_size {
            cfg.step_size = s;
        }
        if let Some(n) = self.max_steps {
            cfg.max_steps = n;
        }
        if let Some(a) = self.max_angle_deg {
            cfg.max_angle_deg = a;
        }
        cfg
    }
}

pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("bad run file {}: {e}", path.display())))?;
    if cfg.orders.is_empty() {
        return Err(Error::invalid("run file lists no orders"));
    }
    if cfg.phantoms.is_empty() {
        return Err(Error::invalid("run file lists no phantoms"));
    }
    Ok(cfg)
}

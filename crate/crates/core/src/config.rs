//! JSON run configuration. Every key is optional and overrides the
//! defaults of the selected example.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{make_example, DensityChoice, ExampleSpec, Forcing};
use crate::forward::ConstraintModel;

/// Flat configuration file; absent keys keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_cells: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stochastic_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_variants: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_growth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcg_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcg_max_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enforce_bounds: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraint_model: Option<ConstraintModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forcing: Option<Forcing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sample: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_max_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mc: Option<usize>,
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(config_err(key, format!("must be positive, got {x}"))),
        _ => Ok(()),
    }
}

fn nonnegative(key: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x >= 0.0 && x.is_finite()) => Err(config_err(key, format!("must be non-negative, got {x}"))),
        _ => Ok(()),
    }
}

fn at_least(key: &str, v: Option<usize>, min: usize) -> Result<()> {
    match v {
        Some(x) if x < min => Err(config_err(key, format!("must be at least {min}, got {x}"))),
        _ => Ok(()),
    }
}

/// Defaults for user-supplied sample data.
pub fn custom_defaults() -> ExampleSpec {
    ExampleSpec {
        id: 0,
        forcing: Forcing::Constant(1.0),
        kl_max_rank: None,
        ..make_example(3).expect("built-in example")
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let key = match inner.strip_prefix("unknown field `") {
                Some(rest) => rest.split('`').next().unwrap_or("").to_string(),
                None if path == "." => String::new(),
                None => path,
            };
            Error::Config { key, message: inner }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Range checks on the keys that are present.
    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.example {
            if !(1..=3).contains(&id) {
                return Err(config_err("example", format!("must be 1, 2 or 3, got {id}")));
            }
        }
        if let Some(d) = self.spatial_dim {
            if !(1..=2).contains(&d) {
                return Err(config_err("spatial_dim", format!("must be 1 or 2, got {d}")));
            }
        }
        at_least("q_cells", self.q_cells, 1)?;
        at_least("stochastic_dim", self.stochastic_dim, 1)?;
        at_least("level", self.level.map(|l| l as usize), 1)?;
        at_least("pcg_max_iter", self.pcg_max_iter, 1)?;
        at_least("max_outer", self.max_outer, 1)?;
        if let Some(n) = self.n_sample {
            if n == 1 {
                return Err(config_err("n_sample", "must be 0 (no sample input) or at least 2"));
            }
        }
        at_least("kl_max_rank", self.kl_max_rank, 1)?;
        at_least("n_mc", self.n_mc, 2)?;
        nonnegative("noise", self.noise)?;
        nonnegative("beta", self.beta)?;
        positive("c0", self.c0)?;
        positive("c_max", self.c_max)?;
        positive("outer_tol", self.outer_tol)?;
        positive("pcg_tol", self.pcg_tol)?;
        positive("kl_tol", self.kl_tol)?;
        positive("q_min", self.q_min)?;
        positive("q_max", self.q_max)?;
        if let Some(g) = self.c_growth {
            if !(g >= 1.0 && g.is_finite()) {
                return Err(config_err("c_growth", format!("must be at least 1, got {g}")));
            }
        }
        if let Some(q) = self.q_init {
            if !q.is_finite() {
                return Err(config_err("q_init", "must be finite"));
            }
        }
        if let Some(v) = &self.beta_variants {
            if v.is_empty() {
                return Err(config_err("beta_variants", "must not be empty"));
            }
            for b in v {
                nonnegative("beta_variants", Some(*b))?;
            }
        }
        if let (Some(a), Some(b)) = (self.y_lower, self.y_upper) {
            if !(a < b) {
                return Err(config_err("y_upper", "must exceed y_lower"));
            }
        }
        if let (Some(a), Some(b)) = (self.q_min, self.q_max) {
            if !(a < b) {
                return Err(config_err("q_max", "must exceed q_min"));
            }
        }
        Ok(())
    }

    /// Fully populated configuration describing `spec`.
    pub fn from_spec(spec: &ExampleSpec, seed: u64) -> Self {
        let r = &spec.run;
        Self {
            example: (spec.id != 0).then_some(spec.id),
            seed: Some(seed),
            spatial_dim: Some(spec.spatial_dim),
            q_cells: Some(spec.q_cells),
            stochastic_dim: Some(spec.stochastic_dim),
            y_lower: Some(spec.y_lower),
            y_upper: Some(spec.y_upper),
            level: Some(spec.level),
            noise: Some(spec.noise),
            beta: Some(r.beta),
            beta_variants: Some(spec.beta_variants.clone()),
            c0: Some(r.c0),
            c_growth: Some(r.c_growth),
            c_max: Some(r.c_max),
            outer_tol: Some(r.outer_tol),
            pcg_tol: Some(r.pcg_tol),
            pcg_max_iter: Some(r.pcg_max_iter),
            max_outer: Some(r.max_outer),
            q_init: Some(r.q_init),
            enforce_bounds: Some(r.enforce_bounds),
            q_min: Some(r.q_min),
            q_max: Some(r.q_max),
            constraint_model: Some(spec.constraint_model),
            forcing: Some(spec.forcing.clone()),
            n_sample: Some(spec.n_sample),
            kl_tol: Some(spec.kl_tol),
            kl_max_rank: spec.kl_max_rank,
            density: Some(spec.density),
            n_mc: Some(spec.n_mc),
        }
    }

    /// Applies the present keys on top of `base`. A lone `beta` replaces
    /// the variant list.
    pub fn apply(&self, base: ExampleSpec) -> Result<ExampleSpec> {
        let mut s = base;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { s.$field = v; })* };
        }
        macro_rules! set_run {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { s.run.$field = v; })* };
        }
        set!(
            spatial_dim,
            q_cells,
            stochastic_dim,
            y_lower,
            y_upper,
            level,
            noise,
            beta_variants
        );
        set!(constraint_model, forcing, n_sample, kl_tol, density, n_mc);
        set_run!(c0, c_growth, c_max, outer_tol, pcg_tol, pcg_max_iter, max_outer, q_init);
        set_run!(enforce_bounds, q_min, q_max);
        if self.kl_max_rank.is_some() {
            s.kl_max_rank = self.kl_max_rank;
        }
        match (self.beta, &self.beta_variants) {
            (Some(b), None) => s.beta_variants = vec![b],
            (Some(b), Some(v)) if v.first() != Some(&b) => {
                return Err(config_err(
                    "beta",
                    "must equal the first entry of beta_variants when both are given",
                ))
            }
            _ => {}
        }
        s.run.beta = s.beta_variants[0];
        s.run.validate().map_err(|e| match e {
            Error::Config { .. } => e,
            other => config_err("", other.to_string()),
        })?;
        s.validate()?;
        Ok(s)
    }

    /// Base spec selected by `example`, or `fallback` when absent.
    pub fn resolve(&self, fallback: ExampleSpec) -> Result<ExampleSpec> {
        let base = match self.example {
            Some(id) => make_example(id)?,
            None => fallback,
        };
        self.apply(base)
    }
}

//! Run configuration: a versioned JSON schema shared by every subcommand,
//! dotted-path overrides, and validation that reports every violation at
//! once. A resolved copy (defaults filled in) is echoed into each artifact
//! directory so any run can be reproduced from its own output.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use rkflow_core::analytic::AnalyticField;
use rkflow_core::attention::{BlockScope, ManipulationPlan, RegionOp, RegionOps};
use rkflow_core::latent::{LatentState, Shape};
use rkflow_core::mmdit::{ToyMMDiT, ToyMMDiTConfig, VOCAB_SIZE};
use rkflow_core::rng::SeededRng;
use rkflow_core::velocity::{PromptEmbedding, VelocityField};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum FieldSpec {
    Constant { value: f64 },
    LinearScalar { lambda: f64 },
    TimePoly { coeffs: Vec<f64> },
    Logistic,
    GaussToGauss { mu0: f64, sigma0: f64 },
    ToyMmdit { model: ModelSpec },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::ToyMmdit { model: ModelSpec::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub l_multi: usize,
    pub l_single: usize,
    pub n_text: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ToyMMDiTConfig::default_toy();
        ModelSpec {
            d_model: c.d_model,
            n_heads: c.n_heads,
            l_multi: c.l_multi,
            l_single: c.l_single,
            n_text: c.n_text,
            grid_h: c.grid_h,
            grid_w: c.grid_w,
            channels: c.channels,
            seed: c.seed,
        }
    }
}

impl ModelSpec {
    pub fn to_core(&self) -> ToyMMDiTConfig {
        ToyMMDiTConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            l_multi: self.l_multi,
            l_single: self.l_single,
            n_text: self.n_text,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            channels: self.channels,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum InitSpec {
    /// Standard normal draw from the run seed.
    Gaussian,
    /// Every entry set to `value`.
    Constant { value: f64 },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Gaussian
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    pub direction: String,
    pub reuse: bool,
    pub record_trajectory: bool,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection { direction: "denoise".into(), reuse: false, record_trajectory: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSection {
    pub tableaus: Vec<String>,
    pub h_list: Vec<f64>,
    pub z0: f64,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            tableaus: vec!["euler".into(), "heun2".into(), "kutta3".into(), "three_eighths4".into()],
            h_list: vec![0.1, 0.05, 0.025, 0.0125, 0.00625],
            z0: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSpec {
    pub m_cc: String,
    pub m_ii: String,
    pub m_ci: String,
    pub m_ic: String,
    pub v_c: String,
    pub v_i: String,
    pub multi: bool,
    pub single: bool,
    pub layers: Option<Vec<usize>>,
    pub d_list: Vec<u64>,
}

impl Default for PlanSpec {
    fn default() -> Self {
        // replace the cross maps, average the image values, single-stream
        // blocks, first editing evaluation
        PlanSpec {
            m_cc: "none".into(),
            m_ii: "none".into(),
            m_ci: "replace".into(),
            m_ic: "replace".into(),
            v_c: "none".into(),
            v_i: "mean".into(),
            multi: false,
            single: true,
            layers: None,
            d_list: vec![1],
        }
    }
}

fn parse_op(name: &str, s: &str, errors: &mut Vec<String>) -> RegionOp {
    match s {
        "none" => RegionOp::None,
        "replace" => RegionOp::Replace,
        "mean" => RegionOp::Mean,
        other => {
            errors.push(format!("plan.{name}: unknown op '{other}' (none|replace|mean)"));
            RegionOp::None
        }
    }
}

impl PlanSpec {
    pub fn to_core(&self, errors: &mut Vec<String>) -> ManipulationPlan {
        ManipulationPlan {
            ops: RegionOps {
                m_cc: parse_op("m_cc", &self.m_cc, errors),
                m_ii: parse_op("m_ii", &self.m_ii, errors),
                m_ci: parse_op("m_ci", &self.m_ci, errors),
                m_ic: parse_op("m_ic", &self.m_ic, errors),
                v_c: parse_op("v_c", &self.v_c, errors),
                v_i: parse_op("v_i", &self.v_i, errors),
            },
            scope: BlockScope { multi: self.multi, single: self.single, layers: self.layers.clone() },
            d_list: self.d_list.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub source_prompt: Vec<u32>,
    pub target_prompt: Vec<u32>,
    pub plan: PlanSpec,
    pub guidance_invert: f64,
    pub guidance_edit: f64,
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            source_prompt: vec![17, 42, 200, 7],
            target_prompt: vec![17, 42, 119, 7],
            plan: PlanSpec::default(),
            guidance_invert: 1.0,
            guidance_edit: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelitySection {
    pub n_cases: usize,
    pub prompt_len: usize,
    pub guidance_invert: f64,
    pub guidance_edit: f64,
    pub multi: bool,
    pub single: bool,
    pub d_list: Vec<u64>,
}

impl Default for FidelitySection {
    fn default() -> Self {
        FidelitySection {
            n_cases: 20,
            prompt_len: 6,
            guidance_invert: 1.0,
            guidance_edit: 3.0,
            multi: true,
            single: true,
            d_list: vec![1],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub n_trials: usize,
    pub delta_max: f64,
    pub lipschitz_override: Option<f64>,
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection { n_trials: 100, delta_max: 1e-3, lipschitz_override: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RespmapSection {
    pub word_indices: Vec<usize>,
    pub out_h: usize,
    pub out_w: usize,
}

impl Default for RespmapSection {
    fn default() -> Self {
        RespmapSection { word_indices: vec![0, 1], out_h: 64, out_w: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRow {
    pub method: String,
    pub tableau: String,
    pub steps: usize,
    #[serde(default)]
    pub reuse: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NfeBenchSection {
    pub rows: Vec<BenchRow>,
}

impl Default for NfeBenchSection {
    fn default() -> Self {
        let mut rows = Vec::new();
        let mut push = |method: &str, tableau: &str, steps: &[usize], reuse: bool| {
            for &s in steps {
                rows.push(BenchRow {
                    method: method.into(),
                    tableau: tableau.into(),
                    steps: s,
                    reuse,
                });
            }
        };
        push("vanilla_rf", "euler", &[30, 60, 90, 120], false);
        push("rf_solver", "rf_solver", &[15, 30, 60], false);
        push("fireflow", "fireflow_midpoint", &[30, 60, 90, 120], true);
        push("rk2", "heun2", &[15, 30, 60], false);
        push("rk3", "kutta3", &[30, 40], false);
        push("rk4", "three_eighths4", &[15, 30], false);
        NfeBenchSection { rows }
    }
}

/// The whole run configuration. Every command reads the sections it needs;
/// unknown keys anywhere are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub field: FieldSpec,
    pub tableau: String,
    pub steps: usize,
    /// Explicit grid nodes (length steps + 1); uniform when absent.
    pub nodes: Option<Vec<f64>>,
    /// Latent shape for analytic fields: [channels, grid_h, grid_w].
    pub shape: [usize; 3],
    pub init: InitSpec,
    /// Token ids fed to the toy model on solve-style commands.
    pub prompt: Vec<u32>,
    pub guidance: f64,
    pub solve: SolveSection,
    pub convergence: ConvergenceSection,
    pub edit: EditSection,
    pub fidelity: FidelitySection,
    pub bound: BoundSection,
    pub respmap: RespmapSection,
    pub nfe_bench: NfeBenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            field: FieldSpec::default(),
            tableau: "heun2".into(),
            steps: 30,
            nodes: None,
            shape: [1, 1, 1],
            init: InitSpec::default(),
            prompt: vec![17, 42, 200, 7],
            guidance: 1.0,
            solve: SolveSection::default(),
            convergence: ConvergenceSection::default(),
            edit: EditSection::default(),
            fidelity: FidelitySection::default(),
            bound: BoundSection::default(),
            respmap: RespmapSection::default(),
            nfe_bench: NfeBenchSection::default(),
        }
    }
}

/// Apply one dotted-path override (`a.b.c=value`) onto a JSON tree. Values
/// parse as JSON when possible and fall back to bare strings.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override '{spec}' is not of the form key=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (idx, part) in parts.iter().enumerate() {
        let last = idx + 1 == parts.len();
        if let Ok(index) = part.parse::<usize>() {
            let arr = node
                .as_array_mut()
                .with_context(|| format!("override '{spec}': '{part}' indexes a non-array"))?;
            if index >= arr.len() {
                bail!("override '{spec}': index {index} out of bounds");
            }
            if last {
                arr[index] = value;
                return Ok(());
            }
            node = &mut arr[index];
        } else {
            let obj = node
                .as_object_mut()
                .with_context(|| format!("override '{spec}': '{part}' indexes a non-object"))?;
            if last {
                obj.insert(part.to_string(), value);
                return Ok(());
            }
            node = obj.entry(part.to_string()).or_insert(Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Load the config file (or the built-in default), apply overrides, then the
/// optional seed override, and deserialize strictly.
pub fn load_config(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut tree: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    for spec in sets {
        apply_override(&mut tree, spec)?;
    }
    if let Some(s) = seed {
        apply_override(&mut tree, &format!("seed={s}"))?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).context("config schema")?;
    if cfg.version != CONFIG_VERSION {
        bail!("config version {} unsupported (expected {CONFIG_VERSION})", cfg.version);
    }
    Ok(cfg)
}

/// Built field plus everything commands need alongside it.
pub enum BuiltField {
    Analytic(AnalyticField),
    Toy(Box<ToyMMDiT>),
}

impl BuiltField {
    pub fn as_dyn(&self) -> &dyn VelocityField {
        match self {
            BuiltField::Analytic(f) => f,
            BuiltField::Toy(m) => m.as_ref(),
        }
    }

    pub fn toy(&self) -> Option<&ToyMMDiT> {
        match self {
            BuiltField::Toy(m) => Some(m),
            BuiltField::Analytic(_) => None,
        }
    }
}

impl RunConfig {
    /// Full semantic validation; returns every violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.steps == 0 {
            errors.push("steps must be >= 1".into());
        }
        if self.shape.iter().any(|&d| d == 0) {
            errors.push("shape entries must be >= 1".into());
        }
        if !(self.solve.direction == "invert" || self.solve.direction == "denoise") {
            errors.push(format!(
                "solve.direction '{}' must be 'invert' or 'denoise'",
                self.solve.direction
            ));
        }
        for &id in self.prompt.iter().chain(&self.edit.source_prompt).chain(&self.edit.target_prompt)
        {
            if id >= VOCAB_SIZE {
                errors.push(format!("token id {id} outside vocabulary 0..{VOCAB_SIZE}"));
            }
        }
        match &self.field {
            FieldSpec::GaussToGauss { sigma0, .. } if *sigma0 <= 0.0 => {
                errors.push(format!("gauss_to_gauss sigma0 must be > 0, got {sigma0}"));
            }
            FieldSpec::TimePoly { coeffs } if coeffs.is_empty() => {
                errors.push("time_poly needs at least one coefficient".into());
            }
            FieldSpec::ToyMmdit { model } => {
                if let Err(e) = model.to_core().validate() {
                    errors.push(format!("{e}"));
                }
            }
            _ => {}
        }
        if self.convergence.h_list.len() < 3 {
            errors.push("convergence.h_list needs at least 3 entries".into());
        }
        if self.fidelity.n_cases == 0 {
            errors.push("fidelity.n_cases must be >= 1".into());
        }
        if self.fidelity.prompt_len == 0 {
            errors.push("fidelity.prompt_len must be >= 1".into());
        }
        if self.bound.delta_max < 0.0 {
            errors.push("bound.delta_max must be >= 0".into());
        }
        if self.respmap.out_h == 0 || self.respmap.out_w == 0 {
            errors.push("respmap output size must be >= 1".into());
        }
        let mut op_errors = Vec::new();
        self.edit.plan.to_core(&mut op_errors);
        errors.extend(op_errors);
        errors
    }

    pub fn validated(&self) -> Result<()> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(())
        } else {
            bail!("config invalid ({} violation(s)):\n  - {}", errors.len(), errors.join("\n  - "))
        }
    }

    pub fn build_field(&self) -> Result<BuiltField> {
        let field = match &self.field {
            FieldSpec::Constant { value } => {
                BuiltField::Analytic(AnalyticField::constant(*value).map_err(anyhow::Error::msg)?)
            }
            FieldSpec::LinearScalar { lambda } => BuiltField::Analytic(
                AnalyticField::linear_scalar(*lambda).map_err(anyhow::Error::msg)?,
            ),
            FieldSpec::TimePoly { coeffs } => BuiltField::Analytic(
                AnalyticField::time_poly(coeffs.clone()).map_err(anyhow::Error::msg)?,
            ),
            FieldSpec::Logistic => BuiltField::Analytic(AnalyticField::logistic()),
            FieldSpec::GaussToGauss { mu0, sigma0 } => BuiltField::Analytic(
                AnalyticField::gauss_to_gauss(*mu0, *sigma0).map_err(anyhow::Error::msg)?,
            ),
            FieldSpec::ToyMmdit { model } => BuiltField::Toy(Box::new(
                ToyMMDiT::new(model.to_core()).map_err(anyhow::Error::msg)?,
            )),
        };
        Ok(field)
    }

    /// Latent shape of the run: the model's for the toy field, the config's
    /// `shape` for analytic fields.
    pub fn latent_shape(&self, field: &BuiltField) -> Shape {
        match field {
            BuiltField::Toy(m) => m.latent_shape(),
            BuiltField::Analytic(_) => Shape::new(self.shape[0], self.shape[1], self.shape[2]),
        }
    }

    /// Initial state per the `init` section, drawn from the run seed.
    pub fn initial_state(&self, field: &BuiltField) -> LatentState {
        let shape = self.latent_shape(field);
        match self.init {
            InitSpec::Gaussian => SeededRng::new(self.seed).normal_latent(shape),
            InitSpec::Constant { value } => LatentState::filled(shape, value),
        }
    }

    /// Prompt embedding for toy-model runs; analytic fields take no prompt.
    pub fn prompt_embedding(&self, field: &BuiltField) -> Result<Option<PromptEmbedding>> {
        match field.toy() {
            Some(model) => {
                let emb = model.embed_prompt(&self.prompt).map_err(anyhow::Error::msg)?;
                Ok(Some(emb))
            }
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_empty());
        assert_eq!(cfg.version, CONFIG_VERSION);
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut tree, "steps=12").unwrap();
        apply_override(&mut tree, "solve.direction=invert").unwrap();
        apply_override(&mut tree, "tableau=classic4").unwrap();
        apply_override(&mut tree, "edit.plan.d_list=[1,2]").unwrap();
        let cfg: RunConfig = serde_json::from_value(tree).unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.solve.direction, "invert");
        assert_eq!(cfg.tableau, "classic4");
        assert_eq!(cfg.edit.plan.d_list, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut tree, "stepz=12").unwrap();
        assert!(serde_json::from_value::<RunConfig>(tree).is_err());
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = RunConfig::default();
        cfg.steps = 0;
        cfg.solve.direction = "sideways".into();
        cfg.prompt = vec![999];
        cfg.fidelity.n_cases = 0;
        let errors = cfg.validate();
        assert!(errors.len() >= 4, "{errors:?}");
        let msg = cfg.validated().unwrap_err().to_string();
        assert!(msg.contains("4 violation") || msg.contains("violation(s)"));
        assert!(msg.contains("sideways"));
        assert!(msg.contains("999"));
    }

    #[test]
    fn field_construction_and_shapes() {
        let mut cfg = RunConfig::default();
        cfg.field = FieldSpec::LinearScalar { lambda: -1.0 };
        cfg.shape = [2, 3, 4];
        let field = cfg.build_field().unwrap();
        assert_eq!(cfg.latent_shape(&field), Shape::new(2, 3, 4));
        assert!(cfg.prompt_embedding(&field).unwrap().is_none());

        let cfg = RunConfig::default(); // toy field
        let field = cfg.build_field().unwrap();
        assert_eq!(cfg.latent_shape(&field), Shape::new(4, 8, 8));
        assert!(cfg.prompt_embedding(&field).unwrap().is_some());
        let z = cfg.initial_state(&field);
        assert_eq!(z.shape(), Shape::new(4, 8, 8));
    }

    #[test]
    fn seed_flag_wins_over_file_and_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, serde_json::to_string(&RunConfig::default()).unwrap()).unwrap();
        let cfg = load_config(Some(&path), &["seed=5".to_string()], Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
    }
}

//! JSON experiment configuration.
//!
//! One document drives every subcommand; unused sections are simply absent.
//! Plants and excitation controllers are either presets or explicit
//! matrices. Every campaign must carry a seed — there are no unseeded runs.

use cgm_core::control::{ControllerKind, ControllerSpec};
use cgm_core::lti::{
    default_excitation_controller, default_stable_plant, unstable_benchmark_controller,
    unstable_benchmark_plant, InitialState, NoiseKind, NoiseModel, StabilizingController,
    StateSpaceModel,
};
use cgm_core::numerics::{Matrix, Vector};
use cgm_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::BenchError;

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub plant: PlantSpec,
    #[serde(default)]
    pub excitation: ExcitationSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub simulate: Option<SimulateSpec>,
    #[serde(default)]
    pub library: Option<LibrarySpec>,
    #[serde(default)]
    pub predict: Option<PredictSpec>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSpec>,
    #[serde(default)]
    pub tini_gap: Option<TiniGapSpec>,
    #[serde(default)]
    pub control_benchmark: Option<ControlBenchmarkSpec>,
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {path:?}: {e}")))?;
        let cfg: ExperimentConfig = serde_json::from_str(&raw)
            .map_err(|e| BenchError::Config(format!("invalid config {path:?}: {e}")))?;
        Ok(cfg)
    }

    pub fn build_plant(&self) -> Result<StateSpaceModel> {
        self.plant.build()
    }

    pub fn build_excitation(&self, plant: &StateSpaceModel) -> Result<StabilizingController> {
        self.excitation.build(plant)
    }

    pub fn noise_model(&self) -> NoiseModel {
        self.noise.to_model()
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if rows.iter().any(|row| row.len() != c) {
        return Err(BenchError::Config("ragged matrix literal".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(r, c, &flat))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum PlantSpec {
    /// Committed 4-state SISO demo plant.
    DefaultStable,
    /// Committed open-loop unstable 2-state plant.
    UnstableBenchmark,
    /// Explicit matrices.
    Explicit {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
    },
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec::DefaultStable
    }
}

impl PlantSpec {
    pub fn build(&self) -> Result<StateSpaceModel> {
        match self {
            PlantSpec::DefaultStable => Ok(default_stable_plant()),
            PlantSpec::UnstableBenchmark => Ok(unstable_benchmark_plant()),
            PlantSpec::Explicit { a, b, c, q, r } => StateSpaceModel::new(
                matrix_from_rows(a)?,
                matrix_from_rows(b)?,
                matrix_from_rows(c)?,
                matrix_from_rows(q)?,
                matrix_from_rows(r)?,
            )
            .map_err(config_err),
        }
    }
}

fn config_err(e: CoreError) -> BenchError {
    BenchError::Config(e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ExcitationSpec {
    /// Pure white-noise inputs with the given covariance scale.
    WhiteNoise {
        #[serde(default = "one")]
        r_ctrl: f64,
    },
    /// Committed low-pass feedback controller for the default plant.
    DefaultLowpass,
    /// Committed observer-based stabilizer for the unstable plant.
    UnstableObserver,
    Explicit {
        a_ctrl: Vec<Vec<f64>>,
        b_ctrl: Vec<Vec<f64>>,
        c_ctrl: Vec<Vec<f64>>,
        r_ctrl: Vec<Vec<f64>>,
        sigma_phi: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        ExcitationSpec::WhiteNoise { r_ctrl: 1.0 }
    }
}

impl ExcitationSpec {
    pub fn build(&self, plant: &StateSpaceModel) -> Result<StabilizingController> {
        match self {
            ExcitationSpec::WhiteNoise { r_ctrl } => {
                let m = plant.input_dim();
                StabilizingController::white_noise(plant, Matrix::identity(m, m) * *r_ctrl)
                    .map_err(config_err)
            }
            ExcitationSpec::DefaultLowpass => Ok(default_excitation_controller(plant)),
            ExcitationSpec::UnstableObserver => Ok(unstable_benchmark_controller(plant)),
            ExcitationSpec::Explicit {
                a_ctrl,
                b_ctrl,
                c_ctrl,
                r_ctrl,
                sigma_phi,
            } => StabilizingController::new(
                plant,
                matrix_from_rows(a_ctrl)?,
                matrix_from_rows(b_ctrl)?,
                matrix_from_rows(c_ctrl)?,
                matrix_from_rows(r_ctrl)?,
                matrix_from_rows(sigma_phi)?,
            )
            .map_err(config_err),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default = "default_kind")]
    pub kind: NoiseKind,
    #[serde(default = "one")]
    pub q_scale: f64,
    #[serde(default = "one")]
    pub r_scale: f64,
    #[serde(default = "one")]
    pub r_ctrl_scale: f64,
}

fn default_kind() -> NoiseKind {
    NoiseKind::Gaussian
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            q_scale: 1.0,
            r_scale: 1.0,
            r_ctrl_scale: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn to_model(&self) -> NoiseModel {
        NoiseModel {
            kind: self.kind,
            q_scale: self.q_scale,
            r_scale: self.r_scale,
            r_ctrl_scale: self.r_ctrl_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    Zero,
    Stationary,
    /// Gaussian with the stationary plant-state covariance.
    StationaryGaussianState,
}

impl InitSpec {
    pub fn to_initial_state(
        self,
        plant: &StateSpaceModel,
        ctrl: &StabilizingController,
        noise: &NoiseModel,
    ) -> Result<InitialState> {
        Ok(match self {
            InitSpec::Zero => InitialState::Zero,
            InitSpec::Stationary => InitialState::Stationary,
            InitSpec::StationaryGaussianState => {
                let pi = cgm_core::lti::stationary_augmented_cov(plant, ctrl, noise)
                    .map_err(config_err)?;
                let n = plant.state_dim();
                InitialState::Gaussian {
                    cov: pi.view((0, 0), (n, n)).into_owned(),
                }
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub length: usize,
    #[serde(default = "default_init")]
    pub init: InitSpec,
}

fn default_init() -> InitSpec {
    InitSpec::Stationary
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LibraryMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub t_ini: usize,
    pub t: usize,
    pub mode: LibraryMode,
    /// Library width; single mode simulates K = N + T_ini + T - 1 steps.
    pub n_cols: usize,
    #[serde(default = "default_init")]
    pub init: InitSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSpec {
    pub u_ini: Vec<f64>,
    pub y_ini: Vec<f64>,
    pub u_f: Vec<f64>,
    #[serde(default)]
    pub samples: usize,
}

impl PredictSpec {
    pub fn initial_trajectory(&self) -> cgm_core::cgm::InitialTrajectory {
        cgm_core::cgm::InitialTrajectory::new(
            Vector::from_column_slice(&self.u_ini),
            Vector::from_column_slice(&self.y_ini),
            Vector::from_column_slice(&self.u_f),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub t_ini: usize,
    pub t: usize,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub modes: Vec<LibraryMode>,
    #[serde(default = "default_init")]
    pub init: InitSpec,
}

impl ConvergenceSpec {
    /// The headline protocol: T_ini = 8, T = 10, N in octaves 128..4096,
    /// 30 trials, single-trajectory mode with stationary starts.
    pub fn headline() -> Self {
        ConvergenceSpec {
            t_ini: 8,
            t: 10,
            n_grid: vec![128, 256, 512, 1024, 2048, 4096],
            trials: 30,
            modes: vec![LibraryMode::Single],
            init: InitSpec::Stationary,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiniGapSpec {
    pub t: usize,
    pub t_ini_grid: Vec<usize>,
    pub trials: usize,
}

impl TiniGapSpec {
    pub fn headline() -> Self {
        TiniGapSpec {
            t: 10,
            t_ini_grid: (2..=30).collect(),
            trials: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchControllerSpec {
    pub kind: ControllerKind,
    /// Library width for the data-driven kinds (ignored by truth-model kinds).
    #[serde(default)]
    pub n_lib: usize,
    #[serde(default)]
    pub label: Option<String>,
}

impl BenchControllerSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let kind = serde_json::to_string(&self.kind).unwrap_or_default();
            let kind = kind.trim_matches('"');
            if self.n_lib > 0 {
                format!("{kind}_n{}", self.n_lib)
            } else {
                kind.to_string()
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub y_ref: f64,
    pub w_y: f64,
    pub w_u: f64,
    pub y_upper: f64,
    #[serde(default)]
    pub u_abs_max: Option<f64>,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            y_ref: 10.0,
            w_y: 1.0,
            w_u: 0.01,
            y_upper: 12.0,
            u_abs_max: None,
        }
    }
}

impl ObjectiveSpec {
    pub fn to_objective(&self, m: usize, p: usize) -> cgm_core::control::ControlObjective {
        cgm_core::control::ControlObjective {
            y_ref: Vector::from_element(p, self.y_ref),
            w_y: self.w_y,
            w_u: self.w_u,
            y_upper: Vector::from_element(p, self.y_upper),
            u_box: self
                .u_abs_max
                .map(|bound| (Vector::from_element(m, -bound), Vector::from_element(m, bound))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBenchmarkSpec {
    pub t_ini: usize,
    pub t: usize,
    /// Online steps after the zero-input initialization window.
    pub steps: usize,
    pub trials: usize,
    pub m_scenarios: usize,
    pub controllers: Vec<BenchControllerSpec>,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    #[serde(default = "default_gamma_y")]
    pub gamma_y: f64,
    #[serde(default = "default_gamma_z")]
    pub gamma_z: f64,
    #[serde(default = "default_gamma_tilde")]
    pub gamma_tilde: f64,
    #[serde(default = "default_true")]
    pub antithetic: bool,
}

fn default_gamma_y() -> f64 {
    100.0
}

fn default_gamma_z() -> f64 {
    1e6
}

fn default_gamma_tilde() -> f64 {
    1000.0
}

fn default_true() -> bool {
    true
}

impl ControlBenchmarkSpec {
    pub fn controller_spec(&self, kind: ControllerKind) -> ControllerSpec {
        ControllerSpec {
            kind,
            m_scenarios: self.m_scenarios,
            gamma_y: self.gamma_y,
            gamma_z: self.gamma_z,
            gamma_tilde: self.gamma_tilde,
            t: self.t,
            t_ini: self.t_ini,
            antithetic: self.antithetic,
        }
    }

    /// The benchmark protocol at desk scale: the four controllers the
    /// acceptance path compares, M = 50, 100 online steps.
    pub fn headline(trials: usize) -> Self {
        ControlBenchmarkSpec {
            t_ini: 8,
            t: 10,
            steps: 100,
            trials,
            m_scenarios: 50,
            controllers: vec![
                BenchControllerSpec {
                    kind: ControllerKind::SspcGen,
                    n_lib: 1000,
                    label: None,
                },
                BenchControllerSpec {
                    kind: ControllerKind::Spc,
                    n_lib: 1000,
                    label: None,
                },
                BenchControllerSpec {
                    kind: ControllerKind::KfDmpc,
                    n_lib: 0,
                    label: None,
                },
                BenchControllerSpec {
                    kind: ControllerKind::SsmpcModel,
                    n_lib: 0,
                    label: None,
                },
            ],
            objective: ObjectiveSpec::default(),
            gamma_y: 100.0,
            gamma_z: 1e6,
            gamma_tilde: 1000.0,
            antithetic: true,
        }
    }
}

//! Turns a config into a concrete system, weight matrices, schedule and noise.

use serde::Serialize;
use twoscale::algorithm::StepSchedule;
use twoscale::analysis::{sigma_power_threshold, BoundParams};
use twoscale::network::{
    build_topology, lazy_weights, sigma_pair, validate_assumption3, Assumption3Report, WeightMatrix,
};
use twoscale::noise::{
    make_noise_model, GtdNoise, NoiseModel, NoiseProcess, SyntheticNoise, ZeroNoise,
};
use twoscale::numerics::DenseMatrix;
use twoscale::problem::{
    exact_solution, random_gtd_model, random_heterogeneous_instance, random_instance,
    scale_to_assumption2, validate_assumptions, AssumptionsReport, BlockSystem, GtdModel, Mdp,
    Solution,
};

use crate::config::{ExperimentConfig, LoadedConfig, NoiseSpec, SystemSpec, TopologySpec};
use crate::{read_file, CliError};

#[derive(Debug, Clone)]
pub enum NoiseSource {
    Zero,
    Synthetic(NoiseModel),
    Sampled,
}

/// Everything a replica needs, shared read-only across replicas.
#[derive(Debug, Clone)]
pub struct Setup {
    pub system: BlockSystem,
    /// Factor applied to a GTD system to meet the block-norm condition.
    pub scale: f64,
    pub gtd: Option<GtdModel>,
    pub w: WeightMatrix,
    pub v: WeightMatrix,
    pub schedule: StepSchedule,
    pub solution: Solution,
    pub noise: NoiseSource,
    /// Sure bound `C` on the per-node noise, when one exists.
    pub noise_bound: Option<f64>,
    pub sigma: f64,
    /// Constants of the consensus analysis; absent without a noise bound.
    pub params: Option<BoundParams>,
}

impl Setup {
    pub fn make_noise(&self, seed: u64) -> Box<dyn NoiseProcess> {
        match &self.noise {
            NoiseSource::Zero => Box::new(ZeroNoise),
            NoiseSource::Synthetic(m) => Box::new(SyntheticNoise::new(m.clone(), seed)),
            NoiseSource::Sampled => Box::new(GtdNoise::new(
                self.gtd
                    .clone()
                    .expect("sampled noise requires a GTD model"),
                self.system.clone(),
                self.scale,
                seed,
            )),
        }
    }
}

fn setup_err(e: impl std::fmt::Display) -> CliError {
    CliError::Setup(e.to_string())
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DenseMatrix, CliError> {
    DenseMatrix::from_rows(rows).map_err(|e| CliError::Setup(format!("{name}: {e}")))
}

fn build_system(spec: &SystemSpec) -> Result<(BlockSystem, f64, Option<GtdModel>), CliError> {
    match spec {
        SystemSpec::Random {
            d,
            nodes,
            seed,
            delta_margin,
            heterogeneity,
        } => {
            let sys = match heterogeneity {
                Some(h) if *h > 0.0 => {
                    random_heterogeneous_instance(*d, *nodes, *seed, *delta_margin, *h)
                }
                _ => random_instance(*d, *nodes, *seed, *delta_margin),
            }
            .map_err(setup_err)?;
            Ok((sys, 1.0, None))
        }
        SystemSpec::Gtd {
            transitions,
            rewards,
            features,
            gamma,
        } => {
            let mdp = Mdp {
                transitions: matrix(transitions, "transitions")?,
                rewards: rewards.clone(),
            };
            let model =
                GtdModel::new(mdp, matrix(features, "features")?, *gamma).map_err(setup_err)?;
            gtd_system(model)
        }
        SystemSpec::GtdRandom {
            states,
            d,
            agents,
            gamma,
            seed,
        } => gtd_system(random_gtd_model(*states, *d, *agents, *gamma, *seed).map_err(setup_err)?),
        SystemSpec::File { path } => {
            let text = read_file(path)?;
            let sys: BlockSystem = serde_json::from_str(&text).map_err(|e| CliError::Parse {
                source_name: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
            Ok((sys, 1.0, None))
        }
    }
}

fn gtd_system(model: GtdModel) -> Result<(BlockSystem, f64, Option<GtdModel>), CliError> {
    let raw = model.system().map_err(setup_err)?;
    let (sys, scale) = scale_to_assumption2(&raw);
    Ok((sys, scale, Some(model)))
}

fn weights(t: &TopologySpec, n: usize, laziness: f64) -> Result<WeightMatrix, CliError> {
    let topo = build_topology(t.kind(), n, t.edge_prob(), t.seed()).map_err(setup_err)?;
    lazy_weights(&topo, laziness).map_err(setup_err)
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let (system, scale, gtd) = build_system(&cfg.system)?;
    let n = system.nodes();
    let d = system.d();
    let w = weights(&cfg.topology, n, cfg.laziness)?;
    let v = weights(&cfg.topology_v, n, cfg.laziness_v)?;
    let sigma = sigma_pair(&w, &v).map_err(setup_err)?;
    let schedule = StepSchedule::new(cfg.alpha0, cfg.beta0).map_err(setup_err)?;
    let solution = exact_solution(&system).map_err(setup_err)?;
    let (noise, noise_bound) = match &cfg.noise {
        NoiseSpec::None => (NoiseSource::Zero, Some(0.0)),
        NoiseSpec::Sampled => (NoiseSource::Sampled, None),
        NoiseSpec::Iso(v) => {
            let m = NoiseModel::iso(d, *v).map_err(setup_err)?;
            let c = m.bound();
            (NoiseSource::Synthetic(m), Some(c))
        }
        NoiseSpec::Gamma(rows) => {
            let m = make_noise_model(&matrix(rows, "noise.gamma")?).map_err(setup_err)?;
            let c = m.bound();
            (NoiseSource::Synthetic(m), Some(c))
        }
    };
    let params = match noise_bound {
        Some(c) => Some(
            BoundParams::new(
                w.sigma2(),
                v.sigma2(),
                cfg.delta,
                n,
                system.r(),
                c,
                &schedule,
                cfg.d0.unwrap_or(0.0),
                cfg.d1.unwrap_or(0.0),
            )
            .map_err(setup_err)?,
        ),
        None => None,
    };
    Ok(Setup {
        system,
        scale,
        gtd,
        w,
        v,
        schedule,
        solution,
        noise,
        noise_bound,
        sigma,
        params,
    })
}

/// Assumption checks for the `validate` verb.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub nodes: usize,
    pub d: usize,
    pub scale: f64,
    pub system: AssumptionsReport,
    pub mixing_w: Assumption3Report,
    pub mixing_v: Assumption3Report,
    pub sigma: f64,
    pub noise_bound: Option<f64>,
    pub delta: Option<f64>,
    pub kstar: Option<u64>,
    pub constant_d: Option<f64>,
    pub sigma_power_threshold: Option<u64>,
    pub time_scales_ordered: bool,
    pub warnings: Vec<String>,
    pub defaults_applied: Vec<String>,
    pub all_pass: bool,
}

pub fn validate_config(loaded: &LoadedConfig) -> Result<ValidationReport, CliError> {
    let setup = build_setup(&loaded.config)?;
    let system = validate_assumptions(&setup.system);
    let mixing_w = validate_assumption3(&setup.w);
    let mixing_v = validate_assumption3(&setup.v);
    let ordered = setup.schedule.is_ordered();
    let all_pass = system.all_pass() && mixing_w.all_pass() && mixing_v.all_pass() && ordered;
    Ok(ValidationReport {
        nodes: setup.system.nodes(),
        d: setup.system.d(),
        scale: setup.scale,
        system,
        mixing_w,
        mixing_v,
        sigma: setup.sigma,
        noise_bound: setup.noise_bound,
        delta: setup.params.as_ref().map(|p| p.delta),
        kstar: setup.params.as_ref().map(|p| p.kstar),
        constant_d: setup.params.as_ref().map(|p| p.d),
        sigma_power_threshold: sigma_power_threshold(setup.sigma).ok(),
        time_scales_ordered: ordered,
        warnings: loaded.warnings.clone(),
        defaults_applied: loaded.defaults_applied.clone(),
        all_pass,
    })
}

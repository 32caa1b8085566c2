//! Dispatch a resolved configuration to the experiment operations and write
//! the CSV outputs with their provenance sidecars.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mdplab_core::experiments::{
    clt_diagnostic, contraction_experiment, contraction_table, cramer_table, exp_equivalence_experiment, flag,
    fmt_num, integrability_probe, mdp_tail_experiment, pathwise_contraction_check, probe_table, report_table,
    tail_table, ContractionParams, CouplingSetup, EquivalenceParams, MdpParams, ModerateParams, PathwiseParams,
    ProbeParams, Table, TAIL_HEADER,
};
use mdplab_core::functionals::{asymptotic_variance, VarianceParams};
use mdplab_core::integrator::{estimate_invariant_from, gaussian_cloud, resample, simulate};
use mdplab_core::measures::{read_cloud_csv, write_cloud_csv};
use mdplab_core::models::{
    certify_d3, check_d3, check_h1, check_h2, h2_probes, kalman_rank, make_mean_field_ou, make_shs_linear,
    HypothesisReport, Witness, DEFAULT_TOLERANCE,
};
use mdplab_core::{
    Domain, Dynamics, EmpiricalMeasure, HypothesisConstants, Model, Observable, ParticleSystem, StreamKey,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig, InitialConfig, InvariantConfig, ModelConfig, RunConfig, VarianceSettings};

/// Salts separating the auxiliary estimates from the experiment's own
/// replica streams.
const INVARIANT_SALT: u64 = 0x1a7e_5eed_0000_0001;
const VARIANCE_SALT: u64 = 0x1a7e_5eed_0000_0002;
const INITIAL_SALT: u64 = 0x1a7e_5eed_0000_0003;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "configuration error: {e}"),
            RunError::Runtime(e) => write!(f, "runtime error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

fn rt(e: impl fmt::Display) -> RunError {
    RunError::Runtime(e.to_string())
}

/// One output file: a CSV table or a raw body, plus its summary record.
#[derive(Debug, Clone)]
pub struct Output {
    pub file: String,
    pub body: String,
    pub rows: usize,
    pub summary: Value,
}

impl Output {
    fn table(file: &str, t: &Table, summary: Value) -> Self {
        Self {
            file: file.to_string(),
            body: t.to_csv_string(),
            rows: t.rows.len(),
            summary,
        }
    }

    fn cloud(file: &str, mu: &EmpiricalMeasure, summary: Value) -> Result<Self, RunError> {
        let mut buf = Vec::new();
        write_cloud_csv(mu, &mut buf).map_err(rt)?;
        Ok(Self {
            file: file.to_string(),
            body: String::from_utf8(buf).map_err(rt)?,
            rows: mu.len(),
            summary,
        })
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    version: &'static str,
    subcommand: &'a str,
    output: &'a str,
    config: &'a RunConfig,
    summary: &'a Value,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model, RunError> {
    match *cfg {
        ModelConfig::MeanFieldOu {
            theta,
            eta,
            sigma0,
            dim,
            constants,
        } => {
            let mut m = make_mean_field_ou(theta, eta, sigma0, dim).map_err(|e| RunError::Config(ConfigError {
                key: "model".into(),
                reason: e.to_string(),
            }))?;
            if let Some(c) = constants {
                m = m
                    .with_constants(HypothesisConstants {
                        lambda1: c.lambda1,
                        lambda2: c.lambda2,
                        kappa1: c.kappa1,
                        kappa2: c.kappa2,
                    })
                    .map_err(|e| {
                        RunError::Config(ConfigError {
                            key: "model.constants".into(),
                            reason: e.to_string(),
                        })
                    })?;
            }
            Ok(m.into())
        }
        ModelConfig::ShsLinear {
            gamma,
            k,
            eps_int,
            sigma0,
        } => {
            let m = make_shs_linear(gamma, k, eps_int, sigma0).map_err(|e| {
                RunError::Config(ConfigError {
                    key: "model".into(),
                    reason: e.to_string(),
                })
            })?;
            Ok(match certify_d3(&m) {
                Some(c) => m.with_certificate(c).into(),
                None => m.into(),
            })
        }
    }
}

fn load_cloud(path: &Path) -> Result<EmpiricalMeasure, RunError> {
    let f = fs::File::open(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
    read_cloud_csv(f).map_err(|e| rt(format!("{}: {e}", path.display())))
}

fn invariant_law(model: &Arc<Model>, inv: &InvariantConfig, seed: u64) -> Result<(EmpiricalMeasure, Value), RunError> {
    match inv {
        InvariantConfig::Estimate {
            n_particles,
            t_burn,
            t_avg,
            dt,
        } => {
            let s = seed ^ INVARIANT_SALT;
            let init = gaussian_cloud(model.state_dim(), *n_particles, s).map_err(rt)?;
            let est = estimate_invariant_from(model.clone(), &init, *t_burn, *t_avg, *dt, s).map_err(rt)?;
            let summary = json!({ "residual_w2": est.residual, "mean": est.mu_bar_hat.mean(), "variance": est.mu_bar_hat.variance() });
            Ok((est.mu_bar_hat, summary))
        }
        InvariantConfig::File { path } => {
            let mu = load_cloud(path)?;
            if mu.dim() != model.state_dim() {
                return Err(rt(format!("{}: dimension {} differs from the model", path.display(), mu.dim())));
            }
            Ok((mu, json!({ "file": path })))
        }
    }
}

/// Lazily estimated `μ̄̂`, shared by the initial cloud and the experiment.
struct Invariant<'a> {
    model: &'a Arc<Model>,
    cfg: &'a InvariantConfig,
    seed: u64,
    law: Option<(EmpiricalMeasure, Value)>,
}

impl<'a> Invariant<'a> {
    fn new(model: &'a Arc<Model>, cfg: &'a InvariantConfig, seed: u64) -> Self {
        Self {
            model,
            cfg,
            seed,
            law: None,
        }
    }

    fn get(&mut self) -> Result<&EmpiricalMeasure, RunError> {
        if self.law.is_none() {
            self.law = Some(invariant_law(self.model, self.cfg, self.seed)?);
        }
        Ok(&self.law.as_ref().expect("just set").0)
    }

    fn summary(&self) -> Value {
        self.law.as_ref().map_or(Value::Null, |l| l.1.clone())
    }
}

fn initial_cloud(init: &InitialConfig, n: usize, dim: usize, seed: u64, inv: &mut Invariant) -> Result<EmpiricalMeasure, RunError> {
    let s = seed ^ INITIAL_SALT;
    match init {
        InitialConfig::Dirac { point } => {
            EmpiricalMeasure::from_flat(dim, point.iter().copied().cycle().take(n * dim).collect()).map_err(rt)
        }
        InitialConfig::Gaussian { mean, std } => {
            let g = gaussian_cloud(dim, n, s).map_err(rt)?;
            let zero = vec![0.0; dim];
            let m = mean.as_deref().unwrap_or(&zero);
            let pts = g
                .atoms()
                .flat_map(|a| a.iter().zip(m).map(|(z, c)| c + std * z).collect::<Vec<_>>())
                .collect();
            EmpiricalMeasure::from_flat(dim, pts).map_err(rt)
        }
        InitialConfig::Invariant => {
            let mu = inv.get()?;
            if mu.len() == n {
                Ok(mu.clone())
            } else {
                resample(mu, n, StreamKey::new(s, 0, Domain::Initial, 0)).map_err(rt)
            }
        }
        InitialConfig::File { path } => {
            let mu = load_cloud(path)?;
            if mu.dim() != dim {
                return Err(rt(format!("{}: dimension {} differs from the model", path.display(), mu.dim())));
            }
            if mu.len() == n {
                Ok(mu)
            } else {
                resample(&mu, n, StreamKey::new(s, 0, Domain::Initial, 0)).map_err(rt)
            }
        }
    }
}

fn report_summary(r: &HypothesisReport) -> Value {
    json!({
        "trials": r.trials,
        "worst_margin": r.worst_margin,
        "pass": r.pass,
        "witness": r.witness.as_ref().map(|w| w.description.clone()),
    })
}

fn variance_params(v: &VarianceSettings, seed: u64) -> VarianceParams {
    VarianceParams {
        horizon: v.horizon,
        dt: v.dt,
        tau: v.tau,
        replicas: v.replicas,
        seed: seed ^ VARIANCE_SALT,
    }
}

/// Run the experiment and return its outputs without touching the disk.
pub fn execute(cfg: &RunConfig) -> Result<Vec<Output>, RunError> {
    let model = Arc::new(build_model(&cfg.model)?);
    let dim = model.state_dim();
    let seed = cfg.seed;
    let mut out = Vec::new();
    match cfg.experiment() {
        ExperimentConfig::Check(c) => {
            let mut rows: Vec<(&str, HypothesisReport)> = Vec::new();
            let mut extra = json!({});
            match model.as_ref() {
                Model::Ddsde(m) => {
                    rows.push(("h1", check_h1(m, seed, c.n_trials, c.support)));
                    let (states, measures) = h2_probes(seed, dim, c.h2_probes, c.support);
                    let h2 = check_h2(m, &states, &measures).map_err(rt)?;
                    let k = m.constants();
                    let worst = (k.kappa1 - h2.kappa1_hat).max(h2.kappa2_hat - k.kappa2);
                    rows.push((
                        "h2",
                        HypothesisReport {
                            trials: states.len(),
                            worst_margin: worst,
                            witness: (!h2.pass).then(|| Witness {
                                trial: 0,
                                description: format!("kappa1_hat={} kappa2_hat={}", h2.kappa1_hat, h2.kappa2_hat),
                            }),
                            tolerance: DEFAULT_TOLERANCE,
                            pass: h2.pass,
                        },
                    ));
                    extra = json!({ "kappa1_hat": h2.kappa1_hat, "kappa2_hat": h2.kappa2_hat });
                }
                Model::Shs(m) => {
                    let kr = kalman_rank(m.mat_a(), m.mat_b()).map_err(rt)?;
                    rows.push((
                        "kalman",
                        HypothesisReport {
                            trials: 1,
                            worst_margin: (m.m() - kr.rank) as f64,
                            witness: (!kr.pass).then(|| Witness {
                                trial: 0,
                                description: format!("rank={} of {}", kr.rank, m.m()),
                            }),
                            tolerance: 0.0,
                            pass: kr.pass,
                        },
                    ));
                    let cert = certify_d3(m);
                    let (r, r0) = match (c.r, c.r0, cert) {
                        (Some(r), Some(r0), _) => (r, r0),
                        (_, _, Some(ct)) => (ct.r, ct.r0),
                        _ => (1.0, 0.0),
                    };
                    let d3 = check_d3(m, r, r0, seed, c.n_trials).map_err(rt)?;
                    let mut rep = d3.sampled.clone();
                    if cert.is_none() {
                        rep.pass = false;
                        if rep.witness.is_none() {
                            rep.witness = Some(Witness {
                                trial: 0,
                                description: "no grid point certifies theta1 > theta2".into(),
                            });
                        }
                    }
                    rows.push(("d3", rep));
                    extra = json!({
                        "certificate": cert.map(|c| json!({
                            "r": c.r, "r0": c.r0, "theta1": c.theta1, "theta2": c.theta2,
                            "psi_constant": c.psi_constant,
                            "rate": (c.theta1 - c.theta2) / (2.0 * c.psi_constant),
                        })),
                        "sampled_thetas": [d3.sampled_thetas.0, d3.sampled_thetas.1],
                    });
                }
            }
            let named: Vec<(&str, &HypothesisReport)> = rows.iter().map(|(n, r)| (*n, r)).collect();
            let summary = json!({
                "reports": rows.iter().map(|(n, r)| (n.to_string(), report_summary(r))).collect::<serde_json::Map<_, _>>(),
                "all_pass": rows.iter().all(|(_, r)| r.pass),
                "details": extra,
            });
            out.push(Output::table("check.csv", &report_table(&named), summary));
        }
        ExperimentConfig::Simulate(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let init = initial_cloud(&c.initial, c.n_particles, dim, seed, &mut inv)?;
            let ps = ParticleSystem::new(model.clone(), &init, seed, 0).map_err(rt)?;
            let (end, paths) = simulate(&ps, c.horizon, c.dt, &c.track).map_err(rt)?;
            let mut header = vec!["particle".to_string(), "t".to_string()];
            header.extend((0..dim).map(|k| format!("x{k}")));
            let mut t = Table {
                header,
                rows: Vec::new(),
            };
            for (&i, p) in c.track.iter().zip(&paths) {
                for k in 0..p.len() {
                    let mut row = vec![i.to_string(), fmt_num(p.time(k))];
                    row.extend(p.point(k).iter().map(|&v| fmt_num(v)));
                    t.push(row);
                }
            }
            let emp = end.empirical();
            let summary = json!({ "time": end.time(), "mean": emp.mean(), "variance": emp.variance() });
            out.push(Output::cloud("simulate.csv", &emp, summary.clone())?);
            out.push(Output::table("paths.csv", &t, summary));
        }
        ExperimentConfig::Invariant(c) => {
            let dummy = InvariantConfig::default();
            let mut inv = Invariant::new(&model, &dummy, seed);
            let init = initial_cloud(&c.initial, c.n_particles, dim, seed, &mut inv)?;
            let est = estimate_invariant_from(model.clone(), &init, c.t_burn, c.t_avg, c.dt, seed).map_err(rt)?;
            let mu = &est.mu_bar_hat;
            let summary = json!({ "mean": mu.mean(), "variance": mu.variance(), "residual_w2": est.residual });
            out.push(Output::cloud("invariant.csv", mu, summary)?);
        }
        ExperimentConfig::Variance(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let mu = inv.get()?.clone();
            let v = asymptotic_variance(&model, &Observable::catalogue(c.observable), &mu, variance_params(&c.settings(), seed))
                .map_err(rt)?;
            let mut t = Table::new(&["vbar", "stderr", "truncation_tau", "dt", "horizon", "replicas"]);
            t.push(vec![
                fmt_num(v.vbar),
                fmt_num(v.stderr),
                fmt_num(v.truncation_tau),
                fmt_num(v.dt),
                fmt_num(c.horizon),
                c.replicas.to_string(),
            ]);
            let summary = json!({ "vbar": v.vbar, "stderr": v.stderr, "per_replica": v.per_replica, "invariant": inv.summary() });
            out.push(Output::table("variance.csv", &t, summary));
        }
        ExperimentConfig::Contraction(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let nu0 = initial_cloud(&c.initial, c.n_particles, dim, seed, &mut inv)?;
            let mu = inv.get()?.clone();
            let rows = contraction_experiment(
                model.clone(),
                &nu0,
                &mu,
                &ContractionParams {
                    horizons: c.horizons.clone(),
                    n_particles: c.n_particles,
                    dt: c.dt,
                    seed,
                },
            )
            .map_err(rt)?;
            let positive: Vec<(f64, f64)> = rows.iter().filter(|r| r.observed > 0.0).map(|r| (r.t, r.observed.ln())).collect();
            let slope = if positive.len() >= 2 {
                let (xs, ys): (Vec<f64>, Vec<f64>) = positive.into_iter().unzip();
                Some(mdplab_core::experiments::ls_slope(&xs, &ys))
            } else {
                None
            };
            let summary = json!({
                "rate": model.contraction().map(|c| c.rate),
                "log_observed_slope": slope,
                "invariant": inv.summary(),
            });
            out.push(Output::table("contraction.csv", &contraction_table(&rows), summary));
        }
        ExperimentConfig::Pathwise(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let nu = initial_cloud(&c.initial, c.n_particles, dim, seed, &mut inv)?;
            let mu = inv.get()?.clone();
            let r = pathwise_contraction_check(
                model.clone(),
                &nu,
                &mu,
                PathwiseParams {
                    n_pairs: c.n_pairs,
                    horizon: c.horizon,
                    dt: c.dt,
                    seed,
                },
            )
            .map_err(rt)?;
            let summary = json!({ "report": report_summary(&r), "invariant": inv.summary() });
            out.push(Output::table("pathwise.csv", &report_table(&[("pathwise", &r)]), summary));
        }
        ExperimentConfig::MdpTail(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let mu = inv.get()?.clone();
            let obs = Observable::catalogue(c.observable);
            let (vbar, vbar_stderr) = match c.vbar {
                Some(v) => (v, None),
                None => {
                    let v = asymptotic_variance(&model, &obs, &mu, variance_params(&c.variance, seed)).map_err(rt)?;
                    (v.vbar, Some(v.stderr))
                }
            };
            if !(vbar > 0.0) {
                return Err(rt(format!("estimated asymptotic variance {vbar} is not positive")));
            }
            let moderate = ModerateParams {
                horizons: c.horizons.clone(),
                replicas: c.replicas,
                n_particles: c.n_particles,
                dt: c.dt,
                seed,
                engine: c.engine,
            };
            let r = mdp_tail_experiment(
                &model,
                &obs,
                &mu,
                vbar,
                &MdpParams {
                    y: c.y,
                    kappa: c.kappa,
                    moderate: moderate.clone(),
                    cramer_z_max: c.cramer_z_max,
                    cramer_points: c.cramer_points,
                },
            )
            .map_err(rt)?;
            let summary = json!({
                "vbar": vbar,
                "vbar_stderr": vbar_stderr,
                "rate8": r.rate8,
                "rate4": r.rate4,
                "engine": c.engine.resolved(&model),
                "empirical_rate": r.legendre.iter().map(|l| json!({ "t": l.t, "neg_rate": l.neg_rate, "convexified": l.convexified })).collect::<Vec<_>>(),
                "invariant": inv.summary(),
            });
            out.push(Output::table("mdp-tail.csv", &tail_table(&r.rows, r.rate8, r.rate4), summary.clone()));
            if c.cramer {
                out.push(Output::table("cramer.csv", &cramer_table(&r.cramer), summary.clone()));
            }
            if let Some(t) = c.clt_horizon {
                let d = clt_diagnostic(&model, &obs, &mu, vbar, t, &moderate).map_err(rt)?;
                let mut tb = Table::new(&["t", "replicas", "mean", "variance", "variance_stderr", "target"]);
                tb.push(vec![
                    fmt_num(d.t),
                    d.replicas.to_string(),
                    fmt_num(d.mean),
                    fmt_num(d.variance),
                    fmt_num(d.variance_stderr),
                    fmt_num(d.target),
                ]);
                out.push(Output::table("clt.csv", &tb, summary));
            }
        }
        ExperimentConfig::Equivalence(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let nu = initial_cloud(&c.initial, c.n_particles, dim, seed, &mut inv)?;
            let mu = inv.get()?.clone();
            let setup = CouplingSetup::new(nu, mu, seed).map_err(rt)?;
            let rows = exp_equivalence_experiment(
                &model,
                &Observable::catalogue(c.observable),
                &setup,
                &EquivalenceParams {
                    epsilon: c.epsilon,
                    kappa: c.kappa,
                    horizons: c.horizons.clone(),
                    replicas: c.replicas,
                    dt: c.dt,
                    seed,
                    engine: c.engine,
                },
            )
            .map_err(rt)?;
            let mut t = Table::new(&TAIL_HEADER[..8]);
            for r in tail_table(&rows, 0.0, 0.0).rows {
                t.push(r[..8].to_vec());
            }
            let summary = json!({
                "w2_squared": setup.w2_squared,
                "engine": c.engine.resolved(&model),
                "all_saturated": rows.iter().all(|r| r.saturated),
                "invariant": inv.summary(),
            });
            out.push(Output::table("equivalence.csv", &t, summary));
        }
        ExperimentConfig::Probe(c) => {
            let mut inv = Invariant::new(&model, &c.invariant, seed);
            let nu = initial_cloud(&c.initial, c.n_particles, dim, seed, &mut inv)?;
            let mu = inv.get()?.clone();
            let setup = CouplingSetup::new(nu, mu, seed).map_err(rt)?;
            let r = integrability_probe(
                &model,
                c.kind,
                &setup,
                &ProbeParams {
                    deltas: c.deltas.clone(),
                    horizons: c.horizons.clone(),
                    replicas: c.replicas,
                    dt: c.dt,
                    seed,
                    engine: c.engine,
                },
            )
            .map_err(rt)?;
            let summary = json!({
                "all_saturated_deltas": r.all_saturated,
                "engine": c.engine.resolved(&model),
                "invariant": inv.summary(),
            });
            out.push(Output::table("probe.csv", &probe_table(&r.rows), summary));
        }
    }
    Ok(out)
}

/// Write outputs and sidecars into `dir`. On failure every file written by
/// this call is removed.
pub fn write_outputs(cfg: &RunConfig, subcommand: &str, outputs: &[Output], dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<(), RunError> {
        fs::create_dir_all(dir).map_err(|e| rt(format!("{}: {e}", dir.display())))?;
        for o in outputs {
            let meta = Provenance {
                version: env!("CARGO_PKG_VERSION"),
                subcommand,
                output: &o.file,
                config: cfg,
                summary: &o.summary,
            };
            let mut meta_text = serde_json::to_string_pretty(&meta).map_err(rt)?;
            meta_text.push('\n');
            let csv_path = dir.join(&o.file);
            let meta_path = dir.join(format!("{}.meta.json", o.file));
            for (path, body) in [(&csv_path, &o.body), (&meta_path, &meta_text)] {
                let tmp = path.with_extension("partial");
                written.push(tmp.clone());
                fs::write(&tmp, body).map_err(|e| rt(format!("{}: {e}", tmp.display())))?;
                fs::rename(&tmp, path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
                written.pop();
                written.push(path.clone());
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            Err(e)
        }
    }
}

pub fn summary_line(dir: &Path, o: &Output) -> String {
    let pass = o.summary.get("all_pass").or_else(|| o.summary.pointer("/report/pass"));
    let tag = match pass {
        Some(Value::Bool(b)) => format!(" pass={}", flag(*b)),
        _ => String::new(),
    };
    format!("wrote {} ({} rows){tag}", dir.join(&o.file).display(), o.rows)
}

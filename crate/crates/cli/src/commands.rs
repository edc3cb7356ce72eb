use std::fmt;
use std::io;
use std::path::Path;

use bffg::engine::{estimate_with, run_backward, run_forward_seeded, sample_seed, Message, State};
use bffg::mcmc::{run_chain, McmcConfig};
use bffg::model::{tanh_tree, ModelSpec, TANH_TRUE_THETA};
use bffg::Error;

use crate::output::{flag, num, Table};

#[derive(Debug)]
pub enum CliError {
    /// Malformed flags or files.
    Input(String),
    Io(io::Error),
    Model(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(s) => write!(f, "{s}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Model(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load(path: &Path) -> CliResult<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    ModelSpec::from_toml(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `a,b,c` by position or `name=value,...` overriding the declared initial values.
pub fn parse_theta(spec: &ModelSpec, arg: Option<&str>) -> CliResult<Vec<f64>> {
    let mut theta = spec.initial_theta();
    let Some(arg) = arg.map(str::trim).filter(|a| !a.is_empty()) else {
        return Ok(theta);
    };
    let names = spec.parameter_names();
    let parse = |s: &str| -> CliResult<f64> {
        s.trim().parse().map_err(|_| CliError::Input(format!("--theta: {s:?} is not a number")))
    };
    if arg.contains('=') {
        for item in arg.split(',') {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("--theta: expected name=value, got {item:?}")))?;
            let i = names
                .iter()
                .position(|n| n == name.trim())
                .ok_or_else(|| CliError::Input(format!("--theta: unknown parameter {:?}", name.trim())))?;
            theta[i] = parse(value)?;
        }
    } else {
        let values: Vec<f64> = arg.split(',').map(parse).collect::<CliResult<_>>()?;
        if values.len() != names.len() {
            return Err(CliError::Input(format!(
                "--theta: {} values for {} parameters ({})",
                values.len(),
                names.len(),
                names.join(", ")
            )));
        }
        theta = values;
    }
    Ok(theta)
}

fn message_fields(m: &Message) -> (&'static str, Vec<(String, usize, f64)>) {
    let series = |field: &str, xs: &mut dyn Iterator<Item = f64>| -> Vec<(String, usize, f64)> {
        xs.enumerate().map(|(i, x)| (field.to_string(), i, x)).collect()
    };
    match m {
        Message::Gaussian(g) => {
            let mut out = vec![("c".to_string(), 0, g.c)];
            out.extend(series("F", &mut g.f.iter().copied()));
            // row-major
            out.extend(series("H", &mut g.h.transpose().iter().copied()));
            ("gaussian", out)
        }
        Message::Finite(g) => ("finite", series("log", &mut g.log.iter().copied())),
        Message::Count(g) => ("count", series("log", &mut g.psi.log.iter().copied())),
        Message::Particle(g) => {
            let out = g
                .factors
                .iter()
                .enumerate()
                .flat_map(|(k, f)| series(&format!("log[{k}]"), &mut f.log.iter().copied()))
                .collect();
            ("particle", out)
        }
        Message::Gamma(g) => (
            "gamma",
            vec![("shape".into(), 0, g.shape), ("rate".into(), 0, g.rate), ("anchor".into(), 0, g.anchor)],
        ),
        Message::Chebyshev(g) => ("chebyshev", series("coeff", &mut g.coeffs.iter().copied())),
    }
}

pub fn filter(model: &Path, theta: Option<&str>, out: Option<&Path>) -> CliResult<()> {
    let spec = load(model)?;
    let theta = parse_theta(&spec, theta)?;
    let m = spec.instantiate(&theta)?;
    let bp = run_backward(&m)?;
    let names = spec.vertex_names();
    let mut table = Table::create(out, "filter", &["record", "vertex", "parent", "family", "field", "index", "value"])?;
    let emit = |table: &mut Table, record: &str, v: &str, parent: &str, msg: &Message| -> io::Result<()> {
        let (family, fields) = message_fields(msg);
        for (field, i, x) in fields {
            table.row(&[record.into(), v.into(), parent.into(), family.into(), field, i.to_string(), num(x)])?;
        }
        Ok(())
    };
    for (v, name) in names.iter().enumerate() {
        if let Some(msg) = &bp.fused[v] {
            emit(&mut table, "fused", name, "", msg)?;
        }
        let parents = m.graph.parents(v)?;
        for (p, msg) in parents.iter().zip(&bp.messages[v]) {
            emit(&mut table, "message", name, names[*p], msg)?;
        }
    }
    table.row(&["log_root".into(), names[0].into(), String::new(), String::new(), String::new(), "0".into(), num(bp.log_root)])?;
    table.finish()?;
    Ok(())
}

fn state_components(s: &State) -> Vec<f64> {
    match s {
        State::Vector(v) => v.iter().copied().collect(),
        State::Discrete(k) => vec![*k as f64],
        State::Configuration(c) => c.iter().map(|k| *k as f64).collect(),
        State::Binary(b) => b.iter().map(|x| if *x { 1.0 } else { 0.0 }).collect(),
        State::Real(x) => vec![*x],
    }
}

pub fn guide(model: &Path, theta: Option<&str>, n: usize, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let spec = load(model)?;
    let theta = parse_theta(&spec, theta)?;
    let m = spec.instantiate(&theta)?;
    let bp = run_backward(&m)?;
    let names = spec.vertex_names();
    let mut table = Table::create(out, "guide", &["sample", "vertex", "record", "index", "value"])?;
    for i in 0..n {
        let (traj, ledger) = run_forward_seeded(&m, &bp, sample_seed(seed, i))?;
        let sample = i.to_string();
        for (v, name) in names.iter().enumerate() {
            if let Some(s) = &traj.states[v] {
                for (k, x) in state_components(s).into_iter().enumerate() {
                    table.row(&[sample.clone(), name.to_string(), "state".into(), k.to_string(), num(x)])?;
                }
            }
            if let Some(w) = ledger.entries[v] {
                table.row(&[sample.clone(), name.to_string(), "log_weight".into(), "0".into(), num(w)])?;
            }
        }
        table.row(&[sample.clone(), names[0].into(), "log_root".into(), "0".into(), num(ledger.log_root)])?;
        table.row(&[sample, names[0].into(), "log_total".into(), "0".into(), num(ledger.total())])?;
    }
    table.finish()?;
    Ok(())
}

pub fn likelihood(model: &Path, theta: Option<&str>, n: usize, seed: u64) -> CliResult<()> {
    let spec = load(model)?;
    let theta = parse_theta(&spec, theta)?;
    let m = spec.instantiate(&theta)?;
    let bp = run_backward(&m)?;
    let est = estimate_with(&m, &bp, n, seed)?;
    if est.degenerate {
        return Err(Error::Sampling(format!("all {n} samples had zero weight")).into());
    }
    println!("log-likelihood {} ± {} (n = {})", num(est.log_mean), num(est.log_se), est.samples);
    Ok(())
}

pub struct McmcFlags {
    pub seed: u64,
    pub lambda: Option<f64>,
    pub iters: Option<usize>,
    pub burnin: Option<usize>,
}

pub fn mcmc(model: &Path, theta: Option<&str>, flags: &McmcFlags, out: Option<&Path>) -> CliResult<()> {
    let spec = load(model)?;
    let theta = parse_theta(&spec, theta)?;
    let mut params = spec.mcmc_parameters();
    for (p, t) in params.iter_mut().zip(&theta) {
        p.initial = *t;
    }
    let defaults = spec.mcmc.clone().unwrap_or_default();
    let base = McmcConfig::default();
    let config = McmcConfig {
        iterations: flags.iters.or(defaults.iterations).unwrap_or(base.iterations),
        burnin: flags.burnin.or(defaults.burnin).unwrap_or(base.burnin),
        lambda: flags.lambda.or(defaults.lambda).unwrap_or(base.lambda),
        seed: flags.seed,
        obs_variance: spec.obs_variance_update()?,
        check_cache: false,
    };
    if config.burnin >= config.iterations {
        return Err(CliError::Input(format!(
            "--burnin {} leaves no iterations out of {}",
            config.burnin, config.iterations
        )));
    }
    let trace = run_chain(&spec.builder(), &params, &config)?;
    let mut header: Vec<String> = vec!["iteration".into()];
    header.extend(trace.names.iter().cloned());
    header.extend(["log_psi".into(), "accepted_path".into()]);
    header.extend(trace.names.iter().map(|n| format!("accepted_{n}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::create(out, "trace", &header_refs)?;
    for row in &trace.rows {
        let mut fields = vec![row.iteration.to_string()];
        fields.extend(row.theta.iter().map(|x| num(*x)));
        fields.push(num(row.log_psi));
        fields.push(flag(row.accepted_path));
        fields.extend(row.accepted_theta.iter().map(|b| flag(*b)));
        table.row(&fields)?;
    }
    table.finish()?;
    eprintln!("pCN acceptance {:.3}", trace.path_acceptance);
    for (name, rate) in trace.names.iter().zip(&trace.theta_acceptance) {
        eprintln!("{name} acceptance {rate:.3}");
    }
    Ok(())
}

pub fn generate(shape: &str, seed: u64, out: Option<&Path>) -> CliResult<()> {
    let counts: Vec<usize> = shape
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Input(format!("--shape: {s:?} is not a count"))))
        .collect::<CliResult<_>>()?;
    let spec = tanh_tree(&counts, &TANH_TRUE_THETA, seed)?;
    let text = spec.to_toml()?;
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use impabs::abstraction::{build_abstraction, AbstractState, BuildReport, Quantization, TransitionTable};
use impabs::certificate::{certify_network, parse_certificates, Certificate, CertifyOptions, CheckReport, LocalSimFn, SampleConfig};
use impabs::compose::{compose_simfn, explore, out_degree_summary, ComposedState, ComposedSystem, Exploration};
use impabs::grid::{BoxSet, Grid};
use impabs::model::{validate_network_with_slack, NetworkSpec};
use impabs::verify::{
    safety_fixpoint, subsystem_seed, verify_condition1, verify_condition2_global, verify_condition2_local, verify_trajectory_bound,
    ComposedGame, FittedConstants, GlobalFitReport, LocalFitReport, TrajectoryOptions, TrajectoryReport,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Result of a command that ran to completion.
pub enum Outcome {
    Pass,
    Fail(String),
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub binary: bool,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    command: String,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn spec(&self) -> Result<NetworkSpec> {
        let path = self.path(&self.cfg.system);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read system file {}", path.display()))?;
        NetworkSpec::from_toml_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
    }

    fn certificates(&self, spec: &NetworkSpec) -> Result<Vec<Certificate>> {
        let rel = self.cfg.certificate.as_ref().ok_or_else(|| anyhow!("config names no certificate file"))?;
        let path = self.path(rel);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read certificate file {}", path.display()))?;
        let certs = parse_certificates(&text, spec).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        for (i, c) in certs.iter().enumerate() {
            c.validate(&spec.subsystems[i]).map_err(|e| anyhow!("{}: certificate {}: {e}", path.display(), i + 1))?;
        }
        Ok(certs)
    }

    fn quantization(&self, spec: &NetworkSpec) -> Result<Vec<Quantization>> {
        self.cfg.quantization_for(spec.subsystems.len())
    }

    /// Internal matching tolerances Φ_i, defaulting to η^ω_i.
    fn slack(&self, spec: &NetworkSpec) -> Result<Vec<f64>> {
        let q = self.quantization(spec)?;
        Ok(spec.resolved_slack(&q.iter().map(|q| q.eta_w).collect::<Vec<_>>()))
    }

    fn table_path(&self, spec: &NetworkSpec, i: usize, binary: bool) -> PathBuf {
        let name: String = spec.subsystems[i]
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let ext = if binary { "bin" } else { "json" };
        self.out.join("tables").join(format!("{i:02}_{name}.{ext}"))
    }

    fn tables(&self, spec: &NetworkSpec) -> Result<Vec<TransitionTable>> {
        (0..spec.subsystems.len())
            .map(|i| {
                let bin = self.table_path(spec, i, true);
                let json = self.table_path(spec, i, false);
                let table = if bin.exists() {
                    let bytes = std::fs::read(&bin)?;
                    TransitionTable::from_bytes(&bytes).map_err(|e| anyhow!("{}: {e}", bin.display()))?
                } else if json.exists() {
                    let text = std::fs::read_to_string(&json)?;
                    TransitionTable::from_json(&text).map_err(|e| anyhow!("{}: {e}", json.display()))?
                } else {
                    bail!("missing table {} (run `abstract` first)", json.display());
                };
                table
                    .check_against(&spec.subsystems[i])
                    .map_err(|e| anyhow!("table of subsystem {}: {e}", spec.subsystems[i].name))?;
                Ok(table)
            })
            .collect()
    }

    fn write_report<T: Serialize>(&self, file: &str, command: &str, body: T) -> Result<PathBuf> {
        let env = Envelope {
            format_version: REPORT_FORMAT_VERSION,
            command: command.to_string(),
            seed: self.seed,
            body,
        };
        let path = self.out.join(file);
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    fn read_report<T: DeserializeOwned>(&self, file: &str, producer: &str) -> Result<T> {
        let path = self.out.join(file);
        let text = std::fs::read_to_string(&path).with_context(|| format!("missing {} (run `{producer}` first)", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_FORMAT_VERSION as u64) {
            bail!("{}: unsupported report format version {:?}", path.display(), version);
        }
        let env: Envelope<T> = serde_json::from_value(value).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        Ok(env.body)
    }

    fn grids(&self, spec: &NetworkSpec) -> Result<(Vec<Grid>, Vec<Grid>, Vec<Grid>)> {
        let q = self.quantization(spec)?;
        let (mut xs, mut ws, mut us) = (Vec::new(), Vec::new(), Vec::new());
        for (s, q) in spec.subsystems.iter().zip(&q) {
            let g = |b: &BoxSet, eta: f64, what: &str| Grid::new(b.clone(), eta).map_err(|e| anyhow!("subsystem {}: {what} grid: {e}", s.name));
            xs.push(g(&s.state_bounds, q.eta_x, "state")?);
            ws.push(g(&s.internal_bounds, q.eta_w, "internal input")?);
            us.push(g(&s.external_bounds, q.eta_u, "external input")?);
        }
        Ok((xs, ws, us))
    }
}

#[derive(Serialize)]
struct SubsystemSummary {
    name: String,
    n: usize,
    q: usize,
    m: usize,
    cells: usize,
    internal_points: usize,
    external_points: usize,
    abstract_states: usize,
}

pub fn validate(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let slack = ctx.slack(&spec)?;
    let report = validate_network_with_slack(&spec, &slack);
    if !report.is_valid() {
        let lines: Vec<String> = report
            .violations
            .iter()
            .map(|v| match v.subsystem {
                Some(i) => format!("subsystem {}: {}", spec.subsystems[i].name, v.message),
                None => v.message.clone(),
            })
            .collect();
        bail!("invalid network:\n  {}", lines.join("\n  "));
    }
    let certs = match ctx.cfg.certificate {
        Some(_) => ctx.certificates(&spec)?.len(),
        None => 0,
    };
    let (xs, ws, us) = ctx.grids(&spec)?;
    ctx.cfg
        .integrator
        .steps_for(spec.tau())
        .map_err(|e| anyhow!("integrator: {e}"))?;
    let subsystems: Vec<SubsystemSummary> = spec
        .subsystems
        .iter()
        .enumerate()
        .map(|(i, s)| SubsystemSummary {
            name: s.name.clone(),
            n: s.n,
            q: s.q,
            m: s.m,
            cells: xs[i].len(),
            internal_points: ws[i].len(),
            external_points: us[i].len(),
            abstract_states: xs[i].len() * (s.z_max as usize + 1),
        })
        .collect();
    #[derive(Serialize)]
    struct Body {
        subsystems: Vec<SubsystemSummary>,
        certificates: usize,
        internal_matching_tolerances: Vec<f64>,
        valid: bool,
    }
    ctx.write_report(
        "validate_report.json",
        "validate",
        Body {
            subsystems,
            certificates: certs,
            internal_matching_tolerances: slack,
            valid: true,
        },
    )?;
    Ok(Outcome::Pass)
}

pub fn abstract_(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let quant = ctx.quantization(&spec)?;
    ctx.grids(&spec)?;
    #[derive(Serialize)]
    struct Entry {
        name: String,
        file: String,
        quantization: Quantization,
        report: BuildReport,
    }
    let mut entries = Vec::new();
    std::fs::create_dir_all(ctx.out.join("tables"))?;
    for (i, (s, q)) in spec.subsystems.iter().zip(&quant).enumerate() {
        let start = Instant::now();
        let (table, report) = build_abstraction(s, *q, &ctx.cfg.integrator).map_err(|e| anyhow!("subsystem {}: {e}", s.name))?;
        let path = ctx.table_path(&spec, i, ctx.binary);
        let stale = ctx.table_path(&spec, i, !ctx.binary);
        if stale.exists() {
            std::fs::remove_file(&stale)?;
        }
        if ctx.binary {
            std::fs::write(&path, table.to_bytes()?)?;
        } else {
            std::fs::write(&path, table.to_json()? + "\n")?;
        }
        eprintln!(
            "abstract: {}: {} abstract states, {} blocked triples, {:.2?}",
            s.name,
            report.abstract_states,
            report.blocked_count,
            start.elapsed()
        );
        entries.push(Entry {
            name: s.name.clone(),
            file: path.strip_prefix(&ctx.out).unwrap_or(&path).display().to_string(),
            quantization: *q,
            report,
        });
    }
    #[derive(Serialize)]
    struct Body {
        subsystems: Vec<Entry>,
    }
    ctx.write_report("abstract_report.json", "abstract", Body { subsystems: entries })?;
    Ok(Outcome::Pass)
}

pub fn certify(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let certs = ctx.certificates(&spec)?;
    let (xs, ws, _) = ctx.grids(&spec)?;
    let c = &ctx.cfg.certify;
    let opts = CertifyOptions {
        sampling: SampleConfig {
            samples: c.samples,
            seed: ctx.seed,
            refine: c.refine,
        },
        lmi_tol: c.lmi_tol,
        inclusion_cap: c.inclusion_cap,
        mu: c.mu.clone(),
        mu_candidates: c.mu_candidates.clone(),
    };
    let report = certify_network(&spec, &certs, Some((&xs, &ws)), &opts)?;
    let passed = report.passed;
    let failed = report.failed.clone();
    let path = ctx.write_report("certify_report.json", "certify", report)?;
    if passed {
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::Fail(format!("certification failed: {} (see {})", failed.join(", "), path.display())))
    }
}

pub fn compose(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let tables = ctx.tables(&spec)?;
    let sys = ComposedSystem::new(tables, spec.coupling.clone(), ctx.slack(&spec)?)?;
    let count = sys.state_count();
    if count > ctx.cfg.compose.cap as u128 {
        bail!("{count} composed states exceed the exploration cap {}", ctx.cfg.compose.cap);
    }
    let initial: Vec<ComposedState> = (0..count as usize).map(|id| sys.state_from_id(id)).collect();
    let exp = explore(&sys, &initial, ctx.cfg.compose.cap, ctx.cfg.compose.dump)?;
    let degrees = out_degree_summary(&exp);
    let Exploration {
        reachable,
        transitions,
        blocked,
        blocked_examples,
        edges,
    } = exp;
    if let Some(edges) = edges {
        ctx.write_report("compose_dump.json", "compose", BTreeMap::from([("edges", edges)]))?;
    }
    #[derive(Serialize)]
    struct Body {
        state_count: u128,
        internal_matching_tolerances: Vec<f64>,
        reachable: usize,
        transitions: usize,
        blocked: usize,
        blocked_examples: Vec<(ComposedState, Vec<usize>, usize, String)>,
        out_degree_histogram: BTreeMap<usize, usize>,
    }
    ctx.write_report(
        "compose_report.json",
        "compose",
        Body {
            state_count: count,
            internal_matching_tolerances: sys.phi().to_vec(),
            reachable,
            transitions,
            blocked,
            blocked_examples,
            out_degree_histogram: degrees,
        },
    )?;
    Ok(Outcome::Pass)
}

#[derive(Serialize, Deserialize)]
struct LocalVerification {
    name: String,
    condition1: CheckReport,
    condition2: LocalFitReport,
}

#[derive(Serialize, Deserialize)]
struct VerifyBody {
    mu: Vec<f64>,
    subsystems: Vec<LocalVerification>,
    global: GlobalFitReport,
    fitted: Option<FittedConstants>,
    passed: bool,
    failed: Vec<String>,
}

#[derive(Deserialize)]
struct CertifySummary {
    mu: Vec<f64>,
    passed: bool,
}

fn local_simfns(spec: &NetworkSpec, certs: &[Certificate]) -> Result<Vec<LocalSimFn>> {
    spec.subsystems
        .iter()
        .zip(certs)
        .map(|(s, c)| LocalSimFn::from_certificate(c, s).map_err(|e| anyhow!("subsystem {}: {e}", s.name)))
        .collect()
}

pub fn verify(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let certs = ctx.certificates(&spec)?;
    let tables = ctx.tables(&spec)?;
    let cert: CertifySummary = ctx.read_report("certify_report.json", "certify")?;
    if !cert.passed {
        return Ok(Outcome::Fail("certification did not pass; relation not verified".into()));
    }
    let locals = local_simfns(&spec, &certs)?;
    let v = &ctx.cfg.verify;
    let c1 = SampleConfig {
        samples: v.condition1_samples,
        seed: ctx.seed,
        refine: 8,
    };
    let mut failed = Vec::new();
    let mut subsystems = Vec::new();
    for (i, ((s, t), f)) in spec.subsystems.iter().zip(&tables).zip(&locals).enumerate() {
        let alpha = f.condition1_alpha().map_err(|e| anyhow!("subsystem {}: {e}", s.name))?;
        let condition1 = verify_condition1(f, &alpha, &s.state_bounds, &c1);
        let mut opts = v.local.clone();
        opts.seed = subsystem_seed(ctx.seed, i);
        let condition2 = verify_condition2_local(s, t, f, &ctx.cfg.integrator, &opts)?;
        if !condition1.passed {
            failed.push(format!("{}: condition1", s.name));
        }
        if !condition2.passed {
            failed.push(format!("{}: condition2", s.name));
        }
        subsystems.push(LocalVerification {
            name: s.name.clone(),
            condition1,
            condition2,
        });
    }
    let sys = ComposedSystem::new(tables, spec.coupling.clone(), ctx.slack(&spec)?)?;
    let g = compose_simfn(cert.mu.clone(), locals)?;
    let mut gopts = v.global.clone();
    gopts.seed = ctx.seed;
    let global = verify_condition2_global(&spec, &sys, &g, &ctx.cfg.integrator, &gopts, &c1)?;
    if !global.passed {
        failed.push("global condition2".into());
    }
    let fitted = global.alpha_tilde.clone().map(|alpha_tilde| FittedConstants {
        sigma_tilde: global.sigma_tilde,
        eps_tilde: global.eps_tilde,
        rho_u_tilde: global.rho_u_tilde.clone(),
        alpha_tilde,
    });
    let passed = failed.is_empty();
    let msg = failed.join(", ");
    let path = ctx.write_report(
        "verify_report.json",
        "verify",
        VerifyBody {
            mu: cert.mu,
            subsystems,
            global,
            fitted,
            passed,
            failed,
        },
    )?;
    if passed {
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::Fail(format!("verification failed: {msg} (counterexamples in {})", path.display())))
    }
}

pub fn simulate(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let certs = ctx.certificates(&spec)?;
    let tables = ctx.tables(&spec)?;
    let ver: VerifyBody = ctx.read_report("verify_report.json", "verify")?;
    let Some(mut fitted) = ver.fitted else {
        return Ok(Outcome::Fail("verify report holds no fitted constants".into()));
    };
    let s = &ctx.cfg.simulate;
    if let Some(e) = s.eps_tilde_override {
        fitted.eps_tilde = e;
    }
    let sys = ComposedSystem::new(tables, spec.coupling.clone(), ctx.slack(&spec)?)?;
    let g = compose_simfn(ver.mu, local_simfns(&spec, &certs)?)?;
    let opts = TrajectoryOptions {
        runs: s.runs,
        horizon: s.horizon,
        seed: ctx.seed,
        initial_level: s.initial_level,
        max_traces: s.max_traces,
    };
    let start = Instant::now();
    let report = verify_trajectory_bound(&spec, &sys, &g, &fitted, &ctx.cfg.integrator, &opts)?;
    eprintln!(
        "simulate: {} runs x {} steps, max ratio {:.4}, {:.2?}",
        report.runs,
        report.horizon,
        report.max_ratio,
        start.elapsed()
    );
    let dir = ctx.out.join("traces");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let mut trace_files = Vec::new();
    for t in &report.traces {
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("run_{:05}.csv", t.run));
        std::fs::write(&path, t.to_csv(report.eps_hat))?;
        trace_files.push(path.strip_prefix(&ctx.out).unwrap_or(&path).display().to_string());
    }
    #[derive(Serialize)]
    struct Body {
        fitted: FittedConstants,
        eps_tilde_overridden: bool,
        #[serde(flatten)]
        report: TrajectoryReport,
        trace_files: Vec<String>,
    }
    let passed = report.passed;
    let (ratio, files) = (report.max_ratio, trace_files.clone());
    let mut summary = report;
    // the CSV files carry the rows
    for t in &mut summary.traces {
        t.rows.clear();
    }
    ctx.write_report(
        "simulate_report.json",
        "simulate",
        Body {
            fitted,
            eps_tilde_overridden: s.eps_tilde_override.is_some(),
            report: summary,
            trace_files,
        },
    )?;
    if passed {
        Ok(Outcome::Pass)
    } else {
        let shown: Vec<String> = files.iter().map(|f| ctx.out.join(f).display().to_string()).collect();
        Ok(Outcome::Fail(format!("deviation bound violated (max ratio {ratio:.4}); traces: {}", shown.join(", "))))
    }
}

pub fn synthesize(ctx: &Ctx) -> Result<Outcome> {
    let spec = ctx.spec()?;
    let tables = ctx.tables(&spec)?;
    let safe = &ctx.cfg.synthesize.safe;
    if safe.len() != spec.subsystems.len() {
        bail!("[synthesize] safe must list one box per subsystem ({} given)", safe.len());
    }
    for (s, b) in spec.subsystems.iter().zip(safe) {
        if b.len() != s.n {
            bail!("safe box of subsystem {} has {} intervals, expected {}", s.name, b.len(), s.n);
        }
    }
    let sys = ComposedSystem::new(tables, spec.coupling.clone(), ctx.slack(&spec)?)?;
    let game = ComposedGame::new(&sys, ctx.cfg.synthesize.cap)?;
    let inside: Vec<Vec<bool>> = sys
        .tables()
        .iter()
        .zip(safe)
        .map(|(t, b)| {
            let bx = BoxSet(b.clone());
            (0..t.state_grid().len()).map(|c| bx.contains(&t.state_grid().point(c))).collect()
        })
        .collect();
    let ctl = safety_fixpoint(&game, |id| {
        sys.state_from_id(id)
            .iter()
            .enumerate()
            .all(|(i, s)| inside[i][s.cell as usize])
    });
    #[derive(Serialize)]
    struct Row {
        state: Vec<AbstractState>,
        inputs: Vec<Vec<usize>>,
    }
    let rows: Vec<Row> = ctl
        .allowed
        .iter()
        .map(|(&id, inputs)| Row {
            state: sys.state_from_id(id),
            inputs: inputs.iter().map(|&u| game.input(u).to_vec()).collect(),
        })
        .collect();
    #[derive(Serialize)]
    struct Body {
        state_count: u128,
        safe: Vec<Vec<[f64; 2]>>,
        winning_count: usize,
        iterations: usize,
        history: Vec<usize>,
        controller: Vec<Row>,
    }
    let winning = ctl.winning.len();
    ctx.write_report(
        "controller.json",
        "synthesize",
        Body {
            state_count: sys.state_count(),
            safe: safe.clone(),
            winning_count: winning,
            iterations: ctl.iterations,
            history: ctl.history,
            controller: rows,
        },
    )?;
    if winning == 0 {
        Ok(Outcome::Fail("empty winning set: no safe controller exists".into()))
    } else {
        Ok(Outcome::Pass)
    }
}

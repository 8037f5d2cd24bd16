use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stealthguard::attack::synthesize_worst_attack;
use stealthguard::detector::{sprt_radius, window_bounds, DetectorKind};
use stealthguard::error::{Error, Result};
use stealthguard::exec::Execution;
use stealthguard::io::{emit_report, parse_model, Calibration, ModelBundle, Report, ReportFormat};
use stealthguard::model::{solve_steady_state_filter, AttackScenario};
use stealthguard::policy::{design_periodic_policy, evaluate_policy, DesignOptions, EnforcementPolicy, EvalOptions};
use stealthguard::reach::{error_curve, RadiusSchedule, StealthBudget, SupportPattern};
use stealthguard::sim::{AttackMode, SimConfig, Simulator};
use stealthguard::structure::{is_perfectly_attackable, structural_report};

#[derive(Parser)]
#[command(name = "stealthguard", version, about = "Estimation-error analysis under stealthy sensor attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structural facts, detector calibration and worst-case error curves.
    Analyze(AnalyzeArgs),
    /// Longest safe period for a periodic enforcement policy.
    Design(CommonArgs),
    /// Monte Carlo closed-loop estimation with an optional worst-case attack.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct CommonArgs {
    /// Model file (JSON).
    #[arg(long, env = "STEALTHGUARD_MODEL")]
    model: PathBuf,
    /// Attacker detection-probability budget; overrides the model file.
    #[arg(long, env = "STEALTHGUARD_EPSILON")]
    epsilon: Option<f64>,
    /// Initial-condition uncertainty radius; overrides the model file.
    #[arg(long, env = "STEALTHGUARD_GAMMA")]
    gamma: Option<f64>,
    #[arg(long, value_enum, default_value = "json", env = "STEALTHGUARD_FORMAT")]
    format: Format,
    /// Output file; stdout when omitted.
    #[arg(long, env = "STEALTHGUARD_OUT")]
    out: Option<PathBuf>,
    /// Re-anchor the stealth radius at every enforcement block instead of freezing it at the first.
    #[arg(long, env = "STEALTHGUARD_PER_ANCHOR")]
    per_anchor: bool,
    /// Disable data parallelism.
    #[arg(long, env = "STEALTHGUARD_SEQUENTIAL")]
    sequential: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Enforcement policy `f:L[:t0]` or `none`; overrides the model file.
    #[arg(long, env = "STEALTHGUARD_POLICY")]
    policy: Option<String>,
    /// Steps of the no-enforcement curve.
    #[arg(long, default_value_t = 100, env = "STEALTHGUARD_HORIZON")]
    horizon: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attack {
    None,
    Worst,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Aware,
    Unaware,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, env = "STEALTHGUARD_POLICY")]
    policy: Option<String>,
    /// Simulated steps; the worst-case attack targets the last one.
    #[arg(long, default_value_t = 100, env = "STEALTHGUARD_HORIZON")]
    horizon: usize,
    #[arg(long, default_value_t = 1000, env = "STEALTHGUARD_RUNS")]
    runs: usize,
    #[arg(long, default_value_t = 0, env = "STEALTHGUARD_SEED")]
    seed: u64,
    #[arg(long, value_enum, default_value = "worst", env = "STEALTHGUARD_ATTACK")]
    attack: Attack,
    /// Whether the attacker knows the enforcement schedule.
    #[arg(long, value_enum, default_value = "aware", env = "STEALTHGUARD_MODE")]
    mode: Mode,
}

struct Context {
    bundle: ModelBundle,
    scenario: AttackScenario,
    schedule: RadiusSchedule,
    exec: Execution,
    format: ReportFormat,
    out: Option<PathBuf>,
}

impl Context {
    fn load(args: &CommonArgs) -> Result<Self> {
        let bundle = parse_model(&args.model)?;
        let s = &bundle.scenario;
        let scenario = AttackScenario::new(
            s.compromised.clone(),
            args.epsilon.unwrap_or(s.epsilon),
            args.gamma.unwrap_or(s.gamma),
            bundle.model.p(),
        )?;
        Ok(Context {
            scenario,
            bundle,
            schedule: if args.per_anchor { RadiusSchedule::PerAnchor } else { RadiusSchedule::FirstBlock },
            exec: if args.sequential { Execution::Sequential } else { Execution::Parallel },
            format: match args.format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            },
            out: args.out.clone(),
        })
    }

    fn policy(&self, flag: &Option<String>) -> Result<EnforcementPolicy> {
        let policy = match flag {
            Some(s) => s.parse()?,
            None => self.bundle.policy.clone(),
        };
        policy.validate(self.bundle.model.p())?;
        Ok(policy)
    }

    fn is_sprt(&self) -> bool {
        matches!(self.bundle.detector.kind, DetectorKind::Sprt)
    }

    fn budget(&self) -> StealthBudget {
        StealthBudget::new(
            self.scenario.epsilon,
            self.bundle.detector.threshold_h,
            self.bundle.model.p(),
            self.schedule,
        )
    }

    fn report(&self, command: &str) -> Report {
        let mut r = Report::new(command);
        let sensors: Vec<&str> =
            self.scenario.compromised.iter().map(|&i| self.bundle.model.sensor_names[i].as_str()).collect();
        r.inputs.insert("model".into(), json!(self.bundle.name));
        r.inputs.insert("epsilon".into(), json!(self.scenario.epsilon));
        r.inputs.insert("gamma".into(), json!(self.scenario.gamma));
        r.inputs.insert("compromised".into(), json!(sensors));
        r.inputs.insert("safe_threshold".into(), json!(self.bundle.safe_threshold));
        r.inputs.insert(
            "radius_schedule".into(),
            json!(match self.schedule {
                RadiusSchedule::FirstBlock => "first_block",
                RadiusSchedule::PerAnchor => "per_anchor",
            }),
        );
        r.warnings.push("max expected error is sqrt(lambda_max(Y)), the semi-axis of the reachable ellipsoid".into());
        r
    }

    fn calibration(&self, policy: &EnforcementPolicy) -> Result<Calibration> {
        let d = &self.bundle.detector;
        let p = self.bundle.model.p();
        let eps = self.scenario.epsilon;
        let (detector, first_step_alpha, window) = match &d.kind {
            DetectorKind::Sprt => ("sprt".to_string(), sprt_radius(eps, p, d.threshold_h, 1)?, None),
            DetectorKind::Windowed { .. } => {
                let (lo, hi) = window_bounds(d, eps, p)?;
                ("windowed".to_string(), lo, Some([lo, hi]))
            }
        };
        let policy_alpha = match (self.is_sprt(), policy.period()) {
            (true, Some(_)) => {
                let pattern = policy.pattern(&self.scenario.compromised, p, 1);
                let t = pattern.anchor_for(1)?;
                Some(self.budget().alpha(&pattern, t)?)
            }
            _ => None,
        };
        Ok(Calibration {
            detector,
            p,
            beta: d.beta,
            threshold_h: d.threshold_h,
            epsilon: eps,
            first_step_alpha,
            policy_alpha,
            window_bounds: window,
        })
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions { schedule: self.schedule, exec: self.exec, ..EvalOptions::default() }
    }

    fn emit(&self, report: &Report) -> Result<()> {
        emit_report(report, self.format, self.out.as_deref())
    }
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let ctx = Context::load(&args.common)?;
    let policy = ctx.policy(&args.policy)?;
    let b = &ctx.bundle;
    let filter = solve_steady_state_filter(&b.model)?;
    let mut report = ctx.report("analyze");
    report.inputs.insert("policy".into(), json!(policy.to_string()));
    report.inputs.insert("horizon".into(), json!(args.horizon));

    let structural = structural_report(&b.model, Some(&ctx.scenario.compromised))?;
    if let EnforcementPolicy::Global(s) = &policy {
        if s.f < structural.f_required && !s.is_continuous() {
            report.warnings.push(format!(
                "policy enforces {} step(s) per block; {} are structurally required",
                s.f, structural.f_required
            ));
        }
    }
    report.structural = Some(structural);
    report.attackability = Some(is_perfectly_attackable(&b.model, &filter, &ctx.scenario)?);
    report.calibration = Some(ctx.calibration(&policy)?);

    if ctx.is_sprt() {
        let pattern = SupportPattern::unenforced(b.model.p(), &ctx.scenario.compromised, args.horizon);
        report.curve = error_curve(&filter, &pattern, &ctx.budget(), args.horizon, ctx.exec)?;
        if policy != EnforcementPolicy::None {
            let verdict = evaluate_policy(
                &b.model,
                &filter,
                &b.detector,
                &ctx.scenario,
                &policy,
                b.safe_threshold,
                &ctx.eval_options(),
            )?;
            report.policy_verdict = Some(verdict);
        }
    } else {
        report.warnings.push("reachability analysis requires an SPRT detector; curves omitted".into());
    }
    ctx.emit(&report)
}

fn design(args: &CommonArgs) -> Result<()> {
    let ctx = Context::load(args)?;
    let b = &ctx.bundle;
    let filter = solve_steady_state_filter(&b.model)?;
    let mut report = ctx.report("design");
    let opts = DesignOptions { eval: ctx.eval_options(), ..DesignOptions::default() };
    let outcome = design_periodic_policy(&b.model, &filter, &b.detector, &ctx.scenario, b.safe_threshold, &opts)?;
    report.structural = Some(structural_report(&b.model, Some(&ctx.scenario.compromised))?);
    report.calibration = Some(ctx.calibration(&outcome.policy)?);
    report.design = Some(outcome);
    ctx.emit(&report)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let ctx = Context::load(&args.common)?;
    let policy = ctx.policy(&args.policy)?;
    let b = &ctx.bundle;
    if args.runs == 0 || args.horizon == 0 {
        return Err(Error::Validation("runs and horizon must be positive".into()));
    }
    let filter = solve_steady_state_filter(&b.model)?;
    let mut report = ctx.report("simulate");
    report.inputs.insert("policy".into(), json!(policy.to_string()));
    report.inputs.insert("horizon".into(), json!(args.horizon));
    report.inputs.insert("runs".into(), json!(args.runs));
    report.inputs.insert("seed".into(), json!(args.seed));
    report.inputs.insert(
        "attack".into(),
        json!(match args.attack {
            Attack::None => "none",
            Attack::Worst => "worst",
        }),
    );

    let p = b.model.p();
    let (mode, attack_policy) = match args.mode {
        Mode::Aware => (AttackMode::PolicyAware, policy.clone()),
        Mode::Unaware => (AttackMode::PolicyUnaware(policy.clone()), EnforcementPolicy::None),
    };
    report.inputs.insert(
        "mode".into(),
        json!(match args.mode {
            Mode::Aware => "aware",
            Mode::Unaware => "unaware",
        }),
    );
    let attack = match args.attack {
        Attack::None => None,
        Attack::Worst => {
            if !ctx.is_sprt() {
                return Err(Error::Validation("worst-case attack synthesis requires an SPRT detector".into()));
            }
            let pattern = attack_policy.pattern(&ctx.scenario.compromised, p, args.horizon);
            let a = synthesize_worst_attack(&filter, &pattern, &ctx.budget(), args.horizon)?;
            if !a.prefix_feasible {
                report.warnings.push("synthesized attack violates an earlier stealth constraint".into());
            }
            Some(a)
        }
    };
    // the attack keeps injecting up to the anchor of its target step
    let steps = attack.as_ref().map_or(args.horizon, |a| a.horizon.max(args.horizon));
    if steps > args.horizon {
        report.warnings.push(format!("simulation extended to step {steps}, the anchor of the targeted step"));
    }
    let sim = Simulator::new(&b.model, &filter, &b.detector)?;
    let cfg = SimConfig { runs: args.runs, steps, seed: args.seed, keep_traces: 0, exec: ctx.exec };
    let result = sim.simulate(attack.as_ref(), &mode, &cfg)?;
    report.simulation = Some(result.summary);
    ctx.emit(&report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Design(a) => design(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

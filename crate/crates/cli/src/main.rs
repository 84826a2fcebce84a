//! `tabsplus`: analyze BPMN collaborations, plan transactions, generate
//! contract packages, run traces and compare costs.

mod render;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tabsplus_core::codegen::{ContractPackage, GenerateOptions};
use tabsplus_core::cost::{default_sizes, DEFAULT_PARTICIPANTS, KIB};
use tabsplus_core::graph::to_dot;
use tabsplus_core::ledger::GasSchedule;
use tabsplus_core::ops::{self, ErrorBody};
use tabsplus_core::pipeline::Analysis;
use tabsplus_core::plan::{Mechanism, PlanInput, Selection};
use tabsplus_core::runtime::{Faults, RuntimeOptions};

use render::Output;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "tabsplus", version, about = "BPMN to multi-method smart contract compiler and sandbox")]
struct Cli {
    /// Output directory; `-` writes to stdout.
    #[arg(long, global = true, env = "TABSPLUS_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Gas schedule JSON file.
    #[arg(long, global = true)]
    gas_schedule: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// BPMN 2.0 XML file.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Plan JSON file.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Comma-separated regions to select, replacing the plan's selections.
    #[arg(long, value_delimiter = ',')]
    select: Option<Vec<String>>,
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
    /// Encrypt cached values.
    #[arg(long)]
    crypto: bool,
}

/// A package file, or a model and plan compiled on the fly.
#[derive(Debug, Args)]
struct PackageArgs {
    #[arg(long, conflicts_with_all = ["model", "plan", "select"])]
    package: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Identifier substituted into ledger keys.
    #[arg(long, default_value = "run-0")]
    run_id: String,
    /// Fault injection JSON file.
    #[arg(long)]
    faults: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a model and list its SESE candidates.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Also write a Graphviz rendering of the flow graph.
        #[arg(long)]
        dot: bool,
    },
    /// Check a transaction plan and show its nesting and methods.
    PlanValidate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Compile a model and plan into a contract package.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Run one JSON-lines trace and report every step.
    Run {
        #[command(flatten)]
        source: PackageArgs,
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Classify every `.jsonl` trace in a directory.
    TraceCheck {
        #[command(flatten)]
        source: PackageArgs,
        #[arg(long)]
        traces: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Gas per mechanism and payload size.
    ///
    /// With a model, costs the plan's selections; without one, runs the
    /// built-in two-task benchmark.
    Cost {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanArgs,
        /// Comma-separated sizes such as 75KB,512KB.
        #[arg(long)]
        sizes: Option<String>,
        /// Two-phase commit gas against the number of participants instead.
        #[arg(long, conflicts_with_all = ["model", "sizes", "calibrate"])]
        two_pc: bool,
        /// Fit the event and crypto byte prices, then report the benchmark
        /// under the fitted schedule.
        #[arg(long, conflicts_with = "model")]
        calibrate: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse().map_err(|e: tabsplus_core::plan::PlanError| e.to_string())
}

struct Ctx {
    out: PathBuf,
    format: Format,
    schedule: GasSchedule,
    schedule_ref: String,
    seed: u64,
}

fn read(path: &Path) -> Result<String, ErrorBody> {
    fs::read_to_string(path)
        .map_err(|e| ErrorBody::new("FileUnreadable", format!("{}: {e}", path.display())))
}

fn load_analysis(path: &Path) -> Result<Analysis, ErrorBody> {
    Ok(ops::analyze(read(path)?.as_bytes())?.0)
}

impl PlanArgs {
    fn input(&self) -> Result<PlanInput, ErrorBody> {
        let mut input = match &self.plan {
            Some(p) => ops::parse_plan(&read(p)?)?,
            None => PlanInput::new(&[], Mechanism::default(), false),
        };
        if let Some(sel) = &self.select {
            input.selections =
                sel.iter().filter(|s| !s.is_empty()).map(|r| Selection { region: r.clone(), transaction: true }).collect();
        }
        if let Some(m) = self.mechanism {
            input.mechanism = m;
        }
        input.crypto_cache |= self.crypto;
        Ok(input)
    }
}

impl Ctx {
    fn generate_options(&self) -> GenerateOptions {
        GenerateOptions { seed: self.seed, gas_schedule_ref: self.schedule_ref.clone() }
    }

    fn package(&self, src: &PackageArgs) -> Result<ContractPackage, ErrorBody> {
        match (&src.package, &src.model) {
            (Some(p), _) => ops::load_package(&read(p)?),
            (None, Some(m)) => ops::generate(&load_analysis(m)?, &src.plan.input()?, &self.generate_options()),
            (None, None) => Err(ErrorBody::new("MissingInput", "give --package or --model")),
        }
    }

    fn runtime_options(&self, run: &RunArgs) -> Result<RuntimeOptions, ErrorBody> {
        let faults: Faults = match &run.faults {
            Some(p) => serde_json::from_str(&read(p)?)
                .map_err(|e| ErrorBody::new("BadFaults", format!("{}: {e}", p.display())))?,
            None => Faults::default(),
        };
        Ok(RuntimeOptions { schedule: self.schedule, run_id: run.run_id.clone(), faults, ..RuntimeOptions::default() })
    }

    /// Writes one output. Returns the path written, if any.
    fn emit(&self, name: &str, out: Output) -> Result<Option<PathBuf>, ErrorBody> {
        let (ext, body) = match self.format {
            Format::Json => ("json", out.json),
            Format::Text => ("txt", out.text),
            Format::Csv => ("csv", out.csv.ok_or_else(|| ErrorBody::new("FormatUnsupported", format!("{name} has no CSV form")))?),
        };
        self.write_file(&format!("{name}.{ext}"), &body)
    }

    fn write_file(&self, file: &str, body: &str) -> Result<Option<PathBuf>, ErrorBody> {
        if self.out.as_os_str() == "-" {
            std::io::stdout()
                .write_all(body.as_bytes())
                .map_err(|e| ErrorBody::new("WriteFailed", e.to_string()))?;
            return Ok(None);
        }
        let io = |e: std::io::Error| ErrorBody::new("WriteFailed", format!("{}: {e}", self.out.display()));
        fs::create_dir_all(&self.out).map_err(io)?;
        let path = self.out.join(file);
        fs::write(&path, body).map_err(io)?;
        Ok(Some(path))
    }
}

fn trace_files(dir: &Path) -> Result<Vec<(String, String)>, ErrorBody> {
    let io = |e: std::io::Error| ErrorBody::new("FileUnreadable", format!("{}: {e}", dir.display()));
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    names.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
    names.sort();
    names
        .iter()
        .map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), read(p)?)))
        .collect()
}

/// Runs a command. `Ok(false)` means it produced output but found errors.
fn dispatch(ctx: &Ctx, command: Command) -> Result<bool, ErrorBody> {
    let mut written = Vec::new();
    let clean = match command {
        Command::Analyze { model, dot } => {
            let (analysis, report) = ops::analyze(read(&model.model)?.as_bytes())?;
            written.push(ctx.emit("analysis", render::analysis(&report))?);
            if dot {
                let regions: Vec<(String, Vec<String>)> =
                    report.candidates.iter().map(|c| (c.id.clone(), c.member_ids.clone())).collect();
                written.push(ctx.write_file("graph.dot", &to_dot(&analysis.dag, &regions))?);
            }
            true
        }
        Command::PlanValidate { model, plan } => {
            let report = ops::plan(&load_analysis(&model.model)?, &plan.input()?)?;
            written.push(ctx.emit("plan", render::plan(&report))?);
            true
        }
        Command::Generate { model, plan } => {
            let pkg = ops::generate(&load_analysis(&model.model)?, &plan.input()?, &ctx.generate_options())?;
            written.push(ctx.emit("package", render::package(&pkg))?);
            true
        }
        Command::Run { source, trace, run } => {
            let pkg = ctx.package(&source)?;
            let outcome = ops::run(&pkg, &read(&trace)?, &ctx.runtime_options(&run)?)?;
            written.push(ctx.emit("report", render::outcome(&outcome))?);
            outcome.valid
        }
        Command::TraceCheck { source, traces, run } => {
            let pkg = ctx.package(&source)?;
            let summary = ops::trace_check(&pkg, &trace_files(&traces)?, &ctx.runtime_options(&run)?);
            written.push(ctx.emit("trace-check", render::trace_check(&summary))?);
            summary.errors == 0
        }
        Command::Cost { model, plan, sizes, two_pc, calibrate } => {
            let sizes = match &sizes {
                Some(s) => ops::parse_sizes(s)?,
                None => default_sizes(),
            };
            if two_pc {
                let table = ops::cost_two_pc(&DEFAULT_PARTICIPANTS, ctx.schedule)?;
                written.push(ctx.emit("two-pc", render::two_pc(&table))?);
            } else if calibrate {
                let top = *sizes.iter().max().unwrap_or(&(1875 * KIB));
                let cal = ops::cost_calibrate(top, ctx.schedule)?;
                written.push(ctx.emit("calibration", render::calibration(&cal))?);
                let table = ops::cost_benchmark(&sizes, cal.schedule)?;
                written.push(ctx.emit("cost", render::cost(&table))?);
            } else {
                let table = match &model {
                    Some(m) => ops::cost(&load_analysis(m)?, &plan.input()?, &sizes, ctx.schedule)?,
                    None => ops::cost_benchmark(&sizes, ctx.schedule)?,
                };
                written.push(ctx.emit("cost", render::cost(&table))?);
            }
            true
        }
        Command::Serve { addr } => {
            let config = tabsplus_service::Config {
                schedule: ctx.schedule,
                gas_schedule_ref: ctx.schedule_ref.clone(),
                seed: ctx.seed,
            };
            eprintln!("listening on http://{addr}");
            let rt = tokio::runtime::Runtime::new().map_err(|e| ErrorBody::new("ServeFailed", e.to_string()))?;
            rt.block_on(tabsplus_service::serve(addr, config)).map_err(|e| ErrorBody::new("ServeFailed", e.to_string()))?;
            true
        }
    };
    for p in written.into_iter().flatten() {
        eprintln!("wrote {}", p.display());
    }
    Ok(clean)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let schedule = match &cli.gas_schedule {
        Some(p) => read(p).and_then(|t| {
            GasSchedule::from_json(&t).map_err(|e| ErrorBody::new("BadGasSchedule", format!("{}: {e}", p.display())))
        }),
        None => Ok(GasSchedule::default()),
    };
    let result = schedule.and_then(|schedule| {
        let ctx = Ctx {
            out: cli.out,
            format: cli.format,
            schedule,
            schedule_ref: cli.gas_schedule.as_ref().map_or("default".into(), |p| p.display().to_string()),
            seed: cli.seed,
        };
        dispatch(&ctx, cli.command)
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprint!("error: {}", ops::render(&e));
            ExitCode::from(1)
        }
    }
}

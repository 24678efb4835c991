mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barrierfem::eigen::EigenOptions;
use barrierfem::encoding::{axis_directions, Protocol};
use barrierfem::field::{extract_interface, generate_ground_truth};
use barrierfem::forward::{compute_reduced_basis, simulate_protocol, SignalSet};
use barrierfem::inversion::{run_inversion, Problem};
use barrierfem::io;
use barrierfem::metrics::{signal_mse, MetricsReport};
use barrierfem::optim::Schedule;
use barrierfem::{build_ambient_grid, Error, PermeabilityField, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "barrierfem", version, about = "Barrier reconstruction from simulated diffusion signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; also the default location of inputs produced by earlier steps.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Acquisition schedule: staged or joint.
    #[arg(long, global = true)]
    mode: Option<Schedule>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the ambient tetrahedral grid.
    Grid,
    /// Write the ground-truth permeability field and interface of a shape.
    Phantom,
    /// Simulate reference signals for a permeability field.
    Forward,
    /// Recover a permeability field from reference signals.
    Invert,
    /// Score a reconstruction against the ground truth.
    Eval,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Mesh(_) | Error::Config(_) | Error::Parse { .. } => 2,
        Error::EigenNonConvergence { .. } | Error::Numerical(_) | Error::NonFiniteLoss { .. } | Error::EmptyInterface => 3,
        Error::Io { .. } => 4,
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Io {
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            path,
        })
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn input(&self, given: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        require(given.clone().unwrap_or_else(|| self.out.join(default)))
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })
    }

    fn eigen(&self) -> &EigenOptions {
        &self.cfg.inversion.eigen
    }

    fn protocol(&self) -> Result<Protocol> {
        match &self.cfg.protocol {
            Some(p) => io::load_protocol(&require(p.clone())?),
            None => Protocol::paper(&axis_directions()),
        }
    }
}

fn cmd_grid(ctx: &Ctx) -> Result<()> {
    let mesh = build_ambient_grid(ctx.cfg.grid_n, ctx.cfg.half_extent)?;
    ctx.create_out()?;
    io::save_mesh(&mesh, &ctx.output("mesh.txt"))?;
    println!(
        "{} vertices, {} tets, {} interior faces, {} boundary faces",
        mesh.vertices().len(),
        mesh.num_tets(),
        mesh.num_interior_faces(),
        mesh.boundary_faces().len()
    );
    Ok(())
}

fn cmd_phantom(ctx: &Ctx) -> Result<()> {
    let mesh = io::load_mesh(&ctx.input(&ctx.cfg.mesh, "mesh.txt")?)?;
    let truth = generate_ground_truth(&mesh, &ctx.cfg.shape, ctx.cfg.inversion.reparam)?;
    let iface = extract_interface(&truth, ctx.cfg.tau_b)?;
    ctx.create_out()?;
    io::save_field(truth.kappa(), &ctx.output("truth_field.txt"))?;
    io::save_interface(&mesh, &iface, &ctx.output("truth_interface.txt"))?;
    println!("shape: {}", ctx.cfg.shape);
    println!("{} barrier faces of {}", iface.len(), truth.len());
    Ok(())
}

fn cmd_forward(ctx: &Ctx) -> Result<()> {
    let mesh = io::load_mesh(&ctx.input(&ctx.cfg.mesh, "mesh.txt")?)?;
    let field_path = ctx.input(&ctx.cfg.field, "truth_field.txt")?;
    let protocol = ctx.protocol()?;
    let problem = Problem::new(mesh, ctx.cfg.physics)?;
    let kappa = io::load_field(&field_path, problem.num_faces())?;
    let model = compute_reduced_basis(&problem.ops, &problem.coupling, &kappa, ctx.eigen())?;
    let set = simulate_protocol(&model, &protocol, ctx.cfg.physics.rho, ctx.cfg.inversion.workers)?;
    ctx.create_out()?;
    io::save_protocol(&protocol, &ctx.output("protocol.txt"))?;
    io::save_signals(&protocol, &set.signals, &ctx.output("signals.txt"))?;
    println!("{} acquisitions, {} eigenpairs", protocol.len(), model.len());
    Ok(())
}

fn cmd_invert(ctx: &Ctx) -> Result<()> {
    let mesh = io::load_mesh(&ctx.input(&ctx.cfg.mesh, "mesh.txt")?)?;
    let (protocol, signals) = io::load_signals(&ctx.input(&ctx.cfg.signals, "signals.txt")?)?;
    let target = SignalSet::from_signals(&protocol, signals)?;
    let problem = Problem::new(mesh, ctx.cfg.physics)?;
    let init = PermeabilityField::uniform_initial(ctx.cfg.inversion.reparam, problem.num_faces());
    ctx.create_out()?;
    let history_path = ctx.output("history.csv");
    let file = File::create(&history_path).map_err(|e| Error::Io {
        path: history_path.clone(),
        source: e,
    })?;
    let mut sink = BufWriter::new(file);
    let result = run_inversion(&problem, &protocol, &target, init, &ctx.cfg.inversion, Some(&mut sink))?;
    let iface = extract_interface(&result.field, ctx.cfg.tau_b)?;
    io::save_field(result.field.kappa(), &ctx.output("field.txt"))?;
    io::save_interface(&problem.mesh, &iface, &ctx.output("interface.txt"))?;
    if let (Some(first), Some(last)) = (result.history.first(), result.history.last()) {
        println!(
            "{} iterations, data loss {:.6e} -> {:.6e}",
            result.history.len(),
            first.loss_data,
            last.loss_data
        );
    }
    println!("{} barrier faces", iface.len());
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let mesh = io::load_mesh(&ctx.input(&ctx.cfg.mesh, "mesh.txt")?)?;
    let field_path = ctx.input(&ctx.cfg.field, "field.txt")?;
    let truth_path = ctx.input(&ctx.cfg.truth_interface, "truth_interface.txt")?;
    let (protocol, signals) = io::load_signals(&ctx.input(&ctx.cfg.signals, "signals.txt")?)?;
    let target = SignalSet::from_signals(&protocol, signals)?;
    let predicted_path = match &ctx.cfg.predicted_signals {
        Some(p) => Some(require(p.clone())?),
        None => None,
    };
    let problem = Problem::new(mesh, ctx.cfg.physics)?;
    let kappa = io::load_field(&field_path, problem.num_faces())?;
    let field = PermeabilityField::from_kappa(ctx.cfg.inversion.reparam, &kappa)?;
    let truth = io::load_interface(&truth_path, &problem.mesh)?;
    let predicted = match predicted_path {
        Some(p) => {
            let (pp, s) = io::load_signals(&p)?;
            if pp.len() != protocol.len() {
                return Err(Error::InvalidInput("predicted and reference signals differ in length".into()));
            }
            SignalSet::from_signals(&protocol, s)?
        }
        None => {
            let model = compute_reduced_basis(&problem.ops, &problem.coupling, field.kappa(), ctx.eigen())?;
            simulate_protocol(&model, &protocol, ctx.cfg.physics.rho, ctx.cfg.inversion.workers)?
        }
    };
    let mse = signal_mse(&protocol, &predicted, &target)?;
    let recon = extract_interface(&field, ctx.cfg.tau_b)?;
    let report = MetricsReport::evaluate(&ctx.cfg.case, &problem.mesh, &recon, &truth, mse)?;
    ctx.create_out()?;
    write_text(&ctx.output("metrics.txt"), &format!("{report}\n"))?;
    write_text(
        &ctx.output("metrics.csv"),
        &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )?;
    println!("{report}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(w) = cli.workers {
        cfg.set_workers(w);
    }
    if let Some(m) = cli.mode {
        cfg.set_schedule(m);
    }
    let ctx = Ctx {
        cfg: cfg.finalize()?,
        out: cli.out,
    };
    match cli.command {
        Command::Grid => cmd_grid(&ctx),
        Command::Phantom => cmd_phantom(&ctx),
        Command::Forward => cmd_forward(&ctx),
        Command::Invert => cmd_invert(&ctx),
        Command::Eval => cmd_eval(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use clap::{Args, Parser, Subcommand};
use fosls_cli::{
    cmd_gibbs_study, cmd_poincare_check, cmd_run, cmd_run2d, cmd_sweep_kappa, cmd_variance_study, init_threads, CliError,
    Overrides, RunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fosls", version, about = "Robust weighted FOSLS with neural trial spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides base_seed
    #[arg(long)]
    seed: Option<u64>,
    /// use the long iteration budget
    #[arg(long)]
    full: bool,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// single training run
    Run(Common),
    /// interface runs over several contrasts
    SweepKappa {
        #[command(flatten)]
        common: Common,
        /// comma-separated kappa0 values; the config's sweep list otherwise
        #[arg(long, value_delimiter = ',')]
        kappa0: Vec<f64>,
    },
    /// FOSLS vs Deep Ritz over quadrature sizes
    VarianceStudy(Common),
    /// gradient-error total variation of three architectures
    GibbsStudy(Common),
    /// 2D benchmark with field dumps
    Run2d {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["circle2d", "plane2d"])]
        problem: String,
    },
    /// discrete Poincaré estimate of the initial space against the reference
    PoincareCheck(Common),
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        full: common.full,
        out: common.out.clone(),
    });
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Run(c) => {
            let out = cmd_run(&load(&c)?)?;
            if let Some(r) = out.report {
                println!("rel_u {:.4e}  rel_q {:.4e}  C {:.6}", r.rel_u, r.rel_q, r.poincare);
            }
        }
        Command::SweepKappa { common, kappa0 } => {
            let cfg = load(&common)?;
            let list = if kappa0.is_empty() { cfg.sweep.kappa0.clone() } else { kappa0 };
            let out = cmd_sweep_kappa(&cfg, &list)?;
            for p in &out.poincare {
                println!("kappa0 {:e}: C {:.6} (reference {:.6}, rel {:.2e})", p.kappa0, p.estimate, p.reference, p.rel_error);
            }
        }
        Command::VarianceStudy(c) => {
            for e in cmd_variance_study(&load(&c)?)? {
                println!("{:?} N={}: unstable {} rel_u {:?}", e.loss, e.points, e.unstable, e.final_rel_u);
            }
        }
        Command::GibbsStudy(c) => {
            let out = cmd_gibbs_study(&load(&c)?)?;
            for e in &out.entries {
                println!("{}: TV {:.3} (jump {:.3})", e.variant, e.tv, out.jump_reference);
            }
        }
        Command::Run2d { common, problem } => {
            let out = cmd_run2d(&load(&common)?, &problem, common.full)?;
            if let Some(r) = out.report {
                println!("rel_u {:.4e}  rel_q {:.4e}", r.rel_u, r.rel_q);
            }
        }
        Command::PoincareCheck(c) => {
            let r = cmd_poincare_check(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("plain struct"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

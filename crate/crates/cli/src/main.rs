use clap::{Args, Parser, Subcommand};
use log::{error, info};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vpb_core::characteristics::{Characteristics, PhasePoint, WeightParams, ZeroField};
use vpb_core::collision::{calibrate_kernel_constants, AngularQuadrature, CollisionQuadrature, KernelConstants};
use vpb_core::config::{parse_config, RunConfig};
use vpb_core::math::{norm2, Vec3};
use vpb_core::solver::{time_march, MarchOptions, PhaseSpace};
use vpb_core::velocity::VelocityGrid;
use vpb_core::{verify, Error};

#[derive(Parser)]
#[command(name = "vpb", version, about = "Vlasov-Poisson-Boltzmann simulator with diffuse reflection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// March the configured run and write diag.csv and snapshots.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured end time.
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Run the invariant battery and write verify_report.csv.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Equilibrium steps taken on the configured grid.
        #[arg(long, default_value_t = 3)]
        steps: usize,
    },
    /// Trace random free-streaming characteristics back to the wall.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
    },
    /// Refit the collision kernel constants against the direct gain term.
    CalibrateKernels {
        #[command(flatten)]
        common: Common,
        /// Velocity nodes per axis of the fitting quadrature.
        #[arg(long, default_value_t = 16)]
        n_v: usize,
    },
}

fn load(common: &Common) -> vpb_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.io.out_dir = o.clone();
    }
    cfg.validate()?;
    if let Some(n) = common.threads {
        // the global pool can only be set once; later calls are harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, dir: &Path) -> vpb_core::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

enum Outcome {
    Done,
    Failed,
}

fn simulate(common: &Common, t_end: Option<f64>) -> vpb_core::Result<Outcome> {
    let mut cfg = load(common)?;
    if let Some(t) = t_end {
        cfg.march.t_end = t;
        cfg.march.steps = None;
        cfg.validate()?;
    }
    let out = cfg.io.out_dir.clone();
    write_config(&cfg, &out)?;
    let ps = PhaseSpace::from_config(&cfg);
    info!("{} phase nodes x {} velocities, {} wall nodes", ps.n_nodes(), ps.nv(), ps.wall.len());
    let art = time_march(&cfg, &ps, &MarchOptions { out_dir: Some(out.clone()), keep_snapshots: false })?;
    info!("{} steps written to {}", art.reports.len(), out.join("diag.csv").display());
    Ok(Outcome::Done)
}

fn run_verify(common: &Common, steps: usize) -> vpb_core::Result<Outcome> {
    let cfg = load(common)?;
    let out = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let checks = verify::run_battery(&cfg, steps)?;
    let mut w = csv::Writer::from_path(out.join("verify_report.csv")).map_err(io_error)?;
    let mut ok = true;
    for c in &checks {
        println!("{:<28} {:>12.4e} <= {:<10.3e} {}", c.name, c.value, c.threshold, if c.pass { "pass" } else { "FAIL" });
        ok &= c.pass;
        w.serialize(c).map_err(io_error)?;
    }
    w.flush()?;
    Ok(if ok { Outcome::Done } else { Outcome::Failed })
}

#[derive(serde::Serialize)]
struct TraceRow {
    x1: f64,
    x2: f64,
    x3: f64,
    v1: f64,
    v2: f64,
    v3: f64,
    t_b: f64,
    xb1: f64,
    xb2: f64,
    xb3: f64,
    chord_t_b: f64,
    alpha: f64,
}

fn trace(common: &Common, samples: usize, t: f64) -> vpb_core::Result<Outcome> {
    use rand::{Rng, SeedableRng};
    let cfg = load(common)?;
    let out = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let domain = cfg.domain.build();
    let ch = Characteristics::new(&domain, &ZeroField).with_weight(WeightParams { epsilon: cfg.physics.epsilon });
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = domain.bbox();
    let mut w = csv::Writer::from_path(out.join("trace.csv")).map_err(io_error)?;
    let mut n = 0;
    while n < samples {
        let x: Vec3 = std::array::from_fn(|d| rng.gen_range(lo[d]..hi[d]));
        let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        if domain.level(x) >= -1e-6 || norm2(v) < 1e-6 {
            continue;
        }
        let ex = ch.backward_exit(PhasePoint::new(t, x, v), 1e6);
        let chord = domain.exit_time(x, [-v[0], -v[1], -v[2]]);
        let alpha = ch.kinetic_weight(PhasePoint::new(t, x, v));
        w.serialize(TraceRow {
            x1: x[0],
            x2: x[1],
            x3: x[2],
            v1: v[0],
            v2: v[1],
            v3: v[2],
            t_b: ex.t_b,
            xb1: ex.x_b[0],
            xb2: ex.x_b[1],
            xb3: ex.x_b[2],
            chord_t_b: chord,
            alpha,
        })
        .map_err(io_error)?;
        n += 1;
    }
    w.flush()?;
    info!("{samples} characteristics written to {}", out.join("trace.csv").display());
    Ok(Outcome::Done)
}

fn calibrate(common: &Common, n_v: usize) -> vpb_core::Result<Outcome> {
    let cfg = load(common)?;
    let out = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let quad = CollisionQuadrature::new(
        VelocityGrid::new(cfg.grid.v_max, n_v),
        AngularQuadrature::new(cfg.grid.angular[0], cfg.grid.angular[1]),
        KernelConstants::default(),
    );
    let samples: Vec<Vec3> =
        [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.3, -0.7, 1.2], [2.0, 0.0, 0.5]].to_vec();
    let report = calibrate_kernel_constants(&quad, &samples)?;
    std::fs::write(
        out.join("kernel_constants.toml"),
        format!(
            "c_k1 = {:e}\nc_k2 = {:e}\nrms_residual = {:e}\nrms_target = {:e}\nsamples = {}\n",
            report.constants.c_k1, report.constants.c_k2, report.rms_residual, report.rms_target, report.samples
        ),
    )?;
    println!(
        "c_k1 = {:.6} (closed form {:.6}), c_k2 = {:.6} (closed form {:.6}), relative rms residual {:.3e}",
        report.constants.c_k1,
        report.closed_form.c_k1,
        report.constants.c_k2,
        report.closed_form.c_k2,
        report.rms_residual / report.rms_target
    );
    Ok(Outcome::Done)
}

fn io_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, t_end } => simulate(common, *t_end),
        Command::Verify { common, steps } => run_verify(common, *steps),
        Command::Trace { common, samples, t } => trace(common, *samples, *t),
        Command::CalibrateKernels { common, n_v } => calibrate(common, *n_v),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => {
            error!("verification failed");
            ExitCode::from(3)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

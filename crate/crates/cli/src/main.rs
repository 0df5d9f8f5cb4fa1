use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codebook_forge::{AgentKind, GainProfile};
use codebook_forge_cli::{
    cmd_cluster, cmd_eval, cmd_gen, cmd_sweep, cmd_train, defaults_table, init_threads, resolve, Overrides,
};

/// Learn analog beamforming codebooks with multi-agent reinforcement learning.
#[derive(Parser)]
#[command(name = "codebook-forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Default)]
struct ScenarioFlags {
    #[arg(long)]
    antennas: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    /// Number of user clusters in the synthetic scenario.
    #[arg(long)]
    clusters: Option<usize>,
    /// Paths per user.
    #[arg(long)]
    paths: Option<usize>,
    /// `los` or `nlos`.
    #[arg(long, value_parser = parse_profile)]
    profile: Option<GainProfile>,
}

#[derive(Args, Default)]
struct TrainFlags {
    /// Codebook size (one agent per beam).
    #[arg(long)]
    beams: Option<usize>,
    /// Number of sensing beams used for clustering.
    #[arg(long)]
    sensing_beams: Option<usize>,
    /// Phase-shifter resolution in bits.
    #[arg(long)]
    bits: Option<u32>,
}

#[derive(Args, Default)]
struct LearnFlags {
    /// `ddpg`, `td3` or `sac`.
    #[arg(long)]
    kind: Option<AgentKind>,
    #[arg(long)]
    iters: Option<u64>,
    /// Relative feedback-noise intensity.
    #[arg(long)]
    eta: Option<f64>,
    /// Phase-mismatch standard deviation, radians.
    #[arg(long)]
    sigma_p: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a channel file.
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scenario: ScenarioFlags,
    },
    /// Cluster users and assign clusters to agents.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        channels: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a codebook.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        channels: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        learn: LearnFlags,
    },
    /// Evaluate a codebook on a channel file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        channels: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Run the `[sweep]` section of a config file.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// List every default and whether it is a published value or a chosen one.
    Defaults,
}

fn parse_profile(s: &str) -> Result<GainProfile, String> {
    match s.to_ascii_lowercase().as_str() {
        "los" => Ok(GainProfile::Los),
        "nlos" => Ok(GainProfile::Nlos),
        other => Err(format!("unknown profile '{other}' (expected los or nlos)")),
    }
}

fn overrides(common: &Common) -> Overrides {
    Overrides { seed: common.seed, ..Overrides::default() }
}

fn with_train(mut o: Overrides, t: &TrainFlags) -> Overrides {
    o.beams = t.beams;
    o.sensing_beams = t.sensing_beams;
    o.bits = t.bits;
    o
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut stdout = std::io::stdout();
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::Gen { common, scenario } => {
            let o = Overrides {
                antennas: scenario.antennas,
                users: scenario.users,
                clusters: scenario.clusters,
                paths: scenario.paths,
                profile: scenario.profile,
                ..overrides(&common)
            };
            let cfg = resolve(common.config.as_deref(), &o)?;
            cmd_gen(&cfg, &common.out, &mut stdout)?;
        }
        Command::Cluster { common, channels, train } => {
            let o = with_train(Overrides { channels, ..overrides(&common) }, &train);
            let cfg = resolve(common.config.as_deref(), &o)?;
            cmd_cluster(&cfg, &common.out, &mut stdout, &mut stderr)?;
        }
        Command::Train { common, channels, train, learn } => {
            let o = Overrides {
                channels,
                kind: learn.kind,
                iters: learn.iters,
                eta: learn.eta,
                sigma_p: learn.sigma_p,
                batch: learn.batch,
                ..with_train(overrides(&common), &train)
            };
            let cfg = resolve(common.config.as_deref(), &o)?;
            cmd_train(&cfg, &common.out, &mut stdout, &mut stderr)?;
        }
        Command::Eval { common, channels, codebook } => {
            let o = Overrides { channels, codebook, ..overrides(&common) };
            let cfg = resolve(common.config.as_deref(), &o)?;
            let out = common.out.clone();
            cmd_eval(&cfg, Some(&out), &mut stdout)?;
        }
        Command::Sweep { common } => {
            let cfg = resolve(common.config.as_deref(), &overrides(&common))?;
            cmd_sweep(&cfg, &common.out, &mut stdout)?;
        }
        Command::Defaults => print!("{}", defaults_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

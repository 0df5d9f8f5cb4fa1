//! Command implementations behind the `codebook-forge` binary.
//!
//! Every command resolves its parameters as flags over config file over
//! built-in defaults and writes the resolved [`RunConfig`] as
//! `config.toml` next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use codebook_forge::agents::{plan_multi, train_multi, AgentHyper, MultiConfig};
use codebook_forge::beamform::best_beam_gain;
use codebook_forge::channel::{
    impair_channels, load_channels, normalize, save_channels, synth_channels, ArrayGeometry, ImpairmentProfile,
    ScenarioConfig,
};
use codebook_forge::cluster::{report_degenerate, write_assignment_csv, write_cluster_csv};
use codebook_forge::robustness::{mean_egc, run_sweep, SweepSpec};
use codebook_forge::{AgentKind, ChannelSet, Codebook};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHANNEL_FILE: &str = "channels.chnl";
pub const CODEBOOK_FILE: &str = "codebook.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Clustering and training parameters shared by `cluster` and `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub beams: usize,
    pub sensing_beams: usize,
    pub bits: u32,
    pub iters: u64,
    pub eta: f64,
    pub sigma_p: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub hyper: AgentHyper,
}

impl Default for TrainSection {
    fn default() -> Self {
        let m = MultiConfig::default();
        Self {
            beams: m.beams,
            sensing_beams: m.sensing_beams,
            bits: m.bits,
            iters: m.iters,
            eta: m.eta,
            sigma_p: 0.0,
            kmeans_iters: m.kmeans_iters,
            kmeans_tol: m.kmeans_tol,
            hyper: m.hyper,
        }
    }
}

impl TrainSection {
    pub fn multi(&self, seed: u64) -> MultiConfig {
        MultiConfig {
            beams: self.beams,
            sensing_beams: self.sensing_beams,
            bits: self.bits,
            eta: self.eta,
            iters: self.iters,
            kmeans_iters: self.kmeans_iters,
            kmeans_tol: self.kmeans_tol,
            seed,
            hyper: self.hyper.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub channels: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
}

/// Complete, serializable parameter set of any command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; also the scenario seed for `gen`.
    pub seed: u64,
    pub inputs: Inputs,
    pub scenario: ScenarioConfig,
    pub train: TrainSection,
    pub sweep: SweepSpec,
}

impl RunConfig {
    /// Defaults overlaid with an optional TOML file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn write_to(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(CONFIG_FILE), self.to_toml()?).context("writing resolved config")
    }
}

/// Command-line overrides; `None` leaves the file or default value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub channels: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub antennas: Option<usize>,
    pub users: Option<usize>,
    pub clusters: Option<usize>,
    pub paths: Option<usize>,
    pub profile: Option<codebook_forge::GainProfile>,
    pub beams: Option<usize>,
    pub sensing_beams: Option<usize>,
    pub bits: Option<u32>,
    pub kind: Option<AgentKind>,
    pub iters: Option<u64>,
    pub eta: Option<f64>,
    pub sigma_p: Option<f64>,
    pub batch: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        if self.channels.is_some() {
            cfg.inputs.channels = self.channels.clone();
        }
        if self.codebook.is_some() {
            cfg.inputs.codebook = self.codebook.clone();
        }
        set(&mut cfg.scenario.antennas, &self.antennas);
        set(&mut cfg.scenario.users, &self.users);
        set(&mut cfg.scenario.num_clusters, &self.clusters);
        set(&mut cfg.scenario.paths_per_user, &self.paths);
        set(&mut cfg.scenario.gain_profile, &self.profile);
        set(&mut cfg.train.beams, &self.beams);
        set(&mut cfg.train.sensing_beams, &self.sensing_beams);
        set(&mut cfg.train.bits, &self.bits);
        set(&mut cfg.train.hyper.kind, &self.kind);
        set(&mut cfg.train.iters, &self.iters);
        set(&mut cfg.train.eta, &self.eta);
        set(&mut cfg.train.sigma_p, &self.sigma_p);
        set(&mut cfg.train.hyper.batch, &self.batch);
        cfg.scenario.seed = cfg.seed;
    }
}

/// File, then flags.
pub fn resolve(config: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn input_channels(cfg: &RunConfig) -> Result<ChannelSet> {
    let path = cfg.inputs.channels.as_deref().context("no channel file given (--channels)")?;
    load_channels(path).with_context(|| format!("loading channels from {}", path.display()))
}

/// Synthesizes a scenario and saves it as `channels.chnl`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<ChannelSet> {
    out_dir(out)?;
    let geom = ArrayGeometry::half_wavelength(cfg.scenario.antennas, cfg.scenario.frequency_ghz)?;
    let cs = synth_channels(&cfg.scenario, &geom)?;
    save_channels(&cs, out.join(CHANNEL_FILE))?;
    cfg.write_to(out)?;
    writeln!(log, "users {} antennas {} delta {}", cs.users(), cs.antennas(), cs.delta())?;
    Ok(cs)
}

/// Clusters users and assigns clusters to the agents' initial beams.
pub fn cmd_cluster(cfg: &RunConfig, out: &Path, log: &mut dyn Write, warn: &mut dyn Write) -> Result<()> {
    let cs = normalize(&input_channels(cfg)?)?;
    out_dir(out)?;
    let plan = plan_multi(&cs, &cfg.train.multi(cfg.seed))?;
    report_degenerate(&mut *warn, &plan.degenerate_users)?;
    write_cluster_csv(out.join("clusters.csv"), &plan.clustered_users, &plan.clusters.labels)?;
    write_assignment_csv(out.join("assignment.csv"), &plan.assignment)?;
    cfg.write_to(out)?;
    writeln!(log, "clustered {} users into {} clusters", plan.clustered_users.len(), plan.clusters.k())?;
    writeln!(log, "cluster sizes {:?}", plan.clusters.sizes)?;
    Ok(())
}

/// Impairs, normalizes, clusters and trains; writes the codebook and one
/// log per agent.
pub fn cmd_train(cfg: &RunConfig, out: &Path, log: &mut dyn Write, warn: &mut dyn Write) -> Result<Codebook> {
    let raw = input_channels(cfg)?;
    out_dir(out)?;
    let profile = ImpairmentProfile::draw(cfg.train.sigma_p, raw.antennas(), cfg.seed)?;
    let cs = normalize(&impair_channels(&raw, &profile)?)?;
    let outcome = train_multi(&cs, &cfg.train.multi(cfg.seed))?;
    report_degenerate(&mut *warn, &outcome.degenerate_users)?;
    outcome.codebook.save(out.join(CODEBOOK_FILE))?;
    for (n, run) in outcome.runs.iter().enumerate() {
        run.log.save(out.join(format!("agent_{n}.csv")))?;
    }
    write_cluster_csv(out.join("clusters.csv"), &outcome.clustered_users, &outcome.clusters.labels)?;
    write_assignment_csv(out.join("assignment.csv"), &outcome.assignment)?;
    cfg.write_to(out)?;
    let egc = mean_egc(&cs);
    for (n, run) in outcome.runs.iter().enumerate() {
        writeln!(
            log,
            "agent {n} cluster {} users {} best {:.4} ({:.1}% of cluster EGC)",
            outcome.assignment.perm[n],
            outcome.clusters.sizes[outcome.assignment.perm[n]],
            run.best_beta,
            100.0 * run.best_beta / egc.max(f64::MIN_POSITIVE)
        )?;
    }
    Ok(outcome.codebook)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_gain: f64,
    pub pct_egc: f64,
    pub beam_users: Vec<usize>,
}

/// Best-beam gain statistics of a codebook on a channel set.
pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>, log: &mut dyn Write) -> Result<EvalReport> {
    let cs = normalize(&input_channels(cfg)?)?;
    let path = cfg.inputs.codebook.as_deref().context("no codebook file given (--codebook)")?;
    let book = Codebook::load(path).with_context(|| format!("loading codebook from {}", path.display()))?;
    if book.antennas() != cs.antennas() {
        bail!(codebook_forge::ForgeError::Dimension { expected: cs.antennas(), got: book.antennas() });
    }
    let mut beam_users = vec![0; book.len()];
    let mut total = 0.0;
    for h in cs.rows() {
        let (i, g) = best_beam_gain(&book, h)?;
        beam_users[i] += 1;
        total += g;
    }
    let mean_gain = total / cs.users() as f64;
    let pct_egc = 100.0 * mean_gain / mean_egc(&cs);
    writeln!(log, "mean gain {mean_gain:.6}")?;
    writeln!(log, "percent of EGC {pct_egc:.2}")?;
    writeln!(log, "users per beam {beam_users:?}")?;
    if let Some(out) = out {
        out_dir(out)?;
        let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
        w.write_record(["beam", "users", "mean_gain", "pct_egc"])?;
        for (i, n) in beam_users.iter().enumerate() {
            w.write_record([i.to_string(), n.to_string(), mean_gain.to_string(), pct_egc.to_string()])?;
        }
        w.flush()?;
        cfg.write_to(out)?;
    }
    Ok(EvalReport { mean_gain, pct_egc, beam_users })
}

/// Runs the `[sweep]` section. Failed cells are error rows, not failures.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<()> {
    out_dir(out)?;
    cfg.write_to(out)?;
    let file = fs::File::create(out.join(SWEEP_FILE))?;
    let result = run_sweep(&cfg.sweep, file)?;
    let failed = result.rows.iter().filter(|r| !r.is_ok()).count();
    writeln!(log, "{} rows, {} failed", result.rows.len(), failed)?;
    Ok(())
}

/// Every default with where its value comes from.
pub fn defaults_table() -> String {
    let d = RunConfig::default();
    let h = &d.train.hyper;
    let s = &d.scenario;
    let rows: Vec<(&str, String, &str)> = vec![
        ("train.hyper.buffer_capacity", h.buffer_capacity.to_string(), "published"),
        ("train.hyper.batch", h.batch.to_string(), "published"),
        ("train.hyper.lr", h.lr.to_string(), "published"),
        ("train.hyper.actor_weight_decay", h.actor_weight_decay.to_string(), "published"),
        ("train.hyper.critic_weight_decay", h.critic_weight_decay.to_string(), "published"),
        ("train.hyper.alpha_lr", h.alpha_lr.to_string(), "published"),
        ("train.hyper.actor_width_per_antenna", h.actor_width_per_antenna.to_string(), "published"),
        ("train.hyper.critic_width_per_antenna", h.critic_width_per_antenna.to_string(), "published"),
        ("scenario.paths_per_user", s.paths_per_user.to_string(), "published"),
        ("scenario.frequency_ghz", s.frequency_ghz.to_string(), "published"),
        ("train.sensing_beams", d.train.sensing_beams.to_string(), "published"),
        ("train.bits", d.train.bits.to_string(), "published"),
        ("train.beams", d.train.beams.to_string(), "chosen"),
        ("train.iters", d.train.iters.to_string(), "chosen"),
        ("train.eta", d.train.eta.to_string(), "chosen"),
        ("train.sigma_p", d.train.sigma_p.to_string(), "chosen"),
        ("train.kmeans_iters", d.train.kmeans_iters.to_string(), "chosen"),
        ("train.kmeans_tol", d.train.kmeans_tol.to_string(), "chosen"),
        ("train.hyper.kind", h.kind.to_string(), "chosen"),
        ("train.hyper.discount", h.discount.to_string(), "chosen"),
        ("train.hyper.tau", h.tau.to_string(), "chosen"),
        ("train.hyper.initial_alpha", h.initial_alpha.to_string(), "chosen"),
        ("train.hyper.target_entropy", "-M".to_string(), "chosen"),
        ("train.hyper.policy_delay", h.policy_delay.to_string(), "chosen"),
        ("train.hyper.target_noise_scale", h.target_noise_scale.to_string(), "chosen"),
        ("train.hyper.target_noise_clip", h.target_noise_clip.to_string(), "chosen"),
        ("train.hyper.ou.theta", h.ou.theta.to_string(), "chosen"),
        ("train.hyper.ou.sigma", h.ou.sigma.to_string(), "chosen"),
        ("train.hyper.ou.sigma_min", h.ou.sigma_min.to_string(), "chosen"),
        ("train.hyper.ou.decay", h.ou.decay.to_string(), "chosen"),
        ("scenario.antennas", s.antennas.to_string(), "published"),
        ("scenario.users", s.users.to_string(), "chosen"),
        ("scenario.num_clusters", s.num_clusters.to_string(), "chosen"),
        ("scenario.aod_spread", s.aod_spread.to_string(), "chosen"),
        ("scenario.gain_profile", s.gain_profile.label().to_string(), "chosen"),
        ("scenario.rho", s.rho.to_string(), "chosen"),
        ("seed", d.seed.to_string(), "chosen"),
    ];
    let key_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let val_w = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:key_w$}  {:val_w$}  source", "key", "default");
    for (k, v, src) in rows {
        let _ = writeln!(out, "{k:key_w$}  {v:val_w$}  {src}");
    }
    out
}

/// Applies `CODEBOOK_FORGE_THREADS` to the global worker pool.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CODEBOOK_FORGE_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("CODEBOOK_FORGE_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("CODEBOOK_FORGE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

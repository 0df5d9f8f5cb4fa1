//! Phase-mismatch and feedback-noise sweeps over the full pipeline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{train_multi, AgentHyper, AgentKind, MultiConfig};
use crate::beamform::{best_beam_gain, egc_bound, Codebook};
use crate::channel::{
    impair_channels, load_channels, normalize, synth_channels, ArrayGeometry, ChannelSet, ImpairmentProfile,
    ScenarioConfig,
};
use crate::error::{check_len, config, ForgeError, Result};

/// Mean over users of the best codebook gain.
pub fn mean_best_gain(codebook: &Codebook, channels: &ChannelSet) -> Result<f64> {
    check_len(codebook.antennas(), channels.antennas())?;
    let mut sum = 0.0;
    for h in channels.rows() {
        sum += best_beam_gain(codebook, h)?.1;
    }
    Ok(sum / channels.users() as f64)
}

/// Mean EGC bound over users.
pub fn mean_egc(channels: &ChannelSet) -> f64 {
    channels.rows().map(egc_bound).sum::<f64>() / channels.users() as f64
}

/// `100 · mean best-beam gain / mean EGC bound`.
pub fn percent_egc(codebook: &Codebook, channels: &ChannelSet) -> Result<f64> {
    let egc = mean_egc(channels);
    if egc <= 0.0 {
        return Err(ForgeError::Degenerate("all channels are zero".into()));
    }
    Ok(100.0 * mean_best_gain(codebook, channels)? / egc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub kinds: Vec<AgentKind>,
    pub sizes: Vec<usize>,
    pub sigma_p: Vec<f64>,
    pub eta: Vec<f64>,
    pub seeds: Vec<u64>,
    pub iters: u64,
    pub sensing_beams: usize,
    pub bits: u32,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    /// Learner settings; `kind` is replaced per row.
    pub hyper: AgentHyper,
    /// Synthetic scenario, regenerated with each row's seed.
    pub scenario: ScenarioConfig,
    /// Channel file used instead of the synthetic scenario.
    pub channels: Option<PathBuf>,
    /// When non-zero, every `holdout_every`-th user is kept out of training
    /// and the row is evaluated on those users only.
    pub holdout_every: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let multi = MultiConfig::default();
        Self {
            kinds: AgentKind::ALL.to_vec(),
            sizes: vec![4, 8, 16],
            sigma_p: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            eta: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            seeds: vec![0, 1, 2],
            iters: multi.iters,
            sensing_beams: multi.sensing_beams,
            bits: multi.bits,
            kmeans_iters: multi.kmeans_iters,
            kmeans_tol: multi.kmeans_tol,
            hyper: multi.hyper,
            scenario: ScenarioConfig::default(),
            channels: None,
            holdout_every: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.sizes.is_empty() || self.sigma_p.is_empty() || self.eta.is_empty() || self.seeds.is_empty() {
            return config("sweep grids must be non-empty");
        }
        if self.sizes.contains(&0) {
            return config("codebook sizes must be positive");
        }
        if self.sigma_p.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return config("sigma_p values must be finite and non-negative");
        }
        if self.eta.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return config("eta values must be finite and non-negative");
        }
        if self.holdout_every == 1 {
            return config("holdout_every = 1 would leave no training users");
        }
        self.hyper.validate()
    }

    /// Every `(kind, N, σ_p, η, seed)` cell in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut kinds = self.kinds.clone();
        kinds.sort();
        kinds.dedup();
        let mut sizes = self.sizes.clone();
        sizes.sort();
        sizes.dedup();
        let sigmas = sorted_floats(&self.sigma_p);
        let etas = sorted_floats(&self.eta);
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        let mut out = Vec::new();
        for &kind in &kinds {
            for &n in &sizes {
                for &sigma_p in &sigmas {
                    for &eta in &etas {
                        for &seed in &seeds {
                            out.push(Cell { kind, n, sigma_p, eta, seed });
                        }
                    }
                }
            }
        }
        out
    }

    fn multi(&self, cell: &Cell) -> MultiConfig {
        MultiConfig {
            beams: cell.n,
            sensing_beams: self.sensing_beams,
            bits: self.bits,
            eta: cell.eta,
            iters: self.iters,
            kmeans_iters: self.kmeans_iters,
            kmeans_tol: self.kmeans_tol,
            seed: cell.seed,
            hyper: AgentHyper { kind: cell.kind, ..self.hyper.clone() },
        }
    }

    /// Raw (unimpaired, unnormalized) channels for a seed.
    fn source(&self, seed: u64) -> Result<ChannelSet> {
        match &self.channels {
            Some(path) => load_channels(path),
            None => {
                let cfg = ScenarioConfig { seed, ..self.scenario.clone() };
                let geom = ArrayGeometry::half_wavelength(cfg.antennas, cfg.frequency_ghz)?;
                synth_channels(&cfg, &geom)
            }
        }
    }
}

fn sorted_floats(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub kind: AgentKind,
    pub n: usize,
    pub sigma_p: f64,
    pub eta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    pub mean_gain: Option<f64>,
    pub pct_egc: Option<f64>,
    /// Against the same kind, size and seed at `σ_p = 0, η = 0`.
    pub retention: Option<f64>,
    /// `ok`, or `error: <message>` for a failed run.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: [&str; 9] = ["kind", "N", "sigma_p", "eta", "seed", "mean_gain", "pct_egc", "retention", "status"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(SWEEP_HEADER)?;
        for row in &self.rows {
            write_row(&mut w, row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        if reader.headers()?.iter().ne(SWEEP_HEADER) {
            return Err(ForgeError::Parse { line: 1, message: "unexpected sweep header".into() });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |what: &str| ForgeError::Parse { line, message: format!("bad {what}") };
            let num = |k: usize| -> Result<Option<f64>> {
                match rec.get(k) {
                    Some("") => Ok(None),
                    Some(s) => s.parse().map(Some).map_err(|_| bad(SWEEP_HEADER[k])),
                    None => Err(bad(SWEEP_HEADER[k])),
                }
            };
            let field = |k: usize| rec.get(k).ok_or_else(|| bad(SWEEP_HEADER[k]));
            let cell = Cell {
                kind: field(0)?.parse()?,
                n: field(1)?.parse().map_err(|_| bad("N"))?,
                sigma_p: num(2)?.ok_or_else(|| bad("sigma_p"))?,
                eta: num(3)?.ok_or_else(|| bad("eta"))?,
                seed: field(4)?.parse().map_err(|_| bad("seed"))?,
            };
            rows.push(SweepRow {
                cell,
                mean_gain: num(5)?,
                pct_egc: num(6)?,
                retention: num(7)?,
                status: field(8)?.to_string(),
            });
        }
        Ok(Self { rows })
    }

    /// Seed-averaged retention per `(σ_p, η)` cell for one kind and size:
    /// mean gain of the cell over mean gain of the noise-free cell.
    pub fn retention(&self, kind: AgentKind, n: usize) -> Result<Vec<(f64, f64, f64)>> {
        let mut cells: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
        for row in self.rows.iter().filter(|r| r.cell.kind == kind && r.cell.n == n) {
            if let Some(g) = row.mean_gain {
                cells.entry((row.cell.sigma_p.to_bits(), row.cell.eta.to_bits())).or_default().push(g);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let base = cells
            .get(&(0f64.to_bits(), 0f64.to_bits()))
            .map(|v| mean(v))
            .ok_or_else(|| ForgeError::Config(format!("no noise-free baseline for {kind} with N = {n}")))?;
        if base <= 0.0 {
            return Err(ForgeError::Degenerate("baseline gain is zero".into()));
        }
        let mut out: Vec<(f64, f64, f64)> =
            cells.iter().map(|(&(s, e), v)| (f64::from_bits(s), f64::from_bits(e), mean(v) / base)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Ok(out)
    }

    /// Seed-averaged value of `metric` over the rows matching `filter`.
    pub fn mean_of(&self, filter: impl Fn(&Cell) -> bool, metric: impl Fn(&SweepRow) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| filter(&r.cell)).filter_map(metric).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &SweepRow) -> Result<()> {
    let c = &row.cell;
    w.write_record([
        c.kind.name().to_string(),
        c.n.to_string(),
        c.sigma_p.to_string(),
        c.eta.to_string(),
        c.seed.to_string(),
        opt(row.mean_gain),
        opt(row.pct_egc),
        opt(row.retention),
        row.status.clone(),
    ])?;
    Ok(())
}

/// Impaired, normalized channels for one `(σ_p, seed)` pair.
fn prepared(spec: &SweepSpec, sigma_p: f64, seed: u64) -> Result<ChannelSet> {
    let raw = spec.source(seed)?;
    let profile = ImpairmentProfile::draw(sigma_p, raw.antennas(), seed)?;
    normalize(&impair_channels(&raw, &profile)?)
}

fn split_holdout(cs: &ChannelSet, every: usize) -> Result<(ChannelSet, ChannelSet)> {
    if every == 0 {
        return Ok((cs.clone(), cs.clone()));
    }
    let (held, train): (Vec<usize>, Vec<usize>) = (0..cs.users()).partition(|u| u % every == 0);
    Ok((cs.select(&train)?, cs.select(&held)?))
}

fn run_cell(spec: &SweepSpec, cell: &Cell, channels: &ChannelSet) -> Result<(f64, f64)> {
    let (train, eval) = split_holdout(channels, spec.holdout_every)?;
    let out = train_multi(&train, &spec.multi(cell))?;
    Ok((mean_best_gain(&out.codebook, &eval)?, percent_egc(&out.codebook, &eval)?))
}

/// Runs every cell in canonical order, writing each CSV row as soon as it
/// is known. Failed runs become error rows and the sweep continues.
pub fn run_sweep<W: Write>(spec: &SweepSpec, out: W) -> Result<SweepResult> {
    spec.validate()?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(SWEEP_HEADER)?;
    writer.flush()?;
    let mut result = SweepResult::default();
    let mut baselines: BTreeMap<(AgentKind, usize, u64), f64> = BTreeMap::new();
    let mut channel_cache: Option<((u64, u64), Result<ChannelSet>)> = None;
    for cell in spec.cells() {
        let key = (cell.sigma_p.to_bits(), cell.seed);
        if channel_cache.as_ref().is_none_or(|(k, _)| *k != key) {
            channel_cache = Some((key, prepared(spec, cell.sigma_p, cell.seed)));
        }
        let channels = &channel_cache.as_ref().expect("filled above").1;
        let outcome = match channels {
            Ok(cs) => run_cell(spec, &cell, cs),
            Err(e) => Err(ForgeError::Config(e.to_string())),
        };
        let row = match outcome {
            Ok((gain, pct)) => {
                if cell.sigma_p == 0.0 && cell.eta == 0.0 {
                    baselines.insert((cell.kind, cell.n, cell.seed), gain);
                }
                let retention = baselines
                    .get(&(cell.kind, cell.n, cell.seed))
                    .filter(|&&b| b > 0.0)
                    .map(|b| gain / b);
                SweepRow { cell, mean_gain: Some(gain), pct_egc: Some(pct), retention, status: "ok".into() }
            }
            Err(e) => SweepRow {
                cell,
                mean_gain: None,
                pct_egc: None,
                retention: None,
                status: format!("error: {e}"),
            },
        };
        write_row(&mut writer, &row)?;
        writer.flush()?;
        result.rows.push(row);
    }
    Ok(result)
}

pub fn run_sweep_to_path(spec: &SweepSpec, path: impl AsRef<Path>) -> Result<SweepResult> {
    run_sweep(spec, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::{matched_beam, Beam, PhaseSet};
    use crate::channel::GainProfile;
    use crate::Complex64;
    use approx::assert_abs_diff_eq;

    fn single_path(users: usize, seed: u64) -> ChannelSet {
        let cfg = ScenarioConfig { antennas: 8, users, num_clusters: 3, paths_per_user: 1, seed, ..Default::default() };
        normalize(&synth_channels(&cfg, &ArrayGeometry::half_wavelength(8, 60.0).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn matched_codebook_meets_quantization_bound() {
        let ps = PhaseSet::new(4).unwrap();
        let cs = single_path(20, 4);
        let beams: Vec<Beam> = cs.rows().map(|h| matched_beam(h, &ps)).collect();
        let book = Codebook::new(beams, ps).unwrap();
        let bound = 100.0 * (std::f64::consts::PI / 16.0).cos().powi(2);
        assert!(percent_egc(&book, &cs).unwrap() >= bound);
    }

    #[test]
    fn matched_case_is_one_hundred() {
        let ps = PhaseSet::new(3).unwrap();
        let one = Complex64::new(1.0, 0.0);
        let cs = ChannelSet::from_rows(&[vec![one, one], vec![one, one]]).unwrap();
        let book = Codebook::new(vec![Beam::broadside(2, &ps)], ps).unwrap();
        assert_abs_diff_eq!(percent_egc(&book, &cs).unwrap(), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn percent_is_scale_invariant() {
        let ps = PhaseSet::new(2).unwrap();
        let cs = single_path(10, 1);
        let scaled = ChannelSet::new(cs.users(), cs.antennas(), cs.entries().iter().map(|z| z * 1234.5).collect()).unwrap();
        let book = Codebook::new(vec![Beam::broadside(8, &ps), Beam::new(vec![0; 8], &ps).unwrap()], ps).unwrap();
        assert_abs_diff_eq!(percent_egc(&book, &cs).unwrap(), percent_egc(&book, &scaled).unwrap(), epsilon = 1e-9);
    }

    fn quick_spec() -> SweepSpec {
        SweepSpec {
            kinds: vec![AgentKind::Sac, AgentKind::Ddpg],
            sizes: vec![2],
            sigma_p: vec![0.1, 0.0],
            eta: vec![0.0, 0.2],
            seeds: vec![1, 0],
            iters: 20,
            sensing_beams: 4,
            bits: 2,
            hyper: AgentHyper {
                batch: 4,
                buffer_capacity: 16,
                actor_width_per_antenna: 1,
                critic_width_per_antenna: 2,
                ..AgentHyper::default()
            },
            scenario: ScenarioConfig { antennas: 4, users: 12, num_clusters: 2, gain_profile: GainProfile::Nlos, ..Default::default() },
            ..SweepSpec::default()
        }
    }

    #[test]
    fn sweep_rows_are_canonical_and_reproducible() {
        let spec = quick_spec();
        let mut a = Vec::new();
        let res = run_sweep(&spec, &mut a).unwrap();
        assert_eq!(res.rows.len(), 16);
        let keys: Vec<_> = res.rows.iter().map(|r| (r.cell.kind, r.cell.sigma_p.to_bits(), r.cell.eta.to_bits(), r.cell.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let mut b = Vec::new();
        run_sweep(&spec, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(SweepResult::read_csv(&a[..]).unwrap(), res);
        for row in &res.rows {
            assert!(row.is_ok(), "{}", row.status);
            let pct = row.pct_egc.unwrap();
            assert!((0.0..=100.0).contains(&pct));
            let r = row.retention.unwrap();
            assert!(r >= 0.0);
            if row.cell.sigma_p == 0.0 && row.cell.eta == 0.0 {
                assert_eq!(r, 1.0);
            }
        }
        let ret = res.retention(AgentKind::Sac, 2).unwrap();
        assert_eq!(ret.len(), 4);
        assert_eq!(ret[0], (0.0, 0.0, 1.0));
        assert!(res.retention(AgentKind::Td3, 2).is_err());
    }

    #[test]
    fn impairment_keeps_the_egc_denominator() {
        let spec = quick_spec();
        let a = prepared(&spec, 0.0, 3).unwrap();
        let b = prepared(&spec, 0.2, 3).unwrap();
        assert_abs_diff_eq!(mean_egc(&a), mean_egc(&b), epsilon = 1e-12);
        assert_ne!(a.entries(), b.entries());
    }

    #[test]
    fn failed_runs_become_error_rows() {
        // more clusters than users: every run fails, the sweep does not
        let spec = SweepSpec { sizes: vec![50], kinds: vec![AgentKind::Td3], sigma_p: vec![0.0], eta: vec![0.0], seeds: vec![0], ..quick_spec() };
        let mut out = Vec::new();
        let res = run_sweep(&spec, &mut out).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert!(res.rows[0].status.starts_with("error:"));
        assert_eq!(res.rows[0].mean_gain, None);
        assert_eq!(SweepResult::read_csv(&out[..]).unwrap(), res);
    }

    #[test]
    fn empty_grids_rejected() {
        for spec in [
            SweepSpec { kinds: vec![], ..quick_spec() },
            SweepSpec { sizes: vec![], ..quick_spec() },
            SweepSpec { sigma_p: vec![], ..quick_spec() },
            SweepSpec { eta: vec![], ..quick_spec() },
            SweepSpec { seeds: vec![], ..quick_spec() },
            SweepSpec { eta: vec![-0.1], ..quick_spec() },
        ] {
            assert!(run_sweep(&spec, Vec::new()).is_err());
        }
    }

    #[test]
    fn holdout_evaluates_unseen_users() {
        let cs = single_path(10, 0);
        let (train, held) = split_holdout(&cs, 3).unwrap();
        assert_eq!(held.users(), 4);
        assert_eq!(train.users(), 6);
        assert_eq!(held.user(1), cs.user(3));
        let spec = SweepSpec { holdout_every: 3, kinds: vec![AgentKind::Sac], sigma_p: vec![0.0], eta: vec![0.0], seeds: vec![0], ..quick_spec() };
        assert!(run_sweep(&spec, Vec::new()).unwrap().rows[0].is_ok());
    }
}

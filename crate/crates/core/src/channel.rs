//! Geometric multipath channels for a uniform linear array.
//!
//! Channels are generated as sums of array responses, or ingested from the
//! binary `CHNL` format, then normalized by their global peak magnitude and
//! optionally rotated by a fixed per-antenna phase mismatch.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, config, ForgeError, Result};
use crate::rng::{stream, Stream};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
const MAGIC: &[u8; 4] = b"CHNL";
const VERSION: u16 = 1;
/// Files claiming more entries than this are rejected before allocation.
const MAX_ENTRIES: u64 = 1 << 28;

/// Antenna positions along the array axis plus the carrier wavenumber.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    wavenumber: f64,
    positions: Vec<f64>,
}

impl ArrayGeometry {
    pub fn new(wavenumber: f64, positions: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return config("array needs at least one antenna");
        }
        if !(wavenumber.is_finite() && wavenumber > 0.0) {
            return config(format!("wavenumber must be positive, got {wavenumber}"));
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) || positions.iter().any(|p| !p.is_finite()) {
            return config("antenna positions must be finite and strictly increasing");
        }
        Ok(Self { wavenumber, positions })
    }

    /// Half-wavelength ULA at the given carrier, antenna `m` at `m·λ/2`.
    pub fn half_wavelength(antennas: usize, frequency_ghz: f64) -> Result<Self> {
        if !(frequency_ghz > 0.0) {
            return config(format!("carrier frequency must be positive, got {frequency_ghz}"));
        }
        let lambda = SPEED_OF_LIGHT / (frequency_ghz * 1e9);
        let positions = (0..antennas).map(|m| m as f64 * lambda / 2.0).collect();
        Self::new(2.0 * PI / lambda, positions)
    }

    pub fn num_antennas(&self) -> usize {
        self.positions.len()
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn wavelength(&self) -> f64 {
        2.0 * PI / self.wavenumber
    }
}

/// One propagation path: complex gain and angle of departure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub gain: Complex64,
    pub aod: f64,
}

/// Fixed per-antenna phase deviations of a given hardware instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpairmentProfile {
    sigma_p: f64,
    deviations: Vec<f64>,
    seed: u64,
}

impl ImpairmentProfile {
    /// Draws `antennas` deviations from `Normal(0, sigma_p²)` once.
    pub fn draw(sigma_p: f64, antennas: usize, seed: u64) -> Result<Self> {
        if !(sigma_p.is_finite() && sigma_p >= 0.0) {
            return config(format!("sigma_p must be a finite non-negative angle, got {sigma_p}"));
        }
        let deviations = if sigma_p == 0.0 {
            vec![0.0; antennas]
        } else {
            let mut rng = stream(seed, Stream::Impairments, 0);
            let normal = Normal::new(0.0, sigma_p).expect("finite sigma");
            (0..antennas).map(|_| normal.sample(&mut rng)).collect()
        };
        Ok(Self { sigma_p, deviations, seed })
    }

    /// Profile with explicitly given deviations; `sigma_p` is metadata.
    pub fn from_deviations(sigma_p: f64, deviations: Vec<f64>) -> Self {
        Self { sigma_p, deviations, seed: 0 }
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    pub fn deviations(&self) -> &[f64] {
        &self.deviations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// `U × M` channel matrix, row-major by user.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    users: usize,
    antennas: usize,
    entries: Vec<Complex64>,
    delta: f64,
    pub frequency_ghz: f64,
    pub label: String,
}

impl ChannelSet {
    pub fn new(users: usize, antennas: usize, entries: Vec<Complex64>) -> Result<Self> {
        if users == 0 || antennas == 0 {
            return config("channel set needs at least one user and one antenna");
        }
        check_len(users * antennas, entries.len())?;
        if entries.iter().any(|h| !(h.re.is_finite() && h.im.is_finite())) {
            return Err(ForgeError::Degenerate("non-finite channel entry".into()));
        }
        Ok(Self { users, antennas, entries, delta: 1.0, frequency_ghz: 0.0, label: String::new() })
    }

    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let antennas = rows.first().map_or(0, Vec::len);
        for row in rows {
            check_len(antennas, row.len())?;
        }
        Self::new(rows.len(), antennas, rows.concat())
    }

    pub fn with_metadata(mut self, frequency_ghz: f64, label: impl Into<String>) -> Self {
        self.frequency_ghz = frequency_ghz;
        self.label = label.into();
        self
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    /// Scale the entries were divided by; 1 for raw channels.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn user(&self, u: usize) -> &[Complex64] {
        &self.entries[u * self.antennas..(u + 1) * self.antennas]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Complex64]> {
        self.entries.chunks_exact(self.antennas)
    }

    /// Subset of users, keeping metadata and Δ.
    pub fn select(&self, users: &[usize]) -> Result<Self> {
        if users.is_empty() {
            return config("cannot select an empty user subset");
        }
        let mut entries = Vec::with_capacity(users.len() * self.antennas);
        for &u in users {
            if u >= self.users {
                return config(format!("user {u} out of range ({} users)", self.users));
            }
            entries.extend_from_slice(self.user(u));
        }
        Ok(Self {
            users: users.len(),
            antennas: self.antennas,
            entries,
            delta: self.delta,
            frequency_ghz: self.frequency_ghz,
            label: self.label.clone(),
        })
    }

    pub fn max_magnitude(&self) -> f64 {
        self.entries.iter().map(|h| h.norm()).fold(0.0, f64::max)
    }
}

/// How the power of a user's `L` paths is split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainProfile {
    /// First path carries 10× the power of all others combined.
    Los,
    /// All paths carry equal power.
    Nlos,
}

impl GainProfile {
    pub fn label(self) -> &'static str {
        match self {
            GainProfile::Los => "LoS",
            GainProfile::Nlos => "NLoS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub antennas: usize,
    pub users: usize,
    pub num_clusters: usize,
    pub paths_per_user: usize,
    /// Half-width of the uniform AoD jitter around each cluster direction.
    pub aod_spread: f64,
    pub gain_profile: GainProfile,
    pub rho: f64,
    pub frequency_ghz: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            antennas: 32,
            users: 300,
            num_clusters: 4,
            paths_per_user: 5,
            aod_spread: 0.05,
            gain_profile: GainProfile::Los,
            rho: 1.0,
            frequency_ghz: 60.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.users == 0 {
            return config("scenario needs at least one antenna and one user");
        }
        if self.paths_per_user == 0 {
            return config("paths_per_user must be at least 1");
        }
        if self.num_clusters == 0 || self.num_clusters > self.users {
            return config(format!(
                "num_clusters must be in 1..={}, got {}",
                self.users, self.num_clusters
            ));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return config(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.aod_spread.is_finite() && self.aod_spread >= 0.0) {
            return config(format!("aod_spread must be non-negative, got {}", self.aod_spread));
        }
        Ok(())
    }
}

/// Array response toward `phi`, optionally with per-antenna phase mismatch.
pub fn array_response(
    geom: &ArrayGeometry,
    phi: f64,
    imp: Option<&ImpairmentProfile>,
) -> Result<Vec<Complex64>> {
    if let Some(imp) = imp {
        check_len(geom.num_antennas(), imp.deviations.len())?;
    }
    let cos_phi = phi.cos();
    Ok(geom
        .positions
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let dev = imp.map_or(0.0, |p| p.deviations[m]);
            Complex64::from_polar(1.0, geom.wavenumber * d * cos_phi + dev)
        })
        .collect())
}

/// `h = Σ_l α_l a(φ_l)`.
pub fn channel_from_paths(
    geom: &ArrayGeometry,
    paths: &[PathComponent],
    imp: Option<&ImpairmentProfile>,
) -> Result<Vec<Complex64>> {
    let mut h = vec![Complex64::new(0.0, 0.0); geom.num_antennas()];
    for path in paths {
        for (acc, a) in h.iter_mut().zip(array_response(geom, path.aod, imp)?) {
            *acc += path.gain * a;
        }
    }
    Ok(h)
}

/// Keeps generated angles strictly inside the ULA half-space.
fn fold_aod(phi: f64) -> f64 {
    const EDGE: f64 = 1e-3;
    let mut x = phi.rem_euclid(2.0 * PI);
    if x > PI {
        x = 2.0 * PI - x;
    }
    x.clamp(EDGE, PI - EDGE)
}

/// Per-user path lists. Each cluster owns `L` scatterer directions; the
/// cluster centre is the first. Users jitter every direction by up to
/// `±aod_spread`.
pub fn synth_paths(cfg: &ScenarioConfig) -> Result<Vec<Vec<PathComponent>>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Channels, 0);
    let l = cfg.paths_per_user;
    let directions: Vec<Vec<f64>> = (0..cfg.num_clusters)
        .map(|_| (0..l).map(|_| rng.random_range(f64::EPSILON..PI)).collect())
        .collect();
    let amplitudes: Vec<f64> = match cfg.gain_profile {
        GainProfile::Nlos => vec![(1.0 / l as f64).sqrt(); l],
        GainProfile::Los if l == 1 => vec![1.0],
        GainProfile::Los => {
            let rest = (0.1 / (l - 1) as f64).sqrt();
            std::iter::once(1.0).chain(std::iter::repeat_n(rest, l - 1)).collect()
        }
    };
    let mut out = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let dirs = &directions[u % cfg.num_clusters];
        let paths = dirs
            .iter()
            .zip(&amplitudes)
            .map(|(&centre, &amp)| {
                let jitter = if cfg.aod_spread > 0.0 {
                    rng.random_range(-cfg.aod_spread..=cfg.aod_spread)
                } else {
                    0.0
                };
                // phases uniform in (−π, π]
                let phase = PI - rng.random::<f64>() * 2.0 * PI;
                PathComponent { gain: Complex64::from_polar(amp, phase), aod: fold_aod(centre + jitter) }
            })
            .collect();
        out.push(paths);
    }
    Ok(out)
}

/// Generates an unnormalized channel set (Δ = 1). User `u` belongs to
/// cluster `u mod num_clusters`.
pub fn synth_channels(cfg: &ScenarioConfig, geom: &ArrayGeometry) -> Result<ChannelSet> {
    synth_channels_impaired(cfg, geom, None)
}

/// Same draws as [`synth_channels`], with the impaired array response.
pub fn synth_channels_impaired(
    cfg: &ScenarioConfig,
    geom: &ArrayGeometry,
    imp: Option<&ImpairmentProfile>,
) -> Result<ChannelSet> {
    check_len(cfg.antennas, geom.num_antennas())?;
    let paths = synth_paths(cfg)?;
    let mut entries = Vec::with_capacity(cfg.users * cfg.antennas);
    for user_paths in &paths {
        entries.extend(channel_from_paths(geom, user_paths, imp)?);
    }
    Ok(ChannelSet::new(cfg.users, cfg.antennas, entries)?
        .with_metadata(cfg.frequency_ghz, cfg.gain_profile.label()))
}

/// Divides every entry by the global peak magnitude Δ and records Δ.
pub fn normalize(cs: &ChannelSet) -> Result<ChannelSet> {
    let delta = cs.max_magnitude();
    if !(delta > 0.0) {
        return Err(ForgeError::Degenerate("all channel entries are zero".into()));
    }
    let mut out = cs.clone();
    // a peak within rounding of 1 is already normalized
    let delta = if (delta - 1.0).abs() <= 4.0 * f64::EPSILON { 1.0 } else { delta };
    if delta != 1.0 {
        out.entries.iter_mut().for_each(|h| *h /= delta);
    }
    out.delta = delta;
    Ok(out)
}

/// Rotates antenna `m` of every user by `e^{jΔθ_m}`.
pub fn impair_channels(cs: &ChannelSet, imp: &ImpairmentProfile) -> Result<ChannelSet> {
    check_len(cs.antennas, imp.deviations.len())?;
    let mut out = cs.clone();
    if imp.deviations.iter().all(|&d| d == 0.0) {
        return Ok(out);
    }
    let rot: Vec<Complex64> = imp.deviations.iter().map(|&d| Complex64::from_polar(1.0, d)).collect();
    for row in out.entries.chunks_exact_mut(cs.antennas) {
        row.iter_mut().zip(&rot).for_each(|(h, r)| *h *= r);
    }
    Ok(out)
}

pub fn write_channels<W: Write>(cs: &ChannelSet, mut w: W) -> Result<()> {
    let label = cs.label.as_bytes();
    let label_len = u16::try_from(label.len())
        .map_err(|_| ForgeError::Config("channel label longer than 65535 bytes".into()))?;
    let mut buf = Vec::with_capacity(36 + label.len() + 16 * cs.entries.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cs.users as u32).to_le_bytes());
    buf.extend_from_slice(&(cs.antennas as u32).to_le_bytes());
    buf.extend_from_slice(&cs.frequency_ghz.to_le_bytes());
    buf.extend_from_slice(&cs.delta.to_le_bytes());
    buf.extend_from_slice(&label_len.to_le_bytes());
    buf.extend_from_slice(label);
    for h in &cs.entries {
        buf.extend_from_slice(&h.re.to_le_bytes());
        buf.extend_from_slice(&h.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ForgeError::Format {
                offset: self.pos as u64,
                message: format!("truncated file while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(ForgeError::Format { offset: offset as u64, message: message.into() })
    }
}

pub fn read_channels<R: Read>(mut r: R) -> Result<ChannelSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_channels(&bytes)
}

pub fn decode_channels(bytes: &[u8]) -> Result<ChannelSet> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return c.err(0, "bad magic, expected \"CHNL\"");
    }
    let version = u16::from_le_bytes(c.array("version")?);
    if version != VERSION {
        return c.err(4, format!("unsupported version {version}"));
    }
    let users = u32::from_le_bytes(c.array("user count")?) as u64;
    if users == 0 {
        return c.err(6, "user count must be at least 1");
    }
    let antennas = u32::from_le_bytes(c.array("antenna count")?) as u64;
    if antennas == 0 {
        return c.err(10, "antenna count must be at least 1");
    }
    if users * antennas > MAX_ENTRIES {
        return c.err(6, format!("dimension overflow: {users}×{antennas} entries"));
    }
    let frequency_ghz = f64::from_le_bytes(c.array("frequency")?);
    let delta_at = c.pos;
    let delta = f64::from_le_bytes(c.array("delta")?);
    if !(delta.is_finite() && delta > 0.0) {
        return c.err(delta_at, format!("normalization scale must be positive, got {delta}"));
    }
    let label_len = u16::from_le_bytes(c.array("label length")?) as usize;
    let label_at = c.pos;
    let label = std::str::from_utf8(c.take(label_len, "label")?)
        .map_err(|_| ForgeError::Format { offset: label_at as u64, message: "label is not UTF-8".into() })?
        .to_owned();
    let count = (users * antennas) as usize;
    let body_at = c.pos;
    let body = c.take(count * 16, "channel entries")?;
    if c.pos != bytes.len() {
        return c.err(c.pos, format!("{} trailing bytes", bytes.len() - c.pos));
    }
    let entries: Vec<Complex64> = body
        .chunks_exact(16)
        .map(|b| {
            Complex64::new(
                f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(b[8..].try_into().expect("8 bytes")),
            )
        })
        .collect();
    if let Some(i) = entries.iter().position(|h| !(h.re.is_finite() && h.im.is_finite())) {
        return c.err(body_at + 16 * i, "non-finite channel entry");
    }
    let mut cs = ChannelSet::new(users as usize, antennas as usize, entries)?;
    cs.delta = delta;
    cs.frequency_ghz = frequency_ghz;
    cs.label = label;
    Ok(cs)
}

pub fn save_channels(cs: &ChannelSet, path: impl AsRef<Path>) -> Result<()> {
    write_channels(cs, std::fs::File::create(path)?)
}

pub fn load_channels(path: impl AsRef<Path>) -> Result<ChannelSet> {
    decode_channels(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::{egc_bound, gain};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_element() -> ArrayGeometry {
        ArrayGeometry::half_wavelength(2, 28.0).unwrap()
    }

    fn random_set(users: usize, antennas: usize, seed: u64) -> ChannelSet {
        let mut r = stream(seed, Stream::Channels, 42);
        let entries = (0..users * antennas).map(|_| c(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0))).collect();
        ChannelSet::new(users, antennas, entries).unwrap()
    }

    #[test]
    fn array_response_examples() {
        let one = ArrayGeometry::half_wavelength(1, 60.0).unwrap();
        assert_eq!(array_response(&one, 1.234, None).unwrap(), vec![c(1.0, 0.0)]);
        let g = two_element();
        let a = array_response(&g, PI / 2.0, None).unwrap();
        assert_abs_diff_eq!(a[0].re, 1.0);
        assert_abs_diff_eq!(a[1].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1].im, 0.0, epsilon = 1e-15);
        let a = array_response(&g, 1e-9, None).unwrap();
        assert_abs_diff_eq!(a[1].re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1].im, 0.0, epsilon = 1e-8);
        let zero = ImpairmentProfile::draw(0.0, 2, 9).unwrap();
        assert_eq!(array_response(&g, 0.7, Some(&zero)).unwrap(), array_response(&g, 0.7, None).unwrap());
        let wrong = ImpairmentProfile::draw(0.1, 3, 9).unwrap();
        assert!(array_response(&g, 0.7, Some(&wrong)).is_err());
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new(1.0, vec![]).is_err());
        assert!(ArrayGeometry::new(1.0, vec![0.0, 0.0]).is_err());
        assert!(ArrayGeometry::new(1.0, vec![0.0, 0.5, 0.4]).is_err());
        let g = ArrayGeometry::half_wavelength(4, 60.0).unwrap();
        assert_abs_diff_eq!(g.positions()[3], 1.5 * g.wavelength(), epsilon = 1e-18);
    }

    #[test]
    fn path_sum_examples() {
        let g = two_element();
        let p = |gain| PathComponent { gain, aod: PI / 2.0 };
        let h = channel_from_paths(&g, &[p(c(1.0, 0.0))], None).unwrap();
        assert_abs_diff_eq!((h[0] - c(1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((h[1] - c(1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        let h2 = channel_from_paths(&g, &[p(c(1.0, 0.0)), p(c(1.0, 0.0))], None).unwrap();
        for (a, b) in h2.iter().zip(&h) {
            assert_abs_diff_eq!((a - 2.0 * b).norm(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_shaped() {
        let cfg = ScenarioConfig { antennas: 6, users: 20, seed: 11, ..Default::default() };
        let g = ArrayGeometry::half_wavelength(6, 60.0).unwrap();
        let a = synth_channels(&cfg, &g).unwrap();
        assert_eq!(a, synth_channels(&cfg, &g).unwrap());
        assert_ne!(a, synth_channels(&ScenarioConfig { seed: 12, ..cfg.clone() }, &g).unwrap());
        assert_eq!((a.users(), a.antennas(), a.delta()), (20, 6, 1.0));
        assert_eq!(a.label, "LoS");
    }

    #[test]
    fn path_presets() {
        for (profile, l) in [(GainProfile::Los, 5), (GainProfile::Nlos, 4), (GainProfile::Los, 1)] {
            let cfg = ScenarioConfig { users: 12, paths_per_user: l, gain_profile: profile, aod_spread: 0.2, ..Default::default() };
            for paths in synth_paths(&cfg).unwrap() {
                assert_eq!(paths.len(), l);
                let powers: Vec<f64> = paths.iter().map(|p| p.gain.norm_sqr()).collect();
                match profile {
                    GainProfile::Los => assert!(powers[0] >= 10.0 * powers[1..].iter().sum::<f64>() - 1e-12),
                    GainProfile::Nlos => powers.iter().for_each(|&p| assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12)),
                }
                assert!(paths.iter().all(|p| p.aod > 0.0 && p.aod < PI));
            }
        }
    }

    #[test]
    fn users_share_their_cluster_directions() {
        let cfg = ScenarioConfig { users: 9, num_clusters: 3, paths_per_user: 2, aod_spread: 0.0, ..Default::default() };
        let paths = synth_paths(&cfg).unwrap();
        for u in 3..9 {
            assert_eq!(paths[u][0].aod, paths[u % 3][0].aod);
            assert_eq!(paths[u][1].aod, paths[u % 3][1].aod);
        }
    }

    #[test]
    fn scenario_validation() {
        let ok = ScenarioConfig::default();
        ok.validate().unwrap();
        assert!(ScenarioConfig { paths_per_user: 0, ..ok.clone() }.validate().is_err());
        assert!(ScenarioConfig { num_clusters: 301, ..ok.clone() }.validate().is_err());
        assert!(ScenarioConfig { rho: 0.0, ..ok.clone() }.validate().is_err());
    }

    #[test]
    fn normalize_examples() {
        let cs = ChannelSet::new(1, 2, vec![c(2.0, 0.0), c(0.0, 0.0)]).unwrap();
        let n = normalize(&cs).unwrap();
        assert_eq!(n.entries(), &[c(1.0, 0.0), c(0.0, 0.0)]);
        assert_eq!(n.delta(), 2.0);
        let again = normalize(&n).unwrap();
        assert_eq!(again.entries(), n.entries());
        assert_eq!(again.delta(), 1.0);
        let zeros = ChannelSet::new(2, 2, vec![c(0.0, 0.0); 4]).unwrap();
        assert!(matches!(normalize(&zeros), Err(ForgeError::Degenerate(_))));
    }

    #[test]
    fn normalized_gain_scales_by_delta_squared() {
        let cs = random_set(4, 4, 3);
        let n = normalize(&cs).unwrap();
        let w: Vec<Complex64> = (0..4).map(|m| Complex64::from_polar(0.5, m as f64)).collect();
        for u in 0..4 {
            let raw = gain(&w, cs.user(u)).unwrap();
            let norm = gain(&w, n.user(u)).unwrap();
            assert_abs_diff_eq!(norm, raw / (n.delta() * n.delta()), epsilon = 1e-12 * raw.max(1.0));
        }
    }

    #[test]
    fn impairment_examples() {
        let cs = random_set(3, 3, 0);
        let none = ImpairmentProfile::draw(0.0, 3, 5).unwrap();
        assert!(none.deviations().iter().all(|&d| d == 0.0));
        assert_eq!(impair_channels(&cs, &none).unwrap(), cs);
        let flip = ImpairmentProfile::from_deviations(1.0, vec![PI, 0.0, 0.0]);
        let out = impair_channels(&cs, &flip).unwrap();
        for u in 0..3 {
            assert_abs_diff_eq!((out.user(u)[0] + cs.user(u)[0]).norm(), 0.0, epsilon = 1e-12);
            assert_eq!(out.user(u)[1..], cs.user(u)[1..]);
        }
        let p = ImpairmentProfile::draw(0.3, 3, 5).unwrap();
        assert_eq!(p, ImpairmentProfile::draw(0.3, 3, 5).unwrap());
        let out = impair_channels(&cs, &p).unwrap();
        for u in 0..3 {
            assert_abs_diff_eq!(egc_bound(out.user(u)), egc_bound(cs.user(u)), epsilon = 1e-12);
        }
        assert!(impair_channels(&cs, &ImpairmentProfile::draw(0.3, 2, 5).unwrap()).is_err());
        assert!(ImpairmentProfile::draw(-0.1, 3, 0).is_err());
    }

    #[test]
    fn select_keeps_metadata() {
        let cs = normalize(&random_set(5, 2, 1)).unwrap().with_metadata(3.5, "x");
        let s = cs.select(&[4, 1]).unwrap();
        assert_eq!(s.user(0), cs.user(4));
        assert_eq!(s.user(1), cs.user(1));
        assert_eq!((s.delta(), s.frequency_ghz, s.label.as_str()), (cs.delta(), 3.5, "x"));
        assert!(cs.select(&[5]).is_err());
    }

    fn encoded(cs: &ChannelSet) -> Vec<u8> {
        let mut b = Vec::new();
        write_channels(cs, &mut b).unwrap();
        b
    }

    fn format_offset(bytes: &[u8]) -> u64 {
        match decode_channels(bytes) {
            Err(ForgeError::Format { offset, .. }) => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let cs = normalize(&random_set(8, 4, 7)).unwrap().with_metadata(60.0, "NLoS");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.chnl");
        save_channels(&cs, &path).unwrap();
        let back = load_channels(&path).unwrap();
        assert_eq!(back, cs);
        assert_eq!(encoded(&back), encoded(&cs));
        assert!(matches!(load_channels(dir.path().join("missing")), Err(ForgeError::Io(_))));
    }

    #[test]
    fn malformed_files_report_offsets() {
        let cs = random_set(2, 3, 0).with_metadata(1.0, "ab");
        let good = encoded(&cs);
        let body = 4 + 2 + 4 + 4 + 8 + 8 + 2 + 2;

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(format_offset(&bad), 0);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(format_offset(&bad), 4);
        let mut bad = good.clone();
        bad[6..10].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(format_offset(&bad), 6);
        let mut bad = good.clone();
        bad[10..14].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(format_offset(&bad), 10);
        let mut bad = good.clone();
        bad[6..14].copy_from_slice(&[0xff; 8]);
        assert_eq!(format_offset(&bad), 6);
        let mut bad = good.clone();
        bad[22..30].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert_eq!(format_offset(&bad), 22);
        // truncated anywhere: error, never a partial set
        for cut in [0, 3, 13, body, good.len() - 1] {
            assert!(matches!(decode_channels(&good[..cut]), Err(ForgeError::Format { .. })), "cut {cut}");
        }
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(format_offset(&bad), good.len() as u64);
        let mut bad = good.clone();
        bad[body + 16..body + 24].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(format_offset(&bad), (body + 16) as u64);
    }

    #[test]
    fn channel_set_rejects_bad_shapes() {
        assert!(ChannelSet::new(0, 2, vec![]).is_err());
        assert!(ChannelSet::new(2, 0, vec![]).is_err());
        assert!(ChannelSet::new(2, 2, vec![c(0.0, 0.0); 3]).is_err());
        assert!(ChannelSet::new(1, 1, vec![c(f64::INFINITY, 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn array_response_has_unit_modulus(m in 1usize..16, phi in 1e-3..(PI - 1e-3), sigma in 0.0..1.0f64, seed: u64) {
            let g = ArrayGeometry::half_wavelength(m, 60.0).unwrap();
            let imp = ImpairmentProfile::draw(sigma, m, seed).unwrap();
            for a in array_response(&g, phi, Some(&imp)).unwrap() {
                prop_assert!((a.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn impairment_factors_out_of_the_path_sum(seed: u64, sigma in 0.0..0.5f64, m in 1usize..10, l in 1usize..6) {
            let cfg = ScenarioConfig { antennas: m, users: 6, num_clusters: 2, paths_per_user: l, seed, ..Default::default() };
            let g = ArrayGeometry::half_wavelength(m, 60.0).unwrap();
            let imp = ImpairmentProfile::draw(sigma, m, seed ^ 1).unwrap();
            let direct = synth_channels_impaired(&cfg, &g, Some(&imp)).unwrap();
            let rotated = impair_channels(&synth_channels(&cfg, &g).unwrap(), &imp).unwrap();
            for (a, b) in direct.entries().iter().zip(rotated.entries()) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(u in 1usize..6, m in 1usize..6, seed: u64) {
            let once = normalize(&random_set(u, m, seed)).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert_eq!(twice.entries(), once.entries());
            prop_assert!((once.max_magnitude() - 1.0).abs() < 1e-15);
            prop_assert_eq!(twice.delta(), 1.0);
        }

        #[test]
        fn binary_round_trip(u in 1usize..10, m in 1usize..10, seed: u64, label in "[a-zA-Z ]{0,12}") {
            let cs = normalize(&random_set(u, m, seed)).unwrap().with_metadata(28.0, label);
            let back = decode_channels(&encoded(&cs)).unwrap();
            prop_assert_eq!(encoded(&back), encoded(&cs));
            prop_assert_eq!(back, cs);
        }
    }
}

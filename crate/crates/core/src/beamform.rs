//! Quantized constant-modulus beams, beamforming gain and its bounds.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{check_len, config, ForgeError, Result};

/// Wraps an angle into `(−π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid maps the −π boundary to −π; move it to +π.
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Circular distance `|wrap(a − b)|`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    wrap_phase(a - b).abs()
}

/// The `2^r` uniformly spaced phase levels in `(−π, π]`, ascending.
/// Level `i` is `−π + (i + 1)·2π/2^r`, so the last level is exactly `π`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSet {
    bits: u32,
}

impl PhaseSet {
    pub fn new(bits: u32) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return config(format!("phase resolution must be 1..=16 bits, got {bits}"));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        1 << self.bits
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.len() as f64
    }

    pub fn level(&self, index: usize) -> f64 {
        if index + 1 == self.len() {
            PI
        } else {
            -PI + (index + 1) as f64 * self.spacing()
        }
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.level(i)).collect()
    }

    /// Index of the level equal to zero phase.
    pub fn zero_index(&self) -> usize {
        self.len() / 2 - 1
    }

    /// Nearest level under circular distance; exact ties go to the lower index.
    pub fn nearest(&self, phase: f64) -> usize {
        let n = self.len();
        let x = wrap_phase(phase);
        // fractional position relative to level 0
        let t = (x + PI) / self.spacing() - 1.0;
        let lo = (t.floor() as i64).rem_euclid(n as i64) as usize;
        let hi = (lo + 1) % n;
        let d_lo = circular_distance(x, self.level(lo));
        let d_hi = circular_distance(x, self.level(hi));
        if d_lo < d_hi || (d_lo == d_hi && lo < hi) {
            lo
        } else {
            hi
        }
    }
}

/// Phase-shifter configuration: one level index per antenna.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Beam {
    pub phase_indices: Vec<usize>,
}

impl Beam {
    pub fn new(phase_indices: Vec<usize>, phase_set: &PhaseSet) -> Result<Self> {
        if let Some(&bad) = phase_indices.iter().find(|&&i| i >= phase_set.len()) {
            return config(format!("phase index {bad} out of range for {} levels", phase_set.len()));
        }
        Ok(Self { phase_indices })
    }

    /// All antennas at zero phase.
    pub fn broadside(antennas: usize, phase_set: &PhaseSet) -> Self {
        Self { phase_indices: vec![phase_set.zero_index(); antennas] }
    }

    pub fn antennas(&self) -> usize {
        self.phase_indices.len()
    }

    pub fn phases(&self, phase_set: &PhaseSet) -> Vec<f64> {
        self.phase_indices.iter().map(|&i| phase_set.level(i)).collect()
    }
}

/// `w_m = e^{jθ_m} / √M`.
pub fn weights(beam: &Beam, phase_set: &PhaseSet) -> Vec<Complex64> {
    let scale = 1.0 / (beam.antennas() as f64).sqrt();
    beam.phase_indices
        .iter()
        .map(|&i| Complex64::from_polar(scale, phase_set.level(i)))
        .collect()
}

/// Element-wise nearest-level snapping of continuous phases.
pub fn quantize_phases(phases: &[f64], phase_set: &PhaseSet) -> Beam {
    Beam { phase_indices: phases.iter().map(|&p| phase_set.nearest(p)).collect() }
}

/// `|wᴴh|²`.
pub fn gain(w: &[Complex64], h: &[Complex64]) -> Result<f64> {
    check_len(w.len(), h.len())?;
    Ok(inner(w, h).norm_sqr())
}

#[inline]
fn inner(w: &[Complex64], h: &[Complex64]) -> Complex64 {
    w.iter().zip(h).map(|(w, h)| w.conj() * h).sum()
}

/// Mean gain of `w` over a cluster of users.
pub fn cluster_gain<'a, I>(w: &[Complex64], channels: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [Complex64]>,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for h in channels {
        sum += gain(w, h)?;
        count += 1;
    }
    if count == 0 {
        return Err(ForgeError::Degenerate("cluster gain of an empty cluster".into()));
    }
    Ok(sum / count as f64)
}

/// Equal-gain-combining bound `(Σ|h_m|)² / M`.
pub fn egc_bound(h: &[Complex64]) -> f64 {
    let s: f64 = h.iter().map(|x| x.norm()).sum();
    s * s / h.len() as f64
}

pub fn snr(gain: f64, rho: f64) -> f64 {
    gain * rho
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    beams: Vec<Beam>,
    phase_set: PhaseSet,
}

impl Codebook {
    pub fn new(beams: Vec<Beam>, phase_set: PhaseSet) -> Result<Self> {
        let Some(first) = beams.first() else {
            return config("codebook needs at least one beam");
        };
        let m = first.antennas();
        if m == 0 {
            return config("beams need at least one antenna");
        }
        for b in &beams {
            check_len(m, b.antennas())?;
            if b.phase_indices.iter().any(|&i| i >= phase_set.len()) {
                return config("phase index out of range for the codebook's phase set");
            }
        }
        Ok(Self { beams, phase_set })
    }

    pub fn beams(&self) -> &[Beam] {
        &self.beams
    }

    pub fn phase_set(&self) -> &PhaseSet {
        &self.phase_set
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn antennas(&self) -> usize {
        self.beams[0].antennas()
    }

    pub fn weight_vectors(&self) -> Vec<Vec<Complex64>> {
        self.beams.iter().map(|b| weights(b, &self.phase_set)).collect()
    }

    /// Text form: `#codebook r=<r> M=<M> N=<N>` then one comma-separated
    /// index line per beam.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "#codebook r={} M={} N={}\n",
            self.phase_set.bits(),
            self.antennas(),
            self.len()
        );
        for b in &self.beams {
            for (i, idx) in b.phase_indices.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{idx}").expect("write to String");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, message: String| ForgeError::Parse { line: line + 1, message };
        let (hline, header) = lines.next().ok_or_else(|| parse_err(0, "empty codebook file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("#codebook") {
            return Err(parse_err(hline, "missing '#codebook' header".into()));
        }
        let (mut r, mut m, mut n) = (None, None, None);
        for f in fields {
            let (key, value) = f
                .split_once('=')
                .ok_or_else(|| parse_err(hline, format!("malformed header field '{f}'")))?;
            let value: usize =
                value.parse().map_err(|_| parse_err(hline, format!("bad number in '{f}'")))?;
            match key {
                "r" => r = Some(value),
                "M" => m = Some(value),
                "N" => n = Some(value),
                _ => return Err(parse_err(hline, format!("unknown header key '{key}'"))),
            }
        }
        let (Some(r), Some(m), Some(n)) = (r, m, n) else {
            return Err(parse_err(hline, "header must define r, M and N".into()));
        };
        let phase_set = PhaseSet::new(u32::try_from(r).unwrap_or(u32::MAX))
            .map_err(|e| parse_err(hline, e.to_string()))?;
        let mut beams = Vec::with_capacity(n);
        for (ln, line) in lines {
            let indices = line
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(ln, format!("bad phase index: {e}")))?;
            if indices.len() != m {
                return Err(parse_err(ln, format!("expected {m} phase indices, found {}", indices.len())));
            }
            beams.push(Beam::new(indices, &phase_set).map_err(|e| parse_err(ln, e.to_string()))?);
        }
        if beams.len() != n {
            return Err(ForgeError::Parse {
                line: 1,
                message: format!("header declares N={n} beams, file has {}", beams.len()),
            });
        }
        Self::new(beams, phase_set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Best beam for `h` and its gain; ties go to the lower beam index.
pub fn best_beam_gain(codebook: &Codebook, h: &[Complex64]) -> Result<(usize, f64)> {
    check_len(codebook.antennas(), h.len())?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, b) in codebook.beams().iter().enumerate() {
        let g = gain(&weights(b, codebook.phase_set()), h)?;
        if g > best.1 {
            best = (i, g);
        }
    }
    Ok(best)
}

/// Largest search space [`exhaustive_best`] accepts.
pub const EXHAUSTIVE_LIMIT: u64 = 1 << 20;

/// True optimum over all `2^{rM}` quantized beams, by enumeration.
pub fn exhaustive_best(phase_set: &PhaseSet, antennas: usize, h: &[Complex64]) -> Result<(Beam, f64)> {
    check_len(antennas, h.len())?;
    let total_bits = phase_set.bits() as u64 * antennas as u64;
    if antennas == 0 || total_bits > 20 {
        return config(format!(
            "exhaustive search over 2^{total_bits} beams exceeds the 2^20 limit"
        ));
    }
    let levels: Vec<Complex64> = phase_set
        .levels()
        .iter()
        .map(|&t| Complex64::from_polar(1.0 / (antennas as f64).sqrt(), t))
        .collect();
    let n = phase_set.len();
    let mut idx = vec![0usize; antennas];
    let mut best = (idx.clone(), f64::NEG_INFINITY);
    loop {
        let s: Complex64 = idx.iter().zip(h).map(|(&i, h)| levels[i].conj() * h).sum();
        let g = s.norm_sqr();
        if g > best.1 {
            best = (idx.clone(), g);
        }
        // odometer, last antenna fastest
        let mut k = antennas;
        loop {
            if k == 0 {
                return Ok((Beam { phase_indices: best.0 }, best.1));
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Quantized conjugate-phase beam for `h` (the per-element EGC phases).
pub fn matched_beam(h: &[Complex64], phase_set: &PhaseSet) -> Beam {
    let phases: Vec<f64> = h.iter().map(|x| x.arg()).collect();
    quantize_phases(&phases, phase_set)
}

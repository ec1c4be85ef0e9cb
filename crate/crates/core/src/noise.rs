//! Readout-error channel from device calibration tables, calibration-matrix
//! construction and estimation, and measurement error mitigation.

use serde::{Deserialize, Serialize};

use crate::circuit::{
    format_bitstring, sample_distribution, simulate_exact, Circuit, ExactDistribution, Gate, OutcomeDistribution,
    Sampler, ShotHistogram, StreamKey,
};
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;

const BUNDLED: [(&str, &str); 3] = [
    ("ibm_brisbane", include_str!("../data/profiles/ibm_brisbane.toml")),
    ("ibm_kyiv", include_str!("../data/profiles/ibm_kyiv.toml")),
    ("ibm_sherbrooke", include_str!("../data/profiles/ibm_sherbrooke.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QubitRecord {
    index: u32,
    t1_us: Option<f64>,
    t2_us: Option<f64>,
    frequency_ghz: Option<f64>,
    readout_error: Option<f64>,
    p10: Option<f64>,
    p01: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRecord {
    label: String,
    qubit: Vec<QubitRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QubitReadout {
    /// Device qubit number in the source table.
    pub index: u32,
    /// P(read 1 | prepared 0)
    pub p10: f64,
    /// P(read 0 | prepared 1)
    pub p01: f64,
    pub t1_us: Option<f64>,
    pub t2_us: Option<f64>,
    pub frequency_ghz: Option<f64>,
}

/// Per-qubit readout flip probabilities. Qubit `i` of a circuit uses entry `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutProfile {
    pub label: String,
    pub qubits: Vec<QubitReadout>,
}

impl ReadoutProfile {
    /// Parses a profile document. A single `readout_error` sets both flip
    /// directions; `p10`/`p01` set them separately.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let rec: ProfileRecord = toml::from_str(text).map_err(|e| Error::InvalidProfile(e.to_string()))?;
        let qubits = rec
            .qubit
            .into_iter()
            .map(|q| {
                let (p10, p01) = match (q.readout_error, q.p10, q.p01) {
                    (Some(e), None, None) => (e, e),
                    (None, Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(Error::InvalidProfile(format!(
                            "qubit {} needs either readout_error or both p10 and p01",
                            q.index
                        )))
                    }
                };
                Ok(QubitReadout { index: q.index, p10, p01, t1_us: q.t1_us, t2_us: q.t2_us, frequency_ghz: q.frequency_ghz })
            })
            .collect::<Result<Vec<_>>>()?;
        let profile = Self { label: rec.label, qubits };
        profile.validate()?;
        Ok(profile)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidProfile(format!("no bundled profile '{name}'")))?;
        Self::from_toml_str(text)
    }

    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    /// Same flip probabilities on every qubit.
    pub fn uniform(label: &str, n: usize, p10: f64, p01: f64) -> Result<Self> {
        let qubits = (0..n)
            .map(|i| QubitReadout { index: i as u32, p10, p01, t1_us: None, t2_us: None, frequency_ghz: None })
            .collect();
        let p = Self { label: label.to_string(), qubits };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.qubits.is_empty() {
            return Err(Error::InvalidProfile(format!("profile '{}' lists no qubits", self.label)));
        }
        for q in &self.qubits {
            for p in [q.p10, q.p01] {
                if !(0.0..=0.5).contains(&p) {
                    return Err(Error::InvalidProfile(format!("qubit {} flip probability {p} outside [0, 0.5]", q.index)));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.qubits.len()
    }

    /// The first `n` qubits.
    pub fn restrict(&self, n: usize) -> Result<Self> {
        if n > self.width() {
            return Err(Error::WidthMismatch { profile: self.width(), bits: n });
        }
        Ok(Self { label: self.label.clone(), qubits: self.qubits[..n].to_vec() })
    }

    pub fn to_toml_string(&self) -> String {
        let rec = ProfileRecord {
            label: self.label.clone(),
            qubit: self
                .qubits
                .iter()
                .map(|q| {
                    let symmetric = q.p10 == q.p01;
                    QubitRecord {
                        index: q.index,
                        t1_us: q.t1_us,
                        t2_us: q.t2_us,
                        frequency_ghz: q.frequency_ghz,
                        readout_error: symmetric.then_some(q.p10),
                        p10: (!symmetric).then_some(q.p10),
                        p01: (!symmetric).then_some(q.p01),
                    }
                })
                .collect(),
        };
        toml::to_string(&rec).expect("profile serializes")
    }
}

/// Column-stochastic confusion matrix: column `j` is the observed
/// distribution when basis state `j` is prepared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMatrix {
    n_bits: usize,
    /// Row-major, `entries[observed * dim + prepared]`.
    entries: Vec<f64>,
}

impl CalibrationMatrix {
    pub fn identity(n_bits: usize) -> Self {
        let dim = 1 << n_bits;
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self { n_bits, entries }
    }

    /// Builds a matrix from its columns after checking stochasticity.
    pub fn from_columns(n_bits: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let dim = 1 << n_bits;
        if columns.len() != dim || columns.iter().any(|c| c.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, actual: columns.len() });
        }
        let mut entries = vec![0.0; dim * dim];
        for (j, col) in columns.iter().enumerate() {
            let sum: f64 = col.iter().sum();
            if col.iter().any(|p| *p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidParams(format!("calibration column {j} is not a distribution")));
            }
            for (i, p) in col.iter().enumerate() {
                entries[i * dim + j] = *p;
            }
        }
        Ok(Self { n_bits, entries })
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_bits
    }

    /// `P(observed | prepared)`
    pub fn entry(&self, observed: usize, prepared: usize) -> f64 {
        self.entries[observed * self.dim() + prepared]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| (0..self.dim()).map(|i| self.entry(i, j)).sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &CalibrationMatrix) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `M · p`
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if p.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: p.len() });
        }
        Ok((0..dim).map(|i| (0..dim).map(|j| self.entry(i, j) * p[j]).sum()).collect())
    }

    /// Solves `M x = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if b.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: b.len() });
        }
        solve_dense(self.entries.clone(), b.to_vec(), dim).ok_or(Error::SingularCalibration)
    }
}

fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))?;
        if a[pivot * n + col].abs() < PIVOT_TOL {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}

/// Tensor product of the per-qubit `[[1−p10, p01], [p10, 1−p01]]` blocks,
/// qubit 0 most significant.
pub fn build_calibration_matrix(profile: &ReadoutProfile) -> CalibrationMatrix {
    let n = profile.width();
    let dim = 1 << n;
    let mut entries = vec![0.0; dim * dim];
    for obs in 0..dim {
        for prep in 0..dim {
            entries[obs * dim + prep] = profile
                .qubits
                .iter()
                .enumerate()
                .map(|(q, r)| {
                    let shift = n - 1 - q;
                    match (prep >> shift & 1, obs >> shift & 1) {
                        (0, 0) => 1.0 - r.p10,
                        (0, _) => r.p10,
                        (_, 0) => r.p01,
                        _ => 1.0 - r.p01,
                    }
                })
                .product();
        }
    }
    CalibrationMatrix { n_bits: n, entries }
}

fn check_width(profile: &ReadoutProfile, bits: usize) -> Result<()> {
    if profile.width() != bits {
        return Err(Error::WidthMismatch { profile: profile.width(), bits });
    }
    Ok(())
}

/// Observed distribution after readout flips.
pub fn noisy_distribution(exact: &ExactDistribution, profile: &ReadoutProfile) -> Result<ExactDistribution> {
    check_width(profile, exact.n_bits)?;
    Ok(ExactDistribution {
        n_bits: exact.n_bits,
        probabilities: build_calibration_matrix(profile).apply(&exact.probabilities)?,
    })
}

pub enum NoiseInput<'a> {
    /// Draw `shots` noisy samples from an exact distribution.
    Exact(&'a ExactDistribution, u64),
    /// Flip the bits of every recorded shot independently.
    Histogram(&'a ShotHistogram),
}

/// Seeded readout noise; the shot count is preserved exactly.
pub fn apply_readout_noise(input: NoiseInput<'_>, profile: &ReadoutProfile, seed: u64) -> Result<ShotHistogram> {
    match input {
        NoiseInput::Exact(dist, shots) => {
            let noisy = noisy_distribution(dist, profile)?;
            let mut context = b"readout-dist".to_vec();
            for p in &dist.probabilities {
                context.extend(p.to_le_bytes());
            }
            let key = StreamKey::new(seed, &context);
            if shots == 0 {
                return Err(Error::InvalidParams("at least one shot is required".into()));
            }
            sample_distribution(&noisy.probabilities, dist.n_bits, key, 0..shots, seed)
        }
        NoiseInput::Histogram(hist) => {
            let n = hist.n_bits();
            check_width(profile, n)?;
            let mut context = b"readout-flips".to_vec();
            for c in hist.counts() {
                context.extend(c.to_le_bytes());
            }
            let key = StreamKey::new(seed, &context);
            let mut draws = key.uniforms(0..hist.shots() * n as u64);
            let mut counts = vec![0u64; 1 << n];
            for (value, &count) in hist.counts().iter().enumerate() {
                for _ in 0..count {
                    let mut observed = value;
                    for (q, r) in profile.qubits.iter().enumerate() {
                        let bit = 1 << (n - 1 - q);
                        let flip = if value & bit == 0 { r.p10 } else { r.p01 };
                        if draws.next().expect("one draw per bit") < flip {
                            observed ^= bit;
                        }
                    }
                    counts[observed] += 1;
                }
            }
            ShotHistogram::new(n, counts, seed)
        }
    }
}

/// Sampler with readout flips and an optional global depolarizing mix
/// `(1 − λ) p + λ / 2^n` applied before readout.
#[derive(Clone, Debug)]
pub struct NoisySampler {
    pub profile: ReadoutProfile,
    pub depolarizing: f64,
}

impl NoisySampler {
    pub fn new(profile: ReadoutProfile) -> Self {
        Self { profile, depolarizing: 0.0 }
    }

    pub fn with_depolarizing(mut self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParams(format!("depolarizing strength {lambda} outside [0, 1]")));
        }
        self.depolarizing = lambda;
        Ok(self)
    }

    pub fn distribution(&self, circuit: &Circuit) -> Result<ExactDistribution> {
        let mut exact = simulate_exact(circuit)?.distribution;
        if self.depolarizing > 0.0 {
            let uniform = 1.0 / exact.probabilities.len() as f64;
            for p in &mut exact.probabilities {
                *p = (1.0 - self.depolarizing) * *p + self.depolarizing * uniform;
            }
        }
        noisy_distribution(&exact, &self.profile)
    }
}

impl Sampler for NoisySampler {
    fn sample(&self, circuit: &Circuit, shots: u64, seed: u64) -> Result<ShotHistogram> {
        if shots == 0 {
            return Err(Error::InvalidParams("at least one shot is required".into()));
        }
        let noisy = self.distribution(circuit)?;
        let mut context = b"noisy".to_vec();
        context.extend(circuit.hash());
        sample_distribution(&noisy.probabilities, circuit.n_bits(), StreamKey::new(seed, &context), 0..shots, seed)
    }
}

/// One circuit per basis state: `X` on every set bit, then measure all.
pub fn calibration_circuits(n_bits: usize) -> Result<Vec<Circuit>> {
    (0..1usize << n_bits)
        .map(|j| {
            let flips = (0..n_bits).filter(|q| j >> (n_bits - 1 - q) & 1 == 1).map(Gate::PauliX);
            let measures = (0..n_bits).map(|q| Gate::MeasureZ { qubit: q, bit: q });
            Circuit::from_gates(n_bits, n_bits, flips.chain(measures))
        })
        .collect()
}

/// Empirical calibration matrix from running every calibration circuit.
pub fn estimate_calibration_matrix(sampler: &impl Sampler, n_bits: usize, shots: u64, seed: u64) -> Result<CalibrationMatrix> {
    let columns = calibration_circuits(n_bits)?
        .iter()
        .map(|c| sampler.sample(c, shots, seed)?.probabilities())
        .collect::<Result<Vec<_>>>()?;
    CalibrationMatrix::from_columns(n_bits, &columns)
}

/// Calibration matrix from exact noisy distributions of the calibration
/// circuits (the infinite-shot limit of the estimate).
pub fn exact_calibration_matrix(sampler: &NoisySampler) -> Result<CalibrationMatrix> {
    let n = sampler.profile.width();
    let columns = calibration_circuits(n)?
        .iter()
        .map(|c| Ok(sampler.distribution(c)?.probabilities))
        .collect::<Result<Vec<_>>>()?;
    CalibrationMatrix::from_columns(n, &columns)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationMethod {
    /// Nonnegative least squares, renormalized.
    Nnls,
    /// Direct inverse, negatives clipped, renormalized.
    InverseClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiDistribution {
    pub n_bits: usize,
    /// `M⁻¹ · observed`, possibly with negative entries.
    pub raw: Vec<f64>,
    /// Normalized nonnegative estimate.
    pub clipped: Vec<f64>,
    pub method: MitigationMethod,
    /// Shots behind the observed histogram, for error bars.
    pub shots: u64,
}

impl QuasiDistribution {
    pub fn format_entries(&self) -> Vec<(String, f64)> {
        self.clipped.iter().enumerate().map(|(i, p)| (format_bitstring(i, self.n_bits), *p)).collect()
    }
}

impl OutcomeDistribution for QuasiDistribution {
    fn n_bits(&self) -> usize {
        self.n_bits
    }

    fn probabilities(&self) -> Result<Vec<f64>> {
        Ok(self.clipped.clone())
    }

    fn shots(&self) -> Option<u64> {
        Some(self.shots)
    }
}

fn normalize_nonnegative(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum > 0.0 {
        clipped.iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Inverts the readout channel on an observed histogram.
pub fn mitigate(hist: &ShotHistogram, m: &CalibrationMatrix, method: MitigationMethod) -> Result<QuasiDistribution> {
    if hist.n_bits() != m.n_bits() {
        return Err(Error::WidthMismatch { profile: m.n_bits(), bits: hist.n_bits() });
    }
    let observed = hist.probabilities()?;
    let raw = m.solve(&observed)?;
    let clipped = match method {
        MitigationMethod::InverseClip => normalize_nonnegative(&raw),
        MitigationMethod::Nnls => normalize_nonnegative(&nnls(m, &observed)),
    };
    Ok(QuasiDistribution { n_bits: hist.n_bits(), raw, clipped, method, shots: hist.shots() })
}

/// Lawson–Hanson active-set solver for `min ‖M x − b‖` subject to `x ≥ 0`.
fn nnls(m: &CalibrationMatrix, b: &[f64]) -> Vec<f64> {
    let n = m.dim();
    let col = |j: usize| -> Vec<f64> { (0..n).map(|i| m.entry(i, j)).collect() };
    let cols: Vec<Vec<f64>> = (0..n).map(col).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let residual = |x: &[f64]| -> Vec<f64> {
        let mx = m.apply(x).expect("dimension checked");
        b.iter().zip(mx).map(|(bi, mi)| bi - mi).collect()
    };
    // Least squares restricted to the passive set via normal equations.
    let solve_passive = |passive: &[usize]| -> Option<Vec<f64>> {
        let k = passive.len();
        let mut ata = vec![0.0; k * k];
        let mut atb = vec![0.0; k];
        for (a, &i) in passive.iter().enumerate() {
            atb[a] = dot(&cols[i], b);
            for (c, &j) in passive.iter().enumerate() {
                ata[a * k + c] = dot(&cols[i], &cols[j]);
            }
        }
        let z = solve_dense(ata, atb, k)?;
        let mut full = vec![0.0; n];
        for (a, &i) in passive.iter().enumerate() {
            full[i] = z[a];
        }
        Some(full)
    };

    let tol = 1e-12;
    let mut x = vec![0.0; n];
    let mut passive: Vec<usize> = Vec::new();
    for _ in 0..3 * n {
        let r = residual(&x);
        let w: Vec<f64> = cols.iter().map(|c| dot(c, &r)).collect();
        let candidate = (0..n)
            .filter(|j| !passive.contains(j))
            .max_by(|&a, &b| w[a].total_cmp(&w[b]))
            .filter(|&j| w[j] > tol);
        let Some(j) = candidate else { break };
        passive.push(j);
        loop {
            let Some(z) = solve_passive(&passive) else {
                passive.pop();
                return x;
            };
            if passive.iter().all(|&i| z[i] > 0.0) {
                x = z;
                break;
            }
            let alpha = passive
                .iter()
                .filter(|&&i| z[i] <= 0.0)
                .map(|&i| x[i] / (x[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += alpha * (zi - *xi);
            }
            passive.retain(|&i| x[i] > tol);
            for (i, xi) in x.iter_mut().enumerate() {
                if !passive.contains(&i) {
                    *xi = 0.0;
                }
            }
        }
    }
    x
}

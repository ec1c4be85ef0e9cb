//! Gate-level circuits: exact branching simulation, deferred measurement,
//! ground-state preparation, seeded shot sampling and bit-string estimators.
//!
//! Classical bit 0 is the most significant character of a serialized
//! bit-string, matching qubit 0 in the state layout.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{hadamard, ry, rz, DensityMatrix, Matrix, Pauli, StateVector, C64};
use crate::model::ModelInstance;
use crate::protocol::{ProtocolVariant, Rotation};

pub const MAX_QUBITS: usize = 3;
const UNITARY_TOL: f64 = 1e-10;
const PREP_FIDELITY_TOL: f64 = 1e-9;
/// The bare template is kept only when it reproduces the target to rounding.
const TEMPLATE_EXACT_TOL: f64 = 1e-14;

pub type Unitary2 = [C64; 4];

fn to_unitary2(m: &Matrix) -> Unitary2 {
    [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    PauliX(usize),
    Hadamard(usize),
    RotY { target: usize, angle: f64 },
    RotZ { target: usize, angle: f64 },
    Cnot { control: usize, target: usize },
    /// Row-major 2×2 unitary applied to `target` when `control` is 1.
    ControlledU { control: usize, target: usize, unitary: Unitary2 },
    MeasureZ { qubit: usize, bit: usize },
    ClassicallyControlled { bit: usize, gate: Box<Gate> },
}

impl Gate {
    pub fn targets(&self) -> Vec<usize> {
        match self {
            Gate::PauliX(t) | Gate::Hadamard(t) => vec![*t],
            Gate::RotY { target, .. }
            | Gate::RotZ { target, .. }
            | Gate::Cnot { target, .. }
            | Gate::ControlledU { target, .. } => vec![*target],
            Gate::MeasureZ { qubit, .. } => vec![*qubit],
            Gate::ClassicallyControlled { gate, .. } => gate.targets(),
        }
    }

    pub fn controls(&self) -> Vec<usize> {
        match self {
            Gate::Cnot { control, .. } | Gate::ControlledU { control, .. } => vec![*control],
            Gate::ClassicallyControlled { gate, .. } => gate.controls(),
            _ => Vec::new(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Gate::PauliX(_) => "X",
            Gate::Hadamard(_) => "H",
            Gate::RotY { .. } => "RY",
            Gate::RotZ { .. } => "RZ",
            Gate::Cnot { .. } => "CNOT",
            Gate::ControlledU { .. } => "CU",
            Gate::MeasureZ { .. } => "MEASURE",
            Gate::ClassicallyControlled { .. } => "IF",
        }
    }

    /// The 2×2 unitary a (possibly controlled) gate applies to its target.
    pub fn target_unitary(&self) -> Option<Unitary2> {
        match self {
            Gate::PauliX(_) | Gate::Cnot { .. } => Some(to_unitary2(&Pauli::X.matrix())),
            Gate::Hadamard(_) => Some(to_unitary2(&hadamard())),
            Gate::RotY { angle, .. } => Some(to_unitary2(&ry(*angle))),
            Gate::RotZ { angle, .. } => Some(to_unitary2(&rz(*angle))),
            Gate::ControlledU { unitary, .. } => Some(*unitary),
            _ => None,
        }
    }

    fn is_unitary_gate(&self) -> bool {
        !matches!(self, Gate::MeasureZ { .. } | Gate::ClassicallyControlled { .. })
    }

    fn write_text(&self, out: &mut String) {
        let list = |v: Vec<usize>| {
            if v.is_empty() {
                "-".to_string()
            } else {
                v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            }
        };
        if let Gate::ClassicallyControlled { bit, gate } = self {
            out.push_str(&format!("IF c{bit} "));
            gate.write_text(out);
            return;
        }
        out.push_str(&format!("{} {} {}", self.kind(), list(self.targets()), list(self.controls())));
        match self {
            Gate::RotY { angle, .. } | Gate::RotZ { angle, .. } => out.push_str(&format!(" {angle:?}")),
            Gate::ControlledU { unitary, .. } => {
                for z in unitary {
                    out.push_str(&format!(" {:?} {:?}", z.re, z.im));
                }
            }
            Gate::MeasureZ { bit, .. } => out.push_str(&format!(" c{bit}")),
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    n_qubits: usize,
    n_bits: usize,
    gates: Vec<Gate>,
    written: BTreeSet<usize>,
}

impl Circuit {
    pub fn new(n_qubits: usize, n_bits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > MAX_QUBITS {
            return Err(Error::MalformedCircuit(format!("{n_qubits} qubits, supported range is 1..={MAX_QUBITS}")));
        }
        Ok(Self { n_qubits, n_bits, gates: Vec::new(), written: BTreeSet::new() })
    }

    pub fn from_gates(n_qubits: usize, n_bits: usize, gates: impl IntoIterator<Item = Gate>) -> Result<Self> {
        let mut c = Self::new(n_qubits, n_bits)?;
        for g in gates {
            c.push(g)?;
        }
        Ok(c)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    /// Appends a gate after checking indices, angles, unitarity and that any
    /// classical condition reads a bit already written.
    pub fn push(&mut self, gate: Gate) -> Result<&mut Self> {
        self.validate(&gate, false)?;
        if let Gate::MeasureZ { bit, .. } = gate {
            self.written.insert(bit);
        }
        self.gates.push(gate);
        Ok(self)
    }

    pub fn extend(&mut self, gates: impl IntoIterator<Item = Gate>) -> Result<&mut Self> {
        for g in gates {
            self.push(g)?;
        }
        Ok(self)
    }

    fn validate(&self, gate: &Gate, nested: bool) -> Result<()> {
        let n = self.n_qubits;
        let bad = |msg: String| Err(Error::MalformedCircuit(msg));
        for q in gate.targets().into_iter().chain(gate.controls()) {
            if q >= n {
                return bad(format!("{} acts on qubit {q} of {n}", gate.kind()));
            }
        }
        match gate {
            Gate::Cnot { control, target } | Gate::ControlledU { control, target, .. } if control == target => {
                bad(format!("{} control and target coincide on qubit {target}", gate.kind()))
            }
            Gate::RotY { angle, .. } | Gate::RotZ { angle, .. } if !angle.is_finite() => Err(Error::InvalidAngle),
            Gate::ControlledU { unitary, .. } => {
                let m = Matrix::from_row_major(unitary.to_vec())?;
                if m.unitarity_defect() > UNITARY_TOL {
                    return bad("controlled gate is not unitary".into());
                }
                Ok(())
            }
            Gate::MeasureZ { bit, .. } => {
                if nested {
                    return bad("measurement cannot be classically controlled".into());
                }
                if *bit >= self.n_bits {
                    return bad(format!("classical bit c{bit} of {}", self.n_bits));
                }
                Ok(())
            }
            Gate::ClassicallyControlled { bit, gate } => {
                if nested {
                    return bad("nested classical control".into());
                }
                if *bit >= self.n_bits {
                    return bad(format!("classical bit c{bit} of {}", self.n_bits));
                }
                if !self.written.contains(bit) {
                    return bad(format!("classical bit c{bit} read before it is written"));
                }
                self.validate(gate, true)
            }
            _ => Ok(()),
        }
    }

    /// Line-based text form, one gate per line as `KIND targets controls params`.
    pub fn to_text(&self) -> String {
        let mut out = format!("qubits {} bits {}\n", self.n_qubits, self.n_bits);
        for g in &self.gates {
            g.write_text(&mut out);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, header) = lines.next().ok_or(Error::Parse { line: 0, message: "empty circuit text".into() })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        if h.len() != 4 || h[0] != "qubits" || h[2] != "bits" {
            return Err(parse_err(line, format!("expected 'qubits N bits M', got '{header}'")));
        }
        let n_qubits = h[1].parse().map_err(|e| parse_err(line, format!("{e}")))?;
        let n_bits = h[3].parse().map_err(|e| parse_err(line, format!("{e}")))?;
        let mut c = Self::new(n_qubits, n_bits)?;
        for (line, text) in lines {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            let gate = parse_gate(&tokens).map_err(|m| parse_err(line, m))?;
            c.push(gate)?;
        }
        Ok(c)
    }

    /// SHA-256 of the text form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Number of gates touching each qubit line (measurements included).
    pub fn gates_per_qubit(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_qubits];
        for g in &self.gates {
            for q in g.targets().into_iter().chain(g.controls()) {
                counts[q] += 1;
            }
        }
        counts
    }

    pub fn has_classical_control(&self) -> bool {
        self.gates.iter().any(|g| matches!(g, Gate::ClassicallyControlled { .. }))
    }
}

impl fmt::Display for Circuit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_gate(tokens: &[&str]) -> std::result::Result<Gate, String> {
    let bit = |s: &str| -> std::result::Result<usize, String> {
        s.strip_prefix('c').ok_or(format!("expected classical bit 'cN', got '{s}'"))?.parse().map_err(|e| format!("{e}"))
    };
    if tokens.first() == Some(&"IF") {
        if tokens.len() < 3 {
            return Err("IF needs a bit and a gate".into());
        }
        let inner = parse_gate(&tokens[2..])?;
        return Ok(Gate::ClassicallyControlled { bit: bit(tokens[1])?, gate: Box::new(inner) });
    }
    if tokens.len() < 3 {
        return Err(format!("expected 'KIND targets controls', got '{}'", tokens.join(" ")));
    }
    let list = |s: &str| -> std::result::Result<Vec<usize>, String> {
        if s == "-" {
            return Ok(Vec::new());
        }
        s.split(',').map(|x| x.parse().map_err(|e| format!("bad site '{x}': {e}"))).collect()
    };
    let (targets, controls, params) = (list(tokens[1])?, list(tokens[2])?, &tokens[3..]);
    let float = |s: &str| -> std::result::Result<f64, String> { s.parse().map_err(|e| format!("bad number '{s}': {e}")) };
    let one = |v: &[usize], what: &str| -> std::result::Result<usize, String> {
        match v {
            [x] => Ok(*x),
            _ => Err(format!("expected exactly one {what}")),
        }
    };
    let arity = |want: usize| -> std::result::Result<(), String> {
        if params.len() == want {
            Ok(())
        } else {
            Err(format!("{} takes {want} parameters, got {}", tokens[0], params.len()))
        }
    };
    let no_controls = || if controls.is_empty() { Ok(()) } else { Err(format!("{} takes no controls", tokens[0])) };
    match tokens[0] {
        "X" => {
            arity(0)?;
            no_controls()?;
            Ok(Gate::PauliX(one(&targets, "target")?))
        }
        "H" => {
            arity(0)?;
            no_controls()?;
            Ok(Gate::Hadamard(one(&targets, "target")?))
        }
        "RY" | "RZ" => {
            arity(1)?;
            no_controls()?;
            let target = one(&targets, "target")?;
            let angle = float(params[0])?;
            Ok(if tokens[0] == "RY" { Gate::RotY { target, angle } } else { Gate::RotZ { target, angle } })
        }
        "CNOT" => {
            arity(0)?;
            Ok(Gate::Cnot { control: one(&controls, "control")?, target: one(&targets, "target")? })
        }
        "CU" => {
            arity(8)?;
            let v = params.iter().map(|s| float(s)).collect::<std::result::Result<Vec<_>, _>>()?;
            let unitary = [
                C64::new(v[0], v[1]),
                C64::new(v[2], v[3]),
                C64::new(v[4], v[5]),
                C64::new(v[6], v[7]),
            ];
            Ok(Gate::ControlledU { control: one(&controls, "control")?, target: one(&targets, "target")?, unitary })
        }
        "MEASURE" => {
            arity(1)?;
            no_controls()?;
            Ok(Gate::MeasureZ { qubit: one(&targets, "target")?, bit: bit(params[0])? })
        }
        other => Err(format!("unknown gate '{other}'")),
    }
}

fn mask(n: usize, q: usize) -> usize {
    1 << (n - 1 - q)
}

fn apply_single(state: &mut [C64], n: usize, target: usize, u: &Unitary2, control: Option<usize>) {
    let t = mask(n, target);
    let c = control.map_or(0, |q| mask(n, q));
    for i in 0..state.len() {
        if i & t != 0 || i & c != c {
            continue;
        }
        let j = i | t;
        let (a, b) = (state[i], state[j]);
        state[i] = u[0] * a + u[1] * b;
        state[j] = u[2] * a + u[3] * b;
    }
}

fn apply_unitary_gate(state: &mut [C64], n: usize, gate: &Gate) {
    let u = gate.target_unitary().expect("unitary gate");
    let target = gate.targets()[0];
    let control = gate.controls().first().copied();
    apply_single(state, n, target, &u, control);
}

/// Probabilities over the classical register.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    pub n_bits: usize,
    pub probabilities: Vec<f64>,
}

impl ExactDistribution {
    pub fn probability(&self, bits: &str) -> Result<f64> {
        Ok(self.probabilities[parse_bitstring(bits, self.n_bits)?])
    }

    pub fn max_abs_diff(&self, other: &ExactDistribution) -> f64 {
        self.probabilities.iter().zip(&other.probabilities).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct ExactResult {
    pub distribution: ExactDistribution,
    /// Ensemble state after the last gate, measurements included.
    pub density: DensityMatrix,
}

struct SimBranch {
    bits: usize,
    state: Vec<C64>,
}

/// Branching simulation: every measurement splits each branch in two with
/// exact weights; classically controlled gates act per branch.
pub fn simulate_exact(circuit: &Circuit) -> Result<ExactResult> {
    let n = circuit.n_qubits;
    let nb = circuit.n_bits;
    let mut branches = vec![SimBranch { bits: 0, state: StateVector::basis(n, 0).amplitudes().to_vec() }];
    for gate in &circuit.gates {
        match gate {
            Gate::MeasureZ { qubit, bit } => {
                let m = mask(n, *qubit);
                let bmask = 1 << (nb - 1 - bit);
                let mut next = Vec::with_capacity(branches.len() * 2);
                for b in branches {
                    for outcome in [0usize, 1] {
                        let state: Vec<C64> = b
                            .state
                            .iter()
                            .enumerate()
                            .map(|(i, z)| if (i & m != 0) == (outcome == 1) { *z } else { C64::new(0.0, 0.0) })
                            .collect();
                        if state.iter().all(|z| z.norm_sqr() == 0.0) {
                            continue;
                        }
                        let bits = if outcome == 1 { b.bits | bmask } else { b.bits & !bmask };
                        next.push(SimBranch { bits, state });
                    }
                }
                branches = next;
            }
            Gate::ClassicallyControlled { bit, gate } => {
                let bmask = 1 << (nb - 1 - bit);
                for b in branches.iter_mut().filter(|b| b.bits & bmask != 0) {
                    apply_unitary_gate(&mut b.state, n, gate);
                }
            }
            g => {
                for b in &mut branches {
                    apply_unitary_gate(&mut b.state, n, g);
                }
            }
        }
    }
    let mut probabilities = vec![0.0; 1 << nb];
    let mut density = Matrix::zeros(1 << n);
    for b in &branches {
        let sv = StateVector::new(b.state.clone())?;
        probabilities[b.bits] += sv.norm().powi(2);
        density = &density + &sv.projector();
    }
    Ok(ExactResult { distribution: ExactDistribution { n_bits: nb, probabilities }, density: DensityMatrix::new(density)? })
}

/// Final state of a circuit without measurements.
pub fn final_state(circuit: &Circuit) -> Result<StateVector> {
    let n = circuit.n_qubits;
    let mut state = StateVector::basis(n, 0).amplitudes().to_vec();
    for g in &circuit.gates {
        if !g.is_unitary_gate() {
            return Err(Error::MalformedCircuit("final_state needs a measurement-free circuit".into()));
        }
        apply_unitary_gate(&mut state, n, g);
    }
    StateVector::new(state)
}

/// Moves every measurement to the end and turns each classical condition
/// into a quantum control on the qubit that produced the bit.
pub fn defer_measurements(circuit: &Circuit) -> Result<Circuit> {
    let mut source: BTreeMap<usize, usize> = BTreeMap::new();
    let mut measured: BTreeSet<usize> = BTreeSet::new();
    let mut body = Vec::new();
    let mut tail = Vec::new();
    for gate in &circuit.gates {
        match gate {
            Gate::MeasureZ { qubit, bit } => {
                if source.contains_key(bit) {
                    return Err(Error::UnsupportedTopology(format!("classical bit c{bit} written twice")));
                }
                if !measured.insert(*qubit) {
                    return Err(Error::UnsupportedTopology(format!("qubit {qubit} measured twice")));
                }
                source.insert(*bit, *qubit);
                tail.push(gate.clone());
            }
            Gate::ClassicallyControlled { bit, gate: inner } => {
                let control = *source.get(bit).ok_or_else(|| {
                    Error::MalformedCircuit(format!("classical bit c{bit} read before it is written"))
                })?;
                if !inner.controls().is_empty() {
                    return Err(Error::UnsupportedTopology("classically controlled multi-qubit gate".into()));
                }
                let target = inner.targets()[0];
                if measured.contains(&target) {
                    return Err(Error::UnsupportedTopology(format!("gate on qubit {target} after its measurement")));
                }
                let unitary = inner.target_unitary().expect("validated unitary gate");
                body.push(Gate::ControlledU { control, target, unitary });
            }
            g => {
                if let Some(q) = g.targets().into_iter().chain(g.controls()).find(|q| measured.contains(q)) {
                    return Err(Error::UnsupportedTopology(format!("gate on qubit {q} after its measurement")));
                }
                body.push(g.clone());
            }
        }
    }
    Circuit::from_gates(circuit.n_qubits, circuit.n_bits, body.into_iter().chain(tail))
}

fn parse_bitstring(bits: &str, n_bits: usize) -> Result<usize> {
    if bits.len() != n_bits || !bits.chars().all(|c| c == '0' || c == '1') {
        return Err(Error::InvalidParams(format!("'{bits}' is not a {n_bits}-bit string")));
    }
    Ok(usize::from_str_radix(bits, 2).unwrap_or(0))
}

pub fn format_bitstring(value: usize, n_bits: usize) -> String {
    (0..n_bits).map(|i| if value >> (n_bits - 1 - i) & 1 == 1 { '1' } else { '0' }).collect()
}

/// Shot counts indexed by the register value (bit 0 most significant).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotHistogram {
    n_bits: usize,
    counts: Vec<u64>,
    shots: u64,
    seed: u64,
}

impl ShotHistogram {
    pub fn new(n_bits: usize, counts: Vec<u64>, seed: u64) -> Result<Self> {
        if counts.len() != 1 << n_bits {
            return Err(Error::DimensionMismatch { expected: 1 << n_bits, actual: counts.len() });
        }
        let shots = counts.iter().sum();
        Ok(Self { n_bits, counts, shots, seed })
    }

    pub fn from_map(n_bits: usize, map: &BTreeMap<String, u64>, seed: u64) -> Result<Self> {
        let mut counts = vec![0; 1 << n_bits];
        for (bits, c) in map {
            counts[parse_bitstring(bits, n_bits)?] += c;
        }
        Self::new(n_bits, counts, seed)
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, bits: &str) -> Result<u64> {
        Ok(self.counts[parse_bitstring(bits, self.n_bits)?])
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Nonzero bins keyed by bit-string.
    pub fn to_map(&self) -> BTreeMap<String, u64> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(i, c)| (format_bitstring(i, self.n_bits), *c))
            .collect()
    }

    /// Adds the counts of another shard drawn from the same stream.
    pub fn merge(&self, other: &ShotHistogram) -> Result<ShotHistogram> {
        if self.n_bits != other.n_bits {
            return Err(Error::DimensionMismatch { expected: self.n_bits, actual: other.n_bits });
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Self::new(self.n_bits, counts, self.seed)
    }
}

/// Source of bit-string frequencies for the estimators.
pub trait OutcomeDistribution {
    fn n_bits(&self) -> usize;
    fn probabilities(&self) -> Result<Vec<f64>>;
    /// `None` for exact distributions.
    fn shots(&self) -> Option<u64>;
}

impl OutcomeDistribution for ShotHistogram {
    fn n_bits(&self) -> usize {
        self.n_bits
    }

    fn probabilities(&self) -> Result<Vec<f64>> {
        if self.shots == 0 {
            return Err(Error::EmptyHistogram);
        }
        Ok(self.counts.iter().map(|&c| c as f64 / self.shots as f64).collect())
    }

    fn shots(&self) -> Option<u64> {
        Some(self.shots)
    }
}

impl OutcomeDistribution for ExactDistribution {
    fn n_bits(&self) -> usize {
        self.n_bits
    }

    fn probabilities(&self) -> Result<Vec<f64>> {
        Ok(self.probabilities.clone())
    }

    fn shots(&self) -> Option<u64> {
        None
    }
}

impl<D: OutcomeDistribution + ?Sized> OutcomeDistribution for &D {
    fn n_bits(&self) -> usize {
        (**self).n_bits()
    }

    fn probabilities(&self) -> Result<Vec<f64>> {
        (**self).probabilities()
    }

    fn shots(&self) -> Option<u64> {
        (**self).shots()
    }
}

/// Key of the counter-based shot stream for one (seed, circuit) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    pub fn new(seed: u64, context: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(b"qet-shot-stream");
        h.update(seed.to_le_bytes());
        h.update(context);
        Self(h.finalize().into())
    }

    pub fn for_circuit(seed: u64, circuit: &Circuit) -> Self {
        Self::new(seed, &circuit.hash())
    }

    /// Uniform draws in `[0, 1)` for shot indices `shots`; shot `i` always
    /// reads the same 64 stream bits regardless of sharding.
    pub fn uniforms(&self, shots: Range<u64>) -> impl Iterator<Item = f64> {
        let mut rng = ChaCha8Rng::from_seed(self.0);
        rng.set_word_pos(2 * u128::from(shots.start));
        shots.map(move |_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
    }
}

/// Inverse-CDF sampling of `probabilities` for a range of shot indices.
pub fn sample_distribution(
    probabilities: &[f64],
    n_bits: usize,
    key: StreamKey,
    shots: Range<u64>,
    seed: u64,
) -> Result<ShotHistogram> {
    if probabilities.len() != 1 << n_bits {
        return Err(Error::DimensionMismatch { expected: 1 << n_bits, actual: probabilities.len() });
    }
    let mut cumulative = Vec::with_capacity(probabilities.len());
    let mut acc = 0.0;
    for &p in probabilities {
        if !(p.is_finite() && p >= -1e-12) {
            return Err(Error::InvalidParams(format!("invalid probability {p}")));
        }
        acc += p.max(0.0);
        cumulative.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::InvalidParams("distribution has zero mass".into()));
    }
    let last = probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let mut counts = vec![0u64; probabilities.len()];
    for u in key.uniforms(shots) {
        let x = u * acc;
        let idx = cumulative.partition_point(|&c| c <= x).min(last);
        counts[idx] += 1;
    }
    ShotHistogram::new(n_bits, counts, seed)
}

/// `shots` i.i.d. draws from the exact outcome distribution of `circuit`.
pub fn sample(circuit: &Circuit, shots: u64, seed: u64) -> Result<ShotHistogram> {
    sample_shard(circuit, seed, 0..shots)
}

/// One shard of the stream that [`sample`] draws from.
pub fn sample_shard(circuit: &Circuit, seed: u64, shots: Range<u64>) -> Result<ShotHistogram> {
    if shots.is_empty() {
        return Err(Error::InvalidParams("at least one shot is required".into()));
    }
    let exact = simulate_exact(circuit)?;
    sample_distribution(
        &exact.distribution.probabilities,
        circuit.n_bits,
        StreamKey::for_circuit(seed, circuit),
        shots,
        seed,
    )
}

pub trait Sampler {
    fn sample(&self, circuit: &Circuit, shots: u64, seed: u64) -> Result<ShotHistogram>;
}

/// Noise-free sampling from the exact distribution.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdealSampler;

impl Sampler for IdealSampler {
    fn sample(&self, circuit: &Circuit, shots: u64, seed: u64) -> Result<ShotHistogram> {
        sample(circuit, shots, seed)
    }
}

fn check_sites(d: &impl OutcomeDistribution, sites: &[usize]) -> Result<()> {
    for &s in sites {
        if s >= d.n_bits() {
            return Err(Error::SiteOutOfRange { site: s, n_qubits: d.n_bits() });
        }
    }
    Ok(())
}

/// `Σ Π_i (1 − 2b_i) · P(b)` over the listed bits.
pub fn parity_expectation(d: &impl OutcomeDistribution, sites: &[usize]) -> Result<f64> {
    check_sites(d, sites)?;
    let n = d.n_bits();
    let probs = d.probabilities()?;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(idx, p)| {
            let ones = sites.iter().filter(|&&s| idx >> (n - 1 - s) & 1 == 1).count();
            if ones % 2 == 0 {
                *p
            } else {
                -*p
            }
        })
        .sum())
}

/// Sample standard deviation of the ±1 parity over √shots; zero when exact.
pub fn parity_stderr(d: &impl OutcomeDistribution, sites: &[usize]) -> Result<f64> {
    let mean = parity_expectation(d, sites)?;
    Ok(match d.shots() {
        None => 0.0,
        Some(0) => return Err(Error::EmptyHistogram),
        Some(1) => f64::INFINITY,
        Some(n) => {
            let n = n as f64;
            let variance = (1.0 - mean * mean).max(0.0) * n / (n - 1.0);
            (variance / n).sqrt()
        }
    })
}

pub fn estimate_z(d: &impl OutcomeDistribution, site: usize) -> Result<f64> {
    parity_expectation(d, &[site])
}

/// Valid on histograms taken after an X-basis change of both sites.
pub fn estimate_xx(d: &impl OutcomeDistribution, sites: (usize, usize)) -> Result<f64> {
    parity_expectation(d, &[sites.0, sites.1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableTerm {
    pub coefficient: f64,
    /// Sites whose outcome parity is read; the circuit maps each factor to Z.
    pub sites: Vec<usize>,
    /// Pauli label before the basis change, e.g. `Z` or `XX`.
    pub pauli: String,
    /// Name of the circuit whose histogram this term reads.
    pub basis: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub name: String,
    pub terms: Vec<ObservableTerm>,
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// `Σ coefficient · parity + offset`, with term errors added in quadrature.
pub fn estimate_observable<D: OutcomeDistribution>(
    histograms: &BTreeMap<String, D>,
    spec: &ObservableSpec,
) -> Result<Estimate> {
    let mut value = spec.offset;
    let mut variance = 0.0;
    for term in &spec.terms {
        let d = histograms.get(&term.basis).ok_or_else(|| Error::MissingHistogram(term.basis.clone()))?;
        value += term.coefficient * parity_expectation(d, &term.sites)?;
        variance += (term.coefficient * parity_stderr(d, &term.sites)?).powi(2);
    }
    Ok(Estimate { value, stderr: variance.sqrt() })
}

struct TemplateCost<'a> {
    target: &'a StateVector,
}

impl CostFunction for TemplateCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let state = final_state(&template_circuit(p[0], p[1], None)?)?;
        Ok(1.0 - state.fidelity(self.target)?)
    }
}

/// `X₀, R_Y(θ₁)₀, CNOT(0→1), CNOT(0→2), X₀, R_Y(θ₂)₁`, an optional
/// controlled `R_Y(θ₃)` from qubit 0 onto qubit 1, then `CNOT(1→2)`.
pub fn template_circuit(theta1: f64, theta2: f64, theta3: Option<f64>) -> Result<Circuit> {
    let mut c = Circuit::new(3, 0)?;
    c.extend([
        Gate::PauliX(0),
        Gate::RotY { target: 0, angle: theta1 },
        Gate::Cnot { control: 0, target: 1 },
        Gate::Cnot { control: 0, target: 2 },
        Gate::PauliX(0),
        Gate::RotY { target: 1, angle: theta2 },
    ])?;
    if let Some(t3) = theta3 {
        c.push(Gate::ControlledU { control: 0, target: 1, unitary: to_unitary2(&ry(t3)) })?;
    }
    c.push(Gate::Cnot { control: 1, target: 2 })?;
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct PreparedCircuit {
    pub circuit: Circuit,
    pub fidelity: f64,
    /// Whether the extra controlled rotation was needed.
    pub extended: bool,
    pub angles: Vec<f64>,
}

/// Real amplitudes of `target` after removing the global phase of its
/// largest entry.
fn real_amplitudes(target: &StateVector) -> Result<Vec<f64>> {
    let amps = target.amplitudes();
    let max = amps.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let pivot = amps.iter().find(|z| z.norm() >= max - 1e-12).copied().unwrap_or(C64::new(1.0, 0.0));
    let phase = pivot.conj() / pivot.norm();
    let rotated: Vec<C64> = amps.iter().map(|z| z * phase).collect();
    if rotated.iter().any(|z| z.im.abs() > 1e-9) {
        return Err(Error::InvalidState("preparation supports real amplitudes up to a global phase".into()));
    }
    Ok(rotated.iter().map(|z| z.re).collect())
}

/// Circuit preparing `target` from `|0…0⟩`. Two qubits need support on
/// `{00, 11}`; three qubits need support on `{001, 010, 100, 111}`.
pub fn prepare_ground_circuit(target: &StateVector) -> Result<PreparedCircuit> {
    if (target.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidState(format!("target norm {}", target.norm())));
    }
    let a = real_amplitudes(target)?;
    match target.n_qubits() {
        2 => {
            if a[1].abs() > 1e-9 || a[2].abs() > 1e-9 {
                return Err(Error::InvalidState("two-qubit target must be supported on 00 and 11".into()));
            }
            let theta = 2.0 * a[3].atan2(a[0]);
            let circuit = Circuit::from_gates(2, 0, [Gate::RotY { target: 0, angle: theta }, Gate::Cnot { control: 0, target: 1 }])?;
            finish_prep(circuit, target, false, vec![theta])
        }
        3 => {
            if [0usize, 3, 5, 6].iter().any(|&i| a[i].abs() > 1e-9) {
                return Err(Error::InvalidState("three-qubit target must be supported on 001, 010, 100, 111".into()));
            }
            let (theta1, theta2, fidelity) = fit_template(target)?;
            if 1.0 - fidelity <= TEMPLATE_EXACT_TOL {
                return finish_prep(template_circuit(theta1, theta2, None)?, target, false, vec![theta1, theta2]);
            }
            // With the extra rotation the family is every real odd-parity
            // state: amplitudes (−c₁s₂, c₁c₂, −s₁c_β, −s₁s_β) on 001, 010, 100,
            // 111 with β = θ₂ + θ₃, which inverts in closed form.
            let r1 = a[1].hypot(a[2]);
            let r2 = a[4].hypot(a[7]);
            let theta1 = 2.0 * r2.atan2(r1);
            let theta2 = 2.0 * (-a[1]).atan2(a[2]);
            let beta = 2.0 * (-a[7]).atan2(-a[4]);
            let theta3 = beta - theta2;
            finish_prep(template_circuit(theta1, theta2, Some(theta3))?, target, true, vec![theta1, theta2, theta3])
        }
        n => Err(Error::InvalidState(format!("no preparation recipe for {n} qubits"))),
    }
}

fn finish_prep(circuit: Circuit, target: &StateVector, extended: bool, angles: Vec<f64>) -> Result<PreparedCircuit> {
    let fidelity = final_state(&circuit)?.fidelity(target)?;
    if fidelity < 1.0 - PREP_FIDELITY_TOL {
        return Err(Error::PreparationFailed { fidelity });
    }
    Ok(PreparedCircuit { circuit, fidelity, extended, angles })
}

/// Derivative-free fit of the two template angles from a grid of starts.
fn fit_template(target: &StateVector) -> Result<(f64, f64, f64)> {
    let mut best = (0.0, 0.0, f64::INFINITY);
    let starts = [-0.75 * PI, -0.25 * PI, 0.25 * PI, 0.75 * PI];
    for &s1 in &starts {
        for &s2 in &starts {
            let simplex = vec![vec![s1, s2], vec![s1 + 0.4, s2], vec![s1, s2 + 0.4]];
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(1e-16)
                .map_err(|e| Error::InvalidParams(e.to_string()))?;
            let res = Executor::new(TemplateCost { target }, solver)
                .configure(|s| s.max_iters(400))
                .run()
                .map_err(|e| Error::InvalidParams(e.to_string()))?;
            let cost = res.state.best_cost;
            if cost < best.2 {
                let p = res.state.best_param.expect("evaluated at least once");
                best = (p[0], p[1], cost);
            }
        }
    }
    Ok((best.0, best.1, 1.0 - best.2))
}

/// One observable's circuit pair and the recipe that turns its histogram
/// into an energy.
#[derive(Clone, Debug)]
pub struct ProtocolCircuit {
    pub mid: Circuit,
    pub deferred: Circuit,
    pub observable: ObservableSpec,
}

/// Receiver-side observables of a protocol, one circuit per term.
pub fn build_protocol_circuits(
    model: &ModelInstance,
    variant: ProtocolVariant,
    phi: f64,
) -> Result<BTreeMap<String, ProtocolCircuit>> {
    build_protocol_circuits_with(model, variant, &variant.rotations(phi))
}

pub fn build_protocol_circuits_with(
    model: &ModelInstance,
    variant: ProtocolVariant,
    rotations: &[Rotation],
) -> Result<BTreeMap<String, ProtocolCircuit>> {
    if model.params.variant != variant.model_variant() {
        return Err(Error::InvalidParams(format!("{} circuits need a {:?} model", variant.name(), variant.model_variant())));
    }
    let senders = variant.senders();
    let receivers = variant.receivers();
    let prep = prepare_ground_circuit(&model.ground)?;
    let mut out = BTreeMap::new();

    let mut observables: Vec<(String, ObservableTerm, f64)> = Vec::new();
    for &r in receivers {
        let t = model.local(r).expect("receiver has a local term");
        let name = format!("H{r}");
        observables.push((
            name.clone(),
            ObservableTerm { coefficient: t.strength, sites: vec![r], pauli: "Z".into(), basis: name },
            t.offset,
        ));
    }
    for c in &model.couplings {
        let (i, j) = c.sites;
        let crosses = (senders.contains(&i) && receivers.contains(&j)) || (senders.contains(&j) && receivers.contains(&i));
        if crosses {
            let name = format!("V{i}{j}");
            observables.push((
                name.clone(),
                ObservableTerm { coefficient: c.strength, sites: vec![i, j], pauli: "XX".into(), basis: name },
                c.offset,
            ));
        }
    }

    for (name, term, offset) in observables {
        let n = model.n_qubits();
        let mut mid = Circuit::new(n, n)?;
        mid.extend(prep.circuit.gates().iter().cloned())?;
        for &s in senders {
            mid.extend([Gate::Hadamard(s), Gate::MeasureZ { qubit: s, bit: s }])?;
        }
        for rot in rotations {
            // b = 0 (μ = +1) keeps R_Y(2φ); b = 1 adds R_Y(−4φ) for R_Y(−2φ).
            mid.push(Gate::RotY { target: rot.receiver, angle: 2.0 * rot.phi })?;
            mid.push(Gate::ClassicallyControlled {
                bit: rot.sender,
                gate: Box::new(Gate::RotY { target: rot.receiver, angle: -4.0 * rot.phi }),
            })?;
        }
        if term.pauli == "XX" {
            for &q in &term.sites {
                if !senders.contains(&q) {
                    mid.push(Gate::Hadamard(q))?;
                }
            }
        }
        for q in (0..n).filter(|q| !senders.contains(q)) {
            mid.push(Gate::MeasureZ { qubit: q, bit: q })?;
        }
        let deferred = defer_measurements(&mid)?;
        let observable = ObservableSpec { name: name.clone(), terms: vec![term], offset };
        out.insert(name, ProtocolCircuit { mid, deferred, observable });
    }
    Ok(out)
}

/// Deposit circuits. Measuring `X_s` flips only `H_s` among the terms, so a
/// sender's deposit equals `−h⟨Z_s⟩` on the state it measures; earlier
/// senders' measurements are included.
pub fn build_deposit_circuits(model: &ModelInstance, variant: ProtocolVariant) -> Result<BTreeMap<String, ProtocolCircuit>> {
    if model.params.variant != variant.model_variant() {
        return Err(Error::InvalidParams(format!("{} circuits need a {:?} model", variant.name(), variant.model_variant())));
    }
    let prep = prepare_ground_circuit(&model.ground)?;
    let n = model.n_qubits();
    let names = ["E_a", "E_c"];
    let mut out = BTreeMap::new();
    for (k, &s) in variant.senders().iter().enumerate() {
        let name = names[k].to_string();
        let mut mid = Circuit::new(n, n)?;
        mid.extend(prep.circuit.gates().iter().cloned())?;
        for &earlier in &variant.senders()[..k] {
            mid.extend([Gate::Hadamard(earlier), Gate::MeasureZ { qubit: earlier, bit: earlier }])?;
        }
        for q in (0..n).filter(|q| !variant.senders()[..k].contains(q)) {
            mid.push(Gate::MeasureZ { qubit: q, bit: q })?;
        }
        let h = model.local(s).expect("sender has a local term").strength;
        let term = ObservableTerm { coefficient: -h, sites: vec![s], pauli: "Z".into(), basis: name.clone() };
        let deferred = defer_measurements(&mid)?;
        out.insert(name.clone(), ProtocolCircuit { mid, deferred, observable: ObservableSpec { name, terms: vec![term], offset: 0.0 } });
    }
    Ok(out)
}

//! Exact density-matrix evaluation of the teleportation protocols.
//!
//! Every protocol state here is an ensemble of pure branches, one per string
//! of sender outcomes, so density matrices are assembled only at the end.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    embed, evolve, partial_trace, ry, von_neumann_entropy, DensityMatrix, Expectation, HermitianOperator, Matrix,
    Pauli, StateVector, C64,
};
use crate::model::{compute_angles, ModelInstance, ModelVariant};

const PASSIVITY_TOL: f64 = 1e-9;
const BOOKKEEPING_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolVariant {
    /// Two qubits: Alice (0) measures, Bob (1) rotates.
    Minimal,
    /// Alice (0) and Charlie (1) measure, Bob (2) rotates on both bits.
    Miso,
    /// Alice (0) measures, Charlie (1) and Bob (2) both rotate.
    Simo,
}

impl ProtocolVariant {
    pub fn model_variant(self) -> ModelVariant {
        match self {
            ProtocolVariant::Minimal => ModelVariant::Minimal2,
            ProtocolVariant::Miso | ProtocolVariant::Simo => ModelVariant::Extended3,
        }
    }

    pub fn senders(self) -> &'static [usize] {
        match self {
            ProtocolVariant::Minimal | ProtocolVariant::Simo => &[0],
            ProtocolVariant::Miso => &[0, 1],
        }
    }

    pub fn receivers(self) -> &'static [usize] {
        match self {
            ProtocolVariant::Minimal => &[1],
            ProtocolVariant::Miso => &[2],
            ProtocolVariant::Simo => &[1, 2],
        }
    }

    /// Feedback rotations sharing one angle.
    pub fn rotations(self, phi: f64) -> Vec<Rotation> {
        match self {
            ProtocolVariant::Minimal => vec![Rotation { receiver: 1, sender: 0, phi }],
            ProtocolVariant::Miso => vec![
                Rotation { receiver: 2, sender: 0, phi },
                Rotation { receiver: 2, sender: 1, phi },
            ],
            ProtocolVariant::Simo => vec![
                Rotation { receiver: 1, sender: 0, phi },
                Rotation { receiver: 2, sender: 0, phi },
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolVariant::Minimal => "minimal",
            ProtocolVariant::Miso => "miso",
            ProtocolVariant::Simo => "simo",
        }
    }
}

impl std::str::FromStr for ProtocolVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "minimal" => Ok(ProtocolVariant::Minimal),
            "miso" => Ok(ProtocolVariant::Miso),
            "simo" => Ok(ProtocolVariant::Simo),
            other => Err(Error::InvalidParams(format!("unknown protocol variant '{other}'"))),
        }
    }
}

/// `R_Y(2μφ)` on `receiver`, with `μ` the outcome of `sender`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub receiver: usize,
    pub sender: usize,
    pub phi: f64,
}

#[derive(Clone, Debug)]
pub struct MeasurementOutcome {
    pub mu: i8,
    pub probability: f64,
    /// Normalized post-measurement state; the unnormalized (zero) projection
    /// when the branch has probability zero.
    pub post_state: StateVector,
}

/// `(1 + μ X_site) / 2`
pub fn x_projector(mu: i8, site: usize, n_qubits: usize) -> Result<Matrix> {
    let x = embed(&Pauli::X.matrix(), &[site], n_qubits)?;
    let mu = C64::new(f64::from(mu), 0.0);
    Ok((&Matrix::identity(1 << n_qubits) + &x.scale(mu)).scale(C64::new(0.5, 0.0)))
}

/// Projective X measurement; the `μ = +1` branch comes first.
pub fn measure_x(state: &StateVector, site: usize) -> Result<Vec<MeasurementOutcome>> {
    let n = state.n_qubits();
    [1i8, -1]
        .into_iter()
        .map(|mu| {
            let mut post = state.apply(&x_projector(mu, site, n)?)?;
            let p = post.norm().powi(2);
            if p > 0.0 {
                post.normalize()?;
            }
            Ok(MeasurementOutcome { mu, probability: p, post_state: post })
        })
        .collect()
}

/// `cos φ I − iμ sin φ Y` at `site`, i.e. `R_Y(2μφ)`.
pub fn conditional_unitary(phi: f64, mu: i8, site: usize, n_qubits: usize) -> Result<Matrix> {
    if !phi.is_finite() {
        return Err(Error::InvalidAngle);
    }
    embed(&ry(2.0 * f64::from(mu) * phi), &[site], n_qubits)
}

/// One unnormalized branch of a sender-measurement ensemble.
#[derive(Clone, Debug)]
pub struct Branch {
    /// Outcomes in sender order.
    pub mus: Vec<i8>,
    pub state: StateVector,
}

impl Branch {
    pub fn probability(&self) -> f64 {
        self.state.norm().powi(2)
    }

    fn mu_of(&self, senders: &[usize], site: usize) -> Option<i8> {
        senders.iter().position(|&s| s == site).map(|i| self.mus[i])
    }
}

fn check_sites(n: usize, senders: &[usize], receivers: &[usize]) -> Result<()> {
    for (i, &s) in senders.iter().enumerate() {
        if s >= n {
            return Err(Error::SiteOutOfRange { site: s, n_qubits: n });
        }
        if senders[..i].contains(&s) {
            return Err(Error::DuplicateSite(s));
        }
    }
    for &r in receivers {
        if r >= n {
            return Err(Error::SiteOutOfRange { site: r, n_qubits: n });
        }
        if senders.contains(&r) {
            return Err(Error::SiteOverlap(r));
        }
    }
    Ok(())
}

/// Applies `P(μ)` for each sender in order and keeps all `2^|senders|` branches.
pub fn measured_branches(model: &ModelInstance, senders: &[usize]) -> Result<Vec<Branch>> {
    let n = model.n_qubits();
    check_sites(n, senders, &[])?;
    let mut branches = vec![Branch { mus: Vec::new(), state: model.ground.clone() }];
    for &s in senders {
        let projectors = [(1i8, x_projector(1, s, n)?), (-1i8, x_projector(-1, s, n)?)];
        let mut next = Vec::with_capacity(branches.len() * 2);
        for b in &branches {
            for (mu, p) in &projectors {
                let mut mus = b.mus.clone();
                mus.push(*mu);
                next.push(Branch { mus, state: b.state.apply(p)? });
            }
        }
        branches = next;
    }
    Ok(branches)
}

fn ensemble_density(branches: &[Branch]) -> Result<DensityMatrix> {
    let dim = branches[0].state.dim();
    let mut acc = Matrix::zeros(dim);
    for b in branches {
        acc = &acc + &b.state.projector();
    }
    DensityMatrix::new(acc)
}

fn ensemble_expectation(branches: &[Branch], op: &HermitianOperator) -> Result<f64> {
    branches.iter().try_fold(0.0, |acc, b| Ok(acc + b.state.expectation(op)?))
}

/// `Tr[ρ_M H_tot]` after measuring `senders[..=i]`, reported as increments:
/// entry `i` is the extra energy injected by sender `i`.
pub fn deposit_energies(model: &ModelInstance, senders: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(senders.len());
    let mut previous = 0.0;
    for i in 0..senders.len() {
        let total = ensemble_expectation(&measured_branches(model, &senders[..=i])?, &model.total)?;
        out.push(total - previous);
        previous = total;
    }
    Ok(out)
}

/// Energy injected by the last listed sender, given the earlier ones measured first.
pub fn deposit_energy(model: &ModelInstance, senders: &[usize]) -> Result<f64> {
    Ok(deposit_energies(model, senders)?.last().copied().unwrap_or(0.0))
}

/// Sender measurements followed by outcome-conditioned receiver rotations.
pub fn feedback_branches(model: &ModelInstance, senders: &[usize], rotations: &[Rotation]) -> Result<Vec<Branch>> {
    let n = model.n_qubits();
    let receivers: Vec<usize> = rotations.iter().map(|r| r.receiver).collect();
    check_sites(n, senders, &receivers)?;
    for r in rotations {
        if !senders.contains(&r.sender) {
            return Err(Error::InvalidParams(format!("rotation conditioned on site {} which is not a sender", r.sender)));
        }
        if !r.phi.is_finite() {
            return Err(Error::InvalidAngle);
        }
    }
    let mut branches = measured_branches(model, senders)?;
    for b in &mut branches {
        for r in rotations {
            let mu = b.mu_of(senders, r.sender).expect("checked above");
            b.state = b.state.apply(&conditional_unitary(r.phi, mu, r.receiver, n)?)?;
        }
    }
    Ok(branches)
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub variant: ProtocolVariant,
    /// Rotation angle per receiver site.
    pub receiver_phi: BTreeMap<usize, f64>,
    pub deposit_alice: f64,
    /// Present for the two-sender protocol only.
    pub deposit_charlie: Option<f64>,
    /// Expectation of the receiver-side operator (receiver locals plus
    /// sender-receiver couplings).
    pub receiver_energy: f64,
    pub v_terms: BTreeMap<(usize, usize), f64>,
    pub h_terms: BTreeMap<usize, f64>,
    /// `Tr[ρ_QET H_tot]`
    pub total_energy: f64,
    pub rho_qet: DensityMatrix,
    pub efficiency_v_only: f64,
}

impl ProtocolResult {
    pub fn deposits(&self) -> f64 {
        self.deposit_alice + self.deposit_charlie.unwrap_or(0.0)
    }

    /// Sender-receiver coupling expectations, the teleported part.
    pub fn extraction_terms(&self) -> BTreeMap<(usize, usize), f64> {
        let senders = self.variant.senders();
        let receivers = self.variant.receivers();
        self.v_terms
            .iter()
            .filter(|((i, j), _)| {
                (senders.contains(i) && receivers.contains(j)) || (senders.contains(j) && receivers.contains(i))
            })
            .map(|(k, v)| (*k, *v))
            .collect()
    }

    /// Sum of extraction terms.
    pub fn extracted_v(&self) -> f64 {
        self.extraction_terms().values().sum()
    }

    /// Couplings between two receivers, which feedback changes but the
    /// receiver operator leaves out.
    pub fn receiver_receiver_terms(&self) -> f64 {
        let receivers = self.variant.receivers();
        self.v_terms
            .iter()
            .filter(|((i, j), _)| receivers.contains(i) && receivers.contains(j))
            .map(|(_, v)| v)
            .sum()
    }

    /// Residual of `Tr[ρ_QET H_tot] = deposits + E_receiver + (receiver-receiver couplings)`.
    pub fn energy_balance_defect(&self) -> f64 {
        (self.total_energy - self.deposits() - self.receiver_energy - self.receiver_receiver_terms()).abs()
    }
}

fn evaluate(model: &ModelInstance, variant: ProtocolVariant, rotations: Vec<Rotation>) -> Result<ProtocolResult> {
    if model.params.variant != variant.model_variant() {
        return Err(Error::InvalidParams(format!(
            "{} protocol needs a {:?} model",
            variant.name(),
            variant.model_variant()
        )));
    }
    let senders = variant.senders();
    let receivers = variant.receivers();
    let deposits = deposit_energies(model, senders)?;
    let branches = feedback_branches(model, senders, &rotations)?;
    let rho = ensemble_density(&branches)?;

    let h_terms = model
        .locals
        .iter()
        .map(|t| Ok((t.site, rho.expectation(&t.operator)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let v_terms = model
        .couplings
        .iter()
        .map(|c| Ok((c.sites, rho.expectation(&c.operator)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let total_energy = rho.expectation(&model.total)?;

    let mut result = ProtocolResult {
        variant,
        receiver_phi: rotations.iter().map(|r| (r.receiver, r.phi)).collect(),
        deposit_alice: deposits[0],
        deposit_charlie: deposits.get(1).copied(),
        receiver_energy: 0.0,
        v_terms,
        h_terms,
        total_energy,
        rho_qet: rho,
        efficiency_v_only: 0.0,
    };
    let extraction = result.extraction_terms();
    result.receiver_energy =
        receivers.iter().map(|r| result.h_terms[r]).sum::<f64>() + extraction.values().sum::<f64>();
    let negative: f64 = extraction.values().filter(|v| **v < 0.0).map(|v| -v).sum();
    result.efficiency_v_only = negative / result.deposits();
    Ok(result)
}

pub fn run(model: &ModelInstance, variant: ProtocolVariant, phi: f64) -> Result<ProtocolResult> {
    if !phi.is_finite() {
        return Err(Error::InvalidAngle);
    }
    evaluate(model, variant, variant.rotations(phi))
}

pub fn run_minimal(model: &ModelInstance, phi: f64) -> Result<ProtocolResult> {
    run(model, ProtocolVariant::Minimal, phi)
}

pub fn run_miso(model: &ModelInstance, phi: f64) -> Result<ProtocolResult> {
    run(model, ProtocolVariant::Miso, phi)
}

pub fn run_simo(model: &ModelInstance, phi: f64) -> Result<ProtocolResult> {
    run(model, ProtocolVariant::Simo, phi)
}

/// SIMO with separate angles for Charlie (site 1) and Bob (site 2).
pub fn run_simo_split(model: &ModelInstance, phi_charlie: f64, phi_bob: f64) -> Result<ProtocolResult> {
    if !phi_charlie.is_finite() || !phi_bob.is_finite() {
        return Err(Error::InvalidAngle);
    }
    evaluate(
        model,
        ProtocolVariant::Simo,
        vec![
            Rotation { receiver: 1, sender: 0, phi: phi_charlie },
            Rotation { receiver: 2, sender: 0, phi: phi_bob },
        ],
    )
}

/// `Tr[ρ (H_r + V_sr)]` for a single sender and receiver.
pub fn two_party_receiver_energy(model: &ModelInstance, sender: usize, receiver: usize, phi: f64) -> Result<f64> {
    let branches = feedback_branches(model, &[sender], &[Rotation { receiver, sender, phi }])?;
    let local = model.local(receiver).ok_or(Error::SiteOutOfRange { site: receiver, n_qubits: model.n_qubits() })?;
    let mut energy = ensemble_expectation(&branches, &local.operator)?;
    if let Some(c) = model.coupling(sender, receiver) {
        energy += ensemble_expectation(&branches, &c.operator)?;
    }
    Ok(energy)
}

/// Closed-form angle for a variant, from the first sender/receiver pair.
pub fn closed_form_phi(model: &ModelInstance, variant: ProtocolVariant) -> Result<f64> {
    Ok(compute_angles(model, variant.senders()[0], variant.receivers()[0])?.phi)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhiOptimum {
    pub phi: f64,
    pub receiver_energy: f64,
}

const COARSE_POINTS: usize = 256;
const GOLDEN_TOL: f64 = 1e-12;

/// Minimizes the receiver energy over `φ ∈ [0, π/2]`: a uniform scan picks
/// the basin, golden-section search refines it.
pub fn optimize_phi(model: &ModelInstance, variant: ProtocolVariant) -> Result<PhiOptimum> {
    let energy = |phi: f64| run(model, variant, phi).map(|r| r.receiver_energy);
    let step = FRAC_PI_2 / COARSE_POINTS as f64;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..=COARSE_POINTS {
        let e = energy(i as f64 * step)?;
        if e < best.1 {
            best = (i, e);
        }
    }
    let lo = best.0.saturating_sub(1) as f64 * step;
    let hi = ((best.0 + 1).min(COARSE_POINTS)) as f64 * step;
    let (phi, e) = golden_section(&energy, lo, hi)?;
    let (phi, e) = if e <= best.1 { (phi, e) } else { (best.0 as f64 * step, best.1) };
    Ok(PhiOptimum { phi, receiver_energy: e })
}

fn golden_section(f: &impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > GOLDEN_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

/// Haar-distributed unitary from a complex Gaussian matrix by Gram-Schmidt.
pub fn haar_unitary(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let mut cols: Vec<Vec<C64>> = (0..dim)
            .map(|_| {
                (0..dim)
                    .map(|_| C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng)))
                    .collect()
            })
            .collect();
        let mut ok = true;
        for j in 0..dim {
            for i in 0..j {
                let proj: C64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a.conj() * b).sum();
                let prev = cols[i].clone();
                for (z, p) in cols[j].iter_mut().zip(prev) {
                    *z -= proj * p;
                }
            }
            let norm = cols[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm < 1e-10 {
                ok = false;
                break;
            }
            for z in &mut cols[j] {
                *z /= norm;
            }
        }
        if ok {
            return Matrix::from_fn(dim, |r, c| cols[c][r]);
        }
    }
}

#[derive(Clone, Debug)]
pub struct PassivityEntry {
    pub label: String,
    /// `⟨g|W† H_tot W|g⟩`
    pub defect: f64,
    /// `Tr[W ρ_M W† H_tot]` minus the deposits.
    pub defect_via_trace: f64,
    pub unitary: Matrix,
}

#[derive(Clone, Debug)]
pub struct PassivityReport {
    pub min_eigenvalue: f64,
    pub entries: Vec<PassivityEntry>,
}

impl PassivityReport {
    pub fn min_defect(&self) -> f64 {
        self.entries.iter().map(|e| e.defect.min(e.defect_via_trace)).fold(f64::INFINITY, f64::min)
    }

    pub fn violations(&self) -> Vec<&PassivityEntry> {
        self.entries.iter().filter(|e| e.defect.min(e.defect_via_trace) < -PASSIVITY_TOL).collect()
    }

    pub fn is_passive(&self) -> bool {
        self.min_eigenvalue >= -PASSIVITY_TOL && self.violations().is_empty()
    }
}

/// Applies outcome-independent unitaries on `receivers` after the sender
/// measurements and reports the energy they extract (negative defect means
/// extraction). `unitaries` act on the receivers in listed order; `n_random`
/// seeded Haar samples are appended.
pub fn passivity_check(
    model: &ModelInstance,
    senders: &[usize],
    receivers: &[usize],
    unitaries: &[Matrix],
    n_random: usize,
    seed: u64,
) -> Result<PassivityReport> {
    let n = model.n_qubits();
    check_sites(n, senders, receivers)?;
    if receivers.is_empty() {
        return Err(Error::InvalidParams("passivity check needs at least one receiver".into()));
    }
    let local_dim = 1 << receivers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<(String, Matrix)> =
        unitaries.iter().enumerate().map(|(i, u)| (format!("given[{i}]"), u.clone())).collect();
    candidates.extend((0..n_random).map(|i| (format!("haar[{i}]"), haar_unitary(local_dim, &mut rng))));

    let branches = measured_branches(model, senders)?;
    let rho_m = ensemble_density(&branches)?;
    let deposits: f64 = rho_m.expectation(&model.total)?;
    let min_eigenvalue = crate::linalg::eigh(&model.total)?.eigenvalues[0];

    let entries = candidates
        .into_iter()
        .map(|(label, u)| {
            if u.dim() != local_dim {
                return Err(Error::DimensionMismatch { expected: local_dim, actual: u.dim() });
            }
            let w = embed(&u, receivers, n)?;
            let defect = model.ground.expectation(&model.total.conjugated_by(&w.adjoint()))?;
            let rho_w = DensityMatrix::new(w.conjugate(rho_m.matrix()))?;
            let defect_via_trace = rho_w.expectation(&model.total)? - deposits;
            Ok(PassivityEntry { label, defect, defect_via_trace, unitary: u })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PassivityReport { min_eigenvalue, entries })
}

/// Term expectations along `exp(−iHt) ρ_M exp(iHt)` without any feedback.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeEvolutionReport {
    pub times: Vec<f64>,
    pub h_terms: BTreeMap<usize, Vec<f64>>,
    pub v_terms: BTreeMap<String, Vec<f64>>,
    pub total: Vec<f64>,
    pub deposit: f64,
}

impl TimeEvolutionReport {
    /// Largest deviation of the total energy from the deposit.
    pub fn max_total_drift(&self) -> f64 {
        self.total.iter().map(|e| (e - self.deposit).abs()).fold(0.0, f64::max)
    }
}

pub fn time_evolution_report(model: &ModelInstance, senders: &[usize], times: &[f64]) -> Result<TimeEvolutionReport> {
    let rho_m = ensemble_density(&measured_branches(model, senders)?)?;
    let deposit = rho_m.expectation(&model.total)?;
    let mut report = TimeEvolutionReport {
        times: times.to_vec(),
        h_terms: BTreeMap::new(),
        v_terms: BTreeMap::new(),
        total: Vec::with_capacity(times.len()),
        deposit,
    };
    for &t in times {
        if !t.is_finite() {
            return Err(Error::InvalidParams(format!("non-finite time {t}")));
        }
        let u = evolve(&model.total, t)?;
        let rho_t = DensityMatrix::new(u.conjugate(rho_m.matrix()))?;
        for term in &model.locals {
            report.h_terms.entry(term.site).or_default().push(rho_t.expectation(&term.operator)?);
        }
        for c in &model.couplings {
            let key = format!("V{}{}", c.sites.0, c.sites.1);
            report.v_terms.entry(key).or_default().push(rho_t.expectation(&c.operator)?);
        }
        report.total.push(rho_t.expectation(&model.total)?);
    }
    if let Some(i) = times.iter().position(|&t| t == 0.0) {
        for (name, series) in &report.v_terms {
            if series[i].abs() > BOOKKEEPING_TOL {
                return Err(Error::Invariant(format!("<{name}(0)> = {:e} after measurement", series[i])));
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Entanglement entropy of the ground state across the cut, in nats.
    pub s_before: f64,
    /// Outcome-weighted entropy of the post-measurement branches.
    pub s_after_weighted: f64,
    pub delta: f64,
}

/// Entanglement entropy change across `part_a | rest` caused by the sender
/// measurements.
pub fn entropy_change(model: &ModelInstance, senders: &[usize], part_a: &[usize]) -> Result<EntropyReport> {
    let n = model.n_qubits();
    if part_a.is_empty() || part_a.len() >= n {
        return Err(Error::InvalidBipartition(format!("{part_a:?} does not split {n} qubits into two nonempty parts")));
    }
    for (i, &s) in part_a.iter().enumerate() {
        if s >= n || part_a[..i].contains(&s) {
            return Err(Error::InvalidBipartition(format!("{part_a:?} is not a set of sites below {n}")));
        }
    }
    let s_before = von_neumann_entropy(&partial_trace(&DensityMatrix::from_pure(&model.ground), part_a)?)?;
    let mut s_after_weighted = 0.0;
    for b in measured_branches(model, senders)? {
        let p = b.probability();
        if p <= 1e-15 {
            continue;
        }
        let mut post = b.state.clone();
        post.normalize()?;
        s_after_weighted += p * von_neumann_entropy(&partial_trace(&DensityMatrix::from_pure(&post), part_a)?)?;
    }
    Ok(EntropyReport { s_before, s_after_weighted, delta: s_before - s_after_weighted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, minimal_closed_form_phi, ModelParams};
    use proptest::prelude::*;

    fn minimal(h: f64, k: f64) -> ModelInstance {
        build(ModelParams::minimal(h, k).unwrap()).unwrap()
    }

    fn extended(h: f64, k: f64) -> ModelInstance {
        build(ModelParams::extended(h, k).unwrap()).unwrap()
    }

    #[test]
    fn measure_x_examples() {
        let out = measure_x(&StateVector::basis(1, 0), 0).unwrap();
        assert_eq!(out.len(), 2);
        for (o, plus) in out.iter().zip([true, false]) {
            assert!((o.probability - 0.5).abs() < 1e-15);
            assert!((o.post_state.fidelity(&StateVector::plus_minus(plus)).unwrap() - 1.0).abs() < 1e-12);
        }
        let out = measure_x(&StateVector::plus_minus(true), 0).unwrap();
        assert!((out[0].probability - 1.0).abs() < 1e-15);
        assert_eq!(out[0].mu, 1);
        assert!(out[1].probability < 1e-30);
    }

    #[test]
    fn measure_x_reconstructs_dephased_state() {
        let m = extended(1.0, 4.0);
        let rho = DensityMatrix::from_pure(&m.ground);
        let out = measure_x(&m.ground, 1).unwrap();
        let mut acc = Matrix::zeros(8);
        for o in &out {
            acc = &acc + &o.post_state.projector().scale(C64::new(o.probability, 0.0));
        }
        let x = embed(&Pauli::X.matrix(), &[1], 3).unwrap();
        let expected = (&x.conjugate(rho.matrix()) + rho.matrix()).scale(C64::new(0.5, 0.0));
        assert!(acc.max_abs_diff(&expected) < 1e-12);
        let total: f64 = out.iter().map(|o| o.probability).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn conditional_unitary_examples() {
        assert!(conditional_unitary(0.0, 1, 0, 1).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-15);
        let u = conditional_unitary(FRAC_PI_2, 1, 0, 1).unwrap();
        let minus_i_y = Pauli::Y.matrix().scale(C64::new(0.0, -1.0));
        assert!(u.max_abs_diff(&minus_i_y) < 1e-15);
        for phi in [0.1, -2.3, 7.0] {
            for mu in [1, -1] {
                assert!(conditional_unitary(phi, mu, 1, 2).unwrap().unitarity_defect() < 1e-14);
            }
        }
        assert!(matches!(conditional_unitary(f64::NAN, 1, 0, 1), Err(Error::InvalidAngle)));
    }

    #[test]
    fn minimal_deposit() {
        let m = minimal(1.0, 1.5);
        let e = deposit_energy(&m, &[0]).unwrap();
        assert!((e - 1.0 / 3.25f64.sqrt()).abs() < 1e-12);
        let half = 0.5 * m.ground.expectation(&m.total.conjugated_by(&embed(&Pauli::X.matrix(), &[0], 2).unwrap())).unwrap();
        assert!((e - half).abs() < 1e-12);
    }

    #[test]
    fn extended_deposits() {
        let e = deposit_energy(&extended(1.0, 4.0), &[0]).unwrap();
        assert!((e - 0.772).abs() < 0.01);
        let d = deposit_energies(&extended(1.0, 3.0), &[0, 1]).unwrap();
        assert!((d[1] - 0.80).abs() < 0.01);
        assert!((d[0] - d[1]).abs() < 1e-9);
    }

    #[test]
    fn overlapping_sites_rejected() {
        let m = extended(1.0, 4.0);
        let err = feedback_branches(&m, &[0], &[Rotation { receiver: 0, sender: 0, phi: 0.1 }]);
        assert!(matches!(err, Err(Error::SiteOverlap(0))));
        assert!(run_minimal(&m, 0.1).is_err());
        assert!(run_miso(&m, f64::NAN).is_err());
    }

    #[test]
    fn minimal_closed_form_energy_matches_trace() {
        for (h, k) in [(1.0, 1.5), (1.5, 1.0), (0.3, 4.0), (5.0, 0.2)] {
            let m = minimal(h, k);
            let a = compute_angles(&m, 0, 1).unwrap();
            let r = run_minimal(&m, a.phi).unwrap();
            assert!((r.receiver_energy - a.closed_form_receiver_energy()).abs() < 1e-9);
            assert!(r.receiver_energy < 0.0);
        }
    }

    #[test]
    fn minimal_two_qubit_column() {
        let m = minimal(1.5, 1.0);
        let opt = optimize_phi(&m, ProtocolVariant::Minimal).unwrap();
        let r = run_minimal(&m, opt.phi).unwrap();
        assert!((r.deposit_alice - 1.2481).abs() < 0.01);
        assert!((r.v_terms[&(0, 1)] + 0.490).abs() < 0.01);
    }

    #[test]
    fn optimizer_matches_closed_form_angle() {
        for (h, k) in [(1.0, 1.5), (2.0, 0.7), (0.4, 3.0)] {
            let m = minimal(h, k);
            let opt = optimize_phi(&m, ProtocolVariant::Minimal).unwrap();
            assert!((opt.phi - minimal_closed_form_phi(m.params)).abs() < 1e-6);
        }
    }

    #[test]
    fn optimizer_dominates_sweep_and_closed_form() {
        let m = extended(1.0, 4.0);
        for variant in [ProtocolVariant::Miso, ProtocolVariant::Simo] {
            let opt = optimize_phi(&m, variant).unwrap();
            let cf = run(&m, variant, closed_form_phi(&m, variant).unwrap()).unwrap().receiver_energy;
            assert!(opt.receiver_energy <= cf + 1e-9);
            let sweep_min = (0..1000)
                .map(|i| run(&m, variant, FRAC_PI_2 * i as f64 / 999.0).unwrap().receiver_energy)
                .fold(f64::INFINITY, f64::min);
            assert!(sweep_min >= opt.receiver_energy - 1e-6);
        }
        assert!(optimize_phi(&m, ProtocolVariant::Miso).unwrap().receiver_energy < 0.0);
    }

    #[test]
    fn zero_angle_extracts_nothing() {
        let m = extended(1.0, 3.0);
        for variant in [ProtocolVariant::Miso, ProtocolVariant::Simo] {
            let r = run(&m, variant, 0.0).unwrap();
            assert!(r.receiver_energy.abs() < 1e-9);
            for v in r.extraction_terms().values() {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoupled_limit_extracts_nothing() {
        let m = minimal(1.0, 1e-6);
        let a = compute_angles(&m, 0, 1).unwrap();
        assert!(a.eta.abs() < 1e-5);
        let r = run_minimal(&m, a.phi).unwrap();
        assert!(r.receiver_energy.abs() < 1e-6);
    }

    #[test]
    fn energy_bookkeeping() {
        for (h, k) in [(1.0, 3.0), (1.0, 4.0), (2.5, 0.6)] {
            let m = extended(h, k);
            for variant in [ProtocolVariant::Miso, ProtocolVariant::Simo] {
                for phi in [0.05, 0.3, 1.1] {
                    let r = run(&m, variant, phi).unwrap();
                    assert!(r.energy_balance_defect() < 1e-9, "{variant:?} ({h},{k}) phi={phi}");
                }
            }
        }
    }

    #[test]
    fn miso_terms_have_expected_signs_at_optimum() {
        for (h, k) in [(1.0, 3.0), (1.0, 4.0)] {
            let m = extended(h, k);
            let opt = optimize_phi(&m, ProtocolVariant::Miso).unwrap();
            let r = run_miso(&m, opt.phi).unwrap();
            assert!(r.v_terms[&(0, 2)] <= 0.0 && r.v_terms[&(1, 2)] <= 0.0);
            assert!(r.h_terms[&2] >= 0.0);
        }
    }

    #[test]
    fn simo_split_with_equal_angles_matches_shared() {
        let m = extended(1.0, 3.0);
        let a = run_simo(&m, 0.2).unwrap();
        let b = run_simo_split(&m, 0.2, 0.2).unwrap();
        assert!((a.receiver_energy - b.receiver_energy).abs() < 1e-15);
        // Each receiver's coupling to Alice only sees its own rotation.
        let c = run_simo_split(&m, 0.2, 0.0).unwrap();
        assert!((c.v_terms[&(0, 1)] - a.v_terms[&(0, 1)]).abs() < 1e-12);
        assert!(c.v_terms[&(0, 2)].abs() < 1e-12);
    }

    #[test]
    fn passivity_examples() {
        let m = minimal(1.0, 1.5);
        let x = Pauli::X.matrix();
        let report = passivity_check(&m, &[0], &[1], &[Matrix::identity(2), x], 200, 7).unwrap();
        assert!(report.entries[0].defect.abs() < 1e-12);
        let expected = 2.0 / 3.25f64.sqrt();
        assert!((report.entries[1].defect - expected).abs() < 1e-12);
        assert!(report.is_passive());
        for e in &report.entries {
            assert!((e.defect - e.defect_via_trace).abs() < 1e-9);
        }
    }

    #[test]
    fn haar_unitaries_are_unitary_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let (u, v) = (haar_unitary(4, &mut a), haar_unitary(4, &mut b));
        assert!(u.unitarity_defect() < 1e-12);
        assert_eq!(u.data(), v.data());
    }

    #[test]
    fn time_evolution_bookkeeping() {
        let m = extended(1.0, 4.0);
        let times: Vec<f64> = (0..50).map(|i| 2.0 * i as f64 / 49.0).collect();
        let r = time_evolution_report(&m, &[0], &times).unwrap();
        for series in r.v_terms.values() {
            assert!(series[0].abs() < 1e-9);
        }
        let at_zero: f64 = r.h_terms.values().map(|s| s[0]).sum::<f64>() + r.v_terms.values().map(|s| s[0]).sum::<f64>();
        assert!((at_zero - r.deposit).abs() < 1e-9);
        assert!(r.max_total_drift() < 1e-9);
    }

    #[test]
    fn entropy_examples() {
        let p = ModelParams::minimal(1.0, 1.5).unwrap();
        let m = build(p).unwrap();
        let g = crate::model::analytic_ground_minimal(p).unwrap();
        let a2 = g.amplitudes()[0].norm_sqr();
        let b2 = g.amplitudes()[3].norm_sqr();
        let r = entropy_change(&m, &[0], &[0]).unwrap();
        assert!((r.s_before - (-a2 * a2.ln() - b2 * b2.ln())).abs() < 1e-10);

        let m = extended(1.0, 4.0);
        let r = entropy_change(&m, &[0], &[0]).unwrap();
        assert!(r.s_after_weighted.abs() < 1e-8);
        assert!((r.delta - r.s_before).abs() < 1e-8);

        let m = minimal(1.0, 1e-7);
        let r = entropy_change(&m, &[0], &[0]).unwrap();
        assert!(r.s_before < 1e-8 && r.delta.abs() < 1e-8);

        assert!(entropy_change(&m, &[0], &[]).is_err());
        assert!(entropy_change(&m, &[0], &[0, 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn rho_qet_is_a_state(h in 0.2f64..5.0, k in 0.2f64..5.0, phi in 0.0f64..FRAC_PI_2) {
            let m = extended(h, k);
            for variant in [ProtocolVariant::Miso, ProtocolVariant::Simo] {
                let r = run(&m, variant, phi).unwrap();
                prop_assert!((r.rho_qet.matrix().trace().re - 1.0).abs() < 1e-10);
                prop_assert!(r.energy_balance_defect() < 1e-9);
            }
        }

        #[test]
        fn minimal_closed_form_across_grid(h in 0.2f64..5.0, k in 0.2f64..5.0) {
            let m = minimal(h, k);
            let a = compute_angles(&m, 0, 1).unwrap();
            let r = run_minimal(&m, a.phi).unwrap();
            prop_assert!((r.receiver_energy - a.closed_form_receiver_energy()).abs() < 1e-9);
            let norm = a.xi.hypot(a.eta);
            prop_assert!(((2.0 * a.phi).cos() - a.xi / norm).abs() < 1e-9);
            prop_assert!(((2.0 * a.phi).sin().abs() - a.eta.abs() / norm).abs() < 1e-9);
        }

        #[test]
        fn fixed_receiver_unitary_extracts_nothing(h in 0.2f64..5.0, k in 0.2f64..5.0, seed in any::<u64>()) {
            let m = extended(h, k);
            let report = passivity_check(&m, &[0], &[2], &[], 5, seed).unwrap();
            prop_assert!(report.min_defect() >= -1e-9);
        }
    }
}

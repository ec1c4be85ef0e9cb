//! Transverse-field Ising Hamiltonians on two and three qubits, shifted so the
//! ground state has zero energy in every local and coupling term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigh, embed, Expectation, HermitianOperator, Matrix, Pauli, StateVector, C64};
use crate::protocol;

const ZERO_MEAN_TOL: f64 = 1e-9;
const GROUND_GAP_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Two qubits, `H_n = hZ_n`, `V = 2k X0X1`.
    Minimal2,
    /// Three qubits, `H_n = hZ_n`, `V_ij = k X_iX_j` on every pair.
    Extended3,
}

impl ModelVariant {
    pub fn n_qubits(self) -> usize {
        match self {
            ModelVariant::Minimal2 => 2,
            ModelVariant::Extended3 => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Transverse field strength.
    pub h: f64,
    /// Coupling strength.
    pub k: f64,
    pub variant: ModelVariant,
}

impl ModelParams {
    pub fn new(h: f64, k: f64, variant: ModelVariant) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidParams(format!("h must be positive and finite, got {h}")));
        }
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidParams(format!("k must be positive and finite, got {k}")));
        }
        Ok(Self { h, k, variant })
    }

    pub fn minimal(h: f64, k: f64) -> Result<Self> {
        Self::new(h, k, ModelVariant::Minimal2)
    }

    pub fn extended(h: f64, k: f64) -> Result<Self> {
        Self::new(h, k, ModelVariant::Extended3)
    }

    pub fn n_qubits(&self) -> usize {
        self.variant.n_qubits()
    }
}

/// `H_n = strength · Z_n + offset`
#[derive(Clone, Debug)]
pub struct LocalTerm {
    pub site: usize,
    pub strength: f64,
    pub offset: f64,
    pub operator: HermitianOperator,
}

/// `V_ij = strength · X_i X_j + offset`
#[derive(Clone, Debug)]
pub struct CouplingTerm {
    pub sites: (usize, usize),
    pub strength: f64,
    pub offset: f64,
    pub operator: HermitianOperator,
}

impl CouplingTerm {
    pub fn touches(&self, site: usize) -> bool {
        self.sites.0 == site || self.sites.1 == site
    }
}

#[derive(Clone, Debug)]
pub struct ModelInstance {
    pub params: ModelParams,
    pub locals: Vec<LocalTerm>,
    pub couplings: Vec<CouplingTerm>,
    pub total: HermitianOperator,
    pub ground: StateVector,
    /// Lowest eigenvalue of `total` (zero up to rounding).
    pub ground_energy: f64,
}

impl ModelInstance {
    pub fn n_qubits(&self) -> usize {
        self.params.n_qubits()
    }

    pub fn local(&self, site: usize) -> Option<&LocalTerm> {
        self.locals.iter().find(|t| t.site == site)
    }

    pub fn coupling(&self, i: usize, j: usize) -> Option<&CouplingTerm> {
        let key = (i.min(j), i.max(j));
        self.couplings.iter().find(|c| (c.sites.0.min(c.sites.1), c.sites.0.max(c.sites.1)) == key)
    }

    /// Sum of every scalar offset.
    pub fn offset_sum(&self) -> f64 {
        self.locals.iter().map(|t| t.offset).sum::<f64>()
            + self.couplings.iter().map(|c| c.offset).sum::<f64>()
    }

    /// `H_tot` without its scalar offsets.
    pub fn traceless_total(&self) -> HermitianOperator {
        self.total.shifted(-self.offset_sum())
    }

    /// Checks zero-mean terms, the term sum and the zero ground energy.
    pub fn check_invariants(&self) -> Result<()> {
        let g = &self.ground;
        let e = g.expectation(&self.total)?;
        if e.abs() > ZERO_MEAN_TOL {
            return Err(Error::Invariant(format!("<g|H_tot|g> = {e:e}")));
        }
        for t in &self.locals {
            let e = g.expectation(&t.operator)?;
            if e.abs() > ZERO_MEAN_TOL {
                return Err(Error::Invariant(format!("<g|H_{}|g> = {e:e}", t.site)));
            }
        }
        for c in &self.couplings {
            let e = g.expectation(&c.operator)?;
            if e.abs() > ZERO_MEAN_TOL {
                return Err(Error::Invariant(format!("<g|V_{}{}|g> = {e:e}", c.sites.0, c.sites.1)));
            }
        }
        let dim = self.total.dim();
        let sum = HermitianOperator::sum(
            dim,
            self.locals.iter().map(|t| &t.operator).chain(self.couplings.iter().map(|c| &c.operator)),
        )?;
        let defect = sum.matrix().max_abs_diff(self.total.matrix());
        if defect > 1e-12 {
            return Err(Error::Invariant(format!("H_tot differs from its term sum by {defect:e}")));
        }
        if self.ground_energy.abs() > ZERO_MEAN_TOL {
            return Err(Error::Invariant(format!("lowest eigenvalue of H_tot is {:e}", self.ground_energy)));
        }
        Ok(())
    }
}

fn z_at(site: usize, n: usize) -> Result<HermitianOperator> {
    HermitianOperator::embed(&Pauli::Z.operator(), &[site], n)
}

fn xx_at(i: usize, j: usize, n: usize) -> Result<HermitianOperator> {
    let x = Pauli::X.matrix();
    HermitianOperator::new(&embed(&x, &[i], n)? * &embed(&x, &[j], n)?)
}

/// Makes the largest-magnitude amplitude real and negative.
fn fix_global_phase(state: &StateVector) -> StateVector {
    let amps = state.amplitudes();
    let max = amps.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let pivot = amps.iter().find(|z| z.norm() >= max - 1e-12).copied().unwrap_or(C64::new(1.0, 0.0));
    state.with_phase(-pivot.conj() / pivot.norm())
}

pub fn build(params: ModelParams) -> Result<ModelInstance> {
    match params.variant {
        ModelVariant::Minimal2 => build_minimal(params),
        ModelVariant::Extended3 => build_extended(params),
    }
}

fn lowest_two(op: &HermitianOperator) -> Result<(f64, f64, StateVector, StateVector)> {
    let eig = eigh(op)?;
    Ok((eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvector(0), eig.eigenvector(1)))
}

fn finish(params: ModelParams, locals: Vec<LocalTerm>, couplings: Vec<CouplingTerm>) -> Result<ModelInstance> {
    let n = params.n_qubits();
    let total = HermitianOperator::sum(
        1 << n,
        locals.iter().map(|t| &t.operator).chain(couplings.iter().map(|c| &c.operator)),
    )?;
    let (e0, e1, v0, v1) = lowest_two(&total)?;
    if e1 - e0 < GROUND_GAP_TOL {
        return Err(Error::DegenerateGround {
            gap: e1 - e0,
            candidates: Box::new([v0.amplitudes().to_vec(), v1.amplitudes().to_vec()]),
        });
    }
    let model = ModelInstance {
        params,
        locals,
        couplings,
        total,
        ground: fix_global_phase(&v0),
        ground_energy: e0,
    };
    model.check_invariants()?;
    Ok(model)
}

/// Two-qubit model with the closed-form zero-mean offsets.
pub fn build_minimal(params: ModelParams) -> Result<ModelInstance> {
    if params.variant != ModelVariant::Minimal2 {
        return Err(Error::InvalidParams("build_minimal needs the two-qubit variant".into()));
    }
    let ModelParams { h, k, .. } = params;
    let r = h.hypot(k);
    let local_offset = h * h / r;
    let coupling_offset = 2.0 * k * k / r;
    let locals = (0..2)
        .map(|site| {
            Ok(LocalTerm {
                site,
                strength: h,
                offset: local_offset,
                operator: z_at(site, 2)?.scaled(h).shifted(local_offset),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let couplings = vec![CouplingTerm {
        sites: (0, 1),
        strength: 2.0 * k,
        offset: coupling_offset,
        operator: xx_at(0, 1, 2)?.scaled(2.0 * k).shifted(coupling_offset),
    }];
    finish(params, locals, couplings)
}

/// Coupled pairs of the three-qubit model, in the order the terms are summed.
pub const EXTENDED_PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Three-qubit model; offsets are the negated ground-state means of each
/// traceless term, which leaves the eigenvectors untouched.
pub fn build_extended(params: ModelParams) -> Result<ModelInstance> {
    if params.variant != ModelVariant::Extended3 {
        return Err(Error::InvalidParams("build_extended needs the three-qubit variant".into()));
    }
    let ModelParams { h, k, .. } = params;
    let zs = (0..3).map(|s| Ok(z_at(s, 3)?.scaled(h))).collect::<Result<Vec<_>>>()?;
    let xxs = EXTENDED_PAIRS
        .iter()
        .map(|&(i, j)| Ok(xx_at(i, j, 3)?.scaled(k)))
        .collect::<Result<Vec<_>>>()?;
    let traceless = HermitianOperator::sum(8, zs.iter().chain(xxs.iter()))?;
    let (e0, e1, v0, v1) = lowest_two(&traceless)?;
    if e1 - e0 < GROUND_GAP_TOL {
        return Err(Error::DegenerateGround {
            gap: e1 - e0,
            candidates: Box::new([v0.amplitudes().to_vec(), v1.amplitudes().to_vec()]),
        });
    }
    let locals = zs
        .into_iter()
        .enumerate()
        .map(|(site, op)| {
            let offset = -v0.expectation(&op)?;
            Ok(LocalTerm { site, strength: h, offset, operator: op.shifted(offset) })
        })
        .collect::<Result<Vec<_>>>()?;
    let couplings = xxs
        .into_iter()
        .zip(EXTENDED_PAIRS)
        .map(|(op, sites)| {
            let offset = -v0.expectation(&op)?;
            Ok(CouplingTerm { sites, strength: k, offset, operator: op.shifted(offset) })
        })
        .collect::<Result<Vec<_>>>()?;
    finish(params, locals, couplings)
}

/// `(1/√2)√(1−h/r)|00⟩ − (1/√2)√(1+h/r)|11⟩` with `r = √(h²+k²)`.
pub fn analytic_ground_minimal(params: ModelParams) -> Result<StateVector> {
    if params.variant != ModelVariant::Minimal2 {
        return Err(Error::InvalidParams("closed-form ground state exists for the two-qubit variant only".into()));
    }
    let ratio = params.h / params.h.hypot(params.k);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    StateVector::from_real(&[s * (1.0 - ratio).sqrt(), 0.0, 0.0, -s * (1.0 + ratio).sqrt()])
}

/// Closed-form coefficients of the three-qubit ground state. Diagnostic only:
/// nothing here feeds back into operator construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedFormCoefficients {
    /// `√(h² + hk + k²)`
    pub k_norm: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    /// Root of the polynomial condition, if it could be bracketed.
    pub x: Option<f64>,
    /// Local offset implied by `x`.
    pub l: Option<f64>,
    /// Coupling offset implied by `x`.
    pub coupling_offset: Option<f64>,
    /// `|condition(x)|` at the stored root.
    pub residual: Option<f64>,
}

impl ClosedFormCoefficients {
    pub fn available(&self) -> bool {
        self.x.is_some()
    }
}

/// Evaluates the printed coefficient formulas. The symbol appearing there
/// without definition is read as the field strength `h`, which makes
/// `M1 = M2 = M3` as the permutation symmetry of the model demands.
pub fn closed_form_coefficients(params: ModelParams) -> Result<ClosedFormCoefficients> {
    if params.variant != ModelVariant::Extended3 {
        return Err(Error::InvalidParams("closed-form coefficients exist for the three-qubit variant only".into()));
    }
    let ModelParams { h, k, .. } = params;
    let kn = (h * h + h * k + k * k).sqrt();
    let a = h;
    let p = |e: i32| h.powi(e);
    let q = |e: i32| k.powi(e);

    let m1 = (8.0 * p(3) * k - 4.0 * p(2) * q(2) + 8.0 * p(2) * k * kn + 5.0 * h * q(3)
        - 8.0 * a * q(2) * kn
        - 6.0 * q(4)
        + 6.0 * q(3) * kn)
        / (32.0 * p(4) + 32.0 * p(3) * kn + 18.0 * p(2) * q(2) - 16.0 * p(2) * k * kn - 11.0 * h * q(3)
            + 14.0 * a * q(2) * kn
            + 6.0 * q(4)
            - 6.0 * q(3) * kn);
    let m2 = (32.0 * p(5) * k - 16.0 * p(4) * q(2) + 32.0 * p(4) * k * kn + 30.0 * p(3) * q(3)
        - 32.0 * p(3) * q(2) * kn
        - 26.0 * p(2) * q(4)
        + 34.0 * p(2) * q(3) * kn
        + 19.0 * h * q(5)
        - 25.0 * h * q(4) * kn
        - 12.0 * q(6)
        + 12.0 * q(5) * kn)
        / (128.0 * p(6) + 128.0 * p(5) * kn + 112.0 * p(4) * q(2) - 64.0 * p(4) * k * kn
            - 68.0 * p(3) * q(3)
            + 96.0 * p(3) * q(2) * kn
            + 54.0 * p(2) * q(4)
            - 68.0 * p(2) * q(3) * kn
            - 31.0 * h * q(5)
            + 37.0 * h * q(4) * kn
            + 12.0 * q(6)
            - 12.0 * q(5) * kn);
    let m3 = (128.0 * p(6) * k - 64.0 * p(5) * q(2) + 128.0 * p(5) * k * kn + 144.0 * p(4) * q(3)
        - 128.0 * p(4) * q(2) * kn
        - 128.0 * p(3) * q(4)
        + 160.0 * p(3) * q(3) * kn
        + 106.0 * p(2) * q(5)
        - 136.0 * p(2) * q(4) * kn
        - 69.0 * h * q(6)
        + 87.0 * h * q(5) * kn
        + 36.0 * q(7)
        - 36.0 * q(6) * kn)
        / (512.0 * p(7) + 512.0 * p(6) * kn + 544.0 * p(5) * q(2) - 256.0 * p(5) * k * kn
            - 320.0 * p(4) * q(3)
            + 480.0 * p(4) * q(2) * kn
            + 306.0 * p(3) * q(4)
            - 368.0 * p(3) * q(3) * kn
            - 202.0 * p(2) * q(5)
            + 250.0 * p(2) * q(4) * kn
            + 105.0 * h * q(6)
            - 123.0 * h * q(5) * kn
            - 36.0 * q(7)
            + 36.0 * q(6) * kn);

    let denom = 3.0 * (h - k) + 6.0 * kn;
    let l_of = |x: f64| (5.0 * h * h + 2.0 * h * k + 4.0 * h * kn + 5.0 * k * k - 4.0 * k * kn - x) / denom;
    let condition = |x: f64| {
        let l = l_of(x);
        -h + (-h + l) * m1 * m1 + (h + l) * m2 * m2 + (h + l) * m3 * m3 + l
    };

    let mut coeffs = ClosedFormCoefficients {
        k_norm: kn,
        m1,
        m2,
        m3,
        x: None,
        l: None,
        coupling_offset: None,
        residual: None,
    };
    if let Some(x) = bracket_and_bisect(condition) {
        coeffs.x = Some(x);
        coeffs.l = Some(l_of(x));
        coeffs.coupling_offset = Some(x / denom);
        coeffs.residual = Some(condition(x).abs());
    }
    Ok(coeffs)
}

fn bracket_and_bisect(f: impl Fn(f64) -> f64) -> Option<f64> {
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut expansions = 0;
    while f(lo).signum() == f(hi).signum() {
        if expansions == 64 || !f(lo).is_finite() || !f(hi).is_finite() {
            return None;
        }
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
    }
    let f_lo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Some(mid);
        }
        if fm.signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// One row of the eigensolver-vs-closed-form amplitude table, normalized to
/// the `|111>` amplitude.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmplitudeComparison {
    pub basis: String,
    pub eigensolver: f64,
    pub closed_form: f64,
}

pub fn compare_ground_amplitudes(model: &ModelInstance, coeffs: &ClosedFormCoefficients) -> Vec<AmplitudeComparison> {
    let amps = model.ground.amplitudes();
    let anchor = amps[7];
    let pattern = [0.0, -coeffs.m3, -coeffs.m2, 0.0, -coeffs.m1, 0.0, 0.0, 1.0];
    (0..8)
        .map(|i| AmplitudeComparison {
            basis: format!("{i:03b}"),
            eigensolver: (amps[i] / anchor).re,
            closed_form: pattern[i],
        })
        .collect()
}

/// Which sign of `sin 2φ` relative to `η` was used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `sin 2φ = −η / √(ξ²+η²)`
    NegativeEta,
    /// `sin 2φ = +η / √(ξ²+η²)`
    PositiveEta,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProtocolAngles {
    /// `<g|σ_r H σ_r|g>`
    pub xi: f64,
    /// `<g|σ_s · i[H, σ_r]|g>`
    pub eta: f64,
    /// Half-angle of the receiver rotation `R_Y(2φ)`, in `(−π/2, π/2]`.
    pub phi: f64,
    pub sign_convention: SignConvention,
}

impl ProtocolAngles {
    /// `½[ξ − √(ξ²+η²)]`
    pub fn closed_form_receiver_energy(&self) -> f64 {
        0.5 * (self.xi - self.xi.hypot(self.eta))
    }
}

/// `φ` with `sin 2φ = hk / √((h²+2k²)² + h²k²)` for the two-qubit model.
pub fn minimal_closed_form_phi(params: ModelParams) -> f64 {
    let ModelParams { h, k, .. } = params;
    let s = h * k / ((h * h + 2.0 * k * k).powi(2) + h * h * k * k).sqrt();
    0.5 * s.asin()
}

/// Feedback angles for one sender/receiver pair, with the `sin 2φ` sign that
/// minimizes the receiver's energy.
pub fn compute_angles(model: &ModelInstance, sender: usize, receiver: usize) -> Result<ProtocolAngles> {
    let n = model.n_qubits();
    for site in [sender, receiver] {
        if site >= n {
            return Err(Error::SiteOutOfRange { site, n_qubits: n });
        }
    }
    if sender == receiver {
        return Err(Error::SiteOverlap(sender));
    }
    let y_r = embed(&Pauli::Y.matrix(), &[receiver], n)?;
    let x_s = embed(&Pauli::X.matrix(), &[sender], n)?;
    let h = model.total.matrix();

    let xi = model.ground.expectation(&model.total.conjugated_by(&y_r))?;

    let i = C64::new(0.0, 1.0);
    let commutator = (&(h * &y_r) - &(&y_r * h)).scale(i);
    let eta_op = HermitianOperator::new(&x_s * &commutator)?;
    let eta = model.ground.expectation(&eta_op)?;

    let norm = xi.hypot(eta);
    if norm < 1e-14 {
        return Err(Error::TrivialAngles);
    }
    let candidates = [
        (SignConvention::PositiveEta, 0.5 * eta.atan2(xi)),
        (SignConvention::NegativeEta, 0.5 * (-eta).atan2(xi)),
    ];
    let mut best = None;
    for (convention, phi) in candidates {
        let e = protocol::two_party_receiver_energy(model, sender, receiver, phi)?;
        if best.is_none_or(|(_, _, be)| e < be - 1e-15) {
            best = Some((convention, phi, e));
        }
    }
    let (sign_convention, phi, _) = best.expect("two candidates");
    Ok(ProtocolAngles { xi, eta, phi, sign_convention })
}

/// `Z_0 Z_1 ... Z_{n-1}`, the parity that commutes with both models.
pub fn z_parity(n: usize) -> Matrix {
    (1..n).fold(Pauli::Z.matrix(), |acc, _| crate::linalg::Kron::kron(&acc, &Pauli::Z.matrix()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z_expect(model: &ModelInstance, site: usize) -> f64 {
        model.ground.expectation(&z_at(site, model.n_qubits()).unwrap()).unwrap()
    }

    #[test]
    fn params_must_be_positive() {
        assert!(ModelParams::minimal(0.0, 1.0).is_err());
        assert!(ModelParams::minimal(1.0, -1.0).is_err());
        assert!(ModelParams::extended(f64::NAN, 1.0).is_err());
        assert!(build_minimal(ModelParams::extended(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn minimal_offsets_and_ground() {
        let m = build_minimal(ModelParams::minimal(1.0, 1.5).unwrap()).unwrap();
        let expected = 1.0 / 3.25f64.sqrt();
        assert!((m.locals[0].offset - expected).abs() < 1e-15);
        assert!((m.locals[0].offset - 0.5547).abs() < 1e-4);
        assert!((z_expect(&m, 0) + expected).abs() < 1e-12);
        assert!(m.ground.expectation(&m.total).unwrap().abs() < 1e-12);
    }

    #[test]
    fn minimal_ground_matches_closed_form() {
        let p = ModelParams::minimal(1.0, 1.5).unwrap();
        let m = build_minimal(p).unwrap();
        let analytic = analytic_ground_minimal(p).unwrap();
        assert!((analytic.norm() - 1.0).abs() < 1e-15);
        assert!((m.ground.fidelity(&analytic).unwrap() - 1.0).abs() < 1e-9);
        // The phase convention reproduces the printed signs exactly.
        let diff: f64 = m.ground.amplitudes().iter().zip(analytic.amplitudes()).map(|(a, b)| (a - b).norm()).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn analytic_ground_small_field_limit() {
        let g = analytic_ground_minimal(ModelParams::minimal(1e-9, 1.0).unwrap()).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [s, 0.0, 0.0, -s];
        for (a, e) in g.amplitudes().iter().zip(expected) {
            assert!((a.re - e).abs() < 1e-8);
        }
    }

    #[test]
    fn extended_ground_support_and_deposit() {
        let m = build_extended(ModelParams::extended(1.0, 4.0).unwrap()).unwrap();
        for idx in [0b000, 0b011, 0b101, 0b110] {
            assert!(m.ground.amplitudes()[idx].norm() < 1e-9);
        }
        let deposit = -z_expect(&m, 0);
        assert!((deposit - 0.772).abs() < 0.01, "deposit {deposit}");
        assert!((m.locals[0].offset - deposit).abs() < 1e-12);
    }

    #[test]
    fn extended_offsets_cancel_ground_energy() {
        let m = build_extended(ModelParams::extended(1.0, 4.0).unwrap()).unwrap();
        let traceless = m.traceless_total();
        let e0 = eigh(&traceless).unwrap().eigenvalues[0];
        assert!((m.offset_sum() + e0).abs() < 1e-12);
        assert!(m.ground_energy.abs() < 1e-9);
    }

    #[test]
    fn extended_commutes_with_z_parity() {
        for (h, k) in [(1.0, 4.0), (0.3, 2.2), (5.0, 0.2)] {
            let m = build_extended(ModelParams::extended(h, k).unwrap()).unwrap();
            let p = z_parity(3);
            let a = m.total.matrix();
            assert!((&(a * &p) - &(&p * a)).norm() < 1e-10);
        }
    }

    #[test]
    fn x_flip_is_not_a_symmetry() {
        let m = build_extended(ModelParams::extended(1.0, 4.0).unwrap()).unwrap();
        let x = Pauli::X.matrix();
        let xxx = crate::linalg::Kron::kron(&crate::linalg::Kron::kron(&x, &x), &x);
        let a = m.total.matrix();
        assert!((&(a * &xxx) - &(&xxx * a)).norm() > 1.0);
    }

    #[test]
    fn closed_form_norms() {
        let c = closed_form_coefficients(ModelParams::extended(1.0, 4.0).unwrap()).unwrap();
        assert!((c.k_norm - 21f64.sqrt()).abs() < 1e-12);
        assert!((c.k_norm - 4.5826).abs() < 1e-4);
        let c = closed_form_coefficients(ModelParams::extended(1.0, 1.0).unwrap()).unwrap();
        assert!((c.k_norm - 3f64.sqrt()).abs() < 1e-12);
        assert!(closed_form_coefficients(ModelParams::minimal(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn closed_form_diagnostics_track_the_eigensolver() {
        let p = ModelParams::extended(1.0, 4.0).unwrap();
        let m = build_extended(p).unwrap();
        let c = closed_form_coefficients(p).unwrap();
        assert!(c.available());
        assert!(c.residual.unwrap() < 1e-9);
        for row in compare_ground_amplitudes(&m, &c) {
            assert!((row.eigensolver - row.closed_form).abs() < 1e-9, "{row:?}");
        }
        assert!((c.l.unwrap() - m.locals[0].offset).abs() < 1e-9);
        assert!((c.coupling_offset.unwrap() - m.couplings[0].offset).abs() < 1e-9);
    }

    #[test]
    fn minimal_angles() {
        let m = build_minimal(ModelParams::minimal(1.0, 1.5).unwrap()).unwrap();
        let a = compute_angles(&m, 0, 1).unwrap();
        let r = 3.25f64.sqrt();
        assert!((a.xi - (2.0 + 4.0 * 2.25) / r).abs() < 1e-12);
        assert!((a.eta - 3.0 / r).abs() < 1e-12);
        assert!((a.eta - 1.6641).abs() < 1e-4);
        assert_eq!(a.sign_convention, SignConvention::PositiveEta);
        assert!((a.phi - minimal_closed_form_phi(m.params)).abs() < 1e-12);
        assert!((0.0..=std::f64::consts::FRAC_PI_2).contains(&a.phi));
    }

    #[test]
    fn extended_eta_is_shared_by_both_senders() {
        let m = build_extended(ModelParams::extended(1.0, 4.0).unwrap()).unwrap();
        let a = compute_angles(&m, 0, 2).unwrap();
        let c = compute_angles(&m, 1, 2).unwrap();
        assert!((a.eta - c.eta).abs() < 1e-9);
        assert!((a.xi - c.xi).abs() < 1e-9);
    }

    #[test]
    fn angles_reject_bad_sites() {
        let m = build_minimal(ModelParams::minimal(1.0, 1.0).unwrap()).unwrap();
        assert!(matches!(compute_angles(&m, 1, 1), Err(Error::SiteOverlap(1))));
        assert!(compute_angles(&m, 0, 2).is_err());
    }

    #[test]
    fn traceless_shift_moves_xi_only() {
        let m = build_extended(ModelParams::extended(1.3, 2.1).unwrap()).unwrap();
        let a = compute_angles(&m, 0, 2).unwrap();
        let mut shifted = m.clone();
        shifted.total = m.traceless_total();
        let b = compute_angles(&shifted, 0, 2).unwrap();
        assert!((a.xi - b.xi - m.offset_sum()).abs() < 1e-10);
        assert!((a.eta - b.eta).abs() < 1e-10);
    }

    #[test]
    fn grid_invariants_hold() {
        for i in 0..10 {
            for j in 0..10 {
                let h = 0.2 + 4.8 * i as f64 / 9.0;
                let k = 0.2 + 4.8 * j as f64 / 9.0;
                let m = build_minimal(ModelParams::minimal(h, k).unwrap()).unwrap();
                let analytic = analytic_ground_minimal(m.params).unwrap();
                assert!(m.ground.fidelity(&analytic).unwrap() >= 1.0 - 1e-9);
                let e = build_extended(ModelParams::extended(h, k).unwrap()).unwrap();
                let odd: f64 = [1usize, 2, 4, 7].iter().map(|&i| e.ground.amplitudes()[i].norm_sqr()).sum();
                assert!(odd > 1.0 - 1e-12, "ground state left the odd sector at ({h},{k})");
            }
        }
    }
}

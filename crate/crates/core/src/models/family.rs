//! Parameterised sinusoid image families and their analytic derivatives.
//!
//! Every family is a sum of sinusoid components whose amplitudes add to one.
//! Linear components evaluate `sin(ω (x cos β + y sin β + φ))`; radial components
//! evaluate `sin(ω r + φ)` with `r` measured from the origin or, for the second
//! component of [`Family::DoubleRadial`], from the offset `(x₀, y₀)`.
//!
//! Parameter order within a [`ParamVector`]:
//!
//! | family         | values                                               |
//! |----------------|------------------------------------------------------|
//! | `SingleLinear` | ω, β, φ                                              |
//! | `DoubleLinear` | a₁, ω₁, β₁, φ₁, ω₂, β₂, φ₂                           |
//! | `TripleLinear` | a₁, a₂, ω₁, β₁, φ₁, ω₂, β₂, φ₂, ω₃, β₃, φ₃           |
//! | `RadialLinear` | a, ω_r, φ_r, ω_l, β_l, φ_l                           |
//! | `DoubleRadial` | a₁, ω₁, φ₁, ω₂, φ₂, x₀, y₀                           |
//!
//! The last amplitude is implied (`1 − Σ` of the free ones).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::image::{RawImage, Transmittance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SingleLinear,
    DoubleLinear,
    TripleLinear,
    RadialLinear,
    DoubleRadial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Amplitude,
    Frequency,
    Angle,
    Phase,
    Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shape {
    Linear,
    Radial,
}

/// Indices of one component's parameters inside the value vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Component {
    pub shape: Shape,
    pub omega: usize,
    pub beta: Option<usize>,
    pub phase: usize,
    pub offset: Option<(usize, usize)>,
}

const fn lin(omega: usize) -> Component {
    Component { shape: Shape::Linear, omega, beta: Some(omega + 1), phase: omega + 2, offset: None }
}

const fn rad(omega: usize) -> Component {
    Component { shape: Shape::Radial, omega, beta: None, phase: omega + 1, offset: None }
}

const SINGLE: [Component; 1] = [lin(0)];
const DOUBLE: [Component; 2] = [lin(1), lin(4)];
const TRIPLE: [Component; 3] = [lin(2), lin(5), lin(8)];
const RADIAL_LINEAR: [Component; 2] = [rad(1), lin(3)];
const DOUBLE_RADIAL: [Component; 2] = [
    rad(1),
    Component { shape: Shape::Radial, omega: 3, beta: None, phase: 4, offset: Some((5, 6)) },
];

impl Family {
    pub const ALL: [Family; 5] = [
        Family::SingleLinear,
        Family::DoubleLinear,
        Family::TripleLinear,
        Family::RadialLinear,
        Family::DoubleRadial,
    ];

    pub fn n_params(self) -> usize {
        match self {
            Family::SingleLinear => 3,
            Family::DoubleLinear => 7,
            Family::TripleLinear => 11,
            Family::RadialLinear => 6,
            Family::DoubleRadial => 7,
        }
    }

    /// Number of free amplitudes; they occupy the leading slots.
    pub fn n_free_amplitudes(self) -> usize {
        self.components().len() - 1
    }

    pub(crate) fn components(self) -> &'static [Component] {
        match self {
            Family::SingleLinear => &SINGLE,
            Family::DoubleLinear => &DOUBLE,
            Family::TripleLinear => &TRIPLE,
            Family::RadialLinear => &RADIAL_LINEAR,
            Family::DoubleRadial => &DOUBLE_RADIAL,
        }
    }

    /// True when components are interchangeable (all linear), so labels are arbitrary.
    pub fn exchangeable(self) -> bool {
        matches!(self, Family::DoubleLinear | Family::TripleLinear)
    }

    pub fn is_radial(self) -> bool {
        matches!(self, Family::RadialLinear | Family::DoubleRadial)
    }

    pub fn param_kinds(self) -> Vec<ParamKind> {
        let mut kinds = vec![ParamKind::Amplitude; self.n_params()];
        for c in self.components() {
            kinds[c.omega] = ParamKind::Frequency;
            kinds[c.phase] = ParamKind::Phase;
            if let Some(b) = c.beta {
                kinds[b] = ParamKind::Angle;
            }
            if let Some((x0, y0)) = c.offset {
                kinds[x0] = ParamKind::Offset;
                kinds[y0] = ParamKind::Offset;
            }
        }
        kinds
    }

    pub fn param_names(self) -> Vec<String> {
        match self {
            Family::SingleLinear => vec!["omega".into(), "beta".into(), "phi".into()],
            Family::RadialLinear => ["a", "omega_r", "phi_r", "omega_l", "beta_l", "phi_l"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Family::DoubleRadial => ["a1", "omega1", "phi1", "omega2", "phi2", "x0", "y0"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Family::DoubleLinear | Family::TripleLinear => {
                let n = self.components().len();
                let mut names: Vec<String> = (1..n).map(|i| format!("a{i}")).collect();
                for i in 1..=n {
                    names.extend([format!("omega{i}"), format!("beta{i}"), format!("phi{i}")]);
                }
                names
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::SingleLinear => "single_linear",
            Family::DoubleLinear => "double_linear",
            Family::TripleLinear => "triple_linear",
            Family::RadialLinear => "radial_linear",
            Family::DoubleRadial => "double_radial",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == norm || f.as_str().replace('_', "") == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family {s:?}")))
    }
}

/// Parameter values for one family, in the order documented at module level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub family: Family,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(family: Family, values: Vec<f64>) -> Result<Self> {
        if values.len() != family.n_params() {
            return Err(Error::InvalidArgument(format!(
                "{family} takes {} parameters, got {}",
                family.n_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameter values must be finite".into()));
        }
        Ok(Self { family, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All component amplitudes, including the implied last one.
    pub fn amplitudes(&self) -> Vec<f64> {
        let n_free = self.family.n_free_amplitudes();
        let mut amps: Vec<f64> = self.values[..n_free].to_vec();
        amps.push(1.0 - amps.iter().sum::<f64>());
        amps
    }

    /// Checks the amplitude constraint and, optionally, the bounds.
    pub fn validate(&self, bounds: Option<&ParamBounds>) -> Result<()> {
        const TOL: f64 = 1e-12;
        if self.amplitudes().iter().any(|&a| !(-TOL..=1.0 + TOL).contains(&a)) {
            return Err(Error::InvalidArgument(format!(
                "amplitudes {:?} outside [0, 1]",
                self.amplitudes()
            )));
        }
        if let Some(b) = bounds {
            if b.family != self.family {
                return Err(Error::InvalidArgument("bounds belong to another family".into()));
            }
            for (i, (&v, &(lo, hi))) in self.values.iter().zip(&b.ranges).enumerate() {
                if v < lo || v > hi {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {} = {v} outside [{lo}, {hi}]",
                        self.family.param_names()[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reduced representative used for reporting.
    ///
    /// Linear components get ω > 0, β ∈ [−π/2, π/2) and φ ∈ [−π/ω, π/ω), using the
    /// identities `(ω, β, φ) ≡ (−ω, β + π, −φ)` and `(ω, β, φ) ≡ (ω, β + π, π/ω − φ)`.
    /// Radial components get ω > 0 and φ ∈ [−π, π) via `(ω, φ) ≡ (−ω, π − φ)`.
    /// Exchangeable components are sorted by ascending ω.
    pub fn canonical(&self) -> ParamVector {
        let mut out = self.clone();
        let comps = self.family.components();
        for c in comps {
            canonicalise_component(&mut out.values, c);
        }
        if self.family.exchangeable() {
            let mut order: Vec<usize> = (0..comps.len()).collect();
            order.sort_by(|&i, &j| {
                out.values[comps[i].omega].total_cmp(&out.values[comps[j].omega])
            });
            out = out.permuted(&order);
        }
        out
    }

    /// Equivalent representative closest to `reference`.
    ///
    /// Used to compare estimates with truth: phases are unwrapped towards the
    /// reference, the β-flip symmetry is chosen per component and, for
    /// exchangeable families, the best component permutation is selected.
    pub fn aligned_to(&self, reference: &ParamVector) -> ParamVector {
        assert_eq!(self.family, reference.family, "alignment across families");
        let comps = self.family.components();
        let perms = if self.family.exchangeable() {
            permutations(comps.len())
        } else {
            vec![(0..comps.len()).collect()]
        };
        let kinds = self.family.param_kinds();
        let mut best: Option<(f64, ParamVector)> = None;
        for perm in perms {
            let mut cand = self.permuted(&perm);
            for c in comps {
                align_component(&mut cand.values, &reference.values, c);
            }
            let d: f64 = cand
                .values
                .iter()
                .zip(&reference.values)
                .zip(&kinds)
                .map(|((a, b), k)| ((a - b) / kind_scale(*k)).powi(2))
                .sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, cand));
            }
        }
        best.expect("at least one permutation").1
    }

    /// Max absolute parameter difference after aligning `self` to `reference`.
    pub fn aligned_max_abs_diff(&self, reference: &ParamVector) -> f64 {
        self.aligned_to(reference)
            .values
            .iter()
            .zip(&reference.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders components: new component `k` is old component `order[k]`.
    fn permuted(&self, order: &[usize]) -> ParamVector {
        let comps = self.family.components();
        let amps = self.amplitudes();
        let mut values = self.values.clone();
        for (k, &src) in order.iter().enumerate() {
            let (dst_c, src_c) = (&comps[k], &comps[src]);
            values[dst_c.omega] = self.values[src_c.omega];
            values[dst_c.phase] = self.values[src_c.phase];
            if let (Some(d), Some(s)) = (dst_c.beta, src_c.beta) {
                values[d] = self.values[s];
            }
        }
        let n_free = self.family.n_free_amplitudes();
        for (k, &src) in order.iter().take(n_free).enumerate() {
            values[k] = amps[src];
        }
        ParamVector { family: self.family, values }
    }
}

fn kind_scale(kind: ParamKind) -> f64 {
    match kind {
        ParamKind::Amplitude => 1.0,
        ParamKind::Frequency => 0.05,
        ParamKind::Angle | ParamKind::Phase => PI,
        ParamKind::Offset => 32.0,
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n <= 1 {
        return vec![(0..n).collect()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Wraps `x` into `[-period/2, period/2)`.
pub fn wrap_centered(x: f64, period: f64) -> f64 {
    let half = 0.5 * period;
    let r = (x + half).rem_euclid(period) - half;
    if r >= half {
        r - period
    } else {
        r
    }
}

/// Shifts `x` by a multiple of `period` to land as close to `target` as possible.
fn unwrap_near(x: f64, target: f64, period: f64) -> f64 {
    target + wrap_centered(x - target, period)
}

fn canonicalise_component(v: &mut [f64], c: &Component) {
    match c.shape {
        Shape::Linear => {
            let b = c.beta.expect("linear component has an angle");
            if v[c.omega] < 0.0 {
                v[c.omega] = -v[c.omega];
                v[b] += PI;
                v[c.phase] = -v[c.phase];
            }
            let w = v[c.omega];
            let mut beta = wrap_centered(v[b], 2.0 * PI);
            if !(-0.5 * PI..0.5 * PI).contains(&beta) && w > 0.0 {
                beta = wrap_centered(beta + PI, 2.0 * PI);
                v[c.phase] = PI / w - v[c.phase];
            }
            v[b] = beta;
            if w > 0.0 {
                v[c.phase] = wrap_centered(v[c.phase], 2.0 * PI / w);
            }
        }
        Shape::Radial => {
            if v[c.omega] < 0.0 {
                v[c.omega] = -v[c.omega];
                v[c.phase] = PI - v[c.phase];
            }
            v[c.phase] = wrap_centered(v[c.phase], 2.0 * PI);
        }
    }
}

fn align_component(v: &mut [f64], reference: &[f64], c: &Component) {
    match c.shape {
        Shape::Linear => {
            let b = c.beta.expect("linear component has an angle");
            if v[c.omega] < 0.0 {
                v[c.omega] = -v[c.omega];
                v[b] += PI;
                v[c.phase] = -v[c.phase];
            }
            let w = v[c.omega];
            let as_is = (v[b], v[c.phase]);
            let flipped = (v[b] + PI, if w > 0.0 { PI / w - v[c.phase] } else { v[c.phase] });
            let mut best = (f64::INFINITY, as_is);
            for (beta, phi) in [as_is, flipped] {
                let beta = unwrap_near(beta, reference[b], 2.0 * PI);
                let phi = if w > 0.0 {
                    unwrap_near(phi, reference[c.phase], 2.0 * PI / w)
                } else {
                    phi
                };
                let d = ((beta - reference[b]) / PI).powi(2)
                    + ((phi - reference[c.phase]) / PI).powi(2);
                if d < best.0 {
                    best = (d, (beta, phi));
                }
            }
            v[b] = best.1 .0;
            v[c.phase] = best.1 .1;
        }
        Shape::Radial => {
            if v[c.omega] < 0.0 {
                v[c.omega] = -v[c.omega];
                v[c.phase] = PI - v[c.phase];
            }
            v[c.phase] = unwrap_near(v[c.phase], reference[c.phase], 2.0 * PI);
        }
    }
}

/// Per-component constants hoisted out of the pixel loop.
#[derive(Clone, Copy)]
struct Prepared {
    comp: Component,
    amp: f64,
    omega: f64,
    cos_b: f64,
    sin_b: f64,
    phase: f64,
    x0: f64,
    y0: f64,
}

fn prepare(theta: &ParamVector) -> Vec<Prepared> {
    let v = &theta.values;
    theta
        .family
        .components()
        .iter()
        .zip(theta.amplitudes())
        .map(|(c, amp)| {
            let (sin_b, cos_b) = c.beta.map(|b| v[b].sin_cos()).unwrap_or((0.0, 1.0));
            let (x0, y0) = c.offset.map(|(i, j)| (v[i], v[j])).unwrap_or((0.0, 0.0));
            Prepared {
                comp: *c,
                amp,
                omega: v[c.omega],
                cos_b,
                sin_b,
                phase: v[c.phase],
                x0,
                y0,
            }
        })
        .collect()
}

impl Prepared {
    /// sin of the component argument at `(x, y)`.
    #[inline]
    fn value(&self, x: f64, y: f64) -> f64 {
        match self.comp.shape {
            Shape::Linear => (self.omega * (x * self.cos_b + y * self.sin_b + self.phase)).sin(),
            Shape::Radial => {
                let r = (x - self.x0).hypot(y - self.y0);
                (self.omega * r + self.phase).sin()
            }
        }
    }

    /// Returns sin(arg) and writes amplitude-weighted ∂f/∂θ for this component's own
    /// parameters into `grad`.
    #[inline]
    fn value_and_grad(&self, x: f64, y: f64, grad: &mut [f64]) -> f64 {
        let c = &self.comp;
        match c.shape {
            Shape::Linear => {
                let u = x * self.cos_b + y * self.sin_b;
                let (s, co) = (self.omega * (u + self.phase)).sin_cos();
                let ac = self.amp * co;
                grad[c.omega] = ac * (u + self.phase);
                grad[c.beta.unwrap()] = ac * self.omega * (y * self.cos_b - x * self.sin_b);
                grad[c.phase] = ac * self.omega;
                s
            }
            Shape::Radial => {
                let (dx, dy) = (x - self.x0, y - self.y0);
                let r = dx.hypot(dy);
                let (s, co) = (self.omega * r + self.phase).sin_cos();
                let ac = self.amp * co;
                grad[c.omega] = ac * r;
                grad[c.phase] = ac;
                if let Some((ix, iy)) = c.offset {
                    // the cone is not differentiable at its apex; use the zero subgradient
                    let (gx, gy) = if r > 0.0 { (-dx / r, -dy / r) } else { (0.0, 0.0) };
                    grad[ix] = ac * self.omega * gx;
                    grad[iy] = ac * self.omega * gy;
                }
                s
            }
        }
    }
}

/// Evaluates the raw sinusoid sum `f ∈ [−1, 1]` on the grid.
pub fn eval_raw(theta: &ParamVector, grid: &GridSpec) -> RawImage {
    let prepared = prepare(theta);
    let side = grid.side();
    RawImage(Array2::from_shape_fn((side, side), |(row, col)| {
        let (x, y) = grid.xy(row, col);
        prepared.iter().map(|p| p.amp * p.value(x, y)).sum()
    }))
}

/// Writes the transmittance `(1 + f)/2` into `out` (row-major) without allocating.
pub(crate) fn render_transmittance_into(theta: &ParamVector, grid: &GridSpec, out: &mut [f64]) {
    let prepared = prepare(theta);
    let side = grid.side();
    debug_assert_eq!(out.len(), side * side);
    for row in 0..side {
        let y = grid.coord(row);
        for col in 0..side {
            let x = grid.coord(col);
            let f: f64 = prepared.iter().map(|p| p.amp * p.value(x, y)).sum();
            out[row * side + col] = 0.5 * (1.0 + f);
        }
    }
}

/// Maps a raw image to transmittance `T = (1 + f)/2`.
pub fn to_transmittance(raw: &RawImage) -> Result<Transmittance> {
    const TOL: f64 = 1e-12;
    if let Some(bad) = raw.0.iter().find(|v| !(-1.0 - TOL..=1.0 + TOL).contains(*v)) {
        return Err(Error::InvalidArgument(format!("raw value {bad} outside [-1, 1]")));
    }
    Ok(Transmittance(raw.0.mapv(|f| (0.5 * (1.0 + f)).clamp(0.0, 1.0))))
}

/// `∂T/∂θ_k` stacked as `(n_θ, side, side)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianStack(pub Array3<f64>);

impl JacobianStack {
    pub fn n_params(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.0.shape()[1]
    }

    /// Layers flattened to an `n_θ × n_pix` row-major slice.
    pub fn as_rows(&self) -> &[f64] {
        self.0.as_slice().expect("jacobian stack is contiguous")
    }
}

/// Transmittance and its analytic Jacobian in one pass.
pub fn eval_with_jacobian(theta: &ParamVector, grid: &GridSpec) -> (Transmittance, JacobianStack) {
    let prepared = prepare(theta);
    let n = theta.len();
    let n_free = theta.family.n_free_amplitudes();
    let side = grid.side();
    let n_pix = grid.n_pix();
    let mut t = vec![0.0; n_pix];
    let mut jac = vec![0.0; n * n_pix];
    let mut grad = vec![0.0; n];
    let mut sines = vec![0.0; prepared.len()];
    for row in 0..side {
        let y = grid.coord(row);
        for col in 0..side {
            let x = grid.coord(col);
            let p = row * side + col;
            let mut f = 0.0;
            for (k, comp) in prepared.iter().enumerate() {
                let s = comp.value_and_grad(x, y, &mut grad);
                sines[k] = s;
                f += comp.amp * s;
            }
            let last = sines[prepared.len() - 1];
            for (k, g) in grad.iter_mut().take(n_free).enumerate() {
                *g = sines[k] - last;
            }
            t[p] = 0.5 * (1.0 + f);
            for (k, g) in grad.iter().enumerate() {
                jac[k * n_pix + p] = 0.5 * g;
            }
        }
    }
    (
        Transmittance(Array2::from_shape_vec((side, side), t).expect("shape")),
        JacobianStack(Array3::from_shape_vec((n, side, side), jac).expect("shape")),
    )
}

/// Closed-form `∂T/∂θ` including the ½ from the transmittance map and the −1
/// coupling of free amplitudes to the implied last amplitude.
pub fn analytic_jacobian(theta: &ParamVector, grid: &GridSpec) -> JacobianStack {
    eval_with_jacobian(theta, grid).1
}

/// Per-parameter sampling intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub family: Family,
    pub ranges: Vec<(f64, f64)>,
}

impl ParamBounds {
    /// Default intervals: a ∈ [0, 1], ω ∈ [0.5/n, 4/n], β, φ ∈ [−π, π],
    /// x₀, y₀ ∈ [−n/2, n/2], where `n` is the image side in pixels.
    pub fn standard(family: Family, n_pix_side: usize) -> Self {
        let n = n_pix_side as f64;
        let ranges = family
            .param_kinds()
            .into_iter()
            .map(|k| match k {
                ParamKind::Amplitude => (0.0, 1.0),
                ParamKind::Frequency => (0.5 / n, 4.0 / n),
                ParamKind::Angle | ParamKind::Phase => (-PI, PI),
                ParamKind::Offset => (-n / 2.0, n / 2.0),
            })
            .collect();
        Self { family, ranges }
    }

    pub fn new(family: Family, ranges: Vec<(f64, f64)>) -> Result<Self> {
        let b = Self { family, ranges };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.len() != self.family.n_params() {
            return Err(Error::InvalidArgument(format!(
                "{} bounds for {} parameters",
                self.ranges.len(),
                self.family.n_params()
            )));
        }
        for (i, &(lo, hi)) in self.ranges.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "bound {i} has lower {lo} not below upper {hi}"
                )));
            }
        }
        Ok(())
    }
}

/// Draws every parameter uniformly within its bounds. Amplitudes are redrawn
/// until the implied last amplitude also lies in [0, 1].
pub fn sample_params(family: Family, bounds: &ParamBounds, seed: u64) -> Result<ParamVector> {
    bounds.validate()?;
    if bounds.family != family {
        return Err(Error::InvalidArgument("bounds belong to another family".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_params_with(family, bounds, &mut rng)
}

pub(crate) fn sample_params_with<R: Rng>(
    family: Family,
    bounds: &ParamBounds,
    rng: &mut R,
) -> Result<ParamVector> {
    let n_free = family.n_free_amplitudes();
    let mut values = vec![0.0; family.n_params()];
    let mut tries = 0;
    loop {
        for (v, &(lo, hi)) in values.iter_mut().zip(&bounds.ranges).take(n_free) {
            *v = rng.random_range(lo..hi);
        }
        let implied = 1.0 - values[..n_free].iter().sum::<f64>();
        if (0.0..=1.0).contains(&implied) {
            break;
        }
        tries += 1;
        if tries > 10_000 {
            return Err(Error::InvalidArgument(
                "amplitude bounds leave no room for a valid implied amplitude".into(),
            ));
        }
    }
    for (v, &(lo, hi)) in values.iter_mut().zip(&bounds.ranges).skip(n_free) {
        *v = rng.random_range(lo..hi);
    }
    ParamVector::new(family, values)
}

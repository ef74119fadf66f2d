//! Layer-wise conflict projection between the identity (A) and expression (E)
//! gradients, with EMA estimates of the full-data gradients as the reference
//! directions.
//!
//! At step `t`, each layer's minibatch gradient `g_A` is projected against the
//! *previous* EMA of the other task, `m_E^{t−1}`, and vice versa:
//!
//! ```text
//! g̃_A = g_A − min{0, ⟨g_A, m̄_E⟩}·m̄_E
//! ```
//!
//! Only after both projections are the EMAs advanced with the raw (unprojected)
//! gradients. While a reference EMA is still numerically zero the projection is
//! a no-op.

use crate::error::{Error, Result};
use crate::graph::GradientMap;
use crate::scalar::Scalar;
use crate::tensor;

/// Removes the component of `g` that opposes `m_ref`.
///
/// Returns `g` bit-for-bit when `⟨g, m_ref⟩ ≥ 0` or when `‖m_ref‖ ≤ 1e-12`.
pub fn project<T: Scalar>(g: &[T], m_ref: &[T]) -> Result<Vec<T>> {
    if g.len() != m_ref.len() {
        return Err(Error::shape(
            "project",
            format!("gradient {} vs reference {}", g.len(), m_ref.len()),
        ));
    }
    let Ok(unit) = tensor::normalize(m_ref) else {
        return Ok(g.to_vec());
    };
    let d = tensor::dot(g, &unit);
    if d >= T::zero() {
        return Ok(g.to_vec());
    }
    Ok(g.iter().zip(&unit).map(|(&x, &u)| x - d * u).collect())
}

/// Cosine between `a` and `b`, zero when either is degenerate.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let eps = T::lit(crate::DEGENERATE_EPS);
    let (na, nb) = (tensor::norm(a), tensor::norm(b));
    if na <= eps || nb <= eps {
        return T::zero();
    }
    (tensor::dot(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

/// Exponential moving average of one task's per-layer gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTracker<T> {
    lambda: T,
    moments: GradientMap<T>,
    steps: u64,
}

impl<T: Scalar> EmaTracker<T> {
    /// Zero-initialized moments with the layout of `template`.
    pub fn new(lambda: T, template: &GradientMap<T>) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            moments: GradientMap::zeros_like(template),
            steps: 0,
        })
    }

    pub fn from_parts(lambda: T, moments: GradientMap<T>, steps: u64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            moments,
            steps,
        })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn moments(&self) -> &GradientMap<T> {
        &self.moments
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `m ← λ·m + (1−λ)·g` for one layer; does not advance the step counter.
    pub fn update_layer(&mut self, layer: &str, raw: &[T]) -> Result<()> {
        let lambda = self.lambda;
        let mut layers: Vec<(String, Vec<T>)> = self
            .moments
            .iter()
            .map(|(id, v)| (id.to_string(), v.to_vec()))
            .collect();
        let slot = layers
            .iter_mut()
            .find(|(id, _)| id == layer)
            .ok_or_else(|| Error::Invalid(format!("unknown layer {layer}")))?;
        if slot.1.len() != raw.len() {
            return Err(Error::shape(
                "ema_update",
                format!("layer {layer}: {} vs {}", slot.1.len(), raw.len()),
            ));
        }
        for (m, &g) in slot.1.iter_mut().zip(raw) {
            *m = lambda * *m + (T::one() - lambda) * g;
        }
        self.moments = GradientMap::from_layers(layers);
        Ok(())
    }

    /// Updates every layer with `raw` and advances the step counter by one.
    pub fn update(&mut self, raw: &GradientMap<T>) -> Result<()> {
        let lambda = self.lambda;
        if raw.len() != self.moments.len() {
            return Err(Error::shape("ema_update", "layer count differs"));
        }
        let mut layers = Vec::with_capacity(raw.len());
        for ((id, m), (rid, g)) in self.moments.iter().zip(raw.iter()) {
            if id != rid || m.len() != g.len() {
                return Err(Error::shape("ema_update", format!("{id} vs {rid}")));
            }
            layers.push((
                id.to_string(),
                m.iter()
                    .zip(g)
                    .map(|(&m, &g)| lambda * m + (T::one() - lambda) * g)
                    .collect(),
            ));
        }
        self.moments = GradientMap::from_layers(layers);
        self.steps += 1;
        Ok(())
    }
}

fn check_lambda<T: Scalar>(lambda: T) -> Result<()> {
    if !(lambda >= T::zero() && lambda < T::one()) {
        return Err(Error::Invalid(format!("EMA decay {lambda} outside [0,1)")));
    }
    Ok(())
}

/// What each task's gradient is projected against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Against the other task's EMA from the previous step.
    Ema,
    /// Against the other task's current minibatch gradient (no EMA).
    Minibatch,
    /// Gradients pass through untouched.
    Off,
}

/// Per-layer EMA moments for both tasks plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientLedger<T> {
    pub a: EmaTracker<T>,
    pub e: EmaTracker<T>,
    step: u64,
}

impl<T: Scalar> GradientLedger<T> {
    pub fn new(lambda: T, template: &GradientMap<T>) -> Result<Self> {
        Ok(Self {
            a: EmaTracker::new(lambda, template)?,
            e: EmaTracker::new(lambda, template)?,
            step: 0,
        })
    }

    pub fn from_parts(a: EmaTracker<T>, e: EmaTracker<T>, step: u64) -> Self {
        Self { a, e, step }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lambda(&self) -> T {
        self.a.lambda()
    }
}

/// Diagnostics for one layer and one task stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamReport<T> {
    /// Cosine between the minibatch gradient and the reference it was projected against.
    pub cosine: T,
    pub conflict: bool,
    /// `‖g̃‖ / ‖g‖` (1 for a zero gradient).
    pub retained: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport<T> {
    pub layer: String,
    pub a: StreamReport<T>,
    pub e: StreamReport<T>,
}

/// Per-layer diagnostics of a [`surgery_step`]; always covers exactly the A and E streams.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport<T> {
    pub step: u64,
    pub layers: Vec<LayerReport<T>>,
}

impl<T: Scalar> ProjectionReport<T> {
    /// Fraction of (layer, stream) pairs flagged as conflicting.
    pub fn conflict_rate(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        let n = self
            .layers
            .iter()
            .map(|l| l.a.conflict as usize + l.e.conflict as usize)
            .sum::<usize>();
        n as f64 / (2 * self.layers.len()) as f64
    }

    pub fn conflict_rate_a(&self) -> f64 {
        rate(self.layers.iter().map(|l| l.a.conflict))
    }

    pub fn conflict_rate_e(&self) -> f64 {
        rate(self.layers.iter().map(|l| l.e.conflict))
    }
}

fn rate(it: impl ExactSizeIterator<Item = bool>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.filter(|&c| c).count() as f64 / n as f64
}

fn stream<T: Scalar>(g: &[T], reference: &[T], projected: &[T]) -> StreamReport<T> {
    let cosine = cosine(g, reference);
    let ng = tensor::norm(g);
    let retained = if ng > T::zero() {
        tensor::norm(projected) / ng
    } else {
        T::one()
    };
    StreamReport {
        cosine,
        conflict: cosine < T::zero(),
        retained,
    }
}

/// Projects both streams layer by layer, then advances both EMAs with the raw gradients.
pub fn surgery_step<T: Scalar>(
    ledger: &mut GradientLedger<T>,
    g_a: &GradientMap<T>,
    g_e: &GradientMap<T>,
    mode: ProjectionMode,
) -> Result<(GradientMap<T>, GradientMap<T>, ProjectionReport<T>)> {
    if g_a.ids() != ledger.a.moments().ids() || g_e.ids() != ledger.e.moments().ids() {
        return Err(Error::shape("surgery_step", "gradient layers differ from ledger"));
    }
    let mut out_a = Vec::with_capacity(g_a.len());
    let mut out_e = Vec::with_capacity(g_e.len());
    let mut layers = Vec::with_capacity(g_a.len());
    for (((id, ga), (_, ge)), ((_, ma), (_, me))) in g_a
        .iter()
        .zip(g_e.iter())
        .zip(ledger.a.moments().iter().zip(ledger.e.moments().iter()))
    {
        let (ref_for_a, ref_for_e): (&[T], &[T]) = match mode {
            ProjectionMode::Ema => (me, ma),
            ProjectionMode::Minibatch | ProjectionMode::Off => (ge, ga),
        };
        let (pa, pe) = match mode {
            ProjectionMode::Off => (ga.to_vec(), ge.to_vec()),
            _ => (project(ga, ref_for_a)?, project(ge, ref_for_e)?),
        };
        layers.push(LayerReport {
            layer: id.to_string(),
            a: stream(ga, ref_for_a, &pa),
            e: stream(ge, ref_for_e, &pe),
        });
        out_a.push((id.to_string(), pa));
        out_e.push((id.to_string(), pe));
    }
    ledger.a.update(g_a)?;
    ledger.e.update(g_e)?;
    ledger.step += 1;
    Ok((
        GradientMap::from_layers(out_a),
        GradientMap::from_layers(out_e),
        ProjectionReport {
            step: ledger.step,
            layers,
        },
    ))
}

/// Constants of the momentum bound: gradient bound `G`, Lipschitz constant `L`,
/// variance bound `M`, failure probability `δ`, learning rate `η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoremConstants<T> {
    pub grad_bound: T,
    pub lipschitz: T,
    pub variance: T,
    pub delta: T,
    pub eta: T,
}

/// `λ = 1 − (M^{1/2}/(L·G))^{2/3}·η^{2/3}`; errors unless `λ ∈ (0,1)`.
pub fn lambda_from_constants<T: Scalar>(c: &TheoremConstants<T>) -> Result<T> {
    let pos = [c.grad_bound, c.lipschitz, c.variance, c.eta];
    if pos.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::Constants(format!("all constants must be positive: {c:?}")));
    }
    if !(c.delta > T::zero() && c.delta < T::one()) {
        return Err(Error::Constants(format!("delta {} outside (0,1)", c.delta)));
    }
    let two_thirds = T::lit(2.0 / 3.0);
    let ratio = c.variance.sqrt() / (c.lipschitz * c.grad_bound);
    let lambda = T::one() - ratio.powf(two_thirds) * c.eta.powf(two_thirds);
    if !(lambda > T::zero() && lambda < T::one()) {
        return Err(Error::Constants(format!(
            "constants give lambda = {lambda}, outside (0,1)"
        )));
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> GradientMap<f64> {
        GradientMap::from_layers(vec![("l0".into(), v.to_vec())])
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(project(&[1.0, 1.0], &[-1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        let m = [0.6f64, -0.8];
        let g = [-0.6, 0.8];
        let p = project(&g, &m).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(project(&[2.0, -3.0], &[0.0, 0.0]).unwrap(), vec![2.0, -3.0]);
        assert!(project(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ema_examples() {
        let g = [2.0, -4.0];
        let mut ema = EmaTracker::new(0.95, &map(&[0.0, 0.0])).unwrap();
        ema.update(&map(&g)).unwrap();
        let m1 = ema.moments().get("l0").unwrap().to_vec();
        assert!((m1[0] - 0.1).abs() < 1e-15 && (m1[1] + 0.2).abs() < 1e-15);
        for _ in 1..40 {
            ema.update(&map(&g)).unwrap();
        }
        let scale = 1.0 - 0.95f64.powi(40);
        let m = ema.moments().get("l0").unwrap();
        assert!((m[0] - scale * 2.0).abs() < 1e-12);
        assert_eq!(ema.steps(), 40);
        assert!(ema.update_layer("l0", &[1.0]).is_err());
        assert!(ema.update_layer("nope", &[1.0, 1.0]).is_err());
        assert!(EmaTracker::new(1.0, &map(&[0.0])).is_err());
    }

    #[test]
    fn first_step_passes_through() {
        let mut ledger = GradientLedger::new(0.95, &map(&[0.0, 0.0])).unwrap();
        let (a, e, rep) =
            surgery_step(&mut ledger, &map(&[1.0, 0.0]), &map(&[-1.0, 0.0]), ProjectionMode::Ema)
                .unwrap();
        assert_eq!(a.get("l0").unwrap(), &[1.0, 0.0]);
        assert_eq!(e.get("l0").unwrap(), &[-1.0, 0.0]);
        assert!(!rep.layers[0].a.conflict);
        assert_eq!(ledger.step(), 1);
    }

    #[test]
    fn orthogonal_streams_never_modified() {
        let mut ledger = GradientLedger::new(0.9, &map(&[0.0, 0.0])).unwrap();
        for _ in 0..20 {
            let (a, e, rep) = surgery_step(
                &mut ledger,
                &map(&[3.0, 0.0]),
                &map(&[0.0, -2.0]),
                ProjectionMode::Ema,
            )
            .unwrap();
            assert_eq!(a.get("l0").unwrap(), &[3.0, 0.0]);
            assert_eq!(e.get("l0").unwrap(), &[0.0, -2.0]);
            assert_eq!(rep.conflict_rate(), 0.0);
        }
    }

    #[test]
    fn opposed_constant_streams_annihilate_after_warmup() {
        let g = [0.3, -1.2, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut ledger = GradientLedger::new(0.95, &map(&[0.0; 3])).unwrap();
        for step in 1..=30 {
            let (a, e, rep) =
                surgery_step(&mut ledger, &map(&g), &map(&neg), ProjectionMode::Ema).unwrap();
            if step == 1 {
                assert_eq!(a.get("l0").unwrap(), &g);
                continue;
            }
            // m_E^{t-1} = −(1−λ^{t-1})·g is exactly antiparallel to g_A.
            assert!(a.get("l0").unwrap().iter().all(|v| v.abs() < 1e-12));
            assert!(e.get("l0").unwrap().iter().all(|v| v.abs() < 1e-12));
            assert!(rep.layers[0].a.conflict && rep.layers[0].e.conflict);
            assert!((rep.layers[0].a.cosine + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn off_mode_is_identity_and_still_tracks() {
        let mut ledger = GradientLedger::new(0.5, &map(&[0.0, 0.0])).unwrap();
        for _ in 0..3 {
            let (a, _, _) =
                surgery_step(&mut ledger, &map(&[1.0, 1.0]), &map(&[-1.0, -1.0]), ProjectionMode::Off)
                    .unwrap();
            assert_eq!(a.get("l0").unwrap(), &[1.0, 1.0]);
        }
        assert!((ledger.a.moments().get("l0").unwrap()[0] - 0.875).abs() < 1e-15);
    }

    #[test]
    fn minibatch_mode_projects_against_current_other() {
        let mut ledger = GradientLedger::new(0.5, &map(&[0.0, 0.0])).unwrap();
        let (a, _, rep) = surgery_step(
            &mut ledger,
            &map(&[1.0, 1.0]),
            &map(&[-1.0, 0.0]),
            ProjectionMode::Minibatch,
        )
        .unwrap();
        assert_eq!(a.get("l0").unwrap(), &[0.0, 1.0]);
        assert!(rep.layers[0].a.conflict);
    }

    #[test]
    fn lambda_examples() {
        let c = |variance: f64, lipschitz: f64, grad_bound: f64, eta: f64| TheoremConstants {
            grad_bound,
            lipschitz,
            variance,
            delta: 0.05,
            eta,
        };
        assert!(matches!(
            lambda_from_constants(&c(1.0, 1.0, 1.0, 1.0)),
            Err(Error::Constants(_))
        ));
        assert!((lambda_from_constants(&c(1.0, 1.0, 1.0, 0.001)).unwrap() - 0.99).abs() < 1e-12);
        // (√4/(2·1))^{2/3} = 1 and 0.008^{2/3} = 0.04
        assert!((lambda_from_constants(&c(4.0, 2.0, 1.0, 0.008)).unwrap() - 0.96).abs() < 1e-12);
        let mut bad = c(1.0, 1.0, 1.0, 0.001);
        bad.delta = 1.5;
        assert!(lambda_from_constants(&bad).is_err());
    }
}

//! Variance schedule, Gaussian noising, the deterministic DDIM reverse chain and the
//! denoising score-matching objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the sinusoidal timestep embedding appended to the score network input.
pub const TIME_EMBED_DIM: usize = 8;

/// `β_1..β_T` and the cumulative products `ᾱ_τ = Π_{i≤τ}(1−β_i)`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule<T> {
    betas: Vec<T>,
    alphas_bar: Vec<T>,
}

impl<T: Scalar> VarianceSchedule<T> {
    /// Linear β schedule from `beta_start` to `beta_end` over `t_total` steps.
    pub fn linear(t_total: usize, beta_start: T, beta_end: T) -> Result<Self> {
        if t_total == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(beta_start > T::zero() && beta_start <= beta_end && beta_end < T::one()) {
            return Err(Error::Invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if t_total == 1 {
            vec![beta_start]
        } else {
            let span = T::from_usize(t_total - 1).unwrap();
            (0..t_total)
                .map(|i| beta_start + (beta_end - beta_start) * T::from_usize(i).unwrap() / span)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > T::zero() && b < T::one())) {
            return Err(Error::Invalid(format!("beta {b} outside (0,1)")));
        }
        let mut alphas_bar = Vec::with_capacity(betas.len() + 1);
        let mut acc = T::one();
        alphas_bar.push(acc);
        for &b in &betas {
            acc *= T::one() - b;
            alphas_bar.push(acc);
        }
        Ok(Self { betas, alphas_bar })
    }

    /// All-ones `ᾱ` (no noise at any level). Violates the strict β range; only
    /// useful for checking that the sampler collapses to the identity.
    pub fn noiseless(t_total: usize) -> Self {
        Self {
            betas: vec![T::zero(); t_total],
            alphas_bar: vec![T::one(); t_total + 1],
        }
    }

    pub fn t_total(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    /// `ᾱ_1..ᾱ_T`.
    pub fn alphas_bar(&self) -> &[T] {
        &self.alphas_bar[1..]
    }

    /// `ᾱ_τ` for `0 ≤ τ ≤ T`.
    pub fn alpha_bar(&self, tau: usize) -> Result<T> {
        self.alphas_bar.get(tau).copied().ok_or_else(|| {
            Error::Invalid(format!("timestep {tau} outside 0..={}", self.t_total()))
        })
    }

    fn noise_coeffs(&self, tau: usize) -> Result<(T, T)> {
        let ab = self.alpha_bar(tau)?;
        Ok((ab.sqrt(), (T::one() - ab).sqrt()))
    }
}

/// `√ᾱ_τ·x_o + √(1−ᾱ_τ)·r`.
pub fn forward_noise<T: Scalar>(
    x_o: &Tensor<T>,
    tau: usize,
    r: &Tensor<T>,
    sched: &VarianceSchedule<T>,
) -> Result<Tensor<T>> {
    if x_o.shape() != r.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?} vs noise {:?}", x_o.shape(), r.shape()),
        ));
    }
    let (a, b) = sched.noise_coeffs(tau)?;
    Ok(x_o.zip_map(r, |x, n| a * x + b * n))
}

/// Same as [`forward_noise`] but recorded on a tape.
pub fn forward_noise_var<T: Scalar>(
    g: &mut Graph<T>,
    x_o: Var,
    tau: usize,
    r: Var,
    sched: &VarianceSchedule<T>,
) -> Result<Var> {
    let (a, b) = sched.noise_coeffs(tau)?;
    g.axpby(a, x_o, b, r)
}

/// Anything that predicts the injected noise `s_w(x, t)` on a tape.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, g: &mut Graph<T>, x: Var, t: usize) -> Result<Var>;
}

/// One deterministic DDIM step `x_τ → x_{τ−1}`.
///
/// `x̃ = (x_τ − √(1−ᾱ_τ)·s) / √ᾱ_τ`, then `√ᾱ_{τ−1}·x̃ + √(1−ᾱ_{τ−1})·s`.
pub fn ddim_step<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    x_tau: Var,
    tau: usize,
    net: &N,
    sched: &VarianceSchedule<T>,
) -> Result<Var> {
    if tau == 0 {
        return Err(Error::Invalid("ddim_step needs tau >= 1".into()));
    }
    let (sa, sb) = sched.noise_coeffs(tau)?;
    let (pa, pb) = sched.noise_coeffs(tau - 1)?;
    let s = net.predict(g, x_tau, tau)?;
    if g.value(s).shape() != g.value(x_tau).shape() {
        return Err(Error::shape(
            "ddim_step",
            format!(
                "prediction {:?} vs state {:?}",
                g.value(s).shape(),
                g.value(x_tau).shape()
            ),
        ));
    }
    let inv = T::one() / sa;
    let x0 = g.axpby(inv, x_tau, -sb * inv, s)?;
    g.axpby(pa, x0, pb, s)
}

/// Runs `ddim_step` from level `tau` down to 0.
pub fn denoise_from<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    x_tau: Var,
    tau: usize,
    net: &N,
    sched: &VarianceSchedule<T>,
) -> Result<Var> {
    if tau > sched.t_total() {
        return Err(Error::Invalid(format!(
            "tau {tau} exceeds schedule length {}",
            sched.t_total()
        )));
    }
    let mut x = x_tau;
    for t in (1..=tau).rev() {
        x = ddim_step(g, x, t, net, sched)?;
    }
    Ok(x)
}

/// Noises `x_o` to level `tau` with `r`, then denoises back to level 0 (`x_p`).
pub fn reverse_chain<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    x_o: Var,
    tau: usize,
    r: Var,
    net: &N,
    sched: &VarianceSchedule<T>,
) -> Result<Var> {
    if tau > sched.t_total() {
        return Err(Error::Invalid(format!(
            "tau {tau} exceeds schedule length {}",
            sched.t_total()
        )));
    }
    if tau == 0 {
        return Ok(x_o);
    }
    if g.value(x_o).shape() != g.value(r).shape() {
        return Err(Error::shape("reverse_chain", "image and noise shapes differ"));
    }
    let x_tau = forward_noise_var(g, x_o, tau, r, sched)?;
    denoise_from(g, x_tau, tau, net, sched)
}

/// One noise tensor `ε_t` (shape `[B, D]`) per level `t = 1..=τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws<T> {
    pub per_level: Vec<Tensor<T>>,
}

impl<T: Scalar> NoiseDraws<T> {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, tau: usize, batch: usize, dim: usize) -> Self {
        Self {
            per_level: (0..tau)
                .map(|_| standard_normal(rng, &[batch, dim]))
                .collect(),
        }
    }
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized to shape")
}

/// `Σ_{t=1..τ} mean_b ‖ε_t − s_w(x_o^t, t)‖₂` for a batch `[B, D]`.
pub fn score_matching_loss<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    batch: &Tensor<T>,
    net: &N,
    sched: &VarianceSchedule<T>,
    tau: usize,
    noise: &NoiseDraws<T>,
) -> Result<Var> {
    if batch.is_empty() || batch.dims2().0 == 0 {
        return Err(Error::Invalid("score matching on an empty batch".into()));
    }
    if tau == 0 || noise.per_level.len() != tau {
        return Err(Error::Invalid(format!(
            "need one noise draw per level 1..={tau}, got {}",
            noise.per_level.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, eps) in noise.per_level.iter().enumerate() {
        let t = i + 1;
        let x_t = forward_noise(batch, t, eps, sched)?;
        let xv = g.constant(x_t);
        let ev = g.constant(eps.clone());
        let pred = net.predict(g, xv, t)?;
        let resid = g.sub(ev, pred)?;
        let norms = g.row_norms(resid)?;
        let term = g.mean(norms)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("tau >= 1"))
}

/// Sinusoidal embedding of a timestep.
pub fn time_embedding<T: Scalar>(t: usize) -> [T; TIME_EMBED_DIM] {
    let mut out = [T::zero(); TIME_EMBED_DIM];
    let half = TIME_EMBED_DIM / 2;
    for k in 0..half {
        let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[2 * k] = T::lit(a.sin());
        out[2 * k + 1] = T::lit(a.cos());
    }
    out
}

/// What the MLP of a [`ScoreNetwork`] emits.
#[derive(Clone, Debug, PartialEq)]
pub enum Parameterization<T> {
    /// The noise estimate directly.
    Noise,
    /// A clean-image estimate `x̂_0`; the noise estimate is
    /// `(x_t − √ᾱ_t·x̂_0)/√(1−ᾱ_t)` under the stored schedule.
    Data(VarianceSchedule<T>),
}

/// Small denoiser: `[x, emb(t)] → 3 × tanh hidden → noise estimate of x's shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetwork<T> {
    mlp: Mlp<T>,
    data_dim: usize,
    head: Parameterization<T>,
}

impl<T: Scalar> ScoreNetwork<T> {
    pub fn new<R: Rng + ?Sized>(data_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::with_head(data_dim, hidden, Parameterization::Noise, rng)
    }

    pub fn with_head<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: usize,
        head: Parameterization<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = Mlp::new(
            "score",
            &[data_dim + TIME_EMBED_DIM, hidden, hidden, hidden, data_dim],
            rng,
        )?;
        Ok(Self {
            mlp,
            data_dim,
            head,
        })
    }

    pub fn from_params(params: ParamStore<T>, head: Parameterization<T>) -> Result<Self> {
        let mlp = Mlp::from_params(params)?;
        let data_dim = mlp.output_dim();
        if mlp.input_dim() != data_dim + TIME_EMBED_DIM || mlp.sizes().len() != 5 {
            return Err(Error::Invalid(format!(
                "score network sizes {:?} do not fit the architecture",
                mlp.sizes()
            )));
        }
        Ok(Self {
            mlp,
            data_dim,
            head,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn hidden(&self) -> usize {
        self.mlp.sizes()[1]
    }

    pub fn head(&self) -> &Parameterization<T> {
        &self.head
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.mlp.params_mut()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.params().layers().iter().map(|l| l.id.clone()).collect()
    }

    /// Binds trainable parameters for one tape.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>) -> Result<BoundScore<'a, T>> {
        Ok(BoundScore {
            net: self,
            bound: self.mlp.params().bind(g)?,
        })
    }

    /// Binds parameters as constants (inference only).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<T>) -> BoundScore<'a, T> {
        BoundScore {
            net: self,
            bound: self.mlp.params().bind_frozen(g),
        }
    }
}

/// A [`ScoreNetwork`] whose parameters live on a particular tape.
pub struct BoundScore<'a, T> {
    net: &'a ScoreNetwork<T>,
    bound: Bound,
}

impl<T: Scalar> NoisePredictor<T> for BoundScore<'_, T> {
    fn predict(&self, g: &mut Graph<T>, x: Var, t: usize) -> Result<Var> {
        let (rows, cols) = g.value(x).dims2();
        if cols != self.net.data_dim {
            return Err(Error::shape(
                "score network",
                format!("input width {cols}, expected {}", self.net.data_dim),
            ));
        }
        let emb = time_embedding::<T>(t);
        let mut data = Vec::with_capacity(rows * TIME_EMBED_DIM);
        for _ in 0..rows {
            data.extend_from_slice(&emb);
        }
        let ev = g.constant(Tensor::matrix(rows, TIME_EMBED_DIM, data)?);
        let input = if g.value(x).shape().len() == 2 {
            x
        } else {
            g.reshape(x, vec![rows, cols])?
        };
        let xin = g.concat_cols(input, ev)?;
        let mut out = self.net.mlp.forward(g, &self.bound, xin)?;
        if let Parameterization::Data(sched) = &self.net.head {
            let ab = sched.alpha_bar(t)?;
            let sd = (T::one() - ab).sqrt();
            if !(sd > T::lit(crate::DEGENERATE_EPS)) {
                return Err(Error::Invalid(format!(
                    "data-parameterized score undefined at level {t} (alpha_bar = 1)"
                )));
            }
            out = g.axpby(T::one() / sd, input, -ab.sqrt() / sd, out)?;
        }
        let shape = g.value(x).shape().to_vec();
        if g.value(out).shape() != shape.as_slice() {
            g.reshape(out, shape)
        } else {
            Ok(out)
        }
    }
}

/// Predicts a fixed tensor regardless of input; with the forward-noise draw it
/// makes every DDIM step an exact inversion of one noising level.
pub struct FixedNoise<T> {
    pub noise: Tensor<T>,
}

impl<T: Scalar> NoisePredictor<T> for FixedNoise<T> {
    fn predict(&self, g: &mut Graph<T>, _x: Var, _t: usize) -> Result<Var> {
        Ok(g.constant(self.noise.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_examples() {
        let s = VarianceSchedule::linear(1, 0.1f64, 0.1).unwrap();
        assert!((s.alphas_bar()[0] - 0.9).abs() < 1e-15);
        let s = VarianceSchedule::from_betas(vec![0.1f64, 0.2]).unwrap();
        assert!((s.alphas_bar()[0] - 0.9).abs() < 1e-15);
        assert!((s.alphas_bar()[1] - 0.72).abs() < 1e-15);
        let s = VarianceSchedule::linear(2, 0.1f64, 0.2).unwrap();
        assert!((s.alphas_bar()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_errors() {
        assert!(VarianceSchedule::linear(0, 0.1f64, 0.2).is_err());
        assert!(VarianceSchedule::linear(5, 0.0f64, 0.2).is_err());
        assert!(VarianceSchedule::linear(5, 0.3f64, 0.2).is_err());
        assert!(VarianceSchedule::linear(5, 0.1f64, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = VarianceSchedule::linear(10, 1e-3f64, 0.05).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = Tensor::vector(vec![0.5, 0.1, -0.4]);
        assert_eq!(forward_noise(&x, 0, &r, &s).unwrap(), x);
        let zero = Tensor::zeros(&[3]);
        let y = forward_noise(&x, 4, &zero, &s).unwrap();
        let a = s.alpha_bar(4).unwrap().sqrt();
        for (yi, xi) in y.data().iter().zip(x.data()) {
            assert_eq!(*yi, a * xi);
        }
        // ᾱ = 0.81 at level 1
        let s = VarianceSchedule::from_betas(vec![0.19f64]).unwrap();
        let y = forward_noise(&Tensor::scalar(1.0), 1, &Tensor::scalar(1.0), &s).unwrap();
        assert!((y.item() - (0.9 + 0.19f64.sqrt())).abs() < 1e-12);
        assert!((y.item() - 1.33589).abs() < 1e-5);
        assert!(forward_noise(&x, 11, &r, &s).is_err());
        assert!(forward_noise(&x, 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn noiseless_step_is_identity() {
        let sched = VarianceSchedule::<f64>::noiseless(5);
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0, -3.0]));
        let z = FixedNoise {
            noise: Tensor::vector(vec![7.0, -8.0, 9.0]),
        };
        let y = ddim_step(&mut g, x, 3, &z, &sched).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(ddim_step(&mut g, x, 0, &z, &sched).is_err());
    }

    #[test]
    fn one_step_inverts_one_level() {
        let sched = VarianceSchedule::linear(50, 1e-4f64, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tau in [1usize, 7, 25, 50] {
            let x: Tensor<f64> = standard_normal(&mut rng, &[2, 6]);
            let r: Tensor<f64> = standard_normal(&mut rng, &[2, 6]);
            let mut g = Graph::new();
            let xt = g.constant(forward_noise(&x, tau, &r, &sched).unwrap());
            let net = FixedNoise { noise: r.clone() };
            let y = ddim_step(&mut g, xt, tau, &net, &sched).unwrap();
            let want = forward_noise(&x, tau - 1, &r, &sched).unwrap();
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn score_loss_trivial_cases() {
        let sched = VarianceSchedule::linear(4, 1e-3f64, 0.02).unwrap();
        let eps = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
        let draws = NoiseDraws {
            per_level: vec![eps.clone()],
        };
        let batch = Tensor::matrix(1, 2, vec![0.4, -0.1]).unwrap();
        let mut g = Graph::new();
        let zero = FixedNoise {
            noise: Tensor::zeros(&[1, 2]),
        };
        let l = score_matching_loss(&mut g, &batch, &zero, &sched, 1, &draws).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-15);
        let exact = FixedNoise { noise: eps };
        let l = score_matching_loss(&mut g, &batch, &exact, &sched, 1, &draws).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        assert!(score_matching_loss(&mut g, &empty, &zero, &sched, 1, &draws).is_err());
    }

    #[test]
    fn embedding_distinguishes_levels() {
        let embs: Vec<[f64; TIME_EMBED_DIM]> = (0..=50).map(time_embedding).collect();
        for i in 0..embs.len() {
            for j in 0..i {
                let d: f64 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                assert!(d > 1e-6, "levels {i} and {j} collide");
            }
        }
    }
}

//! Identity (angular), expression (directional), pixel and perceptual losses and
//! their weighted combination.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Whether an encoder may be used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderRole {
    Surrogate,
    BlackBox,
}

/// An identity embedder `f_i : image → ℝ^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub name: String,
    pub role: EncoderRole,
    pub net: Mlp<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.infer(x)
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }
}

/// Every identity encoder of an experiment, surrogates and held-out alike.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSet<T> {
    encoders: Vec<Encoder<T>>,
}

impl<T: Scalar> EncoderSet<T> {
    pub fn new(encoders: Vec<Encoder<T>>) -> Result<Self> {
        let n_sur = encoders
            .iter()
            .filter(|e| e.role == EncoderRole::Surrogate)
            .count();
        if n_sur == 0 {
            return Err(Error::Invalid("at least one surrogate encoder required".into()));
        }
        let d = encoders[0].embed_dim();
        if encoders.iter().any(|e| e.embed_dim() != d) {
            return Err(Error::Invalid("encoders disagree on embedding width".into()));
        }
        Ok(Self { encoders })
    }

    pub fn all(&self) -> &[Encoder<T>] {
        &self.encoders
    }

    /// The subset allowed anywhere near a gradient.
    pub fn surrogates(&self) -> SurrogateSet<T> {
        SurrogateSet {
            encoders: self
                .encoders
                .iter()
                .filter(|e| e.role == EncoderRole::Surrogate)
                .cloned()
                .collect(),
        }
    }

    pub fn blackbox(&self) -> Option<&Encoder<T>> {
        self.encoders.iter().find(|e| e.role == EncoderRole::BlackBox)
    }
}

/// Surrogate encoders only; cannot hold a black-box encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSet<T> {
    encoders: Vec<Encoder<T>>,
}

impl<T: Scalar> SurrogateSet<T> {
    pub fn new(encoders: Vec<Encoder<T>>) -> Result<Self> {
        if encoders.is_empty() {
            return Err(Error::Invalid("empty surrogate set".into()));
        }
        if let Some(e) = encoders.iter().find(|e| e.role != EncoderRole::Surrogate) {
            return Err(Error::Invalid(format!(
                "encoder {} is not a surrogate and cannot be used for training",
                e.name
            )));
        }
        Ok(Self { encoders })
    }

    pub fn encoders(&self) -> &[Encoder<T>] {
        &self.encoders
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    /// Unit-normalized embeddings of a single reference image, one per encoder.
    pub fn target_directions(&self, x_t: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        self.encoders
            .iter()
            .map(|e| {
                let z = e.embed(x_t)?;
                tensor::normalize(z.row(0))
            })
            .collect()
    }
}

/// Repeats a row `rows` times.
fn tile<T: Scalar>(row: &[T], rows: usize) -> Result<Tensor<T>> {
    let mut d = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        d.extend_from_slice(row);
    }
    Tensor::matrix(rows, row.len(), d)
}

fn one_minus<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let one = g.constant(Tensor::scalar(T::one()));
    g.sub(one, v)
}

/// `(1/M)·Σ_i mean_b [1 − ⟨z̄_{i,b}, t̄_i⟩]` given embeddings `z_i: [B, d]` and
/// unit target directions `t̄_i`.
pub fn angular_from_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: &[Var],
    targets: &[Vec<T>],
) -> Result<Var> {
    if embeddings.is_empty() || embeddings.len() != targets.len() {
        return Err(Error::Invalid(format!(
            "{} embeddings for {} targets",
            embeddings.len(),
            targets.len()
        )));
    }
    let m = T::from_usize(embeddings.len()).unwrap();
    let mut total: Option<Var> = None;
    for (&z, t) in embeddings.iter().zip(targets) {
        let rows = g.value(z).dims2().0;
        let u = g.normalize_rows(z)?;
        let tv = g.constant(tile(t, rows)?);
        let c = g.row_dot(u, tv)?;
        let mc = g.mean(c)?;
        total = Some(match total {
            None => mc,
            Some(acc) => g.add(acc, mc)?,
        });
    }
    let avg = g.scale(total.unwrap(), T::one() / m)?;
    one_minus(g, avg)
}

/// Angular divergence between `x_p: [B, D]` and the reference `x_t` under every surrogate.
pub fn angular_loss<T: Scalar>(
    g: &mut Graph<T>,
    x_p: Var,
    x_t: &Tensor<T>,
    surrogates: &SurrogateSet<T>,
) -> Result<Var> {
    let targets = surrogates.target_directions(x_t)?;
    angular_loss_to(g, x_p, &targets, surrogates)
}

/// [`angular_loss`] with target directions precomputed.
pub fn angular_loss_to<T: Scalar>(
    g: &mut Graph<T>,
    x_p: Var,
    targets: &[Vec<T>],
    surrogates: &SurrogateSet<T>,
) -> Result<Var> {
    let mut embs = Vec::with_capacity(surrogates.len());
    for e in surrogates.encoders() {
        let b = e.net.params().bind_frozen(g);
        embs.push(e.net.forward(g, &b, x_p)?);
    }
    angular_from_embeddings(g, &embs, targets)
}

/// Frozen expression encoder: `embed` maps images into the shared space, `head`
/// reads expression intensity off that space.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionEncoder<T> {
    pub embed: Mlp<T>,
    pub head: Mlp<T>,
}

impl<T: Scalar> ExpressionEncoder<T> {
    pub fn embed_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.embed.infer(x)
    }

    pub fn intensity(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.embed.infer(x)?;
        self.head.infer(&z)
    }

    pub fn embed_var(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = self.embed.params().bind_frozen(g);
        self.embed.forward(g, &b, x)
    }
}

/// Unit direction in the expression embedding space standing in for the text delta.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionDirection<T> {
    dir: Vec<T>,
}

impl<T: Scalar> EmotionDirection<T> {
    pub fn new(v: &[T]) -> Result<Self> {
        Ok(Self {
            dir: tensor::normalize(v)?,
        })
    }

    /// Normalized mean of `on_i − off_i` over paired embeddings.
    pub fn from_pairs(on: &Tensor<T>, off: &Tensor<T>) -> Result<Self> {
        if on.shape() != off.shape() {
            return Err(Error::shape("emotion direction", "paired embeddings differ"));
        }
        let (r, c) = on.dims2();
        let mut mean = vec![T::zero(); c];
        for i in 0..r {
            for ((m, &a), &b) in mean.iter_mut().zip(on.row(i)).zip(off.row(i)) {
                *m += a - b;
            }
        }
        Self::new(&mean)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.dir
    }
}

/// Emotion term plus the number of samples whose embedding delta was degenerate.
#[derive(Clone, Copy, Debug)]
pub struct EmotionTerm {
    pub loss: Var,
    pub skipped: usize,
}

/// `mean_b [1 − ⟨dir, Δ̄_b⟩]` over rows of `delta: [B, d]` whose norm exceeds the
/// degenerate threshold. Errors when every row is degenerate.
pub fn emotion_from_delta<T: Scalar>(
    g: &mut Graph<T>,
    delta: Var,
    dir: &EmotionDirection<T>,
) -> Result<EmotionTerm> {
    let eps = T::lit(crate::DEGENERATE_EPS);
    let (rows, cols) = g.value(delta).dims2();
    if cols != dir.dir.len() {
        return Err(Error::shape("emotion_loss", "direction width differs"));
    }
    let keep: Vec<usize> = (0..rows)
        .filter(|&i| tensor::norm(g.value(delta).row(i)) > eps)
        .collect();
    if keep.is_empty() {
        let n = (0..rows)
            .map(|i| tensor::norm(g.value(delta).row(i)).as_f64())
            .fold(0.0, f64::max);
        return Err(Error::Degenerate {
            norm: n,
            eps: crate::DEGENERATE_EPS,
        });
    }
    let skipped = rows - keep.len();
    let picked = if skipped == 0 {
        delta
    } else {
        let mut sel = vec![T::zero(); keep.len() * rows];
        for (r, &i) in keep.iter().enumerate() {
            sel[r * rows + i] = T::one();
        }
        let s = g.constant(Tensor::matrix(keep.len(), rows, sel)?);
        g.matmul(s, delta)?
    };
    let u = g.normalize_rows(picked)?;
    let d = g.constant(tile(&dir.dir, keep.len())?);
    let c = g.row_dot(u, d)?;
    let mc = g.mean(c)?;
    Ok(EmotionTerm {
        loss: one_minus(g, mc)?,
        skipped,
    })
}

/// Directional expression loss for `x_p` against the originals `x_o`.
pub fn emotion_loss<T: Scalar>(
    g: &mut Graph<T>,
    x_p: Var,
    x_o: &Tensor<T>,
    vis: &ExpressionEncoder<T>,
    dir: &EmotionDirection<T>,
) -> Result<EmotionTerm> {
    let base = vis.embed_batch(x_o)?;
    let zp = vis.embed_var(g, x_p)?;
    let zb = g.constant(base);
    let delta = g.sub(zp, zb)?;
    emotion_from_delta(g, delta, dir)
}

/// Mean absolute pixel difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, x_p: Var, x_o: Var) -> Result<Var> {
    let d = g.sub(x_p, x_o)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Frozen, randomly initialized two-hidden-layer feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet<T> {
    net: Mlp<T>,
}

impl<T: Scalar> PerceptualNet<T> {
    pub fn new<R: rand::Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let mut net = Mlp::new("percept", &[input_dim, 64, 32, 1], rng)?;
        // Nonzero biases keep activations away from the origin on blank inputs.
        for layer in net.params_mut().layers_mut() {
            for (name, t) in layer.tensors.iter_mut() {
                if name == "b" {
                    for v in t.data_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = T::lit(0.5 * z);
                    }
                }
            }
        }
        Ok(Self { net })
    }

    pub fn from_mlp(net: Mlp<T>) -> Self {
        Self { net }
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.net
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Result<[Var; 2]> {
        let b = self.net.params().bind_frozen(g);
        let hs = self.net.forward_all(g, &b, x)?;
        Ok([hs[0], hs[1]])
    }
}

/// `Σ_{layers} mean_b ‖ĥ(x_p)_b − ĥ(x_o)_b‖²` with rows of each hidden layer unit-normalized.
pub fn lpips_proxy_loss<T: Scalar>(
    g: &mut Graph<T>,
    x_p: Var,
    x_o: Var,
    pnet: &PerceptualNet<T>,
) -> Result<Var> {
    if g.value(x_p).shape() != g.value(x_o).shape() {
        return Err(Error::shape("lpips_proxy", "image shapes differ"));
    }
    let fp = pnet.features(g, x_p)?;
    let fo = pnet.features(g, x_o)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(fo) {
        let ua = g.normalize_rows(a)?;
        let ub = g.normalize_rows(b)?;
        let d = g.sub(ua, ub)?;
        let sq = g.square(d)?;
        let rows = g.value(sq).dims2().0;
        let s = g.sum(sq)?;
        let term = g.scale(s, T::one() / T::from_usize(rows).unwrap())?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Nonnegative weights of the end-to-end objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub angular: T,
    pub emotion: T,
    pub lpips: T,
    pub l1: T,
    pub smooth: T,
    pub score: T,
}

impl<T: Scalar> LossWeights<T> {
    /// `γ_a=0.5, γ_e=0.08, γ_lpips=0.1, γ_1=0.5, γ_ls=4, γ_d=0.05`.
    pub fn reference_defaults() -> Self {
        Self {
            angular: T::lit(0.5),
            emotion: T::lit(0.08),
            lpips: T::lit(0.1),
            l1: T::lit(0.5),
            smooth: T::lit(4.0),
            score: T::lit(0.05),
        }
    }

    pub fn zero() -> Self {
        Self {
            angular: T::zero(),
            emotion: T::zero(),
            lpips: T::zero(),
            l1: T::zero(),
            smooth: T::zero(),
            score: T::zero(),
        }
    }

    pub fn as_array(&self) -> [T; 6] {
        [self.angular, self.emotion, self.lpips, self.l1, self.smooth, self.score]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in ["angular", "emotion", "lpips", "l1", "smooth", "score"]
            .iter()
            .zip(self.as_array())
        {
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(Error::Invalid(format!("weight {name} = {w} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub angular: T,
    pub emotion: T,
    pub lpips: T,
    pub l1: T,
    pub smooth: T,
    pub score: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn as_array(&self) -> [T; 6] {
        [self.angular, self.emotion, self.lpips, self.l1, self.smooth, self.score]
    }
}

/// Weighted sum of the six terms; returns the total and echoes the unweighted terms.
pub fn combined_loss<T: Scalar>(
    terms: &LossTerms<T>,
    weights: &LossWeights<T>,
) -> Result<(T, LossTerms<T>)> {
    weights.validate()?;
    let arr = terms.as_array();
    if let Some(v) = arr.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {v}")));
    }
    let total = arr
        .iter()
        .zip(weights.as_array())
        .map(|(&t, w)| t * w)
        .sum();
    Ok((total, *terms))
}

/// Tape version of [`combined_loss`] over already-recorded terms; absent terms contribute 0.
pub fn combined_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    terms: [Option<Var>; 6],
    weights: &LossWeights<T>,
) -> Result<Var> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    for (t, w) in terms.into_iter().zip(weights.as_array()) {
        let Some(t) = t else { continue };
        let s = g.scale(t, w)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(match total {
        Some(v) => v,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

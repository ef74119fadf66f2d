//! Parameter storage, tanh MLPs, and the optimizers used to prepare frozen models.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{GradientMap, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One named group of parameter tensors (a layer's weights and bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub id: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Layer<T> {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered collection of layers; the unit that gets bound onto a [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    layers: Vec<Layer<T>>,
}

/// Graph handles for a bound [`ParamStore`], one `Vec<Var>` per layer.
#[derive(Clone, Debug)]
pub struct Bound {
    pub layers: Vec<Vec<Var>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.id == l.id) {
                return Err(Error::Invalid(format!("duplicate layer id {}", l.id)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Binds every tensor as a trainable parameter.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut vars = Vec::with_capacity(l.tensors.len());
            for (name, t) in &l.tensors {
                vars.push(g.param(&l.id, name, t.clone())?);
            }
            layers.push(vars);
        }
        Ok(Bound { layers })
    }

    /// Binds every tensor as a constant; no gradient can reach these values.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            layers: self
                .layers
                .iter()
                .map(|l| l.tensors.iter().map(|(_, t)| g.constant(t.clone())).collect())
                .collect(),
        }
    }

    /// Parameters flattened per layer, in the same layout as a [`GradientMap`].
    pub fn flat(&self) -> GradientMap<T> {
        GradientMap::from_layers(
            self.layers
                .iter()
                .map(|l| {
                    let mut v = Vec::with_capacity(l.len());
                    for (_, t) in &l.tensors {
                        v.extend_from_slice(t.data());
                    }
                    (l.id.clone(), v)
                })
                .collect(),
        )
    }

    /// `w ← w + c·d` for each layer.
    pub fn add_scaled(&mut self, c: T, d: &GradientMap<T>) -> Result<()> {
        if d.len() != self.layers.len() {
            return Err(Error::shape(
                "param update",
                format!("{} layers vs {} gradients", self.layers.len(), d.len()),
            ));
        }
        for (layer, (id, flat)) in self.layers.iter_mut().zip(d.iter()) {
            if layer.id != id || layer.len() != flat.len() {
                return Err(Error::shape(
                    "param update",
                    format!("layer {} vs gradient {}", layer.id, id),
                ));
            }
            let mut off = 0;
            for (_, t) in layer.tensors.iter_mut() {
                let n = t.len();
                for (w, &g) in t.data_mut().iter_mut().zip(&flat[off..off + n]) {
                    *w += c * g;
                }
                off += n;
            }
        }
        Ok(())
    }
}

/// Fully connected network: tanh on hidden layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    params: ParamStore<T>,
    sizes: Vec<usize>,
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-scaled normal weights, zero biases. Layer ids are `{prefix}.l{i}`.
    pub fn new<R: Rng + ?Sized>(prefix: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z * std)
                })
                .collect();
            layers.push(Layer {
                id: format!("{prefix}.l{i}"),
                tensors: vec![
                    ("w".into(), Tensor::new(vec![fan_in, fan_out], data)?),
                    ("b".into(), Tensor::zeros(&[fan_out])),
                ],
            });
        }
        Ok(Self {
            params: ParamStore::new(layers)?,
            sizes: sizes.to_vec(),
        })
    }

    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let mut sizes = Vec::new();
        for l in params.layers() {
            let w = l
                .tensors
                .iter()
                .find(|(n, _)| n == "w")
                .ok_or_else(|| Error::Invalid(format!("layer {} has no weight", l.id)))?;
            if w.1.shape().len() != 2 {
                return Err(Error::Invalid(format!("layer {} weight not 2-D", l.id)));
            }
            if sizes.is_empty() {
                sizes.push(w.1.shape()[0]);
            } else if *sizes.last().unwrap() != w.1.shape()[0] {
                return Err(Error::Invalid(format!("layer {} size chain broken", l.id)));
            }
            sizes.push(w.1.shape()[1]);
        }
        if sizes.len() < 2 {
            return Err(Error::Invalid("empty network".into()));
        }
        Ok(Self { params, sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Scales the output layer, e.g. to start a residual-style predictor near zero.
    pub fn scale_output(&mut self, c: T) {
        if let Some(last) = self.params.layers_mut().last_mut() {
            for (_, t) in last.tensors.iter_mut() {
                for v in t.data_mut() {
                    *v *= c;
                }
            }
        }
    }

    /// Records the forward pass for a batch `x: [B, in]`; returns every post-activation
    /// hidden state followed by the output.
    pub fn forward_all(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(bound.layers.len());
        let last = bound.layers.len() - 1;
        for (i, vars) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, vars[0])?;
            let z = g.add_row(z, vars[1])?;
            h = if i < last { g.tanh(z)? } else { z };
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        Ok(*self.forward_all(g, bound, x)?.last().unwrap())
    }

    /// Forward pass with frozen weights on a fresh tape; returns `[B, out]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Adam, used only while fitting the frozen auxiliary models and pretraining.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Option<GradientMap<T>>,
    v: Option<GradientMap<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradientMap<T>) -> Result<()> {
        self.t += 1;
        let m = self.m.get_or_insert_with(|| GradientMap::zeros_like(grads));
        let v = self.v.get_or_insert_with(|| GradientMap::zeros_like(grads));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let mut layers = Vec::with_capacity(grads.len());
        let mut new_m = Vec::with_capacity(grads.len());
        let mut new_v = Vec::with_capacity(grads.len());
        for (((id, g), (_, mo)), (_, vo)) in grads.iter().zip(m.iter()).zip(v.iter()) {
            let mut mn = Vec::with_capacity(g.len());
            let mut vn = Vec::with_capacity(g.len());
            let mut step = Vec::with_capacity(g.len());
            for ((&gi, &mi), &vi) in g.iter().zip(mo).zip(vo) {
                let m1 = b1 * mi + (T::one() - b1) * gi;
                let v1 = b2 * vi + (T::one() - b2) * gi * gi;
                step.push((m1 / c1) / ((v1 / c2).sqrt() + self.eps));
                mn.push(m1);
                vn.push(v1);
            }
            layers.push((id.to_string(), step));
            new_m.push((id.to_string(), mn));
            new_v.push((id.to_string(), vn));
        }
        self.m = Some(GradientMap::from_layers(new_m));
        self.v = Some(GradientMap::from_layers(new_v));
        params.add_scaled(-self.lr, &GradientMap::from_layers(layers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_layout_matches_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::<f64>::new("n", &[3, 4, 2], &mut rng).unwrap();
        let before = mlp.params().flat();
        let ones = GradientMap::from_layers(
            before.iter().map(|(id, v)| (id.to_string(), vec![1.0; v.len()])).collect(),
        );
        mlp.params_mut().add_scaled(0.5, &ones).unwrap();
        let after = mlp.params().flat();
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*y, *x + 0.5);
            }
        }
        assert_eq!(mlp.params().num_params(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn rebuild_from_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f64>::new("n", &[5, 3, 3, 1], &mut rng).unwrap();
        let again = Mlp::from_params(mlp.params().clone()).unwrap();
        assert_eq!(again.sizes(), &[5, 3, 3, 1]);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::<f64>::new("q", &[2, 1], &mut rng).unwrap();
        let mut opt = Adam::new(0.05);
        let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let target = Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut g = Graph::new();
            let b = mlp.params().bind(&mut g).unwrap();
            let xv = g.constant(x.clone());
            let y = mlp.forward(&mut g, &b, xv).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t).unwrap();
            let s = g.square(d).unwrap();
            let l = g.mean(s).unwrap();
            last = g.value(l).item();
            let grads = g.backward(l).unwrap().layer_map();
            opt.step(mlp.params_mut(), &grads).unwrap();
        }
        assert!(last < 1e-4, "loss {last}");
    }
}

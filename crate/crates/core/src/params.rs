//! Named parameter storage, initialization and binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvGeom;
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub(crate) fn arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    /// Replace a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: self.names[id.0].clone(),
                expected: cur.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Overwrite every parameter from `(name, tensor)` pairs. All parameters
    /// must be present with matching shapes; extra entries are ignored.
    pub fn load_named<'a, I>(&mut self, entries: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, Tensor<T>)>,
    {
        let mut found = vec![false; self.len()];
        for (name, t) in entries {
            if let Some(id) = self.id(name) {
                self.set(id, t)?;
                found[id.0] = true;
            }
        }
        if let Some(i) = found.iter().position(|f| !f) {
            return Err(Error::MissingParam(self.names[i].clone()));
        }
        Ok(())
    }

    /// Redraw every parameter whose name satisfies `pred` from U(lo, hi).
    pub fn randomize_where<R: Rng + ?Sized>(
        &mut self,
        pred: impl Fn(&str) -> bool,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) {
        for i in 0..self.len() {
            if pred(&self.names[i]) {
                let shape = self.values[i].shape().to_vec();
                self.values[i] = Arc::new(Tensor::rand_uniform(&shape, lo, hi, rng));
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Registers parameters under a dotted name prefix. Each random tensor is
/// drawn from a stream keyed by its full name, so a parameter's initial value
/// does not depend on which other parameters the architecture declares.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &mut dyn RngCore) -> Self {
        Self {
            store,
            seed: rng.next_u64(),
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&self.full_name(name)));
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut rng);
        self.tensor(name, t)
    }

    /// Convolution with fan-in scaled uniform initialization.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Conv2d {
        let cin_g = cin / geom.groups;
        let bound = 1.0 / ((cin_g * k * k) as f64).sqrt();
        let mut s = self.scope(name);
        let weight = s.uniform("weight", &[cout, cin_g, k, k], bound);
        let bias = bias.then(|| s.uniform("bias", &[cout], bound));
        Conv2d { weight, bias, geom }
    }

    /// Convolution whose weights and bias start at zero.
    pub fn conv_zero(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Conv2d {
        let mut s = self.scope(name);
        let weight = s.tensor("weight", Tensor::zeros(&[cout, cin / geom.groups, k, k]));
        let bias = bias.then(|| s.tensor("bias", Tensor::zeros(&[cout])));
        Conv2d { weight, bias, geom }
    }

    /// 1x1 convolution (with zero bias) that starts by copying input channel
    /// `o` to output `o` for `o < cout` and ignoring the remaining inputs.
    pub fn conv_select(&mut self, name: &str, cin: usize, cout: usize) -> Conv2d {
        let mut w = vec![T::zero(); cout * cin];
        for o in 0..cout.min(cin) {
            w[o * cin + o] = T::one();
        }
        let mut s = self.scope(name);
        let weight = s.tensor(
            "weight",
            Tensor::from_vec(&[cout, cin, 1, 1], w).expect("shape"),
        );
        let bias = Some(s.tensor("bias", Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            geom: ConvGeom::new(1, 0, 1),
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> LayerNorm {
        let mut s = self.scope(name);
        let gamma = s.tensor("gamma", Tensor::ones(&[c]));
        let beta = s.tensor("beta", Tensor::zeros(&[c]));
        LayerNorm { gamma, beta }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Binding<T> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Binding<T> {
    /// Every parameter becomes a differentiable leaf (on a recording tape).
    pub fn new(tape: &Tape<T>, store: &ParamStore<T>) -> Self {
        Self {
            vars: store.ids().map(|id| tape.leaf_arc(store.arc(id))).collect(),
        }
    }

    /// Parameters as constants, for frozen models and inference.
    pub fn frozen(tape: &Tape<T>, store: &ParamStore<T>) -> Self {
        Self {
            vars: store
                .ids()
                .map(|id| tape.constant_arc(store.arc(id)))
                .collect(),
        }
    }

    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Gradients in parameter order; unreachable parameters get zeros.
    pub fn grads(&self, g: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| g.take(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Convolution layer handle.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builder_names_and_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let mut blk = b.scope("enc1");
        let c = blk.conv("conv", 4, 8, 3, ConvGeom::new(1, 1, 1), true);
        blk.layer_norm("ln", 4);
        assert_eq!(store.name(c.weight), "enc1.conv.weight");
        assert_eq!(store.num_scalars(), 8 * 4 * 9 + 8 + 8);
        let bound = 1.0 / 36f32.sqrt();
        assert!(store.get(c.weight).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn set_checks_shapes_and_load_reports_missing() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        store.add("b", Tensor::zeros(&[3]));
        assert!(matches!(
            store.set(a, Tensor::zeros(&[3])),
            Err(Error::ParamShape { .. })
        ));
        let err = store.load_named([("a", Tensor::ones(&[2]))]).unwrap_err();
        assert!(matches!(err, Error::MissingParam(ref n) if n == "b"));
    }
}

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};

/// One named parameter tensor and its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure(n == value.len(), || {
            Error::ExtentMismatch(format!("param shape {shape:?} vs {} values", value.len()))
        })?;
        Ok(Self {
            shape,
            grad: vec![0.0; value.len()],
            value,
        })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named flat parameter vectors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<()> {
        let p = Param::new(shape, value)?;
        self.params.insert(name.into(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&[f64]> {
        self.params
            .get(name)
            .map(|p| p.value.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .all(|p| p.value.iter().chain(&p.grad).all(|v| v.is_finite()))
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape == b.shape)
    }

    /// Squared L2 norm of all gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum()
    }

    /// Order-sensitive 64-bit FNV-1a digest of every parameter bit pattern.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.params {
            for b in name
                .bytes()
                .chain(p.value.iter().flat_map(|v| v.to_bits().to_le_bytes()))
            {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Keeps only parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every parameter's value as f32 and back, which is what a
    /// checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, crate::tensor::autodiff::Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> crate::tensor::autodiff::Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<crate::tensor::autodiff::Var> {
        self.vars.get(name).copied()
    }
}

impl ParamStore {
    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, graph: &mut crate::tensor::autodiff::Graph) -> Bound {
        self.bind_with(graph, true)
    }

    /// Registers every parameter as a constant (no gradient path).
    pub fn bind_frozen(&self, graph: &mut crate::tensor::autodiff::Graph) -> Bound {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut crate::tensor::autodiff::Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let g = crate::tensor::grid::ImageGrid::from_vec(1, 1, p.len(), p.value.clone())
                    .expect("non-empty parameter");
                let v = if trainable {
                    graph.leaf(g)
                } else {
                    graph.constant(g)
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the graph gradients of bound parameters into the grad slots.
    pub fn accumulate(&mut self, grads: &crate::tensor::autodiff::Gradients, bound: &Bound) {
        for (name, p) in self.params.iter_mut() {
            if let Some(g) = bound.try_get(name).and_then(|v| grads.get(v)) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

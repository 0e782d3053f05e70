use crate::tensor::{fnv1a, splitmix64, Graph, RngStream, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], fan_in = input rows.
    UniformFanIn,
    Zeros,
    Ones,
}

/// Named parameter tensors in insertion order. Each parameter draws from its
/// own (seed, name)-derived stream, so the same name gets the same values
/// regardless of which other parameters a model variant allocates.
pub struct ParamStore<T> {
    seed: u64,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
            Init::UniformFanIn => {
                let mut rng = RngStream::new(splitmix64(self.seed ^ fnv1a(name.as_bytes())));
                let bound = 1.0 / (rows as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect()
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            value: Tensor::matrix(rows, cols, data),
            grad: vec![T::ZERO; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    /// Total scalar parameter count (the weight-sharing audit reads this).
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.to_f64() * g.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// One forward pass under construction: a graph plus the store bindings made
/// so far. Binding is memoized, so a parameter used by every iteration of a
/// weight-shared block is one leaf whose gradient accumulates across uses.
pub struct Build<T: Scalar> {
    pub g: Graph<T>,
    train: bool,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Build<T> {
    pub fn new(store: &ParamStore<T>, train: bool) -> Self {
        Build {
            g: Graph::new(),
            train,
            bound: vec![None; store.len()],
        }
    }

    pub fn checked(store: &ParamStore<T>, train: bool) -> Self {
        let mut b = Self::new(store, train);
        b.g = Graph::checked();
        b
    }

    /// Bind a parameter into the graph (memoized per build).
    pub fn p(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(&store.get(id).value, self.train);
        self.bound[id.0] = Some(v);
        v
    }

    /// Dense per-parameter gradients aligned with the store; zeros for
    /// parameters that were not bound or received no gradient.
    pub fn grads(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out = Vec::with_capacity(store.len());
        for (i, slot) in self.bound.iter().enumerate() {
            let n = store.params[i].value.len();
            match slot.and_then(|v| self.g.grad(v)) {
                Some(g) => out.push(g.to_vec()),
                None => out.push(vec![T::ZERO; n]),
            }
        }
        out
    }

    /// Accumulate this build's gradients straight into the store.
    pub fn flush_grads(&self, store: &mut ParamStore<T>) {
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(g) = slot.and_then(|v| self.g.grad(v)) {
                for (dst, src) in store.params[i].grad.iter_mut().zip(g) {
                    *dst += *src;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_name_same_values_across_layouts() {
        let mut a = ParamStore::<f32>::new(11);
        let _noise = a.add("other", 4, 4, Init::UniformFanIn);
        let wa = a.add("block.w", 3, 3, Init::UniformFanIn);

        let mut b = ParamStore::<f32>::new(11);
        let wb = b.add("block.w", 3, 3, Init::UniformFanIn);

        assert_eq!(a.get(wa).value.data(), b.get(wb).value.data());
    }

    #[test]
    fn binding_is_memoized() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", 2, 2, Init::UniformFanIn);
        let mut build = Build::new(&store, true);
        let v1 = build.p(&store, w);
        let v2 = build.p(&store, w);
        assert_eq!(v1, v2);
    }

    #[test]
    fn shared_binding_accumulates_grads() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", 1, 1, Init::Ones);
        let mut build = Build::new(&store, true);
        let wv = build.p(&store, w);
        // loss = w + 2w = 3w  => dw = 3
        let two_w = build.g.affine_scalar(wv, 2.0, 0.0);
        let sum = build.g.add(wv, two_w);
        let root = build.g.sum_all(sum);
        build.g.backward(root).unwrap();
        build.flush_grads(&mut store);
        assert_eq!(store.get(w).grad, vec![3.0]);
    }
}

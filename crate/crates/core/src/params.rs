//! Named parameter collections that can be flattened into a single vector.
//!
//! Federated silos exchange parameters as flat `f64` vectors; the order of
//! the flat layout is the visiting order of [`ParamSet::visit`].

use crate::tensor::DenseTensor;

pub trait ParamSet {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a DenseTensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites every tensor from `flat`. Panics if the length differs from
    /// [`ParamSet::num_params`].
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length mismatch");
        let mut pos = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
    }

    /// `(name, dims)` for every tensor in visiting order.
    fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.dims().to_vec())));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, t| t.data_mut().fill(value));
    }
}

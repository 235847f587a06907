use indexmap::IndexMap;

use super::{Gradients, Mat, Tape, Var};

/// Named parameter matrices owned by one model.
///
/// Insertion order is preserved; it fixes the layout of checkpoints and the
/// iteration order of optimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    /// Like [`get`](Self::get) but panics with the parameter name; for
    /// parameters the model itself created.
    pub fn expect(&self, name: &str) -> &Mat {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, |_| true)
    }

    /// Records parameters, making those rejected by `trainable` constants.
    pub fn bind_with<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| {
                let train = trainable(name);
                let var = if train {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), (var, train))
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on a tape.
pub struct Bound<'t> {
    vars: IndexMap<String, (Var<'t>, bool)>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
            .0
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).map(|(v, _)| *v)
    }

    /// Gradients of the trainable parameters, by name.
    pub fn gradients(&self, grads: &Gradients) -> IndexMap<String, Mat> {
        self.vars
            .iter()
            .filter(|(_, (_, train))| *train)
            .map(|(name, (var, _))| (name.clone(), grads.of(*var)))
            .collect()
    }
}

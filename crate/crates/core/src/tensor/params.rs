use super::Tensor;

/// Which part of the model a parameter belongs to. Update routing (which loss
/// may touch which weights) is expressed in terms of these groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Feature extractor σ.
    Encoder,
    /// Goal-discriminator d.
    Discriminator,
    /// Shared part of the actor-critic f: instruction embedding, gated
    /// attention, recurrent core, attention projections.
    Trunk,
    PolicyHead,
    ValueHead,
}

impl ParamGroup {
    /// True for parameters of the actor-critic f.
    pub fn is_actor_critic(self) -> bool {
        matches!(
            self,
            ParamGroup::Trunk | ParamGroup::PolicyHead | ParamGroup::ValueHead
        )
    }

    pub fn is_goal_path(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::Discriminator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    group: ParamGroup,
    value: Tensor,
}

/// Named, grouped parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.len(), other.len(), "parameter layout mismatch");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
    }

    /// θ' ← (1−τ)·θ' + τ·θ for every parameter.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) {
        assert_eq!(self.len(), online.len(), "parameter layout mismatch");
        for (t, o) in self.entries.iter_mut().zip(&online.entries) {
            for (x, &y) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
    }

    /// Snapshot of every parameter tensor in a group, in id order.
    pub fn snapshot_group(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|e| pred(e.group))
            .map(|e| e.value.clone())
            .collect()
    }
}

//! Named parameter storage with freezing groups.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Parts of the network that train together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Stem and the first two residual stages.
    EarlyBackbone,
    /// The last residual stage.
    Stage4,
    /// Feature pyramid, proposal network and the three task heads.
    Heads,
}

/// Which groups a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    HeadsOnly,
    Stage4AndUp,
    All,
}

impl TrainableScope {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            TrainableScope::All => true,
            TrainableScope::Stage4AndUp => group != ParamGroup::EarlyBackbone,
            TrainableScope::HeadsOnly => group == ParamGroup::Heads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup, value: Vec<f32>) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(value.len(), len);
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            value,
            grad: vec![0.0; len],
        });
        self.trainable.push(true);
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialized parameter.
    pub fn add_normal<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        group: ParamGroup,
        std: f32,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let value = (0..len)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.add(name, shape, group, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup) -> ParamId {
        let len: usize = shape.iter().product();
        self.add(name, shape, group, vec![0.0; len])
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_scope(&mut self, scope: TrainableScope) {
        for (t, p) in self.trainable.iter_mut().zip(&self.params) {
            *t = scope.includes(p.group);
        }
    }

    pub fn any_trainable(&self, group: ParamGroup) -> bool {
        self.params.iter().zip(&self.trainable).any(|(p, &t)| t && p.group == group)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter_trainable(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.params
            .iter()
            .enumerate()
            .filter(|(i, _)| self.trainable[*i])
    }
}

//! Named parameter tensors with architectural component labels.

use std::collections::HashMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Architectural component a parameter belongs to, used to group gradient
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    EncoderConv,
    DecoderConv,
    Quantizer,
    FusionHead,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::EncoderConv,
        Component::DecoderConv,
        Component::Quantizer,
        Component::FusionHead,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::EncoderConv => "encoder_conv",
            Component::DecoderConv => "decoder_conv",
            Component::Quantizer => "quantizer",
            Component::FusionHead => "fusion_head",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub component: Component,
    pub value: Tensor,
    /// Frozen parameters are bound as constants and skipped by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of parameters. Order is insertion order and is stable
/// across checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, component: Component, value: Tensor, trainable: bool) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            component,
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::dim("set_param", self.params[i].value.shape(), value.shape()));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Registers every parameter on `tape`: trainable ones as leaves, frozen
    /// ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds a uniformly initialised weight (`±1/sqrt(fan_in)`) and a zero bias.
    pub(crate) fn insert_layer(
        &mut self,
        rng: &mut Rng,
        prefix: &str,
        component: Component,
        weight_shape: Vec<usize>,
        fan_in: usize,
        bias_len: usize,
    ) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = weight_shape.iter().product();
        let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(
            &format!("{prefix}.weight"),
            component,
            Tensor::new(weight_shape, w).expect("layer shape"),
            true,
        );
        self.insert(
            &format!("{prefix}.bias"),
            component,
            Tensor::zeros(vec![bias_len]),
            true,
        );
    }
}

/// Tape handles for one [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    /// Handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

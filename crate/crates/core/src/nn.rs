//! Parameterised layers and the session that binds registry entries to a tape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::registry::ParameterRegistry;
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One forward/backward pass. Parameters are copied onto the tape on first
/// use; frozen ones are recorded as constants.
pub struct Session<'r> {
    pub tape: Tape,
    registry: &'r ParameterRegistry,
    bound: BTreeMap<String, Var>,
}

impl<'r> Session<'r> {
    pub fn new(registry: &'r ParameterRegistry) -> Self {
        Session {
            tape: Tape::new(),
            registry,
            bound: BTreeMap::new(),
        }
    }

    pub fn registry(&self) -> &ParameterRegistry {
        self.registry
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.registry.get(name)?;
        let v = self.tape.leaf(p.value.clone(), !p.frozen);
        self.bound.insert(name.into(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter, in name order.
    pub fn gradients(&self) -> Vec<(String, Vec<Scalar>)> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }

    /// Names of all parameters touched by this pass.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}

/// Adds session gradients into the registry accumulators.
pub fn accumulate(registry: &mut ParameterRegistry, grads: Vec<(String, Vec<Scalar>)>) -> Result<()> {
    for (name, g) in grads {
        registry.accumulate_grad(&name, &g)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub din: usize,
    pub dout: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
}

impl Linear {
    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut Rng,
        prefix: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let w = match init {
            Init::Xavier => rng::xavier_uniform(rng, &[din, dout], din, dout),
            Init::Zeros => Tensor::zeros(&[din, dout]),
        };
        reg.insert(&weight, w)?;
        let bias = if bias {
            let b = format!("{prefix}.bias");
            reg.insert(&b, Tensor::zeros(&[dout]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            din,
            dout,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| s.param(n)).transpose()?;
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn register(reg: &mut ParameterRegistry, prefix: &str, d: usize) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        reg.insert(&gain, Tensor::full(&[d], 1.0))?;
        reg.insert(&bias, Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(&self.gain)?;
        let b = s.param(&self.bias)?;
        s.tape.layer_norm(x, g, b)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut Rng,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::register(reg, rng, &format!("{prefix}.fc1"), d, hidden, true, Init::Xavier)?,
            fc2: Linear::register(reg, rng, &format!("{prefix}.fc2"), hidden, d, true, Init::Xavier)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.tape.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Token-mixing linear operator whose base `w_out × w_in` weight is resized
/// bilinearly to whatever lengths it meets at call time.
#[derive(Clone, Debug, PartialEq)]
pub struct DyLinearOp {
    pub weight: String,
    pub bias: String,
    pub w_out: usize,
    pub w_in: usize,
}

impl DyLinearOp {
    pub fn register(
        reg: &mut ParameterRegistry,
        rng: &mut Rng,
        prefix: &str,
        w_out: usize,
        w_in: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        reg.insert(&weight, rng::xavier_uniform(rng, &[w_out, w_in], w_in, w_out))?;
        reg.insert(&bias, Tensor::zeros(&[w_out]))?;
        Ok(DyLinearOp {
            weight,
            bias,
            w_out,
            w_in,
        })
    }

    /// Applies the resized weight along axis 1 of `z: [B, l_in, ...]`,
    /// producing `[B, l_out, ...]`.
    pub fn forward(&self, s: &mut Session, z: Var, l_out: usize) -> Result<Var> {
        let shape = s.tape.shape(z);
        if shape.len() < 2 || l_out == 0 {
            return Err(Error::dim("dylinear", shape, &[l_out]));
        }
        let l_in = shape[1];
        let w = s.param(&self.weight)?;
        let b = s.param(&self.bias)?;
        let w = s.tape.bilinear_resize(w, l_out, l_in)?;
        let b = if l_out == self.w_out {
            b
        } else {
            let col = s.tape.reshape(b, &[self.w_out, 1])?;
            let col = s.tape.bilinear_resize(col, l_out, 1)?;
            s.tape.reshape(col, &[l_out])?
        };
        s.tape.token_mix(w, Some(b), z)
    }
}

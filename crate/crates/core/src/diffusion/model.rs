use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::ndtensor::{ParamSet, Tape, Tensor, Var};
use crate::rng;

/// Dimension of every data sample.
pub const DATA_DIM: usize = 2;

const COND_EMBED: &str = "cond_embed";
const OUT_W: &str = "out.w";
const OUT_B: &str = "out.b";

fn hidden_w(i: usize) -> String {
    format!("hidden{i}.w")
}

fn hidden_b(i: usize) -> String {
    format!("hidden{i}.b")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelArch {
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Real conditions; one extra embedding row is reserved for the null condition.
    pub num_conditions: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            time_dim: 32,
            cond_dim: 32,
            hidden: 128,
            hidden_layers: 2,
            num_conditions: 8,
        }
    }
}

impl ModelArch {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(DiffusionError::InvalidArch(format!(
                "time_dim must be even and positive, got {}",
                self.time_dim
            )));
        }
        if self.cond_dim == 0 || self.hidden == 0 || self.num_conditions == 0 {
            return Err(DiffusionError::InvalidArch(
                "cond_dim, hidden and num_conditions must be positive".into(),
            ));
        }
        if self.hidden_layers < 2 {
            return Err(DiffusionError::InvalidArch(
                "at least two hidden layers are needed for the skip pass".into(),
            ));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        DATA_DIM + self.time_dim + self.cond_dim
    }
}

/// Which forward path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Normal,
    /// The designated hidden layer is replaced by the identity.
    Skip,
}

/// Anything that predicts noise for a batch of noisy samples.
pub trait EpsPredictor {
    /// Condition index that selects the unconditional branch.
    fn null_condition(&self) -> usize;

    fn predict(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[usize],
        pass: Pass,
    ) -> Result<Tensor, DiffusionError>;
}

/// Sinusoidal embedding: `[sin(t·f_k)…, cos(t·f_k)…]`, `f_k = 10000^(−k/half)`.
pub fn time_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        data.extend(freqs.iter().map(|f| (t * f).sin()));
        data.extend(freqs.iter().map(|f| (t * f).cos()));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding length is ts.len() * dim")
}

/// Conditional ε-prediction network.
///
/// Input is `[x_t, time embedding, condition embedding]`, followed by
/// `hidden_layers` SiLU layers of equal width and a linear head. The skip pass
/// bypasses `skip_layer`, which must be a width-preserving layer (index ≥ 1).
#[derive(Debug, Clone, PartialEq)]
pub struct EpsModel {
    params: ParamSet,
    arch: ModelArch,
    skip_layer: usize,
}

/// Tape handles for one binding of a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    cond_embed: Var,
    hidden: Vec<(Var, Var)>,
    out: (Var, Var),
}

impl EpsModel {
    /// Fresh model with uniform(±1/√fan_in) weights and zero biases.
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let mut r = rng::seeded(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len).map(|_| r.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape product equals length")
        };
        let mut params = ParamSet::new();
        params.insert(
            COND_EMBED,
            uniform(&[arch.num_conditions + 1, arch.cond_dim], 1),
        )?;
        let mut fan_in = arch.input_dim();
        for i in 0..arch.hidden_layers {
            params.insert(hidden_w(i), uniform(&[fan_in, arch.hidden], fan_in))?;
            params.insert(hidden_b(i), Tensor::zeros(&[arch.hidden]))?;
            fan_in = arch.hidden;
        }
        params.insert(OUT_W, uniform(&[arch.hidden, DATA_DIM], arch.hidden))?;
        params.insert(OUT_B, Tensor::zeros(&[DATA_DIM]))?;
        Ok(Self {
            params,
            arch,
            skip_layer: 1,
        })
    }

    /// Rebuilds a model from a parameter set, inferring the architecture
    /// from the stored shapes.
    pub fn from_params(params: ParamSet) -> Result<Self, DiffusionError> {
        let shape = |name: &str| -> Result<Vec<usize>, DiffusionError> {
            Ok(params.value(name)?.shape().to_vec())
        };
        let embed = shape(COND_EMBED)?;
        let first = shape(&hidden_w(0))?;
        if embed.len() != 2 || first.len() != 2 || embed[0] < 2 {
            return Err(DiffusionError::InvalidArch("unexpected embedding shapes".into()));
        }
        let hidden_layers = (0..).take_while(|&i| params.get(&hidden_w(i)).is_some()).count();
        let cond_dim = embed[1];
        let time_dim = first[0]
            .checked_sub(DATA_DIM + cond_dim)
            .ok_or_else(|| DiffusionError::InvalidArch("input width too small".into()))?;
        let arch = ModelArch {
            time_dim,
            cond_dim,
            hidden: first[1],
            hidden_layers,
            num_conditions: embed[0] - 1,
        };
        arch.validate()?;
        let reference = Self::new(arch, 0)?;
        let expected: Vec<_> = reference
            .params
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect();
        let actual: Vec<_> = params
            .iter()
            .map(|e| (e.name.clone(), e.value.shape().to_vec()))
            .collect();
        if expected != actual {
            return Err(DiffusionError::InvalidArch(
                "parameter layout does not match the inferred architecture".into(),
            ));
        }
        Ok(Self {
            params,
            arch,
            skip_layer: 1,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn skip_layer(&self) -> usize {
        self.skip_layer
    }

    pub fn set_skip_layer(&mut self, layer: usize) -> Result<(), DiffusionError> {
        if layer == 0 || layer >= self.arch.hidden_layers {
            return Err(DiffusionError::InvalidArch(format!(
                "skip layer {layer} must be a width-preserving hidden layer"
            )));
        }
        self.skip_layer = layer;
        Ok(())
    }

    /// Puts the parameters on `tape`. With `trainable` set, gradients from a
    /// later backward pass flow into this model's slots; otherwise the weights
    /// are recorded as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel, DiffusionError> {
        let mut var = |name: &str| -> Result<Var, DiffusionError> {
            if trainable {
                Ok(tape.param(&self.params, name)?)
            } else {
                Ok(tape.constant(self.params.value(name)?.clone()))
            }
        };
        let cond_embed = var(COND_EMBED)?;
        let hidden = (0..self.arch.hidden_layers)
            .map(|i| Ok((var(&hidden_w(i))?, var(&hidden_b(i))?)))
            .collect::<Result<Vec<_>, DiffusionError>>()?;
        let out = (var(OUT_W)?, var(OUT_B)?);
        Ok(BoundModel {
            cond_embed,
            hidden,
            out,
        })
    }

    fn check_inputs(&self, rows: usize, ts: &[usize], conds: &[usize]) -> Result<(), DiffusionError> {
        if ts.len() != rows || conds.len() != rows {
            return Err(DiffusionError::BatchMismatch {
                expected: rows,
                got: ts.len().min(conds.len()),
            });
        }
        if let Some(&c) = conds.iter().find(|&&c| c > self.arch.num_conditions) {
            return Err(DiffusionError::InvalidCondition(c));
        }
        Ok(())
    }

    /// Records one forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        ts: &[usize],
        conds: &[usize],
        pass: Pass,
    ) -> Result<Var, DiffusionError> {
        let rows = tape.value(x).rows();
        self.check_inputs(rows, ts, conds)?;
        let temb = tape.constant(time_embedding(ts, self.arch.time_dim));
        let width = self.arch.num_conditions + 1;
        let mut onehot = Tensor::zeros(&[rows, width]);
        for (i, &c) in conds.iter().enumerate() {
            onehot.row_mut(i)[c] = 1.0;
        }
        let onehot = tape.constant(onehot);
        let cemb = tape.matmul(onehot, bound.cond_embed)?;
        let mut h = tape.concat(&[x, temb, cemb])?;
        for (i, &(w, b)) in bound.hidden.iter().enumerate() {
            if pass == Pass::Skip && i == self.skip_layer {
                continue;
            }
            let z = tape.affine(h, w, b)?;
            h = tape.silu(z)?;
        }
        Ok(tape.affine(h, bound.out.0, bound.out.1)?)
    }
}

impl EpsPredictor for EpsModel {
    fn null_condition(&self) -> usize {
        self.arch.num_conditions
    }

    fn predict(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[usize],
        pass: Pass,
    ) -> Result<Tensor, DiffusionError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(x_t.clone());
        let out = self.forward_on(&mut tape, &bound, x, ts, conds, pass)?;
        Ok(tape.value(out).clone())
    }
}

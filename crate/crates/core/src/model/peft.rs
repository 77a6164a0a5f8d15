use rand::Rng;

use super::params::NamedTensors;
use super::Activation;
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::{Error, Result};

/// One bottleneck injection site: `W_down` is `d×r`, `W_up` is `r×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSite {
    pub down: Tensor,
    pub up: Tensor,
}

/// One adapter per transformer block, injected after the block's second norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub sites: Vec<AdapterSite>,
}

/// Kaiming-uniform down projection and zero up projection, so a freshly
/// injected adapter is the identity map.
pub fn init_adapter(n_layers: usize, d: usize, r: usize, rng: &mut impl Rng) -> AdapterParams {
    let bound = (6.0 / d as f64).sqrt();
    let sites = (0..n_layers)
        .map(|_| AdapterSite {
            down: Tensor::matrix(d, r, (0..d * r).map(|_| rng.gen_range(-bound..bound)).collect()),
            up: Tensor::zeros(&[r, d]),
        })
        .collect();
    AdapterParams { sites }
}

impl AdapterParams {
    pub fn bottleneck(&self) -> usize {
        self.sites.first().map_or(0, |s| s.down.cols())
    }

    pub fn scalar_count(&self) -> usize {
        self.sites.iter().map(|s| s.down.len() + s.up.len()).sum()
    }

    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        let mut p = NamedTensors::new();
        for (l, s) in self.sites.iter().enumerate() {
            p.insert(format!("{prefix}.layer{l}.down"), s.down.clone());
            p.insert(format!("{prefix}.layer{l}.up"), s.up.clone());
        }
        p
    }

    pub fn from_named(params: &NamedTensors, prefix: &str, n_layers: usize) -> Result<Self> {
        let sites = (0..n_layers)
            .map(|l| {
                Ok(AdapterSite {
                    down: params.require(&format!("{prefix}.layer{l}.down"))?.clone(),
                    up: params.require(&format!("{prefix}.layer{l}.up"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sites })
    }
}

/// Dual-adapter teacher: the frozen copy of the shared adapter plus the
/// client's private adapter, averaged with equal weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DatModule {
    pub frozen: AdapterParams,
    pub local: AdapterParams,
}

impl DatModule {
    pub fn new(frozen: AdapterParams, local: AdapterParams) -> Result<Self> {
        if frozen.sites.len() != local.sites.len() || frozen.bottleneck() != local.bottleneck() {
            return Err(Error::Model("dual adapters must share depth and bottleneck".into()));
        }
        Ok(Self { frozen, local })
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var, AutodiffError> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
    }
}

/// `φ(h·W_down)·W_up`.
pub fn adapter_delta(tape: &mut Tape, h: Var, down: Var, up: Var, act: Activation) -> Result<Var, AutodiffError> {
    let z = tape.matmul(h, down)?;
    let z = activate(tape, z, act)?;
    tape.matmul(z, up)
}

/// `h' = h + φ(h·W_down)·W_up`.
pub fn adapter_forward(tape: &mut Tape, h: Var, down: Var, up: Var, act: Activation) -> Result<Var, AutodiffError> {
    let delta = adapter_delta(tape, h, down, up, act)?;
    tape.add(h, delta)
}

/// `h' = h + (½·φ(h·Ŵ_down)·Ŵ_up + ½·φ(h·W_c,down)·W_c,up)`.
///
/// The two halves are summed before the residual so equal branches give
/// exactly the single-adapter delta.
pub fn dat_forward(
    tape: &mut Tape,
    h: Var,
    frozen: (Var, Var),
    local: (Var, Var),
    act: Activation,
) -> Result<Var, AutodiffError> {
    let df = adapter_delta(tape, h, frozen.0, frozen.1, act)?;
    let df = tape.scale(df, 0.5)?;
    let dl = adapter_delta(tape, h, local.0, local.1, act)?;
    let dl = tape.scale(dl, 0.5)?;
    let delta = tape.add(df, dl)?;
    tape.add(h, delta)
}

/// `x·W + (1/r)·x·B·A` with `B: d×r` (zero at init) and `A: r×d`.
pub fn lora_forward(tape: &mut Tape, x: Var, frozen: Var, b: Var, a: Var) -> Result<Var, AutodiffError> {
    let r = tape.value(b).cols();
    let base = tape.matmul(x, frozen)?;
    let low = tape.matmul(x, b)?;
    let low = tape.matmul(low, a)?;
    let low = tape.scale(low, 1.0 / r as f64)?;
    tape.add(base, low)
}

/// Prepends the learnable prompt rows to one sample's sequence.
pub fn prompt_prepend(tape: &mut Tape, seq: Var, prompt: Var) -> Result<Var, AutodiffError> {
    if tape.value(prompt).rows() == 0 {
        return Ok(seq);
    }
    tape.concat_rows(&[prompt, seq])
}

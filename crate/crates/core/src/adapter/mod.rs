//! The tied low-rank adapter family.
//!
//! Every mode computes the same update on the fused QKV projection,
//!
//! ```text
//! z = W x + (alpha / r) · diag(v) · B · diag(u) · A · x
//! ```
//!
//! with `A` stored `r × d` and `B` stored `3d × r`. Modes differ in which of
//! `A`, `B`, `u`, `v` are trained and whether `A`/`B` are shared by all layers.
//! Scaling vectors that a mode does not train are the constant 1-vector and are
//! never stored.

mod mode;

pub use mode::{ModelDims, TiedLoraMode, TrainMask};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numkit::kernels::{gemm, MatView};
use crate::numkit::{Graph, Tensor, Var};

/// Complete description of one adapter: mode, rank, scaling and initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiedLoraConfig {
    pub mode: TiedLoraMode,
    pub rank: usize,
    pub alpha: f64,
    pub dims: ModelDims,
    pub init_seed: u64,
    pub init_std: f64,
    /// Start TB/TBU with `B = 0` instead of a random `B`.
    pub zero_start_override: bool,
}

impl TiedLoraConfig {
    /// Defaults: `alpha = rank` (prefactor exactly 1) and `init_std = 1/sqrt(d)`.
    pub fn new(mode: TiedLoraMode, rank: usize, dims: ModelDims, init_seed: u64) -> Result<Self> {
        let cfg = TiedLoraConfig {
            mode,
            rank,
            alpha: rank as f64,
            dims,
            init_seed,
            init_std: 1.0 / (dims.d as f64).sqrt(),
            zero_start_override: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(LabError::Config("rank must be at least 1".into()));
        }
        if self.dims.d == 0 || self.dims.layers == 0 {
            return Err(LabError::Config("model dims must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LabError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(LabError::Config(format!("init_std must be finite, got {}", self.init_std)));
        }
        if self.zero_start_override
            && !matches!(self.mode, TiedLoraMode::Tb | TiedLoraMode::Tbu)
        {
            return Err(LabError::Config(format!(
                "zero_start_override only applies to TB and TBU, not {}",
                self.mode
            )));
        }
        Ok(())
    }

    pub fn prefactor(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Whether the adapted model equals its base at initialization.
    pub fn starts_at_zero(&self) -> bool {
        self.mode.zero_start() || self.zero_start_override
    }
}

/// Trainable scalar count for a configuration, straight from the closed-form budgets.
pub fn count_trainable(config: &TiedLoraConfig) -> u64 {
    let d = config.dims.d as u64;
    let l = config.dims.layers as u64;
    let r = config.rank as u64;
    match config.mode {
        TiedLoraMode::Lora => 4 * l * d * r,
        TiedLoraMode::Tab => 4 * d * r,
        TiedLoraMode::Tabuv => 4 * d * r + l * (r + 3 * d),
        TiedLoraMode::Tbu => (l + 3 * d) * r,
        TiedLoraMode::Tb => 3 * d * r,
        TiedLoraMode::Tauv => d * r + l * (r + 3 * d),
        TiedLoraMode::Ta => d * r,
        TiedLoraMode::Tuv => l * (r + 3 * d),
    }
}

/// `count_trainable(mode) / count_trainable(LORA)` at the same geometry and rank.
pub fn fraction_of_lora(config: &TiedLoraConfig) -> f64 {
    let lora = TiedLoraConfig {
        mode: TiedLoraMode::Lora,
        ..config.clone()
    };
    count_trainable(config) as f64 / count_trainable(&lora) as f64
}

/// Which adapter component a slot holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    A,
    B,
    U,
    V,
}

/// One stored adapter tensor.
#[derive(Clone, Debug)]
pub struct Slot<'a> {
    pub name: String,
    pub component: Component,
    pub trainable: bool,
    pub tensor: &'a Tensor,
}

/// Stored adapter tensors.
///
/// Slot order is fixed: every `A` instance, every `B` instance, then `u.l`
/// followed by `v.l` for each layer `l` (only the stored ones).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    a: Vec<Tensor>,
    b: Vec<Tensor>,
    u: Option<Vec<Tensor>>,
    v: Option<Vec<Tensor>>,
    mask: TrainMask,
    tied: bool,
    rank: usize,
    dims: ModelDims,
}

/// Samples a fresh adapter. Deterministic in `config.init_seed`.
pub fn init_adapter(config: &TiedLoraConfig) -> Result<AdapterParams> {
    config.validate()?;
    let ModelDims { d, layers } = config.dims;
    let r = config.rank;
    let mode = config.mode;
    let mask = mode.mask();
    let instances = if mode.tied() { 1 } else { layers };
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);

    let a = (0..instances)
        .map(|_| Tensor::randn(&[r, d], config.init_std, &mut rng))
        .collect();
    let b_zero = matches!(mode, TiedLoraMode::Lora | TiedLoraMode::Tab) || config.zero_start_override;
    let b = (0..instances)
        .map(|_| {
            if b_zero {
                Tensor::zeros(&[3 * d, r])
            } else {
                Tensor::randn(&[3 * d, r], config.init_std, &mut rng)
            }
        })
        .collect();
    let u = mask.u.then(|| vec![Tensor::ones(&[r]); layers]);
    // every mode that trains v starts it at zero
    let v = mask.v.then(|| vec![Tensor::zeros(&[3 * d]); layers]);

    Ok(AdapterParams {
        a,
        b,
        u,
        v,
        mask,
        tied: mode.tied(),
        rank: r,
        dims: config.dims,
    })
}

impl AdapterParams {
    /// Reassembles params from named slots (as produced by [`AdapterParams::slots`]).
    pub fn from_named(config: &TiedLoraConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut fresh = init_adapter(config)?;
        let names: Vec<String> = fresh.slots().into_iter().map(|s| s.name).collect();
        if names.len() != named.len() {
            return Err(LabError::Config(format!(
                "{} adapter expects {} tensors, got {}",
                config.mode,
                names.len(),
                named.len()
            )));
        }
        for (slot, ((name, tensor), expected)) in fresh
            .all_tensors_mut()
            .into_iter()
            .zip(named.into_iter().zip(&names))
        {
            if &name != expected {
                return Err(LabError::Config(format!(
                    "adapter tensor {name:?} found where {expected:?} was expected"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(LabError::dim("adapter slot", tensor.shape(), slot.shape()));
            }
            *slot = tensor;
        }
        Ok(fresh)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn mask(&self) -> TrainMask {
        self.mask
    }

    pub fn is_tied(&self) -> bool {
        self.tied
    }

    fn instance(&self, layer: usize) -> usize {
        if self.tied {
            0
        } else {
            layer
        }
    }

    pub fn a(&self, layer: usize) -> &Tensor {
        &self.a[self.instance(layer)]
    }

    pub fn b(&self, layer: usize) -> &Tensor {
        &self.b[self.instance(layer)]
    }

    /// Stored `u` for a layer; `None` means the constant 1-vector.
    pub fn u(&self, layer: usize) -> Option<&Tensor> {
        self.u.as_ref().map(|u| &u[layer])
    }

    /// Stored `v` for a layer; `None` means the constant 1-vector.
    pub fn v(&self, layer: usize) -> Option<&Tensor> {
        self.v.as_ref().map(|v| &v[layer])
    }

    /// Number of distinct storage instances of `A` (and of `B`).
    pub fn instances(&self) -> usize {
        self.a.len()
    }

    /// All stored tensors in slot order.
    pub fn slots(&self) -> Vec<Slot<'_>> {
        let tied = self.tied;
        let name = |c: &str, i: usize| {
            if tied {
                c.to_string()
            } else {
                format!("{c}.{i}")
            }
        };
        let mut out = Vec::new();
        for (i, t) in self.a.iter().enumerate() {
            out.push(Slot {
                name: name("A", i),
                component: Component::A,
                trainable: self.mask.a,
                tensor: t,
            });
        }
        for (i, t) in self.b.iter().enumerate() {
            out.push(Slot {
                name: name("B", i),
                component: Component::B,
                trainable: self.mask.b,
                tensor: t,
            });
        }
        for l in 0..self.dims.layers {
            if let Some(u) = &self.u {
                out.push(Slot {
                    name: format!("u.{l}"),
                    component: Component::U,
                    trainable: true,
                    tensor: &u[l],
                });
            }
            if let Some(v) = &self.v {
                out.push(Slot {
                    name: format!("v.{l}"),
                    component: Component::V,
                    trainable: true,
                    tensor: &v[l],
                });
            }
        }
        out
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.a.iter_mut().chain(self.b.iter_mut()).collect();
        match (&mut self.u, &mut self.v) {
            (Some(u), Some(v)) => {
                for (ul, vl) in u.iter_mut().zip(v.iter_mut()) {
                    out.push(ul);
                    out.push(vl);
                }
            }
            (Some(u), None) => out.extend(u.iter_mut()),
            (None, Some(v)) => out.extend(v.iter_mut()),
            (None, None) => {}
        }
        out
    }

    /// Trainable tensors only, in slot order.
    pub fn trainable_slots(&self) -> Vec<Slot<'_>> {
        self.slots().into_iter().filter(|s| s.trainable).collect()
    }

    /// Mutable trainable tensors, same order as [`AdapterParams::trainable_slots`].
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let flags: Vec<bool> = self.slots().iter().map(|s| s.trainable).collect();
        self.all_tensors_mut()
            .into_iter()
            .zip(flags)
            .filter_map(|(t, f)| f.then_some(t))
            .collect()
    }

    pub fn trainable_count(&self) -> u64 {
        self.trainable_slots().iter().map(|s| s.tensor.numel() as u64).sum()
    }

    /// Fingerprints of every frozen slot, keyed by slot name.
    pub fn frozen_fingerprints(&self) -> Vec<(String, [u8; 32])> {
        self.slots()
            .into_iter()
            .filter(|s| !s.trainable)
            .map(|s| (s.name, s.tensor.fingerprint()))
            .collect()
    }

    /// Checks that tensor shapes agree with the configuration.
    pub fn validate(&self, config: &TiedLoraConfig) -> Result<()> {
        if self.rank != config.rank || self.dims != config.dims {
            return Err(LabError::Config(format!(
                "adapter holds rank {} dims {:?}, config says rank {} dims {:?}",
                self.rank, self.dims, config.rank, config.dims
            )));
        }
        if self.tied != config.mode.tied() || self.mask != config.mode.mask() {
            return Err(LabError::Config(format!(
                "adapter layout does not match mode {}",
                config.mode
            )));
        }
        let (d, r, l) = (config.dims.d, config.rank, config.dims.layers);
        let instances = if self.tied { 1 } else { l };
        let bad = |what: &str, t: &Tensor, want: &[usize]| -> Result<()> {
            if t.shape() != want {
                return Err(LabError::Config(format!(
                    "{what} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        if self.a.len() != instances || self.b.len() != instances {
            return Err(LabError::Config("wrong number of A/B instances".into()));
        }
        for t in &self.a {
            bad("A", t, &[r, d])?;
        }
        for t in &self.b {
            bad("B", t, &[3 * d, r])?;
        }
        for (name, vecs, len) in [("u", &self.u, r), ("v", &self.v, 3 * d)] {
            if let Some(vs) = vecs {
                if vs.len() != l {
                    return Err(LabError::Config(format!("{name} needs {l} layer vectors")));
                }
                for t in vs {
                    bad(name, t, &[len])?;
                }
            }
        }
        Ok(())
    }
}

fn check_layer(config: &TiedLoraConfig, layer: usize) -> Result<()> {
    if layer >= config.dims.layers {
        return Err(LabError::Index {
            what: "adapter layer",
            index: layer,
            len: config.dims.layers,
        });
    }
    Ok(())
}

/// Materialized update `(alpha/r) · diag(v) · B · diag(u) · A` for one layer, `3d × d`.
pub fn adapter_delta(params: &AdapterParams, config: &TiedLoraConfig, layer: usize) -> Result<Tensor> {
    check_layer(config, layer)?;
    params.validate(config)?;
    let (d, r) = (config.dims.d, config.rank);
    let mut bu = params.b(layer).data().to_vec();
    if let Some(u) = params.u(layer) {
        for row in bu.chunks_exact_mut(r) {
            row.iter_mut().zip(u.data()).for_each(|(x, s)| *x *= s);
        }
    }
    let mut delta = vec![0.0; 3 * d * d];
    gemm(
        MatView::new(&bu, 3 * d, r),
        MatView::new(params.a(layer).data(), r, d),
        0.0,
        &mut delta,
    );
    if let Some(v) = params.v(layer) {
        for (row, s) in delta.chunks_exact_mut(d).zip(v.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
    }
    let pre = config.prefactor();
    if pre != 1.0 {
        delta.iter_mut().for_each(|x| *x *= pre);
    }
    Tensor::matrix(3 * d, d, delta)
}

/// Adapter tensors registered as leaves of a [`Graph`].
#[derive(Clone, Debug)]
pub struct AdapterVars {
    a: Vec<Var>,
    b: Vec<Var>,
    u: Option<Vec<Var>>,
    v: Option<Vec<Var>>,
    tied: bool,
    prefactor: f64,
    trainable: Vec<Var>,
}

impl AdapterVars {
    /// Adds every stored tensor as a leaf; trainable ones require gradients when
    /// `track_grads` is set.
    pub fn register(g: &mut Graph, params: &AdapterParams, config: &TiedLoraConfig, track_grads: bool) -> Self {
        let mask = params.mask;
        let mut trainable = Vec::new();
        let mut add = |g: &mut Graph, t: &Tensor, train: bool| {
            let v = g.leaf(t.clone(), train && track_grads);
            if train {
                trainable.push(v);
            }
            v
        };
        let a: Vec<Var> = params.a.iter().map(|t| add(g, t, mask.a)).collect();
        let b: Vec<Var> = params.b.iter().map(|t| add(g, t, mask.b)).collect();
        let mut u = params.u.as_ref().map(|_| Vec::new());
        let mut v = params.v.as_ref().map(|_| Vec::new());
        for l in 0..params.dims.layers {
            if let (Some(us), Some(src)) = (u.as_mut(), params.u.as_ref()) {
                us.push(add(g, &src[l], true));
            }
            if let (Some(vs), Some(src)) = (v.as_mut(), params.v.as_ref()) {
                vs.push(add(g, &src[l], true));
            }
        }
        AdapterVars {
            a,
            b,
            u,
            v,
            tied: params.tied,
            prefactor: config.prefactor(),
            trainable,
        }
    }

    /// Trainable leaves in slot order.
    pub fn trainable_vars(&self) -> &[Var] {
        &self.trainable
    }

    pub fn a_var(&self, layer: usize) -> Var {
        self.a[if self.tied { 0 } else { layer }]
    }

    pub fn b_var(&self, layer: usize) -> Var {
        self.b[if self.tied { 0 } else { layer }]
    }

    /// Adapter term for row inputs `x (n×d)`: `(alpha/r) · ((x Aᵀ) ∘ u) Bᵀ ∘ v`, shape `n×3d`.
    pub fn delta_path(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let mut h = g.matmul_bt(x, self.a_var(layer))?;
        if let Some(u) = &self.u {
            h = g.scale_cols(h, u[layer])?;
        }
        let mut z = g.matmul_bt(h, self.b_var(layer))?;
        if let Some(v) = &self.v {
            z = g.scale_cols(z, v[layer])?;
        }
        if self.prefactor != 1.0 {
            z = g.scale(z, self.prefactor)?;
        }
        Ok(z)
    }

    /// `x Wᵀ (+ bias) + adapter term`, i.e. `W x + ΔW x` for each row `x`.
    pub fn project(&self, g: &mut Graph, layer: usize, w: Var, bias: Option<Var>, x: Var) -> Result<Var> {
        let base = base_projection(g, w, bias, x)?;
        let delta = self.delta_path(g, layer, x)?;
        g.add(base, delta)
    }
}

/// `x Wᵀ (+ bias)`.
pub fn base_projection(g: &mut Graph, w: Var, bias: Option<Var>, x: Var) -> Result<Var> {
    let z = g.matmul_bt(x, w)?;
    match bias {
        Some(b) => g.add_bias(z, b),
        None => Ok(z),
    }
}

/// Adapted projection `W x + ΔW x` without materializing `ΔW`.
///
/// `x` may be a single vector of length `d` (returns length `3d`) or a batch
/// of rows `n × d` (returns `n × 3d`).
pub fn adapter_forward(
    params: &AdapterParams,
    config: &TiedLoraConfig,
    layer: usize,
    w: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    check_layer(config, layer)?;
    params.validate(config)?;
    let d = config.dims.d;
    if w.shape() != [3 * d, d] {
        return Err(LabError::dim("adapter_forward weight", w.shape(), &[3 * d, d]));
    }
    let single = x.shape().len() == 1;
    let rows = if single {
        x.clone().reshape(vec![1, x.numel()])?
    } else {
        x.clone()
    };
    if rows.cols() != d || !rows.is_matrix() {
        return Err(LabError::dim("adapter_forward input", x.shape(), &[d]));
    }
    let mut g = Graph::new();
    let vars = AdapterVars::register(&mut g, params, config, false);
    let wv = g.constant(w.clone());
    let xv = g.constant(rows);
    let z = vars.project(&mut g, layer, wv, None, xv)?;
    let out = g.value(z).clone();
    if single {
        out.reshape(vec![3 * d])
    } else {
        Ok(out)
    }
}

/// Folds every layer's update into a copy of the base QKV weights.
pub fn merge(params: &AdapterParams, config: &TiedLoraConfig, base: &[Tensor]) -> Result<Vec<Tensor>> {
    if base.len() != config.dims.layers {
        return Err(LabError::Config(format!(
            "merge needs {} base matrices, got {}",
            config.dims.layers,
            base.len()
        )));
    }
    base.iter()
        .enumerate()
        .map(|(l, w)| {
            let delta = adapter_delta(params, config, l)?;
            w.add(&delta)
        })
        .collect()
}

/// Gradient of one logical component after tying is resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum ComponentGrad {
    Shared(Tensor),
    PerLayer(Vec<Tensor>),
}

/// Combines per-layer gradient contributions: tied components receive the sum.
pub fn tied_grad_accumulate(per_layer: &[Tensor], tied: bool) -> Result<ComponentGrad> {
    let first = per_layer
        .first()
        .ok_or_else(|| LabError::Contract("no per-layer gradients".into()))?;
    for g in per_layer {
        if g.shape() != first.shape() {
            return Err(LabError::dim("tied_grad_accumulate", first.shape(), g.shape()));
        }
    }
    if !tied {
        return Ok(ComponentGrad::PerLayer(per_layer.to_vec()));
    }
    let mut acc = first.clone();
    for g in &per_layer[1..] {
        acc = acc.add(g)?;
    }
    Ok(ComponentGrad::Shared(acc))
}

#[cfg(test)]
mod tests;

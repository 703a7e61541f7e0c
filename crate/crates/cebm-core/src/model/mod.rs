//! Energy models: the conjugate CEBM, its Gaussian-mixture variant, and an
//! unconditional baseline sharing the same trunk.
//!
//! The CEBM joint energy is E(x,z) = -⟨t(x), η(z)⟩ + E_λ(z) with
//! η(z_k) = (z_k, z_k²). Because the bias is conjugate, the posterior over z
//! is the Gaussian with natural parameters λ̃ = λ + t(x) and the marginal
//! energy has the closed form E(x) = -B(λ̃(x)) + B(λ).

mod encoder;

pub use encoder::{Activation, EncoderConfig, LayerSpec, MAX_LATENT_DIM};

use crate::autodiff::{NodeId, Tape, TensorValue};
use crate::error::{Error, Result};
use crate::expfam::{
    log_normalizer_b, natural_to_mean, posterior_params, softplus, GaussianNaturalParams,
};
use crate::rng::{stream, Purpose, Stream};

/// Named parameter tensors in a fixed order. The order is the contract for
/// optimizer state, tape binding, and checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    items: Vec<(String, TensorValue)>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, value: TensorValue) -> Result<()> {
        let name = name.into();
        if self.items.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid("param", format!("duplicate name {name}")));
        }
        self.items.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorValue> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorValue> {
        self.items
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorValue)> {
        self.items.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut TensorValue> {
        self.items.iter_mut().map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.items.iter().map(|(_, v)| v.numel()).sum()
    }

    /// Overwrite every tensor from `entries`, requiring an exact match of
    /// names and shapes (order-insensitive on the input side).
    pub fn restore(&mut self, entries: &[(String, TensorValue)]) -> Result<()> {
        if entries.len() != self.items.len() {
            return Err(Error::format(
                "params",
                format!("expected {} tensors, got {}", self.items.len(), entries.len()),
            ));
        }
        for (name, value) in entries {
            let slot = self.get_mut(name).ok_or_else(|| {
                Error::format("params", format!("unknown parameter {name}"))
            })?;
            if slot.shape() != value.shape() {
                return Err(Error::format(
                    "params",
                    format!(
                        "parameter {name}: shape {:?} does not match {:?}",
                        value.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    fn zero_all(&mut self) {
        for (_, v) in self.items.iter_mut() {
            v.data_mut().fill(0.0);
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn ensure_batch(x: &TensorValue, shape: [usize; 3]) -> Result<TensorValue> {
    let s = x.shape();
    let per = [shape[0], shape[1], shape[2]];
    if s.len() == 4 && s[1..] == per {
        return Ok(x.clone());
    }
    if s.len() == 3 && s[..] == per {
        return x.reshaped(vec![1, per[0], per[1], per[2]]);
    }
    Err(Error::shape(
        "model input",
        format!("[N,{},{},{}]", per[0], per[1], per[2]),
        format!("{s:?}"),
    ))
}

/// Raw energy form -⟨t, η⟩ + bias energy shared by every conjugate model.
pub fn joint_energy_from_parts(t: &[f64], eta: &[f64], bias_energy: f64) -> Result<f64> {
    if t.len() != eta.len() {
        return Err(Error::shape(
            "joint_energy_from_parts",
            format!("eta of length {}", t.len()),
            format!("{}", eta.len()),
        ));
    }
    let dot: f64 = t.iter().zip(eta).map(|(&a, &b)| a * b).sum();
    Ok(-dot + bias_energy)
}

/// Bilinear exponential-family-harmonium energy
/// -⟨xᵀΘ_xz, z⟩ - ⟨x, θ_x⟩ - ⟨z, θ_z⟩ with identity statistics.
pub fn efh_energy(
    x: &[f64],
    z: &[f64],
    theta_x: &[f64],
    theta_z: &[f64],
    theta_xz: &TensorValue,
) -> Result<f64> {
    let shape = theta_xz.shape();
    if shape.len() != 2 || shape[0] != x.len() || shape[1] != z.len() {
        return Err(Error::shape(
            "efh_energy",
            format!("[{}, {}] interaction matrix", x.len(), z.len()),
            format!("{shape:?}"),
        ));
    }
    if theta_x.len() != x.len() || theta_z.len() != z.len() {
        return Err(Error::shape(
            "efh_energy",
            "bias vectors matching x and z".to_string(),
            format!("({}, {})", theta_x.len(), theta_z.len()),
        ));
    }
    let w = theta_xz.data();
    let mut bilinear = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * z.len()..(i + 1) * z.len()];
        for (j, &zj) in z.iter().enumerate() {
            bilinear += xi * row[j] * zj;
        }
    }
    let bx: f64 = x.iter().zip(theta_x).map(|(&a, &b)| a * b).sum();
    let bz: f64 = z.iter().zip(theta_z).map(|(&a, &b)| a * b).sum();
    Ok(-bilinear - bx - bz)
}

/// Conjugate energy-based model: encoder statistics plus a frozen spherical
/// Gaussian bias λ = (0, -1/2) per latent dimension.
#[derive(Debug, Clone)]
pub struct CebmModel {
    encoder: EncoderConfig,
    params: ParamSet,
    bias: GaussianNaturalParams,
    stat_head_scale: f64,
}

impl CebmModel {
    pub fn new(encoder: EncoderConfig, stat_head_scale: f64, seed: u64) -> Result<Self> {
        if !(stat_head_scale > 0.0) || !stat_head_scale.is_finite() {
            return Err(Error::invalid("stat_head_scale", "must be positive"));
        }
        let feat = encoder.feature_len()?;
        let k = encoder.latent_dim;
        let mut rng = stream(seed, Purpose::Init);
        let mut params = ParamSet::default();
        for (name, value) in encoder.init_params(&mut rng)? {
            params.insert(name, value)?;
        }
        push_linear_head(&mut params, "head_t1", feat, k, &mut rng)?;
        push_linear_head(&mut params, "head_t2", feat, k, &mut rng)?;
        Ok(Self {
            encoder,
            params,
            bias: GaussianNaturalParams::standard(k),
            stat_head_scale,
        })
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn bias(&self) -> &GaussianNaturalParams {
        &self.bias
    }

    pub fn stat_head_scale(&self) -> f64 {
        self.stat_head_scale
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    /// Register every parameter on the tape. Order matches `params`.
    pub fn bind(&self, tape: &mut Tape, diff: bool) -> Result<Vec<NodeId>> {
        bind_params(&self.params, tape, diff)
    }

    /// Statistic heads on the tape: t1 unconstrained, t2 strictly negative
    /// through -softplus(raw) · stat_head_scale.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let trunk = self.encoder.param_count();
        let feat = self.encoder.forward(tape, &nodes[..trunk], x)?;
        let t1 = linear(tape, feat, nodes[trunk], nodes[trunk + 1])?;
        let raw = linear(tape, feat, nodes[trunk + 2], nodes[trunk + 3])?;
        let sp = tape.softplus(raw)?;
        let t2 = tape.scale(sp, -self.stat_head_scale)?;
        Ok((t1, t2))
    }

    /// Marginal energies -B(λ + t(x)) + B(λ) per example, shape [N].
    pub fn energies_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        let (t1, t2) = self.encode_on_tape(tape, nodes, x)?;
        let l1 = tape.constant(TensorValue::new(
            vec![self.latent_dim()],
            self.bias.lam1().to_vec(),
        )?)?;
        let l2 = tape.constant(TensorValue::new(
            vec![self.latent_dim()],
            self.bias.lam2().to_vec(),
        )?)?;
        let lam1 = tape.add(t1, l1)?;
        let lam2 = tape.add(t2, l2)?;
        let b_tilde = tape.gauss_log_normalizer(lam1, lam2)?;
        let neg = tape.negate(b_tilde)?;
        let b0 = tape.constant(TensorValue::scalar(log_normalizer_b(&self.bias)))?;
        tape.add(neg, b0)
    }

    /// Forward-only encoder statistics for a batch: ([N,K], [N,K]).
    pub fn encode_values(&self, x: &TensorValue) -> Result<(TensorValue, TensorValue)> {
        let xb = ensure_batch(x, self.encoder.input_shape())?;
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false)?;
        let xn = tape.leaf(xb, false)?;
        let (t1, t2) = self.encode_on_tape(&mut tape, &nodes, xn)?;
        let (v1, v2) = (tape.value(t1).clone(), tape.value(t2).clone());
        if !v1.all_finite() || !v2.all_finite() {
            return Err(Error::non_finite("encoder statistics"));
        }
        Ok((v1, v2))
    }

    /// Posterior natural parameters λ̃ = λ + t(x) for each example.
    pub fn posteriors(&self, x: &TensorValue) -> Result<Vec<GaussianNaturalParams>> {
        let (t1, t2) = self.encode_values(x)?;
        let k = self.latent_dim();
        let n = t1.numel() / k;
        (0..n)
            .map(|i| {
                posterior_params(
                    &self.bias,
                    &t1.data()[i * k..(i + 1) * k],
                    &t2.data()[i * k..(i + 1) * k],
                )
            })
            .collect()
    }

    /// Joint energy -⟨t(x), η(z)⟩ + E_λ(z) for a single input.
    pub fn energy_joint(&self, x: &TensorValue, z: &[f64]) -> Result<f64> {
        let k = self.latent_dim();
        if z.len() != k {
            return Err(Error::shape(
                "energy_joint",
                format!("z of length {k}"),
                format!("{}", z.len()),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("latent z"));
        }
        let (t1, t2) = self.encode_values(x)?;
        if t1.shape()[0] != 1 {
            return Err(Error::shape(
                "energy_joint",
                "a single input".to_string(),
                format!("batch of {}", t1.shape()[0]),
            ));
        }
        let mut t = t1.data().to_vec();
        t.extend_from_slice(t2.data());
        let mut eta: Vec<f64> = z.to_vec();
        eta.extend(z.iter().map(|&v| v * v));
        let bias_inner: f64 = z
            .iter()
            .zip(self.bias.lam1().iter().zip(self.bias.lam2()))
            .map(|(&zk, (&l1, &l2))| l1 * zk + l2 * zk * zk)
            .sum();
        let bias_energy = -(bias_inner - log_normalizer_b(&self.bias));
        joint_energy_from_parts(&t, &eta, bias_energy)
    }
}

/// Mixture-bias variant: L Gaussian components with trainable natural
/// parameters, λ₂ kept negative through a -softplus(raw) reparameterization.
#[derive(Debug, Clone)]
pub struct GmmCebmModel {
    encoder: EncoderConfig,
    params: ParamSet,
    components: usize,
    stat_head_scale: f64,
}

impl GmmCebmModel {
    /// `components` below 2 is accepted here only so the single-component
    /// consistency check against [`CebmModel`] stays expressible; run
    /// configurations enforce L >= 2.
    pub fn new(
        encoder: EncoderConfig,
        components: usize,
        stat_head_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::invalid("components", "must be at least 1"));
        }
        if !(stat_head_scale > 0.0) || !stat_head_scale.is_finite() {
            return Err(Error::invalid("stat_head_scale", "must be positive"));
        }
        let feat = encoder.feature_len()?;
        let k = encoder.latent_dim;
        let mut rng = stream(seed, Purpose::Init);
        let mut params = ParamSet::default();
        for (name, value) in encoder.init_params(&mut rng)? {
            params.insert(name, value)?;
        }
        push_linear_head(&mut params, "head_t1", feat, k, &mut rng)?;
        push_linear_head(&mut params, "head_t2", feat, k, &mut rng)?;
        // Component means evenly spaced on a line in latent space, unit
        // variances: λ₁ = c_l, λ₂ = -1/2, i.e. raw2 = softplus⁻¹(1/2).
        let raw_half = (0.5_f64.exp() - 1.0).ln();
        for l in 0..components {
            let c = if components == 1 {
                0.0
            } else {
                -1.5 + 3.0 * l as f64 / (components - 1) as f64
            };
            params.insert(
                format!("gmm{l}_raw_lam1"),
                TensorValue::full(vec![k], c),
            )?;
            params.insert(
                format!("gmm{l}_raw_lam2"),
                TensorValue::full(vec![k], raw_half),
            )?;
        }
        Ok(Self {
            encoder,
            params,
            components,
            stat_head_scale,
        })
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn stat_head_scale(&self) -> f64 {
        self.stat_head_scale
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn bind(&self, tape: &mut Tape, diff: bool) -> Result<Vec<NodeId>> {
        bind_params(&self.params, tape, diff)
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let trunk = self.encoder.param_count();
        let feat = self.encoder.forward(tape, &nodes[..trunk], x)?;
        let t1 = linear(tape, feat, nodes[trunk], nodes[trunk + 1])?;
        let raw = linear(tape, feat, nodes[trunk + 2], nodes[trunk + 3])?;
        let sp = tape.softplus(raw)?;
        let t2 = tape.scale(sp, -self.stat_head_scale)?;
        Ok((t1, t2))
    }

    /// Marginal energies -logsumexp_l Σ_k (B(λ̃_{l,k}) - B(λ_{l,k})), [N].
    pub fn energies_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        let (t1, t2) = self.encode_on_tape(tape, nodes, x)?;
        let base = self.encoder.param_count() + 4;
        let mut gaps = Vec::with_capacity(self.components);
        for l in 0..self.components {
            let raw1 = nodes[base + 2 * l];
            let raw2 = nodes[base + 2 * l + 1];
            let lam2_l = {
                let sp = tape.softplus(raw2)?;
                tape.negate(sp)?
            };
            let b_l = {
                let b = tape.gauss_log_normalizer(raw1, lam2_l)?;
                tape.negate(b)?
            };
            let lt1 = tape.add(t1, raw1)?;
            let lt2 = tape.add(t2, lam2_l)?;
            let b_tilde = tape.gauss_log_normalizer(lt1, lt2)?;
            gaps.push(tape.add(b_tilde, b_l)?);
        }
        let stacked = tape.stack_last(&gaps)?;
        let lse = tape.logsumexp(stacked)?;
        tape.negate(lse)
    }

    pub fn encode_values(&self, x: &TensorValue) -> Result<(TensorValue, TensorValue)> {
        let xb = ensure_batch(x, self.encoder.input_shape())?;
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false)?;
        let xn = tape.leaf(xb, false)?;
        let (t1, t2) = self.encode_on_tape(&mut tape, &nodes, xn)?;
        let (v1, v2) = (tape.value(t1).clone(), tape.value(t2).clone());
        if !v1.all_finite() || !v2.all_finite() {
            return Err(Error::non_finite("encoder statistics"));
        }
        Ok((v1, v2))
    }

    /// Current mixture components λ_l from the raw parameterization.
    pub fn component_params(&self) -> Result<Vec<GaussianNaturalParams>> {
        (0..self.components)
            .map(|l| {
                let raw1 = self.params.get(&format!("gmm{l}_raw_lam1")).unwrap();
                let raw2 = self.params.get(&format!("gmm{l}_raw_lam2")).unwrap();
                GaussianNaturalParams::new(
                    raw1.data().to_vec(),
                    raw2.data().iter().map(|&r| -softplus(r)).collect(),
                )
            })
            .collect()
    }

    /// Responsibilities and per-component posteriors for one input:
    /// probs[l] ∝ exp(Σ_k B(λ̃_{l,k}) - B(λ_{l,k})).
    pub fn component_posterior(
        &self,
        x: &TensorValue,
    ) -> Result<(Vec<f64>, Vec<GaussianNaturalParams>)> {
        let (t1, t2) = self.encode_values(x)?;
        if t1.shape()[0] != 1 {
            return Err(Error::shape(
                "component_posterior",
                "a single input".to_string(),
                format!("batch of {}", t1.shape()[0]),
            ));
        }
        let comps = self.component_params()?;
        let k = self.latent_dim();
        let mut gaps = Vec::with_capacity(self.components);
        let mut tilted = Vec::with_capacity(self.components);
        for comp in &comps {
            let tilt = posterior_params(comp, &t1.data()[..k], &t2.data()[..k])?;
            gaps.push(log_normalizer_b(&tilt) - log_normalizer_b(comp));
            tilted.push(tilt);
        }
        Ok((softmax(&gaps), tilted))
    }
}

/// Unconditional energy model: the shared trunk with a scalar head. Used as
/// the representation baseline; its features are the trunk output.
#[derive(Debug, Clone)]
pub struct BaselineEbm {
    encoder: EncoderConfig,
    params: ParamSet,
}

impl BaselineEbm {
    pub fn new(encoder: EncoderConfig, seed: u64) -> Result<Self> {
        let feat = encoder.feature_len()?;
        let mut rng = stream(seed, Purpose::Init);
        let mut params = ParamSet::default();
        for (name, value) in encoder.init_params(&mut rng)? {
            params.insert(name, value)?;
        }
        push_linear_head(&mut params, "head_e", feat, 1, &mut rng)?;
        Ok(Self { encoder, params })
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn bind(&self, tape: &mut Tape, diff: bool) -> Result<Vec<NodeId>> {
        bind_params(&self.params, tape, diff)
    }

    pub fn energies_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        let trunk = self.encoder.param_count();
        let feat = self.encoder.forward(tape, &nodes[..trunk], x)?;
        let e = linear(tape, feat, nodes[trunk], nodes[trunk + 1])?;
        let n = tape.value(e).shape()[0];
        tape.reshape(e, vec![n])
    }

    /// Trunk feature matrix [N,F], the representation this baseline exposes.
    pub fn features(&self, x: &TensorValue) -> Result<TensorValue> {
        let xb = ensure_batch(x, self.encoder.input_shape())?;
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false)?;
        let xn = tape.leaf(xb, false)?;
        let trunk = self.encoder.param_count();
        let feat = self.encoder.forward(&mut tape, &nodes[..trunk], xn)?;
        let v = tape.value(feat).clone();
        if !v.all_finite() {
            return Err(Error::non_finite("baseline features"));
        }
        Ok(v)
    }
}

fn push_linear_head(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    out: usize,
    rng: &mut Stream,
) -> Result<()> {
    use rand::Rng;
    let bound = (1.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * out).map(|_| rng.gen_range(-bound..bound)).collect();
    params.insert(
        format!("{prefix}_w"),
        TensorValue::new(vec![fan_in, out], data)?,
    )?;
    params.insert(format!("{prefix}_b"), TensorValue::zeros(vec![out]))?;
    Ok(())
}

fn bind_params(params: &ParamSet, tape: &mut Tape, diff: bool) -> Result<Vec<NodeId>> {
    params
        .iter()
        .map(|(_, v)| tape.leaf(v.clone(), diff))
        .collect()
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Per-example energies with input gradients. The sampler runs against this
/// surface so tests can drive it with closed-form toy energies.
pub trait BatchEnergy {
    fn energy_and_grad(&self, x: &TensorValue) -> Result<(Vec<f64>, TensorValue)>;
}

impl BatchEnergy for Model {
    fn energy_and_grad(&self, x: &TensorValue) -> Result<(Vec<f64>, TensorValue)> {
        self.batch_energy_input_grad(x)
    }
}

/// Model kinds behind one dispatch surface, as stored in checkpoints and
/// driven by the trainer, sampler, and evaluation suite.
#[derive(Debug, Clone)]
pub enum Model {
    Cebm(CebmModel),
    Gmm(GmmCebmModel),
    Baseline(BaselineEbm),
}

impl Model {
    pub fn kind_tag(&self) -> &'static str {
        match self {
            Model::Cebm(_) => "cebm",
            Model::Gmm(_) => "gmm-cebm",
            Model::Baseline(_) => "baseline-ebm",
        }
    }

    pub fn encoder(&self) -> &EncoderConfig {
        match self {
            Model::Cebm(m) => &m.encoder,
            Model::Gmm(m) => &m.encoder,
            Model::Baseline(m) => &m.encoder,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Cebm(m) => &m.params,
            Model::Gmm(m) => &m.params,
            Model::Baseline(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Cebm(m) => &mut m.params,
            Model::Gmm(m) => &mut m.params,
            Model::Baseline(m) => &mut m.params,
        }
    }

    /// Set every parameter to zero; used by contract tests.
    pub fn zero_params(&mut self) {
        self.params_mut().zero_all();
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.encoder().input_shape()
    }

    pub fn bind(&self, tape: &mut Tape, diff: bool) -> Result<Vec<NodeId>> {
        match self {
            Model::Cebm(m) => m.bind(tape, diff),
            Model::Gmm(m) => m.bind(tape, diff),
            Model::Baseline(m) => m.bind(tape, diff),
        }
    }

    /// Per-example marginal energies on an existing tape.
    pub fn energies_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        match self {
            Model::Cebm(m) => m.energies_on_tape(tape, nodes, x),
            Model::Gmm(m) => m.energies_on_tape(tape, nodes, x),
            Model::Baseline(m) => m.energies_on_tape(tape, nodes, x),
        }
    }

    fn tape_energies(
        &self,
        x: &TensorValue,
        with_input_grad: bool,
    ) -> Result<(Vec<f64>, Option<TensorValue>)> {
        let xb = ensure_batch(x, self.input_shape())?;
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false)?;
        let xn = tape.leaf(xb, with_input_grad)?;
        let e = self.energies_on_tape(&mut tape, &nodes, xn)?;
        let values = tape.value(e).data().to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("marginal energy"));
        }
        if !with_input_grad {
            return Ok((values, None));
        }
        let total = tape.sum(e)?;
        let mut grads = tape.backward(total)?;
        Ok((values, Some(grads.take(xn).expect("input gradient"))))
    }

    /// Per-example marginal energies for a batch.
    pub fn batch_energy(&self, x: &TensorValue) -> Result<Vec<f64>> {
        Ok(self.tape_energies(x, false)?.0)
    }

    /// Energies plus dE/dx (examples are independent, so the batch gradient
    /// of the summed energy is exactly the per-example gradient).
    pub fn batch_energy_input_grad(&self, x: &TensorValue) -> Result<(Vec<f64>, TensorValue)> {
        let (e, g) = self.tape_energies(x, true)?;
        Ok((e, g.expect("gradient requested")))
    }

    /// Representation for evaluation: posterior means for the conjugate
    /// models (responsibility-weighted for the mixture), trunk features for
    /// the baseline.
    pub fn codes(&self, x: &TensorValue) -> Result<Vec<Vec<f64>>> {
        match self {
            Model::Cebm(m) => {
                let posts = m.posteriors(x)?;
                Ok(posts
                    .iter()
                    .map(|p| natural_to_mean(p).m1().to_vec())
                    .collect())
            }
            Model::Gmm(m) => {
                let (t1, t2) = m.encode_values(x)?;
                let comps = m.component_params()?;
                let k = m.latent_dim();
                let n = t1.numel() / k;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let s1 = &t1.data()[i * k..(i + 1) * k];
                    let s2 = &t2.data()[i * k..(i + 1) * k];
                    let mut gaps = Vec::with_capacity(comps.len());
                    let mut means = Vec::with_capacity(comps.len());
                    for comp in &comps {
                        let tilt = posterior_params(comp, s1, s2)?;
                        gaps.push(log_normalizer_b(&tilt) - log_normalizer_b(comp));
                        means.push(natural_to_mean(&tilt).m1().to_vec());
                    }
                    let probs = softmax(&gaps);
                    let mut code = vec![0.0; k];
                    for (p, m1) in probs.iter().zip(&means) {
                        for (c, &v) in code.iter_mut().zip(m1) {
                            *c += p * v;
                        }
                    }
                    out.push(code);
                }
                Ok(out)
            }
            Model::Baseline(m) => {
                let f = m.features(x)?;
                let cols = f.shape()[1];
                Ok(f.data().chunks(cols).map(|r| r.to_vec()).collect())
            }
        }
    }
}

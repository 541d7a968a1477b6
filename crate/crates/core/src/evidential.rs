//! Dirichlet meta-model over salient base-model activations, its loss and
//! training loop.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curriculum::{Curriculum, StageSampler};
use crate::error::{Error, Result};
use crate::framing::*;
use crate::nn::arch::glorot_dense;
use crate::nn::{Activation, Adam, BackwardOptions, ForwardTrace, Layer, Model, Parameterized};
use crate::saliency::{EligibleLayer, SalientSet};
use crate::special::{digamma, ln_gamma, trigamma};
use crate::tensor::Tensor;

pub const META_MAGIC: &[u8; 8] = b"GUIDEMM1";

/// Head outputs are clamped to this magnitude before `exp`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    /// One affine map `dim(ℓ) → K`.
    Linear,
    /// `dim(ℓ) → 4K → K` with a ReLU in between.
    Deep,
}

impl BranchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(BranchKind::Linear),
            "deep" => Ok(BranchKind::Deep),
            _ => Err(Error::Config(format!("unknown branch kind {s:?} (expected linear or deep)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Linear => "linear",
            BranchKind::Deep => "deep",
        }
    }
}

/// Dirichlet concentrations `(N, K)`, every entry > 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletOutput {
    pub alpha: Tensor,
}

impl DirichletOutput {
    pub fn new(alpha: Tensor) -> Result<Self> {
        if alpha.rank() != 2 {
            return Err(Error::Shape(format!("alpha must be (N, K), got {:?}", alpha.shape())));
        }
        if alpha.data().iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Numerical("Dirichlet parameters must be positive and finite".into()));
        }
        Ok(DirichletOutput { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.row_len()
    }

    /// `S = Σ_k α_k` per sample.
    pub fn strength(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.alpha.row(i).iter().sum()).collect()
    }

    /// `p̂ = α / S`
    pub fn mean(&self) -> Tensor {
        let mut p = self.alpha.clone();
        for i in 0..self.len() {
            let row = p.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        p
    }

    /// `u = K / S`
    pub fn uncertainty(&self) -> Vec<f64> {
        let k = self.num_classes() as f64;
        self.strength().into_iter().map(|s| k / s).collect()
    }
}

/// Branch activations, concatenated meta-features, head logits and α.
#[derive(Clone, Debug)]
pub struct MetaTrace {
    pub features: Vec<Tensor>,
    pub branch_outputs: Vec<Vec<Tensor>>,
    pub psi: Tensor,
    pub logits: Tensor,
    pub output: DirichletOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel {
    salient: SalientSet,
    num_classes: usize,
    kind: BranchKind,
    branches: Vec<Vec<Layer>>,
    head: Layer,
    base_checksum: String,
}

impl MetaModel {
    pub fn new(base: &Model, salient: &SalientSet, kind: BranchKind, seed: u64) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::Frozen("meta-models attach to frozen base models".into()));
        }
        if salient.layers.is_empty() {
            return Err(Error::InvalidParam("empty salient set".into()));
        }
        for layer in &salient.layers {
            if layer.tap >= base.layers().len() || base.output_shape(layer.tap) != layer.shape.as_slice() {
                return Err(Error::Shape(format!("salient layer {} does not match the base model", layer.name)));
            }
        }
        let k = base.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branches = Vec::with_capacity(salient.layers.len());
        for layer in &salient.layers {
            let d = layer.dim();
            branches.push(match kind {
                BranchKind::Linear => vec![Layer::Dense(glorot_dense(&mut rng, d, k)?)],
                BranchKind::Deep => vec![
                    Layer::Dense(glorot_dense(&mut rng, d, 4 * k)?),
                    Layer::Activation(Activation::Relu),
                    Layer::Dense(glorot_dense(&mut rng, 4 * k, k)?),
                ],
            });
        }
        let head = Layer::Dense(glorot_dense(&mut rng, salient.layers.len() * k, k)?);
        Ok(MetaModel { salient: salient.clone(), num_classes: k, kind, branches, head, base_checksum: base.checksum() })
    }

    pub fn salient(&self) -> &SalientSet {
        &self.salient
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    pub fn base_checksum(&self) -> &str {
        &self.base_checksum
    }

    pub fn head_mut(&mut self) -> &mut Layer {
        &mut self.head
    }

    pub fn check_base(&self, base: &Model) -> Result<()> {
        let got = base.checksum();
        if got != self.base_checksum {
            return Err(Error::Checksum(format!(
                "meta-model was trained against base {} but got {}",
                self.base_checksum, got
            )));
        }
        Ok(())
    }

    fn deepest_tap(&self) -> usize {
        self.salient.layers.iter().map(|l| l.tap).max().expect("salient set is nonempty")
    }

    /// Flattened `(N, dim(ℓ))` activations of every salient layer.
    pub fn features(&self, base: &Model, images: &Tensor) -> Result<Vec<Tensor>> {
        let outs = base.forward_prefix(images, self.deepest_tap())?;
        self.features_from(&outs)
    }

    /// Same as [`MetaModel::features`] from an existing full trace.
    pub fn features_from_trace(&self, trace: &ForwardTrace) -> Result<Vec<Tensor>> {
        self.features_from(&trace.outputs)
    }

    fn features_from(&self, outputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.salient
            .layers
            .iter()
            .map(|l| {
                let t = outputs
                    .get(l.tap)
                    .ok_or_else(|| Error::Shape(format!("trace is missing salient layer {}", l.name)))?;
                let n = t.batch();
                t.reshape(&[n, l.dim()])
            })
            .collect()
    }

    pub fn forward_features(&self, features: &[Tensor]) -> Result<MetaTrace> {
        if features.len() != self.branches.len() {
            return Err(Error::Shape(format!("{} feature blocks for {} branches", features.len(), self.branches.len())));
        }
        let n = features[0].batch();
        let k = self.num_classes;
        let mut branch_outputs = Vec::with_capacity(self.branches.len());
        let mut psi = vec![0.0; n * k * self.branches.len()];
        let width = k * self.branches.len();
        for (b, (branch, feat)) in self.branches.iter().zip(features).enumerate() {
            let mut outs: Vec<Tensor> = Vec::with_capacity(branch.len());
            for layer in branch {
                let next = layer.forward(outs.last().unwrap_or(feat))?;
                outs.push(next);
            }
            let last = outs.last().expect("branches are nonempty");
            for i in 0..n {
                psi[i * width + b * k..i * width + (b + 1) * k].copy_from_slice(last.row(i));
            }
            branch_outputs.push(outs);
        }
        let psi = Tensor::new(vec![n, width], psi)?;
        let logits = self.head.forward(&psi)?;
        logits.check_finite("meta-model head output")?;
        let alpha = logits.map(|h| h.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp() + 1.0);
        Ok(MetaTrace { features: features.to_vec(), branch_outputs, psi, logits, output: DirichletOutput::new(alpha)? })
    }

    /// Dirichlet outputs for an image batch, evaluated in chunks.
    pub fn predict(&self, base: &Model, images: &Tensor, batch_size: usize) -> Result<DirichletOutput> {
        self.check_base(base)?;
        let n = images.batch();
        let mut alpha = Vec::with_capacity(n * self.num_classes);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let feats = self.features(base, &images.select_rows(chunk))?;
            alpha.extend_from_slice(self.forward_features(&feats)?.output.alpha.data());
        }
        DirichletOutput::new(Tensor::new(vec![n, self.num_classes], alpha)?)
    }

    /// Reverse pass from `∂L/∂α`. Returns parameter gradients in
    /// [`Parameterized::parameters`] order and feature gradients.
    pub fn backward(&self, trace: &MetaTrace, d_alpha: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let dh = trace.logits.zip_map(d_alpha, |h, g| if h.abs() <= LOGIT_CLAMP { g * h.exp() } else { 0.0 })?;
        let (dpsi, head_grads) = self.head.backward(&trace.psi, &trace.logits, &dh, true)?;
        let k = self.num_classes;
        let n = dpsi.batch();
        let width = dpsi.row_len();
        let mut grads = Vec::new();
        let mut feature_grads = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let mut g = Vec::with_capacity(n * k);
            for i in 0..n {
                g.extend_from_slice(&dpsi.data()[i * width + b * k..i * width + (b + 1) * k]);
            }
            let mut flowing = Tensor::new(vec![n, k], g)?;
            let outs = &trace.branch_outputs[b];
            let mut branch_grads: Vec<Vec<Tensor>> = vec![Vec::new(); branch.len()];
            for (j, layer) in branch.iter().enumerate().rev() {
                let input = if j == 0 { &trace.features[b] } else { &outs[j - 1] };
                let (dx, dp) = layer.backward(input, &outs[j], &flowing, true)?;
                branch_grads[j] = dp;
                flowing = dx;
            }
            grads.extend(branch_grads.into_iter().flatten());
            feature_grads.push(flowing);
        }
        grads.extend(head_grads);
        Ok((grads, feature_grads))
    }

    /// Gradient of a loss on α with respect to the input images, through the
    /// frozen base features.
    pub fn input_gradient(
        &self,
        base: &Model,
        images: &Tensor,
        loss: impl Fn(&DirichletOutput) -> Result<(f64, Tensor)>,
    ) -> Result<(f64, Tensor)> {
        let trace = base.forward(images, true)?;
        let feats = self.features_from_trace(&trace)?;
        let meta = self.forward_features(&feats)?;
        let (value, d_alpha) = loss(&meta.output)?;
        let (_, d_feats) = self.backward(&meta, &d_alpha)?;
        let seeds: Vec<(usize, Tensor)> = self
            .salient
            .layers
            .iter()
            .zip(d_feats)
            .map(|(l, g)| Ok((l.tap, g.into_reshaped(trace.outputs[l.tap].shape())?)))
            .collect::<Result<_>>()?;
        let grads = base.backward(&trace, None, &seeds, BackwardOptions::default())?;
        Ok((value, grads.input))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(META_MAGIC)?;
        write_str(w, &self.base_checksum)?;
        write_usize(w, self.num_classes)?;
        write_str(w, self.kind.name())?;
        write_f64(w, self.salient.eta)?;
        write_f64(w, self.salient.achieved_mass_fraction)?;
        write_usize(w, self.salient.layers.len())?;
        for l in &self.salient.layers {
            write_str(w, &l.name)?;
            write_usize(w, l.tap)?;
            write_usize(w, l.shape.len())?;
            for &d in &l.shape {
                write_usize(w, d)?;
            }
        }
        for p in self.parameters() {
            write_tensor(w, p)?;
        }
        Ok(())
    }

    /// Reads a meta-model and refuses it unless `base` is the model it was
    /// trained against.
    pub fn read(r: &mut impl Read, base: &Model) -> Result<Self> {
        expect_magic(r, META_MAGIC)?;
        let checksum = read_str(r)?;
        let k = read_usize(r)?;
        let kind = BranchKind::parse(&read_str(r)?).map_err(|e| Error::Format(e.to_string()))?;
        let eta = read_f64(r)?;
        let achieved = read_f64(r)?;
        let count = read_usize(r)?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(r)?;
            let tap = read_usize(r)?;
            let rank = read_usize(r)?;
            let shape = (0..rank).map(|_| read_usize(r)).collect::<Result<Vec<_>>>()?;
            layers.push(EligibleLayer { name, tap, shape });
        }
        let salient = SalientSet { layers, eta, achieved_mass_fraction: achieved };
        if base.checksum() != checksum {
            return Err(Error::Checksum(format!(
                "meta-model was trained against base {checksum} but got {}",
                base.checksum()
            )));
        }
        if base.num_classes() != k {
            return Err(Error::Format(format!("meta-model has {k} classes, base has {}", base.num_classes())));
        }
        let mut meta = MetaModel::new(base, &salient, kind, 0)?;
        for p in meta.parameters_mut() {
            let t = read_tensor(r)?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!("parameter {:?} where {:?} was expected", t.shape(), p.shape())));
            }
            *p = t;
        }
        Ok(meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, base: &Model) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::read(&mut bytes.as_slice(), base)
    }
}

impl Parameterized for MetaModel {
    fn parameters(&self) -> Vec<&Tensor> {
        self.branches.iter().flatten().chain(std::iter::once(&self.head)).flat_map(Layer::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.head))
            .flat_map(Layer::parameters_mut)
            .collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, branch) in self.salient.layers.iter().zip(&self.branches) {
            for (j, layer) in branch.iter().enumerate() {
                if let Layer::Dense(_) = layer {
                    names.push(format!("branch.{}.{j}.weight", l.name));
                    names.push(format!("branch.{}.{j}.bias", l.name));
                }
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }
}

/// Closed-form `KL(Dir(α) ‖ Dir(β))`.
pub fn dirichlet_kl(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    if alpha.len() != beta.len() || alpha.is_empty() {
        return Err(Error::Shape(format!("KL between lengths {} and {}", alpha.len(), beta.len())));
    }
    if alpha.iter().chain(beta).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParam("Dirichlet parameters must be positive".into()));
    }
    let s: f64 = alpha.iter().sum();
    let b: f64 = beta.iter().sum();
    let psi_s = digamma(s);
    let mut kl = ln_gamma(s) - ln_gamma(b);
    for (&a, &bt) in alpha.iter().zip(beta) {
        kl += ln_gamma(bt) - ln_gamma(a) + (a - bt) * (digamma(a) - psi_s);
    }
    Ok(kl.max(0.0))
}

/// Batch means of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ell: f64,
    pub kl: f64,
    pub sre: f64,
    pub total: f64,
    pub lambda_kl: f64,
}

/// Expected log-likelihood under the soft target, `λ`-weighted KL to the
/// prior and the self-rejecting evidence penalty `(S/K)(1 − ⟨ỹ, p̂⟩)`, each
/// averaged over the batch. Also returns `∂total/∂α`.
pub fn guide_loss(out: &DirichletOutput, targets: &Tensor, lambda_kl: f64, beta: &[f64]) -> Result<(LossBreakdown, Tensor)> {
    let n = out.len();
    let k = out.num_classes();
    if targets.shape() != [n, k] || beta.len() != k {
        return Err(Error::Shape(format!(
            "targets {:?} / prior {} for alpha {:?}",
            targets.shape(),
            beta.len(),
            out.alpha.shape()
        )));
    }
    if !(lambda_kl >= 0.0) {
        return Err(Error::InvalidParam(format!("λ_kl must be nonnegative, got {lambda_kl}")));
    }
    let b_sum: f64 = beta.iter().sum();
    let (mut ell, mut kl, mut sre) = (0.0, 0.0, 0.0);
    let mut grad = vec![0.0; n * k];
    let kf = k as f64;
    for i in 0..n {
        let a = out.alpha.row(i);
        let y = targets.row(i);
        let y_sum: f64 = y.iter().sum();
        if y.iter().any(|v| *v < 0.0) || (y_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("target row {i} is not on the simplex")));
        }
        let s: f64 = a.iter().sum();
        let (psi_s, tri_s) = (digamma(s), trigamma(s));
        let agree: f64 = a.iter().zip(y).map(|(av, yv)| av * yv).sum();
        ell -= a.iter().zip(y).map(|(&av, &yv)| yv * (digamma(av) - psi_s)).sum::<f64>();
        kl += dirichlet_kl(a, beta)?;
        sre += (s - agree) / kf;
        let g = &mut grad[i * k..(i + 1) * k];
        for j in 0..k {
            let tri = trigamma(a[j]);
            let d_ell = -y[j] * tri + y_sum * tri_s;
            let d_kl = (a[j] - beta[j]) * tri - (s - b_sum) * tri_s;
            let d_sre = (1.0 - y[j]) / kf;
            g[j] = (d_ell + lambda_kl * d_kl + d_sre) / n as f64;
        }
    }
    let nf = n as f64;
    let (ell, kl, sre) = (ell / nf, kl / nf, sre / nf);
    let breakdown = LossBreakdown { ell, kl, sre, total: ell + lambda_kl * kl + sre, lambda_kl };
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical("GUIDE loss is not finite".into()));
    }
    Ok((breakdown, Tensor::new(vec![n, k], grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_kl: f64,
    /// Symmetric prior concentration.
    pub beta: f64,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig { epochs: 50, batch_size: 64, lr: 1e-2, lambda_kl: 0.1, beta: 1.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaEpochStats {
    pub epoch: usize,
    pub rho: f64,
    pub loss: LossBreakdown,
}

/// Fit the meta-model on curriculum views; each example draws its stage
/// from the epoch's sampler. The base model must not change.
pub fn train_meta(
    mut meta: MetaModel,
    base: &Model,
    curriculum: &Curriculum,
    cfg: &MetaTrainConfig,
) -> Result<(MetaModel, Vec<MetaEpochStats>)> {
    if !base.is_frozen() {
        return Err(Error::Frozen("meta training needs a frozen base model".into()));
    }
    if curriculum.is_empty() {
        return Err(Error::Data("empty curriculum".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.beta > 0.0) {
        return Err(Error::InvalidParam(format!("bad meta training config {cfg:?}")));
    }
    if curriculum.num_classes != meta.num_classes {
        return Err(Error::Shape("curriculum and meta-model disagree on K".into()));
    }
    meta.check_base(base)?;
    let beta = vec![cfg.beta; meta.num_classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::for_target(cfg.lr, &meta);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..curriculum.len()).collect();
    for epoch in 0..cfg.epochs {
        let sampler = StageSampler::new(epoch, cfg.epochs.max(2), &curriculum.schedule)?;
        order.shuffle(&mut rng);
        let picks: Vec<(usize, usize)> = order.iter().map(|&i| (i, sampler.sample(&mut rng))).collect();
        let mut sums = [0.0; 4];
        for chunk in picks.chunks(cfg.batch_size) {
            let (images, targets) = curriculum.gather(chunk)?;
            let feats = meta.features(base, &images)?;
            let trace = meta.forward_features(&feats)?;
            let (loss, d_alpha) = guide_loss(&trace.output, &targets, cfg.lambda_kl, &beta)?;
            let (grads, _) = meta.backward(&trace, &d_alpha)?;
            opt.step(&mut meta, &grads)?;
            let w = chunk.len() as f64;
            for (acc, v) in sums.iter_mut().zip([loss.ell, loss.kl, loss.sre, loss.total]) {
                *acc += v * w;
            }
        }
        let n = picks.len() as f64;
        history.push(MetaEpochStats {
            epoch,
            rho: sampler.rho,
            loss: LossBreakdown {
                ell: sums[0] / n,
                kl: sums[1] / n,
                sre: sums[2] / n,
                total: sums[3] / n,
                lambda_kl: cfg.lambda_kl,
            },
        });
    }
    meta.check_base(base)?;
    Ok((meta, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use crate::saliency::{eligible_layers, SalientSet};
    use approx::assert_relative_eq;

    fn lenet_meta(kind: BranchKind) -> (Model, MetaModel) {
        let mut base = Architecture::LeNet5.build(&[28, 28, 1], 10, 1).unwrap();
        base.freeze();
        let e = eligible_layers(&base).unwrap();
        let salient = SalientSet { layers: vec![e[1].clone(), e[0].clone(), e[3].clone()], eta: 0.9, achieved_mass_fraction: 0.9 };
        let meta = MetaModel::new(&base, &salient, kind, 4).unwrap();
        (base, meta)
    }

    fn zero_head(meta: &mut MetaModel, bias: &[f64]) {
        if let Layer::Dense(d) = meta.head_mut() {
            d.weight = Tensor::zeros(d.weight.shape());
            d.bias = Tensor::vector(bias.to_vec());
        }
    }

    #[test]
    fn zero_head_gives_twos() {
        let (base, mut meta) = lenet_meta(BranchKind::Linear);
        zero_head(&mut meta, &[0.0; 10]);
        let out = meta.predict(&base, &Tensor::full(&[2, 28, 28, 1], 0.3), 8).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a == 2.0));
        assert_eq!(out.strength(), vec![20.0, 20.0]);
        assert!(out.mean().data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn log_nine_head_output() {
        let alpha = Tensor::from_rows(&[vec![9f64.ln().exp() + 1.0, 2.0]]).unwrap();
        let out = DirichletOutput::new(alpha).unwrap();
        assert_relative_eq!(out.mean().data()[0], 10.0 / 12.0, max_relative = 1e-14);
        assert_relative_eq!(out.mean().data()[1], 2.0 / 12.0, max_relative = 1e-14);
        assert_relative_eq!(out.uncertainty()[0], 2.0 / 12.0, max_relative = 1e-14);
    }

    #[test]
    fn alpha_stays_above_one_under_clamp() {
        let (base, mut meta) = lenet_meta(BranchKind::Linear);
        zero_head(&mut meta, &[-500.0, 500.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = meta.predict(&base, &Tensor::full(&[1, 28, 28, 1], 0.5), 8).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a > 1.0 && a.is_finite()));
        assert_eq!(out.alpha.data()[1], 30f64.exp() + 1.0);
    }

    #[test]
    fn branch_dims_match_base() {
        let (_, meta) = lenet_meta(BranchKind::Deep);
        let shapes: Vec<Vec<usize>> = meta.parameters().iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![1176, 40]);
        assert_eq!(shapes[4], vec![4704, 40]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        assert_eq!(shapes[shapes.len() - 2], vec![30, 10]);
        assert_eq!(meta.parameter_names().len(), shapes.len());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(dirichlet_kl(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 0.0);
        let want = 6f64.ln() + 2.0 * (digamma(2.0) - digamma(4.0));
        assert_relative_eq!(dirichlet_kl(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), want, max_relative = 1e-12);
        assert!((want - 0.1250).abs() < 5e-4);
        assert!(dirichlet_kl(&[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn loss_uniform_example() {
        let out = DirichletOutput::new(Tensor::from_rows(&[vec![2.0, 2.0]]).unwrap()).unwrap();
        let y = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let (l, _) = guide_loss(&out, &y, 0.0, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(l.sre, 1.0, max_relative = 1e-15);
        assert_relative_eq!(l.ell, -(digamma(2.0) - digamma(4.0)), max_relative = 1e-14);
        assert!((l.ell - 0.8333).abs() < 1e-4);
        assert_eq!(l.total, l.ell + l.sre);
    }

    #[test]
    fn sre_vanishes_only_on_matching_vertex() {
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let near = DirichletOutput::new(Tensor::from_rows(&[vec![1e9, 1.0]]).unwrap()).unwrap();
        let (l, _) = guide_loss(&near, &y, 0.0, &[1.0, 1.0]).unwrap();
        assert!(l.sre > 0.0 && l.sre < 1.0);
        assert!(guide_loss(&near, &Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap(), 0.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let alpha = Tensor::from_rows(&[vec![1.3, 4.0, 2.2], vec![7.5, 1.1, 1.9]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.1, 0.8, 0.1], vec![0.6, 0.2, 0.2]]).unwrap();
        let beta = [1.0, 1.5, 1.0];
        let (_, g) = guide_loss(&DirichletOutput::new(alpha.clone()).unwrap(), &y, 0.3, &beta).unwrap();
        for idx in 0..alpha.len() {
            let h = 1e-6;
            let mut plus = alpha.clone();
            plus.data_mut()[idx] += h;
            let mut minus = alpha.clone();
            minus.data_mut()[idx] -= h;
            let f = |a: Tensor| guide_loss(&DirichletOutput::new(a).unwrap(), &y, 0.3, &beta).unwrap().0.total;
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert_relative_eq!(g.data()[idx], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn save_load_requires_matching_base() {
        let (base, meta) = lenet_meta(BranchKind::Deep);
        let mut buf = Vec::new();
        meta.write(&mut buf).unwrap();
        let back = MetaModel::read(&mut buf.as_slice(), &base).unwrap();
        assert_eq!(back, meta);
        let mut other = Architecture::LeNet5.build(&[28, 28, 1], 10, 2).unwrap();
        other.freeze();
        assert!(matches!(MetaModel::read(&mut buf.as_slice(), &other), Err(Error::Checksum(_))));
    }
}

//! Relevance-based saliency: LRP-ε propagation, per-layer relevance mass,
//! coverage-constrained layer selection, input weight maps and a
//! Jacobian-Fisher coverage diagnostic.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nn::{Activation, BackwardOptions, Layer, Model};
use crate::tensor::{pairwise_sum, Tensor};

/// A layer whose (post-activation) output the meta-model may read.
#[derive(Clone, Debug, PartialEq)]
pub struct EligibleLayer {
    pub name: String,
    /// Index of the layer whose output is tapped.
    pub tap: usize,
    /// Per-sample output shape at the tap.
    pub shape: Vec<usize>,
}

impl EligibleLayer {
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Conv, dense and pool outputs (after their element-wise activation when one
/// follows) plus flatten outputs that are not a plain reshape of another
/// eligible tap. The layer feeding a terminal softmax only counts when
/// nothing else does.
pub fn eligible_layers(model: &Model) -> Result<Vec<EligibleLayer>> {
    if !model.is_frozen() {
        return Err(Error::Frozen("saliency calibration expects a frozen model".into()));
    }
    let layers = model.layers();
    let mut out: Vec<EligibleLayer> = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let candidate = match layer {
            Layer::Conv2d(_) | Layer::Dense(_) | Layer::AvgPool2d(_) | Layer::MaxPool2d(_) => true,
            Layer::Flatten => i == 0 || out.last().map(|e| e.tap) != Some(i - 1),
            Layer::Activation(_) => false,
        };
        if !candidate {
            continue;
        }
        let tap = match layers.get(i + 1) {
            Some(Layer::Activation(a)) if *a != Activation::Softmax => i + 1,
            _ => i,
        };
        out.push(EligibleLayer {
            name: model.layer_names()[i].clone(),
            tap,
            shape: model.output_shape(tap).to_vec(),
        });
    }
    let has_softmax = matches!(layers.last(), Some(Layer::Activation(Activation::Softmax)));
    if has_softmax && out.len() > 1 {
        out.retain(|e| e.tap != model.logits_index());
    }
    if out.is_empty() {
        return Err(Error::InvalidParam("model has no eligible layers".into()));
    }
    Ok(out)
}

/// Denominator stabilizer of the ε-rule. `z` is moved away from zero by
/// `sign(z)·ε` with `sign(0) = +1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stabilizer {
    /// No stabilization; neurons with `z = 0` pass on no relevance.
    Exact,
    /// Fixed `ε > 0`.
    Absolute(f64),
    /// `ε = max(factor · mean_j |z_j|, floor)` per layer and sample.
    Relative { factor: f64, floor: f64 },
}

impl Default for Stabilizer {
    fn default() -> Self {
        Stabilizer::Relative { factor: 1e-6, floor: 1e-9 }
    }
}

impl Stabilizer {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Stabilizer::Exact => true,
            Stabilizer::Absolute(eps) => eps > 0.0 && eps.is_finite(),
            Stabilizer::Relative { factor, floor } => factor > 0.0 && floor > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("LRP stabilizer must be positive, got {self:?}")))
        }
    }

    /// `R / (z + sign(z)·ε)` for one sample's neurons.
    fn ratios(&self, relevance: &[f64], z: &[f64]) -> Vec<f64> {
        let eps = match *self {
            Stabilizer::Exact => 0.0,
            Stabilizer::Absolute(eps) => eps,
            Stabilizer::Relative { factor, floor } => {
                let mean = z.iter().map(|v| v.abs()).sum::<f64>() / z.len() as f64;
                (factor * mean).max(floor)
            }
        };
        relevance
            .iter()
            .zip(z)
            .map(|(&r, &zv)| {
                let den = if zv >= 0.0 { zv + eps } else { zv - eps };
                if den == 0.0 {
                    0.0
                } else {
                    r / den
                }
            })
            .collect()
    }
}

/// Relevance of one input at every layer output below the logits, plus the
/// input-level map.
#[derive(Clone, Debug)]
pub struct RelevanceBundle {
    pub label: usize,
    /// `z_y`, the relevance injected at the output.
    pub logit: f64,
    /// Relevance per layer output (`None` above the logit layer).
    pub layers: Vec<Option<Tensor>>,
    pub input: Tensor,
}

impl RelevanceBundle {
    pub fn at(&self, layer: &EligibleLayer) -> &Tensor {
        self.layers[layer.tap].as_ref().expect("eligible taps sit at or below the logits")
    }
}

thread_local! {
    static PROPAGATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of single-input relevance propagations run on this thread.
pub fn propagation_count() -> usize {
    PROPAGATIONS.with(Cell::get)
}

/// LRP-ε for a single input `x` of the model's input shape.
pub fn lrp(model: &Model, x: &Tensor, label: usize, stab: Stabilizer) -> Result<RelevanceBundle> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.reshape(&shape)?;
    Ok(lrp_batch(model, &batch, &[label], stab)?.remove(0))
}

/// LRP-ε for every row of a batch; one propagation per input.
pub fn lrp_batch(model: &Model, xs: &Tensor, labels: &[usize], stab: Stabilizer) -> Result<Vec<RelevanceBundle>> {
    stab.validate()?;
    if !model.is_frozen() {
        return Err(Error::Frozen("relevance propagation expects a frozen model".into()));
    }
    let n = xs.batch();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} inputs", labels.len())));
    }
    let k = model.num_classes();
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidParam(format!("label {y} out of range for {k} classes")));
    }
    let trace = model.forward(xs, true)?;
    let top = model.logits_index();
    let mut per_layer: Vec<Option<Tensor>> = vec![None; model.layers().len()];

    let mut r = Tensor::zeros(trace.outputs[top].shape());
    for (i, &y) in labels.iter().enumerate() {
        r.row_mut(i)[y] = trace.logits.row(i)[y];
    }
    let logits: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| trace.logits.row(i)[y]).collect();

    for i in (0..=top).rev() {
        per_layer[i] = Some(r.clone());
        let a = trace.layer_input(i);
        let z = &trace.outputs[i];
        r = match &model.layers()[i] {
            Layer::Activation(_) => r.reshape(a.shape())?,
            Layer::Flatten => r.reshape(a.shape())?,
            Layer::MaxPool2d(pool) => {
                let mut out = Tensor::zeros(a.shape());
                for s in 0..n {
                    let winners = pool.argmax(&a.shape()[1..], a.row(s))?;
                    let src = r.row(s).to_vec();
                    let dst = out.row_mut(s);
                    for (o, w) in winners.into_iter().enumerate() {
                        dst[w] += src[o];
                    }
                }
                out
            }
            layer @ (Layer::Dense(_) | Layer::Conv2d(_) | Layer::AvgPool2d(_)) => {
                // linear part: R_in = a ⊙ Jᵀ (R_out / z_stab), the bias share
                // stays absorbed at the neuron
                let mut ratios = Vec::with_capacity(r.len());
                for s in 0..n {
                    ratios.extend(stab.ratios(r.row(s), z.row(s)));
                }
                let ratios = Tensor::new(z.shape().to_vec(), ratios)?;
                let (back, _) = layer.backward(a, z, &ratios, false)?;
                a.zip_map(&back, |av, bv| av * bv)?
            }
        };
        r.check_finite(&format!("relevance below layer {}", model.layer_names()[i]))?;
    }
    PROPAGATIONS.with(|c| c.set(c.get() + n));

    let mut bundles = Vec::with_capacity(n);
    for s in 0..n {
        bundles.push(RelevanceBundle {
            label: labels[s],
            logit: logits[s],
            layers: per_layer.iter().map(|t| t.as_ref().map(|t| t.row_tensor(s))).collect(),
            input: r.row_tensor(s),
        });
    }
    Ok(bundles)
}

/// Dataset-average per-neuron L1 relevance of each eligible layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMass {
    pub layers: Vec<EligibleLayer>,
    pub mass: Vec<f64>,
    pub samples: usize,
}

/// Accumulates per-sample `‖R_ℓ‖₁ / dim(ℓ)` and reduces in a fixed order.
#[derive(Clone, Debug)]
pub struct MassAccumulator {
    layers: Vec<EligibleLayer>,
    per_sample: Vec<Vec<f64>>,
}

impl MassAccumulator {
    pub fn new(layers: Vec<EligibleLayer>) -> Self {
        let per_sample = vec![Vec::new(); layers.len()];
        MassAccumulator { layers, per_sample }
    }

    pub fn add(&mut self, bundle: &RelevanceBundle) {
        for (layer, acc) in self.layers.iter().zip(&mut self.per_sample) {
            acc.push(bundle.at(layer).abs_sum() / layer.dim() as f64);
        }
    }

    pub fn finish(self) -> Result<LayerMass> {
        let samples = self.per_sample.first().map_or(0, Vec::len);
        if samples == 0 {
            return Err(Error::InvalidParam("layer mass needs at least one sample".into()));
        }
        let mass = self.per_sample.iter().map(|v| pairwise_sum(v) / samples as f64).collect();
        Ok(LayerMass { layers: self.layers, mass, samples })
    }
}

pub fn layer_mass(model: &Model, images: &Tensor, labels: &[usize], stab: Stabilizer, batch_size: usize) -> Result<LayerMass> {
    Ok(calibrate(model, images, labels, stab, batch_size)?.mass)
}

/// Layer masses and per-input weight maps from a single propagation per input.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub mass: LayerMass,
    pub weight_maps: Vec<WeightMap>,
}

pub fn calibrate(model: &Model, images: &Tensor, labels: &[usize], stab: Stabilizer, batch_size: usize) -> Result<Calibration> {
    let eligible = eligible_layers(model)?;
    let mut acc = MassAccumulator::new(eligible);
    let mut maps = Vec::with_capacity(labels.len());
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let xs = images.select_rows(chunk);
        let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        for bundle in lrp_batch(model, &xs, &ys, stab)? {
            acc.add(&bundle);
            maps.push(weight_map(&bundle)?);
        }
    }
    Ok(Calibration { mass: acc.finish()?, weight_maps: maps })
}

/// Selected layers in descending mass order.
#[derive(Clone, Debug, PartialEq)]
pub struct SalientSet {
    pub layers: Vec<EligibleLayer>,
    pub eta: f64,
    pub achieved_mass_fraction: f64,
}

impl SalientSet {
    pub fn names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }
}

/// Smallest descending-mass prefix whose mass covers `eta` of the total.
/// Equal masses keep the shallower layer first.
pub fn select_layers(mass: &LayerMass, eta: f64) -> Result<SalientSet> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParam(format!("eta must lie in (0, 1], got {eta}")));
    }
    if mass.mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::Numerical(format!("invalid layer masses {:?}", mass.mass)));
    }
    let mut order: Vec<usize> = (0..mass.mass.len()).collect();
    // stable: eligible layers are listed shallow to deep
    order.sort_by(|&a, &b| mass.mass[b].total_cmp(&mass.mass[a]));
    let total: f64 = order.iter().map(|&i| mass.mass[i]).sum();
    if total <= 0.0 {
        return Err(Error::Numerical("all layer masses are zero".into()));
    }
    let mut covered = 0.0;
    let mut chosen = Vec::new();
    for &i in &order {
        if mass.mass[i] <= 0.0 {
            break;
        }
        covered += mass.mass[i];
        chosen.push(mass.layers[i].clone());
        if covered >= eta * total {
            break;
        }
    }
    Ok(SalientSet { layers: chosen, eta, achieved_mass_fraction: covered / total })
}

/// Per-pixel saliency in `[0, 1]` and its spatial mean.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    /// `(H, W)`
    pub map: Tensor,
    pub mean: f64,
}

/// `|Σ_c R_0[h, w, c]|` normalized by its spatial maximum; an all-zero
/// relevance map gives an all-zero weight map.
pub fn weight_map(bundle: &RelevanceBundle) -> Result<WeightMap> {
    let r0 = &bundle.input;
    let [h, w, c] = *r0.shape() else {
        return Err(Error::Shape(format!("weight maps need (H, W, C) relevance, got {:?}", r0.shape())));
    };
    let mut map: Vec<f64> = r0.data().chunks(c).map(|px| px.iter().sum::<f64>().abs()).collect();
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
    }
    let mean = pairwise_sum(&map) / (h * w) as f64;
    Ok(WeightMap { map: Tensor::new(vec![h, w], map)?, mean })
}

/// Per-layer Fisher-trace proxies and the fraction held by the salient set.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherCoverage {
    pub layers: Vec<(String, f64)>,
    pub eta_hat: f64,
}

/// `F̂_ℓ = mean_i ‖∂z/∂a_ℓ(x_i)‖²_F · tr(Σ̂_ℓ) / dim(ℓ)`, with `Σ̂_ℓ` the
/// empirical covariance of the tapped activations, and
/// `η̂ = Σ_{salient} F̂_ℓ / Σ_{eligible} F̂_ℓ`.
pub fn fisher_eta(model: &Model, salient: &SalientSet, images: &Tensor, batch_size: usize) -> Result<FisherCoverage> {
    if salient.layers.is_empty() {
        return Err(Error::InvalidParam("empty salient set".into()));
    }
    let eligible = eligible_layers(model)?;
    let k = model.num_classes();
    let n = images.batch();
    let mut jac_sq = vec![0.0; eligible.len()];
    let mut sums: Vec<Vec<f64>> = eligible.iter().map(|l| vec![0.0; l.dim()]).collect();
    let mut sq_sums: Vec<Vec<f64>> = sums.clone();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let xs = images.select_rows(chunk);
        let trace = model.forward(&xs, true)?;
        for (l, layer) in eligible.iter().enumerate() {
            for v in 0..chunk.len() {
                for (d, &a) in trace.outputs[layer.tap].row(v).iter().enumerate() {
                    sums[l][d] += a;
                    sq_sums[l][d] += a * a;
                }
            }
        }
        for class in 0..k {
            let mut seed = Tensor::zeros(&[chunk.len(), k]);
            for v in 0..chunk.len() {
                seed.row_mut(v)[class] = 1.0;
            }
            let grads = model.backward(&trace, Some(&seed), &[], BackwardOptions { params: false, output_grads: true })?;
            for (l, layer) in eligible.iter().enumerate() {
                if let Some(g) = &grads.outputs[layer.tap] {
                    jac_sq[l] += g.data().iter().map(|v| v * v).sum::<f64>();
                }
            }
        }
    }
    let nf = n as f64;
    let fisher: Vec<f64> = eligible
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let trace_cov: f64 = sums[l]
                .iter()
                .zip(&sq_sums[l])
                .map(|(s, q)| (q / nf - (s / nf).powi(2)).max(0.0))
                .sum();
            (jac_sq[l] / nf) * trace_cov / layer.dim() as f64
        })
        .collect();
    let total: f64 = fisher.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical(format!("total Fisher proxy is {total}")));
    }
    let chosen: f64 = eligible
        .iter()
        .zip(&fisher)
        .filter(|(l, _)| salient.layers.iter().any(|s| s.tap == l.tap))
        .map(|(_, f)| f)
        .sum();
    Ok(FisherCoverage {
        layers: eligible.iter().map(|l| l.name.clone()).zip(fisher).collect(),
        eta_hat: chosen / total,
    })
}

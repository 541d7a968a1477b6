//! FGSM, L2 PGD and salt-and-pepper perturbations against a base model or
//! the base + meta pipeline.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evidential::DirichletOutput;
use crate::metrics::Predictor;
use crate::nn::{cross_entropy, grad_input};
use crate::par::map_chunks;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    L2Pgd,
    SaltPepper,
}

impl AttackKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "l2pgd" => Ok(AttackKind::L2Pgd),
            "salt_pepper" => Ok(AttackKind::SaltPepper),
            _ => Err(Error::Config(format!("unknown attack {s:?} (expected fgsm, l2pgd or salt_pepper)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::L2Pgd => "l2pgd",
            AttackKind::SaltPepper => "salt_pepper",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Sign-step size for FGSM, L2 radius for PGD, pixel fraction for
    /// salt-and-pepper.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig { kind: AttackKind::Fgsm, epsilon, steps: 1, step_size: epsilon, random_start: false, seed: 0 }
    }

    /// 40 steps of `2.5ε/40` from a random point in the ball.
    pub fn l2pgd(epsilon: f64, seed: u64) -> Self {
        let steps = 40;
        AttackConfig {
            kind: AttackKind::L2Pgd,
            epsilon,
            steps,
            step_size: 2.5 * epsilon / steps as f64,
            random_start: true,
            seed,
        }
    }

    pub fn salt_pepper(fraction: f64, seed: u64) -> Self {
        AttackConfig { kind: AttackKind::SaltPepper, epsilon: fraction, steps: 1, step_size: 0.0, random_start: false, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) || self.steps == 0 || !(self.step_size >= 0.0) {
            return Err(Error::InvalidParam(format!("bad attack config {self:?}")));
        }
        if self.kind == AttackKind::SaltPepper && self.epsilon > 1.0 {
            return Err(Error::InvalidParam(format!("salt-and-pepper fraction {} above 1", self.epsilon)));
        }
        Ok(())
    }
}

/// Mean cross-entropy of the attacked head's probabilities and its input
/// gradient.
pub fn loss_gradient(target: Predictor, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if labels.len() != x.batch() {
        return Err(Error::Shape(format!("{} labels for {} inputs", labels.len(), x.batch())));
    }
    match target {
        Predictor::Base(model) => {
            let value = std::cell::Cell::new(0.0);
            let g = grad_input(model, x, &|logits: &Tensor| {
                let (l, g) = cross_entropy(logits, labels)?;
                value.set(l);
                Ok((l, g))
            })?;
            Ok((value.get(), g))
        }
        Predictor::Pipeline(base, meta) => meta.input_gradient(base, x, |out| dirichlet_ce(out, labels)),
    }
}

/// `−mean ln(α_y / S)` and its gradient with respect to α.
fn dirichlet_ce(out: &DirichletOutput, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = out.len();
    let k = out.num_classes();
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidParam(format!("label {y} out of range for {k} classes")));
        }
        let a = out.alpha.row(i);
        let s: f64 = a.iter().sum();
        loss -= (a[y] / s).ln();
        let g = &mut grad[i * k..(i + 1) * k];
        g.iter_mut().for_each(|v| *v = 1.0 / (s * n as f64));
        g[y] -= 1.0 / (a[y] * n as f64);
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

fn clip_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// `clip(x + ε·sign(∇ₓ CE))`
pub fn fgsm(target: Predictor, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    AttackConfig::fgsm(epsilon).validate()?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, g) = loss_gradient(target, x, labels)?;
    let mut out = x.zip_map(&g, |xv, gv| xv + epsilon * sign(gv))?;
    clip_unit(&mut out);
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projected L2 ascent on the cross-entropy. With `random_start` each input
/// starts at a uniform point of its ε-ball drawn from the stream of its
/// batch index under `seed`.
pub fn l2pgd(target: Predictor, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    l2pgd_from(target, x, labels, cfg, 0)
}

fn l2pgd_from(target: Predictor, x: &Tensor, labels: &[usize], cfg: &AttackConfig, first: u64) -> Result<Tensor> {
    cfg.validate()?;
    let n = x.batch();
    let d = x.row_len();
    let eps = cfg.epsilon;
    let mut adv = x.clone();
    if eps == 0.0 {
        return Ok(adv);
    }
    if cfg.random_start {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(first + i as u64);
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row_norm(&dir);
            let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
            let row = adv.row_mut(i);
            for (v, u) in row.iter_mut().zip(&dir) {
                *v += radius * u / norm;
            }
        }
        clip_unit(&mut adv);
    }
    for _ in 0..cfg.steps {
        let (_, g) = loss_gradient(target, &adv, labels)?;
        for i in 0..n {
            let gn = row_norm(g.row(i));
            let origin = x.row(i);
            let row = adv.row_mut(i);
            if gn > 0.0 {
                for (v, gv) in row.iter_mut().zip(g.row(i)) {
                    *v += cfg.step_size * gv / gn;
                }
            }
            let delta: Vec<f64> = row.iter().zip(origin).map(|(a, o)| a - o).collect();
            let dn = row_norm(&delta);
            let scale = if dn > eps { eps / dn } else { 1.0 };
            for ((v, o), dv) in row.iter_mut().zip(origin).zip(&delta) {
                *v = (o + dv * scale).clamp(0.0, 1.0);
            }
        }
    }
    Ok(adv)
}

/// Sets exactly `round(fraction·H·W)` distinct pixels of every image to 0 or
/// 1 (all channels), using stream `index` of `seed` per image.
pub fn salt_pepper(x: &Tensor, fraction: f64, seed: u64) -> Result<Tensor> {
    AttackConfig::salt_pepper(fraction, seed).validate()?;
    let [_, h, w, c] = *x.shape() else {
        return Err(Error::Shape(format!("salt-and-pepper expects (N, H, W, C), got {:?}", x.shape())));
    };
    let count = (fraction * (h * w) as f64).round() as usize;
    let mut out = x.clone();
    for i in 0..x.batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let row = out.row_mut(i);
        for px in sample(&mut rng, h * w, count) {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            row[px * c..(px + 1) * c].fill(v);
        }
    }
    Ok(out)
}

/// Runs `cfg` over `x` in chunks of `batch_size`, spread over `threads`.
/// Results do not depend on the chunking or thread count.
pub fn run_attack(
    target: Predictor,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    batch_size: usize,
    threads: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    if labels.len() != x.batch() {
        return Err(Error::Shape(format!("{} labels for {} inputs", labels.len(), x.batch())));
    }
    if cfg.kind == AttackKind::SaltPepper {
        return salt_pepper(x, cfg.epsilon, cfg.seed);
    }
    let parts = map_chunks(x.batch(), batch_size, threads, |range| {
        let idx: Vec<usize> = range.collect();
        let xs = x.select_rows(&idx);
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        match cfg.kind {
            AttackKind::Fgsm => fgsm(target, &xs, &ys, cfg.epsilon),
            _ => l2pgd_from(target, &xs, &ys, cfg, idx[0] as u64),
        }
    })?;
    let mut data = Vec::with_capacity(x.len());
    for part in &parts {
        data.extend_from_slice(part.data());
    }
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, Layer, Model};

    fn linear_binary(w: [f64; 2]) -> Model {
        // logits (w·x, −w·x)
        let weight = Tensor::from_rows(&[vec![w[0], -w[0]], vec![w[1], -w[1]]]).unwrap();
        let layers = vec![
            Layer::Dense(Dense::new(weight, Tensor::zeros(&[2])).unwrap()),
            Layer::Activation(Activation::Softmax),
        ];
        let mut m = Model::new(vec![2], layers).unwrap();
        m.freeze();
        m
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = linear_binary([1.0, -1.0]);
        let x = Tensor::from_rows(&[vec![0.3, 0.6]]).unwrap();
        assert_eq!(fgsm(Predictor::Base(&m), &x, &[0], 0.0).unwrap(), x);
        let cfg = AttackConfig::l2pgd(0.0, 1);
        assert_eq!(l2pgd(Predictor::Base(&m), &x, &[0], &cfg).unwrap(), x);
        assert_eq!(salt_pepper(&Tensor::full(&[1, 2, 2, 1], 0.5), 0.0, 3).unwrap(), Tensor::full(&[1, 2, 2, 1], 0.5));
    }

    #[test]
    fn fgsm_follows_weight_signs() {
        let m = linear_binary([1.0, -1.0]);
        let x = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        // true class 0 has logit w·x, so the loss rises along −w
        let adv = fgsm(Predictor::Base(&m), &x, &[0], 0.1).unwrap();
        assert!((adv.data()[0] - 0.4).abs() < 1e-15 && (adv.data()[1] - 0.6).abs() < 1e-15);
        let adv = fgsm(Predictor::Base(&m), &x, &[1], 0.1).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-15 && (adv.data()[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pgd_single_large_step_hits_boundary_along_weights() {
        let m = linear_binary([3.0, 4.0]);
        let x = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let cfg = AttackConfig { steps: 1, step_size: 10.0, random_start: false, ..AttackConfig::l2pgd(0.2, 0) };
        let adv = l2pgd(Predictor::Base(&m), &x, &[1], &cfg).unwrap();
        assert!((adv.data()[0] - (0.5 + 0.2 * 0.6)).abs() < 1e-12);
        assert!((adv.data()[1] - (0.5 + 0.2 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn pgd_stays_in_ball() {
        let m = linear_binary([0.7, -2.0]);
        let x = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        let adv = l2pgd(Predictor::Base(&m), &x, &[0, 1], &AttackConfig::l2pgd(0.3, 5)).unwrap();
        for i in 0..2 {
            let d: f64 = adv.row(i).iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d <= 0.3 + 1e-9);
        }
    }

    #[test]
    fn salt_pepper_counts() {
        let x = Tensor::full(&[3, 4, 4, 2], 0.5);
        let all = salt_pepper(&x, 1.0, 1).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let half = salt_pepper(&x, 0.5, 1).unwrap();
        for i in 0..3 {
            let changed = half.row(i).chunks(2).filter(|px| px[0] != 0.5).count();
            assert_eq!(changed, 8);
            assert!(half.row(i).chunks(2).all(|px| px[0] == px[1]));
        }
        assert!(salt_pepper(&x, 1.5, 1).is_err());
    }

    #[test]
    fn chunking_does_not_change_results() {
        let m = linear_binary([0.7, -2.0]);
        let x = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5], vec![0.3, 0.2]]).unwrap();
        let cfg = AttackConfig::l2pgd(0.3, 5);
        let whole = run_attack(Predictor::Base(&m), &x, &[0, 1, 0], &cfg, 8, 1).unwrap();
        assert_eq!(run_attack(Predictor::Base(&m), &x, &[0, 1, 0], &cfg, 1, 2).unwrap(), whole);
        assert_eq!(l2pgd(Predictor::Base(&m), &x, &[0, 1, 0], &cfg).unwrap(), whole);
    }
}

//! Relevance-targeted salt-and-pepper curriculum with confidence-aware soft
//! targets and an epoch-dependent stage sampler.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::framing::*;
use crate::nn::Model;
use crate::par::map_chunks;
use crate::saliency::WeightMap;
use crate::tensor::Tensor;

pub const VIEWS_MAGIC: &[u8; 8] = b"GUIDECV1";

/// Stage levels `s_t = 1 − e^{−γt}` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    gamma: f64,
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(gamma: f64, stages: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || stages == 0 {
            return Err(Error::InvalidParam(format!("schedule needs γ > 0 and T ≥ 1, got γ={gamma}, T={stages}")));
        }
        let levels = (0..=stages).map(|t| -(-gamma * t as f64).exp_m1()).collect();
        Ok(NoiseSchedule { gamma, levels })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `T`
    pub fn stages(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, t: usize) -> f64 {
        self.levels[t]
    }
}

/// Per-pixel corruption probabilities whose mean equals the budget `s`.
/// Below the map mean `W̃` the map is scaled down; above it every pixel is
/// lifted toward 1. A zero map falls back to uniform `s`.
pub fn pixel_probs(wm: &WeightMap, s: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidParam(format!("noise level {s} outside [0, 1]")));
    }
    let mean = wm.mean;
    let p = if mean <= 0.0 {
        wm.map.map(|_| s)
    } else if s <= mean {
        wm.map.map(|w| s / mean * w)
    } else {
        let lift = (s - mean) / (1.0 - mean);
        wm.map.map(|w| w + lift * (1.0 - w))
    };
    Ok(p.map(|v| v.clamp(0.0, 1.0)))
}

/// The per-input uniform mask, drawn from stream `index` of the global seed
/// so any input can be regenerated independently.
pub fn base_mask(seed: u64, index: u64, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let data = (0..height * width).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![height, width], data).expect("mask dims are positive")
}

/// Pepper where `m < p/2`, salt where `m > 1 − p/2`; all channels of a
/// chosen pixel get the same value.
pub fn corrupt(x: &Tensor, p: &Tensor, m: &Tensor) -> Result<Tensor> {
    let [h, w, c] = *x.shape() else {
        return Err(Error::Shape(format!("corrupt expects (H, W, C), got {:?}", x.shape())));
    };
    if p.shape() != [h, w] || m.shape() != [h, w] {
        return Err(Error::Shape(format!("probability {:?} / mask {:?} vs image {h}x{w}", p.shape(), m.shape())));
    }
    let mut out = x.clone();
    for (px, (&pv, &mv)) in out.data_mut().chunks_mut(c).zip(p.data().iter().zip(m.data())) {
        if mv < pv / 2.0 {
            px.fill(0.0);
        } else if mv > 1.0 - pv / 2.0 {
            px.fill(1.0);
        }
    }
    Ok(out)
}

/// `ỹ = s̃/K · 1 + (1 − s̃) e_y` with `s̃ = s(1 − c²/2)`.
pub fn soft_target(s: f64, c: f64, y: usize, k: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidParam(format!("soft target needs s, c in [0, 1], got s={s}, c={c}")));
    }
    if y >= k {
        return Err(Error::InvalidParam(format!("label {y} out of range for {k} classes")));
    }
    let st = s * (1.0 - 0.5 * c * c);
    let mut target = vec![st / k as f64; k];
    target[y] += 1.0 - st;
    Ok(target)
}

/// Stage distribution `κ_e(s) ∝ (1 − ρ_e)(1 − s) + ρ_e s`, `ρ_e = (e/(E−1))²`.
#[derive(Clone, Debug)]
pub struct StageSampler {
    pub rho: f64,
    pub probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl StageSampler {
    pub fn new(epoch: usize, epochs: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if epochs < 2 || epoch >= epochs {
            return Err(Error::InvalidParam(format!("stage sampler needs E ≥ 2 and e < E, got e={epoch}, E={epochs}")));
        }
        let rho = (epoch as f64 / (epochs - 1) as f64).powi(2);
        let weights: Vec<f64> = schedule.levels().iter().map(|&s| (1.0 - rho) * (1.0 - s) + rho * s).collect();
        let total: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / total).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numerical(format!("stage weights: {e}")))?;
        Ok(StageSampler { rho, probs, dist })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumView {
    pub image: Tensor,
    pub stage: usize,
    pub level: f64,
    /// Base-model probability of the true class on this view.
    pub confidence: f64,
    pub target: Vec<f64>,
}

/// Every stage of one input under a single shared mask.
pub fn build_views(
    x: &Tensor,
    y: usize,
    base: &Model,
    wm: &WeightMap,
    schedule: &NoiseSchedule,
    seed: u64,
    index: u64,
) -> Result<Vec<CurriculumView>> {
    if !base.is_frozen() {
        return Err(Error::Frozen("curriculum needs a frozen base model".into()));
    }
    let images = corrupted_stages(x, wm, schedule, seed, index)?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::stack(&images)?.into_reshaped(&shape)?;
    let probs = base.forward(&batch, false)?.probs;
    let k = base.num_classes();
    images
        .into_iter()
        .enumerate()
        .map(|(t, image)| {
            let confidence = probs.row(t)[y];
            Ok(CurriculumView {
                image,
                stage: t,
                level: schedule.level(t),
                confidence,
                target: soft_target(schedule.level(t), confidence, y, k)?,
            })
        })
        .collect()
}

fn corrupted_stages(x: &Tensor, wm: &WeightMap, schedule: &NoiseSchedule, seed: u64, index: u64) -> Result<Vec<Tensor>> {
    let [h, w, _] = *x.shape() else {
        return Err(Error::Shape(format!("expected an (H, W, C) image, got {:?}", x.shape())));
    };
    if wm.map.shape() != [h, w] {
        return Err(Error::Shape(format!("weight map {:?} vs image {h}x{w}", wm.map.shape())));
    }
    let m = base_mask(seed, index, h, w);
    schedule
        .levels()
        .iter()
        .map(|&s| corrupt(x, &pixel_probs(wm, s)?, &m))
        .collect()
}

/// All views of a training set, stored stage-major for batch gathering.
#[derive(Clone, Debug, PartialEq)]
pub struct Curriculum {
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// One `(N, H, W, C)` tensor per stage.
    pub stages: Vec<Tensor>,
    /// `(N, T+1)` base-model true-class confidences.
    pub confidences: Tensor,
}

impl Curriculum {
    /// Views for every training input. Each input uses its own mask stream,
    /// so the result is independent of `batch_size` and `threads`.
    pub fn build(
        base: &Model,
        train: &Dataset,
        weight_maps: &[WeightMap],
        schedule: &NoiseSchedule,
        seed: u64,
        batch_size: usize,
        threads: usize,
    ) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::Frozen("curriculum needs a frozen base model".into()));
        }
        if train.is_empty() {
            return Err(Error::Data("empty curriculum source".into()));
        }
        if weight_maps.len() != train.len() {
            return Err(Error::Shape(format!("{} weight maps for {} inputs", weight_maps.len(), train.len())));
        }
        let n = train.len();
        let levels = schedule.levels().len();
        let parts = map_chunks(n, batch_size, threads, |range| {
            let mut views = Vec::with_capacity(range.len() * levels);
            for i in range.clone() {
                views.extend(corrupted_stages(&train.image(i), &weight_maps[i], schedule, seed, i as u64)?);
            }
            let mut shape = vec![views.len()];
            shape.extend_from_slice(train.image_shape());
            let probs = base.forward(&Tensor::stack(&views)?.into_reshaped(&shape)?, false)?.probs;
            let conf: Vec<f64> = (0..views.len()).map(|v| probs.row(v)[train.labels[range.start + v / levels]]).collect();
            Ok((views, conf))
        })?;
        let mut stage_data: Vec<Vec<f64>> = vec![Vec::with_capacity(train.images.len()); levels];
        let mut conf = Vec::with_capacity(n * levels);
        for (views, c) in parts {
            for (v, view) in views.iter().enumerate() {
                stage_data[v % levels].extend_from_slice(view.data());
            }
            conf.extend(c);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(train.image_shape());
        let stages = stage_data.into_iter().map(|d| Tensor::new(shape.clone(), d)).collect::<Result<_>>()?;
        Ok(Curriculum {
            schedule: schedule.clone(),
            seed,
            num_classes: train.num_classes,
            labels: train.labels.clone(),
            stages,
            confidences: Tensor::new(vec![n, levels], conf)?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn confidence(&self, i: usize, t: usize) -> f64 {
        self.confidences.row(i)[t]
    }

    pub fn target(&self, i: usize, t: usize) -> Result<Vec<f64>> {
        soft_target(self.schedule.level(t), self.confidence(i, t), self.labels[i], self.num_classes)
    }

    pub fn view(&self, i: usize, t: usize) -> Result<CurriculumView> {
        Ok(CurriculumView {
            image: self.stages[t].row_tensor(i),
            stage: t,
            level: self.schedule.level(t),
            confidence: self.confidence(i, t),
            target: self.target(i, t)?,
        })
    }

    /// Images `(B, H, W, C)` and soft targets `(B, K)` for `(input, stage)` pairs.
    pub fn gather(&self, picks: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let first = &self.stages[0];
        let row = first.row_len();
        let mut images = Vec::with_capacity(picks.len() * row);
        let mut targets = Vec::with_capacity(picks.len() * self.num_classes);
        for &(i, t) in picks {
            images.extend_from_slice(self.stages[t].row(i));
            targets.extend(self.target(i, t)?);
        }
        let mut shape = first.shape().to_vec();
        shape[0] = picks.len();
        Ok((Tensor::new(shape, images)?, Tensor::new(vec![picks.len(), self.num_classes], targets)?))
    }

    /// Writes `manifest.txt` plus `views.bin` (one framed record per
    /// input and stage).
    pub fn save(&self, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        writeln!(manifest, "seed = {}", self.seed).unwrap();
        writeln!(manifest, "gamma = {}", self.schedule.gamma()).unwrap();
        writeln!(manifest, "stages = {}", self.schedule.stages()).unwrap();
        writeln!(manifest, "inputs = {}", self.len()).unwrap();
        writeln!(manifest, "classes = {}", self.num_classes).unwrap();
        for (k, v) in extra {
            writeln!(manifest, "{k} = {v}").unwrap();
        }
        fs::write(dir.join("manifest.txt"), manifest)?;

        let mut w = BufWriter::new(fs::File::create(dir.join("views.bin"))?);
        w.write_all(VIEWS_MAGIC)?;
        write_u64(&mut w, self.seed)?;
        write_f64(&mut w, self.schedule.gamma())?;
        write_usize(&mut w, self.schedule.stages())?;
        write_usize(&mut w, self.num_classes)?;
        write_usize(&mut w, self.len())?;
        for i in 0..self.len() {
            for t in 0..self.stages.len() {
                write_usize(&mut w, i)?;
                write_usize(&mut w, t)?;
                write_usize(&mut w, self.labels[i])?;
                write_f64(&mut w, self.confidence(i, t))?;
                write_tensor(&mut w, &self.stages[t].row_tensor(i))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = fs::File::open(dir.join("views.bin")).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let mut r = BufReader::new(file);
        expect_magic(&mut r, VIEWS_MAGIC)?;
        let seed = read_u64(&mut r)?;
        let gamma = read_f64(&mut r)?;
        let schedule = NoiseSchedule::new(gamma, read_usize(&mut r)?)?;
        let num_classes = read_usize(&mut r)?;
        let n = read_usize(&mut r)?;
        let levels = schedule.levels().len();
        let mut labels = vec![0; n];
        let mut conf = vec![0.0; n * levels];
        let mut stage_data: Vec<Vec<f64>> = vec![Vec::new(); levels];
        let mut image_shape = Vec::new();
        for i in 0..n {
            for t in 0..levels {
                if read_usize(&mut r)? != i || read_usize(&mut r)? != t {
                    return Err(Error::Format("curriculum records out of order".into()));
                }
                labels[i] = read_usize(&mut r)?;
                conf[i * levels + t] = read_f64(&mut r)?;
                let img = read_tensor(&mut r)?;
                image_shape = img.shape().to_vec();
                stage_data[t].extend_from_slice(img.data());
            }
        }
        if n == 0 {
            return Err(Error::Data("empty curriculum cache".into()));
        }
        let mut shape = vec![n];
        shape.extend(image_shape);
        let stages = stage_data.into_iter().map(|d| Tensor::new(shape.clone(), d)).collect::<Result<_>>()?;
        Ok(Curriculum { schedule, seed, num_classes, labels, stages, confidences: Tensor::new(vec![n, levels], conf)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map(values: Vec<f64>, h: usize, w: usize) -> WeightMap {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        WeightMap { map: Tensor::new(vec![h, w], values).unwrap(), mean }
    }

    #[test]
    fn schedule_levels() {
        let s = NoiseSchedule::new(0.25, 5).unwrap();
        assert_eq!(s.level(0), 0.0);
        assert_relative_eq!(s.level(5), 1.0 - (-1.25f64).exp(), max_relative = 1e-15);
        assert!((s.level(5) - 0.71350).abs() < 5e-6);
        assert!(s.levels().windows(2).all(|w| w[0] < w[1]));
        assert!(NoiseSchedule::new(0.0, 5).is_err());
        assert!(NoiseSchedule::new(0.25, 0).is_err());
    }

    #[test]
    fn probs_at_mean_equal_map() {
        let wm = map(vec![0.2, 1.0, 0.6, 0.0], 2, 2);
        let p = pixel_probs(&wm, wm.mean).unwrap();
        for (a, b) in p.data().iter().zip(wm.map.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn probs_constant_map_and_extremes() {
        let wm = map(vec![1.0; 4], 2, 2);
        assert_eq!(pixel_probs(&wm, 0.3).unwrap().data(), &[0.3; 4]);
        let wm = map(vec![0.2, 1.0, 0.6, 0.0], 2, 2);
        assert_eq!(pixel_probs(&wm, 1.0).unwrap().data(), &[1.0; 4]);
        assert_eq!(pixel_probs(&wm, 0.0).unwrap().data(), &[0.0; 4]);
        let zero = map(vec![0.0; 4], 2, 2);
        assert_eq!(pixel_probs(&zero, 0.4).unwrap().data(), &[0.4; 4]);
        assert!(pixel_probs(&wm, 1.1).is_err());
    }

    #[test]
    fn probs_mean_matches_budget() {
        let wm = map(vec![0.1, 1.0, 0.5, 0.05, 0.3, 0.0], 2, 3);
        for s in [0.0, 0.1, 0.2, wm.mean, 0.5, 0.9, 1.0] {
            let p = pixel_probs(&wm, s).unwrap();
            assert!((p.sum() / 6.0 - s).abs() < 1e-12, "s={s}");
        }
    }

    #[test]
    fn corrupt_extremes() {
        let x = Tensor::full(&[2, 2, 3], 0.5);
        let m = Tensor::new(vec![2, 2], vec![0.1, 0.4, 0.6, 0.95]).unwrap();
        assert_eq!(corrupt(&x, &Tensor::zeros(&[2, 2]), &m).unwrap(), x);
        let all = corrupt(&x, &Tensor::full(&[2, 2], 1.0), &m).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(&all.data()[..3], &[0.0; 3]);
        assert_eq!(&all.data()[9..], &[1.0; 3]);
        assert!(corrupt(&x, &Tensor::zeros(&[2, 3]), &m).is_err());
    }

    #[test]
    fn corrupted_sets_nest_on_grid() {
        // thresholds enumerated on a 4x4 mask
        let m = Tensor::new(vec![4, 4], (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect()).unwrap();
        let x = Tensor::full(&[4, 4, 1], 0.5);
        let mut prev: Vec<bool> = vec![false; 16];
        for step in 0..=8 {
            let p = Tensor::full(&[4, 4], step as f64 / 8.0);
            let out = corrupt(&x, &p, &m).unwrap();
            let changed: Vec<bool> = out.data().iter().map(|&v| v != 0.5).collect();
            assert!(prev.iter().zip(&changed).all(|(a, b)| !a || *b));
            assert_eq!(changed.iter().filter(|&&c| c).count(), 2 * step);
            prev = changed;
        }
    }

    #[test]
    fn soft_target_examples() {
        assert_eq!(soft_target(0.0, 0.7, 2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        for v in soft_target(1.0, 0.0, 1, 10).unwrap() {
            assert_relative_eq!(v, 0.1, max_relative = 1e-15);
        }
        let t = soft_target(0.5, 0.8, 3, 10).unwrap();
        assert_relative_eq!(t[3], 0.694, max_relative = 1e-12);
        assert_relative_eq!(t[0], 0.034, max_relative = 1e-12);
        assert!(soft_target(1.2, 0.5, 0, 2).is_err());
        assert!(soft_target(0.5, 0.5, 2, 2).is_err());
    }

    #[test]
    fn sampler_endpoints() {
        let s = NoiseSchedule::new(0.25, 5).unwrap();
        let first = StageSampler::new(0, 10, &s).unwrap();
        assert_eq!(first.rho, 0.0);
        assert!(first.probs.windows(2).all(|w| w[0] > w[1]));
        let last = StageSampler::new(9, 10, &s).unwrap();
        assert_eq!(last.rho, 1.0);
        assert_eq!(last.probs[0], 0.0);
        assert_relative_eq!(last.probs.iter().sum::<f64>(), 1.0, max_relative = 1e-15);
        assert!(StageSampler::new(0, 1, &s).is_err());
        assert!(StageSampler::new(3, 3, &s).is_err());
    }

    #[test]
    fn sampler_uniform_midpoint() {
        // levels {0, 0.5, 1} are not reachable by the exponential schedule, so
        // evaluate the weight formula on them directly
        let rho: f64 = 0.5;
        let w: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&s| (1.0 - rho) * (1.0 - s) + rho * s).collect();
        assert_eq!(w, vec![0.5, 0.5, 0.5]);
        // ρ_e = 0.5 needs (e/(E−1))² = 0.5, which no integer pair hits; the
        // closest check is that the sampler agrees with the formula
        let s = NoiseSchedule::new(0.7, 2).unwrap();
        let sampler = StageSampler::new(1, 3, &s).unwrap();
        let w: Vec<f64> = s.levels().iter().map(|&l| 0.75 * (1.0 - l) + 0.25 * l).collect();
        let total: f64 = w.iter().sum();
        for (p, w) in sampler.probs.iter().zip(&w) {
            assert_relative_eq!(*p, w / total, max_relative = 1e-15);
        }
    }

    #[test]
    fn mask_streams_are_independent_of_order() {
        let a = base_mask(7, 3, 4, 4);
        let _ = base_mask(7, 2, 4, 4);
        assert_eq!(a, base_mask(7, 3, 4, 4));
        assert_ne!(a, base_mask(7, 4, 4, 4));
        assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    }
}

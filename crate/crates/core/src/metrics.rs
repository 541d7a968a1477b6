//! Uncertainty scores, ROC analysis and the evaluation report.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};
use crate::evidential::{DirichletOutput, MetaModel};
use crate::nn::Model;
use crate::special::{digamma, ln_gamma};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    MaxProb,
    DiffEntropy,
    MutualInfo,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_prob" => Ok(Metric::MaxProb),
            "diff_entropy" => Ok(Metric::DiffEntropy),
            "mutual_info" => Ok(Metric::MutualInfo),
            _ => Err(Error::Config(format!(
                "unknown metric {s:?} (expected max_prob, diff_entropy or mutual_info)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::MaxProb => "max_prob",
            Metric::DiffEntropy => "diff_entropy",
            Metric::MutualInfo => "mutual_info",
        }
    }
}

/// Either plain softmax probabilities or Dirichlet concentrations.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelOutput {
    Softmax(Tensor),
    Dirichlet(DirichletOutput),
}

impl ModelOutput {
    /// Predictive probabilities `(N, K)`.
    pub fn probs(&self) -> Tensor {
        match self {
            ModelOutput::Softmax(p) => p.clone(),
            ModelOutput::Dirichlet(d) => d.mean(),
        }
    }
}

/// The model under evaluation: a bare base network or base plus meta-model.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Base(&'a Model),
    Pipeline(&'a Model, &'a MetaModel),
}

impl Predictor<'_> {
    pub fn predict(&self, images: &Tensor, batch_size: usize) -> Result<ModelOutput> {
        match *self {
            Predictor::Base(model) => {
                let n = images.batch();
                let k = model.num_classes();
                let mut probs = Vec::with_capacity(n * k);
                let idx: Vec<usize> = (0..n).collect();
                for chunk in idx.chunks(batch_size.max(1)) {
                    probs.extend_from_slice(model.forward(&images.select_rows(chunk), false)?.probs.data());
                }
                Ok(ModelOutput::Softmax(Tensor::new(vec![n, k], probs)?))
            }
            Predictor::Pipeline(base, meta) => Ok(ModelOutput::Dirichlet(meta.predict(base, images, batch_size)?)),
        }
    }
}

/// Scores with their orientation; [`ScoreVector::oriented`] always puts ID
/// on the high side.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub metric: Metric,
    pub higher_is_id: bool,
}

impl ScoreVector {
    pub fn oriented(&self) -> Vec<f64> {
        if self.higher_is_id {
            self.values.clone()
        } else {
            self.values.iter().map(|v| -v).collect()
        }
    }
}

/// `Σ lnΓ(α_k) − lnΓ(S) − Σ (α_k − 1)(ψ(α_k) − ψ(S))`
pub fn diff_entropy(alpha: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma(s);
    alpha.iter().map(|&a| ln_gamma(a) - (a - 1.0) * (digamma(a) - psi_s)).sum::<f64>() - ln_gamma(s)
}

/// Mutual information between label and categorical parameter:
/// `H(p̂) + Σ_k p̂_k (ψ(α_k + 1) − ψ(S + 1))`.
pub fn mutual_info(alpha: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    let psi_s1 = digamma(s + 1.0);
    alpha
        .iter()
        .map(|&a| {
            let p = a / s;
            -p * p.ln() + p * (digamma(a + 1.0) - psi_s1)
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn score(out: &ModelOutput, metric: Metric) -> Result<ScoreVector> {
    let (values, higher_is_id) = match (metric, out) {
        (Metric::MaxProb, _) => {
            let p = out.probs();
            let k = p.row_len();
            (p.data().chunks(k).map(|r| r.iter().cloned().fold(f64::MIN, f64::max)).collect(), true)
        }
        (_, ModelOutput::Softmax(_)) => {
            return Err(Error::Config(format!("{} needs a Dirichlet output", metric.name())));
        }
        (Metric::DiffEntropy, ModelOutput::Dirichlet(d)) => ((0..d.len()).map(|i| diff_entropy(d.alpha.row(i))).collect(), false),
        (Metric::MutualInfo, ModelOutput::Dirichlet(d)) => ((0..d.len()).map(|i| mutual_info(d.alpha.row(i))).collect(), false),
    };
    Ok(ScoreVector { values, metric, higher_is_id })
}

/// Threshold sweep over oriented scores; a sample counts as ID when its
/// score is `≥` the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct RocResult {
    /// Distinct scores, descending.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auroc: f64,
    /// Maximizer of `TPR − FPR`; ties go to the larger TPR.
    pub tau: f64,
    /// Every score on both sides is the same value.
    pub degenerate: bool,
}

thread_local! {
    static THRESHOLD_FITS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`roc`] threshold fits run on this thread.
pub fn threshold_fits() -> usize {
    THRESHOLD_FITS.with(Cell::get)
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidParam("ROC needs nonempty ID and OOD score sets".into()));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    Ok(())
}

/// `P(id > ood) + ½ P(id = ood)` by sorting and counting.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let mut sorted = ood.to_vec();
    sorted.sort_by(f64::total_cmp);
    // counted in half-units so the sum stays an exact integer
    let mut halves: u128 = 0;
    for &s in id {
        let below = sorted.partition_point(|&o| o < s);
        let not_above = sorted.partition_point(|&o| o <= s);
        halves += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(halves as f64 / (2.0 * id.len() as f64 * ood.len() as f64))
}

pub fn roc(id: &[f64], ood: &[f64]) -> Result<RocResult> {
    check_scores(id, ood)?;
    THRESHOLD_FITS.with(|c| c.set(c.get() + 1));
    let mut thresholds: Vec<f64> = id.iter().chain(ood).cloned().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut id_sorted = id.to_vec();
    id_sorted.sort_by(f64::total_cmp);
    let mut ood_sorted = ood.to_vec();
    ood_sorted.sort_by(f64::total_cmp);
    let frac_at_least = |sorted: &[f64], t: f64| (sorted.len() - sorted.partition_point(|&v| v < t)) as f64 / sorted.len() as f64;
    let tpr: Vec<f64> = thresholds.iter().map(|&t| frac_at_least(&id_sorted, t)).collect();
    let fpr: Vec<f64> = thresholds.iter().map(|&t| frac_at_least(&ood_sorted, t)).collect();
    let mut best = 0;
    for i in 1..thresholds.len() {
        let (j, jb) = (tpr[i] - fpr[i], tpr[best] - fpr[best]);
        if j > jb || (j == jb && tpr[i] > tpr[best]) {
            best = i;
        }
    }
    Ok(RocResult {
        tau: thresholds[best],
        degenerate: thresholds.len() == 1,
        auroc: auroc(id, ood)?,
        thresholds,
        tpr,
        fpr,
    })
}

/// Fraction of oriented scores `≥ τ`.
pub fn coverage(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let k = probs.row_len();
    let correct = probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean `−ln p_y` with `p_y` clamped at `1e-12`.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let k = probs.row_len();
    let total: f64 = probs.data().chunks(k).zip(labels).map(|(row, &y)| -row[y].max(1e-12).ln()).sum();
    Ok(total / labels.len() as f64)
}

/// Equal-width binned expected calibration error on max-prob confidence.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    check_labels(probs, labels)?;
    if bins < 2 {
        return Err(Error::InvalidParam(format!("ECE needs at least two bins, got {bins}")));
    }
    let k = probs.row_len();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (row, &y) in probs.data().chunks(k).zip(labels) {
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        hit_sum[b] += f64::from(u8::from(pred == y));
    }
    let n = labels.len() as f64;
    Ok((0..bins).filter(|&b| count[b] > 0).map(|b| (hit_sum[b] - conf_sum[b]).abs() / n).sum())
}

/// `mean(id) − mean(shifted)`
pub fn confidence_drop(id_conf: &[f64], shifted_conf: &[f64]) -> Result<f64> {
    if id_conf.is_empty() || shifted_conf.is_empty() {
        return Err(Error::InvalidParam("confidence drop needs nonempty sets".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(id_conf) - mean(shifted_conf))
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.rank() != 2 || probs.batch() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("probabilities {:?} for {} labels", probs.shape(), labels.len())));
    }
    if labels.iter().any(|&y| y >= probs.row_len()) {
        return Err(Error::InvalidParam("label out of range".into()));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn max_probs(p: &Tensor) -> Vec<f64> {
    p.data().chunks(p.row_len()).map(|r| r[argmax(r)]).collect()
}

/// Per-sample oriented scores of each evaluated split.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDump {
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
    pub adv: Option<Vec<f64>>,
}

/// Headline metric row plus calibration and confidence-drop columns.
/// Coverages and accuracy are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub tau: f64,
    pub id_accuracy: f64,
    pub id_coverage: f64,
    pub ood_coverage: f64,
    pub adv_coverage: Option<f64>,
    pub auroc: f64,
    pub adv_auroc: Option<f64>,
    pub nll: f64,
    pub ece: f64,
    pub confidence_drop_ood: f64,
    pub confidence_drop_adv: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "metric",
    "tau",
    "id_acc",
    "id_cov",
    "ood_cov",
    "adv_cov",
    "auroc",
    "adv_auroc",
    "nll",
    "ece15",
    "conf_drop_ood",
    "conf_drop_adv",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        [
            self.metric.name().to_string(),
            format!("{:.6}", self.tau),
            format!("{:.6}", self.id_accuracy),
            format!("{:.6}", self.id_coverage),
            format!("{:.6}", self.ood_coverage),
            opt(self.adv_coverage),
            format!("{:.6}", self.auroc),
            opt(self.adv_auroc),
            format!("{:.6}", self.nll),
            format!("{:.6}", self.ece),
            format!("{:.6}", self.confidence_drop_ood),
            opt(self.confidence_drop_adv),
        ]
        .join(",")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}%"));
        let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "metric            {}", self.metric.name())?;
        writeln!(f, "threshold         {:.6}", self.tau)?;
        writeln!(f, "ID Acc            {:.2}%", self.id_accuracy)?;
        writeln!(f, "ID Cov            {:.2}%", self.id_coverage)?;
        writeln!(f, "OOD Cov           {:.2}%", self.ood_coverage)?;
        writeln!(f, "Adv Cov           {}", pct(self.adv_coverage))?;
        writeln!(f, "AUROC             {:.2}%", 100.0 * self.auroc)?;
        writeln!(f, "Adv AUROC         {}", pct(self.adv_auroc.map(|v| 100.0 * v)))?;
        writeln!(f, "NLL               {:.4}", self.nll)?;
        writeln!(f, "ECE(15)           {:.4}", self.ece)?;
        writeln!(f, "Conf drop ID>OOD  {:.4}", self.confidence_drop_ood)?;
        write!(f, "Conf drop ID>Adv  {}", num(self.confidence_drop_adv))
    }
}

pub const ECE_BINS: usize = 15;

/// Fit `τ*` on validation data only.
pub fn fit_threshold(predictor: Predictor, id_val: &Tensor, ood_val: &Tensor, metric: Metric, batch_size: usize) -> Result<RocResult> {
    let id = score(&predictor.predict(id_val, batch_size)?, metric)?.oriented();
    let ood = score(&predictor.predict(ood_val, batch_size)?, metric)?.oriented();
    roc(&id, &ood)
}

/// Score test splits against a fixed validation threshold.
pub fn evaluate(
    predictor: Predictor,
    id_test: &Tensor,
    id_labels: &[usize],
    ood_test: &Tensor,
    adv_test: Option<&Tensor>,
    metric: Metric,
    tau: f64,
    batch_size: usize,
) -> Result<(EvalReport, ScoreDump)> {
    let id_out = predictor.predict(id_test, batch_size)?;
    let ood_out = predictor.predict(ood_test, batch_size)?;
    let id_probs = id_out.probs();
    let id_scores = score(&id_out, metric)?.oriented();
    let ood_scores = score(&ood_out, metric)?.oriented();
    let id_conf = max_probs(&id_probs);
    let (adv_scores, adv_conf) = match adv_test {
        Some(adv) => {
            let out = predictor.predict(adv, batch_size)?;
            (Some(score(&out, metric)?.oriented()), Some(max_probs(&out.probs())))
        }
        None => (None, None),
    };
    let report = EvalReport {
        metric,
        tau,
        id_accuracy: 100.0 * accuracy(&id_probs, id_labels)?,
        id_coverage: 100.0 * coverage(&id_scores, tau),
        ood_coverage: 100.0 * coverage(&ood_scores, tau),
        adv_coverage: adv_scores.as_ref().map(|s| 100.0 * coverage(s, tau)),
        auroc: auroc(&id_scores, &ood_scores)?,
        adv_auroc: adv_scores.as_ref().map(|s| auroc(&id_scores, s)).transpose()?,
        nll: nll(&id_probs, id_labels)?,
        ece: ece(&id_probs, id_labels, ECE_BINS)?,
        confidence_drop_ood: confidence_drop(&id_conf, &max_probs(&ood_out.probs()))?,
        confidence_drop_adv: adv_conf.as_ref().map(|c| confidence_drop(&id_conf, c)).transpose()?,
    };
    Ok((report, ScoreDump { id: id_scores, ood: ood_scores, adv: adv_scores }))
}

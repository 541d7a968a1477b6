//! The seven pipeline stages. Each stage reads verified upstream outputs
//! from the run directory and seals its own outputs with a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use guide_core::attacks::run_attack;
use guide_core::curriculum::{Curriculum, NoiseSchedule};
use guide_core::evidential::{train_meta, BranchKind, MetaModel};
use guide_core::framing::{expect_magic, read_tensor, write_tensor};
use guide_core::metrics::{evaluate, fit_threshold, EvalReport, Metric, Predictor, ScoreDump};
use guide_core::nn::{accuracy, load_model, save_model, train_base};
use guide_core::saliency::{calibrate, eligible_layers, fisher_eta, select_layers, SalientSet, WeightMap};
use guide_core::{holdout, load_idx, split, synth_blobs, Architecture, BlobSpec, Dataset, Error, Model, Result};
use guide_core::{SplitSizes, SplitSpec, Tensor};

use crate::config::{AttackTarget, RunConfig, StageHashes};
use crate::manifest::{StageDir, StageManifest};

const WEIGHT_MAPS_MAGIC: &[u8; 8] = b"GUIDEWM1";

/// Shift corpus for the blob source: wide, dim blobs over heavy noise.
const OOD_BLOBS: BlobSpec = BlobSpec { radius: 3.0, intensity: 0.5, noise: 0.6 };

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub ood_val: Dataset,
    pub ood_test: Dataset,
}

pub struct Run {
    pub cfg: RunConfig,
    pub hashes: StageHashes,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hashes = StageHashes::compute(&cfg)?;
        fs::create_dir_all(&cfg.output_dir)?;
        fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
        Ok(Run { cfg, hashes })
    }

    pub fn dir(&self, stage: &'static str) -> StageDir {
        StageDir::new(&self.cfg.output_dir, stage)
    }

    pub fn data(&self) -> Result<Splits> {
        let cfg = &self.cfg;
        let d = &cfg.data;
        let id = match d.source.as_str() {
            "idx" => load_idx(d.images.as_ref().unwrap(), d.labels.as_ref().unwrap())?,
            _ => synth_blobs(cfg.seed, d.blob_per_class, d.blob_classes, d.blob_side, &BlobSpec::default())?,
        };
        let spec = SplitSpec { sizes: SplitSizes::Counts(d.split), stratified: d.stratified, seed: cfg.seed };
        let (train, val, test) = split(&id, &spec)?;
        let (ood_val, ood_test) = match d.ood_source.as_str() {
            "idx" => {
                let ood = load_idx(d.ood_images.as_ref().unwrap(), d.ood_labels.as_ref().unwrap())?;
                holdout(&ood, d.ood_split, cfg.seed)?
            }
            "blobs" => {
                let total = d.ood_split[0] + d.ood_split[1];
                let per_class = total.div_ceil(d.blob_classes);
                let side = id.image_shape()[0];
                let ood = synth_blobs(cfg.seed ^ 0x5eed, per_class, d.blob_classes, side, &OOD_BLOBS)?;
                holdout(&ood, d.ood_split, cfg.seed)?
            }
            _ => (val.clone(), test.clone()),
        };
        if ood_test.image_shape() != test.image_shape() {
            return Err(Error::Data(format!(
                "shift images are {:?} but ID images are {:?}",
                ood_test.image_shape(),
                test.image_shape()
            )));
        }
        Ok(Splits { train, val, test, ood_val, ood_test })
    }

    pub fn train_base(&self) -> Result<String> {
        let data = self.data()?;
        let cfg = &self.cfg;
        let arch = Architecture::parse(&cfg.base.architecture)?;
        let model = arch.build(data.train.image_shape(), data.train.num_classes, cfg.seed)?;
        let (model, history) = train_base(model, &data.train, &cfg.train_config())?;
        let val_acc = accuracy(&model, &data.val, cfg.eval.batch_size)?;

        let sd = self.dir("base");
        sd.reset()?;
        save_model(&sd.path("model.gnn"), &model)?;
        let mut csv = String::from("epoch,loss,train_accuracy\n");
        for h in &history {
            writeln!(csv, "{},{:.8},{:.8}", h.epoch + 1, h.loss, h.accuracy).unwrap();
        }
        fs::write(sd.path("history.csv"), csv)?;
        StageManifest::new("base", &self.hashes.base)
            .upstream("data", &self.hashes.data)
            .fact("architecture", arch.id())
            .fact("model_checksum", model.checksum())
            .fact("val_accuracy", val_acc)
            .seal(&sd.dir, &["model.gnn", "history.csv"])?;
        Ok(format!("base model {} trained; validation accuracy {:.4}", model.checksum(), val_acc))
    }

    pub fn base(&self) -> Result<Model> {
        let sd = self.dir("base");
        let m = sd.verify(&self.hashes.base)?;
        let model = load_model(&sd.path("model.gnn"))?;
        if m.facts.get("model_checksum") != Some(&model.checksum()) {
            return Err(Error::Checksum("base model checksum differs from its manifest".into()));
        }
        Ok(model)
    }

    pub fn calibrate(&self) -> Result<String> {
        let base = self.base()?;
        let data = self.data()?;
        let s = &self.cfg.saliency;
        let cal = calibrate(&base, &data.train.images, &data.train.labels, self.cfg.stabilizer()?, s.batch_size)?;
        let salient = select_layers(&cal.mass, s.eta)?;
        let n = s.fisher_samples.min(data.train.len());
        let fisher_images = data.train.images.select_rows(&(0..n).collect::<Vec<_>>());
        let fisher = fisher_eta(&base, &salient, &fisher_images, s.batch_size)?;

        let mut report = String::new();
        writeln!(report, "eta = {}", s.eta).unwrap();
        writeln!(report, "stabilizer = {}", s.stabilizer).unwrap();
        writeln!(report, "samples = {}", cal.mass.samples).unwrap();
        for (layer, m) in cal.mass.layers.iter().zip(&cal.mass.mass) {
            writeln!(report, "mass.{} = {}", layer.name, m).unwrap();
        }
        writeln!(report, "selected = {}", salient.names().join(",")).unwrap();
        writeln!(report, "achieved_mass_fraction = {}", salient.achieved_mass_fraction).unwrap();
        for (name, f) in &fisher.layers {
            writeln!(report, "fisher.{name} = {f}").unwrap();
        }
        writeln!(report, "eta_hat = {}", fisher.eta_hat).unwrap();

        let sd = self.dir("calibrate");
        sd.reset()?;
        fs::write(sd.path("saliency.txt"), &report)?;
        write_weight_maps(&sd.path("weight_maps.bin"), &cal.weight_maps)?;
        StageManifest::new("calibrate", &self.hashes.calibrate)
            .upstream("base", &self.hashes.base)
            .fact("base_checksum", base.checksum())
            .seal(&sd.dir, &["saliency.txt", "weight_maps.bin"])?;
        Ok(format!("salient layers {:?}; eta_hat {:.4}", salient.names(), fisher.eta_hat))
    }

    /// Salient set and weight maps from a verified calibration.
    pub fn calibration(&self, base: &Model) -> Result<(SalientSet, Vec<WeightMap>)> {
        let sd = self.dir("calibrate");
        sd.verify(&self.hashes.calibrate)?;
        let report = fs::read_to_string(sd.path("saliency.txt"))?;
        let salient = parse_salient(&report, base)?;
        let maps = read_weight_maps(&sd.path("weight_maps.bin"))?;
        Ok((salient, maps))
    }

    pub fn build_curriculum(&self) -> Result<String> {
        let base = self.base()?;
        let (_, maps) = self.calibration(&base)?;
        let data = self.data()?;
        let c = &self.cfg.curriculum;
        let schedule = NoiseSchedule::new(c.gamma, c.stages)?;
        let cur = Curriculum::build(&base, &data.train, &maps, &schedule, self.cfg.seed, c.batch_size, self.cfg.threads)?;
        let sd = self.dir("curriculum");
        sd.reset()?;
        cur.save(&sd.dir, &[("config_hash", self.hashes.curriculum.clone()), ("base_checksum", base.checksum())])?;
        StageManifest::new("curriculum", &self.hashes.curriculum)
            .upstream("calibrate", &self.hashes.calibrate)
            .seal(&sd.dir, &["manifest.txt", "views.bin"])?;
        let levels: Vec<String> = schedule.levels().iter().map(|s| format!("{s:.4}")).collect();
        Ok(format!("{} inputs x {} stages; noise levels [{}]", cur.len(), levels.len(), levels.join(", ")))
    }

    pub fn train_meta(&self) -> Result<String> {
        let base = self.base()?;
        let (salient, _) = self.calibration(&base)?;
        let sd_cur = self.dir("curriculum");
        sd_cur.verify(&self.hashes.curriculum)?;
        let cur = Curriculum::load(&sd_cur.dir)?;
        let kind = BranchKind::parse(&self.cfg.meta.branch)?;
        let meta = MetaModel::new(&base, &salient, kind, self.cfg.seed)?;
        let (meta, history) = train_meta(meta, &base, &cur, &self.cfg.meta_config())?;

        let sd = self.dir("meta");
        sd.reset()?;
        meta.save(&sd.path("meta.gmm"))?;
        let mut csv = String::from("epoch,rho,ell,kl,sre,total\n");
        for h in &history {
            let l = &h.loss;
            writeln!(csv, "{},{:.8},{:.8},{:.8},{:.8},{:.8}", h.epoch + 1, h.rho, l.ell, l.kl, l.sre, l.total).unwrap();
        }
        fs::write(sd.path("history.csv"), csv)?;
        StageManifest::new("meta", &self.hashes.meta)
            .upstream("curriculum", &self.hashes.curriculum)
            .fact("base_checksum", base.checksum())
            .seal(&sd.dir, &["meta.gmm", "history.csv"])?;
        let last = history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
        Ok(format!("meta-model on {:?} trained; final loss {last:.4}", salient.names()))
    }

    pub fn meta(&self, base: &Model) -> Result<MetaModel> {
        let sd = self.dir("meta");
        sd.verify(&self.hashes.meta)?;
        MetaModel::load(&sd.path("meta.gmm"), base)
    }

    pub fn attack(&self) -> Result<String> {
        if !self.cfg.attack.enabled {
            return Err(Error::Config("attack.enabled is false".into()));
        }
        let base = self.base()?;
        let data = self.data()?;
        let attack = self.cfg.attack_config()?;
        let target = self.cfg.attack_target()?;
        let meta = match target {
            AttackTarget::Pipeline => Some(self.meta(&base)?),
            AttackTarget::Base => None,
        };
        let predictor = match &meta {
            Some(m) => Predictor::Pipeline(&base, m),
            None => Predictor::Base(&base),
        };
        let a = &self.cfg.attack;
        let adv = run_attack(predictor, &data.test.images, &data.test.labels, &attack, a.batch_size, self.cfg.threads)?;
        let adv = Dataset::new(format!("{}/{}", data.test.name, attack.kind.name()), adv, data.test.labels.clone(), data.test.num_classes)?;
        let clean_acc = accuracy(&base, &data.test, self.cfg.eval.batch_size)?;
        let adv_acc = accuracy(&base, &adv, self.cfg.eval.batch_size)?;

        let sd = self.dir("attack");
        sd.reset()?;
        adv.save(&sd.path("adv.ds"))?;
        let upstream = match target {
            AttackTarget::Base => ("base", &self.hashes.base),
            AttackTarget::Pipeline => ("meta", &self.hashes.meta),
        };
        StageManifest::new("attack", &self.hashes.attack)
            .upstream(upstream.0, upstream.1)
            .fact("kind", attack.kind.name())
            .fact("epsilon", attack.epsilon)
            .fact("target", &a.target)
            .fact("base_clean_accuracy", clean_acc)
            .fact("base_adv_accuracy", adv_acc)
            .seal(&sd.dir, &["adv.ds"])?;
        Ok(format!(
            "{} eps={} on {}: base accuracy {:.4} -> {:.4}",
            attack.kind.name(),
            attack.epsilon,
            a.target,
            clean_acc,
            adv_acc
        ))
    }

    pub fn adversarial(&self) -> Result<Option<Dataset>> {
        if !self.cfg.attack.enabled {
            return Ok(None);
        }
        let sd = self.dir("attack");
        sd.verify(&self.hashes.attack)?;
        Ok(Some(Dataset::load(&sd.path("adv.ds"))?))
    }

    pub fn evaluate(&self) -> Result<String> {
        let base = self.base()?;
        let meta = self.meta(&base)?;
        let adv = self.adversarial()?;
        let data = self.data()?;
        let metric = self.cfg.metric()?;
        let batch = self.cfg.eval.batch_size;
        let rows = [
            ("guide", Predictor::Pipeline(&base, &meta), metric),
            ("base", Predictor::Base(&base), Metric::MaxProb),
        ];
        let mut csv = format!("model,{}\n", EvalReport::csv_header());
        let mut text = String::new();
        let mut scores = String::from("model,set,index,score\n");
        for (name, predictor, metric) in rows {
            // the threshold is fixed on validation data and reused unchanged on test data
            let fit = fit_threshold(predictor, &data.val.images, &data.ood_val.images, metric, batch)?;
            let (report, dump) = evaluate(
                predictor,
                &data.test.images,
                &data.test.labels,
                &data.ood_test.images,
                adv.as_ref().map(|d| &d.images),
                metric,
                fit.tau,
                batch,
            )?;
            writeln!(csv, "{name},{}", report.csv_row()).unwrap();
            writeln!(text, "== {name}\n{report}").unwrap();
            append_scores(&mut scores, name, &dump);
        }
        let sd = self.dir("evaluate");
        sd.reset()?;
        fs::write(sd.path("report.csv"), &csv)?;
        fs::write(sd.path("report.txt"), &text)?;
        fs::write(sd.path("scores.csv"), &scores)?;
        StageManifest::new("evaluate", &self.hashes.evaluate)
            .upstream("meta", &self.hashes.meta)
            .upstream("attack", &self.hashes.attack)
            .seal(&sd.dir, &["report.csv", "report.txt", "scores.csv"])?;
        Ok(text)
    }

    /// Runs every stage whose output is missing or stale, then returns the
    /// evaluation report.
    pub fn report(&self, log: &mut dyn FnMut(&str, &str)) -> Result<String> {
        type Step = fn(&Run) -> Result<String>;
        let mut steps: Vec<(&'static str, &str, Step)> = vec![
            ("base", &self.hashes.base, Run::train_base),
            ("calibrate", &self.hashes.calibrate, Run::calibrate),
            ("curriculum", &self.hashes.curriculum, Run::build_curriculum),
            ("meta", &self.hashes.meta, Run::train_meta),
        ];
        if self.cfg.attack.enabled {
            steps.push(("attack", &self.hashes.attack, Run::attack));
        }
        for (stage, hash, step) in steps {
            if self.dir(stage).is_fresh(hash) {
                log(stage, "cached");
            } else {
                let msg = step(self)?;
                log(stage, &msg);
            }
        }
        let sd = self.dir("evaluate");
        if sd.is_fresh(&self.hashes.evaluate) {
            log("evaluate", "cached");
            return Ok(fs::read_to_string(sd.path("report.txt"))?);
        }
        self.evaluate()
    }
}

fn append_scores(out: &mut String, model: &str, dump: &ScoreDump) {
    let sets = [("id", Some(&dump.id)), ("ood", Some(&dump.ood)), ("adv", dump.adv.as_ref())];
    for (set, values) in sets {
        for (i, v) in values.into_iter().flatten().enumerate() {
            writeln!(out, "{model},{set},{i},{v}").unwrap();
        }
    }
}

fn write_weight_maps(path: &Path, maps: &[WeightMap]) -> Result<()> {
    let first = maps.first().ok_or_else(|| Error::Data("no weight maps".into()))?;
    let (h, w) = (first.map.shape()[0], first.map.shape()[1]);
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        data.extend_from_slice(m.map.data());
    }
    let mut buf = WEIGHT_MAPS_MAGIC.to_vec();
    write_tensor(&mut buf, &Tensor::new(vec![maps.len(), h, w], data)?)?;
    fs::write(path, buf)?;
    Ok(())
}

fn read_weight_maps(path: &Path) -> Result<Vec<WeightMap>> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    expect_magic(&mut r, WEIGHT_MAPS_MAGIC)?;
    let all = read_tensor(&mut r)?;
    if all.rank() != 3 {
        return Err(Error::Format(format!("weight maps must be (N, H, W), got {:?}", all.shape())));
    }
    let (h, w) = (all.shape()[1], all.shape()[2]);
    (0..all.batch())
        .map(|i| {
            let map = Tensor::new(vec![h, w], all.row(i).to_vec())?;
            let mean = map.data().iter().sum::<f64>() / (h * w) as f64;
            Ok(WeightMap { map, mean })
        })
        .collect()
}

fn parse_salient(report: &str, base: &Model) -> Result<SalientSet> {
    let get = |key: &str| {
        report
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
            .ok_or_else(|| Error::Format(format!("saliency report lacks `{key}`")))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?.parse().map_err(|_| Error::Format(format!("saliency report: bad `{key}`")))
    };
    let eligible = eligible_layers(base)?;
    let layers = get("selected")?
        .split(',')
        .map(|name| {
            eligible
                .iter()
                .find(|l| l.name == name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("saliency report names unknown layer `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SalientSet { layers, eta: num("eta")?, achieved_mass_fraction: num("achieved_mass_fraction")? })
}

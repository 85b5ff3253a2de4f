//! Training, evaluation, and prediction drivers.

pub mod checkpoint;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    augment, generate_sample, labels_to_gray, load_split, pnm, rgb_to_image, AugmentConfig,
    LabelMap, SegSample, SyntheticSpec, IGNORE_LABEL,
};
use crate::error::{Error, Result};
use crate::layers::{Fwd, Mode, ParamStore};
use crate::metrics::{csv_header, csv_row, AbsentClassPolicy, ConfusionMatrix};
use crate::network::{compute_loss, AblationFlags, BiCaNet, NetworkConfig, OhemConfig};
use crate::rng::{derive_seed, Rng64};
use crate::tensor::{Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub params: u64,
    pub data: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            params: 1,
            data: 2,
            train: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataConfig {
    pub spec: SyntheticSpec,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        SyntheticDataConfig {
            spec: SyntheticSpec::default(),
            train_count: 200,
            val_count: 50,
        }
    }
}

/// Every knob of the pipeline. The JSON config file mirrors this struct
/// field for field; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    /// Poly horizon and stop iteration; defaults to epochs * steps-per-epoch.
    pub max_iter: Option<u64>,
    pub batch: usize,
    pub lambda: f64,
    pub crop: usize,
    pub classes: usize,
    pub cardinality: usize,
    pub long_k: usize,
    pub widths: [usize; 4],
    pub seeds: Seeds,
    pub ablation: AblationFlags,
    pub ohem: OhemConfig,
    pub epochs: usize,
    pub data_dir: Option<String>,
    pub synthetic: Option<SyntheticDataConfig>,
    pub out_dir: String,
    /// Extra checkpoints every this many iterations; 0 keeps only the final.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Forward passes over the training split after the last optimizer step,
    /// settling the batch-norm running statistics before the final model is
    /// frozen. The EMA lags badly after short aggressive schedules otherwise.
    pub bn_recalibration_passes: usize,
    /// Evaluate and predict with batch statistics instead of the running
    /// averages. At desk scale the batches are tiny, so frozen statistics
    /// misrepresent single samples; the fallback is logged when active.
    pub eval_batch_stats: bool,
    pub scale_range: (f32, f32),
    pub aspect_range: (f32, f32),
    pub hflip: bool,
    pub vflip: bool,
    pub miou_absent_as_zero: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 1e-2,
            momentum: 0.99,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter: None,
            batch: 1,
            lambda: 0.1,
            crop: 64,
            classes: 5,
            cardinality: 3,
            long_k: 5,
            widths: [16, 32, 64, 128],
            seeds: Seeds::default(),
            ablation: AblationFlags::default(),
            ohem: OhemConfig::default(),
            epochs: 200,
            data_dir: None,
            synthetic: Some(SyntheticDataConfig::default()),
            out_dir: "runs/bicanet".into(),
            checkpoint_every: 0,
            log_every: 50,
            bn_recalibration_passes: 1,
            eval_batch_stats: true,
            scale_range: (0.5, 2.0),
            aspect_range: (0.7, 1.5),
            hflip: true,
            vflip: false,
            miou_absent_as_zero: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_base <= 0.0 {
            return Err(Error::Config("lr_base must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.power <= 0.0 {
            return Err(Error::Config("power must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !self.crop.is_multiple_of(32) || self.crop == 0 {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of 32",
                self.crop
            )));
        }
        if self.classes < 2 || self.classes >= IGNORE_LABEL as usize {
            return Err(Error::Config("classes must lie in [2, 255)".into()));
        }
        self.ablation.validate()?;
        if self.data_dir.is_none() && self.synthetic.is_none() {
            return Err(Error::Config(
                "either data_dir or synthetic must be configured".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_config(&self) -> NetworkConfig {
        let mut net = NetworkConfig::new(self.classes, self.crop).with_widths(self.widths);
        net.cardinality = self.cardinality;
        net.long_k = self.long_k;
        net.flags = self.ablation;
        net
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop: self.crop,
            scale_range: self.scale_range,
            aspect_range: self.aspect_range,
            hflip: self.hflip,
            vflip: self.vflip,
        }
    }

    pub fn absent_policy(&self) -> AbsentClassPolicy {
        if self.miou_absent_as_zero {
            AbsentClassPolicy::CountAsZero
        } else {
            AbsentClassPolicy::Exclude
        }
    }

    fn rng_words(&self) -> Vec<u64> {
        vec![self.seeds.params, self.seeds.data, self.seeds.train]
    }
}

pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

/// Load the configured dataset: an on-disk directory takes precedence over
/// the synthetic recipe.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.data_dir {
        let dir = Path::new(dir);
        return Ok(Dataset {
            train: load_split(dir, "train", cfg.classes)?,
            val: load_split(dir, "val", cfg.classes)?,
        });
    }
    let syn = cfg.synthetic.as_ref().expect("validated");
    if syn.spec.classes != cfg.classes {
        return Err(Error::Config(format!(
            "synthetic spec declares {} classes but the model expects {}",
            syn.spec.classes, cfg.classes
        )));
    }
    let mut train = Vec::with_capacity(syn.train_count);
    for i in 0..syn.train_count as u64 {
        train.push(generate_sample(&syn.spec, i)?);
    }
    let mut val = Vec::with_capacity(syn.val_count);
    for i in 0..syn.val_count as u64 {
        val.push(generate_sample(&syn.spec, syn.train_count as u64 + i)?);
    }
    Ok(Dataset { train, val })
}

fn stack_batch(samples: &[SegSample]) -> Result<(Tensor, Vec<u8>)> {
    let (h, w) = samples[0].size();
    let n = samples.len();
    let mut data = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::shape(
                "batch member",
                format!("{h}x{w}"),
                format!("{}x{}", s.size().0, s.size().1),
            ));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels.data);
    }
    Ok((Tensor::new(Shape::new(n, 3, h, w), data)?, labels))
}

/// Argmax over the channel axis, first index on ties.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let mut out = Vec::with_capacity(s.n * s.h * s.w);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut best = logits.at(n, 0, y, x);
                let mut best_c = 0u8;
                for c in 1..s.c {
                    let v = logits.at(n, c, y, x);
                    if v > best {
                        best = v;
                        best_c = c as u8;
                    }
                }
                out.push(best_c);
            }
        }
    }
    out
}

pub struct TrainReport {
    /// Total loss per iteration, in order.
    pub losses: Vec<f64>,
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_resume(cfg, None)
}

pub fn train_with_resume(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let config_json = serde_json::to_string(cfg)?;
    println!("config: {config_json}");

    let dataset = load_dataset(cfg)?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let steps = dataset.train.len().div_ceil(cfg.batch);
    let max_iter = cfg.max_iter.unwrap_or((cfg.epochs * steps) as u64);
    if max_iter == 0 {
        return Err(Error::Config("max_iter resolves to zero".into()));
    }

    let mut store = ParamStore::new();
    let model = BiCaNet::new(&mut store, &cfg.network_config())?;
    let start_iter = match resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            check_resume_config(&config_json, &ckpt.config_json)?;
            checkpoint::apply_to_store(&ckpt, &mut store)?;
            ckpt.iteration
        }
        None => {
            store.initialize(cfg.seeds.params)?;
            0
        }
    };

    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics_rows = vec![csv_header(cfg.classes)];

    let aug_cfg = cfg.augment_config();
    let mut losses = Vec::with_capacity((max_iter - start_iter) as usize);
    let mut epoch_perm: Option<(u64, Vec<usize>)> = None;

    for iter in start_iter..max_iter {
        let epoch = iter / steps as u64;
        let pos = (iter % steps as u64) as usize;
        let perm = match &epoch_perm {
            Some((e, p)) if *e == epoch => p,
            _ => {
                let mut rng = Rng64::new(derive_seed(cfg.seeds.train, epoch));
                epoch_perm = Some((epoch, rng.permutation(dataset.train.len())));
                &epoch_perm.as_ref().unwrap().1
            }
        };
        let lo = pos * cfg.batch;
        let hi = (lo + cfg.batch).min(dataset.train.len());
        let batch: Vec<SegSample> = perm[lo..hi]
            .iter()
            .enumerate()
            .map(|(j, &idx)| {
                let stream = iter * cfg.batch as u64 + j as u64;
                let mut rng = Rng64::new(derive_seed(cfg.seeds.data, stream));
                augment(&dataset.train[idx], &aug_cfg, &mut rng)
            })
            .collect();
        let (images, labels) = stack_batch(&batch)?;

        let mut tape = Tape::new();
        let (total, report, bindings) = {
            let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
            let x = fwd.tape.leaf(images, false);
            let out = model.forward(&mut fwd, x)?;
            let bindings = fwd.bindings();
            drop(fwd);
            let (total, report) =
                compute_loss(&mut tape, out.logits, &out.aux, &labels, cfg.lambda, &cfg.ohem)?;
            (total, report, bindings)
        };
        let grads = tape.backward(total)?;
        for (pid, vid) in &bindings {
            if !store.kind(*pid).learnable() {
                continue;
            }
            match grads.get(*vid) {
                Some(g) => store.set_grad(*pid, g.to_vec()),
                None => return Err(Error::MissingGradient(store.name(*pid).to_string())),
            }
        }
        let lr = optim::poly_lr(cfg.lr_base, iter, max_iter, cfg.power);
        optim::sgd_step(&mut store, lr, cfg.momentum, cfg.weight_decay)?;
        store.clear_grads();
        losses.push(report.total);

        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == max_iter) {
            println!(
                "iter {iter}/{max_iter} epoch {epoch} loss {:.5} (master {:.5}) lr {lr:.6}",
                report.total, report.master
            );
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{:07}.bin", iter + 1));
            checkpoint::save(&path, &store, &config_json, iter + 1, &cfg.rng_words())?;
        }

        // The final epoch's row is written after recalibration below, so the
        // CSV tail always describes the shipped model.
        let epoch_done = pos + 1 == steps && iter + 1 != max_iter;
        if epoch_done && !dataset.val.is_empty() {
            let cm = evaluate_model_with(&model, &mut store, &dataset.val, cfg.crop, eval_mode(cfg))?;
            metrics_rows.push(csv_row(epoch as usize, "val", &cm)?);
            fs::write(&metrics_path, metrics_rows.join("\n") + "\n")?;
        }
    }

    recalibrate_batch_norm(&model, &mut store, &dataset.train, cfg)?;
    if !dataset.val.is_empty() {
        let final_epoch = ((max_iter - 1) / steps as u64) as usize;
        let cm = evaluate_model_with(&model, &mut store, &dataset.val, cfg.crop, eval_mode(cfg))?;
        metrics_rows.push(csv_row(final_epoch, "val", &cm)?);
    }
    fs::write(&metrics_path, metrics_rows.join("\n") + "\n")?;
    let final_path = out_dir.join("ckpt_final.bin");
    checkpoint::save(&final_path, &store, &config_json, max_iter, &cfg.rng_words())?;
    Ok(TrainReport {
        losses,
        iterations: max_iter - start_iter,
        final_checkpoint: final_path,
        metrics_path,
    })
}

/// Train-mode forward passes over the plain training samples; only the
/// batch-norm running statistics change.
fn recalibrate_batch_norm(
    model: &BiCaNet,
    store: &mut ParamStore,
    samples: &[SegSample],
    cfg: &TrainConfig,
) -> Result<()> {
    for _ in 0..cfg.bn_recalibration_passes {
        for chunk in samples.chunks(cfg.batch.max(1)) {
            let padded: Vec<SegSample> = chunk
                .iter()
                .map(|s| {
                    Ok(SegSample {
                        image: pad_reflect(&s.image, cfg.crop, cfg.crop)?,
                        labels: LabelMap::filled(cfg.crop, cfg.crop, 0),
                    })
                })
                .collect::<Result<_>>()?;
            let (images, _) = stack_batch(&padded)?;
            let mut tape = Tape::new();
            let mut fwd = Fwd::new(&mut tape, store, Mode::Train);
            let x = fwd.tape.leaf(images, false);
            model.forward(&mut fwd, x)?;
        }
    }
    Ok(())
}

/// Compare the resume config against the checkpoint snapshot, ignoring the
/// output directory. Any other difference refuses with a field-level diff.
fn check_resume_config(current: &str, saved: &str) -> Result<()> {
    let mut a: serde_json::Value = serde_json::from_str(current)?;
    let mut b: serde_json::Value = serde_json::from_str(saved)?;
    for v in [&mut a, &mut b] {
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
    }
    if a == b {
        return Ok(());
    }
    let mut diffs = Vec::new();
    if let (Some(ma), Some(mb)) = (a.as_object(), b.as_object()) {
        for (key, va) in ma {
            match mb.get(key) {
                Some(vb) if va == vb => {}
                Some(vb) => diffs.push(format!("{key}: {vb} -> {va}")),
                None => diffs.push(format!("{key}: missing in checkpoint")),
            }
        }
        for key in mb.keys() {
            if !ma.contains_key(key) {
                diffs.push(format!("{key}: missing in current config"));
            }
        }
    }
    Err(Error::Checkpoint(format!(
        "config mismatch on resume: {}",
        diffs.join("; ")
    )))
}

/// Run the frozen model over samples, accumulating a confusion matrix.
/// Samples smaller than the training crop are reflect-padded and the output
/// cropped back; larger samples are rejected.
pub fn evaluate_model(
    model: &BiCaNet,
    store: &mut ParamStore,
    samples: &[SegSample],
    crop: usize,
) -> Result<ConfusionMatrix> {
    evaluate_model_with(model, store, samples, crop, Mode::EvalBatchStats)
}

pub fn evaluate_model_with(
    model: &BiCaNet,
    store: &mut ParamStore,
    samples: &[SegSample],
    crop: usize,
    mode: Mode,
) -> Result<ConfusionMatrix> {
    let classes = model.config().classes;
    let mut cm = ConfusionMatrix::new(classes);
    for sample in samples {
        let (h, w) = sample.size();
        let padded = pad_reflect(&sample.image, crop, crop)?;
        let mut tape = Tape::new();
        let mut fwd = Fwd::new(&mut tape, store, mode);
        let x = fwd.tape.leaf(padded, false);
        let out = model.forward(&mut fwd, x)?;
        let logits = tape.value(out.logits);
        let pred_full = argmax_labels(logits);
        // Crop the prediction back to the sample extent.
        let mut pred = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                pred.push(pred_full[y * crop + x]);
            }
        }
        cm.accumulate(&pred, &sample.labels.data)?;
    }
    Ok(cm)
}

fn eval_mode(cfg: &TrainConfig) -> Mode {
    if cfg.eval_batch_stats {
        Mode::EvalBatchStats
    } else {
        Mode::Eval
    }
}

/// Reflect-pad an image up to (th, tw). Errors when the image is larger.
pub fn pad_reflect(image: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.h > th || s.w > tw {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} exceeds the model resolution {th}x{tw}; retrain with a larger crop",
            s.h, s.w
        )));
    }
    if (s.h, s.w) == (th, tw) {
        return Ok(image.clone());
    }
    let reflect = |mut i: isize, len: usize| -> usize {
        let len = len as isize;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= len {
                i = 2 * len - 2 - i;
            } else {
                return i as usize;
            }
        }
    };
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c, th, tw),
        |n, c, y, x| {
            let sy = reflect(y as isize, s.h);
            let sx = reflect(x as isize, s.w);
            image.at(n, c, sy, sx)
        },
    ))
}

/// Restore a checkpoint into a freshly built model.
pub fn load_model(ckpt_path: &Path) -> Result<(TrainConfig, BiCaNet, ParamStore)> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg: TrainConfig = serde_json::from_str(&ckpt.config_json)?;
    let mut store = ParamStore::new();
    let model = BiCaNet::new(&mut store, &cfg.network_config())?;
    checkpoint::apply_to_store(&ckpt, &mut store)?;
    Ok((cfg, model, store))
}

/// Evaluate a checkpoint on a named split and return the metrics CSV text.
pub fn evaluate(ckpt_path: &Path, split: &str, data_dir: Option<&Path>) -> Result<String> {
    let (mut cfg, model, mut store) = load_model(ckpt_path)?;
    if let Some(dir) = data_dir {
        cfg.data_dir = Some(dir.to_string_lossy().into_owned());
    }
    let dataset = load_dataset(&cfg)?;
    let samples = match split {
        "train" => &dataset.train,
        "val" => &dataset.val,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train or val)"
            )))
        }
    };
    if cfg.eval_batch_stats {
        eprintln!("note: evaluating with batch statistics (small-batch fallback)");
    }
    let cm = evaluate_model_with(&model, &mut store, samples, cfg.crop, eval_mode(&cfg))?;
    Ok(format!(
        "{}\n{}\n",
        csv_header(cfg.classes),
        csv_row(0, split, &cm)?
    ))
}

/// Segment one PPM image: writes `<stem>_labels.pgm` (raw argmax classes)
/// and `<stem>_color.ppm` (palette-coded) into `out_dir`.
pub fn predict(ckpt_path: &Path, image_path: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (cfg, model, mut store) = load_model(ckpt_path)?;
    let rgb = pnm::read_ppm(image_path)?;
    let image = rgb_to_image(&rgb);
    let (h, w) = (rgb.h, rgb.w);
    if h % 32 != 0 || w % 32 != 0 {
        eprintln!(
            "note: image {h}x{w} is not divisible by 32; padding reflectively and cropping \
             the prediction back"
        );
    }
    let padded = pad_reflect(&image, cfg.crop, cfg.crop)?;

    let mut tape = Tape::new();
    let mut fwd = Fwd::new(&mut tape, &mut store, eval_mode(&cfg));
    let x = fwd.tape.leaf(padded, false);
    let out = model.forward(&mut fwd, x)?;
    let pred_full = argmax_labels(tape.value(out.logits));
    let mut labels = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            labels.set(y, x, pred_full[y * cfg.crop + x]);
        }
    }

    fs::create_dir_all(out_dir)?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prediction".into());
    let gray = labels_to_gray(&labels);
    let label_path = out_dir.join(format!("{stem}_labels.pgm"));
    let color_path = out_dir.join(format!("{stem}_color.ppm"));
    pnm::write_pgm(&label_path, &gray)?;
    pnm::write_ppm(&color_path, &pnm::colorize(&gray))?;
    Ok((label_path, color_path))
}

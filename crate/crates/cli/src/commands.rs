use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use tightbox_core::dataset::synth::{synth_generate, synth_sequence, Background};
use tightbox_core::dataset::{
    cityscapes_class_name, fit_error_model, load_image, load_labels, mask_to_instances, match_prelabels,
    save_labels, scan_images, DatasetError, ImageSet, InstanceMask, LabelSource, LabeledInstance,
};
use tightbox_core::evaluation::{evaluate, report_render, EvalConfig};
use tightbox_core::geometry::{BBox, EdgeErrorModel};
use tightbox_core::interp::{interpolate_track, refine_track, Keyframe, TrackBox, TrackSequence};
use tightbox_core::model::{load_checkpoint, refine_many, save_checkpoint, Checkpoint, Regressor, TruthEcho};
use tightbox_core::training::{finetune, train, TrainConfig};
use tightbox_service::{AppState, ImageCatalog, LabelStore};

use crate::args::*;
use crate::manifest::RunManifest;
use crate::CliError;

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Refine(a) => refine_cmd(a),
        Command::TrackInterp(a) => track(a),
        Command::Serve(a) => serve(a),
    }
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Validation(message.into())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_value(path: &Path) -> Result<Value, CliError> {
    require(path, "file")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` overlaid with the config file, if any.
fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T, CliError> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    if let Some(path) = file {
        merge(&mut value, read_value(path)?);
        return serde_json::from_value(value).map_err(|e| invalid(format!("{}: {e}", path.display())));
    }
    Ok(serde_json::from_value(value).expect("config round trips"))
}

fn load_error_model(path: &Path) -> Result<EdgeErrorModel, CliError> {
    let v = read_value(path)?;
    let inner = v.get("error_model").cloned().unwrap_or(v);
    let m: EdgeErrorModel = serde_json::from_value(inner).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    m.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(m)
}

fn load_instances(path: &Path, include_hidden: bool) -> Result<Vec<LabeledInstance>, CliError> {
    require(path, "label file")?;
    let mut labels = load_labels(path)?;
    if !include_hidden {
        labels.retain(|l| l.visible);
    }
    Ok(labels)
}

fn regressor(ck: Checkpoint, truth: &[LabeledInstance]) -> Result<Arc<dyn Regressor>, CliError> {
    if let Some(model) = ck.model {
        return Ok(Arc::new(model));
    }
    let mut echo = TruthEcho::new(ck.meta.input_size);
    let mut n = 0;
    for inst in truth {
        if let Some(b) = inst.true_box {
            echo.insert(inst.image_id.clone(), b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("a truth-echo checkpoint needs true boxes (pass --truth)"));
    }
    Ok(Arc::new(echo))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let background: Background = a.background.parse().map_err(invalid)?;
    if a.width < 16 || a.height < 16 {
        return Err(invalid("width and height must be at least 16"));
    }
    if a.key_interval == 0 {
        return Err(invalid("key_interval must be >= 1"));
    }
    create_dir(&a.out)?;
    let images_dir = a.out.join("images");
    let mut m = RunManifest::start("synth");
    m.seed = Some(a.seed);
    m.config(&json!({
        "n": a.n, "seed": a.seed, "width": a.width, "height": a.height,
        "background": a.background, "frames": a.frames, "key_interval": a.key_interval,
    }));
    if let Some(frames) = a.frames {
        if frames < 2 {
            return Err(invalid("a sequence needs at least 2 frames"));
        }
        let seq = synth_sequence(a.seed, frames, a.width, a.height, background);
        let set: ImageSet = seq.iter().map(|(img, _)| img.clone()).collect();
        set.save_dir(&images_dir)?;
        let truth: Vec<LabeledInstance> = seq
            .iter()
            .map(|(img, b)| LabeledInstance::ground_truth(img.id.clone(), "person", *b))
            .collect();
        let truth_path = a.out.join("truth.jsonl");
        save_labels(&truth_path, &truth)?;
        let keys = (0..frames)
            .step_by(a.key_interval)
            .map(|f| Keyframe { frame: f, bbox: seq[f].1 })
            .collect();
        let track = TrackSequence::new("synth", a.key_interval, keys)?;
        let track_path = a.out.join("track.json");
        track.save(&track_path)?;
        m.output("images", &images_dir).output("truth", &truth_path).output("track", &track_path);
    } else {
        let items = synth_generate(a.n, a.seed, a.width, a.height, background);
        let set: ImageSet = items.iter().map(|(img, _)| img.clone()).collect();
        set.save_dir(&images_dir)?;
        let labels: Vec<LabeledInstance> = items.into_iter().map(|(_, l)| l).collect();
        let labels_path = a.out.join("labels.jsonl");
        save_labels(&labels_path, &labels)?;
        m.output("images", &images_dir).output("labels", &labels_path);
    }
    m.finish(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn matching_image(images: &Path, mask_id: &str) -> Option<String> {
    let stem_swapped = mask_id.replace("_gtFine_instanceIds", "_leftImg8bit");
    let mut candidates = vec![mask_id.to_string(), stem_swapped.clone()];
    for base in [mask_id, stem_swapped.as_str()] {
        if let Some(stem) = base.strip_suffix(".png") {
            candidates.push(format!("{stem}.jpg"));
            candidates.push(format!("{stem}.jpeg"));
        }
    }
    candidates.into_iter().find(|c| images.join(c).is_file())
}

fn extract(a: ExtractArgs) -> Result<(), CliError> {
    require(&a.masks, "mask directory")?;
    require(&a.images, "image directory")?;
    create_dir(&a.out)?;
    let mut labels = Vec::new();
    for (mask_id, path) in scan_images(&a.masks)? {
        let image_id = matching_image(&a.images, &mask_id)
            .ok_or_else(|| CliError::from(DatasetError::MissingImage(mask_id.clone())))?;
        let mask = InstanceMask::load_png(&path)?;
        let image_path = a.images.join(&image_id);
        let (w, h) = image::image_dimensions(&image_path).map_err(|source| DatasetError::Image {
            path: image_path.clone(),
            source,
        })?;
        if (w as usize, h as usize) != (mask.width(), mask.height()) {
            return Err(DatasetError::DimensionMismatch {
                mask_w: mask.width() as u32,
                mask_h: mask.height() as u32,
                image_w: w,
                image_h: h,
            }
            .into());
        }
        for (id, b) in mask_to_instances(&mask, a.min_pixels) {
            let class = cityscapes_class_name(id);
            if a.class.as_ref().is_none_or(|c| *c == class) {
                labels.push(LabeledInstance::ground_truth(image_id.clone(), class, b));
            }
        }
    }
    let out = a.out.join("labels.jsonl");
    save_labels(&out, &labels)?;
    let mut m = RunManifest::start("extract");
    m.config(&json!({"min_pixels": a.min_pixels, "class": a.class}))
        .input("masks", &a.masks)
        .input("images", &a.images)
        .output("labels", &out);
    m.finish(&a.out)?;
    println!("extracted {} instances", labels.len());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<(), CliError> {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(invalid("iou must lie in (0, 1]"));
    }
    let gt = load_instances(&a.gt, true)?;
    let pre = load_instances(&a.pre, true)?;
    let mut by_image: BTreeMap<&str, (Vec<&LabeledInstance>, Vec<BBox>)> = BTreeMap::new();
    for g in gt.iter().filter(|g| g.true_box.is_some()) {
        by_image.entry(&g.image_id).or_default().0.push(g);
    }
    for p in &pre {
        if let Some(b) = p.prelabel_box.or(p.true_box) {
            by_image.entry(&p.image_id).or_default().1.push(b);
        }
    }
    let mut pairs = Vec::new();
    let mut matched = Vec::new();
    for (gts, pres) in by_image.values() {
        let truths: Vec<BBox> = gts.iter().filter_map(|g| g.true_box).collect();
        for (gi, pi) in match_prelabels(&truths, pres, a.iou) {
            pairs.push((truths[gi], pres[pi]));
            matched.push((*gts[gi]).clone().with_prelabel(pres[pi]));
        }
    }
    let model = fit_error_model(&pairs)?;
    create_dir(&a.out)?;
    let model_path = a.out.join("error_model.json");
    write_json(
        &model_path,
        &json!({
            "error_model": model,
            "n_pairs": pairs.len(),
            "n_gt": gt.len(),
            "n_pre": pre.len(),
            "iou_threshold": a.iou,
        }),
    )?;
    let matched_path = a.out.join("matched.jsonl");
    save_labels(&matched_path, &matched)?;
    let mut m = RunManifest::start("stats");
    m.config(&json!({"iou": a.iou}))
        .input("gt", &a.gt)
        .input("pre", &a.pre)
        .output("error_model", &model_path)
        .output("matched", &matched_path);
    m.finish(&a.out)?;
    println!(
        "{} pairs: sigma_vertical {:.4}, sigma_horizontal {:.4}",
        pairs.len(),
        model.sigma_vertical,
        model.sigma_horizontal
    );
    Ok(())
}

fn resolve_train(base: &TrainConfig, o: &TrainOverrides) -> Result<TrainConfig, CliError> {
    let mut c = layered(base, o.config.as_deref())?;
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = &o.optimizer {
        c.optimizer = v.parse()?;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.fraction {
        c.data_fraction = v;
    }
    if let Some(v) = o.error_scale {
        c.error_scale = v;
    }
    if let Some(v) = o.validation_fraction {
        c.validation_fraction = v;
    }
    if let Some(v) = &o.backbone {
        c.backbone = v.parse()?;
    }
    if let Some(v) = o.patch_size {
        c.sample.patch_size = v;
    }
    if let Some(v) = o.expand_ratio {
        c.sample.expand_ratio = v;
    }
    if let Some(p) = &o.error_model {
        c.sample.error_model = load_error_model(p)?;
    }
    if let Some(v) = o.huber_delta {
        c.loss.huber_delta = v;
    }
    if let Some(v) = o.horizontal_flip {
        c.horizontal_flip = v;
    }
    c.validate()?;
    Ok(c)
}

fn run_training(
    name: &str,
    a: &TrainArgs,
    cfg: &TrainConfig,
    start: Option<tightbox_core::model::RefinementModel>,
    checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    require(&a.images, "image directory")?;
    let instances = load_instances(&a.labels, a.include_hidden)?;
    let images = ImageSet::load_for(&a.images, &instances)?;
    let (model, history) = match start {
        Some(m) => finetune(m, &instances, &images, cfg)?,
        None => train(&instances, &images, cfg)?,
    };
    create_dir(&a.out)?;
    save_checkpoint(&a.out, &model, &cfg.sample)?;
    let history_path = a.out.join("history.json");
    history.save(&history_path)?;
    let config_path = a.out.join("config.json");
    write_json(&config_path, cfg)?;
    let mut m = RunManifest::start(name);
    m.seed = Some(cfg.seed);
    m.config(cfg)
        .input("labels", &a.labels)
        .input("images", &a.images)
        .output("checkpoint_json", &a.out.join("checkpoint.json"))
        .output("checkpoint_bin", &a.out.join("checkpoint.bin"))
        .output("history", &history_path)
        .output("config", &config_path);
    if let Some(c) = checkpoint {
        m.input("checkpoint", c);
    }
    m.finish(&a.out)?;
    for (e, loss) in history.loss.iter().enumerate() {
        let val = history.val_mae_le[e].map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        println!("epoch {:>3}  loss {loss:.6}  val MAE/LE {val}  {:.1}s", e + 1, history.seconds[e]);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train(&TrainConfig::default(), &a.settings)?;
    run_training("train", &a, &cfg, None, None)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<(), CliError> {
    let ck = open_checkpoint(&a.checkpoint)?;
    let Some(model) = ck.model else {
        return Err(invalid("a truth-echo checkpoint has no weights to fine-tune"));
    };
    let base = TrainConfig {
        sample: ck.meta.sample_config(),
        backbone: model.backbone(),
        ..TrainConfig::default()
    };
    let cfg = resolve_train(&base, &a.train.settings)?;
    run_training("finetune", &a.train, &cfg, Some(model), Some(&a.checkpoint))
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    require(&a.images, "image directory")?;
    let instances = load_instances(&a.labels, a.include_hidden)?;
    let ck = open_checkpoint(&a.checkpoint)?;
    let sample = ck.meta.sample_config();
    let mut cfg = layered(&EvalConfig::default(), a.config.as_deref())?;
    if let Some(s) = &a.scenario {
        cfg.scenario = s.parse()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = &a.tolerances {
        cfg.tolerances = t.clone();
    }
    if let Some(p) = &a.error_model {
        cfg.error_model = load_error_model(p)?;
    }
    if let Some(n) = &a.normalization {
        cfg.normalization = serde_json::from_value(Value::String(n.clone()))
            .map_err(|_| invalid(format!("unknown normalization {n:?} (per_box|pooled)")))?;
    }
    cfg.validate()?;
    let model = regressor(ck, &instances)?;
    let images = ImageSet::load_for(&a.images, &instances)?;
    let report = evaluate(model.as_ref(), &instances, &images, &sample, &cfg)?;
    let (text, json_text) = report_render(&report);
    create_dir(&a.out)?;
    let json_path = a.out.join("report.json");
    let text_path = a.out.join("report.txt");
    std::fs::write(&json_path, json_text).map_err(|e| CliError::io(&json_path, e))?;
    std::fs::write(&text_path, &text).map_err(|e| CliError::io(&text_path, e))?;
    let mut m = RunManifest::start("eval");
    m.seed = Some(cfg.seed);
    m.config(&json!({"eval": cfg, "sample": sample}))
        .input("checkpoint", &a.checkpoint)
        .input("labels", &a.labels)
        .input("images", &a.images)
        .output("report_json", &json_path)
        .output("report_text", &text_path);
    m.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> Result<(), CliError> {
    require(&a.images, "image directory")?;
    let instances = load_instances(&a.labels, true)?;
    let truth = match &a.truth {
        Some(p) => load_instances(p, true)?,
        None => Vec::new(),
    };
    let ck = open_checkpoint(&a.checkpoint)?;
    let sample = ck.meta.sample_config();
    let model = regressor(ck, &truth)?;
    let images = ImageSet::load_for(&a.images, &instances)?;
    let mut items = Vec::with_capacity(instances.len());
    for inst in &instances {
        let rough = inst
            .prelabel_box
            .or(inst.true_box)
            .ok_or_else(|| invalid(format!("instance on {} has no box", inst.image_id)))?;
        items.push((images.get(&inst.image_id)?, rough));
    }
    let refined = refine_many(model.as_ref(), &items, &sample, 32)?;
    let mut failures = 0;
    let out_labels: Vec<LabeledInstance> = instances
        .iter()
        .zip(refined)
        .map(|(inst, r)| match r {
            Ok(b) => LabeledInstance {
                prelabel_box: Some(b),
                source: LabelSource::Model,
                ..inst.clone()
            },
            Err(_) => {
                failures += 1;
                inst.clone()
            }
        })
        .collect();
    create_dir(&a.out)?;
    let out = a.out.join("labels.jsonl");
    save_labels(&out, &out_labels)?;
    let mut m = RunManifest::start("refine");
    m.config(&json!({"sample": sample, "failures": failures}))
        .input("checkpoint", &a.checkpoint)
        .input("labels", &a.labels)
        .input("images", &a.images)
        .output("labels", &out);
    m.finish(&a.out)?;
    println!("refined {} boxes ({failures} kept unchanged)", instances.len() - failures);
    Ok(())
}

fn track(a: TrackArgs) -> Result<(), CliError> {
    require(&a.track, "track file")?;
    require(&a.images, "image directory")?;
    let seq = TrackSequence::load(&a.track)?;
    let frames = scan_images(&a.images)?;
    let frame_id = |f: usize| -> Result<&(String, PathBuf), CliError> {
        frames.get(f).ok_or_else(|| invalid(format!("no image for frame {f}")))
    };
    let boxes: Vec<TrackBox> = match &a.checkpoint {
        Some(ck_path) => {
            let ck = open_checkpoint(ck_path)?;
            let sample = ck.meta.sample_config();
            let truth = match &a.truth {
                Some(p) => load_instances(p, true)?,
                None => Vec::new(),
            };
            let model = regressor(ck, &truth)?;
            let mut images = BTreeMap::new();
            for f in seq.first_frame()..=seq.last_frame() {
                if !seq.is_keyframe(f) {
                    let (id, path) = frame_id(f)?;
                    images.insert(f, load_image(id.clone(), path)?);
                }
            }
            refine_track(model.as_ref(), &images, &seq, &sample)?
        }
        None => interpolate_track(&seq)
            .into_iter()
            .map(|(frame, bbox)| TrackBox {
                frame,
                bbox,
                source: if seq.is_keyframe(frame) { LabelSource::Human } else { LabelSource::Tracker },
            })
            .collect(),
    };
    create_dir(&a.out)?;
    let out = a.out.join("track_labels.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out).map_err(|e| CliError::io(&out, e))?);
    for b in &boxes {
        let line = json!({
            "track_id": seq.track_id,
            "frame": b.frame,
            "image": frame_id(b.frame)?.0,
            "box": b.bbox,
            "source": b.source,
        });
        writeln!(file, "{line}").map_err(|e| CliError::io(&out, e))?;
    }
    file.flush().map_err(|e| CliError::io(&out, e))?;
    drop(file);
    let mut m = RunManifest::start("track-interp");
    m.config(&json!({"track_id": seq.track_id, "key_interval": seq.key_interval}))
        .input("track", &a.track)
        .input("images", &a.images)
        .output("track_labels", &out);
    if let Some(c) = &a.checkpoint {
        m.input("checkpoint", c);
    }
    m.finish(&a.out)?;
    println!("wrote {} frames", boxes.len());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    require(&a.data, "data directory")?;
    let ck = open_checkpoint(&a.checkpoint)?;
    let truth = match &a.truth {
        Some(p) => load_instances(p, true)?,
        None => Vec::new(),
    };
    let meta = ck.meta.clone();
    let model = regressor(ck, &truth)?;
    let labels_path = a.labels.clone().unwrap_or_else(|| a.data.join("labels.jsonl"));
    let catalog = ImageCatalog::scan(&a.data)?;
    let store = LabelStore::open(&labels_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| invalid(format!("bad listen address: {e}")))?;
    let state = Arc::new(AppState::with_queue_depth(catalog, store, a.queue_depth));
    state.install_model(model, meta.clone());

    let mut m = RunManifest::start("serve");
    m.config(&json!({"address": addr.to_string(), "queue_depth": a.queue_depth, "model": meta}))
        .input("checkpoint", &a.checkpoint)
        .input("data", &a.data)
        .input("labels", &labels_path);
    let manifest_dir = labels_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    m.finish(manifest_dir)?;

    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .try_init();
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(tightbox_service::serve(state, addr))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
}

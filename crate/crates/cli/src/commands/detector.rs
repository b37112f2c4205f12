use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cyclodet_core::augment::Sample;
use cyclodet_core::detector::train::write_loss_csv;
use cyclodet_core::detector::{infer, load_model, DetectorError, SampleSource, Trainer};
use cyclodet_core::eval::{evaluate, mean_ap, write_curves, write_report, GroundTruth, Interpolation, ScoredBox};
use cyclodet_core::fsio::{write_atomic, write_atomic_bytes};
use cyclodet_core::grid::load_png;
use cyclodet_core::labelstore::{import_dataset, AnnotationRecord, FrameEntry, Split};
use cyclodet_core::raster::Raster;
use cyclodet_core::{BoundingBox, StageClass};

use super::{ensure_parent, write_jsonl};
use crate::args::{EvalArgs, TrainArgs};
use crate::config::Context;
use crate::{usage, Failure, Summary};

/// Frames of an exported dataset, decoded on demand.
struct DatasetFrames {
    dir: PathBuf,
    entries: Vec<FrameEntry>,
}

impl DatasetFrames {
    fn open(dir: &Path, keep: impl Fn(Split) -> bool) -> anyhow::Result<Self> {
        let manifest = import_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
        let entries: Vec<FrameEntry> = manifest.entries.into_iter().filter(|e| keep(e.split)).collect();
        Ok(Self { dir: dir.to_path_buf(), entries })
    }

    fn image(&self, entry: &FrameEntry) -> Result<Raster, DetectorError> {
        let path = self.dir.join(entry.image_path());
        let img = load_png(&path).map_err(|e| DetectorError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
        Ok(Raster::from_gray(&img))
    }
}

impl SampleSource for DatasetFrames {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample(&self, index: usize) -> Result<Sample, DetectorError> {
        let entry = &self.entries[index];
        Ok(Sample { image: self.image(entry)?, boxes: entry.boxes.clone() })
    }
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<Summary, Failure> {
    let mut config = ctx.cfg.train_config();
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    config.validate().map_err(|e| usage(format!("train: {e}")))?;
    let out = args.out.clone().unwrap_or_else(|| ctx.layout.model());
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| ctx.layout.loss_trace());

    let data = DatasetFrames::open(&args.data, |s| s == Split::Train)?;
    if data.entries.is_empty() {
        return Err(anyhow::anyhow!("{} has no training frames", args.data.display()).into());
    }
    let mut trainer = if args.resume {
        let mut t = Trainer::load_checkpoint(&out).with_context(|| format!("resuming from {}", out.display()))?;
        t.set_iterations(config.iterations);
        t
    } else {
        Trainer::new(ctx.cfg.model.clone(), config).map_err(|e| usage(format!("model: {e}")))?
    };
    let start = trainer.iteration();
    let trace = trainer.run(&data).context("training")?;
    ensure_parent(&out)?;
    trainer.save_checkpoint(&out).with_context(|| format!("writing {}", out.display()))?;

    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &trace).context("loss trace")?;
    if args.resume && loss_path.exists() {
        let mut previous = std::fs::read(&loss_path).with_context(|| format!("reading {}", loss_path.display()))?;
        let body = csv.iter().position(|&b| b == b'\n').map_or(&csv[..0], |i| &csv[i + 1..]);
        previous.extend_from_slice(body);
        csv = previous;
    }
    ensure_parent(&loss_path)?;
    write_atomic_bytes(&loss_path, &csv).with_context(|| format!("writing {}", loss_path.display()))?;

    let last = trace.last().map(|r| r.total);
    Ok(Summary {
        text: format!(
            "trained iterations {}..{} on {} frames; final loss {}; model at {}",
            start,
            trainer.iteration(),
            data.entries.len(),
            last.map_or("n/a".into(), |l| format!("{l:.4}")),
            out.display()
        ),
        json: json!({
            "start_iteration": start,
            "iterations": trainer.iteration(),
            "frames": data.entries.len(),
            "final_loss": last,
            "model": out,
        }),
    })
}

/// One detection line, as read by `--pred` and written by `--detections`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    image: u32,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    stage: StageClass,
    score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TruthLine {
    Box {
        image: u32,
        #[serde(rename = "box")]
        bbox: BoundingBox,
        stage: StageClass,
    },
    Frame(AnnotationRecord),
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn truth_from(lines: Vec<TruthLine>) -> anyhow::Result<Vec<GroundTruth>> {
    let mut gts = Vec::new();
    for line in lines {
        match line {
            TruthLine::Box { image, bbox, stage } => gts.push(GroundTruth { image, bbox, stage }),
            TruthLine::Frame(record) => {
                let entry = FrameEntry::try_from(record).map_err(|e| anyhow::anyhow!("annotation record: {e}"))?;
                gts.extend(entry.boxes.iter().map(|b| GroundTruth { image: entry.frame, bbox: b.bbox, stage: b.stage }));
            }
        }
    }
    Ok(gts)
}

fn truth_of(entries: &[FrameEntry]) -> Vec<GroundTruth> {
    entries
        .iter()
        .flat_map(|e| e.boxes.iter().map(|b| GroundTruth { image: e.frame, bbox: b.bbox, stage: b.stage }))
        .collect()
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<Summary, Failure> {
    let iou = args.iou.unwrap_or(ctx.cfg.eval.iou_threshold);
    if !(0.0..=1.0).contains(&iou) {
        return Err(usage("--iou must lie in [0, 1]"));
    }
    let mode: Interpolation = args.interpolation.map_or(ctx.cfg.eval.interpolation, Into::into);

    let (dets, gts) = match (&args.pred, &args.gt, &args.data) {
        (Some(pred), Some(gt), None) => {
            let dets = read_jsonl::<DetectionLine>(pred)?
                .into_iter()
                .map(|d| ScoredBox { image: d.image, bbox: d.bbox, stage: d.stage, score: d.score })
                .collect();
            (dets, truth_from(read_jsonl(gt)?)?)
        }
        (None, None, Some(dir)) => {
            let frames = DatasetFrames::open(dir, |s| args.split.admits(s))?;
            if frames.entries.is_empty() {
                return Err(anyhow::anyhow!("{} has no frames in the chosen split", dir.display()).into());
            }
            let model_path = args.model.clone().unwrap_or_else(|| ctx.layout.model());
            let model = load_model(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
            let size = model.config().input_size;
            let cfg = ctx.cfg.eval_infer_config();
            let mut dets = Vec::new();
            for e in &frames.entries {
                let mut img = frames.image(e).with_context(|| format!("frame {}", e.frame))?;
                if img.width() != size || img.height() != size {
                    img = img.resize_bilinear(size, size);
                }
                let found = infer(&model, &img, &cfg).with_context(|| format!("frame {}", e.frame))?;
                dets.extend(found.into_iter().map(|d| ScoredBox { image: e.frame, bbox: d.bbox, stage: d.stage, score: d.score }));
            }
            if let Some(path) = &args.detections {
                let lines = dets.iter().map(|d| DetectionLine { image: d.image, bbox: d.bbox, stage: d.stage, score: d.score });
                write_jsonl(path, lines)?;
            }
            (dets, truth_of(&frames.entries))
        }
        _ => return Err(usage("pass either --pred with --gt, or --data")),
    };

    let results = evaluate(&dets, &gts, iou, mode);
    let map = mean_ap(&results).context("scoring")?;
    if let Some(path) = &args.report {
        ensure_parent(path)?;
        write_atomic(path, |w| write_report(w, &results, iou, mode).map_err(std::io::Error::other))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.curves {
        ensure_parent(path)?;
        write_atomic(path, |w| write_curves(w, &results).map_err(std::io::Error::other))
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let mut text: Vec<String> = results
        .iter()
        .map(|r| format!("{:<10} AP {:.4}  ({} gt, {} det)", r.stage.name(), r.ap, r.curve.num_gt, r.num_det))
        .collect();
    text.push(format!("mAP {map:.4} at IoU {iou}, {} interpolation", mode.name()));
    let classes: Vec<_> = results
        .iter()
        .map(|r| json!({ "stage": r.stage, "ap": r.ap, "num_gt": r.curve.num_gt, "num_det": r.num_det }))
        .collect();
    Ok(Summary {
        text: text.join("\n"),
        json: json!({ "iou_threshold": iou, "interpolation": mode, "classes": classes, "map": map }),
    })
}

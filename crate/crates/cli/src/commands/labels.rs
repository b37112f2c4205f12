use anyhow::Context as _;
use serde_json::json;

use cyclodet_core::grid::FieldKind;
use cyclodet_core::labelstore::{export_dataset, Annotation, LabelStore, Split, TtrDirectory};
use cyclodet_core::project::{build_manifest, SplitAssignment};

use crate::args::{ExportArgs, SplitArgs};
use crate::config::Context;
use crate::{usage, Failure, Summary};

fn annotations(ctx: &Context) -> anyhow::Result<Vec<Annotation>> {
    let path = ctx.layout.journal();
    anyhow::ensure!(path.exists(), "no annotation journal at {}", path.display());
    Ok(LabelStore::open(&path).with_context(|| format!("opening {}", path.display()))?.list())
}

/// Splits every consensus frame afresh and freezes the result.
pub fn split(ctx: &Context, args: &SplitArgs) -> Result<Summary, Failure> {
    let ratio = args.ratio.unwrap_or(ctx.cfg.labels.test_ratio);
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(usage("--ratio must lie strictly between 0 and 1"));
    }
    let seed = ctx.cfg.labels.split_seed;
    let (manifest, skipped) = build_manifest(&annotations(ctx)?, None, ratio, seed).context("splitting")?;
    ctx.layout
        .write_splits(&SplitAssignment::from(&manifest))
        .with_context(|| format!("writing {}", ctx.layout.splits().display()))?;
    let (train, test) = (manifest.frame_count(Split::Train), manifest.frame_count(Split::Test));
    Ok(Summary {
        text: format!("{train} train and {test} test frames (seed {seed}); {} annotations not at consensus", skipped.len()),
        json: json!({ "train": train, "test": test, "seed": seed, "ratio": ratio, "skipped_annotations": skipped.len() }),
    })
}

/// Consensus frames keep their frozen split; frames added since are split with the config.
pub fn export(ctx: &Context, args: &ExportArgs) -> Result<Summary, Failure> {
    let fixed = ctx.layout.read_splits().with_context(|| format!("reading {}", ctx.layout.splits().display()))?;
    let labels = &ctx.cfg.labels;
    let (mut manifest, skipped) = build_manifest(&annotations(ctx)?, fixed.as_ref(), labels.test_ratio, labels.split_seed).context("building the dataset")?;
    manifest.entries.retain(|e| args.split.admits(e.split));
    let images = TtrDirectory::new(ctx.layout.grid_dir(FieldKind::Ttr));
    let summary = export_dataset(&manifest, &images, &args.out).with_context(|| format!("exporting to {}", args.out.display()))?;
    Ok(Summary {
        text: format!(
            "{} frames with {} boxes written to {}; {} annotations not at consensus",
            summary.images,
            summary.boxes,
            args.out.display(),
            skipped.len()
        ),
        json: json!({ "frames": summary.images, "boxes": summary.boxes, "skipped_annotations": skipped.len() }),
    })
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _};
use serde_json::json;

use cyclodet_core::fsio::write_atomic_bytes;
use cyclodet_core::grid::{encode_png, load_grid, peek_kind, render_image, FieldKind, FrameSeries, GeoGrid, STEP_SECONDS};
use cyclodet_core::project::FrameInfo;

use crate::args::IngestArgs;
use crate::config::Context;
use crate::{Failure, Summary};

const KINDS: [FieldKind; 3] = [FieldKind::Ttr, FieldKind::Mslp, FieldKind::Vorticity];

fn kind_name(kind: FieldKind) -> &'static str {
    match kind {
        FieldKind::Ttr => "ttr",
        FieldKind::Mslp => "mslp",
        FieldKind::Vorticity => "vorticity",
    }
}

fn expand_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("reading {}", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|p| p.extension().is_some_and(|x| x == "etcg"));
            found.sort();
            files.extend(found);
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            bail!("input {} does not exist", input.display());
        }
    }
    ensure!(!files.is_empty(), "no .etcg files among the inputs");
    Ok(files)
}

struct Loaded {
    source: PathBuf,
    grid: GeoGrid,
}

/// Frames are numbered by timestamp across all field kinds, which must form one gapless
/// six-hourly sequence. The MSLP frames alone must also be gapless.
pub fn ingest(ctx: &Context, args: &IngestArgs) -> Result<Summary, Failure> {
    let files = expand_inputs(&args.inputs)?;
    let mut by_kind: BTreeMap<u8, BTreeMap<i64, Loaded>> = BTreeMap::new();
    for source in files {
        let load = || -> anyhow::Result<GeoGrid> { Ok(load_grid(&source, peek_kind(&source)?)?) };
        let grid = load().with_context(|| format!("{}", source.display()))?;
        let slot = by_kind.entry(grid.kind().code()).or_default();
        if let Some(prev) = slot.get(&grid.timestamp()) {
            return Err(anyhow::anyhow!(
                "{} and {} both hold {} at timestamp {}",
                prev.source.display(),
                source.display(),
                kind_name(grid.kind()),
                grid.timestamp()
            )
            .into());
        }
        slot.insert(grid.timestamp(), Loaded { source, grid });
    }
    for (code, grids) in &by_kind {
        let kind = FieldKind::from_code(*code).map_err(anyhow::Error::from)?;
        let mut it = grids.values();
        let first = it.next().expect("kind has a grid");
        for g in it {
            if g.grid.geometry() != first.grid.geometry() {
                return Err(anyhow::anyhow!("{}: geometry differs from {}", g.source.display(), first.source.display()).into());
            }
        }
        if kind == FieldKind::Mslp {
            FrameSeries::new(grids.values().map(|l| l.grid.clone()).collect()).context("MSLP series")?;
        }
    }
    let timestamps: BTreeSet<i64> = by_kind.values().flat_map(|g| g.keys().copied()).collect();
    let ts: Vec<i64> = timestamps.into_iter().collect();
    if let Some(w) = ts.windows(2).find(|w| w[1] - w[0] != STEP_SECONDS) {
        return Err(anyhow::anyhow!("frames at {} and {} are not {STEP_SECONDS} s apart", w[0], w[1]).into());
    }

    let layout = &ctx.layout;
    let mut frames = Vec::with_capacity(ts.len());
    let mut written = BTreeMap::new();
    for (index, &t) in ts.iter().enumerate() {
        let index = index as u32;
        let mut info = FrameInfo { index, timestamp: t, has_ttr: false, has_mslp: false, ttr_hash: None };
        for kind in KINDS {
            let Some(loaded) = by_kind.get(&kind.code()).and_then(|g| g.get(&t)) else { continue };
            copy_grid(&loaded.source, &layout.grid_path(kind, index))?;
            *written.entry(kind_name(kind)).or_insert(0usize) += 1;
            match kind {
                FieldKind::Ttr => {
                    info.has_ttr = true;
                    info.ttr_hash = Some(loaded.grid.content_hash());
                }
                FieldKind::Mslp => info.has_mslp = true,
                FieldKind::Vorticity => {}
            }
        }
        frames.push(info);
    }
    layout.write_frames(&frames).with_context(|| format!("writing {}", layout.frame_index().display()))?;
    let counts: Vec<String> = written.iter().map(|(k, n)| format!("{n} {k}")).collect();
    Ok(Summary {
        text: format!("ingested {} frames ({}) into {}", frames.len(), counts.join(", "), layout.root().display()),
        json: json!({ "frames": frames.len(), "grids": written, "first_timestamp": ts[0], "last_timestamp": ts[ts.len() - 1] }),
    })
}

fn copy_grid(from: &Path, to: &Path) -> anyhow::Result<()> {
    if from == to {
        return Ok(());
    }
    let bytes = std::fs::read(from).with_context(|| format!("reading {}", from.display()))?;
    super::ensure_parent(to)?;
    write_atomic_bytes(to, &bytes).with_context(|| format!("writing {}", to.display()))
}

pub fn frame_index(ctx: &Context) -> anyhow::Result<Vec<FrameInfo>> {
    let frames = ctx.layout.read_frames().with_context(|| format!("reading {}", ctx.layout.frame_index().display()))?;
    ensure!(!frames.is_empty(), "no frames in {}; run `cyclodet ingest` first", ctx.layout.root().display());
    Ok(frames)
}

pub fn render(ctx: &Context) -> Result<Summary, Failure> {
    let frames = frame_index(ctx)?;
    let layout = &ctx.layout;
    std::fs::create_dir_all(layout.images_dir()).with_context(|| format!("creating {}", layout.images_dir().display()))?;
    let mut rendered = 0;
    for f in frames.iter().filter(|f| f.has_ttr) {
        let grid = load_grid(layout.grid_path(FieldKind::Ttr, f.index), FieldKind::Ttr)
            .with_context(|| format!("frame {}", f.index))?;
        let png = encode_png(&render_image(&grid)).with_context(|| format!("frame {}", f.index))?;
        let path = layout.image_path(f.index);
        write_atomic_bytes(&path, &png).with_context(|| format!("writing {}", path.display()))?;
        rendered += 1;
    }
    Ok(Summary {
        text: format!("rendered {rendered} of {} frames into {}", frames.len(), layout.images_dir().display()),
        json: json!({ "rendered": rendered, "frames": frames.len() }),
    })
}

use anyhow::{ensure, Context as _};
use serde::Serialize;
use serde_json::json;

use cyclodet_core::cyclone_track::{centers_for_series, link_tracks, track_report, write_tracks_jsonl, CycloneCenter, Track};
use cyclodet_core::fsio::write_atomic;
use cyclodet_core::grid::{load_grid, FieldKind, FrameSeries, GridGeometry};
use cyclodet_core::labelstore::suggest_box;
use cyclodet_core::BoundingBox;

use super::frames::frame_index;
use super::write_jsonl;
use crate::config::Context;
use crate::{Failure, Summary};

/// Centers of every MSLP frame, numbered by project frame index. MSLP frames are gapless, so
/// position `p` in the series is frame `first + p`.
struct MslpCenters {
    per_frame: Vec<Vec<CycloneCenter>>,
    first: usize,
    geometry: GridGeometry,
}

fn project_centers(ctx: &Context) -> anyhow::Result<MslpCenters> {
    let frames: Vec<_> = frame_index(ctx)?.into_iter().filter(|f| f.has_mslp).collect();
    ensure!(!frames.is_empty(), "no MSLP frames were ingested");
    let grids = frames
        .iter()
        .map(|f| load_grid(ctx.layout.grid_path(FieldKind::Mslp, f.index), FieldKind::Mslp).with_context(|| format!("frame {}", f.index)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let geometry = *grids[0].geometry();
    let series = FrameSeries::new(grids).context("MSLP series")?;
    let mut per_frame = centers_for_series(&series, &ctx.cfg.tracker)?;
    for (centers, f) in per_frame.iter_mut().zip(&frames) {
        for c in centers {
            c.frame_index = f.index as usize;
        }
    }
    Ok(MslpCenters { per_frame, first: frames[0].index as usize, geometry })
}

/// Tracks keyed by project frame index. Linking numbers frames by series position.
fn project_tracks(ctx: &Context) -> anyhow::Result<(Vec<Track>, GridGeometry)> {
    let MslpCenters { per_frame, first, geometry } = project_centers(ctx)?;
    let tracks = link_tracks(&per_frame, &ctx.cfg.tracker)
        .into_iter()
        .map(|t| {
            let centers = t.centers().iter().cloned().map(|mut c| {
                c.frame_index += first;
                c
            });
            Track::new(t.id(), centers.collect(), &ctx.cfg.tracker)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tracks, geometry))
}

pub fn centers(ctx: &Context) -> Result<Summary, Failure> {
    let per_frame = project_centers(ctx)?.per_frame;
    let total: usize = per_frame.iter().map(Vec::len).sum();
    let tropical = per_frame.iter().flatten().filter(|c| c.possibly_tropical).count();
    write_jsonl(&ctx.layout.centers(), per_frame.iter().flatten())?;
    Ok(Summary {
        text: format!("{total} centers in {} frames ({tropical} possibly tropical)", per_frame.len()),
        json: json!({ "centers": total, "frames": per_frame.len(), "possibly_tropical": tropical }),
    })
}

pub fn track(ctx: &Context) -> Result<Summary, Failure> {
    let (tracks, _) = project_tracks(ctx)?;
    let path = ctx.layout.tracks();
    write_atomic(&path, |w| write_tracks_jsonl(w, &tracks).map_err(std::io::Error::other))
        .with_context(|| format!("writing {}", path.display()))?;
    let stats = track_report(&tracks);
    let text = if stats.count == 0 {
        "no tracks".to_string()
    } else {
        format!(
            "{} tracks, duration {:.0} to {:.0} h (mean {:.1} h)",
            stats.count, stats.min_hours, stats.max_hours, stats.mean_hours
        )
    };
    Ok(Summary { text, json: serde_json::to_value(&stats).context("serializing track stats")? })
}

/// One line of `suggestions.jsonl`.
#[derive(Serialize)]
struct SuggestionRecord<'a> {
    frame: usize,
    track_id: u32,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    possibly_tropical: bool,
    center: &'a CycloneCenter,
}

pub fn suggest(ctx: &Context) -> Result<Summary, Failure> {
    let (tracks, geometry) = project_tracks(ctx)?;
    let half = ctx.cfg.labels.suggest_half_extent_deg;
    let mut records: Vec<SuggestionRecord> = tracks
        .iter()
        .flat_map(|t| {
            t.centers().iter().map(move |c| SuggestionRecord {
                frame: c.frame_index,
                track_id: t.id(),
                bbox: suggest_box(c, &geometry, half),
                possibly_tropical: c.possibly_tropical,
                center: c,
            })
        })
        .collect();
    records.sort_by_key(|r| (r.frame, r.track_id));
    let n = records.len();
    write_jsonl(&ctx.layout.suggestions(), &records)?;
    Ok(Summary {
        text: format!("{n} suggested boxes on {} tracks", tracks.len()),
        json: json!({ "suggestions": n, "tracks": tracks.len() }),
    })
}

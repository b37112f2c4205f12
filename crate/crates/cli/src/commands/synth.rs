use anyhow::Context as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use cyclodet_core::fsio::write_atomic_bytes;
use cyclodet_core::grid::{save_grid, FieldKind, GeoGrid, GridGeometry};
use cyclodet_core::labelstore::{category_counts, export_dataset, Split};
use cyclodet_core::synth::{gen_dataset, gen_mslp_series, random_lows};
use cyclodet_core::StageClass;

use crate::args::{DatasetArgs, SeriesArgs};
use crate::config::Context;
use crate::{usage, Failure, Summary};

const AMBIENT_PA: f64 = 101_325.0;
/// Clear-sky outgoing longwave flux, W m^-2, negative upward.
const TTR_CLEAR: f64 = -260.0;
/// TTR rise per Pa of pressure deficit, so deep lows appear as bright cloud shields.
const TTR_PER_PA: f64 = 0.04;

/// TTR stand-in: clear-sky flux raised in proportion to the pressure deficit.
fn ttr_proxy(mslp: &GeoGrid, timestamp: i64) -> anyhow::Result<GeoGrid> {
    let values = mslp.values().iter().map(|p| TTR_CLEAR + TTR_PER_PA * (AMBIENT_PA - p)).collect();
    Ok(GeoGrid::new(*mslp.geometry(), timestamp, FieldKind::Ttr, values)?)
}

pub fn series(ctx: &Context, args: &SeriesArgs) -> Result<Summary, Failure> {
    if args.frames == 0 || args.min_life == 0 || args.min_life > args.max_life || args.max_life > args.frames {
        return Err(usage("need 0 < --min-life <= --max-life <= --frames"));
    }
    if !(args.min_separation > 0.0 && args.min_separation.is_finite()) {
        return Err(usage("--min-separation must be positive"));
    }
    let geometry = GridGeometry::global(args.n_lon, args.n_lat);
    geometry.validate().map_err(|e| usage(format!("grid: {e}")))?;
    let seed = ctx.cfg.synth.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lows = random_lows(
        args.lows,
        args.frames,
        &geometry,
        (args.min_life, args.max_life),
        args.min_separation,
        ctx.cfg.tracker.max_step_km,
        &mut rng,
    )
    .context("placing lows")?;
    let (series, warnings) = gen_mslp_series(AMBIENT_PA, &lows, args.frames, geometry, args.noise, seed).context("MSLP series")?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (f, grid) in series.frames().iter().enumerate() {
        let t = args.start + grid.timestamp();
        let mslp = GeoGrid::new(geometry, t, FieldKind::Mslp, grid.values().to_vec()).map_err(anyhow::Error::from)?;
        for (name, g) in [("mslp", &mslp), ("ttr", &ttr_proxy(&mslp, t)?)] {
            let path = args.out.join(format!("{name}-{f:04}.etcg"));
            save_grid(&path, g).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let plant = args.out.join("plant.json");
    let body = serde_json::to_vec_pretty(&json!({ "seed": seed, "frames": args.frames, "lows": lows })).context("serializing plant")?;
    write_atomic_bytes(&plant, &body).with_context(|| format!("writing {}", plant.display()))?;
    Ok(Summary {
        text: format!("{} lows over {} frames written to {}", lows.len(), args.frames, args.out.display()),
        json: json!({ "lows": lows.len(), "frames": args.frames, "seed": seed, "warnings": warnings }),
    })
}

pub fn dataset(ctx: &Context, args: &DatasetArgs) -> Result<Summary, Failure> {
    let ratio = args.ratio.unwrap_or(ctx.cfg.labels.test_ratio);
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(usage("--ratio must lie strictly between 0 and 1"));
    }
    let data = gen_dataset(&ctx.cfg.synth).map_err(|e| usage(format!("synth: {e}")))?;
    if data.entries.is_empty() {
        return Err(usage("synth.counts asks for no cyclones"));
    }
    let manifest = data.split(ratio, ctx.cfg.labels.split_seed).context("splitting")?;
    let summary = export_dataset(&manifest, &data.images, &args.out).with_context(|| format!("exporting to {}", args.out.display()))?;
    let counts = category_counts(&manifest);
    let per_stage: serde_json::Map<String, serde_json::Value> = StageClass::ALL
        .iter()
        .map(|&s| (s.name().to_string(), json!({ "train": counts.get(s, Split::Train), "test": counts.get(s, Split::Test) })))
        .collect();
    Ok(Summary {
        text: format!(
            "{} frames ({} train, {} test) with {} boxes written to {}",
            summary.images,
            manifest.frame_count(Split::Train),
            manifest.frame_count(Split::Test),
            summary.boxes,
            args.out.display()
        ),
        json: json!({ "frames": summary.images, "boxes": summary.boxes, "counts": per_stage }),
    })
}

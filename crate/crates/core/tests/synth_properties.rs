//! Generator properties checked from the outside: class separability, placement overlap and
//! planted-low recovery.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclodet_core::cyclone_track::{find_local_minima, TrackerConfig};
use cyclodet_core::grid::{angular_separation_deg, GridGeometry, LatLon};
use cyclodet_core::raster::Raster;
use cyclodet_core::synth::{canonical_shape, gen_cyclone_image, gen_dataset, gen_mslp_series, PlantedLow, SynthDatasetConfig, SynthImageSpec};
use cyclodet_core::{BoundingBox, StageClass};

const PATCH: usize = 32;

/// The box contents resampled to a fixed patch, zero mean and unit norm.
fn patch(img: &Raster, b: &BoundingBox) -> Vec<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (b.xmin() * w).floor() as usize;
    let y0 = (b.ymin() * h).floor() as usize;
    let x1 = ((b.xmax() * w).ceil() as usize).min(img.width());
    let y1 = ((b.ymax() * h).ceil() as usize).min(img.height());
    let mut v = img.crop(x0, y0, x1 - x0, y1 - y0).resize_bilinear(PATCH, PATCH).data().to_vec();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[test]
fn nearest_template_separates_the_stages() {
    let templates: Vec<(StageClass, Vec<f64>)> = StageClass::ALL
        .iter()
        .map(|&s| {
            let (img, b) = canonical_shape(s);
            (s, patch(&img, &b))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut right, mut total) = (0, 0);
    for k in 0..300u64 {
        let stage = StageClass::ALL[(k % 3) as usize];
        let spec = SynthImageSpec {
            stage,
            center: (rng.gen_range(0.4..0.6), rng.gen_range(0.35..0.55)),
            size: rng.gen_range(0.1..0.2),
            noise: 0.05,
            seed: 10_000 + k,
        };
        let (img, b, _) = gen_cyclone_image(&spec).unwrap();
        let p = patch(&img, &b);
        let best = templates
            .iter()
            .map(|(s, t)| (s, t.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        total += 1;
        right += usize::from(*best == stage);
    }
    let accuracy = right as f64 / total as f64;
    assert!(accuracy > 0.9, "template accuracy {accuracy}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn placements_overlap_below_bound(seed in 0u64..10_000) {
        let d = gen_dataset(&SynthDatasetConfig { counts: [15, 15, 15], seed, ..Default::default() }).unwrap();
        for (_, boxes) in &d.entries {
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    prop_assert!(boxes[i].bbox.iou(&boxes[j].bbox) < 0.2);
                }
            }
        }
    }
}

#[test]
fn two_separated_lows_give_two_centers() {
    let g = GridGeometry::global(144, 73);
    let frames = 4;
    let snap = |p: LatLon| {
        let (i, j) = g.cell_of(p);
        g.position(i, j)
    };
    let at = |lat: f64, lon0: f64| -> Vec<Option<LatLon>> {
        (0..frames).map(|f| Some(snap(LatLon::new(lat, lon0 + 2.5 * f as f64)))).collect()
    };
    let a = PlantedLow { path: at(50.0, 100.0), depth: 2000.0, radius: 4.0 };
    let b = PlantedLow { path: at(50.0, 132.5), depth: 1800.0, radius: 4.0 };
    assert!(angular_separation_deg(a.position(0).unwrap(), b.position(0).unwrap()) >= 20.0);
    let (series, _) = gen_mslp_series(101_325.0, &[a.clone(), b.clone()], frames, g, 0.0, 3).unwrap();
    let cfg = TrackerConfig::default();
    for (f, grid) in series.frames().iter().enumerate() {
        let mut found: Vec<_> = find_local_minima(grid, &cfg).unwrap().iter().map(|c| c.cell()).collect();
        found.sort_unstable();
        let mut want = vec![g.cell_of(a.position(f).unwrap()), g.cell_of(b.position(f).unwrap())];
        want.sort_unstable();
        assert_eq!(found, want, "frame {f}");
    }
}

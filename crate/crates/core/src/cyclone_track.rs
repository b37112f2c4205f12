//! Cyclone center detection on sea-level-pressure fields and track linking.
//!
//! A center is a cell strictly lower than its 8 neighbors. Centers within `neighbor_min_deg`
//! of each other in the same frame are merged, keeping the deepest. Centers in adjacent frames
//! are linked when they are at most `max_step_km` apart, and a depth-first walk over that
//! layered graph yields disjoint tracks of at least `min_frames` frames.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{angular_separation_deg, haversine_km, FieldKind, FrameSeries, GeoGrid, LatLon};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("center detection needs an MSLP grid, got {0:?}")]
    WrongKind(FieldKind),
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    North,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub max_step_km: f64,
    pub min_frames: usize,
    pub neighbor_min_deg: f64,
    pub hemisphere: Hemisphere,
    /// Centers equatorward of this latitude are flagged for the annotators.
    pub tropical_flag_lat: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_step_km: 333.36,
            min_frames: 4,
            neighbor_min_deg: 10.0,
            hemisphere: Hemisphere::North,
            tropical_flag_lat: 25.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        let bad = |m: &str| Err(TrackError::InvalidConfig(m.to_string()));
        if !(self.max_step_km > 0.0 && self.max_step_km.is_finite()) {
            return bad("max_step_km must be positive");
        }
        if self.min_frames == 0 {
            return bad("min_frames must be positive");
        }
        if !(self.neighbor_min_deg > 0.0 && self.neighbor_min_deg.is_finite()) {
            return bad("neighbor_min_deg must be positive");
        }
        Ok(())
    }

    fn in_hemisphere(&self, lat: f64) -> bool {
        match self.hemisphere {
            Hemisphere::North => lat > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycloneCenter {
    pub frame_index: usize,
    pub i_lat: usize,
    pub i_lon: usize,
    pub position: LatLon,
    pub mslp: f64,
    pub possibly_tropical: bool,
}

impl CycloneCenter {
    pub fn cell(&self) -> (usize, usize) {
        (self.i_lat, self.i_lon)
    }
}

/// Strict 8-neighbor minima of an MSLP frame, one survivor per neighborhood cluster.
///
/// Pole rows are skipped. The returned centers carry `frame_index` 0 and are sorted by
/// `(i_lat, i_lon)`.
pub fn find_local_minima(mslp: &GeoGrid, cfg: &TrackerConfig) -> Result<Vec<CycloneCenter>, TrackError> {
    if mslp.kind() != FieldKind::Mslp {
        return Err(TrackError::WrongKind(mslp.kind()));
    }
    cfg.validate()?;
    let g = *mslp.geometry();
    let mut raw = Vec::new();
    for i_lat in 1..g.n_lat - 1 {
        let lat = g.lat_of(i_lat);
        if !cfg.in_hemisphere(lat) {
            continue;
        }
        for i_lon in 0..g.n_lon {
            let v = mslp.get(i_lat, i_lon);
            let j = i_lon as isize;
            let strict = [i_lat - 1, i_lat, i_lat + 1].iter().all(|&r| {
                (-1..=1).all(|dj| (r == i_lat && dj == 0) || v < mslp.get_wrapped(r, j + dj))
            });
            if strict {
                raw.push(CycloneCenter {
                    frame_index: 0,
                    i_lat,
                    i_lon,
                    position: g.position(i_lat, i_lon),
                    mslp: v,
                    possibly_tropical: lat < cfg.tropical_flag_lat,
                });
            }
        }
    }
    Ok(merge_neighbors(raw, cfg.neighbor_min_deg))
}

/// Single-linkage clustering at `min_deg`; the deepest center of each cluster survives.
fn merge_neighbors(centers: Vec<CycloneCenter>, min_deg: f64) -> Vec<CycloneCenter> {
    let n = centers.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if angular_separation_deg(centers[a].position, centers[b].position) < min_deg {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        let keep = match best.get(&r) {
            Some(&j) => centers[i].mslp < centers[j].mslp,
            None => true,
        };
        if keep {
            best.insert(r, i);
        }
    }
    let mut survivors: Vec<usize> = best.into_values().collect();
    survivors.sort_unstable();
    survivors.into_iter().map(|i| centers[i].clone()).collect()
}

/// Runs [`find_local_minima`] on every frame and stamps frame indices.
pub fn centers_for_series(series: &FrameSeries, cfg: &TrackerConfig) -> Result<Vec<Vec<CycloneCenter>>, TrackError> {
    series
        .frames()
        .iter()
        .enumerate()
        .map(|(f, grid)| {
            let mut cs = find_local_minima(grid, cfg)?;
            for c in &mut cs {
                c.frame_index = f;
            }
            Ok(cs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    id: u32,
    centers: Vec<CycloneCenter>,
}

impl Track {
    /// Checks consecutive frames, step distance, length and hemisphere.
    pub fn new(id: u32, centers: Vec<CycloneCenter>, cfg: &TrackerConfig) -> Result<Self, TrackError> {
        if centers.len() < cfg.min_frames {
            return Err(TrackError::InvalidTrack(format!(
                "{} frames, need at least {}",
                centers.len(),
                cfg.min_frames
            )));
        }
        for pair in centers.windows(2) {
            if pair[1].frame_index != pair[0].frame_index + 1 {
                return Err(TrackError::InvalidTrack(format!(
                    "frames {} and {} are not consecutive",
                    pair[0].frame_index, pair[1].frame_index
                )));
            }
            let d = haversine_km(pair[0].position, pair[1].position);
            if d > cfg.max_step_km {
                return Err(TrackError::InvalidTrack(format!("step of {d:.2} km exceeds {}", cfg.max_step_km)));
            }
        }
        if let Some(c) = centers.iter().find(|c| !cfg.in_hemisphere(c.position.lat)) {
            return Err(TrackError::InvalidTrack(format!("center at lat {} outside hemisphere", c.position.lat)));
        }
        Ok(Self { id, centers })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn centers(&self) -> &[CycloneCenter] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn first_frame(&self) -> usize {
        self.centers[0].frame_index
    }

    pub fn last_frame(&self) -> usize {
        self.centers[self.centers.len() - 1].frame_index
    }

    pub fn duration_hours(&self) -> f64 {
        (self.centers.len() as f64 - 1.0) * 6.0
    }
}

type NodeId = (usize, usize);

struct Linker<'a> {
    frames: &'a [Vec<CycloneCenter>],
    cfg: &'a TrackerConfig,
    used: Vec<Vec<bool>>,
    longest: HashMap<NodeId, usize>,
}

impl Linker<'_> {
    fn center(&self, (f, k): NodeId) -> &CycloneCenter {
        &self.frames[f][k]
    }

    /// Unused centers of the next frame within reach, nearest first, then deeper, then west.
    fn successors(&self, node: NodeId) -> Vec<NodeId> {
        let (f, _) = node;
        let Some(next) = self.frames.get(f + 1) else {
            return Vec::new();
        };
        let from = self.center(node);
        let mut cand: Vec<(f64, NodeId)> = next
            .iter()
            .enumerate()
            .filter(|(k, _)| !self.used[f + 1][*k])
            .map(|(k, c)| (haversine_km(from.position, c.position), (f + 1, k)))
            .filter(|(d, _)| *d <= self.cfg.max_step_km)
            .collect();
        cand.sort_by(|(da, a), (db, b)| {
            let (ca, cb) = (self.center(*a), self.center(*b));
            da.total_cmp(db).then(ca.mslp.total_cmp(&cb.mslp)).then(ca.i_lon.cmp(&cb.i_lon))
        });
        cand.into_iter().map(|(_, n)| n).collect()
    }

    /// Length of the longest unused path starting at `node` (memoized DFS).
    fn longest_from(&mut self, node: NodeId) -> usize {
        if let Some(&len) = self.longest.get(&node) {
            return len;
        }
        // Iterative post-order so long series cannot overflow the stack.
        let mut stack = vec![(node, false)];
        while let Some((n, expanded)) = stack.pop() {
            if self.longest.contains_key(&n) {
                continue;
            }
            let succ = self.successors(n);
            if expanded {
                let best = succ.iter().map(|s| self.longest[s]).max().unwrap_or(0);
                self.longest.insert(n, best + 1);
            } else {
                stack.push((n, true));
                stack.extend(succ.into_iter().filter(|s| !self.longest.contains_key(s)).map(|s| (s, false)));
            }
        }
        self.longest[&node]
    }

    /// Walks from `start`, preferring the nearest successor that still lets the path reach
    /// `min_frames`. Returns `None` when no such path exists.
    fn walk(&mut self, start: NodeId) -> Option<Vec<NodeId>> {
        let min = self.cfg.min_frames;
        if self.longest_from(start) < min {
            return None;
        }
        let mut path = vec![start];
        loop {
            let here = *path.last().expect("path is non-empty");
            let succ = self.successors(here);
            let mut next = None;
            for s in succ {
                if path.len() >= min || path.len() + self.longest_from(s) >= min {
                    next = Some(s);
                    break;
                }
            }
            match next {
                Some(s) => path.push(s),
                None => break,
            }
        }
        Some(path)
    }
}

/// Links per-frame centers into disjoint tracks.
///
/// Frames are visited in order and every unused center is tried as a track start. A successor
/// consumed by an accepted track is unavailable to all later tracks.
pub fn link_tracks(per_frame_centers: &[Vec<CycloneCenter>], cfg: &TrackerConfig) -> Vec<Track> {
    let mut linker = Linker {
        frames: per_frame_centers,
        cfg,
        used: per_frame_centers.iter().map(|f| vec![false; f.len()]).collect(),
        longest: HashMap::new(),
    };
    let mut tracks = Vec::new();
    for f in 0..per_frame_centers.len() {
        for k in 0..per_frame_centers[f].len() {
            if linker.used[f][k] {
                continue;
            }
            let Some(path) = linker.walk((f, k)) else { continue };
            let centers: Vec<CycloneCenter> = path
                .iter()
                .map(|&(pf, pk)| {
                    let mut c = per_frame_centers[pf][pk].clone();
                    c.frame_index = pf;
                    c
                })
                .collect();
            match Track::new(tracks.len() as u32 + 1, centers, cfg) {
                Ok(track) => {
                    for &(pf, pk) in &path {
                        linker.used[pf][pk] = true;
                    }
                    linker.longest.clear();
                    tracks.push(track);
                }
                Err(e) => log::debug!("rejected path from frame {f}: {e}"),
            }
        }
    }
    tracks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpan {
    pub id: u32,
    pub first_frame: usize,
    pub last_frame: usize,
    pub frames: usize,
    pub duration_hours: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackStats {
    pub count: usize,
    pub min_hours: f64,
    pub max_hours: f64,
    pub mean_hours: f64,
    pub tracks: Vec<TrackSpan>,
}

pub fn track_report(tracks: &[Track]) -> TrackStats {
    if tracks.is_empty() {
        return TrackStats::default();
    }
    let spans: Vec<TrackSpan> = tracks
        .iter()
        .map(|t| TrackSpan {
            id: t.id(),
            first_frame: t.first_frame(),
            last_frame: t.last_frame(),
            frames: t.len(),
            duration_hours: t.duration_hours(),
        })
        .collect();
    let hours = spans.iter().map(|s| s.duration_hours);
    TrackStats {
        count: spans.len(),
        min_hours: hours.clone().fold(f64::INFINITY, f64::min),
        max_hours: hours.clone().fold(f64::NEG_INFINITY, f64::max),
        mean_hours: hours.sum::<f64>() / spans.len() as f64,
        tracks: spans,
    }
}

/// One line of the track JSON-Lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: u32,
    pub frames: Vec<usize>,
    pub centers: Vec<CenterRecord>,
    pub duration_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRecord {
    pub frame: usize,
    pub i_lat: usize,
    pub i_lon: usize,
    pub lat: f64,
    pub lon: f64,
    pub mslp: f64,
}

impl From<&Track> for TrackRecord {
    fn from(t: &Track) -> Self {
        Self {
            id: t.id(),
            frames: t.centers().iter().map(|c| c.frame_index).collect(),
            centers: t
                .centers()
                .iter()
                .map(|c| CenterRecord {
                    frame: c.frame_index,
                    i_lat: c.i_lat,
                    i_lon: c.i_lon,
                    lat: c.position.lat,
                    lon: c.position.lon,
                    mslp: c.mslp,
                })
                .collect(),
            duration_hours: t.duration_hours(),
        }
    }
}

pub fn write_tracks_jsonl<W: Write>(mut w: W, tracks: &[Track]) -> Result<(), TrackError> {
    for t in tracks {
        serde_json::to_writer(&mut w, &TrackRecord::from(t))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;

    fn mslp_with(dips: &[(usize, usize, f64)]) -> GeoGrid {
        let geom = GridGeometry::global(144, 73);
        let mut values = vec![101_325.0; geom.len()];
        for &(r, c, v) in dips {
            values[r * geom.n_lon + c] = v;
        }
        GeoGrid::new(geom, 0, FieldKind::Mslp, values).unwrap()
    }

    fn center(frame: usize, lat: f64, lon: f64) -> CycloneCenter {
        let g = GridGeometry::global(144, 73);
        let (i_lat, i_lon) = g.cell_of(LatLon::new(lat, lon));
        CycloneCenter {
            frame_index: frame,
            i_lat,
            i_lon,
            position: g.position(i_lat, i_lon),
            mslp: 99_000.0,
            possibly_tropical: false,
        }
    }

    #[test]
    fn uniform_field_has_no_centers() {
        let cs = find_local_minima(&mslp_with(&[]), &TrackerConfig::default()).unwrap();
        assert!(cs.is_empty());
    }

    #[test]
    fn rejects_wrong_kind() {
        let g = GeoGrid::filled(GridGeometry::global(8, 5), 0, FieldKind::Ttr, 1.0).unwrap();
        assert!(matches!(find_local_minima(&g, &TrackerConfig::default()), Err(TrackError::WrongKind(_))));
    }

    #[test]
    fn plateau_is_not_a_minimum() {
        let cs = find_local_minima(&mslp_with(&[(20, 40, 99_000.0), (20, 41, 99_000.0)]), &TrackerConfig::default())
            .unwrap();
        assert!(cs.is_empty());
    }

    #[test]
    fn minimum_across_the_seam_is_found() {
        let cs = find_local_minima(&mslp_with(&[(20, 0, 99_000.0), (20, 143, 99_500.0)]), &TrackerConfig::default())
            .unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].cell(), (20, 0));
    }

    #[test]
    fn pole_rows_and_south_excluded() {
        let cs = find_local_minima(
            &mslp_with(&[(0, 10, 90_000.0), (72, 10, 90_000.0), (50, 10, 95_000.0)]),
            &TrackerConfig::default(),
        )
        .unwrap();
        assert!(cs.is_empty(), "{cs:?}");
    }

    #[test]
    fn tropical_flag() {
        let cs = find_local_minima(&mslp_with(&[(30, 10, 99_000.0), (10, 80, 99_000.0)]), &TrackerConfig::default())
            .unwrap();
        assert_eq!(cs.len(), 2);
        let by_row: HashMap<usize, bool> = cs.iter().map(|c| (c.i_lat, c.possibly_tropical)).collect();
        assert_eq!(by_row[&30], true); // 15 N
        assert_eq!(by_row[&10], false); // 65 N
    }

    #[test]
    fn close_minima_keep_the_deepest() {
        // 5 degrees apart at 45 N: rows 18, columns 72 and 74.
        let cs = find_local_minima(&mslp_with(&[(18, 72, 98_000.0), (18, 74, 96_000.0)]), &TrackerConfig::default())
            .unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].cell(), (18, 74));
        assert_eq!(cs[0].mslp, 96_000.0);
    }

    #[test]
    fn steady_eastward_low_forms_one_track() {
        let frames: Vec<Vec<CycloneCenter>> = (0..6).map(|f| vec![center(f, 45.0, 100.0 + 2.5 * f as f64)]).collect();
        let tracks = link_tracks(&frames, &TrackerConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 6);
    }

    #[test]
    fn fast_low_forms_no_track() {
        let frames: Vec<Vec<CycloneCenter>> = (0..6).map(|f| vec![center(f, 30.0 + 5.0 * f as f64, 100.0)]).collect();
        assert!(link_tracks(&frames, &TrackerConfig::default()).is_empty());
    }

    #[test]
    fn three_frame_low_forms_no_track() {
        let frames: Vec<Vec<CycloneCenter>> = (0..3).map(|f| vec![center(f, 50.0, 100.0)]).collect();
        assert!(link_tracks(&frames, &TrackerConfig::default()).is_empty());
        assert!(link_tracks(&[], &TrackerConfig::default()).is_empty());
    }

    #[test]
    fn nearest_successor_wins() {
        // Two candidates in frame 1; the nearer continues the track, the other is left over.
        let frames = vec![
            vec![center(0, 50.0, 100.0)],
            vec![center(1, 50.0, 102.5), center(1, 52.5, 100.0)],
            vec![center(2, 50.0, 105.0)],
            vec![center(3, 50.0, 107.5)],
        ];
        let tracks = link_tracks(&frames, &TrackerConfig::default());
        assert_eq!(tracks.len(), 1);
        let lons: Vec<f64> = tracks[0].centers().iter().map(|c| c.position.lon).collect();
        assert_eq!(lons, vec![100.0, 102.5, 105.0, 107.5]);
    }

    #[test]
    fn dead_end_branch_is_avoided() {
        // The nearest successor in frame 1 ends immediately; the farther one reaches 4 frames.
        let frames = vec![
            vec![center(0, 50.0, 100.0)],
            vec![center(1, 50.0, 102.5), center(1, 52.5, 100.0)],
            vec![center(2, 55.0, 100.0)],
            vec![center(3, 57.5, 100.0)],
        ];
        let tracks = link_tracks(&frames, &TrackerConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].centers()[1].position.lat, 52.5);
    }

    #[test]
    fn report_durations() {
        assert_eq!(track_report(&[]), TrackStats::default());
        let cfg = TrackerConfig::default();
        let four = Track::new(1, (0..4).map(|f| center(f, 50.0, 100.0)).collect(), &cfg).unwrap();
        let long = Track::new(2, (0..37).map(|f| center(f + 10, 50.0, 100.0)).collect(), &cfg).unwrap();
        let stats = track_report(&[four, long]);
        assert_eq!(stats.count, 2);
        assert_eq!(stats.tracks[0].duration_hours, 18.0);
        assert_eq!((stats.tracks[0].first_frame, stats.tracks[0].last_frame), (0, 3));
        assert_eq!(stats.max_hours, 216.0);
        assert_eq!(stats.min_hours, 18.0);
        assert_eq!(stats.mean_hours, 117.0);
    }

    #[test]
    fn track_invariants_checked() {
        let cfg = TrackerConfig::default();
        assert!(Track::new(1, (0..3).map(|f| center(f, 50.0, 100.0)).collect(), &cfg).is_err());
        let gap = vec![center(0, 50.0, 100.0), center(2, 50.0, 100.0), center(3, 50.0, 100.0), center(4, 50.0, 100.0)];
        assert!(Track::new(1, gap, &cfg).is_err());
    }

    #[test]
    fn jsonl_export_has_one_line_per_track() {
        let cfg = TrackerConfig::default();
        let t = Track::new(7, (0..4).map(|f| center(f, 50.0, 100.0)).collect(), &cfg).unwrap();
        let mut buf = Vec::new();
        write_tracks_jsonl(&mut buf, &[t.clone(), t]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let rec: TrackRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.frames, vec![0, 1, 2, 3]);
        assert_eq!(rec.duration_hours, 18.0);
    }
}

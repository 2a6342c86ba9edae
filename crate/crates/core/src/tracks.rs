//! Linking per-slice detections into tracks, and tracks into 3D candidates.

use serde::{Deserialize, Serialize};

use crate::detector::SliceDetection;
use crate::geometry::{iou, VolumeGeometry};
use crate::{Error, Result};

/// Default linking overlap; deliberately looser than NMS.
pub const DEFAULT_LINK_IOU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub series_id: String,
    /// Ordered by strictly increasing slice index.
    pub members: Vec<SliceDetection>,
}

impl Track {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid("track has no members"));
        }
        if self.members.windows(2).any(|w| w[1].slice <= w[0].slice) {
            return Err(Error::invalid("track slices must strictly increase"));
        }
        if self.members.iter().any(|m| m.series_id != self.series_id) {
            return Err(Error::invalid("track members must share the series id"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn first_slice(&self) -> usize {
        self.members[0].slice
    }

    pub fn last_slice(&self) -> usize {
        self.members[self.members.len() - 1].slice
    }

    pub fn max_score(&self) -> f64 {
        self.members.iter().map(|m| m.score).fold(0.0, f64::max)
    }
}

/// Greedy slice-by-slice linking.
///
/// A detection on slice `k` may join a track whose last member sits on slice
/// `k - 1 - g` for `0 <= g <= max_gap`, provided their IoU exceeds `link_iou`.
/// Candidate pairs are assigned one-to-one in descending IoU order (ties: the
/// smaller gap, then the older track, then the detection order). Unmatched
/// detections open new tracks. Output tracks are ordered by creation.
pub fn link_tracks(dets: &[SliceDetection], link_iou: f64, max_gap: usize) -> Vec<Track> {
    let mut sorted: Vec<&SliceDetection> = dets.iter().collect();
    sorted.sort_by(|a, b| {
        a.slice
            .cmp(&b.slice)
            .then(b.score.total_cmp(&a.score))
            .then(a.bbox.cx.total_cmp(&b.bbox.cx))
            .then(a.bbox.cy.total_cmp(&b.bbox.cy))
    });

    let mut tracks: Vec<Track> = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let k = sorted[start].slice;
        let end = start + sorted[start..].iter().take_while(|d| d.slice == k).count();
        let slice_dets = &sorted[start..end];

        let mut pairs: Vec<(f64, usize, usize, usize)> = Vec::new();
        for (ti, t) in tracks.iter().enumerate() {
            let last = t.members.last().expect("tracks are non-empty");
            if last.slice >= k || k - last.slice - 1 > max_gap {
                continue;
            }
            let gap = k - last.slice - 1;
            for (di, d) in slice_dets.iter().enumerate() {
                let o = iou(&last.bbox, &d.bbox);
                if o > link_iou {
                    pairs.push((o, gap, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });

        let mut track_used = vec![false; tracks.len()];
        let mut det_track: Vec<Option<usize>> = vec![None; slice_dets.len()];
        for &(_, _, ti, di) in &pairs {
            if !track_used[ti] && det_track[di].is_none() {
                track_used[ti] = true;
                det_track[di] = Some(ti);
            }
        }
        for (di, d) in slice_dets.iter().enumerate() {
            match det_track[di] {
                Some(ti) => tracks[ti].members.push((*d).clone()),
                None => tracks.push(Track {
                    series_id: d.series_id.clone(),
                    members: vec![(*d).clone()],
                }),
            }
        }
        start = end;
    }
    tracks
}

/// Splits every track wherever consecutive members are not on adjacent slices.
pub fn split_at_gaps(tracks: &[Track]) -> Vec<Track> {
    let mut out = Vec::with_capacity(tracks.len());
    for t in tracks {
        let mut cur: Vec<SliceDetection> = Vec::new();
        for m in &t.members {
            if cur.last().is_some_and(|p| p.slice + 1 != m.slice) {
                out.push(Track {
                    series_id: t.series_id.clone(),
                    members: std::mem::take(&mut cur),
                });
            }
            cur.push(m.clone());
        }
        if !cur.is_empty() {
            out.push(Track {
                series_id: t.series_id.clone(),
                members: cur,
            });
        }
    }
    out
}

/// A final detection `(x, y, z, d, s)` in world millimetres; `d = 0` means unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate3D {
    pub series_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub d: f64,
    pub s: f64,
}

impl Candidate3D {
    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d >= 0.0) || !(0.0..=1.0).contains(&self.s) {
            return Err(Error::invalid(format!("invalid candidate {self:?}")));
        }
        Ok(())
    }
}

/// Score-weighted centre, maximal in-plane extent and the given score.
///
/// Falls back to uniform weights when every member scores zero.
pub fn track_to_candidate3d(t: &Track, geom: &VolumeGeometry, s: f64) -> Candidate3D {
    let total: f64 = t.members.iter().map(|m| m.score).sum();
    let weight = |m: &SliceDetection| {
        if total > 0.0 {
            m.score / total
        } else {
            1.0 / t.members.len() as f64
        }
    };
    let mut idx = [0.0; 3];
    for m in &t.members {
        let w = weight(m);
        idx[0] += w * m.bbox.cx;
        idx[1] += w * m.bbox.cy;
        idx[2] += w * m.slice as f64;
    }
    let c = geom.voxel_to_world(idx);
    let d = t
        .members
        .iter()
        .map(|m| (m.bbox.w * geom.spacing[0]).max(m.bbox.h * geom.spacing[1]))
        .fold(0.0, f64::max);
    Candidate3D {
        series_id: t.series_id.clone(),
        x: c[0],
        y: c[1],
        z: c[2],
        d,
        s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2D;

    fn det(slice: usize, cx: f64, cy: f64, side: f64, score: f64) -> SliceDetection {
        SliceDetection {
            series_id: "s".into(),
            slice,
            bbox: Box2D::square(cx, cy, side).unwrap(),
            score,
            propagated: false,
        }
    }

    #[test]
    fn identical_boxes_form_one_track() {
        let dets: Vec<_> = (5..=8).map(|k| det(k, 10.0, 10.0, 6.0, 0.5)).collect();
        let t = link_tracks(&dets, 0.2, 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 4);
        t[0].validate().unwrap();
    }

    #[test]
    fn far_apart_boxes_form_two_tracks() {
        let dets: Vec<_> = (0..5)
            .flat_map(|k| [det(k, 10.0, 10.0, 6.0, 0.5), det(k, 110.0, 10.0, 6.0, 0.6)])
            .collect();
        let t = link_tracks(&dets, 0.2, 0);
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.len() == 5));
    }

    #[test]
    fn gaps_respect_max_gap() {
        let dets = vec![det(1, 5.0, 5.0, 4.0, 0.5), det(3, 5.0, 5.0, 4.0, 0.5)];
        assert_eq!(link_tracks(&dets, 0.2, 0).len(), 2);
        let t = link_tracks(&dets, 0.2, 1);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].members.len(), 2);
    }

    #[test]
    fn splitting_at_gaps() {
        let t = Track {
            series_id: "s".into(),
            members: vec![det(1, 5.0, 5.0, 4.0, 0.5), det(2, 5.0, 5.0, 4.0, 0.5), det(5, 5.0, 5.0, 4.0, 0.5)],
        };
        let parts = split_at_gaps(&[t]);
        assert_eq!(parts.iter().map(Track::len).collect::<Vec<_>>(), vec![2, 1]);
    }

    /// Every one-to-one matching between last members and new detections with
    /// IoU above the threshold; returns the matching with maximal total IoU.
    fn best_matching(prev: &[Box2D], next: &[Box2D], t: f64) -> Vec<Option<usize>> {
        fn rec(
            i: usize,
            prev: &[Box2D],
            next: &[Box2D],
            t: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            best: &mut (f64, Vec<Option<usize>>),
        ) {
            if i == next.len() {
                let total: f64 = cur
                    .iter()
                    .enumerate()
                    .filter_map(|(d, p)| p.map(|p| iou(&prev[p], &next[d])))
                    .sum();
                if total > best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            cur.push(None);
            rec(i + 1, prev, next, t, used, cur, best);
            cur.pop();
            for p in 0..prev.len() {
                if !used[p] && iou(&prev[p], &next[i]) > t {
                    used[p] = true;
                    cur.push(Some(p));
                    rec(i + 1, prev, next, t, used, cur, best);
                    cur.pop();
                    used[p] = false;
                }
            }
        }
        let mut best = (-1.0, vec![]);
        rec(0, prev, next, t, &mut vec![false; prev.len()], &mut vec![], &mut best);
        best.1
    }

    #[test]
    fn approaching_tracks_match_exhaustive_assignment() {
        // Two objects move toward each other, overlap, then separate.
        let xs_a = [10.0, 13.0, 15.0, 17.0, 20.0];
        let xs_b = [26.0, 23.0, 20.0, 18.0, 15.0];
        let mut dets = Vec::new();
        for k in 0..5 {
            dets.push(det(k, xs_a[k], 10.0, 8.0, 0.9));
            dets.push(det(k, xs_b[k], 10.0, 8.0, 0.8));
        }
        let tracks = link_tracks(&dets, 0.2, 0);
        for k in 0..4 {
            let prev: Vec<Box2D> = tracks
                .iter()
                .filter_map(|t| t.members.iter().find(|m| m.slice == k).map(|m| m.bbox))
                .collect();
            let next: Vec<Box2D> = dets.iter().filter(|d| d.slice == k + 1).map(|d| d.bbox).collect();
            let oracle = best_matching(&prev, &next, 0.2);
            for (di, b) in next.iter().enumerate() {
                let owner = tracks.iter().position(|t| t.members.iter().any(|m| m.slice == k + 1 && m.bbox == *b));
                let from = oracle[di].map(|p| {
                    tracks.iter().position(|t| t.members.iter().any(|m| m.slice == k && m.bbox == prev[p]))
                });
                if let Some(from) = from {
                    assert_eq!(owner, from, "slice {k}->{}", k + 1);
                }
            }
        }
        // partition: every detection in exactly one track
        assert_eq!(tracks.iter().map(Track::len).sum::<usize>(), dets.len());
    }

    #[test]
    fn candidate_from_single_member() {
        let g = VolumeGeometry::new([128, 128, 32], [0.7, 0.7, 2.5], [0.0; 3]).unwrap();
        let t = Track {
            series_id: "s".into(),
            members: vec![det(4, 50.0, 60.0, 10.0, 0.9)],
        };
        let c = track_to_candidate3d(&t, &g, 0.8);
        let want = [35.0, 42.0, 10.0, 7.0, 0.8];
        for (got, w) in [c.x, c.y, c.z, c.d, c.s].iter().zip(want) {
            assert!((got - w).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn symmetric_track_centres_on_middle_slice() {
        let g = VolumeGeometry::new([64, 64, 32], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let t = Track {
            series_id: "s".into(),
            members: vec![det(3, 9.0, 10.0, 6.0, 0.5), det(4, 10.0, 10.0, 6.0, 0.5), det(5, 11.0, 10.0, 6.0, 0.5)],
        };
        let c = track_to_candidate3d(&t, &g, 0.5);
        assert!((c.z - 8.0).abs() < 1e-12 && (c.x - 10.0).abs() < 1e-12);
        assert_eq!(c.d, 6.0);
    }
}

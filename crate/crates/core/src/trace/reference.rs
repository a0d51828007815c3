use serde::{Deserialize, Serialize};

use super::Trace;
use crate::geometry::{wrap_angle, Pose2, Vec2};

/// Polyline with per-vertex heading, cumulative arclength and curvature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePath {
    poses: Vec<Pose2>,
    arclength: Vec<f64>,
    curvature: Vec<f64>,
}

/// Result of projecting a point onto a [`ReferencePath`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathProjection {
    /// Arclength of the foot point.
    pub s: f64,
    /// Signed offset, positive to the left of the path direction.
    pub lateral: f64,
    /// Index of the segment start vertex.
    pub segment: usize,
}

/// Frame poses of `trace`, optionally shifted sideways by `offset` meters.
pub fn reference_path(trace: &Trace, offset: f64) -> ReferencePath {
    ReferencePath::from_poses(trace.frames().iter().map(|f| f.pose).collect()).offset(offset)
}

impl ReferencePath {
    /// Builds a path from vertex poses. Panics on an empty list.
    pub fn from_poses(poses: Vec<Pose2>) -> Self {
        assert!(!poses.is_empty(), "reference path needs at least one vertex");
        let mut arclength = Vec::with_capacity(poses.len());
        arclength.push(0.0);
        for w in poses.windows(2) {
            let d = (w[1].position() - w[0].position()).norm();
            arclength.push(arclength.last().unwrap() + d);
        }
        let n = poses.len();
        let mut curvature = vec![0.0; n];
        for i in 0..n.saturating_sub(1) {
            let ds = arclength[i + 1] - arclength[i];
            if ds > 0.0 {
                curvature[i] = wrap_angle(poses[i + 1].theta - poses[i].theta) / ds;
            }
        }
        if n >= 2 {
            curvature[n - 1] = curvature[n - 2];
        }
        Self {
            poses,
            arclength,
            curvature,
        }
    }

    pub fn offset(&self, lateral: f64) -> ReferencePath {
        if lateral == 0.0 {
            return self.clone();
        }
        Self::from_poses(self.poses.iter().map(|p| p.offset_lateral(lateral)).collect())
    }

    pub fn poses(&self) -> &[Pose2] {
        &self.poses
    }

    pub fn arclength(&self) -> &[f64] {
        &self.arclength
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        *self.arclength.last().unwrap()
    }

    /// Index `i` with `arclength[i] <= s < arclength[i + 1]`, clamped to the ends.
    fn segment_at(&self, s: f64) -> usize {
        let n = self.poses.len();
        if n < 2 || s <= 0.0 {
            return 0;
        }
        let i = self.arclength.partition_point(|&a| a <= s);
        i.saturating_sub(1).min(n - 2)
    }

    /// Interpolated pose at arclength `s`, clamped to the path ends.
    pub fn pose_at(&self, s: f64) -> Pose2 {
        let n = self.poses.len();
        if n == 1 {
            return self.poses[0];
        }
        let s = s.clamp(0.0, self.total_length());
        let i = self.segment_at(s);
        let (a, b) = (self.poses[i], self.poses[i + 1]);
        let ds = self.arclength[i + 1] - self.arclength[i];
        let t = if ds > 0.0 { (s - self.arclength[i]) / ds } else { 0.0 };
        let p = a.position() + (b.position() - a.position()) * t;
        Pose2::new(p.x, p.y, a.theta + t * wrap_angle(b.theta - a.theta))
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.curvature[self.segment_at(s.clamp(0.0, self.total_length()))]
    }

    fn project_segment(&self, p: Vec2, i: usize) -> (f64, PathProjection) {
        let a = self.poses[i].position();
        let b = self.poses[i + 1].position();
        let ab = b - a;
        let len2 = ab.dot(ab);
        let t = if len2 > 0.0 {
            ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let foot = a + ab * t;
        let dist = (p - foot).norm();
        let dir = if len2 > 0.0 {
            ab * (1.0 / len2.sqrt())
        } else {
            Vec2::new(self.poses[i].theta.cos(), self.poses[i].theta.sin())
        };
        let lateral = dir.cross(p - a);
        let s = self.arclength[i] + t * (self.arclength[i + 1] - self.arclength[i]);
        (
            dist,
            PathProjection {
                s,
                lateral,
                segment: i,
            },
        )
    }

    /// Nearest-segment projection. With a `hint` (previous segment index)
    /// only a window around it is searched.
    pub fn project(&self, p: Vec2, hint: Option<usize>) -> PathProjection {
        let n = self.poses.len();
        if n == 1 {
            let a = self.poses[0];
            return PathProjection {
                s: 0.0,
                lateral: a.inverse_transform_point(p).y,
                segment: 0,
            };
        }
        let (lo, hi) = match hint {
            Some(h) => (h.saturating_sub(16), (h + 16).min(n - 2)),
            None => (0, n - 2),
        };
        let mut best = self.project_segment(p, lo);
        for i in lo + 1..=hi {
            let cand = self.project_segment(p, i);
            if cand.0 < best.0 {
                best = cand;
            }
        }
        best.1
    }

    /// Appends a vertex (used for traced trajectories).
    pub fn push(&mut self, pose: Pose2) {
        let last = *self.poses.last().unwrap();
        let ds = (pose.position() - last.position()).norm();
        let n = self.poses.len();
        if ds > 0.0 {
            self.curvature[n - 1] = wrap_angle(pose.theta - last.theta) / ds;
        }
        self.arclength.push(self.arclength[n - 1] + ds);
        self.curvature.push(self.curvature[n - 1]);
        self.poses.push(pose);
    }
}

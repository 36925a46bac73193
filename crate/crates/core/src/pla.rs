//! Piecewise-linear approximation with a strict rank error bound, and the
//! recursive model built by stacking approximations of segment start keys.
//!
//! Segmentation is the one-pass optimal construction: every segment is
//! extended while some line stays within `±epsilon` of all its (key, rank)
//! points, which yields the minimum number of segments. Feasibility decisions
//! are taken on the convex hulls of the shifted points using exact `i128`
//! arithmetic; only the final line parameters are floating point.
//!
//! A prediction is `floor(slope * (key - first_key) + intercept)` clamped by
//! the next segment's start. For a trained key the result is within
//! `±epsilon` of its rank; for a key strictly between two trained keys it is
//! within `±epsilon` of the rank of the smaller one, which is what the SST
//! fence index needs to bound its block window.

use crate::error::{Error, Result};

/// Slack added before flooring so that lines touching the lower bound of the
/// error band survive floating-point evaluation.
const FLOOR_SLACK: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaSegment {
    pub first_key: u64,
    pub slope: f64,
    /// Predicted rank at `first_key`.
    pub intercept: f64,
}

impl PlaSegment {
    #[inline]
    fn raw(&self, key: u64) -> f64 {
        // Callers guarantee key >= first_key.
        self.slope * (key - self.first_key) as f64 + self.intercept
    }
}

/// Floored prediction of segment `i` for `key`, bounded above by the start of
/// segment `i + 1`.
#[inline]
fn predict_in(segs: &[PlaSegment], i: usize, key: u64) -> usize {
    let mut v = segs[i].raw(key);
    if let Some(next) = segs.get(i + 1) {
        v = v.min(next.intercept - 1.0);
    }
    let v = (v + FLOOR_SLACK).floor();
    if v <= 0.0 {
        0
    } else {
        v as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Point {
    x: i128,
    y: i128,
}

/// Direction vector; compared as dy/dx with both operands' dx of equal sign.
#[derive(Clone, Copy, Debug)]
struct Slope {
    dx: i128,
    dy: i128,
}

impl Slope {
    #[inline]
    fn between(to: Point, from: Point) -> Slope {
        Slope {
            dx: to.x - from.x,
            dy: to.y - from.y,
        }
    }

    #[inline]
    fn lt(self, o: Slope) -> bool {
        self.dy * o.dx < o.dy * self.dx
    }

    #[inline]
    fn gt(self, o: Slope) -> bool {
        self.dy * o.dx > o.dy * self.dx
    }

    fn as_f64(self) -> f64 {
        self.dy as f64 / self.dx as f64
    }
}

#[inline]
fn cross(o: Point, a: Point, b: Point) -> i128 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Streaming optimal segment builder over points with x relative to the
/// segment's first key.
struct HullBuilder {
    eps: i128,
    rect: [Point; 4],
    upper: Vec<Point>,
    lower: Vec<Point>,
    upper_start: usize,
    lower_start: usize,
    points: usize,
}

impl HullBuilder {
    fn new(eps: u32) -> Self {
        let zero = Point { x: 0, y: 0 };
        HullBuilder {
            eps: eps as i128,
            rect: [zero; 4],
            upper: Vec::new(),
            lower: Vec::new(),
            upper_start: 0,
            lower_start: 0,
            points: 0,
        }
    }

    fn reset(&mut self) {
        self.points = 0;
        self.upper.clear();
        self.lower.clear();
        self.upper_start = 0;
        self.lower_start = 0;
    }

    /// Returns false (leaving the hull untouched) if no line within the band
    /// covers the new point together with the current ones.
    fn add_point(&mut self, x: i128, y: i128) -> bool {
        let p1 = Point { x, y: y + self.eps };
        let p2 = Point { x, y: y - self.eps };
        let rect = &mut self.rect;

        if self.points == 0 {
            rect[0] = p1;
            rect[1] = p2;
            self.upper.push(p1);
            self.lower.push(p2);
            self.points = 1;
            return true;
        }
        if self.points == 1 {
            rect[2] = p2;
            rect[3] = p1;
            self.upper.push(p1);
            self.lower.push(p2);
            self.points = 2;
            return true;
        }

        let slope1 = Slope::between(rect[2], rect[0]);
        let slope2 = Slope::between(rect[3], rect[1]);
        if Slope::between(p1, rect[2]).lt(slope1) || Slope::between(p2, rect[3]).gt(slope2) {
            return false;
        }

        if Slope::between(p1, rect[1]).lt(slope2) {
            let mut min = Slope::between(self.lower[self.lower_start], p1);
            let mut min_i = self.lower_start;
            for i in self.lower_start + 1..self.lower.len() {
                let val = Slope::between(self.lower[i], p1);
                if val.gt(min) {
                    break;
                }
                min = val;
                min_i = i;
            }
            rect[1] = self.lower[min_i];
            rect[3] = p1;
            self.lower_start = min_i;

            let mut end = self.upper.len();
            while end >= self.upper_start + 2
                && cross(self.upper[end - 2], self.upper[end - 1], p1) <= 0
            {
                end -= 1;
            }
            self.upper.truncate(end);
            self.upper.push(p1);
        }

        if Slope::between(p2, rect[0]).gt(slope1) {
            let mut max = Slope::between(self.upper[self.upper_start], p2);
            let mut max_i = self.upper_start;
            for i in self.upper_start + 1..self.upper.len() {
                let val = Slope::between(self.upper[i], p2);
                if val.lt(max) {
                    break;
                }
                max = val;
                max_i = i;
            }
            rect[0] = self.upper[max_i];
            rect[2] = p2;
            self.upper_start = max_i;

            let mut end = self.lower.len();
            while end >= self.lower_start + 2
                && cross(self.lower[end - 2], self.lower[end - 1], p2) >= 0
            {
                end -= 1;
            }
            self.lower.truncate(end);
            self.lower.push(p2);
        }

        self.points += 1;
        true
    }

    /// (slope, value at x = 0) of a line inside the feasible band. The line
    /// passes through the intersection of the two extreme-slope lines with
    /// the mean of their slopes (clamped to be non-negative).
    fn line(&self) -> (f64, f64) {
        let r = &self.rect;
        if self.points == 1 {
            return (0.0, ((r[0].y + r[1].y) / 2) as f64);
        }
        let s1 = Slope::between(r[2], r[0]);
        let s2 = Slope::between(r[3], r[1]);
        let (ix, iy) = {
            let a = s1.dx * s2.dy - s1.dy * s2.dx;
            if a == 0 {
                (r[0].x as f64, r[0].y as f64)
            } else {
                let b = ((r[1].x - r[0].x) * (r[3].y - r[1].y)
                    - (r[1].y - r[0].y) * (r[3].x - r[1].x)) as f64
                    / a as f64;
                (
                    r[0].x as f64 + b * s1.dx as f64,
                    r[0].y as f64 + b * s1.dy as f64,
                )
            }
        };
        let slope = ((s1.as_f64() + s2.as_f64()) / 2.0).max(0.0);
        (slope, iy - ix * slope)
    }
}

/// Checks strict monotonicity, reporting the first offending index.
pub fn check_sorted(keys: &[u64]) -> Result<()> {
    match keys.windows(2).position(|w| w[0] >= w[1]) {
        Some(i) => Err(Error::NotSorted(i + 1)),
        None => Ok(()),
    }
}

fn segment_over(hull: &mut HullBuilder, keys: &[u64], first_rank: usize) -> PlaSegment {
    hull.reset();
    let base = keys[0];
    for (i, &k) in keys.iter().enumerate() {
        let ok = hull.add_point((k - base) as i128, (first_rank + i) as i128);
        debug_assert!(ok);
    }
    let (slope, intercept) = hull.line();
    PlaSegment {
        first_key: base,
        slope,
        intercept,
    }
}

/// First index in `keys` whose floored prediction under `seg` misses the band.
/// With `gaps`, the key just below each trained key must also stay within
/// `eps` of the preceding rank; a violation there reports the trained key.
fn first_violation(seg: &PlaSegment, keys: &[u64], first_rank: usize, eps: u32, gaps: bool) -> Option<usize> {
    let floored = |k: u64| (seg.raw(k) + FLOOR_SLACK).floor();
    keys.iter().enumerate().position(|(i, &k)| {
        let r = (first_rank + i) as f64;
        let p = floored(k);
        if p < r - eps as f64 || p > r + eps as f64 {
            return true;
        }
        gaps && i > 0 && k - keys[i - 1] > 1 && floored(k - 1) > r - 1.0 + eps as f64
    })
}

/// Segments `keys` (strictly increasing, non-empty) so that every key's
/// predicted rank is within `epsilon` of its index.
pub fn build_pla(keys: &[u64], epsilon: u32) -> Result<Vec<PlaSegment>> {
    build_segments(keys, epsilon, false)
}

/// Like [`build_pla`], and additionally every key between two trained keys
/// predicts within `epsilon` of the smaller one's rank under float
/// evaluation. Segments may be split where rounding would break that.
pub fn build_pla_guarded(keys: &[u64], epsilon: u32) -> Result<Vec<PlaSegment>> {
    build_segments(keys, epsilon, true)
}

fn build_segments(keys: &[u64], epsilon: u32, gaps: bool) -> Result<Vec<PlaSegment>> {
    if keys.is_empty() {
        return Err(Error::NotSorted(0));
    }
    check_sorted(keys)?;
    let eps = epsilon.max(1);
    let mut out = Vec::new();
    let mut hull = HullBuilder::new(eps);
    let mut start = 0;
    while start < keys.len() {
        hull.reset();
        let base = keys[start];
        let mut end = start;
        while end < keys.len() && hull.add_point((keys[end] - base) as i128, end as i128) {
            end += 1;
        }
        let (slope, intercept) = hull.line();
        let mut seg = PlaSegment {
            first_key: base,
            slope,
            intercept,
        };
        // Float evaluation could in principle step outside the band; shrink
        // the segment until it verifies. A single point always does.
        while let Some(bad) = first_violation(&seg, &keys[start..end], start, eps, gaps) {
            end = start + bad.max(1);
            seg = segment_over(&mut hull, &keys[start..end], start);
        }
        out.push(seg);
        start = end;
    }
    Ok(out)
}

/// A stack of segment arrays: level 0 covers the keys, level `i + 1` covers
/// the first keys of level `i`, and the top level has one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PgmModel {
    levels: Vec<Vec<PlaSegment>>,
    epsilon: u32,
    key_count: u64,
}

impl PgmModel {
    pub fn build(keys: &[u64], epsilon: u32) -> Result<Self> {
        build_recursive(keys, epsilon)
    }

    pub fn levels(&self) -> &[Vec<PlaSegment>] {
        &self.levels
    }

    pub fn epsilon(&self) -> u32 {
        self.epsilon
    }

    pub fn key_count(&self) -> usize {
        self.key_count as usize
    }

    pub fn segment_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Approximate rank of `key` in `[0, key_count)`. Within `±epsilon` of the
    /// rank of the largest trained key not above `key`; 0 below the first key.
    pub fn predict(&self, key: u64) -> usize {
        let leaf = &self.levels[0];
        if key < leaf[0].first_key {
            return 0;
        }
        let eps = self.epsilon as usize;
        let mut idx = 0;
        for lvl in (1..self.levels.len()).rev() {
            let below = &self.levels[lvl - 1];
            let p = predict_in(&self.levels[lvl], idx, key).min(below.len() - 1);
            let lo = p.saturating_sub(eps);
            let hi = (p + eps).min(below.len() - 1);
            idx = if below[lo].first_key > key
                || (hi + 1 < below.len() && below[hi + 1].first_key <= key)
            {
                // Outside the guaranteed window; only reachable through
                // floating-point pathologies.
                below.partition_point(|s| s.first_key <= key) - 1
            } else {
                lo + below[lo..=hi].partition_point(|s| s.first_key <= key) - 1
            };
        }
        predict_in(leaf, idx, key).min(self.key_count as usize - 1)
    }

    /// Serialized layout (little-endian):
    /// `[level_count u32][per level: count u32, (first_key u64, slope f64,
    /// intercept f64)*][epsilon u32][key_count u64]`.
    pub fn serialize_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for level in &self.levels {
            out.extend_from_slice(&(level.len() as u32).to_le_bytes());
            for s in level {
                out.extend_from_slice(&s.first_key.to_le_bytes());
                out.extend_from_slice(&s.slope.to_le_bytes());
                out.extend_from_slice(&s.intercept.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.key_count.to_le_bytes());
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.serialize_into(&mut out);
        out
    }

    pub fn serialized_len(&self) -> usize {
        4 + self.levels.iter().map(|l| 4 + l.len() * 24).sum::<usize>() + 4 + 8
    }

    /// Parses a model from the front of `bytes`, returning bytes consumed.
    pub fn deserialize(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = || Error::MalformedRecord("truncated or invalid PGM model");
        let mut cur = Cursor { bytes, pos: 0 };
        let level_count = cur.u32().ok_or_else(bad)? as usize;
        if level_count == 0 || level_count > 64 {
            return Err(bad());
        }
        let mut levels = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let n = cur.u32().ok_or_else(bad)? as usize;
            if n == 0 || n > bytes.len() / 24 {
                return Err(bad());
            }
            let mut level = Vec::with_capacity(n);
            for _ in 0..n {
                let first_key = cur.u64().ok_or_else(bad)?;
                let slope = f64::from_bits(cur.u64().ok_or_else(bad)?);
                let intercept = f64::from_bits(cur.u64().ok_or_else(bad)?);
                level.push(PlaSegment {
                    first_key,
                    slope,
                    intercept,
                });
            }
            levels.push(level);
        }
        let epsilon = cur.u32().ok_or_else(bad)?;
        let key_count = cur.u64().ok_or_else(bad)?;
        if levels.last().map(Vec::len) != Some(1) || key_count == 0 || epsilon == 0 {
            return Err(bad());
        }
        Ok((
            PgmModel {
                levels,
                epsilon,
                key_count,
            },
            cur.pos,
        ))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Builds levels bottom-up until a single segment remains.
pub fn build_recursive(keys: &[u64], epsilon: u32) -> Result<PgmModel> {
    let eps = epsilon.max(1);
    let mut levels = vec![build_pla_guarded(keys, eps)?];
    while levels.last().unwrap().len() > 1 {
        let firsts: Vec<u64> = levels.last().unwrap().iter().map(|s| s.first_key).collect();
        levels.push(build_pla_guarded(&firsts, eps)?);
    }
    Ok(PgmModel {
        levels,
        epsilon: eps,
        key_count: keys.len() as u64,
    })
}

use super::CorpusError;

/// `frames × joints × 2` keypoint trajectory in normalised screen units, plus
/// the indices of the hand keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    frames: usize,
    joints: usize,
    coords: Vec<f64>,
    hand_idx: Vec<usize>,
}

impl PoseSequence {
    pub fn new(
        frames: usize,
        joints: usize,
        coords: Vec<f64>,
        hand_idx: Vec<usize>,
    ) -> Result<Self, CorpusError> {
        if frames == 0 || joints == 0 {
            return Err(CorpusError::InvalidPose("empty pose".into()));
        }
        if coords.len() != frames * joints * 2 {
            return Err(CorpusError::InvalidPose(format!(
                "{} coordinates for {frames} frames x {joints} joints",
                coords.len()
            )));
        }
        if let Some(h) = hand_idx.iter().find(|&&h| h >= joints) {
            return Err(CorpusError::InvalidPose(format!(
                "hand index {h} out of range for {joints} joints"
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(CorpusError::InvalidPose("non-finite coordinate".into()));
        }
        Ok(Self {
            frames,
            joints,
            coords,
            hand_idx,
        })
    }

    pub fn constant(frames: usize, frame: &[f64], hand_idx: Vec<usize>) -> Result<Self, CorpusError> {
        let coords = frame.iter().copied().cycle().take(frames * frame.len()).collect();
        Self::new(frames, frame.len() / 2, coords, hand_idx)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn hand_idx(&self) -> &[usize] {
        &self.hand_idx
    }

    /// Flat row-major `frames × joints × 2` buffer.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    /// Values per frame (`joints × 2`).
    pub fn frame_width(&self) -> usize {
        self.joints * 2
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.frame_width();
        &self.coords[t * w..(t + 1) * w]
    }

    pub fn point(&self, t: usize, j: usize) -> [f64; 2] {
        let base = (t * self.joints + j) * 2;
        [self.coords[base], self.coords[base + 1]]
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, CorpusError> {
        if start >= end || end > self.frames {
            return Err(CorpusError::InvalidPose(format!(
                "slice {start}..{end} of {} frames",
                self.frames
            )));
        }
        let w = self.frame_width();
        Self::new(
            end - start,
            self.joints,
            self.coords[start * w..end * w].to_vec(),
            self.hand_idx.clone(),
        )
    }

    /// Concatenates along time. All parts must share joints and hand subset.
    pub fn concat(parts: &[PoseSequence]) -> Result<Self, CorpusError> {
        let first = parts
            .first()
            .ok_or_else(|| CorpusError::InvalidPose("concat of nothing".into()))?;
        let mut coords = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.joints != first.joints || p.hand_idx != first.hand_idx {
                return Err(CorpusError::InvalidPose(
                    "concat parts disagree on skeleton".into(),
                ));
            }
            coords.extend_from_slice(&p.coords);
            frames += p.frames;
        }
        Self::new(frames, first.joints, coords, first.hand_idx.clone())
    }

    /// Linear resampling in time to `frames` frames; endpoints are preserved.
    pub fn resample(&self, frames: usize) -> Result<Self, CorpusError> {
        if frames == self.frames {
            return Ok(self.clone());
        }
        if frames == 0 {
            return Err(CorpusError::InvalidPose("resample to zero frames".into()));
        }
        let w = self.frame_width();
        let mut coords = Vec::with_capacity(frames * w);
        for t in 0..frames {
            let pos = if frames == 1 {
                0.0
            } else {
                t as f64 * (self.frames - 1) as f64 / (frames - 1) as f64
            };
            let lo = (pos.floor() as usize).min(self.frames - 1);
            let hi = (lo + 1).min(self.frames - 1);
            let a = pos - lo as f64;
            let (fl, fh) = (self.frame(lo), self.frame(hi));
            coords.extend(fl.iter().zip(fh).map(|(l, h)| l + a * (h - l)));
        }
        Self::new(frames, self.joints, coords, self.hand_idx.clone())
    }

    /// Hand keypoints as `frames × |hand| × 2`, flat.
    pub fn hand_track(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames * self.hand_idx.len() * 2);
        for t in 0..self.frames {
            for &j in &self.hand_idx {
                out.extend_from_slice(&self.point(t, j));
            }
        }
        out
    }

    /// Smallest and largest coordinate value.
    pub fn value_range(&self) -> (f64, f64) {
        self.coords
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn to_nested(&self) -> Vec<Vec<[f64; 2]>> {
        (0..self.frames)
            .map(|t| (0..self.joints).map(|j| self.point(t, j)).collect())
            .collect()
    }

    pub fn from_nested(rows: &[Vec<[f64; 2]>], hand_idx: Vec<usize>) -> Result<Self, CorpusError> {
        let joints = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != joints) {
            return Err(CorpusError::InvalidPose("ragged frames".into()));
        }
        let coords = rows.iter().flatten().flat_map(|p| p.iter().copied()).collect();
        Self::new(rows.len(), joints, coords, hand_idx)
    }
}

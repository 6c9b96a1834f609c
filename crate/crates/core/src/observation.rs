//! Per-episode frame history and the three-frame windows fed to the encoders.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::cartpole::Frame;
use crate::error::{Error, Result};

pub const WINDOW_LEN: usize = 3;
/// Frames retained: enough for a y-window one step behind the newest frame.
pub const HISTORY_CAPACITY: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// `(f[t-2], f[t-1], f[t])`, the context for the decision at `t`.
    X,
    /// `(f[t-1], f[t], f[t+1])`, the prediction target for the decision at `t`.
    Y,
}

/// Ordered oldest to newest.
#[derive(Clone, Debug)]
pub struct ObservationWindow {
    pub kind: WindowKind,
    pub frames: [Arc<Frame>; WINDOW_LEN],
}

impl ObservationWindow {
    pub fn new(kind: WindowKind, frames: [Arc<Frame>; WINDOW_LEN]) -> Result<Self> {
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Config("window frames differ in size".into()));
        }
        Ok(ObservationWindow { kind, frames })
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

/// Ring of the most recent frames of one episode.
#[derive(Clone, Debug)]
pub struct FrameHistory {
    height: usize,
    width: usize,
    frames: VecDeque<Arc<Frame>>,
    /// Episode index of the newest frame plus one.
    pushed: usize,
}

impl FrameHistory {
    pub fn new(height: usize, width: usize) -> Self {
        FrameHistory {
            height,
            width,
            frames: VecDeque::with_capacity(HISTORY_CAPACITY),
            pushed: 0,
        }
    }

    /// Starts a new episode.
    pub fn reset(&mut self) {
        self.frames.clear();
        self.pushed = 0;
    }

    pub fn push_frame(&mut self, frame: impl Into<Arc<Frame>>) -> Result<()> {
        let frame = frame.into();
        if frame.height != self.height || frame.width != self.width {
            return Err(Error::Config(format!(
                "frame is {}x{}, history expects {}x{}",
                frame.height, frame.width, self.height, self.width
            )));
        }
        if self.frames.len() == HISTORY_CAPACITY {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        self.pushed += 1;
        Ok(())
    }

    /// Rebuilds a history from retained frames (oldest first) and the
    /// number of frames pushed in the episode so far.
    pub fn restore(height: usize, width: usize, frames: Vec<Arc<Frame>>, pushed: usize) -> Result<Self> {
        if frames.len() > HISTORY_CAPACITY || frames.len() > pushed || (pushed > 0 && frames.is_empty()) {
            return Err(Error::Config(format!(
                "cannot restore history of {} frames with {pushed} pushed",
                frames.len()
            )));
        }
        let mut h = FrameHistory::new(height, width);
        for f in frames {
            h.push_frame(f)?;
        }
        h.pushed = pushed;
        Ok(h)
    }

    /// Frames pushed since the episode started.
    pub fn pushed(&self) -> usize {
        self.pushed
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Episode index of the newest frame.
    pub fn newest_index(&self) -> Option<usize> {
        self.pushed.checked_sub(1)
    }

    /// Retained frames, oldest first.
    pub fn frames(&self) -> impl Iterator<Item = &Arc<Frame>> {
        self.frames.iter()
    }

    /// Frame at episode index `i`, clamped to the first frame of the episode.
    fn frame_at(&self, i: isize) -> Result<Arc<Frame>> {
        let i = i.max(0) as usize;
        let oldest = self.pushed - self.frames.len();
        if i < oldest || i >= self.pushed {
            return Err(Error::Usage(format!(
                "frame {i} not retained (history holds {oldest}..{})",
                self.pushed
            )));
        }
        Ok(self.frames[i - oldest].clone())
    }

    pub fn x_window(&self) -> Result<ObservationWindow> {
        let t = self
            .newest_index()
            .ok_or_else(|| Error::Usage("x_window on empty history".into()))? as isize;
        self.build(WindowKind::X, [t - 2, t - 1, t])
    }

    /// Target window for the decision taken at episode step `t`; `None` when
    /// `f[t+1]` was never observed (the episode terminated at `t`).
    pub fn y_window(&self, t: usize) -> Result<Option<ObservationWindow>> {
        match self.newest_index() {
            Some(newest) if newest > t => {
                let t = t as isize;
                self.build(WindowKind::Y, [t - 1, t, t + 1]).map(Some)
            }
            _ => Ok(None),
        }
    }

    fn build(&self, kind: WindowKind, idx: [isize; WINDOW_LEN]) -> Result<ObservationWindow> {
        Ok(ObservationWindow {
            kind,
            frames: [self.frame_at(idx[0])?, self.frame_at(idx[1])?, self.frame_at(idx[2])?],
        })
    }
}

//! Cart-pole physics and a software rasterizer that turns the hidden state
//! into grayscale frames.
//!
//! The agent never sees [`CartState`]; it only receives [`Frame`]s.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_THRESHOLD: f64 = 2.4;
pub const THETA_THRESHOLD: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const MAX_EPISODE_STEPS: u32 = 500;
pub const RESET_BOUND: f64 = 0.05;

pub const FRAME_SIZE: usize = 84;
pub const CART_WIDTH_PX: f64 = 16.0;
pub const CART_HEIGHT_PX: f64 = 8.0;
pub const POLE_LENGTH_PX: f64 = 34.0;
pub const POLE_WIDTH_PX: f64 = 3.0;
/// Vertical pixel coordinate of the cart center.
pub const TRACK_Y: f64 = 60.0;
pub const CART_INTENSITY: f32 = 0.6;
pub const POLE_INTENSITY: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Left = 0,
    Right = 1,
}

impl Action {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Action::Left),
            1 => Some(Action::Right),
            _ => None,
        }
    }

    pub fn force(self) -> f64 {
        match self {
            Action::Left => -FORCE_MAG,
            Action::Right => FORCE_MAG,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CartState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartState {
    pub fn alive(&self) -> bool {
        self.x.abs() <= X_THRESHOLD && self.theta.abs() <= THETA_THRESHOLD
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.x_dot.is_finite() && self.theta.is_finite() && self.theta_dot.is_finite()
    }

    pub fn negated(&self) -> Self {
        CartState {
            x: -self.x,
            x_dot: -self.x_dot,
            theta: -self.theta,
            theta_dot: -self.theta_dot,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        CartState {
            x: a[0],
            x_dot: a[1],
            theta: a[2],
            theta_dot: a[3],
        }
    }
}

/// Initial state with all four fields uniform in `[-0.05, 0.05]`.
pub fn reset_with<G: Rng + ?Sized>(rng: &mut G) -> CartState {
    let mut draw = || rng.random_range(-RESET_BOUND..=RESET_BOUND);
    CartState {
        x: draw(),
        x_dot: draw(),
        theta: draw(),
        theta_dot: draw(),
    }
}

pub fn reset(seed: u64) -> CartState {
    reset_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// One explicit-Euler step of the cart-pole equations of motion.
pub fn dynamics(s: &CartState, action: Action) -> CartState {
    let force = action.force();
    let total_mass = CART_MASS + POLE_MASS;
    let pole_mass_length = POLE_MASS * POLE_HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pole_mass_length * s.theta_dot * s.theta_dot * sin) / total_mass;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    CartState {
        x: s.x + TAU * s.x_dot,
        x_dot: s.x_dot + TAU * x_acc,
        theta: s.theta + TAU * s.theta_dot,
        theta_dot: s.theta_dot + TAU * theta_acc,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: CartState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Stateless step: advances `state` and classifies the outcome.
/// `steps_taken` counts steps already taken in the episode.
pub fn step(state: &CartState, action: Action, steps_taken: u32) -> StepResult {
    let was_alive = state.alive();
    let next_state = dynamics(state, action);
    let terminated = !next_state.alive();
    StepResult {
        next_state,
        reward: if was_alive { 1.0 } else { 0.0 },
        terminated,
        truncated: !terminated && steps_taken + 1 >= MAX_EPISODE_STEPS,
    }
}

/// A single episode-tracking environment instance.
#[derive(Clone, Debug)]
pub struct CartPoleEnv {
    pub state: CartState,
    pub steps: u32,
    pub terminated: bool,
}

impl CartPoleEnv {
    pub fn new(state: CartState) -> Self {
        CartPoleEnv {
            state,
            steps: 0,
            terminated: false,
        }
    }

    pub fn step(&mut self, action: Action) -> StepResult {
        let mut r = step(&self.state, action, self.steps);
        if self.terminated {
            r.reward = 0.0;
            r.terminated = true;
            r.truncated = false;
        }
        self.state = r.next_state;
        self.steps += 1;
        self.terminated |= r.terminated;
        r
    }

    pub fn render(&self) -> Frame {
        render(&self.state)
    }
}

/// Grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Frame {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Config(format!(
                "frame buffer has {} pixels, expected {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Frame { height, width, pixels })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn mirrored(&self) -> Frame {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.pixels[r * self.width + c] = self.get(r, self.width - 1 - c);
            }
        }
        out
    }

    /// Box-filter downsampling by an integer factor dividing both sides.
    pub fn downsample(&self, factor: usize) -> Result<Frame> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let mut pixels = vec![0.0f32; h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                pixels[(r / factor) * w + c / factor] += self.get(r, c);
            }
        }
        pixels.iter_mut().for_each(|v| *v *= inv);
        Ok(Frame {
            height: h,
            width: w,
            pixels,
        })
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Screen column of the cart center, clamped so the cart stays in frame.
fn cart_screen_x(x: f64) -> f64 {
    let w = FRAME_SIZE as f64;
    let cx = (x + X_THRESHOLD) / (2.0 * X_THRESHOLD) * w;
    cx.clamp(CART_WIDTH_PX / 2.0, w - CART_WIDTH_PX / 2.0)
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Rasterizes the cart and pole. Reads only `x` and `theta`.
pub fn render(state: &CartState) -> Frame {
    let n = FRAME_SIZE;
    let mut frame = Frame::zeros(n, n);
    let cx = cart_screen_x(state.x);
    let cy = TRACK_Y;
    let (sin, cos) = state.theta.sin_cos();
    let (tip_x, tip_y) = (cx + POLE_LENGTH_PX * sin, cy - POLE_LENGTH_PX * cos);
    let half_w = POLE_WIDTH_PX / 2.0;
    for r in 0..n {
        let py = r as f64 + 0.5;
        for c in 0..n {
            let px = c as f64 + 0.5;
            let idx = r * n + c;
            if (px - cx).abs() < CART_WIDTH_PX / 2.0 && (py - cy).abs() < CART_HEIGHT_PX / 2.0 {
                frame.pixels[idx] = CART_INTENSITY;
            }
            if dist_to_segment(px, py, cx, cy, tip_x, tip_y) <= half_w {
                frame.pixels[idx] = POLE_INTENSITY;
            }
        }
    }
    frame
}

/// Renders at `size x size`, box-filtering the native frame when `size`
/// is a proper divisor of [`FRAME_SIZE`].
pub fn render_sized(state: &CartState, size: usize) -> Result<Frame> {
    let frame = render(state);
    if size == FRAME_SIZE {
        return Ok(frame);
    }
    if size == 0 || !FRAME_SIZE.is_multiple_of(size) {
        return Err(Error::Config(format!("frame size {size} does not divide {FRAME_SIZE}")));
    }
    frame.downsample(FRAME_SIZE / size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsampling_averages_blocks() {
        let f = Frame::from_pixels(2, 4, vec![1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5]).unwrap();
        let d = f.downsample(2).unwrap();
        assert_eq!((d.height, d.width), (1, 2));
        assert_eq!(d.pixels, vec![0.5, 0.5]);
        assert!(f.downsample(3).is_err());
        let s = render_sized(&CartState::default(), 28).unwrap();
        let full = render(&CartState::default());
        let total: f32 = full.pixels.iter().sum();
        assert!((s.pixels.iter().sum::<f32>() * 9.0 - total).abs() < 1e-3);
        assert!(render_sized(&CartState::default(), 50).is_err());
    }

    #[test]
    fn reset_is_deterministic_and_alive() {
        assert_eq!(reset(7), reset(7));
        for seed in 0..200 {
            let s = reset(seed);
            assert!(s.alive());
            assert!(s.to_array().iter().all(|v| v.abs() <= RESET_BOUND));
        }
    }

    #[test]
    fn reset_fields_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut sums = [0.0; 4];
        for _ in 0..n {
            let s = reset_with(&mut rng).to_array();
            for k in 0..4 {
                sums[k] += s[k];
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.005);
        }
    }

    #[test]
    fn left_and_right_from_rest_are_mirror_images() {
        let zero = CartState::default();
        let r = dynamics(&zero, Action::Right);
        let l = dynamics(&zero, Action::Left);
        assert_eq!(r.negated(), l);
    }

    #[test]
    fn step_from_rest_matches_hand_evaluation() {
        // Precomputed: temp = 10/1.1; theta_acc = -temp / (0.5 (4/3 - 0.1/1.1));
        // x_acc = temp - 0.05 theta_acc / 1.1.
        let temp = 10.0 / 1.1;
        let theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        let x_acc = temp - 0.05 * theta_acc / 1.1;
        let s = dynamics(&CartState::default(), Action::Right);
        assert_eq!(s.x, 0.0);
        assert_eq!(s.theta, 0.0);
        assert!((s.x_dot - 0.02 * x_acc).abs() < 1e-15);
        assert!((s.theta_dot - 0.02 * theta_acc).abs() < 1e-15);
        // Frozen numeric values of the same quantities.
        assert!((s.x_dot - 0.195_121_951_219_512_2).abs() < 1e-12);
        assert!((s.theta_dot - (-0.292_682_926_829_268_3)).abs() < 1e-12);
    }

    #[test]
    fn dead_state_terminates_regardless_of_action() {
        let dead = CartState {
            theta: 0.3,
            ..Default::default()
        };
        assert!(step(&dead, Action::Left, 0).terminated);
        assert!(step(&dead, Action::Right, 0).terminated);
    }

    #[test]
    fn always_left_episode_is_short_and_deterministic() {
        let run = || {
            let mut env = CartPoleEnv::new(reset(3));
            let mut len = 0;
            loop {
                let r = env.step(Action::Left);
                len += 1;
                if r.terminated || r.truncated {
                    return len;
                }
            }
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a < MAX_EPISODE_STEPS);
    }

    #[test]
    fn truncation_at_max_steps() {
        let s = CartState::default();
        let r = step(&s, Action::Left, MAX_EPISODE_STEPS - 1);
        assert!(r.truncated && !r.terminated);
        assert!(!step(&s, Action::Left, MAX_EPISODE_STEPS - 2).truncated);
    }

    #[test]
    fn reward_stops_after_termination() {
        let mut env = CartPoleEnv::new(CartState {
            theta: 0.2,
            theta_dot: 2.0,
            ..Default::default()
        });
        let first = env.step(Action::Left);
        assert!(first.terminated);
        assert_eq!(first.reward, 1.0);
        assert_eq!(env.step(Action::Left).reward, 0.0);
    }

    #[test]
    fn centered_frame_is_symmetric() {
        let f = render(&CartState::default());
        assert_eq!(f, f.mirrored());
        let cart = f.pixels.iter().filter(|&&v| v == CART_INTENSITY).count();
        let pole = f.pixels.iter().filter(|&&v| v == POLE_INTENSITY).count();
        assert!(cart > 0 && pole > 0);
        // pole pixels lie in a vertical band around the center column
        for r in 0..FRAME_SIZE {
            for c in 0..FRAME_SIZE {
                if f.get(r, c) == POLE_INTENSITY {
                    assert!((c as f64 + 0.5 - 42.0).abs() <= 1.5);
                }
            }
        }
    }

    #[test]
    fn render_ignores_velocities_and_is_deterministic() {
        let a = CartState {
            x: 0.7,
            theta: 0.1,
            ..Default::default()
        };
        let b = CartState {
            theta_dot: 3.0,
            x_dot: -1.0,
            ..a
        };
        assert_eq!(render(&a), render(&b));
        assert_eq!(render(&a), render(&a));
        assert!(render(&a).pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn out_of_range_cart_is_clamped_into_view() {
        let f = render(&CartState {
            x: 10.0,
            ..Default::default()
        });
        assert!(f.pixels.contains(&CART_INTENSITY));
    }

    #[test]
    fn pgm_header_and_size() {
        let f = render(&CartState::default());
        let bytes = f.to_pgm();
        let header = b"P5\n84 84\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 84 * 84);
    }
}

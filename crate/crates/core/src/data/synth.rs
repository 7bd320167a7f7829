//! Procedural cities for desk-scale experiments.
//!
//! A city is a lattice of one-cell-wide corridors (rows, columns and
//! diagonals at seeded offsets). Each corridor carries two opposite flows;
//! the volume injected at position `s` along a corridor is
//! `a (1 + 0.5 sin(ω t + φ - κ s))`, after which the volume is diffused
//! along road cells with symmetric, mass-preserving exchanges. Speed is
//! `s_max (1 - v / v_max)` clamped at 0 on road and 0 off road.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DIRECTIONS, FRAME_CHANNELS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub rows: usize,
    pub columns: usize,
    pub diagonals: usize,
    pub amplitude: [f64; 2],
    /// Demand period range, in frames.
    pub period: [f64; 2],
    /// Phase advance per cell along a corridor.
    pub wave_number: f64,
    pub s_max: f64,
    pub v_max: f64,
    pub diffusion: f64,
    pub diffusion_steps: usize,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            rows: 3,
            columns: 3,
            diagonals: 1,
            amplitude: [0.5, 2.0],
            period: [12.0, 36.0],
            wave_number: 0.3,
            s_max: 1.0,
            v_max: 8.0,
            diffusion: 0.1,
            diffusion_steps: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Orientation {
    Row,
    Column,
    /// Top-left to bottom-right.
    Diagonal,
    /// Top-right to bottom-left.
    AntiDiagonal,
}

/// One flow along one corridor.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSpec {
    pub direction: usize,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
    /// Traversal order matters for the `κ s` term.
    pub cells: Vec<(usize, usize)>,
}

impl FlowSpec {
    pub fn volume_at(&self, t: usize, s: usize, kappa: f64) -> f64 {
        self.amplitude * (1.0 + 0.5 * (self.omega * t as f64 + self.phase - kappa * s as f64).sin())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCity {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub profile: SynthProfile,
    pub road: Vec<bool>,
    pub corridors: Vec<(Orientation, Vec<(usize, usize)>)>,
}

fn validate(h: usize, w: usize, t: usize, profile: &SynthProfile) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
        return Err(Error::Validation(format!("synthetic grid must be a multiple of 4 and at least 8, got {h}x{w}")));
    }
    if t < 24 {
        return Err(Error::Validation(format!("synthetic movies need T >= 24, got {t}")));
    }
    let p = profile;
    let ok = p.amplitude[0] > 0.0
        && p.amplitude[1] >= p.amplitude[0]
        && p.period[0] > 0.0
        && p.period[1] >= p.period[0]
        && p.s_max > 0.0
        && p.v_max > 0.0
        && (0.0..=0.2).contains(&p.diffusion)
        && p.rows + p.columns + p.diagonals > 0;
    if !ok {
        return Err(Error::Config(format!("invalid synthetic profile {p:?}")));
    }
    Ok(())
}

/// Distinct offsets in `[1, n - 1)`, kept at least 2 apart where possible.
fn offsets(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (1..n - 1).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !pool.is_empty() {
        let i = rng.gen_range(0..pool.len());
        let v = pool[i];
        out.push(v);
        pool.retain(|&p| p.abs_diff(v) >= 2);
    }
    out.sort_unstable();
    out
}

impl SynthCity {
    pub fn new(seed: u64, h: usize, w: usize, profile: SynthProfile) -> Result<Self> {
        validate(h, w, 24, &profile)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corridors = Vec::new();
        for r in offsets(&mut rng, h, profile.rows) {
            corridors.push((Orientation::Row, (0..w).map(|x| (r, x)).collect()));
        }
        for c in offsets(&mut rng, w, profile.columns) {
            corridors.push((Orientation::Column, (0..h).map(|y| (y, c)).collect()));
        }
        for i in 0..profile.diagonals {
            let shift = rng.gen_range(0..w / 2) as isize - (w / 4) as isize;
            let anti = i % 2 == 1;
            let cells: Vec<(usize, usize)> = (0..h)
                .filter_map(|y| {
                    let x = if anti { w as isize - 1 - y as isize + shift } else { y as isize + shift };
                    (0..w as isize).contains(&x).then_some((y, x as usize))
                })
                .collect();
            let o = if anti { Orientation::AntiDiagonal } else { Orientation::Diagonal };
            corridors.push((o, cells));
        }
        let mut road = vec![false; h * w];
        for (_, cells) in &corridors {
            for &(y, x) in cells {
                road[y * w + x] = true;
            }
        }
        Ok(Self { seed, height: h, width: w, profile, road, corridors })
    }

    /// Binary road map `(H, W)`.
    pub fn road_map<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[self.height, self.width], |i| if self.road[i] { S::one() } else { S::zero() })
    }

    /// Flows for recording `day`; each day draws fresh amplitudes, periods
    /// and phases from `(seed, day)`.
    pub fn flows(&self, day: u64) -> Vec<FlowSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(day + 1));
        let p = &self.profile;
        let mut out = Vec::new();
        for (o, cells) in &self.corridors {
            let (fwd, bwd) = match o {
                Orientation::Row => (1, 3),
                Orientation::Column => (2, 0),
                Orientation::Diagonal => (1, 2),
                Orientation::AntiDiagonal => (3, 2),
            };
            for (direction, reverse) in [(fwd, false), (bwd, true)] {
                let amplitude = rng.gen_range(p.amplitude[0]..=p.amplitude[1]);
                let period = rng.gen_range(p.period[0]..=p.period[1]);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut cells = cells.clone();
                if reverse {
                    cells.reverse();
                }
                out.push(FlowSpec { direction, amplitude, omega: std::f64::consts::TAU / period, phase, cells });
            }
        }
        out
    }

    /// Total injected volume at frame `t`, summed straight from the generator.
    pub fn closed_form_total(&self, day: u64, t: usize) -> f64 {
        let k = self.profile.wave_number;
        self.flows(day)
            .iter()
            .map(|f| (0..f.cells.len()).map(|s| f.volume_at(t, s, k)).sum::<f64>())
            .sum()
    }

    fn diffuse(&self, plane: &mut [f64], scratch: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        let a = self.profile.diffusion;
        for _ in 0..self.profile.diffusion_steps {
            scratch.copy_from_slice(plane);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !self.road[i] {
                        continue;
                    }
                    // each road-road edge is visited once (right and down)
                    for (ny, nx) in [(y, x + 1), (y + 1, x)] {
                        if ny < h && nx < w && self.road[ny * w + nx] {
                            let j = ny * w + nx;
                            let flux = a * (plane[j] - plane[i]);
                            scratch[i] += flux;
                            scratch[j] -= flux;
                        }
                    }
                }
            }
            plane.copy_from_slice(scratch);
        }
    }

    /// Movie `(T, H, W, 8)` for recording `day`.
    pub fn movie<S: Scalar>(&self, day: u64, t_len: usize) -> Result<Tensor<S>> {
        validate(self.height, self.width, t_len, &self.profile)?;
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let flows = self.flows(day);
        let k = self.profile.wave_number;
        let mut out = vec![S::zero(); t_len * plane * FRAME_CHANNELS];
        let mut vol = vec![0.0; DIRECTIONS * plane];
        let mut scratch = vec![0.0; plane];
        for t in 0..t_len {
            vol.iter_mut().for_each(|v| *v = 0.0);
            for f in &flows {
                for (s, &(y, x)) in f.cells.iter().enumerate() {
                    vol[f.direction * plane + y * w + x] += f.volume_at(t, s, k);
                }
            }
            for d in 0..DIRECTIONS {
                self.diffuse(&mut vol[d * plane..(d + 1) * plane], &mut scratch);
            }
            let frame = &mut out[t * plane * FRAME_CHANNELS..(t + 1) * plane * FRAME_CHANNELS];
            for i in 0..plane {
                if !self.road[i] {
                    continue;
                }
                for d in 0..DIRECTIONS {
                    let v = vol[d * plane + i];
                    let speed = (self.profile.s_max * (1.0 - v / self.profile.v_max)).max(0.0);
                    frame[i * FRAME_CHANNELS + 2 * d] = S::lit(v);
                    frame[i * FRAME_CHANNELS + 2 * d + 1] = S::lit(speed);
                }
            }
        }
        Tensor::new(&[t_len, h, w, FRAME_CHANNELS], out)
    }
}

/// Movie and road map for day 0 of city `seed`.
pub fn synth_city<S: Scalar>(seed: u64, h: usize, w: usize, t: usize, profile: &SynthProfile) -> Result<(Tensor<S>, Tensor<S>)> {
    validate(h, w, t, profile)?;
    let city = SynthCity::new(seed, h, w, profile.clone())?;
    Ok((city.movie(0, t)?, city.road_map()))
}

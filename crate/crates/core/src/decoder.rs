//! Progressive multi-step decoder.
//!
//! A shared spatial context is computed once; a GRU state seeded from its
//! global average is advanced once per future frame, projected to a
//! per-channel embedding, added to the context, and decoded by separate
//! volume and speed heads whose outputs are interleaved into the
//! eight-channel frame.

use crate::error::{dim_err, param_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, Conv2d, GruCell, Init, Linear, ParamStore};
use crate::scalar::Scalar;

/// Directions per frame; each carries a volume and a speed channel.
pub const DIRECTIONS: usize = 4;
pub const FRAME_CHANNELS: usize = 2 * DIRECTIONS;

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub context1: Conv2d,
    pub context2: Conv2d,
    pub init_state: Linear,
    pub gru: GruCell,
    pub embed: Linear,
    pub shared: Conv2d,
    pub volume_head: Conv2d,
    pub speed_head: Conv2d,
    pub channels: usize,
    pub hidden: usize,
}

impl DecoderParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, channels: usize, hidden: usize) -> Self {
        Self {
            context1: Conv2d::new(store, init, "decoder.context1", channels, channels, 3),
            context2: Conv2d::new(store, init, "decoder.context2", channels, channels, 3),
            init_state: Linear::new(store, init, "decoder.init_state", channels, hidden, true),
            gru: GruCell::new(store, init, "decoder.gru", channels, hidden),
            embed: Linear::new(store, init, "decoder.embed", hidden, channels, true),
            shared: Conv2d::new(store, init, "decoder.shared", channels, channels, 3),
            volume_head: Conv2d::new(store, init, "decoder.volume_head", channels, DIRECTIONS, 1),
            speed_head: Conv2d::new(store, init, "decoder.speed_head", channels, DIRECTIONS, 1),
            channels,
            hidden,
        }
    }

    /// `fused (B, C_f, H, W)` -> forecast `(B, T_out, 8, H, W)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, fused: Var, t_out: usize) -> Result<Var> {
        if t_out < 1 {
            return Err(param_err!("T_out must be >= 1"));
        }
        let s = g.shape(fused).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(dim_err!("decoder expects (B, {}, H, W), got {s:?}", self.channels));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);

        let ctx = self.context1.forward(g, p, fused)?;
        let ctx = g.relu(ctx)?;
        let ctx = self.context2.forward(g, p, ctx)?;

        let mut z = g.gap(ctx)?;
        let h0 = self.init_state.forward(g, p, z)?;
        let mut state = g.tanh(h0)?;

        let mut frames = Vec::with_capacity(t_out);
        for _ in 0..t_out {
            state = self.gru.step(g, p, z, state)?;
            let e = self.embed.forward(g, p, state)?;
            let e = g.reshape(e, &[b, c, 1, 1])?;
            let step_feat = g.add(ctx, e)?;
            let q = self.shared.forward(g, p, step_feat)?;
            let q = g.relu(q)?;
            let vol = self.volume_head.forward(g, p, q)?;
            let spd = self.speed_head.forward(g, p, q)?;
            let frame = interleave(g, vol, spd)?;
            frames.push(g.reshape(frame, &[b, 1, FRAME_CHANNELS, h, w])?);
            z = g.gap(step_feat)?;
        }
        g.concat(&frames, 1)
    }
}

/// `vol, spd (B, 4, H, W)` -> `(B, 8, H, W)` ordered
/// `[vol_0, spd_0, vol_1, spd_1, ...]`.
pub fn interleave<S: Scalar>(g: &mut Graph<S>, vol: Var, spd: Var) -> Result<Var> {
    let (vs, ss) = (g.shape(vol).to_vec(), g.shape(spd).to_vec());
    if vs.len() != 4 || vs[1] != DIRECTIONS || vs != ss {
        return Err(dim_err!("interleave needs two (B, {DIRECTIONS}, H, W) tensors, got {vs:?} and {ss:?}"));
    }
    let split = [vs[0], DIRECTIONS, 1, vs[2], vs[3]];
    let v = g.reshape(vol, &split)?;
    let s = g.reshape(spd, &split)?;
    let pair = g.concat(&[v, s], 2)?;
    g.reshape(pair, &[vs[0], FRAME_CHANNELS, vs[2], vs[3]])
}

/// Inverse of [`interleave`].
pub fn deinterleave<S: Scalar>(g: &mut Graph<S>, frame: Var) -> Result<(Var, Var)> {
    let s = g.shape(frame).to_vec();
    if s.len() != 4 || s[1] != FRAME_CHANNELS {
        return Err(dim_err!("deinterleave needs (B, {FRAME_CHANNELS}, H, W), got {s:?}"));
    }
    let pair = g.reshape(frame, &[s[0], DIRECTIONS, 2, s[2], s[3]])?;
    let v = g.narrow(pair, 2, 0, 1)?;
    let sp = g.narrow(pair, 2, 1, 1)?;
    let shape = [s[0], DIRECTIONS, s[2], s[3]];
    Ok((g.reshape(v, &shape)?, g.reshape(sp, &shape)?))
}

//! Grid ↔ token conversion for the data modality.
//!
//! A trajectory window `[T0, C, H, W]` becomes a sequence of patch tokens:
//! channels are zero-padded to [`C_MAX`], each frame is cut into
//! `p × p` patches, and every patch at every timestamp flattens
//! (channel-major) into one token. Token order is time-major, then row-major
//! over patches. The inverse reassembles decoder outputs into frames and
//! drops the padded channels. Both directions are pure reshapes and
//! permutes, so the round trip is bitwise exact and fully differentiable.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Unified channel count across families; real channels are zero-padded up
/// to this and masked out of the loss.
pub const C_MAX: usize = 4;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("grid side {h} is not divisible by patches-per-side {p}")]
    NotDivisible { h: usize, p: usize },
    #[error("{c} channels exceed the padded maximum {c_max}")]
    TooManyChannels { c: usize, c_max: usize },
    #[error("expected {expected}, got shape {got:?}")]
    BadShape { expected: String, got: Vec<usize> },
    #[error("token count {got} does not match frames × patches = {expected}")]
    CountMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Patch geometry: `p_in`/`p_out` are patches *per side*, so a frame holds
/// `p_in²` input patches of resolution `(h/p_in)²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub p_in: usize,
    pub p_out: usize,
    pub h: usize,
    pub c_max: usize,
}

impl PatchConfig {
    pub fn new(p_in: usize, p_out: usize, h: usize) -> Result<Self, PatchError> {
        for p in [p_in, p_out] {
            if p == 0 || h % p != 0 {
                return Err(PatchError::NotDivisible { h, p });
            }
        }
        Ok(Self { p_in, p_out, h, c_max: C_MAX })
    }

    /// Content width of one input token: `c_max · (h/p_in)²`.
    pub fn token_dim_in(&self) -> usize {
        self.c_max * (self.h / self.p_in).pow(2)
    }

    /// Content width of one output token: `c_max · (h/p_out)²`.
    pub fn token_dim_out(&self) -> usize {
        self.c_max * (self.h / self.p_out).pow(2)
    }

    pub fn tokens_per_frame_in(&self) -> usize {
        self.p_in * self.p_in
    }

    pub fn tokens_per_frame_out(&self) -> usize {
        self.p_out * self.p_out
    }
}

/// One stored trajectory: a `[t_total, c, h, w]` block of physical values.
#[derive(Debug, Clone)]
pub struct TrajectoryField {
    pub values: Vec<f64>,
    pub t_total: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub dt: f64,
    pub channel_names: Vec<String>,
    pub family_id: u32,
}

impl TrajectoryField {
    pub fn new(
        values: Vec<f64>,
        t_total: usize,
        c: usize,
        h: usize,
        w: usize,
        dt: f64,
        channel_names: Vec<String>,
        family_id: u32,
    ) -> Result<Self, PatchError> {
        if h != w {
            return Err(PatchError::BadShape {
                expected: "a square grid (h == w)".into(),
                got: vec![t_total, c, h, w],
            });
        }
        if c > C_MAX || c != channel_names.len() {
            return Err(PatchError::TooManyChannels { c, c_max: C_MAX });
        }
        if values.len() != t_total * c * h * w {
            return Err(PatchError::BadShape {
                expected: format!("{} values for [t,c,h,w]", t_total * c * h * w),
                got: vec![values.len()],
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(PatchError::NonFinite { index });
        }
        Ok(Self { values, t_total, c, h, w, dt, channel_names, family_id })
    }

    /// The `[len, c, h, w]` sub-block starting at frame `start`, as a tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor, PatchError> {
        if start + len > self.t_total {
            return Err(PatchError::CountMismatch { expected: self.t_total, got: start + len });
        }
        let frame = self.c * self.h * self.w;
        let data = self.values[start * frame..(start + len) * frame].to_vec();
        Ok(Tensor::from_vec(data, &[len, self.c, self.h, self.w])?)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let frame = self.c * self.h * self.w;
        &self.values[t * frame..(t + 1) * frame]
    }
}

fn split_batch(x: &Tensor) -> Result<(Tensor, bool, Vec<usize>), PatchError> {
    match x.rank() {
        4 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.reshape(&s)?, false, x.shape().to_vec()))
        }
        5 => Ok((x.clone(), true, x.shape().to_vec())),
        _ => Err(PatchError::BadShape {
            expected: "[t, c, h, w] or [batch, t, c, h, w]".into(),
            got: x.shape().to_vec(),
        }),
    }
}

/// Cuts a window into patch tokens: `[B, T0, C, H, W] → [B, T0·p_in², D_in]`
/// (rank-4 input gives rank-2 output). Channels are zero-padded to `c_max`
/// first; each token flattens its patch channel-major.
pub fn patchify(x: &Tensor, cfg: &PatchConfig) -> Result<Tensor, PatchError> {
    let (x5, batched, orig) = split_batch(x)?;
    let (b, t, c, h, w) = (
        x5.shape()[0],
        x5.shape()[1],
        x5.shape()[2],
        x5.shape()[3],
        x5.shape()[4],
    );
    if h != cfg.h || w != cfg.h {
        return Err(PatchError::BadShape { expected: format!("grid side {}", cfg.h), got: orig });
    }
    if c > cfg.c_max {
        return Err(PatchError::TooManyChannels { c, c_max: cfg.c_max });
    }
    let padded = if c == cfg.c_max {
        x5
    } else {
        let pad = Tensor::zeros(&[b, t, cfg.c_max - c, h, w]);
        Tensor::concat(&[x5, pad], 2)?
    };
    let (p, s) = (cfg.p_in, h / cfg.p_in);
    // [b, t, cm, (p s), (p s)] → [b, t, cm, p, s, p, s] → [b, t, p, p, cm, s, s]
    let t7 = padded.reshape(&[b, t, cfg.c_max, p, s, p, s])?;
    let perm = t7.permute(&[0, 1, 3, 5, 2, 4, 6])?;
    let out = perm.reshape(&[b, t * p * p, cfg.c_max * s * s])?;
    if batched {
        Ok(out)
    } else {
        Ok(out.reshape(&[t * p * p, cfg.c_max * s * s])?)
    }
}

/// Reassembles output tokens into frames: `[B, T·p_out², D_out] → [B, T, C, H, W]`
/// keeping the first `c` channels (rank-2 input gives rank-4 output).
pub fn unpatchify(tokens: &Tensor, cfg: &PatchConfig, c: usize, t: usize) -> Result<Tensor, PatchError> {
    if c > cfg.c_max {
        return Err(PatchError::TooManyChannels { c, c_max: cfg.c_max });
    }
    let (tok3, batched) = match tokens.rank() {
        2 => {
            let mut s = vec![1];
            s.extend_from_slice(tokens.shape());
            (tokens.reshape(&s)?, false)
        }
        3 => (tokens.clone(), true),
        _ => {
            return Err(PatchError::BadShape {
                expected: "[tokens, dim] or [batch, tokens, dim]".into(),
                got: tokens.shape().to_vec(),
            })
        }
    };
    let (b, l, d) = (tok3.shape()[0], tok3.shape()[1], tok3.shape()[2]);
    let (p, s) = (cfg.p_out, cfg.h / cfg.p_out);
    if l != t * p * p {
        return Err(PatchError::CountMismatch { expected: t * p * p, got: l });
    }
    if d != cfg.c_max * s * s {
        return Err(PatchError::CountMismatch { expected: cfg.c_max * s * s, got: d });
    }
    // [b, t, p, p, cm, s, s] → [b, t, cm, p, s, p, s] → [b, t, cm, h, w]
    let t7 = tok3.reshape(&[b, t, p, p, cfg.c_max, s, s])?;
    let perm = t7.permute(&[0, 1, 4, 2, 5, 3, 6])?;
    let full = perm.reshape(&[b, t, cfg.c_max, cfg.h, cfg.h])?;
    let real = full.slice(2, 0, c)?;
    if batched {
        Ok(real)
    } else {
        Ok(real.reshape(&[t, c, cfg.h, cfg.h])?)
    }
}

/// Timestamp of each input token: `p²` copies of each frame index, in order.
pub fn input_time_indices(t0: usize, p: usize) -> Vec<usize> {
    (0..t0).flat_map(|t| std::iter::repeat(t).take(p * p)).collect()
}

/// Patch position of each input token: `0..p²` repeated per frame.
pub fn input_patch_indices(t0: usize, p: usize) -> Vec<usize> {
    (0..t0).flat_map(|_| 0..p * p).collect()
}

/// Per-sample, per-channel statistics of an input window, used to normalize
/// both the window and its prediction targets.
#[derive(Debug, Clone)]
pub struct WindowStats {
    /// `[b · c]` means, sample-major.
    pub mean: Vec<f64>,
    /// `[b · c]` standard deviations, floored at 1e-7 so constant channels
    /// stay finite.
    pub std: Vec<f64>,
    pub b: usize,
    pub c: usize,
}

/// Computes mean/std of each `(sample, channel)` over all frames and grid
/// points of `window` (`[B, T0, C, H, W]`).
pub fn window_stats(window: &Tensor) -> Result<WindowStats, PatchError> {
    if window.rank() != 5 {
        return Err(PatchError::BadShape {
            expected: "[batch, t, c, h, w]".into(),
            got: window.shape().to_vec(),
        });
    }
    let s = window.shape();
    let (b, t, c, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let data = window.data();
    let mut mean = vec![0.0; b * c];
    let mut std = vec![0.0; b * c];
    let n = (t * hw) as f64;
    for bi in 0..b {
        for ci in 0..c {
            let mut sum = 0.0;
            for ti in 0..t {
                let base = ((bi * t + ti) * c + ci) * hw;
                sum += data[base..base + hw].iter().sum::<f64>();
            }
            let m = sum / n;
            let mut sq = 0.0;
            for ti in 0..t {
                let base = ((bi * t + ti) * c + ci) * hw;
                sq += data[base..base + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[bi * c + ci] = m;
            std[bi * c + ci] = (sq / n).sqrt().max(1e-7);
        }
    }
    Ok(WindowStats { mean, std, b, c })
}

fn apply_stats(x: &Tensor, stats: &WindowStats, forward: bool) -> Result<Tensor, PatchError> {
    if x.rank() != 5 || x.shape()[0] != stats.b || x.shape()[2] != stats.c {
        return Err(PatchError::BadShape {
            expected: format!("[{}, t, {}, h, w]", stats.b, stats.c),
            got: x.shape().to_vec(),
        });
    }
    let s = x.shape();
    let (t, hw) = (s[1], s[3] * s[4]);
    let data = x.data();
    let mut out = Vec::with_capacity(data.len());
    for bi in 0..stats.b {
        for ti in 0..t {
            for ci in 0..stats.c {
                let (m, sd) = (stats.mean[bi * stats.c + ci], stats.std[bi * stats.c + ci]);
                let base = ((bi * t + ti) * stats.c + ci) * hw;
                if forward {
                    out.extend(data[base..base + hw].iter().map(|v| (v - m) / sd));
                } else {
                    out.extend(data[base..base + hw].iter().map(|v| v * sd + m));
                }
            }
        }
    }
    let shape = s.to_vec();
    drop(data);
    Ok(Tensor::from_vec(out, &shape)?)
}

/// `(x - mean) / std` per sample and channel. Produces a fresh leaf: the
/// statistics come from input data, so nothing differentiates through them.
pub fn normalize(x: &Tensor, stats: &WindowStats) -> Result<Tensor, PatchError> {
    apply_stats(x, stats, true)
}

/// Inverse of [`normalize`]: `x · std + mean`.
pub fn denormalize(x: &Tensor, stats: &WindowStats) -> Result<Tensor, PatchError> {
    apply_stats(x, stats, false)
}

/// Embeds patch tokens: linear content projection plus time and patch
/// position table lookups. `tokens` is `[B, L, D]` (or `[L, D]`); the index
/// slices give each token's row in the two tables.
pub fn add_encodings(
    tokens: &Tensor,
    proj_w: &Tensor,
    proj_b: &Tensor,
    time_table: &Tensor,
    pos_table: &Tensor,
    time_idx: &[usize],
    patch_idx: &[usize],
) -> Result<Tensor, PatchError> {
    let l = tokens.shape()[tokens.rank() - 2];
    if time_idx.len() != l || patch_idx.len() != l {
        return Err(PatchError::CountMismatch { expected: l, got: time_idx.len().min(patch_idx.len()) });
    }
    let content = tokens.matmul(proj_w)?.add(proj_b)?;
    let time_emb = time_table.gather(time_idx)?;
    let pos_emb = pos_table.gather(patch_idx)?;
    // [B, L, d] + [L, d]: trailing-axis broadcast covers the batch dim.
    Ok(content.add(&time_emb)?.add(&pos_emb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(shape: &[usize], tag: &str) -> Tensor {
        let mut rng = crate::rng::stream(21, tag);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        for (t, c, h, p) in [(1, 1, 4, 2), (3, 2, 8, 4), (2, 4, 8, 2), (2, 3, 32, 4)] {
            let cfg = PatchConfig { p_in: p, p_out: p, h, c_max: C_MAX };
            let x = random_tensor(&[2, t, c, h, h], &format!("rt{t}{c}{h}{p}"));
            let tokens = patchify(&x, &cfg).unwrap();
            let back = unpatchify(&tokens, &cfg, c, t).unwrap();
            assert_eq!(back.shape(), x.shape());
            let (a, b) = (x.to_vec(), back.to_vec());
            for i in 0..a.len() {
                assert_eq!(a[i].to_bits(), b[i].to_bits(), "bit mismatch at {i}");
            }
        }
    }

    #[test]
    fn sequence_length_and_content_dims() {
        // Reference geometry: 10 frames of 3×128×128 with 8 patches per side
        // → 640 tokens whose raw (pre-padding) content is 16²·3 = 768.
        let cfg = PatchConfig::new(8, 16, 128).unwrap();
        let t0 = 10;
        let raw_dim = (128 / 8) * (128 / 8) * 3;
        assert_eq!(t0 * cfg.tokens_per_frame_in(), 640);
        assert_eq!(raw_dim, 768);
        assert_eq!(cfg.token_dim_in(), 1024); // after padding to 4 channels
        assert_eq!(cfg.tokens_per_frame_out(), 256);
        assert_eq!(cfg.token_dim_out(), 4 * 8 * 8);

        // Smallest case: one 1-channel 4×4 frame, 2 patches per side
        let tiny = PatchConfig::new(2, 2, 4).unwrap();
        let x = random_tensor(&[1, 1, 4, 4], "tiny");
        let tokens = patchify(&x, &tiny).unwrap();
        assert_eq!(tokens.shape(), &[4, C_MAX * 4]);
    }

    #[test]
    fn desk_profile_shapes() {
        let cfg = PatchConfig::new(4, 8, 32).unwrap();
        let x = random_tensor(&[2, 10, 1, 32, 32], "desk");
        let tokens = patchify(&x, &cfg).unwrap();
        assert_eq!(tokens.shape(), &[2, 160, 256]);
        let dec = random_tensor(&[2, 640, cfg.token_dim_out()], "deskdec");
        let frames = unpatchify(&dec, &cfg, 1, 10).unwrap();
        assert_eq!(frames.shape(), &[2, 10, 1, 32, 32]);
    }

    #[test]
    fn token_layout_is_time_then_row_major_and_channel_major_inside() {
        // 1 sample, 2 frames, 1 channel, 4×4 grid, 2×2 patches of side 2.
        // values encode (t, row, col) as t*100 + row*10 + col.
        let mut vals = Vec::new();
        for t in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    vals.push((t * 100 + r * 10 + c) as f64);
                }
            }
        }
        let x = Tensor::from_vec(vals, &[2, 1, 4, 4]).unwrap();
        let cfg = PatchConfig::new(2, 2, 4).unwrap();
        let tokens = patchify(&x, &cfg).unwrap();
        assert_eq!(tokens.shape(), &[8, 16]);
        let tv = tokens.to_vec();
        // token 0 = frame 0, top-left patch: rows 0-1 × cols 0-1, channel 0
        assert_eq!(&tv[0..4], &[0.0, 1.0, 10.0, 11.0]);
        // channels 1..3 are padding → zero
        assert!(tv[4..16].iter().all(|&v| v == 0.0));
        // token 1 = frame 0, top-right patch (row-major patch order)
        assert_eq!(&tv[16..20], &[2.0, 3.0, 12.0, 13.0]);
        // token 4 = frame 1, top-left patch (time-major over frames)
        assert_eq!(&tv[64..68], &[100.0, 101.0, 110.0, 111.0]);
    }

    #[test]
    fn padded_channels_receive_zero_gradient() {
        let cfg = PatchConfig::new(2, 2, 4).unwrap();
        let c = 2;
        let tokens = random_tensor(&[1, 4, cfg.token_dim_out()], "padgrad").with_grad();
        let field = unpatchify(&tokens, &cfg, c, 1).unwrap();
        field.mul(&random_tensor(field.shape(), "padw")).unwrap().sum_all().backward().unwrap();
        let grad = tokens.grad().unwrap();
        // Each token's content is [c_max, s, s] channel-major; entries for
        // channels ≥ c never reach the output, so their gradient is exactly 0.
        let s2 = (cfg.h / cfg.p_out).pow(2);
        for (i, g) in grad.iter().enumerate() {
            let channel = (i % cfg.token_dim_out()) / s2;
            if channel >= c {
                assert_eq!(*g, 0.0, "padding channel leaked at {i}");
            } else {
                assert_ne!(*g, 0.0, "real channel missing gradient at {i}");
            }
        }
    }

    #[test]
    fn patchify_gradient_matches_finite_difference() {
        let cfg = PatchConfig::new(2, 2, 4).unwrap();
        let x = random_tensor(&[1, 2, 4, 4], "fd").to_vec();
        crate::tensor::check_unary(
            |t| {
                let tokens = patchify(t, &cfg).unwrap();
                let w = random_tensor(tokens.shape(), "fdw");
                tokens.mul(&w).unwrap().sum_all()
            },
            &x,
            &[1, 2, 4, 4],
            1e-6,
        );
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(matches!(PatchConfig::new(3, 8, 32), Err(PatchError::NotDivisible { .. })));
        let cfg = PatchConfig::new(4, 8, 32).unwrap();
        let x = random_tensor(&[1, 5, 32, 32], "err5c");
        assert!(matches!(patchify(&x, &cfg), Err(PatchError::TooManyChannels { .. })));
        let wrong = random_tensor(&[1, 1, 16, 16], "errgrid");
        assert!(matches!(patchify(&wrong, &cfg), Err(PatchError::BadShape { .. })));
        let toks = random_tensor(&[1, 63, cfg.token_dim_out()], "errcount");
        assert!(matches!(unpatchify(&toks, &cfg, 1, 1), Err(PatchError::CountMismatch { .. })));
    }

    #[test]
    fn trajectory_field_validation_and_window() {
        let ok = TrajectoryField::new(
            vec![0.0; 3 * 1 * 4 * 4],
            3,
            1,
            4,
            4,
            0.1,
            vec!["h".into()],
            0,
        )
        .unwrap();
        let w = ok.window(1, 2).unwrap();
        assert_eq!(w.shape(), &[2, 1, 4, 4]);
        assert!(ok.window(2, 2).is_err());

        let mut bad = vec![0.0; 16];
        bad[7] = f64::NAN;
        let err = TrajectoryField::new(bad, 1, 1, 4, 4, 0.1, vec!["h".into()], 0);
        assert!(matches!(err, Err(PatchError::NonFinite { index: 7 })));

        let rect = TrajectoryField::new(vec![0.0; 8], 1, 1, 2, 4, 0.1, vec!["h".into()], 0);
        assert!(matches!(rect, Err(PatchError::BadShape { .. })));
    }

    #[test]
    fn encodings_add_content_time_and_position() {
        let (l, d_in, d) = (6, 4, 8);
        let tokens = random_tensor(&[2, l, d_in], "enc");
        let proj_w = random_tensor(&[d_in, d], "encw");
        let proj_b = Tensor::zeros(&[d]);
        let time_table = random_tensor(&[3, d], "enct").with_grad();
        let pos_table = random_tensor(&[2, d], "encp").with_grad();
        let time_idx = [0, 0, 1, 1, 2, 2];
        let patch_idx = [0, 1, 0, 1, 0, 1];
        let out =
            add_encodings(&tokens, &proj_w, &proj_b, &time_table, &pos_table, &time_idx, &patch_idx)
                .unwrap();
        assert_eq!(out.shape(), &[2, l, d]);

        // tokens 0 and 1 share a timestamp: same time embedding, so their
        // difference equals the content+position difference alone
        let ov = out.to_vec();
        let content = tokens.matmul(&proj_w).unwrap();
        let cv = content.to_vec();
        let pv = pos_table.to_vec();
        for j in 0..d {
            let got = ov[j] - ov[d + j];
            let want = (cv[j] + pv[j]) - (cv[d + j] + pv[d + j]);
            assert!((got - want).abs() < 1e-12);
        }

        // zeroed tables → output equals the content projection alone
        let z_time = Tensor::zeros(&[3, d]);
        let z_pos = Tensor::zeros(&[2, d]);
        let bare =
            add_encodings(&tokens, &proj_w, &proj_b, &z_time, &z_pos, &time_idx, &patch_idx)
                .unwrap();
        for (a, b) in bare.to_vec().iter().zip(content.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }

        // gradient flows into both tables
        out.sum_all().backward().unwrap();
        assert!(time_table.grad().unwrap().iter().any(|&g| g != 0.0));
        assert!(pos_table.grad().unwrap().iter().any(|&g| g != 0.0));

        // out-of-range index is a hard error
        assert!(add_encodings(
            &tokens,
            &proj_w,
            &proj_b,
            &time_table,
            &pos_table,
            &[0, 0, 1, 1, 9, 2],
            &patch_idx
        )
        .is_err());
    }
}

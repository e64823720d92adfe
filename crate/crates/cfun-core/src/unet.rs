//! Modified 3D U-net: residual encoder, skip-concatenating decoder, deep
//! supervision, and an extra transposed convolution so the logit grid is
//! twice the input crop.
//!
//! Encoder stages are the same P3D bottlenecks as the detector backbone.
//! Each decoder resolution contributes a 1x1x1 logit projection; the final
//! prediction is the sum of all projections upsampled to the 2x output
//! grid.

use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::layers::{conv, deconv, init_conv, init_deconv, init_p3d, p3d_bottleneck};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::volume::{SegKind, SegMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Error)]
pub enum UnetError {
    #[error("input dims {0:?} not divisible by 2^depth = {1}")]
    IndivisibleInput([usize; 3], usize),
    #[error("stage has {0} channels, expected {NUM_CLASSES}")]
    ChannelMismatch(usize),
    #[error("non-finite logits")]
    NonFinite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
}

impl UnetConfig {
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 4,
            num_classes: NUM_CLASSES,
        }
    }

    fn ch(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn up_channels(&self) -> usize {
        (self.base_channels / 2).max(2)
    }
}

pub fn init_unet(store: &mut ParamStore, rng: &mut SplitMix64, cfg: &UnetConfig) {
    init_p3d(store, rng, "un.e0", cfg.in_channels, cfg.ch(0), 1);
    for i in 1..=cfg.depth {
        init_p3d(store, rng, &format!("un.e{i}"), cfg.ch(i - 1), cfg.ch(i), 2);
    }
    for i in (0..cfg.depth).rev() {
        let c = cfg.ch(i);
        init_deconv(
            store,
            rng,
            &format!("un.d{i}"),
            cfg.ch(i + 1),
            c,
            [2, 2, 2],
            true,
        );
        init_conv(store, rng, &format!("un.m{i}"), 2 * c, c, [1, 1, 1], true);
        init_conv(store, rng, &format!("un.s{i}a"), c, c, [1, 3, 3], true);
        init_conv(store, rng, &format!("un.s{i}b"), c, c, [3, 1, 1], true);
        init_conv(
            store,
            rng,
            &format!("un.proj{i}"),
            c,
            cfg.num_classes,
            [1, 1, 1],
            false,
        );
    }
    let up = cfg.up_channels();
    init_deconv(store, rng, "un.up", cfg.ch(0), up, [2, 2, 2], true);
    init_conv(store, rng, "un.smooth", up, up, [3, 3, 3], true);
    init_conv(
        store,
        rng,
        "un.logit",
        up,
        cfg.num_classes,
        [1, 1, 1],
        false,
    );
}

/// Upsamples each 8-channel stage to `target` and sums them.
pub fn deep_supervision_merge(
    g: &mut Graph,
    stages: &[Var],
    target: [usize; 3],
) -> Result<Var, UnetError> {
    assert!(!stages.is_empty());
    let mut acc: Option<Var> = None;
    for &s in stages {
        let c = g.value(s).shape()[0];
        if c != NUM_CLASSES {
            return Err(UnetError::ChannelMismatch(c));
        }
        let up = if g.value(s).shape()[1..] == [target[0], target[1], target[2]] {
            s
        } else {
            g.upsample(s, target)
        };
        acc = Some(match acc {
            Some(a) => g.add(a, up),
            None => up,
        });
    }
    Ok(acc.unwrap())
}

/// Full forward pass; returns logits of shape (8, 2D, 2H, 2W).
pub fn unet_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &UnetConfig,
    x: Var,
) -> Result<Var, UnetError> {
    let shape = g.value(x).shape().to_vec();
    let dims = [shape[1], shape[2], shape[3]];
    let div = 1usize << cfg.depth;
    if dims.iter().any(|d| d % div != 0 || *d == 0) {
        return Err(UnetError::IndivisibleInput(dims, div));
    }
    let target = [2 * dims[0], 2 * dims[1], 2 * dims[2]];

    let mut enc = Vec::with_capacity(cfg.depth + 1);
    let mut h = p3d_bottleneck(g, store, "un.e0", x, cfg.in_channels, cfg.ch(0), 1);
    enc.push(h);
    for i in 1..=cfg.depth {
        h = p3d_bottleneck(
            g,
            store,
            &format!("un.e{i}"),
            h,
            cfg.ch(i - 1),
            cfg.ch(i),
            2,
        );
        enc.push(h);
    }

    let up2 = ConvSpec {
        stride: [2, 2, 2],
        pad: [0, 0, 0],
    };
    let mut stages = Vec::with_capacity(cfg.depth);
    for i in (0..cfg.depth).rev() {
        h = deconv(g, store, &format!("un.d{i}"), h, up2, true, true);
        h = g.concat_channels(h, enc[i]);
        h = conv(
            g,
            store,
            &format!("un.m{i}"),
            h,
            ConvSpec::unit(),
            true,
            true,
        );
        h = conv(
            g,
            store,
            &format!("un.s{i}a"),
            h,
            ConvSpec {
                stride: [1, 1, 1],
                pad: [0, 1, 1],
            },
            true,
            true,
        );
        h = conv(
            g,
            store,
            &format!("un.s{i}b"),
            h,
            ConvSpec {
                stride: [1, 1, 1],
                pad: [1, 0, 0],
            },
            true,
            true,
        );
        let proj = conv(
            g,
            store,
            &format!("un.proj{i}"),
            h,
            ConvSpec::unit(),
            false,
            false,
        );
        stages.push(proj);
    }

    let u = deconv(g, store, "un.up", h, up2, true, true);
    let s = conv(
        g,
        store,
        "un.smooth",
        u,
        ConvSpec::same3([1, 1, 1]),
        true,
        true,
    );
    let final_logits = conv(g, store, "un.logit", s, ConvSpec::unit(), false, false);
    stages.push(final_logits);
    deep_supervision_merge(g, &stages, target)
}

/// Per-voxel channel softmax of a logit map.
pub fn predict_probs(logits: &SegMap) -> Result<SegMap, UnetError> {
    if logits.kind != SegKind::Logits {
        return Err(UnetError::ChannelMismatch(logits.data.dim().0));
    }
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(UnetError::NonFinite);
    }
    let (c_n, d, h, w) = logits.data.dim();
    let mut out = logits.data.clone();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut mx = f32::NEG_INFINITY;
                for c in 0..c_n {
                    mx = mx.max(out[[c, z, y, x]]);
                }
                let mut sum = 0.0f32;
                for c in 0..c_n {
                    let e = (out[[c, z, y, x]] - mx).exp();
                    out[[c, z, y, x]] = e;
                    sum += e;
                }
                for c in 0..c_n {
                    out[[c, z, y, x]] /= sum;
                }
            }
        }
    }
    Ok(SegMap {
        data: out,
        kind: SegKind::Probabilities,
    })
}

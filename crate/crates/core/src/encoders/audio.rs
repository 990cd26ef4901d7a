//! Windowed audio encoder: two kernel-3 convolutions over time, single-head
//! self-attention across the window, then attention-weighted pooling to one vector.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Init, Mlp, ParamId, ParamStore, Tensor, Var};

pub const AUDIO_FEATURE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub window: usize,
    pub raw_dim: usize,
    pub conv_dim: usize,
    pub feature_dim: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            window: 16,
            raw_dim: 29,
            conv_dim: 32,
            feature_dim: AUDIO_FEATURE_DIM,
        }
    }
}

/// Per-frame raw audio rows for the whole sequence, shape `[frames, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl AudioTrack {
    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.dim..(frame + 1) * self.dim]
    }

    /// Window of `len` consecutive rows around `center`, clamped at the sequence ends.
    pub fn window(&self, center: usize, len: usize) -> AudioWindow {
        let half = len as isize / 2;
        let last = self.frames as isize - 1;
        let mut rows = Vec::with_capacity(len * self.dim);
        for k in 0..len as isize {
            let f = (center as isize - half + k).clamp(0, last) as usize;
            rows.extend(self.row(f).iter().map(|v| *v as f64));
        }
        AudioWindow {
            rows: Tensor::matrix(len, self.dim, rows),
            center,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioWindow {
    /// `[window, raw_dim]`
    pub rows: Tensor,
    pub center: usize,
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub config: AudioConfig,
    conv1: Mlp,
    conv2: Mlp,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    pool: ParamId,
    out: Mlp,
}

fn shift_index(len: usize, offset: isize) -> Arc<Vec<Option<usize>>> {
    Arc::new(
        (0..len as isize)
            .map(|t| {
                let s = t + offset;
                (0..len as isize).contains(&s).then_some(s as usize)
            })
            .collect(),
    )
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, config: AudioConfig, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        let square = |store: &mut ParamStore, name: &str, rng: &mut dyn rand::RngCore| -> Result<ParamId> {
            let n = c.feature_dim;
            let bound = if init == Init::Zeros { 0.0 } else { (3.0 / n as f64).sqrt() };
            let data = (0..n * n)
                .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                .collect();
            store.add(format!("audio.{name}"), Tensor::matrix(n, n, data))
        };
        let conv1 = Mlp::new(store, "audio.conv1", &[3 * c.raw_dim, c.conv_dim], Activation::Relu, init, rng)?;
        let conv2 = Mlp::new(store, "audio.conv2", &[3 * c.conv_dim, c.feature_dim], Activation::Relu, init, rng)?;
        let query = square(store, "query", rng)?;
        let key = square(store, "key", rng)?;
        let value = square(store, "value", rng)?;
        let pool = store.add("audio.pool", Tensor::zeros(&[c.feature_dim, 1]))?;
        let out = Mlp::new(store, "audio.out", &[c.feature_dim, c.feature_dim], Activation::Identity, init, rng)?;
        Ok(Self {
            config,
            conv1,
            conv2,
            query,
            key,
            value,
            pool,
            out,
        })
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, layer: &Mlp, x: Var) -> Result<Var> {
        let len = g.shape(x).0;
        let prev = g.gather_rows(x, shift_index(len, -1));
        let next = g.gather_rows(x, shift_index(len, 1));
        let stacked = g.concat_cols(&[prev, x, next]);
        layer.forward(g, store, stacked)
    }

    /// Encode one window to a `[1, feature_dim]` feature.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, window: &AudioWindow) -> Result<Var> {
        let (len, dim) = (window.rows.rows(), window.rows.cols());
        if dim != self.config.raw_dim {
            return Err(Error::Shape(format!(
                "audio rows have {dim} features, encoder expects {}",
                self.config.raw_dim
            )));
        }
        if len == 0 {
            return Err(Error::Shape("empty audio window".into()));
        }
        let x = g.constant(window.rows.clone());
        let h1 = self.conv(g, store, &self.conv1, x)?;
        let h = self.conv(g, store, &self.conv2, h1)?;

        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let wv = g.param(store, self.value);
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (self.config.feature_dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let ctx = g.matmul(attn, v);

        let u = g.param(store, self.pool);
        let pool_scores = g.matmul(ctx, u);
        let pool_scores = g.transpose(pool_scores);
        let beta = g.softmax_rows(pool_scores);
        let pooled = g.matmul(beta, ctx);
        self.out.forward(g, store, pooled)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv1.param_ids();
        ids.extend(self.conv2.param_ids());
        ids.extend([self.query, self.key, self.value, self.pool]);
        ids.extend(self.out.param_ids());
        ids
    }

    pub fn out_bias(&self) -> ParamId {
        self.out.layers[0].bias
    }
}

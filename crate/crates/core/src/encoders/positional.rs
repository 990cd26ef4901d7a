use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Frequency levels for one encoded input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub levels: usize,
    pub include_raw: bool,
}

impl EncoderConfig {
    pub const POSITION: Self = Self {
        levels: 10,
        include_raw: true,
    };
    pub const DIRECTION: Self = Self {
        levels: 4,
        include_raw: true,
    };
    pub const TIME: Self = Self {
        levels: 4,
        include_raw: true,
    };

    pub fn width_per_scalar(self) -> usize {
        2 * self.levels + usize::from(self.include_raw)
    }

    pub fn output_dim(self, scalars: usize) -> usize {
        scalars * self.width_per_scalar()
    }
}

pub(crate) fn encode_scalar_into(q: f64, levels: usize, include_raw: bool, out: &mut Vec<f64>) {
    if include_raw {
        out.push(q);
    }
    for l in 0..levels {
        let arg = (1u64 << l) as f64 * PI * q;
        out.push(arg.sin());
        out.push(arg.cos());
    }
}

/// `γ(q)` for every component of `values`, each component's block laid out contiguously.
pub fn positional_encode(values: &[f64], config: EncoderConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.output_dim(values.len()));
    for &q in values {
        encode_scalar_into(q, config.levels, config.include_raw, &mut out);
    }
    out
}

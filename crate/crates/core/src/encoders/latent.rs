//! Anchored latent codes spread into space.
//!
//! Each anchor carries a trainable code. Codes are linearly projected, splatted onto a set
//! of dense lattices with a truncated Gaussian kernel (`k(0) = 1`, `k(d) = 0` for
//! `d ≥ radius`), read back by trilinear interpolation, and averaged over lattices.
//! Everything is linear in the codes, so a query reduces to per-anchor weights times the
//! projected codes and the lattices never need to be materialized.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Csr, Graph, Init, Lattice, LatticeStack, ParamId, ParamStore, Tensor, Var};

pub const LATENT_DIM: usize = 88;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    pub code_dim: usize,
    /// Cells per axis of each lattice over the normalized box.
    pub resolutions: Vec<usize>,
    /// Kernel support radius in normalized coordinates.
    pub truncation_radius: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        // 2x, 4x, 8x, 16x downsampled from a 64-cell base lattice
        Self {
            code_dim: LATENT_DIM,
            resolutions: vec![32, 16, 8, 4],
            truncation_radius: 0.3,
        }
    }
}

impl LatentConfig {
    pub fn kernel(&self, distance: f64) -> f64 {
        let r = self.truncation_radius;
        if distance >= r {
            return 0.0;
        }
        let s2 = 2.0 * (r / 2.0).powi(2);
        let floor = (-(r * r) / s2).exp();
        ((-(distance * distance) / s2).exp() - floor) / (1.0 - floor)
    }
}

#[derive(Clone, Debug)]
pub struct LatentVolume {
    pub config: LatentConfig,
    /// Anchor positions in normalized coordinates.
    pub anchors: Vec<[f64; 3]>,
    pub codes: ParamId,
    pub projection: ParamId,
    pub stack: Arc<LatticeStack>,
}

fn build_splat(anchors: &[[f64; 3]], lattice: Lattice, config: &LatentConfig) -> Csr {
    let h = lattice.spacing();
    let n = lattice.nodes_per_axis() as isize;
    let reach = (config.truncation_radius / h).ceil() as isize;
    let mut triplets = Vec::new();
    for (a, p) in anchors.iter().enumerate() {
        let centre: Vec<isize> = p.iter().map(|c| ((c + 1.0) / h).round() as isize).collect();
        for iz in (centre[2] - reach).max(0)..=(centre[2] + reach).min(n - 1) {
            for iy in (centre[1] - reach).max(0)..=(centre[1] + reach).min(n - 1) {
                for ix in (centre[0] - reach).max(0)..=(centre[0] + reach).min(n - 1) {
                    let q = lattice.node_position(ix as usize, iy as usize, iz as usize);
                    let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
                    let k = config.kernel(d);
                    if k > 0.0 {
                        triplets.push((lattice.node_index(ix as usize, iy as usize, iz as usize), a, k));
                    }
                }
            }
        }
    }
    Csr::from_triplets(lattice.node_count(), anchors.len(), triplets)
}

impl LatentVolume {
    pub fn new(
        store: &mut ParamStore,
        config: LatentConfig,
        anchors: Vec<[f64; 3]>,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Contract("latent volume needs at least one anchor".into()));
        }
        if config.resolutions.is_empty() || config.resolutions.contains(&0) {
            return Err(Error::Contract("latent volume needs positive lattice resolutions".into()));
        }
        if anchors.iter().any(|a| a.iter().any(|c| !(-1.0..=1.0).contains(c))) {
            return Err(Error::Contract("latent anchors must lie inside the normalized box".into()));
        }
        let d = config.code_dim;
        let codes = match init {
            Init::Zeros => vec![0.0; anchors.len() * d],
            _ => {
                let normal = Normal::new(0.0, 0.1).unwrap();
                (0..anchors.len() * d).map(|_| normal.sample(rng)).collect()
            }
        };
        let projection = match init {
            Init::Zeros => vec![0.0; d * d],
            _ => {
                let mut p = vec![0.0; d * d];
                for i in 0..d {
                    p[i * d + i] = 1.0;
                }
                p
            }
        };
        let codes = store.add("latent.codes", Tensor::matrix(anchors.len(), d, codes))?;
        let projection = store.add("latent.projection", Tensor::matrix(d, d, projection))?;
        let levels = config
            .resolutions
            .iter()
            .map(|&cells| {
                let lattice = Lattice { cells };
                (lattice, build_splat(&anchors, lattice, &config))
            })
            .collect();
        let stack = Arc::new(LatticeStack {
            sources: anchors.len(),
            levels,
        });
        Ok(Self {
            config,
            anchors,
            codes,
            projection,
            stack,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.code_dim
    }

    /// Projected anchor codes `[anchors, code_dim]`, shared by every query of a graph.
    pub fn projected_codes(&self, g: &mut Graph, store: &ParamStore) -> Var {
        let codes = g.param(store, self.codes);
        let proj = g.param(store, self.projection);
        g.matmul(codes, proj)
    }

    /// Feature at each of `points[N, 3]` given codes from [`Self::projected_codes`].
    pub fn query_with(&self, g: &mut Graph, projected: Var, points: Var) -> Var {
        let w = g.lattice_weights(points, self.stack.clone());
        g.matmul(w, projected)
    }

    pub fn query(&self, g: &mut Graph, store: &ParamStore, points: Var) -> Var {
        let projected = self.projected_codes(g, store);
        self.query_with(g, projected, points)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.codes, self.projection]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(anchors: Vec<[f64; 3]>, resolutions: Vec<usize>) -> (ParamStore, LatentVolume) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = LatentConfig {
            resolutions,
            ..Default::default()
        };
        let v = LatentVolume::new(&mut store, config, anchors, Init::Random, &mut rng).unwrap();
        (store, v)
    }

    fn query_point(store: &ParamStore, v: &LatentVolume, p: [f64; 3]) -> Vec<f64> {
        let mut g = Graph::new();
        let pts = g.constant(Tensor::row(&p));
        let f = v.query(&mut g, store, pts);
        g.value(f).data().to_vec()
    }

    #[test]
    fn kernel_is_one_at_centre_and_zero_at_radius() {
        let c = LatentConfig::default();
        assert_eq!(c.kernel(0.0), 1.0);
        assert_eq!(c.kernel(c.truncation_radius), 0.0);
        assert!(c.kernel(0.5 * c.truncation_radius) > 0.0);
    }

    #[test]
    fn single_anchor_peak_returns_its_code() {
        // the origin is a node of every even lattice
        let (store, v) = volume(vec![[0.0, 0.0, 0.0]], vec![32, 16, 8, 4]);
        let f = query_point(&store, &v, [0.0, 0.0, 0.0]);
        let code = store.value(v.codes).row_slice(0);
        assert_eq!(f.len(), LATENT_DIM);
        for (a, b) in f.iter().zip(code) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn far_from_every_anchor_is_zero() {
        let (store, v) = volume(vec![[0.5, 0.5, 0.5]], vec![32, 16, 8, 4]);
        // beyond radius plus one coarse-cell diagonal
        let f = query_point(&store, &v, [-0.6, -0.6, -0.6]);
        assert!(f.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn midpoint_between_nodes_averages_node_features() {
        let lattice = Lattice { cells: 4 };
        let mut grid = vec![0.0; lattice.node_count() * 2];
        let a = lattice.node_index(2, 2, 2);
        let b = lattice.node_index(3, 2, 2);
        grid[a * 2..a * 2 + 2].copy_from_slice(&[1.0, -2.0]);
        grid[b * 2..b * 2 + 2].copy_from_slice(&[3.0, 5.0]);
        let mut g = Graph::new();
        let grid = g.constant(Tensor::matrix(lattice.node_count(), 2, grid));
        let pts = g.constant(Tensor::row(&[0.25, 0.0, 0.0]));
        let f = g.trilinear(grid, pts, lattice);
        assert_eq!(g.value(f).data(), &[2.0, 1.5]);
    }
}

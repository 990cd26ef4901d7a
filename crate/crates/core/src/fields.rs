//! The semantic radiance field `(x, d, a, f) -> (c, σ, s)`, the torso deformation field
//! `(x, t, p_h, p_c) -> Δx`, and their composition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, LatentVolume};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Init, Mlp, ParamId, ParamStore, Tensor, Var};

/// Rigid pose: rotation (row-major) and translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "tau")]
    pub translation: [f64; 3],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    };

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) + r[2] * (r[3] * r[7] - r[4] * r[6])
    }

    /// Orthonormal with determinant +1, within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite values".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return Err(Error::Validation(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        let det = self.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::Validation(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(())
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
            r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
            r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
        ]
    }

    /// Flattened `[R (9), τ (3)]`.
    pub fn features(&self) -> [f64; 12] {
        let mut f = [0.0; 12];
        f[..9].copy_from_slice(&self.rotation);
        f[9..].copy_from_slice(&self.translation);
        f
    }
}

/// Per-sample outputs of the semantic field.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `[N, 1]`, softplus head
    pub sigma: Var,
    /// `[N, K]`
    pub logits: Var,
    /// `[N, 3]`, logistic head
    pub color: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub layers: usize,
    pub hidden: usize,
    pub color_hidden: usize,
    pub classes: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 64,
            color_hidden: 32,
            classes: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SemanticField {
    pub config: FieldConfig,
    pub position_encoding: EncoderConfig,
    pub direction_encoding: EncoderConfig,
    pub audio_dim: usize,
    pub latent_dim: usize,
    trunk: Mlp,
    sigma_head: Mlp,
    semantic_head: Mlp,
    color_head: Mlp,
}

impl SemanticField {
    pub fn new(
        store: &mut ParamStore,
        config: FieldConfig,
        audio_dim: usize,
        latent_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.classes == 0 {
            return Err(Error::Contract("field needs at least one layer and one class".into()));
        }
        let pos = EncoderConfig::POSITION;
        let dir = EncoderConfig::DIRECTION;
        let input = pos.output_dim(3) + latent_dim + audio_dim;
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers));
        let trunk = Mlp::new(store, "field.trunk", &dims, Activation::Relu, init, rng)?;
        let sigma_head = Mlp::new(store, "field.sigma", &[config.hidden, 1], Activation::Identity, init, rng)?;
        let semantic_head = Mlp::new(
            store,
            "field.semantic",
            &[config.hidden, config.classes],
            Activation::Identity,
            init,
            rng,
        )?;
        let color_head = Mlp::new(
            store,
            "field.color",
            &[config.hidden + dir.output_dim(3), config.color_hidden, 3],
            Activation::Identity,
            init,
            rng,
        )?;
        Ok(Self {
            config,
            position_encoding: pos,
            direction_encoding: dir,
            audio_dim,
            latent_dim,
            trunk,
            sigma_head,
            semantic_head,
            color_head,
        })
    }

    /// Evaluate at encoded positions `[N, 63]`, encoded directions `[N, 27]`, audio feature
    /// `[1, A]` (broadcast), and optional latent features `[N, 88]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded_x: Var,
        encoded_d: Var,
        audio: Option<Var>,
        latent: Option<Var>,
    ) -> Result<FieldVars> {
        let mut parts = vec![encoded_x];
        match (latent, self.latent_dim) {
            (Some(f), d) if d > 0 => parts.push(f),
            (None, 0) => {}
            _ => return Err(Error::Shape("latent feature presence does not match field config".into())),
        }
        match (audio, self.audio_dim) {
            (Some(a), d) if d > 0 => parts.push(a),
            (None, 0) => {}
            _ => return Err(Error::Shape("audio feature presence does not match field config".into())),
        }
        let h = self.trunk.forward_parts(g, store, &parts)?;
        let sigma_raw = self.sigma_head.forward(g, store, h)?;
        let sigma = g.softplus(sigma_raw);
        let logits = self.semantic_head.forward(g, store, h)?;
        let color_raw = self.color_head.forward_parts(g, store, &[h, encoded_d])?;
        let color = g.sigmoid(color_raw);
        Ok(FieldVars { sigma, logits, color })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.trunk.param_ids();
        ids.extend(self.sigma_head.param_ids());
        ids.extend(self.semantic_head.param_ids());
        ids.extend(self.color_head.param_ids());
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { layers: 6, hidden: 64 }
    }
}

/// `Δx = G(x, t, p_h, p_c) − G(x, 0, p_c, p_c)`: the subtraction pins the displacement to
/// exactly zero at the canonical frame for any parameters.
#[derive(Clone, Debug)]
pub struct DeformField {
    pub config: DeformConfig,
    pub position_encoding: EncoderConfig,
    pub time_encoding: EncoderConfig,
    mlp: Mlp,
}

impl DeformField {
    pub fn new(store: &mut ParamStore, config: DeformConfig, init: Init, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Contract("deformation field needs at least one layer".into()));
        }
        let pos = EncoderConfig::POSITION;
        let time = EncoderConfig::TIME;
        let mut dims = vec![pos.output_dim(3) + time.output_dim(1) + 24];
        dims.extend(std::iter::repeat_n(config.hidden, config.layers - 1));
        dims.push(3);
        let init = if init == Init::Random { Init::RandomZeroOutput } else { init };
        let mlp = Mlp::new(store, "deform.mlp", &dims, Activation::Identity, init, rng)?;
        Ok(Self {
            config,
            position_encoding: pos,
            time_encoding: time,
            mlp,
        })
    }

    fn conditioning(&self, t: f64, head: &Pose, canonical: &Pose) -> Tensor {
        let mut row = crate::encoders::positional_encode(&[t], self.time_encoding);
        row.extend(head.features());
        row.extend(canonical.features());
        Tensor::row(&row)
    }

    /// Displacements `[N, 3]` for encoded points `[N, 63]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded_x: Var,
        t: f64,
        head: &Pose,
        canonical: &Pose,
    ) -> Result<Var> {
        let width = g.shape(encoded_x).1;
        if width != self.position_encoding.output_dim(3) {
            return Err(Error::Shape(format!("deformation expects 63 encoded columns, got {width}")));
        }
        let fan_in = self.mlp.input_dim();
        let wx = self.mlp.weight_rows(g, store, 0, 0, width);
        let wc = self.mlp.weight_rows(g, store, 0, width, fan_in);
        let bias = g.param(store, self.mlp.layers[0].bias);
        let shared = g.matmul(encoded_x, wx);

        let branch = |cond: Tensor, g: &mut Graph| {
            let c = g.constant(cond);
            let c = g.matmul(c, wc);
            let c = g.add(c, bias);
            let pre = g.add_row(shared, c);
            self.mlp.forward_from_preactivation(g, store, pre)
        };
        let current = branch(self.conditioning(t, head, canonical), g);
        let reference = branch(self.conditioning(0.0, canonical, canonical), g);
        Ok(g.sub(current, reference))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.mlp.param_ids()
    }
}

/// Encode `[N, 3]` points and evaluate the field, optionally querying latent features at
/// the same points.
pub fn semantic_at(
    g: &mut Graph,
    store: &ParamStore,
    field: &SemanticField,
    points: Var,
    encoded_d: Var,
    audio: Option<Var>,
    latent: Option<(&LatentVolume, Var)>,
) -> Result<FieldVars> {
    let enc = field.position_encoding;
    let encoded_x = g.positional_encoding(points, enc.levels, enc.include_raw);
    let f = latent.map(|(vol, codes)| vol.query_with(g, codes, points));
    field.forward(g, store, encoded_x, encoded_d, audio, f)
}

/// Time and pose conditioning for the deformation field.
#[derive(Clone, Copy, Debug)]
pub struct DeformInput<'a> {
    pub time: f64,
    pub head: &'a Pose,
    pub canonical: &'a Pose,
}

/// Warp `points` by the deformation field (when present) and evaluate the semantic field
/// at the warped points. Returns the field outputs and the displacement, if any.
#[allow(clippy::too_many_arguments)]
pub fn overall_at(
    g: &mut Graph,
    store: &ParamStore,
    field: &SemanticField,
    deform: Option<&DeformField>,
    deform_input: DeformInput<'_>,
    points: Var,
    encoded_d: Var,
    audio: Option<Var>,
    latent: Option<(&LatentVolume, Var)>,
) -> Result<(FieldVars, Option<Var>)> {
    let Some(deform) = deform else {
        return Ok((semantic_at(g, store, field, points, encoded_d, audio, latent)?, None));
    };
    let enc = deform.position_encoding;
    let encoded = g.positional_encoding(points, enc.levels, enc.include_raw);
    let dx = deform.forward(g, store, encoded, deform_input.time, deform_input.head, deform_input.canonical)?;
    let warped = g.add(points, dx);
    let out = semantic_at(g, store, field, warped, encoded_d, audio, latent)?;
    Ok((out, Some(dx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_y(angle: f64) -> Pose {
        let (s, c) = angle.sin_cos();
        Pose {
            rotation: [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c],
            translation: [0.1, -0.2, 3.0],
        }
    }

    fn encoded_dir(g: &mut Graph, d: [f64; 3]) -> Var {
        let e = crate::encoders::positional_encode(&d, EncoderConfig::DIRECTION);
        g.constant(Tensor::row(&e))
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::IDENTITY.validate(1e-6).is_ok());
        assert!(rot_y(0.7).validate(1e-6).is_ok());
        let mut flipped = Pose::IDENTITY;
        flipped.rotation[8] = -1.0;
        assert!(flipped.validate(1e-6).is_err());
        let mut skew = Pose::IDENTITY;
        skew.rotation[1] = 0.1;
        assert!(skew.validate(1e-6).is_err());
    }

    #[test]
    fn zero_field_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = SemanticField::new(&mut store, FieldConfig::default(), 64, 88, Init::Zeros, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.3, -0.1, 0.9]));
        let d = encoded_dir(&mut g, [0.0, 0.0, 1.0]);
        let a = g.constant(Tensor::full(&[1, 64], 0.5));
        let f = g.constant(Tensor::full(&[1, 88], -0.5));
        let enc = g.positional_encoding(x, 10, true);
        let out = field.forward(&mut g, &store, enc, d, Some(a), Some(f)).unwrap();
        assert!((g.value(out.sigma).item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.value(out.color).data(), &[0.5, 0.5, 0.5]);
        assert_eq!(g.value(out.logits).data(), &[0.0; 4]);
    }

    #[test]
    fn density_and_logits_ignore_view_direction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = SemanticField::new(&mut store, FieldConfig::default(), 64, 0, Init::Random, &mut rng).unwrap();
        let eval = |d: [f64; 3]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row(&[0.2, 0.4, -0.3]));
            let enc = g.positional_encoding(x, 10, true);
            let dv = encoded_dir(&mut g, d);
            let a = g.constant(Tensor::full(&[1, 64], 0.1));
            let out = field.forward(&mut g, &store, enc, dv, Some(a), None).unwrap();
            (
                g.value(out.sigma).clone(),
                g.value(out.logits).clone(),
                g.value(out.color).clone(),
            )
        };
        let (s1, l1, c1) = eval([0.0, 0.0, 1.0]);
        let (s2, l2, c2) = eval([0.6, 0.0, 0.8]);
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        assert_ne!(c1, c2);
    }

    #[test]
    fn logits_length_follows_class_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config = FieldConfig {
            classes: 11,
            ..Default::default()
        };
        let field = SemanticField::new(&mut store, config, 64, 0, Init::Random, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let enc = g.positional_encoding(x, 10, true);
        let d = encoded_dir(&mut g, [0.0, 0.0, 1.0]);
        let a = g.constant(Tensor::zeros(&[1, 64]));
        let out = field.forward(&mut g, &store, enc, d, Some(a), None).unwrap();
        assert_eq!(g.shape(out.logits), (1, 11));
    }

    #[test]
    fn deformation_vanishes_at_canonical_frame() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let deform = DeformField::new(&mut store, DeformConfig::default(), Init::Random, &mut rng).unwrap();
        // randomise the output layer too
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let canonical = rot_y(0.2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.9, 0.5, 0.0]));
        let enc = g.positional_encoding(x, 10, true);
        let dx = deform.forward(&mut g, &store, enc, 0.0, &canonical, &canonical).unwrap();
        assert!(g.value(dx).data().iter().all(|v| *v == 0.0));
        let dx = deform.forward(&mut g, &store, enc, 0.4, &rot_y(0.5), &canonical).unwrap();
        assert!(g.value(dx).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_deformation_parameters_give_zero_displacement() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let deform = DeformField::new(&mut store, DeformConfig::default(), Init::Zeros, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.3, 0.3, 0.3]));
        let enc = g.positional_encoding(x, 10, true);
        let dx = deform.forward(&mut g, &store, enc, 0.7, &rot_y(0.4), &rot_y(-0.1)).unwrap();
        assert_eq!(g.value(dx).data(), &[0.0; 3]);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails. Pass criterion numbers as arguments to run a subset.
//!
//! Criteria 6 to 9 share one set of trained checkpoints under `target/acceptance` (or
//! `$PFIELD_ACCEPTANCE_DIR`). Missing or stale checkpoints are retrained, which takes hours
//! on a single core.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use portrait_field::dataio::{generate_synthetic, Dataset, SynthSceneConfig, HEAD, MOUTH, TORSO};
use portrait_field::encoders::{positional_encode, AudioWindow, EncoderConfig};
use portrait_field::eval::{ablate, eval_render_config, heatmap, render_frame, AblationReport, Variant};
use portrait_field::fields::{semantic_at, DeformConfig, DeformField, FieldVars, Pose};
use portrait_field::model::{Model, ModelConfig, Samples, SceneInfo};
use portrait_field::numerics::gradcheck::{central_differences, compare, param_differences, FD_STEP};
use portrait_field::numerics::{Activation, Graph, Init, Mlp, ParamStore, Tensor, Var};
use portrait_field::renderer::{
    composite_samples, render_batch, sample_coarse, sampling::intervals, FrameInput, Jitter, Ray, SceneBox,
};
use portrait_field::scheduler::{allocate_losses, largest_remainder, real_shares};
use portrait_field::trainer::{Trainer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const GRAD_SEEDS: u64 = 100;
// criterion 2
const QUADRATURE_TOL: f64 = 1e-3;
const QUADRATURE_COUNTS: [usize; 5] = [16, 32, 64, 128, 256];
// criterion 3
const INVARIANT_RAYS: usize = 10_000;
const PARTITION_TOL: f64 = 1e-6;
// criterion 4
const ALLOCATION_CASES: usize = 1_000;
// criterion 5
const DEFORM_POINTS: usize = 1_000;
const DEFORM_TOL: f64 = 1e-12;
// criterion 6
const FIT_TRAIN_PSNR: f64 = 26.0;
const FIT_HOLDOUT_PSNR: f64 = 24.0;
const FIT_SEM_ACC: f64 = 0.95;
const FIT_HOLDOUT_SSIM: f64 = 0.85;
// criterion 7
const DEFORM_ABLATION_GAP_DB: f64 = 1.0;
// criterion 8
const SAMPLING_ABLATION_GAP_DB: f64 = 0.5;
// criterion 9
const TORSO_HEAD_RATIO: f64 = 3.0;
// criterion 10
const DETERMINISM_ITERS: usize = 500;

/// Training budget and model shared by criteria 6 to 10.
fn fit_config() -> TrainConfig {
    let mut config = TrainConfig {
        iterations: 20_000,
        rays: 512,
        seed: 0,
        ..TrainConfig::default()
    };
    config.model.samples = Samples { coarse: 16, fine: 16 };
    config.model.field.layers = 4;
    config.model.field.hidden = 32;
    config.model.deform = Some(DeformConfig { layers: 4, hidden: 32 });
    config
}

fn scene_config() -> SynthSceneConfig {
    SynthSceneConfig {
        frames: 50,
        size: 64,
        ..SynthSceneConfig::default()
    }
}

fn artifact_dir() -> PathBuf {
    std::env::var_os("PFIELD_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------------------
// 1. gradients of random compositions

fn project(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let (r, c) = g.shape(y);
    let w = g.constant(Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let z = g.mul(y, w);
    g.sum(z)
}

struct Composition {
    rays: usize,
    samples: usize,
    classes: usize,
    levels: usize,
    mlp: Mlp,
    deltas: Vec<f64>,
    background: Tensor,
    seed: u64,
}

impl Composition {
    fn new(seed: u64, store: &mut ParamStore) -> (Self, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rays = rng.gen_range(1..=3);
        let samples = rng.gen_range(2..=5);
        let classes = rng.gen_range(2..=4);
        let levels = rng.gen_range(1..=3);
        let width = 3 * (2 * levels + 1);
        let mut dims = vec![width];
        for _ in 0..rng.gen_range(1..=2) {
            dims.push(rng.gen_range(4..=8));
        }
        dims.push(1 + 3 + classes);
        let mlp = Mlp::new(store, "net", &dims, Activation::Identity, Init::Random, &mut rng).unwrap();
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let n = rays * samples;
        let points = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let deltas = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
        let background = Tensor::matrix(rays, 3, (0..rays * 3).map(|_| rng.gen::<f64>()).collect());
        let c = Self {
            rays,
            samples,
            classes,
            levels,
            mlp,
            deltas,
            background,
            seed,
        };
        (c, points)
    }

    fn build(&self, store: &ParamStore, points: &Tensor) -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let p = g.input(points.clone());
        let enc = g.positional_encoding(p, self.levels, true);
        let h = self.mlp.forward(&mut g, store, enc).unwrap();
        let s = g.slice_cols(h, 0, 1);
        let sigma = g.softplus(s);
        let c = g.slice_cols(h, 1, 4);
        let color = g.sigmoid(c);
        let logits = g.slice_cols(h, 4, 4 + self.classes);
        let field = FieldVars { sigma, color, logits };
        let bg = g.constant(self.background.clone());
        let mut onehot = vec![0.0; self.rays * self.classes];
        for r in 0..self.rays {
            onehot[r * self.classes] = 1.0;
        }
        let bg_class = g.constant(Tensor::matrix(self.rays, self.classes, onehot));
        let out = composite_samples(&mut g, &field, self.deltas.clone(), self.rays, bg, bg_class);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37);
        let a = project(&mut g, out.color, &mut rng);
        let b = project(&mut g, out.probs, &mut rng);
        let t = project(&mut g, out.transmittance, &mut rng);
        let ab = g.add(a, b);
        let y = g.add(ab, t);
        debug_assert_eq!(g.shape(out.weights), (self.rays, self.samples));
        (g, y, p)
    }
}

fn criterion_1() -> Check {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut store = ParamStore::new();
        let (comp, points) = Composition::new(seed, &mut store);
        let (g, y, p) = comp.build(&store, &points);
        let dp = g.gradients_wrt(y, &[p]).remove(0);
        store.zero_grad();
        g.backward(y, &mut store).unwrap();
        let numeric = central_differences(points.data(), FD_STEP, |x| {
            let t = Tensor::new(points.shape().to_vec(), x.to_vec()).unwrap();
            let (g, y, _) = comp.build(&store, &t);
            g.value(y).item()
        });
        let (w, ok) = compare(dp.data(), &numeric);
        worst = worst.max(w);
        if !ok {
            failures.push(format!("seed {seed} points"));
        }
        for id in comp.mlp.param_ids() {
            let auto = store
                .get(id)
                .grad
                .as_ref()
                .map_or(vec![0.0; store.value(id).len()], |t| t.data().to_vec());
            let mut probe = store.clone();
            let numeric = param_differences(&mut probe, id, FD_STEP, |s| {
                let (g, y, _) = comp.build(s, &points);
                g.value(y).item()
            });
            let (w, ok) = compare(&auto, &numeric);
            worst = worst.max(w);
            if !ok {
                failures.push(format!("seed {seed} {}", store.get(id).name));
            }
        }
    }
    ensure(
        failures.is_empty(),
        format!("{GRAD_SEEDS} seeds, worst relative error {worst:.2e}, failures {failures:?}"),
    )
}

// ---------------------------------------------------------------------------------------
// 2. quadrature against the homogeneous-medium closed form

fn homogeneous_error(n: usize) -> f64 {
    let (near, far, sigma) = (2.0, 4.0, 1.3);
    let c = [0.9, 0.2, 0.4];
    let bg = [0.1, 0.7, 0.3];
    let pos = sample_coarse(near, far, n, || 0.5);
    let mut g = Graph::new();
    let field = FieldVars {
        sigma: g.constant(Tensor::matrix(n, 1, vec![sigma; n])),
        color: g.constant(Tensor::matrix(n, 3, c.iter().copied().cycle().take(n * 3).collect())),
        logits: g.constant(Tensor::zeros(&[n, 2])),
    };
    let background = g.constant(Tensor::matrix(1, 3, bg.to_vec()));
    let bg_class = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
    let out = composite_samples(&mut g, &field, intervals(&pos, far), 1, background, bg_class);
    let t = (-sigma * (far - near)).exp();
    (0..3)
        .map(|i| (g.value(out.color).get(0, i) - (c[i] * (1.0 - t) + t * bg[i])).abs())
        .fold(0.0, f64::max)
}

fn criterion_2() -> Check {
    let errors: Vec<f64> = QUADRATURE_COUNTS.iter().map(|&n| homogeneous_error(n)).collect();
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let last = *errors.last().unwrap();
    ensure(
        monotone && last <= QUADRATURE_TOL,
        format!(
            "errors over N={QUADRATURE_COUNTS:?}: {}",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------------------
// 3. rendering invariants

fn random_scene() -> SceneInfo {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    SceneInfo {
        scene_box: SceneBox {
            min: [-1.5; 3],
            max: [1.5; 3],
        },
        anchors: (0..32)
            .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)])
            .collect(),
        canonical: Pose {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0, -3.0],
        },
    }
}

fn unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn scramble(store: &mut ParamStore, prefix: &str, scale: f64, rng: &mut impl Rng) {
    for p in store.params_mut().iter_mut().filter(|p| p.name.starts_with(prefix)) {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut model = Model::new(ModelConfig::default(), random_scene(), Init::Random, 8).unwrap();
    scramble(&mut model.store, "deform.", 0.2, &mut rng);
    let audio = AudioWindow {
        rows: Tensor::matrix(16, 29, (0..16 * 29).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        center: 0,
    };
    let head = Pose {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.03, -0.02, -3.0],
    };
    let config = model.render_config(1.8, 4.2, 500);
    let (mut partition, mut probs_err) = (0.0f64, 0.0f64);
    let mut monotone = true;
    let mut chunks = 0;
    for chunk in 0..INVARIANT_RAYS / 500 {
        let rays: Vec<Ray> = (0..500)
            .map(|i| {
                let origin = unit(&mut rng).map(|c| 3.0 * c);
                let target = [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)];
                let d = [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                Ray {
                    origin,
                    direction: d.map(|c| c / n),
                    near: 1.8,
                    far: 4.2,
                    pixel: (i, chunk),
                    time: 0.37,
                }
            })
            .collect();
        let backgrounds: Vec<[f64; 3]> = (0..500).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let frame = FrameInput {
            time: rng.gen(),
            head: &head,
            audio: &audio,
        };
        let mut g = Graph::new();
        let jitter = Jitter::Random {
            seed: 5,
            stream: chunk as u64,
        };
        let batch = render_batch(&mut g, &model, &rays, &backgrounds, &frame, &config, jitter).unwrap();
        for pass in std::iter::once(&batch.coarse).chain(batch.fine.as_ref()) {
            let w = g.value(pass.weights);
            let t = g.value(pass.transmittance);
            let st = g.value(pass.sample_transmittance);
            let pr = g.value(pass.probs);
            for r in 0..rays.len() {
                let total: f64 = w.row_slice(r).iter().sum::<f64>() + t.get(r, 0);
                partition = partition.max((total - 1.0).abs());
                probs_err = probs_err.max((pr.row_slice(r).iter().sum::<f64>() - 1.0).abs());
                let row = st.row_slice(r);
                monotone &= row.windows(2).all(|p| p[1] <= p[0]) && t.get(r, 0) <= *row.last().unwrap();
            }
        }
        chunks += 1;
    }

    // density and class logits at fixed points under two unrelated view directions
    let mut view_invariant = true;
    let dir_cfg = EncoderConfig::DIRECTION;
    for _ in 0..INVARIANT_RAYS / 1000 {
        let pts: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dirs_a: Vec<f64> = (0..1000).flat_map(|_| positional_encode(&unit(&mut rng), dir_cfg)).collect();
        let dirs_b: Vec<f64> = (0..1000).flat_map(|_| positional_encode(&unit(&mut rng), dir_cfg)).collect();
        let eval = |dirs: &[f64]| {
            let mut g = Graph::new();
            let p = g.constant(Tensor::matrix(1000, 3, pts.clone()));
            let d = g.constant(Tensor::matrix(1000, dir_cfg.output_dim(3), dirs.to_vec()));
            let a = model.audio.encode(&mut g, &model.store, &audio).unwrap();
            let codes = model.latent.as_ref().map(|l| (l, l.projected_codes(&mut g, &model.store)));
            let f = semantic_at(&mut g, &model.store, &model.field, p, d, Some(a), codes).unwrap();
            (g.value(f.sigma).clone(), g.value(f.logits).clone())
        };
        let (s1, l1) = eval(&dirs_a);
        let (s2, l2) = eval(&dirs_b);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        view_invariant &= bits(&s1) == bits(&s2) && bits(&l1) == bits(&l2);
    }
    ensure(
        partition <= PARTITION_TOL && probs_err <= PARTITION_TOL && monotone && view_invariant,
        format!(
            "{} rays, |Σw+T-1| ≤ {partition:.1e}, |Σp-1| ≤ {probs_err:.1e}, T monotone {monotone}, \
             view invariant {view_invariant}",
            chunks * 500
        ),
    )
}

// ---------------------------------------------------------------------------------------
// 4. allocation exactness

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut bad = Vec::new();
    let mut worst_dev: f64 = 0.0;
    for case in 0..ALLOCATION_CASES {
        let k = rng.gen_range(1..=8);
        let losses: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut present: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.8)).collect();
        if present.is_empty() {
            present.push(rng.gen_range(0..k));
        }
        let total = present.len() + rng.gen_range(0..4096);
        let plan = allocate_losses(&losses, total, &present).unwrap();
        if plan.counts.iter().sum::<usize>() != total {
            bad.push(format!("case {case}: sum"));
        }
        let shares = real_shares(&losses, total, &present);
        let raw = largest_remainder(&shares, total);
        for (c, s) in raw.iter().zip(&shares) {
            worst_dev = worst_dev.max((*c as f64 - s).abs());
        }
        if raw.iter().zip(&shares).any(|(c, s)| (*c as f64 - s).abs() >= 1.0) {
            bad.push(format!("case {case}: deviation"));
        }
        let j = present[rng.gen_range(0..present.len())];
        let mut raised = losses.clone();
        raised[j] += rng.gen_range(0.0..5.0);
        let after = allocate_losses(&raised, total, &present).unwrap();
        if after.counts[j] < plan.counts[j] {
            bad.push(format!("case {case}: monotonicity"));
        }
    }
    ensure(
        bad.is_empty(),
        format!("{ALLOCATION_CASES} cases, worst pre-adjustment deviation {worst_dev:.3}, failures {bad:?}"),
    )
}

// ---------------------------------------------------------------------------------------
// 5. the deformation vanishes at the canonical frame

fn random_rotation(rng: &mut impl Rng) -> [f64; 9] {
    let a = unit(rng);
    let th: f64 = rng.gen_range(-0.5..0.5);
    let (s, c) = th.sin_cos();
    let t = 1.0 - c;
    [
        c + t * a[0] * a[0],
        t * a[0] * a[1] - s * a[2],
        t * a[0] * a[2] + s * a[1],
        t * a[1] * a[0] + s * a[2],
        c + t * a[1] * a[1],
        t * a[1] * a[2] - s * a[0],
        t * a[2] * a[0] - s * a[1],
        t * a[2] * a[1] + s * a[0],
        c + t * a[2] * a[2],
    ]
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    let mut moved: f64 = 0.0;
    let fields = 10;
    for _ in 0..fields {
        let mut store = ParamStore::new();
        let field = DeformField::new(&mut store, DeformConfig::default(), Init::Random, &mut rng).unwrap();
        scramble(&mut store, "deform.", 0.3, &mut rng);
        let canonical = Pose {
            rotation: random_rotation(&mut rng),
            translation: [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-3.2..-2.8)],
        };
        let other = Pose {
            rotation: random_rotation(&mut rng),
            translation: canonical.translation,
        };
        let n = DEFORM_POINTS / fields;
        let pts: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |t: f64, head: &Pose| {
            let mut g = Graph::new();
            let p = g.constant(Tensor::matrix(n, 3, pts.clone()));
            let enc = EncoderConfig::POSITION;
            let e = g.positional_encoding(p, enc.levels, enc.include_raw);
            let dx = field.forward(&mut g, &store, e, t, head, &canonical).unwrap();
            g.value(dx).data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        worst = worst.max(run(0.0, &canonical));
        moved = moved.max(run(0.5, &other));
    }
    ensure(
        worst <= DEFORM_TOL && moved > 1e-3,
        format!("{DEFORM_POINTS} points over {fields} random fields, max |Δx| {worst:.1e} (elsewhere {moved:.2e})"),
    )
}

// ---------------------------------------------------------------------------------------
// 6 to 9. trained models

struct Trained {
    scene: SynthSceneConfig,
    dataset: Dataset,
    report: AblationReport,
}

fn trained() -> Result<Trained, String> {
    let dir = artifact_dir();
    let data = dir.join("data");
    let scene = scene_config();
    generate_synthetic(&scene, &data).map_err(|e| e.to_string())?;
    let config = fit_config();
    let dataset = Dataset::load(&data, config.model.audio.window).map_err(|e| e.to_string())?;
    let report = ablate(&dataset, &config, &Variant::ALL, &dir).map_err(|e| e.to_string())?;
    Ok(Trained { scene, dataset, report })
}

fn region(m: &portrait_field::eval::AggregateMetrics, name: &str) -> f64 {
    m.region_psnr.get(name).copied().unwrap_or(f64::NAN)
}

fn criterion_6(t: &Trained) -> Check {
    let full = t.report.get(Variant::Full).ok_or("full model missing")?;
    let (tr, ho) = (&full.train, &full.holdout);
    ensure(
        tr.psnr >= FIT_TRAIN_PSNR
            && ho.psnr >= FIT_HOLDOUT_PSNR
            && tr.sem_acc >= FIT_SEM_ACC
            && ho.sem_acc >= FIT_SEM_ACC
            && ho.ssim >= FIT_HOLDOUT_SSIM,
        format!(
            "train psnr {:.2} dB (≥ {FIT_TRAIN_PSNR}), holdout psnr {:.2} dB (≥ {FIT_HOLDOUT_PSNR}), \
             semantic accuracy {:.4}/{:.4} (≥ {FIT_SEM_ACC}), holdout ssim {:.4} (≥ {FIT_HOLDOUT_SSIM})",
            tr.psnr, ho.psnr, tr.sem_acc, ho.sem_acc, ho.ssim
        ),
    )
}

fn criterion_7(t: &Trained) -> Check {
    let full = &t.report.get(Variant::Full).ok_or("full model missing")?.holdout;
    let nd = &t.report.get(Variant::NoDeform).ok_or("no-deform model missing")?.holdout;
    let names = &t.dataset.meta.class_names;
    let (torso, head) = (&names[TORSO as usize], &names[HEAD as usize]);
    let gap = full.psnr - nd.psnr;
    let torso_drop = region(full, torso) - region(nd, torso);
    let head_drop = region(full, head) - region(nd, head);
    ensure(
        gap >= DEFORM_ABLATION_GAP_DB && torso_drop > head_drop,
        format!(
            "holdout psnr full {:.2} vs no-deform {:.2} (gap {gap:.2} dB, need ≥ {DEFORM_ABLATION_GAP_DB}); \
             torso drop {torso_drop:.2} dB vs head drop {head_drop:.2} dB",
            full.psnr, nd.psnr
        ),
    )
}

fn criterion_8(t: &Trained) -> Check {
    let full = &t.report.get(Variant::Full).ok_or("full model missing")?.holdout;
    let nds = &t.report.get(Variant::NoDynamicSampling).ok_or("no-dynamic-sampling model missing")?.holdout;
    let mouth = &t.dataset.meta.class_names[MOUTH as usize];
    let (m_full, m_nds) = (region(full, mouth), region(nds, mouth));
    ensure(
        m_nds <= m_full && nds.sem_acc <= full.sem_acc && m_full - m_nds >= SAMPLING_ABLATION_GAP_DB,
        format!(
            "holdout mouth psnr full {m_full:.2} vs uniform {m_nds:.2} (need gap ≥ {SAMPLING_ABLATION_GAP_DB} dB); \
             semantic accuracy full {:.4} vs uniform {:.4}",
            full.sem_acc, nds.sem_acc
        ),
    )
}

fn criterion_9(t: &Trained) -> Check {
    let full = t.report.get(Variant::Full).ok_or("full model missing")?;
    let model = Model::load(&full.checkpoint).map_err(|e| e.to_string())?;
    let config = eval_render_config(&model, &t.dataset);
    let frame = t.scene.max_shift_frame();
    let map = heatmap(&model, &t.dataset, frame, &config).map_err(|e| e.to_string())?;
    let labels = t.dataset.frame(frame).map_err(|e| e.to_string())?.labels;
    let torso = map.region_mean(&labels, TORSO).unwrap_or(0.0);
    let head = map.region_mean(&labels, HEAD).unwrap_or(0.0);
    let zero = heatmap(&model, &t.dataset, 0, &config).map_err(|e| e.to_string())?;
    let zero_max = zero.max();
    ensure(
        torso >= TORSO_HEAD_RATIO * head && zero.values.iter().all(|&v| v == 0.0),
        format!(
            "frame {frame}: torso mean {torso:.4e}, head mean {head:.4e} (ratio {:.2}, need ≥ {TORSO_HEAD_RATIO}); \
             frame 0 max {zero_max:e}",
            torso / head
        ),
    )
}

// ---------------------------------------------------------------------------------------
// 10. determinism

fn criterion_10() -> Check {
    let dir = artifact_dir().join("determinism");
    let data = artifact_dir().join("data");
    generate_synthetic(&scene_config(), &data).map_err(|e| e.to_string())?;
    let mut config = fit_config();
    config.iterations = DETERMINISM_ITERS;
    let dataset = Dataset::load(&data, config.model.audio.window).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.join(run).join("model.json");
        let _ = fs::remove_file(&ckpt);
        pool.install(|| Trainer::new(&dataset, config.clone()).and_then(|t| t.run(&ckpt)))
            .map_err(|e| e.to_string())?;
        let blob = portrait_field::numerics::checkpoint::blob_path(&ckpt);
        bytes.push((fs::read(&ckpt).map_err(|e| e.to_string())?, fs::read(blob).map_err(|e| e.to_string())?));
    }
    let identical = bytes[0] == bytes[1];

    let model = Model::load(&dir.join("a/model.json")).map_err(|e| e.to_string())?;
    let render = eval_render_config(&model, &dataset);
    let mut renders_equal = true;
    for f in [0, scene_config().max_shift_frame(), dataset.meta.frames - 1] {
        let record = dataset.frame(f).map_err(|e| e.to_string())?;
        let serial = render_frame(&model, &dataset, &record, &render, false).map_err(|e| e.to_string())?;
        let parallel = render_frame(&model, &dataset, &record, &render, true).map_err(|e| e.to_string())?;
        let bits = |r: &portrait_field::eval::FrameRender| {
            r.image.iter().flatten().chain(&r.displacement).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        renders_equal &= bits(&serial) == bits(&parallel) && serial.classes == parallel.classes;
    }
    ensure(
        identical && renders_equal,
        format!(
            "two {DETERMINISM_ITERS}-iteration runs identical {identical} ({} blob bytes); \
             parallel render equals serial {renders_equal}",
            bytes[0].1.len()
        ),
    )
}

// ---------------------------------------------------------------------------------------

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n);
    let names = [
        "gradient correctness",
        "quadrature convergence",
        "rendering invariants",
        "allocation exactness",
        "canonical deformation identity",
        "end-to-end synthetic fit",
        "deformation ablation trend",
        "dynamic sampling ablation trend",
        "deformation localization",
        "determinism",
    ];
    let quiet = panic::take_hook();
    panic::set_hook(Box::new(move |info| {
        eprintln!("  panic: {info}");
        let _ = &quiet;
    }));
    let mut trained_cache: Option<Result<Trained, String>> = None;
    let mut failed = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6..=9 => {
                let t = trained_cache.get_or_insert_with(trained);
                match t {
                    Ok(t) => match n {
                        6 => criterion_6(t),
                        7 => criterion_7(t),
                        8 => criterion_8(t),
                        _ => criterion_9(t),
                    },
                    Err(e) => Err(format!("training failed: {e}")),
                }
            }
            _ => criterion_10(),
        }))
        .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {:<32} [{secs:.1}s] {detail}", names[n - 1]);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

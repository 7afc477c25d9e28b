//! Acceptance criteria 1-9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even when all pass.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sctn::config::RunConfig;
use sctn::gradcheck;
use sctn::io::{self, ScenePair};
use sctn::losses::{self, FscPairs};
use sctn::model::{match_features, ModelConfig, Sctn};
use sctn::nn::{bind, unbind};
use sctn::ot::{self, OtConfig};
use sctn::synth::{self, SceneConfig};
use sctn::tensor::{Tape, Tensor};
use sctn::train::{self, Trainer};
use sctn::unet::{sparse_conv, SparseConvLayer, SparseLevel, OFFSETS};

// Tolerances pinned from the acceptance criteria.
const GRAD_TOL: f64 = 1e-4;
const GRAD_SUITE_SECONDS: f64 = 120.0;
const OT_COST_REL: f64 = 0.01;
const OT_MARGINAL: f64 = 1e-6;
const OT_EPSILON: f64 = 0.005;
const OT_TRIALS: usize = 20;
const CONV_TOL: f64 = 1e-12;
const CONV_TRIALS: usize = 50;
const IDENTITY_EPE: f64 = 1e-3;
const TOY_EPE: f64 = 0.05;
const TOY_ACC3DR: f64 = 0.9;
const TOY_SECONDS: f64 = 15.0 * 60.0;
const TOY_SEED: u64 = 42;
const TOY_TRAIN_SCENES: usize = 64;
const TOY_HELD_OUT: usize = 16;
const HELD_OUT_SEED_OFFSET: u64 = 10_000;

struct Report {
    hard_failures: Vec<u8>,
}

impl Report {
    fn line(&mut self, id: u8, pass: bool, text: String) {
        println!("criterion {id} [{}] {text}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.hard_failures.push(id);
        }
    }
}

fn criterion_1(r: &mut Report) {
    let start = Instant::now();
    let results = gradcheck::run_suite(1);
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|c| c.max_error).fold(0.0, f64::max);
    for c in &results {
        println!("    {:<28} {:.3e}", c.name, c.max_error);
    }
    let pass = results.iter().all(|c| c.max_error < GRAD_TOL) && secs < GRAD_SUITE_SECONDS;
    r.line(
        1,
        pass,
        format!(
            "gradient suite: {} checks, worst error {worst:.3e} (< {GRAD_TOL:e}), {secs:.1}s (< {GRAD_SUITE_SECONDS}s)",
            results.len()
        ),
    );
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.unet.channels = vec![4, 8];
    cfg.unet.levels = 2;
    cfg.transformer.channels = 4;
    cfg.transformer.c_a = 4;
    cfg
}

/// Gradients of E^c for every parameter, with the similarity either routed
/// through the stop-gradient node or replaced by a precomputed constant.
fn fsc_param_grads(model: &mut Sctn, scene: &ScenePair, frozen: bool) -> Vec<Vec<f64>> {
    let cfg = model.cfg.clone();
    let p = sctn::model::CloudPlan::new(scene.p.points(), &cfg).unwrap();
    let q = sctn::model::CloudPlan::new(scene.q.points(), &cfg).unwrap();
    let gt = Tensor::from_points(&scene.gt_flow).unwrap();
    let fsc = losses::FscConfig::default();
    let pairs = FscPairs::new(scene.p.points(), fsc.k_neighbors).unwrap();
    let mut tape = Tape::new();
    let leaves = bind(model, &mut tape);
    let pred = model.forward(&mut tape, &p, &q).unwrap();
    let s = if frozen {
        gradcheck::frozen_similarity(&pred.fp, &pairs, fsc.tau)
    } else {
        losses::pair_similarity(&mut tape, &pred.fp, &pairs, fsc.tau, true).unwrap()
    };
    let ec = losses::fsc_loss_from_similarity(&mut tape, &pred.flow, &gt, &s, &pairs, fsc.epsilon_g).unwrap();
    let grads = tape.backward(&ec).unwrap();
    let out = leaves.iter().map(|l| grads.wrt(l).data().to_vec()).collect();
    unbind(model);
    out
}

fn criterion_2(r: &mut Report) {
    let scene = synth::generate_scene(&SceneConfig {
        points_per_object: 16,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let mut model = Sctn::new(&tiny_model_config(), 3).unwrap();
    // A nonzero refinement head so every parameter group sits on the flow path.
    model.refiner.l3 = sctn::nn::Linear::new(&mut ChaCha8Rng::seed_from_u64(4), ot::REFINE_HIDDEN, 3, true);
    let a = fsc_param_grads(&mut model, &scene, false);
    let b = fsc_param_grads(&mut model, &scene, true);
    let bitwise = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits())
        });
    let nonzero = a.iter().flatten().filter(|v| **v != 0.0).count();
    let total: usize = a.iter().map(Vec::len).sum();
    r.line(
        2,
        bitwise && nonzero > 0,
        format!("stop-gradient: dEc/dtheta bitwise equal to frozen-s gradients over {total} parameters ({nonzero} nonzero via the flow path)"),
    );
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn criterion_3(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = OtConfig {
        epsilon: OT_EPSILON,
        iters: 600_000,
    };
    let (mut worst_rel, mut worst_marg) = (0.0f64, 0.0f64);
    for trial in 0..OT_TRIALS {
        let n = 2 + trial % 4;
        let c: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cost = Tensor::matrix(n, n, c.clone()).unwrap();
        let plan = ot::sinkhorn(&mut Tape::new(), &cost, &cfg).unwrap();
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / n as f64;
        worst_rel = worst_rel.max((plan.cost(&cost) - best).abs() / best);
        let u = 1.0 / n as f64;
        for s in plan.row_sums().into_iter().chain(plan.col_sums()) {
            worst_marg = worst_marg.max((s - u).abs());
        }
    }
    r.line(
        3,
        worst_rel < OT_COST_REL && worst_marg < OT_MARGINAL,
        format!(
            "OT oracle: {OT_TRIALS} costs up to 5x5, eps {OT_EPSILON}: worst cost gap {:.4}% (< 1%), worst marginal error {worst_marg:.2e} (< {OT_MARGINAL:e})",
            worst_rel * 100.0
        ),
    );
}

/// Zero-filled dense convolution evaluated at the sparse output sites.
fn dense_conv(
    coords: &[[i32; 3]],
    x: &Tensor,
    layer: &SparseConvLayer,
    out_coords: &[[i32; 3]],
) -> Vec<f64> {
    let lo = [0, 1, 2].map(|k| coords.iter().map(|c| c[k]).min().unwrap() - 3);
    let hi = [0, 1, 2].map(|k| coords.iter().map(|c| c[k]).max().unwrap() + 3);
    let dims = [0, 1, 2].map(|k| (hi[k] - lo[k] + 1) as usize);
    let (cin, cout) = (layer.c_in(), layer.c_out());
    let mut dense = vec![0.0; dims[0] * dims[1] * dims[2] * cin];
    let at = |c: [i32; 3]| -> Option<usize> {
        let idx: Vec<i64> = (0..3).map(|k| i64::from(c[k] - lo[k])).collect();
        if (0..3).all(|k| idx[k] >= 0 && (idx[k] as usize) < dims[k]) {
            Some(((idx[0] as usize * dims[1]) + idx[1] as usize) * dims[2] + idx[2] as usize)
        } else {
            None
        }
    };
    for (row, c) in coords.iter().enumerate() {
        let cell = at(*c).unwrap();
        dense[cell * cin..(cell + 1) * cin].copy_from_slice(x.row(row));
    }
    let s = layer.stride as i32;
    let mut out = Vec::with_capacity(out_coords.len() * cout);
    for oc in out_coords {
        for co in 0..cout {
            let mut acc = layer.bias.data()[co];
            for (k, o) in OFFSETS.iter().enumerate() {
                let src = [s * oc[0] + o[0], s * oc[1] + o[1], s * oc[2] + o[2]];
                if let Some(cell) = at(src) {
                    for ci in 0..cin {
                        acc += dense[cell * cin + ci] * layer.weights[k].data()[ci * cout + co];
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

fn criterion_4(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..CONV_TRIALS {
        let dims = [0; 3].map(|_| rng.gen_range(1..=5));
        let origin = [0; 3].map(|_| rng.gen_range(-3..=3));
        let density = rng.gen_range(0.2..0.9);
        let mut coords = Vec::new();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    if rng.gen_bool(density) {
                        coords.push([origin[0] + i, origin[1] + j, origin[2] + k]);
                    }
                }
            }
        }
        if coords.is_empty() {
            coords.push(origin);
        }
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let stride = if trial % 2 == 0 { 1 } else { 2 };
        let mut layer = SparseConvLayer::new(&mut rng, cin, cout, stride);
        layer.bias = sctn::nn::uniform(&mut rng, vec![1, cout], 1.0);
        let x = sctn::nn::uniform(&mut rng, vec![coords.len(), cin], 1.0);
        let level = SparseLevel::new(coords.clone());
        let (out_level, y) = sparse_conv(&mut Tape::new(), &layer, &level, &x).unwrap();
        let want = dense_conv(&coords, &x, &layer, out_level.coords());
        for (a, b) in y.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        assert_eq!(y.numel(), want.len());
    }
    r.line(
        4,
        worst <= CONV_TOL,
        format!("sparse conv vs dense zero-filled conv on {CONV_TRIALS} grids up to 5^3 (strides 1 and 2): max diff {worst:.2e} (<= {CONV_TOL:e})"),
    );
}

fn criterion_5(r: &mut Report) {
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let perm = io::seeded_permutation(n, 9);
    let q: Vec<[f64; 3]> = perm.iter().map(|&i| p[i]).collect();
    let fp = Tensor::identity(n);
    let fq_rows: Vec<f64> = perm.iter().flat_map(|&i| fp.row(i).to_vec()).collect();
    let fq = Tensor::matrix(n, n, fq_rows).unwrap();
    let cfg = OtConfig {
        epsilon: 0.01,
        iters: 100,
    };
    let (_, _, u) = match_features(
        &mut Tape::new(),
        &fp,
        &fq,
        &Tensor::from_points(&p).unwrap(),
        &Tensor::from_points(&q).unwrap(),
        &cfg,
    )
    .unwrap();
    let epe = losses::metrics(&u.to_points(), &vec![[0.0; 3]; n]).unwrap().epe3d;
    r.line(
        5,
        epe < IDENTITY_EPE,
        format!("identity matching with one-hot features, Q = shuffled P, eps 0.01, 100 iters: pre-refinement EPE3D {epe:.2e} (< {IDENTITY_EPE:e})"),
    );
}

fn dataset(dir: &Path, seed: u64, count: usize) -> Vec<(String, ScenePair)> {
    let cfg = SceneConfig {
        seed,
        ..Default::default()
    };
    synth::generate_dataset(&cfg, count, dir).unwrap();
    io::load_manifest(&dir.join("manifest.txt")).unwrap()
}

fn criteria_6_and_9(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let train_set = dataset(&tmp.path().join("train"), TOY_SEED, TOY_TRAIN_SCENES);
    let held_out = dataset(&tmp.path().join("held"), TOY_SEED + HELD_OUT_SEED_OFFSET, TOY_HELD_OUT);
    let mut rc = RunConfig::default();
    rc.train.seed = TOY_SEED;
    let start = Instant::now();
    let model = Sctn::new(&rc.model(), rc.train.seed).unwrap();
    let mut trainer = Trainer::new(model, rc.train.clone(), rc.fsc.clone(), &train_set).unwrap();
    while trainer.epoch < rc.train.epochs_stage1 {
        trainer.run_epoch().unwrap();
    }
    let stage1_secs = start.elapsed().as_secs_f64();
    let mut ablation = trainer.clone();
    ablation.stop_gradient = false;
    let stage2_start = Instant::now();
    trainer.run(|_| {}).unwrap();
    let (agg, _) = train::evaluate(&trainer.model, &held_out).unwrap();
    let secs = stage1_secs + stage2_start.elapsed().as_secs_f64();
    for e in &trainer.log {
        println!("    {}", e.line());
    }
    let stage1_fsc = trainer.fsc_evaluations[0];
    let pass = agg.epe3d < TOY_EPE && agg.acc3dr > TOY_ACC3DR && secs < TOY_SECONDS && stage1_fsc == 0;
    r.line(
        6,
        pass,
        format!(
            "toy training 40+20 epochs on {TOY_TRAIN_SCENES} scenes: held-out EPE3D {:.4} (< {TOY_EPE}), Acc3DR {:.4} (> {TOY_ACC3DR}), Acc3DS {:.4}, outliers {:.4}, {:.0}s (< {TOY_SECONDS}s), stage-1 FSC evaluations {stage1_fsc}",
            agg.epe3d, agg.acc3dr, agg.acc3ds, agg.outliers, secs
        ),
    );

    ablation.run(|_| {}).unwrap();
    let with_sg = trainer.mean_similarity().unwrap();
    let without_sg = ablation.mean_similarity().unwrap();
    if without_sg < with_sg {
        println!(
            "criterion 9 [PASS] mean clamped neighbor similarity without stop-gradient {without_sg:.4} < with stop-gradient {with_sg:.4}"
        );
    } else {
        println!(
            "criterion 9 [WARN] soft failure: mean clamped neighbor similarity without stop-gradient {without_sg:.4} is not below {with_sg:.4} with it"
        );
    }
}

fn criterion_7(r: &mut Report) {
    let errs = [0.01, 0.06, 0.2, 0.5];
    let gt: Vec<[f64; 3]> = vec![[0.0, 0.0, 1.0]; 4];
    let u: Vec<[f64; 3]> = errs.iter().map(|e| [*e, 0.0, 1.0]).collect();
    let m = losses::metrics(&u, &gt).unwrap();
    let pass = (m.epe3d - 0.1925).abs() < 1e-12 && m.acc3ds == 0.25 && m.acc3dr == 0.5 && m.outliers == 0.5;
    r.line(
        7,
        pass,
        format!(
            "metrics fixture: epe {:.4} acc3ds {} acc3dr {} outliers {} (want 0.1925, 0.25, 0.5, 0.5)",
            m.epe3d, m.acc3ds, m.acc3dr, m.outliers
        ),
    );
}

fn sctn(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_sctn")).args(args).output().unwrap();
    assert!(out.status.success(), "sctn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

/// Every file under `dir`, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(r: &mut Report) {
    let small = [
        "--set", "scenes=3",
        "--set", "scene.points_per_object=24",
        "--set", "train.epochs_stage1=2",
        "--set", "train.epochs_stage2=1",
    ];
    let run = |root: &Path| -> (Vec<(String, Vec<u8>)>, Vec<u8>) {
        let d = |p: &str| root.join(p).display().to_string();
        let mut gen = vec!["gen", "--seed", "7", "--out"];
        let data = d("data");
        gen.push(&data);
        gen.extend(small);
        sctn(&gen);
        let ckpt = d("w.sctn");
        let mut tr = vec!["train", "--data", &data, "--out", &ckpt, "--seed", "7"];
        tr.extend(small);
        sctn(&tr);
        let csv = d("metrics.csv");
        let mut ev = vec!["eval", "--data", &data, "--checkpoint", &ckpt, "--out", &csv];
        ev.extend(small);
        let stdout = sctn(&ev);
        (snapshot(root), stdout)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, sa) = run(a.path());
    let (fb, sb) = run(b.path());
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let expected = ["metrics.csv", "w.sctn", "w.sctn.best", "w.sctn.log", "data/manifest.txt"];
    let complete = expected.iter().all(|e| names.contains(e));
    r.line(
        8,
        complete && fa == fb && sa == sb,
        format!("determinism: gen/train/eval twice produce byte-identical files ({} files: {})", fa.len(), names.join(", ")),
    );
}

fn main() {
    let mut r = Report {
        hard_failures: Vec::new(),
    };
    // Criterion numbers given on the command line restrict the run.
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u8| only.is_empty() || only.contains(&id);
    let steps: [(u8, fn(&mut Report)); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (7, criterion_7),
        (8, criterion_8),
        (6, criteria_6_and_9),
    ];
    for (id, step) in steps {
        if want(id) || (id == 6 && want(9)) {
            step(&mut r);
        }
    }
    if r.hard_failures.is_empty() {
        println!("acceptance: all hard criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", r.hard_failures);
        std::process::exit(1);
    }
}

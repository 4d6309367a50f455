//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Tests hold a shared lock so that wall-clock budgets are measured without
//! other criteria competing for the CPU.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use dascl_core::augment::{
    apply_calibration, apply_op, apply_op_features, calibrate_with, calibration_seed, rotate,
    AugmentationPolicy, CalibrationSettings, Image, MagnitudeRanges, OpKind,
};
use dascl_core::data::{
    gen_glyph_domains, gen_two_moons_domains, leave_one_domain_out, GlyphParams, MoonsParams,
    SplitSpec,
};
use dascl_core::gradcheck::{check_gradients, MAX_REL_ERR};
use dascl_core::harness::{self, DatasetSpec, ExperimentConfig, ModelShape};
use dascl_core::losses::{cross_entropy, supcon_loss};
use dascl_core::metrics::binary_auc;
use dascl_core::probe::{pairwise_distances, proxy_a_distance, DistanceReport};
use dascl_core::report::{render, MetricsReport, ReportFormat};
use dascl_core::rng::{derive_seed, rng};
use dascl_core::train::{calibrate_magnitudes, fit, predict, Method, TrainConfig};
use dascl_core::{exec, init_model, ModelConfig, SupConConfig, Tape, Tensor};
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written to the stderr handle directly so the line shows up even when
/// the test harness captures output.
fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().unwrap();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    let mut t = Tensor::randn(&[n, d], seed, 1.0).unwrap();
    for i in 0..n {
        let norm = dot(t.row(i), t.row(i)).sqrt();
        for v in &mut t.data_mut()[i * d..(i + 1) * d] {
            *v /= norm;
        }
    }
    t
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let r = |shape: &[usize], s: u64| Tensor::randn(shape, s, 1.0).unwrap();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };

    for i in 0..10u64 {
        let s = derive_seed(1000, &[i]);
        let w = r(&[4, 3], s + 9);
        let weigh = move |tp: &mut Tape, v| {
            let c = tp.constant(w.clone());
            let p = tp.mul(v, c)?;
            Ok(tp.sum(p))
        };

        let e = check_gradients(&[r(&[4, 5], s), r(&[5, 3], s + 1)], |tp, v| {
            let m = tp.matmul(v[0], v[1])?;
            weigh(tp, m)
        })
        .unwrap();
        record("matmul", e);

        let e = check_gradients(&[r(&[4, 3], s), r(&[4, 3], s + 1)], |tp, v| {
            let a = tp.add(v[0], v[1])?;
            let b = tp.sub(a, v[1])?;
            let c = tp.mul(b, v[1])?;
            let d = tp.scale(c, -0.7);
            weigh(tp, d)
        })
        .unwrap();
        record("add/sub/mul/scale", e);

        let e = check_gradients(&[r(&[4, 3], s), r(&[3], s + 1)], |tp, v| {
            let b = tp.add_bias(v[0], v[1])?;
            weigh(tp, b)
        })
        .unwrap();
        record("add_bias", e);

        let e = check_gradients(&[r(&[4, 3], s)], |tp, v| {
            let a = tp.relu(v[0]);
            weigh(tp, a)
        })
        .unwrap();
        record("relu", e);

        let e = check_gradients(&[r(&[4, 3], s)], |tp, v| {
            let a = tp.exp(v[0]);
            let one = tp.constant(Tensor::scalar(1.0));
            let b = tp.add(a, one)?;
            let l = tp.log(b)?;
            weigh(tp, l)
        })
        .unwrap();
        record("exp/log", e);

        let e = check_gradients(&[r(&[3, 4], s)], |tp, v| {
            let t = tp.transpose(v[0])?;
            let sq = tp.mul(t, t)?;
            let m = tp.mean(sq);
            let w = tp.sum(t);
            let ww = tp.mul(w, w)?;
            tp.add(m, ww)
        })
        .unwrap();
        record("transpose/sum/mean", e);

        let e = check_gradients(&[r(&[2, 3], s), r(&[2, 3], s + 1)], |tp, v| {
            let c = tp.concat_rows(&[v[0], v[1]])?;
            let g = tp.gather_rows(c, &[3, 0, 0, 2])?;
            weigh(tp, g)
        })
        .unwrap();
        record("concat/gather", e);

        let e = check_gradients(&[r(&[4, 3], s)], |tp, v| {
            let l = tp.log_softmax(v[0])?;
            weigh(tp, l)
        })
        .unwrap();
        record("log_softmax", e);

        let mask: Vec<bool> = (0..12).map(|k| k % 3 != 1).collect();
        let e = check_gradients(&[r(&[4, 3], s)], |tp, v| {
            let l = tp.masked_log_softmax(v[0], &mask)?;
            weigh(tp, l)
        })
        .unwrap();
        record("masked_log_softmax", e);

        let e = check_gradients(&[r(&[4, 3], s)], |tp, v| {
            let z = tp.l2_normalize_rows(v[0], 1e-12)?;
            weigh(tp, z)
        })
        .unwrap();
        record("l2_normalize", e);

        let mut lr = rng(s);
        let labels: Vec<usize> = (0..4).map(|_| lr.random_range(0..3)).collect();
        let e =
            check_gradients(&[r(&[4, 3], s)], |tp, v| cross_entropy(tp, v[0], &labels)).unwrap();
        record("cross_entropy", e);

        let n = lr.random_range(3..=8);
        let sl: Vec<usize> = (0..n).map(|_| lr.random_range(0..3)).collect();
        let e = check_gradients(&[r(&[n, 4], s)], |tp, v| {
            let z = tp.l2_normalize_rows(v[0], 1e-12)?;
            supcon_loss(tp, z, &sl, 0.5)
        })
        .unwrap();
        record("supcon", e);

        let cfg = ModelConfig {
            input_dim: 5,
            hidden_dims: vec![16, 12],
            embed_dim: 12,
            proj_dim: 3,
            num_classes: 3,
        };
        let model = init_model(&cfg, s).unwrap();
        let mut inputs = vec![r(&[4, 5], s + 2)];
        inputs.extend(model.params().into_iter().cloned());
        let ml: Vec<usize> = (0..4).map(|_| lr.random_range(0..3)).collect();
        let e = check_gradients(&inputs, |tp, v| {
            let b = model.bind_vars(&v[1..])?;
            let h = b.features(tp, v[0])?;
            let l = b.logits(tp, h)?;
            let z = b.projection(tp, h)?;
            let ce = cross_entropy(tp, l, &ml)?;
            let sc = supcon_loss(tp, z, &ml, 0.5)?;
            tp.add(ce, sc)
        })
        .unwrap();
        record("full model", e);
    }

    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let failing: Vec<_> = worst.iter().filter(|(_, &e)| e >= MAX_REL_ERR).collect();
    verdict(
        1,
        "gradient suite",
        failing.is_empty() && elapsed < 30.0,
        &format!(
            "{} op groups x 10 instances, max rel err {max:.2e}, {elapsed:.1}s, failing {failing:?}",
            worst.len()
        ),
    );
}

// ---------------------------------------------------------------- 2

fn supcon_scalar(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = z.len();
    let mut sum = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        let mut count = 0usize;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                inner += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            sum += -inner / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        sum / anchors as f64
    }
}

fn supcon_value(z: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let l = supcon_loss(&mut tape, v, labels, tau).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn criterion_2_supcon_oracle() {
    let _g = serial();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for b in 0..100u64 {
        let n = r.random_range(3..=8);
        let d = r.random_range(2..=8);
        let tau = [0.1, 0.5, 1.0][r.random_range(0..3)];
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let z = unit_rows(n, d, derive_seed(7, &[b]));
        let got = supcon_value(&z, &labels, tau);
        let want = supcon_scalar(&rows(&z), &labels, tau);
        worst = worst.max((got - want).abs());
    }
    let z = unit_rows(2, 4, 3);
    let same = supcon_value(&z, &[1, 1], 0.1);
    let none = supcon_value(&unit_rows(3, 4, 4), &[0, 1, 2], 0.1);
    verdict(
        2,
        "supcon oracle",
        worst < 1e-8 && same == 0.0 && none == 0.0,
        &format!("100 batches, max |diff| {worst:.2e}; same-label pair {same}, no-positive {none}"),
    );
}

// ---------------------------------------------------------------- 3

fn moons(rotations: Vec<f64>, n: usize) -> Vec<dascl_core::data::DomainDataset> {
    gen_two_moons_domains(
        &MoonsParams {
            rotations,
            n,
            noise_std: 0.1,
        },
        11,
    )
    .unwrap()
}

#[test]
fn criterion_3_erm_reduction() {
    let _g = serial();
    let domains = moons(vec![0.0, 20.0, 40.0], 120);
    let split = leave_one_domain_out(
        domains,
        &SplitSpec {
            target_domain_id: 2,
            val_fraction: 0.2,
            seed: 5,
        },
    )
    .unwrap();
    let model_cfg = ModelConfig {
        input_dim: 2,
        hidden_dims: vec![16],
        embed_dim: 8,
        proj_dim: 4,
        num_classes: 2,
    };
    let base = TrainConfig {
        epochs: 8,
        batch_size: 16,
        lr: 0.01,
        seed: 5,
        ..TrainConfig::default()
    };
    let erm = TrainConfig {
        method: Method::Erm,
        ..base.clone()
    };
    let mut policy = AugmentationPolicy::uncalibrated(true);
    for e in &mut policy.entries {
        e.probability = 0.0;
    }
    let dascl = TrainConfig {
        method: Method::Dascl,
        supcon: SupConConfig {
            lambda: 0.0,
            ..SupConConfig::default()
        },
        policy,
        ..base
    };
    let (a, _) = fit(&erm, &model_cfg, &split.train, &split.val).unwrap();
    let (b, _) = fit(&dascl, &model_cfg, &split.train, &split.val).unwrap();
    let bits = |m: &dascl_core::ModelBundle| -> Vec<u64> {
        m.params()
            .iter()
            .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let (ba, bb) = (bits(&a), bits(&b));
    let differing = ba.iter().zip(&bb).filter(|(x, y)| x != y).count();
    verdict(
        3,
        "ERM reduction",
        ba.len() == bb.len() && differing == 0,
        &format!("{} parameters, {differing} differ bitwise", ba.len()),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_calibration_contract() {
    let _g = serial();
    let ops: Vec<OpKind> = OpKind::ALL.to_vec();
    let synthetic = calibrate_with(
        &ops,
        &CalibrationSettings {
            epsilon: 0.3,
            grid_steps: 11,
        },
        |_, _, m| Ok(m),
    )
    .unwrap();
    let synthetic_ok = synthetic.iter().all(|c| c.magnitude == 0.3);

    let domains = gen_glyph_domains(
        &GlyphParams {
            rotations: vec![0.0, 15.0, 30.0],
            n_per_class: 60,
            num_classes: 5,
            size: 16,
        },
        3,
    )
    .unwrap();
    let split = leave_one_domain_out(
        domains,
        &SplitSpec {
            target_domain_id: 2,
            val_fraction: 0.25,
            seed: 1,
        },
    )
    .unwrap();
    let model_cfg = ModelShape::default().for_domains(&split.train).unwrap();
    let tcfg = TrainConfig {
        method: Method::Erm,
        epochs: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let (baseline, _) = fit(&tcfg, &model_cfg, &split.train, &split.val).unwrap();
    let settings = CalibrationSettings::default();
    let ranges = MagnitudeRanges::default();
    let cal = calibrate_magnitudes(&baseline, &split.val, &ops, &ranges, &settings, 1).unwrap();

    // Re-measure each chosen magnitude from scratch.
    let val = split.val.samples();
    let labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let correct = |xs: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let logits = predict(&baseline, &refs).unwrap();
        logits
            .iter()
            .zip(&labels)
            .filter(|(row, &y)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
                best == y
            })
            .count()
    };
    let clean: Vec<Vec<f64>> = val.iter().map(|s| s.x.clone()).collect();
    let base = correct(&clean);
    let grid_steps = settings.grid_steps;
    let mut details = Vec::new();
    let mut real_ok = true;
    for c in &cal {
        let g = (c.magnitude * (grid_steps - 1) as f64).round() as usize;
        let xs: Vec<Vec<f64>> = val
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng(calibration_seed(1, c.kind, g, i));
                apply_op_features(
                    &s.x,
                    &split.val.layout,
                    c.kind,
                    c.magnitude,
                    &ranges,
                    &mut r,
                )
                .unwrap()
            })
            .collect();
        let drop = if g == 0 {
            0.0
        } else {
            (base as f64 - correct(&xs) as f64) / val.len() as f64
        };
        real_ok &= drop <= settings.epsilon;
        details.push(format!("{}@{:.1}={drop:.3}", c.kind, c.magnitude));
    }
    let policy = apply_calibration(&AugmentationPolicy::uncalibrated(false), &cal);
    real_ok &= policy.validate().is_ok();
    verdict(
        4,
        "calibration contract",
        synthetic_ok && real_ok,
        &format!(
            "synthetic -> {:?}; glyph drops (eps {}): {}",
            synthetic.iter().map(|c| c.magnitude).collect::<Vec<_>>(),
            settings.epsilon,
            details.join(" ")
        ),
    );
}

// ---------------------------------------------------------------- 5

fn rot90_ccw(img: &Image) -> Vec<f64> {
    let n = img.height();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = img.get(c, n - 1 - r);
        }
    }
    out
}

fn rot90_cw(img: &Image) -> Vec<f64> {
    let n = img.height();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = img.get(n - 1 - c, r);
        }
    }
    out
}

#[test]
fn criterion_5_augmentation_laws() {
    let _g = serial();
    let ranges = MagnitudeRanges::default();
    let quarter = MagnitudeRanges {
        rotate_degrees: 90.0,
        ..ranges
    };
    let mut r = rng(55);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |law: &'static str| *failures.entry(law).or_insert(0) += 1;
    let images = 1200;
    for k in 0..images {
        let h = r.random_range(2..=16);
        let w = if k % 2 == 0 {
            h
        } else {
            r.random_range(2..=16)
        };
        let px: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let img = Image::new(h, w, px).unwrap();
        let kind = OpKind::ALL[r.random_range(0..OpKind::ALL.len())];
        let m: f64 = r.random();
        let seed: u64 = r.random();

        if !kind.is_binary() {
            let id = apply_op(&img, kind, 0.0, &ranges, &mut rng(seed)).unwrap();
            if id != img {
                fail("identity at m=0");
            }
        }
        let a = apply_op(&img, kind, m, &ranges, &mut rng(seed)).unwrap();
        let b = apply_op(&img, kind, m, &ranges, &mut rng(seed)).unwrap();
        if a != b {
            fail("seed determinism");
        }
        if !a.pixels().iter().all(|v| (0.0..=1.0).contains(v)) {
            fail("pixel range");
        }
        if h == w {
            if rotate(&img, 90.0).pixels() != rot90_ccw(&img).as_slice() {
                fail("rotate 90 lattice");
            }
            let q = apply_op(&img, OpKind::Rotate, 1.0, &quarter, &mut rng(seed)).unwrap();
            if q.pixels() != rot90_ccw(&img).as_slice() && q.pixels() != rot90_cw(&img).as_slice() {
                fail("rotate op at 90 lattice");
            }
        }
    }
    verdict(
        5,
        "augmentation laws",
        failures.is_empty(),
        &format!("{images} random images, violations {failures:?}"),
    );
}

// ---------------------------------------------------------------- 6

fn gaussian_cloud(n: usize, d: usize, offset: f64, seed: u64) -> Tensor {
    let mut t = Tensor::randn(&[n, d], seed, 1.0).unwrap();
    for v in t.data_mut() {
        *v += offset;
    }
    t
}

#[test]
fn criterion_6_distance_probe() {
    let _g = serial();
    let same = proxy_a_distance(
        &gaussian_cloud(300, 8, 0.0, 1),
        &gaussian_cloud(300, 8, 0.0, 2),
        9,
    )
    .unwrap();
    let far = proxy_a_distance(
        &gaussian_cloud(300, 8, 0.0, 3),
        &gaussian_cloud(300, 8, 10.0, 4),
        9,
    )
    .unwrap();
    let mut r = rng(66);
    let mut clamped = true;
    for k in 0..50u64 {
        let off = r.random_range(0.0..3.0);
        let d = proxy_a_distance(
            &gaussian_cloud(40, 3, 0.0, 100 + k),
            &gaussian_cloud(30, 3, off, 200 + k),
            k,
        )
        .unwrap();
        clamped &= (0.0..=2.0).contains(&d);
    }
    let feats: Vec<Tensor> = (0..4)
        .map(|i| gaussian_cloud(80, 5, i as f64 * 0.7, 300 + i as u64))
        .collect();
    let dm = pairwise_distances(&[0, 1, 2, 3], &feats, 4).unwrap();
    let mut symmetric = true;
    for i in 0..4 {
        symmetric &= dm.matrix[i][i] == 0.0;
        for j in 0..4 {
            symmetric &= dm.matrix[i][j] == dm.matrix[j][i];
            clamped &= (0.0..=2.0).contains(&dm.matrix[i][j]);
        }
    }
    verdict(
        6,
        "distance probe",
        same < 0.2 && far > 1.8 && clamped && symmetric,
        &format!(
            "identical {same:.3}, separated {far:.3}, clamped {clamped}, symmetric/zero-diagonal {symmetric}"
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_directional_glyph_experiment() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(tmp.path());
    cfg.dataset = DatasetSpec::Glyph(GlyphParams {
        rotations: vec![0.0, 15.0, 30.0, 45.0],
        ..GlyphParams::default()
    });
    cfg.targets = Some(vec![3]);
    cfg.seeds = (0..5).collect();
    let domains = harness::load_domains(&cfg.dataset, cfg.data_seed).unwrap();

    let start = Instant::now();
    let outcome =
        exec::with_threads(1, || harness::run_experiment_with(&cfg, &domains, 1)).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let acc = |m: Method| {
        let v: Vec<f64> = outcome
            .cells
            .iter()
            .filter(|c| c.method == m)
            .map(|c| c.target_accuracy)
            .collect();
        (v.iter().sum::<f64>() / v.len() as f64, v.len())
    };
    let (erm, n_erm) = acc(Method::Erm);
    let (dascl, n_dascl) = acc(Method::Dascl);

    let (mut before, mut after) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let dir = harness::cell_dir(tmp.path(), "rot45", Method::Dascl, seed);
        let d = DistanceReport::load(&dir.join(harness::DISTANCES_FILE)).unwrap();
        before.extend(d.augmented_before);
        after.extend(d.augmented_after);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (before, after) = (mean(&before), mean(&after));

    let complete = n_erm == 5 && n_dascl == 5 && outcome.report.failures.is_empty();
    verdict(
        7,
        "directional glyph experiment",
        complete && dascl >= erm - 0.01 && after <= before && elapsed < 600.0,
        &format!(
            "target rot45, {} epochs, 5 seeds: DASCL acc {:.2}% vs ERM {:.2}% \
             (delta {:+.2} pp); source-augmented distance {before:.3} before -> {after:.3} after; \
             {elapsed:.0}s",
            cfg.train.epochs,
            dascl * 100.0,
            erm * 100.0,
            (dascl - erm) * 100.0
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_harness_integrity() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(tmp.path());
    cfg.dataset = DatasetSpec::TwoMoons(MoonsParams {
        rotations: vec![0.0, 20.0, 40.0, 60.0],
        n: 80,
        noise_std: 0.1,
    });
    cfg.seeds = vec![0, 1];
    cfg.train.epochs = 4;
    cfg.train.batch_size = 16;
    cfg.train.lr = 0.01;
    cfg.model = ModelShape {
        hidden_dims: vec![8],
        embed_dim: 8,
        proj_dim: 4,
    };
    cfg.calibration.grid_steps = 3;
    let domains = harness::load_domains(&cfg.dataset, cfg.data_seed).unwrap();
    let first = harness::run_experiment_with(&cfg, &domains, 1).unwrap();
    let report_path = tmp.path().join("report.json");
    let bytes_first = fs::read(&report_path).unwrap();

    // Independent recomputation from the per-cell files.
    let mut values: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
    let mut cells = 0;
    let mut leaks = 0;
    collect_metrics(tmp.path(), &mut |v: serde_json::Value| {
        cells += 1;
        leaks += v["target_reads_before_eval"].as_u64().unwrap();
        values
            .entry((
                v["method"].as_str().unwrap().to_owned(),
                v["target"].as_str().unwrap().to_owned(),
            ))
            .or_default()
            .push((v["seed"].as_u64().unwrap(), v["value"].as_f64().unwrap()));
    });
    let report = MetricsReport::load(&report_path).unwrap();
    let scalar_mean = |xs: &[f64]| {
        let mut s = 0.0;
        for x in xs {
            s += x;
        }
        s / xs.len() as f64
    };
    let scalar_std = |xs: &[f64]| {
        let m = scalar_mean(xs);
        let mut ss = 0.0;
        for x in xs {
            ss += (x - m) * (x - m);
        }
        (ss / (xs.len() as f64 - 1.0)).sqrt()
    };
    let mut worst: f64 = 0.0;
    for c in &report.cells {
        let mut vs = values[&(c.method.to_string(), c.target.clone())].clone();
        vs.sort_by_key(|&(s, _)| s);
        let xs: Vec<f64> = vs.iter().map(|&(_, v)| v).collect();
        worst = worst.max((c.mean.unwrap() - scalar_mean(&xs)).abs());
        worst = worst.max((c.std.unwrap() - scalar_std(&xs)).abs());
    }
    for a in &report.averages {
        let m = a.method.to_string();
        let targets: Vec<&String> = values.keys().filter(|k| k.0 == m).map(|k| &k.1).collect();
        let target_means: Vec<f64> = targets
            .iter()
            .map(|t| {
                let xs: Vec<f64> = values[&(m.clone(), (*t).clone())]
                    .iter()
                    .map(|p| p.1)
                    .collect();
                scalar_mean(&xs)
            })
            .collect();
        let per_seed: Vec<f64> = cfg
            .seeds
            .iter()
            .map(|&s| {
                let xs: Vec<f64> = targets
                    .iter()
                    .map(|t| {
                        values[&(m.clone(), (*t).clone())]
                            .iter()
                            .find(|p| p.0 == s)
                            .unwrap()
                            .1
                    })
                    .collect();
                scalar_mean(&xs)
            })
            .collect();
        worst = worst.max((a.mean.unwrap() - scalar_mean(&target_means)).abs());
        worst = worst.max((a.std.unwrap() - scalar_std(&per_seed)).abs());
    }

    let md = String::from_utf8(render(&report, ReportFormat::Markdown).unwrap()).unwrap();
    let layout_ok = markdown_layout_ok(&md, &report);

    let second = harness::run_experiment_with(&cfg, &domains, 1).unwrap();
    let bytes_second = fs::read(&report_path).unwrap();
    let noop = second.reused == 16 && bytes_first == bytes_second && second.report == first.report;

    verdict(
        8,
        "harness integrity",
        cells == 16 && leaks == 0 && report.is_complete() && worst < 1e-12 && layout_ok && noop,
        &format!(
            "{cells} cells, target leaks {leaks}, aggregation max |diff| {worst:.1e}, \
             markdown layout {layout_ok}, rerun reused {} cells and report identical {}",
            second.reused,
            bytes_first == bytes_second
        ),
    );
}

fn collect_metrics(dir: &Path, f: &mut dyn FnMut(serde_json::Value)) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_metrics(&path, f);
        } else if path.file_name().is_some_and(|n| n == harness::METRICS_FILE) {
            f(serde_json::from_slice(&fs::read(&path).unwrap()).unwrap());
        }
    }
}

fn markdown_layout_ok(md: &str, report: &MetricsReport) -> bool {
    let lines: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).collect();
    let split = |l: &str| -> Vec<String> {
        l.trim_matches('|')
            .split('|')
            .map(|c| c.trim().to_owned())
            .collect()
    };
    let mut expect_header = vec!["Method".to_owned()];
    expect_header.extend(report.targets.iter().map(|t| t.name.clone()));
    expect_header.push("Average".into());
    if split(lines[0]) != expect_header {
        return false;
    }
    let rows: Vec<Vec<String>> = lines[2..2 + report.methods.len()]
        .iter()
        .map(|l| split(l))
        .collect();
    for col in 1..expect_header.len() {
        let nums: Vec<f64> = rows
            .iter()
            .map(|r| r[col].trim_matches('*').parse().unwrap())
            .collect();
        let best = nums.iter().copied().fold(f64::MIN, f64::max);
        for (r, &v) in rows.iter().zip(&nums) {
            if r[col].starts_with("**") != (v == best) {
                return false;
            }
        }
    }
    lines[2 + report.methods.len()..]
        .iter()
        .zip(&report.methods)
        .all(|(l, m)| split(l)[0] == format!("{m} Std.dev"))
}

// ---------------------------------------------------------------- 9

fn auc_pairs(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_9_auc_metric() {
    let _g = serial();
    let perfect = binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
    let ties = binary_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
    let mut r = rng(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(4..60);
        let mut positive: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        positive[0] = true;
        positive[1] = false;
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n)
            .map(|_| (r.random::<f64>() * 8.0).floor() / 8.0)
            .collect();
        let got = binary_auc(&scores, &positive).unwrap();
        worst = worst.max((got - auc_pairs(&scores, &positive)).abs());
    }
    verdict(
        9,
        "AUC metric",
        perfect == 1.0 && ties == 0.5 && worst < 1e-12,
        &format!("perfect {perfect}, all ties {ties}, 100 vectors max |diff| {worst:.1e}"),
    );
}

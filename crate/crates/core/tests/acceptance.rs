//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p calcscope --test acceptance`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use calcscope::collagen::{
    default_eps_grid, label_by_collagen, local_density, search_density_threshold, split_two_level,
    AgreementScope, CollagenLabel, DEFAULT_WINDOW_UM,
};
use calcscope::metrics::{confusion, confusion_bits, dsc, jsc};
use calcscope::optim::{lbfgs_minimize, mlp_loss_grad, Control, LbfgsConfig, MlpParams, TrainingBatch};
use calcscope::particles::{
    classify_size, extract_particles, label_components, Connectivity, ParticleParams, ParticleSet,
    SizeClass,
};
use calcscope::phantom::{annotated_slices, generate, Phantom, PhantomTemplate};
use calcscope::phenotype::{
    classify_macro_mask, classify_micro_distribution, cluster_count, dbscan, ClusterParams,
    TopologyParams,
};
use calcscope::pipeline::{build_pool, run_with_inputs, PipelineConfig, PipelineInputs, RunOutcome};
use calcscope::segnet::{segment_sample_stack, threshold_baseline, train_model, TrainConfig};
use calcscope::volume::{BinaryMask, SliceAnnotation};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, max: usize) -> BinaryMask {
    let (nx, ny, nz) = (rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max));
    let p = rng.random_range(0.05..0.7);
    BinaryMask::new(nx, ny, nz, (0..nx * ny * nz).map(|_| rng.random_bool(p)).collect()).unwrap()
}

// 1. Metric oracles
fn metric_oracles() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_jsc = 0.0f64;
    for k in 0..1000 {
        let a = random_mask(&mut rng, 64);
        let (nx, ny, nz) = a.dims();
        let p = rng.random_range(0.0..0.8);
        let b = BinaryMask::new(nx, ny, nz, (0..nx * ny * nz).map(|_| rng.random_bool(p)).collect()).unwrap();
        let sa: HashSet<usize> = (0..a.len()).filter(|&i| a.bits()[i]).collect();
        let sb: HashSet<usize> = (0..b.len()).filter(|&i| b.bits()[i]).collect();
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        let (d_ref, j_ref) = if sa.is_empty() && sb.is_empty() {
            (1.0, 1.0)
        } else {
            (
                2.0 * inter as f64 / (sa.len() + sb.len()) as f64,
                inter as f64 / union as f64,
            )
        };
        let c = confusion(&a, &b).unwrap();
        let (d, j) = (dsc(&c), jsc(&c));
        if d != d_ref || j != j_ref {
            return verdict(false, format!("pair {k}: dsc {d} vs {d_ref}, jsc {j} vs {j_ref}"));
        }
        worst_jsc = worst_jsc.max((j - d / (2.0 - d)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst_jsc <= 1e-12 && secs < 30.0,
        format!("1000 pairs exact, max |JSC - DSC/(2-DSC)| = {worst_jsc:.1e}, {secs:.1}s"),
    )
}

// 2. MLP gradient check
fn gradient_check() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let (n_in, h, k) = (6, rng.random_range(2..=500), 2);
        let n = rng.random_range(1..40);
        let p = MlpParams::init(n_in, h, k, draw);
        let x = ndarray::Array2::from_shape_fn((n, n_in), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let batch = TrainingBatch::from_labels(x, &labels, k).unwrap();
        let (_, g) = mlp_loss_grad(&p, &batch).unwrap();
        let i = rng.random_range(0..p.data.len());
        let eps = 1e-6;
        let mut plus = p.clone();
        plus.data[i] += eps;
        let mut minus = p.clone();
        minus.data[i] -= eps;
        let fd = (mlp_loss_grad(&plus, &batch).unwrap().0 - mlp_loss_grad(&minus, &batch).unwrap().0) / (2.0 * eps);
        let a = g.data[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("100 draws, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

// 3. LBFGS sanity
fn lbfgs_sanity() -> Verdict {
    let quad = |x: &[f64]| {
        let f = x.iter().map(|v| v * v).sum::<f64>();
        (f, x.iter().map(|v| 2.0 * v).collect())
    };
    let cfg = LbfgsConfig {
        grad_tol: 1e-10,
        ..Default::default()
    };
    let q = lbfgs_minimize(quad, &[3.0, -4.0], &cfg, |_| Control::Continue).unwrap();
    let qn = q.x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rosen = |x: &[f64]| {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        (f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    };
    let cfg = LbfgsConfig {
        grad_tol: 1e-9,
        max_iters: 100,
        ..Default::default()
    };
    let r = lbfgs_minimize(rosen, &[-1.2, 1.0], &cfg, |_| Control::Continue).unwrap();
    let rv = rosen(&r.x).0;
    verdict(
        qn < 1e-8 && q.iterations <= 5 && rv < 1e-10 && r.iterations <= 100,
        format!(
            "quadratic |x| {qn:.1e} in {} its, Rosenbrock f {rv:.1e} in {} its",
            q.iterations, r.iterations
        ),
    )
}

fn flood_fill_labels(m: &BinaryMask) -> Vec<u32> {
    let (nx, ny, nz) = m.dims();
    let mut lab = vec![0u32; m.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for s in 0..m.len() {
        if !m.bits()[s] || lab[s] != 0 {
            continue;
        }
        next += 1;
        lab[s] = next;
        queue.push_back(s);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let j = a as usize + nx * (b as usize + ny * c as usize);
                        if m.bits()[j] && lab[j] == 0 {
                            lab[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    lab
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
    })
}

// 7. Particle oracle
fn particle_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..200 {
        let m = random_mask(&mut rng, 64);
        let lv = label_components(&m, Connectivity::TwentySix);
        if !same_partition(&lv.labels, &flood_fill_labels(&m)) {
            return verdict(false, format!("mask {k}: partition differs from flood fill"));
        }
    }
    let mut worst = 0.0f64;
    for r in [10.0, 12.5, 15.0, 20.0] {
        let n = (2.0 * r) as usize + 5;
        let c = n as f64 / 2.0;
        let mut m = BinaryMask::empty(n, n, n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    m.set(x, y, z, d <= r * r);
                }
            }
        }
        let set = extract_particles(&m, 1.0, &ParticleParams::default()).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        worst = worst.max((set.particles[0].volume_um3 - analytic).abs() / analytic);
    }
    // strict inequality at the size boundary
    let mut m = BinaryMask::empty(8, 1, 1);
    m.set(0, 0, 0, true);
    let single = ParticleParams {
        min_volume_voxels: 1,
        ..Default::default()
    };
    let mut set = extract_particles(&m, 1.0, &single).unwrap();
    let class_at = |set: &mut ParticleSet, d: f64| {
        set.particles[0].d_eq_um = d;
        classify_size(set.clone()).particles[0].size_class
    };
    let boundary = class_at(&mut set, 500.0) == Some(SizeClass::Macro)
        && class_at(&mut set, 500.0 - 1e-9) == Some(SizeClass::Micro)
        && class_at(&mut set, 500.0 + 1e-9) == Some(SizeClass::Macro);
    verdict(
        worst < 0.02 && boundary,
        format!("200 partitions equal, worst sphere error {:.2}%, 500 um boundary ok: {boundary}", worst * 100.0),
    )
}

fn brute_dbscan(pts: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = pts.len();
    let d2 = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let nb: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d2(pts[i], pts[j]) <= eps * eps).collect())
        .collect();
    let core: Vec<bool> = nb.iter().map(|v| v.len() >= min_pts).collect();
    // density-connected components of the core graph
    let mut comp = vec![usize::MAX; n];
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        comp[s] = s;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            for &j in &nb[i] {
                if core[j] && comp[j] == usize::MAX {
                    comp[j] = s;
                    stack.push(j);
                }
            }
        }
    }
    let raw: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if core[i] {
                Some(comp[i])
            } else {
                nb[i].iter().filter(|&&j| core[j]).min().map(|&j| comp[j])
            }
        })
        .collect();
    // renumber by smallest member index
    let mut ids = HashMap::new();
    raw.iter()
        .map(|r| {
            r.map(|c| {
                let next = ids.len();
                *ids.entry(c).or_insert(next)
            })
        })
        .collect()
}

// 8. Clustering oracle
fn clustering_oracle(standard: &Phantom) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..200 {
        let n = rng.random_range(1..=200);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
            .collect();
        let eps = rng.random_range(3.0..25.0);
        let min_pts = rng.random_range(2..8);
        let got = dbscan(&pts, &ClusterParams { eps_um: eps, min_pts }).unwrap();
        if got != brute_dbscan(&pts, eps, min_pts) {
            return verdict(false, format!("instance {k} differs"));
        }
    }
    let set = extract_particles(&standard.calcification, standard.spec.spacing_um, &ParticleParams::default()).unwrap();
    let set = classify_micro_distribution(set, &ClusterParams::default()).unwrap();
    let labels: Vec<Option<usize>> = set.particles.iter().map(|p| p.cluster_id).collect();
    let clusters = cluster_count(&labels);
    verdict(
        clusters == 7,
        format!("200 instances equal, seven-cluster phantom yields {clusters} clusters"),
    )
}

fn brute_open(m: &BinaryMask, r: f64) -> BinaryMask {
    let (nx, ny, nz) = m.dims();
    let ri = r.floor() as i64;
    let mut offs = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dx * dx + dy * dy + dz * dz) as f64) <= r * r {
                    offs.push((dx, dy, dz));
                }
            }
        }
    }
    let at = |x: i64, y: i64, z: i64| -> Option<usize> {
        (x >= 0 && y >= 0 && z >= 0 && x < nx as i64 && y < ny as i64 && z < nz as i64)
            .then(|| x as usize + nx * (y as usize + ny * z as usize))
    };
    let mut eroded = BinaryMask::empty(nx, ny, nz);
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                let keep = offs
                    .iter()
                    .all(|&(a, b, c)| at(x + a, y + b, z + c).is_some_and(|j| m.bits()[j]));
                eroded.set(x as usize, y as usize, z as usize, keep);
            }
        }
    }
    let mut opened = BinaryMask::empty(nx, ny, nz);
    for i in (0..eroded.len()).filter(|&i| eroded.bits()[i]) {
        let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
        for &(a, b, c) in &offs {
            if let Some(j) = at(x + a, y + b, z + c) {
                opened.bits_mut()[j] = true;
            }
        }
    }
    opened
}

fn shape(n: usize, f: impl Fn(f64, f64, f64) -> bool) -> BinaryMask {
    let mut m = BinaryMask::empty(n, n, n);
    let c = n as f64 / 2.0;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                m.set(x, y, z, f(x as f64 - c, y as f64 - c, z as f64 - c));
            }
        }
    }
    m
}

// 9. Topology oracle
fn topology_oracle() -> Verdict {
    let mut shapes: Vec<(String, BinaryMask, f64)> = Vec::new();
    for (k, rad) in [5.0, 6.5, 8.0, 9.0, 10.0].into_iter().enumerate() {
        shapes.push((format!("ball{k}"), shape(24, |x, y, z| x * x + y * y + z * z <= rad * rad), 3.0));
    }
    for (k, w) in [1.0, 1.5, 2.0, 3.0, 4.0].into_iter().enumerate() {
        shapes.push((format!("rod{k}"), shape(24, |x, y, z| x.abs() <= 10.0 && y * y + z * z <= w * w), 2.5));
    }
    for (k, (rad, sr)) in [(6.0, 1.5), (7.0, 2.0), (8.0, 1.0), (6.0, 2.5), (7.5, 3.0)].into_iter().enumerate() {
        shapes.push((
            format!("ball+spike{k}"),
            shape(28, |x, y, z| x * x + y * y + z * z <= rad * rad || ((0.0..=12.0).contains(&x) && y * y + z * z <= sr * sr)),
            3.0,
        ));
    }
    for (k, por) in [0.0, 0.2, 0.4, 0.5, 0.7].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(90 + k as u64);
        let mut m = shape(26, |x, y, z| {
            let d = (x * x + y * y + z * z).sqrt();
            d <= 5.0 || (d > 7.0 && d <= 9.0)
        });
        let bits = m.bits_mut();
        for b in bits.iter_mut() {
            if *b && rng.random_bool(por) {
                *b = false;
            }
        }
        // restore the core so it stays a solid ball
        let core = shape(26, |x, y, z| x * x + y * y + z * z <= 25.0);
        for (b, c) in m.bits_mut().iter_mut().zip(core.bits()) {
            *b |= *c;
        }
        shapes.push((format!("porous-shell{k}"), m, 2.0));
    }
    let mut worst_sum = 0.0f64;
    for (name, m, r) in &shapes {
        let params = TopologyParams {
            opening_radius_um: *r,
            fill_cavities: false,
        };
        let (dense, t) = classify_macro_mask(m, 1.0, &params).unwrap();
        let mut expect = brute_open(m, *r);
        for (e, s) in expect.bits_mut().iter_mut().zip(m.bits()) {
            *e &= *s;
        }
        if dense != expect {
            return verdict(false, format!("{name}: dense set differs from brute-force opening"));
        }
        let filled = classify_macro_mask(m, 1.0, &TopologyParams { fill_cavities: true, ..params }).unwrap().1;
        for tt in [t, filled] {
            worst_sum = worst_sum.max((tt.sparse_fraction + tt.dense_fraction - 1.0).abs());
        }
    }
    verdict(
        worst_sum <= 1e-12,
        format!("{} shapes equal brute force, max |sum - 1| = {worst_sum:.1e}", shapes.len()),
    )
}

// 11. Collagen coupling
fn collagen_coupling_check() -> Verdict {
    let p = generate(&PhantomTemplate::Collagen.spec(11).unwrap()).unwrap();
    let spacing = p.spec.spacing_um;
    let set = extract_particles(&p.calcification, spacing, &ParticleParams::default()).unwrap();
    let field = local_density(p.collagen.as_ref().unwrap(), DEFAULT_WINDOW_UM, spacing).unwrap();
    let split = split_two_level(&field);
    let c = label_by_collagen(&set, &split).unwrap();
    let grid = default_eps_grid();
    let min_pts = ClusterParams::default().min_pts;
    let r = search_density_threshold(&set, &c, &grid, min_pts, AgreementScope::AllParticles).unwrap();
    let mut shuffled_converged = 0;
    for seed in 0..100u64 {
        let mut s: Vec<CollagenLabel> = c.clone();
        s.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rs = search_density_threshold(&set, &s, &grid, min_pts, AgreementScope::AllParticles).unwrap();
        shuffled_converged += rs.converged as usize;
    }
    verdict(
        r.agreement >= 0.8 && r.converged && shuffled_converged <= 5,
        format!(
            "{} particles, agreement {:.3} at eps {:.1} um, shuffled labels converged in {shuffled_converged}/100",
            set.len(),
            r.agreement,
            r.best_eps_um
        ),
    )
}

struct Heavy {
    phantom: Phantom,
    test: Vec<SliceAnnotation>,
    run_a: RunOutcome,
    run_a_secs: f64,
    run_b: RunOutcome,
    a_dir: tempfile::TempDir,
    b_dir: tempfile::TempDir,
    train_slices: Vec<usize>,
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        pixel_cap: 20_000,
        ..Default::default()
    }
}

fn pipeline_run(phantom: &Phantom, zs: &[usize], threads: usize, dir: &std::path::Path) -> (RunOutcome, f64) {
    let cfg = PipelineConfig {
        output_dir: dir.to_path_buf(),
        train: train_cfg(),
        seed: 42,
        threads: Some(threads),
        ..Default::default()
    };
    let t = Instant::now();
    let pool = build_pool(Some(threads)).unwrap();
    let out = pool
        .install(|| {
            run_with_inputs(
                &cfg,
                PipelineInputs {
                    volume: phantom.volume.clone(),
                    annotations: phantom.annotations(zs).unwrap(),
                    model: None,
                },
            )
        })
        .expect("pipeline run");
    (out, t.elapsed().as_secs_f64())
}

fn mean_scores(sample: &BinaryMask, lipid: &BinaryMask, test: &[SliceAnnotation]) -> (f64, f64) {
    let mut s = 0.0;
    let mut l = 0.0;
    for a in test {
        s += confusion_bits(sample.slice_bits(a.z), &a.sample.bits).unwrap().dsc();
        l += confusion_bits(lipid.slice_bits(a.z), &a.lipid.bits).unwrap().dsc();
    }
    (s / test.len() as f64, l / test.len() as f64)
}

fn heavy() -> Heavy {
    let phantom = generate(&PhantomTemplate::Standard.spec(42).unwrap()).unwrap();
    let zs = annotated_slices(phantom.volume.nz(), 25);
    let train_slices: Vec<usize> = zs.iter().step_by(2).copied().collect();
    let test_slices: Vec<usize> = zs.iter().skip(1).step_by(2).copied().collect();
    let test = phantom.annotations(&test_slices).unwrap();
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let (run_a, run_a_secs) = pipeline_run(&phantom, &train_slices, 1, a_dir.path());
    let (run_b, _) = pipeline_run(&phantom, &train_slices, 3, b_dir.path());
    Heavy {
        phantom,
        test,
        run_a,
        run_a_secs,
        run_b,
        a_dir,
        b_dir,
        train_slices,
    }
}

// 4. Segmentation on the standard phantom
fn segmentation(h: &Heavy) -> Verdict {
    let (s, l) = mean_scores(&h.run_a.sample, &h.run_a.lipid, &h.test);
    let seg = h.run_a.timings.rows.iter().filter(|r| r.stage.starts_with("segmentation_")).map(|r| r.seconds).sum::<f64>();
    verdict(
        s >= 0.95 && l >= 0.85 && seg < 900.0,
        format!("12 held-out slices: sample DSC {s:.4}, lipid DSC {l:.4}; training+inference {seg:.0}s"),
    )
}

// 5. Sample DSC vs number of training slices
fn slice_count_trend(h: &Heavy) -> Verdict {
    let subset = |pos: &[usize]| pos.iter().map(|&i| h.train_slices[i]).collect::<Vec<_>>();
    let mut dscs = Vec::new();
    for pos in [vec![0, 3, 6, 9, 12], vec![0, 2, 3, 5, 6, 8, 9, 11, 12]] {
        let anns = h.phantom.annotations(&subset(&pos)).unwrap();
        let cfg = TrainConfig { seed: 42, ..train_cfg() };
        let (model, _) = train_model(&h.phantom.volume, &anns, &cfg).unwrap();
        let sample = segment_sample_stack(&h.phantom.volume, &model).unwrap();
        let empty = BinaryMask::like(&h.phantom.volume);
        dscs.push(mean_scores(&sample, &empty, &h.test).0);
    }
    dscs.push(mean_scores(&h.run_a.sample, &h.run_a.lipid, &h.test).0);
    let ok = dscs.windows(2).all(|w| w[1] >= w[0] - 0.005);
    verdict(
        ok,
        format!("sample DSC 5/9/13 slices: {:.4} / {:.4} / {:.4}", dscs[0], dscs[1], dscs[2]),
    )
}

// 6. Framework vs global thresholding on lipid
fn baseline_gap(h: &Heavy) -> Verdict {
    let (_, framework) = mean_scores(&h.run_a.sample, &h.run_a.lipid, &h.test);
    let (bs, bl) = threshold_baseline(&h.phantom.volume, calcscope::pipeline::DEFAULT_CALCIFICATION_TAU).unwrap();
    let (_, baseline) = mean_scores(&bs, &bl, &h.test);
    verdict(
        framework - baseline >= 0.1,
        format!("lipid DSC framework {framework:.4} vs thresholding {baseline:.4} (gap {:.4})", framework - baseline),
    )
}

// 10. End-to-end
fn end_to_end(h: &Heavy) -> Verdict {
    let truth = &h.phantom.truth;
    let rep = &h.run_a.report;
    let counts_ok = rep.counts == truth.counts && rep.n_clusters == truth.n_clusters;
    let pairs = [
        ("lipid/tissue", rep.ratios.lipid_to_tissue, truth.ratios.lipid_to_tissue),
        ("calc/tissue", rep.ratios.calc_to_tissue, truth.ratios.calc_to_tissue),
        ("athero/calc", rep.ratios.athero_calc_to_calc, truth.ratios.athero_calc_to_calc),
        ("macro/calc", rep.ratios.macro_to_calc, truth.ratios.macro_to_calc),
        ("clustered/calc", rep.ratios.clustered_micro_to_calc, truth.ratios.clustered_micro_to_calc),
    ];
    let worst = pairs
        .iter()
        .map(|(_, g, t)| (g - t).abs() / t)
        .fold(0.0f64, f64::max);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let identical = ["report.json", "particles.csv", "training.json", "sample_mask.raw", "lipid_mask.raw", "calcification_mask.raw"]
        .iter()
        .all(|f| read(h.a_dir.path(), f) == read(h.b_dir.path(), f))
        && h.run_a.sample == h.run_b.sample
        && h.run_a.lipid == h.run_b.lipid;
    verdict(
        counts_ok && worst <= 0.02 && identical && h.run_a_secs < 1200.0,
        format!(
            "counts exact: {counts_ok}, worst ratio error {:.2}%, identical for 1 vs 3 threads: {identical}, run {:.0}s",
            worst * 100.0,
            h.run_a_secs
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        failed += (!v.pass) as usize;
        println!("criterion {n:>2} [{tag}] {name}: {}", v.detail);
    };
    report(1, "metric oracles", metric_oracles());
    report(2, "gradient check", gradient_check());
    report(3, "LBFGS sanity", lbfgs_sanity());
    report(7, "particle oracle", particle_oracle());
    report(9, "topology oracle", topology_oracle());
    report(11, "collagen coupling", collagen_coupling_check());
    let h = heavy();
    report(8, "clustering oracle", clustering_oracle(&h.phantom));
    report(4, "segmentation", segmentation(&h));
    report(5, "training-slice trend", slice_count_trend(&h));
    report(6, "thresholding gap", baseline_gap(&h));
    report(10, "end-to-end", end_to_end(&h));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

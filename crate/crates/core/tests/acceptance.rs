//! Acceptance gate. Every criterion prints one PASS/FAIL line.
//!
//! The property criteria run with the ordinary test suite. The dataset
//! criteria train full-size models and only run when asked for:
//!
//! ```text
//! KED_DATA_DIR=data cargo test --release -p ked --test acceptance -- --ignored [1 2 3 4]
//! ```
//!
//! Each dataset run caches its pipeline under `target/ked-acceptance/` and
//! writes its verdict lines to `target/ked-acceptance/results/`, which the
//! ordinary run echoes back.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ked::autodiff::{Tape, Tensor};
use ked::community::{louvain, modularity, Partition, WeightedGraph};
use ked::data::{gen_synthetic_independent, ChimericSampler, SyntheticSpec};
use ked::distill::{
    kd_loss, ked_loss, temperature_softmax, DistillConfig, StudentTerms, TeacherTerms,
};
use ked::eval::EvaluationReport;
use ked::experiment::{ExperimentConfig, Pipeline, ACTUAL_PARTITION, PARTITION};
use ked::models::{
    bayes_combine, dense_param_count, shapley_values_bruteforce, type_m_param_count, Mlp, MlpSpec,
    Model, SuperfeaturePartition, TypeMModel, TypeMSpec,
};
use ked::superfeatures::{
    build_dependency_matrix, estimate_hessian, partition_agreement, HessianEstimate,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: &str, pass: bool, detail: &str) -> String {
    let line = format!(
        "criterion {criterion:<4} {}  {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    line
}

// ---------------------------------------------------------------------------
// Criterion 5: property suites
// ---------------------------------------------------------------------------

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_prior(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

fn type_m(rng: &mut ChaCha8Rng, groups: &[usize], hidden: Vec<usize>, c: usize) -> TypeMModel {
    let spec = TypeMSpec {
        partition: SuperfeaturePartition::contiguous(groups).unwrap(),
        hidden_widths: hidden,
        num_classes: c,
    };
    let prior = random_prior(rng, c);
    TypeMModel::new(&spec, prior, rng).unwrap()
}

/// Loss value and parameter gradients for the KED objective (or KD when the
/// student is a black box).
fn loss_and_grads(
    student: &Model,
    teacher: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> (f64, Vec<Vec<f64>>) {
    let t = teacher.predict(x).unwrap();
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let f = student.forward(&mut tape, &params, xv).unwrap();
    let loss = match student {
        Model::TypeM(_) => ked_loss(
            &mut tape,
            labels,
            StudentTerms {
                log_prediction: f.log_prediction,
                log_explanations: &f.log_explanations,
                adapted_hidden: &[],
            },
            TeacherTerms {
                prediction: &t.prediction,
                explanations: &t.explanations,
                hidden: &[],
            },
            cfg,
        ),
        Model::BlackBox(_) => kd_loss(&mut tape, labels, f.log_prediction, &t.prediction, cfg),
    }
    .unwrap();
    let value = tape.scalar(loss).unwrap();
    tape.backward(loss).unwrap();
    let grads = params
        .iter()
        .map(|&p| tape.grad(p).unwrap().to_vec())
        .collect();
    (value, grads)
}

fn loss_value(
    student: &Model,
    teacher: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> f64 {
    loss_and_grads(student, teacher, x, labels, cfg).0
}

/// Worst relative error between analytic and central-difference gradients.
/// Gradients below 1e-4 in magnitude are compared against that floor.
fn worst_fd_error(
    mut student: Model,
    teacher: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> f64 {
    let (_, grads) = loss_and_grads(&student, teacher, x, labels, cfg);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for e in 0..g.len() {
            let original = student.params()[k].value.data()[e];
            student.params_mut()[k].value.data_mut()[e] = original + h;
            let up = loss_value(&student, teacher, x, labels, cfg);
            student.params_mut()[k].value.data_mut()[e] = original - h;
            let down = loss_value(&student, teacher, x, labels, cfg);
            student.params_mut()[k].value.data_mut()[e] = original;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((g[e] - fd).abs() / g[e].abs().max(fd.abs()).max(1e-4));
        }
    }
    worst
}

fn check_gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = random_tensor(&mut rng, 6, 5);
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let cfg = DistillConfig {
        temperature: 3.0,
        tau: 2.0,
        ..DistillConfig::default()
    };
    let teacher = Model::TypeM(type_m(&mut rng, &[2, 3], vec![6], 3));
    let student = Model::TypeM(type_m(&mut rng, &[2, 3], vec![4, 4], 3));
    let ked = worst_fd_error(student, &teacher, &x, &labels, &cfg);
    let black = Model::BlackBox(Mlp::new(MlpSpec::new(5, vec![4], 3).unwrap(), &mut rng).unwrap());
    let kd = worst_fd_error(black, &teacher, &x, &labels, &cfg);
    let worst = ked.max(kd);
    (
        worst <= 1e-4,
        format!("worst relative error {worst:.2e} (KED {ked:.2e}, KD {kd:.2e}) <= 1e-4"),
    )
}

fn check_shapley() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst: f64 = 0.0;
    for m in 1..=4 {
        let sizes = vec![2; m];
        let model = Model::TypeM(type_m(&mut rng, &sizes, vec![5], 4));
        let x = random_tensor(&mut rng, 8, 2 * m);
        let out = model.predict(&x).unwrap();
        let Model::TypeM(tm) = &model else {
            unreachable!()
        };
        for i in 0..x.rows() {
            for y in 0..4 {
                let logs: Vec<f64> = out.log_explanations.iter().map(|l| l.get(i, y)).collect();
                let phi = shapley_values_bruteforce(&logs, tm.prior()[y].ln()).unwrap();
                for (a, b) in phi.iter().zip(&logs) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    (
        worst <= 1e-9,
        format!("max |q_m - log p(y|x_m)| = {worst:.1e} <= 1e-9 for M = 1..4"),
    )
}

fn check_bayes_pooling() -> (bool, String) {
    let data = gen_synthetic_independent(&SyntheticSpec {
        group_sizes: vec![2, 3, 1, 2],
        num_classes: 4,
        samples: 300,
        separation: 1.0,
        seed: 52,
    })
    .unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..data.dataset.len() {
        let x = data.dataset.features().row(i);
        let parts: Vec<Vec<f64>> = (0..4).map(|m| data.oracle.group_posterior(x, m)).collect();
        let refs: Vec<&[f64]> = parts.iter().map(Vec::as_slice).collect();
        let pooled = bayes_combine(&refs, data.oracle.prior()).unwrap();
        let joint = data.oracle.joint_posterior(x);
        for (a, b) in pooled.iter().zip(&joint) {
            worst = worst.max((a - b).abs());
        }
    }
    (
        worst <= 1e-9,
        format!("pooled group posteriors vs exact joint, max diff {worst:.1e} <= 1e-9"),
    )
}

fn loss_only(
    student: &Model,
    teacher: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
    ked: bool,
) -> f64 {
    let t = teacher.predict(x).unwrap();
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let f = student.forward(&mut tape, &params, xv).unwrap();
    let loss = if ked {
        ked_loss(
            &mut tape,
            labels,
            StudentTerms {
                log_prediction: f.log_prediction,
                log_explanations: &f.log_explanations,
                adapted_hidden: &[],
            },
            TeacherTerms {
                prediction: &t.prediction,
                explanations: &t.explanations,
                hidden: &[],
            },
            cfg,
        )
    } else {
        kd_loss(&mut tape, labels, f.log_prediction, &t.prediction, cfg)
    }
    .unwrap();
    tape.scalar(loss).unwrap()
}

fn check_loss_reductions() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let x = random_tensor(&mut rng, 10, 6);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let mut worst_mu: f64 = 0.0;
    let mut worst_m1: f64 = 0.0;
    for trial in 0..20 {
        let cfg = DistillConfig {
            temperature: rng.gen_range(1.0..12.0),
            tau: rng.gen_range(1.0..12.0),
            lambda: rng.gen_range(0.0..1.0),
            mu: if trial % 2 == 0 {
                0.0
            } else {
                rng.gen_range(0.0..1.0)
            },
            rho: rng.gen_range(0.0..1.0),
        };
        if cfg.mu == 0.0 {
            let teacher = Model::TypeM(type_m(&mut rng, &[3, 3], vec![5], 3));
            let student = Model::TypeM(type_m(&mut rng, &[3, 3], vec![4], 3));
            let a = loss_only(&student, &teacher, &x, &labels, &cfg, true);
            let b = loss_only(&student, &teacher, &x, &labels, &cfg, false);
            worst_mu = worst_mu.max((a - b).abs());
        }
        // With one group the explanation is the prediction, so the two
        // softened terms merge when both temperatures agree.
        let cfg = DistillConfig {
            tau: cfg.temperature,
            ..cfg
        };
        let teacher = Model::TypeM(type_m(&mut rng, &[6], vec![5], 3));
        let student = Model::TypeM(type_m(&mut rng, &[6], vec![4], 3));
        let a = loss_only(&student, &teacher, &x, &labels, &cfg, true);
        let b = loss_only(&student, &teacher, &x, &labels, &cfg, false);
        worst_m1 = worst_m1.max((a - b).abs());
    }
    let pass = worst_mu <= 1e-12 && worst_m1 <= 1e-12;
    (
        pass,
        format!(
            "KED(mu=0) vs KD {worst_mu:.1e}, M=1 KED (tau = T) vs KD {worst_m1:.1e}, both <= 1e-12"
        ),
    )
}

fn check_temperature_softmax() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let (mut identity, mut rows): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let c = rng.gen_range(2..12);
        let p = random_prior(&mut rng, c);
        let s1 = temperature_softmax(&p, 1.0).unwrap();
        identity = identity.max(
            p.iter()
                .zip(&s1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        for t in [0.5, 2.0, 10.0, 50.0] {
            let s = temperature_softmax(&p, t).unwrap();
            rows = rows.max((s.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let pass = identity <= 1e-12 && rows <= 1e-12;
    (
        pass,
        format!("sigma_1 identity {identity:.1e}, sigma_T row-sum error {rows:.1e}, both <= 1e-12"),
    )
}

fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for c in 0..=next {
            prefix.push(c);
            rec(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), n, &mut out);
    out
}

fn check_louvain() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let candidates = all_partitions(6);
    let trials = 50;
    let mut matched = 0;
    for t in 0..trials {
        let mut edges = Vec::new();
        for (a, b) in [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)] {
            edges.push((a, b, rng.gen_range(0.5..1.5)));
        }
        let a = rng.gen_range(0..3);
        let b = rng.gen_range(3..6);
        edges.push((a, b, rng.gen_range(0.05..0.4)));
        edges.push(((a + 1) % 3, 3 + (b - 2) % 3, rng.gen_range(0.05..0.4)));
        let g = WeightedGraph::new(6, edges).unwrap();
        let best = candidates
            .iter()
            .map(|a| modularity(&g, &Partition::new(a.clone()).unwrap(), 1.0).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let q = modularity(&g, &louvain(&g, 1.0, t), 1.0).unwrap();
        if (q - best).abs() < 1e-9 {
            matched += 1;
        }
    }

    let seeds = 100;
    let mut recovered = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = 40;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let p = if (i < 20) == (j < 20) { 0.9 } else { 0.05 };
                if rng.gen_bool(p) {
                    edges.push((i, j, 1.0));
                }
            }
        }
        let g = WeightedGraph::new(n, edges).unwrap();
        let truth: Vec<Vec<usize>> = vec![(0..20).collect(), (20..40).collect()];
        if louvain(&g, 1.0, seed).groups() == truth {
            recovered += 1;
        }
    }
    let pass = matched == trials && recovered * 100 >= 95 * seeds;
    (pass, format!("exhaustive optimum {matched}/{trials} six-node graphs; planted split {recovered}/{seeds} (>= 95%)"))
}

fn check_param_counts() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let mut mismatches = 0;
    let cases = 60;
    for _ in 0..cases {
        let m = rng.gen_range(1..5);
        let layers = rng.gen_range(1..4);
        let n = rng.gen_range(1..9);
        let c = rng.gen_range(2..6);
        let sizes: Vec<usize> = (0..m).map(|_| rng.gen_range(1..5)).collect();
        let d: usize = sizes.iter().sum();
        let model = Model::TypeM(type_m(&mut rng, &sizes, vec![n; layers], c));
        let enumerated: usize = model.params().iter().map(|p| p.len()).sum();
        if type_m_param_count(m as u64, layers as u64, n as u64, d as u64, c as u64)
            != enumerated as u64
        {
            mismatches += 1;
        }
        let mut widths = vec![d];
        widths.extend(vec![n; layers]);
        widths.push(c);
        let mlp = Model::BlackBox(
            Mlp::new(MlpSpec::new(d, vec![n; layers], c).unwrap(), &mut rng).unwrap(),
        );
        let enumerated: usize = mlp.params().iter().map(|p| p.len()).sum();
        if dense_param_count(&widths) != enumerated as u64 {
            mismatches += 1;
        }
    }
    (mismatches == 0, format!("closed-form counts vs enumerated parameters: {mismatches} mismatches in {cases} architectures"))
}

fn check_chimeric() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let teacher = type_m(&mut rng, &[2, 1, 2], vec![5], 3);
    let k = 4;
    let base = random_tensor(&mut rng, k, 5);
    let sampler = ChimericSampler::new(&base, &teacher, 0).unwrap();
    let mut composites = Vec::new();
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                composites.push(vec![a, b, c]);
            }
        }
    }
    let mut distinct: Vec<Vec<u64>> = Vec::new();
    let model = Model::TypeM(teacher.clone());
    let mut worst: f64 = 0.0;
    for rows in &composites {
        let batch = sampler.composite(rows).unwrap();
        let key: Vec<u64> = batch.features.data().iter().map(|v| v.to_bits()).collect();
        if !distinct.contains(&key) {
            distinct.push(key);
        }
        let full = model.predict(&batch.features).unwrap();
        worst = worst.max(full.prediction.max_abs_diff(&batch.prediction));
        for (a, b) in full.explanations.iter().zip(&batch.explanations) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    let expected = k.pow(3);
    let pass = distinct.len() == expected && worst <= 1e-12;
    (
        pass,
        format!(
            "{} distinct composites (K^M = {expected}); cached vs full forward max diff {worst:.1e} <= 1e-12",
            distinct.len()
        ),
    )
}

fn check_dependency_matrix() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    let mut bad = 0;
    let cases = 100;
    for t in 0..cases {
        let d = rng.gen_range(2..12);
        let h = if t % 4 == 0 {
            // A real estimate from a random network.
            let model =
                Model::BlackBox(Mlp::new(MlpSpec::new(d, vec![6], 3).unwrap(), &mut rng).unwrap());
            estimate_hessian(&model, &random_tensor(&mut rng, 5, d), 1e-3).unwrap()
        } else {
            HessianEstimate::new(random_tensor(&mut rng, d, d), 1, true).unwrap()
        };
        let w = build_dependency_matrix(&h);
        let m = w.matrix();
        for i in 0..d {
            if m.get(i, i) != 0.0 {
                bad += 1;
            }
            for j in 0..d {
                if m.get(i, j) != m.get(j, i) || m.get(i, j) < 0.0 {
                    bad += 1;
                }
            }
        }
    }
    (
        bad == 0,
        format!("symmetry, zero diagonal and nonnegativity: {bad} violations in {cases} matrices"),
    )
}

fn criterion_5_property_suites() -> bool {
    let checks: [(&str, fn() -> (bool, String)); 9] = [
        ("5a", check_gradients),
        ("5b", check_shapley),
        ("5c", check_bayes_pooling),
        ("5d", check_loss_reductions),
        ("5e", check_temperature_softmax),
        ("5f", check_louvain),
        ("5g", check_param_counts),
        ("5h", check_chimeric),
        ("5i", check_dependency_matrix),
    ];
    let mut failed = Vec::new();
    for (id, check) in checks {
        let (pass, detail) = check();
        verdict(id, pass, &detail);
        if !pass {
            failed.push(id);
        }
    }
    verdict(
        "5",
        failed.is_empty(),
        "property suites (no dataset needed)",
    )
    .contains("PASS")
}

fn criterion_6_out_of_scope() {
    println!("criterion 6    N/A   CIFAR10/CIFAR100/Tiny Imagenet and CNN results are outside this toolkit; covered by criterion 5");
}

// ---------------------------------------------------------------------------
// Criteria 1-4: full dataset runs
// ---------------------------------------------------------------------------

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cache_root() -> PathBuf {
    std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("target"))
        .join("ked-acceptance")
}

fn data_dir() -> PathBuf {
    let dir = std::env::var_os("KED_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"));
    assert!(
        dir.join("mnist/train-images-idx3-ubyte").exists() && dir.join("fashion/train-images-idx3-ubyte").exists(),
        "dataset criteria need MNIST and Fashion-MNIST IDX files under {} (see scripts/fetch-data.sh)",
        dir.display()
    );
    dir
}

fn record(criterion: &str, lines: &[String]) {
    let dir = cache_root().join("results");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(
        dir.join(format!("criterion-{criterion}.txt")),
        lines.join("\n") + "\n",
    )
    .unwrap();
}

fn toml_path(p: &Path) -> String {
    format!("'{}'", p.display())
}

/// Shared protocol: teacher [500, 500] trained 100 epochs at batch 500,
/// students 100 epochs at batch 100, Adam at 0.001, T = tau = 10,
/// lambda = mu = 0.7, every training row used for fitting.
fn base_config(
    name: &str,
    dataset: &str,
    student_hidden: &str,
    extra: &[String],
) -> ExperimentConfig {
    let text = format!(
        r#"
output_dir = {out}
seed = 2023
superfeatures = 4
student_samples = 10000
validation_fraction = 0.0

{dataset}

[teacher]
hidden = [500, 500]

[student]
hidden = {student_hidden}

[teacher_schedule]
epochs = 100
batch_size = 500

[student_schedule]
epochs = 100
batch_size = 100
"#,
        out = toml_path(&cache_root().join(name)),
    );
    ExperimentConfig::from_toml(&text, extra).unwrap()
}

fn accuracy(reports: &[EvaluationReport], id: &str) -> f64 {
    100.0
        * reports
            .iter()
            .find(|r| r.run_id == id)
            .unwrap_or_else(|| panic!("no report for {id}"))
            .accuracy
}

fn table_criterion(
    criterion: &str,
    name: &str,
    dataset: &str,
    student: &str,
    expected: [f64; 3],
) -> bool {
    let start = Instant::now();
    let cfg = base_config(name, dataset, student, &[]);
    let reports = Pipeline::new(cfg).unwrap().run_all().unwrap();
    let [none, kd, ked] = [
        accuracy(&reports, "student-no-distill"),
        accuracy(&reports, "student-kd"),
        accuracy(&reports, "student-ked"),
    ];
    let teacher = accuracy(&reports, "teacher-black-box");
    let explaining = accuracy(&reports, "teacher-type-m");
    let mut lines = Vec::new();
    let order = ked > kd && kd > none;
    lines.push(verdict(
        &format!("{criterion}a"),
        order,
        &format!("{name}: ordering KED {ked:.2} > KD {kd:.2} > no-distill {none:.2}"),
    ));
    let gap = ked - kd >= 1.0;
    lines.push(verdict(
        &format!("{criterion}b"),
        gap,
        &format!("{name}: KED - KD = {:.2} >= 1.00", ked - kd),
    ));
    let within = [none, kd, ked]
        .iter()
        .zip(expected)
        .all(|(a, e)| (a - e).abs() <= 2.0);
    lines.push(verdict(
        &format!("{criterion}c"),
        within,
        &format!(
            "{name}: no-distill/KD/KED {none:.2}/{kd:.2}/{ked:.2} within 2.00 of {:.2}/{:.2}/{:.2}",
            expected[0], expected[1], expected[2]
        ),
    ));
    let pass = order && gap && within;
    lines.push(verdict(
        criterion,
        pass,
        &format!(
            "{name} student split 10000 (teachers: black box {teacher:.2}, type-M {explaining:.2}; {:.0} s)",
            start.elapsed().as_secs_f64()
        ),
    ));
    record(criterion, &lines);
    pass
}

fn criterion_1_mnist_table() -> bool {
    let dir = data_dir().join("mnist");
    let dataset = format!("[dataset]\nkind = 'idx'\ndir = {}", toml_path(&dir));
    table_criterion("1", "mnist", &dataset, "[20, 20]", [93.32, 95.15, 96.87])
}

fn criterion_2_fashion_table() -> bool {
    let dir = data_dir().join("fashion");
    let dataset = format!("[dataset]\nkind = 'idx'\ndir = {}", toml_path(&dir));
    table_criterion("2", "fashion", &dataset, "[60, 60]", [84.86, 85.31, 87.50])
}

fn criterion_3_combined_recovery() -> bool {
    let start = Instant::now();
    let data = data_dir();
    let dataset = format!(
        "[dataset]\nkind = 'combined'\nmnist_dir = {}\nfashion_dir = {}\ndownsample = true",
        toml_path(&data.join("mnist")),
        toml_path(&data.join("fashion"))
    );
    let common = [
        "superfeatures=2".to_string(),
        "variants=['ked']".to_string(),
    ];
    let algorithm = Pipeline::new(base_config(
        "combined-algorithm",
        &dataset,
        "[20, 20]",
        &common,
    ))
    .unwrap();
    let reports = algorithm.run_all().unwrap();
    let recovered_acc = accuracy(&reports, "student-ked");

    let read = |p: PathBuf| -> SuperfeaturePartition {
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let recovered = read(algorithm.path(PARTITION));
    let actual = read(algorithm.path(ACTUAL_PARTITION));
    let agreement = partition_agreement(&recovered, &actual).unwrap();

    let mut lines = Vec::new();
    lines.push(verdict(
        "3a",
        agreement >= 0.9,
        &format!(
            "{:.1}% of {} features on the matching side of the true split (>= 90%); group sizes {:?}",
            100.0 * agreement,
            actual.input_dim(),
            recovered.group_sizes()
        ),
    ));
    let mut gaps_ok = true;
    for (i, seed) in [11u64, 12].into_iter().enumerate() {
        let mut extra = common.to_vec();
        extra.push("superfeature_source.kind='random'".into());
        extra.push(format!("superfeature_source.seed={seed}"));
        let random = Pipeline::new(base_config(
            &format!("combined-random-{seed}"),
            &dataset,
            "[20, 20]",
            &extra,
        ))
        .unwrap();
        random
            .adopt(
                &cache_root().join("combined-algorithm"),
                &["ingest", "train-teacher"],
            )
            .unwrap();
        let acc = accuracy(&random.run_all().unwrap(), "student-ked");
        let ok = recovered_acc - acc >= 2.0;
        gaps_ok &= ok;
        lines.push(verdict(
            &format!("3{}", ["b", "c"][i]),
            ok,
            &format!(
                "KED with recovered partition {recovered_acc:.2} vs random partition (seed {seed}) {acc:.2}: gap {:.2} >= 2.00",
                recovered_acc - acc
            ),
        ));
    }
    let pass = agreement >= 0.9 && gaps_ok;
    lines.push(verdict(
        "3",
        pass,
        &format!(
            "combined 14x14 MNIST + Fashion, M = 2 ({:.0} s)",
            start.elapsed().as_secs_f64()
        ),
    ));
    record("3", &lines);
    pass
}

fn criterion_4_chimeric_benefit() -> bool {
    let start = Instant::now();
    let dir = data_dir().join("mnist");
    let dataset = format!("[dataset]\nkind = 'idx'\ndir = {}", toml_path(&dir));
    let teachers = cache_root().join("mnist");
    let mut lines = Vec::new();
    let mut deltas = Vec::new();
    for replicate in 0..5u64 {
        let extra = vec![
            "student_samples=4000".to_string(),
            format!("replicate={replicate}"),
            "variants=['ked']".into(),
            "chimeric.epochs=5".into(),
        ];
        let p = Pipeline::new(base_config(
            &format!("mnist-chimeric-{replicate}"),
            &dataset,
            "[20, 20]",
            &extra,
        ))
        .unwrap();
        if teachers
            .join("stages/train-explaining-teacher.json")
            .exists()
        {
            p.adopt(
                &teachers,
                &[
                    "ingest",
                    "train-teacher",
                    "find-superfeatures",
                    "train-explaining-teacher",
                ],
            )
            .unwrap();
        }
        let reports = p.run_all().unwrap();
        let (ked, chimeric) = (
            accuracy(&reports, "student-ked"),
            accuracy(&reports, "student-ked-chimeric"),
        );
        println!("  seed {replicate}: KED {ked:.2}, KED + chimeric {chimeric:.2}");
        lines.push(format!(
            "  seed {replicate}: KED {ked:.2}, KED + chimeric {chimeric:.2}"
        ));
        deltas.push(chimeric - ked);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let improved = deltas.iter().filter(|&&d| d > 0.0).count();
    lines.push(verdict(
        "4a",
        mean >= -0.1,
        &format!("mean change from chimeric fine-tuning {mean:+.2} >= -0.10"),
    ));
    lines.push(verdict(
        "4b",
        improved >= 3,
        &format!("improved in {improved} of 5 seeds (>= 3)"),
    ));
    let pass = mean >= -0.1 && improved >= 3;
    lines.push(verdict(
        "4",
        pass,
        &format!(
            "MNIST student split 4000, 5 seeds ({:.0} s)",
            start.elapsed().as_secs_f64()
        ),
    ));
    record("4", &lines);
    pass
}

/// Echo the verdicts of earlier dataset runs so they appear in the ordinary
/// test log.
fn dataset_criteria_summary() {
    for c in ["1", "2", "3", "4"] {
        let path = cache_root()
            .join("results")
            .join(format!("criterion-{c}.txt"));
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                println!("criterion {c} (recorded by the last --ignored run):");
                print!("{text}");
            }
            Err(_) => println!("criterion {c:<4} NOT RUN  needs the dataset run (cargo test --release -p ked --test acceptance -- --ignored)"),
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let datasets = args
        .iter()
        .any(|a| a == "--ignored" || a == "--include-ignored");
    let listed: Vec<&str> = args
        .iter()
        .filter(|a| !a.starts_with('-'))
        .map(String::as_str)
        .collect();
    let wanted = |id: &str| listed.is_empty() || listed.contains(&id);

    let mut ok = criterion_5_property_suites();
    criterion_6_out_of_scope();
    if datasets {
        let runs: [(&str, fn() -> bool); 4] = [
            ("1", criterion_1_mnist_table),
            ("2", criterion_2_fashion_table),
            ("3", criterion_3_combined_recovery),
            ("4", criterion_4_chimeric_benefit),
        ];
        for (id, run) in runs {
            if wanted(id) {
                ok &= run();
            }
        }
    } else {
        dataset_criteria_summary();
    }
    if !ok {
        std::process::exit(1);
    }
}

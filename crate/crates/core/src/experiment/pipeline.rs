use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{DatasetSource, ExperimentConfig, ModelShape, SuperfeatureSource, Variant};
use crate::data::{
    combine_mnist_fashion, downsample_2x, gen_synthetic_independent, load_csv, load_csv_with,
    load_idx_split, Dataset, SyntheticSpec,
};
use crate::distill::{finetune_chimeric, train, Objective, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate_bootstrap, EvaluationReport};
use crate::models::{
    dense_param_count, estimate_prior, load_model, save_model, solve_width, Mlp, MlpSpec, Model,
    SuperfeaturePartition, TypeMModel, TypeMSpec,
};
use crate::store::sha256_hex;
use crate::superfeatures::{find_superfeatures, SuperfeatureSearch};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    TrainTeacher,
    FindSuperfeatures,
    TrainExplainingTeacher,
    Distill,
    ChimericFinetune,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::TrainTeacher,
        Stage::FindSuperfeatures,
        Stage::TrainExplainingTeacher,
        Stage::Distill,
        Stage::ChimericFinetune,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainTeacher => "train-teacher",
            Stage::FindSuperfeatures => "find-superfeatures",
            Stage::TrainExplainingTeacher => "train-explaining-teacher",
            Stage::Distill => "distill",
            Stage::ChimericFinetune => "chimeric-finetune",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Completion record of one stage (or one student variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    /// Hash over the settings the stage depends on and its inputs' markers.
    pub fingerprint: String,
    pub seconds: f64,
    pub outputs: Vec<String>,
    pub finished_unix: u64,
}

/// Written when a stage fails; earlier artifacts are left as they were.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub error: String,
    pub unix_time: u64,
}

pub const TRAIN_DATA: &str = "data/train.kedd";
pub const TEST_DATA: &str = "data/test.kedd";
pub const ACTUAL_PARTITION: &str = "data/actual-partition.json";
pub const BLACK_BOX_TEACHER: &str = "models/teacher-black-box.kedm";
pub const TYPE_M_TEACHER: &str = "models/teacher-type-m.kedm";
pub const PARTITION: &str = "superfeatures/partition.json";
pub const DEPENDENCY: &str = "superfeatures/dependency.txt";
pub const SEARCH: &str = "superfeatures/search.json";
pub const CHIMERIC_STUDENT: &str = "models/student-ked-chimeric.kedm";
pub const REPORTS: &str = "reports.jsonl";
pub const FAILURE: &str = "failure.json";

pub fn student_path(v: Variant) -> String {
    format!("models/student-{}.kedm", v.name())
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        detail: e.to_string(),
    })
}

/// Seeded random groups of near-equal size: feature `order[p]` goes to group
/// `p mod M` for a shuffled `order`.
pub fn random_partition(d: usize, m: usize, seed: u64) -> Result<SuperfeaturePartition> {
    if m == 0 || m > d {
        return Err(Error::invalid(format!("{m} groups for {d} features")));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); m];
    for (p, &i) in order.iter().enumerate() {
        groups[p % m].push(i);
    }
    SuperfeaturePartition::new(d, groups)
}

/// Type-M subnet widths for a shape: explicit, or solved from a budget that
/// defaults to the black box's parameter count.
pub fn type_m_widths(shape: &ModelShape, m: usize, d: usize, c: usize) -> Result<Vec<usize>> {
    if let Some(h) = &shape.type_m_hidden {
        return Ok(h.clone());
    }
    let layers = shape.hidden.len();
    let budget = match shape.type_m_budget {
        Some(b) => b,
        None => {
            let mut widths = vec![d];
            widths.extend(&shape.hidden);
            widths.push(c);
            dense_param_count(&widths)
        }
    };
    let n = solve_width(budget, m, layers, d, c)?;
    Ok(vec![n; layers])
}

/// Stage runner over one output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        for sub in ["data", "models", "superfeatures", "metrics", "stages"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("config.toml");
        std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(Pipeline { cfg, dir })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn marker_path(&self, name: &str) -> PathBuf {
        self.dir.join("stages").join(format!("{name}.json"))
    }

    pub fn marker(&self, name: &str) -> Option<StageMarker> {
        read_json(&self.marker_path(name)).ok()
    }

    fn require(&self, name: &str) -> Result<StageMarker> {
        self.marker(name).ok_or_else(|| {
            Error::invalid(format!(
                "stage {name} has not completed in {}",
                self.dir.display()
            ))
        })
    }

    fn fingerprint(&self, parts: serde_json::Value) -> String {
        sha256_hex(parts.to_string().as_bytes())
    }

    /// Fingerprint each stage would have now, given upstream markers.
    fn expected(&self, name: &str) -> Result<String> {
        let c = &self.cfg;
        let up = |n: &str| self.expected(n);
        Ok(match name {
            "ingest" => self.fingerprint(json!({
                "dataset": c.dataset, "teacher_samples": c.teacher_samples, "seed": c.seed,
            })),
            "train-teacher" => self.fingerprint(json!({
                "up": up("ingest")?, "hidden": c.teacher.hidden,
                "schedule": c.teacher_schedule, "validation": c.validation_fraction,
            })),
            "find-superfeatures" => self.fingerprint(json!({
                "up": up("train-teacher")?, "source": c.superfeature_source, "m": c.superfeatures,
            })),
            "train-explaining-teacher" => self.fingerprint(json!({
                "up": up("find-superfeatures")?, "shape": c.teacher,
                "schedule": c.teacher_schedule, "validation": c.validation_fraction,
            })),
            "chimeric-finetune" => self.fingerprint(json!({
                "up": up("distill-ked")?, "chimeric": c.chimeric, "distill": c.distill,
            })),
            other => {
                let v = other
                    .strip_prefix("distill-")
                    .ok_or_else(|| Error::invalid(format!("unknown stage {other}")))?;
                let teacher = if v.starts_with("ked") {
                    up("train-explaining-teacher")?
                } else {
                    up("train-teacher")?
                };
                self.fingerprint(json!({
                    "up": teacher, "variant": v, "shape": c.student,
                    "schedule": c.student_schedule, "distill": c.distill,
                    "student_samples": c.student_samples, "replicate": c.replicate,
                    "validation": c.validation_fraction,
                }))
            }
        })
    }

    /// Whether `name` has a marker matching the current settings.
    pub fn is_current(&self, name: &str) -> bool {
        match (self.marker(name), self.expected(name)) {
            (Some(m), Ok(fp)) => m.fingerprint == fp,
            _ => false,
        }
    }

    /// Run `body` unless its marker is current; record a marker on success and
    /// a failure record on error.
    fn step<F>(&self, name: &str, force: bool, body: F) -> Result<()>
    where
        F: FnOnce() -> Result<Vec<String>>,
    {
        if !force && self.is_current(name) {
            log::info!("{name}: up to date, skipping");
            return Ok(());
        }
        log::info!("{name}: running");
        let start = Instant::now();
        match body() {
            Ok(outputs) => {
                let marker = StageMarker {
                    stage: name.to_string(),
                    fingerprint: self.expected(name)?,
                    seconds: start.elapsed().as_secs_f64(),
                    outputs,
                    finished_unix: now_unix(),
                };
                log::info!("{name}: done in {:.1}s", marker.seconds);
                write_json(&self.marker_path(name), &marker)
            }
            Err(e) => {
                let record = FailureRecord {
                    stage: name.to_string(),
                    error: e.to_string(),
                    unix_time: now_unix(),
                };
                let _ = write_json(&self.path(FAILURE), &record);
                log::error!("{name} failed: {e}");
                Err(e)
            }
        }
    }

    /// Every stage in order, skipping those already current.
    pub fn run_all(&self) -> Result<Vec<EvaluationReport>> {
        for stage in &Stage::ALL[..Stage::ALL.len() - 1] {
            self.run_stage(*stage, false)?;
        }
        let reports = self.evaluate()?;
        let failure = self.path(FAILURE);
        if failure.exists() {
            let _ = std::fs::remove_file(failure);
        }
        Ok(reports)
    }

    /// One stage. With `force` it reruns even when current.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<()> {
        match stage {
            Stage::Ingest => self.step("ingest", force, || self.ingest()),
            Stage::TrainTeacher => {
                self.require("ingest")?;
                self.step("train-teacher", force, || self.train_teacher())
            }
            Stage::FindSuperfeatures => {
                self.require("train-teacher")?;
                self.step("find-superfeatures", force, || self.find_superfeatures())
            }
            Stage::TrainExplainingTeacher => {
                self.require("find-superfeatures")?;
                self.step("train-explaining-teacher", force, || {
                    self.train_explaining_teacher()
                })
            }
            Stage::Distill => {
                for &v in &self.cfg.variants {
                    let name = format!("distill-{}", v.name());
                    self.require(if v.is_type_m() {
                        "train-explaining-teacher"
                    } else {
                        "train-teacher"
                    })?;
                    self.step(&name, force, || self.distill(v))?;
                }
                Ok(())
            }
            Stage::ChimericFinetune => {
                if self.cfg.chimeric.is_none() {
                    return Ok(());
                }
                self.require("distill-ked")?;
                self.step("chimeric-finetune", force, || self.chimeric())
            }
            Stage::Evaluate => self.evaluate().map(|_| ()),
        }
    }

    /// Copy the artifacts and markers of `stages` from another output
    /// directory, so a run differing only downstream can resume from them.
    pub fn adopt(&self, from: &Path, stages: &[&str]) -> Result<()> {
        for name in stages {
            let src = from.join("stages").join(format!("{name}.json"));
            let marker: StageMarker = read_json(&src)?;
            for out in &marker.outputs {
                let (a, b) = (from.join(out), self.path(out));
                std::fs::copy(&a, &b).map_err(|e| Error::io(&a, e))?;
            }
            write_json(&self.marker_path(name), &marker)?;
        }
        Ok(())
    }

    fn train_data(&self) -> Result<Dataset> {
        Dataset::load(&self.path(TRAIN_DATA))
    }

    fn ingest(&self) -> Result<Vec<String>> {
        let seed = self.cfg.stage_seed("ingest");
        let mut actual = None;
        let (train_set, test_set) = match &self.cfg.dataset {
            DatasetSource::Idx { dir } => {
                (load_idx_split(dir, "train")?, load_idx_split(dir, "t10k")?)
            }
            DatasetSource::Combined {
                mnist_dir,
                fashion_dir,
                downsample,
            } => {
                let load = |dir: &Path, split: &str| -> Result<Dataset> {
                    let ds = load_idx_split(dir, split)?;
                    if *downsample {
                        downsample_2x(&ds, 28)
                    } else {
                        Ok(ds)
                    }
                };
                let (tr, p) = combine_mnist_fashion(
                    &load(mnist_dir, "train")?,
                    &load(fashion_dir, "train")?,
                    self.cfg.stage_seed("combine-train"),
                )?;
                let (te, _) = combine_mnist_fashion(
                    &load(mnist_dir, "t10k")?,
                    &load(fashion_dir, "t10k")?,
                    self.cfg.stage_seed("combine-test"),
                )?;
                actual = Some(p);
                (tr, te)
            }
            DatasetSource::Csv {
                train,
                test,
                label_column,
            } => {
                let tr = load_csv(train, label_column)?;
                let te = load_csv_with(test, label_column, &tr)?;
                (tr, te)
            }
            DatasetSource::Synthetic {
                group_sizes,
                num_classes,
                train_samples,
                test_samples,
                separation,
            } => {
                let s = gen_synthetic_independent(&SyntheticSpec {
                    group_sizes: group_sizes.clone(),
                    num_classes: *num_classes,
                    samples: train_samples + test_samples,
                    separation: *separation,
                    seed,
                })?;
                let idx: Vec<usize> = (0..s.dataset.len()).collect();
                let (tr, te) = idx.split_at(*train_samples);
                actual = Some(s.partition);
                (s.dataset.select(tr)?, s.dataset.select(te)?)
            }
        };
        let train_set = match self.cfg.teacher_samples {
            Some(n) if n < train_set.len() => train_set.subsample(n, seed)?,
            _ => train_set,
        };
        log::info!(
            "ingest: {} training and {} test rows, {} features, {} classes",
            train_set.len(),
            test_set.len(),
            train_set.input_dim(),
            train_set.num_classes()
        );
        train_set.save(&self.path(TRAIN_DATA))?;
        test_set.save(&self.path(TEST_DATA))?;
        let mut outputs = vec![TRAIN_DATA.to_string(), TEST_DATA.to_string()];
        if let Some(p) = actual {
            write_json(&self.path(ACTUAL_PARTITION), &p)?;
            outputs.push(ACTUAL_PARTITION.to_string());
        }
        Ok(outputs)
    }

    fn options(
        &self,
        objective: Objective,
        run_id: &str,
        schedule: crate::distill::TrainingSchedule,
    ) -> TrainOptions<'static> {
        TrainOptions {
            validation_fraction: self.cfg.validation_fraction,
            run_id: run_id.to_string(),
            metrics_path: Some(self.path(&format!("metrics/{run_id}.jsonl"))),
            config: self.cfg.distill,
            ..TrainOptions::new(objective, schedule)
        }
    }

    fn fresh_metrics(&self, run_id: &str) {
        let _ = std::fs::remove_file(self.path(&format!("metrics/{run_id}.jsonl")));
    }

    fn train_teacher(&self) -> Result<Vec<String>> {
        let data = self.train_data()?;
        let seed = self.cfg.stage_seed("train-teacher");
        let spec = MlpSpec::new(
            data.input_dim(),
            self.cfg.teacher.hidden.clone(),
            data.num_classes(),
        )?;
        let model = Model::BlackBox(Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))?);
        self.fresh_metrics("teacher-black-box");
        let opts = self.options(
            Objective::CrossEntropy,
            "teacher-black-box",
            self.cfg.teacher_schedule.with_seed(seed),
        );
        let out = train(model, &data, &opts)?;
        save_model(&out.model, &self.path(BLACK_BOX_TEACHER))?;
        Ok(vec![BLACK_BOX_TEACHER.to_string()])
    }

    fn find_superfeatures(&self) -> Result<Vec<String>> {
        let data = self.train_data()?;
        let (d, m) = (data.input_dim(), self.cfg.superfeatures);
        let seed = self.cfg.stage_seed("find-superfeatures");
        let mut outputs = vec![PARTITION.to_string()];
        let partition = match &self.cfg.superfeature_source {
            SuperfeatureSource::Algorithm {
                hessian_samples,
                fd_step,
                resolution_step,
                max_resolution,
            } => {
                let teacher = load_model(&self.path(BLACK_BOX_TEACHER))?;
                let n = (*hessian_samples).min(data.len());
                let subset = data.subsample(n, seed)?;
                let search = SuperfeatureSearch {
                    target: m,
                    fd_step: *fd_step,
                    resolution_step: *resolution_step,
                    max_resolution: *max_resolution,
                    seed,
                };
                let found = find_superfeatures(&teacher, subset.features(), &search)?;
                found.dependency.write(&self.path(DEPENDENCY))?;
                write_json(
                    &self.path(SEARCH),
                    &json!({
                        "resolution": found.choice.resolution,
                        "communities_found": found.choice.communities_found,
                        "repaired": found.choice.repaired,
                        "hessian_samples": found.hessian.sample_count(),
                        "group_sizes": found.choice.partition.group_sizes(),
                    }),
                )?;
                outputs.extend([DEPENDENCY.to_string(), SEARCH.to_string()]);
                found.choice.partition
            }
            SuperfeatureSource::Actual => read_json(&self.path(ACTUAL_PARTITION))?,
            SuperfeatureSource::Random { seed } => random_partition(d, m, *seed)?,
            SuperfeatureSource::File { path } => read_json(path)?,
        };
        if partition.input_dim() != d || partition.len() != m {
            return Err(Error::invalid(format!(
                "partition has {} groups over {} features, expected {m} over {d}",
                partition.len(),
                partition.input_dim()
            )));
        }
        write_json(&self.path(PARTITION), &partition)?;
        Ok(outputs)
    }

    fn partition(&self) -> Result<SuperfeaturePartition> {
        read_json(&self.path(PARTITION))
    }

    fn train_explaining_teacher(&self) -> Result<Vec<String>> {
        let data = self.train_data()?;
        let black_box = load_model(&self.path(BLACK_BOX_TEACHER))?;
        let prior = estimate_prior(&black_box, data.features())?;
        let partition = self.partition()?;
        let (d, c) = (data.input_dim(), data.num_classes());
        let widths = type_m_widths(&self.cfg.teacher, partition.len(), d, c)?;
        log::info!(
            "type-M teacher: {} subnets of widths {widths:?}",
            partition.len()
        );
        let seed = self.cfg.stage_seed("train-explaining-teacher");
        let spec = TypeMSpec {
            partition,
            hidden_widths: widths,
            num_classes: c,
        };
        let model = Model::TypeM(TypeMModel::new(
            &spec,
            prior,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?);
        self.fresh_metrics("teacher-type-m");
        let opts = self.options(
            Objective::CrossEntropy,
            "teacher-type-m",
            self.cfg.teacher_schedule.with_seed(seed),
        );
        let out = train(model, &data, &opts)?;
        save_model(&out.model, &self.path(TYPE_M_TEACHER))?;
        Ok(vec![TYPE_M_TEACHER.to_string()])
    }

    /// The rows the students learn from.
    pub fn student_data(&self) -> Result<Dataset> {
        let data = self.train_data()?;
        match self.cfg.student_samples {
            Some(n) if n < data.len() => data.subsample(n, self.cfg.student_seed("student-split")),
            _ => Ok(data),
        }
    }

    fn distill(&self, variant: Variant) -> Result<Vec<String>> {
        let data = self.student_data()?;
        let (d, c) = (data.input_dim(), data.num_classes());
        let run_id = format!("student-{}", variant.name());
        let schedule = self
            .cfg
            .student_schedule
            .with_seed(self.cfg.student_seed("student-train"));
        let (model, teacher, objective) = if variant.is_type_m() {
            let Model::TypeM(teacher) = load_model(&self.path(TYPE_M_TEACHER))? else {
                return Err(Error::invalid("explaining teacher file holds a black box"));
            };
            let widths = type_m_widths(&self.cfg.student, teacher.partition().len(), d, c)?;
            let spec = TypeMSpec {
                partition: teacher.partition().clone(),
                hidden_widths: widths,
                num_classes: c,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.student_seed("init-type-m"));
            let student = Model::TypeM(TypeMModel::new(&spec, teacher.prior().to_vec(), &mut rng)?);
            let objective = if variant == Variant::Ked {
                Objective::Ked
            } else {
                Objective::KedHidden
            };
            (student, Some(Model::TypeM(teacher)), objective)
        } else {
            let spec = MlpSpec::new(d, self.cfg.student.hidden.clone(), c)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.student_seed("init-black-box"));
            let student = Model::BlackBox(Mlp::new(spec, &mut rng)?);
            match variant {
                Variant::NoDistill => (student, None, Objective::CrossEntropy),
                _ => (
                    student,
                    Some(load_model(&self.path(BLACK_BOX_TEACHER))?),
                    Objective::Kd,
                ),
            }
        };
        log::info!("{run_id}: {} parameters", model.param_count());
        self.fresh_metrics(&run_id);
        let opts = TrainOptions {
            teacher: teacher.as_ref(),
            ..self.options(objective, &run_id, schedule)
        };
        let out = train(model, &data, &opts)?;
        let path = student_path(variant);
        save_model(&out.model, &self.path(&path))?;
        Ok(vec![path])
    }

    fn chimeric(&self) -> Result<Vec<String>> {
        let chimeric = self.cfg.chimeric.expect("checked by caller");
        let base = self.student_data()?;
        let Model::TypeM(teacher) = load_model(&self.path(TYPE_M_TEACHER))? else {
            return Err(Error::invalid("explaining teacher file holds a black box"));
        };
        let student = load_model(&self.path(&student_path(Variant::Ked)))?;
        let run_id = "student-ked-chimeric";
        self.fresh_metrics(run_id);
        let metrics = self.path(&format!("metrics/{run_id}.jsonl"));
        let out = finetune_chimeric(
            student,
            &teacher,
            &base,
            &chimeric.options(self.cfg.student_seed("chimeric")),
            &self.cfg.distill,
            None,
            run_id,
            Some(&metrics),
        )?;
        save_model(&out.model, &self.path(CHIMERIC_STUDENT))?;
        Ok(vec![CHIMERIC_STUDENT.to_string()])
    }

    /// Models available for evaluation with the stages behind each.
    fn evaluable(&self) -> Vec<(String, String, Vec<String>)> {
        let mut list = vec![
            (
                "teacher-black-box".to_string(),
                BLACK_BOX_TEACHER.to_string(),
                vec!["train-teacher".to_string()],
            ),
            (
                "teacher-type-m".to_string(),
                TYPE_M_TEACHER.to_string(),
                vec![
                    "find-superfeatures".into(),
                    "train-explaining-teacher".into(),
                ],
            ),
        ];
        for v in &self.cfg.variants {
            list.push((
                format!("student-{}", v.name()),
                student_path(*v),
                vec![format!("distill-{}", v.name())],
            ));
        }
        if self.cfg.chimeric.is_some() {
            list.push((
                "student-ked-chimeric".into(),
                CHIMERIC_STUDENT.into(),
                vec!["distill-ked".into(), "chimeric-finetune".into()],
            ));
        }
        list.into_iter()
            .filter(|(_, _, stages)| stages.iter().all(|s| self.is_current(s)))
            .collect()
    }

    /// Bootstrap every current model on the test set; rewrites the report
    /// file and the comparison tables.
    pub fn evaluate(&self) -> Result<Vec<EvaluationReport>> {
        let test = Dataset::load(&self.path(TEST_DATA))?;
        let test_id = sha256_hex(
            &std::fs::read(self.path(TEST_DATA)).map_err(|e| Error::io(self.path(TEST_DATA), e))?,
        );
        let seed = self.cfg.stage_seed("evaluate");
        let hash = self.cfg.hash();
        let mut reports = Vec::new();
        let out = self.path(REPORTS);
        let _ = std::fs::remove_file(&out);
        for (run_id, file, stages) in self.evaluable() {
            let model = load_model(&self.path(&file))?;
            let mut durations = BTreeMap::new();
            for s in &stages {
                if let Some(m) = self.marker(s) {
                    durations.insert(s.clone(), m.seconds);
                }
            }
            let r = evaluate_bootstrap(
                &model,
                &test,
                self.cfg.bootstrap_replicates,
                seed,
                &run_id,
                &test_id,
            )?
            .with_metadata(&hash, durations);
            log::info!(
                "{run_id}: {:.2}% [{:.2}, {:.2}]",
                100.0 * r.accuracy,
                100.0 * r.lower,
                100.0 * r.upper
            );
            crate::eval::append_report(&out, &r)?;
            reports.push(r);
        }
        if !reports.is_empty() {
            let cmp = compare_runs(&reports)?;
            let p = self.path("comparison.txt");
            std::fs::write(&p, cmp.to_text()).map_err(|e| Error::io(&p, e))?;
            let p = self.path("comparison.csv");
            std::fs::write(&p, cmp.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(reports)
    }
}

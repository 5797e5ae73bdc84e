use std::collections::VecDeque;
use std::time::Duration;

use deepbass::datasets::{generate_yinyang, make_pools, DataPools, Dataset, HiddenTruth, LabelSource, YinYangSample};
use deepbass::em::{
    self, admit, AcquisitionPolicy, Collector, InitialSchedule, Learner, LoopConfig, ThresholdPolicy,
};
use deepbass::mc::{ClassDistribution, McConfig};
use deepbass::models::{Checkpoint, ModelSpec};
use deepbass::oracle::{
    AnswerSource, Collected, Oracle, OracleAnswer, OracleQueue, OracleRequest, QueueConfig, RemoteOracle,
    SimulatedOracle,
};
use deepbass::{Error, Result, Rng};

struct Problem {
    pools: DataPools,
    truth: HiddenTruth,
    validation: Dataset,
}

fn problem(per_class: usize, labeled: usize, seed: u64) -> Problem {
    let rng = Rng::from_seed(seed);
    let train = YinYangSample::to_dataset(&generate_yinyang(per_class, &mut rng.stream(1)).unwrap()).unwrap();
    let validation = YinYangSample::to_dataset(&generate_yinyang(50, &mut rng.stream(2)).unwrap()).unwrap();
    let (pools, truth) = make_pools(&train, labeled, true, &mut rng.stream(3)).unwrap();
    Problem {
        pools,
        truth,
        validation,
    }
}

fn config(threshold: ThresholdPolicy, acquisition: AcquisitionPolicy, iterations: usize) -> LoopConfig {
    LoopConfig {
        threshold_policy: threshold,
        acquisition_policy: acquisition,
        acquire_count: 2,
        acquire_every: 2,
        iterations,
        upsample_factor: 20,
        mc: McConfig {
            passes_unlabeled: 4,
            passes_labeled: 8,
        },
        batch_size: 32,
        seed: 7,
        augment: false,
        initial: InitialSchedule::Presentations { count: 50 },
        max_oracle_lag: None,
    }
}

fn learner<'a>(p: &'a Problem, cfg: LoopConfig) -> Learner<'a> {
    Learner::new(cfg, ModelSpec::mlp_yinyang(), p.pools.clone(), &p.validation, Some(&p.truth)).unwrap()
}

fn flat_params(l: &Learner) -> Vec<f32> {
    l.model().params().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn all_data_admits_the_whole_unlabeled_pool() {
    let p = problem(500, 8, 1);
    let mut l = learner(&p, config(ThresholdPolicy::AllData, AcquisitionPolicy::None, 1));
    l.initial_train().unwrap();
    let r = l.em_iteration(&mut SimulatedOracle::new(p.truth.clone())).unwrap();
    assert_eq!(r.n_pseudo, 992);
    assert_eq!(r.theta, Some(1.0));
    assert!(r.pseudo_err.is_some());
    let gt = (r.n_labeled * 20) as f64;
    assert!((gt / (gt + r.n_pseudo as f64) - 0.139).abs() < 1e-3);
}

#[test]
fn step_wise_admits_only_entropies_below_theta() {
    let p = problem(100, 8, 2);
    let mut l = learner(&p, config(ThresholdPolicy::StepWise, AcquisitionPolicy::None, 3));
    l.initial_train().unwrap();
    let mut oracle = SimulatedOracle::new(p.truth.clone());
    for _ in 0..3 {
        let r = l.em_iteration(&mut oracle).unwrap();
        let theta = r.theta.unwrap();
        assert!((0.0..=1.0).contains(&theta));
        assert_eq!(r.n_pseudo, l.pseudo().len());
        assert!(l.pseudo().iter().all(|e| e.entropy < theta));
        if let Some(h) = r.max_admitted_entropy {
            assert!(h < theta);
        }
    }
}

#[test]
fn a_zero_threshold_admits_nothing() {
    let dists = vec![ClassDistribution::new(vec![0.5, 0.5]).unwrap(); 4];
    assert!(admit(&[0, 1, 2, 3], &dists, ThresholdPolicy::StepWise, 0.0).is_empty());
    let dists = vec![ClassDistribution::new(vec![0.55, 0.45]).unwrap(); 3];
    assert!(admit(&[0, 1, 2], &dists, ThresholdPolicy::StepWise, 0.9).is_empty());
}

#[test]
fn labeled_only_trains_on_ground_truth_alone() {
    let p = problem(100, 8, 3);
    let mut l = learner(&p, config(ThresholdPolicy::LabeledOnly, AcquisitionPolicy::MaxEntropy, 2));
    l.initial_train().unwrap();
    let mut oracle = SimulatedOracle::new(p.truth.clone());
    let r1 = l.em_iteration(&mut oracle).unwrap();
    assert_eq!((r1.n_pseudo, r1.theta, r1.requested), (0, None, 0));
    let r2 = l.em_iteration(&mut oracle).unwrap();
    assert_eq!((r2.requested, r2.acquired, r2.n_labeled), (2, 2, 10));
}

#[test]
fn zero_iterations_only_train_the_initial_model() {
    let p = problem(50, 8, 4);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.json");
    let cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::MaxEntropy, 0);
    let mut reports = Collector::default();
    let out = em::run(
        &cfg,
        ModelSpec::mlp_yinyang(),
        p.pools.clone(),
        &p.validation,
        Some(&p.truth),
        &mut SimulatedOracle::new(p.truth.clone()),
        &mut reports,
        Some(&ckpt),
    )
    .unwrap();
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.reports[0].iteration, 0);
    assert!(out.acquired.is_empty());
    let saved = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(saved.params(), out.network.model.params());
}

#[test]
fn one_presentation_of_one_sample_moves_the_weights() {
    let p = problem(50, 2, 5);
    let pools = DataPools::new(p.pools.inputs().clone(), 2, p.pools.labeled()[..1].to_vec(), vec![]).unwrap();
    let mut cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::None, 0);
    cfg.initial = InitialSchedule::Presentations { count: 1 };
    let mut l = Learner::new(cfg, ModelSpec::mlp_yinyang(), pools, &p.validation, None).unwrap();
    let before = flat_params(&l);
    l.initial_train().unwrap();
    let after = flat_params(&l);
    assert_eq!(before.len(), after.len());
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
}

#[test]
fn initial_training_needs_labels() {
    let p = problem(50, 2, 6);
    let all: Vec<usize> = (0..p.pools.total()).collect();
    let pools = DataPools::new(p.pools.inputs().clone(), 2, vec![], all).unwrap();
    let cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::None, 0);
    let mut l = Learner::new(cfg, ModelSpec::mlp_yinyang(), pools, &p.validation, None).unwrap();
    assert!(matches!(l.initial_train(), Err(Error::Config(_))));
}

#[test]
fn mismatched_shapes_are_rejected() {
    let p = problem(50, 2, 6);
    let cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::None, 0);
    let err = Learner::new(cfg, ModelSpec::cnn_mnist(), p.pools.clone(), &p.validation, None).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

struct Unreachable;

impl Oracle for Unreachable {
    fn ask(&mut self, _: Vec<OracleRequest>) -> Result<()> {
        Err(Error::Oracle("connection refused".into()))
    }

    fn collect(&mut self) -> Result<Collected> {
        Ok(Collected::default())
    }
}

#[test]
fn oracle_failures_are_reported_and_the_loop_continues() {
    let p = problem(100, 8, 7);
    let mut l = learner(&p, config(ThresholdPolicy::AllData, AcquisitionPolicy::MaxEntropy, 4));
    l.initial_train().unwrap();
    let mut reports = Vec::new();
    for _ in 0..4 {
        reports.push(l.em_iteration(&mut Unreachable).unwrap());
    }
    assert!(reports[0].oracle_error.is_none());
    assert!(reports[1].oracle_error.as_deref().unwrap().contains("connection refused"));
    assert!(reports.iter().all(|r| r.n_labeled == 8 && r.acquired == 0));
    assert_eq!(l.pools().labeled().len(), 8);
}

/// Answers each request `delay` collects after it was asked.
struct Delayed {
    inner: SimulatedOracle,
    delay: usize,
    queue: VecDeque<(usize, OracleAnswer)>,
    asked: Vec<Vec<usize>>,
    collects: usize,
}

impl Delayed {
    fn new(truth: HiddenTruth, delay: usize) -> Self {
        Self {
            inner: SimulatedOracle::new(truth),
            delay,
            queue: VecDeque::new(),
            asked: Vec::new(),
            collects: 0,
        }
    }
}

impl Oracle for Delayed {
    fn ask(&mut self, requests: Vec<OracleRequest>) -> Result<()> {
        self.asked.push(requests.iter().map(|r| r.sample_id).collect());
        for r in &requests {
            let a = self.inner.simulated_answer(r)?;
            self.queue.push_back((self.collects + self.delay, a));
        }
        Ok(())
    }

    fn collect(&mut self) -> Result<Collected> {
        self.collects += 1;
        let mut answers = Vec::new();
        while self.queue.front().is_some_and(|(due, _)| *due < self.collects) {
            answers.push(self.queue.pop_front().unwrap().1);
        }
        Ok(Collected {
            answers,
            expired: Vec::new(),
        })
    }
}

#[test]
fn late_answers_join_later_and_pending_samples_are_not_asked_twice() {
    let p = problem(100, 8, 8);
    let mut cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::MaxEntropy, 6);
    cfg.acquire_every = 1;
    let mut l = learner(&p, cfg);
    l.initial_train().unwrap();
    let mut oracle = Delayed::new(p.truth.clone(), 4);
    let mut reports = Vec::new();
    for _ in 0..6 {
        reports.push(l.em_iteration(&mut oracle).unwrap());
    }
    let asked: Vec<usize> = oracle.asked.concat();
    let mut unique = asked.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), asked.len(), "a pending sample was requested again");
    assert_eq!(reports[0].acquired, 0);
    assert_eq!(reports[0].pending, 2);
    assert!(reports.iter().map(|r| r.acquired).sum::<usize>() > 0);
    let last = reports.last().unwrap();
    assert_eq!(last.n_labeled + last.n_unlabeled, 200);
    assert_eq!(last.n_labeled - 8 + last.pending, 12);
    assert!(l.acquired().iter().all(|a| a.iteration >= 3));
}

/// Answers with the wrong sample id.
struct Confused(SimulatedOracle);

impl Oracle for Confused {
    fn ask(&mut self, requests: Vec<OracleRequest>) -> Result<()> {
        self.0.ask(requests)
    }

    fn collect(&mut self) -> Result<Collected> {
        let mut c = self.0.collect()?;
        for a in &mut c.answers {
            a.sample_id += 1;
        }
        Ok(c)
    }
}

#[test]
fn a_failed_iteration_leaves_a_checkpoint() {
    let p = problem(100, 8, 9);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.json");
    let cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::MaxEntropy, 4);
    let err = em::run(
        &cfg,
        ModelSpec::mlp_yinyang(),
        p.pools.clone(),
        &p.validation,
        Some(&p.truth),
        &mut Confused(SimulatedOracle::new(p.truth.clone())),
        &mut Collector::default(),
        Some(&ckpt),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Oracle(_)));
    let saved = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(saved.spec(), &ModelSpec::mlp_yinyang());
}

#[test]
fn runs_are_deterministic_given_the_seed() {
    let p = problem(100, 8, 10);
    let cfg = config(ThresholdPolicy::StepWise, AcquisitionPolicy::AboveAverage, 4);
    let go = |cfg: &LoopConfig| {
        em::run(
            cfg,
            ModelSpec::mlp_yinyang(),
            p.pools.clone(),
            &p.validation,
            Some(&p.truth),
            &mut SimulatedOracle::new(p.truth.clone()),
            &mut Collector::default(),
            None,
        )
        .unwrap()
    };
    let (a, b) = (go(&cfg), go(&cfg));
    assert_eq!(
        serde_json::to_string(&a.reports).unwrap(),
        serde_json::to_string(&b.reports).unwrap()
    );
    assert_eq!(a.acquired, b.acquired);
    assert_eq!(a.network.model.params(), b.network.model.params());
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(go(&other).network.model.params(), a.network.model.params());
}

#[test]
fn simulated_labels_match_the_truth_and_the_budget() {
    let p = problem(100, 8, 11);
    let cfg = config(ThresholdPolicy::StepWise, AcquisitionPolicy::MaxEntropy, 7);
    let out = em::run(
        &cfg,
        ModelSpec::mlp_yinyang(),
        p.pools.clone(),
        &p.validation,
        Some(&p.truth),
        &mut SimulatedOracle::new(p.truth.clone()),
        &mut Collector::default(),
        None,
    )
    .unwrap();
    assert_eq!(out.acquired.len(), cfg.label_budget());
    assert_eq!(cfg.label_budget(), 6);
    let pairs: Vec<(usize, usize)> = out.acquired.iter().map(|a| (a.sample_id, a.label)).collect();
    assert_eq!(p.truth.error_rate(&pairs), Some(0.0));
    assert!(out.acquired.iter().all(|a| a.source == LabelSource::Simulated));
    assert_eq!(out.pools.labeled().len(), 14);
}

#[test]
fn a_lagging_oracle_is_waited_for() {
    let p = problem(50, 8, 12);
    let mut cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::MaxEntropy, 2);
    cfg.acquire_every = 1;
    cfg.acquire_count = 1;
    cfg.max_oracle_lag = Some(0);
    let queue = OracleQueue::open(QueueConfig {
        run_id: "lag".into(),
        classes: 2,
        timeout: None,
        journal: None,
    })
    .unwrap();
    let answerer = {
        let queue = queue.clone();
        let truth = p.truth.clone();
        std::thread::spawn(move || {
            let mut oracle = SimulatedOracle::new(truth);
            loop {
                let pending = queue.pending().unwrap();
                if let Some(v) = pending.first() {
                    std::thread::sleep(Duration::from_millis(300));
                    let label = oracle.simulated_answer(&v.request).unwrap().label;
                    queue.submit_answer(v.request.request_id, label, AnswerSource::Human).unwrap();
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        })
    };
    let mut l = learner(&p, cfg);
    l.initial_train().unwrap();
    let mut oracle = RemoteOracle::new(queue);
    let r1 = l.em_iteration(&mut oracle).unwrap();
    assert_eq!((r1.requested, r1.acquired, r1.pending), (1, 0, 1));
    let r2 = l.em_iteration(&mut oracle).unwrap();
    answerer.join().unwrap();
    assert_eq!(r2.acquired, 1);
    assert_eq!(l.acquired()[0].source, LabelSource::Human);
    assert_eq!(l.acquired()[0].iteration, 2);
}

#[test]
fn label_budget_counts_acquisition_events() {
    let mut cfg = config(ThresholdPolicy::AllData, AcquisitionPolicy::MaxEntropy, 200);
    cfg.acquire_count = 10;
    cfg.acquire_every = 10;
    assert_eq!(cfg.label_budget(), 200);
    assert!(cfg.acquires_at(10) && !cfg.acquires_at(9));
    cfg.acquisition_policy = AcquisitionPolicy::None;
    assert_eq!(cfg.label_budget(), 0);
}

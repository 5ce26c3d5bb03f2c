use super::*;
use crate::analytics::write_trajectory;
use crate::config::NormChoice;
use crate::switchable::Omega;

fn small(norm: &str, epochs: usize) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "widths = 4,8\nblocks_per_stage = 1\nnorm = {norm}\nepochs = {epochs}\nshards = 2\nper_shard = 4\n\
         lr0 = 0.1\nlr_reference_batch = 8\nmilestones = 100\nsynthetic_classes = 3\nsynthetic_train = 48\n\
         synthetic_test = 24\nsynthetic_size = 4\nsynthetic_noise = 0.2\nbn_batches = 3\nseed = 11\n"
    ))
    .unwrap()
}

fn traj_bytes(t: &RatioTrajectory) -> Vec<u8> {
    let mut v = Vec::new();
    write_trajectory(t, &mut v).unwrap();
    v
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let cfg = small("sn", 2);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(traj_bytes(&a.trajectory), traj_bytes(&b.trajectory));
    assert_eq!(a.snapshot.to_bytes(), b.snapshot.to_bytes());
    let other = train(&ExperimentConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(metrics_csv(&a.metrics), metrics_csv(&other.metrics));
}

#[test]
fn training_reduces_the_loss() {
    let out = train(&small("sn", 5)).unwrap();
    let first = out.metrics.first().unwrap().train_loss;
    let last = out.metrics.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    let m = out.metrics.last().unwrap();
    assert!(m.test_acc.is_some() && m.test_loss.is_some());
    assert!(out.metrics[..4].iter().all(|m| m.test_acc.is_none()));
}

#[test]
fn trajectory_has_one_row_per_layer_and_epoch() {
    let mut cfg = small("sn", 3);
    cfg.omega = Omega::parse("ln,bn").unwrap();
    let out = train(&cfg).unwrap();
    let layers = out.model.norms.len();
    assert_eq!(out.trajectory.len(), layers * 3);
    assert!(out.trajectory.records().iter().all(|r| r.lambda_mu[0] == 0.0 && r.lambda_sigma[0] == 0.0));
    let tied = train(&small("sn_tied", 2)).unwrap();
    assert!(tied.trajectory.records().iter().all(|r| r.lambda_mu == r.lambda_sigma));
    assert!(train(&small("bn", 1)).unwrap().trajectory.is_empty());
}

struct Recorder(Vec<(f64, Vec<f64>)>);

impl Observer for Recorder {
    fn on_step(&mut self, info: &StepInfo<'_>) {
        let w = info.model.params.iter().filter(|p| p.name.ends_with(".w")).flat_map(|p| p.value.clone()).collect();
        self.0.push((info.loss, w));
    }
}

#[test]
fn singleton_bn_mixture_tracks_plain_bn() {
    let mut sn = small("sn", 2);
    sn.omega = Omega::parse("bn").unwrap();
    let (mut a, mut b) = (Recorder(Vec::new()), Recorder(Vec::new()));
    train_observed(&sn, &mut a).unwrap();
    train_observed(&small("bn", 2), &mut b).unwrap();
    assert_eq!(a.0.len(), b.0.len());
    for ((la, wa), (lb, wb)) in a.0.iter().zip(&b.0) {
        assert!((la - lb).abs() <= 1e-10);
        assert!(wa.iter().zip(wb).all(|(x, y)| (x - y).abs() <= 1e-10));
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cfg = small("sn", 4);
    cfg.snapshot_epochs = vec![2];
    cfg.bn_stats = crate::norm::StatsMode::MovingAverage;
    let full = train(&cfg).unwrap();
    let (epoch, snap) = &full.snapshots[0];
    assert_eq!(*epoch, 2);
    let bytes = snap.to_bytes();
    let reloaded = Snapshot::from_bytes(&bytes).unwrap();
    assert_eq!(reloaded.to_bytes(), bytes);
    let resumed = resume(&cfg, &reloaded).unwrap();
    assert_eq!(resumed.snapshot.to_bytes(), full.snapshot.to_bytes());
    assert_eq!(metrics_csv(&resumed.metrics), metrics_csv(&full.metrics[2..]));
}

#[test]
fn hard_finetune_freezes_hardened_ratios() {
    let mut cfg = small("sn", 2);
    cfg.snapshot_epochs = vec![2];
    let soft = train(&cfg).unwrap();
    let expected: Vec<_> = soft.model.ratio_states().iter().map(|(_, s)| harden(s)).collect();
    let cfg4 = ExperimentConfig { epochs: 4, ..cfg.clone() };
    let out = harden_finetune(&soft.snapshot, &cfg4).unwrap();
    assert_eq!(out.metrics.len(), 2);
    for (k, (_, s)) in out.model.ratio_states().iter().enumerate() {
        assert_eq!(s.hard(), Some(expected[k]));
    }
    for r in out.trajectory.records() {
        assert!(r.lambda_mu.iter().chain(&r.lambda_sigma).all(|&v| v == 0.0 || v == 1.0));
    }
    // The hard choice survives a snapshot round trip.
    let again = resume(&cfg4, &out.snapshots.first().map_or(out.snapshot.clone(), |s| s.1.clone())).unwrap();
    assert!(again.model.ratio_states().iter().all(|(_, s)| s.hard().is_some()));
    let bn = train(&small("bn", 1)).unwrap();
    let err = harden_finetune(&bn.snapshot, &small("bn", 2)).err().unwrap();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn hard_init_sets_peaked_trainable_logits() {
    let soft = train(&small("sn", 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("soft.bin");
    soft.snapshot.save(&path).unwrap();
    let mut cfg = small("sn", 0);
    cfg.hard_init_from = Some(path.clone());
    let init = train(&cfg).unwrap();
    let expected: Vec<_> = soft.model.ratio_states().iter().map(|(_, s)| harden(s)).collect();
    for ((_, s), h) in init.model.ratio_states().iter().zip(&expected) {
        assert!(s.hard().is_none());
        let pos = s.omega().position(h.mu).unwrap();
        assert!(s.logits_mu().iter().enumerate().all(|(i, &l)| l == if i == pos { 10.0 } else { -10.0 }));
    }
    cfg.epochs = 1;
    let trained = train(&cfg).unwrap();
    let moved =
        trained.model.params.iter().filter(|p| p.name.ends_with("logits_mu")).any(|p| p.value.iter().any(|&v| v.abs() != 10.0));
    assert!(moved, "hard-init logits should stay trainable");
}

#[test]
fn optimizer_and_schedule_variants_run() {
    for extra in ["optimizer = rmsprop\nlr0 = 0.001", "schedule = cosine", "norm = gn\ngn_groups = 2", "norm = in", "norm = ln"] {
        let mut cfg = small("sn", 2);
        for line in extra.lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            if k == "norm" {
                cfg.norm = NormChoice::parse(v).unwrap();
            } else {
                cfg.set(k, v).unwrap();
            }
        }
        let out = train(&cfg).unwrap();
        assert!(out.metrics.iter().all(|m| m.train_loss.is_finite()), "{extra}");
    }
}

#[test]
fn dataset_and_batch_errors() {
    let mut cfg = small("bn", 1);
    cfg.per_shard = 40;
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    let mut cfg = small("bn", 1);
    cfg.dataset = crate::config::DatasetKind::Cifar10Binary;
    cfg.train_files = vec!["/nonexistent/data_batch_1.bin".into()];
    assert!(matches!(train(&cfg), Err(Error::Dataset(_))));
}

#[test]
fn epoch_orders_are_permutations_keyed_by_epoch() {
    let a = epoch_order(1, 0, 20);
    let mut s = a.clone();
    s.sort_unstable();
    assert_eq!(s, (0..20).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(1, 0, 20));
    assert_ne!(a, epoch_order(1, 1, 20));
}

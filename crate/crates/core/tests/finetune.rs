mod common;

use common::rand_tensor;
use hmnas_core::data::{Dataset, Partition, Synthetic};
use hmnas_core::finetune::{finetune, initial_model, new_state, FinetuneConfig, FinetuneOutcome, InitMode};
use hmnas_core::masker::{train_masks, HierMasks, MaskState, MaskTrainConfig};
use hmnas_core::numcore::OpKind;
use hmnas_core::searchspace::{BinaryMasks, Mode, SearchSpaceSpec, Supernet};
use hmnas_core::trainer::{train_supernet, ProvenanceLog, TrainConfig, TrainState};
use hmnas_core::Error;

struct Searched {
    net: Supernet,
    masks: BinaryMasks,
    data: Dataset,
    part: Partition,
    best_val: f64,
}

fn search(seed: u64) -> Searched {
    let mut net = Supernet::build(SearchSpaceSpec::micro(vec![OpKind::SepConv3x3, OpKind::MaxPool3x3], 3), seed).unwrap();
    let data = Synthetic::Blobs(3).generate(seed);
    let part = Partition::new(data.len(), 0.2, 0.8, seed).unwrap();
    let tcfg = TrainConfig { epochs: 10, warmup_epochs: 3, batch_size: 64, w_lr: 0.05, seed, ..TrainConfig::default() };
    let mut ts = TrainState::new(&net);
    train_supernet(&mut net, &data, &part, &tcfg, &mut ts, &mut ProvenanceLog::default(), |_, _, _| Ok(())).unwrap();
    let mcfg = MaskTrainConfig { epochs: 4, seed, ..MaskTrainConfig::default() };
    let mut hm = HierMasks::init(&net, mcfg.mask_init, mcfg.tau);
    let mut ms = MaskState::new(&hm);
    train_masks(&net, &data, &part, &mcfg, &mut hm, &mut ms, |_, _, _| Ok(())).unwrap();
    Searched { masks: hm.project(), net, data, part, best_val: ts.best_val_loss }
}

fn run(s: &Searched, cfg: &FinetuneConfig) -> FinetuneOutcome {
    let model = initial_model(&s.net, &s.masks, cfg).unwrap();
    let mut state = new_state(&model);
    finetune(model, &s.data, &s.part, cfg, &mut state, |_, _, _| Ok(())).unwrap()
}

#[test]
fn zero_epoch_warm_finetune_is_the_masked_supernet() {
    let s = search(1);
    let out = run(&s, &FinetuneConfig { epochs: 0, ..FinetuneConfig::default() });
    let x = rand_tensor(&[4, 3, 16, 16], 2);
    for mode in [Mode::Eval, Mode::Train] {
        let a = out.model.net.forward(&x, Some(&out.model.masks), mode).unwrap();
        let b = s.net.forward(&x, Some(&s.masks), mode).unwrap();
        assert!(a.bit_eq(&b));
    }
    assert!(out.metrics.is_empty());
}

#[test]
fn masked_and_dead_weights_never_change() {
    let s = search(2);
    let mut masks = s.masks.clone();
    // also kill one whole operation to exercise the dead-op freeze
    masks.alpha[0].data_mut()[0] = 0.0;
    let searched = Searched { masks, ..s };
    let cfg = FinetuneConfig { epochs: 3, batch_size: 64, ..FinetuneConfig::default() };
    let out = run(&searched, &cfg);
    let (before, after) = (&searched.net.weights.params, &out.model.net.weights.params);
    let mut frozen = 0;
    let mut moved = 0;
    for (i, (p, q)) in before.iter().zip(after).enumerate() {
        let dead_op = searched.net.op_params(0, 0, 0).contains(&i);
        for k in 0..p.value.len() {
            let masked = dead_op || searched.masks.w[i].as_ref().is_some_and(|m| m.data()[k] == 0.0);
            if masked {
                assert_eq!(p.value.data()[k].to_bits(), q.value.data()[k].to_bits(), "{}[{k}] moved", p.name);
                frozen += 1;
            } else if p.value.data()[k] != q.value.data()[k] {
                moved += 1;
            }
        }
    }
    assert!(frozen > 0 && moved > 0);
    assert_eq!(out.metrics.len(), 3);
}

#[test]
fn finetune_is_reproducible_and_random_init_differs() {
    let s = search(3);
    let cfg = FinetuneConfig { epochs: 2, batch_size: 64, seed: 9, ..FinetuneConfig::default() };
    assert_eq!(run(&s, &cfg).metrics, run(&s, &cfg).metrics);
    let random = initial_model(&s.net, &s.masks, &FinetuneConfig { init: InitMode::Random, ..cfg.clone() }).unwrap();
    assert_ne!(random.net.weights.params, s.net.weights.params);
    assert_eq!(random.net.arch, s.net.arch);
}

#[test]
fn degenerate_masks_abort() {
    let s = search(4);
    let mut masks = s.masks.clone();
    masks.beta[0].data_mut().fill(0.0);
    let err = initial_model(&s.net, &masks, &FinetuneConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
}

#[test]
fn warm_start_reaches_target_no_later_than_random_init() {
    let mut warm = Vec::new();
    let mut random = Vec::new();
    for seed in 0..5 {
        let s = search(10 + seed);
        let base = FinetuneConfig {
            epochs: 8,
            batch_size: 64,
            target_loss: Some(1.1 * s.best_val),
            seed,
            ..FinetuneConfig::default()
        };
        warm.push(run(&s, &base).epochs_to_target.unwrap());
        random.push(run(&s, &FinetuneConfig { init: InitMode::Random, ..base }).epochs_to_target.unwrap());
    }
    warm.sort_unstable();
    random.sort_unstable();
    assert!(warm[2] <= random[2], "warm {warm:?} random {random:?}");
}

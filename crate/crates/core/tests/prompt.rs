mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xprompt_core::backbone::{BackboneConfig, FrozenBackbone};
use xprompt_core::numkernel::{Graph, Matrix};
use xprompt_core::optim::{OptimizerConfig, OptimizerState};
use xprompt_core::prompt::{evaluate, new_optimizer, tune, InitStrategy, PromptBank, TuneConfig};
use xprompt_core::tasks::{majority_baseline, Example, GeneratorKind};
use xprompt_core::Error;

use common::{forward_loss, micro_backbone, random_bank, task};

fn default_backbone() -> FrozenBackbone {
    let mut bb = FrozenBackbone::init(&BackboneConfig::default()).unwrap();
    bb.freeze();
    bb
}

#[test]
fn default_prompt_shapes() {
    let bb = default_backbone();
    let bank = PromptBank::init(20, 64, 16, &InitStrategy::sampled_vocab(0), &bb).unwrap();
    assert_eq!(bank.embeddings().shape(), (20, 64));
    assert_eq!(bank.gamma(), Matrix::ones(20, 1));
    assert_eq!(bank.zeta(), Matrix::ones(20, 16));
    assert!(bank.snapshot().is_none());
}

#[test]
fn sampled_rows_are_distinct_vocabulary_rows() {
    let bb = default_backbone();
    let table = bb.token_embeddings();
    let bank = PromptBank::init(20, 64, 16, &InitStrategy::sampled_vocab(5), &bb).unwrap();
    let mut sources = Vec::new();
    for i in 0..20 {
        let src = (0..table.rows())
            .find(|&r| table.row(r) == bank.embeddings().row(i))
            .expect("row copied from the vocabulary");
        sources.push(src);
    }
    sources.sort_unstable();
    sources.dedup();
    assert_eq!(sources.len(), 20);
}

#[test]
fn bad_initialisations_are_rejected() {
    let bb = default_backbone();
    let zero = InitStrategy::random_uniform(0.0, 1);
    assert_eq!(PromptBank::init(4, 64, 16, &zero, &bb).unwrap_err().exit_code(), 2);
    let too_many = PromptBank::init(65, 64, 16, &InitStrategy::sampled_vocab(1), &bb).unwrap_err();
    assert!(matches!(too_many, Error::Capacity { .. }));
    assert!(matches!(
        PromptBank::init(4, 64, 5, &InitStrategy::sampled_vocab(1), &bb),
        Err(Error::Divisibility { .. })
    ));
}

#[test]
fn pruned_token_row_becomes_zero() {
    let p = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let mut bank = PromptBank::from_parts(p.clone(), 1).unwrap();
    assert_eq!(bank.effective_matrix(), p);
    bank.set_masks(vec![true, false], vec![true, true]).unwrap();
    assert_eq!(
        bank.effective_matrix(),
        Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap()
    );
}

#[test]
fn masked_forward_equals_literally_zeroed_prompt() {
    let bb = micro_backbone(8, 6);
    let mut bank = random_bank(&bb, 4, 4, 2);
    bank.set_masks(
        vec![true, false, true, true],
        vec![
            true, true, true, true, false, false, false, false, true, false, true, false, false, true, true, true,
        ],
    )
    .unwrap();
    let mut zeroed = bank.embeddings().clone();
    for i in 0..4 {
        for j in 0..8 {
            if !bank.cell_live(i, j / 2) {
                zeroed.set(i, j, 0.0);
            }
        }
    }
    let (train, _) = task(GeneratorKind::PatternDetect, 12, 10, 1, 8);
    let masked = forward_loss(&bb, &bank.effective_matrix(), &train);
    let literal = forward_loss(&bb, &zeroed, &train);
    assert!((masked - literal).abs() <= 1e-12, "{masked} vs {literal}");
}

#[test]
fn snapshot_restore_round_trip() {
    let bb = micro_backbone(8, 7);
    let mut bank = random_bank(&bb, 3, 2, 1);
    assert!(matches!(bank.restore_snapshot(), Err(Error::State(_))));
    bank.take_snapshot();
    let original = bank.embeddings().clone();
    bank.set_masks(vec![true, false, true], vec![true, false, true, true, false, true])
        .unwrap();
    bank.embeddings_mut().scale_in_place(3.0);
    bank.restore_snapshot().unwrap();
    assert_eq!(bank.embeddings(), &original);
    assert_eq!(bank.token_mask(), &[true, false, true]);
    assert_eq!(bank.piece_mask(), &[true, false, true, true, false, true]);
    bank.take_snapshot();
    assert_eq!(bank.snapshot(), Some(&original));
}

#[test]
fn zero_epochs_leave_the_prompt_alone() {
    let bb = micro_backbone(8, 8);
    let (train, dev) = task(GeneratorKind::PatternDetect, 12, 16, 8, 1);
    let mut bank = random_bank(&bb, 3, 2, 3);
    let before = bank.clone();
    let untuned = evaluate(&bank, &bb, &dev).unwrap();
    let mut opt = new_optimizer(OptimizerConfig::adafactor(0.05, 1e-5), &bank).unwrap();
    let cfg = TuneConfig {
        epochs: 0,
        batch_size: 4,
        seed: 0,
    };
    let res = tune(&mut bank, &bb, &train, &dev, &cfg, &mut opt).unwrap();
    assert_eq!(bank, before);
    assert_eq!(res.best_dev_acc, untuned);
    assert_eq!(res.steps, 0);
}

#[test]
fn empty_training_set_is_a_data_error() {
    let bb = micro_backbone(8, 8);
    let (_, dev) = task(GeneratorKind::PatternDetect, 12, 4, 4, 1);
    let mut bank = random_bank(&bb, 3, 2, 3);
    let mut opt = new_optimizer(OptimizerConfig::adafactor(0.05, 0.0), &bank).unwrap();
    let cfg = TuneConfig {
        epochs: 1,
        batch_size: 4,
        seed: 0,
    };
    assert!(matches!(
        tune(&mut bank, &bb, &[], &dev, &cfg, &mut opt),
        Err(Error::Data(_))
    ));
}

/// Prompt tuning written without any mask nodes: the prompt matrix is fed
/// straight into the backbone and the optimizer sees no mask.
fn maskless_losses(
    bb: &FrozenBackbone,
    p0: &Matrix,
    k: usize,
    train: &[Example],
    cfg: &TuneConfig,
    opt: OptimizerConfig,
) -> Vec<f64> {
    let mut p = p0.clone();
    let mut state = OptimizerState::new(opt, p.shape(), k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = bb.bind(&mut g).unwrap();
            let prompt = g.param(p.clone());
            let mut logits = None;
            for &i in chunk {
                let out = bound
                    .forward_with_prompt(&mut g, Some(prompt), &train[i].tokens)
                    .unwrap();
                logits = Some(match logits {
                    None => out,
                    Some(prev) => g.concat_rows(prev, out).unwrap(),
                });
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let loss = g.softmax_cross_entropy(logits.unwrap(), &labels).unwrap();
            g.backward(loss.node).unwrap();
            let grad = g.grad_or_zeros(prompt);
            state.step(&mut p, &grad, None).unwrap();
            losses.push(loss.value);
        }
    }
    losses
}

#[test]
fn unit_masks_tune_like_a_maskless_prompt() {
    let bb = micro_backbone(8, 9);
    let (train, dev) = task(GeneratorKind::PatternDetect, 12, 20, 4, 5);
    let cfg = TuneConfig {
        epochs: 3,
        batch_size: 4,
        seed: 11,
    };
    for opt in [OptimizerConfig::adafactor(0.05, 1e-5), OptimizerConfig::adam(0.01)] {
        let mut bank = random_bank(&bb, 3, 2, 6);
        let reference = maskless_losses(&bb, bank.embeddings(), 2, &train, &cfg, opt);
        let mut state = new_optimizer(opt, &bank).unwrap();
        let res = tune(&mut bank, &bb, &train, &dev, &cfg, &mut state).unwrap();
        assert_eq!(res.losses.len(), reference.len());
        for (a, b) in res.losses.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn tuning_beats_the_majority_class() {
    let bb = micro_backbone(8, 10);
    let (train, dev) = task(GeneratorKind::MajorityClass, 12, 48, 32, 12);
    let mut bank = random_bank(&bb, 4, 2, 1);
    let mut opt = new_optimizer(OptimizerConfig::adafactor(0.05, 1e-5), &bank).unwrap();
    let cfg = TuneConfig {
        epochs: 30,
        batch_size: 16,
        seed: 0,
    };
    let res = tune(&mut bank, &bb, &train, &dev, &cfg, &mut opt).unwrap();
    let majority = majority_baseline(&dev, 2);
    assert!(
        res.best_dev_acc > majority,
        "{} vs majority {majority}",
        res.best_dev_acc
    );
    assert_eq!(evaluate(&bank, &bb, &dev).unwrap(), res.best_dev_acc);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn masked_entries_stay_bitwise_frozen(
        tokens in proptest::collection::vec(any::<bool>(), 3),
        pieces in proptest::collection::vec(any::<bool>(), 6),
        seed in 0u64..500,
    ) {
        let bb = micro_backbone(8, 1);
        let (train, dev) = task(GeneratorKind::ParityOfMarkers, 12, 8, 4, seed);
        let mut bank = random_bank(&bb, 3, 2, seed);
        bank.set_masks(tokens, pieces).unwrap();
        let before = bank.embeddings().clone();
        let mut opt = new_optimizer(OptimizerConfig::adafactor(0.1, 1e-3), &bank).unwrap();
        let cfg = TuneConfig { epochs: 2, batch_size: 4, seed };
        tune(&mut bank, &bb, &train, &dev, &cfg, &mut opt).unwrap();
        let mask = bank.entry_mask();
        for j in 0..before.len() {
            if mask.data()[j] == 0.0 {
                prop_assert_eq!(bank.embeddings().data()[j].to_bits(), before.data()[j].to_bits());
            }
        }
    }
}

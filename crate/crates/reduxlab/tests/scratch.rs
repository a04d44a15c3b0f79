//! Temporary calibration probe. Run with:
//! cargo test -p reduxlab --test scratch -- --ignored --nocapture

use reduxlab::corpus::SegmentedExample;
use reduxlab::importance::ImportanceMethod;
use reduxlab::model::{accuracy, forward, init_params, train, ModelDims, TrainConfig};
use reduxlab::reduction::{reduce_dataset, ReduceOptions};
use reduxlab::regularize::{
    build_reduced_training_set, finetune, finetune_random_baseline, mean_entropy, FineTuneConfig,
    ReducedSet,
};
use reduxlab::synth::{generate_encoded, SynthConfig};

fn fixture() -> SynthConfig {
    SynthConfig {
        train_size: 2000,
        val_size: 400,
        length_range: (8, 12),
        keywords_per_example: (2, 2),
        cross_keyword_prob: 0.3,
        label_noise: 0.0,
        seed: 7,
        ..SynthConfig::default()
    }
}

/// Fraction of reduced entries whose argmax matches the base model's.
fn flip_rate(
    base: &reduxlab::model::ModelParams<f64>,
    tuned: &reduxlab::model::ModelParams<f64>,
    set: &ReducedSet,
) -> f64 {
    let mut flips = 0usize;
    for (i, e) in set.entries.iter().enumerate() {
        let ex = SegmentedExample {
            id: i as u32,
            reducible: e.reducible.clone(),
            frozen: e.frozen.clone(),
            label: 0,
        };
        let (a, _) = forward(base, &ex).unwrap();
        let (b, _) = forward(tuned, &ex).unwrap();
        if a.label != b.label {
            flips += 1;
        }
    }
    flips as f64 / set.entries.len() as f64
}

#[test]
#[ignore]
fn probe() {
    let (train_ds, val_ds, vocab, _) = generate_encoded(&fixture()).unwrap();
    println!("vocab {}", vocab.len());
    for base_epochs in [10usize] {
        let t0 = std::time::Instant::now();
        let params = init_params(
            ModelDims {
                vocab_size: vocab.len(),
                embed_dim: 64,
                hidden_dims: vec![64],
                num_classes: 2,
            },
            7,
        )
        .unwrap();
        let (base, metrics) = train(
            params,
            &train_ds,
            Some(&val_ds),
            &TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                epochs: base_epochs,
                seed: 7,
            },
        )
        .unwrap();
        let base64 = base.cast::<f64>();
        let base_acc = accuracy(&base64, &val_ds).unwrap();
        let val_red = reduce_dataset(&base64, &val_ds, &ReduceOptions::default()).unwrap();
        println!(
            "base_epochs={base_epochs}: val_acc={base_acc:.4} train_loss={:.4} orig_conf={:.4} red_len={:.3} red_conf={:.4} ({:?})",
            metrics.last().unwrap().train_loss,
            val_red.summary.mean_original_confidence,
            val_red.summary.mean_reduced_length,
            val_red.summary.mean_reduced_confidence,
            t0.elapsed()
        );
        let (train_set, _) = build_reduced_training_set(
            &base64,
            &train_ds,
            5,
            ImportanceMethod::InputGradient,
            None,
        )
        .unwrap();
        let heldout = ReducedSet::from_outcomes(&val_red.outcomes);
        let e_before = mean_entropy(&base64, &heldout).unwrap();
        println!(
            "  negative set {} entries, heldout H_before={e_before:.6}",
            train_set.entries.len()
        );
        for ft_epochs in [200usize, 500] {
            let t0 = std::time::Instant::now();
            let cfg = FineTuneConfig {
                epochs: ft_epochs,
                batch_size: 32,
                seed: 7,
                ..FineTuneConfig::default()
            };
            let (tuned, _) = finetune(base.clone(), &train_ds, &train_set, &cfg).unwrap();
            let tuned64 = tuned.cast::<f64>();
            let e_after = mean_entropy(&tuned64, &heldout).unwrap();
            let re_red = reduce_dataset(&tuned64, &val_ds, &ReduceOptions::default()).unwrap();
            println!(
                "  ft_epochs={ft_epochs}: H {e_before:.5}->{e_after:.5} flip_rate={:.3} len {:.3}->{:.3} ({:+.1}%) acc {base_acc:.4}->{:.4} ({:?})",
                flip_rate(&base64, &tuned64, &heldout),
                val_red.summary.mean_reduced_length,
                re_red.summary.mean_reduced_length,
                100.0 * (re_red.summary.mean_reduced_length
                    / val_red.summary.mean_reduced_length
                    - 1.0),
                accuracy(&tuned64, &val_ds).unwrap(),
                t0.elapsed()
            );
            let cfg0 = FineTuneConfig {
                lambda: 0.0,
                ..cfg.clone()
            };
            let (tuned0, _) = finetune(base.clone(), &train_ds, &train_set, &cfg0).unwrap();
            let tuned0_64 = tuned0.cast::<f64>();
            println!(
                "    lambda=0: dH={:+.6} acc->{:.4}",
                mean_entropy(&tuned0_64, &heldout).unwrap() - e_before,
                accuracy(&tuned0_64, &val_ds).unwrap()
            );
            let (rnd, _, _) =
                finetune_random_baseline(base.clone(), &train_ds, &train_set, &cfg, 1000).unwrap();
            let rnd64 = rnd.cast::<f64>();
            let rnd_red = reduce_dataset(&rnd64, &val_ds, &ReduceOptions::default()).unwrap();
            println!(
                "    random baseline: len->{:.3} acc->{:.4}",
                rnd_red.summary.mean_reduced_length,
                accuracy(&rnd64, &val_ds).unwrap()
            );
        }
    }
}

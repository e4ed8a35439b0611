//! Scratch harness for tuning desk-scale hyperparameters; not part of the
//! published surface.

use imprint_core::corpus::{downstream_task, pretrain_corpus, to_seqs};
use imprint_core::fingerprint::{
    eval_fsr, exact_match_accuracy, gen_fingerprint_dataset, FingerprintSpec, FingerprintStyle,
};
use imprint_core::lora::{fuse, init_adapter, stack, transfer, LoraConfig};
use imprint_core::model::{init_model, ModelConfig};
use imprint_core::train::{train_adapter, train_full, Selector, TrainConfig};
use imprint_core::SeededRng;

fn main() {
    let mcfg = ModelConfig::default();
    let base_tcfg = TrainConfig::default();

    let corpus = pretrain_corpus(256, 11);
    let init = init_model(&mcfg, &SeededRng::new(1)).unwrap();
    let (base, _) = train_full(&init, &mcfg, &base_tcfg, &to_seqs(&corpus)).unwrap();

    let (task_train, task_eval) = downstream_task(96, 32, 13);
    let derive_tcfg = TrainConfig {
        base_lr: 0.0005,
        epochs: 10,
        ..TrainConfig::default()
    };
    let (wizard, _) = train_full(&base, &mcfg, &derive_tcfg, &to_seqs(&task_train)).unwrap();
    let clean_acc = exact_match_accuracy(&wizard, &mcfg, &task_eval).unwrap();
    println!("wizard clean acc {clean_acc:.3}");

    for (mix, epochs, alpha, k_rare, split_target) in [
        (4.0, 120usize, 8.0f64, 8usize, false),
        (4.0, 60, 16.0, 8, false),
        (4.0, 60, 8.0, 4, false),
        (4.0, 60, 8.0, 8, true),
    ] {
        let lcfg = LoraConfig {
            rank: 4,
            alpha,
            seed: 99,
            ..LoraConfig::default()
        };
        let inject_tcfg = TrainConfig {
            epochs,
            batch_size: 8,
            selector: Selector::AdapterOnly,
            seed: 99,
            ..TrainConfig::default()
        };
        let mut if_spec = FingerprintSpec::new(FingerprintStyle::If);
        if_spec.seed = 21;
        let mut utf_spec = FingerprintSpec::new(FingerprintStyle::Utf);
        utf_spec.seed = 22;
        utf_spec.k_rare = k_rare;
        if split_target {
            utf_spec.target = vec![0xA7, 0xB6, 0xC5, 0xD4, 0xE3, 0xF2];
        }
        let if_ds = gen_fingerprint_dataset(&if_spec, &corpus, mix).unwrap();
        let utf_ds = gen_fingerprint_dataset(&utf_spec, &corpus, mix).unwrap();

        let train = |host: &imprint_core::checkpoint::Checkpoint, ds: &imprint_core::fingerprint::FingerprintDataset,
                     seed: u64| {
            let fresh = init_adapter(host, &lcfg, &SeededRng::new(seed)).unwrap();
            let mut tcfg = inject_tcfg.clone();
            tcfg.seed = seed;
            train_adapter(host, &fresh, &mcfg, &tcfg, &ds.seqs()).unwrap().0
        };
        let if_base_ad = train(&base, &if_ds, 101);
        let if_direct_ad = train(&wizard, &if_ds, 102);
        let utf_base_ad = train(&base, &utf_ds, 103);
        let utf_direct_ad = train(&wizard, &utf_ds, 104);

        let fsr = |ckpt: &imprint_core::checkpoint::Checkpoint, ds: &imprint_core::fingerprint::FingerprintDataset| {
            eval_fsr(ckpt, &mcfg, &ds.triggers()).unwrap()
        };
        let if_d = fsr(&fuse(&wizard, &if_direct_ad).unwrap(), &if_ds).fsr;
        let if_t = fsr(&transfer(&if_base_ad, &wizard).unwrap(), &if_ds).fsr;
        let utf_d = fsr(&fuse(&wizard, &utf_direct_ad).unwrap(), &utf_ds).fsr;
        let utf_t = fsr(&transfer(&utf_base_ad, &wizard).unwrap(), &utf_ds).fsr;
        println!(
            "mix={mix} ep={epochs} a={alpha}: singles if d/t {if_d:.2}/{if_t:.2} utf d/t {utf_d:.2}/{utf_t:.2}"
        );

        let combos: [(&str, &imprint_core::lora::LoraAdapter, &imprint_core::lora::LoraAdapter); 3] = [
            ("d+t", &if_direct_ad, &utf_base_ad),
            ("t+d", &if_base_ad, &utf_direct_ad),
            ("t+t", &if_base_ad, &utf_base_ad),
        ];
        for (label, ad1, ad2) in combos {
            let stacked = stack(&wizard, &[ad1.clone(), ad2.clone()]).unwrap();
            let r_if = fsr(&stacked, &if_ds);
            let r_utf = fsr(&stacked, &utf_ds);
            let acc = exact_match_accuracy(&stacked, &mcfg, &task_eval).unwrap();
            print!(
                "  stack {label}: if {:.2} utf {:.2} acc {acc:.3}",
                r_if.fsr, r_utf.fsr
            );
            if let Some(fail) = r_if.details.iter().find(|d| !d.pass) {
                let trig = &if_ds.triggers()[fail.index].0;
                print!(
                    "  [if miss: {:?} -> {:?}]",
                    String::from_utf8_lossy(trig),
                    fail.decoded
                );
            }
            println!();
        }
    }
}

//! Calibration probe for the toy zero-shot benchmark (run explicitly).

use std::time::Instant;

use avfm_core::backbone::BackboneConfig;
use avfm_core::datagen::{self, vocab::Vocabulary, DatagenConfig};
use avfm_core::extract::RawPixelExtractor;
use avfm_core::lora::InjectionPlan;
use avfm_core::metrics::{evaluate_dataset, EvalSample};
use avfm_core::model::ModelState;
use avfm_core::rng::{derive_seed, derive_stream};
use avfm_core::tensor::Tensor;
use avfm_core::trainer::{train_zero_shot, TrainConfig, TrainItem};

fn gen(
    n: usize,
    objects: &[&str],
    seed: u64,
    label: &str,
) -> Vec<avfm_core::datagen::SampleTriplet> {
    let tags: Vec<String> = objects.iter().map(|s| s.to_string()).collect();
    let cfg = DatagenConfig {
        extractor: "raw_pixel".into(),
        objects: Some(tags.clone()),
        ..DatagenConfig::default()
    };
    let vocabulary = Vocabulary::builtin().subset(&tags).unwrap();
    let ex = RawPixelExtractor { patch: 8 };
    datagen::generate_triplets(n, &cfg, &vocabulary, &ex, derive_seed(seed, label, 0)).unwrap()
}

fn to_eval(samples: &[avfm_core::datagen::SampleTriplet]) -> Vec<EvalSample> {
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| s.accepted) {
        out.push(EvalSample {
            id: format!("{}-n", s.id),
            class_tag: s.object.clone(),
            image: s.normal.clone(),
            mask: Tensor::zeros(s.mask.shape()),
            label: false,
        });
        out.push(EvalSample {
            id: format!("{}-a", s.id),
            class_tag: s.object.clone(),
            image: s.anomalous.clone(),
            mask: s.mask.clone(),
            label: true,
        });
    }
    out
}

const TRAIN_TAGS: [&str; 6] = ["apple", "fabric", "hammer", "paper", "plastic", "tomato"];
const EVAL_TAGS: [&str; 2] = ["battery", "denim"];

#[test]
#[ignore = "calibration probe, run explicitly"]
fn probe_benchmark_learning() {
    let arch = BackboneConfig {
        image_size: 64,
        patch_size: 8,
        embed_dim: 32,
        num_blocks: 3,
        num_heads: 4,
        mlp_ratio: 2.0,
        adapter_rank: 4,
    };
    let seed: u64 = std::env::var("CAL_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let iters: usize = std::env::var("CAL_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
    let n_train: usize = std::env::var("CAL_N").ok().and_then(|v| v.parse().ok()).unwrap_or(512);

    let t0 = Instant::now();
    let train_samples = gen(n_train, &TRAIN_TAGS, seed, "bench-train");
    let eval_samples_list = gen(256, &EVAL_TAGS, seed, "bench-eval");
    eprintln!("gen: {:?}", t0.elapsed());

    let eval_set = to_eval(&eval_samples_list);

    // untrained baseline
    let mut rng = derive_stream(seed, "model-init", 0);
    let untrained = ModelState::init(arch.clone(), InjectionPlan::default(), true, &mut rng).unwrap();
    let base = evaluate_dataset(&untrained, &eval_set).unwrap();
    eprintln!(
        "baseline: img {:.3} px {:.3}",
        base.image_auroc, base.pixel_auroc
    );

    let freeze = std::env::var("CAL_FREEZE").map(|v| v != "0").unwrap_or(true);
    let warmup: usize = std::env::var("CAL_WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let cfg = TrainConfig {
        iterations: iters,
        batch_size: 8,
        lr: 1e-4,
        seed,
        freeze_backbone: freeze,
        warmup_steps: warmup,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let items = TrainItem::from_generated(&train_samples);
    let ckpt = train_zero_shot(&items, arch, InjectionPlan::default(), &cfg, None).unwrap();
    eprintln!("train {} iters: {:?}", iters, t1.elapsed());

    let t2 = Instant::now();
    let report = evaluate_dataset(&ckpt.model, &eval_set).unwrap();
    eprintln!("eval: {:?}", t2.elapsed());
    eprintln!(
        "seed {}: img_auroc {:.4} img_f1 {:.4} px_auroc {:.4} px_f1 {:.4}",
        seed, report.image_auroc, report.image_f1max, report.pixel_auroc, report.pixel_f1max
    );
}

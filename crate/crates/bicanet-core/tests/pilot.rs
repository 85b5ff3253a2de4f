//! Scratch pilot for tuning training hyperparameters. Run manually:
//! cargo test -p bicanet-core --test pilot -- --ignored --nocapture

use bicanet_core::data::SyntheticSpec;
use bicanet_core::network::AblationFlags;
use bicanet_core::train::{evaluate_model, load_dataset, load_model, train, Seeds, TrainConfig};

fn convergence_config(lr: f64, momentum: f64, widths: [usize; 4]) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.classes = 4;
    cfg.crop = 64;
    cfg.batch = 1;
    cfg.epochs = 20; // 10 samples -> 200 iterations
    cfg.lr_base = lr;
    cfg.momentum = momentum;
    cfg.widths = widths;
    cfg.synthetic = Some(bicanet_core::train::SyntheticDataConfig {
        spec: SyntheticSpec {
            classes: 4,
            canvas: 64,
            ..SyntheticSpec::default()
        },
        train_count: 10,
        val_count: 2,
    });
    cfg.scale_range = (1.0, 1.0);
    cfg.aspect_range = (1.0, 1.0);
    cfg.hflip = false;
    cfg.log_every = 50;
    cfg.seeds = Seeds::default();
    cfg
}

#[test]
#[ignore]
fn pilot_convergence() {
    use bicanet_core::layers::{Fwd, Mode};
    use bicanet_core::metrics::ConfusionMatrix;
    use bicanet_core::tensor::Tape;
    use bicanet_core::train::argmax_labels;

    for (seed, lr, momentum, jitter, tag) in [
        (11u64, 0.2, 0.9, 0.05, "s11-j05"),
        (31, 0.2, 0.9, 0.05, "s31-j05"),
        (11, 0.15, 0.95, 0.10, "s11-m95"),
        (31, 0.15, 0.95, 0.10, "s31-m95"),
        (11, 0.3, 0.9, 0.05, "s11-lr30-j05"),
        (31, 0.3, 0.9, 0.05, "s31-lr30-j05"),
    ] {
        let mut cfg = convergence_config(lr, momentum, [16, 32, 64, 128]);
        cfg.seeds = Seeds {
            params: seed,
            data: seed + 1,
            train: seed + 2,
        };
        if let Some(s) = cfg.synthetic.as_mut() {
            s.spec.color_jitter = jitter;
        }
        cfg.out_dir = format!("/tmp/pilot/{tag}");
        let start = std::time::Instant::now();
        let report = train(&cfg).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let ds = load_dataset(&cfg).unwrap();
        let (_, model, mut store) = load_model(&report.final_checkpoint).unwrap();
        let cm = evaluate_model(&model, &mut store, &ds.train, cfg.crop).unwrap();

        // Train-mode (batch statistics) pixel accuracy for comparison.
        let mut cm_train = ConfusionMatrix::new(cfg.classes);
        for s in &ds.train {
            let mut tape = Tape::new();
            let mut fwd = Fwd::new(&mut tape, &mut store, Mode::Train);
            let x = fwd.tape.leaf(s.image.clone(), false);
            let out = model.forward(&mut fwd, x).unwrap();
            let pred = argmax_labels(tape.value(out.logits));
            cm_train.accumulate(&pred, &s.labels.data).unwrap();
        }
        println!(
            "PILOT {tag}: {:.1}s, eval-bn pixacc {:.4}, batch-bn pixacc {:.4}",
            secs,
            cm.pixel_accuracy().unwrap(),
            cm_train.pixel_accuracy().unwrap(),
        );
    }
}

fn ablation_config(seed: u64, flags: AblationFlags, crop: usize, iters: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.classes = 5;
    cfg.crop = crop;
    cfg.widths = [8, 16, 32, 64];
    cfg.batch = 1;
    cfg.epochs = 10;
    cfg.max_iter = Some(iters);
    cfg.lr_base = 0.1;
    cfg.momentum = 0.9;
    cfg.ablation = flags;
    cfg.seeds = Seeds {
        params: seed,
        data: seed + 1,
        train: seed + 2,
    };
    cfg.synthetic = Some(bicanet_core::train::SyntheticDataConfig {
        spec: SyntheticSpec {
            classes: 5,
            canvas: crop,
            color_jitter: 0.5,
            ..SyntheticSpec::default()
        },
        train_count: 200,
        val_count: 50,
    });
    cfg.log_every = 0;
    cfg
}

#[test]
#[ignore]
fn pilot_ablation() {
    let variants = [
        ("baseline", AblationFlags { use_ccpb: false, use_bcib: false, use_mcfb: false }),
        ("ccpb", AblationFlags { use_ccpb: true, use_bcib: false, use_mcfb: false }),
        ("ccpb+bcib", AblationFlags { use_ccpb: true, use_bcib: true, use_mcfb: false }),
        ("full", AblationFlags { use_ccpb: true, use_bcib: true, use_mcfb: true }),
    ];
    for (tag, crop, batch, lr, jitter, classes, augment) in [
        ("F64-lr05-j120-L9", 64usize, 1usize, 0.05, 1.2f32, 9usize, false),
        ("G64-lr02-j120-L9", 64, 1, 0.02, 1.2, 9, false),
    ] {
        for (name, flags) in variants {
            let start = std::time::Instant::now();
            let mut cfg = ablation_config(7, flags, crop, 2000);
            cfg.batch = batch;
            cfg.lr_base = lr;
            cfg.classes = classes;
            if let Some(s) = cfg.synthetic.as_mut() {
                s.spec.color_jitter = jitter;
                s.spec.classes = classes;
            }
            if !augment {
                cfg.scale_range = (1.0, 1.0);
                cfg.aspect_range = (1.0, 1.0);
                cfg.hflip = true;
            }
            cfg.out_dir = format!("/tmp/pilot/abl-{tag}-{name}");
            let report = train(&cfg).unwrap();
            let ds = load_dataset(&cfg).unwrap();
            let (_, model, mut store) = load_model(&report.final_checkpoint).unwrap();
            let cm = evaluate_model(&model, &mut store, &ds.val, cfg.crop).unwrap();
            println!(
                "ABLATION {tag} {name}: {:.0}s, val miou {:.4}, pixacc {:.4}",
                start.elapsed().as_secs_f64(),
                cm.miou().unwrap(),
                cm.pixel_accuracy().unwrap()
            );
        }
    }
}

#[test]
#[ignore]
fn pilot_batch_probe() {
    for (batch, iters, tag) in [(1usize, 200u64, "b1"), (2, 200, "b2"), (4, 200, "b4")] {
        let mut cfg = convergence_config(0.2, 0.9, [16, 32, 64, 128]);
        cfg.batch = batch;
        cfg.max_iter = Some(iters);
        cfg.epochs = 100;
        if let Some(s) = cfg.synthetic.as_mut() {
            s.spec.color_jitter = 0.10;
        }
        cfg.seeds = Seeds { params: 41, data: 42, train: 43 };
        cfg.out_dir = format!("/tmp/pilot/probe-{tag}");
        let report = train(&cfg).unwrap();
        let ds = load_dataset(&cfg).unwrap();
        let (_, model, mut store) = load_model(&report.final_checkpoint).unwrap();
        let cm = evaluate_model(&model, &mut store, &ds.train, cfg.crop).unwrap();
        let tail: Vec<f64> = report.losses[150..].to_vec();
        let med = {
            let mut v = tail;
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        println!(
            "BATCHPROBE {tag}: pixacc {:.4}, median tail loss {:.4}, first losses {:?}",
            cm.pixel_accuracy().unwrap(),
            med,
            &report.losses[..4]
        );
    }
}

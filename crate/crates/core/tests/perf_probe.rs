//! Throwaway experiment bench for sizing the acceptance-suite budgets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cascadet::cascade::{detect, stage1_boxes, stage2_boxes, DetectConfig};
use cascadet::dataset::{synth_dataset, SynthConfig};
use cascadet::image::crop_resize;
use cascadet::model::CascadeModel;
use cascadet::net::{forward, NetId};
use cascadet::sampler::{generate_proposals, iou, ClassCounts, Proposal};
use cascadet::trainer::{alternating_end_to_end, mine_pool, train_stage, Stage, TrainConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mining_cfg() -> DetectConfig {
    DetectConfig {
        thresholds: [0.5, 0.5, 0.5],
        ..DetectConfig::default()
    }
}

#[test]
#[ignore]
fn pipeline_diagnosis_lab() {
    let train = synth_dataset(&SynthConfig {
        count: 60,
        width: 160,
        height: 120,
        faces_min: 1,
        faces_max: 2,
        seed: 0xA11CE,
    })
    .unwrap();
    let val = synth_dataset(&SynthConfig {
        count: 40,
        width: 160,
        height: 120,
        faces_min: 1,
        faces_max: 2,
        seed: 0xB0B,
    })
    .unwrap();

    let counts = ClassCounts {
        negatives: 40,
        positives: 15,
        part_faces: 10,
        landmark_faces: 10,
    };
    let mut model = CascadeModel::<f32>::init(0xFACE, false).unwrap();

    let mut pool12: Vec<Proposal<f32>> = Vec::new();
    for (id, scene) in train.iter().enumerate() {
        let mut r = rng(0x12AB + id as u64);
        pool12.extend(generate_proposals(id, scene, &counts, 12, &mut r).unwrap());
    }
    let cfg12 = TrainConfig {
        iterations: 2000,
        seed: 0x7A1,
        stage: Stage::Net12,
        ..TrainConfig::default()
    };
    let spec12 = model.spec(NetId::Net12);
    let out = train_stage(&spec12, model.net12.clone(), &pool12, &cfg12, None).unwrap();
    eprintln!("net12 trained, final loss {:.4}", out.trace.last().unwrap().hard_loss);
    model.net12 = out.params;

    let mine_counts = ClassCounts {
        negatives: 30,
        positives: 12,
        part_faces: 8,
        landmark_faces: 8,
    };
    let pool24 = mine_pool(&model, NetId::Net24, &train, &mine_counts, &mining_cfg(), 0x24AB).unwrap();
    let cfg24 = TrainConfig {
        iterations: 1200,
        seed: 0x7A2,
        stage: Stage::Net24,
        ..TrainConfig::default()
    };
    let spec24 = model.spec(NetId::Net24);
    let out = train_stage(&spec24, model.net24.clone(), &pool24, &cfg24, None).unwrap();
    eprintln!("net24 trained, final loss {:.4}", out.trace.last().unwrap().hard_loss);
    model.net24 = out.params;

    let pool48 = mine_pool(&model, NetId::Net48, &train, &mine_counts, &mining_cfg(), 0x48AB).unwrap();
    let cfg48 = TrainConfig {
        iterations: 600,
        seed: 0x7A3,
        stage: Stage::Net48,
        ..TrainConfig::default()
    };
    let spec48 = model.spec(NetId::Net48);
    let out = train_stage(&spec48, model.net48.clone(), &pool48, &cfg48, None).unwrap();
    eprintln!("net48 trained, final loss {:.4}", out.trace.last().unwrap().hard_loss);
    model.net48 = out.params;

    // GT crop score sanity.
    let score_crop = |model: &CascadeModel<f32>, net: NetId, scene: &cascadet::sampler::AnnotatedImage, sq: &cascadet::sampler::BoundingBox| -> f64 {
        let patch = crop_resize::<f32>(&scene.image, sq, net.input_size()).unwrap();
        let spec = model.spec(net);
        let params = model.params(net);
        let tr = forward(&spec, params, &patch, None).unwrap();
        tr.heads.cls.data()[1] as f64
    };
    for net in [NetId::Net12, NetId::Net24, NetId::Net48] {
        let mut scores: Vec<f64> = val
            .iter()
            .flat_map(|s| {
                s.face_boxes()
                    .into_iter()
                    .map(|gt| score_crop(&model, net, s, &gt.squared()))
                    .collect::<Vec<_>>()
            })
            .collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eprintln!(
            "gt crop scores {}: min {:.3} p10 {:.3} median {:.3}",
            net.as_str(),
            scores[0],
            scores[scores.len() / 10],
            scores[scores.len() / 2]
        );
    }

    // Stage-by-stage coverage at a loose operating point.
    let loose = DetectConfig {
        thresholds: [0.4, 0.4, 0.4],
        ..DetectConfig::default()
    };
    let mut hist = [[0usize; 4]; 3]; // stage -> iou bucket (<0.3, 0.3-0.5, 0.5-0.7, >=0.7)
    let bucket = |x: f64| {
        if x < 0.3 {
            0
        } else if x < 0.5 {
            1
        } else if x < 0.7 {
            2
        } else {
            3
        }
    };
    let mut n_faces = 0;
    for scene in val.iter() {
        let s1 = stage1_boxes(&model, &scene.image, &loose).unwrap();
        let (s2, _) = stage2_boxes(&model, &scene.image, &loose, &s1).unwrap();
        let dets = detect(&model, &scene.image, &loose).unwrap();
        for gt in scene.face_boxes() {
            n_faces += 1;
            let best1 = s1.iter().map(|b| iou(b, &gt).unwrap()).fold(0.0, f64::max);
            let best2 = s2.iter().map(|b| iou(b, &gt).unwrap()).fold(0.0, f64::max);
            let best3 = dets
                .iter()
                .map(|d| iou(&d.bbox, &gt).unwrap())
                .fold(0.0, f64::max);
            hist[0][bucket(best1)] += 1;
            hist[1][bucket(best2)] += 1;
            hist[2][bucket(best3)] += 1;
        }
    }
    eprintln!("faces {n_faces}; best-IoU buckets [<.3, .3-.5, .5-.7, >=.7]:");
    eprintln!("  stage1 {:?}", hist[0]);
    eprintln!("  stage2 {:?}", hist[1]);
    eprintln!("  final  {:?}", hist[2]);

    // Recall / false positives across operating points.
    for thr in [[0.4f64, 0.4, 0.4], [0.5, 0.5, 0.5], [0.6, 0.6, 0.7]] {
        let cfg = DetectConfig {
            thresholds: thr,
            ..DetectConfig::default()
        };
        let mut tp = 0;
        let mut nfaces = 0;
        let mut fp = 0;
        for scene in val.iter() {
            let dets = detect(&model, &scene.image, &cfg).unwrap();
            let gts = scene.face_boxes();
            nfaces += gts.len();
            for gt in &gts {
                if dets.iter().any(|d| iou(&d.bbox, gt).unwrap() >= 0.5) {
                    tp += 1;
                }
            }
            for d in &dets {
                if gts.iter().all(|g| iou(&d.bbox, g).unwrap() < 0.5) {
                    fp += 1;
                }
            }
        }
        eprintln!(
            "thresholds {:?}: recall {:.3}, fp/image {:.2}",
            thr,
            tp as f64 / nfaces as f64,
            fp as f64 / val.len() as f64
        );
    }

    // After end-to-end fine-tuning, same sweep.
    let e2e_cfg = TrainConfig {
        iterations: 60,
        learning_rate: 0.003,
        batch_size: 32,
        seed: 0x7A4,
        stage: Stage::EndToEnd,
        ..TrainConfig::default()
    };
    let fine = alternating_end_to_end(&model, &train, &mine_counts, &e2e_cfg, &mining_cfg()).unwrap();
    for thr in [[0.4f64, 0.4, 0.4], [0.5, 0.5, 0.5], [0.6, 0.6, 0.7]] {
        let cfg = DetectConfig {
            thresholds: thr,
            ..DetectConfig::default()
        };
        let mut tp = 0;
        let mut nfaces = 0;
        let mut fp = 0;
        for scene in val.iter() {
            let dets = detect(&fine.model, &scene.image, &cfg).unwrap();
            let gts = scene.face_boxes();
            nfaces += gts.len();
            for gt in &gts {
                if dets.iter().any(|d| iou(&d.bbox, gt).unwrap() >= 0.5) {
                    tp += 1;
                }
            }
            for d in &dets {
                if gts.iter().all(|g| iou(&d.bbox, g).unwrap() < 0.5) {
                    fp += 1;
                }
            }
        }
        eprintln!(
            "e2e thresholds {:?}: recall {:.3}, fp/image {:.2}",
            thr,
            tp as f64 / nfaces as f64,
            fp as f64 / val.len() as f64
        );
    }

    std::fs::create_dir_all("/tmp/lab_models").unwrap();
    model.save(std::path::Path::new("/tmp/lab_models/stagewise.bin")).unwrap();
    fine.model.save(std::path::Path::new("/tmp/lab_models/e2e.bin")).unwrap();
    eprintln!("models saved to /tmp/lab_models");
}

#[test]
#[ignore]
fn operating_point_lab() {
    let val = synth_dataset(&SynthConfig {
        count: 40,
        width: 160,
        height: 120,
        faces_min: 1,
        faces_max: 2,
        seed: 0xB0B,
    })
    .unwrap();
    let model = CascadeModel::<f32>::load(std::path::Path::new("/tmp/lab_models/stagewise.bin")).unwrap();
    let fine = CascadeModel::<f32>::load(std::path::Path::new("/tmp/lab_models/e2e.bin")).unwrap();

    // Forensics: for faces lost at the final stage, score their exact
    // stage-2 box through the last net and report what killed them.
    let loose = DetectConfig {
        thresholds: [0.4, 0.4, 0.4],
        ..DetectConfig::default()
    };
    let spec48 = model.spec(NetId::Net48);
    let spec12 = model.spec(NetId::Net12);
    let spec24 = model.spec(NetId::Net24);
    let mut lost_scores = Vec::new();
    for scene in val.iter() {
        let s1 = stage1_boxes(&model, &scene.image, &loose).unwrap();
        let (s2, _) = stage2_boxes(&model, &scene.image, &loose, &s1).unwrap();
        let dets = detect(&model, &scene.image, &loose).unwrap();
        for gt in scene.face_boxes() {
            let best3 = dets
                .iter()
                .map(|d| iou(&d.bbox, &gt).unwrap())
                .fold(0.0, f64::max);
            if best3 >= 0.5 {
                continue;
            }
            // The face's best stage-2 box.
            let best2 = s2
                .iter()
                .max_by(|a, b| {
                    iou(a, &gt)
                        .unwrap()
                        .partial_cmp(&iou(b, &gt).unwrap())
                        .unwrap()
                });
            if let Some(b2) = best2 {
                let cov = iou(b2, &gt).unwrap();
                let sq = b2.squared();
                let crop = crop_resize::<f32>(&scene.image, &sq, 48).unwrap();
                let bridge = if model.bridged {
                    let t24 = crop_resize::<f32>(&scene.image, &sq, 24).unwrap();
                    let t12 = crop_resize::<f32>(&scene.image, &sq, 12).unwrap();
                    let f12 = forward(&spec12, &model.net12, &t12, None).unwrap().feature;
                    Some(forward(&spec24, &model.net24, &t24, Some(&f12)).unwrap().feature)
                } else {
                    None
                };
                let tr = forward(&spec48, &model.net48, &crop, bridge.as_ref()).unwrap();
                let score = tr.heads.cls.data()[1];
                lost_scores.push(((cov * 100.0).round() / 100.0, ((score as f64) * 100.0).round() / 100.0));
            } else {
                lost_scores.push((-1.0, -1.0));
            }
        }
    }
    eprintln!("lost faces (stage2 IoU, net48 score): {lost_scores:?}");

    // Operating point sweep on both models.
    for (name, m) in [("stagewise", &model), ("e2e", &fine)] {
        for thr in [
            [0.4f64, 0.4, 0.3],
            [0.4, 0.4, 0.2],
            [0.4, 0.4, 0.1],
            [0.3, 0.3, 0.2],
            [0.3, 0.3, 0.1],
            [0.2, 0.2, 0.1],
            [0.3, 0.3, 0.05],
        ] {
            let cfg = DetectConfig {
                thresholds: thr,
                ..DetectConfig::default()
            };
            let mut tp = 0;
            let mut nfaces = 0;
            let mut fp = 0;
            for scene in val.iter() {
                let dets = detect(m, &scene.image, &cfg).unwrap();
                let gts = scene.face_boxes();
                nfaces += gts.len();
                for gt in &gts {
                    if dets.iter().any(|d| iou(&d.bbox, gt).unwrap() >= 0.5) {
                        tp += 1;
                    }
                }
                for d in &dets {
                    if gts.iter().all(|g| iou(&d.bbox, g).unwrap() < 0.5) {
                        fp += 1;
                    }
                }
            }
            eprintln!(
                "{name} {:?}: recall {:.3}, fp/image {:.2}",
                thr,
                tp as f64 / nfaces as f64,
                fp as f64 / val.len() as f64
            );
        }
    }
}

//! Scratch end-to-end quality probe: corpus -> mine -> train -> detect
//! -> evaluate, with stage timings. Args: train_n test_n n_disc n_loc
//! [seed] [train_spo] [detect_spo].

use std::time::Instant;

use mldetect_core::dataset::{Dataset, Split};
use mldetect_core::detector::{DetectConfig, TrainConfig};
use mldetect_core::eval::{evaluate, ApStyle, Protocol};
use mldetect_core::featurize::PoolingScheme;
use mldetect_core::mining::MiningConfig;
use mldetect_core::pipeline::{detect_dataset, mine_bank};
use mldetect_core::synthetic::{generate_corpus, SyntheticConfig};
use mldetect_core::PyramidConfig;

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric args"))
        .collect();
    let train_n = *args.first().unwrap_or(&80);
    let test_n = *args.get(1).unwrap_or(&30);
    let n_disc = *args.get(2).unwrap_or(&10);
    let n_loc = *args.get(3).unwrap_or(&5);
    let seed = *args.get(4).unwrap_or(&0) as u64;
    let train_spo = *args.get(5).unwrap_or(&4) as u32;
    let detect_spo = *args.get(6).unwrap_or(&8) as u32;

    let dir = std::path::PathBuf::from(format!(
        "/tmp/smoke_{train_n}_{test_n}_{seed}"
    ));
    let cfg = SyntheticConfig {
        train_images: train_n,
        test_images: test_n,
        seed,
        ..SyntheticConfig::default()
    };
    let t0 = Instant::now();
    let manifest = if dir.join("manifest.json").exists() {
        dir.join("manifest.json")
    } else {
        std::fs::create_dir_all(&dir).unwrap();
        generate_corpus(&dir, &cfg).unwrap()
    };
    println!("[{:7.1?}] corpus at {}", t0.elapsed(), dir.display());

    let train = Dataset::load(&manifest, Split::Train).unwrap();
    let test = Dataset::load(&manifest, Split::Test).unwrap();

    let mine_pyr = PyramidConfig {
        scales_per_octave: train_spo,
        ..PyramidConfig::default()
    };
    let detect_pyr = PyramidConfig {
        scales_per_octave: detect_spo,
        ..PyramidConfig::default()
    };

    let t = Instant::now();
    let (bank, summaries) = mine_bank(
        &train,
        n_disc,
        n_loc,
        &mine_pyr,
        &MiningConfig { seed, ..MiningConfig::default() },
    )
    .unwrap();
    println!("[{:7.1?}] mined bank of {}", t.elapsed(), bank.len());
    for s in &summaries {
        println!(
            "    {}: disc {} loc {} (pos {} locpos {} neg {}){}",
            s.category,
            s.discriminative,
            s.localization,
            s.positives,
            s.loc_positives,
            s.negatives,
            s.failure.as_deref().map(|f| format!(" FAILED: {f}")).unwrap_or_default()
        );
    }

    let scheme = PoolingScheme::FiveRegion;
    let t = Instant::now();
    let (models, report) = train_category_models_timed(&train, &bank, scheme, &mine_pyr, seed);
    println!("[{:7.1?}] trained {} models", t.elapsed(), models.len());
    for r in &report.per_category {
        println!(
            "    cat {}: pos {} neg {} hard+{} regr {} ({})",
            r.category,
            r.positives,
            r.negatives,
            r.hard_negatives_added,
            r.regression_pairs,
            if r.regressor_fitted { "fitted" } else { "none" }
        );
    }

    let t = Instant::now();
    let (dets, drep) = detect_dataset(
        &test,
        &bank,
        scheme,
        &models,
        &detect_pyr,
        &DetectConfig::default(),
        None,
    )
    .unwrap();
    println!(
        "[{:7.1?}] detect: {} detections over {} images ({} skipped proposals)",
        t.elapsed(),
        drep.detections,
        drep.images,
        drep.skipped_proposals
    );

    for style in [ApStyle::ElevenPoint, ApStyle::Continuous] {
        let protocol = Protocol { iou_thresh: 0.5, style };
        let rep = evaluate(&dets, &test.images, &test.categories, &protocol).unwrap();
        println!("--- {style:?} ---\n{}", rep.render_table());

        // Regressor ablation: score the same detections with refined
        // boxes stripped.
        let stripped: Vec<_> = dets
            .iter()
            .map(|(id, d)| {
                let mut d = d.clone();
                d.refined = None;
                (id.clone(), d)
            })
            .collect();
        let rep2 = evaluate(&stripped, &test.images, &test.categories, &protocol).unwrap();
        println!(
            "    mAP with regressor {:.4} vs without {:.4} (delta {:+.4})",
            rep.map_score,
            rep2.map_score,
            rep.map_score - rep2.map_score
        );
    }
    println!("total {:?}", t0.elapsed());
}

fn train_category_models_timed(
    dataset: &Dataset,
    bank: &mldetect_core::ElementBank<f64>,
    scheme: PoolingScheme,
    pyramid: &PyramidConfig,
    seed: u64,
) -> (
    Vec<mldetect_core::detector::CategoryModel<f64>>,
    mldetect_core::detector::TrainReport,
) {
    mldetect_core::detector::train_category_models(
        dataset,
        bank,
        scheme,
        pyramid,
        &TrainConfig { seed, ..TrainConfig::default() },
    )
    .unwrap()
}

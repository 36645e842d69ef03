//! `mldetect` — object detection with mined mid-level elements.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mldetect_core::dataset::Split;
use mldetect_core::eval::ApStyle;
use mldetect_core::featurize::PoolingScheme;

use mldetect::commands;

#[derive(Parser)]
#[command(
    name = "mldetect",
    version,
    about = "Object detection with mined mid-level elements",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the built-in synthetic shapes corpus.
    MakeSynthetic {
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        train_images: usize,
        #[arg(long, default_value_t = 100)]
        test_images: usize,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 256)]
        height: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Mine an element bank from the training split.
    Mine {
        #[arg(long)]
        manifest: PathBuf,
        /// Bank output path.
        #[arg(long)]
        out: PathBuf,
        /// Discriminative elements per category.
        #[arg(long, default_value_t = 50)]
        elements: usize,
        /// Localization elements per category.
        #[arg(long, default_value_t = 50)]
        localization: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        scales_per_octave: u32,
        /// Also mine from mirrored positives.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        mine_flips: bool,
    },

    /// Train per-category SVMs and box regressors over a bank.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Models output path.
        #[arg(long)]
        out: PathBuf,
        /// Pooling regions: five or seven.
        #[arg(long, default_value = "five")]
        scheme: PoolingScheme,
        #[arg(long, default_value_t = 4)]
        scales_per_octave: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Run trained models over a split and write detections.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Detections output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 8)]
        scales_per_octave: u32,
        /// NMS overlap threshold.
        #[arg(long, default_value_t = 0.3)]
        nms: f64,
    },

    /// Score a detections file against ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Matching IoU threshold.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// AP style: 11point or continuous.
        #[arg(long, default_value = "11point")]
        style: ApStyle,
        /// Verify the detections' recorded bank digest against this file.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Verify the detections' recorded model digest against this file.
        #[arg(long)]
        models: Option<PathBuf>,
    },

    /// Render per-element average images and weight sheets.
    VisualizeElements {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Output directory for the rendered images.
        #[arg(long)]
        out: PathBuf,
        /// With models, also write per-category SVM-weight sheets.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Firings averaged per element.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value_t = 4)]
        scales_per_octave: u32,
    },

    /// Paste element averages back onto one image's detections.
    Reconstruct {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Directory written by visualize-elements.
        #[arg(long)]
        averages: PathBuf,
        /// Composite output path.
        #[arg(long)]
        out: PathBuf,
        /// Contributing elements pasted per detection.
        #[arg(long, default_value_t = 20)]
        top_elements: usize,
        #[arg(long, default_value_t = 8)]
        scales_per_octave: u32,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?} (expected train or test)")),
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    match cli.cmd {
        Cmd::MakeSynthetic {
            out,
            train_images,
            test_images,
            width,
            height,
            seed,
        } => commands::cmd_make_synthetic(&out, train_images, test_images, width, height, seed),
        Cmd::Mine {
            manifest,
            out,
            elements,
            localization,
            seed,
            scales_per_octave,
            mine_flips,
        } => commands::cmd_mine(
            &manifest,
            &out,
            elements,
            localization,
            seed,
            scales_per_octave,
            mine_flips,
        ),
        Cmd::Train {
            manifest,
            bank,
            out,
            scheme,
            scales_per_octave,
            seed,
        } => commands::cmd_train(&manifest, &bank, &out, scheme, scales_per_octave, seed),
        Cmd::Detect {
            manifest,
            bank,
            models,
            out,
            split,
            scales_per_octave,
            nms,
        } => commands::cmd_detect(&manifest, &bank, &models, &out, split, scales_per_octave, nms),
        Cmd::Eval {
            manifest,
            detections,
            split,
            iou,
            style,
            bank,
            models,
        } => commands::cmd_eval(
            &manifest,
            &detections,
            split,
            iou,
            style,
            bank.as_deref(),
            models.as_deref(),
        ),
        Cmd::VisualizeElements {
            manifest,
            bank,
            out,
            models,
            top,
            scales_per_octave,
        } => commands::cmd_visualize_elements(
            &manifest,
            &bank,
            &out,
            models.as_deref(),
            top,
            scales_per_octave,
        ),
        Cmd::Reconstruct {
            manifest,
            image_id,
            detections,
            bank,
            models,
            averages,
            out,
            top_elements,
            scales_per_octave,
        } => commands::cmd_reconstruct(
            &manifest,
            &image_id,
            &detections,
            &bank,
            &models,
            &averages,
            &out,
            top_elements,
            scales_per_octave,
        ),
    }
}

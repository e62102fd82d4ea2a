//! Synthetic corpus -> pretraining -> linear probe, next to a random-init
//! baseline. Usage: `pipeline [config.toml] [workdir] [key=value ...]`.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::Device;
use cmid::config::load_config;
use cmid::dataio::{make_synthetic, scan_folder, SyntheticSpec, LABELS_FILE};
use cmid::evalharness::{extract_with_model, linear_probe, knn_eval, mean_feature_std, ProbeSettings};
use cmid::model::ModelState;
use cmid::trainer::{fit, load_model, FitOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = args.first().map(PathBuf::from);
    let work = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cmid-pipeline"));
    let overrides: Vec<(String, String)> = args
        .iter()
        .skip(2)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let cfg = load_config(config.as_deref(), &overrides)?;

    let start = Instant::now();
    let data = work.join("data");
    // An existing corpus in `workdir/data` is reused as is.
    let manifest = if data.join(LABELS_FILE).exists() {
        scan_folder(&data)?
    } else {
        make_synthetic(&SyntheticSpec::default(), &data)?
    };
    let (train, test) = manifest.split(500, 0);
    println!("corpus: {} train, {} test ({:.1}s)", train.len(), test.len(), start.elapsed().as_secs_f64());

    let outcome = fit(
        &cfg,
        &train,
        &FitOptions {
            out_dir: work.join("run"),
            progress_every: 10,
            ..FitOptions::default()
        },
    )?;
    println!("pretrain done ({:.1}s)", start.elapsed().as_secs_f64());

    let (cfg_trained, trained) = load_model(&outcome.checkpoint, &Device::Cpu)?;
    let random = ModelState::new(&cfg, &Device::Cpu)?;
    for (name, model) in [("trained", &trained), ("random", &random)] {
        let ftr = extract_with_model(model, &cfg_trained, &train, 64)?;
        let fte = extract_with_model(model, &cfg_trained, &test, 64)?;
        let lin = linear_probe(&ftr, &fte, ProbeSettings::default())?;
        let knn = knn_eval(&ftr, &fte, 20)?;
        println!(
            "{name}: {} | {} | feature std {:.4}",
            lin.summary(),
            knn.summary(),
            mean_feature_std(&fte.select(&(0..256.min(fte.len())).collect::<Vec<_>>()))
        );
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

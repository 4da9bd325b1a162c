mod manifest;
mod selftest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hiernas::analytics::{build_final_plan, model_stats, AsppVariant, PlanOptions};
use hiernas::decoder::{decode, sha256_hex};
use hiernas::relaxation::ArchSnapshot;
use hiernas::search_space::{count_cell_genotypes, count_paths, GenotypeFile, StartConvention};
use hiernas::segsearch::{
    gen_toy_dataset, majority_baseline_miou, retrain_decoded, run_search, split_train, Dataset,
    RetrainConfig, SearchConfig, ToyDatasetSpec,
};
use manifest::{sidecar, RunManifest};

#[derive(Parser)]
#[command(
    name = "hiernas",
    version,
    about = "Hierarchical architecture search for dense prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Both,
    First4,
    First4or8,
}

#[derive(Subcommand)]
enum Command {
    /// Count network-level paths through the trellis.
    CountPaths {
        #[arg(long)]
        layers: usize,
        #[arg(long, value_enum, default_value = "both")]
        convention: Convention,
    },
    /// Count cell genotypes.
    CountCells {
        #[arg(long)]
        blocks: usize,
        #[arg(long, default_value_t = 8)]
        ops: usize,
    },
    /// Generate a synthetic segmentation dataset.
    GenData {
        /// `key = value` dataset spec; defaults are used for absent keys.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the bi-level architecture search.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode an α/β snapshot into a genotype file.
    Decode {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a decoded architecture from scratch and report validation mIoU.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` training settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter and multiply-add counts of the final model.
    Analyze {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        filter_multiplier: usize,
        /// Input size as HxW, e.g. 512x1024.
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 19)]
        num_classes: usize,
        #[arg(long)]
        five_branch_aspp: bool,
        #[arg(long)]
        decoder_stub: bool,
        /// Write the stats as JSON here; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites; nonzero exit on any failure.
    Selftest,
}

/// Machine-readable error code and process exit status.
pub fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    use hiernas::Error as E;
    if e.downcast_ref::<selftest::SelftestFailed>().is_some() {
        return ("selftest", 1);
    }
    match e.downcast_ref::<E>() {
        Some(E::InvalidArgument(_)) => ("invalid-argument", 2),
        Some(E::Validation(_)) => ("validation", 3),
        Some(E::Json(_)) => ("parse", 3),
        Some(E::Io(_)) => ("io", 3),
        Some(E::Numeric(_)) => ("numeric", 4),
        Some(E::Divergence { .. }) => ("divergence", 4),
        Some(E::Shape { .. }) => ("shape", 1),
        Some(E::ResourceLimit(_)) => ("resource-limit", 1),
        Some(E::Internal(_)) => ("internal", 1),
        None => match e.downcast_ref::<std::io::Error>() {
            Some(_) => ("io", 3),
            None => ("error", 1),
        },
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(hiernas::Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(hiernas::Error::from)?;
    }
    std::fs::write(path, text)
        .map_err(hiernas::Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || hiernas::Error::InvalidArgument(format!("input size `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn load_genotype(path: &Path) -> Result<GenotypeFile> {
    let g = GenotypeFile::from_json(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    g.validate()
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(g)
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::CountPaths { layers, convention } => {
            let first4 = || count_paths(layers, StartConvention::FirstLayer4);
            let both = || count_paths(layers, StartConvention::FirstLayer4Or8);
            match convention {
                Convention::First4 => println!("{}", first4()?),
                Convention::First4or8 => println!("{}", both()?),
                Convention::Both => {
                    println!("first4 {}", first4()?);
                    println!("first4or8 {}", both()?);
                }
            }
        }
        Command::CountCells { blocks, ops } => println!("{}", count_cell_genotypes(blocks, ops)?),
        Command::GenData { spec, out } => {
            let text = read(&spec)?;
            let spec = ToyDatasetSpec::from_kv(&text)?;
            let data = gen_toy_dataset(&spec)?;
            let files = data.save(&out, Some(&spec))?;
            let mut m = RunManifest::new("gen-data", &spec.to_kv(), Some(spec.seed));
            for f in &files {
                m.add(f)?;
            }
            m.finish(start.elapsed(), out.join("manifest.json"))?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
        Command::Search { config, data, out } => {
            let config = SearchConfig::from_kv(&read(&config)?)?;
            let data = Dataset::load(&data)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let outcome = run_search(&config, &data)?;
            std::fs::create_dir_all(&out).map_err(hiernas::Error::from)?;
            let files = [
                (out.join("trace.csv"), outcome.trace.to_csv()),
                (
                    out.join("trace.json"),
                    serde_json::to_string_pretty(&outcome.trace)? + "\n",
                ),
                (out.join("snapshot.json"), outcome.snapshot.to_json()?),
                (
                    out.join("counters.json"),
                    serde_json::to_string_pretty(&outcome.counters)? + "\n",
                ),
            ];
            let mut m = RunManifest::new("search", &config.to_kv(), Some(config.seed));
            for (path, text) in &files {
                write(path, text)?;
                m.add(path)?;
            }
            let ckpt = out.join("checkpoint.bin");
            outcome.store.save(&ckpt)?;
            m.add(&ckpt)?;
            m.finish(start.elapsed(), out.join("manifest.json"))?;
            if let Some(last) = outcome.trace.records.last() {
                println!(
                    "epoch {} miou {} pixel_accuracy {}",
                    last.epoch, last.miou, last.pixel_accuracy
                );
            }
        }
        Command::Decode { snapshot, out } => {
            let text = read(&snapshot)?;
            let snap = ArchSnapshot::from_json(&text)
                .with_context(|| format!("parsing {}", snapshot.display()))?;
            let decoded = decode(&snap)?;
            write(&out, &(decoded.genotype_file().to_json()? + "\n"))?;
            let mut m = RunManifest::new("decode", &decoded.provenance.settings, None);
            m.add(&snapshot)?;
            m.add(&out)?;
            m.finish(start.elapsed(), sidecar(&out))?;
            println!(
                "snapshot {} decoded to {}",
                decoded.provenance.snapshot_sha256,
                out.display()
            );
        }
        Command::Retrain {
            genotype,
            data,
            out,
            config,
        } => {
            let cfg_text = match &config {
                Some(p) => read(p)?,
                None => String::new(),
            };
            let cfg = RetrainConfig::from_kv(&cfg_text)?;
            let g = load_genotype(&genotype)?;
            let data = Dataset::load(&data)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let (train, val) = split_train(&data, cfg.seed)?;
            let (store, report) = retrain_decoded(&g.cell(), &g.path, &train, &val, &cfg)?;
            let baseline = majority_baseline_miou(&train, &val)?;
            let json = serde_json::json!({
                "genotype_sha256": sha256_hex(read(&genotype)?.as_bytes()),
                "miou": report.miou,
                "pixel_accuracy": report.pixel_accuracy,
                "majority_baseline_miou": baseline,
                "final_train_loss": report.final_train_loss,
                "epoch_losses": report.epoch_losses,
                "config": cfg,
            });
            std::fs::create_dir_all(&out).map_err(hiernas::Error::from)?;
            let report_path = out.join("report.json");
            write(&report_path, &(serde_json::to_string_pretty(&json)? + "\n"))?;
            let ckpt = out.join("checkpoint.bin");
            store.save(&ckpt)?;
            let mut m = RunManifest::new("retrain", &serde_json::to_string(&cfg)?, Some(cfg.seed));
            m.add(&report_path)?;
            m.add(&ckpt)?;
            m.finish(start.elapsed(), out.join("manifest.json"))?;
            println!("miou {} (majority baseline {baseline})", report.miou);
        }
        Command::Analyze {
            genotype,
            filter_multiplier,
            input,
            num_classes,
            five_branch_aspp,
            decoder_stub,
            out,
        } => {
            let (h, w) = parse_size(&input)?;
            let g = load_genotype(&genotype)?;
            let options = PlanOptions {
                aspp: if five_branch_aspp {
                    AsppVariant::FiveBranch
                } else {
                    AsppVariant::ThreeBranch
                },
                decoder_stub,
                ..PlanOptions::final_model()
            };
            let plan =
                build_final_plan(&g.cell(), &g.path, filter_multiplier, num_classes, options)?;
            let stats = model_stats(&plan, h, w)?;
            print!("{}", stats.to_table());
            if let Some(out) = out {
                write(&out, &stats.to_json()?)?;
                let settings = format!(
                    "F={filter_multiplier} input={h}x{w} classes={num_classes} options={options:?}"
                );
                let mut m = RunManifest::new("analyze", &settings, None);
                m.add(&genotype)?;
                m.add(&out)?;
                m.finish(start.elapsed(), sidecar(&out))?;
            }
        }
        Command::Selftest => selftest::run()?,
    }
    Ok(())
}

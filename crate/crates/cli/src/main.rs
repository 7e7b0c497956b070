use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use relubab_cli::bench::{cactus_csv, records_csv, run_bench, summary_csv, BenchConfig};
use relubab_cli::genprops::{generate_properties, load_images, GenPropsConfig, GenPropsLog, GENPROPS_LOG_SCHEMA};
use relubab_cli::pipeline::{cmd_gendata, cmd_train};
use relubab_cli::props::{load_properties_dir, load_property, save_property, PropertyFile, PROPERTY_SUFFIX};
use relubab_cli::runner::{run_property, Verdict};
use relubab_core::{load_checkpoint, load_network, BabConfig, Checkpoint, GenConfig, TrainConfig};
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "relubab", version, about = "Branch-and-bound ReLU network verifier with a learned branching policy")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build robustness properties from a model and labeled points by
    /// bisecting the perturbation radius.
    Genprops {
        /// Model JSON file.
        #[arg(long)]
        model: PathBuf,
        /// Labeled point set JSON file.
        #[arg(long)]
        images: PathBuf,
        /// Output directory for property files and the search log.
        #[arg(long)]
        out: PathBuf,
        /// Properties to emit.
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Largest radius considered.
        #[arg(long, default_value_t = 0.5)]
        eps_max: f64,
        /// Stop once the radius bracket is at most this wide.
        #[arg(long, default_value_t = 1e-3)]
        resolution: f64,
        /// Per-probe timeout in seconds; 0 disables it.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
        /// Per-probe branch budget; deterministic alternative to --timeout.
        #[arg(long)]
        max_branches: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip clamping the box to the unit hypercube.
        #[arg(long)]
        no_clamp: bool,
    },
    /// Generate strong-branching training samples from properties.
    Gendata {
        /// Directory of property files.
        #[arg(long)]
        props: PathBuf,
        /// Dataset file to write (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
        /// Samples per property.
        #[arg(long, visible_alias = "B", default_value_t = 20)]
        samples_per_property: usize,
        /// Max cheap-heuristic steps between labeled samples.
        #[arg(long, visible_alias = "q", default_value_t = 10)]
        max_cheap_steps: usize,
        /// Fraction of properties explored with a complete labeled run.
        #[arg(long, default_value_t = 0.25)]
        full_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-property timeout in seconds; 0 disables it.
        #[arg(long, default_value_t = 120.0)]
        timeout: f64,
        /// Worker threads; 0 uses the default pool.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train the branching scorer on a dataset.
    Train {
        /// Dataset file from gendata.
        #[arg(long)]
        data: PathBuf,
        /// Directory of the property files the dataset came from.
        #[arg(long)]
        props: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Accuracy curve CSV; defaults to the checkpoint path with a
        /// .curve.csv suffix.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        embedding: usize,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify one property file and print the verdict as JSON.
    Verify {
        /// Property file.
        #[arg(long)]
        props: PathBuf,
        /// random | sr | strong | gnn
        #[arg(long, default_value = "sr")]
        strategy: String,
        /// Timeout in seconds; 0 disables it.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
        /// Branch budget; deterministic alternative to --timeout.
        #[arg(long)]
        max_branches: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scorer checkpoint, required by --strategy gnn.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the verdict JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable online fine-tuning inside gnn runs.
        #[arg(long)]
        no_online: bool,
    },
    /// Run every (property, method) cell and emit results, cactus and
    /// summary CSVs.
    Bench {
        /// Directory of property files.
        #[arg(long)]
        props: PathBuf,
        /// Comma-separated methods.
        #[arg(long, default_value = "random,sr,gnn")]
        methods: String,
        /// Per-run timeout in seconds; 0 disables it.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
        /// Per-run branch budget; deterministic alternative to --timeout.
        #[arg(long)]
        max_branches: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; 0 uses the default pool.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Scorer checkpoint, required when methods include gnn.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for results.csv, cactus.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
        /// Disable online fine-tuning inside gnn runs.
        #[arg(long)]
        no_online: bool,
    },
}

fn seconds(t: f64) -> Option<Duration> {
    (t > 0.0).then(|| Duration::from_secs_f64(t))
}

fn load_ckpt(path: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
    path.as_ref()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Genprops {
            model,
            images,
            out,
            count,
            eps_max,
            resolution,
            timeout,
            max_branches,
            seed,
            no_clamp,
        } => {
            let net = load_network(&model)?;
            let set = load_images(&images)?;
            let cfg = GenPropsConfig {
                count,
                eps_max,
                resolution,
                timeout: seconds(timeout),
                max_branches,
                clamp: !no_clamp,
                prune_tol: 1e-6,
                seed,
            };
            let model_name = model.display().to_string();
            let (made, skipped) = generate_properties(&net, &model_name, &set.images, &cfg)?;
            std::fs::create_dir_all(&out)?;
            for (prop, _) in &made {
                save_property(&out.join(format!("{}{PROPERTY_SUFFIX}", prop.id)), prop)?;
            }
            let log = GenPropsLog {
                schema: GENPROPS_LOG_SCHEMA.to_string(),
                model: model_name,
                count_requested: count,
                eps_max,
                resolution,
                seed,
                results: made.iter().map(|(_, r)| r.clone()).collect(),
                skipped,
            };
            write_text(
                &out.join("genprops_log.json"),
                &(serde_json::to_string_pretty(&log)? + "\n"),
            )?;
            for r in &log.results {
                println!(
                    "img{:04}: label {} vs {} -> epsilon {:.6} ({} probes)",
                    r.image_index,
                    r.label,
                    r.rival,
                    r.chosen_epsilon,
                    r.trace.len()
                );
            }
            for s in &log.skipped {
                println!("img{:04}: skipped ({})", s.image_index, s.reason);
            }
            println!("wrote {} properties to {}", log.results.len(), out.display());
        }
        Cmd::Gendata {
            props,
            out,
            samples_per_property,
            max_cheap_steps,
            full_fraction,
            seed,
            timeout,
            workers,
        } => {
            let files = load_properties_dir(&props)?;
            let cfg = GenConfig {
                samples_per_property,
                max_cheap_steps,
                full_fraction,
                seed,
                per_property_timeout: seconds(timeout),
                ..GenConfig::default()
            };
            let (count, stats) = cmd_gendata(&files, &out, &cfg, workers)?;
            println!(
                "wrote {count} samples from {} properties to {} \
                 (dropped {} no-signal samples, {} barren properties)",
                files.len(),
                out.display(),
                stats.dropped_no_signal,
                stats.barren_properties.len()
            );
        }
        Cmd::Train {
            data,
            props,
            out,
            curve,
            epochs,
            lr,
            batch_size,
            embedding,
            rounds,
            seed,
        } => {
            let files = load_properties_dir(&props)?;
            let curve = curve.unwrap_or_else(|| {
                let mut name = out.file_stem().unwrap_or_default().to_os_string();
                name.push(".curve.csv");
                out.with_file_name(name)
            });
            let cfg = TrainConfig {
                max_epochs: epochs,
                lr,
                batch_size,
                embedding_size: embedding,
                rounds,
                seed,
                ..TrainConfig::default()
            };
            let (report, _) = cmd_train(&data, &files, &out, &curve, &cfg)?;
            println!(
                "trained on {} samples / {} properties for {} epochs: \
                 best val loss {:.4}, final relative val accuracy {:.3}{}",
                report.samples,
                report.properties,
                report.epochs_run,
                report.best_val_loss,
                report.final_val_acc_rel,
                if report.diverged { " (diverged; best finite kept)" } else { "" }
            );
            println!("checkpoint: {}", out.display());
            println!("curve: {}", curve.display());
        }
        Cmd::Verify {
            props,
            strategy,
            timeout,
            max_branches,
            seed,
            checkpoint,
            out,
            no_online,
        } => {
            let prop: PropertyFile = load_property(&props)?;
            let ckpt = load_ckpt(&checkpoint)?;
            let bab = BabConfig {
                timeout: seconds(timeout),
                prune_tol: 1e-6,
                max_branches,
            };
            let (record, counterexample, visited) =
                run_property(&prop, &strategy, &bab, seed, !no_online, ckpt.as_ref());
            let verdict = Verdict {
                property_id: record.property_id,
                method: record.method,
                status: record.status,
                branches: record.branches,
                visited,
                gnn_usage_ratio: record.gnn_usage_ratio,
                seed,
                workers: 1,
                counterexample,
            };
            let text = serde_json::to_string_pretty(&verdict)? + "\n";
            print!("{text}");
            eprintln!("time: {:.3}s", record.time_s);
            if let Some(path) = out {
                write_text(&path, &text)?;
            }
            if verdict.status == "error" {
                std::process::exit(1);
            }
        }
        Cmd::Bench {
            props,
            methods,
            timeout,
            max_branches,
            seed,
            workers,
            checkpoint,
            out,
            no_online,
        } => {
            let files = load_properties_dir(&props)?;
            let only_props: Vec<PropertyFile> = files.into_iter().map(|(_, p)| p).collect();
            let ckpt = load_ckpt(&checkpoint)?;
            let cfg = BenchConfig {
                methods: methods.split(',').map(|m| m.trim().to_string()).collect(),
                timeout: seconds(timeout),
                max_branches,
                prune_tol: 1e-6,
                seed,
                workers,
                online: !no_online,
            };
            let output = run_bench(&only_props, &cfg, ckpt.as_ref())?;
            std::fs::create_dir_all(&out)?;
            write_text(&out.join("results.csv"), &records_csv(&output.records))?;
            write_text(&out.join("cactus.csv"), &cactus_csv(&output))?;
            let summary = summary_csv(&output);
            write_text(&out.join("summary.csv"), &summary)?;
            print!("{summary}");
            println!(
                "{} records over {} properties -> {}",
                output.records.len(),
                output.properties,
                out.display()
            );
        }
    }
    Ok(())
}

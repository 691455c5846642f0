use clap::{Parser, Subcommand};
use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use hecnn::analyzer::analyze;
use hecnn::backend::BackendKind;
use hecnn::bench::{bench_params, bench_threads, write_csv};
use hecnn::dataset::{load_images, load_labels, random_images};
use hecnn::executor::ThreadPlan;
use hecnn::model::{encrypt_model, load_manifest, load_model, Manifest};
use hecnn::packing::pack_batch;
use hecnn::workflow::{self, parse_backend, security_gate};
use hecnn::{CkksBackend, HeBackend, HeParams, ModelDesc, RefBackend, Result};

#[derive(Parser)]
#[command(name = "hecnn", version, about = "Encrypted CNN inference with encrypted weights")]
struct Cli {
    /// ref (exact simulator) or ckks.
    #[arg(long, global = true, default_value = "ckks")]
    backend: String,
    /// m,L,r, e.g. 2^16,600,35.
    #[arg(long, global = true, default_value = "2^16,600,35")]
    params: String,
    /// Accept parameter sets below 128-bit security.
    #[arg(long, global = true)]
    allow_insecure: bool,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate secret, public and evaluation keys.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Encrypt model weights under a public key.
    EncryptModel {
        #[arg(long)]
        keys: PathBuf,
        /// Model directory (model.json + weights.bin).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack and encrypt a batch of images.
    EncryptInput {
        #[arg(long)]
        keys: PathBuf,
        /// IDX or HECNIMGS image file.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run encrypted inference (evaluation key only).
    Infer {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// F,C,H,J.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Decrypt logits to CSV.
    DecryptOutput {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decrypt logits and print the argmax class per image.
    Predict {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// IDX labels for an accuracy line.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
    /// Static depth, cost and security analysis.
    Analyze {
        #[arg(long, conflicts_with = "mnist")]
        model: Option<PathBuf>,
        /// Analyze the 28x28 MNIST topology (28 filters, 3x3, dense 4732x10).
        #[arg(long)]
        mnist: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time CT-CT add and mult over a sweep of L at fixed m and r.
    BenchParams {
        #[arg(long, value_delimiter = ',', default_value = "200,300,400,500,600")]
        sweep: Vec<u32>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one encrypted inference per thread plan.
    BenchThreads {
        /// Model directory; a random 16x16 model with 4 filters by default.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Plans separated by ';'.
        #[arg(long, default_value = "1,1,1,1;2,2,2,2;4,1,1,4;4,2,5,2")]
        plans: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn desk_model(seed: u64) -> Result<ModelDesc> {
    let m = Manifest::canonical(16, 16, 4, 3, 10, true, false, Default::default());
    ModelDesc::random(&m, seed)
}

fn threads_with<B: HeBackend>(
    params: HeParams,
    model: &ModelDesc,
    images: &hecnn::ImageBatch,
    plans: &[ThreadPlan],
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let b = B::new(params)?;
    let keys = b.keygen()?;
    let em = encrypt_model(&b, &keys.public, model, seed)?;
    let x = pack_batch(&b, &keys.public, images, seed)?;
    let sweep = bench_threads(&b, &keys.eval, &em, &x, plans)?;
    match out {
        Some(p) => write_csv(&sweep.records, File::create(p)?)?,
        None => write_csv(&sweep.records, std::io::stdout())?,
    }
    eprintln!(
        "outputs across {} plans: {}",
        plans.len(),
        if sweep.identical { "bit-identical" } else { "DIFFERENT" }
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let kind = parse_backend(&cli.backend)?;
    let params = || HeParams::parse_triple(&cli.params, cli.seed);
    match cli.cmd {
        Cmd::Keygen { out } => {
            workflow::keygen(kind, params()?, &out, cli.allow_insecure)?;
            eprintln!("keys written to {}", out.display());
        }
        Cmd::EncryptModel { keys, model, out } => {
            let model = load_model(&model)?;
            let n = workflow::encrypt_model_file(&keys, &model, &out, cli.seed)?;
            eprintln!("{n} weight ciphertexts written to {}", out.display());
        }
        Cmd::EncryptInput {
            keys,
            images,
            batch,
            offset,
            out,
        } => {
            let all = load_images(&images)?;
            let take = batch.unwrap_or(all.len().saturating_sub(offset));
            let imgs = hecnn::ImageBatch::new(
                all.rows,
                all.cols,
                all.images.into_iter().skip(offset).take(take).collect(),
            )?;
            workflow::encrypt_input_file(&keys, &imgs, &out, cli.seed)?;
            eprintln!("{} images encrypted to {}", imgs.len(), out.display());
        }
        Cmd::Infer {
            keys,
            model,
            input,
            out,
            plan,
            workers: w,
        } => {
            let w = workers(w);
            let plan = plan.map(|p| ThreadPlan::parse(&p, w)).transpose()?;
            let r = workflow::infer_file(&keys, &model, &input, &out, plan, w)?;
            eprintln!(
                "{}: stage1 {:.2}s, stage2 {:.2}s, total {:.2}s, {:.1} ms per image",
                r.plan,
                r.stage1_s,
                r.stage2_s,
                r.total_s,
                r.amortized_ms()
            );
            for (layer, c) in &r.layer_counts {
                eprintln!("  {layer:<8} {c}");
            }
        }
        Cmd::DecryptOutput { keys, input, out } => {
            let logits = workflow::decrypt_output_file(&keys, &input)?;
            write_or_print(&out, &workflow::logits_csv(&logits))?;
        }
        Cmd::Predict {
            keys,
            input,
            labels,
            offset,
        } => {
            let pred = workflow::predict_file(&keys, &input)?;
            let labels = labels.map(|p| load_labels(&p)).transpose()?;
            println!("image,prediction{}", if labels.is_some() { ",label" } else { "" });
            let mut correct = 0;
            for (i, p) in pred.iter().enumerate() {
                match labels.as_ref().and_then(|l| l.get(offset + i)) {
                    Some(&l) => {
                        correct += usize::from(*p == l as usize);
                        println!("{i},{p},{l}");
                    }
                    None => println!("{i},{p}"),
                }
            }
            if labels.is_some() {
                eprintln!("accuracy {correct}/{}", pred.len());
            }
        }
        Cmd::Analyze { model, mnist, csv } => {
            let manifest = match (model, mnist) {
                (Some(p), _) => load_manifest(&p)?,
                (None, true) => Manifest::mnist_cnn(),
                (None, false) => {
                    return Err(hecnn::Error::InvalidParams("pass --model DIR or --mnist".into()))
                }
            };
            let report = analyze(&manifest, &params()?)?;
            println!("{report}");
            if let Some(p) = csv {
                fs::write(p, report.to_csv())?;
            }
        }
        Cmd::BenchParams { sweep, trials, out } => {
            let p = params()?;
            for &l in &sweep {
                security_gate(kind, &hecnn::derive_params(p.m, l, p.precision_bits, 0)?, cli.allow_insecure)?;
            }
            let records = match kind {
                BackendKind::Ckks => bench_params::<CkksBackend>(p.m, &sweep, p.precision_bits, trials, cli.seed)?,
                BackendKind::Reference => bench_params::<RefBackend>(p.m, &sweep, p.precision_bits, trials, cli.seed)?,
            };
            match out {
                Some(p) => write_csv(&records, File::create(p)?)?,
                None => write_csv(&records, std::io::stdout())?,
            }
        }
        Cmd::BenchThreads {
            model,
            images,
            batch,
            plans,
            workers: w,
            out,
        } => {
            let p = params()?;
            security_gate(kind, &p, cli.allow_insecure)?;
            let model = match model {
                Some(dir) => load_model(&dir)?,
                None => desk_model(cli.seed)?,
            };
            let (rows, cols) = (model.input_rows, model.input_cols);
            let images = match images {
                Some(path) => load_images(&path)?.take(batch),
                None => random_images(rows, cols, batch, cli.seed),
            };
            let w = workers(w);
            let plans = plans
                .split(';')
                .map(|s| ThreadPlan::parse(s, w))
                .collect::<Result<Vec<_>>>()?;
            match kind {
                BackendKind::Ckks => threads_with::<CkksBackend>(p, &model, &images, &plans, cli.seed, &out)?,
                BackendKind::Reference => threads_with::<RefBackend>(p, &model, &images, &plans, cli.seed, &out)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

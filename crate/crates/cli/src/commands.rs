use std::path::{Path, PathBuf};

use layerdiff_core::checkpoint::Checkpoint;
use layerdiff_core::dit::{DitModel, DitStepLog, DitTrainer};
use layerdiff_core::pipeline::{
    checkpoint_hash, decompose, design_images, encode_design, generate, sha256_hex, train_vae_stage, write_report,
    ReportFile, RunConfig,
};
use layerdiff_core::prompt::{expand_prompt, PromptBundle, TemplateExpander, Vocab};
use layerdiff_core::rgba::{composite, encode_image, read_image, write_image, ImageFormat, RgbaImage};
use layerdiff_core::synth::{gen_corpus, read_corpus, write_corpus, CorpusEntry};
use layerdiff_core::vae::{evaluate_vae, VaeEval, VaeModel, VaeStepLog};
use layerdiff_core::{Error, Result};
use serde::Serialize;

use crate::{Cli, Command, ModelArgs, PromptArgs};

/// Fields every report starts with.
#[derive(Serialize)]
struct Header<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
}

fn header<'a>(command: &'a str, config: &RunConfig, seed: u64) -> Header<'a> {
    Header {
        command,
        seed,
        config_hash: config.hash(),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => RunConfig::load(path),
        None => {
            let c = RunConfig::preset(&cli.preset)?;
            if matches!(cli.command, Command::InitConfig { .. }) {
                return Ok(c);
            }
            c.validate()?;
            Ok(c)
        }
    }
}

fn announce(path: &Path, report: &ReportFile) {
    println!("report {} sha256 {}", path.display(), report.hash);
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    ck.save(path)?;
    Ok(checkpoint_hash(ck))
}

fn resolve_prompt(args: &PromptArgs, layers: usize, fallback: Option<&str>) -> Result<PromptBundle> {
    let text = match (&args.prompt, &args.prompt_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?,
        (None, None) => match fallback {
            Some(f) => f.to_string(),
            None => return Err(Error::Config("a prompt is required (--prompt or --prompt-file)".into())),
        },
    };
    let bundle = if text.trim_start().starts_with("Scene Description:") {
        PromptBundle::parse(&text)?
    } else {
        expand_prompt(&text, layers, &TemplateExpander)?
    };
    if bundle.n_layers() != layers {
        return Err(Error::Data(format!(
            "prompt has {} layer captions but --layers is {layers}",
            bundle.n_layers()
        )));
    }
    Ok(bundle)
}

fn load_models(config: &RunConfig, args: &ModelArgs) -> Result<(VaeModel, DitModel, usize)> {
    let vae = VaeModel::from_checkpoint(&Checkpoint::load(args.vae.as_ref().unwrap_or(&config.paths.vae))?)?;
    let dit = DitModel::from_checkpoint(&Checkpoint::load(args.dit.as_ref().unwrap_or(&config.paths.dit))?)?;
    if dit.dit.config.latent_dim != vae.vae.config.d {
        return Err(Error::Data(format!(
            "transformer expects {} latent channels, autoencoder has {}",
            dit.dit.config.latent_dim, vae.vae.config.d
        )));
    }
    let steps = args.steps.unwrap_or(config.dit.steps);
    Ok((vae, dit, steps))
}

#[derive(Serialize)]
struct ImageRecord {
    file: String,
    sha256: String,
}

fn emit(image: &RgbaImage, dir: &Path, stem: &str, format: ImageFormat) -> Result<ImageRecord> {
    let file = format!("{stem}.{}", format.extension());
    write_image(image, dir.join(&file))?;
    Ok(ImageRecord {
        sha256: sha256_hex(&encode_image(image, format)?),
        file,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn corpus(config: &RunConfig, data: Option<&PathBuf>) -> Result<Vec<CorpusEntry>> {
    read_corpus(data.unwrap_or(&config.paths.data))
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let every = cli.log_every;
    match &cli.command {
        Command::InitConfig { out } => {
            std::fs::write(out, config.to_json() + "\n").map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::GenData { out, format } => gen_data(&config, out.as_ref(), (*format).into()),
        Command::TrainVae { data, out } => train_vae_cmd(&config, data.as_ref(), out.as_ref(), every),
        Command::TrainDit {
            data,
            vae,
            out,
            resume,
        } => train_dit_cmd(&config, data.as_ref(), vae.as_ref(), out.as_ref(), *resume, every),
        Command::Generate {
            prompt,
            layers,
            width,
            height,
            seed,
            models,
            out,
            format,
        } => {
            let bundle = resolve_prompt(prompt, *layers, None)?;
            let (vae, dit, steps) = load_models(&config, models)?;
            let seed = seed.unwrap_or(config.seed);
            let g = generate(&vae, &dit, &bundle, *width, *height, steps, seed)?;
            create_dir(out)?;
            let format = (*format).into();
            let mut images = vec![emit(&g.composite, out, "composite", format)?];
            for (i, l) in g.layers.iter().enumerate() {
                images.push(emit(l, out, &format!("layer{}", i + 1), format)?);
            }
            #[derive(Serialize)]
            struct Report<'a> {
                #[serde(flatten)]
                header: Header<'a>,
                prompt: &'a PromptBundle,
                layers: usize,
                width: usize,
                height: usize,
                steps: usize,
                images: Vec<ImageRecord>,
            }
            let path = out.join("report.json");
            let r = write_report(
                &Report {
                    header: header("generate", &config, seed),
                    prompt: &bundle,
                    layers: *layers,
                    width: *width,
                    height: *height,
                    steps,
                    images,
                },
                &path,
            )?;
            announce(&path, &r);
            Ok(())
        }
        Command::Decompose {
            input,
            layers,
            prompt,
            seed,
            models,
            out,
            format,
        } => {
            let bundle = resolve_prompt(prompt, *layers, Some("a layered design"))?;
            let image = read_image(input)?;
            let (vae, dit, steps) = load_models(&config, models)?;
            let seed = seed.unwrap_or(config.seed);
            let d = decompose(&vae, &dit, &image, &bundle, steps, seed)?;
            create_dir(out)?;
            let format = (*format).into();
            let mut images = Vec::new();
            for (i, l) in d.layers.iter().enumerate() {
                images.push(emit(l, out, &format!("layer{}", i + 1), format)?);
            }
            images.push(emit(&d.recomposed, out, "recomposed", format)?);
            #[derive(Serialize)]
            struct Report<'a> {
                #[serde(flatten)]
                header: Header<'a>,
                input_sha256: String,
                prompt: &'a PromptBundle,
                layers: usize,
                steps: usize,
                psnr_db: f64,
                alpha_weighted_rgb_l1: f64,
                images: Vec<ImageRecord>,
            }
            let path = out.join("report.json");
            let r = write_report(
                &Report {
                    header: header("decompose", &config, seed),
                    input_sha256: sha256_hex(&encode_image(&image, ImageFormat::Lrga)?),
                    prompt: &bundle,
                    layers: *layers,
                    steps,
                    psnr_db: d.psnr_db,
                    alpha_weighted_rgb_l1: d.rgb_l1,
                    images,
                },
                &path,
            )?;
            println!("psnr {:.3} dB, alpha-weighted RGB L1 {:.3}", d.psnr_db, d.rgb_l1);
            announce(&path, &r);
            Ok(())
        }
        Command::Composite {
            dir,
            prefix,
            out,
            format,
        } => composite_cmd(dir, prefix, out.as_ref(), (*format).into()),
        Command::Eval {
            data,
            models,
            designs,
            seed,
            out,
        } => eval_cmd(&config, data.as_ref(), models, *designs, *seed, out.as_ref()),
    }
}

fn gen_data(config: &RunConfig, out: Option<&PathBuf>, format: ImageFormat) -> Result<()> {
    let dir = out.unwrap_or(&config.paths.data);
    let corpus = gen_corpus(&config.corpus_config())?;
    let manifest_sha256 = write_corpus(&corpus, dir, format)?;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        count: usize,
        manifest_sha256: String,
        buckets: &'a std::collections::BTreeMap<String, usize>,
    }
    let path = config.paths.reports.join("gen-data.json");
    let r = write_report(
        &Report {
            header: header("gen-data", config, config.seed),
            count: corpus.samples.len(),
            manifest_sha256,
            buckets: &corpus.report.counts,
        },
        &path,
    )?;
    println!("wrote {} designs to {}", corpus.samples.len(), dir.display());
    announce(&path, &r);
    Ok(())
}

fn train_vae_cmd(config: &RunConfig, data: Option<&PathBuf>, out: Option<&PathBuf>, every: usize) -> Result<()> {
    let entries = corpus(config, data)?;
    let designs: Vec<_> = entries.into_iter().map(|e| e.design).collect();
    let (model, log) = train_vae_stage(config, &designs, |l| {
        if every > 0 && (l.step % every == 0 || l.step + 1 == config.vae.train_steps) {
            eprintln!("vae step {:>6}  rgb {:.5}  alpha {:.5}  lr {:.2e}", l.step, l.rgb, l.alpha, l.lr);
        }
    })?;
    let mut images = design_images(&designs);
    if let Some(n) = config.vae.images {
        images.truncate(n);
    }
    let eval = evaluate_vae(&model, &images)?;
    let path = out.unwrap_or(&config.paths.vae);
    let checkpoint_sha256 = save_checkpoint(&model.to_checkpoint()?, path)?;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        images: usize,
        steps: usize,
        final_step: Option<&'a VaeStepLog>,
        train_eval: VaeEval,
        latent_std: &'a [f32],
        checkpoint_sha256: String,
    }
    let rpath = config.paths.reports.join("train-vae.json");
    let r = write_report(
        &Report {
            header: header("train-vae", config, config.seed),
            images: images.len(),
            steps: log.len(),
            final_step: log.last(),
            train_eval: eval,
            latent_std: &model.latent_std,
            checkpoint_sha256,
        },
        &rpath,
    )?;
    println!(
        "autoencoder: psnr {:.2} dB, alpha-weighted RGB L1 {:.3}, alpha error {:.4}",
        eval.psnr_db, eval.rgb_l1, eval.alpha_l1
    );
    announce(&rpath, &r);
    Ok(())
}

fn train_dit_cmd(
    config: &RunConfig,
    data: Option<&PathBuf>,
    vae: Option<&PathBuf>,
    out: Option<&PathBuf>,
    resume: bool,
    every: usize,
) -> Result<()> {
    let entries = corpus(config, data)?;
    let vae = VaeModel::from_checkpoint(&Checkpoint::load(vae.unwrap_or(&config.paths.vae))?)?;
    let vocab = Vocab::grammar();
    let samples = entries
        .iter()
        .map(|e| encode_design(&vae, &e.design, &e.record.bundle, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let path = out.unwrap_or(&config.paths.dit);
    let mut trainer = if resume && path.exists() {
        DitTrainer::from_checkpoint(&Checkpoint::load(path)?, config.dit_settings())?
    } else {
        let model = DitModel::new(config.dit_config(vocab.len()), config.seed)?;
        if model.dit.config.latent_dim != vae.vae.config.d {
            return Err(Error::Config("dit latent width differs from vae.d".into()));
        }
        DitTrainer::new(model, config.dit_settings())
    };
    let start = trainer.step();
    let mut window = 0.0;
    let log = trainer.run(&samples, |l: &DitStepLog| {
        window += l.loss;
        if every > 0 && (l.step + 1) % every == 0 {
            eprintln!("dit step {:>6}  loss {:.5}  lr {:.2e}", l.step, window / every as f64, l.lr);
            window = 0.0;
        }
    })?;
    let checkpoint_sha256 = save_checkpoint(&trainer.to_checkpoint()?, path)?;
    let tail = &log[log.len().saturating_sub(100)..];
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        designs: usize,
        start_step: usize,
        end_step: usize,
        first_loss: Option<f64>,
        mean_loss_last_100: Option<f64>,
        checkpoint_sha256: String,
    }
    let rpath = config.paths.reports.join("train-dit.json");
    let r = write_report(
        &Report {
            header: header("train-dit", config, config.seed),
            designs: samples.len(),
            start_step: start,
            end_step: trainer.step(),
            first_loss: log.first().map(|l| l.loss),
            mean_loss_last_100: (!tail.is_empty()).then(|| tail.iter().map(|l| l.loss).sum::<f64>() / tail.len() as f64),
            checkpoint_sha256,
        },
        &rpath,
    )?;
    announce(&rpath, &r);
    Ok(())
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "lrga"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

fn composite_cmd(dir: &Path, prefix: &str, out: Option<&PathBuf>, format: ImageFormat) -> Result<()> {
    let mut layers = Vec::new();
    while let Some(p) = find_image(dir, &format!("{prefix}layer{}", layers.len() + 1)) {
        layers.push(read_image(&p)?);
    }
    if layers.is_empty() {
        return Err(Error::Data(format!("no {prefix}layer1.png or .lrga in {}", dir.display())));
    }
    // what gets written, so the comparison matches the file on disk
    let blended = composite(&layers)?.quantized();
    let target = out
        .cloned()
        .unwrap_or_else(|| dir.join(format!("{prefix}recomposed.{}", format.extension())));
    write_image(&blended, &target)?;
    let reference = match find_image(dir, &format!("{prefix}composite")) {
        Some(p) => {
            let r = read_image(&p)?;
            if r.dims() != blended.dims() {
                return Err(Error::Data(format!("{} has a different size than the layers", p.display())));
            }
            let diff = r.data().iter().zip(blended.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            Some((p, diff))
        }
        None => None,
    };
    #[derive(Serialize)]
    struct Report {
        command: &'static str,
        layers: usize,
        output: String,
        output_sha256: String,
        reference: Option<String>,
        max_abs_diff: Option<f32>,
    }
    let rpath = target.with_extension("json");
    let r = write_report(
        &Report {
            command: "composite",
            layers: layers.len(),
            output: target.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            output_sha256: sha256_hex(&encode_image(&blended, ImageFormat::from_path(&target))?),
            reference: reference
                .as_ref()
                .and_then(|(p, _)| p.file_name())
                .map(|f| f.to_string_lossy().into_owned()),
            max_abs_diff: reference.as_ref().map(|(_, d)| *d),
        },
        &rpath,
    )?;
    println!("blended {} layers into {}", layers.len(), target.display());
    if let Some((p, d)) = &reference {
        println!("max |difference| against {}: {d:.3e}", p.display());
    }
    announce(&rpath, &r);
    Ok(())
}

fn eval_cmd(
    config: &RunConfig,
    data: Option<&PathBuf>,
    models: &ModelArgs,
    designs: usize,
    seed: Option<u64>,
    out: Option<&PathBuf>,
) -> Result<()> {
    let entries = corpus(config, data)?;
    let (vae, dit, steps) = load_models(config, models)?;
    let seed = seed.unwrap_or(config.seed);
    let all: Vec<_> = entries.iter().map(|e| e.design.clone()).collect();
    let reconstruction = evaluate_vae(&vae, &design_images(&all))?;
    #[derive(Serialize)]
    struct Item {
        index: usize,
        layers: usize,
        psnr_db: f64,
        alpha_weighted_rgb_l1: f64,
    }
    let mut items = Vec::new();
    for e in entries.iter().filter(|e| e.design.n_layers() > 0).take(designs) {
        let d = decompose(&vae, &dit, &e.design.composite, &e.record.bundle, steps, seed)?;
        items.push(Item {
            index: e.record.index,
            layers: e.design.n_layers(),
            psnr_db: d.psnr_db,
            alpha_weighted_rgb_l1: d.rgb_l1,
        });
    }
    let mean = |f: fn(&Item) -> f64| (!items.is_empty()).then(|| items.iter().map(f).sum::<f64>() / items.len() as f64);
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        steps: usize,
        reconstruction: VaeEval,
        decomposition: &'a [Item],
        mean_psnr_db: Option<f64>,
        mean_alpha_weighted_rgb_l1: Option<f64>,
    }
    let report = Report {
        header: header("eval", config, seed),
        steps,
        reconstruction,
        mean_psnr_db: mean(|i| i.psnr_db),
        mean_alpha_weighted_rgb_l1: mean(|i| i.alpha_weighted_rgb_l1),
        decomposition: &items,
    };
    let path = out.cloned().unwrap_or_else(|| config.paths.reports.join("eval.json"));
    let r = write_report(&report, &path)?;
    println!(
        "reconstruction psnr {:.2} dB; decomposition over {} designs: mean psnr {:.2} dB",
        reconstruction.psnr_db,
        items.len(),
        report.mean_psnr_db.unwrap_or(f64::NAN)
    );
    announce(&path, &r);
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffvqa::checkpoint::Checkpoint;
use diffvqa::config::TrainConfig;
use diffvqa::dataset::{read_split, write_dataset, GenConfig};
use diffvqa::pgm::{read_image, write_image, Gray};
use diffvqa::pipeline::{artifact_paths, evaluate, localization, run_training};
use diffvqa::Error;
use diffvqa_core::checks::gradient_suite;
use diffvqa_core::keyword::{extract_keyword, keyword_to_target, KeywordLexicon};
use diffvqa_core::metrics::score_corpus;
use diffvqa_core::registration::{fit_affine_mse, warp_values, RegLossWeights};
use diffvqa_core::saliency::{apply_shared, gradcam_pair, shared_mask, SaliencyMap};
use diffvqa_core::synth::SynthConfig;
use diffvqa_core::train::{infer_single_pass, infer_two_pass, register, GradCam};

#[derive(Parser)]
#[command(name = "diffvqa", version, about = "Saliency-guided difference VQA on synthetic image pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus.
    GenData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 2500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// train,valid,test
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split_ratios: String,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset split with two-pass inference.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset root.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Also measure Grad-CAM localization against the lesion masks.
        #[arg(long)]
        localization: bool,
        /// Write per-sample predictions as JSONL.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Answer a question about one image pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "main")]
        main_img: PathBuf,
        #[arg(long = "ref")]
        ref_img: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        single_pass: bool,
    },
    /// Corpus metrics for line-aligned hypothesis and reference files.
    Metrics {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Keyword-conditioned Grad-CAM maps and masked images.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "main")]
        main_img: PathBuf,
        #[arg(long = "ref")]
        ref_img: PathBuf,
        #[arg(long)]
        question: String,
        /// Defaults to the keyword of the answer.
        #[arg(long)]
        keyword: Option<String>,
        /// Answer the target is taken from; defaults to the model's own
        /// single-pass answer.
        #[arg(long)]
        answer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align the main image to the reference; writes the warped image and
    /// theta as CSV.
    Register {
        #[arg(long = "main")]
        main_img: PathBuf,
        #[arg(long = "ref")]
        ref_img: PathBuf,
        /// Use the checkpoint's predictor; without it theta is fitted
        /// directly by pixel MSE.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta: PathBuf,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Outcome of a subcommand that ran to completion but failed a check.
enum Failure {
    Error(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<diffvqa_core::error::Error> for Failure {
    fn from(e: diffvqa_core::error::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3], Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Error(Error::Dataset(format!("bad split ratios `{s}`"))))?;
    <[f64; 3]>::try_from(v).map_err(|_| Failure::Error(Error::Dataset("expected three split ratios".into())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_map(path: &Path, m: &SaliencyMap) -> Result<(), Failure> {
    Ok(Gray::from_values(m.width(), m.height(), m.values()).write(path)?)
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData {
            root,
            count,
            seed,
            image_size,
            split_ratios,
        } => {
            let cfg = GenConfig {
                count,
                seed,
                split_ratios: parse_ratios(&split_ratios)?,
                synth: SynthConfig {
                    image_size,
                    ..SynthConfig::default()
                },
            };
            let m = write_dataset(&root, &cfg)?;
            for s in &m.splits {
                println!("{}\t{}", s.name, s.count);
            }
        }
        Cmd::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let out = run_training(&cfg)?;
            let (ckpt, log) = artifact_paths(&cfg.checkpoint_dir);
            println!(
                "best epoch {} combined {:.4}\ncheckpoint {}\nlog {}",
                out.best.epoch,
                out.best.score,
                ckpt.display(),
                log.display()
            );
        }
        Cmd::Eval {
            ckpt,
            split,
            data,
            localization: with_loc,
            predictions,
        } => {
            let model = Checkpoint::load(&ckpt)?.model()?;
            let records = read_split(&data, &split)?;
            let ev = evaluate(&model, &records, &mut GradCam::default())?;
            println!("two-pass\n{}", ev.two_pass.to_table());
            println!("single-pass\n{}", ev.single_pass.to_table());
            println!("keyword_acc\t{:.4}\t(single-pass {:.4})", ev.keyword_acc, ev.single_keyword_acc);
            println!("change_acc\t{:.4}\t(single-pass {:.4})", ev.change_acc, ev.single_change_acc);
            if with_loc {
                let loc = localization(&model, &records)?;
                println!("mean_iou\t{:.4}\nargmax_in_bbox\t{:.4}\t({} samples)", loc.mean_iou, loc.argmax_in_bbox, loc.samples);
            }
            if let Some(p) = predictions {
                let lines: String = ev
                    .predictions
                    .iter()
                    .map(|x| serde_json::to_string(x).expect("prediction serializes") + "\n")
                    .collect();
                std::fs::write(&p, lines).map_err(|source| Error::Io { path: p.clone(), source })?;
            }
        }
        Cmd::Infer {
            ckpt,
            main_img,
            ref_img,
            question,
            single_pass,
        } => {
            let model = Checkpoint::load(&ckpt)?.model()?;
            let (m, r) = (read_image(&main_img)?, read_image(&ref_img)?);
            let q = model.vocab.encode(&question)?;
            let ids = if single_pass {
                infer_single_pass(&model, &m, &r, &q)?.answer
            } else {
                let lex = KeywordLexicon::synthetic();
                let out = infer_two_pass(&model, &mut GradCam::default(), &lex, &m, &r, &q)?;
                if out.mask.is_none() {
                    log::info!("keyword not found in the preliminary answer; masking skipped");
                }
                out.answer
            };
            println!("{}", model.vocab.decode(&ids)?);
        }
        Cmd::Metrics { hyp, reference } => {
            let (h, r) = (read_lines(&hyp)?, read_lines(&reference)?);
            if h.len() != r.len() {
                return Err(Failure::Error(Error::Dataset(format!(
                    "{} hypotheses but {} references",
                    h.len(),
                    r.len()
                ))));
            }
            let hs: Vec<&str> = h.iter().map(String::as_str).collect();
            let rs: Vec<&str> = r.iter().map(String::as_str).collect();
            println!("{}", score_corpus(&hs, &rs)?.to_table());
        }
        Cmd::Cam {
            ckpt,
            main_img,
            ref_img,
            question,
            keyword,
            answer,
            out,
        } => {
            let model = Checkpoint::load(&ckpt)?.model()?;
            let (m, r) = (read_image(&main_img)?, read_image(&ref_img)?);
            let q = model.vocab.encode(&question)?;
            let (_, warped) = register(&model, &m, &r)?;
            let answer_ids = match answer {
                Some(a) => model.vocab.encode(&a)?,
                None => infer_single_pass(&model, &m, &r, &q)?.answer,
            };
            let text = model.vocab.decode(&answer_ids)?;
            let kw = match keyword {
                Some(k) => k,
                None => extract_keyword(&text, &KeywordLexicon::synthetic())?,
            };
            let target = keyword_to_target(&kw, &model.vocab, &answer_ids)
                .ok_or_else(|| Error::Dataset(format!("keyword `{kw}` does not occur in `{text}`")))?;
            let (s_main, s_ref) = gradcam_pair(&model, &warped, &r, &q, &target)?;
            let s = shared_mask(&s_main, &s_ref)?;
            let (mm, rm) = apply_shared(&warped, &r, &s)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            write_map(&out.join("s_main.pgm"), &s_main)?;
            write_map(&out.join("s_ref.pgm"), &s_ref)?;
            write_map(&out.join("s.pgm"), &s)?;
            write_image(&out.join("main_masked.pgm"), &mm)?;
            write_image(&out.join("ref_masked.pgm"), &rm)?;
            println!("answer: {text}\nkeyword: {kw}");
        }
        Cmd::Register {
            main_img,
            ref_img,
            ckpt,
            steps,
            out,
            theta,
        } => {
            let (m, r) = (read_image(&main_img)?, read_image(&ref_img)?);
            let th = match ckpt {
                Some(p) => register(&Checkpoint::load(&p)?.model()?, &m, &r)?.0,
                None => fit_affine_mse(&m, &r, &RegLossWeights::default(), steps, 0.01)?.theta,
            };
            let warped = warp_values(&m, &[th])?;
            write_image(&out, &warped)?;
            std::fs::write(&theta, th.to_csv() + "\n").map_err(|source| Error::Io { path: theta.clone(), source })?;
            println!("{}", th.to_csv());
        }
        Cmd::Gradcheck { seed } => {
            let reports = gradient_suite(seed)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{}\t{:.3e}\t(tol {:.0e})\t{}",
                    r.name,
                    r.max_rel_err,
                    r.tol,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Failure::Numeric(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

mod config;

use clap::{Parser, Subcommand};
use config::{parse_triple, read_json, TrainRun};
use med2t::checkpoint::{sha256_hex, Checkpoint};
use med2t::inference::synthesize_to_hu;
use med2t::metrics::{evaluate, SsimParams, StructureMasks};
use med2t::train::{train, Dataset, Trainer, LOG_FILE};
use med2t::volume::{body_mask, make_phantom_pair, PhantomSpec, Volume};
use med2t::Error;
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "med2t", version, about = "MRI-to-CT synthesis on desk-scale volumes")]
struct Cli {
    /// Worker threads; only 1 is supported (runs are deterministic).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a paired MRI/CT phantom from a JSON spec.
    GenPhantom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a training checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesise a CT (HU) volume from an MRI.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window stride `d,h,w` (default: half the patch).
        #[arg(long, value_parser = parse_triple)]
        stride: Option<[usize; 3]>,
    },
    /// Score a synthetic CT against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Body mask; derived from the reference when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Directory of `<name>.pred.rvol` / `<name>.ref.rvol` structure masks.
        #[arg(long)]
        structures: Option<PathBuf>,
        /// Report path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument { .. } | Error::Json(_) => 1,
        Error::Numerical { .. } | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.threads != 1 {
        return Err(Error::Config(format!("--threads {}: only single-threaded execution is deterministic here", cli.threads)));
    }
    match cli.command {
        Command::GenPhantom { config, out, seed } => gen_phantom(&config, &out, seed),
        Command::Train { config, out, seed, resume } => cmd_train(&config, &out, seed, resume.as_deref()),
        Command::Infer { checkpoint, input, out, stride } => {
            for p in [&checkpoint, &input] {
                if !p.is_file() {
                    return Err(Error::Data(format!("no such file {}", p.display())));
                }
            }
            let sct = synthesize_to_hu(&input, &checkpoint, &out, stride)?;
            println!("{}", json!({ "out": out, "extents": sct.extents, "comment": sct.comment }));
            Ok(())
        }
        Command::Eval { pred, reference, mask, structures, out } => cmd_eval(&pred, &reference, mask.as_deref(), structures.as_deref(), out.as_deref()),
    }
}

fn gen_phantom(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut spec: PhantomSpec = read_json(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (mri, ct) = make_phantom_pair(&spec)?;
    let mask = body_mask(&ct)?;
    fs::create_dir_all(out)?;
    let mut files = BTreeMap::new();
    for (name, v) in [("mri.rvol", &mri), ("ct.rvol", &ct), ("body_mask.rvol", &mask)] {
        let bytes = v.to_rvol_bytes()?;
        fs::write(out.join(name), &bytes)?;
        files.insert(name, sha256_hex(&bytes));
    }
    let manifest = serde_json::to_string_pretty(&json!({ "spec": spec, "files": files }))?;
    fs::write(out.join("manifest.json"), manifest + "\n")?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<(), Error> {
    let mut run: TrainRun = read_json(config)?;
    run.resolve(config.parent().unwrap_or(Path::new(".")))?;
    if let Some(p) = resume {
        if !p.is_file() {
            return Err(Error::Data(format!("--resume: no such file {}", p.display())));
        }
    }
    if let Some(s) = seed {
        run.model.train.seed = s;
    }

    let mut data = Dataset::new(run.model.train.patch);
    for p in &run.data {
        let mask = p.mask.as_ref().map(Volume::read_rvol).transpose()?;
        data.push_raw(&Volume::read_rvol(&p.mri)?, &Volume::read_rvol(&p.ct)?, mask)?;
    }

    let mut trainer = match resume {
        Some(p) => {
            let (ck, _) = Checkpoint::read(p)?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            let mut want = run.model.clone();
            want.train.epochs = t.config.train.epochs;
            if want != t.config {
                return Err(Error::Config("--resume: checkpoint was trained with a different configuration".into()));
            }
            t.config.train.epochs = run.model.train.epochs;
            t
        }
        None => Trainer::new(run.model)?,
    };
    let ckpt = train(&mut trainer, &data, out)?;
    let log = fs::read_to_string(out.join(LOG_FILE))?;
    if let Some(last) = log.lines().last() {
        println!("{last}");
    }
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_eval(pred: &Path, reference: &Path, mask: Option<&Path>, structures: Option<&Path>, out: Option<&Path>) -> Result<(), Error> {
    let pred_v = Volume::read_rvol(pred)?;
    let ref_v = Volume::read_rvol(reference)?;
    let (mask_v, mask_id) = match mask {
        Some(m) => (Volume::read_rvol(m)?, m.file_name().map_or_else(|| m.display().to_string(), |n| n.to_string_lossy().into_owned())),
        None => (body_mask(&ref_v)?, "derived from reference".to_string()),
    };
    let mut masks = Vec::new();
    if let Some(dir) = structures {
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".ref.rvol").map(str::to_string))
            .collect();
        names.sort();
        for name in names {
            let p = dir.join(format!("{name}.pred.rvol"));
            if !p.is_file() {
                return Err(Error::Data(format!("structure {name}: missing {}", p.display())));
            }
            masks.push(StructureMasks { pred: Volume::read_rvol(&p)?, reference: Volume::read_rvol(dir.join(format!("{name}.ref.rvol")))?, name });
        }
    }
    let report = evaluate(&pred_v, &ref_v, &mask_v, &mask_id, &masks, &SsimParams::default())?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

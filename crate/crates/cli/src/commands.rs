use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use liteseg::autograd::{GradChecker, OpKind};
use liteseg::data::{
    build_slice_dataset, generate_phantom, load_checkpoint, load_volume_pairs, prepare_image, read_nifti,
    save_checkpoint, SliceFilter, SliceSample,
};
use liteseg::metrics::probs_to_mask;
use liteseg::train::{evaluate, kfold_split, log_csv, timing_csv, train};
use liteseg::verify::{run_suite, Scope};
use liteseg::{Error, ModelSpec, Network, Rng, StreamKind, Tensor, Variant};

use crate::config::RunConfig;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_SPEC: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Non-finite values and checkpoint/spec disagreements keep their own
    /// codes wherever they surface.
    fn from_core(e: Error, default: u8) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::StateMismatch { .. } => EXIT_SPEC,
            _ => default,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn data_err(e: Error) -> CliError {
    CliError::from_core(e, EXIT_DATA)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_DATA, format!("{}: {e}", path.display()))
}

/// Where samples come from: a directory of NIfTI pairs or generated phantoms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Phantoms { count: usize, size: usize },
    Path(PathBuf),
}

impl DataSource {
    /// `phantoms:NxS` or a filesystem path.
    pub fn parse(s: &str) -> CliResult<Self> {
        let Some(rest) = s.strip_prefix("phantoms:") else {
            return Ok(Self::Path(PathBuf::from(s)));
        };
        let parsed = rest
            .split_once('x')
            .and_then(|(n, size)| Some((n.parse().ok()?, size.parse().ok()?)));
        match parsed {
            Some((count, size)) if count > 0 => Ok(Self::Phantoms { count, size }),
            _ => Err(CliError::new(EXIT_CONFIG, format!("{s:?}: expected phantoms:NxS, e.g. phantoms:8x64"))),
        }
    }

    fn phantoms(count: usize, size: usize, seed: u64) -> CliResult<Vec<SliceSample>> {
        generate_phantom(&mut Rng::substream(seed, StreamKind::Phantom, 0), size, count).map_err(data_err)
    }

    /// Labelled slices for training or evaluation.
    fn samples(&self, config: &RunConfig, filter: SliceFilter) -> CliResult<Vec<SliceSample>> {
        match self {
            Self::Phantoms { count, size } => Self::phantoms(*count, *size, config.seed),
            Self::Path(dir) => {
                let pairs = load_volume_pairs(dir).map_err(data_err)?;
                let slice_config = liteseg::data::SliceConfig {
                    filter,
                    ..config.slice_config().map_err(|e| CliError::new(EXIT_CONFIG, e))?
                };
                let samples = build_slice_dataset(&pairs, &slice_config).map_err(data_err)?;
                if samples.is_empty() {
                    return Err(CliError::new(EXIT_DATA, format!("{}: no slices selected", dir.display())));
                }
                Ok(samples)
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::new(EXIT_CONFIG, e)),
        None => Ok(RunConfig::default()),
    }
}

/// Explicit config, else `config.toml` beside the checkpoint, else defaults.
fn config_for_checkpoint(config: Option<&Path>, checkpoint: &Path) -> CliResult<RunConfig> {
    if config.is_some() {
        return load_config(config);
    }
    let sibling = checkpoint.with_file_name("config.toml");
    load_config(sibling.is_file().then_some(sibling.as_path()))
}

fn network_from_checkpoint(config: &RunConfig, checkpoint: &Path) -> CliResult<Network<f32>> {
    let spec = config.model_spec().map_err(|e| CliError::new(EXIT_CONFIG, e))?;
    let mut net = Network::<f32>::build(&spec, config.seed).map_err(|e| CliError::from_core(e, EXIT_CONFIG))?;
    load_checkpoint(&mut net.params, checkpoint).map_err(|e| match e {
        Error::StateMismatch { .. } => CliError::new(
            EXIT_SPEC,
            format!("{} does not match model {} (base depth {}): {e}", checkpoint.display(), spec.variant.name(), spec.base_depth),
        ),
        other => CliError::new(EXIT_DATA, format!("{}: {other}", checkpoint.display())),
    })?;
    Ok(net)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn train_cmd(config_path: Option<&Path>, data: &str, out: &Path) -> CliResult {
    let config = load_config(config_path)?;
    let spec = config.model_spec().map_err(|e| CliError::new(EXIT_CONFIG, e))?;
    let train_config = config.train_config().map_err(|e| CliError::new(EXIT_CONFIG, e))?;
    let source = DataSource::parse(data)?;
    let samples = source.samples(&config, SliceFilter::LesionNeighbors(2))?;
    let (train_set, val_set) = kfold_split(&samples, config.folds, config.fold_index, config.seed).map_err(data_err)?;
    let outcome = train(&spec, &train_config, &train_set, &val_set).map_err(data_err)?;

    create_dir(out)?;
    write(&out.join("config.toml"), config.to_toml())?;
    write(&out.join("log.csv"), log_csv(&outcome.log))?;
    write(&out.join("timing.csv"), timing_csv(&outcome.log))?;
    save_checkpoint(&outcome.best_params, &out.join("best.ckpt")).map_err(data_err)?;
    save_checkpoint(&outcome.network.params, &out.join("final.ckpt")).map_err(data_err)?;

    let last = outcome.log.last().expect("at least one iteration");
    println!(
        "trained {} ({} parameters) for {} iterations on {} slices, validated on {}",
        spec.variant.name(),
        outcome.network.count_parameters(),
        last.iteration,
        train_set.len(),
        val_set.len()
    );
    println!("final loss {:.6}, batch dice {:.4}", last.loss, last.train_dice);
    match (outcome.best_iteration, outcome.best_val_dice) {
        (Some(it), Some(d)) => println!("best validation dice {d:.4} at iteration {it}"),
        _ => println!("no validation points; best.ckpt holds the final parameters"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Binary portable graymap with values 0 or 255.
pub fn encode_pgm(mask: &Tensor<u8>) -> Vec<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    out
}

/// Preprocessed `[1, S, S]` slices of one input volume.
fn input_slices(input: &str, config: &RunConfig) -> CliResult<Vec<Tensor<f32>>> {
    match DataSource::parse(input)? {
        DataSource::Phantoms { count, size } => {
            Ok(DataSource::phantoms(count, size, config.seed)?.into_iter().map(|s| s.image).collect())
        }
        DataSource::Path(path) => {
            let volume = read_nifti(&path).map_err(|e| CliError::new(EXIT_DATA, format!("{}: {e}", path.display())))?;
            let slice_config = config.slice_config().map_err(|e| CliError::new(EXIT_CONFIG, e))?;
            (0..volume.depth())
                .map(|z| {
                    prepare_image(&volume.slice(z), slice_config.window, slice_config.bins, slice_config.resize)
                        .map_err(data_err)
                })
                .collect()
        }
    }
}

pub fn infer_cmd(checkpoint: &Path, config_path: Option<&Path>, input: &str, out: &Path) -> CliResult {
    let config = config_for_checkpoint(config_path, checkpoint)?;
    let net = network_from_checkpoint(&config, checkpoint)?;
    let lesion = config.train_config().map_err(|e| CliError::new(EXIT_CONFIG, e))?.lesion_class;
    let slices = input_slices(input, &config)?;
    create_dir(out)?;
    let mut summary = String::from("slice,lesion_voxels\n");
    let (mut total, mut positive) = (0usize, 0usize);
    let mut size = (0, 0);
    let n = slices.len();
    for (z, image) in slices.into_iter().enumerate() {
        let shape = image.shape().to_vec();
        let x = image.reshape(&[1, shape[0], shape[1], shape[2]]).map_err(data_err)?;
        let probs = net.predict(&x).map_err(data_err)?;
        let mask = probs_to_mask(&probs, lesion as usize).map_err(data_err)?;
        let (h, w) = (shape[1], shape[2]);
        let mask = mask.reshape(&[h, w]).map_err(data_err)?;
        let count = mask.data().iter().filter(|&&v| v != 0).count();
        total += count;
        positive += usize::from(count > 0);
        size = (h, w);
        let _ = writeln!(summary, "{z},{count}");
        write(&out.join(format!("slice-{z:04}.pgm")), encode_pgm(&mask))?;
    }
    write(&out.join("summary.csv"), &summary)?;
    println!(
        "{} slices of {}x{}: {} with lesion, {} lesion voxels",
        n,
        size.0,
        size.1,
        positive,
        total
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval_cmd(checkpoint: &Path, config_path: Option<&Path>, data: &str, csv: bool) -> CliResult {
    let config = config_for_checkpoint(config_path, checkpoint)?;
    let net = network_from_checkpoint(&config, checkpoint)?;
    let train_config = config.train_config().map_err(|e| CliError::new(EXIT_CONFIG, e))?;
    let samples = DataSource::parse(data)?.samples(&config, SliceFilter::All)?;
    let report = evaluate(&net, &samples, train_config.lesion_class, 4).map_err(data_err)?;
    print!("{}", if csv { report.to_csv() } else { report.to_text() });
    Ok(())
}

fn build_for_audit(variant: Variant, base_depth: usize) -> CliResult<Network<f32>> {
    Network::<f32>::build(&ModelSpec::for_variant(variant, base_depth), 0).map_err(|e| CliError::from_core(e, EXIT_CONFIG))
}

pub fn params_cmd(variant: &str, base_depth: usize, compare: bool, csv: bool) -> CliResult {
    let variant = Variant::parse(variant)
        .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown variant {variant:?} (proposed or baseline-unet)")))?;
    if !compare {
        let table = build_for_audit(variant, base_depth)?.parameter_table();
        print!("{}", if csv { table.to_csv() } else { table.to_text() });
        return Ok(());
    }
    let proposed = build_for_audit(Variant::Proposed, base_depth)?.count_parameters();
    let baseline = build_for_audit(Variant::BaselineUnet, base_depth)?.count_parameters();
    let ratio = baseline as f64 / proposed as f64;
    if csv {
        println!("variant,total");
        println!("proposed,{proposed}");
        println!("baseline-unet,{baseline}");
        println!("ratio,{ratio:.4}");
    } else {
        println!("base depth     {base_depth}");
        println!("proposed       {proposed}");
        println!("baseline-unet  {baseline}");
        println!("ratio          {ratio:.2}x");
    }
    Ok(())
}

pub fn gradcheck_cmd(scope: &str, instances: usize, seed: u64, corrupt_op: Option<&str>) -> CliResult {
    let scope = Scope::parse(scope)
        .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown scope {scope:?} (layers, block, model or all)")))?;
    let corrupt = match corrupt_op {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("unknown op {name:?}")))?,
        ),
    };
    let checker = GradChecker {
        corrupt,
        ..GradChecker::default()
    };
    let outcomes = run_suite(scope, &checker, seed, instances).map_err(|e| CliError::from_core(e, EXIT_GRADCHECK))?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let ok = o.passed(GRADCHECK_TOLERANCE);
        println!(
            "{:<26} max rel error {:.3e}  {:>6} checked  {:>4} skipped  {}",
            o.name,
            o.max_rel_error,
            o.coordinates,
            o.skipped,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(format!("{} ({:.3e})", o.name, o.max_rel_error));
        }
    }
    if failed.is_empty() {
        println!("all {} checks within {GRADCHECK_TOLERANCE:e}", outcomes.len());
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_GRADCHECK,
            format!("gradient check failed for {}", failed.join(", ")),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_source_syntax() {
        assert_eq!(
            DataSource::parse("phantoms:8x64").unwrap(),
            DataSource::Phantoms { count: 8, size: 64 }
        );
        assert_eq!(DataSource::parse("data/lits").unwrap(), DataSource::Path("data/lits".into()));
        for bad in ["phantoms:8", "phantoms:0x64", "phantoms:ax64"] {
            assert_eq!(DataSource::parse(bad).unwrap_err().code, EXIT_CONFIG);
        }
    }

    #[test]
    fn pgm_header_and_values() {
        let mask = Tensor::new(&[2, 3], vec![0u8, 1, 0, 1, 1, 0]).unwrap();
        let bytes = encode_pgm(&mask);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[11..], &[0, 255, 0, 255, 255, 0]);
    }
}

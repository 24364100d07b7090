use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nip_core::binary::HashCodes;
use nip_core::container::{file_digest, Metadata};
use nip_core::descriptor::{Descriptor, DescriptorSet};
use nip_core::error::{NipError, Result};
use nip_core::eval::{bit_stats, evaluate_descriptors, evaluate_hashes, EvalOptions};
use nip_core::groundtruth::load_ground_truth;
use nip_core::hasher::Method;
use nip_core::pipeline::{fit_hasher, pool_store, FittedHasher, HashSpec};
use nip_core::pooling::PoolSequence;
use nip_core::postproc::{
    fit_pca, fit_pca_whitening, l2_normalize, stack_rows, PcaModel, ThresholdMode,
};
use nip_core::rbm::TrainConfig;
use nip_core::store::{
    validate_store, write_store_with_metadata, OrbitShape, OrbitStore, OrbitTensor,
};
use nip_core::synth::{generate, SynthSpec};

/// Nested invariance pooling descriptors, binary hashing and retrieval evaluation.
#[derive(Parser, Debug)]
#[command(name = "nip", version)]
struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true, env = "NIP_THREADS")]
    threads: Option<usize>,

    /// Seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an orbit store from raw little-endian f32 tensors.
    Convert {
        /// TSV of `image_id<TAB>path`, paths relative to the manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Orbit geometry as `rot,scale,channels,height,width`.
        #[arg(long, value_parser = parse_shape)]
        shape: OrbitShape,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an orbit store and report every problem found.
    Validate { store: PathBuf },
    /// Compute one NIP descriptor per image.
    Pool {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "A_S,S_T,M_R")]
        sequence: String,
        #[arg(long)]
        l2_normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit PCA (whitened by default) on a descriptor file.
    FitPca {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out_dim: usize,
        #[arg(long, default_value_t = nip_core::postproc::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        no_whiten: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the projected descriptors here.
        #[arg(long)]
        apply_out: Option<PathBuf>,
    },
    /// Train or fit a hashing model.
    FitHash(FitHashArgs),
    /// Hash a descriptor file with a fitted model.
    Hash {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank every query against the database and score the rankings.
    Eval {
        /// Hash file (Hamming) or descriptor file (L2).
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Keep each query in its own ranking (UKB-style protocols).
        #[arg(long)]
        include_self: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,4,10")]
        recall: Vec<usize>,
        /// Also report 4 x recall@4.
        #[arg(long)]
        ukb: bool,
        /// L2-normalize descriptors before ranking.
        #[arg(long)]
        l2_normalize: bool,
        /// Output stem; writes `<stem>.tsv`, `<stem>.kv` and, for hashes, `<stem>.bits.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a clustered synthetic orbit store and its ground truth.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_clusters: usize,
        #[arg(long, default_value_t = 4)]
        items_per_cluster: usize,
        #[arg(long, value_parser = parse_shape, default_value = "8,2,128,3,3")]
        shape: OrbitShape,
        #[arg(long, default_value_t = 3.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gt_out: PathBuf,
    },
    /// Per-bit activation statistics of a hash file, as CSV.
    Stats {
        #[arg(long)]
        hashes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct FitHashArgs {
    #[arg(long)]
    descriptors: PathBuf,
    /// rbmh, rbm (lambda = 0), lsh, pcahash, itq or threshold.
    #[arg(long, default_value = "rbmh")]
    method: Method,
    #[arg(long, default_value_t = 256)]
    bits: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().cd_k)]
    cd_k: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = nip_core::baselines::DEFAULT_ITQ_ITERATIONS)]
    itq_iterations: usize,
    /// `median` or a fixed value.
    #[arg(long, default_value = "median", value_parser = parse_threshold)]
    threshold: ThresholdMode,
    #[arg(long)]
    l2_normalize: bool,
    /// Rescale each input dimension to [0, 1]; defaults to true for RBM methods.
    #[arg(long)]
    range_scale: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> std::result::Result<OrbitShape, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [r, sc, c, h, w] if v.iter().all(|&x| x > 0) => Ok(OrbitShape::new(*r, *sc, *c, *h, *w)),
        _ => Err("expected five positive integers rot,scale,channels,height,width".into()),
    }
}

fn parse_threshold(s: &str) -> std::result::Result<ThresholdMode, String> {
    if s.eq_ignore_ascii_case("median") {
        return Ok(ThresholdMode::Median);
    }
    s.parse::<f64>()
        .ok()
        .filter(|t| t.is_finite())
        .map(ThresholdMode::Fixed)
        .ok_or_else(|| format!("expected `median` or a number, got {s:?}"))
}

/// Provenance block: tool version, command and input digests.
fn provenance(command: &str, inputs: &[(&str, &Path)]) -> Result<Metadata> {
    let mut m = Metadata::new();
    m.set("tool", concat!("nip ", env!("CARGO_PKG_VERSION")))
        .set("command", command);
    for (name, path) in inputs {
        m.set(format!("input.{name}"), path.display());
        m.set(format!("input.{name}.sha256"), file_digest(path)?);
    }
    Ok(m)
}

fn at(path: &Path, e: NipError) -> NipError {
    e.context(path.display())
}

fn check_out(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(NipError::NotFound(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

fn cmd_convert(manifest: &Path, shape: OrbitShape, out: &Path) -> Result<()> {
    let text = fs::read_to_string(manifest).map_err(|e| at(manifest, e.into()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, file) = line.split_once('\t').ok_or(NipError::Parse {
            line: i + 1,
            message: "expected image_id<TAB>path".into(),
        })?;
        let path = base.join(file.trim());
        let bytes = fs::read(&path).map_err(|e| at(&path, e.into()))?;
        if bytes.len() != shape.payload_bytes() {
            return Err(NipError::ShapeMismatch(format!(
                "{file}: {} bytes, shape {shape} needs {}",
                bytes.len(),
                shape.payload_bytes()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(OrbitTensor::new(id.trim(), shape, data)?);
    }
    let mut meta = provenance("convert", &[("manifest", manifest)])?;
    meta.set("shape", shape);
    write_store_with_metadata(&records, out, &meta)?;
    println!(
        "wrote {} orbits of shape {shape} to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_validate(store: &Path) -> Result<bool> {
    let report = validate_store(store).map_err(|e| at(store, e))?;
    for f in &report.findings {
        println!("{f}");
    }
    println!(
        "{}: {} records checked, {} findings",
        if report.passed() { "OK" } else { "FAILED" },
        report.records_checked,
        report.findings.len()
    );
    Ok(report.passed())
}

fn cmd_pool(store_path: &Path, sequence: &str, l2: bool, out: &Path) -> Result<()> {
    let seq: PoolSequence = sequence.parse()?;
    let store = OrbitStore::open(store_path).map_err(|e| at(store_path, e))?;
    let descriptors = pool_store(&store, &seq, l2)?;
    let mut meta = provenance("pool", &[("store", store_path)])?;
    meta.set("sequence", &seq).set("l2_normalize", l2);
    let set = DescriptorSet::new(descriptors, meta)?;
    set.write(out)?;
    println!(
        "wrote {} descriptors of dim {} to {}",
        set.len(),
        set.dim()?,
        out.display()
    );
    Ok(())
}

fn cmd_fit_pca(
    descriptors: &Path,
    out_dim: usize,
    epsilon: f64,
    whiten: bool,
    out: &Path,
    apply_out: Option<&Path>,
) -> Result<()> {
    let set = DescriptorSet::read(descriptors).map_err(|e| at(descriptors, e))?;
    let data = stack_rows(&set.rows())?;
    let model = if whiten {
        fit_pca_whitening(&data, out_dim, epsilon)?
    } else {
        fit_pca(&data, out_dim)?
    };
    let mut meta = provenance("fit-pca", &[("descriptors", descriptors)])?;
    meta.set("out_dim", out_dim)
        .set("epsilon", epsilon)
        .set("whiten", whiten);
    model.write(out, &meta)?;
    println!(
        "wrote PCA model {} -> {} to {}",
        model.in_dim(),
        model.out_dim(),
        out.display()
    );
    if let Some(path) = apply_out {
        check_out(path)?;
        let projected = apply_pca(&model, &set)?;
        let mut m = provenance("fit-pca", &[("descriptors", descriptors), ("pca", out)])?;
        if let Some(s) = set.metadata.get("sequence") {
            m.set("sequence", s);
        }
        DescriptorSet::new(projected, m)?.write(path)?;
        println!("wrote projected descriptors to {}", path.display());
    }
    Ok(())
}

fn apply_pca(model: &PcaModel, set: &DescriptorSet) -> Result<Vec<Descriptor>> {
    set.descriptors
        .iter()
        .map(|d| {
            model
                .apply(d)
                .map_err(|e| e.context(format!("descriptor {:?} into PCA", d.image_id)))
        })
        .collect()
}

fn cmd_fit_hash(a: &FitHashArgs, seed: u64) -> Result<()> {
    let set = DescriptorSet::read(&a.descriptors).map_err(|e| at(&a.descriptors, e))?;
    let spec = HashSpec {
        method: a.method,
        n_bits: a.bits,
        train: TrainConfig {
            learning_rate: a.learning_rate,
            cd_k: a.cd_k,
            batch_size: a.batch_size,
            epochs: a.epochs,
            lambda: a.lambda,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            seed,
        },
        itq_iterations: a.itq_iterations,
        threshold: a.threshold,
        l2_normalize: a.l2_normalize,
        range_scale: a.range_scale,
    };
    let (fitted, history) = fit_hasher(&set.descriptors, &spec)?;
    let mut meta = provenance("fit-hash", &[("descriptors", &a.descriptors)])?;
    meta.extend(&spec.to_metadata());
    fitted.write(&a.out, &meta)?;
    if let Some(last) = history.as_ref().and_then(|h| h.epochs.last()) {
        println!(
            "final epoch: reconstruction error {:.6}, regularizer {:.4}",
            last.reconstruction_error, last.regularizer
        );
    }
    println!(
        "wrote {} model ({} -> {} bits) to {}",
        a.method,
        fitted.input_dim(),
        fitted.n_bits(),
        a.out.display()
    );
    Ok(())
}

fn cmd_hash(model: &Path, descriptors: &Path, out: &Path) -> Result<()> {
    let (fitted, model_meta) = FittedHasher::read(model).map_err(|e| at(model, e))?;
    let set = DescriptorSet::read(descriptors).map_err(|e| at(descriptors, e))?;
    let dim = set.dim()?;
    if dim != fitted.input_dim() {
        return Err(NipError::Dim(format!(
            "descriptors {} have {dim} dims but hash model {} expects {}",
            descriptors.display(),
            model.display(),
            fitted.input_dim()
        )));
    }
    let hashes = fitted.hash_all(&set.descriptors)?;
    let mut meta = provenance("hash", &[("model", model), ("descriptors", descriptors)])?;
    if let Some(m) = model_meta.get("method") {
        meta.set("method", m);
    }
    meta.set("n_bits", fitted.n_bits());
    let codes = HashCodes::new(hashes, meta)?;
    codes.write(out)?;
    println!(
        "wrote {} hashes of {} bits to {}",
        codes.len(),
        fitted.n_bits(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(db: &Path, gt_path: &Path, opts: &EvalOptions, l2: bool, out: &Path) -> Result<()> {
    check_out(out)?;
    let gt = load_ground_truth(gt_path).map_err(|e| at(gt_path, e))?;
    let magic = fs::read(db)
        .map_err(|e| at(db, e.into()))?
        .get(..4)
        .map(<[u8]>::to_vec)
        .unwrap_or_default();
    let mut report = if magic == nip_core::binary::HASH_MAGIC {
        evaluate_hashes(
            &HashCodes::read(db).map_err(|e| at(db, e))?.hashes,
            &gt,
            opts,
        )?
    } else if magic == nip_core::descriptor::DESCRIPTOR_MAGIC {
        let mut set = DescriptorSet::read(db).map_err(|e| at(db, e))?;
        if l2 {
            set.descriptors = set.descriptors.iter().map(l2_normalize).collect();
        }
        evaluate_descriptors(&set, &gt, opts)?
    } else {
        return Err(NipError::CorruptStore(format!(
            "{} is neither a hash file nor a descriptor file",
            db.display()
        )));
    };
    let mut meta = provenance("eval", &[("db", db), ("gt", gt_path)])?;
    meta.extend(&report.metadata);
    meta.set(
        "recall",
        opts.recall_at
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    if report.metadata.get("metric") == Some("l2") {
        meta.set("l2_normalize", l2);
    }
    report.metadata = meta;
    report.write(out)?;
    print!("{}", report.to_tsv().lines().last().unwrap_or_default());
    println!();
    Ok(())
}

fn cmd_synth(spec: &SynthSpec, out: &Path, gt_out: &Path) -> Result<()> {
    check_out(gt_out)?;
    let data = generate(spec)?;
    let mut meta = Metadata::new();
    meta.set("tool", concat!("nip ", env!("CARGO_PKG_VERSION")))
        .set("command", "synth")
        .set("n_clusters", spec.n_clusters)
        .set("items_per_cluster", spec.items_per_cluster)
        .set("shape", spec.shape)
        .set("noise", spec.noise)
        .set("seed", spec.seed);
    write_store_with_metadata(&data.orbits, out, &meta)?;
    data.ground_truth.write(gt_out)?;
    println!(
        "wrote {} synthetic orbits to {} and ground truth to {}",
        data.orbits.len(),
        out.display(),
        gt_out.display()
    );
    Ok(())
}

fn cmd_stats(hashes: &Path, out: &Path) -> Result<()> {
    let codes = HashCodes::read(hashes).map_err(|e| at(hashes, e))?;
    let stats = bit_stats(&codes.hashes)?;
    nip_core::container::write_atomic(out, stats.to_csv().as_bytes())?;
    println!(
        "{} bits: mean activation in [{:.4}, {:.4}], std across bits {:.4}",
        stats.means.len(),
        stats.min(),
        stats.max(),
        stats.std
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(NipError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| NipError::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Convert {
            manifest,
            shape,
            out,
        } => cmd_convert(manifest, *shape, out)?,
        Command::Validate { store } => return cmd_validate(store),
        Command::Pool {
            store,
            sequence,
            l2_normalize,
            out,
        } => cmd_pool(store, sequence, *l2_normalize, out)?,
        Command::FitPca {
            descriptors,
            out_dim,
            epsilon,
            no_whiten,
            out,
            apply_out,
        } => cmd_fit_pca(
            descriptors,
            *out_dim,
            *epsilon,
            !no_whiten,
            out,
            apply_out.as_deref(),
        )?,
        Command::FitHash(a) => cmd_fit_hash(a, seed)?,
        Command::Hash {
            model,
            descriptors,
            out,
        } => cmd_hash(model, descriptors, out)?,
        Command::Eval {
            db,
            gt,
            include_self,
            recall,
            ukb,
            l2_normalize,
            out,
        } => {
            let opts = EvalOptions {
                include_self: *include_self,
                recall_at: recall.clone(),
                ukb: *ukb,
            };
            cmd_eval(db, gt, &opts, *l2_normalize, out)?
        }
        Command::Synth {
            n_clusters,
            items_per_cluster,
            shape,
            noise,
            out,
            gt_out,
        } => {
            let spec = SynthSpec {
                n_clusters: *n_clusters,
                items_per_cluster: *items_per_cluster,
                shape: *shape,
                noise: *noise,
                seed,
            };
            cmd_synth(&spec, out, gt_out)?
        }
        Command::Stats { hashes, out } => cmd_stats(hashes, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use voxdiff::codec::{train_codec, Codec, TokenMap, CODEBOOK_FILE, CODEC_CKPT};
use voxdiff::config::RunConfig;
use voxdiff::denoiser::{train_denoiser, ConditionMode, DenoiserNet, DENOISER_CKPT};
use voxdiff::metrics::{self, dct_psd, write_reports, DistanceKind, MetricReport};
use voxdiff::pipeline::{add_noise, ConditionSpec, Mode, NoiseKind, Pipeline, Region, Sample};
use voxdiff::seed;
use voxdiff::shape::{load_tsdf, make_corpus, sample_surface_points, save_tsdf, SurfacePointSet, TsdfGrid};

use crate::{Cli, CliError, Command};

const LABELS_FILE: &str = "labels.txt";

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Empty `<out>/<name>` so reruns leave no stale files behind.
    fn fresh_dir(&self, name: &str) -> CliResult<PathBuf> {
        let d = self.dir(name);
        if d.exists() {
            fs::remove_dir_all(&d)?;
        }
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn sub_seed(&self, component: &str) -> u64 {
        seed::derive(self.seed, component, 0)
    }
}

pub fn run(cli: &Cli, started: Instant) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let ctx = Ctx {
        seed: cfg.training.seed,
        cfg,
        out: cli.out.clone(),
    };
    fs::create_dir_all(&ctx.out)?;
    let result = match &cli.command {
        Command::GenCorpus { count } => gen_corpus(&ctx, *count),
        Command::TrainVq => train_vq(&ctx),
        Command::Tokenize => tokenize(&ctx),
        Command::TrainDiffusion => train_diffusion(&ctx),
        Command::Sample { count, label } => sample(&ctx, *count, *label),
        Command::Complete {
            input,
            region,
            start,
            count,
            label,
        } => complete(&ctx, input, region.as_deref(), *start, *count, *label),
        Command::Denoise {
            input,
            alpha,
            noise,
            start,
        } => denoise(&ctx, input, *alpha, noise.as_deref(), *start),
        Command::Edit { input, label, start } => edit(&ctx, input, *label, *start),
        Command::Eval {
            generated,
            reference,
            distance,
            partial,
        } => eval(&ctx, generated.as_deref(), reference.as_deref(), distance, partial.as_deref()),
        Command::Spectrum { input } => spectrum(&ctx, input.as_deref()),
    };
    write_manifest(&ctx, cli, started, &result)?;
    result
}

fn write_manifest(ctx: &Ctx, cli: &Cli, started: Instant, result: &CliResult<()>) -> CliResult<()> {
    let status = match result {
        Ok(()) => "ok".to_string(),
        Err(CliError::Usage(m)) | Err(CliError::Data(m)) => format!("failed: {m}"),
    };
    let text = format!(
        "command = {}\nvoxdiff_version = {}\ncli_version = {}\nconfig_hash = {}\nseed = {}\nthreads = {}\nwall_time_s = {:.3}\nstatus = {}\n",
        cli.command.name(),
        voxdiff::VERSION,
        env!("CARGO_PKG_VERSION"),
        ctx.cfg.hash(),
        ctx.seed,
        cli.threads.map_or("default".to_string(), |n| n.to_string()),
        started.elapsed().as_secs_f64(),
        status.replace('\n', " "),
    );
    fs::write(ctx.out.join(format!("manifest-{}.txt", cli.command.name())), text)?;
    Ok(())
}

/// Error for an artifact that an earlier command should have produced.
fn require(path: &Path, what: &str, producer: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{what} not found at {}; run `voxdiff {producer}` first",
            path.display()
        )))
    }
}

fn list_files(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn load_corpus(ctx: &Ctx) -> CliResult<Vec<(String, TsdfGrid, u32)>> {
    let dir = ctx.dir("corpus");
    let labels = dir.join(LABELS_FILE);
    require(&labels, "corpus", "gen-corpus")?;
    let text = fs::read_to_string(&labels)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (name, label) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Data(format!("{}: malformed line {line:?}", labels.display())))?;
        let label: u32 = label
            .trim()
            .parse()
            .map_err(|_| CliError::Data(format!("{}: bad label in {line:?}", labels.display())))?;
        out.push((name.to_string(), load_tsdf(&dir.join(name))?, label));
    }
    Ok(out)
}

fn load_codec(ctx: &Ctx) -> CliResult<Codec> {
    let dir = ctx.dir("codec");
    require(&dir.join(CODEC_CKPT), "codec checkpoint", "train-vq")?;
    require(&dir.join(CODEBOOK_FILE), "codebook", "train-vq")?;
    Ok(Codec::load(
        &dir,
        ctx.cfg.patch_spec()?,
        ctx.cfg.geometry.truncation,
        ctx.cfg.codec.n_z,
    )?)
}

fn load_denoiser(ctx: &Ctx) -> CliResult<DenoiserNet> {
    let dir = ctx.dir("denoiser");
    require(&dir.join(DENOISER_CKPT), "denoiser checkpoint", "train-diffusion")?;
    Ok(DenoiserNet::load(&dir)?)
}

fn write_samples(dir: &Path, stem: &str, samples: &[Sample]) -> CliResult<()> {
    for (i, s) in samples.iter().enumerate() {
        save_tsdf(&dir.join(format!("{stem}-{i:04}.tsdf")), &s.grid)?;
        s.tokens.save(&dir.join(format!("{stem}-{i:04}.tokm")))?;
    }
    Ok(())
}

/// Token map of `grid` with every patch outside `region` masked; the
/// condition sequence for token-sequence mode.
fn region_condition(codec: &Codec, grid: &TsdfGrid, region: &Region) -> CliResult<Vec<u32>> {
    let map = codec.tokenize(grid, None)?;
    let mask = map.mask_index();
    let observed = region.patch_mask(codec.patch.per_axis);
    Ok(map
        .indices
        .iter()
        .zip(&observed)
        .map(|(&s, &o)| if o { s } else { mask })
        .collect())
}

fn gen_corpus(ctx: &Ctx, count: Option<usize>) -> CliResult<()> {
    let g = &ctx.cfg.geometry;
    let count = count.unwrap_or(g.corpus_count);
    let shapes = make_corpus(count, g.classes as u32, ctx.cfg.dims(), g.truncation, ctx.sub_seed("corpus"))?;
    let dir = ctx.fresh_dir("corpus")?;
    let mut labels = String::new();
    for (i, s) in shapes.iter().enumerate() {
        let name = format!("shape-{i:04}.tsdf");
        save_tsdf(&dir.join(&name), &s.grid)?;
        let _ = writeln!(labels, "{name}\t{}", s.class_label);
    }
    fs::write(dir.join(LABELS_FILE), labels)?;
    println!("wrote {count} shapes to {}", dir.display());
    Ok(())
}

fn train_vq(ctx: &Ctx) -> CliResult<()> {
    let corpus = load_corpus(ctx)?;
    let grids: Vec<TsdfGrid> = corpus.into_iter().map(|(_, g, _)| g).collect();
    let (codec, report) = train_codec(&grids, ctx.cfg.patch_spec()?, &ctx.cfg.codec_train(ctx.sub_seed("codec")))?;
    let dir = ctx.fresh_dir("codec")?;
    codec.save(&dir)?;
    let mut curve = String::from("epoch\treconstruction\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(curve, "{i}\t{l}");
    }
    fs::write(dir.join("loss.tsv"), curve)?;
    let summary = format!(
        "mean_abs_error\t{}\ncodes_used\t{}\nk\t{}\n",
        report.mean_abs_error,
        report.codes_used,
        codec.k()
    );
    fs::write(dir.join("report.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn tokenize(ctx: &Ctx) -> CliResult<()> {
    let corpus = load_corpus(ctx)?;
    let codec = load_codec(ctx)?;
    let dir = ctx.fresh_dir("tokens")?;
    for (name, grid, label) in &corpus {
        let map = codec.tokenize(grid, Some(*label))?;
        map.save(&dir.join(Path::new(name).with_extension("tokm")))?;
    }
    println!("wrote {} token maps to {}", corpus.len(), dir.display());
    Ok(())
}

fn train_diffusion(ctx: &Ctx) -> CliResult<()> {
    let tok_dir = ctx.dir("tokens");
    require(&tok_dir, "token maps", "tokenize")?;
    let files = list_files(&tok_dir, "tokm")?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no token maps in {}; run `voxdiff tokenize` first",
            tok_dir.display()
        )));
    }
    let maps = files.iter().map(|f| TokenMap::load(f)).collect::<voxdiff::Result<Vec<_>>>()?;
    let config = ctx.cfg.denoiser_config()?;
    let conds = if config.condition_mode == ConditionMode::TokenSequence {
        let codec = load_codec(ctx)?;
        let region = ctx.cfg.region()?;
        let observed = region.patch_mask(codec.patch.per_axis);
        Some(
            maps.iter()
                .map(|m| {
                    m.indices
                        .iter()
                        .zip(&observed)
                        .map(|(&s, &o)| if o { s } else { m.mask_index() })
                        .collect()
                })
                .collect::<Vec<Vec<u32>>>(),
        )
    } else {
        None
    };
    let schedule = ctx.cfg.build_schedule()?;
    let mut net = DenoiserNet::new(config, ctx.sub_seed("denoiser-init"))?;
    let report = train_denoiser(
        &mut net,
        &schedule,
        &maps,
        conds.as_deref(),
        &ctx.cfg.denoiser_train(ctx.sub_seed("denoiser-train")),
    )?;
    let dir = ctx.fresh_dir("denoiser")?;
    net.save(&dir)?;
    fs::write(dir.join("schedule.tsv"), schedule.dump())?;
    let mut curve = String::from("step\tloss\tmain\n");
    for (i, (l, m)) in report.loss_curve.iter().zip(&report.main_curve).enumerate() {
        let _ = writeln!(curve, "{i}\t{l}\t{m}");
    }
    fs::write(dir.join("loss.tsv"), curve)?;
    println!(
        "final smoothed loss {:.6} (log K = {:.6})",
        report.smoothed_tail(0.1),
        (schedule.k() as f64).ln()
    );
    Ok(())
}

fn sample(ctx: &Ctx, count: Option<usize>, label: Option<u32>) -> CliResult<()> {
    let net = load_denoiser(ctx)?;
    let codec = load_codec(ctx)?;
    let schedule = ctx.cfg.build_schedule()?;
    let pipe = Pipeline::new(&net, &schedule, &codec)?;
    let s = &ctx.cfg.sampling;
    let mut spec = match label {
        Some(l) => ConditionSpec::new(Mode::ClassConditional, ctx.sub_seed("sample")).with_label(l),
        None => ConditionSpec::new(Mode::Unconditional, ctx.sub_seed("sample")),
    };
    spec = spec.with_guidance(s.guidance_w);
    let count = count.unwrap_or(s.n_samples);
    let samples = pipe.sample_many(&spec, count)?;
    let dir = ctx.fresh_dir("samples")?;
    write_samples(&dir, "sample", &samples)?;
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn complete(
    ctx: &Ctx,
    input: &Path,
    region: Option<&str>,
    start: Option<f64>,
    count: Option<usize>,
    label: Option<u32>,
) -> CliResult<()> {
    let partial = load_tsdf(input)?;
    let net = load_denoiser(ctx)?;
    let codec = load_codec(ctx)?;
    let schedule = ctx.cfg.build_schedule()?;
    let pipe = Pipeline::new(&net, &schedule, &codec)?;
    let s = &ctx.cfg.sampling;
    let region: Region = match region {
        Some(r) => r.parse()?,
        None => ctx.cfg.region()?,
    };
    let mut spec = ConditionSpec::new(Mode::Completion, ctx.sub_seed("complete"))
        .with_region(region)
        .with_start(start.unwrap_or(s.completion_k))
        .with_guidance(s.guidance_w);
    if let Some(l) = label {
        spec = spec.with_label(l);
    }
    if net.config.condition_mode == ConditionMode::TokenSequence {
        spec = spec.with_cond_tokens(region_condition(&codec, &partial, &region)?);
    }
    let count = count.unwrap_or(s.n_samples);
    let samples = pipe.complete(&partial, &spec, count)?;
    let dir = ctx.fresh_dir("completions")?;
    write_samples(&dir, "completion", &samples)?;
    println!("wrote {count} completions to {}", dir.display());
    Ok(())
}

fn denoise(ctx: &Ctx, input: &Path, alpha: Option<f64>, noise: Option<&str>, start: Option<f64>) -> CliResult<()> {
    let clean = load_tsdf(input)?;
    let net = load_denoiser(ctx)?;
    let codec = load_codec(ctx)?;
    let schedule = ctx.cfg.build_schedule()?;
    let pipe = Pipeline::new(&net, &schedule, &codec)?;
    let s = &ctx.cfg.sampling;
    let kind: NoiseKind = match noise {
        Some(n) => n.parse()?,
        None => ctx.cfg.noise_kind()?,
    };
    let noisy = add_noise(&clean, alpha.unwrap_or(s.noise_alpha), kind, ctx.sub_seed("noise"))?;
    let spec = ConditionSpec::new(Mode::Denoise, ctx.sub_seed("denoise"))
        .with_start(start.unwrap_or(s.denoise_k))
        .with_guidance(s.guidance_w);
    let out = pipe.denoise(&noisy, &spec)?;
    let dir = ctx.fresh_dir("denoised")?;
    save_tsdf(&dir.join("noisy.tsdf"), &noisy)?;
    write_samples(&dir, "denoised", &[out])?;
    println!("wrote noisy and denoised volumes to {}", dir.display());
    Ok(())
}

fn edit(ctx: &Ctx, input: &Path, label: u32, start: Option<f64>) -> CliResult<()> {
    let grid = load_tsdf(input)?;
    let net = load_denoiser(ctx)?;
    let codec = load_codec(ctx)?;
    let schedule = ctx.cfg.build_schedule()?;
    let pipe = Pipeline::new(&net, &schedule, &codec)?;
    let s = &ctx.cfg.sampling;
    let current = codec.tokenize(&grid, None)?;
    let spec = ConditionSpec::new(Mode::Edit, ctx.sub_seed("edit"))
        .with_start(start.unwrap_or(s.edit_k))
        .with_guidance(s.guidance_w);
    let out = pipe.edit(&current, label, &spec)?;
    let dir = ctx.fresh_dir("edits")?;
    write_samples(&dir, "edit", &[out])?;
    println!("wrote edit toward class {label} to {}", dir.display());
    Ok(())
}

fn point_sets(ctx: &Ctx, files: &[PathBuf], component: &str) -> CliResult<Vec<SurfacePointSet>> {
    let n = ctx.cfg.geometry.surface_points;
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let grid = load_tsdf(f)?;
            sample_surface_points(&grid, n, seed::derive(ctx.seed, component, i as u64))
                .map_err(|e| CliError::Data(format!("{}: {e}", f.display())))
        })
        .collect()
}

fn tsdf_files(dir: &Path, what: &str, producer: &str) -> CliResult<Vec<PathBuf>> {
    require(dir, what, producer)?;
    let files = list_files(dir, "tsdf")?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no .tsdf files in {}; run `voxdiff {producer}` first",
            dir.display()
        )));
    }
    Ok(files)
}

fn eval(
    ctx: &Ctx,
    generated: Option<&Path>,
    reference: Option<&Path>,
    distance: &str,
    partial: Option<&Path>,
) -> CliResult<()> {
    let kind: DistanceKind = distance.parse().map_err(|e: voxdiff::Error| CliError::Usage(e.to_string()))?;
    let gen_dir = generated.map_or_else(|| ctx.dir("samples"), Path::to_path_buf);
    let ref_dir = reference.map_or_else(|| ctx.dir("corpus"), Path::to_path_buf);
    let gen = point_sets(ctx, &tsdf_files(&gen_dir, "generated shapes", "sample")?, "eval-generated")?;
    let refs = point_sets(ctx, &tsdf_files(&ref_dir, "reference shapes", "gen-corpus")?, "eval-reference")?;
    let (ng, nr) = (gen.len(), refs.len());
    let mut reports = vec![MetricReport::new(
        "1-NNA",
        metrics::one_nna(&gen, &refs, kind)?,
        ng,
        nr,
        kind.label(),
    )];
    // Every reference is matched against the whole generated set.
    let groups = vec![gen.clone(); nr];
    let (mmd, amd) = metrics::mmd_amd(&groups, &refs)?;
    reports.push(MetricReport::new("MMD", mmd, ng, nr, "CD"));
    reports.push(MetricReport::new("AMD", amd, ng, nr, "CD"));
    if ng >= 2 {
        reports.push(MetricReport::new("TMD", metrics::tmd(&gen)?, ng, 0, "CD"));
    }
    if let Some(p) = partial {
        let ps = point_sets(ctx, &[p.to_path_buf()], "eval-partial")?;
        reports.push(MetricReport::new("UHD", metrics::uhd(&ps[0], &gen)?, ng, 1, "-"));
    }
    let dir = ctx.fresh_dir("eval")?;
    write_reports(&dir, "metrics", &reports)?;
    for r in &reports {
        println!("{r}");
    }
    Ok(())
}

fn spectrum(ctx: &Ctx, input: Option<&Path>) -> CliResult<()> {
    let in_dir = input.map_or_else(|| ctx.dir("samples"), Path::to_path_buf);
    let files = tsdf_files(&in_dir, "volumes", "sample")?;
    let mut rows = Vec::new();
    let mut sum: Vec<f64> = Vec::new();
    for f in &files {
        let s = dct_psd(&load_tsdf(f)?)?;
        let bands = s.band_mean();
        if sum.is_empty() {
            sum = vec![0.0; bands.len()];
        }
        if bands.len() != sum.len() {
            return Err(CliError::Data(format!("{}: grid size differs from the other volumes", f.display())));
        }
        for (a, b) in sum.iter_mut().zip(&bands) {
            *a += b;
        }
        let name = f.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        rows.push((name, s.parseval_error(), bands));
    }
    let mut text = String::from("file\tparseval_error");
    for b in 0..sum.len() {
        let _ = write!(text, "\tband{b}");
    }
    text.push('\n');
    for (name, err, bands) in &rows {
        let _ = write!(text, "{name}\t{err:e}");
        for v in bands {
            let _ = write!(text, "\t{v:e}");
        }
        text.push('\n');
    }
    let _ = write!(text, "mean\t-");
    for v in &sum {
        let _ = write!(text, "\t{:e}", v / files.len() as f64);
    }
    text.push('\n');
    let dir = ctx.fresh_dir("spectrum")?;
    fs::write(dir.join("spectrum.tsv"), &text)?;
    println!(
        "top-band mean power {:e} over {} volumes",
        sum.last().copied().unwrap_or(0.0) / files.len() as f64,
        files.len()
    );
    Ok(())
}

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use promptpool::context::{DEFAULT_BOUNDARY, DEFAULT_RANDOM_SCALE, DEFAULT_R_HEAD, DEFAULT_R_TAIL};
use promptpool::redundancy::DEFAULT_THRESHOLD;
use promptpool::{
    compression_ratio, interpolate_pe, parallel, pool_forward, pool_multi, pool_separate_st,
    project_visual, random_tail_extend, read_tensor, relevance_profile, scores_multi_prompt,
    uniform_interpolate_pe, write_tensor, AlignmentConfig, PoolMode, PoolingSpec,
    PositionalEmbeddingTable, ProjectionMatrix, RateSchedule, Shape3, Tensor, TextFeature,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{pick, pick_list, FileConfig};
use crate::{CertificateArgs, Common, PeExtendArgs, PoolArgs, ScoresArgs};

pub fn emit(record: &Value) {
    println!("{record}");
}

fn read(path: &Path, what: &str) -> Result<Tensor> {
    read_tensor(path).with_context(|| format!("reading {what} from {}", path.display()))
}

fn write(t: &Tensor, path: &Path) -> Result<()> {
    write_tensor(t, path).with_context(|| format!("writing {}", path.display()))
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| anyhow!("missing --{flag} (flag, PROMPTPOOL_ variable or config key)"))
}

/// Runs `f` on a pool of the single requested degree, or on the default
/// pool when none was given.
fn with_parallelism<R: Send>(
    flag: Vec<usize>,
    file: &FileConfig,
    f: impl FnOnce() -> Result<R> + Send,
) -> Result<R> {
    let degrees = pick_list(flag, file.parallelism.clone());
    match degrees.as_slice() {
        [] => f(),
        [d] => parallel::with_degree(*d, f)?,
        many => bail!("this command takes a single --parallelism value, got {many:?}"),
    }
}

fn output_path(common: &Common, file: &FileConfig) -> Option<PathBuf> {
    pick(common.output.clone(), file.output.clone())
}

pub fn scores(a: ScoresArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let input = required(pick(a.input, file.input.clone()), "input")?;
    let projection = required(pick(a.projection, file.projection.clone()), "projection")?;
    let texts = pick_list(a.text, file.text.clone());
    ensure!(!texts.is_empty(), "at least one --text feature is required");
    let defaults = AlignmentConfig::default();
    let cfg = AlignmentConfig {
        temperature: pick(a.temperature, file.temperature).unwrap_or(defaults.temperature),
        normalize: pick(a.normalize, file.normalize).unwrap_or(defaults.normalize),
        ..defaults
    };
    let output = output_path(&a.common, &file);

    let v = read(&input, "visual tokens")?;
    let m = ProjectionMatrix::new(read(&projection, "projection")?)
        .with_context(|| format!("projection {}", projection.display()))?;
    let mut prompts = Vec::new();
    for path in &texts {
        let t = read(path, "text feature")?;
        prompts.extend(
            TextFeature::from_tensor(&t).with_context(|| format!("text {}", path.display()))?,
        );
    }

    let scores = with_parallelism(a.common.parallelism, &file, || {
        let projected =
            project_visual(&v, &m).with_context(|| format!("projecting {}", input.display()))?;
        scores_multi_prompt(&projected, &prompts, &cfg).context("scoring tokens")
    })?;
    let shape = scores.shape();
    if let Some(path) = &output {
        write(&scores.as_tensor().cast(v.dtype()), path)?;
    }
    let sum: f64 = scores.values().iter().sum();
    eprintln!(
        "scores {shape}: {} prompts, max {:.6}, entropy {:.4}",
        prompts.len(),
        scores.max(),
        scores.entropy()
    );
    emit(&json!({
        "command": "scores",
        "shape": shape.as_array(),
        "tokens": shape.tokens(),
        "prompts": prompts.len(),
        "max_score": scores.max(),
        "entropy": scores.entropy(),
        "sum": sum,
        "temperature": cfg.temperature,
        "normalize": cfg.normalize,
        "output": output,
    }));
    Ok(())
}

enum Layout {
    Single(PoolingSpec),
    Multi(Vec<PoolingSpec>),
    SeparateSt(PoolingSpec, PoolingSpec),
}

impl Layout {
    fn name(&self) -> &'static str {
        match self {
            Layout::Single(_) => "single",
            Layout::Multi(_) => "multi",
            Layout::SeparateSt(..) => "separate-st",
        }
    }
}

fn pooling_layout(
    kernels: Vec<[usize; 3]>,
    strides: Vec<[usize; 3]>,
    mode: PoolMode,
    separate_st: bool,
    grid: Shape3,
) -> Result<Layout> {
    ensure!(
        strides.is_empty() || strides.len() == kernels.len(),
        "got {} strides for {} kernels",
        strides.len(),
        kernels.len()
    );
    let specs = kernels
        .iter()
        .enumerate()
        .map(|(i, &k)| PoolingSpec::new(k, strides.get(i).copied().unwrap_or(k), mode))
        .collect::<promptpool::Result<Vec<_>>>()?;
    if separate_st {
        return match specs.as_slice() {
            [] => Ok(Layout::SeparateSt(
                PoolingSpec::identity(mode),
                PoolingSpec::identity(mode),
            )),
            [t, s] => Ok(Layout::SeparateSt(*t, *s)),
            _ => bail!(
                "separate-st pooling takes no kernels or exactly two (temporal, spatial), got {}",
                specs.len()
            ),
        };
    }
    Ok(match specs.len() {
        0 if grid.t == 1 => Layout::Single(PoolingSpec::image().with_mode(mode)),
        0 => Layout::Single(PoolingSpec::video().with_mode(mode)),
        1 => Layout::Single(specs[0]),
        _ => Layout::Multi(specs),
    })
}

pub fn pool(a: PoolArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let input = required(pick(a.input, file.input.clone()), "input")?;
    let mode = pick(a.mode, file.mode).unwrap_or_default();
    let scores_path = pick(a.scores, file.scores.clone());
    let separate_st = a.separate_st || file.separate_st.unwrap_or(false);
    let kernels = pick_list(a.kernel, file.kernel.clone());
    let strides = pick_list(a.stride, file.stride.clone());
    let output = output_path(&a.common, &file);

    let v = read(&input, "visual tokens")?;
    ensure!(
        v.rank() == 4,
        "{}: expected T x W x H x D tokens, got shape {:?}",
        input.display(),
        v.shape()
    );
    let grid = Shape3::of(&v)?;
    let layout = pooling_layout(kernels, strides, mode, separate_st, grid)?;
    let scores = match (&scores_path, mode.needs_scores()) {
        (Some(p), true) => Some(read(p, "scores")?),
        (None, true) => bail!("mode {mode} needs --scores"),
        (_, false) => None,
    };

    let pooled = with_parallelism(a.common.parallelism, &file, || {
        let s = scores.as_ref();
        Ok(match &layout {
            Layout::Single(spec) => pool_forward(&v, s, spec)?,
            Layout::Multi(specs) => pool_multi(&v, s, specs)?,
            Layout::SeparateSt(t, sp) => pool_separate_st(&v, s, t, sp)?,
        })
    })
    .with_context(|| format!("pooling {}", input.display()))?;

    let input_tokens = grid.tokens();
    let output_shape = pooled.shape().to_vec();
    let (output_tokens, ratio) = match &layout {
        Layout::Single(_) => {
            let out = Shape3::of(&pooled)?;
            (out.tokens(), compression_ratio(grid, out))
        }
        _ => {
            let n = pooled.shape()[0];
            (n, input_tokens as f64 / n as f64)
        }
    };
    if let Some(path) = &output {
        write(&pooled, path)?;
    }
    let specs: Vec<&PoolingSpec> = match &layout {
        Layout::Single(s) => vec![s],
        Layout::Multi(s) => s.iter().collect(),
        Layout::SeparateSt(t, s) => vec![t, s],
    };
    eprintln!("{input_tokens} → {output_tokens}, ratio {ratio:.1}");
    emit(&json!({
        "command": "pool",
        "input_shape": grid.as_array(),
        "input_tokens": input_tokens,
        "output_tokens": output_tokens,
        "compression_ratio": ratio,
        "mode": mode.name(),
        "layout": layout.name(),
        "specs": specs,
        "output_shape": output_shape,
        "output": output,
    }));
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    id: String,
    frames: PathBuf,
    text: PathBuf,
}

#[derive(Debug, Serialize)]
struct CertificateRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relevant: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let entries: Vec<ManifestEntry> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .with_context(|| format!("manifest {} line {}", path.display(), n + 1))
            })
            .collect::<Result<_>>()?
    };
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            frames: base.join(e.frames),
            text: base.join(e.text),
            id: e.id,
        })
        .collect())
}

fn certify(entry: &ManifestEntry, threshold: f64) -> Result<promptpool::RelevanceProfile> {
    let frames = read(&entry.frames, "frame embeddings")?;
    let text = read(&entry.text, "text embedding")?;
    let mut features = TextFeature::from_tensor(&text)?;
    ensure!(
        features.len() == 1,
        "{}: expected one text embedding, got {}",
        entry.text.display(),
        features.len()
    );
    let text = features.remove(0);
    Ok(relevance_profile(&frames, text.values(), threshold)?)
}

pub fn certificate(a: CertificateArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let manifest = required(pick(a.input, file.input.clone()), "input")?;
    let threshold = pick(a.threshold, file.threshold).unwrap_or(DEFAULT_THRESHOLD);
    let top_k = pick(a.top_k, file.top_k);
    let output = output_path(&a.common, &file);
    let entries = read_manifest(&manifest)?;

    let mut records = with_parallelism(a.common.parallelism, &file, || {
        Ok(entries
            .iter()
            .map(|e| match certify(e, threshold) {
                Ok(p) => CertificateRecord {
                    id: e.id.clone(),
                    certificate: Some(p.certificate),
                    relevant: Some(p.relevant_frames()),
                    num_frames: Some(p.mask.len()),
                    mask: Some(p.mask),
                    error: None,
                },
                Err(err) => CertificateRecord {
                    id: e.id.clone(),
                    certificate: None,
                    relevant: None,
                    num_frames: None,
                    mask: None,
                    error: Some(format!("{err:#}")),
                },
            })
            .collect::<Vec<_>>())
    })?;

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if let Some(k) = top_k {
        let (mut ok, errors): (Vec<_>, Vec<_>) =
            records.into_iter().partition(|r| r.error.is_none());
        // stable, so ties keep manifest order
        ok.sort_by(|a, b| a.certificate.unwrap().total_cmp(&b.certificate.unwrap()));
        ok.truncate(k);
        records = ok.into_iter().chain(errors).collect();
    }

    let mut lines = String::new();
    for r in &records {
        let line = serde_json::to_string(r)?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        match (&r.certificate, &r.error) {
            (Some(c), _) => eprintln!(
                "{:<24} certificate {c:.4} ({}/{} frames)",
                r.id,
                r.relevant.unwrap_or(0),
                r.num_frames.unwrap_or(0)
            ),
            (None, Some(e)) => eprintln!("{:<24} error: {e}", r.id),
            _ => {}
        }
    }
    if let Some(path) = &output {
        std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    ensure!(failed == 0, "{failed} of {} videos failed", entries.len());
    Ok(())
}

pub fn pe_extend(a: PeExtendArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let input = required(pick(a.input, file.input.clone()), "input")?;
    let target_length = pick(a.target_length, file.target_length)
        .ok_or_else(|| anyhow!("missing --target-length"))?;
    let method = pick(a.method, file.method.clone()).unwrap_or_else(|| "asymmetric".into());
    let sched = RateSchedule {
        boundary: pick(a.boundary, file.boundary).unwrap_or(DEFAULT_BOUNDARY),
        r_head: pick(a.r_head, file.r_head).unwrap_or(DEFAULT_R_HEAD),
        r_tail: pick(a.r_tail, file.r_tail).unwrap_or(DEFAULT_R_TAIL),
        target_length,
        continuity: pick(a.continuity, file.continuity).unwrap_or_default(),
    };
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let scale = pick(a.scale, file.scale).unwrap_or(DEFAULT_RANDOM_SCALE);
    let output = output_path(&a.common, &file);

    let table = PositionalEmbeddingTable::new(read(&input, "embedding table")?)
        .with_context(|| format!("table {}", input.display()))?;
    let extended = with_parallelism(a.common.parallelism, &file, || {
        Ok(match method.as_str() {
            "asymmetric" => interpolate_pe(&table, &sched)?,
            "uniform" => uniform_interpolate_pe(&table, target_length)?,
            "random-tail" => random_tail_extend(&table, target_length, seed, scale)?,
            other => bail!("unknown method '{other}' (asymmetric, uniform or random-tail)"),
        })
    })
    .with_context(|| format!("extending {} to {target_length} rows", input.display()))?;

    if let Some(path) = &output {
        write(extended.as_tensor(), path)?;
    }
    let mut record = json!({
        "command": "pe-extend",
        "source_length": table.len(),
        "target_length": extended.len(),
        "width": table.width(),
        "mode": method,
        "output": output,
    });
    match method.as_str() {
        "asymmetric" => {
            record["schedule"] = serde_json::to_value(sched)?;
            eprintln!(
                "{} → {} rows ({method}, boundary {}, r {}/{}, {})",
                table.len(),
                extended.len(),
                sched.boundary,
                sched.r_head,
                sched.r_tail,
                sched.continuity.name()
            );
        }
        "random-tail" => {
            record["seed"] = json!(seed);
            record["scale"] = json!(scale);
            eprintln!(
                "{} → {} rows ({method}, seed {seed})",
                table.len(),
                extended.len()
            );
        }
        _ => eprintln!("{} → {} rows ({method})", table.len(), extended.len()),
    }
    emit(&record);
    Ok(())
}

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use helix_core::backend::{read_trace, Backend, SyntheticBackend};
use helix_core::config::LayerList;
use helix_core::manifold::{ActivationSample, BuildMetadata, ManifoldBuilder, DEFAULT_HOLDOUT_FRACTION, DEFAULT_LAMBDA};
use helix_core::metrics::{write_metrics_csv, NgramJaccard, StubPerplexity, DEFAULT_TAU_PPL, DEFAULT_THETA_DUP};
use helix_core::steering::{generate, FinishReason, GenerateOptions, SteeringMode};
use helix_core::synthesis::{default_ranges, parse_grid, sweep, EngineConfig, SweepReport, DEFAULT_GRID};
use helix_core::telemetry::{aggregate, filter_by_uts, read_jsonl, JsonlSink, TelemetryRecord, TelemetrySink};
use helix_core::Error;

use crate::exit::{self, CliError, CliResult};
use crate::setup::{create_exclusive, load_manifold, write_file, BackendKind, BackendSource, RunConfig};
use crate::{BuildArgs, GenerateArgs, ModeArg, StatsArgs, SweepArgs};

fn print_header(title: &str, lines: &[String]) {
    println!("# {title}");
    for l in lines {
        println!("# {l}");
    }
}

fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5851_f42d_4c95_7f2d
}

pub fn build_manifold(args: &BuildArgs) -> CliResult<()> {
    let lambda = args.lambda.unwrap_or(DEFAULT_LAMBDA);
    let holdout = args.holdout.unwrap_or(DEFAULT_HOLDOUT_FRACTION);
    let keep = match &args.layers {
        Some(s) => Some(s.parse::<LayerList>().map_err(|e| CliError::bad_input(format!("--layers: {e}")))?.0),
        None => None,
    };
    let wanted = |id: u32| keep.as_ref().is_none_or(|k| k.contains(&id));
    let mut builder = ManifoldBuilder::new(lambda, holdout)?;
    let corpus = match args.backend.backend {
        BackendKind::Synthetic => {
            let spec = args.backend.synthetic_spec()?;
            for hidden in SyntheticBackend::truthful_samples(&spec, args.samples)? {
                for (id, h) in hidden.into_iter().filter(|(id, _)| wanted(*id)) {
                    builder.push(&ActivationSample::new(id, h))?;
                }
            }
            format!("synthetic:{}x{}:world{}", spec.dim, spec.vocab_size, args.backend.world_seed)
        }
        BackendKind::Replay => {
            let mut paths: Vec<&PathBuf> = args.inputs.iter().collect();
            paths.extend(args.backend.trace.iter());
            if paths.is_empty() {
                return Err(CliError::bad_input("replay build needs trace files (positional or --trace)"));
            }
            for path in &paths {
                let bytes = fs::read(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
                let (records, err) = read_trace(&bytes);
                if let Some(e) = err {
                    return Err(CliError::from(e).context(path.display()));
                }
                for r in records.into_iter().filter(|r| !r.is_end) {
                    for (id, h) in r.hidden_states.into_iter().filter(|(id, _)| wanted(*id)) {
                        builder.push(&ActivationSample::new(id, h))?;
                    }
                }
            }
            let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            format!("replay:{}", names.join(","))
        }
        BackendKind::External => {
            return Err(CliError::bad_input("build-manifold reads synthetic or replay inputs only"));
        }
    };
    if builder.sample_count() == 0 {
        return Err(CliError::bad_input("no activation samples to build from"));
    }
    let manifold = builder.build(BuildMetadata {
        corpus,
        build_temperature: args.build_temperature,
        ..BuildMetadata::default()
    })?;
    manifold.save(&args.out).map_err(|e| CliError::from(e).context(args.out.display()))?;
    println!("wrote {} ({} layers, lambda = {lambda:e})", args.out.display(), manifold.layers().len());
    for l in manifold.layers() {
        println!("layer {}: d={} samples={} d_ref={:.6}", l.layer_id(), l.dim(), l.sample_count(), l.d_ref());
    }
    Ok(())
}

fn mode(arg: ModeArg) -> SteeringMode {
    match arg {
        ModeArg::Enabled => SteeringMode::Enabled,
        ModeArg::Observe => SteeringMode::ObserveOnly,
        ModeArg::Disabled => SteeringMode::Disabled,
    }
}

/// Opens a stream once to confirm the backend answers and that its hidden
/// states fit the manifold.
fn handshake(
    backend: &mut dyn Backend,
    manifold: &helix_core::manifold::Manifold,
    layers: &[u32],
    prompt: &str,
) -> CliResult<()> {
    let first = backend.start(prompt).map_err(|e| CliError::from(e).context("backend handshake"))?;
    if first.is_end {
        return Ok(());
    }
    for &id in layers {
        let layer = manifold.layer(id).ok_or(Error::MissingLayer(id))?;
        let h = first
            .hidden_states
            .get(&id)
            .ok_or_else(|| CliError::bad_input(format!("backend reports no hidden state for layer {id}")))?;
        if h.len() != layer.dim() {
            return Err(CliError::bad_input(format!(
                "layer {id}: backend width {} does not match manifold width {}",
                h.len(),
                layer.dim()
            )));
        }
    }
    Ok(())
}

pub fn generate_cmd(args: &GenerateArgs) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(&args.steering)?;
    let temperature = cfg.value("temperature", args.temperature, 1.0)?;
    let seed = cfg.value("seed", args.seed, 0u64)?;
    let max_tokens = cfg.value("max-tokens", args.max_tokens, 64usize)?;
    let source = BackendSource::from_flags(&args.backend)?;
    let manifold = load_manifold(&args.manifold)?;
    let steering = cfg.steering.config.clone();
    let run_mode = mode(args.mode);
    if run_mode != SteeringMode::Disabled {
        steering.check_manifold(&manifold)?;
    }
    let mut header = cfg.header();
    header.push(format!("backend = {}", source.describe()));
    header.push(format!("manifold = {}", args.manifold.display()));
    header.push(format!("mode = {run_mode:?}"));
    print_header("helix generate", &header);

    let mut backend = source.create(seed)?;
    let check_layers: &[u32] = if run_mode == SteeringMode::Disabled { &[] } else { &steering.steering_layers };
    handshake(backend.as_mut(), &manifold, check_layers, &args.prompt)?;

    let mut sink = match &args.telemetry {
        Some(path) => Some(JsonlSink::new(create_exclusive(path)?)),
        None => None,
    };
    let opts = GenerateOptions {
        max_tokens,
        mode: run_mode,
        ..GenerateOptions::default()
    };
    let result = generate(
        backend.as_mut(),
        &manifold,
        &args.prompt,
        temperature,
        &steering,
        &opts,
        sampler_seed(seed),
        sink.as_mut().map(|s| s as &mut dyn TelemetrySink),
    );
    let trace = match result {
        Ok(t) => t,
        Err(e) => {
            drop(sink);
            if let Some(p) = &args.telemetry {
                let _ = fs::remove_file(p);
            }
            return Err(e.into());
        }
    };
    if let Some(s) = sink {
        s.into_inner().map_err(|e| CliError::io(format!("telemetry: {e}")))?;
    }

    println!("{}", trace.text);
    match aggregate(&trace.records) {
        Ok(s) => println!(
            "# tokens = {} mean_uts = {:.4} steering_rate = {:.4} steered = {} finish = {:?}",
            trace.tokens.len(),
            s.mean_uts,
            s.steering_rate,
            s.steered_count,
            trace.finish
        ),
        Err(_) => println!("# tokens = {} (no scores recorded) finish = {:?}", trace.tokens.len(), trace.finish),
    }
    if trace.telemetry_degraded {
        return Err(CliError::io("telemetry sink failed during the run; the file is incomplete"));
    }
    if trace.finish == FinishReason::Error {
        let msg = trace.error.unwrap_or_default();
        return Err(CliError::new(exit::HANDSHAKE, format!("stream failed after {} tokens: {msg}", trace.tokens.len())));
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct PlotRow {
    temperature: f64,
    steering_rate: Option<f64>,
    mean_uts: Option<f64>,
    sac: Option<f64>,
}

fn csv_bytes(rows: impl FnOnce(&mut Vec<u8>) -> helix_core::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    rows(&mut buf)?;
    Ok(buf)
}

pub fn sweep_cmd(args: &SweepArgs) -> CliResult<()> {
    let mut cfg = RunConfig::resolve(&args.steering)?;
    let default_grid: Vec<String> = DEFAULT_GRID.iter().map(|t| t.to_string()).collect();
    let grid_spec: String = cfg.value("grid", args.grid.clone(), default_grid.join(","))?;
    let grid = parse_grid(&grid_spec)?;
    let samples = cfg.value("samples", args.samples, 5usize)?;
    let seed = cfg.value("seed", args.seed, 0u64)?;
    let max_tokens = cfg.value("max-tokens", args.max_tokens, 64usize)?;
    let theta = cfg.value("theta", args.theta, DEFAULT_THETA_DUP)?;
    let tau_ppl = cfg.value("tau-ppl", args.tau_ppl, DEFAULT_TAU_PPL)?;
    let source = BackendSource::from_flags(&args.backend)?;
    let manifold = load_manifold(&args.manifold)?;
    cfg.steering.config.check_manifold(&manifold)?;
    let mut header = cfg.header();
    header.push(format!("backend = {}", source.describe()));
    header.push(format!("manifold = {}", args.manifold.display()));
    print_header("helix sweep", &header);

    let engine = EngineConfig {
        steering: cfg.steering.config.clone(),
        options: GenerateOptions {
            max_tokens,
            ..GenerateOptions::default()
        },
        base_seed: seed,
    };
    let factory = |s: u64| source.create(s);
    let outputs = sweep(&args.prompt, &grid, &manifold, &factory, &engine, samples)?;
    let sim = NgramJaccard::default();
    let report = SweepReport::assemble(&args.prompt, &grid, outputs, &sim, theta, &default_ranges());
    let metrics = report.metrics_rows(&sim, &StubPerplexity, theta, tau_ppl);

    let plot: Vec<PlotRow> = grid
        .iter()
        .map(|&t| {
            let records: Vec<&TelemetryRecord> = report
                .outputs_at(t)
                .filter_map(|o| o.trace.as_ref())
                .flat_map(|tr| tr.records.iter())
                .collect();
            let n = records.len() as f64;
            PlotRow {
                temperature: t,
                steering_rate: (n > 0.0).then(|| records.iter().filter(|r| r.steered).count() as f64 / n),
                mean_uts: (n > 0.0).then(|| records.iter().map(|r| r.uts).sum::<f64>() / n),
                sac: metrics.iter().find(|m| m.temperature == t).and_then(|m| m.sac),
            }
        })
        .collect();

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", args.out.display())))?;
    let out = |name: &str| args.out.join(name);
    write_file(&out("report.json"), report.to_json()?.as_bytes())?;
    write_file(&out("ranges.csv"), &csv_bytes(|b| report.write_range_csv(b))?)?;
    write_file(&out("metrics.csv"), &csv_bytes(|b| write_metrics_csv(b, &metrics))?)?;
    let mut plot_csv = csv::Writer::from_writer(Vec::new());
    for row in &plot {
        plot_csv.serialize(row).map_err(|e| CliError::io(e.to_string()))?;
    }
    write_file(&out("plot.csv"), &plot_csv.into_inner().map_err(|e| CliError::io(e.to_string()))?)?;
    let mut digest = Vec::new();
    report.write_digest(&mut digest)?;
    write_file(&out("digest.txt"), &digest)?;

    let total = report.outputs.len();
    let failed = report.failures().count();
    for row in &plot {
        println!(
            "T = {:<5} steering_rate = {} mean_uts = {} sac = {}",
            row.temperature,
            fmt_opt(row.steering_rate),
            fmt_opt(row.mean_uts),
            fmt_opt(row.sac)
        );
    }
    for r in &report.per_range_stats {
        println!(
            "range {:<5} outputs = {} ideas = {} duplication = {}",
            r.label,
            r.output_count,
            r.idea_count,
            fmt_opt(r.duplication_rate)
        );
    }
    println!("# unique concepts = {} cells = {total} failed = {failed}", report.unique_total);
    println!("# wrote {}", args.out.display());
    for f in report.failures() {
        log::warn!("cell {} (T = {}, sample {}): {}", f.id, f.temperature, f.sample, f.error.as_deref().unwrap_or(""));
    }
    if 2 * (total - failed) < total {
        return Err(CliError::new(exit::SWEEP_FAILED, format!("{failed} of {total} sweep cells failed")));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn stats_cmd(args: &StatsArgs) -> CliResult<()> {
    let mut traces: Vec<(String, Vec<TelemetryRecord>)> = Vec::new();
    for path in &args.files {
        let file = File::open(path).map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
        let parsed = read_jsonl(BufReader::new(file)).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        print_stats(path, &parsed.records, parsed.bad_lines.len());
        let mut streams: BTreeMap<u64, Vec<TelemetryRecord>> = BTreeMap::new();
        for r in parsed.records {
            streams.entry(r.stream_id).or_default().push(r);
        }
        let single = streams.len() == 1;
        for (id, recs) in streams {
            let name = if single {
                path.display().to_string()
            } else {
                format!("{}#{id}", path.display())
            };
            traces.push((name, recs));
        }
    }
    let flagged = filter_by_uts(traces.iter().map(|(n, r)| (n.as_str(), &r[..])), args.uts_threshold);
    println!("flagged (mean UTS < {}): {}", args.uts_threshold, flagged.len());
    for f in &flagged {
        println!("  {} mean_uts = {:.4}", f.id, f.mean_uts);
    }
    Ok(())
}

fn print_stats(path: &Path, records: &[TelemetryRecord], bad: usize) {
    if bad > 0 {
        log::warn!("{}: skipped {bad} unparseable line(s)", path.display());
    }
    match aggregate(records) {
        Ok(s) => println!(
            "{}: tokens = {} mean_uts = {:.4} mean_entropy = {:.4} min_uts = {:.4} steered = {} steering_rate = {:.4} bad_lines = {bad}",
            path.display(),
            s.token_count,
            s.mean_uts,
            s.mean_entropy,
            s.min_uts,
            s.steered_count,
            s.steering_rate
        ),
        Err(_) => println!("{}: no records bad_lines = {bad}", path.display()),
    }
}

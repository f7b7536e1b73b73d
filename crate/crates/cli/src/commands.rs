use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rankmerge::io::{
    generate_synthetic, parse_json, read_adapter, read_bytes, read_manifest, write_adapter,
    write_json, LayerManifest, ManifestEntry, SyntheticLayer, SyntheticSpec,
};
use rankmerge::lora::{check_threshold, mask_rank, naive_merge};
use rankmerge::merge::{merge_adapters, BaselineMode, MergeConfig, MergeReport, MERGE_REPORT_KIND};
use rankmerge::parallel::with_jobs;
use rankmerge::prior::{
    self, rank_histogram, LayerClass, RankHistograms, ResolutionRule, Thresholds,
};
use rankmerge::random::layer_seed;
use rankmerge::theory::{
    run_verification, Ensemble, SearchMode, VerificationReport, VerifyConfig, THEOREM_REPORT_KIND,
};
use rankmerge::{Error, MaskPair, MaskVector, Result, Role};
use serde::Serialize;
use serde_json::Value;

use crate::table::Table;
use crate::{AnalyzeArgs, Baseline, GenArgs, InitArgs, MergeArgs, ReportArgs, VerifyArgs};

const SEED_ENV: &str = "RANKMERGE_SEED";
const RANK_ANALYSIS_KIND: &str = "rank-analysis";
const INIT_MASKS_KIND: &str = "init-masks";

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Seed precedence: flag, then config file, then `RANKMERGE_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, from_config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(from_config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| invalid(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_bytes(path)?)
        .map_err(|_| invalid(format!("{} is not UTF-8", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<(MergeConfig, Option<u64>)> {
    let Some(path) = path else {
        return Ok((MergeConfig::default(), None));
    };
    let text = read_text(path)?;
    let what = format!("config {}", path.display());
    let value: Value = parse_json(&text, &what)?;
    let seed = value.get("seed").and_then(Value::as_u64);
    let config = MergeConfig::from_json(&text)?;
    Ok((config, seed))
}

pub fn merge(args: MergeArgs) -> Result<()> {
    let (mut config, config_seed) = load_config(args.config.as_deref())?;
    config.seed = resolve_seed(args.seed, config_seed)?;
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(lr) = args.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(lambda) = args.lambda {
        config.lambda_layer_prior = lambda;
    }
    match args.baseline {
        Some(Baseline::RankMask) => config.baseline_mode = BaselineMode::RankMask,
        Some(Baseline::OutputMask) => config.baseline_mode = BaselineMode::OutputMask,
        Some(Baseline::Naive) | None => {}
    }
    config.validate()?;

    let manifest = read_manifest(&args.manifest)?;
    let content = read_adapter(&args.content)?;
    let style = read_adapter(&args.style)?;

    if let Some(Baseline::Naive) = args.baseline {
        if args.report.is_some() {
            return Err(invalid(
                "--report is not available with --baseline naive (nothing is trained)",
            ));
        }
        let merged = naive_merge(&[content, style], &[1.0, 1.0])?;
        write_adapter(&merged, &args.out)?;
        println!(
            "naive merge of {} layers written to {}",
            merged.len(),
            args.out.display()
        );
        return Ok(());
    }

    let started = Instant::now();
    let (merged, mut report) = with_jobs(args.jobs.jobs, |exec| {
        merge_adapters(&content, &style, &manifest, &config, exec)
    })?;
    let elapsed = started.elapsed().as_secs_f64();
    if args.timing {
        report.wall_time_seconds = Some(elapsed);
    }
    write_adapter(&merged, &args.out)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }

    for layer in &report.layers {
        match &layer.training {
            Some(t) => println!(
                "{}  {}  loss {:.6} -> {:.6}  rank(m_c) {}  rank(m_s) {}",
                layer.name,
                layer.class,
                t.initial_loss,
                t.final_loss,
                t.mask_rank_content,
                t.mask_rank_style
            ),
            None => println!(
                "{}  {}  copied ({})",
                layer.name,
                layer.class,
                status_label(layer.status)
            ),
        }
    }
    println!(
        "{} trained, {} copied, {} trainable parameters ({}), {:.3}s",
        report.trained_layers,
        report.copied_layers,
        report.trainable_parameters,
        report.mode,
        elapsed
    );
    Ok(())
}

fn status_label(status: rankmerge::merge::LayerStatus) -> &'static str {
    use rankmerge::merge::LayerStatus::*;
    match status {
        Trained => "trained",
        CopiedContent => "content only",
        CopiedStyle => "style only",
    }
}

#[derive(Serialize)]
struct LayerRanks {
    name: String,
    class: LayerClass,
    rank_content: usize,
    rank_style: usize,
    stored_mergers: bool,
}

#[derive(Serialize)]
struct RankAnalysis {
    kind: &'static str,
    format_version: &'static str,
    histograms: RankHistograms,
    layers: Vec<LayerRanks>,
}

/// Mergers of a layer without stored ones: all ones over an even split of
/// the merged rank, content taking the odd component.
fn implicit_mergers(rank: usize) -> MaskPair {
    let content = rank.div_ceil(2);
    MaskPair::new(MaskVector::ones(content), MaskVector::ones(rank - content))
}

pub fn analyze(args: AnalyzeArgs) -> Result<()> {
    check_threshold(args.threshold)?;
    let manifest = read_manifest(&args.manifest)?;
    let adapter = read_adapter(&args.adapter)?;
    let rule = ResolutionRule::default();
    let mut masks = BTreeMap::new();
    let mut classes = BTreeMap::new();
    let mut layers = Vec::new();
    for layer in adapter.layers() {
        let name = layer.name().to_string();
        let stored = adapter.mergers().get(&name);
        let pair = stored
            .cloned()
            .unwrap_or_else(|| implicit_mergers(layer.rank()));
        let class = manifest.classify(&name, &rule);
        layers.push(LayerRanks {
            name: name.clone(),
            class,
            rank_content: mask_rank(&pair.content, args.threshold),
            rank_style: mask_rank(&pair.style, args.threshold),
            stored_mergers: stored.is_some(),
        });
        masks.insert(name.clone(), pair);
        classes.insert(name, class);
    }
    let histograms = rank_histogram(&masks, &classes, args.threshold)?;
    let analysis = RankAnalysis {
        kind: RANK_ANALYSIS_KIND,
        format_version: rankmerge::FORMAT_VERSION,
        histograms,
        layers,
    };
    if let Some(path) = &args.report {
        write_json(path, &analysis)?;
    }
    print!("{}", histogram_table(&analysis.histograms));
    Ok(())
}

fn histogram_cells(h: &BTreeMap<usize, usize>) -> String {
    h.iter()
        .map(|(rank, n)| format!("{rank}:{n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn histogram_table(h: &RankHistograms) -> String {
    let mut t = Table::new([
        "layers",
        "merger",
        "count",
        "mean rank",
        "histogram (rank:layers)",
    ]);
    for (label, role) in [
        ("content-dominant", &h.content_dominant),
        ("style-dominant", &h.style_dominant),
    ] {
        t.row([
            label.to_string(),
            "content".into(),
            role.layers.to_string(),
            format!("{:.3}", role.mean_content_rank),
            histogram_cells(&role.content_merger),
        ]);
        t.row([
            label.to_string(),
            "style".into(),
            role.layers.to_string(),
            format!("{:.3}", role.mean_style_rank),
            histogram_cells(&role.style_merger),
        ]);
    }
    format!("threshold {}\n{}", h.threshold, t.render())
}

pub fn verify_theorem(args: VerifyArgs) -> Result<()> {
    let (d_out, d_in) = args.dims;
    if args.active_outputs > d_out {
        return Err(invalid(format!(
            "--active-outputs {} exceeds d_out {d_out}",
            args.active_outputs
        )));
    }
    if args.rank == 0 || args.rank > d_out.min(d_in) {
        return Err(invalid(format!(
            "--rank {} must lie in 1..={} for {d_out}x{d_in}",
            args.rank,
            d_out.min(d_in)
        )));
    }
    let mode = if args.exhaustive {
        SearchMode::Exhaustive
    } else if args.greedy {
        SearchMode::Greedy
    } else {
        SearchMode::Auto
    };
    let config = VerifyConfig {
        trials: args.trials,
        d_out,
        d_in,
        r: args.rank,
        d_s: args.active_outputs,
        seed: resolve_seed(args.seed, None)?,
        mode,
        ensemble: Ensemble::Gaussian,
    };
    let report = with_jobs(args.jobs.jobs, |exec| run_verification(&config, exec))?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    let holds = report.instances.iter().filter(|r| r.holds).count();
    let method = report
        .instances
        .first()
        .map(|r| format!("{:?}", r.method).to_lowercase())
        .unwrap_or_else(|| "none".into());
    println!(
        "holds fraction {:.4} ({holds}/{}), bound respected {:.4}, degenerate {}, search {method}",
        report.holds_fraction,
        report.trials,
        report.bound_respected_fraction,
        report.degenerate_count
    );
    Ok(())
}

#[derive(Serialize)]
struct InitLayer {
    name: String,
    class: LayerClass,
    content: Vec<f64>,
    style: Vec<f64>,
}

#[derive(Serialize)]
struct InitReport {
    kind: &'static str,
    format_version: &'static str,
    rank: usize,
    seed: u64,
    thresholds: Thresholds,
    layers: Vec<InitLayer>,
}

pub fn init_masks(args: InitArgs) -> Result<()> {
    if args.rank == 0 {
        return Err(invalid("--rank must be positive"));
    }
    let thresholds = Thresholds::new(args.t_content, args.t_style)?;
    let seed = resolve_seed(args.seed, None)?;
    let manifest = read_manifest(&args.manifest)?;
    let rule = ResolutionRule::default();
    let mut table = Table::new(["layer", "class", "ones(m_c)", "ones(m_s)"]);
    let mut layers = Vec::new();
    for entry in manifest.entries() {
        let class = manifest.classify(&entry.name, &rule);
        let masks = prior::init_masks(class, args.rank, thresholds, layer_seed(seed, &entry.name));
        table.row([
            entry.name.clone(),
            class.to_string(),
            mask_rank(&masks.content, 0.5).to_string(),
            mask_rank(&masks.style, 0.5).to_string(),
        ]);
        layers.push(InitLayer {
            name: entry.name.clone(),
            class,
            content: masks.content.values().to_vec(),
            style: masks.style.values().to_vec(),
        });
    }
    if let Some(path) = &args.out {
        write_json(
            path,
            &InitReport {
                kind: INIT_MASKS_KIND,
                format_version: rankmerge::FORMAT_VERSION,
                rank: args.rank,
                seed,
                thresholds,
                layers,
            },
        )?;
    }
    print!("{}", table.render());
    Ok(())
}

pub fn gen(args: GenArgs) -> Result<()> {
    let role: Role = args.role.parse()?;
    let (d_out, d_in) = args.dims;
    if args.layers == 0 {
        return Err(invalid("--layers must be positive"));
    }
    let spec = SyntheticSpec {
        layers: rankmerge::io::sdxl_like_names(args.layers)
            .into_iter()
            .map(|name| SyntheticLayer { name, d_out, d_in })
            .collect(),
        rank: args.rank,
        alpha: args.alpha,
        spectrum: args.spectrum,
        role,
    };
    let seed = resolve_seed(args.seed, None)?;
    let set = generate_synthetic(&spec, seed)?;
    write_adapter(&set, &args.out)?;
    if let Some(path) = &args.manifest_out {
        let entries = spec
            .layers
            .iter()
            .map(|l| ManifestEntry {
                d_out: Some(l.d_out),
                d_in: Some(l.d_in),
                ..ManifestEntry::named(l.name.clone())
            })
            .collect();
        let manifest = LayerManifest::new(entries)?;
        rankmerge::io::write_bytes(path, manifest.to_json().as_bytes())?;
    }
    println!(
        "{} {} layers ({d_out}x{d_in}, rank {}) written to {}",
        set.len(),
        role,
        args.rank,
        args.out.display()
    );
    Ok(())
}

pub fn report(args: ReportArgs) -> Result<()> {
    let text = read_text(&args.input)?;
    let what = format!("report {}", args.input.display());
    let value: Value = parse_json(&text, &what)?;
    let kind = value
        .get("kind")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    match kind.as_str() {
        MERGE_REPORT_KIND => print!("{}", merge_table(&MergeReport::from_json(&text)?)),
        THEOREM_REPORT_KIND => print!("{}", theorem_table(&parse_json::<VerificationReport>(&text, &what)?)),
        RANK_ANALYSIS_KIND => {
            let histograms: RankHistograms = serde_json::from_value(value["histograms"].clone())
                .map_err(|e| invalid(format!("{what}: histograms: {e}")))?;
            print!("{}", histogram_table(&histograms));
        }
        other => {
            return Err(invalid(format!(
                "{what}: unsupported kind {other:?} (expected {MERGE_REPORT_KIND}, {THEOREM_REPORT_KIND} or {RANK_ANALYSIS_KIND})"
            )))
        }
    }
    Ok(())
}

fn merge_table(report: &MergeReport) -> String {
    let mut t = Table::new([
        "layer",
        "class",
        "status",
        "initial",
        "final",
        "alignment",
        "penalty",
        "rank(m_c)",
        "rank(m_s)",
        "params",
    ]);
    for l in &report.layers {
        let mut cells = vec![
            l.name.clone(),
            l.class.to_string(),
            status_label(l.status).to_string(),
        ];
        match &l.training {
            Some(tr) => cells.extend([
                format!("{:.6}", tr.initial_loss),
                format!("{:.6}", tr.final_loss),
                format!("{:.6}", tr.alignment_loss),
                format!("{:.6}", tr.penalty_loss),
                tr.mask_rank_content.to_string(),
                tr.mask_rank_style.to_string(),
            ]),
            None => cells.extend(std::iter::repeat_n(String::new(), 6)),
        }
        cells.push(l.trainable_parameters.to_string());
        t.row(cells);
    }
    let mut out = format!(
        "mode {}  trained {}  copied {}  trainable parameters {}\n",
        report.mode, report.trained_layers, report.copied_layers, report.trainable_parameters
    );
    out.push_str(&t.render());
    if let Some(h) = &report.histograms {
        out.push('\n');
        out.push_str(&histogram_table(h));
    }
    out
}

fn theorem_table(report: &VerificationReport) -> String {
    let mut t = Table::new([
        "index", "seed", "dims", "r", "d_s", "s", "E_rank", "E_out", "bound", "holds",
    ]);
    for r in &report.instances {
        t.row([
            r.index.to_string(),
            r.seed.to_string(),
            format!("{}x{}", r.dims[0], r.dims[1]),
            r.r.to_string(),
            r.d_s.to_string(),
            r.s.to_string(),
            format!("{:.6}", r.e_rank),
            format!("{:.6}", r.e_out),
            format!("{:.6}", r.e_out_lower_bound),
            if r.holds { "yes" } else { "no" }.to_string(),
        ]);
    }
    format!(
        "trials {}  holds fraction {:.4}  bound respected {:.4}  counterexamples {}\n{}",
        report.trials,
        report.holds_fraction,
        report.bound_respected_fraction,
        report.counterexamples.len(),
        t.render()
    )
}

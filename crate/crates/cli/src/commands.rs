use std::collections::BTreeMap;
use std::path::Path;

use exitsim::controller::ControllerParams;
use exitsim::exit::EEConfig;
use exitsim::generative::{self, run_generative, tokens_from_requests, GenParams, TokenTrace, TptReport};
use exitsim::graph::{initial_placement_capped, ModelProfile, RampBudget, RampSite};
use exitsim::sim::{self, compare_baselines, profile_sites, Comparison, Mode, ServingParams, SimReport};
use exitsim::stats::{cdf, percentiles};
use exitsim::trace::{linear_agreement, load_workload, synthesize_workload, Drift, SynthParams};
use exitsim::tuner::{self, grid_oracle, TuneResult, TunerParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{sidecar_path, Envelope, RunManifest};
use crate::output::{read_json, write_csv, write_json, write_text};
use crate::{
    CompareArgs, GenTraceArgs, ReportArgs, RerunArgs, ServeArgs, SimulateArgs, SimulateGenArgs, TuneArgs, ValidateArgs,
};

pub const TUNE_SCHEMA: &str = "exitsim.tune-report/v1";
pub const PERCENTILE_SCHEMA: &str = "exitsim.percentiles/v1";

pub fn gen_trace(argv: &[String], a: GenTraceArgs) -> CliResult<()> {
    let profile = ModelProfile::load(&a.profile)?;
    let mut inputs = vec![a.profile.as_path()];
    let agreement = match &a.agreement_file {
        Some(path) => {
            inputs.push(path);
            serde_json::from_value::<BTreeMap<String, f64>>(read_json(path)?)
                .map_err(|e| CliError::input(path, format!("expected an object of layer -> agreement: {e}")))?
        }
        None => linear_agreement(&profile, a.agreement_lo, a.agreement_hi),
    };
    let drift = match (a.drift_at, a.drift_lo, a.drift_hi) {
        (Some(at), Some(lo), Some(hi)) => Some(Drift {
            at,
            agreement: linear_agreement(&profile, lo, hi),
        }),
        _ => None,
    };
    let params = SynthParams {
        mean_interarrival_ms: a.interarrival_ms,
        classes: a.classes,
        score_noise: a.noise,
        separation: a.separation,
        drift,
        ..SynthParams::new(a.n, a.continuity, agreement, a.seed)
    };
    let workload = synthesize_workload(&profile, &params)?;
    let text = if a.tokens {
        if a.seq_len == 0 {
            return Err(CliError::Usage("--seq-len must be at least 1".into()));
        }
        TokenTrace::new(tokens_from_requests(&workload.records, a.seq_len), &profile)?.to_jsonl()
    } else {
        workload.to_jsonl()
    };

    #[derive(Serialize)]
    struct GenTraceParams<'a> {
        synth: &'a SynthParams,
        tokens: bool,
        seq_len: usize,
    }
    let recorded = GenTraceParams {
        synth: &params,
        tokens: a.tokens,
        seq_len: a.seq_len,
    };
    let manifest = RunManifest::new("gen-trace", argv, &recorded, &inputs, Some(a.seed))?;
    write_text(&a.out, &text)?;
    write_json(&sidecar_path(&a.out), &manifest)?;
    println!("wrote {} records to {}", workload.len(), a.out.display());
    Ok(())
}

pub fn validate(a: ValidateArgs) -> CliResult<()> {
    if let Some(path) = &a.report {
        let schema = validate_report(path)?;
        println!("ok: {} is a valid {schema} document", path.display());
        return Ok(());
    }
    let Some(profile_path) = &a.profile else {
        return Err(CliError::Usage("nothing to validate: pass --profile with --trace or --tokens, or --report".into()));
    };
    let profile = ModelProfile::load(profile_path)?;
    let sites = profile_sites(&profile)?;
    if let Some(path) = &a.trace {
        let w = load_workload(path, &profile)?;
        println!("ok: {} requests, {} ramp sites", w.len(), sites.len());
    } else if let Some(path) = &a.tokens {
        let t = generative::load_token_trace(path, &profile)?;
        println!("ok: {} sequences, {} tokens, {} ramp sites", t.sequences.len(), t.len(), sites.len());
    } else {
        println!("ok: profile with {} layers, {} ramp sites", profile.len(), sites.len());
    }
    Ok(())
}

/// Checks that a JSON output parses as the document type its schema tag
/// names, and returns the tag.
fn validate_report(path: &Path) -> CliResult<String> {
    let value = read_json(path)?;
    let schema = schema_of(&value).ok_or_else(|| CliError::input(path, "no schema tag"))?;
    let check = |r: Result<(), serde_json::Error>| r.map_err(|e| CliError::input(path, format!("does not match {schema}: {e}")));
    match schema.as_str() {
        sim::REPORT_SCHEMA => check(serde_json::from_value::<Envelope<SimReport>>(value).map(drop))?,
        sim::COMPARISON_SCHEMA => check(serde_json::from_value::<Envelope<Comparison>>(value).map(drop))?,
        generative::TPT_SCHEMA => check(serde_json::from_value::<Envelope<TptReport>>(value).map(drop))?,
        TUNE_SCHEMA => check(serde_json::from_value::<Envelope<TuneReport>>(value).map(drop))?,
        PERCENTILE_SCHEMA => check(serde_json::from_value::<Envelope<PercentileReport>>(value).map(drop))?,
        other => return Err(CliError::input(path, format!("unknown schema `{other}`"))),
    }
    Ok(schema)
}

fn schema_of(value: &serde_json::Value) -> Option<String> {
    value
        .pointer("/report/schema")
        .or_else(|| value.get("schema"))
        .and_then(|s| s.as_str())
        .map(str::to_string)
}

fn serving_params(s: &ServeArgs, mode: Mode) -> CliResult<ServingParams> {
    let params = ServingParams {
        mode,
        slo_ms: s.slo,
        max_batch: s.max_batch,
        acc_constraint: 1.0 - s.acc_constraint,
        budget: RampBudget::new(s.budget)?,
        tuner: TunerParams {
            acc_loss_budget: s.acc_constraint,
            init_step: s.init_step,
            min_step: s.min_step,
            accuracy_window: s.acc_window,
            tuning_history: s.history,
        },
        ramp_period: s.ramp_period,
        adaptation_enabled: !s.no_adapt,
        bootstrap: s.bootstrap,
        score_window: s.score_window,
        max_ramps: s.max_ramps,
        drop_late: s.drop_late,
    };
    params.validate()?;
    Ok(params)
}

pub fn simulate(argv: &[String], a: SimulateArgs) -> CliResult<()> {
    let params = serving_params(&a.serve, a.mode)?;
    let profile = ModelProfile::load(&a.serve.profile)?;
    let workload = load_workload(&a.serve.trace, &profile)?;
    let report = sim::run(&workload, &profile, &params)?;
    let manifest = RunManifest::new("simulate", argv, &params, &[&a.serve.profile, &a.serve.trace], None)?;
    if let Some(csv) = &a.csv {
        write_csv(csv, &report.rows)?;
    }
    let s = &report.summary;
    println!(
        "{}: {} served, p50 {:.3} ms, p95 {:.3} ms, accuracy {:.4}",
        params.mode, s.served, s.latency_ms.p50, s.latency_ms.p95, s.accuracy
    );
    write_json(&a.out, &Envelope { manifest, report })
}

#[derive(Serialize)]
struct ModeRow {
    mode: Mode,
    served: usize,
    p25_ms: f64,
    p50_ms: f64,
    p95_ms: f64,
    mean_ms: f64,
    accuracy: f64,
    throughput_rps: f64,
    capacity_rps: f64,
    slo_violations: usize,
}

impl ModeRow {
    fn new(mode: Mode, r: &SimReport) -> Self {
        let s = &r.summary;
        Self {
            mode,
            served: s.served,
            p25_ms: s.latency_ms.p25,
            p50_ms: s.latency_ms.p50,
            p95_ms: s.latency_ms.p95,
            mean_ms: s.latency_ms.mean,
            accuracy: s.accuracy,
            throughput_rps: s.throughput_rps,
            capacity_rps: s.capacity_rps,
            slo_violations: s.slo_violations,
        }
    }
}

pub fn compare(argv: &[String], a: CompareArgs) -> CliResult<()> {
    let params = serving_params(&a.serve, Mode::Apparate)?;
    let profile = ModelProfile::load(&a.serve.profile)?;
    let workload = load_workload(&a.serve.trace, &profile)?;
    let report = compare_baselines(&workload, &profile, &params)?;
    let manifest = RunManifest::new("compare", argv, &params, &[&a.serve.profile, &a.serve.trace], None)?;
    let rows = [
        ModeRow::new(Mode::Vanilla, &report.vanilla),
        ModeRow::new(Mode::Apparate, &report.apparate),
        ModeRow::new(Mode::Optimal, &report.optimal),
    ];
    for r in &rows {
        println!(
            "{:>8}: p50 {:.3} ms, p95 {:.3} ms, accuracy {:.4}",
            r.mode.to_string(),
            r.p50_ms,
            r.p95_ms,
            r.accuracy
        );
    }
    if let Some(csv) = &a.csv {
        write_csv(csv, &rows)?;
    }
    write_json(&a.out, &Envelope { manifest, report })
}

fn parse_penalties(specs: &[String]) -> CliResult<BTreeMap<u32, f64>> {
    let mut table = BTreeMap::new();
    for spec in specs {
        let bad = || CliError::Usage(format!("--penalty entries look like BATCH=MULTIPLIER, got `{spec}`"));
        let (b, m) = spec.split_once('=').ok_or_else(bad)?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        let m: f64 = m.trim().parse().map_err(|_| bad())?;
        table.insert(b, m);
    }
    Ok(table)
}

fn select_sites(sites: &[RampSite], layers: &[String]) -> CliResult<Vec<RampSite>> {
    let mut chosen = Vec::with_capacity(layers.len());
    for layer in layers {
        let site = sites
            .iter()
            .find(|s| &s.layer == layer)
            .ok_or_else(|| CliError::Usage(format!("`{layer}` is not a feasible ramp site")))?;
        chosen.push(site.clone());
    }
    chosen.sort_by_key(|s| s.position);
    chosen.dedup_by_key(|s| s.position);
    Ok(chosen)
}

pub fn simulate_gen(argv: &[String], a: SimulateGenArgs) -> CliResult<()> {
    let batch_penalty = if a.penalty.is_empty() {
        GenParams::default().batch_penalty
    } else {
        parse_penalties(&a.penalty)?
    };
    let budget = RampBudget::new(a.budget)?;
    let params = GenParams {
        flush_cap: a.flush_cap,
        batch_penalty,
        adaptation_enabled: !a.no_adapt,
        controller: ControllerParams {
            acc_constraint: 1.0 - a.acc_constraint,
            tuner: TunerParams {
                acc_loss_budget: a.acc_constraint,
                init_step: a.init_step,
                min_step: a.min_step,
                accuracy_window: a.acc_window,
                tuning_history: a.history,
            },
            budget,
            ramp_period: a.ramp_period,
            tune_thresholds: true,
            adjust_ramps: true,
            max_ramps: Some(a.max_ramps),
        },
        bootstrap: a.bootstrap,
    };
    params.validate()?;
    let profile = ModelProfile::load(&a.profile)?;
    let trace = generative::load_token_trace(&a.trace, &profile)?;
    let sites = profile_sites(&profile)?;
    let config = if a.ramps.is_empty() {
        initial_placement_capped(&sites, budget, &profile, a.max_ramps)
    } else {
        EEConfig::at_zero(&select_sites(&sites, &a.ramps)?)?
    };
    let report = run_generative(&trace, &profile, &config, &params)?;

    #[derive(Serialize)]
    struct GenRunParams<'a> {
        gen: &'a GenParams,
        ramps: &'a [String],
    }
    let recorded = GenRunParams {
        gen: &params,
        ramps: &a.ramps,
    };
    let manifest = RunManifest::new("simulate-gen", argv, &recorded, &[&a.profile, &a.trace], None)?;
    if let Some(csv) = &a.csv {
        write_csv(csv, &report.tokens)?;
    }
    let s = &report.summary;
    println!(
        "{} tokens, exit rate {:.3}, median TPT {:.3} ms (vanilla {:.3} ms), p95 {:.3} ms",
        s.tokens, s.exit_rate, s.tpt_ms.p50, s.vanilla_tpt_ms, s.tpt_ms.p95
    );
    write_json(&a.out, &Envelope { manifest, report })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PercentilePoint {
    pub p: f64,
    pub value_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub name: String,
    pub count: usize,
    pub percentiles: Vec<PercentilePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PercentileReport {
    pub schema: String,
    pub source_schema: String,
    pub series: Vec<SeriesSummary>,
}

#[derive(Serialize)]
struct CdfRow {
    latency_ms: f64,
    cumulative_fraction: f64,
}

#[derive(Serialize)]
struct NamedCdfRow<'a> {
    series: &'a str,
    latency_ms: f64,
    cumulative_fraction: f64,
}

/// A named list of latencies.
type Series = (String, Vec<f64>);

/// Latency series held in a report, or a bare JSON array of numbers.
fn latency_series(path: &Path, value: serde_json::Value) -> CliResult<(String, Vec<Series>)> {
    if value.is_array() {
        let xs: Vec<f64> = serde_json::from_value(value)
            .map_err(|e| CliError::input(path, format!("expected an array of latencies: {e}")))?;
        return Ok(("latency-list".into(), vec![("latency".into(), xs)]));
    }
    let schema = schema_of(&value).ok_or_else(|| CliError::input(path, "no schema tag"))?;
    let report = value.get("report").cloned().unwrap_or(value);
    let bad = |e: serde_json::Error| CliError::input(path, format!("does not match {schema}: {e}"));
    let series = match schema.as_str() {
        sim::REPORT_SCHEMA => {
            let r: SimReport = serde_json::from_value(report).map_err(bad)?;
            vec![(r.params.mode.to_string(), r.latencies())]
        }
        sim::COMPARISON_SCHEMA => {
            let r: Comparison = serde_json::from_value(report).map_err(bad)?;
            vec![
                (Mode::Vanilla.to_string(), r.vanilla.latencies()),
                (Mode::Apparate.to_string(), r.apparate.latencies()),
                (Mode::Optimal.to_string(), r.optimal.latencies()),
            ]
        }
        generative::TPT_SCHEMA => {
            let r: TptReport = serde_json::from_value(report).map_err(bad)?;
            vec![("tpt".into(), r.latencies())]
        }
        other => return Err(CliError::input(path, format!("no latencies in a `{other}` document"))),
    };
    Ok((schema, series))
}

pub fn report(argv: &[String], a: ReportArgs) -> CliResult<()> {
    if let Some(p) = a.percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(CliError::Usage(format!("percentile {p} is outside [0, 100]")));
    }
    let (source_schema, series) = latency_series(&a.input, read_json(&a.input)?)?;
    let summaries: Vec<SeriesSummary> = series
        .iter()
        .map(|(name, xs)| SeriesSummary {
            name: name.clone(),
            count: xs.len(),
            percentiles: a
                .percentiles
                .iter()
                .zip(percentiles(xs, &a.percentiles))
                .map(|(&p, value_ms)| PercentilePoint { p, value_ms })
                .collect(),
        })
        .collect();
    for s in &summaries {
        let cols: Vec<String> = s
            .percentiles
            .iter()
            .map(|pt| match pt.value_ms {
                Some(v) => format!("p{}={v}", pt.p),
                None => format!("p{}=n/a", pt.p),
            })
            .collect();
        println!("{} (n={}): {}", s.name, s.count, cols.join(" "));
    }
    if let Some(path) = &a.cdf {
        if let [(_, xs)] = series.as_slice() {
            write_csv(
                path,
                cdf(xs).into_iter().map(|(latency_ms, cumulative_fraction)| CdfRow {
                    latency_ms,
                    cumulative_fraction,
                }),
            )?;
        } else {
            let rows = series.iter().flat_map(|(name, xs)| {
                cdf(xs).into_iter().map(move |(latency_ms, cumulative_fraction)| NamedCdfRow {
                    series: name,
                    latency_ms,
                    cumulative_fraction,
                })
            });
            write_csv(path, rows)?;
        }
    }
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct ReportParams<'a> {
            percentiles: &'a [f64],
        }
        let manifest = RunManifest::new(
            "report",
            argv,
            &ReportParams {
                percentiles: &a.percentiles,
            },
            &[&a.input],
            None,
        )?;
        let report = PercentileReport {
            schema: PERCENTILE_SCHEMA.into(),
            source_schema,
            series: summaries,
        };
        write_json(out, &Envelope { manifest, report })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRun {
    pub step: f64,
    pub result: TuneResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    pub schema: String,
    pub ramps: Vec<String>,
    pub records: usize,
    pub vanilla_ms: f64,
    pub tune: TuneResult,
    pub grid: Option<GridRun>,
}

pub fn tune(argv: &[String], a: TuneArgs) -> CliResult<()> {
    let params = TunerParams {
        acc_loss_budget: a.acc_constraint,
        init_step: a.init_step,
        min_step: a.min_step,
        ..TunerParams::default()
    };
    params.validate()?;
    let profile = ModelProfile::load(&a.profile)?;
    let workload = load_workload(&a.trace, &profile)?;
    let sites = select_sites(&profile_sites(&profile)?, &a.ramps)?;
    let records = &workload.records[..a.records.unwrap_or(usize::MAX).min(workload.len())];
    let tuned = tuner::tune(records, &sites, &params, &profile);
    let grid = match a.grid_step {
        Some(step) => Some(GridRun {
            step,
            result: grid_oracle(records, &sites, params.acc_loss_budget, step, &profile, a.grid_cap)?,
        }),
        None => None,
    };

    #[derive(Serialize)]
    struct TuneRunParams<'a> {
        tuner: &'a TunerParams,
        ramps: &'a [String],
        records: Option<usize>,
        grid_step: Option<f64>,
        grid_cap: u64,
    }
    let recorded = TuneRunParams {
        tuner: &params,
        ramps: &a.ramps,
        records: a.records,
        grid_step: a.grid_step,
        grid_cap: a.grid_cap,
    };
    let manifest = RunManifest::new("tune", argv, &recorded, &[&a.profile, &a.trace], None)?;
    println!(
        "thresholds {:?}, savings {:.3} ms, accuracy {:.4}",
        tuned.thresholds, tuned.latency_savings_ms, tuned.accuracy
    );
    if let Some(g) = &grid {
        println!(
            "grid (step {}): thresholds {:?}, savings {:.3} ms",
            g.step, g.result.thresholds, g.result.latency_savings_ms
        );
    }
    let report = TuneReport {
        schema: TUNE_SCHEMA.into(),
        ramps: sites.iter().map(|s| s.layer.clone()).collect(),
        records: records.len(),
        vanilla_ms: profile.total_latency(1),
        tune: tuned,
        grid,
    };
    write_json(&a.out, &Envelope { manifest, report })
}

pub fn rerun(a: RerunArgs) -> CliResult<()> {
    let value = read_json(&a.file)?;
    let raw = value.get("manifest").cloned().unwrap_or(value);
    let manifest: RunManifest =
        serde_json::from_value(raw).map_err(|e| CliError::input(&a.file, format!("no run manifest: {e}")))?;
    if manifest.tool != env!("CARGO_PKG_NAME") {
        return Err(CliError::input(&a.file, format!("written by `{}`", manifest.tool)));
    }
    if manifest.argv.first().map(String::as_str) == Some("rerun") {
        return Err(CliError::input(&a.file, "manifest records a rerun"));
    }
    manifest.verify_inputs()?;
    eprintln!("exitsim: re-running `{}`", manifest.argv.join(" "));
    crate::execute(&manifest.argv)
}

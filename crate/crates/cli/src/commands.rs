use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use squant::analysis::{
    compression_rate, measure_activation_density, network_flops, order_effect, packed_layer_stats,
    sparsity_sweep, weight_histogram, write_histogram_csv, write_sweep_csv, CompressionReport,
    FlopReport, HistogramSpec,
};
use squant::io::container::{load_packed, PackedModel};
use squant::io::DatasetHandle;
use squant::nn::Network;
use squant::trainer::{
    evaluate, finalize, resolve_exemptions, train_with_observer, IterRecord, RunConfig,
};

use crate::config::load_run_config;
use crate::output::Staging;
use crate::{Common, Failure};

const ACTIVATION_BATCH: usize = 256;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    input: Option<&'a Path>,
    output_dir: &'a Path,
    seed: Option<u64>,
    overrides: Vec<String>,
    version: &'a str,
}

fn manifest<'a>(
    command: &'a str,
    common: &'a Common,
    input: Option<&'a Path>,
    out: &'a Path,
) -> RunManifest<'a> {
    RunManifest {
        command,
        config_path: common.config.as_deref(),
        input,
        output_dir: out,
        seed: common.seed,
        overrides: common
            .overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect(),
        version: env!("CARGO_PKG_VERSION"),
    }
}

fn require_out(common: &Common) -> Result<&Path, Failure> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::config("this command needs --out"))
}

fn require_config(common: &Common) -> Result<(RunConfig, Value), Failure> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Failure::config("this command needs --config"))?;
    load_run_config(path, &common.overrides, common.seed)
}

/// A directory input resolves to `file` inside it.
fn resolve_input(input: &Path, file: &str) -> Result<PathBuf, Failure> {
    let path = if input.is_dir() {
        input.join(file)
    } else {
        input.to_path_buf()
    };
    if !path.is_file() {
        return Err(Failure::config(format!(
            "missing artifact {}",
            path.display()
        )));
    }
    Ok(path)
}

fn read_packed(path: &Path) -> Result<PackedModel, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    load_packed(&bytes).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn build_network(
    cfg: &RunConfig,
) -> Result<(Network, DatasetHandle, Option<DatasetHandle>), Failure> {
    let (train, test) = cfg.data.load(cfg.squant.seed)?;
    let net = cfg.build_network(train.sample_shape(), train.classes)?;
    Ok((net, train, test))
}

struct MetricsWriter {
    csv: csv::Writer<fs::File>,
    header_written: bool,
}

impl MetricsWriter {
    fn record(&mut self, r: &IterRecord) -> csv::Result<()> {
        if !self.header_written {
            let mut header = vec![
                "iter".to_string(),
                "phase".into(),
                "loss".into(),
                "top1".into(),
                "overall_sparsity".into(),
            ];
            header.extend(
                r.layer_sparsity
                    .iter()
                    .map(|(n, _)| format!("sparsity_{n}")),
            );
            self.csv.write_record(&header)?;
            self.header_written = true;
        }
        let mut row = vec![
            r.iter.to_string(),
            r.phase.as_str().to_string(),
            r.loss.to_string(),
            r.top1.to_string(),
            r.overall_sparsity.to_string(),
        ];
        row.extend(r.layer_sparsity.iter().map(|(_, s)| s.to_string()));
        self.csv.write_record(&row)
    }
}

pub fn train(common: &Common) -> Result<(), Failure> {
    let out = require_out(common)?;
    let (cfg, doc) = require_config(common)?;
    let (mut net, train_set, test_set) = build_network(&cfg)?;
    let staging = Staging::new(out)?;
    let metrics_path = staging.path("metrics.csv");
    let mut metrics = MetricsWriter {
        csv: csv::Writer::from_path(&metrics_path)
            .map_err(|e| Failure::other(format!("{}: {e}", metrics_path.display())))?,
        header_written: false,
    };
    let report = train_with_observer(
        &mut net,
        &train_set,
        test_set.as_ref(),
        &cfg.squant,
        &mut |r| {
            metrics
                .record(r)
                .map_err(|e| squant::Error::Io(std::io::Error::other(e)))
        },
    )?;
    metrics
        .csv
        .flush()
        .map_err(|e| Failure::io(&metrics_path, e))?;

    staging.write("checkpoint.sqnt", net.checkpoint()?.to_bytes()?)?;
    staging.write("model.sqnt", finalize(&net)?.to_bytes()?)?;
    staging.write_json("report.json", &report.compression)?;
    staging.write_json("train_report.json", &report)?;
    staging.write_json("config.json", &doc)?;
    staging.write_json("manifest.json", &manifest("train", common, None, out))?;
    staging.commit()?;

    let c = &report.compression;
    println!(
        "trained {} iterations: test top1 {}, train top1 {:.4}, sparsity {:.4}, compression {:.2}x",
        cfg.squant.total_iters,
        report
            .final_test_top1
            .map_or("n/a".to_string(), |t| format!("{t:.4}")),
        report.final_train_top1,
        c.sparsity_all,
        c.compression_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct SquantizeSummary {
    top1_before: f64,
    top1_after: f64,
    evaluated_on: &'static str,
}

pub fn squantize(common: &Common, input: &Path) -> Result<(), Failure> {
    let out = require_out(common)?;
    let (cfg, _) = require_config(common)?;
    let ckpt = read_packed(&resolve_input(input, "checkpoint.sqnt")?)?;
    let (mut net, train_set, test_set) = build_network(&cfg)?;
    net.load(&ckpt)?;
    resolve_exemptions(&mut net, &cfg.squant)?;
    let (eval_set, evaluated_on) = match &test_set {
        Some(t) => (t, "test"),
        None => (&train_set, "train"),
    };
    let (top1_before, _) = evaluate(&mut net, eval_set)?;
    net.refresh_compression(&cfg.squant.weight_policy(), false)?;
    let (top1_after, _) = evaluate(&mut net, eval_set)?;

    let staging = Staging::new(out)?;
    staging.write("model.sqnt", finalize(&net)?.to_bytes()?)?;
    staging.write_json("report.json", &compression_rate(&net.weight_stats())?)?;
    staging.write_json(
        "squantize.json",
        &SquantizeSummary {
            top1_before,
            top1_after,
            evaluated_on,
        },
    )?;
    staging.write_json(
        "manifest.json",
        &manifest("squantize", common, Some(input), out),
    )?;
    staging.commit()?;
    println!("{evaluated_on} top1 {top1_before:.4} -> {top1_after:.4}");
    Ok(())
}

pub struct AnalyzeOpts {
    pub input: PathBuf,
    pub layers: Vec<String>,
    pub sigmas: Vec<f64>,
    pub bins: usize,
    pub k: u32,
    pub sigma: f64,
}

pub fn analyze(common: &Common, opts: &AnalyzeOpts) -> Result<(), Failure> {
    let out = require_out(common)?;
    let model = read_packed(&resolve_input(&opts.input, "model.sqnt")?)?;
    let stats = packed_layer_stats(&model);
    if stats.is_empty() {
        return Err(Failure::config("artifact holds no weight layers"));
    }
    let selected: Vec<String> = if opts.layers.is_empty() {
        stats.iter().map(|s| s.name.clone()).collect()
    } else {
        for l in &opts.layers {
            if !stats.iter().any(|s| &s.name == l) {
                return Err(Failure::config(format!("unknown layer `{l}`")));
            }
        }
        opts.layers.clone()
    };
    let mut weights = Vec::with_capacity(selected.len());
    for name in &selected {
        let rec = model
            .get(&format!("{name}.weight"))
            .expect("selected layers exist");
        weights.push(rec.decode()?);
    }

    let staging = Staging::new(out)?;
    for (name, w) in selected.iter().zip(&weights) {
        let spec = HistogramSpec::symmetric(w, opts.bins);
        let bins = weight_histogram(w, &spec)?;
        let file = fs::File::create(staging.path(&format!("histogram_{name}.csv")))
            .map_err(|e| Failure::other(e.to_string()))?;
        write_histogram_csv(file, &bins, &spec)?;
    }
    let sweep = sparsity_sweep(&weights, &opts.sigmas)?;
    let file =
        fs::File::create(staging.path("sweep.csv")).map_err(|e| Failure::other(e.to_string()))?;
    write_sweep_csv(file, &sweep)?;

    let mut table = csv::Writer::from_path(staging.path("order_effect.csv"))
        .map_err(|e| Failure::other(e.to_string()))?;
    let csv_err = |e: csv::Error| Failure::other(e.to_string());
    table
        .write_record([
            "layer",
            "k",
            "sigma",
            "sparsity",
            "qons_used",
            "sonq_used",
            "total_levels",
            "qons_lowest",
            "sonq_lowest",
        ])
        .map_err(csv_err)?;
    let opt = |v: Option<u32>| v.map_or(String::new(), |v| v.to_string());
    for (name, w) in selected.iter().zip(&weights) {
        match order_effect(w, opts.k, opts.sigma) {
            Ok(e) => table
                .write_record([
                    name.clone(),
                    opts.k.to_string(),
                    opts.sigma.to_string(),
                    e.sparsity.to_string(),
                    e.qons.used.to_string(),
                    e.sonq.used.to_string(),
                    e.qons.total.to_string(),
                    opt(e.qons_lowest),
                    opt(e.sonq_lowest),
                ])
                .map_err(csv_err)?,
            Err(squant::Error::DegenerateLayer { reason, .. }) => {
                eprintln!("order effect skipped for `{name}`: {reason}")
            }
            Err(e) => return Err(e.into()),
        }
    }
    table.flush().map_err(|e| Failure::other(e.to_string()))?;
    staging.write_json("report.json", &compression_rate(&stats)?)?;
    staging.write_json(
        "manifest.json",
        &manifest("analyze", common, Some(&opts.input), out),
    )?;
    staging.commit()?;
    println!(
        "analyzed {} layers; sweep {}",
        selected.len(),
        sweep
            .iter()
            .map(|p| format!("{}:{:.4}", p.sigma, p.sparsity))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

pub fn export(common: &Common, input: &Path) -> Result<(), Failure> {
    let out = require_out(common)?;
    let path = if input.is_dir() {
        resolve_input(input, "model.sqnt")?
    } else {
        resolve_input(input, "")?
    };
    let model = read_packed(&path)?;
    let all_full = packed_layer_stats(&model).iter().all(|s| s.exempt);
    let packed = match (&common.config, all_full) {
        (Some(_), true) => {
            let (cfg, _) = require_config(common)?;
            let (mut net, _, _) = build_network(&cfg)?;
            net.load(&model)?;
            resolve_exemptions(&mut net, &cfg.squant)?;
            net.refresh_compression(&cfg.squant.weight_policy(), false)?;
            finalize(&net)?
        }
        _ => model,
    };
    let bytes = packed.to_bytes()?;
    let staging = Staging::new(out)?;
    staging.write("model.sqnt", &bytes)?;
    staging.write_json(
        "manifest.json",
        &manifest("export", common, Some(input), out),
    )?;
    staging.commit()?;
    println!(
        "wrote {} records, {} bytes",
        packed.records.len(),
        bytes.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct FullReport {
    compression: CompressionReport,
    flops: Option<FlopReport>,
}

fn print_table(r: &FullReport) {
    println!(
        "{:<12} {:>6} {:>10} {:>10} {:>4} {:>7} {:>9}",
        "layer", "kind", "n_total", "n_nonzero", "k", "exempt", "sparsity"
    );
    for l in &r.compression.layers {
        println!(
            "{:<12} {:>6} {:>10} {:>10} {:>4} {:>7} {:>9.4}",
            l.name,
            format!("{:?}", l.kind).to_lowercase(),
            l.n_total,
            l.n_nonzero,
            l.k_bits,
            l.exempt,
            l.sparsity()
        );
    }
    let c = &r.compression;
    println!(
        "sparsity conv {:.4}  fc {:.4}  all {:.4}",
        c.sparsity_conv, c.sparsity_fc, c.sparsity_all
    );
    println!(
        "compression {:.2}x ({}x), with mask {:.2}x",
        c.compression_rate, c.compression_rate_floor, c.rate_with_mask
    );
    if let Some(f) = &r.flops {
        println!();
        println!(
            "{:<12} {:>14} {:>9} {:>9} {:>14}",
            "layer", "flops_dense", "w_dens", "a_dens", "flops_eff"
        );
        for l in &f.layers {
            println!(
                "{:<12} {:>14.0} {:>9.4} {:>9.4} {:>14.0}",
                l.name, l.flops_dense, l.w_density, l.a_density, l.flops_effective
            );
        }
        println!(
            "flops per sample: dense {:.0}, effective {:.0} ({:.2}%)",
            f.flops_dense,
            f.flops_effective,
            100.0 * f.flops_effective / f.flops_dense
        );
    }
}

pub fn report(common: &Common, input: &Path, flops: bool, json: bool) -> Result<(), Failure> {
    let model = read_packed(&resolve_input(input, "model.sqnt")?)?;
    let stats = packed_layer_stats(&model);
    let mut compression = compression_rate(&stats)?;
    let flop_report = if flops {
        let (cfg, _) = require_config(common)?;
        let (mut net, train_set, test_set) = build_network(&cfg)?;
        net.load(&model)?;
        let names: Vec<String> = net.layers().iter().map(|l| l.name.clone()).collect();
        let mut w_density = Vec::with_capacity(names.len());
        for n in &names {
            let s = stats
                .iter()
                .find(|s| &s.name == n)
                .ok_or_else(|| Failure::config(format!("artifact lacks layer `{n}`")))?;
            w_density.push(s.n_nonzero as f64 / s.n_total as f64);
        }
        let data = test_set.as_ref().unwrap_or(&train_set);
        let a_density = measure_activation_density(&mut net, data, ACTIVATION_BATCH)?;
        let f = network_flops_for_artifact(&net, &stats, &w_density, &a_density)?;
        compression.flops_dense = Some(f.flops_dense);
        compression.flops_effective = Some(f.flops_effective);
        Some(f)
    } else {
        None
    };
    let full = FullReport {
        compression,
        flops: flop_report,
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&full).map_err(|e| Failure::other(e.to_string()))?
        );
    } else {
        print_table(&full);
    }
    if let Some(out) = &common.out {
        let staging = Staging::new(out)?;
        staging.write_json("report.json", &full.compression)?;
        if let Some(f) = &full.flops {
            staging.write_json("flops.json", f)?;
        }
        staging.write_json(
            "manifest.json",
            &manifest("report", common, Some(input), out),
        )?;
        staging.commit()?;
    }
    Ok(())
}

fn network_flops_for_artifact(
    net: &Network,
    stats: &[squant::nn::WeightLayerStat],
    w_density: &[f64],
    a_density: &[f64],
) -> Result<FlopReport, Failure> {
    let mut net = net.clone();
    let exempt: Vec<String> = stats
        .iter()
        .filter(|s| s.exempt)
        .map(|s| s.name.clone())
        .collect();
    net.set_exemptions(&exempt)?;
    Ok(network_flops(&net, Some(w_density), Some(a_density))?)
}

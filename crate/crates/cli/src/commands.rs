use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gapa::backbone::{
    load_network_with_meta, parse_layer_specs, save_network_with_meta, train_backbone as fit_backbone, BackboneNetwork,
    NetworkMeta,
};
use gapa::calibrate::{fit_free, fit_variational, grad_check as check_gradient, Calibration, VariationalObjective};
use gapa::dataio::{
    fit_standardizer, format_real, load_csv, load_csv_features, make_toy_gap, split, write_csv, Dataset, Standardizer,
};
use gapa::gpact::{fit_gapa_layer, load_gapa, save_gapa, GapaDocument};
use gapa::metrics::{evaluate as evaluate_model, write_report};
use gapa::model::GapaModel;
use gapa::par::Execution;
use gapa::{Error, Result};

use crate::config::{hex_sha256, RunConfig};
use crate::ConfigArgs;

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex_sha256(&bytes))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

fn default_trainlog_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trainlog");
    PathBuf::from(s)
}

fn rmse(net: &BackboneNetwork, scaler: &Standardizer, raw: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..raw.len() {
        let y = net.predict(&scaler.apply_features(raw.row(i)))?;
        let (y, _) = scaler.invert_target(y, 0.0);
        total += (y - raw.targets[i]).powi(2);
    }
    Ok((total / raw.len() as f64).sqrt())
}

pub fn gen_toy(n: usize, seed: u64, out: &Path) -> Result<ExitCode> {
    let data = make_toy_gap(n, seed)?;
    write_csv(&data, out)?;
    println!("wrote {n} rows to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train_backbone(
    data_path: &Path,
    target: &str,
    spec: Option<&str>,
    args: &ConfigArgs,
    out: &Path,
) -> Result<ExitCode> {
    let mut cfg = load_config(args)?;
    if let Some(s) = spec {
        cfg.spec = s.to_owned();
        cfg.validate()?;
    }
    let data = load_csv(data_path, target)?;
    let (train, val, _) = split(&data, &cfg.split())?;
    let scaler = fit_standardizer(&train)?;
    let specs = parse_layer_specs(&cfg.spec)?;
    let (net, log) = fit_backbone(&scaler.apply(&train)?, &specs, &cfg.train_config())?;

    let digest = cfg.digest(&[
        ("command", "train-backbone".into()),
        ("data", file_digest(data_path)?),
        ("target", target.into()),
    ]);
    let meta = NetworkMeta {
        standardizer: Some(scaler.clone()),
        feature_columns: data.feature_names().to_vec(),
        target_column: Some(target.to_owned()),
        config_digest: Some(digest.clone()),
        split: Some(cfg.split()),
    };
    save_network_with_meta(&net, Some(&meta), out)?;
    println!("epochs: {}", log.epoch_mse.len());
    println!("train RMSE: {:.6}", rmse(&net, &scaler, &train)?);
    println!("val RMSE: {:.6}", rmse(&net, &scaler, &val)?);
    println!("config digest: {digest}");
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Network, its metadata, and the dataset at `data_path` loaded with the
/// network's target column.
fn load_with_data(net_path: &Path, data_path: &Path) -> Result<(BackboneNetwork, NetworkMeta, Dataset)> {
    let (net, meta) = load_network_with_meta(net_path)?;
    let meta = meta.unwrap_or_default();
    let target = meta.target_column.clone().unwrap_or_else(|| "y".into());
    let data = load_csv(data_path, &target)?;
    if data.n_features() != net.input_dim() {
        return Err(Error::Config(format!(
            "{} has {} feature columns, network expects {}",
            data_path.display(),
            data.n_features(),
            net.input_dim()
        )));
    }
    Ok((net, meta, data))
}

fn standardize(meta: &NetworkMeta, d: &Dataset) -> Result<Dataset> {
    match &meta.standardizer {
        Some(s) => s.apply(d),
        None => Ok(d.clone()),
    }
}

pub fn fit(
    net_path: &Path,
    data_path: &Path,
    mode: Option<&str>,
    args: &ConfigArgs,
    out: &Path,
    trainlog: Option<&Path>,
) -> Result<ExitCode> {
    let mut cfg = load_config(args)?;
    if let Some(m) = mode {
        cfg.calibration = m.to_owned();
        cfg.validate()?;
    }
    let (net, meta, data) = load_with_data(net_path, data_path)?;
    let spec = meta.split.unwrap_or_else(|| cfg.split());
    let (train, val, _) = split(&data, &spec)?;
    let train_s = standardize(&meta, &train)?;
    let exec = Execution::default();
    let layer = fit_gapa_layer(&net, &train_s, &cfg.gapa_config(train_s.len()), exec)?;
    let digest = cfg.digest(&[
        ("command", "fit".into()),
        ("net", file_digest(net_path)?),
        ("data", file_digest(data_path)?),
    ]);

    let doc = if cfg.calibration == "free" {
        let base = GapaModel::new(
            net,
            meta.standardizer.clone(),
            layer,
            Calibration::Uncalibrated,
            cfg.mode,
        )?;
        let fit = fit_free(&base, &standardize(&meta, &val)?, exec)?;
        println!("calibration: free");
        println!("theta1: {:e}", fit.calibration.theta1);
        println!("theta2: {:e}", fit.calibration.theta2);
        println!("validation NLL (standardized): {:.6}", fit.objective);
        println!("status: {:?} after {} steps", fit.status, fit.steps);
        if let Some(w) = &fit.warning {
            eprintln!("warning: {w}");
        }
        base.with_calibration(Calibration::Free(fit.calibration))?
            .document(Some(digest.clone()))
    } else {
        let fit = fit_variational(&net, &layer, &train_s, cfg.mode, &cfg.variational_config(), exec)?;
        let log_path = trainlog
            .map(Path::to_path_buf)
            .unwrap_or_else(|| default_trainlog_path(out));
        let mut text = format!("# config_digest={digest}\n");
        text.push_str(&fit.log.to_text());
        std::fs::write(&log_path, text)?;
        println!("calibration: variational");
        println!(
            "training NLL: {:.6} -> {:.6} over {} epochs",
            fit.log.initial_nll().unwrap_or(f64::NAN),
            fit.log.final_nll().unwrap_or(f64::NAN),
            cfg.epochs
        );
        println!("train log: {}", log_path.display());
        GapaDocument {
            layer: fit.layer,
            calibration: Calibration::Variational,
            mode: cfg.mode,
            config_digest: Some(digest.clone()),
        }
    };
    save_gapa(&doc, out)?;
    println!("config digest: {digest}");
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(net_path: &Path, gapa_path: &Path) -> Result<(GapaModel, NetworkMeta)> {
    let (net, meta) = load_network_with_meta(net_path)?;
    let meta = meta.unwrap_or_default();
    let doc = load_gapa(gapa_path)?;
    let model = GapaModel::from_document(net, meta.standardizer.clone(), doc)?;
    Ok((model, meta))
}

pub fn evaluate(
    net_path: &Path,
    gapa_path: &Path,
    data_path: &Path,
    which: &str,
    args: &ConfigArgs,
    out: &Path,
) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let (model, meta) = load_model(net_path, gapa_path)?;
    let (_, _, data) = load_with_data(net_path, data_path)?;
    let rows = match which {
        "all" => data,
        "test" => {
            let spec = meta
                .split
                .ok_or_else(|| Error::Config("network file records no split; use --split all".into()))?;
            split(&data, &spec)?.2
        }
        other => return Err(Error::Config(format!("unknown split '{other}' (expected test or all)"))),
    };
    let report = evaluate_model(&model, &rows, cfg.metric_grid, Execution::default())?;
    let digest = cfg.digest(&[
        ("command", "evaluate".into()),
        ("net", file_digest(net_path)?),
        ("gapa", file_digest(gapa_path)?),
        ("data", file_digest(data_path)?),
        ("split", which.into()),
    ]);
    write_report(&report, Some(&digest), out)?;
    println!("calibration: {}", model.calibration.name());
    println!("points: {}", report.n_points);
    println!("NLL: {:.6}", report.nll);
    println!("CRPS: {:.6}", report.crps);
    println!("CQM: {:.6}", report.cqm);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn predict(net_path: &Path, gapa_path: &Path, data_path: &Path, out: &Path) -> Result<ExitCode> {
    let (model, meta) = load_model(net_path, gapa_path)?;
    let columns = if meta.feature_columns.is_empty() {
        (0..model.network.input_dim()).map(|i| format!("x{i}")).collect()
    } else {
        meta.feature_columns.clone()
    };
    let x = load_csv_features(data_path, &columns)?;
    let digest = RunConfig::default().digest(&[
        ("command", "predict".into()),
        ("net", file_digest(net_path)?),
        ("gapa", file_digest(gapa_path)?),
        ("data", file_digest(data_path)?),
    ]);
    let preds = gapa::par::try_map_range(Execution::default(), x.rows(), |i| model.predict(x.row(i)))?;
    let mut text = format!("# config_digest={digest}\nmean,variance\n");
    for p in &preds {
        let _ = writeln!(text, "{},{}", format_real(p.mean), format_real(p.variance));
    }
    std::fs::write(out, text)?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn plotdata(
    net_path: &Path,
    gapa_path: &Path,
    grid_min: f64,
    grid_max: f64,
    grid_n: usize,
    out: &Path,
) -> Result<ExitCode> {
    let (model, _) = load_model(net_path, gapa_path)?;
    if model.network.input_dim() != 1 {
        return Err(Error::Config(format!(
            "plot data needs a 1-D input model, this one has {} inputs",
            model.network.input_dim()
        )));
    }
    if grid_n < 2 || !(grid_max > grid_min) || !grid_min.is_finite() || !grid_max.is_finite() {
        return Err(Error::Config(
            "grid needs at least 2 points and grid-min < grid-max".into(),
        ));
    }
    let digest = RunConfig::default().digest(&[
        ("command", "plotdata".into()),
        ("net", file_digest(net_path)?),
        ("gapa", file_digest(gapa_path)?),
        ("grid", format!("{grid_min:?},{grid_max:?},{grid_n}")),
    ]);
    let step = (grid_max - grid_min) / (grid_n - 1) as f64;
    let preds = gapa::par::try_map_range(Execution::default(), grid_n, |i| {
        let x = if i == grid_n - 1 {
            grid_max
        } else {
            grid_min + i as f64 * step
        };
        model.predict(&[x]).map(|p| (x, p))
    })?;
    let mut text = format!("# config_digest={digest}\nx,mean,lower,upper\n");
    for (x, p) in &preds {
        let s = p.std_dev();
        let _ = writeln!(
            text,
            "{},{},{},{}",
            format_real(*x),
            format_real(p.mean),
            format_real(p.mean - 2.0 * s),
            format_real(p.mean + 2.0 * s)
        );
    }
    std::fs::write(out, text)?;
    println!("wrote {grid_n} grid points to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(net_path: &Path, gapa_path: &Path, data_path: &Path, h: f64, corrupt: bool) -> Result<ExitCode> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("--h must be positive, got {h}")));
    }
    let (model, meta) = load_model(net_path, gapa_path)?;
    let (_, _, data) = load_with_data(net_path, data_path)?;
    let data_s = standardize(&meta, &data)?;
    let obj = VariationalObjective::new(&model.network, &model.layer, &data_s, model.mode, Execution::default())?;
    let params = obj.initial_params();
    let (_, mut grad) = obj.value_and_gradient(&params, &obj.all_rows())?;
    if corrupt {
        grad.iter_mut().for_each(|g| *g *= 2.0);
    }
    let report = check_gradient(
        |p| {
            let g = if p == params.as_slice() {
                grad.clone()
            } else {
                Vec::new()
            };
            Ok((obj.value(p)?, g))
        },
        &params,
        h,
    )?;
    println!("parameters: {}", params.len());
    println!("max relative error: {:e}", report.max_relative_error);
    if report.max_relative_error <= GRAD_CHECK_TOLERANCE {
        println!("gradient check passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "gradient check failed at parameter {} (analytic {:e}, numeric {:e})",
            report.worst_index, report.analytic[report.worst_index], report.numeric[report.worst_index]
        );
        Ok(ExitCode::from(1))
    }
}

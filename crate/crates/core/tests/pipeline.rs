use gapa::backbone::{parse_layer_specs, train_backbone, BackboneNetwork, TrainConfig};
use gapa::calibrate::{fit_free, Calibration};
use gapa::dataio::{fit_standardizer, load_csv, load_csv_features, make_toy_gap, split, write_csv, Dataset, SplitSpec};
use gapa::gpact::{fit_gapa_layer, gapa_from_str, gapa_to_string, GapaConfig, GapaLayerState};
use gapa::model::GapaModel;
use gapa::par::Execution;
use gapa::propagate::CovarianceMode;

fn toy_net(n: usize, width: usize) -> (Dataset, BackboneNetwork) {
    let raw = make_toy_gap(n, 11).unwrap();
    let scaler = fit_standardizer(&raw).unwrap();
    let data = scaler.apply(&raw).unwrap();
    let specs = parse_layer_specs(&format!("1-{width}-1:tanh")).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        seed: 11,
        ..TrainConfig::default()
    };
    let (net, _) = train_backbone(&data, &specs, &cfg).unwrap();
    (data, net)
}

fn layer(net: &BackboneNetwork, data: &Dataset, exec: Execution) -> GapaLayerState {
    let cfg = GapaConfig {
        inducing: 16,
        subsample: data.len(),
        seed: 3,
        ..GapaConfig::default()
    };
    fit_gapa_layer(net, data, &cfg, exec).unwrap()
}

#[test]
fn posterior_variance_vanishes_at_inducing_inputs() {
    let (data, net) = toy_net(200, 12);
    let layer = layer(&net, &data, Execution::default());
    for gp in &layer.neurons {
        let noise = gp.kernel().noise;
        for &z in gp.inducing() {
            let v = gp.posterior_var(z).unwrap();
            assert!(v <= 10.0 * noise, "var {v} at inducing input {z}");
        }
        assert_eq!(gp.posterior_mean(0.3), gp.activation().eval(0.3));
    }
}

#[test]
fn layer_fit_and_predictions_match_across_execution_modes() {
    let (data, net) = toy_net(150, 8);
    let seq = layer(&net, &data, Execution::Sequential);
    let par = layer(&net, &data, Execution::Parallel);
    assert_eq!(seq, par);
    let model = GapaModel::new(net, None, seq, Calibration::Uncalibrated, CovarianceMode::Full).unwrap();
    let a = model.predict_rows_standardized(&data, Execution::Sequential).unwrap();
    let b = model.predict_rows_standardized(&data, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gap_variance_exceeds_in_data_variance() {
    let (data, net) = toy_net(300, 16);
    let layer = layer(&net, &data, Execution::default());
    let model = GapaModel::new(net, None, layer, Calibration::Uncalibrated, CovarianceMode::Full).unwrap();
    let in_data = model.predict_standardized(&[data.row(0)[0]]).unwrap().variance;
    let far = model.predict_standardized(&[6.0]).unwrap().variance;
    assert!(far > in_data, "far {far} vs in-data {in_data}");
}

#[test]
fn gapa_document_round_trips_through_text() {
    let (data, net) = toy_net(120, 6);
    let layer = layer(&net, &data, Execution::default());
    let base = GapaModel::new(net, None, layer, Calibration::Uncalibrated, CovarianceMode::Diag).unwrap();
    let fit = fit_free(&base, &data, Execution::default()).unwrap();
    let doc = base
        .with_calibration(Calibration::Free(fit.calibration))
        .unwrap()
        .document(Some("abc".into()));
    let text = gapa_to_string(&doc).unwrap();
    let back = gapa_from_str(&text).unwrap();
    assert_eq!(back, doc);
    assert_eq!(gapa_to_string(&back).unwrap(), text);
}

#[test]
fn csv_round_trip_skips_comments_and_selects_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    let d = make_toy_gap(40, 2).unwrap();
    write_csv(&d, &path).unwrap();
    assert_eq!(load_csv(&path, "y").unwrap(), d);

    let commented = dir.path().join("c.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&commented, format!("# produced elsewhere\n{text}")).unwrap();
    assert_eq!(load_csv(&commented, "y").unwrap(), d);

    let x = load_csv_features(&path, &["x".to_string()]).unwrap();
    assert_eq!(x.rows(), 40);
    for i in 0..40 {
        assert_eq!(x.row(i), d.row(i));
    }
    assert!(load_csv_features(&path, &["z".to_string()]).is_err());
    assert!(load_csv(&path, "target").is_err());
}

#[test]
fn split_partitions_rows_deterministically() {
    let d = make_toy_gap(101, 5).unwrap();
    let spec = SplitSpec {
        seed: 9,
        ..SplitSpec::default()
    };
    let (a, b, c) = split(&d, &spec).unwrap();
    assert_eq!(a.len() + b.len() + c.len(), 101);
    let again = split(&d, &spec).unwrap();
    assert_eq!((a, b, c), again);
}

#[test]
fn default_backbone_fits_toy_data_to_noise_level() {
    let raw = make_toy_gap(512, 7).unwrap();
    let scaler = fit_standardizer(&raw).unwrap();
    let specs = parse_layer_specs("1-32-32-1:tanh").unwrap();
    let (net, _) = train_backbone(&scaler.apply(&raw).unwrap(), &specs, &TrainConfig::default()).unwrap();
    let mse: f64 = (0..raw.len())
        .map(|i| {
            let y = net.predict(&scaler.apply_features(raw.row(i))).unwrap();
            (scaler.invert_target(y, 0.0).0 - raw.targets[i]).powi(2)
        })
        .sum::<f64>()
        / raw.len() as f64;
    assert!(mse.sqrt() <= 0.15, "train RMSE {}", mse.sqrt());
}

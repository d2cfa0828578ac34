//! A backbone network together with its GAPA layer, calibration and
//! standardization: everything needed to predict from raw inputs.

use crate::backbone::BackboneNetwork;
use crate::calibrate::Calibration;
use crate::dataio::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::gpact::{clamp_variance, GapaDocument, GapaLayerState};
use crate::par::{self, Execution};
use crate::propagate::{
    first_layer_moments, gapa_forward, propagate_first_layer, CovarianceMode, PredictiveDistribution,
};

#[derive(Clone, Debug, PartialEq)]
pub struct GapaModel {
    pub network: BackboneNetwork,
    /// Maps raw data to the units the network was trained in; `None` means
    /// the network works on raw data directly.
    pub standardizer: Option<Standardizer>,
    pub layer: GapaLayerState,
    pub calibration: Calibration,
    pub mode: CovarianceMode,
}

impl GapaModel {
    pub fn new(
        network: BackboneNetwork,
        standardizer: Option<Standardizer>,
        layer: GapaLayerState,
        calibration: Calibration,
        mode: CovarianceMode,
    ) -> Result<Self> {
        if layer.width() != network.first_width() {
            return Err(Error::Shape(format!(
                "GAPA layer has {} GPs but the network's first layer has {} neurons",
                layer.width(),
                network.first_width()
            )));
        }
        if let Some(s) = &standardizer {
            if s.feature_means.len() != network.input_dim() {
                return Err(Error::Shape(format!(
                    "standardizer has {} features, network expects {}",
                    s.feature_means.len(),
                    network.input_dim()
                )));
            }
        }
        if matches!(calibration, Calibration::Variational) && !layer.has_variational() {
            return Err(Error::Config(
                "variational calibration needs variational factors on every neuron".into(),
            ));
        }
        calibration.validate()?;
        Ok(Self {
            network,
            standardizer,
            layer,
            calibration,
            mode,
        })
    }

    pub fn from_document(
        network: BackboneNetwork,
        standardizer: Option<Standardizer>,
        doc: GapaDocument,
    ) -> Result<Self> {
        Self::new(network, standardizer, doc.layer, doc.calibration, doc.mode)
    }

    pub fn document(&self, config_digest: Option<String>) -> GapaDocument {
        GapaDocument {
            layer: self.layer.clone(),
            calibration: self.calibration,
            mode: self.mode,
            config_digest,
        }
    }

    pub fn with_calibration(&self, calibration: Calibration) -> Result<Self> {
        Self::new(
            self.network.clone(),
            self.standardizer.clone(),
            self.layer.clone(),
            calibration,
            self.mode,
        )
    }

    /// Output mean and propagated variance before calibration scaling, in
    /// standardized units.
    pub fn propagate_standardized(&self, x: &[f64]) -> Result<(f64, f64)> {
        let m = first_layer_moments(&self.network, &self.layer, &self.calibration, x)?;
        let (mean, var) = propagate_first_layer(&self.network, &m.mean, &m.variances, self.mode)?;
        Ok((mean, clamp_variance(var)?))
    }

    pub fn predict_standardized(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        let p = gapa_forward(&self.network, &self.layer, &self.calibration, x, self.mode)?;
        Ok(PredictiveDistribution::from_standardized(
            p.standardized_mean,
            p.standardized_variance,
            self.standardizer.as_ref(),
        ))
    }

    /// Prediction at a raw input row.
    pub fn predict(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        match &self.standardizer {
            Some(s) => self.predict_standardized(&s.apply_features(x)),
            None => self.predict_standardized(x),
        }
    }

    /// Predictions for every row of a raw dataset, in row order.
    pub fn predict_rows(&self, data: &Dataset, exec: Execution) -> Result<Vec<PredictiveDistribution>> {
        self.check_features(data)?;
        par::try_map_range(exec, data.len(), |i| self.predict(data.row(i)))
    }

    /// Predictions for every row of an already standardized dataset.
    pub fn predict_rows_standardized(&self, data: &Dataset, exec: Execution) -> Result<Vec<PredictiveDistribution>> {
        self.check_features(data)?;
        par::try_map_range(exec, data.len(), |i| self.predict_standardized(data.row(i)))
    }

    fn check_features(&self, data: &Dataset) -> Result<()> {
        if data.n_features() != self.network.input_dim() {
            return Err(Error::Shape(format!(
                "dataset has {} features, network expects {}",
                data.n_features(),
                self.network.input_dim()
            )));
        }
        Ok(())
    }
}

//! Continuous recording to trial features: reference, filter, ICA clean-up,
//! epoching and normalization.

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ica::{
    components_as_features, decompose, remove_and_reconstruct, score_components, ComponentScore, FastIcaConfig,
    IcaDecomposition, ScoringConfig,
};
use crate::signal::{
    common_average_reference, design_fir_bandpass, extract_epochs, filter_zero_phase, zscore_normalize, FeatureKind,
    Recording, TrialSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaSettings {
    pub seed: u64,
    pub fastica: FastIcaConfig,
    pub scoring: ScoringConfig,
    /// Artifact components are removed above this confidence.
    pub threshold: f64,
}

impl Default for IcaSettings {
    fn default() -> Self {
        IcaSettings {
            seed: 0,
            fastica: FastIcaConfig::default(),
            scoring: ScoringConfig::default(),
            threshold: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub pre_s: f64,
    pub post_s: f64,
    /// `None` skips ICA.
    pub ica: Option<IcaSettings>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            low_hz: 0.5,
            high_hz: 45.0,
            pre_s: 1.0,
            post_s: 2.0,
            ica: Some(IcaSettings::default()),
        }
    }
}

pub struct IcaOutput {
    pub trials: TrialSet,
    pub decomposition: IcaDecomposition,
    pub scores: Vec<ComponentScore>,
    pub removed: Vec<usize>,
}

pub struct Preprocessed {
    pub eeg: TrialSet,
    pub ica: Option<IcaOutput>,
    pub channel_labels: Vec<String>,
    pub component_labels: Vec<String>,
}

/// Runs the full chain on one subject. With ICA, the EEG features come from
/// the cleaned reconstruction and the component features are the source
/// time courses with removed components zeroed, so both keep κ rows.
pub fn preprocess_subject(subject: &str, rec: &Recording, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let filter = design_fir_bandpass(cfg.low_hz, cfg.high_hz, rec.fs)?;
    let filtered = filter_zero_phase(&common_average_reference(rec)?, &filter)?;
    let epochs = |r: &Recording, kind| -> Result<TrialSet> {
        Ok(zscore_normalize(&extract_epochs(r, subject, cfg.pre_s, cfg.post_s, kind)?))
    };
    let Some(ica) = &cfg.ica else {
        return Ok(Preprocessed {
            eeg: epochs(&filtered, FeatureKind::PreprocessedEeg)?,
            ica: None,
            channel_labels: rec.channel_labels.clone(),
            component_labels: Vec::new(),
        });
    };
    let dec = decompose(&filtered, ica.seed, &ica.fastica)?;
    if !dec.converged {
        log::warn!("{subject}: FastICA stopped after {} iterations without converging", dec.iterations);
    }
    let scores = score_components(&dec, &filtered, &ica.scoring);
    let (clean, removed) = remove_and_reconstruct(&filtered, &dec, &scores, ica.threshold)?;
    info!("{subject}: removed {} of {} components {:?}", removed.len(), dec.components(), removed);
    let mut comps = components_as_features(&dec, &filtered);
    for &j in &removed {
        comps.data.row_mut(j).fill(0.0);
    }
    let component_labels = comps.channel_labels.clone();
    Ok(Preprocessed {
        eeg: epochs(&clean, FeatureKind::PreprocessedEeg)?,
        ica: Some(IcaOutput {
            trials: epochs(&comps, FeatureKind::IcaComponents)?,
            decomposition: dec,
            scores,
            removed,
        }),
        channel_labels: rec.channel_labels.clone(),
        component_labels,
    })
}

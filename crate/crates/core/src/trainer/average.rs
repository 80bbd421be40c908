use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Result, TrainError};
use crate::network::{load_checkpoint, Model};

/// Elementwise mean of several models with identical parameter tables.
/// Each element's values are sorted and averaged as
/// `a₀ + Σ(aᵢ − a₀)/k`, so the result does not depend on argument order,
/// identical inputs come back unchanged, and `{θ, −θ}` gives exact zeros.
pub fn average_models(models: &[Model]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| TrainError::IncompatibleCheckpoints("nothing to average".into()))?;
    for m in &models[1..] {
        if m.params.len() != first.params.len()
            || m.params.iter().zip(&first.params).any(|((na, a), (nb, b))| na != nb || a.shape != b.shape)
        {
            return Err(TrainError::IncompatibleCheckpoints("parameter tables differ".into()));
        }
    }
    let k = models.len() as f64;
    let mut out = first.clone();
    let mut vals = vec![0.0; models.len()];
    for (name, p) in out.params.iter_mut() {
        let sources: Vec<&[f64]> = models.iter().map(|m| m.params[name].data.as_slice()).collect();
        for (i, x) in p.data.iter_mut().enumerate() {
            for (v, s) in vals.iter_mut().zip(&sources) {
                *v = s[i];
            }
            vals.sort_by(f64::total_cmp);
            let base = vals[0];
            *x = base + vals[1..].iter().map(|v| v - base).sum::<f64>() / k;
        }
    }
    Ok(out)
}

pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Model> {
    let models = paths.iter().map(|p| load_checkpoint(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    if models.iter().any(|m| m.config != models[0].config) {
        return Err(TrainError::IncompatibleCheckpoints("model configs differ".into()));
    }
    average_models(&models)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransferReport {
    pub scope: String,
    pub copied: Vec<String>,
    pub shape_mismatch: Vec<String>,
    /// In scope but missing from the donor.
    pub absent: Vec<String>,
}

/// Overwrites every parameter under `scope` that the donor has with the
/// same shape.
pub fn transfer_init(model: &mut Model, donor: &Model, scope: &str) -> Result<TransferReport> {
    let mut report = TransferReport {
        scope: scope.to_string(),
        ..Default::default()
    };
    for (name, p) in model.params.iter_mut().filter(|(n, _)| n.starts_with(scope)) {
        match donor.params.get(name) {
            Some(d) if d.shape == p.shape => {
                p.data.copy_from_slice(&d.data);
                report.copied.push(name.clone());
            }
            Some(d) => {
                log::warn!("transfer skips {name}: shape {:?} vs donor {:?}", p.shape, d.shape);
                report.shape_mismatch.push(name.clone());
            }
            None => report.absent.push(name.clone()),
        }
    }
    if report.copied.is_empty() {
        return Err(TrainError::EmptyTransfer(scope.to_string()));
    }
    Ok(report)
}

pub fn transfer_from_checkpoint(model: &mut Model, donor: &Path, scope: &str) -> Result<TransferReport> {
    transfer_init(model, &load_checkpoint(donor)?, scope)
}

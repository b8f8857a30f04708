//! Path-measure checks on a benchmark's H-iLQR proposal.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{HpiError, Result};
use crate::hilqr;
use crate::measure::{
    applied_drift, discrete_density_ratio, kl_estimate, log_ratio_controlled, log_ratio_reweight, mean_stderr,
    passive_drift, PathLogRatio,
};
use crate::rng::{tags, GaussianNoise};
use crate::rollout::{rollout, ZeroPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovReport {
    pub samples: usize,
    pub noise_intensity: f64,
    /// Controlled paths containing at least one reset.
    pub paths_with_jumps: usize,
    /// `max |log_ratio_controlled − discrete_density_ratio|` over controlled paths.
    pub max_abs_discrepancy: f64,
    /// Sample mean and standard error of `log dP^u/dP^0` on controlled paths.
    pub kl_mean: f64,
    pub kl_stderr: f64,
    /// Sample mean and standard error of `∫ ½‖u‖² dt / ε`.
    pub energy_mean: f64,
    pub energy_stderr: f64,
    /// Mean and standard error of `dP^ū/dP^0` on passive paths, `ū` the
    /// proposal's open-loop nominal control.
    pub martingale_mean: f64,
    pub martingale_stderr: f64,
}

/// Rolls `samples` paths under the H-iLQR proposal and as many passive paths,
/// all on the diagnostic noise family of `config.seed`.
pub fn girsanov_report(config: &ExperimentConfig, samples: usize) -> Result<GirsanovReport> {
    if samples < 2 {
        return Err(HpiError::Config("girsanov diagnostics need at least 2 samples".into()));
    }
    let bench = config.benchmark()?;
    let (model, grid, costs, cfg) = (&bench.model, &bench.grid, &bench.costs, &config.events);
    let eps = model.noise_intensity();
    let sol = hilqr::solve(model, grid, &bench.initial, costs, cfg, &config.hilqr)?;
    let policy = sol.policy.clone().with_extensions(config.extensions);
    let view = policy.bind(model);

    let controlled: Vec<(PathLogRatio, f64, bool)> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut noise = GaussianNoise::new(config.seed, tags::DIAGNOSTIC, 0, k as u64);
            let r = rollout(model, grid, &bench.initial, &view, &mut noise, costs, cfg)?;
            let lr = log_ratio_controlled(&r, eps);
            let dr = discrete_density_ratio(model, &r, &passive_drift(model), &applied_drift(model), eps)?;
            Ok((lr, (lr.log_ratio_u_over_0 - dr.log_ratio).abs(), !r.jumps.is_empty()))
        })
        .collect::<Result<_>>()?;

    let nominal = &policy.nominal;
    let open_loop = |s: &crate::rollout::StepRecord| -> DVector<f64> {
        if nominal.modes[s.step] == s.mode {
            nominal.controls[s.step].clone()
        } else {
            DVector::zeros(s.u.len())
        }
    };
    let martingale: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut noise = GaussianNoise::new(config.seed, tags::DIAGNOSTIC, 1, k as u64);
            let r = rollout(model, grid, &bench.initial, &ZeroPolicy, &mut noise, costs, cfg)?;
            Ok(log_ratio_reweight(&r, &open_loop, eps).exp())
        })
        .collect::<Result<_>>()?;

    let ratios: Vec<PathLogRatio> = controlled.iter().map(|c| c.0).collect();
    let (kl_mean, kl_stderr) = if samples >= crate::measure::MIN_KL_SAMPLES {
        kl_estimate(&ratios)?
    } else {
        mean_stderr(&ratios.iter().map(|p| p.log_ratio_u_over_0).collect::<Vec<_>>())
    };
    let energies: Vec<f64> = ratios.iter().map(|p| p.control_energy / eps).collect();
    let (energy_mean, energy_stderr) = mean_stderr(&energies);
    let (martingale_mean, martingale_stderr) = mean_stderr(&martingale);
    Ok(GirsanovReport {
        samples,
        noise_intensity: eps,
        paths_with_jumps: controlled.iter().filter(|c| c.2).count(),
        max_abs_discrepancy: controlled.iter().map(|c| c.1).fold(0.0, f64::max),
        kl_mean,
        kl_stderr,
        energy_mean,
        energy_stderr,
        martingale_mean,
        martingale_stderr,
    })
}

//! Experiment execution. Each experiment turns a prepared scenario into
//! result rows; audits also produce verdicts.

use std::sync::Arc;

use anyhow::Result;
use mesoed::devices::{estimate_moments, MomentReport};
use mesoed::dressing::{normalization_probe_instantaneous, two_time_causal_check};
use mesoed::gaussian::marginal_total;
use mesoed::network::{
    causality_audit_all, compose_dressed_commutation, linear_response_matrix, stacked_moments,
    susceptibility, total_moments, NetworkResponse, ResponseSystem, SusceptibilityOptions,
};
use mesoed::photodetection::{run_cascade, INPUT_MODE, OUTPUT_MODE};
use mesoed::timenormal::{
    acausal_tail, pfunctional_match, time_normal_second_moments, ClassicalDoppelganger, FockOracle,
};
use mesoed::{
    dress, gaussian_compose, gaussian_dress, sample_bare, simulate_network, AffineGaussianSpec,
    DeviceId, DeviceRef, NetworkSpec, StreamKey, TimeGrid, Trajectory,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::scenario::{Experiment, Prepared};

/// One line of results.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub quantity: &'static str,
    pub step: Option<usize>,
    pub mode: Option<usize>,
    pub step2: Option<usize>,
    pub mode2: Option<usize>,
    pub value: f64,
    pub std_err: Option<f64>,
}

impl Row {
    pub fn scalar(quantity: &'static str, value: f64) -> Self {
        Self {
            quantity,
            step: None,
            mode: None,
            step2: None,
            mode2: None,
            value,
            std_err: None,
        }
    }

    fn at(mut self, step: usize, mode: usize) -> Self {
        self.step = Some(step);
        self.mode = Some(mode);
        self
    }

    fn and(mut self, step: usize, mode: usize) -> Self {
        self.step2 = Some(step);
        self.mode2 = Some(mode);
        self
    }

    fn err(mut self, std_err: f64) -> Self {
        self.std_err = Some(std_err);
        self
    }
}

/// One line of verdicts.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct VerdictRow {
    pub subject: String,
    pub step: usize,
    pub passed: bool,
    pub first_violation: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub verdicts: Option<Vec<VerdictRow>>,
}

impl Outcome {
    pub fn audit_failed(&self) -> bool {
        self.verdicts
            .as_ref()
            .is_some_and(|v| v.iter().any(|r| !r.passed))
    }
}

/// Plain-language meaning of every quantity that can appear in results.csv.
pub const MANIFEST: &[(&str, &str)] = &[
    ("mean_current", "Monte Carlo mean current at (step, mode)"),
    ("cov_current", "Monte Carlo current covariance between (step, mode) and (step2, mode2)"),
    ("gaussian_mean_current", "closed-form Gaussian mean current of the dressed device"),
    ("gaussian_cov_current", "closed-form Gaussian current covariance of the dressed device"),
    ("mean_total_current", "Monte Carlo mean of the summed network current"),
    ("cov_total_current", "Monte Carlo covariance of the summed network current"),
    ("gaussian_mean_total_current", "closed-form Gaussian mean of the summed network current"),
    ("gaussian_cov_total_current", "closed-form Gaussian covariance of the summed network current"),
    ("mean_radiated_field", "Monte Carlo mean of the field radiated by the network current"),
    ("commutation_bit_identical", "1 if the bare network and the two dressed devices agree bit for bit in every replication"),
    ("commutation_max_deviation", "largest current difference between the bare network and the dressed pair"),
    ("mean_photocurrent", "Monte Carlo mean photocurrent in the output mode"),
    ("mean_detected_field", "Monte Carlo mean field at the detector in the input mode"),
    ("cov_detected_field", "Monte Carlo covariance of the field at the detector"),
    ("photocount_mean", "mean number of counts in the window"),
    ("photocount_variance", "variance of the number of counts in the window"),
    ("fano_factor", "photocount variance divided by mean"),
    ("audit_steps_checked", "number of (subject, step) causality audits"),
    ("audit_steps_failed", "number of failed causality audits"),
    ("linear_response", "first-order susceptibility of the mean network current at (step, mode) to the external field at (step2, mode2)"),
    ("susceptibility", "Richardson-extrapolated functional derivative of the requested current moment"),
    ("susceptibility_coarse", "central difference with step h"),
    ("susceptibility_fine", "central difference with step h/2"),
    ("susceptibility_noise_dominated", "1 if the finite difference is dominated by noise or cancellation"),
    ("max_mean_z", "largest |Monte Carlo - closed form| / standard error over per-device means"),
    ("max_cov_z", "largest |Monte Carlo - closed form| / standard error over per-device covariances"),
    ("oracle_mean_total_current", "closed-form Gaussian mean of the summed network current"),
    ("oracle_cov_total_current", "closed-form Gaussian covariance of the summed network current"),
    ("normalization_instantaneous", "total probability of the density with same-time self-action"),
    ("normalization_causal", "total probability of the causally regularised two-time density"),
    ("factorization_residual", "largest deviation of the two-time density from conditional times marginal"),
    ("time_normal_moment", "time-normal ordered second moment of the free field"),
    ("operator_mean", "expectation of the field operator"),
    ("time_normal_max_imaginary_residue", "largest imaginary part left in the time-normal moments"),
    ("split_leakage", "wrong-sign frequency content of the split field relative to its scale"),
    ("acausal_tail", "largest pre-impulse magnitude of the discrete positive-frequency kernel"),
    ("doppelganger_max_mean_deviation", "largest |classical - quantum| first moment"),
    ("doppelganger_max_second_deviation", "largest |classical - quantum| second moment"),
    ("doppelganger_max_mean_z", "largest first-moment deviation in standard errors"),
    ("doppelganger_max_second_z", "largest second-moment deviation in standard errors"),
];

fn network_spec(p: &Prepared) -> Result<NetworkSpec> {
    Ok(NetworkSpec::new(
        p.devices.clone(),
        p.propagator.clone().expect("validated"),
        p.external_field.clone().expect("validated"),
        p.n_reps,
        p.seed,
    )?)
}

fn moment_rows(rows: &mut Vec<Row>, mean: &'static str, cov: &'static str, report: &MomentReport) {
    let grid = *report.mean.grid();
    for i in 0..grid.dim() {
        let (n, k) = grid.split_index(i);
        rows.push(
            Row::scalar(mean, report.mean.get(n, k))
                .at(n, k)
                .err(report.mean_std_err.get(n, k)),
        );
    }
    for i in 0..grid.dim() {
        for j in 0..grid.dim() {
            let ((n, k), (m, kp)) = (grid.split_index(i), grid.split_index(j));
            rows.push(
                Row::scalar(cov, report.cov[(i, j)])
                    .at(n, k)
                    .and(m, kp)
                    .err(report.cov_std_err[(i, j)]),
            );
        }
    }
}

fn closed_form_rows(
    rows: &mut Vec<Row>,
    grid: &TimeGrid,
    mean: (&'static str, &DVector<f64>),
    cov: (&'static str, &DMatrix<f64>),
) {
    for i in 0..grid.dim() {
        let (n, k) = grid.split_index(i);
        rows.push(Row::scalar(mean.0, mean.1[i]).at(n, k));
    }
    for i in 0..grid.dim() {
        for j in 0..grid.dim() {
            let ((n, k), (m, kp)) = (grid.split_index(i), grid.split_index(j));
            rows.push(Row::scalar(cov.0, cov.1[(i, j)]).at(n, k).and(m, kp));
        }
    }
}

fn gaussian_specs(p: &Prepared) -> Option<Vec<AffineGaussianSpec>> {
    p.gaussians
        .iter()
        .map(|g| g.as_deref().map(AffineGaussianSpec::from_device))
        .collect()
}

fn run_dress(p: &Prepared) -> Result<Outcome> {
    let g = p.propagator.as_ref().expect("validated");
    let field = p.external_field.as_ref().expect("validated");
    let dressed: DeviceRef = Arc::new(dress(p.devices[0].clone(), g)?);
    let samples: Vec<Trajectory> = (0..p.n_reps as u64)
        .into_par_iter()
        .map(|rep| sample_bare(dressed.as_ref(), field, StreamKey::new(p.seed, rep)))
        .collect::<mesoed::Result<_>>()?;
    let mut rows = Vec::new();
    if p.n_reps >= 2 {
        moment_rows(
            &mut rows,
            "mean_current",
            "cov_current",
            &estimate_moments(&samples)?,
        );
    }
    if let Some(specs) = gaussian_specs(p) {
        let closed = gaussian_dress(&specs[0], g)?;
        closed_form_rows(
            &mut rows,
            g.grid(),
            ("gaussian_mean_current", &closed.mean(&field.to_vector())),
            ("gaussian_cov_current", closed.cov()),
        );
    }
    Ok(Outcome {
        rows,
        verdicts: None,
    })
}

fn run_compose(p: &Prepared, check_commutation: bool) -> Result<Outcome> {
    let spec = network_spec(p)?;
    let samples = simulate_network(&spec)?;
    let mut rows = Vec::new();
    let grid = *spec.grid();
    if p.n_reps >= 2 {
        let total = total_moments(&samples)?;
        let report = MomentReport {
            mean: Trajectory::from_vector(grid, &total.mean)?,
            cov: total.cov,
            mean_std_err: Trajectory::from_vector(grid, &total.mean_std_err)?,
            cov_std_err: total.cov_std_err,
            n_samples: total.n_samples,
        };
        moment_rows(
            &mut rows,
            "mean_total_current",
            "cov_total_current",
            &report,
        );
        let field = estimate_moments(
            &samples
                .iter()
                .map(|s| s.radiated_field.clone())
                .collect::<Vec<_>>(),
        )?;
        for i in 0..grid.dim() {
            let (n, k) = grid.split_index(i);
            rows.push(
                Row::scalar("mean_radiated_field", field.mean.get(n, k))
                    .at(n, k)
                    .err(field.mean_std_err.get(n, k)),
            );
        }
    }
    if let Some(specs) = gaussian_specs(p) {
        let total = marginal_total(&gaussian_compose(&specs, &spec.propagator)?)?;
        closed_form_rows(
            &mut rows,
            &grid,
            (
                "gaussian_mean_total_current",
                &total.mean(&spec.external_field.to_vector()),
            ),
            ("gaussian_cov_total_current", total.cov()),
        );
    }
    if check_commutation {
        let report = compose_dressed_commutation(&spec)?;
        rows.push(Row::scalar(
            "commutation_bit_identical",
            f64::from(u8::from(report.bit_identical)),
        ));
        rows.push(Row::scalar(
            "commutation_max_deviation",
            report.max_deviation,
        ));
    }
    Ok(Outcome {
        rows,
        verdicts: None,
    })
}

fn run_detect(p: &Prepared) -> Result<Outcome> {
    let cascade = p.cascade()?;
    let run = run_cascade(&cascade, p.n_reps, p.seed)?;
    let mut rows = Vec::new();
    let single = run.photocurrent.mean.grid();
    for n in 0..single.n_steps() {
        rows.push(
            Row::scalar("mean_photocurrent", run.photocurrent.mean.get(n, 0))
                .at(n, OUTPUT_MODE)
                .err(run.photocurrent.mean_std_err.get(n, 0)),
        );
    }
    let field = estimate_moments(
        &run.samples
            .iter()
            .map(|s| s.detected_field.clone())
            .collect::<Vec<_>>(),
    )?;
    for n in 0..single.n_steps() {
        rows.push(
            Row::scalar("mean_detected_field", field.mean.get(n, 0))
                .at(n, INPUT_MODE)
                .err(field.mean_std_err.get(n, 0)),
        );
    }
    for n in 0..single.n_steps() {
        for m in 0..single.n_steps() {
            rows.push(
                Row::scalar("cov_detected_field", field.cov[(n, m)])
                    .at(n, INPUT_MODE)
                    .and(m, INPUT_MODE)
                    .err(field.cov_std_err[(n, m)]),
            );
        }
    }
    let c = run.counts;
    rows.push(Row::scalar("photocount_mean", c.mean).err(c.mean_std_err));
    rows.push(Row::scalar("photocount_variance", c.variance).err(c.variance_std_err));
    rows.push(Row::scalar("fano_factor", c.fano_factor()));
    Ok(Outcome {
        rows,
        verdicts: None,
    })
}

fn run_audit(p: &Prepared, audit_reps: usize) -> Result<Outcome> {
    let field = p.external_field.as_ref().expect("validated");
    let g = p.propagator.clone().expect("validated");
    let mut subjects: Vec<(String, Box<dyn ResponseSystem>)> = p
        .devices
        .iter()
        .map(|d| {
            (
                format!("device:{}", d.id()),
                Box::new(d.clone()) as Box<dyn ResponseSystem>,
            )
        })
        .collect();
    for d in &p.devices {
        let dressed: DeviceRef = Arc::new(dress(d.clone(), &g)?);
        subjects.push((format!("dressed:{}", d.id()), Box::new(dressed)));
    }
    subjects.push((
        "network".to_string(),
        Box::new(NetworkResponse::new(p.devices.clone(), g)?),
    ));
    let mut verdicts = Vec::new();
    for (name, system) in &subjects {
        for v in causality_audit_all(system.as_ref(), field, audit_reps, p.seed)? {
            verdicts.push(VerdictRow {
                subject: name.clone(),
                step: v.step,
                passed: v.passed,
                first_violation: v.first_violation,
            });
        }
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    Ok(Outcome {
        rows: vec![
            Row::scalar("audit_steps_checked", verdicts.len() as f64),
            Row::scalar("audit_steps_failed", failed as f64),
        ],
        verdicts: Some(verdicts),
    })
}

fn run_susceptibility(
    p: &Prepared,
    responses: &[[usize; 2]],
    probes: &[[usize; 2]],
    step: Option<f64>,
) -> Result<Outcome> {
    let field = p.external_field.as_ref().expect("validated");
    let system = NetworkResponse::new(p.devices.clone(), p.propagator.clone().expect("validated"))?;
    let opts = SusceptibilityOptions {
        step,
        n_reps: p.n_reps,
        seed: p.seed,
    };
    let mut rows = Vec::new();
    if responses.is_empty() {
        let grid = *system.grid();
        let matrix = linear_response_matrix(&system, field, opts)?;
        for i in 0..grid.dim() {
            for j in 0..grid.dim() {
                let ((n, k), (m, kp)) = (grid.split_index(i), grid.split_index(j));
                rows.push(
                    Row::scalar("linear_response", matrix[(i, j)])
                        .at(n, k)
                        .and(m, kp),
                );
            }
        }
    } else {
        let pairs = |v: &[[usize; 2]]| v.iter().map(|[n, k]| (*n, *k)).collect::<Vec<_>>();
        let est = susceptibility(&system, field, &pairs(responses), &pairs(probes), opts)?;
        let ([n, k], [m, kp]) = (responses[0], probes[0]);
        rows.push(Row::scalar("susceptibility", est.value).at(n, k).and(m, kp));
        rows.push(
            Row::scalar("susceptibility_coarse", est.coarse)
                .at(n, k)
                .and(m, kp),
        );
        rows.push(
            Row::scalar("susceptibility_fine", est.fine)
                .at(n, k)
                .and(m, kp),
        );
        rows.push(
            Row::scalar(
                "susceptibility_noise_dominated",
                f64::from(u8::from(est.noise_dominated)),
            )
            .at(n, k)
            .and(m, kp),
        );
    }
    Ok(Outcome {
        rows,
        verdicts: None,
    })
}

fn run_oracle_compare(p: &Prepared) -> Result<Outcome> {
    let spec = network_spec(p)?;
    let specs = gaussian_specs(p).expect("validated");
    let joint = gaussian_compose(&specs, &spec.propagator)?;
    let samples = simulate_network(&spec)?;
    let a_e = spec.external_field.to_vector();
    let stacked = stacked_moments(&samples)?;
    let mean = joint.spec().mean(&a_e);
    let (mut mean_z, mut cov_z) = (0.0f64, 0.0f64);
    for i in 0..mean.len() {
        mean_z = mean_z.max((stacked.mean[i] - mean[i]).abs() / stacked.mean_std_err[i]);
        for j in 0..mean.len() {
            cov_z = cov_z.max(
                (stacked.cov[(i, j)] - joint.spec().cov()[(i, j)]).abs()
                    / stacked.cov_std_err[(i, j)],
            );
        }
    }
    let mut rows = vec![
        Row::scalar("max_mean_z", mean_z),
        Row::scalar("max_cov_z", cov_z),
    ];
    let total = total_moments(&samples)?;
    let closed = marginal_total(&joint)?;
    let grid = *spec.grid();
    let report = MomentReport {
        mean: Trajectory::from_vector(grid, &total.mean)?,
        cov: total.cov,
        mean_std_err: Trajectory::from_vector(grid, &total.mean_std_err)?,
        cov_std_err: total.cov_std_err,
        n_samples: total.n_samples,
    };
    moment_rows(
        &mut rows,
        "mean_total_current",
        "cov_total_current",
        &report,
    );
    closed_form_rows(
        &mut rows,
        &grid,
        ("oracle_mean_total_current", &closed.mean(&a_e)),
        ("oracle_cov_total_current", closed.cov()),
    );
    Ok(Outcome {
        rows,
        verdicts: None,
    })
}

fn run_normalization_probe(chi: f64, g: f64, j0: f64, a_e: f64, a_e_early: f64) -> Result<Outcome> {
    let instantaneous = normalization_probe_instantaneous(chi, g, j0, a_e)?;
    let causal = two_time_causal_check(chi, g, j0, a_e, a_e_early)?;
    Ok(Outcome {
        rows: vec![
            Row::scalar("normalization_instantaneous", instantaneous),
            Row::scalar("normalization_causal", causal.normalization),
            Row::scalar("factorization_residual", causal.factorization_residual),
        ],
        verdicts: None,
    })
}

fn run_timenormal(p: &Prepared, n_max: usize, state: mesoed::fock::FieldState) -> Result<Outcome> {
    let grid = p.grid.expect("validated");
    let oracle = FockOracle::new(n_max, p.modes[0], state)?;
    let moments = time_normal_second_moments(&oracle, &grid)?;
    let mean = oracle.operator_mean(&grid)?;
    let mut rows = Vec::new();
    for n in 0..grid.n_steps() {
        rows.push(Row::scalar("operator_mean", mean.get(n, 0)).at(n, 0));
    }
    for n in 0..grid.n_steps() {
        for m in 0..grid.n_steps() {
            rows.push(
                Row::scalar("time_normal_moment", moments.values[(n, m)])
                    .at(n, 0)
                    .and(m, 0),
            );
        }
    }
    rows.push(Row::scalar(
        "time_normal_max_imaginary_residue",
        moments.max_imaginary_residue,
    ));
    rows.push(Row::scalar("split_leakage", moments.leakage));
    rows.push(Row::scalar(
        "acausal_tail",
        acausal_tail(grid.n_steps().next_power_of_two().max(2))?,
    ));
    let doppelganger = ClassicalDoppelganger::for_oracle(&oracle, DeviceId(0));
    let reps = if doppelganger.is_deterministic() {
        1
    } else {
        p.n_reps.max(2)
    };
    let m = pfunctional_match(&oracle, &doppelganger, &grid, reps, p.seed)?;
    rows.push(Row::scalar(
        "doppelganger_max_mean_deviation",
        m.max_mean_deviation,
    ));
    rows.push(Row::scalar(
        "doppelganger_max_second_deviation",
        m.max_second_deviation,
    ));
    rows.push(Row::scalar("doppelganger_max_mean_z", m.max_mean_z));
    rows.push(Row::scalar("doppelganger_max_second_z", m.max_second_z));
    Ok(Outcome {
        rows,
        verdicts: None,
    })
}

pub fn execute(p: &Prepared) -> Result<Outcome> {
    match &p.scenario.experiment {
        Experiment::Dress => run_dress(p),
        Experiment::Compose { check_commutation } => run_compose(p, *check_commutation),
        Experiment::Detect => run_detect(p),
        Experiment::AuditCausality { audit_reps } => run_audit(p, *audit_reps),
        Experiment::Susceptibility {
            responses,
            probes,
            step,
        } => run_susceptibility(p, responses, probes, *step),
        Experiment::OracleCompare => run_oracle_compare(p),
        Experiment::AppendixA {
            chi,
            g,
            j0,
            a_e,
            a_e_early,
        } => run_normalization_probe(*chi, *g, *j0, *a_e, *a_e_early),
        Experiment::Timenormal { n_max, state } => run_timenormal(p, *n_max, state.field_state()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(passed: bool) -> VerdictRow {
        VerdictRow {
            subject: "network".into(),
            step: 0,
            passed,
            first_violation: None,
        }
    }

    #[test]
    fn audit_failure_needs_a_failed_verdict() {
        assert!(!Outcome::default().audit_failed());
        let all_pass = Outcome {
            rows: vec![],
            verdicts: Some(vec![verdict(true), verdict(true)]),
        };
        assert!(!all_pass.audit_failed());
        let one_fail = Outcome {
            rows: vec![],
            verdicts: Some(vec![verdict(true), verdict(false)]),
        };
        assert!(one_fail.audit_failed());
    }

    #[test]
    fn manifest_has_no_duplicates() {
        let mut names: Vec<&str> = MANIFEST.iter().map(|(q, _)| *q).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}

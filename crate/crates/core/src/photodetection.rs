//! Source → detector cascade with back-action removed by construction.
//!
//! The source is field-insensitive and emits only into the input mode; the
//! detector reads the input mode and emits into the output mode. With a
//! propagator that is block-diagonal in mode, nothing the detector does can
//! reach the source or the field it sees.

use std::sync::Arc;

use rayon::prelude::*;

use crate::devices::{estimate_moments, DeviceRef, MomentReport};
use crate::dressing::Radiator;
use crate::error::{invalid, Error, Result};
use crate::numerics::ExactSum;
use crate::rng::StreamKey;
use crate::timegrid::{CausalKernel, Strictness, TimeGrid, Trajectory};

pub const INPUT_MODE: usize = 0;
pub const OUTPUT_MODE: usize = 1;

#[derive(Clone, Debug)]
pub struct CascadeSpec {
    source: DeviceRef,
    detector: DeviceRef,
    g_in: CausalKernel,
    g_out: CausalKernel,
    /// Charge per count, used to turn integrated photocurrent into counts.
    charge: f64,
}

impl CascadeSpec {
    /// `g_in` and `g_out` are strict single-mode kernels on the time axis of
    /// the two-mode device grid.
    pub fn new(
        source: DeviceRef,
        detector: DeviceRef,
        g_in: CausalKernel,
        g_out: CausalKernel,
        charge: f64,
    ) -> Result<Self> {
        let grid = *source.grid();
        if grid.n_modes() != 2 {
            return Err(invalid(
                "grid",
                format!("a cascade has 2 modes, got {}", grid.n_modes()),
            ));
        }
        grid.ensure_same(detector.grid(), "cascade detector")?;
        let single = grid.with_modes(1)?;
        for (name, g) in [("g_in", &g_in), ("g_out", &g_out)] {
            single.ensure_same(g.grid(), name)?;
            if !g.is_strict() {
                return Err(Error::SameTimeSelfAction);
            }
        }
        if !source.is_field_insensitive() {
            return Err(invalid("source", "must not respond to the field"));
        }
        if source.emission_modes().iter().any(|&k| k != INPUT_MODE) {
            return Err(invalid("source", "must emit only into the input mode"));
        }
        if detector.emission_modes().iter().any(|&k| k != OUTPUT_MODE) {
            return Err(invalid("detector", "must emit only into the output mode"));
        }
        if source
            .stream_ids()
            .iter()
            .any(|id| detector.stream_ids().contains(id))
        {
            return Err(Error::DuplicateDevice(source.id().0));
        }
        if !(charge.is_finite() && charge != 0.0) {
            return Err(invalid(
                "charge",
                format!("must be finite and nonzero, got {charge}"),
            ));
        }
        Ok(Self {
            source,
            detector,
            g_in,
            g_out,
            charge,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.source.grid()
    }

    pub fn source(&self) -> &DeviceRef {
        &self.source
    }

    pub fn detector(&self) -> &DeviceRef {
        &self.detector
    }

    pub fn charge(&self) -> f64 {
        self.charge
    }

    /// The two single-mode kernels as one block-diagonal two-mode kernel.
    pub fn propagator(&self) -> Result<CausalKernel> {
        let (g_in, g_out) = (&self.g_in, &self.g_out);
        CausalKernel::from_fn(*self.grid(), Strictness::Strict, |n, k, m, kp| {
            match (k, kp) {
                (INPUT_MODE, INPUT_MODE) => g_in.get(n, 0, m, 0),
                (OUTPUT_MODE, OUTPUT_MODE) => g_out.get(n, 0, m, 0),
                _ => 0.0,
            }
        })
    }

    pub fn devices(&self) -> Vec<DeviceRef> {
        vec![Arc::clone(&self.source), Arc::clone(&self.detector)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeSample {
    pub source_current: Trajectory,
    pub detector_current: Trajectory,
    /// Field in the input mode at the detector, single-mode.
    pub detected_field: Trajectory,
}

impl CascadeSample {
    /// `∫ J_out dt` over the window.
    pub fn total_charge(&self) -> f64 {
        let grid = self.detector_current.grid();
        grid.dt()
            * (0..grid.n_steps())
                .map(|n| self.detector_current.get(n, OUTPUT_MODE))
                .sum::<f64>()
    }
}

/// Mean and variance of the photocount per replication.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountStatistics {
    pub mean: f64,
    pub variance: f64,
    pub mean_std_err: f64,
    pub variance_std_err: f64,
    pub n_samples: usize,
}

impl CountStatistics {
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        let n = counts.len();
        if n < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: n });
        }
        let nf = n as f64;
        let mean = counts.iter().sum::<f64>() / nf;
        let centred: Vec<f64> = counts.iter().map(|c| c - mean).collect();
        let m2 = centred.iter().map(|c| c * c).sum::<f64>() / nf;
        let m4 = centred.iter().map(|c| c.powi(4)).sum::<f64>() / nf;
        let variance = m2 * nf / (nf - 1.0);
        Ok(Self {
            mean,
            variance,
            mean_std_err: (variance / nf).sqrt(),
            variance_std_err: ((m4 - m2 * m2).max(0.0) / nf).sqrt(),
            n_samples: n,
        })
    }

    pub fn fano_factor(&self) -> f64 {
        self.variance / self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeRun {
    pub samples: Vec<CascadeSample>,
    /// Moments of the output-mode photocurrent (single-mode grid).
    pub photocurrent: MomentReport,
    pub counts: CountStatistics,
}

/// Field radiated into one mode by the history of `source` before `step`,
/// accumulated exactly so it matches the network loop bit for bit.
fn radiated_at(radiator: &Radiator, step: usize, source: &[f64]) -> f64 {
    let mut acc = [ExactSum::new()];
    radiator.accumulate(step, source, &mut acc);
    acc[0].value()
}

fn one_replication(
    spec: &CascadeSpec,
    r_in: &Radiator,
    r_out: &Radiator,
    key: StreamKey,
) -> Result<CascadeSample> {
    let grid = *spec.grid();
    let steps = grid.n_steps();
    let mut source = spec.source.sampler(key);
    let mut detector = spec.detector.sampler(key);
    let mut j_src = vec![0.0; grid.dim()];
    let mut j_det = vec![0.0; grid.dim()];
    let mut src_in = vec![0.0; steps];
    let mut det_out = vec![0.0; steps];
    let mut field = vec![0.0; grid.dim()];
    for n in 0..steps {
        field[grid.index(n, INPUT_MODE)] = radiated_at(r_in, n, &src_in);
        field[grid.index(n, OUTPUT_MODE)] = radiated_at(r_out, n, &det_out);
        let row = n * 2..n * 2 + 2;
        source.step(n, &field[..row.end], &mut j_src[row.clone()]);
        detector.step(n, &field[..row.end], &mut j_det[row.clone()]);
        src_in[n] = j_src[grid.index(n, INPUT_MODE)];
        det_out[n] = j_det[grid.index(n, OUTPUT_MODE)];
    }
    let single = grid.with_modes(1)?;
    Ok(CascadeSample {
        source_current: Trajectory::new(grid, j_src)?,
        detector_current: Trajectory::new(grid, j_det)?,
        detected_field: Trajectory::from_fn(single, |n, _| field[grid.index(n, INPUT_MODE)]),
    })
}

/// Runs the cascade: source current, detected field, then photocurrent,
/// step by step. Replications run in parallel and are returned in order.
pub fn run_cascade(spec: &CascadeSpec, n_reps: usize, seed: u64) -> Result<CascadeRun> {
    if n_reps < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: n_reps,
        });
    }
    let r_in = Radiator::new(&spec.g_in)?;
    let r_out = Radiator::new(&spec.g_out)?;
    let samples: Vec<CascadeSample> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| one_replication(spec, &r_in, &r_out, StreamKey::new(seed, rep)))
        .collect::<Result<_>>()?;
    let single = spec.grid().with_modes(1)?;
    let photocurrents: Vec<Trajectory> = samples
        .iter()
        .map(|s| Trajectory::from_fn(single, |n, _| s.detector_current.get(n, OUTPUT_MODE)))
        .collect();
    let counts: Vec<f64> = samples
        .iter()
        .map(|s| s.total_charge() / spec.charge)
        .collect();
    Ok(CascadeRun {
        photocurrent: estimate_moments(&photocurrents)?,
        counts: CountStatistics::from_counts(&counts)?,
        samples,
    })
}

/// Statistics of the input-mode field produced by the source on its own,
/// with no detector in the loop.
pub fn detected_field_report(
    spec: &CascadeSpec,
    n_reps: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, MomentReport)> {
    let grid = *spec.grid();
    let single = grid.with_modes(1)?;
    let r_in = Radiator::new(&spec.g_in)?;
    let fields: Vec<Trajectory> = (0..n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let key = StreamKey::new(seed, rep);
            let mut source = spec.source.sampler(key);
            let zero = vec![0.0; grid.dim()];
            let mut j = vec![0.0; grid.dim()];
            let mut src_in = vec![0.0; grid.n_steps()];
            let mut out = vec![0.0; grid.n_steps()];
            for n in 0..grid.n_steps() {
                out[n] = radiated_at(&r_in, n, &src_in);
                source.step(n, &zero[..(n + 1) * 2], &mut j[n * 2..n * 2 + 2]);
                src_in[n] = j[grid.index(n, INPUT_MODE)];
            }
            Trajectory::new(single, out)
        })
        .collect::<Result<_>>()?;
    let report = estimate_moments(&fields)?;
    Ok((fields, report))
}

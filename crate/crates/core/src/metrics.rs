//! Speedup, efficiency, greenup, CPU power and utilisation from counter
//! traces, energy integration, and a synthetic busy-worker power model.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::{TaskSpan, Trace};

pub const ENERGY_COUNTER: &str = "cpu_energy_joules";
pub const USER_TICKS: &str = "cpu_user_ticks";
pub const KERNEL_TICKS: &str = "cpu_kernel_ticks";
pub const TOTAL_TICKS: &str = "cpu_total_ticks";
pub const POWER_WATTS: &str = "power_watts";

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// `(speedup, efficiency)` with efficiency = speedup / workers.
pub fn speedup_efficiency(serial_time: f64, parallel_time: f64, worker_count: usize) -> Result<(f64, f64)> {
    positive("serial time", serial_time)?;
    positive("parallel time", parallel_time)?;
    if worker_count == 0 {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    let s = serial_time / parallel_time;
    Ok((s, s / worker_count as f64))
}

/// Serial energy over parallel energy.
pub fn greenup(serial_energy: f64, parallel_energy: f64) -> Result<f64> {
    positive("serial energy", serial_energy)?;
    positive("parallel energy", parallel_energy)?;
    Ok(serial_energy / parallel_energy)
}

/// Speedup over greenup: the parallel-to-serial average power ratio.
pub fn powerup(speedup: f64, greenup: f64) -> Result<f64> {
    positive("speedup", speedup)?;
    positive("greenup", greenup)?;
    Ok(speedup / greenup)
}

/// Per-interval power from a cumulative joule counter sampled at
/// `frequency` Hz: `ΔE · f`.
pub fn cpu_avg_power(energy: &[f64], frequency: f64) -> Result<Vec<f64>> {
    positive("sampling frequency", frequency)?;
    if energy.len() < 2 {
        return Err(Error::Trace("power needs at least two energy samples".into()));
    }
    energy
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let d = w[1] - w[0];
            if d < 0.0 {
                Err(Error::Trace(format!(
                    "energy counter decreases between samples {i} and {} ({} -> {})",
                    i + 1,
                    w[0],
                    w[1]
                )))
            } else {
                Ok(d * frequency)
            }
        })
        .collect()
}

/// Tick deltas of one sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickDelta {
    pub user: f64,
    pub kernel: f64,
    pub total: f64,
}

/// `(Δuser + Δkernel) / Δtotal` per interval, clamped to `[0, 1]`.
/// Intervals with `Δtotal == 0` are skipped.
pub fn cpu_avg_usage(deltas: &[TickDelta]) -> Vec<f64> {
    let mut out = Vec::with_capacity(deltas.len());
    for (i, d) in deltas.iter().enumerate() {
        if d.total == 0.0 {
            warn!("interval {i}: no elapsed ticks, skipped");
            continue;
        }
        let u = (d.user + d.kernel) / d.total;
        if !(0.0..=1.0).contains(&u) {
            warn!("interval {i}: utilisation {u} clamped");
        }
        out.push(u.clamp(0.0, 1.0));
    }
    out
}

/// Trapezoidal integral of `(t, watts)` samples, in joules.
pub fn energy_integrate(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Trace("energy integration needs at least two samples".into()));
    }
    let mut e = 0.0;
    for w in samples.windows(2) {
        let dt = w[1].0 - w[0].0;
        if dt < 0.0 {
            return Err(Error::Trace(format!("timestamps go backwards at {}", w[1].0)));
        }
        e += 0.5 * (w[0].1 + w[1].1) * dt;
    }
    Ok(e)
}

/// Instantaneous power `idle + active · busy(t)` as a step series. Each
/// breakpoint appears twice (before and after the step), so trapezoidal
/// integration of the series is exact.
pub fn synthetic_power_model(trace: &Trace, idle_watts: f64, active_watts: f64) -> Result<Vec<(f64, f64)>> {
    if !(idle_watts >= 0.0 && active_watts >= 0.0) {
        return Err(Error::invalid("power model wattages must be non-negative"));
    }
    let spans = trace.spans()?;
    let end = trace.end_time();
    let mut deltas: BTreeMap<u64, i64> = BTreeMap::new();
    let key = |t: f64| t.to_bits();
    for s in &spans {
        *deltas.entry(key(s.start)).or_default() += 1;
        *deltas.entry(key(s.end)).or_default() -= 1;
    }
    let mut points: Vec<(f64, i64)> = deltas.into_iter().map(|(k, d)| (f64::from_bits(k), d)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let watts = |busy: i64| idle_watts + active_watts * busy as f64;
    let mut series = vec![(0.0, watts(0))];
    let mut busy = 0i64;
    for (t, d) in points {
        series.push((t, watts(busy)));
        busy += d;
        series.push((t, watts(busy)));
    }
    series.push((end.max(series.last().map_or(0.0, |p| p.0)), watts(busy)));
    Ok(series)
}

/// One row of a counter trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterSample {
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    pub counter: String,
    pub value: f64,
}

fn is_cumulative(counter: &str) -> bool {
    counter == ENERGY_COUNTER || counter.ends_with("_ticks")
}

/// Counter samples grouped by name, each series in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
}

impl Counters {
    pub fn from_samples(samples: &[CounterSample]) -> Result<Self> {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for s in samples {
            let v = series.entry(s.counter.clone()).or_default();
            if let Some(&(t, prev)) = v.last() {
                if s.timestamp < t {
                    return Err(Error::Trace(format!("`{}` timestamps decrease at {}", s.counter, s.timestamp)));
                }
                if is_cumulative(&s.counter) && s.value < prev {
                    return Err(Error::Trace(format!(
                        "cumulative counter `{}` decreases at {} ({prev} -> {})",
                        s.counter, s.timestamp, s.value
                    )));
                }
            }
            v.push((s.timestamp, s.value));
        }
        Ok(Self { series })
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers != ["timestamp_s", "counter", "value"] {
            return Err(Error::Trace(format!(
                "counter header must be `timestamp_s,counter,value`, found `{}`",
                headers.join(",")
            )));
        }
        let mut samples = Vec::new();
        for (i, row) in rdr.deserialize::<CounterSample>().enumerate() {
            samples.push(row.map_err(|e| Error::Trace(format!("line {}: {e}", i + 2)))?);
        }
        Self::from_samples(&samples)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, counter: &str) -> Result<&[(f64, f64)]> {
        self.series
            .get(counter)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Trace(format!("no `{counter}` samples")))
    }

    fn values(&self, counter: &str) -> Result<Vec<f64>> {
        Ok(self.get(counter)?.iter().map(|p| p.1).collect())
    }

    /// Elapsed time covered by all samples.
    pub fn duration(&self) -> f64 {
        let ts = self.series.values().flatten().map(|p| p.0);
        let (lo, hi) = ts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }

    /// Total energy: the energy counter's increase, else the integral of
    /// `power_watts`.
    pub fn energy(&self) -> Result<f64> {
        if let Ok(e) = self.get(ENERGY_COUNTER) {
            let (first, last) = (e.first().expect("non-empty").1, e.last().expect("non-empty").1);
            return Ok(last - first);
        }
        energy_integrate(self.get(POWER_WATTS)?)
    }

    /// Power series from the energy counter at `frequency` Hz.
    pub fn power(&self, frequency: f64) -> Result<Vec<f64>> {
        cpu_avg_power(&self.values(ENERGY_COUNTER)?, frequency)
    }

    /// Utilisation series from the three cumulative tick counters.
    pub fn usage(&self) -> Result<Vec<f64>> {
        let (u, k, t) = (
            self.values(USER_TICKS)?,
            self.values(KERNEL_TICKS)?,
            self.values(TOTAL_TICKS)?,
        );
        if u.len() != k.len() || u.len() != t.len() {
            return Err(Error::Trace("tick counters have different sample counts".into()));
        }
        let deltas: Vec<TickDelta> = (1..u.len())
            .map(|i| TickDelta {
                user: u[i] - u[i - 1],
                kernel: k[i] - k[i - 1],
                total: t[i] - t[i - 1],
            })
            .collect();
        Ok(cpu_avg_usage(&deltas))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDuration {
    pub task_id: usize,
    pub worker_id: usize,
    pub start: f64,
    pub end: f64,
    pub duration: f64,
}

impl From<TaskSpan> for TaskDuration {
    fn from(s: TaskSpan) -> Self {
        Self {
            task_id: s.task_id,
            worker_id: s.worker_id,
            start: s.start,
            end: s.end,
            duration: s.end - s.start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub worker_count: usize,
    pub serial_time: f64,
    pub parallel_time: f64,
    pub speedup: f64,
    pub efficiency: f64,
    pub serial_energy: f64,
    pub parallel_energy: f64,
    pub greenup: f64,
    /// Derived: speedup / greenup.
    pub powerup: f64,
    pub worker_busy_fraction: Vec<f64>,
    pub task_durations: Vec<TaskDuration>,
}

impl MetricsReport {
    pub fn new(
        worker_count: usize,
        serial_time: f64,
        parallel_time: f64,
        serial_energy: f64,
        parallel_energy: f64,
    ) -> Result<Self> {
        let (speedup, efficiency) = speedup_efficiency(serial_time, parallel_time, worker_count)?;
        let g = greenup(serial_energy, parallel_energy)?;
        Ok(Self {
            worker_count,
            serial_time,
            parallel_time,
            speedup,
            efficiency,
            serial_energy,
            parallel_energy,
            greenup: g,
            powerup: powerup(speedup, g)?,
            worker_busy_fraction: Vec::new(),
            task_durations: Vec::new(),
        })
    }

    /// Fill per-worker and per-task columns from a parallel trace.
    pub fn with_trace(mut self, trace: &Trace) -> Result<Self> {
        let mut busy = trace.busy_fractions()?;
        busy.resize(self.worker_count.max(busy.len()), 0.0);
        self.worker_busy_fraction = busy;
        self.task_durations = trace.spans()?.into_iter().map(TaskDuration::from).collect();
        Ok(self)
    }

    /// Report from serial and parallel counter traces.
    pub fn from_counters(serial: &Counters, parallel: &Counters, worker_count: usize) -> Result<Self> {
        Self::new(
            worker_count,
            serial.duration(),
            parallel.duration(),
            serial.energy()?,
            parallel.energy()?,
        )
    }

    /// Per-task timeline CSV for Gantt plots.
    pub fn timeline_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.task_durations {
            w.serialize(t)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Trace(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "workers          {}", self.worker_count)?;
        writeln!(f, "serial time      {:.2} s", self.serial_time)?;
        writeln!(f, "parallel time    {:.2} s", self.parallel_time)?;
        writeln!(f, "speedup          {:.2}", self.speedup)?;
        writeln!(f, "efficiency       {:.2}", self.efficiency)?;
        writeln!(f, "serial energy    {:.2} kJ", self.serial_energy / 1000.0)?;
        writeln!(f, "parallel energy  {:.2} kJ", self.parallel_energy / 1000.0)?;
        writeln!(f, "greenup          {:.2}", self.greenup)?;
        write!(f, "powerup          {:.2} (derived)", self.powerup)?;
        for (w, b) in self.worker_busy_fraction.iter().enumerate() {
            write!(f, "\nworker {w} busy    {:.2}", b)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{simulate_execution, StealTiming};
    use crate::scheduler::{weights_from, Policy};

    #[test]
    fn speedup_examples() {
        let (s, e) = speedup_efficiency(9693.24, 2749.81, 4).unwrap();
        assert_eq!(format!("{s:.2} {e:.2}"), "3.53 0.88");
        assert_eq!(speedup_efficiency(5.0, 5.0, 3).unwrap(), (1.0, 1.0 / 3.0));
        let (s, e) = speedup_efficiency(33605.60, 16821.35, 2).unwrap();
        assert_eq!(format!("{s:.3} {e:.3}"), "1.998 0.999");
        assert!(speedup_efficiency(0.0, 1.0, 1).is_err());
        assert!(speedup_efficiency(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn greenup_examples() {
        assert_eq!(format!("{:.2}", greenup(1263.43, 977.39).unwrap()), "1.29");
        assert_eq!(format!("{:.2}", greenup(1061.98, 893.44).unwrap()), "1.19");
        assert_eq!(greenup(7.0, 7.0).unwrap(), 1.0);
        assert!(greenup(-1.0, 1.0).is_err());
    }

    #[test]
    fn power_and_usage() {
        assert_eq!(cpu_avg_power(&[0.0, 50.0], 1.0).unwrap(), vec![50.0]);
        assert_eq!(cpu_avg_power(&[0.0, 25.0], 2.0).unwrap(), vec![50.0]);
        assert_eq!(cpu_avg_power(&[0.0, 40.0, 100.0], 1.0).unwrap(), vec![40.0, 60.0]);
        assert!(cpu_avg_power(&[5.0, 4.0], 1.0).is_err());
        assert!(cpu_avg_power(&[5.0], 1.0).is_err());

        let d = |user, kernel, total| TickDelta { user, kernel, total };
        assert_eq!(
            cpu_avg_usage(&[d(30.0, 10.0, 80.0), d(0.0, 0.0, 50.0), d(60.0, 40.0, 100.0), d(1.0, 1.0, 0.0)]),
            vec![0.5, 0.0, 1.0]
        );
        assert_eq!(cpu_avg_usage(&[d(90.0, 20.0, 100.0)]), vec![1.0]);
    }

    #[test]
    fn integration_examples() {
        assert_eq!(energy_integrate(&[(0.0, 100.0), (10.0, 100.0)]).unwrap(), 1000.0);
        assert_eq!(energy_integrate(&[(0.0, 0.0), (10.0, 100.0)]).unwrap(), 500.0);
        assert_eq!(energy_integrate(&[(0.0, 40.0), (1.0, 60.0), (3.0, 60.0)]).unwrap(), 170.0);
        assert!(energy_integrate(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn synthetic_power_of_wfd_example() {
        let sim = simulate_execution(Policy::Wfd, &weights_from(&[8.0, 7.0, 6.0, 5.0, 4.0]), 2, StealTiming::instant())
            .unwrap();
        let series = synthetic_power_model(&sim.trace, 50.0, 100.0).unwrap();
        assert_eq!(energy_integrate(&series).unwrap(), 3850.0);
        let idle_only = synthetic_power_model(&crate::runtime::Trace::default(), 50.0, 100.0).unwrap();
        assert!(idle_only.iter().all(|p| p.1 == 50.0));
    }

    #[test]
    fn counters_validate_and_report() {
        let text = "timestamp_s,counter,value\n0,cpu_energy_joules,0\n1,cpu_energy_joules,40\n2,cpu_energy_joules,100\n";
        let c = Counters::parse_csv(text).unwrap();
        assert_eq!(c.power(1.0).unwrap(), vec![40.0, 60.0]);
        assert_eq!(c.energy().unwrap(), 100.0);
        assert_eq!(c.duration(), 2.0);
        let bad = "timestamp_s,counter,value\n0,cpu_energy_joules,10\n1,cpu_energy_joules,5\n";
        assert!(Counters::parse_csv(bad).is_err());
        assert!(Counters::parse_csv("t,c\n").is_err());

        let r = MetricsReport::new(4, 9693.24, 2749.81, 1_263_430.0, 977_390.0).unwrap();
        assert!((r.powerup * r.greenup - r.speedup).abs() < 1e-12);
        assert!(r.to_string().contains("greenup          1.29"));
    }
}

//! sEMG processing chain: band-pass, rectification, moving-RMS envelope,
//! first-order activation, Hill-type force, yaw-gated mapping to an upward
//! equilibrium shift.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmgError {
    #[error("band {f_lo}..{f_hi} Hz invalid for sampling rate {fs} Hz")]
    BadBand { f_lo: f64, f_hi: f64, fs: f64 },
    #[error("envelope window {window} s shorter than two samples at {fs} Hz")]
    BadWindow { window: f64, fs: f64 },
    #[error("invalid trace: {0}")]
    BadTrace(String),
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Uniformly sampled multi-channel sEMG, millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgTrace {
    pub fs: f64,
    /// Time of the first sample, s.
    pub t0: f64,
    pub channels: Vec<(String, Vec<f64>)>,
}

impl EmgTrace {
    pub fn single(fs: f64, samples: Vec<f64>) -> Self {
        EmgTrace {
            fs,
            t0: 0.0,
            channels: vec![("ch1".to_string(), samples)],
        }
    }

    pub fn len(&self) -> usize {
        self.channels.first().map(|c| c.1.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.fs
    }

    pub fn validate(&self) -> Result<(), EmgError> {
        if !(self.fs > 0.0) || !self.fs.is_finite() {
            return Err(EmgError::BadTrace(format!("sampling rate must be positive, got {}", self.fs)));
        }
        if self.channels.is_empty() {
            return Err(EmgError::BadTrace("trace has no channels".into()));
        }
        let n = self.len();
        for (name, s) in &self.channels {
            if s.len() != n {
                return Err(EmgError::BadTrace(format!("channel {name} has {} samples, expected {n}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(EmgError::BadTrace(format!("channel {name} contains non-finite samples")));
            }
        }
        Ok(())
    }

    fn map_channels(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> EmgTrace {
        EmgTrace {
            fs: self.fs,
            t0: self.t0,
            channels: self.channels.iter().map(|(n, s)| (n.clone(), f(s))).collect(),
        }
    }

    /// Read CSV with header `t,ch1[,ch2,...]`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, EmgError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "t" {
            return Err(EmgError::BadTrace("header must be t,ch1[,ch2,...]".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            let vals = parse_row(&rec, headers.len())?;
            times.push(vals[0]);
            for (c, v) in cols.iter_mut().zip(vals.iter().skip(1)) {
                c.push(*v);
            }
        }
        if times.len() < 2 {
            return Err(EmgError::BadTrace("trace needs at least two samples".into()));
        }
        let span = times[times.len() - 1] - times[0];
        if !(span > 0.0) {
            return Err(EmgError::BadTrace("time column must increase".into()));
        }
        let dt = span / (times.len() - 1) as f64;
        for w in times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 0.01 * dt {
                return Err(EmgError::BadTrace("samples must be uniformly spaced".into()));
            }
        }
        let trace = EmgTrace {
            fs: 1.0 / dt,
            t0: times[0],
            channels: names.into_iter().zip(cols).collect(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EmgError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(self.channels.iter().map(|c| c.0.clone()));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![fmt_num(self.time(i))];
            row.extend(self.channels.iter().map(|c| fmt_num(c.1[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip form, switching to exponent notation for very small
/// or large magnitudes.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn parse_row(rec: &csv::StringRecord, width: usize) -> Result<Vec<f64>, EmgError> {
    if rec.len() != width {
        return Err(EmgError::BadTrace(format!("row has {} fields, expected {width}", rec.len())));
    }
    rec.iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| EmgError::BadTrace(format!("bad number '{f}'")))
        })
        .collect()
}

/// Normalized biquad coefficients (`a0 = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Second-order band-pass with unit gain at `sqrt(f_lo * f_hi)`.
    pub fn bandpass(fs: f64, f_lo: f64, f_hi: f64) -> Result<Self, EmgError> {
        if !(f_lo > 0.0 && f_lo < f_hi && f_hi < fs / 2.0) {
            return Err(EmgError::BadBand { f_lo, f_hi, fs });
        }
        let f0 = (f_lo * f_hi).sqrt();
        let q = f0 / (f_hi - f_lo);
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Ok(Biquad {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [1.0, -2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        })
    }

    /// Steady-state transposed direct-form state for a unit step.
    fn step_state(&self) -> [f64; 2] {
        let gain = (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2]);
        let z2 = self.b[2] - self.a[2] * gain;
        let z1 = self.b[1] - self.a[1] * gain + z2;
        [z1, z2]
    }

    fn run(&self, x: &[f64], init: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut z1, mut z2) = (init[0], init[1]);
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z1;
                z1 = b1 * xi - a1 * y + z2;
                z2 = b2 * xi - a2 * y;
                y
            })
            .collect()
    }

    /// Zero-phase forward-backward filtering with odd-extension padding.
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let x0 = ext[0];
        let mut fwd = self.run(&ext, [zi[0] * x0, zi[1] * x0]);
        fwd.reverse();
        let y0 = fwd[0];
        let mut back = self.run(&fwd, [zi[0] * y0, zi[1] * y0]);
        back.reverse();
        back[pad..pad + n].to_vec()
    }

    /// `|H(e^{j 2 pi f / fs})|`.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

fn default_padlen(fs: f64, f_lo: f64) -> usize {
    (3.0 * fs / f_lo).ceil() as usize
}

/// Zero-phase second-order band-pass of every channel.
pub fn bandpass(trace: &EmgTrace, f_lo: f64, f_hi: f64) -> Result<EmgTrace, EmgError> {
    trace.validate()?;
    let bq = Biquad::bandpass(trace.fs, f_lo, f_hi)?;
    let pad = default_padlen(trace.fs, f_lo);
    Ok(trace.map_channels(|s| bq.filtfilt(s, pad)))
}

pub fn rectify(trace: &EmgTrace) -> EmgTrace {
    trace.map_channels(|s| s.iter().map(|v| v.abs()).collect())
}

/// Causal moving RMS over `window` seconds; the first samples average over
/// what is available.
pub fn envelope(trace: &EmgTrace, window: f64) -> Result<EmgTrace, EmgError> {
    let n = window_samples(window, trace.fs)?;
    Ok(trace.map_channels(|s| moving_rms(s, n)))
}

fn window_samples(window: f64, fs: f64) -> Result<usize, EmgError> {
    if !(window * fs >= 2.0 - 1e-9) || !window.is_finite() {
        return Err(EmgError::BadWindow { window, fs });
    }
    Ok(((window * fs).round() as usize).max(2))
}

fn moving_rms(s: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.len());
    let mut acc = 0.0;
    for i in 0..s.len() {
        acc += s[i] * s[i];
        if i >= n {
            acc -= s[i - n] * s[i - n];
        }
        if i % 4096 == 4095 {
            // resum to keep the running sum from drifting
            acc = s[(i + 1).saturating_sub(n)..=i].iter().map(|v| v * v).sum();
        }
        let count = (i + 1).min(n) as f64;
        out.push((acc.max(0.0) / count).sqrt());
    }
    out
}

/// Hill-type muscle parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HillParams {
    /// Maximum isometric force, N.
    pub f_max: f64,
    pub act_tau_rise: f64,
    pub act_tau_fall: f64,
    pub fl_factor: f64,
    pub fv_factor: f64,
    /// Envelope level mapped to full activation, mV.
    pub mvc_reference: f64,
}

impl Default for HillParams {
    fn default() -> Self {
        HillParams {
            f_max: 300.0,
            act_tau_rise: 0.05,
            act_tau_fall: 0.1,
            fl_factor: 1.0,
            fv_factor: 1.0,
            mvc_reference: 1.0,
        }
    }
}

impl HillParams {
    pub fn validate(&self) -> Result<(), EmgError> {
        let ok = self.f_max > 0.0
            && self.act_tau_rise > 0.0
            && self.act_tau_fall > 0.0
            && self.mvc_reference > 0.0
            && self.fl_factor > 0.0
            && self.fl_factor <= 1.5
            && self.fv_factor > 0.0
            && self.fv_factor <= 1.5;
        if ok {
            Ok(())
        } else {
            Err(EmgError::BadParams(format!("invalid Hill parameters {self:?}")))
        }
    }
}

/// One explicit step of first-order activation dynamics towards
/// `clamp(envelope / mvc_reference, 0, 1)`.
pub fn activation(envelope_value: f64, params: &HillParams, prev_a: f64, dt: f64) -> f64 {
    let u = (envelope_value / params.mvc_reference).clamp(0.0, 1.0);
    let tau = if u > prev_a { params.act_tau_rise } else { params.act_tau_fall };
    // dt/tau above 1 would overshoot the target
    let gain = (dt / tau).min(1.0);
    (prev_a + gain * (u - prev_a)).clamp(0.0, 1.0)
}

/// `a * f_max * fl * fv`, N.
pub fn hill_force(a: f64, params: &HillParams) -> f64 {
    a * params.f_max * params.fl_factor * params.fv_factor
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSample {
    pub t: f64,
    /// Rotation about the vertical axis, rad.
    pub yaw: f64,
}

pub fn read_motion_csv<R: Read>(reader: R) -> Result<Vec<MotionSample>, EmgError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "yaw_rad" {
        return Err(EmgError::BadTrace("motion header must be t,yaw_rad".into()));
    }
    let mut out: Vec<MotionSample> = Vec::new();
    for rec in rdr.records() {
        let v = parse_row(&rec?, 2)?;
        if out.last().is_some_and(|p| v[0] < p.t) {
            return Err(EmgError::BadTrace("motion timestamps must be nondecreasing".into()));
        }
        out.push(MotionSample { t: v[0], yaw: v[1] });
    }
    Ok(out)
}

/// Schmitt-trigger gate on `|yaw|`.
pub fn motion_gate(yaw: f64, threshold: f64, hysteresis: f64, prev_on: bool) -> bool {
    let mag = yaw.abs();
    if mag >= threshold {
        true
    } else if mag <= threshold - hysteresis {
        false
    } else {
        prev_on
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    pub threshold: f64,
    pub hysteresis: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            threshold: 0.3,
            hysteresis: 0.05,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<(), EmgError> {
        if self.threshold > self.hysteresis && self.hysteresis >= 0.0 {
            Ok(())
        } else {
            Err(EmgError::BadParams("gate needs threshold > hysteresis >= 0".into()))
        }
    }
}

/// Stateful gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionGate {
    pub params: GateParams,
    pub on: bool,
}

impl MotionGate {
    pub fn new(params: GateParams) -> Self {
        MotionGate { params, on: false }
    }

    pub fn update(&mut self, yaw: f64) -> bool {
        self.on = motion_gate(yaw, self.params.threshold, self.params.hysteresis, self.on);
        self.on
    }
}

/// Upward equilibrium shift `gain * f_muscle` while the gate is on, else 0.
pub fn map_to_equilibrium(f_muscle: f64, gate_on: bool, gain: f64) -> f64 {
    if gate_on {
        gain * f_muscle
    } else {
        0.0
    }
}

/// Settings of the whole chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmgConfig {
    /// Pass band, Hz.
    pub band: [f64; 2],
    /// Envelope window, s.
    pub window: f64,
    pub hill: HillParams,
    pub gate: GateParams,
    /// Equilibrium shift per newton of muscle force, m/N.
    pub gain: f64,
}

impl Default for EmgConfig {
    fn default() -> Self {
        EmgConfig {
            band: [20.0, 450.0],
            window: 0.1,
            hill: HillParams::default(),
            gate: GateParams::default(),
            gain: 1e-3,
        }
    }
}

impl EmgConfig {
    pub fn validate(&self) -> Result<(), EmgError> {
        self.hill.validate()?;
        self.gate.validate()?;
        if !(self.gain >= 0.0) {
            return Err(EmgError::BadParams("gain must be nonnegative".into()));
        }
        if !(self.band[0] > 0.0 && self.band[0] < self.band[1]) {
            return Err(EmgError::BadBand {
                f_lo: self.band[0],
                f_hi: self.band[1],
                fs: f64::NAN,
            });
        }
        Ok(())
    }

    /// Band-pass, rectify and envelope; channels averaged into one series.
    pub fn envelope_series(&self, trace: &EmgTrace) -> Result<Vec<f64>, EmgError> {
        let env = envelope(&rectify(&bandpass(trace, self.band[0], self.band[1])?), self.window)?;
        let count = env.channels.len() as f64;
        Ok((0..env.len())
            .map(|i| env.channels.iter().map(|c| c.1[i]).sum::<f64>() / count)
            .collect())
    }
}

/// One output row of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineSample {
    pub t: f64,
    pub envelope: f64,
    pub activation: f64,
    pub force_n: f64,
    pub gate: bool,
    pub dxeq_m: f64,
}

/// Sample-by-sample state after the envelope stage.
#[derive(Debug, Clone)]
pub struct EmgStream {
    config: EmgConfig,
    t0: f64,
    fs: f64,
    envelope: Vec<f64>,
    activation: f64,
    gate: MotionGate,
}

impl EmgStream {
    pub fn new(config: EmgConfig, trace: &EmgTrace) -> Result<Self, EmgError> {
        config.validate()?;
        let envelope = config.envelope_series(trace)?;
        Ok(EmgStream {
            gate: MotionGate::new(config.gate),
            config,
            t0: trace.t0,
            fs: trace.fs,
            envelope,
            activation: 0.0,
        })
    }

    /// Zero-order-held envelope at time `t`; zero before the first sample.
    pub fn envelope_at(&self, t: f64) -> f64 {
        if self.envelope.is_empty() || t < self.t0 {
            return 0.0;
        }
        let idx = ((t - self.t0) * self.fs + 1e-9).floor() as usize;
        self.envelope[idx.min(self.envelope.len() - 1)]
    }

    /// Advance activation by `dt` and evaluate force, gate and shift at `t`.
    /// `yaw = None` bypasses the gate.
    pub fn step(&mut self, t: f64, dt: f64, yaw: Option<f64>) -> PipelineSample {
        let env = self.envelope_at(t);
        if dt > 0.0 {
            self.activation = activation(env, &self.config.hill, self.activation, dt);
        }
        let force = hill_force(self.activation, &self.config.hill);
        let gate = match yaw {
            Some(y) => self.gate.update(y),
            None => true,
        };
        PipelineSample {
            t,
            envelope: env,
            activation: self.activation,
            force_n: force,
            gate,
            dxeq_m: map_to_equilibrium(force, gate, self.config.gain),
        }
    }
}

/// Zero-order hold lookup into a time-sorted motion stream.
pub fn yaw_at(motion: &[MotionSample], t: f64) -> f64 {
    let idx = motion.partition_point(|m| m.t <= t);
    if idx == 0 {
        0.0
    } else {
        motion[idx - 1].yaw
    }
}

/// Offline run over a trace, optionally gated by a motion stream. Rows are
/// emitted at the union of both streams' timestamps.
pub fn run_pipeline(
    config: &EmgConfig,
    trace: &EmgTrace,
    motion: Option<&[MotionSample]>,
) -> Result<Vec<PipelineSample>, EmgError> {
    let mut stream = EmgStream::new(config.clone(), trace)?;
    let mut times: Vec<f64> = (0..trace.len()).map(|i| trace.time(i)).collect();
    if let Some(m) = motion {
        times.extend(m.iter().map(|s| s.t));
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite timestamps"));
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    }
    let mut out = Vec::with_capacity(times.len());
    let mut prev = times.first().map(|t| t - 1.0 / trace.fs).unwrap_or(0.0);
    for &t in &times {
        let yaw = motion.map(|m| yaw_at(m, t));
        out.push(stream.step(t, t - prev, yaw));
        prev = t;
    }
    Ok(out)
}

pub fn write_pipeline_csv<W: Write>(rows: &[PipelineSample], writer: W) -> Result<(), EmgError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["t", "envelope", "activation", "force_n", "gate", "dxeq_m"])?;
    for r in rows {
        w.write_record([
            fmt_num(r.t),
            fmt_num(r.envelope),
            fmt_num(r.activation),
            fmt_num(r.force_n),
            (r.gate as u8).to_string(),
            fmt_num(r.dxeq_m),
        ])?;
    }
    w.flush()?;
    Ok(())
}

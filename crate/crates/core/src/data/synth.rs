//! Synthetic phone thermal model.
//!
//! The battery temperature relaxes toward `ambient + heat` with time constant
//! `tau`, where `heat` depends on the screen state and battery voltage. The
//! reported battery temperature carries a constant per-phone sensor bias. The
//! screen follows a two-state Markov process and the streak clocks F4-F9 are
//! maintained exactly as a phone would log them.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{PhoneDataset, Role, Sample};
use crate::error::{Error, Result};
use crate::rng::{derive, rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthPhoneParams {
    /// Thermal time constant, seconds.
    pub tau_s: f64,
    /// Extra equilibrium heating while the screen is on, °C.
    pub screen_heating_offset: f64,
    /// Equilibrium heating per volt above [`REFERENCE_VOLTAGE`], °C/V.
    pub voltage_heating_coef: f64,
    /// Constant offset of the reported battery temperature, °C.
    pub sensor_bias: f64,
    /// Stationary standard deviation of the battery temperature noise, °C.
    pub noise_std: f64,
}

pub const REFERENCE_VOLTAGE: f64 = 3.7;

impl SynthPhoneParams {
    fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0) {
            return Err(Error::contract(format!(
                "tau must be > 0, got {}",
                self.tau_s
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::contract(format!(
                "noise std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenProcess {
    /// Mean on-streak length, seconds. Infinite keeps the screen on.
    pub mean_on_s: f64,
    /// Mean off-streak length, seconds. Infinite keeps the screen off.
    pub mean_off_s: f64,
    /// Probability that a session starts with the screen on.
    pub p_start_on: f64,
}

impl ScreenProcess {
    pub fn always_off() -> Self {
        Self {
            mean_on_s: 1.0,
            mean_off_s: f64::INFINITY,
            p_start_on: 0.0,
        }
    }
}

impl Default for ScreenProcess {
    fn default() -> Self {
        Self {
            mean_on_s: 300.0,
            mean_off_s: 600.0,
            p_start_on: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSpec {
    pub n_sessions: usize,
    pub session_length_s: f64,
    pub tick_s: f64,
    pub ambient_min: f64,
    pub ambient_max: f64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            n_sessions: 40,
            session_length_s: 1800.0,
            tick_s: 20.0,
            ambient_min: 12.0,
            ambient_max: 35.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub screen: ScreenProcess,
    /// Half-width of the uniform battery offset from equilibrium at session start, °C.
    pub initial_offset: f64,
    /// Ambient temperatures are drawn on this grid so phones share labels.
    pub label_grid: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            screen: ScreenProcess::default(),
            initial_offset: 2.0,
            label_grid: 0.1,
        }
    }
}

/// Draws `n` ambient temperatures uniformly from `[min, max]`, snapped to `grid`.
pub fn ambient_schedule(n: usize, min: f64, max: f64, grid: f64, seed: u64) -> Result<Vec<f64>> {
    if !(min < max) || !(grid > 0.0) {
        return Err(Error::contract(format!(
            "invalid ambient range [{min}, {max}] or grid {grid}"
        )));
    }
    let mut r = rng(seed);
    Ok((0..n)
        .map(|_| snap(r.random_range(min..=max), grid).clamp(min, max))
        .collect())
}

fn snap(v: f64, grid: f64) -> f64 {
    let k = (v / grid).round();
    // Keeps the textual value short, e.g. 23.400000000000002 -> 23.4.
    (k * grid * 1e6).round() / 1e6
}

/// Simulates `spec.n_sessions` sessions with ambient temperatures drawn from
/// `seed`.
pub fn synth_generate(
    phone_id: &str,
    params: &SynthPhoneParams,
    spec: &SessionSpec,
    options: &SynthOptions,
    seed: u64,
) -> Result<PhoneDataset> {
    let schedule = ambient_schedule(
        spec.n_sessions,
        spec.ambient_min,
        spec.ambient_max,
        options.label_grid,
        derive(seed, 0),
    )?;
    let sessions: Vec<usize> = (0..schedule.len()).collect();
    synth_generate_sessions(
        phone_id,
        params,
        &schedule,
        &sessions,
        spec,
        options,
        derive(seed, 1),
    )
}

/// Simulates the sessions `attended` of a shared ambient `schedule`.
pub fn synth_generate_sessions(
    phone_id: &str,
    params: &SynthPhoneParams,
    schedule: &[f64],
    attended: &[usize],
    spec: &SessionSpec,
    options: &SynthOptions,
    seed: u64,
) -> Result<PhoneDataset> {
    params.validate()?;
    if !(spec.tick_s > 0.0) {
        return Err(Error::contract(format!(
            "tick must be > 0, got {}",
            spec.tick_s
        )));
    }
    if !(spec.tick_s < params.tau_s) {
        return Err(Error::contract(format!(
            "tick {} must be shorter than tau {}",
            spec.tick_s, params.tau_s
        )));
    }
    if spec.session_length_s < 10.0 * spec.tick_s {
        return Err(Error::contract(format!(
            "session length {} must be at least 10 ticks of {}",
            spec.session_length_s, spec.tick_s
        )));
    }
    if !(spec.ambient_min < spec.ambient_max) {
        return Err(Error::contract("ambient range is empty"));
    }
    let mut r = rng(seed);
    let mut samples = Vec::new();
    for &s in attended {
        let ambient = *schedule
            .get(s)
            .ok_or_else(|| Error::contract(format!("session {s} not in schedule")))?;
        simulate_session(params, ambient, spec, options, &mut r, &mut samples);
    }
    PhoneDataset::new(phone_id, Role::Contributor, samples)
}

struct Clocks {
    on: bool,
    streak: f64,
    last_on_streak: f64,
    last_off_streak: f64,
    temp_at_on: f64,
    temp_at_off: f64,
}

fn simulate_session(
    p: &SynthPhoneParams,
    ambient: f64,
    spec: &SessionSpec,
    opt: &SynthOptions,
    r: &mut Rng,
    out: &mut Vec<Sample>,
) {
    let a = spec.tick_s / p.tau_s;
    // Innovation std giving a stationary std of `noise_std`.
    let innov = Normal::new(0.0, p.noise_std * (2.0 * a - a * a).sqrt()).expect("finite std");
    let volt_noise = Normal::new(0.0, 0.001).expect("finite std");
    let flip_prob = |mean: f64| {
        if mean.is_finite() {
            (spec.tick_s / mean).min(1.0)
        } else {
            0.0
        }
    };
    let p_on_off = flip_prob(opt.screen.mean_on_s);
    let p_off_on = flip_prob(opt.screen.mean_off_s);

    let heat = |on: bool, v: f64| {
        let screen = if on { p.screen_heating_offset } else { 0.0 };
        screen + p.voltage_heating_coef * (v - REFERENCE_VOLTAGE)
    };

    let mut voltage: f64 = r.random_range(3.75..4.3);
    let on = r.random_bool(opt.screen.p_start_on.clamp(0.0, 1.0));
    let start_offset = if opt.initial_offset > 0.0 {
        r.random_range(-opt.initial_offset..=opt.initial_offset)
    } else {
        0.0
    };
    let mut t_batt = ambient + heat(on, voltage) + start_offset;
    let reading0 = t_batt + p.sensor_bias;
    let mut c = Clocks {
        on,
        streak: 0.0,
        last_on_streak: 0.0,
        last_off_streak: 0.0,
        temp_at_on: reading0,
        temp_at_off: reading0,
    };

    let n_ticks = (spec.session_length_s / spec.tick_s).floor() as usize;
    for _ in 0..n_ticks {
        let flip = r.random_bool(if c.on { p_on_off } else { p_off_on });
        let on_now = c.on ^ flip;
        let drain = if on_now { 1.2e-4 } else { 1.5e-5 };
        voltage = (voltage - drain * spec.tick_s + volt_noise.sample(r)).clamp(3.4, 4.4);
        t_batt += a * (ambient + heat(on_now, voltage) - t_batt) + innov.sample(r);
        let reading = t_batt + p.sensor_bias;

        if flip {
            let ended = c.streak + spec.tick_s;
            if on_now {
                c.last_off_streak = ended;
                c.temp_at_on = reading;
            } else {
                c.last_on_streak = ended;
                c.temp_at_off = reading;
            }
            c.on = on_now;
            c.streak = 0.0;
        } else {
            c.streak += spec.tick_s;
        }
        let (on_time, off_time) = if c.on {
            (c.streak, c.last_off_streak)
        } else {
            (c.last_on_streak, c.streak)
        };
        out.push(Sample {
            screen_on: if c.on { 1.0 } else { 0.0 },
            battery_voltage: voltage,
            battery_temp: reading,
            screen_on_time: on_time,
            screen_off_time: off_time,
            off_time_before_on: c.last_off_streak,
            on_time_before_off: c.last_on_streak,
            temp_at_last_on: c.temp_at_on,
            temp_at_last_off: c.temp_at_off,
            label: ambient,
        });
    }
}

/// Ranges the default phone population is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhonePopulation {
    pub tau_s: (f64, f64),
    pub screen_heating_offset: (f64, f64),
    pub voltage_heating_coef: (f64, f64),
    pub sensor_bias: (f64, f64),
    pub noise_std: (f64, f64),
}

impl Default for PhonePopulation {
    fn default() -> Self {
        Self {
            tau_s: (120.0, 600.0),
            screen_heating_offset: (1.0, 4.0),
            voltage_heating_coef: (0.0, 2.0),
            sensor_bias: (-1.5, 1.5),
            noise_std: (0.05, 0.3),
        }
    }
}

impl PhonePopulation {
    pub fn draw(&self, seed: u64) -> SynthPhoneParams {
        let mut r = rng(seed);
        let mut u = |(lo, hi): (f64, f64)| if lo < hi { r.random_range(lo..=hi) } else { lo };
        SynthPhoneParams {
            tau_s: u(self.tau_s),
            screen_heating_offset: u(self.screen_heating_offset),
            voltage_heating_coef: u(self.voltage_heating_coef),
            sensor_bias: u(self.sensor_bias),
            noise_std: u(self.noise_std),
        }
    }
}

/// A co-located phone population sharing one ambient schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusSpec {
    pub contributors: usize,
    pub participants: usize,
    pub sessions: SessionSpec,
    /// Probability that a phone is present for any given session.
    pub attendance: f64,
    pub population: PhonePopulation,
    pub options: SynthOptions,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            contributors: 6,
            participants: 3,
            sessions: SessionSpec::default(),
            attendance: 0.8,
            population: PhonePopulation::default(),
            options: SynthOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPhone {
    pub params: SynthPhoneParams,
    pub dataset: PhoneDataset,
}

/// Contributors are named `C1..`, participants `P1..`.
pub fn synth_corpus(spec: &SynthCorpusSpec, seed: u64) -> Result<Vec<SynthPhone>> {
    let n = spec.contributors + spec.participants;
    let schedule = ambient_schedule(
        spec.sessions.n_sessions,
        spec.sessions.ambient_min,
        spec.sessions.ambient_max,
        spec.options.label_grid,
        derive(seed, 0),
    )?;
    let mut phones = Vec::with_capacity(n);
    for i in 0..n {
        let (id, role) = if i < spec.contributors {
            (format!("C{}", i + 1), Role::Contributor)
        } else {
            (format!("P{}", i + 1 - spec.contributors), Role::Participant)
        };
        let phone_seed = derive(seed, 100 + i as u64);
        let params = spec.population.draw(derive(phone_seed, 0));
        let mut r = rng(derive(phone_seed, 1));
        let mut attended: Vec<usize> = (0..schedule.len())
            .filter(|_| r.random_bool(spec.attendance.clamp(0.0, 1.0)))
            .collect();
        if attended.is_empty() {
            attended.push(r.random_range(0..schedule.len().max(1)));
        }
        let mut dataset = synth_generate_sessions(
            &id,
            &params,
            &schedule,
            &attended,
            &spec.sessions,
            &spec.options,
            derive(phone_seed, 2),
        )?;
        dataset.role = role;
        phones.push(SynthPhone { params, dataset });
    }
    Ok(phones)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthPhoneParams {
        SynthPhoneParams {
            tau_s: 200.0,
            screen_heating_offset: 0.0,
            voltage_heating_coef: 0.0,
            sensor_bias: 0.0,
            noise_std: 0.0,
        }
    }

    #[test]
    fn relaxes_to_ambient_without_heat_or_noise() {
        let spec = SessionSpec {
            n_sessions: 1,
            session_length_s: 4000.0,
            tick_s: 10.0,
            ..SessionSpec::default()
        };
        let opts = SynthOptions {
            screen: ScreenProcess::always_off(),
            initial_offset: 5.0,
            label_grid: 0.1,
        };
        let d = synth_generate("q", &quiet(), &spec, &opts, 3).unwrap();
        let first = d.samples[0];
        let last = *d.samples.last().unwrap();
        let ambient = last.label;
        // Undo the first relaxation step to recover the starting temperature.
        let a = 10.0 / 200.0;
        let t0 = (first.battery_temp - a * ambient) / (1.0 - a);
        assert!((last.battery_temp - ambient).abs() <= 0.01 * (t0 - ambient).abs());
        assert!(d.samples.iter().all(|s| s.screen_on == 0.0));
    }

    #[test]
    fn same_seed_same_dataset() {
        let p = PhonePopulation::default().draw(4);
        let spec = SessionSpec {
            n_sessions: 3,
            ..SessionSpec::default()
        };
        let a = synth_generate("x", &p, &spec, &SynthOptions::default(), 8).unwrap();
        let b = synth_generate("x", &p, &spec, &SynthOptions::default(), 8).unwrap();
        assert_eq!(a, b);
        let c = synth_generate("x", &p, &spec, &SynthOptions::default(), 9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configuration_rejected() {
        let spec = SessionSpec::default();
        let opts = SynthOptions::default();
        let mut p = quiet();
        p.tau_s = 0.0;
        assert!(synth_generate("x", &p, &spec, &opts, 0).is_err());
        let short = SessionSpec {
            session_length_s: 50.0,
            ..spec
        };
        assert!(synth_generate("x", &quiet(), &short, &opts, 0).is_err());
        let inverted = SessionSpec {
            ambient_min: 30.0,
            ambient_max: 20.0,
            ..spec
        };
        assert!(synth_generate("x", &quiet(), &inverted, &opts, 0).is_err());
    }

    #[test]
    fn generated_samples_are_valid_and_streaks_consistent() {
        let spec = SessionSpec {
            n_sessions: 6,
            tick_s: 15.0,
            ..SessionSpec::default()
        };
        for k in 0..4 {
            let p = PhonePopulation::default().draw(k);
            let d = synth_generate("x", &p, &spec, &SynthOptions::default(), k).unwrap();
            let per_session = (spec.session_length_s / spec.tick_s) as usize;
            assert_eq!(d.len(), spec.n_sessions * per_session);
            for s in &d.samples {
                s.validate().unwrap();
            }
            let mut flips = 0;
            for session in d.samples.chunks(per_session) {
                for w in session.windows(2) {
                    let (prev, cur) = (w[0], w[1]);
                    if prev.screen_on == 0.0 && cur.screen_on == 1.0 {
                        flips += 1;
                        assert_eq!(cur.off_time_before_on, prev.screen_off_time + spec.tick_s);
                        assert_eq!(cur.temp_at_last_on, cur.battery_temp);
                        assert_eq!(cur.screen_on_time, 0.0);
                    }
                    if prev.screen_on == 1.0 && cur.screen_on == 0.0 {
                        flips += 1;
                        assert_eq!(cur.on_time_before_off, prev.screen_on_time + spec.tick_s);
                        assert_eq!(cur.temp_at_last_off, cur.battery_temp);
                        assert_eq!(cur.screen_off_time, 0.0);
                    }
                    if cur.screen_on == 1.0 {
                        assert_eq!(cur.screen_off_time, cur.off_time_before_on);
                    } else {
                        assert_eq!(cur.screen_on_time, cur.on_time_before_off);
                    }
                }
            }
            assert!(flips > 0);
        }
    }

    #[test]
    fn sensor_bias_shifts_mean_reading() {
        let spec = SessionSpec {
            n_sessions: 1,
            session_length_s: 40_000.0,
            tick_s: 10.0,
            ..SessionSpec::default()
        };
        let opts = SynthOptions {
            screen: ScreenProcess::always_off(),
            initial_offset: 0.0,
            label_grid: 0.1,
        };
        let schedule = [24.0];
        let noise: f64 = 0.2;
        let mk = |bias: f64| SynthPhoneParams {
            sensor_bias: bias,
            noise_std: noise,
            ..quiet()
        };
        let mean_f3 = |bias: f64, seed: u64| {
            let d = synth_generate_sessions("x", &mk(bias), &schedule, &[0], &spec, &opts, seed)
                .unwrap();
            d.samples.iter().map(|s| s.battery_temp).sum::<f64>() / d.len() as f64
        };
        let n: f64 = 4000.0;
        // Samples are autocorrelated over ~tau/tick ticks; widen the bound by
        // the effective-sample-size factor.
        let eff = n / (2.0 * 200.0 / 10.0);
        let delta = mean_f3(1.2, 5) - mean_f3(-0.3, 6);
        assert!(
            (delta - 1.5).abs() <= 3.0 * noise * 2f64.sqrt() / eff.sqrt(),
            "{delta}"
        );
    }

    #[test]
    fn corpus_has_roles_and_shared_labels() {
        let spec = SynthCorpusSpec {
            sessions: SessionSpec {
                n_sessions: 8,
                ..SessionSpec::default()
            },
            ..SynthCorpusSpec::default()
        };
        let phones = synth_corpus(&spec, 1).unwrap();
        assert_eq!(phones.len(), 9);
        assert_eq!(phones[0].dataset.phone_id, "C1");
        assert_eq!(phones[8].dataset.phone_id, "P3");
        assert_eq!(phones[8].dataset.role, Role::Participant);
        let labels = |i: usize| {
            phones[i]
                .dataset
                .labels()
                .map(|l| (l * 10.0).round() as i64)
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert!(labels(0).intersection(&labels(1)).count() > 0);
    }
}

//! Simulated MCU fleet.
//!
//! Each [`DeviceProfile`] is the "silicon" of one device: a handful of
//! per-device parameters drawn once at fleet creation, plus a secret seed
//! from which its SRAM power-up pattern is derived. [`execute_task`] runs one
//! fingerprinting procedure against a profile and returns a noisy reading.
//!
//! The procedures are loose analogues of real peripherals, not physical
//! models. What matters is the shape of the data: every analog feature has a
//! public model-level response (see [`reference_response`]), a smooth
//! device-specific relative deviation whose parameters spread
//! `inter_intra_ratio` times wider than a single reading's noise, and noise
//! that shrinks when a task accumulates several periods or repeats.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::{Feature, HardwareTask, TaskSpec};

/// SRAM base address of the fingerprinted region.
pub const SRAM_BASE: u32 = 0x2000_0000;
/// DAC and ADC resolutions used by the DacAdc task.
pub const DAC_BITS: u32 = 8;
pub const ADC_BITS: u32 = 12;
/// Conversions averaged per DacAdc reading.
pub const DAC_OVERSAMPLE: u32 = 4;
/// Fractal renders timed per Fpu reading.
pub const FPU_REPEATS: u32 = 8;
/// Divided-clock ticks per RtcFre measurement period.
pub const RTC_TICKS_PER_PERIOD: u32 = 16;

const FLEET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("feature {0} is not available on this device")]
    UnknownFeature(Feature),
    #[error("malformed task {0}")]
    InvalidTask(String),
    #[error("DAC code {code} out of range for a {bits}-bit DAC")]
    DomainError { code: u32, bits: u32 },
    #[error("at least one pair must be collected")]
    EmptyCollection,
    #[error("fleet size must be at least one")]
    EmptyFleet,
    #[error("fleet file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Device families, loosely modelled on an ESP32-S2 (A), an STM32F103 (B)
/// and an STM32F429 (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Model {
    ModelA,
    ModelB,
    ModelC,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::ModelA, Model::ModelB, Model::ModelC];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Model> {
        Model::ALL.get(code as usize).copied()
    }

    /// Only model C has a hardware floating point unit.
    pub fn has_fpu(self) -> bool {
        self == Model::ModelC
    }

    fn salt(self) -> u64 {
        match self {
            Model::ModelA => 0x5A17_E5A2_0000_0001,
            Model::ModelB => 0x5A17_F103_0000_0002,
            Model::ModelC => 0x5A17_F429_0000_0003,
        }
    }

    fn first_device_id(self) -> u16 {
        match self {
            Model::ModelA => 1,
            Model::ModelB => 1001,
            Model::ModelC => 2001,
        }
    }

    /// Mean relative ADC gain error of the family.
    fn dac_gain_mean(self) -> f64 {
        match self {
            Model::ModelA => 0.22,
            Model::ModelB => 0.04,
            Model::ModelC => 0.41,
        }
    }

    fn vref(self) -> f64 {
        match self {
            Model::ModelA => 3.3,
            Model::ModelB => 3.3,
            Model::ModelC => 3.0,
        }
    }

    /// Main clock in MHz.
    fn main_clock_mhz(self) -> f64 {
        match self {
            Model::ModelA => 240.0,
            Model::ModelB => 72.0,
            Model::ModelC => 180.0,
        }
    }

    /// Nominal frequencies of the four selectable RTC clock sources, Hz.
    fn rtc_sources(self) -> [f64; 4] {
        match self {
            Model::ModelA => [32_768.0, 150_000.0, 8_000_000.0, 20_000_000.0],
            Model::ModelB => [32_768.0, 40_000.0, 8_000_000.0, 8_000_000.0],
            Model::ModelC => [32_768.0, 32_000.0, 16_000_000.0, 25_000_000.0],
        }
    }

    /// Cycles per fractal iteration with and without a hardware FPU.
    fn fpu_cycles_per_iter(self, use_fpu: bool) -> f64 {
        let soft = match self {
            Model::ModelA => 410.0,
            Model::ModelB => 520.0,
            Model::ModelC => 380.0,
        };
        if use_fpu && self.has_fpu() {
            38.0
        } else {
            soft
        }
    }

    /// ADC samples per PWM period for clock source `src` and frequency `freq`.
    fn pwm_samples(self, src: u32, freq: u32) -> f64 {
        let (base, rate) = match self {
            Model::ModelA => (4.0, 1.0),
            Model::ModelB => (3.0, 0.6),
            Model::ModelC => (6.0, 1.5),
        };
        rate * (base + 2.0 * src as f64 + freq as f64)
    }

    fn rtc_pha_rate(self) -> f64 {
        match self {
            Model::ModelA => 0.618_033_988_7,
            Model::ModelB => 0.414_213_562_4,
            Model::ModelC => 0.732_050_807_6,
        }
    }
}

impl std::str::FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "modela" | "model-a" => Ok(Model::ModelA),
            "b" | "modelb" | "model-b" => Ok(Model::ModelB),
            "c" | "modelc" | "model-c" => Ok(Model::ModelC),
            _ => Err(format!("unknown model `{s}` (expected a, b or c)")),
        }
    }
}

/// Noise levels and spreads for fleet generation.
///
/// The `*_noise` values are the standard deviation of one raw reading, in
/// the relative units the feature's device parameters live in. Device
/// parameters are drawn with standard deviation `inter_intra_ratio` times
/// that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub inter_intra_ratio: f64,
    pub dac_noise: f64,
    pub fpu_noise: f64,
    pub pwm_noise: f64,
    pub rtc_noise: f64,
    pub pha_noise: f64,
    /// Extra timing noise multiplier when floating point is emulated.
    pub soft_fpu_noise_mult: f64,
    pub sram_flip_p: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            inter_intra_ratio: 5.0,
            dac_noise: 0.004,
            fpu_noise: 0.01,
            pwm_noise: 0.01,
            rtc_noise: 0.01,
            pha_noise: 0.01,
            soft_fpu_noise_mult: 6.0,
            sram_flip_p: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DacAdcParams {
    pub gain_dev: f64,
    /// Constant, linear and quadratic terms in the normalized DAC code.
    pub poly: [f64; 3],
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpuParams {
    pub perf_dev: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwmParams {
    pub duty_err: f64,
    pub volt_err: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtcFreParams {
    /// Fractional frequency error of the device's oscillators.
    pub skew: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtcPhaParams {
    pub phase_off: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SramParams {
    pub flip_p: f64,
}

/// The secret physical parameters of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: u16,
    pub model: Model,
    pub secret_seed: u64,
    pub features: Vec<Feature>,
    pub dacadc: DacAdcParams,
    pub fpu: FpuParams,
    pub pwm: PwmParams,
    pub rtcfre: RtcFreParams,
    pub rtcpha: RtcPhaParams,
    pub sram: SramParams,
    pub soft_fpu_noise_mult: f64,
}

impl DeviceProfile {
    pub fn supports(&self, feature: Feature) -> bool {
        self.features.contains(&feature)
    }

    /// The power-up word at SRAM slot `index` (address `SRAM_BASE + 4 * index`).
    pub fn sram_word(&self, index: u32) -> u32 {
        let address = SRAM_BASE.wrapping_add(index.wrapping_mul(4));
        let mixed =
            splitmix64(self.secret_seed ^ (address as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (mixed >> 16) as u32
    }

    /// A profile whose analog features have zero device error and zero
    /// noise. Useful as a fixture.
    pub fn ideal(device_id: u16, model: Model) -> Self {
        DeviceProfile {
            device_id,
            model,
            secret_seed: device_id as u64,
            features: Feature::ALL.to_vec(),
            dacadc: DacAdcParams {
                gain_dev: 0.0,
                poly: [0.0; 3],
                noise: 0.0,
            },
            fpu: FpuParams {
                perf_dev: 0.0,
                noise: 0.0,
            },
            pwm: PwmParams {
                duty_err: 0.0,
                volt_err: 0.0,
                noise: 0.0,
            },
            rtcfre: RtcFreParams {
                skew: 0.0,
                noise: 0.0,
            },
            rtcpha: RtcPhaParams {
                phase_off: 0.0,
                noise: 0.0,
            },
            sram: SramParams { flip_p: 0.0 },
            soft_fpu_noise_mult: 1.0,
        }
    }
}

/// One fingerprint reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FingerprintValue {
    Analog(f64),
    Bits32(u32),
}

impl FingerprintValue {
    pub fn as_analog(&self) -> Option<f64> {
        match *self {
            FingerprintValue::Analog(v) => Some(v),
            FingerprintValue::Bits32(_) => None,
        }
    }

    pub fn as_bits(&self) -> Option<u32> {
        match *self {
            FingerprintValue::Bits32(w) => Some(w),
            FingerprintValue::Analog(_) => None,
        }
    }

    pub fn same_kind(&self, other: &FingerprintValue) -> bool {
        matches!(
            (self, other),
            (FingerprintValue::Analog(_), FingerprintValue::Analog(_))
                | (FingerprintValue::Bits32(_), FingerprintValue::Bits32(_))
        )
    }
}

/// A task and the fingerprint a device produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub task: HardwareTask,
    pub fingerprint: FingerprintValue,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` devices of one model. Deterministic in all inputs.
pub fn spawn_fleet(model: Model, count: usize, seed: u64) -> Result<Vec<DeviceProfile>, SimError> {
    spawn_fleet_with(model, count, seed, &SimConfig::default())
}

pub fn spawn_fleet_with(
    model: Model,
    count: usize,
    seed: u64,
    config: &SimConfig,
) -> Result<Vec<DeviceProfile>, SimError> {
    if count == 0 {
        return Err(SimError::EmptyFleet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ model.salt());
    let ratio = config.inter_intra_ratio;
    let spread =
        |rng: &mut ChaCha8Rng, mean: f64, noise: f64| -> f64 { mean + ratio * noise * gauss(rng) };
    let mut fleet = Vec::with_capacity(count);
    for i in 0..count {
        let d = config.dac_noise;
        let dacadc = DacAdcParams {
            gain_dev: spread(&mut rng, model.dac_gain_mean(), d),
            poly: [
                spread(&mut rng, 0.0, d),
                spread(&mut rng, 0.0, d),
                spread(&mut rng, 0.0, d),
            ],
            noise: d,
        };
        let fpu = FpuParams {
            perf_dev: spread(&mut rng, 0.0, config.fpu_noise),
            noise: config.fpu_noise,
        };
        let pwm = PwmParams {
            duty_err: spread(&mut rng, 0.0, config.pwm_noise),
            volt_err: spread(&mut rng, 0.0, config.pwm_noise),
            noise: config.pwm_noise,
        };
        let rtcfre = RtcFreParams {
            skew: spread(&mut rng, 0.0, config.rtc_noise),
            noise: config.rtc_noise,
        };
        let rtcpha = RtcPhaParams {
            phase_off: rng.random::<f64>(),
            noise: config.pha_noise,
        };
        fleet.push(DeviceProfile {
            device_id: model.first_device_id() + i as u16,
            model,
            secret_seed: rng.random(),
            features: Feature::ALL.to_vec(),
            dacadc,
            fpu,
            pwm,
            rtcfre,
            rtcpha,
            sram: SramParams {
                flip_p: config.sram_flip_p,
            },
            soft_fpu_noise_mult: config.soft_fpu_noise_mult,
        });
    }
    Ok(fleet)
}

/// Proportional DAC-to-ADC code mapping of an ideal converter pair.
pub fn ideal_dac_adc(v_dac: u32, res_dac: u32, res_adc: u32) -> Result<f64, SimError> {
    if res_dac == 0 || res_dac > 31 || v_dac >= (1u32 << res_dac) {
        return Err(SimError::DomainError {
            code: v_dac,
            bits: res_dac,
        });
    }
    let dac_max = ((1u64 << res_dac) - 1) as f64;
    let adc_max = ((1u64 << res_adc) - 1) as f64;
    Ok(v_dac as f64 * adc_max / dac_max)
}

/// Public per-argument multiplier of the DacAdc error: supply state, raw
/// versus corrected ADC format, and output pin/representation.
fn dac_mode_gain(vdd: u32, format: u32, mode: u32) -> f64 {
    let vdd = [1.0, 1.12][vdd as usize];
    let format = [1.0, 0.55][format as usize];
    let mode = [1.0, 0.85, 1.2, 0.7][mode as usize];
    vdd * format * mode
}

fn pwm_duty(duty: u32) -> f64 {
    [0.25, 0.75][duty as usize]
}

fn pwm_vdd(vdd: u32) -> f64 {
    [1.0, 0.9][vdd as usize]
}

/// How strongly duty-cycle error shows at PWM frequency step `freq`.
fn pwm_duty_sensitivity(freq: u32) -> f64 {
    0.5 + freq as f64 / 7.0
}

fn pwm_volt_sensitivity(vdd: u32) -> f64 {
    [1.0, 1.4][vdd as usize]
}

/// How the device's oscillator error shows on each RTC clock source.
fn rtc_skew_sensitivity(src: u32) -> f64 {
    [1.0, 1.6, 0.7, 1.3][src as usize]
}

/// Public trim applied by the RtcFre adjust argument.
fn rtc_trim(adjust: u32) -> f64 {
    (adjust as f64 - 8.0) * 2.0e-4
}

/// Iteration counts of a fixed 16x16 Mandelbrot render for every pair of
/// bounds arguments, 32x32 entries.
fn mandelbrot_table() -> &'static [u32] {
    static TABLE: OnceLock<Vec<u32>> = OnceLock::new();
    TABLE.get_or_init(|| {
        const GRID: usize = 16;
        const MAX_ITER: u32 = 64;
        let mut out = Vec::with_capacity(32 * 32);
        for xb in 0..32 {
            for yb in 0..32 {
                let x_hi = -2.0 + 2.6 * (xb as f64 + 1.0) / 32.0;
                let y_hi = 1.3 * (yb as f64 + 1.0) / 32.0;
                let mut total = 0u32;
                for gx in 0..GRID {
                    for gy in 0..GRID {
                        let cr = -2.0 + (x_hi + 2.0) * gx as f64 / (GRID - 1) as f64;
                        let ci = y_hi * gy as f64 / (GRID - 1) as f64;
                        let (mut zr, mut zi) = (0.0f64, 0.0f64);
                        let mut it = 0;
                        while it < MAX_ITER && zr * zr + zi * zi <= 4.0 {
                            let t = zr * zr - zi * zi + cr;
                            zi = 2.0 * zr * zi + ci;
                            zr = t;
                            it += 1;
                        }
                        total += it + 1;
                    }
                }
                out.push(total);
            }
        }
        out
    })
}

/// Fractal work for Fpu bounds arguments `xb`, `yb`, in iterations.
pub fn fpu_workload(xb: u32, yb: u32) -> u32 {
    mandelbrot_table()[(xb as usize % 32) * 32 + yb as usize % 32]
}

fn rtc_nominal(model: Model, src: u32, div: u32, adjust: u32, periods: u32) -> f64 {
    let f = model.rtc_sources()[src as usize];
    let ticks = ((periods + 1) * RTC_TICKS_PER_PERIOD) as f64 * (1u64 << div) as f64;
    // elapsed time in microseconds
    ticks / f * 1e6 * (1.0 + rtc_trim(adjust))
}

fn pwm_nominal_per_period(model: Model, args: &[u32]) -> f64 {
    let (src, freq, vdd, duty) = (args[0], args[1], args[3], args[4]);
    let adc_max = ((1u32 << ADC_BITS) - 1) as f64;
    pwm_duty(duty) * pwm_vdd(vdd) * adc_max * model.pwm_samples(src, freq) * (model.vref() / 3.3)
}

fn fpu_nominal(model: Model, args: &[u32]) -> f64 {
    let work = fpu_workload(args[1], args[2]) as f64 * FPU_REPEATS as f64;
    // microseconds
    work * model.fpu_cycles_per_iter(args[0] == 1) / model.main_clock_mhz()
}

fn rtc_pha_drift(model: Model, args: &[u32]) -> f64 {
    let (src, div, period) = (args[0], args[1], args[2]);
    let x = model.rtc_pha_rate() * (period as f64 + 1.0) * (1.0 + div as f64) + 0.137 * src as f64;
    x.fract()
}

/// The public noise-free response of a typical device of `model`: every
/// device parameter at its family mean. Predictors learn the ratio of a
/// device's readings to this baseline. `None` for features without a
/// meaningful baseline (RtcPha, Sram).
pub fn reference_response(model: Model, task: &HardwareTask) -> Option<f64> {
    let a = &task.args;
    match task.feature {
        Feature::DacAdc => {
            let ideal = ideal_dac_adc(a[0], DAC_BITS, ADC_BITS).ok()?;
            Some(ideal * dac_mode_gain(a[1], a[2], a[3]) * model.dac_gain_mean())
        }
        Feature::Fpu => Some(fpu_nominal(model, a)),
        Feature::Pwm => Some(pwm_nominal_per_period(model, a) * (a[2] + 1) as f64),
        Feature::RtcFre => Some(rtc_nominal(model, a[0], a[1], a[2], a[3])),
        Feature::RtcPha | Feature::Sram => None,
    }
}

fn check_task(task: &HardwareTask) -> Result<(), SimError> {
    let spec = TaskSpec::default_for(task.feature);
    if spec.admits(task) {
        Ok(())
    } else {
        Err(SimError::InvalidTask(task.to_string()))
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Runs one fingerprinting task on a simulated device.
pub fn execute_task<R: Rng + ?Sized>(
    profile: &DeviceProfile,
    task: &HardwareTask,
    rng: &mut R,
) -> Result<FingerprintValue, SimError> {
    if !profile.supports(task.feature) {
        return Err(SimError::UnknownFeature(task.feature));
    }
    check_task(task)?;
    let model = profile.model;
    let a = &task.args;
    let value = match task.feature {
        Feature::DacAdc => {
            let p = &profile.dacadc;
            let ideal = ideal_dac_adc(a[0], DAC_BITS, ADC_BITS)?;
            let x = a[0] as f64 / ((1u32 << DAC_BITS) - 1) as f64;
            let poly = p.poly[0] + p.poly[1] * x + p.poly[2] * x * x;
            let noise = p.noise / (DAC_OVERSAMPLE as f64).sqrt() * gauss(rng);
            // read - ideal, with the ADC error scaled by the pin/format setting
            ideal * dac_mode_gain(a[1], a[2], a[3]) * (p.gain_dev + poly + noise)
        }
        Feature::Fpu => {
            let p = &profile.fpu;
            let mult = if a[0] == 1 && model.has_fpu() {
                1.0
            } else {
                profile.soft_fpu_noise_mult
            };
            let noise = p.noise * mult / (FPU_REPEATS as f64).sqrt() * gauss(rng);
            fpu_nominal(model, a) * (1.0 + p.perf_dev + noise)
        }
        Feature::Pwm => {
            let p = &profile.pwm;
            let periods = (a[2] + 1) as f64;
            let dev =
                p.duty_err * pwm_duty_sensitivity(a[1]) + p.volt_err * pwm_volt_sensitivity(a[3]);
            // per-period noise adds incoherently over the accumulated periods
            let noise = p.noise * periods.sqrt() * gauss(rng);
            pwm_nominal_per_period(model, a) * (periods * (1.0 + dev) + noise)
        }
        Feature::RtcFre => {
            let p = &profile.rtcfre;
            let periods = ((a[3] + 1) * RTC_TICKS_PER_PERIOD) as f64;
            let dev = p.skew * rtc_skew_sensitivity(a[0]);
            let noise = p.noise / periods.sqrt() * gauss(rng);
            rtc_nominal(model, a[0], a[1], a[2], a[3]) / (1.0 + dev) * (1.0 + noise)
        }
        Feature::RtcPha => {
            let p = &profile.rtcpha;
            let noise = p.noise * gauss(rng);
            (p.phase_off + rtc_pha_drift(model, a) + noise).rem_euclid(1.0)
        }
        Feature::Sram => {
            let mut word = profile.sram_word(a[0]);
            let flip = profile.sram.flip_p;
            if flip > 0.0 {
                for bit in 0..32 {
                    if rng.random::<f64>() < flip {
                        word ^= 1 << bit;
                    }
                }
            }
            return Ok(FingerprintValue::Bits32(word));
        }
    };
    Ok(FingerprintValue::Analog(value))
}

/// Noise-free response of a device. SRAM returns the stored word.
pub fn noise_free_response(
    profile: &DeviceProfile,
    task: &HardwareTask,
) -> Result<FingerprintValue, SimError> {
    let mut quiet = profile.clone();
    quiet.dacadc.noise = 0.0;
    quiet.fpu.noise = 0.0;
    quiet.pwm.noise = 0.0;
    quiet.rtcfre.noise = 0.0;
    quiet.rtcpha.noise = 0.0;
    quiet.sram.flip_p = 0.0;
    // no randomness is drawn with all noise at zero except the Gaussian
    // samples multiplied by zero
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    execute_task(&quiet, task, &mut rng)
}

/// Standard deviation of the noise on one reading of `task`, in output units.
pub fn output_noise_std(profile: &DeviceProfile, task: &HardwareTask) -> f64 {
    let a = &task.args;
    let model = profile.model;
    match task.feature {
        Feature::DacAdc => {
            let ideal = ideal_dac_adc(a[0], DAC_BITS, ADC_BITS).unwrap_or(0.0);
            ideal * dac_mode_gain(a[1], a[2], a[3]) * profile.dacadc.noise
                / (DAC_OVERSAMPLE as f64).sqrt()
        }
        Feature::Fpu => {
            let mult = if a[0] == 1 && model.has_fpu() {
                1.0
            } else {
                profile.soft_fpu_noise_mult
            };
            fpu_nominal(model, a) * profile.fpu.noise * mult / (FPU_REPEATS as f64).sqrt()
        }
        Feature::Pwm => {
            let periods = (a[2] + 1) as f64;
            pwm_nominal_per_period(model, a) * profile.pwm.noise * periods.sqrt()
        }
        Feature::RtcFre => {
            let periods = ((a[3] + 1) * RTC_TICKS_PER_PERIOD) as f64;
            rtc_nominal(model, a[0], a[1], a[2], a[3]) * profile.rtcfre.noise / periods.sqrt()
        }
        Feature::RtcPha => profile.rtcpha.noise,
        Feature::Sram => 0.0,
    }
}

/// Collects `n` training pairs for one task spec.
///
/// SRAM enumerates every address before repeating any; analog features draw
/// argument tuples uniformly at random.
pub fn collect_pairs<R: Rng + ?Sized>(
    profile: &DeviceProfile,
    spec: &TaskSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrainingPair>, SimError> {
    if n == 0 {
        return Err(SimError::EmptyCollection);
    }
    let size = spec.size();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let task = if spec.feature == Feature::Sram {
            spec.task_at(i as u64 % size)
        } else {
            random_task(spec, rng)
        };
        let fingerprint = execute_task(profile, &task, rng)?;
        out.push(TrainingPair { task, fingerprint });
    }
    Ok(out)
}

/// A uniformly random task of `spec`.
pub fn random_task<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> HardwareTask {
    HardwareTask {
        feature: spec.feature,
        args: spec
            .arg_radices
            .iter()
            .map(|&r| rng.random_range(0..r))
            .collect(),
    }
}

/// Replayable fleet description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetFile {
    pub version: u32,
    pub model: Model,
    pub count: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub devices: Vec<DeviceProfile>,
}

impl FleetFile {
    pub fn generate(
        model: Model,
        count: usize,
        seed: u64,
        sim: SimConfig,
    ) -> Result<Self, SimError> {
        let devices = spawn_fleet_with(model, count, seed, &sim)?;
        Ok(FleetFile {
            version: FLEET_VERSION,
            model,
            count,
            seed,
            sim,
            devices,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fleet serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let fleet: FleetFile =
            serde_json::from_str(text).map_err(|e| SimError::Format(e.to_string()))?;
        if fleet.version != FLEET_VERSION {
            return Err(SimError::Format(format!(
                "unsupported fleet version {}",
                fleet.version
            )));
        }
        if fleet.devices.len() != fleet.count {
            return Err(SimError::Format(format!(
                "count says {} devices, file holds {}",
                fleet.count,
                fleet.devices.len()
            )));
        }
        Ok(fleet)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        FleetFile::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::MappingConfig;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fleet_is_deterministic_and_unique() {
        assert_eq!(
            spawn_fleet(Model::ModelA, 1, 1).unwrap(),
            spawn_fleet(Model::ModelA, 1, 1).unwrap()
        );
        let fleet = spawn_fleet(Model::ModelA, 30, 1).unwrap();
        let mut ids: Vec<_> = fleet.iter().map(|d| d.device_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 30);
        let other = spawn_fleet(Model::ModelA, 30, 2).unwrap();
        let g1: Vec<f64> = fleet.iter().map(|d| d.dacadc.gain_dev).collect();
        let g2: Vec<f64> = other.iter().map(|d| d.dacadc.gain_dev).collect();
        assert_ne!(g1, g2);
        assert!(matches!(
            spawn_fleet(Model::ModelA, 0, 1),
            Err(SimError::EmptyFleet)
        ));
    }

    #[test]
    fn ideal_dac_adc_mapping() {
        assert_eq!(ideal_dac_adc(255, 8, 12).unwrap(), 4095.0);
        assert_eq!(ideal_dac_adc(0, 8, 12).unwrap(), 0.0);
        assert_eq!(ideal_dac_adc(128, 8, 8).unwrap(), 128.0);
        assert!(matches!(
            ideal_dac_adc(256, 8, 12),
            Err(SimError::DomainError { .. })
        ));
    }

    #[test]
    fn ideal_device_has_zero_dac_error() {
        let dev = DeviceProfile::ideal(1, Model::ModelA);
        let mut r = rng(3);
        for code in [0, 17, 128, 255] {
            let t = HardwareTask::new(Feature::DacAdc, vec![code, 1, 0, 2]);
            assert_eq!(
                execute_task(&dev, &t, &mut r).unwrap(),
                FingerprintValue::Analog(0.0)
            );
        }
    }

    #[test]
    fn sram_without_flips_is_stable() {
        let mut dev = spawn_fleet(Model::ModelB, 1, 9).unwrap().remove(0);
        dev.sram.flip_p = 0.0;
        let t = HardwareTask::new(Feature::Sram, vec![77]);
        let mut r = rng(1);
        let a = execute_task(&dev, &t, &mut r).unwrap();
        let b = execute_task(&dev, &t, &mut r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, FingerprintValue::Bits32(dev.sram_word(77)));
        let mut twin = dev.clone();
        twin.device_id = 999;
        assert_eq!(twin.sram_word(77), dev.sram_word(77));
    }

    #[test]
    fn sram_flip_rate_matches_binomial_mean() {
        let mut dev = spawn_fleet(Model::ModelA, 1, 4).unwrap().remove(0);
        dev.sram.flip_p = 0.02;
        let t = HardwareTask::new(Feature::Sram, vec![5]);
        let clean = dev.sram_word(5);
        let mut r = rng(11);
        let n = 1000;
        let dists: Vec<f64> = (0..n)
            .map(|_| {
                (execute_task(&dev, &t, &mut r).unwrap().as_bits().unwrap() ^ clean).count_ones()
                    as f64
            })
            .collect();
        let mean = dists.iter().sum::<f64>() / n as f64;
        // Binomial(32, 0.02): mean 0.64, variance 0.6272
        let se = (32.0 * 0.02 * 0.98 / n as f64).sqrt();
        assert!(
            (mean - 0.64).abs() < 3.0 * se,
            "mean Hamming distance {mean}"
        );
    }

    #[test]
    fn sram_word_stays_within_two_bits() {
        let mut dev = spawn_fleet(Model::ModelA, 1, 4).unwrap().remove(0);
        dev.sram.flip_p = 0.02;
        let mut r = rng(12);
        let n = 4000;
        let close = (0..n)
            .filter(|i| {
                let t = HardwareTask::new(Feature::Sram, vec![i % 1024]);
                (execute_task(&dev, &t, &mut r).unwrap().as_bits().unwrap()
                    ^ dev.sram_word(i % 1024))
                .count_ones()
                    <= 2
            })
            .count();
        // Binomial(32, 0.02) puts 0.9745 of its mass at or below 2
        assert!(close as f64 / n as f64 >= 0.965, "{close}/{n}");
    }

    /// Fraction of (device pair, task) draws whose noise-free responses lie
    /// more than two noise deviations apart.
    fn separation(model: Model, spec: &TaskSpec, keep: impl Fn(&HardwareTask) -> bool) -> f64 {
        let fleet = spawn_fleet(model, 10, 7).unwrap();
        let mut r = rng(13);
        let (mut apart, mut total) = (0, 0);
        for i in 0..fleet.len() {
            for j in i + 1..fleet.len() {
                for _ in 0..50 {
                    let t = random_task(spec, &mut r);
                    if !keep(&t) {
                        continue;
                    }
                    let a = noise_free_response(&fleet[i], &t)
                        .unwrap()
                        .as_analog()
                        .unwrap();
                    let b = noise_free_response(&fleet[j], &t)
                        .unwrap()
                        .as_analog()
                        .unwrap();
                    let sigma =
                        output_noise_std(&fleet[i], &t).max(output_noise_std(&fleet[j], &t));
                    apart += usize::from((a - b).abs() > 2.0 * sigma);
                    total += 1;
                }
            }
        }
        apart as f64 / total as f64
    }

    #[test]
    fn same_model_devices_are_distinguishable() {
        for model in Model::ALL {
            for feature in Feature::ALL.into_iter().filter(|f| f.is_analog()) {
                let spec = TaskSpec::default_for(feature);
                let hard_float = |t: &HardwareTask| {
                    t.feature != Feature::Fpu || (t.args[0] == 1 && model.has_fpu())
                };
                if feature == Feature::Fpu && !model.has_fpu() {
                    continue;
                }
                let rate = separation(model, &spec, hard_float);
                assert!(rate >= 0.9, "{model:?} {feature}: {rate}");
            }
        }
        // software float is deliberately noisy
        let soft = separation(Model::ModelA, &TaskSpec::default_for(Feature::Fpu), |_| {
            true
        });
        let hard = separation(Model::ModelC, &TaskSpec::default_for(Feature::Fpu), |t| {
            t.args[0] == 1
        });
        assert!(soft < hard - 0.1, "soft {soft}, hard {hard}");
    }

    #[test]
    fn disabled_feature_is_rejected() {
        let mut dev = DeviceProfile::ideal(1, Model::ModelA);
        dev.features.retain(|&f| f != Feature::Fpu);
        let t = HardwareTask::new(Feature::Fpu, vec![0, 1, 1]);
        assert!(matches!(
            execute_task(&dev, &t, &mut rng(0)),
            Err(SimError::UnknownFeature(Feature::Fpu))
        ));
        let bad = HardwareTask::new(Feature::Sram, vec![4096]);
        assert!(matches!(
            execute_task(&dev, &bad, &mut rng(0)),
            Err(SimError::InvalidTask(_))
        ));
    }

    #[test]
    fn execution_is_reproducible_from_seed() {
        let dev = spawn_fleet(Model::ModelC, 1, 5).unwrap().remove(0);
        let cfg = MappingConfig::default();
        for spec in &cfg.enabled_specs {
            let a = collect_pairs(&dev, spec, 20, &mut rng(8)).unwrap();
            let b = collect_pairs(&dev, spec, 20, &mut rng(8)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sram_collection_covers_addresses_first() {
        let dev = spawn_fleet(Model::ModelA, 1, 2).unwrap().remove(0);
        let spec = TaskSpec::default_for(Feature::Sram);
        let pairs = collect_pairs(&dev, &spec, 1024, &mut rng(0)).unwrap();
        let mut seen = vec![0u32; 1024];
        for p in &pairs {
            seen[p.task.args[0] as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(matches!(
            collect_pairs(&dev, &spec, 0, &mut rng(0)),
            Err(SimError::EmptyCollection)
        ));
    }

    #[test]
    fn analog_arguments_are_uniform() {
        let dev = spawn_fleet(Model::ModelA, 1, 2).unwrap().remove(0);
        let spec = TaskSpec::default_for(Feature::Pwm);
        let pairs = collect_pairs(&dev, &spec, 5000, &mut rng(21)).unwrap();
        // chi-square on the 32-way period argument, 31 dof; 99.9% point 61.1
        let mut counts = [0f64; 32];
        for p in &pairs {
            counts[p.task.args[2] as usize] += 1.0;
        }
        let expected = 5000.0 / 32.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 61.1, "chi2 {chi2}");
    }

    #[test]
    fn analog_outputs_are_finite() {
        let fleet = spawn_fleet(Model::ModelB, 3, 3).unwrap();
        let cfg = MappingConfig::default();
        let mut r = rng(2);
        for dev in &fleet {
            for spec in cfg.enabled_specs.iter().filter(|s| s.feature.is_analog()) {
                for _ in 0..200 {
                    let t = random_task(spec, &mut r);
                    let v = execute_task(dev, &t, &mut r).unwrap().as_analog().unwrap();
                    assert!(v.is_finite());
                }
            }
        }
    }

    #[test]
    fn fleet_file_round_trip() {
        let f = FleetFile::generate(Model::ModelC, 4, 77, SimConfig::default()).unwrap();
        let back = FleetFile::from_json(&f.to_json()).unwrap();
        assert_eq!(f, back);
        let mut bad = f.clone();
        bad.version = 99;
        assert!(FleetFile::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn mandelbrot_work_grows_with_bounds() {
        assert!(fpu_workload(31, 31) > fpu_workload(0, 0));
        assert_eq!(fpu_workload(3, 4), fpu_workload(3, 4));
    }
}

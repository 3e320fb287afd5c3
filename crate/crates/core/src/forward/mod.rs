//! Forward model of a THz-TDS reflection measurement on a tilted binary slab.
//!
//! A derivative-of-Gaussian pulse is reflected by a single dielectric slab
//! (front surface plus a geometrically decaying train of back-surface
//! echoes). The sample sits at depth `z0 + eps(x, y)`, so each pixel sees the
//! reflected waveform at a slightly shifted time; sampling the field at `M`
//! instants yields frames `y_j = rho * u_j + n_j`.

mod font;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::{ConfigEntries, FromConfig};
use crate::error::{Error, Result};
use crate::types::{FrameStack, ImageGrid, DEFAULT_PIXEL_PITCH};

pub use font::supported as supported_glyphs;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const PICOSECOND: f64 = 1e-12;
pub const DEFAULT_N_REFLECTIONS: usize = 5;

/// `chi(t) = (t0 - t) exp(-(t - t0)^2 / (2 T^2))` for `t >= 0`, zero before.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSpec {
    pub t0: f64,
    pub width: f64,
}

impl PulseSpec {
    pub fn new(t0: f64, width: f64) -> Result<Self> {
        if !(t0 > 0.0 && width > 0.0) {
            return Err(Error::Domain(format!(
                "pulse needs t0 > 0 and T > 0, got t0={t0}, T={width}"
            )));
        }
        Ok(Self { t0, width })
    }

    pub fn value(&self, t: f64) -> f64 {
        pulse_value(self, t)
    }
}

impl Default for PulseSpec {
    fn default() -> Self {
        Self {
            t0: PICOSECOND,
            width: PICOSECOND / 4.0,
        }
    }
}

pub fn pulse_value(spec: &PulseSpec, t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let dt = t - spec.t0;
    -dt * (-(dt * dt) / (2.0 * spec.width * spec.width)).exp()
}

/// Delta weights of a single slab's reflection: the front surface `(0, 1)`
/// followed by `(2 m tau, -(1 - rho^2) / rho^2 * rho^(2m))` for
/// `m = 1..=n_reflections`.
pub fn impulse_train(rho: f64, tau_rho: f64, n_reflections: usize) -> Result<Vec<(f64, f64)>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!(
            "reflectance must lie in (0, 1), got {rho}"
        )));
    }
    if !(tau_rho > 0.0) {
        return Err(Error::Domain(format!(
            "slab delay must be positive, got {tau_rho}"
        )));
    }
    let r2 = rho * rho;
    let lead = -(1.0 - r2) / r2;
    let mut train = Vec::with_capacity(n_reflections + 1);
    train.push((0.0, 1.0));
    let mut power = 1.0;
    for m in 1..=n_reflections {
        power *= r2;
        train.push((2.0 * m as f64 * tau_rho, lead * power));
    }
    Ok(train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlabPhantom {
    pub reflectance: ImageGrid,
    pub labels: Vec<u8>,
    pub thickness: f64,
    pub n_rho: f64,
    pub wave_speed: f64,
}

impl SlabPhantom {
    pub const DEFAULT_THICKNESS: f64 = 100e-6;
    pub const DEFAULT_N_RHO: f64 = 2.0;

    pub fn new(
        reflectance: ImageGrid,
        labels: Vec<u8>,
        thickness: f64,
        n_rho: f64,
        wave_speed: f64,
    ) -> Result<Self> {
        if labels.len() != reflectance.num_pixels() {
            return Err(Error::Contract("one label per pixel required".into()));
        }
        if labels.iter().any(|&c| c > 1) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        if reflectance.values().iter().any(|&r| !(r > 0.0 && r < 1.0)) {
            return Err(Error::Domain(
                "reflectance must lie in (0, 1) everywhere".into(),
            ));
        }
        let mut class_value = [None::<f64>; 2];
        for (&c, &r) in labels.iter().zip(reflectance.values()) {
            match class_value[c as usize] {
                None => class_value[c as usize] = Some(r),
                Some(v) if v == r => {}
                Some(_) => {
                    return Err(Error::Domain(
                        "reflectance is not constant within a class".into(),
                    ))
                }
            }
        }
        if let [Some(a), Some(b)] = class_value {
            if a == b {
                return Err(Error::Domain("the two classes share a reflectance".into()));
            }
        }
        if !(thickness > 0.0 && n_rho >= 1.0 && wave_speed > 0.0) {
            return Err(Error::Domain("slab needs d > 0, n >= 1 and c > 0".into()));
        }
        Ok(Self {
            reflectance,
            labels,
            thickness,
            n_rho,
            wave_speed,
        })
    }

    /// Round-trip delay through the slab, `n d / c`.
    pub fn tau(&self) -> f64 {
        self.n_rho * self.thickness / self.wave_speed
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&c| c == 1).count()
    }
}

/// Binary phantom: background `rho0`, glyph pixels `rho1`. The bitmap of
/// `glyph` (with a one-cell border) is stretched to the raster by
/// nearest-neighbor sampling.
pub fn make_letter_phantom(
    width: usize,
    height: usize,
    glyph: &str,
    rho0: f64,
    rho1: f64,
) -> Result<SlabPhantom> {
    if width == 0 || height == 0 {
        return Err(Error::Domain("phantom raster must be non-empty".into()));
    }
    let (bw, bh, bits) = font::render_text(glyph).map_err(|c| {
        Error::Domain(format!(
            "unsupported glyph {c:?}; supported: {:?} and space",
            font::supported()
        ))
    })?;
    let mut labels = vec![0u8; width * height];
    for r in 0..height {
        let br = r * bh / height;
        for c in 0..width {
            let bc = c * bw / width;
            if bits[br * bw + bc] {
                labels[r * width + c] = 1;
            }
        }
    }
    let values = labels
        .iter()
        .map(|&c| if c == 1 { rho1 } else { rho0 })
        .collect();
    SlabPhantom::new(
        ImageGrid::new(width, height, values)?,
        labels,
        SlabPhantom::DEFAULT_THICKNESS,
        SlabPhantom::DEFAULT_N_RHO,
        SPEED_OF_LIGHT,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Noiseless,
    Db(f64),
}

/// Whether the noise level is calibrated over the whole stack or per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Stack,
    Frame,
}

/// Sinusoidal surface ripple added to the planar tilt, for non-planar
/// sample surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ripple {
    pub amplitude: f64,
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub pulse: PulseSpec,
    pub phantom: SlabPhantom,
    pub tilt_alpha1: f64,
    pub tilt_alpha2: f64,
    pub ripple: Option<Ripple>,
    pub z0: f64,
    pub sample_times: Vec<f64>,
    pub snr: Snr,
    pub noise_mode: NoiseMode,
    pub rng_seed: u64,
    pub n_reflections: usize,
}

/// `n` uniformly spaced instants covering `[start, end]` inclusive.
pub fn uniform_samples(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (start + end)],
        _ => (0..n)
            .map(|k| start + (end - start) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl SimConfig {
    /// Simulation setup with the reference parameters: 1 ps pulse center,
    /// `T = t0 / 4`, tilt slopes `1e-6` / `1e-4`, frames spread over 0.8 ps
    /// around the pulse center, 10 dB SNR.
    pub fn reference(phantom: SlabPhantom, num_frames: usize) -> Self {
        let pulse = PulseSpec::default();
        Self {
            sample_times: uniform_samples(
                pulse.t0 - 0.4 * PICOSECOND,
                pulse.t0 + 0.4 * PICOSECOND,
                num_frames,
            ),
            pulse,
            phantom,
            tilt_alpha1: 1e-6,
            tilt_alpha2: 1e-4,
            ripple: None,
            z0: 0.0,
            snr: Snr::Db(10.0),
            noise_mode: NoiseMode::Stack,
            rng_seed: 0,
            n_reflections: DEFAULT_N_REFLECTIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_reflections < 1 {
            return Err(Error::Domain("n_reflections must be at least 1".into()));
        }
        if self.sample_times.is_empty() {
            return Err(Error::Domain("at least one sample time is required".into()));
        }
        if self
            .sample_times
            .iter()
            .any(|&t| !(t.is_finite() && t >= 0.0))
        {
            return Err(Error::Domain(
                "sample times must be finite and non-negative".into(),
            ));
        }
        if self.sample_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(
                "sample times must be strictly increasing".into(),
            ));
        }
        if let Snr::Db(db) = self.snr {
            if !db.is_finite() {
                return Err(Error::Domain("snr_db must be finite".into()));
            }
        }
        Ok(())
    }

    /// Depth offset `eps(x, y)` at a pixel.
    pub fn surface_offset(&self, pixel: usize) -> f64 {
        let grid = &self.phantom.reflectance;
        let x = (pixel % grid.width) as f64 * grid.pixel_pitch_x;
        let y = (pixel / grid.width) as f64 * grid.pixel_pitch_y;
        let mut eps = self.tilt_alpha1 * x + self.tilt_alpha2 * y;
        if let Some(r) = self.ripple {
            let k = 2.0 * std::f64::consts::PI / r.period;
            eps += r.amplitude * (k * x).sin() * (k * y).cos();
        }
        eps
    }

    /// Noiseless multiplicative factor `u(t + z/c)` at a pixel, i.e. the
    /// reflected field divided by the pixel reflectance.
    pub fn distortion(&self, pixel: usize, t: f64) -> Result<f64> {
        let rho = self.phantom.reflectance.values()[pixel];
        let train = impulse_train(rho, self.phantom.tau(), self.n_reflections)?;
        let shift = t + (self.z0 + self.surface_offset(pixel)) / self.phantom.wave_speed;
        Ok(train
            .iter()
            .map(|&(delay, coeff)| coeff * pulse_value(&self.pulse, shift - delay))
            .sum())
    }
}

/// Reflected field at one pixel and instant.
pub fn reflected_field(cfg: &SimConfig, pixel: usize, t: f64) -> Result<f64> {
    let rho = cfg.phantom.reflectance.values()[pixel];
    Ok(rho * cfg.distortion(pixel, t)?)
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub stack: FrameStack,
    pub truth: SlabPhantom,
    /// `P x M`, column `j` is the noiseless distortion profile `u_j`.
    pub distortions: DMatrix<f64>,
    /// Per-frame variance of the added noise (all zero when noiseless).
    pub noise_variances: Vec<f64>,
}

impl Simulation {
    /// Mean noise variance across frames.
    pub fn noise_sigma_sq(&self) -> f64 {
        self.noise_variances.iter().sum::<f64>() / self.noise_variances.len() as f64
    }

    /// Restrict to a subset of frames.
    pub fn select(&self, indices: &[usize]) -> Result<Simulation> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        Ok(Simulation {
            stack: self.stack.select(&idx)?,
            truth: self.truth.clone(),
            distortions: self.distortions.select_columns(idx.iter()),
            noise_variances: idx.iter().map(|&j| self.noise_variances[j]).collect(),
        })
    }
}

/// Standard normal draws by the Box-Muller transform over a ChaCha20
/// stream (`ChaCha20Rng::seed_from_u64`, 53-bit uniform doubles).
pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

pub fn simulate_stack(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let grid = &cfg.phantom.reflectance;
    let p = grid.num_pixels();
    let m = cfg.sample_times.len();
    let rho = grid.values();

    let mut distortions = DMatrix::zeros(p, m);
    for (j, &t) in cfg.sample_times.iter().enumerate() {
        for i in 0..p {
            distortions[(i, j)] = cfg.distortion(i, t)?;
        }
    }
    let mut frames = DMatrix::from_fn(p, m, |i, j| rho[i] * distortions[(i, j)]);

    let noise_variances = match cfg.snr {
        Snr::Noiseless => vec![0.0; m],
        Snr::Db(db) => {
            let ratio = 10f64.powf(db / 10.0);
            let variances = match cfg.noise_mode {
                NoiseMode::Stack => {
                    let energy = frames.norm_squared();
                    if !(energy > 0.0) {
                        return Err(Error::Domain(
                            "cannot set an SNR on an all-zero signal".into(),
                        ));
                    }
                    vec![energy / ((p * m) as f64 * ratio); m]
                }
                NoiseMode::Frame => frames
                    .column_iter()
                    .map(|col| {
                        let energy = col.norm_squared();
                        if energy > 0.0 {
                            Ok(energy / (p as f64 * ratio))
                        } else {
                            Err(Error::Domain(
                                "cannot set an SNR on an all-zero frame".into(),
                            ))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            let mut gauss = GaussianStream::new(cfg.rng_seed);
            for (j, mut col) in frames.column_iter_mut().enumerate() {
                let sd = variances[j].sqrt();
                for v in col.iter_mut() {
                    *v += sd * gauss.next();
                }
            }
            variances
        }
    };

    let stack = FrameStack::with_pitch(
        grid.width,
        grid.height,
        grid.pixel_pitch_x,
        grid.pixel_pitch_y,
        frames,
        Some(cfg.sample_times.clone()),
    )?;
    Ok(Simulation {
        stack,
        truth: cfg.phantom.clone(),
        distortions,
        noise_variances,
    })
}

impl FromConfig for SimConfig {
    const KEYS: &'static [&'static str] = &[
        "width",
        "height",
        "pixel_pitch_x",
        "pixel_pitch_y",
        "glyph",
        "rho0",
        "rho1",
        "thickness",
        "n_rho",
        "wave_speed",
        "t0",
        "pulse_width",
        "tilt_alpha1",
        "tilt_alpha2",
        "ripple_amplitude",
        "ripple_period",
        "z0",
        "num_frames",
        "window_start",
        "window_end",
        "snr_db",
        "noise_mode",
        "rng_seed",
        "n_reflections",
    ];

    fn from_entries(e: &ConfigEntries) -> Result<Self> {
        let width: usize = e.get_or("width", 64)?;
        let height: usize = e.get_or("height", 64)?;
        let pitch_x = e.get_f64("pixel_pitch_x")?.unwrap_or(DEFAULT_PIXEL_PITCH);
        let pitch_y = e.get_f64("pixel_pitch_y")?.unwrap_or(DEFAULT_PIXEL_PITCH);
        let glyph: String = e.get_or("glyph", "M".to_string())?;
        let rho0 = e.get_f64("rho0")?.unwrap_or(0.3);
        let rho1 = e.get_f64("rho1")?.unwrap_or(0.1);

        let mut phantom = make_letter_phantom(width, height, &glyph, rho0, rho1)
            .map_err(|err| e.invalid("glyph", err.to_string()))?;
        phantom.reflectance = ImageGrid::with_pitch(
            width,
            height,
            pitch_x,
            pitch_y,
            phantom.reflectance.into_values(),
        )
        .map_err(|err| e.invalid("pixel_pitch_x", err.to_string()))?;
        phantom.thickness = e
            .get_f64("thickness")?
            .unwrap_or(SlabPhantom::DEFAULT_THICKNESS);
        phantom.n_rho = e.get_f64("n_rho")?.unwrap_or(SlabPhantom::DEFAULT_N_RHO);
        phantom.wave_speed = e.get_f64("wave_speed")?.unwrap_or(SPEED_OF_LIGHT);
        let phantom = SlabPhantom::new(
            phantom.reflectance,
            phantom.labels,
            phantom.thickness,
            phantom.n_rho,
            phantom.wave_speed,
        )
        .map_err(|err| e.invalid("thickness", err.to_string()))?;

        let t0 = e.get_f64("t0")?.unwrap_or(PICOSECOND);
        let pulse_width = e.get_f64("pulse_width")?.unwrap_or(t0 / 4.0);
        let pulse =
            PulseSpec::new(t0, pulse_width).map_err(|err| e.invalid("t0", err.to_string()))?;

        let num_frames: usize = e.get_or("num_frames", 10)?;
        if num_frames == 0 {
            return Err(e.invalid("num_frames", "need at least one frame"));
        }
        let start = e.get_f64("window_start")?.unwrap_or(t0 - 0.4 * PICOSECOND);
        let end = e.get_f64("window_end")?.unwrap_or(t0 + 0.4 * PICOSECOND);
        if !(end > start && start >= 0.0) {
            return Err(e.invalid(
                "window_end",
                "sampling window must satisfy 0 <= start < end",
            ));
        }

        let snr = match e.raw("snr_db") {
            None => Snr::Db(10.0),
            Some(("noiseless", _)) => Snr::Noiseless,
            Some(_) => Snr::Db(e.get_f64("snr_db")?.unwrap()),
        };
        let noise_mode = match e.raw("noise_mode") {
            None | Some(("stack", _)) => NoiseMode::Stack,
            Some(("frame", _)) => NoiseMode::Frame,
            Some((v, line)) => {
                return Err(crate::error::Error::Config {
                    key: "noise_mode".into(),
                    line,
                    message: format!("expected `stack` or `frame`, got `{v}`"),
                })
            }
        };

        let ripple = match e.get_f64("ripple_amplitude")? {
            None => None,
            Some(amplitude) => {
                let period = e
                    .get_f64("ripple_period")?
                    .unwrap_or(width as f64 * pitch_x);
                if !(period > 0.0) {
                    return Err(e.invalid("ripple_period", "ripple period must be positive"));
                }
                Some(Ripple { amplitude, period })
            }
        };
        let n_reflections: usize = e.get_or("n_reflections", DEFAULT_N_REFLECTIONS)?;
        if n_reflections == 0 {
            return Err(e.invalid("n_reflections", "must be at least 1"));
        }

        let cfg = SimConfig {
            pulse,
            phantom,
            tilt_alpha1: e.get_f64("tilt_alpha1")?.unwrap_or(1e-6),
            tilt_alpha2: e.get_f64("tilt_alpha2")?.unwrap_or(1e-4),
            ripple,
            z0: e.get_f64("z0")?.unwrap_or(0.0),
            sample_times: uniform_samples(start, end, num_frames),
            snr,
            noise_mode,
            rng_seed: e.get_or("rng_seed", 0)?,
            n_reflections,
        };
        cfg.validate()
            .map_err(|err| e.invalid("num_frames", err.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn small_config(snr: Snr) -> SimConfig {
        let phantom = make_letter_phantom(16, 16, "A", 0.3, 0.1).unwrap();
        let mut cfg = SimConfig::reference(phantom, 6);
        cfg.snr = snr;
        cfg
    }

    #[test]
    fn pulse_vanishes_at_center_and_is_odd() {
        let p = PulseSpec::default();
        assert_eq!(pulse_value(&p, p.t0), 0.0);
        for k in 1..20 {
            let d = k as f64 * 0.03 * PICOSECOND;
            let (a, b) = (pulse_value(&p, p.t0 + d), pulse_value(&p, p.t0 - d));
            assert!((a + b).abs() <= 1e-12 * a.abs());
        }
        assert_eq!(pulse_value(&p, -1e-13), 0.0);
    }

    #[test]
    fn pulse_at_origin() {
        let p = PulseSpec::default();
        // 1e-12 * exp(-8)
        let expected = 3.354_626_279_025_119e-16;
        assert!((pulse_value(&p, 0.0) - expected).abs() < 1e-28);
    }

    #[test]
    fn impulse_train_coefficients() {
        let tau = 1e-12;
        let train = impulse_train(0.5, tau, 3).unwrap();
        assert_eq!(train[0], (0.0, 1.0));
        assert!((train[1].1 + 0.75).abs() < 1e-15);
        assert_eq!(train[1].0, 2.0 * tau);
        assert!((train[2].1 + 0.1875).abs() < 1e-15);
        assert_eq!(train[2].0, 4.0 * tau);
        assert_eq!(impulse_train(0.9, tau, 1).unwrap()[0], (0.0, 1.0));
        assert!(impulse_train(1.0, tau, 1).is_err());
        assert!(impulse_train(0.0, tau, 1).is_err());
        assert!(impulse_train(0.5, 0.0, 1).is_err());
    }

    #[test]
    fn impulse_train_decays_geometrically() {
        for &rho in &[0.05, 0.1, 0.3, 0.7] {
            let train = impulse_train(rho, 1e-12, 8).unwrap();
            for m in 1..8 {
                let ratio = train[m + 1].1.abs() / train[m].1.abs();
                assert!((ratio - rho * rho).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untilted_homogeneous_slab_is_pixel_independent() {
        let grid = ImageGrid::new(4, 3, vec![0.2; 12]).unwrap();
        let phantom = SlabPhantom::new(grid, vec![0; 12], 100e-6, 1.5, SPEED_OF_LIGHT).unwrap();
        let mut cfg = SimConfig::reference(phantom, 4);
        cfg.tilt_alpha1 = 0.0;
        cfg.tilt_alpha2 = 0.0;
        for &t in &cfg.sample_times {
            let f0 = reflected_field(&cfg, 0, t).unwrap();
            for i in 1..12 {
                assert_eq!(reflected_field(&cfg, i, t).unwrap(), f0);
            }
        }
    }

    #[test]
    fn front_echo_only_regime() {
        // At t0 - 0.3 ps the first echo (delay 2 n d / c ~ 1.33 ps) sees chi < 0 args.
        let phantom = make_letter_phantom(4, 4, "I", 0.3, 0.1).unwrap();
        let mut cfg = SimConfig::reference(phantom, 3);
        cfg.n_reflections = 1;
        let t = 0.7 * PICOSECOND;
        for i in 0..16 {
            let rho = cfg.phantom.reflectance.values()[i];
            let z = cfg.z0 + cfg.surface_offset(i);
            let expected = rho * pulse_value(&cfg.pulse, t + z / cfg.phantom.wave_speed);
            assert_eq!(reflected_field(&cfg, i, t).unwrap(), expected);
        }
    }

    #[test]
    fn vertical_offset_is_a_time_shift() {
        let grid = ImageGrid::new(1, 8, vec![0.3; 8]).unwrap();
        let phantom = SlabPhantom::new(grid, vec![0; 8], 100e-6, 2.0, SPEED_OF_LIGHT).unwrap();
        let mut cfg = SimConfig::reference(phantom, 3);
        cfg.tilt_alpha2 = 2e-3;
        let rows = 5.0;
        let shift = cfg.tilt_alpha2 * rows * cfg.phantom.reflectance.pixel_pitch_y / SPEED_OF_LIGHT;
        for &t in &cfg.sample_times {
            let a = reflected_field(&cfg, 5, t).unwrap();
            let b = reflected_field(&cfg, 0, t + shift).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-30), "{a} vs {b}");
        }
    }

    #[test]
    fn noiseless_stack_is_exact_product() {
        let sim = simulate_stack(&small_config(Snr::Noiseless)).unwrap();
        let rho = sim.truth.reflectance.values();
        for j in 0..sim.stack.num_frames() {
            for i in 0..rho.len() {
                assert_eq!(sim.stack.frame(j)[i], rho[i] * sim.distortions[(i, j)]);
            }
        }
    }

    #[test]
    fn zero_tilt_gives_constant_distortions() {
        let mut cfg = small_config(Snr::Noiseless);
        cfg.tilt_alpha1 = 0.0;
        cfg.tilt_alpha2 = 0.0;
        // Echo amplitudes depend on rho, so compare within one class only.
        let sim = simulate_stack(&cfg).unwrap();
        let labels = &sim.truth.labels;
        for col in sim.distortions.column_iter() {
            for class in [0u8, 1] {
                let mut vals = col
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == class)
                    .map(|(v, _)| *v);
                if let Some(first) = vals.next() {
                    assert!(vals.all(|v| v == first));
                }
            }
        }
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let cfg = small_config(Snr::Db(10.0));
        let a = simulate_stack(&cfg).unwrap();
        let b = simulate_stack(&cfg).unwrap();
        assert_eq!(a.stack.frames().as_slice(), b.stack.frames().as_slice());
        let mut other = cfg.clone();
        other.rng_seed = 1;
        let c = simulate_stack(&other).unwrap();
        assert_ne!(a.stack.frames().as_slice(), c.stack.frames().as_slice());
    }

    #[test]
    fn snr_on_zero_signal_is_rejected() {
        let mut cfg = small_config(Snr::Db(10.0));
        // Sampling long before the pulse arrives gives an all-zero signal.
        cfg.pulse = PulseSpec::new(1.0, 1e-15).unwrap();
        cfg.sample_times = vec![1e-12, 2e-12];
        cfg.tilt_alpha1 = 0.0;
        cfg.tilt_alpha2 = 0.0;
        assert!(matches!(simulate_stack(&cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn per_frame_noise_mode() {
        let mut cfg = small_config(Snr::Db(5.0));
        cfg.noise_mode = NoiseMode::Frame;
        let sim = simulate_stack(&cfg).unwrap();
        let clean = sim.truth.reflectance.values();
        for j in 0..sim.stack.num_frames() {
            let energy: f64 = (0..clean.len())
                .map(|i| (clean[i] * sim.distortions[(i, j)]).powi(2))
                .sum();
            let expected = energy / (clean.len() as f64 * 10f64.powf(0.5));
            assert!((sim.noise_variances[j] - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn phantom_values_and_blank_glyph() {
        let p = make_letter_phantom(64, 64, "M", 0.3, 0.1).unwrap();
        let mut values: Vec<f64> = p.reflectance.values().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![0.1, 0.3]);

        let blank = make_letter_phantom(10, 12, " ", 0.3, 0.1).unwrap();
        assert!(blank.reflectance.values().iter().all(|&v| v == 0.3));
        assert_eq!(blank.foreground_count(), 0);

        let err = make_letter_phantom(8, 8, "@", 0.3, 0.1).unwrap_err();
        assert!(err.to_string().contains("supported"));
    }

    #[test]
    fn phantom_label_count_matches_scaled_bitmap() {
        // Oracle: each set bitmap cell covers (#rows mapping to it) x (#cols mapping to it).
        let (w, h) = (37, 50);
        let p = make_letter_phantom(w, h, "M", 0.3, 0.1).unwrap();
        let bitmap = font::glyph_rows('M').unwrap();
        let (bw, bh) = (font::GLYPH_WIDTH + 2, font::GLYPH_HEIGHT + 2);
        let rows_per = |cell: usize| (0..h).filter(|&r| r * bh / h == cell).count();
        let cols_per = |cell: usize| (0..w).filter(|&c| c * bw / w == cell).count();
        let mut expected = 0;
        for (r, row) in bitmap.iter().enumerate() {
            for c in 0..font::GLYPH_WIDTH {
                if row & (1 << (4 - c)) != 0 {
                    expected += rows_per(r + 1) * cols_per(c + 1);
                }
            }
        }
        assert_eq!(p.foreground_count(), expected);
    }

    #[test]
    fn config_defaults_follow_reference_setup() {
        let cfg: SimConfig = parse_config_str("snr_db=noiseless\nnum_frames=20\n").unwrap();
        assert_eq!(cfg.snr, Snr::Noiseless);
        assert_eq!(cfg.sample_times.len(), 20);
        assert!((cfg.sample_times[0] - 0.6e-12).abs() < 1e-24);
        assert!((cfg.sample_times[19] - 1.4e-12).abs() < 1e-24);
        assert_eq!(cfg.tilt_alpha2, 1e-4);
        assert_eq!(cfg.phantom.reflectance.width, 64);
        assert!(parse_config_str::<SimConfig>("noise_mode=weird\n").is_err());
        assert!(parse_config_str::<SimConfig>("glyph=@\n").is_err());
    }
}

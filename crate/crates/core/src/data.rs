//! Synthetic six-channel gearbox vibration data and the split protocol.
//!
//! Acquisition is order-tracked: the sampling clock is locked to the shaft
//! at [`SAMPLES_PER_REV`] samples per revolution, so shaft, mesh and fault
//! orders sit at fixed positions regardless of speed. Impacts excite a
//! structural resonance fixed in time (Hz), which therefore moves with
//! speed in the order domain, and load scales and modulates the amplitude.
//! A recording for one (condition, fault) pair is cut into disjoint
//! 1024-sample windows, each reshaped channel-wise into `[6, 32, 32]`.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{EntryKind, ParamStore};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 6;
pub const WINDOW: usize = 1024;
pub const SIDE: usize = 32;
pub const SAMPLES_PER_REV: f64 = 128.0;

/// Gear-mesh order relative to shaft speed.
const MESH_ORDER: f64 = 8.0;
/// Structural resonance excited by impacts, Hz.
const RESONANCE_HZ: f64 = 900.0;
/// Shaft harmonics `(order, amplitude)` present in every recording.
const BASE_HARMONICS: [(f64, f64); 3] = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)];
const MESH_AMPLITUDE: f64 = 0.4;
const LOAD_MOD_DEPTH: f64 = 0.2;
const LOAD_MOD_ORDER: f64 = 0.25;
const SPEED_WANDER: f64 = 0.005;
const WANDER_MEMORY: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub id: u32,
    /// Revolutions per second.
    pub speed: f64,
    pub load: f64,
    pub noise_sigma: f64,
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(Error::config("speed", "must be positive"));
        }
        if !self.load.is_finite() || self.load < 0.0 {
            return Err(Error::config("load", "must be nonnegative"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be nonnegative"));
        }
        if RESONANCE_HZ / self.speed >= SAMPLES_PER_REV / 2.0 {
            return Err(Error::config(
                "speed",
                format!(
                    "must exceed {} rev/s to keep the resonance below Nyquist",
                    2.0 * RESONANCE_HZ / SAMPLES_PER_REV
                ),
            ));
        }
        Ok(())
    }

    pub fn default_source() -> Self {
        Self {
            id: 0,
            speed: 30.0,
            load: 0.0,
            noise_sigma: 0.2,
        }
    }

    pub fn default_target() -> Self {
        Self {
            id: 1,
            speed: 20.0,
            load: 1.0,
            noise_sigma: 0.2,
        }
    }

    fn amplitude_scale(&self) -> f64 {
        1.0 + 0.3 * self.load
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub label: usize,
    pub name: &'static str,
    /// `(shaft order, amplitude)` pairs added by the fault.
    pub harmonics: Vec<(f64, f64)>,
    /// Impacts per revolution; 0 disables impulses.
    pub impulse_rate: f64,
    pub impulse_amplitude: f64,
    /// Exponential decay rate of each impact, per second.
    pub impulse_decay: f64,
}

impl FaultSpec {
    pub fn is_normal(&self) -> bool {
        self.harmonics.is_empty() && self.impulse_rate == 0.0
    }
}

/// First `k` entries of the built-in fault catalog (at most 9). Label 0 is
/// the healthy gearbox.
pub fn fault_catalog(k: usize) -> Result<Vec<FaultSpec>> {
    let f = |label, name, harmonics: &[(f64, f64)], rate, amp, decay| FaultSpec {
        label,
        name,
        harmonics: harmonics.to_vec(),
        impulse_rate: rate,
        impulse_amplitude: amp,
        impulse_decay: decay,
    };
    let all = vec![
        f(0, "normal", &[], 0.0, 0.0, 0.0),
        f(1, "broken", &[(1.0, 0.6)], 1.0, 2.4, 40.0),
        f(
            2,
            "missing",
            &[(MESH_ORDER - 1.0, 0.6), (MESH_ORDER + 1.0, 0.6)],
            1.0,
            1.6,
            20.0,
        ),
        f(3, "root_crack", &[(2.0, 1.2), (4.0, 0.4)], 2.0, 0.8, 60.0),
        f(4, "pitting", &[(5.0, 0.7), (6.0, 0.4)], 3.0, 0.8, 80.0),
        f(5, "inner_race", &[], 5.4, 1.4, 50.0),
        f(6, "outer_race", &[(3.6, 0.4)], 3.6, 1.2, 50.0),
        f(7, "ball", &[(2.3, 0.8)], 2.3, 1.0, 30.0),
        f(8, "compound", &[(1.0, 0.6), (2.0, 0.6)], 5.4, 1.0, 40.0),
    ];
    if k < 2 || k > all.len() {
        return Err(Error::config(
            "num_classes",
            format!("catalog supports 2..={} classes", all.len()),
        ));
    }
    Ok(all.into_iter().take(k).collect())
}

fn channel_gain(c: usize) -> f64 {
    1.0 - 0.08 * c as f64
}

fn channel_phase(c: usize) -> f64 {
    c as f64 * TAU / 12.0
}

/// Upper bound on `|signal|` excluding noise.
pub fn amplitude_bound(cond: &ConditionSpec, fault: &FaultSpec) -> f64 {
    let harm: f64 = BASE_HARMONICS.iter().map(|h| h.1).sum::<f64>()
        + MESH_AMPLITUDE
        + fault.harmonics.iter().map(|h| h.1.abs()).sum::<f64>()
        + fault.impulse_amplitude.abs();
    let mod_depth = 1.0 + LOAD_MOD_DEPTH * cond.load;
    cond.amplitude_scale() * mod_depth * harm
}

/// Derives an independent stream seed for one recording.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Raw recording, channel-major: `out[c * length + t]`.
pub fn generate_signal(
    cond: &ConditionSpec,
    fault: &FaultSpec,
    seed: u64,
    length: usize,
) -> Result<Vec<f64>> {
    cond.validate()?;
    if length < WINDOW {
        return Err(Error::Data(format!(
            "signal length {length} is shorter than one window ({WINDOW})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0: f64 = rng.random_range(0.0..TAU);
    let impulse_offset: f64 = rng.random::<f64>();
    let noise = Normal::new(0.0, cond.noise_sigma).map_err(|e| Error::Data(e.to_string()))?;

    // Shaft angle in revolutions. The rate wanders slowly (AR(1), about 0.5%
    // standard deviation) so windows of one recording are not periodic copies.
    let wander = Normal::new(
        0.0,
        SPEED_WANDER * (1.0 - WANDER_MEMORY * WANDER_MEMORY).sqrt(),
    )
    .map_err(|e| Error::Data(e.to_string()))?;
    let mut revs = Vec::with_capacity(length);
    let (mut rev, mut dev) = (0.0, 0.0);
    for _ in 0..length {
        revs.push(rev);
        dev = WANDER_MEMORY * dev + wander.sample(&mut rng);
        rev += (1.0 + dev) / SAMPLES_PER_REV;
    }

    let scale = cond.amplitude_scale();
    let mut out = vec![0.0; CHANNELS * length];
    for c in 0..CHANNELS {
        let gain = channel_gain(c) * scale;
        let ph = phase0 + channel_phase(c);
        let row = &mut out[c * length..(c + 1) * length];
        for (v, &rev) in row.iter_mut().zip(&revs) {
            let mut s = 0.0;
            for &(order, amp) in &BASE_HARMONICS {
                s += amp * (TAU * order * rev + order * ph).sin();
            }
            s += MESH_AMPLITUDE * (TAU * MESH_ORDER * rev + ph).sin();
            for &(order, amp) in &fault.harmonics {
                s += amp * (TAU * order * rev + 0.5 * ph).sin();
            }
            if fault.impulse_rate > 0.0 {
                // Seconds since the latest impact.
                let since = (rev * fault.impulse_rate + impulse_offset).fract()
                    / fault.impulse_rate
                    / cond.speed;
                s += fault.impulse_amplitude
                    * (-fault.impulse_decay * since).exp()
                    * (TAU * RESONANCE_HZ * since + c as f64).sin();
            }
            let modulation = 1.0 + LOAD_MOD_DEPTH * cond.load * (TAU * LOAD_MOD_ORDER * rev).sin();
            *v = gain * modulation * s;
        }
    }
    if cond.noise_sigma > 0.0 {
        for v in &mut out {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Splits a channel-major recording into disjoint windows, each `[6, 32, 32]`.
pub fn window_and_reshape(signal: &[f64], length: usize) -> Result<Vec<Tensor>> {
    if signal.len() != CHANNELS * length {
        return Err(Error::Data(format!(
            "expected {CHANNELS} x {length} samples, got {}",
            signal.len()
        )));
    }
    let count = length / WINDOW;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let mut data = Vec::with_capacity(CHANNELS * WINDOW);
        for c in 0..CHANNELS {
            let start = c * length + w * WINDOW;
            data.extend(signal[start..start + WINDOW].iter().map(|&v| v as f32));
        }
        out.push(Tensor::new(&[CHANNELS, SIDE, SIDE], data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Training,
    FineTuneSource,
    FineTuneTarget,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Training => "training",
            Self::FineTuneSource => "finetune_src",
            Self::FineTuneTarget => "finetune_tgt",
            Self::Test => "test",
        }
    }

    pub const ALL: [Role; 4] = [
        Self::Training,
        Self::FineTuneSource,
        Self::FineTuneTarget,
        Self::Test,
    ];
}

/// Labeled windows for one role. `inputs` is `[N, 6, 32, 32]`.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub role: Role,
    pub num_classes: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub conditions: Vec<u32>,
    /// Window index within its source recording.
    pub windows: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Indices of the samples of each class, in set order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut v = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            v[y].push(i);
        }
        v
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    fn from_parts(
        role: Role,
        num_classes: usize,
        items: Vec<(Tensor, usize, u32, usize)>,
    ) -> Result<Self> {
        let refs: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        let inputs = if refs.is_empty() {
            Tensor::zeros(&[0, CHANNELS, SIDE, SIDE])
        } else {
            crate::tensor::stack(&refs)?
        };
        Ok(Self {
            role,
            num_classes,
            inputs,
            labels: items.iter().map(|i| i.1).collect(),
            conditions: items.iter().map(|i| i.2).collect(),
            windows: items.iter().map(|i| i.3).collect(),
        })
    }

    /// Adds this set to `store` as `data.<role>.{inputs,labels,conditions,windows}`.
    pub fn export(&self, store: &mut ParamStore) -> Result<()> {
        let p = format!("data.{}", self.role.as_str());
        let n = self.len();
        let ints = |v: Vec<f32>| Tensor::new(&[n], v);
        store.insert(&format!("{p}.inputs"), self.inputs.clone(), EntryKind::Data)?;
        store.insert(
            &format!("{p}.labels"),
            ints(self.labels.iter().map(|&v| v as f32).collect())?,
            EntryKind::Data,
        )?;
        store.insert(
            &format!("{p}.conditions"),
            ints(self.conditions.iter().map(|&v| v as f32).collect())?,
            EntryKind::Data,
        )?;
        store.insert(
            &format!("{p}.windows"),
            ints(self.windows.iter().map(|&v| v as f32).collect())?,
            EntryKind::Data,
        )?;
        Ok(())
    }

    pub fn import(store: &ParamStore, role: Role, num_classes: usize) -> Result<Self> {
        let p = format!("data.{}", role.as_str());
        let get = |k: &str| store.get(&format!("{p}.{k}"));
        let inputs = get("inputs")?.clone();
        let ints = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Data(format!("{p}.{k} holds non-integer {v}")))
                    }
                })
                .collect()
        };
        let labels = ints("labels")?;
        let conditions = ints("conditions")?.into_iter().map(|v| v as u32).collect();
        let windows = ints("windows")?;
        let n = labels.len();
        if inputs.ndim() != 4
            || inputs.shape()[0] != n
            || inputs.shape()[1..] != [CHANNELS, SIDE, SIDE]
        {
            return Err(Error::Data(format!(
                "{p}.inputs has shape {:?} for {n} labels",
                inputs.shape()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "{p}: label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            role,
            num_classes,
            inputs,
            labels,
            conditions,
            windows,
        })
    }
}

/// Per-class sample counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub n_train: usize,
    pub n_ft: usize,
    pub n_test: usize,
    /// Windows generated per recording; `None` generates exactly what is needed.
    pub recording_windows: Option<usize>,
}

impl SplitCounts {
    pub fn default_profile() -> Self {
        Self {
            n_train: 250,
            n_ft: 10,
            n_test: 100,
            recording_windows: None,
        }
    }

    pub fn case02_profile() -> Self {
        Self {
            n_train: 1023,
            n_ft: 20,
            n_test: 100,
            recording_windows: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub training: SampleSet,
    pub finetune_src: SampleSet,
    pub finetune_tgt: SampleSet,
    pub test: SampleSet,
}

impl Splits {
    pub fn export(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for s in [
            &self.training,
            &self.finetune_src,
            &self.finetune_tgt,
            &self.test,
        ] {
            s.export(&mut store)?;
        }
        Ok(store)
    }

    pub fn import(store: &ParamStore, num_classes: usize) -> Result<Self> {
        Ok(Self {
            training: SampleSet::import(store, Role::Training, num_classes)?,
            finetune_src: SampleSet::import(store, Role::FineTuneSource, num_classes)?,
            finetune_tgt: SampleSet::import(store, Role::FineTuneTarget, num_classes)?,
            test: SampleSet::import(store, Role::Test, num_classes)?,
        })
    }
}

fn recording(
    cond: &ConditionSpec,
    fault: &FaultSpec,
    seed: u64,
    required: usize,
    counts: &SplitCounts,
) -> Result<Vec<(usize, Tensor)>> {
    let windows = counts.recording_windows.unwrap_or(required);
    if windows < required {
        return Err(Error::InsufficientWindows {
            required,
            available: windows,
        });
    }
    let length = windows * WINDOW;
    let sig = generate_signal(
        cond,
        fault,
        stream_seed(seed, u64::from(cond.id), fault.label as u64),
        length,
    )?;
    let mut w: Vec<(usize, Tensor)> = window_and_reshape(&sig, length)?
        .into_iter()
        .enumerate()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
        seed,
        0xA11CE + u64::from(cond.id),
        fault.label as u64,
    ));
    w.shuffle(&mut rng);
    Ok(w)
}

/// Builds the four class-balanced splits.
///
/// Training windows come from the source condition; fine-tune-target and
/// test windows from the target condition (disjoint windows of the same
/// recording); fine-tune-source is the first `n_ft` training windows of
/// each class.
pub fn make_splits(
    source: &ConditionSpec,
    target: &ConditionSpec,
    num_classes: usize,
    counts: &SplitCounts,
    seed: u64,
) -> Result<Splits> {
    if source.id == target.id {
        return Err(Error::config(
            "target.id",
            "source and target conditions need distinct ids",
        ));
    }
    if counts.n_train == 0 || counts.n_ft == 0 || counts.n_test == 0 {
        return Err(Error::config(
            "split counts",
            "every split needs at least one sample per class",
        ));
    }
    if counts.n_ft > counts.n_train {
        return Err(Error::InsufficientWindows {
            required: counts.n_ft,
            available: counts.n_train,
        });
    }
    let faults = fault_catalog(num_classes)?;
    let (mut tr, mut fs, mut ft, mut te) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for fault in &faults {
        let src = recording(source, fault, seed, counts.n_train, counts)?;
        for (i, (w, x)) in src.into_iter().take(counts.n_train).enumerate() {
            if i < counts.n_ft {
                fs.push((x.clone(), fault.label, source.id, w));
            }
            tr.push((x, fault.label, source.id, w));
        }
        let tgt = recording(target, fault, seed, counts.n_ft + counts.n_test, counts)?;
        for (i, (w, x)) in tgt
            .into_iter()
            .take(counts.n_ft + counts.n_test)
            .enumerate()
        {
            if i < counts.n_ft {
                ft.push((x, fault.label, target.id, w));
            } else {
                te.push((x, fault.label, target.id, w));
            }
        }
    }
    Ok(Splits {
        training: SampleSet::from_parts(Role::Training, num_classes, tr)?,
        finetune_src: SampleSet::from_parts(Role::FineTuneSource, num_classes, fs)?,
        finetune_tgt: SampleSet::from_parts(Role::FineTuneTarget, num_classes, ft)?,
        test: SampleSet::from_parts(Role::Test, num_classes, te)?,
    })
}

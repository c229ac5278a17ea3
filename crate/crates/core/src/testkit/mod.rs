//! Test support: an SMF writer, a synthetic multi-style corpus and
//! finite-difference gradient checking. Enabled by the `testkit` feature.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ComposerConfig, ComposerInfo, FilterRules, MetadataRecord};
use crate::nn::{Layer, NnError, Scalar, Slot, Tensor};
use crate::pianoroll::{encode, PianoRoll};
use crate::smf::NoteEvent;

pub mod fixtures;

/// SMF variable-length quantity, most significant group first.
pub fn vlq(mut value: u32) -> Vec<u8> {
    let mut out = vec![(value & 0x7F) as u8];
    value >>= 7;
    while value > 0 {
        out.push((value & 0x7F) as u8 | 0x80);
        value >>= 7;
    }
    out.reverse();
    out
}

/// Builds one MTrk body from absolute-tick events (emitted in call order).
#[derive(Debug, Clone, Default)]
pub struct TrackWriter {
    bytes: Vec<u8>,
    last_tick: u64,
    running: Option<u8>,
    /// Omit repeated channel status bytes.
    pub use_running_status: bool,
}

impl TrackWriter {
    pub fn new() -> Self {
        Self::default()
    }

    fn delta(&mut self, tick: u64) {
        let d = tick.checked_sub(self.last_tick).expect("events in tick order");
        self.bytes.extend(vlq(u32::try_from(d).expect("delta fits in 28 bits")));
        self.last_tick = tick;
    }

    pub fn channel(&mut self, tick: u64, status: u8, data: &[u8]) -> &mut Self {
        self.delta(tick);
        if !(self.use_running_status && self.running == Some(status)) {
            self.bytes.push(status);
        }
        self.running = Some(status);
        self.bytes.extend_from_slice(data);
        self
    }

    pub fn note_on(&mut self, tick: u64, channel: u8, key: u8, velocity: u8) -> &mut Self {
        self.channel(tick, 0x90 | channel, &[key, velocity])
    }

    pub fn note_off(&mut self, tick: u64, channel: u8, key: u8) -> &mut Self {
        self.channel(tick, 0x80 | channel, &[key, 64])
    }

    pub fn meta(&mut self, tick: u64, kind: u8, data: &[u8]) -> &mut Self {
        self.delta(tick);
        self.bytes.extend_from_slice(&[0xFF, kind]);
        self.bytes.extend(vlq(data.len() as u32));
        self.bytes.extend_from_slice(data);
        self.running = None;
        self
    }

    pub fn tempo(&mut self, tick: u64, us_per_quarter: u32) -> &mut Self {
        let b = us_per_quarter.to_be_bytes();
        self.meta(tick, 0x51, &b[1..])
    }

    pub fn end(&mut self, tick: u64) -> Vec<u8> {
        self.meta(tick, 0x2F, &[]);
        std::mem::take(&mut self.bytes)
    }
}

/// Wraps track bodies into a complete file.
pub fn smf_bytes(format: u16, division: u16, tracks: &[Vec<u8>]) -> Vec<u8> {
    let mut out = b"MThd".to_vec();
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&format.to_be_bytes());
    out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&division.to_be_bytes());
    for t in tracks {
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(t.len() as u32).to_be_bytes());
        out.extend_from_slice(t);
    }
    out
}

/// Ticks per second of [`notes_to_smf`] output (480 ticks per quarter at 120 bpm).
pub const WRITER_TICKS_PER_SECOND: f64 = 960.0;

/// Single-track format-0 file sounding `notes` on their channels. Times are
/// rounded to the nearest tick.
pub fn notes_to_smf(notes: &[NoteEvent]) -> Vec<u8> {
    let tick = |s: f64| (s * WRITER_TICKS_PER_SECOND).round() as u64;
    // (tick, order, status, key, velocity); offs sort before ons at equal ticks
    let mut events: Vec<(u64, u8, u8, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    for n in notes {
        events.push((tick(n.onset_seconds), 1, 0x90 | n.channel, n.pitch, n.velocity));
        events.push((tick(n.offset_seconds), 0, 0x80 | n.channel, n.pitch, 64));
    }
    events.sort_unstable();
    let mut w = TrackWriter::new();
    w.tempo(0, 500_000);
    let mut last = 0;
    for (t, _, status, key, vel) in events {
        w.channel(t, status, &[key, vel]);
        last = t;
    }
    smf_bytes(0, 480, &[w.end(last)])
}

/// A composer-like generator: its own pitch classes and velocity range.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub composer: String,
    pub birth_year: i32,
    pub era: String,
    pub pitch_classes: Vec<u8>,
    pub velocity: (u8, u8),
}

/// Three styles with disjoint pitch-class sets and velocity ranges.
pub fn default_styles() -> Vec<Style> {
    let style = |name: &str, year, era: &str, pcs: &[u8], vel| Style {
        composer: name.to_string(),
        birth_year: year,
        era: era.to_string(),
        pitch_classes: pcs.to_vec(),
        velocity: vel,
    };
    vec![
        style("Synthetic Alpha", 1700, "Baroque", &[0, 4, 7, 11], (25, 50)),
        style("Synthetic Beta", 1780, "Classical", &[2, 5, 9], (60, 85)),
        style("Synthetic Gamma", 1860, "Romantic", &[1, 3, 6, 8, 10], (95, 125)),
    ]
}

/// Random but style-consistent piano performances.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub styles: Vec<Style>,
    pub pieces_per_style: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl SyntheticCorpus {
    pub fn new(pieces_per_style: usize, seconds: f64, seed: u64) -> Self {
        Self {
            styles: default_styles(),
            pieces_per_style,
            seconds,
            seed,
        }
    }

    pub fn file_name(&self, style: usize, piece: usize) -> String {
        format!("style{style}/piece{piece:03}.midi")
    }

    /// Notes of one piece: a stream of onsets every 0.05–0.3 s, each 0.1–0.6 s
    /// long, pitches from the style's classes over octaves 3–6.
    pub fn notes(&self, style: usize, piece: usize) -> Vec<NoteEvent> {
        let st = &self.styles[style];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((style as u64) << 32) | piece as u64);
        let mut notes = Vec::new();
        let mut t = rng.random_range(0.0..0.2);
        while t < self.seconds - 0.7 {
            let pc = st.pitch_classes[rng.random_range(0..st.pitch_classes.len())];
            let octave = rng.random_range(4u8..8);
            let dur = rng.random_range(0.1..0.6);
            notes.push(NoteEvent {
                onset_seconds: t,
                offset_seconds: t + dur,
                pitch: octave * 12 + pc,
                velocity: rng.random_range(st.velocity.0..=st.velocity.1),
                channel: 0,
            });
            t += rng.random_range(0.05..0.3);
        }
        crate::smf::sort_notes(&mut notes);
        notes
    }

    pub fn records(&self) -> Vec<MetadataRecord> {
        let mut out = Vec::new();
        for (s, st) in self.styles.iter().enumerate() {
            for p in 0..self.pieces_per_style {
                out.push(MetadataRecord {
                    canonical_composer: st.composer.clone(),
                    canonical_title: format!("Study {p}"),
                    midi_filename: self.file_name(s, p),
                    duration_seconds: self.seconds,
                    source_split: "train".to_string(),
                });
            }
        }
        out
    }

    pub fn composer_config(&self) -> ComposerConfig {
        ComposerConfig {
            composers: self
                .styles
                .iter()
                .map(|s| ComposerInfo {
                    name: s.composer.clone(),
                    short: None,
                    birth_year: s.birth_year,
                    era: s.era.clone(),
                })
                .collect(),
        }
    }

    /// Keeps every style regardless of size.
    pub fn filter_rules(&self) -> FilterRules {
        FilterRules {
            min_pieces_exclusive: 0,
            ..FilterRules::default()
        }
    }

    /// Encoded rolls keyed by piece id, without touching disk.
    pub fn rolls(&self) -> HashMap<String, PianoRoll> {
        let mut out = HashMap::new();
        for s in 0..self.styles.len() {
            for p in 0..self.pieces_per_style {
                out.insert(self.file_name(s, p), encode(&self.notes(s, p)));
            }
        }
        out
    }

    /// Writes MIDI files, a metadata CSV and a composer table under `root`.
    pub fn write(&self, root: &Path) -> io::Result<CorpusFiles> {
        let midi_root = root.join("midi");
        let mut csv = String::from("canonical_composer,canonical_title,split,year,midi_filename,audio_filename,duration\n");
        for (s, st) in self.styles.iter().enumerate() {
            for p in 0..self.pieces_per_style {
                let name = self.file_name(s, p);
                let path = midi_root.join(&name);
                fs::create_dir_all(path.parent().expect("file has a parent"))?;
                fs::write(&path, notes_to_smf(&self.notes(s, p)))?;
                csv.push_str(&format!(
                    "{},Study {p},train,2020,{name},{},{}\n",
                    st.composer,
                    name.replace(".midi", ".wav"),
                    self.seconds
                ));
            }
        }
        let csv_path = root.join("metadata.csv");
        fs::write(&csv_path, csv)?;
        let composers_path = root.join("composers.json");
        fs::write(
            &composers_path,
            serde_json::to_string_pretty(&self.composer_config()).expect("composer table serializes"),
        )?;
        Ok(CorpusFiles {
            csv: csv_path,
            composers: composers_path,
            midi_root,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFiles {
    pub csv: PathBuf,
    pub composers: PathBuf,
    pub midi_root: PathBuf,
}

/// Copies every named tensor of `src` into the same-named slot of `dst`,
/// converting precision.
pub fn copy_tensors<T: Scalar, U: Scalar>(src: &mut dyn Layer<T>, dst: &mut dyn Layer<U>) {
    let mut values: HashMap<String, Tensor<T>> = HashMap::new();
    src.visit_mut("", &mut |name, slot| {
        let t = match slot {
            Slot::Param(p) => p.value.clone(),
            Slot::Buffer(b) => b.clone(),
        };
        values.insert(name.to_string(), t);
    });
    dst.visit_mut("", &mut |name, slot| {
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        let v = values.get(name).unwrap_or_else(|| panic!("no tensor {name} in source"));
        assert_eq!(v.shape(), target.shape(), "{name}");
        *target = v.cast();
    });
}

/// One coordinate of a gradient: `param == None` is the layer input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub param: Option<usize>,
    pub index: usize,
}

/// Analytic gradients of `L = Σ w ⊙ layer(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub input: Vec<f64>,
    pub params: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn at(&self, probe: Probe) -> f64 {
        match probe.param {
            None => self.input[probe.index],
            Some(p) => self.params[p].1[probe.index],
        }
    }
}

pub fn analytic_gradients<T: Scalar>(
    layer: &mut dyn Layer<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<Gradients, NnError> {
    layer.zero_grad();
    layer.forward_train(x)?;
    let dx = layer.backward(w)?;
    let mut params = Vec::new();
    layer.visit_mut("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            params.push((name.to_string(), p.grad.data().iter().map(|v| v.as_f64()).collect()));
        }
    });
    Ok(Gradients {
        input: dx.data().iter().map(|v| v.as_f64()).collect(),
        params,
    })
}

fn weighted_output(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> Result<f64, NnError> {
    let y = layer.forward_train(x)?;
    Ok(y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

fn nudge_param(layer: &mut dyn Layer<f64>, param: usize, index: usize, delta: f64) {
    let mut i = 0;
    layer.visit_mut("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            if i == param {
                p.value.data_mut()[index] += delta;
            }
            i += 1;
        }
    });
}

/// Up to `per_tensor` random coordinates of the input and of each parameter.
pub fn sample_probes(layer: &mut dyn Layer<f64>, input_len: usize, per_tensor: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lens = vec![(None, input_len)];
    let mut i = 0;
    layer.visit_mut("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            lens.push((Some(i), p.value.len()));
            i += 1;
        }
    });
    let mut out = Vec::new();
    for (param, len) in lens {
        if len <= per_tensor {
            out.extend((0..len).map(|index| Probe { param, index }));
        } else {
            out.extend((0..per_tensor).map(|_| Probe {
                param,
                index: rng.random_range(0..len),
            }));
        }
    }
    out
}

/// Central differences `(L(θ+h) − L(θ−h)) / 2h` in double precision.
pub fn numeric_gradients(
    layer: &mut dyn Layer<f64>,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    probes: &[Probe],
    h: f64,
) -> Result<Vec<f64>, NnError> {
    let mut out = Vec::with_capacity(probes.len());
    for &pr in probes {
        let (plus, minus) = match pr.param {
            None => {
                let mut xp = x.clone();
                xp.data_mut()[pr.index] += h;
                let plus = weighted_output(layer, &xp, w)?;
                xp.data_mut()[pr.index] -= 2.0 * h;
                (plus, weighted_output(layer, &xp, w)?)
            }
            Some(p) => {
                nudge_param(layer, p, pr.index, h);
                let plus = weighted_output(layer, x, w)?;
                nudge_param(layer, p, pr.index, -2.0 * h);
                let minus = weighted_output(layer, x, w)?;
                nudge_param(layer, p, pr.index, h);
                (plus, minus)
            }
        };
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, floor)`, maximised over pairs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Seeded standard-normal tensor.
pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// Maximum relative error between analytic and central-difference gradients
/// of a double-precision layer at `per_tensor` sampled coordinates per tensor.
pub fn gradcheck(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, per_tensor: usize, seed: u64) -> Result<f64, NnError> {
    let y = layer.forward_train(x)?;
    let w = random_tensor::<f64>(y.shape(), seed ^ 0x5EED);
    let analytic = analytic_gradients(layer, x, &w)?;
    let probes = sample_probes(layer, x.len(), per_tensor, seed);
    let numeric = numeric_gradients(layer, x, &w, &probes, 1e-6)?;
    let a: Vec<f64> = probes.iter().map(|&p| analytic.at(p)).collect();
    Ok(max_relative_error(&a, &numeric, 1e-6))
}

//! Seeded synthetic corpus: noise-only background with planted class segments
//! whose signal is split across the three tracks, plus one point per segment.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SentimentSegment;
use crate::fsd::FeatureSequence;
use crate::model::MODALITIES;
use crate::numeric::io::{load_tensor, save_tensor};
use crate::numeric::Tensor;
use crate::pssc::{PointAnnotation, PointAnnotationSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub video_count: usize,
    /// Inclusive `[T_min, T_max]`.
    pub frame_range: [usize; 2],
    pub class_count: usize,
    pub segments_per_video: [usize; 2],
    pub segment_length: [usize; 2],
    /// Minimum background gap between consecutive segments.
    pub min_gap: usize,
    pub class_signal_strength: f64,
    pub noise_scale: f64,
    /// Fraction of the class signal carried by the face track; the rest is
    /// shared equally by audio and visual.
    pub face_informativeness: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            video_count: 62,
            frame_range: [80, 160],
            class_count: 2,
            segments_per_video: [1, 3],
            segment_length: [4, 30],
            min_gap: 2,
            class_signal_strength: 3.0,
            noise_scale: 0.3,
            face_informativeness: 0.5,
            feature_dim: 32,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.video_count == 0 || self.class_count == 0 || self.feature_dim == 0 {
            return bad("video_count, class_count and feature_dim must be positive");
        }
        for (name, r) in [
            ("frame_range", self.frame_range),
            ("segments_per_video", self.segments_per_video),
            ("segment_length", self.segment_length),
        ] {
            if r[0] > r[1] {
                return Err(Error::Spec(format!("{name} is empty")));
            }
        }
        if self.frame_range[0] == 0 || self.segment_length[0] == 0 {
            return bad("frame and segment lengths must be positive");
        }
        if self.segment_length[1] > self.frame_range[0] {
            return Err(Error::Spec(format!(
                "segments of up to {} frames do not fit in {} frames",
                self.segment_length[1], self.frame_range[0]
            )));
        }
        if !(0.0..=1.0).contains(&self.face_informativeness) {
            return bad("face_informativeness outside [0,1]");
        }
        if !(self.noise_scale >= 0.0 && self.class_signal_strength >= 0.0) {
            return bad("noise_scale and class_signal_strength must be nonnegative");
        }
        Ok(())
    }

    /// Signal amplitude of (audio, visual, face).
    pub fn track_amplitudes(&self) -> [f64; 3] {
        let s = self.class_signal_strength;
        let phi = self.face_informativeness;
        [s * (1.0 - phi) / 2.0, s * (1.0 - phi) / 2.0, s * phi]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: FeatureSequence,
    pub segments: Vec<SentimentSegment>,
    pub points: PointAnnotationSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub feature_dim: usize,
    pub videos: Vec<Video>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    class_count: usize,
    feature_dim: usize,
    videos: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<SynthSpec>,
}

/// Unit direction per (track, class), shared by all videos of a corpus.
fn class_directions(spec: &SynthSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..3)
        .map(|_| {
            (0..spec.class_count)
                .map(|_| {
                    let v: Vec<f64> = (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        })
        .collect()
}

fn place_segments(spec: &SynthSpec, frames: usize, rng: &mut ChaCha8Rng) -> Vec<SentimentSegment> {
    let n = rng.random_range(spec.segments_per_video[0]..=spec.segments_per_video[1]);
    let mut lengths: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.segment_length[0]..=spec.segment_length[1]))
        .collect();
    let footprint = |l: &[usize]| l.iter().sum::<usize>() + l.len().saturating_sub(1) * spec.min_gap;
    // Drop trailing draws that cannot fit in this video.
    while footprint(&lengths) > frames {
        lengths.pop();
    }
    let n = lengths.len();
    let used = footprint(&lengths);
    let free = frames - used;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        let start = cursor + cut;
        let class = rng.random_range(0..spec.class_count);
        out.push(SentimentSegment {
            start,
            end: start + len,
            class,
            score: 1.0,
        });
        cursor += len + if i + 1 < n { spec.min_gap } else { 0 };
    }
    out
}

fn generate_video(spec: &SynthSpec, dirs: &[Vec<Vec<f64>>], index: usize) -> Result<Video> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let frames = rng.random_range(spec.frame_range[0]..=spec.frame_range[1]);
    let segments = place_segments(spec, frames, &mut rng);
    let points = segments
        .iter()
        .map(|s| PointAnnotation {
            t: rng.random_range(s.start..s.end),
            class: s.class,
        })
        .collect();
    let points = PointAnnotationSet::new(points, frames, spec.class_count)?;

    let mut label = vec![None; frames];
    for s in &segments {
        for l in &mut label[s.start..s.end] {
            *l = Some(s.class);
        }
    }
    let amps = spec.track_amplitudes();
    let d = spec.feature_dim;
    let mut tracks = Vec::with_capacity(3);
    for (m, dir) in dirs.iter().enumerate() {
        let mut data = vec![0.0; frames * d];
        for (t, row) in data.chunks_mut(d).enumerate() {
            if let Some(c) = label[t] {
                for (x, u) in row.iter_mut().zip(&dir[c]) {
                    *x = amps[m] * u;
                }
            }
            if spec.noise_scale > 0.0 {
                let normal = Normal::new(0.0, spec.noise_scale).expect("positive scale");
                for x in row.iter_mut() {
                    *x += normal.sample(&mut rng);
                }
            }
        }
        tracks.push(Tensor::matrix(frames, d, data)?);
    }
    let face = tracks.pop().expect("three tracks");
    let visual = tracks.pop().expect("three tracks");
    let audio = tracks.pop().expect("three tracks");
    Ok(Video {
        id: format!("video_{index:03}"),
        features: FeatureSequence::new(audio, visual, face)?,
        segments,
        points,
    })
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let dirs = class_directions(spec);
    let videos = (0..spec.video_count)
        .map(|i| generate_video(spec, &dirs, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_count: spec.class_count,
        feature_dim: spec.feature_dim,
        videos,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, id: &str) -> Result<&Video> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::Config(format!("no video named {id}")))
    }

    /// Writes `videos/<id>/{audio,visual,face}.bin`, `gt.json`, `points.json`
    /// and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path, spec: Option<&SynthSpec>) -> Result<()> {
        for v in &self.videos {
            let vdir = dir.join("videos").join(&v.id);
            fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            let f = &v.features;
            for (name, t) in MODALITIES.iter().zip([&f.audio, &f.visual, &f.face]) {
                save_tensor(&vdir.join(format!("{name}.bin")), t)?;
            }
            write_json(&vdir.join("gt.json"), &v.segments)?;
            write_json(&vdir.join("points.json"), &v.points)?;
        }
        let manifest = Manifest {
            class_count: self.class_count,
            feature_dim: self.feature_dim,
            videos: self.videos.iter().map(|v| v.id.clone()).collect(),
            spec: spec.cloned(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for id in manifest.videos {
            let vdir = dir.join("videos").join(&id);
            let audio = load_tensor(&vdir.join("audio.bin"))?;
            let visual = load_tensor(&vdir.join("visual.bin"))?;
            let face = load_tensor(&vdir.join("face.bin"))?;
            let features = FeatureSequence::new(audio, visual, face)?;
            if features.dim() != manifest.feature_dim {
                return Err(Error::Format {
                    path: vdir,
                    detail: format!("feature width {} differs from manifest", features.dim()),
                });
            }
            let frames = features.frame_count();
            let segments: Vec<SentimentSegment> = read_json(&vdir.join("gt.json"))?;
            if segments
                .iter()
                .any(|s| s.start >= s.end || s.end > frames || s.class >= manifest.class_count)
            {
                return Err(Error::Format {
                    path: vdir.join("gt.json"),
                    detail: "segment outside video or class range".into(),
                });
            }
            let raw: Vec<PointAnnotation> = read_json(&vdir.join("points.json"))?;
            let points = PointAnnotationSet::new(raw, frames, manifest.class_count)?;
            videos.push(Video {
                id,
                features,
                segments,
                points,
            });
        }
        Ok(Self {
            class_count: manifest.class_count,
            feature_dim: manifest.feature_dim,
            videos,
        })
    }
}

//! Synthetic video classes with controllable difficulty along two axes:
//! how much of the video must be seen and how fine the discriminating
//! detail is.
//!
//! Class catalogue (the first `num_classes` entries are used):
//!
//! | label | family  | content                                              |
//! |-------|---------|------------------------------------------------------|
//! | 0-2   | static  | a square in colour plane `label % C`, fixed position |
//! | 3, 4  | motion  | vertical bar moving left / right (time mirrors)      |
//! | 5, 6  | motion  | horizontal bar moving up / down (time mirrors)       |
//! | 7-9   | texture | period-2 stripes (vertical, horizontal) or checker  |
//!
//! The two classes of a motion pair are exact time reversals of each other:
//! for the same random parameters, frame `t` of one equals frame `L-1-t` of
//! the other, so no single frame separates them. The bar is invisible for an
//! equal number of frames at both ends, which makes that prefix and suffix
//! identical across the pair.
//!
//! Every video draws from its own ChaCha stream keyed by `(split, index)`,
//! so generation is a pure function of the manifest and can run in any
//! order.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::temporal::sample_frames;
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 10;
/// Smallest frame side the renderers support.
pub const MIN_SIDE: usize = 8;

const BACKGROUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Static,
    Motion,
    Texture,
}

impl Family {
    pub fn of_label(label: usize) -> Self {
        match label {
            0..=2 => Family::Static,
            3..=6 => Family::Motion,
            _ => Family::Texture,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureDepth {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Difficulty {
    /// Fraction of the video that carries the discriminating evidence.
    pub temporal_extent: f64,
    pub feature_depth: FeatureDepth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_classes: usize,
    /// Videos in the train, val and test splits.
    pub counts: [usize; 3],
    pub video_length: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            seed: 20200,
            num_classes: 10,
            counts: [2000, 500, 500],
            video_length: 32,
            channels: 3,
            height: 32,
            width: 32,
            noise: 0.05,
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(config_err!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(config_err!(
                "frame {}x{} is smaller than the minimum side {MIN_SIDE}",
                self.height,
                self.width
            ));
        }
        if self.channels == 0 || self.video_length == 0 {
            return Err(config_err!("channels and video_length must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err!("noise must be a non-negative number, got {}", self.noise));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts[split as usize]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A frame quantised to 8 bits per value; `value = level / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: Vec<u8>,
}

impl Frame {
    fn from_values(channels: usize, height: usize, width: usize, values: &[f64]) -> Self {
        let levels = values.iter().map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect();
        Self { channels, height, width, levels }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.levels.iter().map(|&l| l as f64 / 255.0).collect(),
        )
        .expect("frame dims match level count")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Frame>,
    pub label: usize,
    pub difficulty: Difficulty,
}

impl SyntheticVideo {
    pub fn family(&self) -> Family {
        Family::of_label(self.label)
    }

    /// `l` evenly sampled frames as tensors.
    pub fn sample(&self, l: usize) -> Vec<Tensor> {
        sample_frames(self.frames.len(), l).into_iter().map(|i| self.frames[i].to_tensor()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[SyntheticVideo] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Random draws that fully determine a noise-free video.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recipe {
    pub label: usize,
    /// Top-left corner of the static square, as fractions of the free range.
    pub anchor: (f64, f64),
    /// Motion start position in pixels along the motion axis.
    pub start: f64,
    /// Motion speed in pixels per frame.
    pub speed: f64,
    /// Frames without the bar at each end of a motion video.
    pub hold: usize,
    pub intensity: f64,
}

impl Recipe {
    pub fn draw(label: usize, manifest: &DatasetManifest, rng: &mut impl Rng) -> Self {
        let axis_len = if matches!(label, 5 | 6) { manifest.height } else { manifest.width };
        Self {
            label,
            anchor: (rng.random::<f64>(), rng.random::<f64>()),
            start: rng.random::<f64>() * axis_len as f64,
            speed: rng.random_range(0.5..1.0),
            hold: rng.random_range(0..=manifest.video_length / 6),
            intensity: rng.random_range(0.7..1.0),
        }
    }

    pub fn difficulty(&self, video_length: usize) -> Difficulty {
        match Family::of_label(self.label) {
            Family::Static => Difficulty { temporal_extent: 1.0 / video_length as f64, feature_depth: FeatureDepth::Shallow },
            Family::Texture => Difficulty { temporal_extent: 1.0 / video_length as f64, feature_depth: FeatureDepth::Deep },
            Family::Motion => Difficulty {
                temporal_extent: (video_length - 2 * self.hold) as f64 / video_length as f64,
                feature_depth: FeatureDepth::Deep,
            },
        }
    }
}

/// Noise-free frames of a video.
pub fn render(recipe: &Recipe, manifest: &DatasetManifest) -> Vec<Vec<f64>> {
    let (c, h, w, len) = (manifest.channels, manifest.height, manifest.width, manifest.video_length);
    let mut blank = vec![BACKGROUND; c * h * w];
    match (Family::of_label(recipe.label), recipe.label) {
        (Family::Static, label) => {
            let side = (h.min(w) / 4).max(2);
            let y0 = (recipe.anchor.0 * (h - side) as f64) as usize;
            let x0 = (recipe.anchor.1 * (w - side) as f64) as usize;
            let plane = label % c;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    blank[(plane * h + y) * w + x] = recipe.intensity;
                }
            }
            vec![blank; len]
        }
        (Family::Texture, label) => {
            let amp = 0.15;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let bit = match label {
                            7 => x % 2,
                            8 => y % 2,
                            _ => (x + y) % 2,
                        };
                        blank[(ch * h + y) * w + x] = 0.5 + if bit == 1 { amp } else { -amp };
                    }
                }
            }
            vec![blank; len]
        }
        (Family::Motion, label) => {
            // render the "negative direction" member and mirror for the other
            let vertical_motion = matches!(label, 5 | 6);
            let axis = if vertical_motion { h } else { w } as f64;
            let mut frames: Vec<Vec<f64>> = (0..len)
                .map(|t| {
                    let mut f = blank.clone();
                    if t < recipe.hold || t >= len - recipe.hold {
                        return f;
                    }
                    let pos = wrap(recipe.start - recipe.speed * t as f64, axis);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let coord = if vertical_motion { y } else { x } as f64;
                                let mut d = libm::fabs(coord - pos);
                                d = d.min(axis - d);
                                let v = (1.0 - d / 1.5).max(0.0) * recipe.intensity;
                                let px = &mut f[(ch * h + y) * w + x];
                                *px = px.max(v);
                            }
                        }
                    }
                    f
                })
                .collect();
            if matches!(label, 4 | 6) {
                frames.reverse();
            }
            frames
        }
    }
}

/// `x mod m` in `[0, m)`.
fn wrap(x: f64, m: f64) -> f64 {
    let r = libm::fmod(x, m);
    if r < 0.0 {
        r + m
    } else {
        r
    }
}

fn video_rng(manifest: &DatasetManifest, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    rng.set_stream((split.stream_tag() << 48) | index as u64);
    rng
}

/// Video `index` of `split`. Labels cycle through the classes.
pub fn generate_video(manifest: &DatasetManifest, split: Split, index: usize) -> SyntheticVideo {
    let mut rng = video_rng(manifest, split, index);
    let label = index % manifest.num_classes;
    let recipe = Recipe::draw(label, manifest, &mut rng);
    let clean = render(&recipe, manifest);
    let noise = (manifest.noise > 0.0).then(|| Normal::new(0.0, manifest.noise).expect("valid noise"));
    let (c, h, w) = (manifest.channels, manifest.height, manifest.width);
    let frames = clean
        .into_iter()
        .map(|mut f| {
            if let Some(d) = &noise {
                f.iter_mut().for_each(|v| *v += d.sample(&mut rng));
            }
            Frame::from_values(c, h, w, &f)
        })
        .collect();
    SyntheticVideo { frames, label, difficulty: recipe.difficulty(manifest.video_length) }
}

pub fn generate_split(manifest: &DatasetManifest, split: Split) -> Vec<SyntheticVideo> {
    (0..manifest.count(split)).map(|i| generate_video(manifest, split, i)).collect()
}

pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    Ok(Dataset {
        manifest: manifest.clone(),
        train: generate_split(manifest, Split::Train),
        val: generate_split(manifest, Split::Val),
        test: generate_split(manifest, Split::Test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetManifest {
        DatasetManifest { counts: [20, 10, 10], video_length: 16, height: 16, width: 16, noise: 0.0, ..Default::default() }
    }

    #[test]
    fn motion_pair_mirrors() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (a, b) in [(3, 4), (5, 6)] {
            let r = Recipe::draw(a, &m, &mut rng);
            let left = render(&r, &m);
            let right = render(&Recipe { label: b, ..r }, &m);
            let len = left.len();
            for t in 0..len {
                assert_eq!(left[t], right[len - 1 - t]);
            }
            for t in 0..r.hold {
                assert_eq!(left[t], right[t]);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(DatasetManifest { height: 4, ..small() }.validate().is_err());
        assert!(DatasetManifest { num_classes: 11, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn pixels_in_unit_range_and_labels_valid() {
        let m = DatasetManifest { noise: 0.3, ..small() };
        let d = generate_dataset(&m).unwrap();
        for v in d.train.iter().chain(&d.val) {
            assert!(v.label < m.num_classes);
            for f in &v.frames {
                let t = f.to_tensor();
                assert!(t.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}

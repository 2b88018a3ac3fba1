//! On-disk formats: dataset container, model checkpoint and policy text.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use dyninfer_core::data::{Dataset, DatasetManifest, Difficulty, FeatureDepth, Frame, Split, SyntheticVideo};
use dyninfer_core::grid::{CheckpointGrid, RouteKind};
use dyninfer_core::model::Model;
use dyninfer_core::policy::{ExitPolicy, QSolution, Regime};
use dyninfer_core::temporal::ShiftSpec;
use dyninfer_core::tensor::{ConvBlockSpec, HeadSpec, Tensor};
use num_rational::Ratio;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::Network;

pub const DATASET_MAGIC: &[u8; 8] = b"DYNDATA\0";
pub const DATASET_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 8] = b"DYNMODEL";
pub const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated { what: self.what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format { what: self.what, msg: msg.into() }
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.bad(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_header(r: &mut Reader, magic: &[u8; 8], version: u32) -> Result<()> {
    if r.take(8).map_err(|_| Error::BadMagic { what: r.what })? != magic {
        return Err(Error::BadMagic { what: r.what });
    }
    let found = r.u32()? as u32;
    if found != version {
        return Err(Error::Version { what: r.what, found, expected: version });
    }
    Ok(())
}

// ---------------------------------------------------------------- dataset

fn write_manifest(w: &mut Writer, m: &DatasetManifest) {
    w.u64(m.seed);
    w.u32(m.num_classes);
    for c in m.counts {
        w.u64(c as u64);
    }
    w.u32(m.video_length);
    w.u32(m.channels);
    w.u32(m.height);
    w.u32(m.width);
    w.f64(m.noise);
}

fn read_manifest(r: &mut Reader) -> Result<DatasetManifest> {
    let seed = r.u64()?;
    let num_classes = r.u32()?;
    let mut counts = [0usize; 3];
    for c in counts.iter_mut() {
        *c = r.u64()? as usize;
    }
    let m = DatasetManifest {
        seed,
        num_classes,
        counts,
        video_length: r.u32()?,
        channels: r.u32()?,
        height: r.u32()?,
        width: r.u32()?,
        noise: r.f64()?,
    };
    m.validate().map_err(|e| r.bad(e.to_string()))?;
    Ok(m)
}

const MANIFEST_BYTES: usize = 8 + 4 + 3 * 8 + 4 * 4 + 8;

/// Serialises a dataset: magic, version, manifest, then per video the label,
/// difficulty record and frames as 8-bit intensity levels (`value = level / 255`).
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let m = &ds.manifest;
    let per_video = 4 + 8 + 1 + m.video_length * m.frame_len();
    let mut w = Writer(Vec::with_capacity(12 + MANIFEST_BYTES + (m.counts.iter().sum::<usize>()) * per_video));
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_VERSION as usize);
    write_manifest(&mut w, m);
    for split in Split::ALL {
        for v in ds.split(split) {
            w.u32(v.label);
            w.f64(v.difficulty.temporal_extent);
            w.u8(match v.difficulty.feature_depth {
                FeatureDepth::Shallow => 0,
                FeatureDepth::Deep => 1,
            });
            for f in &v.frames {
                w.0.extend_from_slice(&f.levels);
            }
        }
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    check_header(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
    let manifest = read_manifest(&mut r)?;
    let (c, h, w) = (manifest.channels, manifest.height, manifest.width);
    let mut splits: Vec<Vec<SyntheticVideo>> = Vec::with_capacity(3);
    for split in Split::ALL {
        let mut videos = Vec::with_capacity(manifest.count(split));
        for _ in 0..manifest.count(split) {
            let label = r.u32()?;
            if label >= manifest.num_classes {
                return Err(r.bad(format!("label {label} out of range")));
            }
            let temporal_extent = r.f64()?;
            let feature_depth = match r.u8()? {
                0 => FeatureDepth::Shallow,
                1 => FeatureDepth::Deep,
                d => return Err(r.bad(format!("unknown feature depth tag {d}"))),
            };
            let frames = (0..manifest.video_length)
                .map(|_| Ok(Frame { channels: c, height: h, width: w, levels: r.take(c * h * w)?.to_vec() }))
                .collect::<Result<Vec<_>>>()?;
            videos.push(SyntheticVideo { frames, label, difficulty: Difficulty { temporal_extent, feature_depth } });
        }
        splits.push(videos);
    }
    r.finish()?;
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { manifest, train, val, test })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads only the header, leaving the frames on disk.
pub fn read_manifest_only(path: &Path) -> Result<DatasetManifest> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 12 + MANIFEST_BYTES];
    let n = read_up_to(&mut f, &mut head).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&head[..n], "dataset");
    check_header(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
    read_manifest(&mut r)
}

fn read_up_to(f: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Manifest as `key = value` lines for inspection.
pub fn manifest_text(m: &DatasetManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}\nnum_classes = {}", m.seed, m.num_classes);
    for split in Split::ALL {
        let _ = writeln!(s, "{} = {}", split.name(), m.count(split));
    }
    let _ = writeln!(s, "video_length = {}\nchannels = {}\nheight = {}\nwidth = {}", m.video_length, m.channels, m.height, m.width);
    let _ = writeln!(s, "noise = {:?}", m.noise);
    s
}

// ---------------------------------------------------------------- model

fn route_tag(r: RouteKind) -> u8 {
    match r {
        RouteKind::DepthWise => 0,
        RouteKind::InputWise => 1,
        RouteKind::Joint => 2,
    }
}

/// Spec table: everything that determines the network's structure.
fn write_spec_table(w: &mut Writer, g: &CheckpointGrid, permute: bool) {
    w.u8(route_tag(g.route_kind));
    w.u8(permute as u8);
    w.u32(g.n_sets);
    w.u32(g.set_size);
    w.u32(g.input.0);
    w.u32(g.input.1);
    w.u32(g.input.2);
    w.u32(g.block_specs.len());
    for b in &g.block_specs {
        for v in [b.in_channels, b.out_channels, b.kernel.0, b.kernel.1, b.stride, b.padding] {
            w.u32(v);
        }
        w.u8(b.has_relu as u8);
    }
    w.u32(*g.shift.fraction.numer());
    w.u32(*g.shift.fraction.denom());
    w.u32(g.shift.enabled_blocks.len());
    for &m in &g.shift.enabled_blocks {
        w.u32(m);
    }
    w.u32(g.checkpoints.len());
    for (&(i, j), h) in g.checkpoints.iter().zip(&g.heads) {
        for v in [i, j, h.feature_dim, h.num_classes] {
            w.u32(v);
        }
    }
}

fn read_spec_table(r: &mut Reader) -> Result<(CheckpointGrid, bool)> {
    let route_kind = match r.u8()? {
        0 => RouteKind::DepthWise,
        1 => RouteKind::InputWise,
        2 => RouteKind::Joint,
        t => return Err(r.bad(format!("unknown route tag {t}"))),
    };
    let permute = r.u8()? != 0;
    let n_sets = r.u32()?;
    let set_size = r.u32()?;
    let input = (r.u32()?, r.u32()?, r.u32()?);
    let n_blocks = r.u32()?;
    let mut block_specs = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let (ci, co, kh, kw, s, p) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let has_relu = r.u8()? != 0;
        block_specs.push(ConvBlockSpec { in_channels: ci, out_channels: co, kernel: (kh, kw), stride: s, padding: p, has_relu });
    }
    let (num, den) = (r.u32()?, r.u32()?);
    if den == 0 {
        return Err(r.bad("zero shift denominator"));
    }
    let n_enabled = r.u32()?;
    let enabled_blocks = (0..n_enabled).map(|_| r.u32()).collect::<Result<_>>()?;
    let shift = ShiftSpec { fraction: Ratio::new(num, den), enabled_blocks };
    let k = r.u32()?;
    let mut checkpoints = Vec::with_capacity(k.min(1024));
    let mut heads = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        checkpoints.push((r.u32()?, r.u32()?));
        heads.push(HeadSpec { feature_dim: r.u32()?, num_classes: r.u32()? });
    }
    let grid = CheckpointGrid { n_sets, set_size, input, block_specs, shift, checkpoints, heads, route_kind };
    grid.validate().map_err(|e| r.bad(e.to_string()))?;
    Ok((grid, permute))
}

/// Short hex digest of the spec table; ties policies to the network they
/// were calibrated for.
pub fn grid_hash(grid: &CheckpointGrid, permute: bool) -> String {
    let mut w = Writer(Vec::new());
    write_spec_table(&mut w, grid, permute);
    let digest = Sha256::digest(&w.0);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Magic, version, spec table, parameter count, then every parameter as a
/// little-endian `f64` in model order.
pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION as usize);
    write_spec_table(&mut w, &net.model.grid, net.permute);
    w.u64(net.model.param_count() as u64);
    for p in &net.model.params {
        for &v in p.data() {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader::new(bytes, "model");
    check_header(&mut r, MODEL_MAGIC, MODEL_VERSION)?;
    let (grid, permute) = read_spec_table(&mut r)?;
    let count = r.u64()? as usize;
    let shapes = Model::param_shapes(&grid);
    let expect: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if count != expect {
        return Err(r.bad(format!("{count} parameters, spec table implies {expect}")));
    }
    let params = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::new(shape, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Network { model: Model::from_params(grid, params)?, permute })
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_model(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

// ---------------------------------------------------------------- policy

/// A calibrated policy together with what it was calibrated for.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFile {
    pub grid_hash: String,
    pub policy: ExitPolicy,
    pub regime: Regime,
    pub calibrate_split: Split,
}

impl PolicyFile {
    pub fn new(grid_hash: String, policy: ExitPolicy, solution: QSolution, calibrate_split: Split) -> Self {
        Self { grid_hash, policy, regime: solution.regime, calibrate_split }
    }
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::ExitProbability => "exit-probability",
        Regime::Extended => "extended",
        Regime::Saturated => "saturated",
    }
}

fn parse_regime(s: &str) -> Option<Regime> {
    [Regime::ExitProbability, Regime::Extended, Regime::Saturated].into_iter().find(|r| regime_name(*r) == s)
}

/// Header lines `key=value`, then a `k,G_k,T_k` table. Floats use the
/// shortest representation that parses back to the same bits.
pub fn policy_text(p: &PolicyFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "grid_hash={}", p.grid_hash);
    let _ = writeln!(s, "Q={:?}", p.policy.budget);
    let _ = writeln!(s, "q={:?}", p.policy.q);
    let _ = writeln!(s, "regime={}", regime_name(p.regime));
    let _ = writeln!(s, "calibrate_split={}", p.calibrate_split.name());
    let _ = writeln!(s, "k,G_k,T_k");
    for (k, (g, t)) in p.policy.costs.iter().zip(&p.policy.thresholds).enumerate() {
        let _ = writeln!(s, "{k},{g},{t:?}");
    }
    s
}

pub fn parse_policy(text: &str) -> Result<PolicyFile> {
    let bad = |msg: String| Error::Format { what: "policy", msg };
    let mut header = std::collections::BTreeMap::new();
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    for line in lines.by_ref() {
        if line == "k,G_k,T_k" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("unexpected line {line:?}")))?;
        header.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| header.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
    let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
    let mut costs = Vec::new();
    let mut thresholds = Vec::new();
    for (idx, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 || f[0].parse::<usize>().ok() != Some(idx) {
            return Err(bad(format!("bad row {line:?}")));
        }
        costs.push(f[1].parse::<u64>().map_err(|_| bad(format!("bad G_k in {line:?}")))?);
        thresholds.push(f[2].parse::<f64>().map_err(|_| bad(format!("bad T_k in {line:?}")))?);
    }
    if costs.is_empty() {
        return Err(bad("no checkpoint rows".into()));
    }
    let regime = parse_regime(&get("regime")?).ok_or_else(|| bad("bad regime".into()))?;
    let calibrate_split = Split::parse(&get("calibrate_split")?).ok_or_else(|| bad("bad calibrate_split".into()))?;
    Ok(PolicyFile {
        grid_hash: get("grid_hash")?,
        policy: ExitPolicy { thresholds, costs, budget: float("Q")?, q: float("q")? },
        regime,
        calibrate_split,
    })
}

pub fn save_policy(path: &Path, p: &PolicyFile) -> Result<()> {
    fs::write(path, policy_text(p)).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<PolicyFile> {
    parse_policy(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

//! Plain-text run configuration with `[data]`, `[grid]`, `[train]` and
//! `[policy]` sections of `key = value` lines.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use dyninfer_core::data::{DatasetManifest, Split};
use dyninfer_core::grid::{build_grid, default_blocks, CheckpointGrid, RouteKind};
use dyninfer_core::tensor::SgdConfig;
use num_rational::Ratio;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub route: RouteKind,
    pub permute: bool,
    pub shift: bool,
    pub shift_fraction: Ratio<usize>,
    pub set_size: usize,
    /// Explicit `(frame-set, block)` checkpoints; route defaults when empty.
    pub checkpoints: Vec<(usize, usize)>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            route: RouteKind::Joint,
            permute: true,
            shift: true,
            shift_fraction: Ratio::new(1, 8),
            set_size: 1,
            checkpoints: Vec::new(),
        }
    }
}

impl GridConfig {
    pub fn build(&self, data: &DatasetManifest) -> Result<CheckpointGrid> {
        let fraction = if self.shift { self.shift_fraction } else { Ratio::from_integer(0) };
        let cps = (!self.checkpoints.is_empty()).then(|| self.checkpoints.clone());
        Ok(build_grid(
            self.route,
            (data.channels, data.height, data.width),
            self.set_size,
            default_blocks(data.channels),
            cps,
            fraction,
            data.num_classes,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Parallel per-sample gradients. Results do not depend on this flag.
    pub parallel: bool,
    /// Per-checkpoint loss weights; all ones when empty.
    pub loss_weights: Vec<f64>,
    /// Epochs after which the learning rate drops tenfold.
    pub lr_decay_epochs: Vec<usize>,
    /// Rescale the batch gradient to this global L2 norm when it is larger;
    /// 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            sgd: SgdConfig { lr: 0.003, ..SgdConfig::default() },
            seed: 1,
            parallel: false,
            loss_weights: Vec::new(),
            lr_decay_epochs: vec![10],
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub calibrate_split: Split,
    pub eval_split: Split,
    /// Explicit budgets in FLOPs; `budget_count` evenly spaced ones otherwise.
    pub budgets: Vec<f64>,
    pub budget_count: usize,
    /// Largest accuracy drop, in points, allowed when selecting `Q*`.
    pub epsilon: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { calibrate_split: Split::Val, eval_split: Split::Test, budgets: Vec::new(), budget_count: 25, epsilon: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub data: DatasetManifest,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("invalid value {v:?} for {key}")))
}

pub fn parse_switch(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn switch(line: usize, key: &str, v: &str) -> Result<bool> {
    parse_switch(v).ok_or_else(|| bad(line, format!("{key} must be on or off, got {v:?}")))
}

fn split(line: usize, key: &str, v: &str) -> Result<Split> {
    Split::parse(v).ok_or_else(|| bad(line, format!("{key} must be train, val or test, got {v:?}")))
}

fn ratio(line: usize, key: &str, v: &str) -> Result<Ratio<usize>> {
    let (n, d) = v.split_once('/').unwrap_or((v, "1"));
    let (n, d): (usize, usize) = (num(line, key, n.trim())?, num(line, key, d.trim())?);
    if d == 0 {
        return Err(bad(line, format!("{key} has a zero denominator")));
    }
    Ok(Ratio::new(n, d))
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(line, key, s)).collect()
}

/// `i:j` pairs separated by commas.
pub fn parse_checkpoints(v: &str) -> Option<Vec<(usize, usize)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (i, j) = s.split_once(':')?;
            Some((i.trim().parse().ok()?, j.trim().parse().ok()?))
        })
        .collect()
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    fn set(&mut self, section: &str, key: &str, v: &str, line: usize) -> Result<()> {
        let (d, g, t, p) = (&mut self.data, &mut self.grid, &mut self.train, &mut self.policy);
        match (section, key) {
            ("data", "seed") => d.seed = num(line, key, v)?,
            ("data", "num_classes") => d.num_classes = num(line, key, v)?,
            ("data", "train") => d.counts[0] = num(line, key, v)?,
            ("data", "val") => d.counts[1] = num(line, key, v)?,
            ("data", "test") => d.counts[2] = num(line, key, v)?,
            ("data", "video_length") => d.video_length = num(line, key, v)?,
            ("data", "channels") => d.channels = num(line, key, v)?,
            ("data", "height") => d.height = num(line, key, v)?,
            ("data", "width") => d.width = num(line, key, v)?,
            ("data", "noise") => d.noise = num(line, key, v)?,
            ("grid", "route") => {
                g.route = RouteKind::parse(v).ok_or_else(|| bad(line, format!("unknown route {v:?}")))?
            }
            ("grid", "permute") => g.permute = switch(line, key, v)?,
            ("grid", "shift") => g.shift = switch(line, key, v)?,
            ("grid", "shift_fraction") => g.shift_fraction = ratio(line, key, v)?,
            ("grid", "set_size") => g.set_size = num(line, key, v)?,
            ("grid", "checkpoints") => {
                g.checkpoints = parse_checkpoints(v).ok_or_else(|| bad(line, "checkpoints must look like 0:1,1:2"))?
            }
            ("train", "epochs") => t.epochs = num(line, key, v)?,
            ("train", "batch_size") => t.batch_size = num(line, key, v)?,
            ("train", "lr") => t.sgd.lr = num(line, key, v)?,
            ("train", "momentum") => t.sgd.momentum = num(line, key, v)?,
            ("train", "weight_decay") => t.sgd.weight_decay = num(line, key, v)?,
            ("train", "seed") => t.seed = num(line, key, v)?,
            ("train", "parallel") => t.parallel = switch(line, key, v)?,
            ("train", "loss_weights") => t.loss_weights = list(line, key, v)?,
            ("train", "lr_decay_epochs") => t.lr_decay_epochs = list(line, key, v)?,
            ("train", "grad_clip") => t.grad_clip = num(line, key, v)?,
            ("policy", "calibrate_split") => p.calibrate_split = split(line, key, v)?,
            ("policy", "eval_split") => p.eval_split = split(line, key, v)?,
            ("policy", "budgets") => p.budgets = list(line, key, v)?,
            ("policy", "budget_count") => p.budget_count = num(line, key, v)?,
            ("policy", "epsilon") => p.epsilon = num(line, key, v)?,
            _ => return Err(bad(line, format!("unknown key {key:?} in [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if self.policy.calibrate_split == self.policy.eval_split {
            return Err(Error::Invalid(format!(
                "calibration and evaluation both use the {} split",
                self.policy.calibrate_split.name()
            )));
        }
        if !(self.train.grad_clip >= 0.0) {
            return Err(Error::Invalid("grad_clip must be non-negative".into()));
        }
        if !(self.policy.epsilon >= 0.0) {
            return Err(Error::Invalid("epsilon must be non-negative".into()));
        }
        self.grid.build(&self.data)?;
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (d, g, t, p) = (&self.data, &self.grid, &self.train, &self.policy);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[data]\nseed = {}\nnum_classes = {}", d.seed, d.num_classes);
        let _ = writeln!(s, "train = {}\nval = {}\ntest = {}", d.counts[0], d.counts[1], d.counts[2]);
        let _ = writeln!(s, "video_length = {}\nchannels = {}\nheight = {}\nwidth = {}", d.video_length, d.channels, d.height, d.width);
        let _ = writeln!(s, "noise = {:?}\n", d.noise);
        let _ = writeln!(s, "[grid]\nroute = {}", g.route.name());
        let _ = writeln!(s, "permute = {}\nshift = {}", on_off(g.permute), on_off(g.shift));
        let _ = writeln!(s, "shift_fraction = {}/{}", g.shift_fraction.numer(), g.shift_fraction.denom());
        let _ = writeln!(s, "set_size = {}", g.set_size);
        if !g.checkpoints.is_empty() {
            let cps: Vec<String> = g.checkpoints.iter().map(|(i, j)| format!("{i}:{j}")).collect();
            let _ = writeln!(s, "checkpoints = {}", cps.join(","));
        }
        let _ = writeln!(s, "\n[train]\nepochs = {}\nbatch_size = {}", t.epochs, t.batch_size);
        let _ = writeln!(s, "lr = {:?}\nmomentum = {:?}\nweight_decay = {:?}", t.sgd.lr, t.sgd.momentum, t.sgd.weight_decay);
        let _ = writeln!(s, "seed = {}\nparallel = {}", t.seed, on_off(t.parallel));
        if !t.loss_weights.is_empty() {
            let _ = writeln!(s, "loss_weights = {}", join(&t.loss_weights));
        }
        let decay: Vec<String> = t.lr_decay_epochs.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "lr_decay_epochs = {}", decay.join(","));
        let _ = writeln!(s, "grad_clip = {:?}", t.grad_clip);
        let _ = writeln!(s, "\n[policy]\ncalibrate_split = {}\neval_split = {}", p.calibrate_split.name(), p.eval_split.name());
        if !p.budgets.is_empty() {
            let _ = writeln!(s, "budgets = {}", join(&p.budgets));
        }
        let _ = writeln!(s, "budget_count = {}\nepsilon = {:?}", p.budget_count, p.epsilon);
        s
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| bad(line, "unterminated section header"))?.trim();
                if !["data", "grid", "train", "policy"].contains(&name) {
                    return Err(bad(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| bad(line, "expected key = value"))?;
            let sec = section.as_deref().ok_or_else(|| bad(line, "key outside of a section"))?;
            cfg.set(sec, key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c: Config = "".parse().unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.train.sgd.lr, 0.003);
        assert_eq!(c.train.sgd.momentum, 0.9);
        assert_eq!(c.train.sgd.weight_decay, 5e-4);
        assert_eq!(c.policy.epsilon, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn sections_and_comments() {
        let text = "# run\n[data]\nseed = 7\ntrain=40 # small\n[grid]\nroute = depth\nshift = off\ncheckpoints = 7:2, 7:4\n[policy]\nbudgets = 1e5, 2e5\n";
        let c: Config = text.parse().unwrap();
        assert_eq!(c.data.seed, 7);
        assert_eq!(c.data.counts[0], 40);
        assert_eq!(c.grid.route, RouteKind::DepthWise);
        assert!(!c.grid.shift);
        assert_eq!(c.grid.checkpoints, vec![(7, 2), (7, 4)]);
        assert_eq!(c.policy.budgets, vec![1e5, 2e5]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = "[data]\nseed = x\n".parse::<Config>().unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        assert!("[nope]\n".parse::<Config>().is_err());
        assert!("seed = 1\n".parse::<Config>().is_err());
        assert!("[grid]\nroute = sideways\n".parse::<Config>().is_err());
        assert!("[grid]\nbogus = 1\n".parse::<Config>().is_err());
    }

    #[test]
    fn text_form_round_trips() {
        let mut c = Config::default();
        c.grid.checkpoints = vec![(0, 4), (7, 4)];
        c.grid.route = RouteKind::Joint;
        c.train.loss_weights = vec![0.5, 1.0];
        c.policy.budgets = vec![123.5, 1e6];
        c.data.noise = 0.1;
        c.train.grad_clip = 2.5;
        let back: Config = c.to_text().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn shared_calibration_and_evaluation_split_is_rejected() {
        let c: Config = "[policy]\ncalibrate_split = test\n".parse().unwrap();
        assert!(c.validate().is_err());
    }
}

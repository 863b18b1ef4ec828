//! The 1D synthetic regression task `y = h(x) + δ`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::io::fmt_f64;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sign of the linear term of `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearSign {
    /// `−5x`
    #[default]
    Minus,
    /// `+5x`
    Plus,
}

/// `h(x) = 1.5x³ + x² ∓ 5x + 2 sin x − 3`.
pub fn target(x: f64, sign: LinearSign) -> f64 {
    let lin = match sign {
        LinearSign::Minus => -5.0 * x,
        LinearSign::Plus => 5.0 * x,
    };
    1.5 * x * x * x + x * x + lin + 2.0 * x.sin() - 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub x_min: f64,
    pub x_max: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub sign: LinearSign,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            x_min: -1.5,
            x_max: 1.5,
            noise_std: 0.05,
            n_train: 4096,
            n_valid: 1000,
            sign: LinearSign::Minus,
        }
    }
}

impl DataConfig {
    pub fn with_seed(seed: u64) -> Self {
        DataConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            out.push(format!(
                "{prefix}.x_min must be below {prefix}.x_max ({} vs {})",
                self.x_min, self.x_max
            ));
        }
        if !(self.noise_std >= 0.0) {
            out.push(format!("{prefix}.noise_std must be non-negative"));
        }
        if self.n_train == 0 {
            out.push(format!("{prefix}.n_train must be positive"));
        }
        if self.n_valid == 0 {
            out.push(format!("{prefix}.n_valid must be positive"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub valid_x: Vec<f64>,
    pub valid_y: Vec<f64>,
}

/// Draws `n_train + n_valid` pairs with `x ~ U[x_min, x_max]`; the first
/// `n_train` form the training split.
pub fn gen_synthetic(cfg: &DataConfig) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_train + cfg.n_valid;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(cfg.x_min..cfg.x_max);
        let noise: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(target(x, cfg.sign) + cfg.noise_std * noise);
    }
    let valid_x = xs.split_off(cfg.n_train);
    let valid_y = ys.split_off(cfg.n_train);
    SyntheticDataset {
        train_x: xs,
        train_y: ys,
        valid_x,
        valid_y,
    }
}

/// Column matrix `[n, 1]` from scalars.
pub fn column(values: &[f64]) -> Tensor {
    Tensor::matrix(values.len(), 1, values.to_vec()).expect("column shape")
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.train_x.len() + self.valid_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,split\n");
        for (split, xs, ys) in [
            ("train", &self.train_x, &self.train_y),
            ("valid", &self.valid_x, &self.valid_y),
        ] {
            for (x, y) in xs.iter().zip(ys.iter()) {
                writeln!(out, "{},{},{}", fmt_f64(*x), fmt_f64(*y), split).expect("write to string");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<SyntheticDataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("x,y,split") {
            return Err(Error::format(path, "expected header `x,y,split`"));
        }
        let mut ds = SyntheticDataset {
            train_x: Vec::new(),
            train_y: Vec::new(),
            valid_x: Vec::new(),
            valid_y: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad("expected three fields"));
            }
            let x: f64 = fields[0].parse().map_err(|_| bad("x is not a number"))?;
            let y: f64 = fields[1].parse().map_err(|_| bad("y is not a number"))?;
            match fields[2].trim() {
                "train" => {
                    ds.train_x.push(x);
                    ds.train_y.push(y);
                }
                "valid" => {
                    ds.valid_x.push(x);
                    ds.valid_y.push(y);
                }
                other => return Err(bad(&format!("unknown split `{other}`"))),
            }
        }
        Ok(ds)
    }
}

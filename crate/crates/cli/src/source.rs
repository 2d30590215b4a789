//! `--data` argument: an MNIST directory or a synthetic spec.

use std::path::PathBuf;

use lorae::data::{self, Dataset, Split};
use lorae::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist(PathBuf),
    Synth {
        n: usize,
        d: usize,
        r: usize,
        noise: f64,
        seed: u64,
    },
}

impl DataSource {
    /// `synth:n=512,d=64,r=4,noise=0.01,seed=0` or a directory path.
    pub fn parse(spec: &str) -> std::result::Result<Self, String> {
        let Some(rest) = spec.strip_prefix("synth:") else {
            let path = PathBuf::from(spec);
            if !path.is_dir() {
                return Err(format!("--data: '{spec}' is not a directory"));
            }
            return Ok(DataSource::Mnist(path));
        };
        let (mut n, mut d, mut r, mut noise, mut seed) = (512, 64, 4, 0.0, 0);
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("--data: expected key=value, got '{part}'"))?;
            let bad = |e: &dyn std::fmt::Display| format!("--data: bad value for {key}: {e}");
            match key {
                "n" => n = value.parse().map_err(|e| bad(&e))?,
                "d" => d = value.parse().map_err(|e| bad(&e))?,
                "r" => r = value.parse().map_err(|e| bad(&e))?,
                "noise" => noise = value.parse().map_err(|e| bad(&e))?,
                "seed" => seed = value.parse().map_err(|e| bad(&e))?,
                _ => return Err(format!("--data: unknown synth key '{key}'")),
            }
        }
        Ok(DataSource::Synth { n, d, r, noise, seed })
    }

    /// Train split truncated to `train_size`, or the test split. MNIST images
    /// are resized to 32×32. Synthetic data draws `n + max(n/4, 1)` rows from
    /// one subspace; the first `n` are the train split, the rest the test split.
    pub fn load(&self, split: Split, train_size: usize) -> Result<Dataset> {
        match self {
            DataSource::Mnist(dir) => {
                let ds = data::load_mnist_dir(dir, split)?;
                let ds = match split {
                    Split::Train => ds.first(train_size),
                    Split::Test => ds,
                };
                if ds.height == 32 && ds.width == 32 {
                    Ok(ds)
                } else {
                    data::resize_to_32(&ds)
                }
            }
            &DataSource::Synth { n, d, r, noise, seed } => {
                let extra = (n / 4).max(1);
                let all = data::synth_lowrank(n + extra, d, r, noise, seed)?;
                let idx: Vec<usize> = match split {
                    Split::Train => (0..n.min(train_size)).collect(),
                    Split::Test => (n..n + extra).collect(),
                };
                Ok(all.select(&idx))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_synth_spec() {
        let s = DataSource::parse("synth:n=10,d=4,r=2,noise=0.5,seed=7").unwrap();
        assert_eq!(
            s,
            DataSource::Synth {
                n: 10,
                d: 4,
                r: 2,
                noise: 0.5,
                seed: 7
            }
        );
        assert!(DataSource::parse("synth:q=1").is_err());
        assert!(DataSource::parse("/definitely/not/here").is_err());
    }
}

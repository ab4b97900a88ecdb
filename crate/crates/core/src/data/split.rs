//! Seeded 8:1:1 train/val/test partition and its manifest file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_SPLIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Tags for `n` items in input order: shuffle indices with `seed`, then the
/// first 80% are train and the remainder is halved into val and test.
pub fn split_tags(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < MIN_SPLIT_SAMPLES {
        return Err(Error::Config(format!("need at least {MIN_SPLIT_SAMPLES} samples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let mut tags = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        tags[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(tags)
}

pub fn manifest_path(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("split_{seed}.txt"))
}

pub fn write_manifest(path: &Path, stems: &[String], tags: &[Split]) -> Result<()> {
    let body: String = stems.iter().zip(tags).map(|(s, t)| format!("{s}\t{t}\n")).collect();
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, Split)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (stem, tag) = l
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("{}: malformed manifest line {l:?}", path.display())))?;
            Ok((stem.to_string(), tag.trim().parse()?))
        })
        .collect()
}

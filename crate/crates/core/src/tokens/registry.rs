//! Per-receiver record of spent token keys, partitioned by epoch.
//!
//! With a directory attached, each epoch is an append-only file
//! `spent-<epoch>.log` holding one `<hex pk_T> <first-seen secs>` line per
//! accepted token. Pruning an epoch deletes its file.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Default)]
pub struct SpendRegistry {
    seen: BTreeMap<u64, HashMap<[u8; 32], u64>>,
    dir: Option<PathBuf>,
}

impl SpendRegistry {
    pub fn in_memory() -> Self {
        SpendRegistry::default()
    }

    /// Opens (or creates) a persistent registry under `dir`.
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut seen: BTreeMap<u64, HashMap<[u8; 32], u64>> = BTreeMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(epoch) = epoch_of(&path) else { continue };
            let bucket = seen.entry(epoch).or_default();
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                let mut parts = line.split_whitespace();
                let (Some(pk), Some(ts)) = (parts.next(), parts.next()) else { continue };
                let (Ok(pk), Ok(ts)) = (hex::decode(pk), ts.parse::<u64>()) else { continue };
                if let Ok(pk) = <[u8; 32]>::try_from(pk.as_slice()) {
                    bucket.entry(pk).or_insert(ts);
                }
            }
        }
        Ok(SpendRegistry { seen, dir: Some(dir) })
    }

    pub fn contains(&self, epoch: u64, pk: &[u8; 32]) -> bool {
        self.seen.get(&epoch).is_some_and(|b| b.contains_key(pk))
    }

    /// Records `pk` unless already present; returns whether it was new.
    pub fn insert(&mut self, epoch: u64, pk: [u8; 32], now: u64) -> io::Result<bool> {
        let bucket = self.seen.entry(epoch).or_default();
        if bucket.contains_key(&pk) {
            return Ok(false);
        }
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("spent-{epoch}.log")))?;
            writeln!(f, "{} {}", hex::encode(pk), now)?;
            f.sync_data()?;
        }
        bucket.insert(pk, now);
        Ok(true)
    }

    /// Drops every epoch older than `oldest_kept`.
    pub fn prune_before(&mut self, oldest_kept: u64) -> io::Result<()> {
        let stale: Vec<u64> = self.seen.range(..oldest_kept).map(|(e, _)| *e).collect();
        for epoch in stale {
            self.seen.remove(&epoch);
            if let Some(dir) = &self.dir {
                match fs::remove_file(dir.join(format!("spent-{epoch}.log"))) {
                    Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> impl Iterator<Item = u64> + '_ {
        self.seen.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.seen.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn epoch_of(path: &Path) -> Option<u64> {
    path.file_name()?
        .to_str()?
        .strip_prefix("spent-")?
        .strip_suffix(".log")?
        .parse()
        .ok()
}

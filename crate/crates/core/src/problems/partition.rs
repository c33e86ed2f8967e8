//! Assignment of pooled samples to clients.
//!
//! IID: shuffle, then split into near-equal contiguous blocks. Non-IID: sort
//! by label, cut into `m * k` equal shards (the last absorbs the remainder),
//! shuffle the shard order and deal `k` shards to each client.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ProblemError;
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionMode {
    Iid,
    NonIid { shards_per_client: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub mode: PartitionMode,
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// One line per client: `<client>: i0 i1 ...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, idx) in self.clients.iter().enumerate() {
            let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "{c}: {}", list.join(" "));
        }
        out
    }

    pub fn parse_text(text: &str, mode: PartitionMode) -> Result<Self, ProblemError> {
        let mut clients = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (head, rest) = line
                .split_once(':')
                .ok_or_else(|| ProblemError::InvalidConfig(format!("partition line {}: missing ':'", lineno + 1)))?;
            let c: usize = head
                .trim()
                .parse()
                .map_err(|e| ProblemError::InvalidConfig(format!("partition line {}: {e}", lineno + 1)))?;
            if c != clients.len() {
                return Err(ProblemError::InvalidConfig(format!("partition line {}: clients out of order", lineno + 1)));
            }
            let idx = rest
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ProblemError::InvalidConfig(format!("partition line {}: {e}", lineno + 1)))?;
            clients.push(idx);
        }
        Ok(Partition { mode, clients })
    }
}

/// Splits sample indices `0..labels.len()` across `m` clients.
pub fn partition_indices(labels: &[usize], m: usize, mode: PartitionMode, seed: u64) -> Result<Partition, ProblemError> {
    let n = labels.len();
    if m == 0 || n < m {
        return Err(ProblemError::InvalidConfig(format!("need at least one sample per client: n = {n}, m = {m}")));
    }
    let mut rng = StreamKey::new(seed).purpose(Purpose::Partition).rng();
    let clients = match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (base, extra) = (n / m, n % m);
            let mut out = Vec::with_capacity(m);
            let mut start = 0;
            for c in 0..m {
                let len = base + usize::from(c < extra);
                out.push(idx[start..start + len].to_vec());
                start += len;
            }
            out
        }
        PartitionMode::NonIid { shards_per_client: k } => {
            let shards = m * k;
            if k == 0 || shards > n {
                return Err(ProblemError::InfeasibleShards { n, shards, clients: m, per_client: k });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| labels[i]);
            let size = n / shards;
            let mut pieces: Vec<&[usize]> = (0..shards)
                .map(|s| {
                    let end = if s + 1 == shards { n } else { (s + 1) * size };
                    &idx[s * size..end]
                })
                .collect();
            pieces.shuffle(&mut rng);
            pieces.chunks(k).map(|group| group.concat()).collect()
        }
    };
    Ok(Partition { mode, clients })
}

//! Label-skewed client shards.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::rng::{derive, rng_for, stream, SimRng};

const MAX_ATTEMPTS: u64 = 100;

/// Sample indices owned by one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }
}

/// Split sample indices over clients, class by class, with proportions drawn
/// from `Dir(rho)`.
///
/// If a draw leaves a client empty, it is redrawn from a fresh sub-seed up to
/// 100 times; after that, empty clients take one sample each from the largest
/// shard.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    rho: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::contract("partition needs at least one client"));
    }
    if labels.len() < n_clients {
        return Err(Error::contract(format!(
            "{} samples cannot give {n_clients} clients one each",
            labels.len()
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::contract(format!(
            "Dirichlet concentration must be positive, got {rho}"
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let gamma = Gamma::new(rho, 1.0).map_err(|e| Error::contract(e.to_string()))?;

    let mut shards = Vec::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_for(derive(seed, attempt, 0), stream::PARTITION);
        shards = draw(&by_class, n_clients, &gamma, &mut rng);
        if shards.iter().all(|s| !s.is_empty()) {
            break;
        }
    }
    fill_empty(&mut shards);

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard { client_id, indices }
        })
        .collect())
}

fn draw(
    by_class: &[Vec<usize>],
    n: usize,
    gamma: &Gamma<f64>,
    rng: &mut SimRng,
) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); n];
    for members in by_class {
        if members.is_empty() {
            continue;
        }
        let mut members = members.clone();
        members.shuffle(rng);
        let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 && total.is_finite() {
            p.iter_mut().for_each(|x| *x /= total);
        } else {
            // every gamma draw underflowed; degenerate to one owner
            let owner = rng.random_range(0..n);
            p = vec![0.0; n];
            p[owner] = 1.0;
        }
        let m = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, &pc) in p.iter().enumerate() {
            cum += pc;
            let end = if client + 1 == n {
                m
            } else {
                ((cum * m as f64).round() as usize).min(m)
            };
            let end = end.max(start);
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    shards
}

fn fill_empty(shards: &mut [Vec<usize>]) {
    for i in 0..shards.len() {
        if !shards[i].is_empty() {
            continue;
        }
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        let moved = shards[donor]
            .pop()
            .expect("donor holds at least two samples");
        shards[i].push(moved);
    }
}

/// Shannon entropy (nats) of the label histogram of one shard.
pub fn label_entropy(labels: &[usize], shard: &ClientShard) -> f64 {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_classes];
    for &i in &shard.indices {
        counts[labels[i]] += 1;
    }
    let n = shard.sample_count() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

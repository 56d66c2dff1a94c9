//! Random removal of relations and microblogs for sparsity experiments.

use super::{NetworkPair, SocialNetwork};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Returns a copy of `net` with `floor(remove_relations * |E|)` undirected
/// edges and `floor(remove_microblogs * total)` microblogs removed uniformly
/// at random.
pub fn apply_sparsity(
    net: &SocialNetwork,
    remove_relations: f64,
    remove_microblogs: f64,
    seed: u64,
) -> Result<SocialNetwork> {
    for (name, r) in [("relation", remove_relations), ("microblog", remove_microblogs)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("{name} removal fraction {r} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut edges = net.edges();
    let drop_edges = (remove_relations * edges.len() as f64).floor() as usize;
    edges.shuffle(&mut rng);
    let kept_edges = &edges[drop_edges..];

    let mut slots: Vec<(usize, usize)> =
        net.users().iter().enumerate().flat_map(|(u, p)| (0..p.microblogs.len()).map(move |m| (u, m))).collect();
    let drop_blogs = (remove_microblogs * slots.len() as f64).floor() as usize;
    slots.shuffle(&mut rng);
    let removed: HashSet<(usize, usize)> = slots[..drop_blogs].iter().copied().collect();

    let users = net
        .users()
        .iter()
        .enumerate()
        .map(|(u, p)| {
            let mut p = p.clone();
            p.microblogs = p
                .microblogs
                .into_iter()
                .enumerate()
                .filter(|(m, _)| !removed.contains(&(u, *m)))
                .map(|(_, b)| b)
                .collect();
            p
        })
        .collect();
    Ok(SocialNetwork::with_parts(users, kept_edges))
}

/// Applies the same removal fractions to both networks (independent draws).
pub fn apply_sparsity_to_pair(
    pair: &NetworkPair,
    remove_relations: f64,
    remove_microblogs: f64,
    seed: u64,
) -> Result<NetworkPair> {
    Ok(NetworkPair {
        source: apply_sparsity(&pair.source, remove_relations, remove_microblogs, seed)?,
        target: apply_sparsity(&pair.target, remove_relations, remove_microblogs, seed.wrapping_add(0x9e37_79b9))?,
        ..pair.clone()
    })
}

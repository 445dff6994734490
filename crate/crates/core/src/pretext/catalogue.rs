//! Jigsaw permutation catalogue: identity first, then greedy max-min
//! Hamming selection.
//!
//! When the tile count `T` is a prime power and the catalogue fits, the
//! candidate pool is the affine group `x -> a*x + b` over GF(T). Two distinct
//! affine maps agree on at most one point, so every pair in the result is at
//! Hamming distance >= T-1. Otherwise the pool is every permutation (T <= 9)
//! or a seeded sample.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tile counts up to this size are searched over every permutation.
const EXHAUSTIVE_MAX_TILES: usize = 9;
const SAMPLED_POOL: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationCatalogue {
    grid: usize,
    perms: Vec<Vec<usize>>,
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

/// All permutations of `0..t` in lexicographic order, packed row-major.
fn all_permutations(t: usize) -> Vec<u8> {
    let mut cur: Vec<u8> = (0..t as u8).collect();
    let mut out = cur.clone();
    // next lexicographic permutation
    loop {
        let Some(i) = (1..t).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..t).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
        out.extend_from_slice(&cur);
    }
    out
}

/// `(p, k)` with `q = p^k`, if `q` is a prime power.
fn prime_power(q: usize) -> Option<(usize, usize)> {
    if q < 2 {
        return None;
    }
    let p = (2..=q).find(|d| q.is_multiple_of(*d))?;
    let (mut rest, mut k) = (q, 0);
    while rest % p == 0 {
        rest /= p;
        k += 1;
    }
    (rest == 1).then_some((p, k))
}

/// Multiplication table of GF(p^k); elements are base-`p` digit vectors
/// (constant term first) packed into `0..q`.
fn field_mul_table(p: usize, k: usize) -> Vec<usize> {
    let q = p.pow(k as u32);
    let digits = |x: usize| (0..k).map(|i| x / p.pow(i as u32) % p).collect::<Vec<_>>();
    let pack = |d: &[usize]| d.iter().rev().fold(0, |acc, &v| acc * p + v);
    // monic modulus x^k + tail(x); tail runs over all q choices
    for tail in 0..q {
        let f = digits(tail);
        let mul = |a: usize, b: usize| {
            let (a, b) = (digits(a), digits(b));
            let mut prod = vec![0usize; 2 * k];
            for (i, x) in a.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    prod[i + j] = (prod[i + j] + x * y) % p;
                }
            }
            for deg in (k..2 * k).rev() {
                let c = prod[deg];
                if c != 0 {
                    prod[deg] = 0;
                    for (i, fi) in f.iter().enumerate() {
                        let t = deg - k + i;
                        prod[t] = (prod[t] + p * p - c * fi % p) % p;
                    }
                }
            }
            pack(&prod[..k])
        };
        let table: Vec<usize> = (0..q * q).map(|i| mul(i / q, i % q)).collect();
        let is_field = (1..q).all(|a| (1..q).all(|b| table[a * q + b] != 0));
        if is_field {
            return table;
        }
    }
    unreachable!("an irreducible polynomial of every degree exists")
}

/// Field addition on packed digit vectors.
fn field_add(a: usize, b: usize, p: usize, k: usize) -> usize {
    let mut out = 0;
    let mut scale = 1;
    for _ in 0..k {
        out += ((a / scale % p + b / scale % p) % p) * scale;
        scale *= p;
    }
    out
}

/// The affine group of GF(t), identity first.
fn affine_permutations(t: usize) -> Option<Vec<u8>> {
    let (p, k) = prime_power(t)?;
    let mul = field_mul_table(p, k);
    let mut out = Vec::with_capacity(t * t * (t - 1));
    let mut push = |a: usize, b: usize| {
        out.extend((0..t).map(|x| field_add(mul[a * t + x], b, p, k) as u8));
    };
    push(1, 0);
    for a in 1..t {
        for b in 0..t {
            if (a, b) != (1, 0) {
                push(a, b);
            }
        }
    }
    Some(out)
}

fn sampled_permutations(t: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut seen = std::collections::HashSet::new();
    let identity: Vec<u8> = (0..t as u8).collect();
    seen.insert(identity.clone());
    let mut out = identity;
    while seen.len() < size {
        let mut p: Vec<u8> = (0..t as u8).collect();
        p.shuffle(rng);
        if seen.insert(p.clone()) {
            out.extend_from_slice(&p);
        }
    }
    out
}

impl PermutationCatalogue {
    /// Greedy selection: each new permutation maximises its minimum Hamming
    /// distance to those already chosen; ties are broken with the seeded rng.
    pub fn build(grid: usize, count: usize, seed: u64) -> Result<Self> {
        if grid == 0 {
            return Err(Error::param("jigsaw grid must be >= 1"));
        }
        if count == 0 {
            return Err(Error::param("catalogue count must be >= 1"));
        }
        let t = grid * grid;
        if t > u8::MAX as usize {
            return Err(Error::param(format!("grid {grid} has too many tiles")));
        }
        if let Some(total) = factorial(t) {
            if count as u128 > total {
                return Err(Error::param(format!(
                    "catalogue count {count} exceeds {t}! = {total} permutations"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let affine = (count <= t * (t - 1)).then(|| affine_permutations(t)).flatten();
        let pool = if let Some(pool) = affine {
            pool
        } else if t <= EXHAUSTIVE_MAX_TILES {
            all_permutations(t)
        } else {
            sampled_permutations(t, SAMPLED_POOL.max(4 * count), &mut rng)
        };
        let n = pool.len() / t;
        let row = |i: usize| &pool[i * t..(i + 1) * t];

        // pool row 0 is the identity in every construction
        let mut chosen = vec![0usize];
        let mut min_dist = vec![usize::MAX; n];
        let mut taken = vec![false; n];
        taken[0] = true;
        let mut ties = Vec::new();
        while chosen.len() < count {
            let last = row(*chosen.last().unwrap());
            let mut best = 0;
            ties.clear();
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                let d = row(i).iter().zip(last).filter(|(a, b)| a != b).count();
                if d < min_dist[i] {
                    min_dist[i] = d;
                }
                match min_dist[i].cmp(&best) {
                    std::cmp::Ordering::Greater => {
                        best = min_dist[i];
                        ties.clear();
                        ties.push(i);
                    }
                    std::cmp::Ordering::Equal => ties.push(i),
                    std::cmp::Ordering::Less => {}
                }
            }
            let pick = ties[rng.gen_range(0..ties.len())];
            taken[pick] = true;
            chosen.push(pick);
        }
        let perms = chosen
            .into_iter()
            .map(|i| row(i).iter().map(|&v| v as usize).collect())
            .collect();
        Ok(PermutationCatalogue { grid, perms })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn tiles(&self) -> usize {
        self.grid * self.grid
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&[usize]> {
        self.perms.get(index).map(Vec::as_slice)
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn min_pairwise_distance(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, a) in self.perms.iter().enumerate() {
            for b in &self.perms[i + 1..] {
                let d = hamming(a, b);
                best = Some(best.map_or(d, |m: usize| m.min(d)));
            }
        }
        best
    }
}

pub fn build_catalogue(grid: usize, count: usize, seed: u64) -> Result<PermutationCatalogue> {
    PermutationCatalogue::build(grid, count, seed)
}

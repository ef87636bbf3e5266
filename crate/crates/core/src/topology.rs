//! k-symmetric ring topology and reproducible neighbor sampling.
//!
//! Nodes `0..n` sit on a ring; node `i` is linked to the `k` nearest nodes on
//! each side. When `2k >= n` the offsets wrap onto each other, so the
//! neighbor set is deduplicated and the degree caps at `n - 1`.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingTopology {
    n: usize,
    k: usize,
}

impl RingTopology {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::arg("ring topology needs at least one node"));
        }
        Ok(Self { n, k })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn symmetric_degree(&self) -> usize {
        self.k
    }

    /// Number of distinct neighbors every node has: `min(2k, n - 1)`.
    pub fn degree(&self) -> usize {
        (2 * self.k).min(self.n - 1)
    }

    /// Neighbors of `i`, sorted ascending by node id.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        if i >= self.n {
            return Err(Error::arg(format!(
                "node {i} out of range for a ring of {} nodes",
                self.n
            )));
        }
        let n = self.n;
        // Offsets beyond n/2 only revisit nodes already reached from the other side.
        let reach = self.k.min(n / 2);
        let mut out = Vec::with_capacity(2 * reach);
        for off in 1..=reach {
            out.push((i + off) % n);
            out.push((i + n - off) % n);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Uniform sample of `q` distinct neighbors of `i` without replacement,
    /// returned sorted ascending.
    pub fn sample_neighbors(&self, i: usize, q: usize, stream: &mut RngStream) -> Result<Vec<usize>> {
        let all = self.neighbors(i)?;
        if q > all.len() {
            return Err(Error::arg(format!(
                "cannot sample {q} neighbors of node {i}: degree is {}",
                all.len()
            )));
        }
        if q == all.len() {
            return Ok(all);
        }
        let mut picked: Vec<usize> = index::sample(stream, all.len(), q)
            .into_iter()
            .map(|j| all[j])
            .collect();
        picked.sort_unstable();
        Ok(picked)
    }
}

/// What a random stream is used for. Separates draws that share the same
/// `(seed, worker, component, index)` key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    NeighborSampling = 1,
    Batch = 2,
    Init = 3,
    Problem = 4,
    Trial = 5,
}

/// Identity of a random stream. Two streams with equal identity and purpose
/// yield identical draw sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub seed: u64,
    pub worker: u64,
    pub component: u64,
    pub index: u64,
}

impl StreamId {
    pub fn new(seed: u64, worker: u64, component: u64, index: u64) -> Self {
        Self {
            seed,
            worker,
            component,
            index,
        }
    }
}

/// Deterministic generator keyed by a [`StreamId`].
///
/// The key is the ChaCha seed itself and the purpose selects the ChaCha
/// stream, so no two keys share a keystream.
#[derive(Clone, Debug)]
pub struct RngStream {
    id: StreamId,
    purpose: Purpose,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(id: StreamId, purpose: Purpose) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&id.seed.to_le_bytes());
        key[8..16].copy_from_slice(&id.worker.to_le_bytes());
        key[16..24].copy_from_slice(&id.component.to_le_bytes());
        key[24..32].copy_from_slice(&id.index.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(purpose as u64);
        Self { id, purpose, rng }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(index: u64) -> RngStream {
        RngStream::new(StreamId::new(42, 3, 1, index), Purpose::NeighborSampling)
    }

    #[test]
    fn neighbor_lists_match_ring_formula() {
        let ring = RingTopology::new(8, 1).unwrap();
        assert_eq!(ring.neighbors(0).unwrap(), vec![1, 7]);
        let ring = RingTopology::new(8, 2).unwrap();
        assert_eq!(ring.neighbors(7).unwrap(), vec![0, 1, 5, 6]);
        let ring = RingTopology::new(1, 1).unwrap();
        assert!(ring.neighbors(0).unwrap().is_empty());
    }

    #[test]
    fn wrapped_offsets_are_deduplicated() {
        // Enumerate all 2k offsets mod n by hand, drop self, dedup.
        let (n, k, i) = (3usize, 2usize, 0usize);
        let mut brute: Vec<usize> = (1..=k)
            .flat_map(|o| [(i + o) % n, (i + n * k - o) % n])
            .filter(|&j| j != i)
            .collect();
        brute.sort_unstable();
        brute.dedup();
        assert_eq!(brute, vec![1, 2]);
        let ring = RingTopology::new(n, k).unwrap();
        assert_eq!(ring.neighbors(i).unwrap(), brute);
        assert_eq!(ring.degree(), 2);
    }

    #[test]
    fn out_of_range_node_is_rejected() {
        let ring = RingTopology::new(4, 1).unwrap();
        assert!(matches!(ring.neighbors(4), Err(Error::InvalidArgument(_))));
        assert!(RingTopology::new(0, 1).is_err());
    }

    #[test]
    fn sample_edge_cases() {
        let ring = RingTopology::new(8, 2).unwrap();
        let mut s = stream(0);
        assert_eq!(
            ring.sample_neighbors(3, 4, &mut s).unwrap(),
            ring.neighbors(3).unwrap()
        );
        assert!(ring.sample_neighbors(3, 0, &mut s).unwrap().is_empty());
        assert!(matches!(
            ring.sample_neighbors(3, 5, &mut s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sample_marginals_are_uniform() {
        // Each of the 4 neighbors is included with probability q / 2k = 0.5.
        let ring = RingTopology::new(8, 2).unwrap();
        let draws = 10_000;
        let mut counts = std::collections::BTreeMap::new();
        for d in 0..draws {
            for j in ring.sample_neighbors(0, 2, &mut stream(d)).unwrap() {
                *counts.entry(j).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.keys().copied().collect::<Vec<_>>(), vec![1, 2, 6, 7]);
        for (&j, &c) in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() <= 0.05, "neighbor {j}: {freq}");
        }
    }

    #[test]
    fn replayed_stream_reproduces_sample() {
        let ring = RingTopology::new(16, 3).unwrap();
        let a = ring.sample_neighbors(5, 2, &mut stream(9)).unwrap();
        let b = ring.sample_neighbors(5, 2, &mut stream(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn purposes_do_not_share_keystreams() {
        let id = StreamId::new(1, 2, 3, 4);
        let mut a = RngStream::new(id, Purpose::Batch);
        let mut b = RngStream::new(id, Purpose::Init);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}

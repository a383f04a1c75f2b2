//! Disjoint-set structures: a lightweight local union-find used inside the
//! coalescent engine, and the vertex-level [`ClusterForest`] with tag support.

use std::collections::HashSet;

use crate::lattice::VertexId;
use crate::mass::SizeMultiset;

/// Union-find over `0..k` with path halving and union by size.
#[derive(Debug, Clone, Default)]
pub struct LocalDsu {
    parent: Vec<u32>,
    size: Vec<u32>,
    components: usize,
}

impl LocalDsu {
    pub fn reset(&mut self, k: usize) {
        self.parent.clear();
        self.parent.extend(0..k as u32);
        self.size.clear();
        self.size.resize(k, 1);
        self.components = k;
    }

    #[inline]
    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    /// Returns true if two components were merged.
    #[inline]
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
        self.components -= 1;
        true
    }

    pub fn components(&self) -> usize {
        self.components
    }
}

/// Partition of the `L^{dn}` vertices of a block into clusters.
///
/// Union by size; on ties the tagged root is kept, so tag lookups follow the
/// same short paths as any other find.
#[derive(Debug, Clone)]
pub struct ClusterForest {
    parent: Vec<u32>,
    size: Vec<u32>,
    tags: Vec<VertexId>,
    tagged_roots: HashSet<u32>,
}

impl ClusterForest {
    pub fn new(vertices: usize, tags: &[VertexId]) -> Self {
        assert!(vertices <= u32::MAX as usize, "forest limited to 2^32 vertices");
        let tagged_roots = tags.iter().map(|t| t.0 as u32).collect();
        Self { parent: (0..vertices as u32).collect(), size: vec![1; vertices], tags: tags.to_vec(), tagged_roots }
    }

    pub fn vertices(&self) -> usize {
        self.parent.len()
    }

    pub fn tags(&self) -> &[VertexId] {
        &self.tags
    }

    #[inline]
    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    /// Read-only find (no compression).
    pub fn root_of(&self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            x = self.parent[x as usize];
        }
        x
    }

    #[inline]
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (sa, sb) = (self.size[ra as usize], self.size[rb as usize]);
        let swap = if sa != sb {
            sa < sb
        } else {
            !self.tagged_roots.is_empty() && self.tagged_roots.contains(&rb) && !self.tagged_roots.contains(&ra)
        };
        if swap {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] = sa + sb;
        if !self.tagged_roots.is_empty() && self.tagged_roots.remove(&rb) {
            self.tagged_roots.insert(ra);
        }
        true
    }

    pub fn connected(&mut self, a: VertexId, b: VertexId) -> bool {
        self.find(a.0 as u32) == self.find(b.0 as u32)
    }

    pub fn cluster_size(&mut self, v: VertexId) -> u64 {
        let r = self.find(v.0 as u32);
        self.size[r as usize] as u64
    }

    /// Sizes of all clusters (one entry per root).
    pub fn root_sizes(&self) -> Vec<u64> {
        self.parent.iter().enumerate().filter(|&(i, &p)| i as u32 == p).map(|(i, _)| self.size[i] as u64).collect()
    }

    pub fn size_multiset(&self) -> SizeMultiset {
        SizeMultiset::from_sizes(&self.root_sizes())
    }

    /// Root of every vertex (fully compressed copy).
    pub fn labels(&mut self) -> Vec<u32> {
        (0..self.parent.len() as u32).map(|v| self.find(v)).collect()
    }
}

//! Topology report: valence per layer, coalesced edges per transition and
//! bank conflicts within blocks of `n_l` paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pathnet::topology::{self, PathTopology};

use crate::error::Failure;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerReport {
    pub layer: usize,
    pub size: usize,
    /// Valence to number of neurons with that valence.
    pub valence: BTreeMap<usize, usize>,
    /// `(conflicting blocks, collisions)` at block size `size`; `None` when
    /// the size is not a power of 2 or exceeds the path count.
    pub conflicts: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionReport {
    pub layer: usize,
    pub slots: usize,
    /// Paths sharing a slot with an earlier path.
    pub duplicates: usize,
    pub dense: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Analysis {
    pub paths: usize,
    pub layers: Vec<LayerReport>,
    pub transitions: Vec<TransitionReport>,
}

impl Analysis {
    pub fn total_conflicts(&self) -> usize {
        self.layers.iter().filter_map(|l| l.conflicts).map(|c| c.1).sum()
    }

    pub fn nonzero_weights(&self) -> usize {
        self.transitions.iter().map(|t| t.slots).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "paths {}", self.paths).unwrap();
        for l in &self.layers {
            let hist: Vec<String> = l.valence.iter().map(|(v, n)| format!("{v}:{n}")).collect();
            writeln!(s, "layer {} size {} valence {}", l.layer, l.size, hist.join(" ")).unwrap();
        }
        for t in &self.transitions {
            writeln!(s, "transition {}->{} slots {} duplicates {} dense {}", t.layer - 1, t.layer, t.slots, t.duplicates, t.dense)
                .unwrap();
        }
        for l in &self.layers {
            match l.conflicts {
                Some((blocks, collisions)) => writeln!(
                    s,
                    "conflicts layer {} block {} conflicting_blocks {blocks} collisions {collisions}",
                    l.layer, l.size
                ),
                None => writeln!(s, "conflicts layer {} block {} n/a", l.layer, l.size),
            }
            .unwrap();
        }
        writeln!(s, "total_conflicts {}", self.total_conflicts()).unwrap();
        writeln!(s, "nonzero_weights {}", self.nonzero_weights()).unwrap();
        s
    }
}

pub fn analyze(t: &PathTopology) -> Result<Analysis, Failure> {
    let sizes = t.layers().sizes().to_vec();
    let mut layers = Vec::new();
    for l in t.layers().path_layers() {
        let mut valence = BTreeMap::new();
        for v in t.valence(l) {
            *valence.entry(v).or_insert(0) += 1;
        }
        let n = sizes[l];
        let conflicts = if n.is_power_of_two() && n <= t.num_paths() {
            let report = topology::check_block_conflicts(t, n)?;
            report.layers.iter().find(|r| r.layer == l).map(|r| (r.conflicting_blocks, r.collisions))
        } else {
            None
        };
        layers.push(LayerReport { layer: l, size: n, valence, conflicts });
    }
    let slots = topology::coalesce_edges(t);
    let transitions = slots
        .transitions
        .iter()
        .map(|ts| TransitionReport {
            layer: ts.layer,
            slots: ts.edges.len(),
            duplicates: t.num_paths() - ts.edges.len(),
            dense: sizes[ts.layer - 1] * sizes[ts.layer],
        })
        .collect();
    Ok(Analysis { paths: t.num_paths(), layers, transitions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathnet::qmc::GeneratorMatrixSet;
    use pathnet::topology::LayerSpec;

    #[test]
    fn quasi_topology_is_conflict_free() {
        let layers = LayerSpec::paths(vec![16, 32, 8]).unwrap();
        let t = topology::generate_quasi_paths(layers, 256, GeneratorMatrixSet::joe_kuo(), &[0, 1, 2], 3).unwrap();
        let a = analyze(&t).unwrap();
        assert_eq!(a.total_conflicts(), 0);
        assert!(a.layers.iter().all(|l| l.valence.len() == 1 && l.conflicts.is_some()));
        assert_eq!(a.layers[1].valence[&8], 32);
        assert!(a.render().contains("total_conflicts 0"));
    }
}

//! Stochastic-block-model dataset generator: a desk-scale stand-in for the
//! public benchmark graphs that exercises every training code path.

use std::path::Path;

use crate::error::{GlasuError, Result};
use crate::graph::{save_dataset, Dataset, Graph};
use crate::linalg::{Matrix, RngState};

#[derive(Clone, Copy, Debug)]
pub struct SbmParams {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Feature dimension; the first `blocks` columns are a noisy one-hot
    /// block indicator, the rest are pure noise.
    pub dim: usize,
    pub seed: u64,
}

const NOISE_SIGMA: f64 = 0.1;

/// Generates the SBM dataset: block-indicator features with sigma=0.1 noise,
/// labels equal to the block id, and a shuffled 60/20/20 mask split.
pub fn make_sbm_dataset(p: &SbmParams) -> Result<Dataset> {
    if p.p_in.is_nan() || p.p_out.is_nan() || p.p_in <= p.p_out {
        return Err(GlasuError::Config(format!(
            "p_in {} must exceed p_out {}",
            p.p_in, p.p_out
        )));
    }
    if p.dim < p.blocks {
        return Err(GlasuError::Config(format!(
            "feature dim {} must cover {} block-indicator columns",
            p.dim, p.blocks
        )));
    }
    let n = p.blocks * p.nodes_per_block;
    if n == 0 {
        return Err(GlasuError::Config("empty graph".into()));
    }
    let root = RngState::new(p.seed, 0);
    let block_of = |i: usize| (i / p.nodes_per_block) as u32;

    let mut edge_rng = root.child_named("sbm-edges");
    let mut graph = Graph::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let prob = if block_of(i) == block_of(j) { p.p_in } else { p.p_out };
            if edge_rng.next_f64() < prob {
                graph.add_edge(i as u32, j as u32)?;
            }
        }
    }

    let mut feat_rng = root.child_named("sbm-features");
    let mut features = Matrix::zeros(n, p.dim);
    for i in 0..n {
        for j in 0..p.dim {
            let indicator = if j < p.blocks && block_of(i) == j as u32 { 1.0 } else { 0.0 };
            features.set(i, j, indicator + NOISE_SIGMA * feat_rng.next_gaussian());
        }
    }

    let labels: Vec<u32> = (0..n).map(block_of).collect();

    let mut mask_rng = root.child_named("sbm-masks");
    let mut order: Vec<u32> = (0..n as u32).collect();
    for i in 0..n {
        let j = i + mask_rng.next_below(n - i);
        order.swap(i, j);
    }
    let train_end = (n * 6) / 10;
    let val_end = train_end + (n * 2) / 10;
    let mut train_mask: Vec<u32> = order[..train_end].to_vec();
    let mut val_mask: Vec<u32> = order[train_end..val_end].to_vec();
    let mut test_mask: Vec<u32> = order[val_end..].to_vec();
    train_mask.sort_unstable();
    val_mask.sort_unstable();
    test_mask.sort_unstable();

    Ok(Dataset {
        graph,
        features,
        labels,
        num_classes: p.blocks,
        train_mask,
        val_mask,
        test_mask,
    })
}

/// Generates and writes the dataset files.
pub fn make_sbm_fixture(p: &SbmParams, dir: impl AsRef<Path>) -> Result<Dataset> {
    let ds = make_sbm_dataset(p)?;
    save_dataset(&ds, dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SbmParams {
        SbmParams { blocks: 2, nodes_per_block: 20, p_in: 0.5, p_out: 0.05, dim: 4, seed: 11 }
    }

    #[test]
    fn zero_cross_probability_gives_no_cross_edges() {
        let p = SbmParams { p_out: 0.0, p_in: 0.4, ..params() };
        let ds = make_sbm_dataset(&p).unwrap();
        for (u, v) in ds.graph.edges() {
            assert_eq!(u / 20, v / 20, "cross-block edge ({u},{v})");
        }
    }

    #[test]
    fn edge_count_within_three_sigma() {
        let p = params();
        let ds = make_sbm_dataset(&p).unwrap();
        let within = 2.0 * (20.0 * 19.0 / 2.0);
        let cross = 20.0 * 20.0;
        let mean = within * p.p_in + cross * p.p_out;
        let var = within * p.p_in * (1.0 - p.p_in) + cross * p.p_out * (1.0 - p.p_out);
        let got = ds.graph.num_edges() as f64;
        assert!(
            (got - mean).abs() <= 3.0 * var.sqrt(),
            "edge count {got} vs mean {mean} (sd {})",
            var.sqrt()
        );
    }

    #[test]
    fn masks_split_sixty_twenty_twenty_disjoint() {
        let ds = make_sbm_dataset(&params()).unwrap();
        assert_eq!(ds.train_mask.len(), 24);
        assert_eq!(ds.val_mask.len(), 8);
        assert_eq!(ds.test_mask.len(), 8);
        ds.validate().unwrap();
    }

    #[test]
    fn fixture_files_byte_identical_across_runs() {
        let p = params();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_sbm_fixture(&p, d1.path()).unwrap();
        make_sbm_fixture(&p, d2.path()).unwrap();
        for name in ["edges.txt", "features.csv", "labels.csv", "masks.txt"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs across identically seeded runs");
        }
    }
}

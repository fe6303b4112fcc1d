//! Shared fixtures for the benchmarks.

use disc_core::datagen::{generate_split, DatasetSpec, Split};
use disc_core::disc::{Mode, TrainConfig};
use disc_core::gnn::{EncoderConfig, EncoderKind};
use disc_core::graphdata::{batch_graphs, BatchedGraph, GraphInstance};

/// `n` training graphs at the default generator settings.
pub fn graphs(n: usize, seed: u64) -> Vec<GraphInstance> {
    let mut spec = DatasetSpec::with_classes(4);
    spec.sizes.train = n;
    spec.seed = seed;
    generate_split(&spec, Split::Train).expect("default spec is valid")
}

pub fn batch(graphs: &[GraphInstance]) -> BatchedGraph {
    batch_graphs(&graphs.iter().collect::<Vec<_>>(), None).expect("generated graphs are valid")
}

/// Laptop-scale configuration: 4-layer, 32-wide GCN, batches of 64.
pub fn desk_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        encoder: EncoderConfig {
            kind: EncoderKind::Gcn,
            layers: 4,
            hidden: 32,
        },
        ..TrainConfig::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let g = graphs(3, 0);
        assert_eq!(batch(&g).num_graphs(), 3);
        assert!(desk_config(Mode::Disc).validate().is_ok());
    }
}

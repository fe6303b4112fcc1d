//! Synthetic colour-biased graph benchmark.
//!
//! Each graph is a point cloud in the unit square: a class-specific motif
//! drawn in a near-white foreground colour, surrounded by background points
//! painted with a bias colour. With probability `bias_degree` the bias
//! colour is the class colour; otherwise it is drawn uniformly from the
//! palette. Edges come from a symmetrised k-nearest-neighbour graph over
//! coordinates, and every edge is tagged with its ground-truth provenance.

mod motif;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiscError, Result};
use crate::graphdata::{save_dataset, EdgeTag, GraphInstance, SplitEntry, SplitManifest};
use crate::rng;

pub use motif::{template, NUM_TEMPLATES, TEMPLATE_NAMES};

/// Label to colour map for the training palette.
pub const TRAIN_PALETTE: [[u8; 3]; 10] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [225, 225, 0],
    [225, 0, 225],
    [0, 255, 255],
    [255, 128, 0],
    [255, 0, 128],
    [128, 0, 255],
    [128, 128, 128],
];

/// Colours reserved for the unseen-bias test split.
pub const UNSEEN_PALETTE: [[u8; 3]; 10] = [
    [199, 21, 133],
    [255, 140, 105],
    [255, 127, 36],
    [139, 71, 38],
    [107, 142, 35],
    [173, 255, 47],
    [60, 179, 113],
    [0, 255, 255],
    [64, 224, 208],
    [0, 191, 255],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestBiased,
    TestUnbiased,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::TestBiased,
        Split::TestUnbiased,
        Split::TestUnseen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestBiased => "test_biased",
            Split::TestUnbiased => "test_unbiased",
            Split::TestUnseen => "test_unseen",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test_biased: usize,
    pub test_unbiased: usize,
    pub test_unseen: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::TestBiased => self.test_biased,
            Split::TestUnbiased => self.test_unbiased,
            Split::TestUnseen => self.test_unseen,
        }
    }

    pub fn set(&mut self, split: Split, n: usize) {
        match split {
            Split::Train => self.train = n,
            Split::Val => self.val = n,
            Split::TestBiased => self.test_biased = n,
            Split::TestUnbiased => self.test_unbiased = n,
            Split::TestUnseen => self.test_unseen = n,
        }
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 500,
            test_biased: 1000,
            test_unbiased: 1000,
            test_unseen: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub bias_degree: f64,
    pub val_bias_degree: f64,
    pub sizes: SplitSizes,
    pub nodes_per_graph: usize,
    pub motif_nodes: usize,
    pub knn_k: usize,
    pub palette: Vec<[u8; 3]>,
    pub unseen_palette: Vec<[u8; 3]>,
    pub foreground: [u8; 3],
    /// Half-width of the motif in unit-square coordinates.
    pub motif_scale: f64,
    /// Motif centre is drawn uniformly within `0.5 +- motif_shift`.
    pub motif_shift: f64,
    /// Background points closer than this to any motif point are redrawn.
    pub background_clearance: f64,
    pub coord_noise: f64,
    pub color_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::with_classes(4)
    }
}

impl DatasetSpec {
    /// Defaults with the first `k` palette colours. `k` is clamped to the
    /// palette length; `validate` reports the mismatch.
    pub fn with_classes(k: usize) -> Self {
        let take = k.min(TRAIN_PALETTE.len());
        DatasetSpec {
            num_classes: k,
            bias_degree: 0.9,
            val_bias_degree: 0.5,
            sizes: SplitSizes::default(),
            nodes_per_graph: 40,
            motif_nodes: 12,
            knn_k: 8,
            palette: TRAIN_PALETTE[..take].to_vec(),
            unseen_palette: UNSEEN_PALETTE[..take].to_vec(),
            foreground: [242, 242, 242],
            motif_scale: 0.3,
            motif_shift: 0.1,
            background_clearance: 0.05,
            coord_noise: 0.02,
            color_noise: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(DiscError::invalid("num_classes", "need at least 2 classes"));
        }
        if k > self.palette.len() || k > NUM_TEMPLATES {
            return Err(DiscError::invalid(
                "num_classes",
                format!(
                    "{k} classes exceed palette size {}",
                    self.palette.len().min(NUM_TEMPLATES)
                ),
            ));
        }
        if self.palette.len() != k {
            return Err(DiscError::invalid(
                "palette",
                format!("{} colours for {k} classes", self.palette.len()),
            ));
        }
        if self.unseen_palette.len() != k {
            return Err(DiscError::invalid(
                "unseen_palette",
                format!("{} colours for {k} classes", self.unseen_palette.len()),
            ));
        }
        if let Some(c) = self
            .unseen_palette
            .iter()
            .find(|c| self.palette.contains(c))
        {
            return Err(DiscError::invalid(
                "unseen_palette",
                format!("{c:?} also in training palette"),
            ));
        }
        for (name, rho) in [
            ("bias_degree", self.bias_degree),
            ("val_bias_degree", self.val_bias_degree),
        ] {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(DiscError::invalid(name, format!("{rho} not in (0, 1]")));
            }
        }
        if self.motif_nodes < 8 {
            return Err(DiscError::invalid(
                "motif_nodes",
                "motifs need at least 8 points",
            ));
        }
        if self.motif_nodes >= self.nodes_per_graph {
            return Err(DiscError::invalid(
                "motif_nodes",
                "no room for background nodes",
            ));
        }
        if self.knn_k == 0 || self.knn_k >= self.nodes_per_graph {
            return Err(DiscError::invalid(
                "knn_k",
                format!("k = {} must lie in 1..{}", self.knn_k, self.nodes_per_graph),
            ));
        }
        for (name, v) in [
            ("motif_scale", self.motif_scale),
            ("motif_shift", self.motif_shift),
            ("background_clearance", self.background_clearance),
            ("coord_noise", self.coord_noise),
            ("color_noise", self.color_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DiscError::invalid(
                    name,
                    format!("{v} must be finite and non-negative"),
                ));
            }
        }
        if self.motif_scale + self.motif_shift > 0.5 {
            return Err(DiscError::invalid(
                "motif_scale",
                "motif does not fit in the unit square",
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        rng::digest_hex(&serde_json::to_vec(self).expect("spec serialises"))
    }
}

fn gaussian(r: &mut impl Rng) -> f64 {
    // Box-Muller; one draw per call keeps stream consumption simple.
    let u1: f64 = 1.0 - r.gen::<f64>();
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    [
        c[0] as f64 / 255.0,
        c[1] as f64 / 255.0,
        c[2] as f64 / 255.0,
    ]
}

/// Symmetrised kNN: `{i, j}` is an edge when either is among the other's
/// `k` nearest neighbours. Distance ties break on node index.
pub fn knn_edges(coords: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let n = coords.len();
    let mut set = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                (dx * dx + dy * dy, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            set.insert((i.min(j), i.max(j)));
        }
    }
    set.into_iter().collect()
}

#[derive(Clone, Copy, Debug)]
enum ColorRule {
    /// Class colour with this probability, else uniform over the palette.
    Biased(f64),
    UniformTrain,
    UniformUnseen,
}

fn color_rule(spec: &DatasetSpec, split: Split) -> ColorRule {
    match split {
        Split::Train | Split::TestBiased => ColorRule::Biased(spec.bias_degree),
        Split::Val => ColorRule::Biased(spec.val_bias_degree),
        Split::TestUnbiased => ColorRule::UniformTrain,
        Split::TestUnseen => ColorRule::UniformUnseen,
    }
}

/// Generate graph `index` of `split`. Depends only on `(spec, split, index)`.
pub fn generate_graph(spec: &DatasetSpec, split: Split, index: usize) -> GraphInstance {
    let mut r = rng::stream(
        spec.seed,
        &format!("datagen/{}", split.name()),
        index as u64,
    );
    let k = spec.num_classes;
    let y = r.gen_range(0..k);
    let (bias_label, biased) = match color_rule(spec, split) {
        ColorRule::Biased(rho) => {
            if r.gen_bool(rho) {
                (y, true)
            } else {
                (r.gen_range(0..k), false)
            }
        }
        ColorRule::UniformTrain | ColorRule::UniformUnseen => (r.gen_range(0..k), false),
    };
    let bias_rgb = match color_rule(spec, split) {
        ColorRule::UniformUnseen => rgb(spec.unseen_palette[bias_label]),
        _ => rgb(spec.palette[bias_label]),
    };
    let fg_rgb = rgb(spec.foreground);

    let centre = [
        0.5 + r.gen_range(-1.0..=1.0) * spec.motif_shift,
        0.5 + r.gen_range(-1.0..=1.0) * spec.motif_shift,
    ];
    let m = spec.motif_nodes;
    let n = spec.nodes_per_graph;
    let mut coords: Vec<[f64; 2]> = template(y, m)
        .into_iter()
        .map(|p| {
            [
                (centre[0] + spec.motif_scale * p[0] + spec.coord_noise * gaussian(&mut r))
                    .clamp(0.0, 1.0),
                (centre[1] + spec.motif_scale * p[1] + spec.coord_noise * gaussian(&mut r))
                    .clamp(0.0, 1.0),
            ]
        })
        .collect();
    let clear2 = spec.background_clearance * spec.background_clearance;
    while coords.len() < n {
        let mut p = [r.gen::<f64>(), r.gen::<f64>()];
        for _ in 0..100 {
            let near = coords[..m]
                .iter()
                .any(|q| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) < clear2);
            if !near {
                break;
            }
            p = [r.gen::<f64>(), r.gen::<f64>()];
        }
        coords.push(p);
    }

    let mut x = Vec::with_capacity(n * 5);
    for (i, c) in coords.iter().enumerate() {
        let base = if i < m { fg_rgb } else { bias_rgb };
        for ch in base {
            x.push((ch + spec.color_noise * gaussian(&mut r)).clamp(0.0, 1.0));
        }
        x.push(c[0]);
        x.push(c[1]);
    }

    let edges = knn_edges(&coords, spec.knn_k);
    let edge_tag = edges
        .iter()
        .map(|&(i, j)| match (i < m, j < m) {
            (true, true) => EdgeTag::Causal,
            (false, false) => EdgeTag::Bias,
            _ => EdgeTag::Mixed,
        })
        .collect();

    GraphInstance {
        id: format!("{}-{index:06}", split.name()),
        num_nodes: n,
        x,
        edges,
        y,
        bias_label,
        edge_tag: Some(edge_tag),
        edge_weight: None,
        biased: Some(biased),
    }
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<GraphInstance>> {
    spec.validate()?;
    Ok((0..spec.sizes.get(split))
        .map(|i| generate_graph(spec, split, i))
        .collect())
}

pub fn generate_all(spec: &DatasetSpec) -> Result<BTreeMap<Split, Vec<GraphInstance>>> {
    spec.validate()?;
    Split::ALL
        .into_iter()
        .map(|s| Ok((s, generate_split(spec, s)?)))
        .collect()
}

/// Write all five splits plus the manifest into `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<SplitManifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let graphs = generate_split(spec, split)?;
        let file = split.file_name();
        save_dataset(out.join(&file), &graphs)?;
        splits.insert(
            split,
            SplitEntry {
                path: file,
                size: graphs.len(),
            },
        );
    }
    let manifest = SplitManifest {
        splits,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        seed: spec.seed,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Fraction of graphs whose colour coin came up biased. Falls back to the
/// coincidence rate `P(bias_label == y)` when the coin was not recorded.
pub fn empirical_bias_degree(graphs: &[GraphInstance]) -> Result<f64> {
    if graphs.is_empty() {
        return Err(DiscError::invalid(
            "dataset",
            "bias degree of an empty set is undefined",
        ));
    }
    let flags: Option<Vec<bool>> = graphs.iter().map(|g| g.biased).collect();
    let hits = match flags {
        Some(f) => f.into_iter().filter(|&b| b).count(),
        None => {
            log::warn!("no stored bias coin; using P(bias_label == y), which also counts coincidental matches");
            graphs.iter().filter(|g| g.bias_label == g.y).count()
        }
    };
    Ok(hits as f64 / graphs.len() as f64)
}

/// Plug-in mutual information (nats) between class and bias label.
pub fn label_bias_mutual_information(graphs: &[GraphInstance]) -> f64 {
    let n = graphs.len() as f64;
    if graphs.is_empty() {
        return 0.0;
    }
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut py: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for g in graphs {
        *joint.entry((g.y, g.bias_label)).or_default() += 1.0 / n;
        *py.entry(g.y).or_default() += 1.0 / n;
        *pb.entry(g.bias_label).or_default() += 1.0 / n;
    }
    joint
        .iter()
        .map(|(&(y, b), &p)| p * (p / (py[&y] * pb[&b])).ln())
        .sum()
}

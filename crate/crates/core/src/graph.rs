//! Bipartite transaction graph with importer and HS-code virtual nodes, plus
//! seeded fixed fan-out subgraph sampling.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, KeyKind, LabelState};
use crate::error::{Error, Result};
use crate::features::NumericMatrix;
use crate::gbdt::CrossFeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Txn,
    Importer,
    HsCode,
}

impl NodeKind {
    pub fn is_virtual(self) -> bool {
        self != NodeKind::Txn
    }

    fn code(self) -> u32 {
        match self {
            NodeKind::Txn => 0,
            NodeKind::Importer => 1,
            NodeKind::HsCode => 2,
        }
    }
}

impl From<KeyKind> for NodeKind {
    fn from(k: KeyKind) -> Self {
        match k {
            KeyKind::Importer => NodeKind::Importer,
            KeyKind::HsCode => NodeKind::HsCode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub id: u32,
}

impl NodeRef {
    pub fn txn(id: u32) -> Self {
        Self { kind: NodeKind::Txn, id }
    }
    pub fn importer(id: u32) -> Self {
        Self { kind: NodeKind::Importer, id }
    }
    pub fn hs(id: u32) -> Self {
        Self { kind: NodeKind::HsCode, id }
    }
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}#{}", self.kind, self.id)
    }
}

/// Which transactions a graph keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphVariant {
    Full,
    LabeledOnly,
    UnlabeledOnly,
}

impl std::str::FromStr for GraphVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "G" => Ok(GraphVariant::Full),
            "labeled_only" | "labeled" | "G_L" => Ok(GraphVariant::LabeledOnly),
            "unlabeled_only" | "unlabeled" | "G_U" => Ok(GraphVariant::UnlabeledOnly),
            other => Err(Error::InvalidArgument(format!("unknown graph variant `{other}`"))),
        }
    }
}

/// Transaction node features, indexed by dataset record.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeFeatures {
    MultiHot(CrossFeatureMatrix),
    Dense(NumericMatrix),
}

impl NodeFeatures {
    pub fn rows(&self) -> usize {
        match self {
            NodeFeatures::MultiHot(m) => m.rows(),
            NodeFeatures::Dense(m) => m.rows(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            NodeFeatures::MultiHot(m) => m.width(),
            NodeFeatures::Dense(m) => m.cols(),
        }
    }

    pub fn heap_bytes(&self) -> usize {
        match self {
            NodeFeatures::MultiHot(m) => m.heap_bytes(),
            NodeFeatures::Dense(m) => m.rows() * m.cols() * 8,
        }
    }
}

/// Compressed adjacency from virtual nodes to their transactions.
#[derive(Debug, Clone, PartialEq)]
struct Csr {
    offsets: Vec<u32>,
    targets: Vec<u32>,
}

impl Csr {
    fn build(n_nodes: usize, owner: &[u32]) -> Self {
        let mut offsets = vec![0u32; n_nodes + 1];
        for &o in owner {
            offsets[o as usize + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0u32; owner.len()];
        // transactions are visited in id order, so each list stays sorted
        for (txn, &o) in owner.iter().enumerate() {
            targets[fill[o as usize] as usize] = txn as u32;
            fill[o as usize] += 1;
        }
        Self { offsets, targets }
    }

    fn row(&self, i: usize) -> &[u32] {
        &self.targets[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    fn heap_bytes(&self) -> usize {
        (self.offsets.capacity() + self.targets.capacity()) * 4
    }
}

const NO_KEY: u32 = u32::MAX;

/// Immutable bipartite graph over a selection of dataset records.
#[derive(Debug, Clone)]
pub struct TransactionGraph {
    keys: Vec<KeyKind>,
    txn_record: Vec<u32>,
    txn_date: Vec<NaiveDate>,
    txn_labeled: Vec<bool>,
    txn_importer: Vec<u32>,
    txn_hs: Vec<u32>,
    importer_names: Vec<String>,
    hs_names: Vec<String>,
    importer_adj: Csr,
    hs_adj: Csr,
    features: Arc<NodeFeatures>,
}

impl TransactionGraph {
    /// Builds the graph over the given records. Transaction nodes are numbered
    /// by ascending txn_id; virtual nodes by first appearance in that order.
    pub fn from_records(
        d: &Dataset,
        features: Arc<NodeFeatures>,
        records: &[usize],
        keys: &[KeyKind],
    ) -> Result<Self> {
        if features.rows() != d.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} records",
                features.rows(),
                d.len()
            )));
        }
        if records.is_empty() {
            return Err(Error::EmptyGraph("no transactions selected".into()));
        }
        if keys.is_empty() {
            return Err(Error::InvalidArgument("at least one virtual key kind is required".into()));
        }
        let mut order: Vec<usize> = records.to_vec();
        order.sort_by(|&a, &b| d.record(a).txn_id.cmp(&d.record(b).txn_id));
        order.dedup();

        let use_imp = keys.contains(&KeyKind::Importer);
        let use_hs = keys.contains(&KeyKind::HsCode);
        let mut imp_ids: BTreeMap<&str, u32> = BTreeMap::new();
        let mut hs_ids: BTreeMap<&str, u32> = BTreeMap::new();
        let mut importer_names = Vec::new();
        let mut hs_names = Vec::new();
        let n = order.len();
        let mut txn_importer = vec![NO_KEY; n];
        let mut txn_hs = vec![NO_KEY; n];
        for (t, &i) in order.iter().enumerate() {
            let r = d.record(i);
            if use_imp {
                let next = imp_ids.len() as u32;
                txn_importer[t] = *imp_ids.entry(&r.importer_id).or_insert_with(|| {
                    importer_names.push(r.importer_id.clone());
                    next
                });
            }
            if use_hs {
                let next = hs_ids.len() as u32;
                txn_hs[t] = *hs_ids.entry(&r.hs_code).or_insert_with(|| {
                    hs_names.push(r.hs_code.clone());
                    next
                });
            }
        }
        let importer_adj =
            if use_imp { Csr::build(importer_names.len(), &txn_importer) } else { Csr::build(0, &[]) };
        let hs_adj = if use_hs { Csr::build(hs_names.len(), &txn_hs) } else { Csr::build(0, &[]) };
        let mut key_list: Vec<KeyKind> = Vec::new();
        if use_imp {
            key_list.push(KeyKind::Importer);
        }
        if use_hs {
            key_list.push(KeyKind::HsCode);
        }
        Ok(Self {
            keys: key_list,
            txn_record: order.iter().map(|&i| i as u32).collect(),
            txn_date: order.iter().map(|&i| d.record(i).date).collect(),
            txn_labeled: order.iter().map(|&i| d.label_state(i) == LabelState::Labeled).collect(),
            txn_importer,
            txn_hs,
            importer_names,
            hs_names,
            importer_adj,
            hs_adj,
            features,
        })
    }

    pub fn n_txn(&self) -> usize {
        self.txn_record.len()
    }

    pub fn n_importers(&self) -> usize {
        self.importer_names.len()
    }

    pub fn n_hs(&self) -> usize {
        self.hs_names.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_txn() + self.n_importers() + self.n_hs()
    }

    pub fn n_edges(&self) -> usize {
        self.importer_adj.targets.len() + self.hs_adj.targets.len()
    }

    pub fn keys(&self) -> &[KeyKind] {
        &self.keys
    }

    pub fn features(&self) -> &NodeFeatures {
        &self.features
    }

    pub fn feature_width(&self) -> usize {
        self.features.width()
    }

    /// Dataset record backing a transaction node.
    pub fn txn_record(&self, txn: u32) -> usize {
        self.txn_record[txn as usize] as usize
    }

    pub fn txn_date(&self, txn: u32) -> NaiveDate {
        self.txn_date[txn as usize]
    }

    pub fn txn_is_labeled(&self, txn: u32) -> bool {
        self.txn_labeled[txn as usize]
    }

    /// Transaction node of a dataset record, if the record was included.
    pub fn txn_of_record(&self, record: usize) -> Option<u32> {
        // txn_record is sorted by txn_id, not record index; linear scan only used off the hot path
        self.txn_record.iter().position(|&r| r as usize == record).map(|p| p as u32)
    }

    /// Map from dataset record to transaction node.
    pub fn record_to_txn(&self) -> std::collections::HashMap<usize, u32> {
        self.txn_record.iter().enumerate().map(|(t, &r)| (r as usize, t as u32)).collect()
    }

    pub fn virtual_name(&self, node: NodeRef) -> Option<&str> {
        match node.kind {
            NodeKind::Txn => None,
            NodeKind::Importer => self.importer_names.get(node.id as usize).map(String::as_str),
            NodeKind::HsCode => self.hs_names.get(node.id as usize).map(String::as_str),
        }
    }

    pub fn contains(&self, node: NodeRef) -> bool {
        let n = match node.kind {
            NodeKind::Txn => self.n_txn(),
            NodeKind::Importer => self.n_importers(),
            NodeKind::HsCode => self.n_hs(),
        };
        (node.id as usize) < n
    }

    pub fn degree(&self, node: NodeRef) -> usize {
        match node.kind {
            NodeKind::Txn => self.keys.len(),
            NodeKind::Importer => self.importer_adj.row(node.id as usize).len(),
            NodeKind::HsCode => self.hs_adj.row(node.id as usize).len(),
        }
    }

    /// Transactions attached to a virtual node, in txn_id order.
    pub fn virtual_members(&self, node: NodeRef) -> &[u32] {
        match node.kind {
            NodeKind::Importer => self.importer_adj.row(node.id as usize),
            NodeKind::HsCode => self.hs_adj.row(node.id as usize),
            NodeKind::Txn => &[],
        }
    }

    /// Neighbors in a stable order: a transaction lists its importer then its
    /// HS-code node; a virtual node lists its transactions by txn_id.
    pub fn neighbors(&self, node: NodeRef) -> Result<Vec<NodeRef>> {
        if !self.contains(node) {
            return Err(Error::UnknownNode(node.to_string()));
        }
        Ok(match node.kind {
            NodeKind::Txn => {
                let mut v = Vec::with_capacity(2);
                let t = node.id as usize;
                if self.txn_importer[t] != NO_KEY {
                    v.push(NodeRef::importer(self.txn_importer[t]));
                }
                if self.txn_hs[t] != NO_KEY {
                    v.push(NodeRef::hs(self.txn_hs[t]));
                }
                v
            }
            _ => self.virtual_members(node).iter().map(|&t| NodeRef::txn(t)).collect(),
        })
    }

    /// Virtual neighbors of a transaction without allocation.
    pub fn txn_keys(&self, txn: u32) -> impl Iterator<Item = NodeRef> + '_ {
        let t = txn as usize;
        let imp = self.txn_importer[t];
        let hs = self.txn_hs[t];
        (imp != NO_KEY)
            .then(|| NodeRef::importer(imp))
            .into_iter()
            .chain((hs != NO_KEY).then(|| NodeRef::hs(hs)))
    }

    /// All nodes: transactions, then importers, then HS codes.
    pub fn all_nodes(&self) -> impl Iterator<Item = NodeRef> + '_ {
        (0..self.n_txn() as u32)
            .map(NodeRef::txn)
            .chain((0..self.n_importers() as u32).map(NodeRef::importer))
            .chain((0..self.n_hs() as u32).map(NodeRef::hs))
    }

    /// Heap footprint of the adjacency, per-node tables and feature store.
    pub fn heap_bytes(&self) -> usize {
        let strings: usize =
            self.importer_names.iter().chain(&self.hs_names).map(|s| s.capacity() + 24).sum();
        self.txn_record.capacity() * 4
            + self.txn_date.capacity() * std::mem::size_of::<NaiveDate>()
            + self.txn_labeled.capacity()
            + (self.txn_importer.capacity() + self.txn_hs.capacity()) * 4
            + strings
            + self.importer_adj.heap_bytes()
            + self.hs_adj.heap_bytes()
            + self.features.heap_bytes()
    }

    /// Writes `<stem>.json` (counts) and `<stem>.bin`: each edge as two
    /// little-endian `(u32 kind, u64 id)` endpoint pairs, transaction first.
    pub fn write_edge_dump(&self, dir: &Path, stem: &str) -> Result<()> {
        let header = serde_json::json!({
            "format": "fraudgraph-edges",
            "version": 1,
            "n_txn": self.n_txn(),
            "n_importers": self.n_importers(),
            "n_hs": self.n_hs(),
            "n_edges": self.n_edges(),
            "kind_codes": {"txn": 0, "importer": 1, "hs_code": 2},
        });
        let jpath = dir.join(format!("{stem}.json"));
        std::fs::write(&jpath, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&jpath, e))?;
        let bpath = dir.join(format!("{stem}.bin"));
        let file = std::fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut put = |kind: NodeKind, id: u32| -> std::io::Result<()> {
            w.write_all(&kind.code().to_le_bytes())?;
            w.write_all(&(id as u64).to_le_bytes())
        };
        for t in 0..self.n_txn() as u32 {
            for v in self.txn_keys(t) {
                put(NodeKind::Txn, t).map_err(|e| Error::io(&bpath, e))?;
                put(v.kind, v.id).map_err(|e| Error::io(&bpath, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&bpath, e))
    }
}

/// Builds a graph over a whole dataset: all records, only labeled ones, or
/// only unlabeled ones, linked through importer and HS-code nodes.
pub fn build_graph(d: &Dataset, features: Arc<NodeFeatures>, variant: GraphVariant) -> Result<TransactionGraph> {
    let records: Vec<usize> = (0..d.len())
        .filter(|&i| match variant {
            GraphVariant::Full => true,
            GraphVariant::LabeledOnly => d.label_state(i) == LabelState::Labeled,
            GraphVariant::UnlabeledOnly => d.label_state(i) == LabelState::Unlabeled,
        })
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyGraph(format!("variant {variant:?} selects no transactions")));
    }
    TransactionGraph::from_records(d, features, &records, &[KeyKind::Importer, KeyKind::HsCode])
}

// --- sampling -------------------------------------------------------------

/// One node occurrence inside a sampled tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub node: NodeRef,
    pub depth: u8,
    pub children_start: u32,
    pub children_len: u32,
}

/// Tree rooted at one node. Slots are stored breadth-first with each slot's
/// children contiguous; slot 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSubgraph {
    pub slots: Vec<Slot>,
    /// Slot range of each hop; `hops[0]` is the root.
    pub hops: Vec<std::ops::Range<usize>>,
}

impl SampledSubgraph {
    pub fn root(&self) -> NodeRef {
        self.slots[0].node
    }

    pub fn children(&self, slot: usize) -> std::ops::Range<usize> {
        let s = &self.slots[slot];
        s.children_start as usize..(s.children_start + s.children_len) as usize
    }

    pub fn layer(&self, hop: usize) -> Vec<NodeRef> {
        self.hops[hop].clone().map(|i| self.slots[i].node).collect()
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn distinct_nodes(&self) -> usize {
        self.slots.iter().map(|s| s.node).collect::<HashSet<_>>().len()
    }
}

/// SplitMix64 finalizer; derives independent seed streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B9_B7E5);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn node_code(n: NodeRef) -> u64 {
    ((n.kind.code() as u64) << 32) | n.id as u64
}

/// Samples a `fanouts.len()`-hop tree around `root`. Each hop draws
/// `min(T_h, candidates)` distinct neighbors per parent; with a cutoff,
/// transactions dated after it are not candidates.
pub fn sample_subgraph(
    g: &TransactionGraph,
    root: NodeRef,
    fanouts: &[usize],
    seed: u64,
    history_cutoff: Option<NaiveDate>,
) -> Result<SampledSubgraph> {
    if !g.contains(root) {
        return Err(Error::UnknownNode(root.to_string()));
    }
    if fanouts.is_empty() || fanouts.contains(&0) {
        return Err(Error::InvalidArgument("fanouts must be non-empty and positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, node_code(root)));
    let mut slots = vec![Slot { node: root, depth: 0, children_start: 0, children_len: 0 }];
    let mut hops = Vec::with_capacity(fanouts.len() + 1);
    hops.push(0..1);
    let mut scratch: Vec<u32> = Vec::new();
    for (h, &fanout) in fanouts.iter().enumerate() {
        let parents = hops[h].clone();
        let start = slots.len();
        for p in parents {
            let parent = slots[p].node;
            let first_child = slots.len() as u32;
            match parent.kind {
                NodeKind::Txn => {
                    let keys: Vec<NodeRef> = g.txn_keys(parent.id).collect();
                    let chosen: Vec<NodeRef> = if keys.len() <= fanout {
                        keys
                    } else {
                        let mut idx = sample(&mut rng, keys.len(), fanout).into_vec();
                        idx.sort_unstable();
                        idx.into_iter().map(|i| keys[i]).collect()
                    };
                    for node in chosen {
                        slots.push(Slot { node, depth: (h + 1) as u8, children_start: 0, children_len: 0 });
                    }
                }
                _ => {
                    let members = g.virtual_members(parent);
                    let pool: &[u32] = match history_cutoff {
                        None => members,
                        Some(cut) => {
                            scratch.clear();
                            scratch.extend(members.iter().copied().filter(|&t| g.txn_date(t) <= cut));
                            &scratch
                        }
                    };
                    if pool.len() <= fanout {
                        for &t in pool {
                            slots.push(Slot {
                                node: NodeRef::txn(t),
                                depth: (h + 1) as u8,
                                children_start: 0,
                                children_len: 0,
                            });
                        }
                    } else {
                        let mut idx = sample(&mut rng, pool.len(), fanout).into_vec();
                        idx.sort_unstable();
                        for i in idx {
                            slots.push(Slot {
                                node: NodeRef::txn(pool[i]),
                                depth: (h + 1) as u8,
                                children_start: 0,
                                children_len: 0,
                            });
                        }
                    }
                }
            }
            slots[p].children_start = first_child;
            slots[p].children_len = slots.len() as u32 - first_child;
        }
        hops.push(start..slots.len());
    }
    Ok(SampledSubgraph { slots, hops })
}

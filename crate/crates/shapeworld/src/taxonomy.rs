use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Solid,
    Outline,
    Striped,
}

impl Fill {
    const ALL: [Fill; 3] = [Fill::Solid, Fill::Outline, Fill::Striped];

    fn name(self) -> &'static str {
        match self {
            Fill::Solid => "solid",
            Fill::Outline => "outline",
            Fill::Striped => "striped",
        }
    }
}

/// A named hue interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorFamily {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    Magenta,
}

impl ColorFamily {
    pub const ALL: [ColorFamily; 8] = [
        ColorFamily::Red,
        ColorFamily::Orange,
        ColorFamily::Yellow,
        ColorFamily::Green,
        ColorFamily::Cyan,
        ColorFamily::Blue,
        ColorFamily::Purple,
        ColorFamily::Magenta,
    ];

    /// `(center, half-width)` of the hue interval in degrees.
    pub fn hue_interval(self) -> (f64, f64) {
        match self {
            ColorFamily::Red => (0.0, 12.0),
            ColorFamily::Orange => (32.0, 10.0),
            ColorFamily::Yellow => (60.0, 10.0),
            ColorFamily::Green => (120.0, 15.0),
            ColorFamily::Cyan => (182.0, 12.0),
            ColorFamily::Blue => (228.0, 12.0),
            ColorFamily::Purple => (275.0, 12.0),
            ColorFamily::Magenta => (318.0, 12.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorFamily::Red => "red",
            ColorFamily::Orange => "orange",
            ColorFamily::Yellow => "yellow",
            ColorFamily::Green => "green",
            ColorFamily::Cyan => "cyan",
            ColorFamily::Blue => "blue",
            ColorFamily::Purple => "purple",
            ColorFamily::Magenta => "magenta",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundFamily {
    Dark,
    Muted,
    Light,
}

impl BackgroundFamily {
    const ALL: [BackgroundFamily; 3] = [BackgroundFamily::Dark, BackgroundFamily::Muted, BackgroundFamily::Light];

    /// Base grey level before jitter.
    pub fn level(self) -> f64 {
        match self {
            BackgroundFamily::Dark => 0.12,
            BackgroundFamily::Muted => 0.45,
            BackgroundFamily::Light => 0.82,
        }
    }
}

/// Rendering parameters attached to one taxonomy leaf.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub leaf: NodeId,
    pub kind: ShapeKind,
    pub fill: Fill,
    pub color: ColorFamily,
    /// Shape radius as a fraction of the image side.
    pub size: (f64, f64),
    pub background: BackgroundFamily,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub category: Option<Category>,
    /// Held out from training.
    pub ood: bool,
}

/// Requested tree shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaxonomyConfig {
    /// Edges from root to every leaf: 2 (root → group → leaf) or 3
    /// (root → group → fill → leaf).
    pub depth: usize,
    /// Superordinate shape-family groups, at most 4.
    pub groups: usize,
    /// Fill nodes under each group when `depth == 3`, 2 or 3.
    pub mids_per_group: usize,
    /// Total leaves, spread evenly over groups.
    pub leaves: usize,
    /// Held-out leaves, spread evenly over groups.
    pub ood_leaves: usize,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self { depth: 3, groups: 4, mids_per_group: 3, leaves: 32, ood_leaves: 8 }
    }
}

struct Family {
    name: &'static str,
    kind: ShapeKind,
    novel: Option<ShapeKind>,
    size: (f64, f64),
}

const FAMILIES: [Family; 4] = [
    Family { name: "curved", kind: ShapeKind::Circle, novel: Some(ShapeKind::Ring), size: (0.22, 0.36) },
    Family { name: "boxy", kind: ShapeKind::Square, novel: None, size: (0.22, 0.36) },
    Family { name: "pointed", kind: ShapeKind::Triangle, novel: None, size: (0.26, 0.40) },
    Family { name: "spoked", kind: ShapeKind::Cross, novel: Some(ShapeKind::Star), size: (0.26, 0.40) },
];

/// A rooted category tree whose leaves are image categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    depth: usize,
}

/// Builds the default-shaped tree described by `cfg`.
pub fn build_taxonomy(cfg: &TaxonomyConfig) -> Result<Taxonomy> {
    let bad = |m: String| Err(Error::Config(m));
    if !(2..=3).contains(&cfg.depth) {
        return bad(format!("depth must be 2 or 3, got {}", cfg.depth));
    }
    if cfg.leaves < 8 {
        return bad(format!("need at least 8 leaves, got {}", cfg.leaves));
    }
    if cfg.groups == 0 || cfg.groups > FAMILIES.len() {
        return bad(format!("groups must be in 1..={}, got {}", FAMILIES.len(), cfg.groups));
    }
    if cfg.leaves % cfg.groups != 0 || cfg.ood_leaves % cfg.groups != 0 {
        return bad(format!("{} leaves ({} held out) do not split evenly over {} groups", cfg.leaves, cfg.ood_leaves, cfg.groups));
    }
    let per_group = cfg.leaves / cfg.groups;
    let ood_per_group = cfg.ood_leaves / cfg.groups;
    if per_group > ColorFamily::ALL.len() {
        return bad(format!("at most {} leaves per group, got {per_group}", ColorFamily::ALL.len()));
    }
    if ood_per_group >= per_group {
        return bad("every group needs at least one training leaf".into());
    }
    let mids = if cfg.depth == 3 { cfg.mids_per_group } else { 1 };
    if cfg.depth == 3 && !(2..=Fill::ALL.len()).contains(&mids) {
        return bad(format!("mids_per_group must be 2 or 3, got {mids}"));
    }
    if cfg.depth == 3 && per_group < mids {
        return bad(format!("{per_group} leaves cannot populate {mids} fill nodes"));
    }

    let mut tax = Taxonomy { nodes: Vec::new(), depth: cfg.depth };
    let root = tax.add("entity", None, None, false);
    for (g, fam) in FAMILIES.iter().take(cfg.groups).enumerate() {
        let group = tax.add(fam.name, Some(root), None, false);
        let mid_nodes: Vec<NodeId> = if cfg.depth == 3 {
            (0..mids).map(|m| tax.add(&format!("{}-{}", fam.name, Fill::ALL[m].name()), Some(group), None, false)).collect()
        } else {
            vec![group]
        };
        for j in 0..per_group {
            let ood = j >= per_group - ood_per_group;
            let fills = if cfg.depth == 3 { mids } else { Fill::ALL.len() };
            let fill = Fill::ALL[j % fills];
            let parent = mid_nodes[if cfg.depth == 3 { j % mids } else { 0 }];
            let color = ColorFamily::ALL[(j * 3 + g * 2) % ColorFamily::ALL.len()];
            let kind = match (ood, fam.novel) {
                (true, Some(novel)) => novel,
                _ => fam.kind,
            };
            let background = BackgroundFamily::ALL[(j + g) % BackgroundFamily::ALL.len()];
            let name = format!("{}-{}-{}", color.name(), fill.name(), format!("{kind:?}").to_lowercase());
            let leaf = NodeId(tax.nodes.len());
            let cat = Category { leaf, kind, fill, color, size: fam.size, background };
            tax.add(&name, Some(parent), Some(cat), ood);
        }
    }
    tax.validate()?;
    Ok(tax)
}

impl Taxonomy {
    fn add(&mut self, name: &str, parent: Option<NodeId>, category: Option<Category>, ood: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TaxonomyNode { id, name: name.to_string(), parent, children: Vec::new(), category, ood });
        if let Some(p) = parent {
            self.nodes[p.0].children.push(id);
        }
        id
    }

    fn validate(&self) -> Result<()> {
        let roots = self.nodes.iter().filter(|n| n.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::Internal(format!("taxonomy has {roots} roots")));
        }
        let mut seen = std::collections::HashSet::new();
        for leaf in self.leaves() {
            if self.path_to_root(leaf).len() != self.depth + 1 {
                return Err(Error::Internal(format!("leaf {} is not at depth {}", leaf.0, self.depth)));
            }
            let c = self.category(leaf)?;
            if !seen.insert((c.kind, c.fill, c.color)) {
                return Err(Error::Internal(format!("attribute combination of leaf {} is not unique", leaf.0)));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Edges from the root to every leaf.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&TaxonomyNode> {
        self.nodes.get(id.0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(|n| n.category.is_some()).map(|n| n.id)
    }

    pub fn train_leaves(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.category.is_some() && !n.ood).map(|n| n.id).collect()
    }

    pub fn ood_leaves(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.category.is_some() && n.ood).map(|n| n.id).collect()
    }

    pub fn category(&self, leaf: NodeId) -> Result<&Category> {
        self.nodes.get(leaf.0).and_then(|n| n.category.as_ref()).ok_or(Error::UnknownLeaf(leaf.0))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// `[node, parent, ..., root]`.
    pub fn path_to_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur.0].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn is_ancestor(&self, ancestor: NodeId, of: NodeId) -> bool {
        ancestor != of && self.path_to_root(of).contains(&ancestor)
    }

    /// Edges on the tree path between two nodes.
    pub fn distance(&self, a: NodeId, b: NodeId) -> usize {
        let pa = self.path_to_root(a);
        let pb = self.path_to_root(b);
        for (i, x) in pa.iter().enumerate() {
            if let Some(j) = pb.iter().position(|y| y == x) {
                return i + j;
            }
        }
        unreachable!("every node reaches the root")
    }

    /// `1 / (1 + d)` where `d` is the shortest-path edge count between leaves.
    pub fn path_similarity(&self, a: NodeId, b: NodeId) -> Result<f64> {
        self.category(a)?;
        self.category(b)?;
        Ok(1.0 / (1.0 + self.distance(a, b) as f64))
    }

    /// Dense similarity matrix over `leaves`, in the given order.
    pub fn similarity_matrix(&self, leaves: &[NodeId]) -> Result<Vec<Vec<f64>>> {
        leaves.iter().map(|&a| leaves.iter().map(|&b| self.path_similarity(a, b)).collect()).collect()
    }
}

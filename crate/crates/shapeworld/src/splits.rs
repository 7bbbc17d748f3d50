use std::path::Path;

use autodiff::{par, write_checkpoint, Rng, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::render::{gen_blob, render_sample, ImageSample, RenderConfig, Split};
use crate::taxonomy::{build_taxonomy, NodeId, Taxonomy, TaxonomyConfig};

/// Images per category (or blobs in total) for each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub ood_per_category: usize,
    pub blobs: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train_per_category: 200, val_per_category: 32, ood_per_category: 32, blobs: 1024 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyJson {
    pub id: usize,
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<crate::taxonomy::Category>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub ood: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub children: Vec<TaxonomyJson>,
}

fn taxonomy_json(t: &Taxonomy, id: NodeId) -> TaxonomyJson {
    let n = t.node(id).expect("valid node");
    TaxonomyJson {
        id: id.0,
        name: n.name.clone(),
        category: n.category,
        ood: n.ood,
        children: n.children.iter().map(|c| taxonomy_json(t, *c)).collect(),
    }
}

/// Everything needed to regenerate the dataset bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub taxonomy_config: TaxonomyConfig,
    pub render: RenderConfig,
    pub counts: SplitCounts,
    pub train_categories: Vec<NodeId>,
    pub val_categories: Vec<NodeId>,
    pub ood_categories: Vec<NodeId>,
    pub render_config_hash: String,
    pub taxonomy: TaxonomyJson,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        build_taxonomy(&self.taxonomy_config)
    }

    /// Regenerates every split.
    pub fn generate(&self) -> Result<Splits> {
        let taxonomy = self.taxonomy()?;
        let train = generate_split(&taxonomy, &self.train_categories, self.counts.train_per_category, Split::Train, self.seed, &self.render)?;
        let val = generate_split(&taxonomy, &self.val_categories, self.counts.val_per_category, Split::Val, self.seed, &self.render)?;
        let ood = generate_split(&taxonomy, &self.ood_categories, self.counts.ood_per_category, Split::Ood, self.seed, &self.render)?;
        let blob = generate_blobs(self.counts.blobs, self.seed, self.render.image_size)?;
        Ok(Splits { manifest: self.clone(), taxonomy, train, val, ood, blob })
    }
}

/// Samples of one split, in generation order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<NodeId>> {
        self.samples.iter().map(|s| s.category).collect()
    }

    /// SHA-256 over ids, labels and pixel bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.sample_id.to_le_bytes());
            h.update(s.category.map_or(u64::MAX, |c| c.0 as u64).to_le_bytes());
            for v in s.pixels.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes pixels `[N, 3, H, W]`, labels and ids in the tensor container.
    pub fn write_materialized(&self, path: &Path) -> Result<()> {
        let n = self.samples.len();
        let pix: Vec<&Tensor> = self.samples.iter().map(|s| &s.pixels).collect();
        let pixels = if n == 0 { Tensor::zeros(&[0]) } else { Tensor::stack(&pix)? };
        let labels = Tensor::new(&[n], self.samples.iter().map(|s| s.category.map_or(-1.0, |c| c.0 as f64)).collect())?;
        let ids = Tensor::new(&[n], self.samples.iter().map(|s| s.sample_id as f64).collect())?;
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(f, [("pixels", &pixels), ("labels", &labels), ("sample_ids", &ids)])?;
        Ok(())
    }
}

/// All splits plus the taxonomy they were drawn from.
#[derive(Clone, Debug)]
pub struct Splits {
    pub manifest: DatasetManifest,
    pub taxonomy: Taxonomy,
    pub train: Dataset,
    pub val: Dataset,
    pub ood: Dataset,
    pub blob: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Ood => &self.ood,
            Split::Blob => &self.blob,
        }
    }
}

fn sample_id(split: Split, index: usize) -> u64 {
    (split.tag() << 40) | index as u64
}

fn generate_split(taxonomy: &Taxonomy, cats: &[NodeId], per_cat: usize, split: Split, seed: u64, render: &RenderConfig) -> Result<Dataset> {
    let n = cats.len() * per_cat;
    let samples = par::map_range(n, |i| {
        let id = sample_id(split, i);
        let mut rng = Rng::stream(seed, &[split.tag(), i as u64]);
        let cat = taxonomy.category(cats[i % cats.len()])?;
        let mut s = render_sample(cat, &mut rng, render)?;
        s.sample_id = id;
        s.split = split;
        Ok(s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { split, samples })
}

/// `count` noise images drawn from per-sample streams of `seed`.
pub fn generate_blobs(count: usize, seed: u64, size: usize) -> Result<Dataset> {
    let samples = par::map_range(count, |i| {
        let mut rng = Rng::stream(seed, &[Split::Blob.tag(), i as u64]);
        let mut s = gen_blob(&mut rng, size)?;
        s.sample_id = sample_id(Split::Blob, i);
        Ok(s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { split: Split::Blob, samples })
}

fn config_hash(tc: &TaxonomyConfig, render: &RenderConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(tc)?);
    h.update(serde_json::to_vec(render)?);
    Ok(h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Assigns categories to splits and generates every sample. Each sample draws
/// from its own `(seed, split, index)` stream, so parallel and serial
/// generation agree bit for bit.
pub fn make_splits(taxonomy_config: &TaxonomyConfig, counts: &SplitCounts, render: &RenderConfig, seed: u64) -> Result<Splits> {
    if counts.train_per_category == 0 || counts.val_per_category == 0 {
        return Err(Error::Config("train and val counts must be positive".into()));
    }
    let taxonomy = build_taxonomy(taxonomy_config)?;
    let train_categories = taxonomy.train_leaves();
    let ood_categories = taxonomy.ood_leaves();
    if train_categories.iter().any(|c| ood_categories.contains(c)) {
        return Err(Error::Internal("a category is assigned to both train and OOD".into()));
    }
    let manifest = DatasetManifest {
        seed,
        taxonomy_config: taxonomy_config.clone(),
        render: render.clone(),
        counts: counts.clone(),
        val_categories: train_categories.clone(),
        train_categories,
        ood_categories,
        render_config_hash: config_hash(taxonomy_config, render)?,
        taxonomy: taxonomy_json(&taxonomy, taxonomy.root()),
    };
    manifest.generate()
}

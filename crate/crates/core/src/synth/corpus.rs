use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bucket::{BucketGrid, BucketKey, DEFAULT_AREAS, DEFAULT_EDGES};
use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::prompt::PromptBundle;
use crate::rgba::{read_image, write_image, ImageFormat, LayeredDesign};

use super::{gen_design, DesignSpec, MAX_SYNTH_LAYERS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    pub areas: Vec<usize>,
    pub ar_range: (f64, f64),
    /// Layer counts drawn uniformly per sample.
    pub layer_counts: Vec<usize>,
    pub edges: Vec<f64>,
    /// Image sides are multiples of this (the autoencoder's factor).
    pub multiple: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 16,
            seed: 0,
            areas: DEFAULT_AREAS.to_vec(),
            ar_range: (0.5, 2.0),
            layer_counts: vec![0, 1, 2, 3, 4],
            edges: DEFAULT_EDGES.to_vec(),
            multiple: 8,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        let (lo, hi) = self.ar_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("bad aspect-ratio range {:?}", self.ar_range));
        }
        if self.layer_counts.is_empty() || self.layer_counts.iter().any(|&n| n > MAX_SYNTH_LAYERS) {
            return bad(format!("layer counts must be in 0..={MAX_SYNTH_LAYERS}"));
        }
        if self.multiple == 0 || self.areas.is_empty() || self.areas.iter().any(|&a| a < self.multiple * self.multiple) {
            return bad("areas must hold at least one multiple-sized tile".into());
        }
        BucketGrid::new(&self.edges, &self.areas, self.multiple).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub spec: DesignSpec,
    pub design: LayeredDesign,
    pub bundle: PromptBundle,
    pub bucket: BucketKey,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    /// Bucket of each sample, in corpus order.
    pub assignments: Vec<BucketKey>,
    /// `"layers/edge/area"` to sample count.
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<SynthSample>,
    pub report: BucketReport,
}

fn snap(x: f64, m: usize) -> usize {
    ((x / m as f64).floor() as usize).max(1) * m
}

/// Generate `config.count` designs. Sample `i` depends only on the seed and
/// `i`.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let grid = BucketGrid::new(&config.edges, &config.areas, config.multiple)?;
    let mut samples = Vec::with_capacity(config.count);
    let mut counts = BTreeMap::new();
    for i in 0..config.count {
        let mut rng = Rng::stream(config.seed, i as u64);
        let n = config.layer_counts[rng.below(config.layer_counts.len())];
        let area = config.areas[rng.below(config.areas.len())] as f64;
        let (lo, hi) = config.ar_range;
        let ar = if lo == hi { lo } else { rng.uniform_range(lo, hi) };
        let h = snap((area / ar).sqrt(), config.multiple);
        let w = snap((area * ar).sqrt(), config.multiple);
        let spec = DesignSpec::sample(rng.next_u64(), n, w, h)?;
        let (design, bundle) = gen_design(&spec)?;
        let bucket = grid.assign(n, h, w)?;
        *counts
            .entry(format!("{}/{}/{}", bucket.layer_count, bucket.edge, bucket.area))
            .or_insert(0) += 1;
        samples.push(SynthSample {
            spec,
            design,
            bundle,
            bucket,
        });
    }
    let assignments = samples.iter().map(|s| s.bucket).collect();
    Ok(Corpus {
        samples,
        report: BucketReport { assignments, counts },
    })
}

/// One line of the corpus manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub index: usize,
    pub seed: u64,
    pub n_layers: usize,
    pub width: usize,
    pub height: usize,
    pub aspect_ratio: f64,
    pub bucket: (usize, usize, usize),
    pub composite: String,
    pub layers: Vec<String>,
    pub bundle: PromptBundle,
}

fn records(corpus: &Corpus, format: ImageFormat) -> Vec<ManifestRecord> {
    let ext = format.extension();
    corpus
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestRecord {
            index: i,
            seed: s.spec.seed,
            n_layers: s.design.n_layers(),
            width: s.spec.width,
            height: s.spec.height,
            aspect_ratio: s.design.aspect_ratio(),
            bucket: (s.bucket.layer_count, s.bucket.edge, s.bucket.area),
            composite: format!("images/{i:05}_composite.{ext}"),
            layers: (0..s.design.n_layers())
                .map(|k| format!("images/{i:05}_layer{}.{ext}", k + 1))
                .collect(),
            bundle: s.bundle.clone(),
        })
        .collect()
}

fn manifest_bytes(records: &[ManifestRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest records serialize");
        out.push(b'\n');
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the manifest the corpus would be written with.
pub fn manifest_hash(corpus: &Corpus, format: ImageFormat) -> String {
    hex(&Sha256::digest(manifest_bytes(&records(corpus, format))))
}

/// Write images and `manifest.jsonl` under `dir`; returns the manifest hash.
pub fn write_corpus(corpus: &Corpus, dir: &Path, format: ImageFormat) -> Result<String> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let recs = records(corpus, format);
    for (r, s) in recs.iter().zip(&corpus.samples) {
        write_image(&s.design.composite, dir.join(&r.composite))?;
        for (p, layer) in r.layers.iter().zip(&s.design.layers) {
            write_image(layer, dir.join(p))?;
        }
    }
    let bytes = manifest_bytes(&recs);
    let path = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub record: ManifestRecord,
    pub design: LayeredDesign,
}

/// Load a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusEntry>> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        let composite = read_image(dir.join(&record.composite))?;
        let layers = record
            .layers
            .iter()
            .map(|p| read_image(dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let design = LayeredDesign::new(
            composite,
            layers,
            record.bundle.scene_description.clone(),
            record.bundle.layer_captions.clone(),
        )?;
        out.push(CorpusEntry { record, design });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            count: 12,
            seed: 5,
            areas: vec![32 * 32, 48 * 48],
            ..Default::default()
        }
    }

    #[test]
    fn every_sample_gets_a_bucket() {
        let c = gen_corpus(&small()).unwrap();
        assert_eq!(c.report.assignments.len(), 12);
        assert_eq!(c.report.counts.values().sum::<usize>(), 12);
        for s in &c.samples {
            assert_eq!(s.spec.width % 8, 0);
            assert_eq!(s.spec.height % 8, 0);
        }
    }

    #[test]
    fn same_seed_same_hash() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(manifest_hash(&a, ImageFormat::Lrga), manifest_hash(&b, ImageFormat::Lrga));
        let c = gen_corpus(&CorpusConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(manifest_hash(&a, ImageFormat::Lrga), manifest_hash(&c, ImageFormat::Lrga));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(gen_corpus(&CorpusConfig { count: 0, ..small() }).is_err());
        assert!(gen_corpus(&CorpusConfig {
            layer_counts: vec![9],
            ..small()
        })
        .is_err());
        assert!(gen_corpus(&CorpusConfig {
            ar_range: (2.0, 1.0),
            ..small()
        })
        .is_err());
    }
}

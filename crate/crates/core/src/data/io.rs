//! Triplet JSONL files and the "NCT1" image store.
//!
//! A dataset directory holds `train.jsonl`, `val.jsonl`, `images.nct`,
//! `images.idx` and `generator.json`. Each image record in `images.nct` is
//! magic `NCT1`, `u32` rank, `u32` dims, `f32` LE payload (`[H, W, C]`);
//! `images.idx` has one `id<TAB>byte offset` line per record.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{render_scene, Edit, GeneratorConfig, Triplet};
use super::DataError;
use crate::diffcore::{read_tensor_body, write_tensor_body, DiffError, Tensor};
use crate::encoders::ImageGrid;

pub const IMAGE_MAGIC: &[u8; 4] = b"NCT1";

/// One line of a triplet file. `edit` and `concept_patches` are optional so
/// externally produced exports can omit ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub ref_image: String,
    pub tgt_image: String,
    pub modifier: String,
    #[serde(default)]
    pub concepts: BTreeSet<String>,
    #[serde(default)]
    pub edit: Option<Edit>,
    #[serde(default)]
    pub concept_patches: BTreeMap<String, Vec<usize>>,
}

impl From<&Triplet> for TripletRecord {
    fn from(t: &Triplet) -> Self {
        Self {
            id: t.id.clone(),
            ref_image: t.ref_image.clone(),
            tgt_image: t.tgt_image.clone(),
            modifier: t.modifier.clone(),
            concepts: t.text_concepts.clone(),
            edit: Some(t.edit.clone()),
            concept_patches: t.concept_patches.clone(),
        }
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn write_triplets(path: &Path, records: &[TripletRecord]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets(path: &Path) -> Result<Vec<TripletRecord>, DataError> {
    let r = BufReader::new(File::open(path).map_err(|e| format_err(path, e.to_string()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn diff_to_data(path: &Path, e: DiffError) -> DataError {
    match e {
        DiffError::Io(e) => DataError::Io(e),
        other => format_err(path, other.to_string()),
    }
}

/// Appends images to an `NCT1` store and records their offsets.
pub struct ImageStoreWriter {
    data: BufWriter<File>,
    offset: u64,
    index: Vec<(String, u64)>,
    index_path: std::path::PathBuf,
}

impl ImageStoreWriter {
    pub fn create(data_path: &Path, index_path: &Path) -> Result<Self, DataError> {
        Ok(Self {
            data: BufWriter::new(File::create(data_path)?),
            offset: 0,
            index: Vec::new(),
            index_path: index_path.to_path_buf(),
        })
    }

    pub fn push(&mut self, id: &str, image: &ImageGrid) -> Result<(), DataError> {
        if id.contains(['\t', '\n']) {
            return Err(DataError::Config(format!("image id {id:?} contains a tab or newline")));
        }
        let t = image.to_tensor();
        let mut buf = Vec::with_capacity(16 + t.len() * 4);
        buf.extend_from_slice(IMAGE_MAGIC);
        write_tensor_body(&mut buf, &t).map_err(|e| diff_to_data(&self.index_path, e))?;
        self.data.write_all(&buf)?;
        self.index.push((id.to_string(), self.offset));
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), DataError> {
        self.data.flush()?;
        let mut w = BufWriter::new(File::create(&self.index_path)?);
        for (id, off) in &self.index {
            writeln!(w, "{id}\t{off}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// All images of a dataset, keyed by id.
#[derive(Clone, Debug, Default)]
pub struct ImageStore {
    images: BTreeMap<String, ImageGrid>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: ImageGrid) {
        self.images.insert(id.into(), image);
    }

    pub fn get(&self, id: &str) -> Result<&ImageGrid, DataError> {
        self.images.get(id).ok_or_else(|| DataError::Missing {
            kind: "image",
            id: id.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    pub fn load(data_path: &Path, index_path: &Path) -> Result<Self, DataError> {
        let index = BufReader::new(File::open(index_path).map_err(|e| format_err(index_path, e.to_string()))?);
        let mut data = BufReader::new(File::open(data_path).map_err(|e| format_err(data_path, e.to_string()))?);
        let mut images = BTreeMap::new();
        for (i, line) in index.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, off) = line
                .split_once('\t')
                .ok_or_else(|| format_err(index_path, format!("line {}: expected id<TAB>offset", i + 1)))?;
            let off: u64 = off
                .trim()
                .parse()
                .map_err(|_| format_err(index_path, format!("line {}: bad offset {off:?}", i + 1)))?;
            data.seek(SeekFrom::Start(off))?;
            let mut magic = [0u8; 4];
            data.read_exact(&mut magic)?;
            if &magic != IMAGE_MAGIC {
                return Err(format_err(data_path, format!("bad magic at offset {off} for {id:?}")));
            }
            let t: Tensor = read_tensor_body(&mut data).map_err(|e| diff_to_data(data_path, e))?;
            let img = ImageGrid::from_tensor(&t).map_err(|e| format_err(data_path, format!("{id}: {e}")))?;
            images.insert(id.to_string(), img);
        }
        Ok(Self { images })
    }
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TripletRecord>,
    pub val: Vec<TripletRecord>,
    pub images: ImageStore,
    pub generator: Option<GeneratorConfig>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let images = ImageStore::load(&dir.join("images.nct"), &dir.join("images.idx"))?;
        let train = read_triplets(&dir.join("train.jsonl"))?;
        let val = read_triplets(&dir.join("val.jsonl"))?;
        let gen_path = dir.join("generator.json");
        let generator = if gen_path.exists() {
            Some(serde_json::from_reader(BufReader::new(File::open(gen_path)?))?)
        } else {
            None
        };
        let ds = Self {
            train,
            val,
            images,
            generator,
        };
        ds.check_images()?;
        Ok(ds)
    }

    fn check_images(&self) -> Result<(), DataError> {
        for t in self.train.iter().chain(&self.val) {
            self.images.get(&t.ref_image)?;
            self.images.get(&t.tgt_image)?;
        }
        Ok(())
    }

    /// Renders generated splits in memory.
    pub fn from_generated(cfg: &GeneratorConfig, train: &[Triplet], val: &[Triplet]) -> Self {
        let mut images = ImageStore::new();
        for t in train.iter().chain(val) {
            if !images.images.contains_key(&t.ref_image) {
                images.insert(t.ref_image.clone(), render_scene(&t.reference, cfg, t.ref_noise_seed));
            }
            images.insert(t.tgt_image.clone(), render_scene(&t.target, cfg, t.tgt_noise_seed));
        }
        Self {
            train: train.iter().map(TripletRecord::from).collect(),
            val: val.iter().map(TripletRecord::from).collect(),
            images,
            generator: Some(cfg.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        write_triplets(&dir.join("train.jsonl"), &self.train)?;
        write_triplets(&dir.join("val.jsonl"), &self.val)?;
        let mut w = ImageStoreWriter::create(&dir.join("images.nct"), &dir.join("images.idx"))?;
        for (id, img) in &self.images.images {
            w.push(id, img)?;
        }
        w.finish()?;
        if let Some(g) = &self.generator {
            let f = BufWriter::new(File::create(dir.join("generator.json"))?);
            serde_json::to_writer_pretty(f, g)?;
        }
        Ok(())
    }
}

/// Renders and saves generated splits to `dir`.
pub fn write_dataset(dir: &Path, cfg: &GeneratorConfig, train: &[Triplet], val: &[Triplet]) -> Result<Dataset, DataError> {
    let ds = Dataset::from_generated(cfg, train, val);
    ds.save(dir)?;
    Ok(ds)
}

//! Dataset shards and their on-disk layout.
//!
//! A shard directory holds `meta.json`, `clips.f32` (`[count, 64, 16]`),
//! `semantics.f32` (`[count, 16, 32]`) and `prompts.jsonl` (one token list
//! per line, index-aligned). Arrays are little-endian `f32`, row-major.
//! In memory every value is already rounded to `f32`, so a shard loaded from
//! disk is identical to the one that was generated.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowplan_core::rng::stream;
use flowplan_core::Tensor;

use crate::error::WorldError;
use crate::oracle::encode_semantics;
use crate::prompt::{encode_prompt, sample_prompt, Grammar, PromptSpec};
use crate::render::render_clip;
use crate::timeline::realize_timeline;
use crate::{CHANNELS, COND_DIM, FRAMES, NUM_CLASSES, SEM_DIM, SEM_FRAMES};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const CLIP_LEN: usize = FRAMES * CHANNELS;
const SEM_LEN: usize = SEM_FRAMES * SEM_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub frames: usize,
    pub channels: usize,
    pub sem_frames: usize,
    pub sem_dim: usize,
    pub num_classes: usize,
}

impl Dims {
    pub fn current() -> Self {
        Self {
            frames: FRAMES,
            channels: CHANNELS,
            sem_frames: SEM_FRAMES,
            sem_dim: SEM_DIM,
            num_classes: NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub grammar: Grammar,
    pub dims: Dims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    clips: Vec<f64>,
    semantics: Vec<f64>,
    prompts: Vec<PromptSpec>,
    conditions: Vec<f64>,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl Dataset {
    /// Generate `count` clips. Clip `i` draws from stream `i` of the
    /// generator seeded by `seed`, so clips are independent of each other
    /// and of the thread schedule.
    pub fn generate(count: usize, seed: u64, grammar: &Grammar) -> Result<Self, WorldError> {
        if count == 0 {
            return Err(WorldError::Dataset("count must be at least 1".into()));
        }
        let items: Vec<(PromptSpec, Vec<f64>, Vec<f64>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, i as u64);
                let prompt = sample_prompt(&mut rng, grammar);
                let timeline = realize_timeline(&prompt, grammar, &mut rng);
                let clip = render_clip(&timeline, grammar, seed, &mut rng);
                let mut spec = clip.spectrogram;
                round_f32(spec.data_mut());
                let mut sem = encode_semantics(&spec)?.0;
                round_f32(sem.data_mut());
                Ok((prompt, spec.into_data(), sem.into_data()))
            })
            .collect::<Result<_, WorldError>>()?;

        let mut clips = Vec::with_capacity(count * CLIP_LEN);
        let mut semantics = Vec::with_capacity(count * SEM_LEN);
        let mut prompts = Vec::with_capacity(count);
        for (p, c, s) in items {
            prompts.push(p);
            clips.extend(c);
            semantics.extend(s);
        }
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            count,
            seed,
            grammar: *grammar,
            dims: Dims::current(),
        };
        Self::assemble(meta, clips, semantics, prompts)
    }

    fn assemble(
        meta: DatasetMeta,
        clips: Vec<f64>,
        semantics: Vec<f64>,
        prompts: Vec<PromptSpec>,
    ) -> Result<Self, WorldError> {
        let n = meta.count;
        if clips.len() != n * CLIP_LEN || semantics.len() != n * SEM_LEN || prompts.len() != n {
            return Err(WorldError::Dataset(format!(
                "array sizes do not match count {n}: {} clip values, {} semantic values, {} prompts",
                clips.len(),
                semantics.len(),
                prompts.len()
            )));
        }
        let mut conditions = Vec::with_capacity(n * COND_DIM);
        for p in &prompts {
            conditions.extend(encode_prompt(p)?.flatten());
        }
        Ok(Self {
            meta,
            clips,
            semantics,
            prompts,
            conditions,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.count
    }

    pub fn is_empty(&self) -> bool {
        self.meta.count == 0
    }

    pub fn clip_slice(&self, i: usize) -> &[f64] {
        &self.clips[i * CLIP_LEN..(i + 1) * CLIP_LEN]
    }

    /// `[FRAMES, CHANNELS]`
    pub fn clip(&self, i: usize) -> Tensor {
        Tensor::from_parts(&[FRAMES, CHANNELS], self.clip_slice(i).to_vec()).expect("clip shape")
    }

    pub fn semantics_slice(&self, i: usize) -> &[f64] {
        &self.semantics[i * SEM_LEN..(i + 1) * SEM_LEN]
    }

    /// `[SEM_FRAMES, SEM_DIM]`
    pub fn semantics(&self, i: usize) -> Tensor {
        Tensor::from_parts(&[SEM_FRAMES, SEM_DIM], self.semantics_slice(i).to_vec()).expect("semantics shape")
    }

    pub fn prompt(&self, i: usize) -> &PromptSpec {
        &self.prompts[i]
    }

    pub fn prompts(&self) -> &[PromptSpec] {
        &self.prompts
    }

    /// Flattened prompt condition, length [`COND_DIM`].
    pub fn condition(&self, i: usize) -> &[f64] {
        &self.conditions[i * COND_DIM..(i + 1) * COND_DIM]
    }

    /// Write the shard into `dir`. An existing non-empty directory is an
    /// error unless `force` is set.
    pub fn save(&self, dir: &Path, force: bool) -> Result<(), WorldError> {
        if dir.exists() {
            let non_empty = fs::read_dir(dir).map_err(WorldError::io(dir))?.next().is_some();
            if non_empty && !force {
                return Err(WorldError::OutputNotEmpty(dir.to_path_buf()));
            }
        }
        fs::create_dir_all(dir).map_err(WorldError::io(dir))?;

        let meta_path = dir.join("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|source| WorldError::Json {
            path: meta_path.clone(),
            source,
        })?;
        fs::write(&meta_path, meta + "\n").map_err(WorldError::io(&meta_path))?;
        write_f32(&dir.join("clips.f32"), &self.clips)?;
        write_f32(&dir.join("semantics.f32"), &self.semantics)?;

        let prompts_path = dir.join("prompts.jsonl");
        let mut out = Vec::new();
        for p in &self.prompts {
            serde_json::to_writer(&mut out, p).map_err(|source| WorldError::Json {
                path: prompts_path.clone(),
                source,
            })?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(&prompts_path).map_err(WorldError::io(&prompts_path))?;
        f.write_all(&out).map_err(WorldError::io(&prompts_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, WorldError> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(WorldError::io(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| WorldError::Json {
            path: meta_path.clone(),
            source,
        })?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(WorldError::Dataset(format!(
                "format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        if meta.dims != Dims::current() {
            return Err(WorldError::Dataset(format!(
                "dimensions {:?} differ from this build's {:?}",
                meta.dims,
                Dims::current()
            )));
        }
        let clips = read_f32(&dir.join("clips.f32"))?;
        let semantics = read_f32(&dir.join("semantics.f32"))?;
        let prompts_path = dir.join("prompts.jsonl");
        let text = fs::read_to_string(&prompts_path).map_err(WorldError::io(&prompts_path))?;
        let mut prompts = Vec::with_capacity(meta.count);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let tokens: Vec<u8> = serde_json::from_str(line).map_err(|source| WorldError::Json {
                path: prompts_path.clone(),
                source,
            })?;
            prompts.push(PromptSpec::new(tokens)?);
        }
        Self::assemble(meta, clips, semantics, prompts)
    }
}

/// Generate a shard and write it to `out_dir`.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    grammar: &Grammar,
    out_dir: &Path,
    force: bool,
) -> Result<Dataset, WorldError> {
    let ds = Dataset::generate(count, seed, grammar)?;
    ds.save(out_dir, force)?;
    Ok(ds)
}

fn write_f32(path: &Path, values: &[f64]) -> Result<(), WorldError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(WorldError::io(path))
}

fn read_f32(path: &Path) -> Result<Vec<f64>, WorldError> {
    let bytes = fs::read(path).map_err(WorldError::io(path))?;
    if bytes.len() % 4 != 0 {
        return Err(WorldError::Dataset(format!(
            "{} has a length that is not a multiple of 4",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

//! Class-knowledge semantic injection.
//!
//! Each category gets a learnable query vector initialized from a text
//! embedding of its description. Queries attend over the spatial tokens of
//! every pyramid level; each attention row, rescaled so uniform attention
//! is the identity, reweights the level into a per-class activated map.
//! Sampling those maps at the deformed proposals and aggregating across
//! classes and levels yields per-proposal class logits, supervised with a
//! background-downweighted cross-entropy.
//!
//! Embeddings come from a file produced offline or from a deterministic
//! pseudo encoder (seeded hash of the description bytes), so nothing here
//! depends on an external model.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Var};
use crate::backbone::{FeaturePyramid, LEVEL_STRIDES};
use crate::dgpom::bilinear_sample;
use crate::error::{Error, Result};
use crate::params::{fnv1a64, init_normal, seeded_rng, MountedParams, ParamStore};
use crate::tensor::Tensor;

/// Attention and head dimensions.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CksimConfig {
    /// Number of foreground classes `C`.
    pub classes: usize,
    /// Pyramid channel count.
    pub channels: usize,
    /// Attention dimension `d`.
    pub attn_dim: usize,
    /// Knowledge embedding dimension `C_k`.
    pub knowledge_dim: usize,
    /// Use one key/value projection for all levels instead of per-level.
    pub share_level_projections: bool,
}

impl Default for CksimConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 16,
            attn_dim: 64,
            knowledge_dim: 64,
            share_level_projections: false,
        }
    }
}

impl CksimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.channels == 0 || self.attn_dim == 0 || self.knowledge_dim == 0
        {
            return Err(Error::Config(
                "cksim dimensions must all be positive".into(),
            ));
        }
        Ok(())
    }

    fn level_key(&self, l: usize) -> (String, String) {
        if self.share_level_projections {
            ("cksim.shared.wk".into(), "cksim.shared.wv".into())
        } else {
            (format!("cksim.l{l}.wk"), format!("cksim.l{l}.wv"))
        }
    }
}

/// Where an embedding matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    File,
    Pseudo,
}

/// Row-normalized category knowledge matrix, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEmbedding {
    matrix: Tensor,
    source: EmbeddingSource,
}

impl KnowledgeEmbedding {
    /// `[C, C_k]` matrix with unit-norm rows.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }
}

fn normalize_rows(mut matrix: Tensor) -> Result<Tensor> {
    let (c, k) = (matrix.rows(), matrix.cols());
    for i in 0..c {
        let norm: f64 = matrix.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric(format!(
                "embedding row {i} cannot be normalized (norm {norm})"
            )));
        }
        for j in 0..k {
            let v = matrix.at2(i, j) / norm;
            matrix.set2(i, j, v);
        }
    }
    Ok(matrix)
}

/// Deterministic stand-in for a text encoder: each description's bytes seed
/// an RNG that fills a `dim`-vector, then rows are L2-normalized. Identical
/// descriptions produce identical rows.
pub fn encode_descriptions_pseudo(descriptions: &[String], dim: usize) -> Result<KnowledgeEmbedding> {
    if descriptions.is_empty() || dim == 0 {
        return Err(Error::Argument("need at least one description and dim > 0".into()));
    }
    let mut matrix = Tensor::zeros(&[descriptions.len(), dim]);
    for (i, text) in descriptions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.as_bytes()));
        for j in 0..dim {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            matrix.set2(i, j, z);
        }
    }
    Ok(KnowledgeEmbedding {
        matrix: normalize_rows(matrix)?,
        source: EmbeddingSource::Pseudo,
    })
}

/// Reads an embedding file: ASCII header line `C C_k`, then `C·C_k`
/// little-endian f32 values, row-major. Rows are re-normalized on load, so
/// any pre-normalization scaling of a row is irrelevant.
pub fn load_embedding_file(path: &Path, expected_classes: usize) -> Result<KnowledgeEmbedding> {
    let load_err = |message: String| Error::Load {
        path: path.to_path_buf(),
        message,
    };
    let mut file = std::fs::File::open(path).map_err(|e| load_err(e.to_string()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| load_err("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| load_err("header is not ASCII".into()))?;
    let mut it = header.split_whitespace();
    let c: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| load_err("header must be `C C_k`".into()))?;
    let k: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| load_err("header must be `C C_k`".into()))?;
    if c != expected_classes {
        return Err(Error::Consistency(format!(
            "embedding file has {c} rows, expected {expected_classes}"
        )));
    }
    let body = &bytes[newline + 1..];
    if body.len() != c * k * 4 {
        return Err(load_err(format!(
            "expected {} bytes of f32 data, found {}",
            c * k * 4,
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(c * k);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "embedding file {} contains non-finite values",
                path.display()
            )));
        }
        data.push(v as f64);
    }
    Ok(KnowledgeEmbedding {
        matrix: normalize_rows(Tensor::from_vec(&[c, k], data))?,
        source: EmbeddingSource::File,
    })
}

/// Writes the binary embedding format plus a `<file>.json` sidecar with the
/// class names in row order.
pub fn write_embedding_file(path: &Path, matrix: &Tensor, class_names: &[String]) -> Result<()> {
    let (c, k) = (matrix.rows(), matrix.cols());
    if class_names.len() != c {
        return Err(Error::Consistency(format!(
            "{} class names for {c} embedding rows",
            class_names.len()
        )));
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{c} {k}")?;
    for &v in matrix.data() {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&class_names)?)?;
    Ok(())
}

/// `<file>.json` companion listing class names in row order.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// CK-SIM parameters. The class query is initialized to the knowledge
/// embedding values exactly.
pub fn init_cksim(
    config: &CksimConfig,
    embedding: &KnowledgeEmbedding,
    seed: u64,
) -> Result<ParamStore> {
    config.validate()?;
    if embedding.classes() != config.classes || embedding.dim() != config.knowledge_dim {
        return Err(Error::Consistency(format!(
            "embedding is {}x{}, config wants {}x{}",
            embedding.classes(),
            embedding.dim(),
            config.classes,
            config.knowledge_dim
        )));
    }
    let mut store = ParamStore::new();
    store.insert("cksim.query", embedding.matrix().clone());
    let name = "cksim.wq";
    store.insert(
        name,
        init_normal(
            &[config.knowledge_dim, config.attn_dim],
            config.knowledge_dim,
            &mut seeded_rng(seed, name),
        ),
    );
    let levels = if config.share_level_projections { 1 } else { 3 };
    for l in 0..levels {
        let (wk, wv) = config.level_key(l);
        store.insert(
            wk.clone(),
            init_normal(
                &[config.channels, config.attn_dim],
                config.channels,
                &mut seeded_rng(seed, &wk),
            ),
        );
        store.insert(
            wv.clone(),
            init_normal(
                &[config.channels, config.attn_dim],
                config.channels,
                &mut seeded_rng(seed, &wv),
            ),
        );
    }
    let agg_in = config.classes * 3 * config.channels;
    let name = "cksim.agg.w";
    store.insert(
        name,
        init_normal(&[agg_in, config.channels], agg_in, &mut seeded_rng(seed, name)),
    );
    store.insert("cksim.agg.b", Tensor::zeros(&[config.channels]));
    let name = "cksim.head.w";
    store.insert(
        name,
        init_normal(
            &[config.channels, config.classes + 1],
            config.channels,
            &mut seeded_rng(seed, name),
        ),
    );
    store.insert("cksim.head.b", Tensor::zeros(&[config.classes + 1]));
    Ok(store)
}

/// Fallback classification head on the regression embedding, used when
/// semantic injection is disabled.
pub fn init_plain_head(classes: usize, channels: usize, seed: u64) -> Result<ParamStore> {
    if classes == 0 || channels == 0 {
        return Err(Error::Config("head dimensions must be positive".into()));
    }
    let mut store = ParamStore::new();
    let name = "plainhead.fc0.w";
    store.insert(
        name,
        init_normal(&[3 * channels, channels], 3 * channels, &mut seeded_rng(seed, name)),
    );
    store.insert("plainhead.fc0.b", Tensor::zeros(&[channels]));
    let name = "plainhead.fc1.w";
    store.insert(
        name,
        init_normal(&[channels, classes + 1], channels, &mut seeded_rng(seed, name)),
    );
    store.insert("plainhead.fc1.b", Tensor::zeros(&[classes + 1]));
    Ok(store)
}

/// Per-level attention products of the class queries.
pub struct ActivatedPyramid<'t> {
    /// Row-stochastic attention per level, `[C, h_l·w_l]`.
    pub attention: [Var<'t>; 3],
    /// Value projections per level, `[h_l·w_l, d]`.
    pub values: [Var<'t>; 3],
    /// `maps[l][i]`: class-`i` activated map at level `l`, `[C_I, h_l, w_l]`.
    pub maps: Vec<Vec<Var<'t>>>,
}

/// Attention of one query set over one level's tokens; returns the
/// attention matrix, the value projection, and the per-class activated maps.
fn activate_level<'t>(
    q_prime: Var<'t>,
    level: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
) -> (Var<'t>, Var<'t>, Vec<Var<'t>>) {
    let shape = level.shape();
    let tokens_n = shape[1] * shape[2];
    let d = q_prime.shape()[1];
    let tokens = level.flatten_spatial().transpose(); // [T, C_I]
    let keys = tokens.matmul(wk); // [T, d]
    let values = tokens.matmul(wv); // [T, d]
    let logits = q_prime.matmul(keys.transpose()).scale(1.0 / (d as f64).sqrt());
    let attention = logits.softmax_rows(); // [C, T]
    let classes = attention.shape()[0];
    // rescale by T so uniform attention reproduces the level unchanged
    let maps = (0..classes)
        .map(|i| level.spatial_scale(attention.slice_row(i), tokens_n as f64))
        .collect();
    (attention, values, maps)
}

/// Class-aware activation of the whole pyramid (queries → attention →
/// per-class maps at every level).
pub fn class_activate_pyramid<'t>(
    params: &MountedParams<'t>,
    pyramid: &FeaturePyramid<'t>,
    config: &CksimConfig,
) -> ActivatedPyramid<'t> {
    let q_prime = params.var("cksim.query").matmul(params.var("cksim.wq"));
    let mut attention = Vec::with_capacity(3);
    let mut values = Vec::with_capacity(3);
    let mut maps = Vec::with_capacity(3);
    for (l, level) in pyramid.levels.iter().enumerate() {
        let (wk, wv) = config.level_key(l);
        let (a, v, m) = activate_level(q_prime, *level, params.var(&wk), params.var(&wv));
        attention.push(a);
        values.push(v);
        maps.push(m);
    }
    ActivatedPyramid {
        attention: [attention[0], attention[1], attention[2]],
        values: [values[0], values[1], values[2]],
        maps,
    }
}

/// Samples every class-activated map at the deformed proposals, concatenates
/// across levels and classes, aggregates, and produces `[K, C+1]` logits.
pub fn classify_proposals<'t>(
    params: &MountedParams<'t>,
    activated: &ActivatedPyramid<'t>,
    deformed: Var<'t>,
    config: &CksimConfig,
) -> Result<Var<'t>> {
    let mut parts = Vec::with_capacity(3 * config.classes);
    for (l, stride) in LEVEL_STRIDES.iter().enumerate() {
        for map in &activated.maps[l] {
            parts.push(bilinear_sample(*map, deformed, *stride)?);
        }
    }
    let features = Var::concat_cols(&parts);
    let hidden = autodiff::linear(features, params.var("cksim.agg.w"), params.var("cksim.agg.b"))
        .relu();
    Ok(autodiff::linear(
        hidden,
        params.var("cksim.head.w"),
        params.var("cksim.head.b"),
    ))
}

/// Plain classification head over the regression embedding `[K, 3·C_I]`.
pub fn plain_classify<'t>(params: &MountedParams<'t>, embedding: Var<'t>) -> Var<'t> {
    let hidden = autodiff::linear(
        embedding,
        params.var("plainhead.fc0.w"),
        params.var("plainhead.fc0.b"),
    )
    .relu();
    autodiff::linear(hidden, params.var("plainhead.fc1.w"), params.var("plainhead.fc1.b"))
}

/// Foreground weights 1.0 plus the background weight, indexable by label.
pub fn class_weights(classes: usize, background_weight: f64) -> Vec<f64> {
    let mut w = vec![1.0; classes + 1];
    w[classes] = background_weight;
    w
}

/// Weighted cross-entropy over `[K, C+1]` logits, summed over proposals.
/// Labels use `C` for background.
pub fn classification_loss<'t>(
    scores: Var<'t>,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var<'t>> {
    let cols = scores.shape()[1];
    if weights.len() != cols {
        return Err(Error::Argument(format!(
            "{} class weights for {cols} score columns",
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    Ok(scores.weighted_ce(labels, weights))
}

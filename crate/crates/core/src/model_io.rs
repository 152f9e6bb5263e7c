//! Binary model files: an 8-byte magic, a header, then the model body.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{HybridMfModel, MfModel, PopularityModel};
use crate::error::{Error, Result};
use crate::xmlc::XmlModel;

pub const MAGIC: [u8; 8] = *b"REFMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Xml,
    Popularity,
    Mf,
    HybridMf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub n_features: u32,
    pub dim: u32,
    pub n_labels: u32,
    pub b_factors: u32,
    pub beam: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SavedModel {
    Xml(XmlModel),
    Popularity(PopularityModel),
    Mf(MfModel),
    HybridMf(HybridMfModel),
}

impl SavedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SavedModel::Xml(_) => ModelKind::Xml,
            SavedModel::Popularity(_) => ModelKind::Popularity,
            SavedModel::Mf(_) => ModelKind::Mf,
            SavedModel::HybridMf(_) => ModelKind::HybridMf,
        }
    }

    pub fn header(&self, seed: u64) -> ModelHeader {
        let mut h = ModelHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            n_features: 0,
            dim: 0,
            n_labels: 0,
            b_factors: 0,
            beam: 0,
            seed,
        };
        match self {
            SavedModel::Xml(m) => {
                h.n_features = m.n_features;
                h.dim = m.dim() as u32;
                h.n_labels = m.n_labels() as u32;
                h.b_factors = m.config.b_factors;
                h.beam = m.config.beam as u32;
                h.seed = m.config.seed;
            }
            SavedModel::Popularity(m) => h.n_labels = m.counts.len() as u32,
            SavedModel::Mf(m) => {
                h.dim = m.factors as u32;
                h.n_labels = m.n_doctors() as u32;
            }
            SavedModel::HybridMf(m) => {
                h.n_features = m.n_features;
                h.dim = m.factors as u32;
                h.n_labels = m.n_doctors() as u32;
            }
        }
        h
    }
}

fn format_err(e: bincode::Error) -> Error {
    Error::ModelFormat(e.to_string())
}

pub fn write_model(w: &mut impl Write, model: &SavedModel, seed: u64) -> Result<()> {
    w.write_all(&MAGIC)?;
    bincode::serialize_into(&mut *w, &model.header(seed)).map_err(format_err)?;
    bincode::serialize_into(&mut *w, model).map_err(format_err)?;
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<(ModelHeader, SavedModel)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::ModelFormat("truncated model file".into()))?;
    if magic != MAGIC {
        return Err(Error::ModelFormat("not a model file".into()));
    }
    let header: ModelHeader = bincode::deserialize_from(&mut *r).map_err(format_err)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut model: SavedModel = bincode::deserialize_from(&mut *r).map_err(format_err)?;
    if model.kind() != header.kind {
        return Err(Error::ModelFormat("header and body disagree on model type".into()));
    }
    match &mut model {
        SavedModel::Xml(m) => m.refresh_classifiers(),
        SavedModel::HybridMf(m) => m.refresh(),
        _ => {}
    }
    Ok((header, model))
}

pub fn save_model(path: &Path, model: &SavedModel, seed: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, SavedModel)> {
    read_model(&mut BufReader::new(File::open(path)?))
}

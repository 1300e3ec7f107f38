//! CSV input and output of clustered datasets.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{ModelConfig, INTERCEPT};
use crate::data_model::{validate_dataset, ClusterData, Dataset};
use crate::error::{GlmmError, Result};

pub fn ingest_csv(path: &Path, config: &ModelConfig) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| GlmmError::InvalidData(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(file, config)
}

#[derive(Default)]
struct Rows {
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

/// Reads one observation per row and groups rows by cluster id in order of
/// first appearance. Rows of a cluster need not be contiguous.
pub fn read_dataset<R: Read>(reader: R, config: &ModelConfig) -> Result<Dataset> {
    config.validate()?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GlmmError::InvalidData(format!("missing column {name:?}")))
    };
    let cluster_col = column(&config.cluster)?;
    let response_col = column(&config.response)?;
    let fixed_cols: Vec<usize> = config.fixed.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let offset_col = config.offset.as_deref().map(column).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Rows> = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let number = |col: usize, name: &str| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| GlmmError::InvalidData(format!("line {line}, column {name:?}: non-numeric value {cell:?}")))
        };
        let id = record.get(cluster_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(GlmmError::InvalidData(format!("line {line}: empty cluster id")));
        }
        let g = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            groups.push(Rows::default());
            groups.len() - 1
        });
        let rows = &mut groups[g];
        rows.y.push(number(response_col, &config.response)?);
        rows.x.push(
            fixed_cols
                .iter()
                .zip(&config.fixed)
                .map(|(&c, name)| number(c, name))
                .collect::<Result<_>>()?,
        );
        if let (Some(c), Some(name)) = (offset_col, &config.offset) {
            rows.offset.push(number(c, name)?);
        }
    }
    if groups.is_empty() {
        return Err(GlmmError::InvalidData("no observations".into()));
    }

    for name in &config.standardize {
        let k = config.fixed.iter().position(|f| f == name).expect("validated");
        let values = groups.iter().flat_map(|g| g.x.iter().map(move |r| r[k]));
        let count = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / count;
        let sd = (values.map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt();
        if !(sd > 0.0) {
            return Err(GlmmError::InvalidData(format!("column {name:?} is constant and cannot be standardized")));
        }
        for g in &mut groups {
            for r in &mut g.x {
                r[k] = (r[k] - mean) / sd;
            }
        }
    }

    let fixed_names = config.fixed_names();
    let random_names = config.random_names();
    let random_idx: Vec<usize> = random_names
        .iter()
        .map(|r| fixed_names.iter().position(|f| f == r).expect("validated"))
        .collect();
    let lead = usize::from(config.intercept);
    let clusters = order
        .into_iter()
        .zip(groups)
        .map(|(id, g)| {
            let ni = g.y.len();
            let x = DMatrix::from_fn(ni, fixed_names.len(), |i, j| {
                if j < lead {
                    1.0
                } else {
                    g.x[i][j - lead]
                }
            });
            let z = DMatrix::from_fn(ni, random_idx.len(), |i, k| x[(i, random_idx[k])]);
            ClusterData {
                id,
                y: DVector::from_vec(g.y),
                x,
                z,
                offset: config.offset.as_ref().map(|_| DVector::from_vec(g.offset)),
            }
        })
        .collect();
    let dataset = Dataset::new(clusters, fixed_names, random_names)?;
    validate_dataset(dataset, config.family)
}

pub fn export_csv(dataset: &Dataset, config: &ModelConfig, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(dataset, config, file)
}

/// Writes the columns named by `config`. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_dataset<W: Write>(dataset: &Dataset, config: &ModelConfig, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let fixed: Vec<(usize, &String)> = dataset
        .fixed_names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.as_str() != INTERCEPT)
        .collect();
    let mut header = vec![config.cluster.clone(), config.response.clone()];
    header.extend(fixed.iter().map(|(_, n)| (*n).clone()));
    if let Some(o) = &config.offset {
        header.push(o.clone());
    }
    out.write_record(&header)?;
    for c in &dataset.clusters {
        for i in 0..c.len() {
            let mut record = vec![c.id.clone(), c.y[i].to_string()];
            record.extend(fixed.iter().map(|(j, _)| c.x[(i, *j)].to_string()));
            if config.offset.is_some() {
                record.push(c.offset.as_ref().map_or(1.0, |e| e[i]).to_string());
            }
            out.write_record(&record)?;
        }
    }
    out.flush()?;
    Ok(())
}

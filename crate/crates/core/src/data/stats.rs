use std::collections::BTreeMap;

use crate::data::{ContactDataset, VertexContactVector};
use crate::error::{Error, Result};
use crate::mesh::TemplateMesh;

/// Per-vertex fraction of records in `split` whose union contact covers the vertex.
pub fn aggregate_contact_probability(dataset: &ContactDataset, split: &str) -> Result<VertexContactVector> {
    let records = dataset.split_records(split)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` is empty")));
    }
    let mut counts = vec![0usize; dataset.n_vertices];
    for r in &records {
        for v in r.union_vertices() {
            counts[v] += 1;
        }
    }
    let n = records.len() as f64;
    VertexContactVector::from_probabilities(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Per part, the number of records whose union contact touches at least
/// `min_vertices` vertices of that part.
pub fn part_contact_histogram(
    dataset: &ContactDataset,
    mesh: &TemplateMesh,
    min_vertices: usize,
) -> Result<Vec<usize>> {
    if min_vertices == 0 {
        return Err(Error::InvalidArgument("min_vertices must be at least 1".into()));
    }
    if mesh.num_vertices() != dataset.n_vertices {
        return Err(Error::TemplateMismatch(format!(
            "mesh has {} vertices, dataset expects {}",
            mesh.num_vertices(),
            dataset.n_vertices
        )));
    }
    let labels = mesh.part_labels();
    let mut hist = vec![0usize; mesh.num_parts()];
    let mut per_part = vec![0usize; mesh.num_parts()];
    for r in &dataset.records {
        per_part.iter_mut().for_each(|c| *c = 0);
        for v in r.union_vertices() {
            per_part[labels[v]] += 1;
        }
        for (h, &c) in hist.iter_mut().zip(&per_part) {
            if c >= min_vertices {
                *h += 1;
            }
        }
    }
    Ok(hist)
}

/// Number of records mentioning each object label at least once.
pub fn object_label_histogram(dataset: &ContactDataset) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for r in &dataset.records {
        let mut labels: Vec<&str> = r.labels().collect();
        labels.sort_unstable();
        labels.dedup();
        for l in labels {
            *hist.entry(l.to_string()).or_insert(0) += 1;
        }
    }
    hist
}

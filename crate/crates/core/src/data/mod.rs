//! Vertex-level contact annotations: records, datasets on disk, and the
//! aggregate statistics reported over a dataset.

mod dataset;
mod record;
mod stats;

pub use dataset::{
    default_vocabulary, load_vocabulary, ContactDataset, ANNOTATION_DIR, DATASET_SCHEMA_VERSION, MANIFEST_FILE,
};
pub use record::{BinarizeMode, ContactRecord, ObjectContact, SampleAssets, VertexContactVector};
pub use stats::{aggregate_contact_probability, object_label_histogram, part_contact_histogram};

//! On-disk embedding library with exact similarity search, k-means and a PCA
//! projection for plotting.

mod cluster;
mod library;
mod project;
mod search;

pub use cluster::{kmeans, purity, KMeans};
pub use library::{load_library, records_from_embeddings, save_library, EmbeddingRecord, Level, LibraryManifest, INDEX_FILE, VECTORS_FILE};
pub use project::{project_2d, write_projection_csv, Projection};
pub use search::top_k_similar;

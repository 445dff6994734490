//! Dataset generation, Netpbm I/O, manifests and batch sampling.

pub mod manifest;
pub mod netpbm;
pub mod sampler;
pub mod synthetic;

pub use manifest::{Dataset, DatasetManifest, ManifestEntry, Split};
pub use netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use sampler::{sample_batch, Batch, BatchConfig, BatchSampler};
pub use synthetic::{generate_synthetic, Placement, Shape, SyntheticConfig};

//! Trainable networks: the fingerprint extractor `F`, the hypersphere
//! classifier `W`, the background extractor `Q` and the generator `G`.

mod checkpoint;
mod classifier;
mod extractor;
mod unet;

pub use checkpoint::{
    load_checkpoint, read_meta, read_state, save_checkpoint, sidecar_path, CheckpointMeta,
    CHECKPOINT_FORMAT_VERSION,
};
pub use classifier::{
    classifier_prob, hypersphere_project, softmax, ClassifierCache, ClassifierWeights,
    HypersphereClassifier, RffVector,
};
pub use extractor::{Extractor, ExtractorCache, ExtractorConfig};
pub use unet::{
    BackgroundExtractor, DoubleConv, DownConv, Generator, GeneratorCache, UpConv, Unet,
    UnetCache, UnetConfig,
};

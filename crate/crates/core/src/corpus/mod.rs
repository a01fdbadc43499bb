//! Deterministic synthetic captioned-image corpus.

mod caption;
mod dataset;
mod render;
mod scene;
mod vocab;

pub use caption::{caption_scene, caption_text, parse_caption};
pub use dataset::{
    build_dataset, make_record, vocab_sidecar_path, Dataset, Record, CAPTION_SLOT, DATASET_MAGIC, SPEC_SLOT,
};
pub use render::{object_geometry, render_scene};
pub use scene::{
    derive_seed, gen_scene_spec, Background, Color, Complexity, SceneObject, SceneSpec, Shape, Size, Style, GRID,
};
pub use vocab::{Vocabulary, BOS, EOS, PAD, VOCAB_WORDS};

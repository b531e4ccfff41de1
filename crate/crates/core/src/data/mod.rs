pub mod generator;
pub mod io;
pub mod ppm;
pub mod types;
pub mod vocab;

pub use generator::{generate, generate_dataset, DatasetConfig, GeneratedDataset, LayoutTemplate, Manifest};
pub use io::{load_dataset, Dataset};
pub use types::{BoxCoords, FrameSample, Label, Split, TextBox, MAX_BOXES, NUM_CLASSES};
pub use vocab::{tokenize, SynonymTable, Vocab, PAD, UNK};

//! Conversational sessions: data model, synthetic corpus, windows, splits
//! and batching.

mod batch;
mod generator;
mod io;
mod session;
mod split;
mod vocab;

pub use batch::BatchIter;
pub use generator::{generate_corpus, Corpus, Generator, GeneratorConfig, Pattern};
pub use io::{read_sessions, write_sessions, SessionRecord};
pub use session::{score_to_label, window, Label, Session, Turn};
pub use split::{split_by_skill, split_unsup, DatasetSplits, SplitManifest};
pub use vocab::Vocab;

//! Conversation ingest, self-questioning turn assignment, rendering, and
//! the record file format.

pub mod conversation;
pub mod records;
pub mod stats;
pub mod template;

pub use conversation::{
    load_dataset, parse_dataset, Conversation, ImageSource, InlineImage, SqPolicy, Turn, TurnKind,
};
pub use records::Record;
pub use stats::{corpus_stats, CorpusStats};
pub use template::{
    generation_prefix, render, render_pretrain, Span, SpanKind, Stage, TurnSequence, SYSTEM_MESSAGE,
};

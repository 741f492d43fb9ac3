//! On-disk formats: checkpoint archives and JSONL logs.

pub mod archive;
pub mod jsonl;

pub use archive::{load_archive, save_archive, Archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use jsonl::{read_jsonl, JsonlWriter};

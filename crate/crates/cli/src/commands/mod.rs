pub mod compare;
pub mod evaluate;
pub mod gradcheck;
pub mod infer;
pub mod simulate;
pub mod train;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";

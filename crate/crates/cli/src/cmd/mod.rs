pub mod analyze;
pub mod augment;
pub mod evaluate;
pub mod gradcheck;
pub mod ingest;
pub mod simindex;
pub mod tokenize;
pub mod train;
pub mod translate;

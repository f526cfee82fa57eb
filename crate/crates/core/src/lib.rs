pub mod consistency;
pub mod destination;
pub mod extract;
pub mod ingest;
pub mod metrics;
pub mod ontology;
pub mod pipeline;
pub mod purpose;
pub mod sigscan;

pub mod agents;
pub mod alliance;
pub mod benchmark;
pub mod corpus;
pub mod embed;
pub mod neural;
pub mod recsys;
pub mod service;
pub mod topics;

pub mod consensus;
pub mod dataset;
pub mod dnp3m;
pub mod harness;
pub mod ledger;
pub mod metrics;
pub mod nodes;
pub mod runner;

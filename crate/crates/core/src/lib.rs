//! Persona-conditioned corpus synthesis and Big Five evaluation in a unified
//! percentile space.
//!
//! Modules follow the data flow: [`schema`] records feed [`prompting`], prompts
//! go through [`generation`], [`corpus`] turns completions into filtered
//! samples and preference pairs, [`scale`] and [`metrics`] score predictions,
//! [`losses`] holds the SFT/DPO objectives with a toy model for gradient
//! checks, and [`reporting`] produces tables and ablations. [`pipeline`] wires
//! the stages together, and [`stub`] is a deterministic local endpoint for
//! offline runs.

pub mod corpus;
pub mod generation;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod reporting;
pub mod scale;
pub mod schema;
pub mod stub;

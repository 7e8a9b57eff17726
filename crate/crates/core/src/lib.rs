//! Consensus labels, label quality and annotator quality for data labeled by
//! several annotators, optionally combined with a trained classifier.

pub mod crowdlab;
pub mod dataset;
pub mod dawid_skene;
pub mod error;
pub mod glad;
pub mod io;
pub mod label_quality;
pub mod methods;
pub mod metrics;
pub mod posterior;
pub mod simulate;

pub use dataset::{Annotation, AnnotationTable, ClassFrequencies, ProbMatrix};
pub use error::{Error, Result};
pub use methods::{run, Method, MethodConfig, MethodResult};
pub use posterior::ClassPosterior;

use num_bigint::BigUint;

use crate::scenegraph::Component;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene graph: {0}")]
    InvalidGraph(String),

    #[error("component {0} appears with both polarities")]
    ConflictingPolarity(Component),

    #[error("component {0} is not part of the signature basis")]
    UnknownComponent(Component),

    #[error("signature lengths differ ({left} vs {right})")]
    SignatureLengthMismatch { left: usize, right: usize },

    #[error("cosine similarity is undefined for an all-zero signature")]
    ZeroSignature,

    #[error("trajectory has {0} frame(s); at least 2 are required")]
    TooFewFrames(usize),

    #[error("frame indices must be strictly increasing (saw {prev} then {next})")]
    NonIncreasingFrames { prev: u64, next: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("enumeration would visit up to {candidates} tuples, above the cap of {cap}")]
    EnumerationCap { candidates: BigUint, cap: u64 },

    #[error("rendered actions collide for steps {0:?}")]
    RenderCollision(Vec<(usize, usize)>),

    #[error("no {arity} template for {polarity} {predicate}")]
    MissingTemplate {
        predicate: String,
        polarity: String,
        arity: String,
    },

    #[error("cannot render an empty action")]
    EmptyAction,

    #[error("trajectory step {0} has an empty visible action")]
    EmptyStep(usize),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("predicates without a semantic category: {0:?}")]
    UnmappedPredicates(Vec<String>),

    #[error("stratum {cell} has {available} item(s), {required} required")]
    UnderfullCell {
        cell: String,
        available: usize,
        required: usize,
    },

    #[error("no unit carries two or more annotations")]
    NoCoannotatedUnits,

    #[error("items carry differing annotation counts: {0}")]
    RaggedAnnotations(String),
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology has no layers")]
    Empty,
    #[error("layer {layer}: widths, kernel and groups must be positive")]
    ZeroDimension { layer: usize },
    #[error("layer {layer}: dense layers require kernel = 1 and groups = 1")]
    DenseShape { layer: usize },
    #[error("layer {layer}: kernel {kernel} must be odd for same padding")]
    EvenKernel { layer: usize, kernel: usize },
    #[error("layer {layer}: groups {groups} must divide in_width {in_width} and out_width {out_width}")]
    GroupsDivisibility {
        layer: usize,
        groups: usize,
        in_width: usize,
        out_width: usize,
    },
    #[error("layer {layer}: out_width {out_width} does not match next in_width {next_in}")]
    DimensionMismatch {
        layer: usize,
        out_width: usize,
        next_in: usize,
    },
    #[error("layer {layer}: dense and conv2d layers cannot be mixed")]
    MixedKinds { layer: usize },
    #[error("final layer must not carry an activation")]
    FinalActivation,
    #[error("input_width {input_width} does not match first layer in_width {first_in}")]
    InputWidth { input_width: usize, first_in: usize },
    #[error("searchable mask has {got} entries for {expected} layers")]
    MaskLength { expected: usize, got: usize },
    #[error("readout index {index} out of range for output length {len}")]
    ReadoutIndex { index: usize, len: usize },
    #[error("conv2d topology requires spatial_size")]
    MissingSpatial,
    #[error("width ratio must be a positive rational")]
    InvalidRatio,
    #[error("topology has no searchable layer")]
    NotSearchable,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NtkError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("input has length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("layer {layer}: weight tensor has {got} entries, expected {expected}")]
    ParamShape { layer: usize, expected: usize, got: usize },
    #[error("parameter set has {got} layers, topology has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyInputs,
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error(transparent)]
    Ntk(#[from] NtkError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("at least 2 trials required, got {0}")]
    TooFewTrials(usize),
    #[error("entry ({row}, {col}) outside {len} inputs")]
    EntryOutOfRange { row: usize, col: usize, len: usize },
    #[error("mean {mean} is within one standard error ({stderr}) of zero; normalization is ill-conditioned")]
    IllConditioned { mean: f64, stderr: f64 },
    #[error("no fit points")]
    NoPoints,
    #[error("every fit point has S = 0")]
    DegenerateFit,
    #[error("point {index}: normalized second moment {value} is not admissible for S = {s}")]
    InadmissiblePoint { index: usize, value: f64, s: f64 },
    #[error("fitted alpha {0} is not positive; data inconsistent with the variance law")]
    NegativeAlpha(f64),
    #[error("width ladder is empty")]
    EmptyLadder,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("search grid is empty")]
    EmptyGrid,
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("multiplicity must be positive, got {0}")]
    InvalidMultiplicity(f64),
    #[error("baseline inverse fan-in sum is zero; dual multiplicity undefined")]
    DegenerateBaseline,
    #[error("primal optimum n = {primal} differs from dual optimum n = {dual}")]
    DualityMismatch { primal: usize, dual: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Ntk(#[from] NtkError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error("loss diverged to {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset has {inputs} inputs but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("tracked entry ({row}, {col}) outside dataset of {len} samples")]
    TrackedEntry { row: usize, col: usize, len: usize },
    #[error("record_every must be positive")]
    RecordEvery,
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
    #[error("need at least {needed} usable runs, got {got}")]
    TooFewRuns { needed: usize, got: usize },
    #[error("runs span {span:.3} decades of m*n; at least one decade required")]
    NarrowSpan { span: f64 },
    #[error("at least 2 seeds per point required, got {0}")]
    TooFewSeeds(usize),
    #[error("{0} must be non-empty")]
    EmptyList(&'static str),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("image and label files disagree on item count ({images} vs {labels})")]
    CountMismatch { images: usize, labels: usize },
    #[error("unknown class {0}; MNIST classes are 0..=9")]
    UnknownClass(u8),
    #[error("class pair must name two distinct classes")]
    SameClass,
    #[error("dataset would be empty")]
    Empty,
    #[error("input {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("inputs have inconsistent dimensions ({first} vs {other} at index {index})")]
    Ragged { first: usize, other: usize, index: usize },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

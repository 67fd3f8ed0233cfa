use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("label width {width} is outside 1..={max}")]
    InvalidWidth { width: usize, max: usize },

    #[error("class id {class} does not fit a label of width {width}")]
    InvalidClass { class: u64, width: usize },

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{label} has {available} eligible samples, {required} required")]
    InsufficientSamples {
        label: String,
        available: usize,
        required: usize,
    },

    #[error("{available} distinct {kind} available, {required} required")]
    NotEnoughLabels {
        kind: &'static str,
        available: usize,
        required: usize,
    },

    #[error("invalid config `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("search space too large: {labels} labels (at most {cap} supported)")]
    SearchSpaceTooLarge { labels: usize, cap: usize },

    #[error("no feasible split: {0}")]
    Infeasible(String),

    #[error("degenerate episode: {0}")]
    DegenerateEpisode(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error(transparent)]
    Autodiff(#[from] fewshot_autodiff::AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Wraps the error with a location such as an epoch or episode index.
    pub fn context(self, context: impl Into<String>) -> Self {
        CoreError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

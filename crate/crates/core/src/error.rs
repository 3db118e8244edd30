use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, layer names or knobs that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed weight file. `layer` is `None` when the header itself is bad.
    #[error("weight load error{}: {message}", layer.as_ref().map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Load {
        layer: Option<String>,
        message: String,
    },

    /// Bad user-supplied input such as an out-of-range coordinate.
    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite energy or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("pyramid level {level}: {source}")]
    AtLevel {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn load(layer: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Load {
            layer: layer.map(str::to_owned),
            message: msg.into(),
        }
    }

    pub(crate) fn at_level(self, level: usize) -> Self {
        Error::AtLevel {
            level,
            source: Box::new(self),
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Core(#[from] dygis::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
}

/// Process exit status per failure category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config = 2,
    Input = 3,
    Training = 4,
    Output = 5,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Input => "input",
            Category::Training => "training",
            Category::Output => "output",
        }
    }
}

impl CliError {
    pub fn category(&self) -> Category {
        use dygis::Error as E;
        match self {
            CliError::Usage(_) => Category::Config,
            CliError::Output { .. } => Category::Output,
            CliError::Core(e) => match e {
                E::Config { .. } | E::Infeasible(_) => Category::Config,
                E::Parse { .. } | E::Io(_) | E::InvalidSnapshot(_) => Category::Input,
                _ => Category::Training,
            },
        }
    }
}

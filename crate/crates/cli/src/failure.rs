use scot_core::{Error, ErrorClass};

/// A command failure, reported as one JSON line on stderr.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub class: ErrorClass,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "ConfigError".into(),
            class: ErrorClass::Config,
            message: message.into(),
        }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            class: ErrorClass::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    fn class_name(&self) -> &'static str {
        match self.class {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }

    pub fn report(&self) {
        let line = serde_json::json!({
            "error": self.kind,
            "class": self.class_name(),
            "message": self.message,
        });
        eprintln!("{line}");
    }

    /// Prefixes the message with the file or record it concerns.
    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind().into(),
            class: e.class(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub trait Context<T> {
    fn at(self, what: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn at(self, what: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| e.into().context(what))
    }
}

use std::fmt;
use std::path::Path;

/// Failure classes with distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Io,
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 3,
            Kind::Io => 4,
            Kind::Runtime => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Runtime => "runtime",
        }
    }
}

/// An error tagged with its class.
#[derive(Debug)]
pub struct Tagged {
    pub kind: Kind,
    pub message: String,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Tagged {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    Tagged { kind: Kind::Config, message: message.into() }.into()
}

pub fn io_error(path: &Path, source: std::io::Error) -> anyhow::Error {
    Tagged { kind: Kind::Io, message: format!("{}: {source}", path.display()) }.into()
}

/// The class of the first recognisable error in the chain.
pub fn classify(err: &anyhow::Error) -> Option<Kind> {
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return Some(t.kind);
        }
        if let Some(e) = cause.downcast_ref::<capsroute::Error>() {
            return Some(match e {
                capsroute::Error::Config(_) => Kind::Config,
                capsroute::Error::Io { .. } | capsroute::Error::Format { .. } => Kind::Io,
                _ => Kind::Runtime,
            });
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Some(Kind::Io);
        }
    }
    None
}

/// The whole chain on one line, skipping causes already quoted by their
/// parent.
pub fn one_line(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out.replace('\n', " ")
}

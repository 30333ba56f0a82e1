use std::fmt;

use star_core::Error;

pub const OK: u8 = 0;
pub const FAILURE: u8 = 1;
pub const USAGE: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const ARTIFACT: u8 = 4;

/// A failure raised by the binary itself with a fixed exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Fail {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Fail { code: USAGE, message: message.into() }.into()
}

pub fn artifact(message: impl Into<String>) -> anyhow::Error {
    Fail { code: ARTIFACT, message: message.into() }.into()
}

pub fn numeric(message: impl Into<String>) -> anyhow::Error {
    Fail { code: NUMERIC, message: message.into() }.into()
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::InvalidCondition { .. } => USAGE,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::NonFiniteProbe { .. } => NUMERIC,
        Error::ConfigMismatch { .. }
        | Error::Checksum { .. }
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::VocabOverflow { .. } => ARTIFACT,
        _ => FAILURE,
    }
}

/// Exit code of the first error in the chain that carries one.
pub fn code_of(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ARTIFACT;
        }
    }
    FAILURE
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn codes_follow_the_contract() {
        let wrap = |e: Error| code_of(&anyhow::Error::from(e).context("while testing"));
        assert_eq!(wrap(Error::InvalidArgument("x".into())), USAGE);
        assert_eq!(wrap(Error::NonFiniteLoss { component: "l_ar" }), NUMERIC);
        assert_eq!(
            wrap(Error::ConfigMismatch { field: "model.width".into(), expected: "1".into(), found: "2".into() }),
            ARTIFACT
        );
        assert_eq!(wrap(Error::Checksum { path: "a".into() }), ARTIFACT);
        assert_eq!(code_of(&usage("bad")), USAGE);
        let r: anyhow::Result<()> = Err(numeric("nan")).context("outer");
        assert_eq!(code_of(&r.unwrap_err()), NUMERIC);
    }
}

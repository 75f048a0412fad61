use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("expected {expected} bytes, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("bytes do not encode a group element")]
    InvalidElement,
    #[error("non-canonical scalar encoding")]
    NonCanonicalScalar,
    #[error("zero scalar")]
    ZeroScalar,
    #[error("identity element")]
    IdentityElement,
    #[error("ciphertext of {0} bytes is too short")]
    MalformedCiphertext(usize),
    #[error("authentication failed")]
    AuthenticationFailed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MspsiError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("duplicate keyword in query")]
    DuplicateKeyword,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("reply has {got} elements, query had {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed element at position {0}")]
    MalformedElement(usize),
    #[error("malformed tag collection: {0}")]
    MalformedCollection(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CuckooError {
    #[error("filter full after {evictions} evictions at {count} elements")]
    Capacity { count: usize, evictions: usize },
    #[error("{0} elements exceed capacity at load limit")]
    TooManyElements(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("malformed filter encoding: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("issuance quota exhausted; epoch ends in {remaining_secs} s")]
    QuotaExhausted { remaining_secs: u64 },
    #[error("journalist {0:?} is not registered")]
    UnknownJournalist(String),
    #[error("journalist {0:?} is already registered")]
    AlreadyRegistered(String),
    #[error("token already spent locally")]
    AlreadySpent,
    #[error("signing session is unknown or already finished")]
    UnknownSession,
    #[error("issuer response failed verification")]
    BadIssuerResponse,
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

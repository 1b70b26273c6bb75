use crate::placement::SubpacketId;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid system parameters: {0}")]
    InvalidParams(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("channel degeneracy: {0}")]
    ChannelDegeneracy(String),

    #[error("codebook conditioning failed: {0}")]
    CodebookConditioning(String),

    #[error("placement consistency violated: user {user} has no cached subpacket {id}")]
    PlacementConsistency { user: u32, id: SubpacketId },

    #[error("stage {stage} incomplete: {detail}")]
    StageIncomplete { stage: u32, detail: String },

    #[error("recovery incomplete for user {user}: missing {missing:?}")]
    IncompleteRecovery {
        user: u32,
        missing: Vec<SubpacketId>,
    },

    #[error("unequalizable gain {gain:e} for user {user} (channel degeneracy)")]
    Unequalizable { user: u32, gain: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use serde::{Deserialize, Serialize};

use super::LabelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewState {
    Draft,
    Submitted,
    Suggested,
    Disputed,
    Consensus,
}

impl ReviewState {
    pub const ALL: [ReviewState; 5] = [
        ReviewState::Draft,
        ReviewState::Submitted,
        ReviewState::Suggested,
        ReviewState::Disputed,
        ReviewState::Consensus,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewAction {
    Submit,
    Suggest,
    Accept,
    Dispute,
    Resolve,
}

impl ReviewAction {
    pub const ALL: [ReviewAction; 5] = [
        ReviewAction::Submit,
        ReviewAction::Suggest,
        ReviewAction::Accept,
        ReviewAction::Dispute,
        ReviewAction::Resolve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReviewAction::Submit => "submit",
            ReviewAction::Suggest => "suggest",
            ReviewAction::Accept => "accept",
            ReviewAction::Dispute => "dispute",
            ReviewAction::Resolve => "resolve",
        }
    }
}

impl std::str::FromStr for ReviewAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown review action `{s}`"))
    }
}

/// The acting expert relative to the annotation's original annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActorRole {
    Author,
    SecondExpert,
}

/// The review state machine.
///
/// ```text
/// Draft     --submit-->  Submitted
/// Submitted --suggest--> Suggested    (second expert)
/// Submitted --accept-->  Consensus    (second expert)
/// Suggested --accept-->  Consensus    (second expert)
/// Suggested --dispute--> Disputed
/// Disputed  --resolve--> Consensus    (note required)
/// ```
pub fn next_state(
    state: ReviewState,
    action: ReviewAction,
    role: ActorRole,
    note: Option<&str>,
) -> Result<ReviewState, LabelError> {
    use ReviewAction::*;
    use ReviewState::*;
    let next = match (state, action) {
        (Draft, Submit) => Submitted,
        (Submitted, Suggest) => Suggested,
        (Submitted, Accept) | (Suggested, Accept) => Consensus,
        (Suggested, Dispute) => Disputed,
        (Disputed, Resolve) => Consensus,
        _ => return Err(LabelError::IllegalTransition { state, action }),
    };
    if matches!(action, Suggest | Accept) && role == ActorRole::Author {
        return Err(LabelError::SelfReview { actor: String::new(), action });
    }
    if action == Resolve && note.map_or(true, |n| n.trim().is_empty()) {
        return Err(LabelError::MissingNote);
    }
    Ok(next)
}

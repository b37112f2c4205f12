use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::request::Parts;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;
use crate::AppState;

pub const ACTOR_HEADER: &str = "x-actor";
pub const ROLE_HEADER: &str = "x-role";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionRole {
    Annotator,
    Reviewer,
}

impl std::str::FromStr for SessionRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "annotator" => Ok(SessionRole::Annotator),
            "reviewer" => Ok(SessionRole::Reviewer),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// The caller of a mutating request, from the `X-Actor` and `X-Role` headers.
///
/// The first request from an actor fixes its role; a later request claiming the other role
/// is rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionActor {
    pub id: String,
    pub role: SessionRole,
}

impl FromRequestParts<Arc<AppState>> for SessionActor {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let header = |name: &str| -> Result<Option<String>, ApiError> {
            parts
                .headers
                .get(name)
                .map(|v| v.to_str().map(|s| s.trim().to_string()).map_err(|_| ApiError::BadRequest(format!("{name} is not text"))))
                .transpose()
        };
        let id = header(ACTOR_HEADER)?.filter(|s| !s.is_empty()).ok_or_else(|| ApiError::BadRequest("missing X-Actor header".into()))?;
        let role = match header(ROLE_HEADER)? {
            Some(r) => r.parse().map_err(ApiError::BadRequest)?,
            None => SessionRole::Annotator,
        };
        let mut roles = state.roles.lock().unwrap_or_else(|p| p.into_inner());
        let fixed = *roles.entry(id.clone()).or_insert(role);
        if fixed != role {
            return Err(ApiError::BadRequest(format!("actor {id} already acts as {fixed:?} in this session")));
        }
        Ok(SessionActor { id, role })
    }
}

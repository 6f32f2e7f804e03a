use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Journal, JournalError, ResponseRecord};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session is already complete")]
    Complete,
    #[error("trial {0} was already answered")]
    Duplicate(String),
    #[error("expected a response to trial {expected}, got {got}")]
    OutOfOrder { expected: String, got: String },
    #[error("response from subject {got} sent to session of {expected}")]
    WrongSubject { expected: String, got: String },
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub subject_id: String,
    pub trial_order: Vec<String>,
    pub cursor: usize,
    pub status: SessionStatus,
}

fn subject_digest(tag: &str, subject_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(subject_id.as_bytes());
    h.finalize().into()
}

/// Stable session id derived from the subject id.
pub fn session_id_for(subject_id: &str) -> String {
    subject_digest("session", subject_id)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-subject presentation order, seeded by a hash of the subject id.
pub fn subject_trial_order(trial_ids: &[String], subject_id: &str) -> Vec<String> {
    let digest = subject_digest("order", subject_id);
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut order = trial_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

impl Session {
    pub fn new(subject_id: impl Into<String>, trial_ids: &[String]) -> Self {
        let subject_id = subject_id.into();
        let trial_order = subject_trial_order(trial_ids, &subject_id);
        let status = if trial_order.is_empty() {
            SessionStatus::Complete
        } else {
            SessionStatus::Active
        };
        Self {
            session_id: session_id_for(&subject_id),
            subject_id,
            trial_order,
            cursor: 0,
            status,
        }
    }

    pub fn current_trial(&self) -> Option<&str> {
        match self.status {
            SessionStatus::Active => self.trial_order.get(self.cursor).map(String::as_str),
            SessionStatus::Complete => None,
        }
    }

    pub fn total(&self) -> usize {
        self.trial_order.len()
    }

    /// Validates a response without changing the session.
    pub fn check(&self, response: &ResponseRecord) -> Result<(), SessionError> {
        if response.subject_id != self.subject_id {
            return Err(SessionError::WrongSubject {
                expected: self.subject_id.clone(),
                got: response.subject_id.clone(),
            });
        }
        if self.trial_order[..self.cursor].contains(&response.trial_id) {
            return Err(SessionError::Duplicate(response.trial_id.clone()));
        }
        let expected = self.current_trial().ok_or(SessionError::Complete)?;
        if expected != response.trial_id {
            return Err(SessionError::OutOfOrder {
                expected: expected.to_string(),
                got: response.trial_id.clone(),
            });
        }
        Ok(())
    }

    /// Advances past the current trial. The session is unchanged on error.
    pub fn apply(&mut self, response: &ResponseRecord) -> Result<(), SessionError> {
        self.check(response)?;
        self.cursor += 1;
        if self.cursor == self.trial_order.len() {
            self.status = SessionStatus::Complete;
        }
        Ok(())
    }

    /// Rebuilds a session from its subject's journal records, in order.
    pub fn replay<'a>(
        subject_id: &str,
        trial_ids: &[String],
        records: impl IntoIterator<Item = &'a ResponseRecord>,
    ) -> Result<Self, SessionError> {
        let mut s = Self::new(subject_id, trial_ids);
        for r in records.into_iter().filter(|r| r.subject_id == subject_id) {
            s.apply(r)?;
        }
        Ok(s)
    }
}

/// Journals a response and advances the session. Validation happens before
/// the write, so a rejected response leaves both untouched.
pub fn record_response(
    session: &mut Session,
    response: &ResponseRecord,
    journal: &Journal,
) -> Result<(), SessionError> {
    session.check(response)?;
    journal.append(response)?;
    session.apply(response)
}

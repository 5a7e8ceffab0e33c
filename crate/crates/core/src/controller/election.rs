//! Leader election by minimum reachable latency.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::SimTime;

pub const DEFAULT_ELECTION_WINDOW: Duration = Duration::from_millis(200);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Leader,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleState {
    pub master_id: String,
    pub role: Role,
    pub last_heartbeat: SimTime,
    /// Ping round trip in ms, `None` when unreachable.
    pub reachable_latency: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ElectionError {
    #[error("no reachable candidate")]
    NoCandidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Election {
    pub winner: String,
    /// Time to collect the answers that decided the vote.
    pub duration: Duration,
    pub candidates: usize,
}

pub trait ElectionStrategy {
    fn elect(&self, candidates: &[RoleState]) -> Result<Election, ElectionError>;
}

/// Lowest latency wins; ties go to the smaller id. Candidates that do not
/// answer within the window are treated as unreachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinLatency {
    pub window: Duration,
}

impl Default for MinLatency {
    fn default() -> Self {
        MinLatency {
            window: DEFAULT_ELECTION_WINDOW,
        }
    }
}

impl ElectionStrategy for MinLatency {
    fn elect(&self, candidates: &[RoleState]) -> Result<Election, ElectionError> {
        let window_ms = self.window.as_millis() as u64;
        let reachable: Vec<(&RoleState, u64)> = candidates
            .iter()
            .filter_map(|c| {
                c.reachable_latency
                    .filter(|l| *l <= window_ms)
                    .map(|l| (c, l))
            })
            .collect();
        let (winner, _) = reachable
            .iter()
            .min_by(|(a, la), (b, lb)| la.cmp(lb).then_with(|| a.master_id.cmp(&b.master_id)))
            .ok_or(ElectionError::NoCandidate)?;
        let slowest = reachable.iter().map(|(_, l)| *l).max().unwrap_or(0);
        Ok(Election {
            winner: winner.master_id.clone(),
            duration: Duration::from_millis(slowest),
            candidates: reachable.len(),
        })
    }
}

pub fn elect_leader(candidates: &[RoleState]) -> Result<Election, ElectionError> {
    MinLatency::default().elect(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(id: &str, latency: Option<u64>) -> RoleState {
        RoleState {
            master_id: id.into(),
            role: Role::Follower,
            last_heartbeat: SimTime::ZERO,
            reachable_latency: latency,
        }
    }

    #[test]
    fn minimum_wins() {
        let e = elect_leader(&[c("A", Some(5)), c("B", Some(12)), c("C", Some(3))]).unwrap();
        assert_eq!(e.winner, "C");
        assert_eq!(e.duration, Duration::from_millis(12));
    }

    #[test]
    fn tie_goes_to_smaller_id() {
        assert_eq!(
            elect_leader(&[c("B", Some(5)), c("A", Some(5))])
                .unwrap()
                .winner,
            "A"
        );
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(elect_leader(&[c("F", Some(40))]).unwrap().winner, "F");
        assert_eq!(
            elect_leader(&[c("F", None)]),
            Err(ElectionError::NoCandidate)
        );
        assert_eq!(elect_leader(&[]), Err(ElectionError::NoCandidate));
    }

    #[test]
    fn slow_answers_fall_outside_window() {
        let e = elect_leader(&[c("A", Some(450)), c("B", Some(150))]).unwrap();
        assert_eq!((e.winner.as_str(), e.candidates), ("B", 1));
        assert!(e.duration <= DEFAULT_ELECTION_WINDOW);
    }
}

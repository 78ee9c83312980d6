//! The pilot runtime: validates on its assigned node, auto-detects
//! resources from the node's advertised spec, registers with the user pool
//! as one partitionable slot, carves dynamic slots to run jobs in parallel
//! and in sequence, and retires when idle or out of lifetime.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::model::{fits, GlideinState, ResourceSpec, TimeMs};
use crate::wire::JobTicket;

pub const DEFAULT_MAX_LIFETIME_MS: TimeMs = 3_600_000;
pub const DEFAULT_IDLE_TIMEOUT_MS: TimeMs = 30_000;
pub const DEFAULT_POLL_PERIOD_MS: TimeMs = 2_000;

/// Pilot policy knobs, set by the CE that launches the pilot.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GlideinParams {
    pub max_lifetime_ms: TimeMs,
    pub idle_timeout_ms: TimeMs,
    pub poll_period_ms: TimeMs,
}

impl Default for GlideinParams {
    fn default() -> Self {
        Self {
            max_lifetime_ms: DEFAULT_MAX_LIFETIME_MS,
            idle_timeout_ms: DEFAULT_IDLE_TIMEOUT_MS,
            poll_period_ms: DEFAULT_POLL_PERIOD_MS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicSlot {
    pub slot_id: String,
    pub job: JobTicket,
    pub carved: ResourceSpec,
    pub start_time: TimeMs,
    pub end_time: TimeMs,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClaimError {
    #[error("insufficient-resources")]
    InsufficientResources,
    #[error("retiring")]
    Retiring,
    #[error("not-registered")]
    NotRegistered,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown-slot: {0}")]
pub struct UnknownSlot(pub String);

/// Why a pilot began retiring; lands in its audit trail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetireReason {
    IdleTimeout,
    LifetimeExceeded,
    FactoryRequest,
}

impl RetireReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RetireReason::IdleTimeout => "idle-timeout",
            RetireReason::LifetimeExceeded => "lifetime-exceeded",
            RetireReason::FactoryRequest => "factory-request",
        }
    }
}

/// Outcome of accepting a claim.
#[derive(Debug, Clone)]
pub struct ClaimAccept {
    pub slot_id: String,
    pub start_time: TimeMs,
    pub end_time: TimeMs,
    pub remaining: ResourceSpec,
    /// True when this claim moved the pilot from Registered to Running.
    pub began_running: bool,
}

/// Outcome of a finished slot.
#[derive(Debug, Clone)]
pub struct SlotCompletion {
    pub job: JobTicket,
    pub slot_id: String,
    pub start_time: TimeMs,
    pub end_time: TimeMs,
    pub remaining: ResourceSpec,
    /// True when this was the last active slot (Running back to Registered).
    pub drained: bool,
    pub jobs_served: u64,
}

/// What one poll tick decided.
#[derive(Debug, Default)]
pub struct PollOutcome {
    /// Refresh the pool ad with (remaining, retiring)?
    pub heartbeat: Option<(ResourceSpec, bool)>,
    /// The pilot began retiring this tick.
    pub began_retiring: Option<RetireReason>,
    /// The pilot finished draining this tick: deregister and release the
    /// node. A pilot that begins retiring with no active slots completes in
    /// the same tick, so a drained pilot never outlives its idle timeout by
    /// more than one poll period.
    pub finished: bool,
}

#[derive(Debug)]
pub struct GlideinRuntime {
    pub glidein_id: String,
    pub client_id: String,
    pub node_id: String,
    pub state: GlideinState,
    pub detected: ResourceSpec,
    pub remaining: ResourceSpec,
    pub dynamic_slots: BTreeMap<String, DynamicSlot>,
    pub params: GlideinParams,
    pub registered_at: TimeMs,
    pub last_busy_time: TimeMs,
    pub jobs_served: u64,
    pub retire_reason: Option<RetireReason>,
    next_slot_seq: u64,
    /// Consecutive failed registration attempts (process mode); the pilot
    /// gives up after three.
    pub register_failures: u32,
    pub pool_registered: bool,
}

impl GlideinRuntime {
    /// Successful validation on an assigned node: detect resources from the
    /// node's advertised spec and become a registered execution point.
    ///
    /// Detection trusts the advertisement, never probes actual capacity;
    /// that is how a CE faking cores becomes visible downstream.
    pub fn register(
        glidein_id: &str,
        client_id: &str,
        node_id: &str,
        node_advertised: ResourceSpec,
        params: GlideinParams,
        now: TimeMs,
    ) -> Self {
        Self {
            glidein_id: glidein_id.to_string(),
            client_id: client_id.to_string(),
            node_id: node_id.to_string(),
            state: GlideinState::Registered,
            detected: node_advertised,
            remaining: node_advertised,
            dynamic_slots: BTreeMap::new(),
            params,
            registered_at: now,
            last_busy_time: now,
            jobs_served: 0,
            retire_reason: None,
            next_slot_seq: 1,
            register_failures: 0,
            pool_registered: false,
        }
    }

    pub fn is_retiring(&self) -> bool {
        self.state == GlideinState::Retiring
    }

    /// remaining + sum of carved slots must equal detected at all times.
    pub fn conservation_holds(&self) -> bool {
        let carved = self
            .dynamic_slots
            .values()
            .fold(ResourceSpec::zero(), |acc, slot| acc.release(&slot.carved));
        self.remaining.release(&carved) == self.detected
    }

    /// Carve a dynamic slot for a job if the pilot is accepting work and the
    /// job fits in what remains.
    pub fn claim(&mut self, job: JobTicket, now: TimeMs) -> Result<ClaimAccept, ClaimError> {
        match self.state {
            GlideinState::Registered | GlideinState::Running => {}
            GlideinState::Retiring => return Err(ClaimError::Retiring),
            _ => return Err(ClaimError::NotRegistered),
        }
        if !fits(&job.requirements, &self.remaining) {
            return Err(ClaimError::InsufficientResources);
        }
        self.remaining = self.remaining.carve(&job.requirements).expect("fits checked");
        let slot_id = format!("slot-{:04}", self.next_slot_seq);
        self.next_slot_seq += 1;
        let end_time = now + job.declared_runtime_ms;
        let carved = job.requirements;
        self.dynamic_slots.insert(
            slot_id.clone(),
            DynamicSlot { slot_id: slot_id.clone(), job, carved, start_time: now, end_time },
        );
        let began_running = self.state == GlideinState::Registered;
        self.state = GlideinState::Running;
        self.last_busy_time = now;
        Ok(ClaimAccept {
            slot_id,
            start_time: now,
            end_time,
            remaining: self.remaining,
            began_running,
        })
    }

    /// Return a finished slot's resources; the slot can be re-carved for the
    /// next job immediately (sequential reuse).
    pub fn complete(&mut self, slot_id: &str, now: TimeMs) -> Result<SlotCompletion, UnknownSlot> {
        let slot =
            self.dynamic_slots.remove(slot_id).ok_or_else(|| UnknownSlot(slot_id.to_string()))?;
        self.remaining = self.remaining.release(&slot.carved);
        self.jobs_served += 1;
        self.last_busy_time = now;
        let drained = self.dynamic_slots.is_empty() && self.state == GlideinState::Running;
        if drained {
            self.state = GlideinState::Registered;
        }
        Ok(SlotCompletion {
            job: slot.job,
            slot_id: slot.slot_id,
            start_time: slot.start_time,
            end_time: now,
            remaining: self.remaining,
            drained,
            jobs_served: self.jobs_served,
        })
    }

    /// Stop accepting work and drain. Returns true if the pilot was not
    /// already retiring or terminal.
    pub fn begin_retire(&mut self, reason: RetireReason) -> bool {
        match self.state {
            GlideinState::Registered | GlideinState::Running => {
                self.state = GlideinState::Retiring;
                self.retire_reason = Some(reason);
                true
            }
            _ => false,
        }
    }

    /// Periodic self-management: lifetime and idle checks, drain-to-done,
    /// and the heartbeat that keeps the pool ad alive.
    pub fn poll(&mut self, now: TimeMs) -> PollOutcome {
        let mut outcome = PollOutcome::default();
        if matches!(self.state, GlideinState::Registered | GlideinState::Running)
            && now.saturating_sub(self.registered_at) > self.params.max_lifetime_ms
            && self.begin_retire(RetireReason::LifetimeExceeded)
        {
            outcome.began_retiring = Some(RetireReason::LifetimeExceeded);
        }
        if self.state == GlideinState::Registered
            && self.dynamic_slots.is_empty()
            && now.saturating_sub(self.last_busy_time) > self.params.idle_timeout_ms
            && self.begin_retire(RetireReason::IdleTimeout)
        {
            outcome.began_retiring = Some(RetireReason::IdleTimeout);
        }
        if self.state == GlideinState::Retiring && self.dynamic_slots.is_empty() {
            self.state = GlideinState::Done;
            outcome.finished = true;
            return outcome;
        }
        if !self.state.is_terminal() {
            outcome.heartbeat = Some((self.remaining, self.is_retiring()));
        }
        outcome
    }
}

//! Requester-side helpers for the naming protocol: sealing operations to
//! the service key and opening sealed outcomes. Used directly by daemons
//! (over the bus) and by client sessions (relayed through a daemon, end to
//! end encrypted so relays cannot read configuration secrets).

use std::sync::Arc;

use crate::crypto::{self, EntropySource, IdentityKeys, PublicKeySet, ReplayCache};
use crate::model::{EntityId, SealedControl};
use crate::transport::{Bus, Endpoint, TransportError};
use crate::wire::{WireDecode, WireEncode};

use super::protocol::{AuthContext, NamingError, NamingOp, NamingOutcome, NamingReply, NamingRequest};

/// An identity that can issue naming requests: the envelope sender (a
/// machine or a client) plus the service's public key.
pub struct NamingAccess {
    pub sender: EntityId,
    pub keys: Arc<IdentityKeys>,
    pub naming_public: PublicKeySet,
    pub entropy: Arc<dyn EntropySource>,
}

impl NamingAccess {
    /// Builds a sealed request for `op`, signed by `caller_keys` as
    /// `caller`. For client identities, caller and sender coincide; for
    /// daemons the machine seals while the node is the caller.
    pub fn seal_op(&self, caller: &EntityId, caller_keys: &IdentityKeys, op: NamingOp) -> Vec<u8> {
        let proof = crypto::sign(caller_keys, &AuthContext::signing_bytes(&op));
        let request = NamingRequest {
            op,
            auth: AuthContext {
                caller: caller.clone(),
                proof,
            },
            shard_key: None,
        };
        crypto::seal_control(
            &request.encode(),
            &self.sender,
            &self.keys,
            &self.naming_public,
            self.entropy.as_ref(),
        )
        .encode()
    }

    /// Opens a response. Authenticated outcomes arrive sealed to our key;
    /// authentication failures come back in the clear.
    pub fn open_outcome(&self, bytes: &[u8], replays: &ReplayCache) -> Result<NamingReply, NamingError> {
        if let Ok(sealed) = SealedControl::decode(bytes) {
            let payload = crypto::open_control(&sealed, &self.keys, &self.naming_public, replays)
                .map_err(|e| NamingError::BadRequest(format!("response envelope: {e}")))?;
            let outcome =
                NamingOutcome::decode(&payload).map_err(|e| NamingError::BadRequest(e.to_string()))?;
            return outcome.0;
        }
        let outcome = NamingOutcome::decode(bytes).map_err(|e| NamingError::BadRequest(e.to_string()))?;
        outcome.0
    }
}

/// A naming service that times out, is unregistered, or refuses the
/// connection is the same thing to a caller: temporarily unreachable.
fn unreachable_err(e: TransportError) -> NamingError {
    match e {
        TransportError::Timeout
        | TransportError::UnknownEndpoint(_)
        | TransportError::ConnectionFailed(_) => NamingError::Unreachable,
        other => NamingError::BadRequest(other.to_string()),
    }
}

/// A bus-attached naming requester with its own response replay cache.
pub struct NamingClient {
    pub access: NamingAccess,
    bus: Arc<dyn Bus>,
    from: Endpoint,
    naming: Endpoint,
    replays: ReplayCache,
    timeout_ms: u64,
}

impl NamingClient {
    pub fn new(
        access: NamingAccess,
        bus: Arc<dyn Bus>,
        from: Endpoint,
        naming: Endpoint,
        timeout_ms: u64,
    ) -> Self {
        NamingClient {
            access,
            bus,
            from,
            naming,
            replays: ReplayCache::new(),
            timeout_ms,
        }
    }

    /// One signed, sealed round-trip to the naming service.
    pub fn call(
        &self,
        caller: &EntityId,
        caller_keys: &IdentityKeys,
        op: NamingOp,
    ) -> Result<NamingReply, NamingError> {
        let request = self.access.seal_op(caller, caller_keys, op);
        let response = self
            .bus
            .request(&self.from, &self.naming, &request, self.timeout_ms)
            .map_err(unreachable_err)?;
        self.access.open_outcome(&response, &self.replays)
    }

    /// Relays pre-sealed request bytes (a client's end-to-end envelope).
    pub fn relay(&self, sealed_request: &[u8]) -> Result<Vec<u8>, NamingError> {
        self.bus
            .request(&self.from, &self.naming, sealed_request, self.timeout_ms)
            .map_err(unreachable_err)
    }
}

//! The naming service endpoint: sealed request handling, signature
//! verification, policy enforcement and journaling.
//!
//! Requests arrive as [`SealedControl`] envelopes addressed to the
//! service's key. The envelope sender (a machine or client) is verified
//! against its registered key, then the inner [`AuthContext`] proof is
//! verified against the caller's key — machines may act for their node —
//! before the operation touches the store. Mutations are journaled before
//! they are acknowledged.

use std::sync::{Arc, Mutex};

use crate::crypto::{self, CryptoError, EntropyExt, EntropySource, IdentityKeys, PublicKeySet, ReplayCache};
use crate::model::{EntityId, EntityKind, SealedControl};
use crate::transport::{Bus, Endpoint, TransportError};
use crate::wire::{WireDecode, WireEncode};

use super::journal::Journal;
use super::protocol::{
    AuthContext, NamingError, NamingOp, NamingOutcome, NamingReply, NamingRequest,
};
use super::NamingState;

/// Well-known endpoint name of the naming service on any bus.
pub const NAMING_ENDPOINT: &str = "naming";

pub struct NamingService {
    state: Mutex<ServiceInner>,
    keys: IdentityKeys,
    entropy: Arc<dyn EntropySource>,
    replays: ReplayCache,
}

struct ServiceInner {
    state: NamingState,
    journal: Box<dyn Journal>,
}

impl NamingService {
    /// Opens the service over a journal, replaying any existing log.
    pub fn open(
        mut journal: Box<dyn Journal>,
        keys: IdentityKeys,
        entropy: Arc<dyn EntropySource>,
    ) -> Result<Arc<Self>, NamingError> {
        let log = journal.load()?;
        let state = NamingState::replay(&log)?;
        Ok(Arc::new(NamingService {
            state: Mutex::new(ServiceInner { state, journal }),
            keys,
            entropy,
            replays: ReplayCache::new(),
        }))
    }

    pub fn public_key(&self) -> PublicKeySet {
        self.keys.public()
    }

    pub fn endpoint() -> Endpoint {
        Endpoint::named(NAMING_ENDPOINT)
    }

    /// Registers the service's request handler on a bus.
    pub fn serve(self: &Arc<Self>, bus: &dyn Bus, endpoint: &Endpoint) -> Result<(), TransportError> {
        let service = Arc::downgrade(self);
        bus.register_endpoint(
            endpoint,
            Arc::new(move |_from, payload| match service.upgrade() {
                Some(service) => service.handle_sealed(payload),
                None => Vec::new(),
            }),
        )
    }

    /// Runs a read-only inspection of the store.
    pub fn with_state<T>(&self, f: impl FnOnce(&NamingState) -> T) -> T {
        f(&self.state.lock().unwrap().state)
    }

    /// The full sealed request/response path. Always produces response
    /// bytes; errors travel as status codes.
    pub fn handle_sealed(&self, payload: &[u8]) -> Vec<u8> {
        match self.process(payload) {
            Ok((outcome, responder)) => self.seal_outcome(&outcome, &responder),
            Err(outcome) => {
                // Unauthenticated envelope: reply in the clear, there is no
                // verified key to seal to.
                NamingOutcome(Err(outcome)).encode()
            }
        }
    }

    fn process(&self, payload: &[u8]) -> Result<(NamingOutcome, PublicKeySet), NamingError> {
        let sealed = SealedControl::decode(payload).map_err(|e| NamingError::BadRequest(e.to_string()))?;
        let sender = sealed.sender.clone();

        // Resolve the envelope sender's key. The bootstrap request is the
        // one case with no registered sender: the store is empty, and the
        // envelope is verified against the key material being registered.
        let sender_public = {
            let inner = self.state.lock().unwrap();
            match inner.state.public_key_of(&sender) {
                Some(key) => {
                    Some(PublicKeySet::from_bytes(key).map_err(|e| NamingError::BadRequest(e.to_string()))?)
                }
                None if !inner.state.is_bootstrapped() => None,
                None => return Err(NamingError::Unauthenticated),
            }
        };

        let request_bytes = match &sender_public {
            Some(key) => crypto::open_control(&sealed, &self.keys, key, &self.replays).map_err(auth_err)?,
            None => {
                // Pre-bootstrap: decrypt first, then verify against the key
                // carried in the bootstrap payload itself.
                self.open_bootstrap(&sealed)?
            }
        };
        let request = NamingRequest::decode(&request_bytes).map_err(|e| NamingError::BadRequest(e.to_string()))?;

        let responder_key = match &sender_public {
            Some(key) => key.clone(),
            None => self.bootstrap_client_key(&request)?,
        };

        let outcome = self.authenticate_and_apply(&sender, &request, sender_public.is_none());
        Ok((NamingOutcome(outcome), responder_key))
    }

    /// Decrypt-then-verify path for the very first request: acceptable
    /// only because the store is empty and the operation can only be
    /// Bootstrap.
    fn open_bootstrap(&self, sealed: &SealedControl) -> Result<Vec<u8>, NamingError> {
        let payload = crypto::open_control_unverified(sealed, &self.keys).map_err(auth_err)?;
        let request = NamingRequest::decode(&payload).map_err(|e| NamingError::BadRequest(e.to_string()))?;
        let NamingOp::Bootstrap { node, client } = &request.op else {
            return Err(NamingError::Unauthenticated);
        };
        // The envelope must be signed by one of the keys being registered.
        let candidate = if sealed.sender == client.id {
            PublicKeySet::from_bytes(&client.public_key)
        } else if sealed.sender == node.id {
            PublicKeySet::from_bytes(&node.public_key)
        } else {
            return Err(NamingError::Unauthenticated);
        }
        .map_err(|e| NamingError::BadRequest(e.to_string()))?;
        crypto::verify_control_signature(sealed, &self.keys, &candidate).map_err(auth_err)?;
        Ok(payload)
    }

    fn bootstrap_client_key(&self, request: &NamingRequest) -> Result<PublicKeySet, NamingError> {
        let NamingOp::Bootstrap { client, .. } = &request.op else {
            return Err(NamingError::Unauthenticated);
        };
        PublicKeySet::from_bytes(&client.public_key).map_err(|e| NamingError::BadRequest(e.to_string()))
    }

    fn authenticate_and_apply(
        &self,
        envelope_sender: &EntityId,
        request: &NamingRequest,
        bootstrapping: bool,
    ) -> Result<NamingReply, NamingError> {
        let mut inner = self.state.lock().unwrap();
        let caller = &request.auth.caller;
        let signing_bytes = AuthContext::signing_bytes(&request.op);

        if bootstrapping {
            // Bootstrap self-certifies: the proof must verify under the
            // client key being registered.
            let NamingOp::Bootstrap { client, .. } = &request.op else {
                return Err(NamingError::Unauthenticated);
            };
            if caller != &client.id {
                return Err(NamingError::Unauthenticated);
            }
            crypto::verify(&client.public_key, &signing_bytes, &request.auth.proof)
                .map_err(|_| NamingError::Unauthenticated)?;
        } else {
            // The inner proof must verify under the caller's registered
            // key; machines may sign for their node.
            let mut verified = false;
            if let Some(entry) = inner.state.entity(caller) {
                if entry.is_active()
                    && crypto::verify(entry.descriptor.public_key(), &signing_bytes, &request.auth.proof).is_ok()
                {
                    verified = true;
                }
            }
            if !verified && caller.kind() == EntityKind::Node {
                for machine in inner.state.machines_of(caller) {
                    if crypto::verify(&machine.public_key, &signing_bytes, &request.auth.proof).is_ok() {
                        verified = true;
                        break;
                    }
                }
            }
            if !verified {
                return Err(NamingError::Unauthenticated);
            }
            // The envelope sender must be the caller itself or a machine of
            // the calling node; anything else smells like a relay splice.
            let sender_ok = envelope_sender == caller
                || (caller.kind() == EntityKind::Node
                    && inner.state.machines_of(caller).iter().any(|m| &m.id == envelope_sender));
            if !sender_ok {
                return Err(NamingError::Unauthenticated);
            }
        }

        // All mutations are serialized through this single writer. Apply to
        // a scratch copy, journal, then commit, so a journal failure leaves
        // the store untouched.
        let material: [u8; 16] = self.entropy.bytes();
        if request.op.is_mutation() {
            let mut scratch = inner.state.clone();
            let reply = scratch.apply(caller, &request.op, material)?;
            let mutation = scratch.accepted_log().last().expect("mutation was accepted").clone();
            inner.journal.append(&mutation)?;
            inner.state = scratch;
            Ok(reply)
        } else {
            inner.state.apply(caller, &request.op, material)
        }
    }

    fn seal_outcome(&self, outcome: &NamingOutcome, responder: &PublicKeySet) -> Vec<u8> {
        let naming_id = EntityId::new(EntityKind::Client, "naming-service")
            .expect("static identity is valid");
        crypto::seal_control(&outcome.encode(), &naming_id, &self.keys, responder, self.entropy.as_ref()).encode()
    }
}

fn auth_err(e: CryptoError) -> NamingError {
    match e {
        CryptoError::ReplayDetected => NamingError::BadRequest("control message replay detected".into()),
        _ => NamingError::Unauthenticated,
    }
}

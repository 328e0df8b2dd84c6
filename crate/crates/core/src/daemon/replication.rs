//! Update propagation: receiving remote updates, gap detection and
//! recovery, counter probing, responsibility rebalancing and replica
//! state pulls.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::crypto::{self, CryptoError};
use crate::model::{EntityId, KeygroupName, Ttl, UpdateMessage};
use crate::proto::{PeerReply, PeerRequest, RecoveryItem};
use crate::storage::{get_visible, CounterDecision};
use crate::transport::{Endpoint, Topic, TransportError};
use crate::wire::{WireDecode, WireEncode};

use super::events::{ApplyPath, DaemonEvent, DecryptFailure, LossReason};
use super::responsibility;
use super::Daemon;

impl Daemon {
    // ------------------------------------------------------------------
    // Responsibility and subscriptions
    // ------------------------------------------------------------------

    /// Recomputes the rendezvous assignment of remote sender nodes to this
    /// node's live machines and adjusts this machine's subscriptions to
    /// match. On adopting a sender, the machine immediately probes it so
    /// gaps inherited from a crashed sibling are recovered.
    pub(crate) fn rebalance(self: &Arc<Self>) {
        let now = self.now();
        let Ok(live) = self
            .connector
            .live_machines(now, self.cfg.params.machine_timeout_ms)
        else {
            return;
        };
        if live.is_empty() {
            return;
        }

        // Remote sender nodes across all local keygroups: the replica
        // members, who are the only publishers.
        let Ok(configs) = self.connector.cached_configs() else {
            return;
        };
        let mut senders: BTreeSet<EntityId> = BTreeSet::new();
        for cfg in &configs {
            for node in cfg.metadata.replica_nodes.keys() {
                if node != &self.cfg.node_id {
                    senders.insert(node.clone());
                }
            }
        }

        let Ok(map) = responsibility::assign(&live, &senders) else {
            return;
        };
        let previous = self.connector.load_responsibility().unwrap_or_default();
        if map != previous {
            let _ = self.connector.store_responsibility(&map);
        }

        // This machine subscribes to a keygroup's topic iff it is
        // responsible for at least one of the keygroup's senders.
        let mut adopted: Vec<(KeygroupName, EntityId)> = Vec::new();
        for cfg in &configs {
            let kg = cfg.metadata.name.clone();
            let kg_senders: Vec<&EntityId> = cfg
                .metadata
                .replica_nodes
                .keys()
                .filter(|n| *n != &self.cfg.node_id)
                .collect();
            let mine: Vec<&EntityId> = kg_senders
                .iter()
                .copied()
                .filter(|s| map.get(*s) == Some(&self.cfg.machine_id))
                .collect();
            let should_subscribe = !mine.is_empty();
            let is_subscribed = self.subs.lock().unwrap().contains_key(&kg);
            if should_subscribe && !is_subscribed {
                let publishers: Vec<Endpoint> = kg_senders
                    .iter()
                    .flat_map(|s| self.machine_endpoints_of(s))
                    .collect();
                let weak = Arc::downgrade(self);
                let handler: crate::transport::PubHandler = Arc::new(move |topic: &Topic, payload: &[u8]| {
                    if let Some(d) = weak.upgrade() {
                        d.on_update(topic, payload);
                    }
                });
                if let Ok(handle) =
                    self.bus
                        .subscribe(&self.cfg.endpoint, &Topic::for_keygroup(&kg), &publishers, handler)
                {
                    self.subs.lock().unwrap().insert(kg.clone(), handle);
                    self.emit(DaemonEvent::SubscriptionChanged {
                        machine: self.cfg.machine_id.clone(),
                        keygroup: kg.clone(),
                        subscribed: true,
                    });
                }
                for sender in &mine {
                    adopted.push((kg.clone(), (*sender).clone()));
                }
            } else if !should_subscribe && is_subscribed {
                if let Some(handle) = self.subs.lock().unwrap().remove(&kg) {
                    self.bus.unsubscribe(&handle);
                    self.emit(DaemonEvent::SubscriptionChanged {
                        machine: self.cfg.machine_id.clone(),
                        keygroup: kg.clone(),
                        subscribed: false,
                    });
                }
            } else if should_subscribe {
                // Already subscribed: senders newly assigned to us still
                // need a probe.
                for sender in &mine {
                    if previous.get(*sender) != Some(&self.cfg.machine_id) {
                        adopted.push((kg.clone(), (*sender).clone()));
                    }
                }
            }
        }

        for (kg, sender) in adopted {
            self.schedule_in(0, move |d| {
                d.probe_sender(&kg, &sender);
                d.recover_gaps(&sender, &kg);
            });
        }
    }

    // ------------------------------------------------------------------
    // Receiving updates
    // ------------------------------------------------------------------

    /// Handles one message delivered on a keygroup topic.
    ///
    /// Counter bookkeeping: duplicates are ignored; the next-in-sequence
    /// counter applies directly; a counter beyond the expected one applies
    /// and files the skipped counters as pending gaps with a scheduled
    /// recovery. A message that fails to open leaves the cursor untouched,
    /// so the counter stays recoverable.
    pub(crate) fn on_update(self: &Arc<Self>, topic: &Topic, payload: &[u8]) {
        let Ok(update) = UpdateMessage::decode(payload) else {
            log::debug!("{}: undecodable update on {}", self.cfg.machine_id, topic.as_str());
            return;
        };
        if update.sender_node == self.cfg.node_id {
            return; // published by a sibling machine of this node
        }
        let kg = update.keygroup.clone();
        let Ok(Some(cached)) = self.connector.get_cached_config(&kg) else {
            return; // stale subscription, not our keygroup anymore
        };
        // Only the responsible machine applies updates from this sender.
        let map = self.connector.load_responsibility().unwrap_or_default();
        if map.get(&update.sender_node) != Some(&self.cfg.machine_id) {
            return;
        }

        self.clock.charge_ms(self.cfg.params.costs.open_ms);
        let now = self.now();
        let record = {
            let secrets = cached.usable_secrets(now);
            match crypto::open_record(&update.payload, secrets.iter().copied()) {
                Ok(record) => Ok(record),
                Err(CryptoError::UnknownSecretVersion(_)) => {
                    // Rotation may have outpaced our cache: refresh once and
                    // retry before giving up.
                    match self.refresh_keygroup(&kg) {
                        Ok(fresh) => {
                            let secrets = fresh.usable_secrets(self.now());
                            crypto::open_record(&update.payload, secrets.iter().copied())
                        }
                        Err(_) => Err(CryptoError::UnknownSecretVersion(update.secret_version)),
                    }
                }
                Err(e) => Err(e),
            }
        };
        let record = match record {
            Ok(record) => record,
            Err(e) => {
                let reason = match e {
                    CryptoError::UnknownSecretVersion(v) => DecryptFailure::UnknownSecretVersion(v),
                    _ => DecryptFailure::AuthenticationFailed,
                };
                log::warn!(
                    "{}: discarding update {} from {} on {}: {e}",
                    self.cfg.machine_id,
                    update.counter,
                    update.sender_node,
                    kg
                );
                self.emit(DaemonEvent::DecryptFailed {
                    node: self.cfg.node_id.clone(),
                    machine: self.cfg.machine_id.clone(),
                    sender: update.sender_node.clone(),
                    keygroup: kg.clone(),
                    counter: update.counter,
                    reason,
                });
                return;
            }
        };

        let Ok(mut cursor) = self.connector.load_cursor(&update.sender_node, &kg) else {
            return;
        };
        match cursor.observe(update.counter) {
            CounterDecision::Duplicate => {
                self.emit(DaemonEvent::DuplicateIgnored {
                    node: self.cfg.node_id.clone(),
                    sender: update.sender_node.clone(),
                    keygroup: kg.clone(),
                    counter: update.counter,
                });
                return;
            }
            CounterDecision::Apply { new_gaps } => {
                self.clock.charge_ms(self.cfg.params.costs.storage_put_ms);
                let apply_now = self.now();
                match self.connector.merge_record(&kg, &record, apply_now) {
                    Ok(merged) => {
                        if cached.metadata.is_trigger(&self.cfg.node_id) {
                            let _ = self.connector.trigger_append(&kg, &merged.stored.record);
                        }
                        self.emit(DaemonEvent::UpdateApplied {
                            node: self.cfg.node_id.clone(),
                            machine: self.cfg.machine_id.clone(),
                            sender: update.sender_node.clone(),
                            keygroup: kg.clone(),
                            record_key: record.record_key.clone(),
                            counter: update.counter,
                            apply_ms: apply_now,
                            via: ApplyPath::Direct,
                        });
                    }
                    Err(e) => {
                        log::warn!("{}: merge failed: {e}", self.cfg.machine_id);
                        return; // cursor not stored; the counter stays open
                    }
                }
                if !new_gaps.is_empty() {
                    cursor.next_retry_ms = self.now() + self.cfg.params.retry_base_ms;
                    cursor.retry_attempt = 0;
                    self.emit(DaemonEvent::GapsDetected {
                        node: self.cfg.node_id.clone(),
                        sender: update.sender_node.clone(),
                        keygroup: kg.clone(),
                        counters: new_gaps,
                    });
                    let sender = update.sender_node.clone();
                    let kg2 = kg.clone();
                    self.schedule_in(self.cfg.params.retry_base_ms, move |d| {
                        d.recover_gaps(&sender, &kg2);
                    });
                }
                let _ = self.connector.store_cursor(&update.sender_node, &kg, &cursor);
            }
        }
    }

    // ------------------------------------------------------------------
    // Gap recovery
    // ------------------------------------------------------------------

    /// Asks the sender node for the pending missed counters of one
    /// stream. Buffered counters come back as the current record for the
    /// buffered key; evicted counters are acknowledged as permanently
    /// lost. Unreachable senders are retried with exponential backoff,
    /// without bound, for as long as the gap persists.
    pub(crate) fn recover_gaps(self: &Arc<Self>, sender: &EntityId, kg: &KeygroupName) {
        let Ok(mut cursor) = self.connector.load_cursor(sender, kg) else {
            return;
        };
        if cursor.pending.is_empty() {
            return;
        }
        let now = self.now();
        if now < cursor.next_retry_ms {
            let sender = sender.clone();
            let kg = kg.clone();
            let delay = cursor.next_retry_ms - now;
            self.schedule_in(delay, move |d| d.recover_gaps(&sender, &kg));
            return;
        }

        let counters: Vec<u64> = cursor.pending.iter().copied().collect();
        let request = PeerRequest::RecoverRange {
            keygroup: kg.clone(),
            counters: counters.clone(),
        }
        .encode();

        let mut reply: Option<PeerReply> = None;
        for endpoint in self.machine_endpoints_of(sender) {
            match self
                .bus
                .request(&self.cfg.endpoint, &endpoint, &request, self.cfg.params.request_timeout_ms)
            {
                Ok(bytes) => {
                    if let Ok(decoded) = PeerReply::decode(&bytes) {
                        reply = Some(decoded);
                        break;
                    }
                }
                Err(TransportError::Timeout) => continue,
                Err(_) => continue,
            }
        }

        let Some(PeerReply::Recovered(items)) = reply else {
            // Sender unreachable (or answered garbage): exponential backoff,
            // capped, unbounded retries while the gap persists.
            cursor.retry_attempt = cursor.retry_attempt.saturating_add(1);
            let backoff = (self.cfg.params.retry_base_ms << cursor.retry_attempt.min(16))
                .min(self.cfg.params.retry_cap_ms);
            cursor.next_retry_ms = self.now() + backoff;
            let _ = self.connector.store_cursor(sender, kg, &cursor);
            let sender = sender.clone();
            let kg = kg.clone();
            self.schedule_in(backoff, move |d| d.recover_gaps(&sender, &kg));
            return;
        };

        let cached = self.connector.get_cached_config(kg).ok().flatten();
        let is_trigger = cached
            .as_ref()
            .map(|c| c.metadata.is_trigger(&self.cfg.node_id))
            .unwrap_or(false);
        for (counter, item) in items {
            if !cursor.pending.contains(&counter) {
                continue;
            }
            match item {
                RecoveryItem::Current(sealed) => {
                    let opened = cached
                        .as_ref()
                        .map(|c| {
                            let secrets = c.usable_secrets(self.now());
                            crypto::open_record(&sealed, secrets.iter().copied())
                        })
                        .unwrap_or(Err(CryptoError::UnknownSecretVersion(sealed.secret_version)));
                    match opened {
                        Ok(record) => {
                            let apply_now = self.now();
                            if let Ok(merged) = self.connector.merge_record(kg, &record, apply_now) {
                                if is_trigger {
                                    let _ = self.connector.trigger_append(kg, &merged.stored.record);
                                }
                                cursor.resolve(counter, true);
                                self.emit(DaemonEvent::UpdateApplied {
                                    node: self.cfg.node_id.clone(),
                                    machine: self.cfg.machine_id.clone(),
                                    sender: sender.clone(),
                                    keygroup: kg.clone(),
                                    record_key: record.record_key.clone(),
                                    counter,
                                    apply_ms: apply_now,
                                    via: ApplyPath::Recovery,
                                });
                            }
                        }
                        Err(_) => {
                            // Leave it pending; a config refresh may make the
                            // secret available on a later retry.
                        }
                    }
                }
                RecoveryItem::Expired => {
                    cursor.resolve(counter, false);
                    self.emit(DaemonEvent::CounterLost {
                        node: self.cfg.node_id.clone(),
                        sender: sender.clone(),
                        keygroup: kg.clone(),
                        counter,
                        reason: LossReason::Expired,
                    });
                }
                RecoveryItem::Evicted => {
                    cursor.resolve(counter, false);
                    self.emit(DaemonEvent::CounterLost {
                        node: self.cfg.node_id.clone(),
                        sender: sender.clone(),
                        keygroup: kg.clone(),
                        counter,
                        reason: LossReason::Evicted,
                    });
                }
            }
        }

        if cursor.pending.is_empty() {
            cursor.retry_attempt = 0;
            cursor.next_retry_ms = 0;
        } else {
            cursor.retry_attempt = cursor.retry_attempt.saturating_add(1);
            let backoff = (self.cfg.params.retry_base_ms << cursor.retry_attempt.min(16))
                .min(self.cfg.params.retry_cap_ms);
            cursor.next_retry_ms = self.now() + backoff;
            let sender2 = sender.clone();
            let kg2 = kg.clone();
            self.schedule_in(backoff, move |d| d.recover_gaps(&sender2, &kg2));
        }
        let _ = self.connector.store_cursor(sender, kg, &cursor);
    }

    // ------------------------------------------------------------------
    // Counter probes (tail-loss detection)
    // ------------------------------------------------------------------

    pub(crate) fn probe_tick(self: &Arc<Self>) {
        let Ok(configs) = self.connector.cached_configs() else {
            return;
        };
        let map = self.connector.load_responsibility().unwrap_or_default();
        for cfg in configs {
            let kg = cfg.metadata.name.clone();
            for sender in cfg.metadata.replica_nodes.keys() {
                if sender == &self.cfg.node_id {
                    continue;
                }
                if map.get(sender) != Some(&self.cfg.machine_id) {
                    continue;
                }
                self.probe_sender(&kg, sender);
            }
        }
    }

    /// Asks one sender for its latest counter; anything above our
    /// high-water mark becomes pending gaps handed to recovery. This is
    /// what makes a dropped final update recoverable: no later message
    /// would ever reveal it.
    pub(crate) fn probe_sender(self: &Arc<Self>, kg: &KeygroupName, sender: &EntityId) {
        let request = PeerRequest::LatestCounter { keygroup: kg.clone() }.encode();
        let mut latest: Option<u64> = None;
        for endpoint in self.machine_endpoints_of(sender) {
            match self
                .bus
                .request(&self.cfg.endpoint, &endpoint, &request, self.cfg.params.request_timeout_ms)
            {
                Ok(bytes) => {
                    if let Ok(PeerReply::Latest { counter }) = PeerReply::decode(&bytes) {
                        latest = Some(counter);
                        break;
                    }
                }
                Err(_) => continue,
            }
        }
        let Some(latest) = latest else { return };
        let Ok(mut cursor) = self.connector.load_cursor(sender, kg) else {
            return;
        };
        let new_gaps = cursor.extend_to(latest);
        if new_gaps.is_empty() {
            return;
        }
        cursor.next_retry_ms = self.now();
        cursor.retry_attempt = 0;
        let _ = self.connector.store_cursor(sender, kg, &cursor);
        self.emit(DaemonEvent::GapsDetected {
            node: self.cfg.node_id.clone(),
            sender: sender.clone(),
            keygroup: kg.clone(),
            counters: new_gaps,
        });
        self.recover_gaps(sender, kg);
    }

    // ------------------------------------------------------------------
    // Replica migration
    // ------------------------------------------------------------------

    /// Pulls the full current record set from another replica node after
    /// this node joined an existing keygroup. Retries a few times; the
    /// periodic probe covers anything missed beyond that.
    pub(crate) fn state_pull(self: &Arc<Self>, kg: &KeygroupName, source: &EntityId, attempt: u32) {
        let Ok(Some(cached)) = self.connector.get_cached_config(kg) else {
            return;
        };
        let request = PeerRequest::StatePull { keygroup: kg.clone() }.encode();
        let mut reply: Option<PeerReply> = None;
        for endpoint in self.machine_endpoints_of(source) {
            if let Ok(bytes) =
                self.bus
                    .request(&self.cfg.endpoint, &endpoint, &request, self.cfg.params.request_timeout_ms)
            {
                if let Ok(decoded) = PeerReply::decode(&bytes) {
                    reply = Some(decoded);
                    break;
                }
            }
        }
        match reply {
            Some(PeerReply::State(records)) => {
                let mut pulled = 0usize;
                for sealed in records {
                    let secrets = cached.usable_secrets(self.now());
                    if let Ok(record) = crypto::open_record(&sealed, secrets.iter().copied()) {
                        let now = self.now();
                        if self.connector.merge_record(kg, &record, now).is_ok() {
                            pulled += 1;
                        }
                    }
                }
                self.emit(DaemonEvent::StatePulled {
                    node: self.cfg.node_id.clone(),
                    keygroup: kg.clone(),
                    from: source.clone(),
                    records: pulled,
                });
            }
            _ if attempt < 5 => {
                let backoff = self.cfg.params.retry_base_ms << attempt;
                let kg = kg.clone();
                let source = source.clone();
                self.schedule_in(backoff, move |d| d.state_pull(&kg, &source, attempt + 1));
            }
            _ => {
                log::warn!("{}: state pull for {kg} from {source} gave up", self.cfg.machine_id);
            }
        }
    }

    // ------------------------------------------------------------------
    // Peer request serving
    // ------------------------------------------------------------------

    pub(crate) fn handle_peer_raw(self: &Arc<Self>, payload: &[u8]) -> Vec<u8> {
        let reply = match PeerRequest::decode(payload) {
            Ok(request) => self.handle_peer(request),
            Err(e) => PeerReply::PeerError(e.to_string()),
        };
        reply.encode()
    }

    fn handle_peer(self: &Arc<Self>, request: PeerRequest) -> PeerReply {
        match request {
            PeerRequest::LatestCounter { keygroup } => match self.connector.latest_counter(&keygroup) {
                Ok(counter) => PeerReply::Latest { counter },
                Err(e) => PeerReply::PeerError(e.to_string()),
            },
            PeerRequest::RecoverRange { keygroup, counters } => {
                let Ok(Some(cached)) = self.connector.get_cached_config(&keygroup) else {
                    return PeerReply::PeerError("keygroup unknown at sender".into());
                };
                let buffered: std::collections::BTreeMap<u64, String> = match self.connector.buffered_entries(&keygroup)
                {
                    Ok(entries) => entries.into_iter().collect(),
                    Err(e) => return PeerReply::PeerError(e.to_string()),
                };
                let ttl = cached.metadata.ttl_for(&self.cfg.node_id).unwrap_or(Ttl::Disabled);
                let now = self.now();
                let mut items = Vec::with_capacity(counters.len());
                for counter in counters {
                    let item = match buffered.get(&counter) {
                        None => RecoveryItem::Evicted,
                        Some(key) => {
                            let stored = self.connector.get_record(&keygroup, key).ok().flatten();
                            match get_visible(stored, ttl, now) {
                                // The CURRENT record for the buffered key,
                                // tombstones included; intermediate versions
                                // are gone by design.
                                Some(record) => {
                                    self.clock.charge_ms(self.cfg.params.costs.seal_ms);
                                    RecoveryItem::Current(crypto::seal_record(
                                        &record,
                                        &cached.metadata.secret,
                                        self.entropy.as_ref(),
                                    ))
                                }
                                None => RecoveryItem::Expired,
                            }
                        }
                    };
                    items.push((counter, item));
                }
                PeerReply::Recovered(items)
            }
            PeerRequest::StatePull { keygroup } => {
                let Ok(Some(cached)) = self.connector.get_cached_config(&keygroup) else {
                    return PeerReply::PeerError("keygroup unknown at source".into());
                };
                let ttl = cached.metadata.ttl_for(&self.cfg.node_id).unwrap_or(Ttl::Disabled);
                let now = self.now();
                match self.connector.all_records(&keygroup) {
                    Ok(records) => {
                        let sealed = records
                            .into_iter()
                            .filter(|s| !ttl.expired(s.local_write_time, now))
                            .map(|s| crypto::seal_record(&s.record, &cached.metadata.secret, self.entropy.as_ref()))
                            .collect();
                        PeerReply::State(sealed)
                    }
                    Err(e) => PeerReply::PeerError(e.to_string()),
                }
            }
        }
    }
}

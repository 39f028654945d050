//! Point-to-point send/receive over the fabric: staging, chunked ring-buffer
//! publication, busy-poll detection, copy-out, and acknowledgment, in both
//! synchronous and asynchronous modes.
//!
//! Endpoints are engine-driven state machines; a matched send/receive pair
//! is planned as one deterministic chunk timeline. Interleaving between the
//! two endpoints exists only through event timestamps.

use std::collections::{BTreeMap, VecDeque};

use crate::engine::{Trace, TimeNs};
use crate::error::{Result, SimError};
use crate::fabric::{poll_schedule, FabricSim, NodeId, PollResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferSemantics {
    Memory,
    Dma,
}

/// Parameters of one paired send/receive.
#[derive(Debug, Clone, Copy)]
pub struct TransferRequest {
    pub event_id: u64,
    pub cores: u32,
    pub mode: TransferMode,
    pub semantics: TransferSemantics,
    /// Zero-copy variant: the receive side reads the managed area in place,
    /// charging only the send-side copy.
    pub zero_copy: bool,
}

impl TransferRequest {
    pub fn memory_sync(event_id: u64, cores: u32) -> Self {
        Self {
            event_id,
            cores,
            mode: TransferMode::Sync,
            semantics: TransferSemantics::Memory,
            zero_copy: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChannelId(pub u32, pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendHandle(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvHandle(usize);

/// Resolved timing of one side of a completed transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionInfo {
    pub posted_ns: TimeNs,
    /// All payload bytes visible in the receiver app area.
    pub data_visible_ns: TimeNs,
    /// Control returned to the caller (after ack handshake on sync sends).
    pub complete_ns: TimeNs,
    pub chunks: usize,
    /// Time spent blocked on the outstanding-chunk window.
    pub stall_ns: TimeNs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferStatus {
    Pending,
    Complete(CompletionInfo),
    Fault(String),
}

#[derive(Debug)]
struct PendingSend {
    handle: usize,
    event_id: u64,
    cores: u32,
    semantics: TransferSemantics,
    zero_copy: bool,
    payload: Vec<u8>,
    posted_ns: TimeNs,
}

#[derive(Debug)]
struct PendingRecv {
    handle: usize,
    event_id: u64,
    cores: u32,
    dst_offset: usize,
    posted_ns: TimeNs,
}

#[derive(Debug)]
struct ChannelState {
    src: NodeId,
    dst: NodeId,
    mode: Option<TransferMode>,
    sends: VecDeque<PendingSend>,
    recvs: VecDeque<PendingRecv>,
    /// Cumulative chunk counter; maps chunks onto ring slots.
    chunk_counter: u64,
    /// Next send may not publish before this instant (per-channel FIFO).
    send_busy_until: TimeNs,
    recv_busy_until: TimeNs,
    last_send_complete: TimeNs,
    last_recv_complete: TimeNs,
    /// Metadata field slots for this core pair.
    local_meta_index: usize,
    remote_meta_index: usize,
}

#[derive(Debug)]
struct HandleState {
    status: TransferStatus,
    consumed: bool,
}

/// Default simulated timeout before a stalled transfer surfaces to the
/// reliability module.
pub const DEFAULT_TIMEOUT_NS: TimeNs = 10_000_000;

/// The p2p protocol layer: owns the fabric plus per-channel protocol state.
pub struct P2pSim {
    pub fabric: FabricSim,
    pub trace: Trace,
    channels: BTreeMap<(u32, u32), ChannelState>,
    handles: Vec<HandleState>,
    next_meta_index: usize,
    pub timeout_ns: TimeNs,
}

impl P2pSim {
    pub fn new(fabric: FabricSim) -> Self {
        Self {
            fabric,
            trace: Trace::new(),
            channels: BTreeMap::new(),
            handles: Vec::new(),
            next_meta_index: 0,
            timeout_ns: DEFAULT_TIMEOUT_NS,
        }
    }

    pub fn without_trace(fabric: FabricSim) -> Self {
        let mut s = Self::new(fabric);
        s.trace = Trace::disabled();
        s
    }

    /// One channel per ordered pair; reopening returns the existing one.
    pub fn open_channel(&mut self, src: NodeId, dst: NodeId) -> Result<ChannelId> {
        if src == dst {
            return Err(SimError::Config("channel endpoints must differ".into()));
        }
        if !self.fabric.topology.contains(src) || !self.fabric.topology.contains(dst) {
            return Err(SimError::Config("channel endpoint outside topology".into()));
        }
        if !self.channels.contains_key(&(src.0, dst.0)) {
            let local = self.next_meta_index;
            let remote = self.next_meta_index + 1;
            self.next_meta_index += 2;
            self.channels.insert(
                (src.0, dst.0),
                ChannelState {
                    src,
                    dst,
                    mode: None,
                    sends: VecDeque::new(),
                    recvs: VecDeque::new(),
                    chunk_counter: 0,
                    send_busy_until: 0,
                    recv_busy_until: 0,
                    last_send_complete: 0,
                    last_recv_complete: 0,
                    local_meta_index: local,
                    remote_meta_index: remote,
                },
            );
            // make sure the ring exists before any transfer plans against it
            self.fabric.ring_mut(dst, src);
        }
        Ok(ChannelId(src.0, dst.0))
    }

    fn new_handle(&mut self) -> usize {
        self.handles.push(HandleState {
            status: TransferStatus::Pending,
            consumed: false,
        });
        self.handles.len() - 1
    }

    fn check_mode(&mut self, chan: ChannelId, mode: TransferMode) -> Result<()> {
        let st = self
            .channels
            .get_mut(&(chan.0, chan.1))
            .ok_or_else(|| SimError::Usage("unknown channel".into()))?;
        match st.mode {
            None => {
                st.mode = Some(mode);
                Ok(())
            }
            Some(m) if m == mode => Ok(()),
            Some(_) => Err(SimError::Usage(
                "sync and async transfers may not share one channel".into(),
            )),
        }
    }

    /// Post a send. In sync mode the simulated caller blocks until the final
    /// acknowledgment; in either mode the returned handle resolves once a
    /// matching receive has been posted.
    pub fn send(
        &mut self,
        chan: ChannelId,
        req: TransferRequest,
        payload: &[u8],
        posted_ns: TimeNs,
    ) -> Result<SendHandle> {
        if req.cores == 0 {
            return Err(SimError::Config("send requires cores >= 1".into()));
        }
        self.check_mode(chan, req.mode)?;
        let handle = self.new_handle();
        let st = self.channels.get_mut(&(chan.0, chan.1)).unwrap();
        st.sends.push_back(PendingSend {
            handle,
            event_id: req.event_id,
            cores: req.cores,
            semantics: req.semantics,
            zero_copy: req.zero_copy,
            payload: payload.to_vec(),
            posted_ns,
        });
        self.try_match(chan)?;
        Ok(SendHandle(handle))
    }

    /// Post a receive for `req.event_id` into the app area at `dst_offset`.
    /// Posting order relative to the send does not matter.
    pub fn receive(
        &mut self,
        chan: ChannelId,
        req: TransferRequest,
        dst_offset: usize,
        posted_ns: TimeNs,
    ) -> Result<RecvHandle> {
        self.check_mode(chan, req.mode)?;
        let handle = self.new_handle();
        let st = self.channels.get_mut(&(chan.0, chan.1)).unwrap();
        st.recvs.push_back(PendingRecv {
            handle,
            event_id: req.event_id,
            cores: req.cores,
            dst_offset,
            posted_ns,
        });
        self.try_match(chan)?;
        Ok(RecvHandle(handle))
    }

    /// Non-destructive status check; completed handles may be polled once.
    pub fn poll_send(&mut self, h: SendHandle) -> Result<TransferStatus> {
        self.poll_handle(h.0)
    }

    pub fn poll_recv(&mut self, h: RecvHandle) -> Result<TransferStatus> {
        self.poll_handle(h.0)
    }

    fn poll_handle(&mut self, idx: usize) -> Result<TransferStatus> {
        let st = self
            .handles
            .get_mut(idx)
            .ok_or_else(|| SimError::Usage("unknown handle".into()))?;
        if st.consumed {
            return Err(SimError::Usage("handle already consumed".into()));
        }
        match &st.status {
            TransferStatus::Pending => Ok(TransferStatus::Pending),
            done => {
                let out = done.clone();
                st.consumed = true;
                Ok(out)
            }
        }
    }

    /// Completion info for a resolved handle without consuming it (test and
    /// metrics surface).
    pub fn completion(&self, h: SendHandle) -> Option<CompletionInfo> {
        match &self.handles[h.0].status {
            TransferStatus::Complete(c) => Some(*c),
            _ => None,
        }
    }

    pub fn recv_completion(&self, h: RecvHandle) -> Option<CompletionInfo> {
        match &self.handles[h.0].status {
            TransferStatus::Complete(c) => Some(*c),
            _ => None,
        }
    }

    /// Sends whose receive has not arrived within the timeout; feeds the
    /// link-probe path in the reliability module.
    pub fn stalled_sends(&self, now_ns: TimeNs) -> Vec<(ChannelId, u64, TimeNs)> {
        let mut out = Vec::new();
        for (key, st) in &self.channels {
            for s in &st.sends {
                if now_ns.saturating_sub(s.posted_ns) >= self.timeout_ns {
                    out.push((ChannelId(key.0, key.1), s.event_id, s.posted_ns));
                }
            }
        }
        out
    }

    fn try_match(&mut self, chan: ChannelId) -> Result<()> {
        loop {
            let key = (chan.0, chan.1);
            let st = self.channels.get_mut(&key).unwrap();
            if st.sends.is_empty() || st.recvs.is_empty() {
                return Ok(());
            }
            // FIFO rendezvous: head send pairs with head receive.
            if st.sends[0].event_id != st.recvs[0].event_id {
                let send = st.sends.front().unwrap();
                let recv = st.recvs.pop_front().unwrap();
                let detail = format!(
                    "event_id mismatch: send {} vs recv {}",
                    send.event_id, recv.event_id
                );
                let (src, dst) = (st.src, st.dst);
                let t = recv.posted_ns.max(send.posted_ns);
                self.handles[recv.handle].status = TransferStatus::Fault(detail.clone());
                self.fabric.record_fault(t, dst, detail.clone());
                self.trace
                    .record(t, dst.0, "protocol_fault", Some(src.0), 0, detail);
                // The send stays queued: the sender keeps busy-polling for an
                // acknowledgment that never comes (detectable stall).
                continue;
            }
            let st = self.channels.get_mut(&key).unwrap();
            let send = st.sends.pop_front().unwrap();
            let recv = st.recvs.pop_front().unwrap();
            self.plan_transfer(chan, send, recv)?;
        }
    }

    /// Compute the full chunk timeline of one matched transfer and commit
    /// bytes, metadata updates, trace rows, and handle completions.
    fn plan_transfer(&mut self, chan: ChannelId, send: PendingSend, recv: PendingRecv) -> Result<()> {
        let key = (chan.0, chan.1);
        let (src, dst, chunk_base, send_floor, recv_floor, local_meta, remote_meta) = {
            let st = self.channels.get(&key).unwrap();
            (
                st.src,
                st.dst,
                st.chunk_counter,
                st.send_busy_until,
                st.recv_busy_until,
                st.local_meta_index,
                st.remote_meta_index,
            )
        };

        let len = send.payload.len();
        let chunk_bytes = self.fabric.memcfg.mem_chunk_bytes();
        let n = self.fabric.memcfg.chunk_count(len);
        let slots = self.fabric.memcfg.ring_slots;
        let window = (slots / 2).max(1);
        let lat = self.fabric.latency.clone();
        let tick = lat.poll_interval_ns();
        let meta_cost = lat.meta_write_ns();

        // Step 1: stage from app area into core staging buffers.
        let t0 = send.posted_ns.max(send_floor);
        self.trace.record(
            t0,
            src.0,
            "send_stage",
            Some(dst.0),
            len as u64,
            format!("event={} chunks={n}", send.event_id),
        );

        // Bulk wire cost across all chunks (steps 2-3), spread uniformly.
        let (startup_ns, wire_total) = match send.semantics {
            TransferSemantics::Memory => {
                let total = lat.mem_latency_ns(len, send.cores);
                let startup = lat.mem_latency_ns(0, send.cores);
                (startup, total - startup)
            }
            TransferSemantics::Dma => {
                let total = lat.dma_latency_ns(len);
                let startup = lat.dma_latency_ns(0);
                (startup, total - startup)
            }
        };

        let per_chunk_wire = wire_total / n as u64;
        let recv_copy_total = if send.zero_copy {
            0
        } else {
            lat.mem_latency_ns(len, recv.cores.max(1)) - lat.mem_latency_ns(0, recv.cores.max(1))
        };
        let per_chunk_copy = recv_copy_total / n as u64;

        let mut publish = vec![0u64; n];
        let mut copy_done = vec![0u64; n];
        let mut ack = vec![0u64; n];
        let mut stall_ns: TimeNs = 0;
        let mut recv_started = false;

        for i in 0..n {
            // Step 2-3: write chunk into the receiver ring slot, publish tail.
            let wire_ready = t0 + startup_ns + per_chunk_wire * (i as u64 + 1);
            let window_ready = if i >= window {
                // sender busy-polls its local metadata for the ack freeing
                // this slot (step 4 / step 8 path)
                match poll_schedule(wire_ready, Some(ack[i - window]), tick, self.timeout_ns) {
                    PollResult::Satisfied(t) => t,
                    PollResult::TimedOut(t) => t,
                }
            } else {
                wire_ready
            };
            stall_ns += window_ready - wire_ready;
            publish[i] = window_ready;

            let global_chunk = chunk_base + i as u64;
            let slot = (global_chunk % slots as u64) as usize;
            let lo = i * chunk_bytes;
            let hi = ((i + 1) * chunk_bytes).min(len);
            {
                let ring = self.fabric.ring_mut(dst, src);
                debug_assert!(
                    ring.slot_free_at(slot) <= publish[i],
                    "ring slot reused before acknowledgment"
                );
                if hi > lo {
                    ring.write_slot(slot, &send.payload[lo..hi]);
                }
                ring.tail = ((global_chunk + 1) as usize * chunk_bytes) % ring.capacity_bytes;
            }
            {
                let w = self.fabric.meta_mut(dst, remote_meta);
                w.field.event_id = send.event_id;
                w.field.chunk_id = i as u64 + 1;
                w.field.tail_ptr = ((global_chunk + 1) % slots as u64) * chunk_bytes as u64;
                w.published_at = publish[i];
            }
            self.trace.record(
                publish[i],
                src.0,
                "send_publish",
                Some(dst.0),
                (hi - lo) as u64,
                format!("event={} chunk_id={}", send.event_id, i + 1),
            );

            // Steps 5-6: receiver polls for the tail advance, then copies the
            // chunk from the managed area into its app area.
            let chunk_seen = match poll_schedule(
                recv.posted_ns.max(recv_floor),
                Some(publish[i]),
                tick,
                self.timeout_ns,
            ) {
                PollResult::Satisfied(t) => t,
                PollResult::TimedOut(t) => t,
            };
            let copy_start = if !recv_started {
                recv_started = true;
                // one staging startup on the receive side
                chunk_seen
                    + if send.zero_copy {
                        0
                    } else {
                        lat.mem_latency_ns(0, recv.cores.max(1))
                    }
            } else {
                copy_done[i - 1].max(chunk_seen)
            };
            copy_done[i] = copy_start + per_chunk_copy;

            if hi > lo {
                let data: Vec<u8> = self
                    .fabric
                    .node(dst)
                    .unwrap()
                    .rings[&src]
                    .read_slot(slot, hi - lo)
                    .to_vec();
                let app = &mut self.fabric.node_mut(dst).app;
                let at = recv.dst_offset + lo;
                if at + data.len() > app.len() {
                    return Err(SimError::OutOfBounds {
                        node: dst.0,
                        offset: at,
                        len: data.len(),
                        limit: app.len(),
                    });
                }
                app[at..at + data.len()].copy_from_slice(&data);
            }
            self.trace.record(
                copy_done[i],
                dst.0,
                "recv_copy",
                Some(src.0),
                (hi - lo) as u64,
                format!("event={} chunk_id={}", send.event_id, i + 1),
            );

            // Step 7: acknowledge into the sender's metadata area and free
            // the ring slot for reuse.
            ack[i] = copy_done[i] + meta_cost;
            {
                let w = self.fabric.meta_mut(src, local_meta);
                w.field.event_id = send.event_id;
                w.field.chunk_id = i as u64 + 1;
                w.published_at = ack[i];
            }
            self.fabric.ring_mut(dst, src).mark_slot_freed(slot, ack[i]);
            self.trace.record(
                ack[i],
                dst.0,
                "recv_ack",
                Some(src.0),
                0,
                format!("event={} chunk_id={}", send.event_id, i + 1),
            );
        }

        let data_visible = copy_done[n - 1];
        // Step 8: sender detects the final acknowledgment.
        let send_complete = match poll_schedule(publish[n - 1], Some(ack[n - 1]), tick, self.timeout_ns)
        {
            PollResult::Satisfied(t) => t,
            PollResult::TimedOut(t) => t,
        };

        let st = self.channels.get_mut(&key).unwrap();
        st.chunk_counter += n as u64;
        st.send_busy_until = publish[n - 1];
        st.recv_busy_until = ack[n - 1];
        // clamp completions monotone so per-channel FIFO holds exactly
        let send_complete = send_complete.max(st.last_send_complete);
        let recv_complete = ack[n - 1].max(st.last_recv_complete);
        st.last_send_complete = send_complete;
        st.last_recv_complete = recv_complete;

        self.handles[send.handle].status = TransferStatus::Complete(CompletionInfo {
            posted_ns: send.posted_ns,
            data_visible_ns: data_visible,
            complete_ns: send_complete,
            chunks: n,
            stall_ns,
        });
        self.handles[recv.handle].status = TransferStatus::Complete(CompletionInfo {
            posted_ns: recv.posted_ns,
            data_visible_ns: data_visible,
            complete_ns: recv_complete,
            chunks: n,
            stall_ns: 0,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::us_to_ns;
    use crate::fabric::{build_topology, Topology};

    fn sim() -> P2pSim {
        P2pSim::new(FabricSim::with_defaults(build_topology(4, 2, 48).unwrap()))
    }

    fn run_pair(
        sim: &mut P2pSim,
        src: u32,
        dst: u32,
        payload: &[u8],
        cores: u32,
    ) -> (CompletionInfo, CompletionInfo) {
        let ch = sim.open_channel(NodeId(src), NodeId(dst)).unwrap();
        let req = TransferRequest::memory_sync(1, cores);
        let s = sim.send(ch, req, payload, 0).unwrap();
        let r = sim.receive(ch, req, 0, 0).unwrap();
        (sim.completion(s).unwrap(), sim.recv_completion(r).unwrap())
    }

    #[test]
    fn echo_identity_64k() {
        let mut sim = sim();
        let payload: Vec<u8> = (0..64 * 1024).map(|i| (i % 256) as u8).collect();
        run_pair(&mut sim, 0, 1, &payload, 8);
        assert_eq!(
            &sim.fabric.node(NodeId(1)).unwrap().app[..payload.len()],
            &payload[..]
        );
    }

    #[test]
    fn one_mb_two_cores_e2e_under_20us() {
        let mut sim = sim();
        let payload = vec![0xabu8; 1024 * 1024];
        let (s, _) = run_pair(&mut sim, 0, 1, &payload, 2);
        assert!(
            s.complete_ns < us_to_ns(20.0),
            "e2e {} ns >= 20us",
            s.complete_ns
        );
    }

    #[test]
    fn receive_posted_before_send_still_completes() {
        let mut sim = sim();
        let ch = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
        let req = TransferRequest::memory_sync(9, 4);
        let r = sim.receive(ch, req, 100, 0).unwrap();
        assert_eq!(sim.poll_recv(r).unwrap(), TransferStatus::Pending);
        let s = sim.send(ch, req, b"hello-before", us_to_ns(5.0)).unwrap();
        let sc = sim.completion(s).unwrap();
        assert!(sc.complete_ns > us_to_ns(5.0));
        assert_eq!(&sim.fabric.node(NodeId(1)).unwrap().app[100..112], b"hello-before");
    }

    #[test]
    fn wrong_event_id_faults_receiver_and_stalls_sender() {
        let mut sim = sim();
        let ch = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
        let s = sim
            .send(ch, TransferRequest::memory_sync(1, 2), b"data", 0)
            .unwrap();
        let r = sim
            .receive(ch, TransferRequest::memory_sync(2, 2), 0, 0)
            .unwrap();
        assert!(matches!(sim.poll_recv(r).unwrap(), TransferStatus::Fault(_)));
        // sender still pending: detectable stall
        assert_eq!(sim.poll_send(s).unwrap(), TransferStatus::Pending);
        assert_eq!(sim.stalled_sends(DEFAULT_TIMEOUT_NS + 1).len(), 1);
        assert_eq!(sim.fabric.faults.len(), 1);
    }

    #[test]
    fn chunk_ids_strictly_increasing_for_chunked_transfer() {
        let mut sim = sim();
        let payload = vec![3u8; 9 * 1024 * 1024];
        let (s, _) = run_pair(&mut sim, 0, 1, &payload, 48);
        let expected = sim.fabric.memcfg.chunk_count(payload.len());
        assert_eq!(s.chunks, expected);
        let mut last = 0u64;
        let mut seen = 0;
        for row in sim.trace.rows() {
            if row.op == "send_publish" {
                let id: u64 = row
                    .detail
                    .split("chunk_id=")
                    .nth(1)
                    .unwrap()
                    .parse()
                    .unwrap();
                assert_eq!(id, last + 1, "chunk ids must increase strictly");
                last = id;
                seen += 1;
            }
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn sync_send_never_completes_before_final_ack() {
        let mut sim = sim();
        let payload = vec![7u8; 300 * 1024];
        let (s, r) = run_pair(&mut sim, 2, 3, &payload, 8);
        assert!(s.complete_ns >= r.complete_ns);
        assert!(r.complete_ns >= s.data_visible_ns);
    }

    #[test]
    fn async_matches_sync_data_visible_time() {
        let payload = vec![0x5au8; 256 * 1024];
        let mut a = sim();
        let (s_sync, _) = run_pair(&mut a, 0, 1, &payload, 8);

        let mut b = sim();
        let ch = b.open_channel(NodeId(0), NodeId(1)).unwrap();
        let req = TransferRequest {
            event_id: 1,
            cores: 8,
            mode: TransferMode::Async,
            semantics: TransferSemantics::Memory,
            zero_copy: false,
        };
        let s = b.send(ch, req, &payload, 0).unwrap();
        let r = b.receive(ch, req, 0, 0).unwrap();
        let sc = b.completion(s).unwrap();
        assert_eq!(sc.data_visible_ns, s_sync.data_visible_ns);
        assert_eq!(
            &b.fabric.node(NodeId(1)).unwrap().app[..payload.len()],
            &payload[..]
        );
        let _ = b.poll_recv(r).unwrap();
    }

    #[test]
    fn async_overlap_beats_serial_sum() {
        // sender starts a second transfer to another peer while the first is
        // still pending; total elapsed < serial sum of the two transfers
        let payload = vec![1u8; 2 * 1024 * 1024];
        let mut sim = sim();
        let req = |ev| TransferRequest {
            event_id: ev,
            cores: 8,
            mode: TransferMode::Async,
            semantics: TransferSemantics::Memory,
            zero_copy: false,
        };
        let ch1 = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
        let ch2 = sim.open_channel(NodeId(0), NodeId(2)).unwrap();
        let issue_cost = us_to_ns(0.5);
        let s1 = sim.send(ch1, req(1), &payload, 0).unwrap();
        let s2 = sim.send(ch2, req(2), &payload, issue_cost).unwrap();
        sim.receive(ch1, req(1), 0, 0).unwrap();
        sim.receive(ch2, req(2), 0, 0).unwrap();
        let c1 = sim.completion(s1).unwrap();
        let c2 = sim.completion(s2).unwrap();
        let overlapped_total = c1.complete_ns.max(c2.complete_ns);
        let serial_sum = c1.complete_ns + (c2.complete_ns - c2.posted_ns);
        assert!(overlapped_total < serial_sum);
    }

    #[test]
    fn consumed_handle_poll_is_usage_error() {
        let mut sim = sim();
        let ch = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
        let req = TransferRequest::memory_sync(1, 2);
        let s = sim.send(ch, req, b"x", 0).unwrap();
        sim.receive(ch, req, 0, 0).unwrap();
        assert!(matches!(
            sim.poll_send(s).unwrap(),
            TransferStatus::Complete(_)
        ));
        assert!(matches!(sim.poll_send(s), Err(SimError::Usage(_))));
    }

    #[test]
    fn mixing_modes_on_one_channel_rejected() {
        let mut sim = sim();
        let ch = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
        sim.send(ch, TransferRequest::memory_sync(1, 2), b"x", 0)
            .unwrap();
        let async_req = TransferRequest {
            mode: TransferMode::Async,
            ..TransferRequest::memory_sync(2, 2)
        };
        assert!(matches!(
            sim.send(ch, async_req, b"y", 0),
            Err(SimError::Usage(_))
        ));
    }

    #[test]
    fn fifo_order_on_one_channel() {
        let mut sim = sim();
        let ch = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
        let mut handles = Vec::new();
        for ev in 0..5u64 {
            let req = TransferRequest::memory_sync(ev, 4);
            let s = sim.send(ch, req, &vec![ev as u8; 100_000], 0).unwrap();
            let r = sim.receive(ch, req, ev as usize * 100_000, 0).unwrap();
            handles.push((s, r));
        }
        let mut last = 0;
        for (s, _) in &handles {
            let c = sim.completion(*s).unwrap();
            assert!(c.complete_ns >= last);
            last = c.complete_ns;
        }
    }

    #[test]
    fn zero_copy_is_faster_and_identical() {
        let payload = vec![9u8; 1024 * 1024];
        let mk = |zero_copy| {
            let mut sim = P2pSim::new(FabricSim::with_defaults(Topology::default()));
            let ch = sim.open_channel(NodeId(0), NodeId(1)).unwrap();
            let req = TransferRequest {
                zero_copy,
                ..TransferRequest::memory_sync(1, 8)
            };
            let s = sim.send(ch, req, &payload, 0).unwrap();
            sim.receive(ch, req, 0, 0).unwrap();
            let c = sim.completion(s).unwrap();
            let bytes = sim.fabric.node(NodeId(1)).unwrap().app[..payload.len()].to_vec();
            (c, bytes)
        };
        let (plain, b1) = mk(false);
        let (zc, b2) = mk(true);
        assert_eq!(b1, b2);
        assert!(zc.complete_ns < plain.complete_ns);
    }
}

//! The per-session live loop and its transport-neutral queues: a bounded
//! inbound mailbox and an outbox whose frame queue drops the oldest frame.

use std::collections::VecDeque;
use std::sync::mpsc::{Receiver, RecvTimeoutError, TryRecvError};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::session::Session;

/// Frames buffered per client before the oldest is dropped.
pub const FRAME_QUEUE_DEPTH: usize = 3;
/// Pending client messages per session.
pub const MAILBOX_DEPTH: usize = 64;

const PAUSED_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, PartialEq)]
pub enum Outgoing {
    Text(String),
    Frame(Vec<u8>),
}

#[derive(Debug, Default)]
struct OutboxState {
    texts: VecDeque<String>,
    frames: VecDeque<Vec<u8>>,
    dropped: u64,
    closed: bool,
}

/// Messages waiting for the client. Text replies are never dropped;
/// frames beyond [`FRAME_QUEUE_DEPTH`] evict the oldest.
pub struct Outbox {
    state: Mutex<OutboxState>,
    ready: Condvar,
    wake: Box<dyn Fn() + Send + Sync>,
}

impl Default for Outbox {
    fn default() -> Self {
        Self::new(|| {})
    }
}

impl Outbox {
    /// `wake` runs after every push, for transports that wait elsewhere.
    pub fn new(wake: impl Fn() + Send + Sync + 'static) -> Self {
        Outbox {
            state: Mutex::new(OutboxState::default()),
            ready: Condvar::new(),
            wake: Box::new(wake),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, OutboxState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push_text(&self, text: String) {
        self.lock().texts.push_back(text);
        self.ready.notify_all();
        (self.wake)();
    }

    pub fn push_frame(&self, frame: Vec<u8>) {
        {
            let mut s = self.lock();
            s.frames.push_back(frame);
            while s.frames.len() > FRAME_QUEUE_DEPTH {
                s.frames.pop_front();
                s.dropped += 1;
            }
        }
        self.ready.notify_all();
        (self.wake)();
    }

    /// Everything queued, texts first.
    pub fn drain(&self) -> Vec<Outgoing> {
        let mut s = self.lock();
        let mut out: Vec<Outgoing> = s.texts.drain(..).map(Outgoing::Text).collect();
        out.extend(s.frames.drain(..).map(Outgoing::Frame));
        out
    }

    /// [`Outbox::drain`], waiting up to `timeout` for something to arrive.
    pub fn wait_drain(&self, timeout: Duration) -> Vec<Outgoing> {
        let s = self.lock();
        let (_s, _) = self
            .ready
            .wait_timeout_while(s, timeout, |s| {
                s.texts.is_empty() && s.frames.is_empty() && !s.closed
            })
            .unwrap_or_else(|e| e.into_inner());
        drop(_s);
        self.drain()
    }

    pub fn queued_frames(&self) -> usize {
        self.lock().frames.len()
    }

    pub fn dropped_frames(&self) -> u64 {
        self.lock().dropped
    }

    /// Ends the session loop at its next iteration.
    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
        (self.wake)();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }
}

/// Runs `session` until the mailbox disconnects or the outbox closes:
/// apply pending messages, step, publish the frame, pace to real time.
pub fn run_session(mut session: Session, inbox: Receiver<String>, outbox: &Outbox) {
    outbox.push_text(session.hello().to_json());
    outbox.push_frame(session.snapshot().encode());
    let frame_time = Duration::from_secs_f64(session.frame_dt());
    let mut next_deadline = Instant::now();
    loop {
        loop {
            match inbox.try_recv() {
                Ok(text) => outbox.push_text(session.handle_text(&text, Instant::now()).to_json()),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        if outbox.is_closed() {
            return;
        }
        if session.is_paused() {
            match inbox.recv_timeout(PAUSED_POLL) {
                Ok(text) => outbox.push_text(session.handle_text(&text, Instant::now()).to_json()),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            next_deadline = Instant::now();
            continue;
        }
        let tick = session.tick(Instant::now());
        if let Some(notice) = tick.notice {
            outbox.push_text(notice.to_json());
        }
        outbox.push_frame(tick.frame.encode());
        if session.realtime() {
            next_deadline += frame_time;
            let now = Instant::now();
            if next_deadline > now {
                std::thread::sleep(next_deadline - now);
            } else {
                next_deadline = now;
            }
        }
    }
}

//! Interactive sessions: live stepping under client commands, the binary
//! frame codec and the JSON command protocol. Transport lives in the CLI.

mod codec;
mod protocol;
mod service;
mod session;

pub use codec::{
    decimation, FrameHeader, WireFrame, FLAG_DECIMATED, FLAG_PAUSED, FLAG_RESET_AFTER_DIVERGENCE,
    FRAME_FORMAT_VERSION, FRAME_HEADER_BYTES, FRAME_MAGIC,
};
pub use protocol::{ClientMessage, ServerMessage, DIRECTION_TOLERANCE};
pub use service::{run_session, Outbox, Outgoing, FRAME_QUEUE_DEPTH, MAILBOX_DEPTH};
pub use session::{
    FpsMeter, Session, SessionConfig, Tick, DEFAULT_MAX_POINTS, FPS_WINDOW, MAX_POINTS_ENV,
    MOVE_TIMEOUT,
};

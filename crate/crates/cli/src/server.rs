//! Websocket transport for playground sessions. Each connection gets its
//! own session loop on a dedicated thread; the socket task forwards text
//! commands into the session's bounded mailbox and drains its outbox.

use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::mpsc::{sync_channel, TrySendError};
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use softtwin_core::checkpoint::load_model;
use softtwin_core::mpm::ParticleState;
use softtwin_core::playground::{
    run_session, Outbox, Outgoing, ServerMessage, Session, SessionConfig, MAILBOX_DEPTH,
};
use softtwin_core::rollout::Model;
use softtwin_core::scenario::SequenceBundle;
use tokio::sync::Notify;

/// Immutable snapshot every session starts from.
struct Snapshot {
    model: Model,
    initial: ParticleState,
    cfg: SessionConfig,
}

pub fn serve(params: &Path, bundle: &Path, listen: SocketAddr, realtime: bool) -> Result<()> {
    let model = load_model(params)?;
    let bundle = SequenceBundle::load(bundle)?;
    let initial = bundle.initial_state(model.sim.density)?;
    let mut cfg = SessionConfig::from_env(bundle.manifest().binding_radius)?;
    cfg.realtime = realtime;
    // Fail at startup rather than on the first connection.
    Session::new(model.clone(), initial.clone(), cfg.clone()).context("building a session")?;
    let snapshot = Arc::new(Snapshot {
        model,
        initial,
        cfg,
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        let addr = listener.local_addr()?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        tracing::info!(%addr, "playground ready; connect to /ws");
        let app = Router::new()
            .route(
                "/",
                get(|| async { "softtwin playground: connect a websocket to /ws\n" }),
            )
            .route("/ws", get(upgrade))
            .with_state(snapshot);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

async fn upgrade(ws: WebSocketUpgrade, State(snapshot): State<Arc<Snapshot>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, snapshot))
}

fn error_text(message: &str) -> String {
    ServerMessage::Error {
        message: message.to_string(),
    }
    .to_json()
}

async fn connection(socket: WebSocket, snapshot: Arc<Snapshot>) {
    let (mut sink, mut stream) = socket.split();
    let session = match Session::new(
        snapshot.model.clone(),
        snapshot.initial.clone(),
        snapshot.cfg.clone(),
    ) {
        Ok(s) => s,
        Err(e) => {
            let _ = sink
                .send(Message::Text(error_text(&e.to_string()).into()))
                .await;
            return;
        }
    };
    let notify = Arc::new(Notify::new());
    let wake = notify.clone();
    let outbox = Arc::new(Outbox::new(move || wake.notify_one()));
    let (mailbox, inbox) = sync_channel::<String>(MAILBOX_DEPTH);
    let worker = {
        let outbox = outbox.clone();
        std::thread::spawn(move || run_session(session, inbox, &outbox))
    };
    tracing::info!("session started");
    'io: loop {
        tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => match mailbox.try_send(text.to_string()) {
                    Ok(()) => {}
                    Err(TrySendError::Full(_)) => {
                        outbox.push_text(error_text("mailbox full; command dropped"));
                    }
                    Err(TrySendError::Disconnected(_)) => break,
                },
                Some(Ok(Message::Binary(_))) => {
                    outbox.push_text(error_text("commands are JSON text messages"));
                }
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => {}
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
            },
            _ = notify.notified() => {
                for out in outbox.drain() {
                    let msg = match out {
                        Outgoing::Text(t) => Message::Text(t.into()),
                        Outgoing::Frame(f) => Message::Binary(f.into()),
                    };
                    if sink.send(msg).await.is_err() {
                        break 'io;
                    }
                }
                if worker.is_finished() {
                    break;
                }
            }
        }
    }
    outbox.close();
    drop(mailbox);
    let _ = tokio::task::spawn_blocking(move || worker.join()).await;
    tracing::info!("session ended");
}

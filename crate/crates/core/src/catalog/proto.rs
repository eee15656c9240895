//! Framed catalog query protocol.
//!
//! Remote jobs resolve their inputs over the same frame layout the
//! production wire uses; only the frame-type space differs. Requests carry a
//! JSON [`QueryFilter`], responses the JSON result list. The sequence number
//! correlates request and response.

use std::sync::RwLock;

use serde::de::DeserializeOwned;

use crate::wire::{Frame, WireEndpoint, WireError};

use super::{CatalogError, CatalogServer, LogicalFile, QueryFilter};

/// Frame types of the catalog protocol.
pub const FRAME_QUERY: u8 = 16;
pub const FRAME_RESOLVE: u8 = 17;
pub const FRAME_OK: u8 = 18;
pub const FRAME_ERR: u8 = 19;

/// Serves query/resolve requests until the peer disconnects.
///
/// The server is shared behind a read lock: any number of protocol servers
/// may answer concurrently while mutations serialize on the write side.
pub fn serve(server: &RwLock<CatalogServer>, endpoint: &WireEndpoint) {
    loop {
        let request = match endpoint.recv() {
            Ok(frame) => frame,
            Err(_) => return,
        };
        let reply = match request.frame_type {
            FRAME_QUERY => handle(&request, |filter| {
                Ok(serde_json::to_vec(&server.read().expect("catalog lock").query(&filter))?)
            }),
            FRAME_RESOLVE => handle(&request, |filter| {
                let resolved = server
                    .read()
                    .expect("catalog lock")
                    .resolve_for_job(&filter)?;
                Ok(serde_json::to_vec(&resolved)?)
            }),
            other => Err(format!("unsupported request type {other}")),
        };
        let frame = match reply {
            Ok(payload) => Frame {
                frame_type: FRAME_OK,
                worker_id: request.worker_id,
                sequence: request.sequence,
                payload,
            },
            Err(message) => Frame {
                frame_type: FRAME_ERR,
                worker_id: request.worker_id,
                sequence: request.sequence,
                payload: message.into_bytes(),
            },
        };
        if endpoint.send(&frame).is_err() {
            return;
        }
    }
}

fn handle(
    request: &Frame,
    op: impl FnOnce(QueryFilter) -> Result<Vec<u8>, CatalogError>,
) -> Result<Vec<u8>, String> {
    let filter: QueryFilter =
        serde_json::from_slice(&request.payload).map_err(|e| format!("bad filter: {e}"))?;
    op(filter).map_err(|e| e.to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server error: {0}")]
    Server(String),
    #[error("unexpected reply frame type {0}")]
    UnexpectedReply(u8),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Client side of the catalog protocol.
pub struct CatalogClient {
    endpoint: WireEndpoint,
    client_id: u32,
    next_seq: u64,
}

impl CatalogClient {
    pub fn new(endpoint: WireEndpoint, client_id: u32) -> Self {
        Self {
            endpoint,
            client_id,
            next_seq: 0,
        }
    }

    pub fn query(&mut self, filter: &QueryFilter) -> Result<Vec<LogicalFile>, ClientError> {
        self.round_trip(FRAME_QUERY, filter)
    }

    pub fn resolve(&mut self, filter: &QueryFilter) -> Result<Vec<(String, String)>, ClientError> {
        self.round_trip(FRAME_RESOLVE, filter)
    }

    fn round_trip<T: DeserializeOwned>(
        &mut self,
        frame_type: u8,
        filter: &QueryFilter,
    ) -> Result<T, ClientError> {
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.endpoint.send(&Frame {
            frame_type,
            worker_id: self.client_id,
            sequence,
            payload: serde_json::to_vec(filter)?,
        })?;
        loop {
            let reply = self.endpoint.recv()?;
            if reply.sequence != sequence {
                continue; // stale reply from an abandoned request
            }
            return match reply.frame_type {
                FRAME_OK => Ok(serde_json::from_slice(&reply.payload)?),
                FRAME_ERR => Err(ClientError::Server(
                    String::from_utf8_lossy(&reply.payload).into_owned(),
                )),
                other => Err(ClientError::UnexpectedReply(other)),
            };
        }
    }
}

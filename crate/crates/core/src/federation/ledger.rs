use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::container::{decode, encode};
use crate::model::NamedTensors;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub direction: Direction,
    pub client: usize,
    pub scalars: usize,
    pub bytes: usize,
    /// SHA-256 of the serialized message, hex.
    pub hash: String,
}

/// Every message that crossed the simulated network.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, direction: Direction, client: usize, scalars: usize, message: &[u8]) {
        self.entries.push(LedgerEntry {
            round,
            direction,
            client,
            scalars,
            bytes: message.len(),
            hash: crate::model::hex_digest(&Sha256::digest(message)),
        });
    }

    pub fn scalars(&self, direction: Direction) -> usize {
        self.entries
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.scalars)
            .sum()
    }

    pub fn total_uplink_scalars(&self) -> usize {
        self.scalars(Direction::Up)
    }

    pub fn round(&self, round: usize) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.round == round)
    }

    pub fn uplink_scalars_in_round(&self, round: usize) -> usize {
        self.round(round)
            .filter(|e| e.direction == Direction::Up)
            .map(|e| e.scalars)
            .sum()
    }
}

#[derive(Serialize, Deserialize)]
struct MessageHeader {
    direction: Direction,
    round: usize,
    client: usize,
}

pub fn encode_message(direction: Direction, round: usize, client: usize, payload: &NamedTensors) -> Vec<u8> {
    let header = serde_json::to_string(&MessageHeader {
        direction,
        round,
        client,
    })
    .expect("header serializes");
    encode(&header, payload)
}

/// Parses a message and checks it was addressed as expected.
pub fn decode_message(bytes: &[u8], direction: Direction, round: usize, client: usize) -> Result<NamedTensors> {
    let (header, payload) = decode(bytes)?;
    let h: MessageHeader =
        serde_json::from_str(&header).map_err(|e| Error::Federation(format!("bad message header: {e}")))?;
    if h.direction != direction || h.round != round || h.client != client {
        return Err(Error::Federation(format!(
            "message for ({:?}, round {}, client {}) delivered as ({direction:?}, round {round}, client {client})",
            h.direction, h.round, h.client
        )));
    }
    Ok(payload)
}

//! Federated meta-training rounds. Clients compute first-order MAML gradients
//! on their own tasks and return them encrypted; the server only ever sees
//! serialized ciphertexts, sums them, and decrypts once per round.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::codec::{add_encrypted, decrypt, encrypt, from_wire, to_wire, EncryptedVector};
use super::paillier::{KeyPair, PublicKey};
use crate::data::{NormStats, PhoneDataset};
use crate::error::{Error, Result};
use crate::meta::{build_task_set, encode_tasks, meta_batch_gradient, meta_step, MetaConfig, Task};
use crate::nn::{GradientVector, OptimizerKind, OptimizerState, ParamVector};
use crate::rng::{derive, rng};

/// Seed for the tasks client `client_seed` builds in round `round`.
pub fn client_task_seed(client_seed: u64, round: u64) -> u64 {
    derive(derive(client_seed, 0), round)
}

fn client_noise_seed(client_seed: u64, round: u64) -> u64 {
    derive(derive(client_seed, 1), round)
}

/// What the server sends every client at the start of a round.
#[derive(Debug, Clone)]
pub struct RoundBroadcast {
    pub round: u64,
    pub theta: ParamVector,
    pub public_key: PublicKey,
    pub frac_bits: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientReply {
    Gradient(EncryptedVector),
    /// The client cannot take part, e.g. it has too few samples for a task.
    OptOut {
        reason: String,
    },
}

/// One phone's side of the protocol. Its data stays private to this type.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: u32,
    data: PhoneDataset,
    norm: NormStats,
    n_tasks: usize,
    config: MetaConfig,
    seed: u64,
}

impl ClientState {
    /// `norm` is the shared input normalization distributed with the model.
    pub fn new(
        id: u32,
        data: PhoneDataset,
        norm: NormStats,
        n_tasks: usize,
        config: MetaConfig,
        seed: u64,
    ) -> Self {
        Self {
            id,
            data,
            norm,
            n_tasks,
            config,
            seed,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    /// The tasks this client trains on in `round`.
    pub fn local_tasks(&self, round: u64) -> Result<Vec<Task>> {
        build_task_set(
            std::slice::from_ref(&self.data),
            self.config.k_spt,
            self.config.k_qry,
            self.n_tasks,
            client_task_seed(self.seed, round),
        )
    }

    /// Builds `n_tasks` local tasks, sums their first-order meta-gradients at
    /// the broadcast parameters and encrypts the sum.
    pub fn client_calculate(&self, msg: &RoundBroadcast) -> Result<ClientReply> {
        let need = self.config.k_spt + self.config.k_qry;
        if self.data.len() < need {
            return Ok(ClientReply::OptOut {
                reason: format!("{} samples, tasks need {need}", self.data.len()),
            });
        }
        self.config.validate()?;
        let tasks = encode_tasks(&self.local_tasks(msg.round)?, &self.norm);
        let refs: Vec<_> = tasks.iter().collect();
        let g = meta_batch_gradient(&msg.theta, &refs, &self.config.inner())?;
        let mut noise = rng(client_noise_seed(self.seed, msg.round));
        Ok(ClientReply::Gradient(encrypt(
            &msg.public_key,
            g.values(),
            msg.frac_bits,
            &mut noise,
        )?))
    }
}

const KIND_GRADIENT: u8 = 0;
const KIND_OPT_OUT: u8 = 1;

/// Client-to-server frame: client id (u32 BE), kind byte, payload.
pub fn encode_frame(client_id: u32, reply: &ClientReply) -> Vec<u8> {
    let mut out = client_id.to_be_bytes().to_vec();
    match reply {
        ClientReply::Gradient(v) => {
            out.push(KIND_GRADIENT);
            out.extend(to_wire(v));
        }
        ClientReply::OptOut { reason } => {
            out.push(KIND_OPT_OUT);
            out.extend_from_slice(reason.as_bytes());
        }
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<(u32, ClientReply)> {
    if bytes.len() < 5 {
        return Err(Error::Wire("frame shorter than its header".into()));
    }
    let id = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let reply = match bytes[4] {
        KIND_GRADIENT => ClientReply::Gradient(from_wire(&bytes[5..])?),
        KIND_OPT_OUT => ClientReply::OptOut {
            reason: String::from_utf8_lossy(&bytes[5..]).into_owned(),
        },
        k => return Err(Error::Wire(format!("unknown frame kind {k}"))),
    };
    Ok((id, reply))
}

/// How client computations are scheduled within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One thread per client.
    #[default]
    Threads,
    /// Clients run one after another in id order.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: u64,
    /// Clients whose gradients entered the sum, ascending.
    pub client_ids: Vec<u32>,
    pub opted_out: Vec<u32>,
    pub skipped: bool,
    pub theta_checksum: String,
}

/// Holds the source model, the optimizer and the key pair.
#[derive(Debug)]
pub struct Server {
    theta: ParamVector,
    optimizer: OptimizerState,
    keys: KeyPair,
    frac_bits: u32,
    round: u64,
    transcript: Vec<TranscriptEntry>,
}

impl Server {
    pub fn new(
        theta: ParamVector,
        meta_optimizer: OptimizerKind,
        beta: f64,
        keys: KeyPair,
        frac_bits: u32,
    ) -> Self {
        let optimizer = OptimizerState::new(meta_optimizer, beta, theta.len());
        Self {
            theta,
            optimizer,
            keys,
            frac_bits,
            round: 0,
            transcript: Vec::new(),
        }
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn into_theta(self) -> ParamVector {
        self.theta
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    /// Times the private key has been used.
    pub fn decryptions(&self) -> u64 {
        self.keys.private.decryptions()
    }

    pub fn rounds_completed(&self) -> u64 {
        self.round
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn broadcast(&self) -> RoundBroadcast {
        RoundBroadcast {
            round: self.round,
            theta: self.theta.clone(),
            public_key: self.keys.public.clone(),
            frac_bits: self.frac_bits,
        }
    }

    /// Aggregates one round of client frames: sums every gradient ciphertext
    /// in ascending client id order, decrypts the total once and applies the
    /// meta step. With no gradients the round is recorded as skipped and the
    /// parameters are left alone.
    pub fn aggregate(&mut self, frames: &[Vec<u8>]) -> Result<TranscriptEntry> {
        let mut replies = BTreeMap::new();
        for f in frames {
            let (id, reply) = decode_frame(f)?;
            if replies.insert(id, reply).is_some() {
                return Err(Error::contract(format!("client {id} replied twice")));
            }
        }
        let mut total: Option<EncryptedVector> = None;
        let mut client_ids = Vec::new();
        let mut opted_out = Vec::new();
        for (id, reply) in replies {
            match reply {
                ClientReply::Gradient(v) => {
                    if v.len() != self.theta.len() {
                        return Err(Error::contract(format!(
                            "client {id} sent {} values for {} parameters",
                            v.len(),
                            self.theta.len()
                        )));
                    }
                    total = Some(match total {
                        None => v,
                        Some(acc) => add_encrypted(&self.keys.public, &acc, &v)?,
                    });
                    client_ids.push(id);
                }
                ClientReply::OptOut { .. } => opted_out.push(id),
            }
        }
        let skipped = total.is_none();
        if let Some(sum) = total {
            let plain = decrypt(&self.keys.private, &sum)?;
            let g = GradientVector::new(self.theta.layout().clone(), plain)?;
            meta_step(&mut self.theta, &mut self.optimizer, &g)?;
        }
        let entry = TranscriptEntry {
            round: self.round,
            client_ids,
            opted_out,
            skipped,
            theta_checksum: self.theta.checksum(),
        };
        self.round += 1;
        self.transcript.push(entry.clone());
        Ok(entry)
    }
}

/// Runs one round: broadcast, client computation over an in-process channel
/// carrying serialized frames, then server aggregation.
pub fn federated_round(
    server: &mut Server,
    clients: &[ClientState],
    schedule: Schedule,
) -> Result<TranscriptEntry> {
    let msg = server.broadcast();
    let mut ids: Vec<u32> = clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("client ids must be unique"));
    }
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let run = |c: &ClientState, tx: &mpsc::Sender<Vec<u8>>| -> Result<()> {
        let reply = c.client_calculate(&msg)?;
        tx.send(encode_frame(c.id, &reply))
            .map_err(|_| Error::Wire("server channel closed".into()))
    };
    let mut outcomes: Vec<(u32, Result<()>)> = match schedule {
        Schedule::Sequential => {
            let mut ordered: Vec<&ClientState> = clients.iter().collect();
            ordered.sort_by_key(|c| c.id);
            ordered.into_iter().map(|c| (c.id, run(c, &tx))).collect()
        }
        Schedule::Threads => thread::scope(|s| {
            let handles: Vec<_> = clients
                .iter()
                .map(|c| {
                    let tx = tx.clone();
                    let run = &run;
                    (c.id, s.spawn(move || run(c, &tx)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(id, h)| {
                    let r = h
                        .join()
                        .unwrap_or_else(|_| Err(Error::Training(format!("client {id} panicked"))));
                    (id, r)
                })
                .collect()
        }),
    };
    drop(tx);
    outcomes.sort_by_key(|(id, _)| *id);
    for (id, r) in outcomes {
        r.map_err(|e| Error::Training(format!("client {id}: {e}")))?;
    }
    let frames: Vec<Vec<u8>> = rx.into_iter().collect();
    server.aggregate(&frames)
}

/// Writes the transcript as JSON lines.
pub fn write_transcript<W: Write>(entries: &[TranscriptEntry], mut out: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

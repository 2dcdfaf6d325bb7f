//! Simulated federated meta-training with additively homomorphic encryption
//! of client gradients.

mod codec;
mod paillier;
mod protocol;

pub use codec::{
    add_encrypted, decrypt, encrypt, from_fixed, from_wire, to_fixed, to_wire, EncryptedVector,
    Packing, DEFAULT_FRAC_BITS, HEADROOM_BITS, MAX_TERMS, VALUE_INT_BITS,
};
pub use paillier::{keygen, KeyId, KeyPair, PrivateKey, PublicKey, SUPPORTED_KEY_BITS};
pub use protocol::{
    client_task_seed, decode_frame, encode_frame, federated_round, write_transcript, ClientReply,
    ClientState, RoundBroadcast, Schedule, Server, TranscriptEntry,
};

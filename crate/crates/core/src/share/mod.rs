//! Two-party additive secret sharing over a real-valued domain and a
//! fixed-point ring, with Beaver-triple multiplication.

mod beaver;
mod domain;
mod pair;
mod tensor;

pub use beaver::{
    finish_local, gen_beaver_triple, matmul_shared, multiply_shared, open_local, BeaverTriple, Opening, Transcript,
    TripleHalf, TripleMode,
};
pub use domain::{decode_fixed, encode_fixed, RingParams, RingTensor, ShareDomain, Side};
pub use pair::{add_shared, random_share, reconstruct, reconstruct_from, share, share_encoded, SharePair};
pub use tensor::ShareTensor;

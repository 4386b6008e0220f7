// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! Per-VM software TPM: eight SHA-256 measurement registers, signed
//! challenge-response quotes, and an authenticated-encryption envelope that
//! lets the whole instance travel to another host.
//!
//! The envelope binds the VM identifier and a monotonic counter as
//! associated data, so a stale sealed blob is detectable by counter
//! regression and any bit flip anywhere in the encoding fails
//! authentication.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

pub const PCR_COUNT: usize = 8;
pub const DIGEST_LEN: usize = 32;
pub const QUOTE_NONCE_LEN: usize = 16;
pub const SEAL_NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

const SEALED_MAGIC: &[u8; 4] = b"KVTP";
const SEALED_VERSION: u8 = 0x01;

pub type PcrValue = [u8; DIGEST_LEN];

#[derive(Debug, Error)]
pub enum VtpmError {
    #[error("pcr index {index} out of range (0..{})", PCR_COUNT)]
    PcrIndexOutOfRange { index: usize },
    #[error("quote requires a nonzero pcr selection")]
    EmptySelection,
    #[error("sealed state failed authentication (tampered or wrong key)")]
    Unsealing,
    #[error("sealed state malformed: {0}")]
    Encoding(#[from] WireError),
    #[error("sealed state has bad magic bytes")]
    BadMagic,
    #[error("sealed state has unsupported version {0}")]
    BadVersion(u8),
    #[error("sealed state associated-data length disagrees with header fields")]
    AdLengthMismatch,
}

/// Why a quote was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QuoteReject {
    #[error("bad-signature")]
    BadSignature,
    #[error("stale-nonce")]
    StaleNonce,
    #[error("pcr-mismatch")]
    PcrMismatch,
}

/// One VM's TPM instance: measurement registers, attestation keypair, and a
/// monotonic use counter.
#[derive(Debug, Clone)]
pub struct VtpmInstance {
    vm_id: String,
    pcrs: [PcrValue; PCR_COUNT],
    signing_key: SigningKey,
    counter: u64,
}

impl PartialEq for VtpmInstance {
    fn eq(&self, other: &Self) -> bool {
        self.vm_id == other.vm_id
            && self.pcrs == other.pcrs
            && self.signing_key.to_bytes() == other.signing_key.to_bytes()
            && self.counter == other.counter
    }
}

impl Eq for VtpmInstance {}

/// A signed attestation statement over a selection of PCRs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub nonce: [u8; QUOTE_NONCE_LEN],
    /// Bit i selects PCR i.
    pub pcr_selection: u8,
    pub composite_digest: PcrValue,
    pub counter: u64,
    pub signature: Signature,
}

/// An encrypted, authenticated serialization of a [`VtpmInstance`]. The
/// associated data is `vm_id ‖ counter`, carried in the clear so the
/// receiver can check counter monotonicity before decrypting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedState {
    pub vm_id: String,
    pub counter: u64,
    pub nonce: [u8; SEAL_NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl VtpmInstance {
    /// Fresh instance: all-zero PCRs, new attestation keypair, counter 0.
    pub fn new<R: RngCore + CryptoRng>(vm_id: impl Into<String>, rng: &mut R) -> Self {
        Self {
            vm_id: vm_id.into(),
            pcrs: [[0u8; DIGEST_LEN]; PCR_COUNT],
            signing_key: SigningKey::generate(rng),
            counter: 0,
        }
    }

    pub fn vm_id(&self) -> &str {
        &self.vm_id
    }

    pub fn pcrs(&self) -> &[PcrValue; PCR_COUNT] {
        &self.pcrs
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }

    /// Fold `measurement` into register `index`:
    /// `pcrs[index] <- SHA-256(old ‖ SHA-256(measurement))`.
    pub fn pcr_extend(&mut self, index: usize, measurement: &[u8]) -> Result<(), VtpmError> {
        if index >= PCR_COUNT {
            return Err(VtpmError::PcrIndexOutOfRange { index });
        }
        let measured: PcrValue = Sha256::digest(measurement).into();
        let mut h = Sha256::new();
        h.update(self.pcrs[index]);
        h.update(measured);
        self.pcrs[index] = h.finalize().into();
        Ok(())
    }

    /// Produce a signed quote over the selected PCRs for a verifier-chosen
    /// nonce. Bumps the monotonic counter; the new value is what the quote
    /// attests.
    pub fn quote(
        &mut self,
        nonce: [u8; QUOTE_NONCE_LEN],
        pcr_selection: u8,
    ) -> Result<Quote, VtpmError> {
        if pcr_selection == 0 {
            return Err(VtpmError::EmptySelection);
        }
        self.counter += 1;
        let composite_digest = composite_digest(pcr_selection, &self.pcrs);
        let message = quote_message(&nonce, pcr_selection, &composite_digest, self.counter);
        let signature = self.signing_key.sign(&message);
        Ok(Quote {
            nonce,
            pcr_selection,
            composite_digest,
            counter: self.counter,
            signature,
        })
    }

    /// Byte-exact serialization of the instance, sealed inside the AEAD
    /// envelope. Little-endian throughout.
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_str(&self.vm_id);
        for pcr in &self.pcrs {
            w.put_raw(pcr);
        }
        w.put_raw(&self.signing_key.to_bytes());
        w.put_u64(self.counter);
        w.into_bytes()
    }

    fn decode(bytes: &[u8]) -> Result<Self, VtpmError> {
        let mut r = Reader::new(bytes);
        let vm_id = r.take_str()?;
        let mut pcrs = [[0u8; DIGEST_LEN]; PCR_COUNT];
        for pcr in &mut pcrs {
            *pcr = r.take_fixed::<DIGEST_LEN>()?;
        }
        let seed = r.take_fixed::<32>()?;
        let counter = r.take_u64()?;
        r.finish()?;
        Ok(Self {
            vm_id,
            pcrs,
            signing_key: SigningKey::from_bytes(&seed),
            counter,
        })
    }
}

fn composite_digest(selection: u8, pcrs: &[PcrValue; PCR_COUNT]) -> PcrValue {
    let mut h = Sha256::new();
    for (i, pcr) in pcrs.iter().enumerate() {
        if selection & (1 << i) != 0 {
            h.update(pcr);
        }
    }
    h.finalize().into()
}

fn quote_message(
    nonce: &[u8; QUOTE_NONCE_LEN],
    selection: u8,
    composite: &PcrValue,
    counter: u64,
) -> Vec<u8> {
    let mut message = Vec::with_capacity(QUOTE_NONCE_LEN + 1 + DIGEST_LEN + 8);
    message.extend_from_slice(nonce);
    message.push(selection);
    message.extend_from_slice(composite);
    message.extend_from_slice(&counter.to_le_bytes());
    message
}

/// Check a quote against the verifier's expectations: signature first, then
/// nonce freshness, then PCR agreement.
pub fn verify_quote(
    quote: &Quote,
    verifying_key: &VerifyingKey,
    expected_nonce: &[u8; QUOTE_NONCE_LEN],
    expected_pcrs: &[PcrValue; PCR_COUNT],
) -> Result<(), QuoteReject> {
    let message = quote_message(
        &quote.nonce,
        quote.pcr_selection,
        &quote.composite_digest,
        quote.counter,
    );
    if verifying_key.verify(&message, &quote.signature).is_err() {
        return Err(QuoteReject::BadSignature);
    }
    if &quote.nonce != expected_nonce {
        return Err(QuoteReject::StaleNonce);
    }
    if composite_digest(quote.pcr_selection, expected_pcrs) != quote.composite_digest {
        return Err(QuoteReject::PcrMismatch);
    }
    Ok(())
}

/// Seal the instance under `transport_key` with a random nonce from `rng`.
pub fn seal_state<R: RngCore + CryptoRng>(
    instance: &VtpmInstance,
    transport_key: &[u8; 32],
    rng: &mut R,
) -> SealedState {
    let mut nonce = [0u8; SEAL_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    seal_state_with_nonce(instance, transport_key, nonce)
}

/// [`seal_state`] with a caller-supplied nonce. Nonce reuse under one key
/// breaks the envelope; only tests and the seeded session driver should
/// pick nonces directly.
pub fn seal_state_with_nonce(
    instance: &VtpmInstance,
    transport_key: &[u8; 32],
    nonce: [u8; SEAL_NONCE_LEN],
) -> SealedState {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(transport_key));
    let aad = associated_data(&instance.vm_id, instance.counter);
    let plaintext = instance.encode();
    let mut combined = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &plaintext,
                aad: &aad,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let tag_off = combined.len() - TAG_LEN;
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&combined[tag_off..]);
    combined.truncate(tag_off);
    SealedState {
        vm_id: instance.vm_id.clone(),
        counter: instance.counter,
        nonce,
        ciphertext: combined,
        tag,
    }
}

/// Open a sealed envelope. Tamper and wrong-key are indistinguishable.
pub fn unseal_state(
    sealed: &SealedState,
    transport_key: &[u8; 32],
) -> Result<VtpmInstance, VtpmError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(transport_key));
    let aad = associated_data(&sealed.vm_id, sealed.counter);
    let mut combined = Vec::with_capacity(sealed.ciphertext.len() + TAG_LEN);
    combined.extend_from_slice(&sealed.ciphertext);
    combined.extend_from_slice(&sealed.tag);
    let plaintext = cipher
        .decrypt(
            Nonce::from_slice(&sealed.nonce),
            Payload {
                msg: &combined,
                aad: &aad,
            },
        )
        .map_err(|_| VtpmError::Unsealing)?;
    let instance = VtpmInstance::decode(&plaintext)?;
    if instance.vm_id != sealed.vm_id || instance.counter != sealed.counter {
        return Err(VtpmError::Unsealing);
    }
    Ok(instance)
}

fn associated_data(vm_id: &str, counter: u64) -> Vec<u8> {
    let mut aad = Vec::with_capacity(vm_id.len() + 8);
    aad.extend_from_slice(vm_id.as_bytes());
    aad.extend_from_slice(&counter.to_le_bytes());
    aad
}

impl SealedState {
    /// Bit-exact container encoding. Layout: magic `KVTP`, version 0x01,
    /// vm_id (u16 length prefix), counter u64, nonce (12 bytes),
    /// associated-data length u32, ciphertext length u32, ciphertext, tag
    /// (16 bytes). The associated data itself is `vm_id ‖ counter` and is
    /// reconstructed from the header fields; only its length is carried.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(SEALED_MAGIC);
        w.put_u8(SEALED_VERSION);
        w.put_str(&self.vm_id);
        w.put_u64(self.counter);
        w.put_raw(&self.nonce);
        w.put_u32((self.vm_id.len() + 8) as u32);
        w.put_u32(self.ciphertext.len() as u32);
        w.put_raw(&self.ciphertext);
        w.put_raw(&self.tag);
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, VtpmError> {
        let mut r = Reader::new(bytes);
        if r.take_fixed::<4>()? != *SEALED_MAGIC {
            return Err(VtpmError::BadMagic);
        }
        let version = r.take_u8()?;
        if version != SEALED_VERSION {
            return Err(VtpmError::BadVersion(version));
        }
        let vm_id = r.take_str()?;
        let counter = r.take_u64()?;
        let nonce = r.take_fixed::<SEAL_NONCE_LEN>()?;
        let ad_len = r.take_u32()?;
        if ad_len as usize != vm_id.len() + 8 {
            return Err(VtpmError::AdLengthMismatch);
        }
        let ct_len = r.take_u32()?;
        let ciphertext = r.take_raw(ct_len as usize)?.to_vec();
        let tag = r.take_fixed::<TAG_LEN>()?;
        r.finish()?;
        Ok(Self {
            vm_id,
            counter,
            nonce,
            ciphertext,
            tag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn extend_touches_only_target_register() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(1));
        i.pcr_extend(3, b"boot-loader").unwrap();
        for (idx, pcr) in i.pcrs().iter().enumerate() {
            if idx == 3 {
                assert_ne!(pcr, &[0u8; 32]);
            } else {
                assert_eq!(pcr, &[0u8; 32]);
            }
        }
    }

    #[test]
    fn extend_matches_hash_chain() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(1));
        i.pcr_extend(0, b"m").unwrap();
        let measured: [u8; 32] = Sha256::digest(b"m").into();
        let mut h = Sha256::new();
        h.update([0u8; 32]);
        h.update(measured);
        let expect: [u8; 32] = h.finalize().into();
        assert_eq!(i.pcrs()[0], expect);
    }

    #[test]
    fn extend_is_order_sensitive() {
        let mut a = VtpmInstance::new("vm-0", &mut rng(1));
        let mut b = a.clone();
        a.pcr_extend(0, b"m1").unwrap();
        a.pcr_extend(0, b"m2").unwrap();
        b.pcr_extend(0, b"m2").unwrap();
        b.pcr_extend(0, b"m1").unwrap();
        assert_ne!(a.pcrs()[0], b.pcrs()[0]);
    }

    #[test]
    fn extend_rejects_out_of_range_index() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(1));
        assert!(matches!(
            i.pcr_extend(8, b"m"),
            Err(VtpmError::PcrIndexOutOfRange { index: 8 })
        ));
    }

    #[test]
    fn quote_roundtrip_and_counter_bump() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(2));
        i.pcr_extend(1, b"kernel").unwrap();
        let nonce = [7u8; 16];
        let q = i.quote(nonce, 0b0000_0010).unwrap();
        assert_eq!(i.counter(), 1);
        assert_eq!(q.counter, 1);
        verify_quote(&q, &i.verifying_key(), &nonce, i.pcrs()).unwrap();
    }

    #[test]
    fn quote_rejects_zero_selection() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(2));
        assert!(matches!(i.quote([0u8; 16], 0), Err(VtpmError::EmptySelection)));
        assert_eq!(i.counter(), 0);
    }

    #[test]
    fn stale_nonce_rejected() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(2));
        let q = i.quote([1u8; 16], 0xff).unwrap();
        assert_eq!(
            verify_quote(&q, &i.verifying_key(), &[2u8; 16], i.pcrs()),
            Err(QuoteReject::StaleNonce)
        );
    }

    #[test]
    fn post_extend_pcrs_rejected() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(2));
        let nonce = [1u8; 16];
        let q = i.quote(nonce, 0xff).unwrap();
        i.pcr_extend(0, b"later").unwrap();
        assert_eq!(
            verify_quote(&q, &i.verifying_key(), &nonce, i.pcrs()),
            Err(QuoteReject::PcrMismatch)
        );
    }

    #[test]
    fn foreign_key_rejected_as_bad_signature() {
        let mut i = VtpmInstance::new("vm-0", &mut rng(2));
        let other = VtpmInstance::new("vm-1", &mut rng(3));
        let nonce = [1u8; 16];
        let q = i.quote(nonce, 0xff).unwrap();
        assert_eq!(
            verify_quote(&q, &other.verifying_key(), &nonce, i.pcrs()),
            Err(QuoteReject::BadSignature)
        );
    }

    #[test]
    fn seal_unseal_roundtrip() {
        let mut r = rng(4);
        let mut i = VtpmInstance::new("vm-roundtrip", &mut r);
        i.pcr_extend(0, b"stage-0").unwrap();
        i.quote([9u8; 16], 1).unwrap();
        let key = [0x42u8; 32];
        let sealed = seal_state(&i, &key, &mut r);
        let back = unseal_state(&sealed, &key).unwrap();
        assert_eq!(back, i);
    }

    #[test]
    fn wrong_key_fails_authentication() {
        let mut r = rng(4);
        let i = VtpmInstance::new("vm-0", &mut r);
        let sealed = seal_state(&i, &[1u8; 32], &mut r);
        assert!(matches!(
            unseal_state(&sealed, &[2u8; 32]),
            Err(VtpmError::Unsealing)
        ));
    }

    #[test]
    fn seal_nonces_differ_per_seal() {
        let mut r = rng(4);
        let i = VtpmInstance::new("vm-0", &mut r);
        let key = [1u8; 32];
        let a = seal_state(&i, &key, &mut r);
        let b = seal_state(&i, &key, &mut r);
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn container_roundtrip_and_header_checks() {
        let mut r = rng(5);
        let i = VtpmInstance::new("vm-wire", &mut r);
        let sealed = seal_state(&i, &[3u8; 32], &mut r);
        let bytes = sealed.encode();
        assert_eq!(&bytes[..4], b"KVTP");
        assert_eq!(bytes[4], 0x01);
        let back = SealedState::decode(&bytes).unwrap();
        assert_eq!(back, sealed);

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(SealedState::decode(&bad), Err(VtpmError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 0x02;
        assert!(matches!(
            SealedState::decode(&bad),
            Err(VtpmError::BadVersion(0x02))
        ));
    }

    #[test]
    fn every_bit_flip_in_ciphertext_rejected() {
        let mut r = rng(6);
        let i = VtpmInstance::new("vm-0", &mut r);
        let key = [9u8; 32];
        let sealed = seal_state(&i, &key, &mut r);
        for byte in 0..sealed.ciphertext.len().min(4) {
            for bit in 0..8 {
                let mut s = sealed.clone();
                s.ciphertext[byte] ^= 1 << bit;
                assert!(unseal_state(&s, &key).is_err());
            }
        }
    }
}

// Copyright 2026 The Korora Simulator Authors
// SPDX-License-Identifier: Apache-2.0

//! The data-plane pipe between the two hosts: certificate identities, a
//! three-message mutually-authenticated handshake, direction-keyed
//! authenticated encryption with strict sequencing, a scripted adversary
//! that owns the pipe, and the line-oriented session log.
//!
//! Handshake shape: the initiator sends its certificate, a fresh nonce, and
//! an ephemeral key share; the responder answers in kind plus a signature
//! over the transcript hash; the initiator closes with its own transcript
//! signature. Both sides derive direction keys, a session id, and export
//! keys from the shared secret, the nonces, and the transcript, so the keys
//! are bound to both certificates. Every payload message is sealed with the
//! direction key and accepted only in strict sequence order; any
//! modification, duplication, gap, or cross-session delivery is rejected
//! without advancing channel state.
//!
//! The adversary operates on encoded frames, which is exactly the power a
//! machine-in-the-middle has: observe bytes, flip bits, duplicate, drop, or
//! substitute its own certificate during the handshake.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

pub const HS_NONCE_LEN: usize = 16;
pub const SESSION_ID_LEN: usize = 16;
pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;

const TRANSCRIPT_DOMAIN: &[u8] = b"korora-hs-v1";
const SIG_DOMAIN_INITIATOR: &[u8] = b"korora-hs-sig-i";
const SIG_DOMAIN_RESPONDER: &[u8] = b"korora-hs-sig-r";
const INFO_I2R: &[u8] = b"korora i2r";
const INFO_R2I: &[u8] = b"korora r2i";
const INFO_SID: &[u8] = b"korora sid";

/// Handshake failure classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum HandshakeFailure {
    #[error("bad-certificate")]
    BadCertificate,
    #[error("bad-signature")]
    BadSignature,
    #[error("transcript-mismatch")]
    TranscriptMismatch,
}

/// Data-plane rejection classes. Rejections never change channel state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("tamper-detected")]
    TamperDetected,
    #[error("{}", replay_display(.expected, .got))]
    ReplayDetected { expected: u64, got: u64 },
    #[error("wrong-session")]
    WrongSession,
}

fn replay_display(&expected: &u64, &got: &u64) -> String {
    if got < expected {
        format!("replay-detected: message {got} delivered again, expected {expected}")
    } else {
        format!("replay-detected: sequence error, got {got}, expected {expected}")
    }
}

/// A name bound to a verifying key by the issuing authority's signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub name: String,
    pub verifying_key: VerifyingKey,
    pub issuer_signature: Signature,
}

impl Certificate {
    fn signed_payload(name: &str, verifying_key: &VerifyingKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_str(name);
        w.put_raw(verifying_key.as_bytes());
        w.into_bytes()
    }

    pub fn verify(&self, issuer: &VerifyingKey) -> bool {
        let payload = Self::signed_payload(&self.name, &self.verifying_key);
        issuer.verify(&payload, &self.issuer_signature).is_ok()
    }

    fn encode_into(&self, w: &mut Writer) {
        w.put_str(&self.name);
        w.put_raw(self.verifying_key.as_bytes());
        w.put_raw(&self.issuer_signature.to_bytes());
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let name = r.take_str()?;
        let vk_bytes = r.take_fixed::<32>()?;
        let verifying_key =
            VerifyingKey::from_bytes(&vk_bytes).map_err(|_| WireError::BadLength(32))?;
        let sig_bytes = r.take_fixed::<64>()?;
        Ok(Self {
            name,
            verifying_key,
            issuer_signature: Signature::from_bytes(&sig_bytes),
        })
    }
}

/// The certificate-issuing authority both hosts trust.
#[derive(Debug)]
pub struct TrustRoot {
    signing_key: SigningKey,
}

impl TrustRoot {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            signing_key: SigningKey::generate(rng),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }

    pub fn issue(&self, name: &str, verifying_key: &VerifyingKey) -> Certificate {
        let payload = Certificate::signed_payload(name, verifying_key);
        Certificate {
            name: name.to_string(),
            verifying_key: *verifying_key,
            issuer_signature: self.signing_key.sign(&payload),
        }
    }
}

/// A host endpoint: long-term signing key plus its certificate.
#[derive(Debug, Clone)]
pub struct Identity {
    pub name: String,
    signing_key: SigningKey,
    pub certificate: Certificate,
}

impl Identity {
    /// Identity certified by `root`.
    pub fn new<R: RngCore + CryptoRng>(name: &str, root: &TrustRoot, rng: &mut R) -> Self {
        let signing_key = SigningKey::generate(rng);
        let certificate = root.issue(name, &signing_key.verifying_key());
        Self {
            name: name.to_string(),
            signing_key,
            certificate,
        }
    }

    /// Identity whose certificate is signed by its own key rather than any
    /// trust root. This is what an impersonating adversary presents.
    pub fn self_signed<R: RngCore + CryptoRng>(name: &str, rng: &mut R) -> Self {
        let signing_key = SigningKey::generate(rng);
        let payload = Certificate::signed_payload(name, &signing_key.verifying_key());
        let certificate = Certificate {
            name: name.to_string(),
            verifying_key: signing_key.verifying_key(),
            issuer_signature: signing_key.sign(&payload),
        };
        Self {
            name: name.to_string(),
            signing_key,
            certificate,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }
}

/// First handshake message, initiator to responder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsInit {
    pub certificate: Certificate,
    pub nonce: [u8; HS_NONCE_LEN],
    pub ephemeral: x25519_dalek::PublicKey,
}

/// Second handshake message, responder to initiator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsResp {
    pub certificate: Certificate,
    pub nonce: [u8; HS_NONCE_LEN],
    pub ephemeral: x25519_dalek::PublicKey,
    pub transcript_hash: [u8; 32],
    pub signature: Signature,
}

/// Third handshake message, initiator to responder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsFin {
    pub transcript_hash: [u8; 32],
    pub signature: Signature,
}

fn transcript_hash(init: &HsInit, cert_r: &Certificate, nonce_r: &[u8; HS_NONCE_LEN], eph_r: &x25519_dalek::PublicKey) -> [u8; 32] {
    let mut t = Writer::new();
    t.put_raw(TRANSCRIPT_DOMAIN);
    init.certificate.encode_into(&mut t);
    t.put_raw(&init.nonce);
    t.put_raw(init.ephemeral.as_bytes());
    cert_r.encode_into(&mut t);
    t.put_raw(nonce_r);
    t.put_raw(eph_r.as_bytes());
    Sha256::digest(t.into_bytes()).into()
}

fn sig_message(domain: &[u8], th: &[u8; 32]) -> Vec<u8> {
    let mut m = Vec::with_capacity(domain.len() + 32);
    m.extend_from_slice(domain);
    m.extend_from_slice(th);
    m
}

/// Everything a third party needs to confirm which identities established
/// a session: both certificates and both transcript signatures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionEvidence {
    pub initiator_certificate: Certificate,
    pub responder_certificate: Certificate,
    pub transcript_hash: [u8; 32],
    pub initiator_signature: Signature,
    pub responder_signature: Signature,
}

impl SessionEvidence {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.initiator_certificate.encode_into(&mut w);
        self.responder_certificate.encode_into(&mut w);
        w.put_raw(&self.transcript_hash);
        w.put_raw(&self.initiator_signature.to_bytes());
        w.put_raw(&self.responder_signature.to_bytes());
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let initiator_certificate = Certificate::decode_from(&mut r)?;
        let responder_certificate = Certificate::decode_from(&mut r)?;
        let transcript_hash = r.take_fixed::<32>()?;
        let initiator_signature = Signature::from_bytes(&r.take_fixed::<64>()?);
        let responder_signature = Signature::from_bytes(&r.take_fixed::<64>()?);
        r.finish()?;
        Ok(Self {
            initiator_certificate,
            responder_certificate,
            transcript_hash,
            initiator_signature,
            responder_signature,
        })
    }

    /// Verify both certificates against the trust root and both signatures
    /// over the transcript; returns (initiator name, responder name).
    pub fn verify(&self, root: &VerifyingKey) -> Result<(String, String), HandshakeFailure> {
        if !self.initiator_certificate.verify(root) || !self.responder_certificate.verify(root) {
            return Err(HandshakeFailure::BadCertificate);
        }
        let mi = sig_message(SIG_DOMAIN_INITIATOR, &self.transcript_hash);
        if self
            .initiator_certificate
            .verifying_key
            .verify(&mi, &self.initiator_signature)
            .is_err()
        {
            return Err(HandshakeFailure::BadSignature);
        }
        let mr = sig_message(SIG_DOMAIN_RESPONDER, &self.transcript_hash);
        if self
            .responder_certificate
            .verifying_key
            .verify(&mr, &self.responder_signature)
            .is_err()
        {
            return Err(HandshakeFailure::BadSignature);
        }
        Ok((
            self.initiator_certificate.name.clone(),
            self.responder_certificate.name.clone(),
        ))
    }
}

/// One established direction-keyed channel half.
#[derive(Debug, Clone)]
pub struct SecureChannel {
    pub session_id: [u8; SESSION_ID_LEN],
    send_key: [u8; KEY_LEN],
    recv_key: [u8; KEY_LEN],
    send_seq: u64,
    recv_seq: u64,
    pub peer: String,
    pub transcript_hash: [u8; 32],
    prk: [u8; 32],
}

/// An encrypted payload message. The tag authenticates
/// `session_id ‖ seq ‖ ciphertext`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub session_id: [u8; SESSION_ID_LEN],
    pub seq: u64,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    InitiatorToResponder,
    ResponderToInitiator,
}

struct DerivedKeys {
    i2r: [u8; KEY_LEN],
    r2i: [u8; KEY_LEN],
    session_id: [u8; SESSION_ID_LEN],
    prk: [u8; 32],
}

fn derive_keys(
    shared: &x25519_dalek::SharedSecret,
    nonce_i: &[u8; HS_NONCE_LEN],
    nonce_r: &[u8; HS_NONCE_LEN],
    th: &[u8; 32],
) -> DerivedKeys {
    let mut ikm = Vec::with_capacity(32 + 2 * HS_NONCE_LEN);
    ikm.extend_from_slice(shared.as_bytes());
    ikm.extend_from_slice(nonce_i);
    ikm.extend_from_slice(nonce_r);
    let (prk, hk) = Hkdf::<Sha256>::extract(Some(th), &ikm);
    let mut i2r = [0u8; KEY_LEN];
    let mut r2i = [0u8; KEY_LEN];
    let mut session_id = [0u8; SESSION_ID_LEN];
    hk.expand(INFO_I2R, &mut i2r).expect("valid hkdf length");
    hk.expand(INFO_R2I, &mut r2i).expect("valid hkdf length");
    hk.expand(INFO_SID, &mut session_id)
        .expect("valid hkdf length");
    DerivedKeys {
        i2r,
        r2i,
        session_id,
        prk: prk.into(),
    }
}

impl SecureChannel {
    fn from_derived(keys: &DerivedKeys, direction: Direction, peer: String, th: [u8; 32]) -> Self {
        let (send_key, recv_key) = match direction {
            Direction::InitiatorToResponder => (keys.i2r, keys.r2i),
            Direction::ResponderToInitiator => (keys.r2i, keys.i2r),
        };
        Self {
            session_id: keys.session_id,
            send_key,
            recv_key,
            send_seq: 0,
            recv_seq: 0,
            peer,
            transcript_hash: th,
            prk: keys.prk,
        }
    }

    /// Derive a fresh key bound to this session for out-of-band use, such
    /// as sealing the TPM state for transport.
    pub fn export_key(&self, label: &[u8]) -> [u8; KEY_LEN] {
        let hk = Hkdf::<Sha256>::from_prk(&self.prk).expect("prk has hash length");
        let mut out = [0u8; KEY_LEN];
        hk.expand(label, &mut out).expect("valid hkdf length");
        out
    }

    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    pub fn recv_seq(&self) -> u64 {
        self.recv_seq
    }

    fn aead_nonce(session_id: &[u8; SESSION_ID_LEN], seq: u64) -> [u8; 12] {
        let mut nonce = [0u8; 12];
        nonce[..4].copy_from_slice(&session_id[..4]);
        nonce[4..].copy_from_slice(&seq.to_le_bytes());
        nonce
    }

    fn aad(session_id: &[u8; SESSION_ID_LEN], seq: u64) -> Vec<u8> {
        let mut aad = Vec::with_capacity(SESSION_ID_LEN + 8);
        aad.extend_from_slice(session_id);
        aad.extend_from_slice(&seq.to_le_bytes());
        aad
    }

    /// Seal `plaintext` as the next message in this direction.
    pub fn seal_send(&mut self, plaintext: &[u8]) -> WireMessage {
        self.send_seq += 1;
        let seq = self.send_seq;
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.send_key));
        let nonce = Self::aead_nonce(&self.session_id, seq);
        let aad = Self::aad(&self.session_id, seq);
        let mut combined = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: &aad,
                },
            )
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let tag_off = combined.len() - TAG_LEN;
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&combined[tag_off..]);
        combined.truncate(tag_off);
        WireMessage {
            session_id: self.session_id,
            seq,
            ciphertext: combined,
            tag,
        }
    }

    /// Accept `msg` iff it belongs to this session, is exactly the next
    /// sequence number, and authenticates. Rejection leaves the channel
    /// untouched.
    pub fn open_recv(&mut self, msg: &WireMessage) -> Result<Vec<u8>, ChannelError> {
        if msg.session_id != self.session_id {
            return Err(ChannelError::WrongSession);
        }
        let expected = self.recv_seq + 1;
        if msg.seq != expected {
            return Err(ChannelError::ReplayDetected {
                expected,
                got: msg.seq,
            });
        }
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&self.recv_key));
        let nonce = Self::aead_nonce(&self.session_id, msg.seq);
        let aad = Self::aad(&self.session_id, msg.seq);
        let mut combined = Vec::with_capacity(msg.ciphertext.len() + TAG_LEN);
        combined.extend_from_slice(&msg.ciphertext);
        combined.extend_from_slice(&msg.tag);
        let plaintext = cipher
            .decrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: &combined,
                    aad: &aad,
                },
            )
            .map_err(|_| ChannelError::TamperDetected)?;
        self.recv_seq = expected;
        Ok(plaintext)
    }
}

/// Initiator handshake state between the first and third message.
pub struct InitiatorHandshake {
    identity: Identity,
    init: HsInit,
    ephemeral_secret: x25519_dalek::EphemeralSecret,
}

impl InitiatorHandshake {
    pub fn start<R: RngCore + CryptoRng>(
        identity: &Identity,
        rng: &mut R,
    ) -> (Self, HsInit) {
        let mut nonce = [0u8; HS_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ephemeral_secret = x25519_dalek::EphemeralSecret::random_from_rng(&mut *rng);
        let init = HsInit {
            certificate: identity.certificate.clone(),
            nonce,
            ephemeral: x25519_dalek::PublicKey::from(&ephemeral_secret),
        };
        (
            Self {
                identity: identity.clone(),
                init: init.clone(),
                ephemeral_secret,
            },
            init,
        )
    }

    /// Process the responder's message; on success the channel half and the
    /// closing message are returned along with the non-repudiation
    /// evidence.
    pub fn finish(
        self,
        resp: &HsResp,
        root: &VerifyingKey,
    ) -> Result<(SecureChannel, HsFin, SessionEvidence), HandshakeFailure> {
        if !resp.certificate.verify(root) {
            return Err(HandshakeFailure::BadCertificate);
        }
        let th = transcript_hash(&self.init, &resp.certificate, &resp.nonce, &resp.ephemeral);
        if th != resp.transcript_hash {
            return Err(HandshakeFailure::TranscriptMismatch);
        }
        let mr = sig_message(SIG_DOMAIN_RESPONDER, &th);
        if resp
            .certificate
            .verifying_key
            .verify(&mr, &resp.signature)
            .is_err()
        {
            return Err(HandshakeFailure::BadSignature);
        }
        let shared = self.ephemeral_secret.diffie_hellman(&resp.ephemeral);
        let keys = derive_keys(&shared, &self.init.nonce, &resp.nonce, &th);
        let mi = sig_message(SIG_DOMAIN_INITIATOR, &th);
        let signature = self.identity.signing_key.sign(&mi);
        let fin = HsFin {
            transcript_hash: th,
            signature,
        };
        let evidence = SessionEvidence {
            initiator_certificate: self.identity.certificate.clone(),
            responder_certificate: resp.certificate.clone(),
            transcript_hash: th,
            initiator_signature: signature,
            responder_signature: resp.signature,
        };
        let channel = SecureChannel::from_derived(
            &keys,
            Direction::InitiatorToResponder,
            resp.certificate.name.clone(),
            th,
        );
        Ok((channel, fin, evidence))
    }
}

/// Responder handshake state between the second and third message.
pub struct ResponderHandshake {
    peer_certificate: Certificate,
    own_certificate: Certificate,
    own_signature: Signature,
    transcript: [u8; 32],
    keys: DerivedKeys,
}

impl ResponderHandshake {
    /// Validate the opening message and produce the response.
    pub fn respond<R: RngCore + CryptoRng>(
        identity: &Identity,
        init: &HsInit,
        root: &VerifyingKey,
        rng: &mut R,
    ) -> Result<(Self, HsResp), HandshakeFailure> {
        if !init.certificate.verify(root) {
            return Err(HandshakeFailure::BadCertificate);
        }
        let mut nonce = [0u8; HS_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let ephemeral_secret = x25519_dalek::EphemeralSecret::random_from_rng(&mut *rng);
        let ephemeral = x25519_dalek::PublicKey::from(&ephemeral_secret);
        let th = transcript_hash(init, &identity.certificate, &nonce, &ephemeral);
        let mr = sig_message(SIG_DOMAIN_RESPONDER, &th);
        let signature = identity.signing_key.sign(&mr);
        let shared = ephemeral_secret.diffie_hellman(&init.ephemeral);
        let keys = derive_keys(&shared, &init.nonce, &nonce, &th);
        let resp = HsResp {
            certificate: identity.certificate.clone(),
            nonce,
            ephemeral,
            transcript_hash: th,
            signature,
        };
        Ok((
            Self {
                peer_certificate: init.certificate.clone(),
                own_certificate: identity.certificate.clone(),
                own_signature: signature,
                transcript: th,
                keys,
            },
            resp,
        ))
    }

    /// Process the closing message; on success the responder's channel half
    /// and the session evidence are returned.
    pub fn finish(
        self,
        fin: &HsFin,
    ) -> Result<(SecureChannel, SessionEvidence), HandshakeFailure> {
        if fin.transcript_hash != self.transcript {
            return Err(HandshakeFailure::TranscriptMismatch);
        }
        let mi = sig_message(SIG_DOMAIN_INITIATOR, &self.transcript);
        if self
            .peer_certificate
            .verifying_key
            .verify(&mi, &fin.signature)
            .is_err()
        {
            return Err(HandshakeFailure::BadSignature);
        }
        let evidence = SessionEvidence {
            initiator_certificate: self.peer_certificate.clone(),
            responder_certificate: self.own_certificate.clone(),
            transcript_hash: self.transcript,
            initiator_signature: fin.signature,
            responder_signature: self.own_signature,
        };
        let channel = SecureChannel::from_derived(
            &self.keys,
            Direction::ResponderToInitiator,
            self.peer_certificate.name.clone(),
            self.transcript,
        );
        Ok((channel, evidence))
    }
}

/// Run the whole handshake with no adversary in the pipe; returns the two
/// channel halves (initiator's, responder's).
pub fn handshake<R: RngCore + CryptoRng>(
    initiator: &Identity,
    responder: &Identity,
    root: &VerifyingKey,
    rng: &mut R,
) -> Result<(SecureChannel, SecureChannel), HandshakeFailure> {
    let (ihs, init) = InitiatorHandshake::start(initiator, rng);
    let (rhs, resp) = ResponderHandshake::respond(responder, &init, root, rng)?;
    let (chan_i, fin, _) = ihs.finish(&resp, root)?;
    let (chan_r, _) = rhs.finish(&fin)?;
    Ok((chan_i, chan_r))
}

// ---------------------------------------------------------------------------
// Frame encoding: what actually travels through the adversary's hands.

/// Protocol position of a frame. The label is scheduling metadata for the
/// simulator and the adversary's targeting; it is not part of the encoded
/// bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameLabel {
    Handshake,
    Control,
    Round0,
    Diff,
    Vtpm,
    Manifest,
}

/// An encoded message plus its protocol label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub label: FrameLabel,
    pub bytes: Vec<u8>,
}

const FRAME_HS_INIT: u8 = 0x01;
const FRAME_HS_RESP: u8 = 0x02;
const FRAME_HS_FIN: u8 = 0x03;
const FRAME_DATA: u8 = 0x04;

/// Decoded form of a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameBody {
    HsInit(HsInit),
    HsResp(HsResp),
    HsFin(HsFin),
    Data(WireMessage),
}

impl HsInit {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(FRAME_HS_INIT);
        self.certificate.encode_into(&mut w);
        w.put_raw(&self.nonce);
        w.put_raw(self.ephemeral.as_bytes());
        w.into_bytes()
    }
}

impl HsResp {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(FRAME_HS_RESP);
        self.certificate.encode_into(&mut w);
        w.put_raw(&self.nonce);
        w.put_raw(self.ephemeral.as_bytes());
        w.put_raw(&self.transcript_hash);
        w.put_raw(&self.signature.to_bytes());
        w.into_bytes()
    }
}

impl HsFin {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(FRAME_HS_FIN);
        w.put_raw(&self.transcript_hash);
        w.put_raw(&self.signature.to_bytes());
        w.into_bytes()
    }
}

impl WireMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(FRAME_DATA);
        w.put_raw(&self.session_id);
        w.put_u64(self.seq);
        w.put_var(&self.ciphertext);
        w.put_raw(&self.tag);
        w.into_bytes()
    }
}

impl FrameBody {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            FrameBody::HsInit(m) => m.encode(),
            FrameBody::HsResp(m) => m.encode(),
            FrameBody::HsFin(m) => m.encode(),
            FrameBody::Data(m) => m.encode(),
        }
    }

    /// Parse a frame body. Any framing damage surfaces as `None`; the
    /// caller classifies it for its protocol phase.
    pub fn decode(bytes: &[u8]) -> Option<FrameBody> {
        let mut r = Reader::new(bytes);
        let tag = r.take_u8().ok()?;
        let body = match tag {
            FRAME_HS_INIT => {
                let certificate = Certificate::decode_from(&mut r).ok()?;
                let nonce = r.take_fixed::<HS_NONCE_LEN>().ok()?;
                let ephemeral = x25519_dalek::PublicKey::from(r.take_fixed::<32>().ok()?);
                FrameBody::HsInit(HsInit {
                    certificate,
                    nonce,
                    ephemeral,
                })
            }
            FRAME_HS_RESP => {
                let certificate = Certificate::decode_from(&mut r).ok()?;
                let nonce = r.take_fixed::<HS_NONCE_LEN>().ok()?;
                let ephemeral = x25519_dalek::PublicKey::from(r.take_fixed::<32>().ok()?);
                let transcript_hash = r.take_fixed::<32>().ok()?;
                let signature = Signature::from_bytes(&r.take_fixed::<64>().ok()?);
                FrameBody::HsResp(HsResp {
                    certificate,
                    nonce,
                    ephemeral,
                    transcript_hash,
                    signature,
                })
            }
            FRAME_HS_FIN => {
                let transcript_hash = r.take_fixed::<32>().ok()?;
                let signature = Signature::from_bytes(&r.take_fixed::<64>().ok()?);
                FrameBody::HsFin(HsFin {
                    transcript_hash,
                    signature,
                })
            }
            FRAME_DATA => {
                let session_id = r.take_fixed::<SESSION_ID_LEN>().ok()?;
                let seq = r.take_u64().ok()?;
                let ciphertext = r.take_var().ok()?;
                let tag = r.take_fixed::<TAG_LEN>().ok()?;
                FrameBody::Data(WireMessage {
                    session_id,
                    seq,
                    ciphertext,
                    tag,
                })
            }
            _ => return None,
        };
        r.finish().ok()?;
        Some(body)
    }
}

// ---------------------------------------------------------------------------
// Scripted adversary.

/// Which frame a one-shot mutation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSpec {
    /// The n-th frame through the pipe, 1-based, any label.
    MessageIndex(u64),
    /// The first frame carrying this label.
    FirstLabeled(FrameLabel),
}

impl TargetSpec {
    fn matches(&self, index: u64, label: FrameLabel) -> bool {
        match self {
            TargetSpec::MessageIndex(n) => *n == index,
            TargetSpec::FirstLabeled(l) => *l == label,
        }
    }
}

/// One adversary capability. A config holds a set of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryMode {
    /// Record every frame's bytes; never mutate.
    Eavesdrop,
    /// Flip one seeded-random bit of the targeted frame.
    Tamper(TargetSpec),
    /// Re-inject a copy of the targeted frame right after delivering it.
    Replay(TargetSpec),
    /// Swallow the targeted frame.
    Drop(TargetSpec),
    /// Substitute a self-signed certificate in the handshake opening.
    Impersonate,
}

/// The adversary's script: a mode set plus the seed that fixes every random
/// choice it makes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub modes: Vec<AdversaryMode>,
    pub seed: u64,
}

impl AdversaryConfig {
    pub fn passive() -> Self {
        Self {
            modes: Vec::new(),
            seed: 0,
        }
    }
}

/// What the adversary wrote down while handling a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversaryNote {
    pub kind: AdversaryAction,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryAction {
    Eavesdrop,
    Tamper,
    Replay,
    Drop,
    Impersonate,
}

/// A deterministic machine-in-the-middle over the frame pipe.
pub struct Adversary<R: RngCore + CryptoRng> {
    config: AdversaryConfig,
    rng: R,
    seen: u64,
    tampered: bool,
    replayed: bool,
    dropped: bool,
    impersonated: bool,
    fake: Option<Identity>,
    /// Hex records of everything eavesdropped.
    pub captured: Vec<String>,
}

impl<R: RngCore + CryptoRng> Adversary<R> {
    pub fn new(config: AdversaryConfig, rng: R) -> Self {
        Self {
            config,
            rng,
            seen: 0,
            tampered: false,
            replayed: false,
            dropped: false,
            impersonated: false,
            fake: None,
            captured: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.config
            .modes
            .iter()
            .any(|m| !matches!(m, AdversaryMode::Eavesdrop))
    }

    /// Pass one frame through the adversary. The returned frames are what
    /// the receiver sees, in order; the notes describe what was done.
    pub fn intercept(&mut self, frame: Frame) -> (Vec<Frame>, Vec<AdversaryNote>) {
        self.seen += 1;
        let index = self.seen;
        let mut notes = Vec::new();
        let mut out = frame;

        if self.config.modes.contains(&AdversaryMode::Eavesdrop) {
            self.captured.push(hex::encode(&out.bytes));
            notes.push(AdversaryNote {
                kind: AdversaryAction::Eavesdrop,
                detail: format!("captured {} bytes", out.bytes.len()),
            });
        }

        if !self.impersonated && self.config.modes.contains(&AdversaryMode::Impersonate) {
            if let Some(FrameBody::HsInit(init)) = FrameBody::decode(&out.bytes) {
                let rng = &mut self.rng;
                let fake = self
                    .fake
                    .get_or_insert_with(|| Identity::self_signed("mallory", rng));
                let forged = HsInit {
                    certificate: fake.certificate.clone(),
                    nonce: init.nonce,
                    ephemeral: init.ephemeral,
                };
                out.bytes = forged.encode();
                self.impersonated = true;
                notes.push(AdversaryNote {
                    kind: AdversaryAction::Impersonate,
                    detail: "substituted self-signed certificate in handshake".into(),
                });
            }
        }

        for mode in self.config.modes.clone() {
            match mode {
                AdversaryMode::Drop(target) if !self.dropped => {
                    if target.matches(index, out.label) {
                        self.dropped = true;
                        notes.push(AdversaryNote {
                            kind: AdversaryAction::Drop,
                            detail: format!("frame {index} swallowed"),
                        });
                        return (Vec::new(), notes);
                    }
                }
                AdversaryMode::Tamper(target) if !self.tampered => {
                    if target.matches(index, out.label) {
                        let bit = self.rng.gen_range(0..out.bytes.len() * 8);
                        out.bytes[bit / 8] ^= 1 << (bit % 8);
                        self.tampered = true;
                        notes.push(AdversaryNote {
                            kind: AdversaryAction::Tamper,
                            detail: format!("frame {index} bit {bit} flipped"),
                        });
                    }
                }
                AdversaryMode::Replay(target)
                    if !self.replayed && target.matches(index, out.label) =>
                {
                    self.replayed = true;
                    notes.push(AdversaryNote {
                        kind: AdversaryAction::Replay,
                        detail: format!("frame {index} re-injected"),
                    });
                    return (vec![out.clone(), out], notes);
                }
                _ => {}
            }
        }

        (vec![out], notes)
    }
}

// ---------------------------------------------------------------------------
// Session log.

/// Session log event kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    HsOk,
    HsFail,
    Send,
    Recv,
    Tamper,
    Replay,
    Drop,
    Eavesdrop,
    Abort,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::HsOk => "HS-OK",
            EventKind::HsFail => "HS-FAIL",
            EventKind::Send => "SEND",
            EventKind::Recv => "RECV",
            EventKind::Tamper => "TAMPER",
            EventKind::Replay => "REPLAY",
            EventKind::Drop => "DROP",
            EventKind::Eavesdrop => "EAVESDROP",
            EventKind::Abort => "ABORT",
        }
    }
}

/// One `EVENT <tick> <who> <kind> <detail>` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionEvent {
    pub tick: u64,
    pub who: String,
    pub kind: EventKind,
    pub detail: String,
}

impl std::fmt::Display for SessionEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "EVENT {} {} {} {}",
            self.tick,
            self.who,
            self.kind.as_str(),
            self.detail
        )
    }
}

/// The whole session's event lines, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionLog {
    events: Vec<SessionEvent>,
}

impl SessionLog {
    pub fn push(&mut self, tick: u64, who: &str, kind: EventKind, detail: impl Into<String>) {
        self.events.push(SessionEvent {
            tick,
            who: who.to_string(),
            kind,
            detail: detail.into(),
        });
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn render(&self) -> String {
        let mut text = String::new();
        for e in &self.events {
            text.push_str(&e.to_string());
            text.push('\n');
        }
        text
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.render()).into()
    }

    /// Find the handshake evidence recorded at HS-OK and verify it.
    pub fn verify_session_evidence(
        &self,
        root: &VerifyingKey,
    ) -> Option<Result<(String, String), HandshakeFailure>> {
        let hs_ok = self.events.iter().find(|e| e.kind == EventKind::HsOk)?;
        let hex_blob = hs_ok
            .detail
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix("evidence="))?;
        let bytes = hex::decode(hex_blob).ok()?;
        let evidence = SessionEvidence::decode(&bytes).ok()?;
        Some(evidence.verify(root))
    }
}

//! Hybrid public-key envelope encryption bound to a blob header.
//!
//! X25519 key agreement with an ephemeral key, HKDF-SHA256 to a per-blob key,
//! ChaCha20-Poly1305 with the canonical header JSON as associated data. The
//! header travels in the clear so an untrusted orchestrator can route on it.
//!
//! Ciphertext layout: `enc (32) ‖ recipient key id (16) ‖ key check (16) ‖ body`.
//! The per-blob key is independent of every other blob's, so a holder of the
//! policy private key can hand out exactly one blob's key.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::types::{BlobId, Digest32, KeyId};

const ENC_LEN: usize = 32;
const KEY_ID_LEN: usize = 16;
const CHECK_LEN: usize = 16;
const PREFIX_LEN: usize = ENC_LEN + KEY_ID_LEN + CHECK_LEN;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed key: {0}")]
    KeyFormat(&'static str),
    #[error("decryption failed: key does not match blob")]
    WrongKey,
    #[error("authentication failed")]
    Authentication,
    #[error("malformed blob encoding: {0}")]
    Malformed(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public_key: Vec<u8>,
    private_key: Vec<u8>,
    pub key_id: KeyId,
}

impl KeyPair {
    pub fn private_key(&self) -> &[u8] {
        &self.private_key
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &hex::encode(&self.public_key))
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

/// Symmetric key that opens exactly one blob.
#[derive(Clone, PartialEq, Eq)]
pub struct BlobKey(pub [u8; 32]);

impl fmt::Debug for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BlobKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobHeader {
    pub blob_id: BlobId,
    pub created_at: u64,
    pub entry_node_id: String,
    pub policy_hash: Digest32,
}

impl BlobHeader {
    /// Key-sorted compact JSON; used as AEAD associated data and on the wire.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("header serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedBlob {
    pub header: BlobHeader,
    pub ciphertext: Vec<u8>,
    pub auth_tag: Vec<u8>,
}

impl EncryptedBlob {
    /// The sender's ephemeral public key, needed to derive the blob key.
    pub fn encapsulated_key(&self) -> Option<[u8; 32]> {
        self.ciphertext.get(..ENC_LEN)?.try_into().ok()
    }

    /// `header JSON ‖ u32 BE ciphertext length ‖ ciphertext ‖ tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header.canonical_bytes();
        let mut out =
            Vec::with_capacity(header.len() + 4 + self.ciphertext.len() + self.auth_tag.len());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let mut stream = serde_json::Deserializer::from_slice(bytes).into_iter::<BlobHeader>();
        let header = match stream.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(EnvelopeError::Malformed(e.to_string())),
            None => return Err(EnvelopeError::Malformed("missing header".into())),
        };
        let mut rest = &bytes[stream.byte_offset()..];
        if header.canonical_bytes() != bytes[..stream.byte_offset()] {
            return Err(EnvelopeError::Malformed("header is not canonical".into()));
        }
        if rest.len() < 4 {
            return Err(EnvelopeError::Malformed("missing ciphertext length".into()));
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() != len + TAG_LEN {
            return Err(EnvelopeError::Malformed(format!(
                "expected {} trailing bytes, found {}",
                len + TAG_LEN,
                rest.len()
            )));
        }
        Ok(EncryptedBlob {
            header,
            ciphertext: rest[..len].to_vec(),
            auth_tag: rest[len..].to_vec(),
        })
    }
}

fn key_id_of(public_key: &[u8]) -> KeyId {
    KeyId::derive(&[b"fedconf/key-id/v1", public_key])
}

fn parse_public(bytes: &[u8]) -> Result<PublicKey, EnvelopeError> {
    let raw: [u8; 32] = bytes
        .try_into()
        .map_err(|_| EnvelopeError::KeyFormat("public key must be 32 bytes"))?;
    Ok(PublicKey::from(raw))
}

/// Rejects keys of the wrong length and low-order points.
pub fn check_public_key(bytes: &[u8]) -> Result<(), EnvelopeError> {
    let pk = parse_public(bytes)?;
    let probe = StaticSecret::from([0x5a; 32]);
    if !probe.diffie_hellman(&pk).was_contributory() {
        return Err(EnvelopeError::KeyFormat("low-order public key"));
    }
    Ok(())
}

fn parse_secret(bytes: &[u8]) -> Result<StaticSecret, EnvelopeError> {
    let raw: [u8; 32] = bytes
        .try_into()
        .map_err(|_| EnvelopeError::KeyFormat("private key must be 32 bytes"))?;
    Ok(StaticSecret::from(raw))
}

fn expand<const N: usize>(hk: &Hkdf<Sha256>, info: &[&[u8]]) -> [u8; N] {
    let mut out = [0u8; N];
    hk.expand_multi_info(info, &mut out)
        .expect("output length is within HKDF limits");
    out
}

pub fn generate_keypair(seed: &[u8; 32]) -> KeyPair {
    let hk = Hkdf::<Sha256>::new(Some(b"fedconf/keypair/v1"), seed);
    let secret = StaticSecret::from(expand::<32>(&hk, &[b"x25519"]));
    let public = PublicKey::from(&secret);
    KeyPair {
        public_key: public.as_bytes().to_vec(),
        private_key: secret.to_bytes().to_vec(),
        key_id: key_id_of(public.as_bytes()),
    }
}

fn blob_key_from_shared(
    shared: &[u8; 32],
    enc: &[u8; 32],
    recipient: &[u8; 32],
    header: &BlobHeader,
) -> BlobKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(enc);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    BlobKey(expand(
        &hk,
        &[
            b"fedconf/blob-key/v1",
            header.blob_id.as_bytes(),
            header.policy_hash.as_bytes(),
        ],
    ))
}

struct Schedule {
    aead: [u8; 32],
    nonce: [u8; 12],
    check: [u8; CHECK_LEN],
}

fn schedule(key: &BlobKey) -> Schedule {
    let hk = Hkdf::<Sha256>::from_prk(&key.0).expect("32-byte PRK");
    Schedule {
        aead: expand(&hk, &[b"aead"]),
        nonce: expand(&hk, &[b"nonce"]),
        check: expand(&hk, &[b"check"]),
    }
}

/// Encrypts `plaintext` to `recipient`, authenticating `header`.
///
/// The ephemeral key is derived from the recipient, header and plaintext, so
/// the output is a pure function of the inputs. Callers must not reuse a
/// `blob_id` for different plaintexts under one policy.
pub fn encrypt(
    plaintext: &[u8],
    recipient: &[u8],
    header: &BlobHeader,
) -> Result<EncryptedBlob, EnvelopeError> {
    let recipient_pk = parse_public(recipient)?;
    let aad = header.canonical_bytes();

    let hk = Hkdf::<Sha256>::new(Some(b"fedconf/ephemeral/v1"), recipient);
    let pt_digest = Digest32::of(&[plaintext]);
    let eph = StaticSecret::from(expand::<32>(&hk, &[&aad, pt_digest.as_bytes()]));
    let enc = PublicKey::from(&eph);
    let shared = eph.diffie_hellman(&recipient_pk);
    if !shared.was_contributory() {
        return Err(EnvelopeError::KeyFormat("low-order public key"));
    }

    let key = blob_key_from_shared(shared.as_bytes(), enc.as_bytes(), recipient_pk.as_bytes(), header);
    let sched = schedule(&key);
    let cipher = ChaCha20Poly1305::new((&sched.aead).into());
    let mut sealed = cipher
        .encrypt(
            (&sched.nonce).into(),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .map_err(|_| EnvelopeError::Authentication)?;
    let tag = sealed.split_off(sealed.len() - TAG_LEN);

    let mut ciphertext = Vec::with_capacity(PREFIX_LEN + sealed.len());
    ciphertext.extend_from_slice(enc.as_bytes());
    ciphertext.extend_from_slice(key_id_of(recipient).as_bytes());
    ciphertext.extend_from_slice(&sched.check);
    ciphertext.extend_from_slice(&sealed);
    Ok(EncryptedBlob {
        header: header.clone(),
        ciphertext,
        auth_tag: tag,
    })
}

/// Derives the key that opens the blob with this header and encapsulated key.
pub fn derive_blob_key(
    private_key: &[u8],
    header: &BlobHeader,
    encapsulated_key: &[u8; 32],
) -> Result<BlobKey, EnvelopeError> {
    let secret = parse_secret(private_key)?;
    let public = PublicKey::from(&secret);
    let shared = secret.diffie_hellman(&PublicKey::from(*encapsulated_key));
    if !shared.was_contributory() {
        return Err(EnvelopeError::Authentication);
    }
    Ok(blob_key_from_shared(
        shared.as_bytes(),
        encapsulated_key,
        public.as_bytes(),
        header,
    ))
}

fn open(blob: &EncryptedBlob, key: &BlobKey) -> Result<Vec<u8>, EnvelopeError> {
    let sched = schedule(key);
    if blob.ciphertext[ENC_LEN + KEY_ID_LEN..PREFIX_LEN] != sched.check {
        return Err(EnvelopeError::Authentication);
    }
    let mut sealed = Vec::with_capacity(blob.ciphertext.len() - PREFIX_LEN + TAG_LEN);
    sealed.extend_from_slice(&blob.ciphertext[PREFIX_LEN..]);
    sealed.extend_from_slice(&blob.auth_tag);
    let aad = blob.header.canonical_bytes();
    ChaCha20Poly1305::new((&sched.aead).into())
        .decrypt(
            (&sched.nonce).into(),
            Payload {
                msg: &sealed,
                aad: &aad,
            },
        )
        .map_err(|_| EnvelopeError::Authentication)
}

fn check_shape(blob: &EncryptedBlob) -> Result<(), EnvelopeError> {
    if blob.ciphertext.len() < PREFIX_LEN || blob.auth_tag.len() != TAG_LEN {
        return Err(EnvelopeError::Authentication);
    }
    Ok(())
}

pub fn decrypt(blob: &EncryptedBlob, private_key: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
    let secret = parse_secret(private_key)?;
    check_shape(blob)?;
    let public = PublicKey::from(&secret);
    if blob.ciphertext[ENC_LEN..ENC_LEN + KEY_ID_LEN] != *key_id_of(public.as_bytes()).as_bytes() {
        return Err(EnvelopeError::WrongKey);
    }
    let enc = blob.encapsulated_key().expect("length checked");
    let key = derive_blob_key(private_key, &blob.header, &enc)?;
    open(blob, &key)
}

/// Opens a blob with a released per-blob key. A key-check mismatch is
/// reported as [`EnvelopeError::WrongKey`].
pub fn decrypt_with_blob_key(blob: &EncryptedBlob, key: &BlobKey) -> Result<Vec<u8>, EnvelopeError> {
    check_shape(blob)?;
    if blob.ciphertext[ENC_LEN + KEY_ID_LEN..PREFIX_LEN] != schedule(key).check {
        return Err(EnvelopeError::WrongKey);
    }
    open(blob, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Id16;
    use proptest::prelude::*;

    fn header(n: u8) -> BlobHeader {
        BlobHeader {
            blob_id: Id16([n; 16]),
            created_at: 7,
            entry_node_id: "client_update".into(),
            policy_hash: Digest32([0xab; 32]),
        }
    }

    #[test]
    fn keypair_determinism() {
        let a = generate_keypair(&[1; 32]);
        assert_eq!(a, generate_keypair(&[1; 32]));
        assert_ne!(a.key_id, generate_keypair(&[2; 32]).key_id);
        let zero = generate_keypair(&[0; 32]);
        let blob = encrypt(b"ok", &zero.public_key, &header(1)).unwrap();
        assert_eq!(decrypt(&blob, zero.private_key()).unwrap(), b"ok");
    }

    #[test]
    fn round_trip_and_empty() {
        let kp = generate_keypair(&[3; 32]);
        let blob = encrypt(b"hello", &kp.public_key, &header(1)).unwrap();
        assert_eq!(blob.header, header(1));
        assert_eq!(decrypt(&blob, kp.private_key()).unwrap(), b"hello");
        let empty = encrypt(b"", &kp.public_key, &header(2)).unwrap();
        assert_eq!(decrypt(&empty, kp.private_key()).unwrap(), b"");
    }

    #[test]
    fn header_is_authenticated() {
        let kp = generate_keypair(&[3; 32]);
        let mut blob = encrypt(b"hello", &kp.public_key, &header(1)).unwrap();
        blob.header.created_at += 1;
        assert_eq!(
            decrypt(&blob, kp.private_key()),
            Err(EnvelopeError::Authentication)
        );
    }

    #[test]
    fn error_kinds_are_distinct() {
        let kp = generate_keypair(&[3; 32]);
        let other = generate_keypair(&[4; 32]);
        let blob = encrypt(b"hello world", &kp.public_key, &header(1)).unwrap();
        assert_eq!(decrypt(&blob, other.private_key()), Err(EnvelopeError::WrongKey));
        let mut short = blob.clone();
        short.ciphertext.truncate(short.ciphertext.len() - 3);
        assert_eq!(
            decrypt(&short, kp.private_key()),
            Err(EnvelopeError::Authentication)
        );
        let mut stub = blob.clone();
        stub.ciphertext.truncate(10);
        assert_eq!(
            decrypt(&stub, kp.private_key()),
            Err(EnvelopeError::Authentication)
        );
        assert!(matches!(
            encrypt(b"x", &[1, 2, 3], &header(1)),
            Err(EnvelopeError::KeyFormat(_))
        ));
        assert!(matches!(
            encrypt(b"x", &[0; 32], &header(1)),
            Err(EnvelopeError::KeyFormat(_))
        ));
    }

    #[test]
    fn blob_keys_are_per_blob() {
        let kp = generate_keypair(&[5; 32]);
        let a = encrypt(b"first", &kp.public_key, &header(1)).unwrap();
        let b = encrypt(b"second", &kp.public_key, &header(2)).unwrap();
        let ka = derive_blob_key(kp.private_key(), &a.header, &a.encapsulated_key().unwrap()).unwrap();
        assert_eq!(decrypt_with_blob_key(&a, &ka).unwrap(), b"first");
        assert_eq!(decrypt_with_blob_key(&b, &ka), Err(EnvelopeError::WrongKey));
        // A key derived for a's encapsulation under b's header opens neither.
        let mixed = derive_blob_key(kp.private_key(), &b.header, &a.encapsulated_key().unwrap()).unwrap();
        assert!(decrypt_with_blob_key(&a, &mixed).is_err());
        assert!(decrypt_with_blob_key(&b, &mixed).is_err());
    }

    #[test]
    fn every_bit_flip_fails() {
        let kp = generate_keypair(&[6; 32]);
        let blob = encrypt(b"bit flips everywhere", &kp.public_key, &header(9)).unwrap();
        let bytes = blob.to_bytes();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut m = bytes.clone();
                m[i] ^= 1 << bit;
                // Either the frame no longer parses or decryption refuses it.
                if let Ok(parsed) = EncryptedBlob::from_bytes(&m) {
                    assert!(decrypt(&parsed, kp.private_key()).is_err(), "byte {i} bit {bit}");
                }
            }
        }
    }

    #[test]
    fn wire_layout() {
        let kp = generate_keypair(&[7; 32]);
        let blob = encrypt(b"abc", &kp.public_key, &header(1)).unwrap();
        let bytes = blob.to_bytes();
        let h = header(1).canonical_bytes();
        assert!(String::from_utf8(h.clone()).unwrap().starts_with("{\"blob_id\":\"0101"));
        assert_eq!(&bytes[..h.len()], &h[..]);
        let len = u32::from_be_bytes(bytes[h.len()..h.len() + 4].try_into().unwrap());
        assert_eq!(len as usize, PREFIX_LEN + 3);
        assert_eq!(bytes.len(), h.len() + 4 + len as usize + TAG_LEN);
        assert_eq!(EncryptedBlob::from_bytes(&bytes).unwrap(), blob);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_any(
            pt in proptest::collection::vec(any::<u8>(), 0..2048),
            seed in any::<[u8; 32]>(),
            id in any::<[u8; 16]>(),
            tick in any::<u64>(),
            node in "[a-z_]{1,12}",
        ) {
            let kp = generate_keypair(&seed);
            let h = BlobHeader { blob_id: Id16(id), created_at: tick, entry_node_id: node, policy_hash: Digest32(seed) };
            let blob = encrypt(&pt, &kp.public_key, &h).unwrap();
            let parsed = EncryptedBlob::from_bytes(&blob.to_bytes()).unwrap();
            prop_assert_eq!(decrypt(&parsed, kp.private_key()).unwrap(), pt);
        }

        #[test]
        fn key_isolation(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), pt in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assume!(a != b);
            let ka = generate_keypair(&a);
            let kb = generate_keypair(&b);
            let blob = encrypt(&pt, &ka.public_key, &header(1)).unwrap();
            prop_assert!(decrypt(&blob, kb.private_key()).is_err());
        }
    }

    #[test]
    fn one_mebibyte_round_trip() {
        let kp = generate_keypair(&[8; 32]);
        let pt: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        let blob = encrypt(&pt, &kp.public_key, &header(3)).unwrap();
        assert_eq!(decrypt(&blob, kp.private_key()).unwrap(), pt);
    }
}

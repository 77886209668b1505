//! Simulated remote attestation.
//!
//! One Ed25519 trust root per run stands in for the TEE vendor. Evidence is a
//! root signature over `binary_digest ‖ config_digest ‖ nonce`; a workload's
//! binary digest is the SHA-256 of its registered identity string.

use std::collections::BTreeSet;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::envelope::{self, KeyPair};
use crate::types::{Digest32, Nonce};

#[derive(Clone)]
pub struct TrustRoot {
    pub root_public_key: Vec<u8>,
    signing: SigningKey,
}

impl TrustRoot {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(seed);
        Self {
            root_public_key: signing.verifying_key().to_bytes().to_vec(),
            signing,
        }
    }
}

impl fmt::Debug for TrustRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustRoot")
            .field("root_public_key", &hex::encode(&self.root_public_key))
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub binary_digest: Digest32,
    pub config_digest: Digest32,
    pub nonce: Nonce,
    #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
    pub signature: Vec<u8>,
}

fn ser_b64<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&B64.encode(v))
}

fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let s = String::deserialize(d)?;
    B64.decode(s).map_err(serde::de::Error::custom)
}

impl Evidence {
    pub fn to_canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("evidence serializes");
        serde_json::to_string(&v).expect("value serializes")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub allowed_digests: BTreeSet<Digest32>,
}

impl ReferenceValues {
    pub fn new<I: IntoIterator<Item = Digest32>>(digests: I) -> Self {
        Self {
            allowed_digests: digests.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    BadSignature,
    NonceMismatch,
    DigestMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verification {
    Accepted,
    Rejected(RejectReason),
}

impl Verification {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verification::Accepted)
    }
}

pub fn binary_digest(identity: &str) -> Digest32 {
    Digest32::of(&[identity.as_bytes()])
}

/// Config digest that binds an enclave's session public key into its evidence.
pub fn session_config_digest(session_public_key: &[u8]) -> Digest32 {
    Digest32::of(&[b"fedconf/session-key/v1", session_public_key])
}

fn signed_message(binary: &Digest32, config: &Digest32, nonce: &Nonce) -> [u8; 80] {
    let mut msg = [0u8; 80];
    msg[..32].copy_from_slice(binary.as_bytes());
    msg[32..64].copy_from_slice(config.as_bytes());
    msg[64..].copy_from_slice(nonce.as_bytes());
    msg
}

pub fn generate_evidence(
    binary_digest: Digest32,
    config_digest: Digest32,
    nonce: Nonce,
    root: &TrustRoot,
) -> Evidence {
    let sig = root
        .signing
        .sign(&signed_message(&binary_digest, &config_digest, &nonce));
    Evidence {
        binary_digest,
        config_digest,
        nonce,
        signature: sig.to_bytes().to_vec(),
    }
}

/// Structure, signature and nonce checks; says nothing about which binary ran.
pub fn verify_quote(evidence: &Evidence, nonce: &Nonce, root_public_key: &[u8]) -> Verification {
    use Verification::Rejected;
    let Ok(root_bytes) = <[u8; 32]>::try_from(root_public_key) else {
        return Rejected(RejectReason::Malformed);
    };
    let Ok(root) = VerifyingKey::from_bytes(&root_bytes) else {
        return Rejected(RejectReason::Malformed);
    };
    let Ok(sig) = Signature::from_slice(&evidence.signature) else {
        return Rejected(RejectReason::Malformed);
    };
    let msg = signed_message(
        &evidence.binary_digest,
        &evidence.config_digest,
        &evidence.nonce,
    );
    if root.verify_strict(&msg, &sig).is_err() {
        return Rejected(RejectReason::BadSignature);
    }
    if evidence.nonce != *nonce {
        return Rejected(RejectReason::NonceMismatch);
    }
    Verification::Accepted
}

/// Checks, in order: structure, signature, nonce, digest allowlist.
pub fn verify_evidence(
    evidence: &Evidence,
    refs: &ReferenceValues,
    nonce: &Nonce,
    root_public_key: &[u8],
) -> Verification {
    match verify_quote(evidence, nonce, root_public_key) {
        Verification::Accepted if !refs.allowed_digests.contains(&evidence.binary_digest) => {
            Verification::Rejected(RejectReason::DigestMismatch)
        }
        v => v,
    }
}

/// A workload running inside the simulated TEE: a registered identity plus a
/// session keypair generated inside the enclave.
#[derive(Clone)]
pub struct Enclave {
    identity: String,
    binary_digest: Digest32,
    session: KeyPair,
    root: TrustRoot,
}

impl Enclave {
    pub fn launch(root: &TrustRoot, identity: &str, session_seed: &[u8; 32]) -> Self {
        Self {
            identity: identity.to_owned(),
            binary_digest: binary_digest(identity),
            session: envelope::generate_keypair(session_seed),
            root: root.clone(),
        }
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn binary_digest(&self) -> Digest32 {
        self.binary_digest
    }

    pub fn session_public_key(&self) -> &[u8] {
        &self.session.public_key
    }

    pub fn session_keypair(&self) -> &KeyPair {
        &self.session
    }

    /// Evidence binding this enclave's session key.
    pub fn attest(&self, nonce: Nonce) -> Evidence {
        generate_evidence(
            self.binary_digest,
            session_config_digest(&self.session.public_key),
            nonce,
            &self.root,
        )
    }

    /// Evidence binding an arbitrary config digest, e.g. a published key.
    pub fn attest_config(&self, config_digest: Digest32, nonce: Nonce) -> Evidence {
        generate_evidence(self.binary_digest, config_digest, nonce, &self.root)
    }
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("identity", &self.identity)
            .field("binary_digest", &self.binary_digest)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup() -> (TrustRoot, ReferenceValues, Digest32) {
        let root = TrustRoot::from_seed(&[9; 32]);
        let d = binary_digest("fedconf/aggregate@1");
        (root, ReferenceValues::new([d]), d)
    }

    #[test]
    fn accept_and_reject_reasons() {
        let (root, refs, d) = setup();
        let n = Nonce([1; 16]);
        let ev = generate_evidence(d, Digest32::default(), n, &root);
        let pk = &root.root_public_key;
        assert_eq!(verify_evidence(&ev, &refs, &n, pk), Verification::Accepted);
        assert_eq!(
            verify_evidence(&ev, &refs, &Nonce([2; 16]), pk),
            Verification::Rejected(RejectReason::NonceMismatch)
        );
        let other = binary_digest("fedconf/evil@1");
        let ev2 = generate_evidence(other, Digest32::default(), n, &root);
        assert_eq!(
            verify_evidence(&ev2, &refs, &n, pk),
            Verification::Rejected(RejectReason::DigestMismatch)
        );
        let rogue = TrustRoot::from_seed(&[10; 32]);
        let ev3 = generate_evidence(d, Digest32::default(), n, &rogue);
        assert_eq!(
            verify_evidence(&ev3, &refs, &n, pk),
            Verification::Rejected(RejectReason::BadSignature)
        );
    }

    #[test]
    fn malformed_never_panics() {
        let (root, refs, d) = setup();
        let n = Nonce([1; 16]);
        let mut ev = generate_evidence(d, Digest32::default(), n, &root);
        ev.signature.truncate(10);
        assert_eq!(
            verify_evidence(&ev, &refs, &n, &root.root_public_key),
            Verification::Rejected(RejectReason::Malformed)
        );
        let ev = generate_evidence(d, Digest32::default(), n, &root);
        assert_eq!(
            verify_evidence(&ev, &refs, &n, &[1, 2, 3]),
            Verification::Rejected(RejectReason::Malformed)
        );
    }

    #[test]
    fn signature_covers_every_field() {
        let (root, refs, d) = setup();
        let n = Nonce([1; 16]);
        let ev = generate_evidence(d, Digest32::default(), n, &root);
        let mut e = ev.clone();
        e.config_digest.0[0] ^= 1;
        assert_eq!(
            verify_evidence(&e, &refs, &n, &root.root_public_key),
            Verification::Rejected(RejectReason::BadSignature)
        );
        let mut e = ev.clone();
        e.nonce.0[15] ^= 1;
        assert_eq!(
            verify_evidence(&e, &refs, &e.nonce.clone(), &root.root_public_key),
            Verification::Rejected(RejectReason::BadSignature)
        );
    }

    #[test]
    fn forged_signatures_never_verify() {
        let (root, refs, d) = setup();
        let n = Nonce([4; 16]);
        let genuine = generate_evidence(d, Digest32::default(), n, &root);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for i in 0..10_000 {
            let mut ev = genuine.clone();
            match i % 3 {
                0 => rng.fill(&mut ev.signature[..]),
                1 => {
                    let byte = rng.random_range(0..64);
                    ev.signature[byte] ^= 1 << rng.random_range(0..8);
                }
                _ => {
                    rng.fill(&mut ev.config_digest.0);
                }
            }
            let v = verify_evidence(&ev, &refs, &n, &root.root_public_key);
            assert!(!v.is_accepted(), "forgery {i} accepted");
        }
    }

    #[test]
    fn completeness() {
        let (root, _, _) = setup();
        for i in 0..50u8 {
            let d = binary_digest(&format!("w{i}"));
            let refs = ReferenceValues::new([d]);
            let n = Nonce([i; 16]);
            let ev = generate_evidence(d, Digest32([i; 32]), n, &root);
            assert!(verify_evidence(&ev, &refs, &n, &root.root_public_key).is_accepted());
        }
    }

    #[test]
    fn enclave_binds_session_key() {
        let (root, refs, _) = setup();
        let enclave = Enclave::launch(&root, "fedconf/aggregate@1", &[3; 32]);
        let n = Nonce([8; 16]);
        let ev = enclave.attest(n);
        assert!(verify_evidence(&ev, &refs, &n, &root.root_public_key).is_accepted());
        assert_eq!(
            ev.config_digest,
            session_config_digest(enclave.session_public_key())
        );
    }

    #[test]
    fn json_shape() {
        let (root, _, d) = setup();
        let ev = generate_evidence(d, Digest32::default(), Nonce([0xab; 16]), &root);
        let json = ev.to_canonical_json();
        assert!(json.starts_with("{\"binary_digest\":\""));
        assert!(json.contains("\"nonce\":\"abababababababababababababababab\""));
        let back: Evidence = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ev);
    }
}

//! Fixed-width identifiers shared across modules. All serialize as lowercase hex.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

macro_rules! hex_bytes {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                if s.bytes().any(|b| b.is_ascii_uppercase()) {
                    return Err(format!("{}: hex must be lowercase", stringify!($name)));
                }
                let raw = hex::decode(s).map_err(|e| format!("{}: {e}", stringify!($name)))?;
                Self::from_slice(&raw).ok_or_else(|| {
                    format!(
                        "{}: expected {} bytes, got {}",
                        stringify!($name),
                        $len,
                        raw.len()
                    )
                })
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_bytes!(Digest32, 32);
hex_bytes!(Id16, 16);
hex_bytes!(Nonce, 16);

pub type BlobId = Id16;
pub type KeyId = Id16;

impl Digest32 {
    /// SHA-256 over the concatenation of `parts`.
    pub fn of(parts: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        Digest32(h.finalize().into())
    }
}

impl Id16 {
    /// First 16 bytes of SHA-256 over the concatenation of `parts`.
    pub fn derive(parts: &[&[u8]]) -> Self {
        let d = Digest32::of(parts);
        let mut out = [0u8; 16];
        out.copy_from_slice(&d.0[..16]);
        Id16(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip_and_case() {
        let d = Digest32::of(&[b"abc"]);
        assert_eq!(
            d.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(d.to_hex().parse::<Digest32>().unwrap(), d);
        assert!(d.to_hex().to_uppercase().parse::<Digest32>().is_err());
        assert!("abcd".parse::<Id16>().is_err());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Digest32>(&json).unwrap(), d);
    }
}

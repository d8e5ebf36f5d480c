//! Ed25519 identities and detached signatures.
//!
//! A [`Principal`] is a verification key. Its identifier is the SHA-256 of
//! the key, written `ed25519:<hex>`. Records embed the full public key (hex)
//! so any party can verify signatures without a key directory.

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::hash::{decode_fixed, HexError};

pub const PRINCIPAL_PREFIX: &str = "ed25519:";

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("seed must be exactly 32 bytes, got {0}")]
    SeedLength(usize),
    #[error("invalid key encoding: {0}")]
    Encoding(#[from] HexError),
    #[error("not a valid ed25519 public key")]
    InvalidPublicKey,
    #[error("principal id must start with `{PRINCIPAL_PREFIX}`")]
    MissingPrefix,
    #[error("key file does not match its public key")]
    KeyMismatch,
}

/// A signing identity. The secret seed is never printed by `Debug`.
#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
}

impl Keypair {
    /// Deterministic for a given seed, random otherwise.
    pub fn generate(seed: Option<&[u8]>) -> Result<Keypair, IdentityError> {
        let signing = match seed {
            Some(seed) => {
                let seed: [u8; 32] =
                    seed.try_into().map_err(|_| IdentityError::SeedLength(seed.len()))?;
                SigningKey::from_bytes(&seed)
            }
            None => SigningKey::generate(&mut OsRng),
        };
        Ok(Keypair { signing })
    }

    pub fn from_seed(seed: [u8; 32]) -> Keypair {
        Keypair { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn principal(&self) -> Principal {
        Principal { public_key: self.signing.verifying_key().to_bytes() }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    /// The 32-byte secret seed. Only call this when the user asked for key material.
    pub fn secret_seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair")
            .field("principal", &self.principal().id())
            .field("secret_key", &"<redacted>")
            .finish()
    }
}

/// On-disk key file. Written only by `keygen` and by explicit key export.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFile {
    pub public_key: String,
    pub secret_key: String,
}

impl KeyFile {
    pub fn from_keypair(keypair: &Keypair) -> KeyFile {
        KeyFile {
            public_key: hex::encode(keypair.public_key()),
            secret_key: hex::encode(keypair.secret_seed()),
        }
    }

    pub fn to_keypair(&self) -> Result<Keypair, IdentityError> {
        let seed = decode_fixed::<32>(&self.secret_key)?;
        let keypair = Keypair::from_seed(seed);
        if hex::encode(keypair.public_key()) != self.public_key {
            return Err(IdentityError::KeyMismatch);
        }
        Ok(keypair)
    }
}

/// A public identity. Equality is byte equality of the public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Principal {
    public_key: [u8; 32],
}

impl Principal {
    pub fn from_public_key(public_key: [u8; 32]) -> Result<Principal, IdentityError> {
        VerifyingKey::from_bytes(&public_key).map_err(|_| IdentityError::InvalidPublicKey)?;
        Ok(Principal { public_key })
    }

    pub fn public_key(&self) -> &[u8; 32] {
        &self.public_key
    }

    pub fn public_key_hex(&self) -> String {
        hex::encode(self.public_key)
    }

    pub fn id(&self) -> PrincipalId {
        PrincipalId(crate::canonical::sha256(&self.public_key))
    }

    /// True iff `sig` is a valid signature by this key over exactly `message`.
    pub fn verify(&self, message: &[u8], sig: &Signature) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(&self.public_key) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
        key.verify_strict(message, &sig).is_ok()
    }
}

impl fmt::Debug for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Principal({})", &hex::encode(self.public_key)[..12])
    }
}

impl FromStr for Principal {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Principal::from_public_key(decode_fixed::<32>(s)?)
    }
}

impl Serialize for Principal {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.public_key_hex())
    }
}

impl<'de> Deserialize<'de> for Principal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `ed25519:<SHA-256(public_key) hex>`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PrincipalId(pub [u8; 32]);

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{PRINCIPAL_PREFIX}{}", hex::encode(self.0))
    }
}

impl fmt::Debug for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrincipalId({})", &hex::encode(self.0)[..12])
    }
}

impl FromStr for PrincipalId {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s.strip_prefix(PRINCIPAL_PREFIX).ok_or(IdentityError::MissingPrefix)?;
        Ok(PrincipalId(decode_fixed::<32>(rest)?))
    }
}

impl Serialize for PrincipalId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PrincipalId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

crate::hash::hex_newtype!(
    /// A detached 64-byte Ed25519 signature.
    Signature,
    64
);

pub fn sign(keypair: &Keypair, message: &[u8]) -> Signature {
    keypair.sign(message)
}

pub fn verify(principal: &Principal, message: &[u8], sig: &Signature) -> bool {
    principal.verify(message, sig)
}

"""Cryptographic layer for encrypted gradient trading.

Three cooperating pieces:

* **Fixed-point codec** -- maps clipped real-valued gradients into the
  integer ring ``[0, modulus)`` (scale, round, unscale), with negatives
  stored as modular complements.
* **Zero-sum keystreams** -- a trusted in-process dealer hands every
  party of the credible set one pad vector per round such that the
  coordinate-wise pad sum is 0 mod ``modulus``.  Encryption is modular
  addition of the pad; a receiver that sums all peers' ciphertexts and
  adds its own pad recovers exactly the modular sum of the plaintexts
  and nothing else.
* **Onion layers** -- the pad-encrypted vector is sealed a second time
  under a fresh symmetric key (AES-GCM) and that key is wrapped for the
  requesting party's public key (X25519 + HKDF + AES-GCM), so payloads
  parked on shared storage are readable only by the paying requester.

All operations are pure given their inputs; pads are derived from an
immutable dealer seed by a counter-mode PRF, never stored.
"""

from __future__ import annotations

import hashlib
import secrets
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

DEFAULT_SCALE_BITS = 16
DEFAULT_MODULUS = 1 << 32

# Gradients are clipped to +/- this bound before encoding, which keeps the
# encode precondition |v| * 2^scale_bits < modulus/2 provable for any
# federation of up to 64 parties under the default modulus.
DEFAULT_CLIP = 32.0

_GCM_NONCE_BYTES = 12
_WRAP_INFO = b"fedtrade-key-wrap-v1"


class CodecOverflowError(ValueError):
    """A value is too large to encode without wrapping past modulus/2."""


class RoundMismatchError(ValueError):
    """Ciphertexts from different rounds were mixed in one aggregation."""


class DimensionMismatchError(ValueError):
    """Vector lengths disagree between ciphertexts and pads."""


class MalformedPayloadError(ValueError):
    """An onion payload or serialized vector cannot be parsed."""


class KeyUnwrapError(Exception):
    """The wrapped symmetric key could not be recovered (wrong secret key)."""


class PayloadAuthenticationError(Exception):
    """The symmetric layer failed authentication (payload tampered)."""


def derive_modulus(p_max: int, n: int) -> int:
    """Smallest power of two >= p_max * n.

    ``p_max`` is the largest plaintext magnitude after fixed-point
    encoding and ``n`` the number of parties whose words may be summed.
    """
    if p_max < 1:
        raise ValueError(f"p_max must be >= 1, got {p_max}")
    if n < 2:
        raise ValueError(f"party count must be >= 2, got {n}")
    return 1 << (int(p_max) * int(n) - 1).bit_length()


@dataclass(frozen=True)
class FixedPointCodec:
    """Scale-round-unscale mapping between reals and ring words.

    Reals are multiplied by ``2**scale_bits`` and rounded; negatives are
    represented as ``modulus - |v|``.  Round-trip error is at most
    ``2**-(scale_bits + 1)`` per value.
    """

    scale_bits: int = DEFAULT_SCALE_BITS
    modulus: int = DEFAULT_MODULUS

    def __post_init__(self) -> None:
        if self.modulus & (self.modulus - 1):
            raise ValueError("modulus must be a power of two")
        if (1 << self.scale_bits) >= self.modulus:
            raise ValueError("2**scale_bits must be smaller than modulus")

    @property
    def scale(self) -> int:
        return 1 << self.scale_bits

    def encode(self, value: float) -> int:
        word = int(np.rint(value * self.scale))
        half = self.modulus // 2
        if word >= half or word < -half:
            raise CodecOverflowError(
                f"|{value}| * 2**{self.scale_bits} exceeds modulus/2"
            )
        return word % self.modulus

    def decode(self, word: int) -> float:
        word %= self.modulus
        if 2 * word >= self.modulus:
            word -= self.modulus
        return word / self.scale

    def encode_vector(self, values: np.ndarray) -> np.ndarray:
        """Encode a float vector to uint64 ring words."""
        words = np.rint(np.asarray(values, dtype=np.float64) * self.scale)
        half = self.modulus // 2
        if np.any(words >= half) or np.any(words < -half):
            raise CodecOverflowError("vector entry exceeds modulus/2 after scaling")
        return (words.astype(np.int64) % self.modulus).astype(np.uint64)

    def decode_vector(self, words: np.ndarray) -> np.ndarray:
        signed = (np.asarray(words, dtype=np.uint64) % self.modulus).astype(np.int64)
        signed = np.where(2 * signed >= self.modulus, signed - self.modulus, signed)
        return signed.astype(np.float64) / self.scale


# ---------------------------------------------------------------------------
# Zero-sum keystreams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keystream:
    """One party's pad vector for a single round."""

    party_id: int
    round_id: int
    pads: np.ndarray  # uint64 words in [0, modulus)
    modulus: int

    @property
    def dim(self) -> int:
        return int(self.pads.shape[0])


class KeystreamDealer:
    """Trusted in-process dealer of zero-sum pad vectors.

    Pads for all but one party are drawn from a counter-mode PRF keyed by
    the dealer seed, the party's registered seed material, and the round;
    the remaining party receives the modular negation of their sum, so
    the coordinate-wise total is always 0 mod ``modulus``.  Nothing is
    stored per coordinate and re-dealing for a changed credible set is
    just another call.
    """

    def __init__(self, seed: bytes, modulus: int = DEFAULT_MODULUS):
        if modulus & (modulus - 1):
            raise ValueError("modulus must be a power of two")
        self._seed = bytes(seed)
        self.modulus = modulus
        self._party_seeds: Dict[int, bytes] = {}

    def register(self, party_id: int, seed_material: bytes) -> None:
        self._party_seeds[int(party_id)] = bytes(seed_material)

    def _prf_words(self, party_id: int, round_id: int, dim: int) -> np.ndarray:
        material = self._party_seeds.get(party_id, b"")
        digest = hashlib.blake2b(
            struct.pack("<qq", round_id, party_id) + material,
            key=self._seed,
            digest_size=16,
        ).digest()
        key = np.frombuffer(digest, dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.integers(0, self.modulus, size=dim, dtype=np.uint64)

    def deal_keystreams(
        self, credible_set: Iterable[int], round_id: int, dim: int
    ) -> Dict[int, Keystream]:
        """Deal one zero-sum pad vector per party of the credible set."""
        parties = sorted(set(int(p) for p in credible_set))
        if len(parties) < 2:
            raise ValueError("credible set must contain at least 2 parties")
        mod = self.modulus
        total = np.zeros(dim, dtype=np.uint64)
        streams: Dict[int, Keystream] = {}
        for party in parties[:-1]:
            pads = self._prf_words(party, round_id, dim)
            total = (total + pads) % mod
            streams[party] = Keystream(party, round_id, pads, mod)
        last = parties[-1]
        closing = (mod - total) % mod
        streams[last] = Keystream(last, round_id, closing, mod)
        return streams


# ---------------------------------------------------------------------------
# Additively homomorphic layer (modular one-time pad)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CipherVector:
    """Pad-encrypted word vector as traded between parties."""

    ciphertexts: np.ndarray  # uint64 words in [0, modulus)
    round_id: int
    sender_id: int

    @property
    def dim(self) -> int:
        return int(self.ciphertexts.shape[0])

    def to_bytes(self) -> bytes:
        """Little-endian 8-byte words: round, sender, dim, then the words."""
        header = np.array(
            [self.round_id, self.sender_id, self.dim], dtype="<u8"
        ).tobytes()
        return header + self.ciphertexts.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CipherVector":
        if len(raw) < 24 or len(raw) % 8:
            raise MalformedPayloadError("cipher vector byte length invalid")
        round_id, sender_id, dim = np.frombuffer(raw[:24], dtype="<u8")
        words = np.frombuffer(raw[24:], dtype="<u8").copy()
        if words.shape[0] != int(dim):
            raise MalformedPayloadError(
                f"declared dim {int(dim)} != {words.shape[0]} payload words"
            )
        return cls(words, int(round_id), int(sender_id))


def enc(plain: int, pad: int, codec: FixedPointCodec) -> int:
    """Encrypt one ring word by modular addition of the pad."""
    return (int(plain) + int(pad)) % codec.modulus


def dec(cipher: int, pad: int, codec: FixedPointCodec) -> int:
    """Inverse of :func:`enc`."""
    return (int(cipher) - int(pad)) % codec.modulus


def encrypt_vector(
    words: np.ndarray, keystream: Keystream, sender_id: Optional[int] = None
) -> CipherVector:
    """Pad-encrypt an encoded word vector under one party's keystream."""
    mod = keystream.modulus
    words = np.asarray(words, dtype=np.uint64)
    if words.shape[0] != keystream.dim:
        raise DimensionMismatchError(
            f"vector dim {words.shape[0]} != keystream dim {keystream.dim}"
        )
    cipher = (words + keystream.pads) % mod
    return CipherVector(
        cipher, keystream.round_id,
        keystream.party_id if sender_id is None else sender_id,
    )


def decrypt_vector(cipher: CipherVector, keystream: Keystream) -> np.ndarray:
    """Recover a single sender's words given that sender's keystream."""
    if cipher.round_id != keystream.round_id:
        raise RoundMismatchError(
            f"cipher round {cipher.round_id} != keystream round {keystream.round_id}"
        )
    if cipher.dim != keystream.dim:
        raise DimensionMismatchError("cipher and keystream dims differ")
    mod = keystream.modulus
    return (cipher.ciphertexts + (mod - keystream.pads)) % mod


def aggr_dec(
    ciphers: Sequence[CipherVector], own: Keystream, codec: FixedPointCodec
) -> np.ndarray:
    """Decrypt the sum of all peers' ciphertexts using one's own pad.

    Because the pads of the whole credible set sum to zero, adding the
    receiver's own pad to the ciphertext total cancels every peer pad and
    leaves exactly the modular sum of the peer plaintexts.
    """
    if not ciphers:
        raise ValueError("need at least one peer ciphertext")
    mod = codec.modulus
    total = np.zeros(own.dim, dtype=np.uint64)
    for cv in ciphers:
        if cv.round_id != own.round_id:
            raise RoundMismatchError(
                f"cipher from {cv.sender_id} is for round {cv.round_id}, "
                f"expected {own.round_id}"
            )
        if cv.dim != own.dim:
            raise DimensionMismatchError(
                f"cipher from {cv.sender_id} has dim {cv.dim}, expected {own.dim}"
            )
        total = (total + cv.ciphertexts) % mod
    return (total + own.pads) % mod


# ---------------------------------------------------------------------------
# Keys, signatures, onion layers
# ---------------------------------------------------------------------------


@dataclass
class KeyBundle:
    """A party's long-lived key material.

    Public halves are committed in the party's init transaction; private
    halves never leave the party.  ``pad_seed`` is the party's registered
    contribution to keystream derivation at the dealer.
    """

    signing_key: bytes  # Ed25519 private seed, 32 bytes
    verify_key: bytes  # Ed25519 public, 32 bytes
    unwrap_key: bytes  # X25519 private, 32 bytes
    wrap_key: bytes  # X25519 public, 32 bytes
    pad_seed: bytes = field(default=b"", repr=False)

    @classmethod
    def generate(cls, rng: Optional[np.random.Generator] = None) -> "KeyBundle":
        def rand(n: int) -> bytes:
            return rng.bytes(n) if rng is not None else secrets.token_bytes(n)

        sk = rand(32)
        uk = rand(32)
        verify = (
            Ed25519PrivateKey.from_private_bytes(sk)
            .public_key()
            .public_bytes_raw()
        )
        wrap = (
            X25519PrivateKey.from_private_bytes(uk)
            .public_key()
            .public_bytes_raw()
        )
        return cls(sk, verify, uk, wrap, pad_seed=rand(16))


def sign(message: bytes, signing_key: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(signing_key).sign(message)


def verify(message: bytes, signature: bytes, verify_key: bytes) -> bool:
    """True iff the signature is valid; never raises on a bad one."""
    try:
        Ed25519PublicKey.from_public_bytes(verify_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def _derive_wrap_kek(shared: bytes, ephemeral_pk: bytes, recipient_pk: bytes) -> bytes:
    return HKDF(
        algorithm=SHA256(),
        length=32,
        salt=None,
        info=_WRAP_INFO + ephemeral_pk + recipient_pk,
    ).derive(shared)


def onion_wrap(
    plaintext: bytes,
    recipient_pk: bytes,
    rng: Optional[np.random.Generator] = None,
) -> bytes:
    """Seal a serialized cipher vector for one recipient.

    Layer 2: AES-GCM under a fresh symmetric key.  Layer 3: that key
    wrapped for the recipient's X25519 public key via an ephemeral
    exchange.  Layout: ``[u32 wrapped_len][wrapped_key][sym_ciphertext]``.
    """

    def rand(n: int) -> bytes:
        return rng.bytes(n) if rng is not None else secrets.token_bytes(n)

    fsk = rand(32)
    nonce = rand(_GCM_NONCE_BYTES)
    sym_ct = nonce + AESGCM(fsk).encrypt(nonce, plaintext, None)

    ephemeral = X25519PrivateKey.from_private_bytes(rand(32))
    ephemeral_pk = ephemeral.public_key().public_bytes_raw()
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(recipient_pk))
    kek = _derive_wrap_kek(shared, ephemeral_pk, recipient_pk)
    wrap_nonce = rand(_GCM_NONCE_BYTES)
    wrapped = (
        ephemeral_pk + wrap_nonce + AESGCM(kek).encrypt(wrap_nonce, fsk, None)
    )
    return struct.pack("<I", len(wrapped)) + wrapped + sym_ct


def onion_unwrap(payload: bytes, recipient_sk: bytes) -> bytes:
    """Open an onion payload; returns the still-pad-encrypted vector bytes."""
    if len(payload) < 4:
        raise MalformedPayloadError("payload shorter than its length prefix")
    (wrapped_len,) = struct.unpack("<I", payload[:4])
    wrapped = payload[4 : 4 + wrapped_len]
    sym_ct = payload[4 + wrapped_len :]
    if len(wrapped) != wrapped_len or len(wrapped) < 32 + _GCM_NONCE_BYTES + 16:
        raise MalformedPayloadError("wrapped key block truncated")
    if len(sym_ct) < _GCM_NONCE_BYTES + 16:
        raise MalformedPayloadError("symmetric ciphertext truncated")

    ephemeral_pk = wrapped[:32]
    wrap_nonce = wrapped[32 : 32 + _GCM_NONCE_BYTES]
    key_ct = wrapped[32 + _GCM_NONCE_BYTES :]
    sk = X25519PrivateKey.from_private_bytes(recipient_sk)
    recipient_pk = sk.public_key().public_bytes_raw()
    shared = sk.exchange(X25519PublicKey.from_public_bytes(ephemeral_pk))
    kek = _derive_wrap_kek(shared, ephemeral_pk, recipient_pk)
    try:
        fsk = AESGCM(kek).decrypt(wrap_nonce, key_ct, None)
    except InvalidTag as exc:
        raise KeyUnwrapError("cannot unwrap symmetric key") from exc

    nonce, body = sym_ct[:_GCM_NONCE_BYTES], sym_ct[_GCM_NONCE_BYTES:]
    try:
        return AESGCM(fsk).decrypt(nonce, body, None)
    except InvalidTag as exc:
        raise PayloadAuthenticationError("payload failed authentication") from exc


def sha256(data: bytes) -> bytes:
    """Repository-wide commitment hash (SHA-256, 32 bytes)."""
    return hashlib.sha256(data).digest()

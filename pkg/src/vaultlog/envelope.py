"""Public-key envelope for log records (ElGamal-style KEM + hash-stream DEM).

Devices get a :class:`PublicKey` only. For every record a fresh exponent r
and 16-byte nonce are drawn::

    c1         = g^r mod p
    shared     = y^r mod p
    record_key = SHA-256("vaultlog-kem" || I2OSP(shared, |p|) || nonce)
    block_i    = SHA-256(record_key || BE64(i))        # keystream
    ciphertext = plaintext XOR keystream
    tag        = HMAC-SHA256(record_key, "tag" || ciphertext)

Decryption recomputes ``shared = c1^x`` and checks the tag before any
plaintext is produced. The private exponent x travels as fixed-width
big-endian bytes (``PrivateKey.to_secret_bytes``); that byte string is what
gets fragmented across key holders.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from functools import lru_cache

from . import canonical
from .errors import CryptoError
from .field import is_probable_prime

KEM_LABEL = b"vaultlog-kem"
TAG_LABEL = b"tag"
RECORD_MAGIC = b"VLG1"
RECORD_VERSION = 1
NONCE_SIZE = 16
TAG_SIZE = 32


@dataclass(frozen=True)
class GroupParams:
    p: int
    g: int
    name: str = ""

    @property
    def q(self) -> int:
        return (self.p - 1) // 2

    @property
    def byte_length(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def validate(self) -> None:
        if not _is_safe_prime_group(self.p, self.g):
            raise CryptoError(f"invalid group parameters {self.name or self.p}")


@lru_cache(maxsize=16)
def _is_safe_prime_group(p: int, g: int) -> bool:
    if p < 7 or not is_probable_prime(p) or not is_probable_prime((p - 1) // 2):
        return False
    # excludes 1 and the order-2 element, so g has order q or 2q
    return 1 < g < p - 1


def _hex_int(text: str) -> int:
    return int("".join(text.split()), 16)


# Toy group for hand-checkable vectors only.
TOY_GROUP = GroupParams(23, 5, "toy-23")

# Smallest safe prime above 2^255; g = 2 generates the order-q subgroup.
TEST_GROUP = GroupParams(2**255 + 196479, 2, "test-256")

# RFC 2409 Oakley group 1 (768-bit).
OAKLEY_768 = GroupParams(
    _hex_int(
        """
        FFFFFFFF FFFFFFFF C90FDAA2 2168C234 C4C6628B 80DC1CD1
        29024E08 8A67CC74 020BBEA6 3B139B22 514A0879 8E3404DD
        EF9519B3 CD3A431B 302B0A6D F25F1437 4FE1356D 6D51C245
        E485B576 625E7EC6 F44C42E9 A63A3620 FFFFFFFF FFFFFFFF
        """
    ),
    2,
    "oakley-768",
)

# RFC 3526 group 14 (2048-bit MODP).
MODP_2048 = GroupParams(
    _hex_int(
        """
        FFFFFFFF FFFFFFFF C90FDAA2 2168C234 C4C6628B 80DC1CD1
        29024E08 8A67CC74 020BBEA6 3B139B22 514A0879 8E3404DD
        EF9519B3 CD3A431B 302B0A6D F25F1437 4FE1356D 6D51C245
        E485B576 625E7EC6 F44C42E9 A637ED6B 0BFF5CB6 F406B7ED
        EE386BFB 5A899FA5 AE9F2411 7C4B1FE6 49286651 ECE45B3D
        C2007CB8 A163BF05 98DA4836 1C55D39A 69163FA8 FD24CF5F
        83655D23 DCA3AD96 1C62F356 208552BB 9ED52907 7096966D
        670C354E 4ABC9804 F1746C08 CA18217C 32905E46 2E36CE3B
        E39E772C 180E8603 9B2783A2 EC07A28F B5C55DF0 6F4C52C9
        DE2BCBF6 95581718 3995497C EA956AE5 15D22618 98FA0510
        15728E5A 8AACAA68 FFFFFFFF FFFFFFFF
        """
    ),
    2,
    "modp-2048",
)

GROUPS = {grp.name: grp for grp in (TOY_GROUP, TEST_GROUP, OAKLEY_768, MODP_2048)}
PRODUCTION_GROUP = MODP_2048


@dataclass(frozen=True)
class PublicKey:
    p: int
    g: int
    y: int

    @property
    def group(self) -> GroupParams:
        return GroupParams(self.p, self.g)

    def to_dict(self) -> dict:
        return {"g": str(self.g), "p": str(self.p), "y": str(self.y)}

    @classmethod
    def from_dict(cls, d: dict) -> PublicKey:
        try:
            pk = cls(int(d["p"]), int(d["g"]), int(d["y"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CryptoError(f"malformed public key: {exc}") from exc
        if not 1 < pk.y < pk.p:
            raise CryptoError("public value out of range")
        return pk

    @property
    def key_id(self) -> bytes:
        """SHA-256 over the canonical public encoding."""
        return hashlib.sha256(canonical.dump_bytes(self.to_dict())).digest()


@dataclass(frozen=True)
class PrivateKey:
    public: PublicKey
    x: int = 0

    def __repr__(self) -> str:
        return f"PrivateKey(key_id={self.public.key_id.hex()[:16]}..., x=<redacted>)"

    def to_secret_bytes(self) -> bytes:
        return self.x.to_bytes((self.public.p.bit_length() + 7) // 8, "big")

    @classmethod
    def from_secret_bytes(cls, public: PublicKey, data: bytes) -> PrivateKey:
        """Rebuild from fragment-reconstructed bytes, checking it matches ``public``."""
        x = int.from_bytes(data, "big")
        if not 1 <= x < public.p - 1 or pow(public.g, x, public.p) != public.y:
            raise CryptoError("reconstructed key does not match the public key")
        return cls(public, x)


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey

    @property
    def key_id(self) -> bytes:
        return self.public.key_id


def keygen(
    group: GroupParams = PRODUCTION_GROUP,
    rng: random.Random | None = None,
    *,
    x: int | None = None,
) -> KeyPair:
    """Draw x uniformly from [1, p-2]; ``x`` is a test hook."""
    group.validate()
    rng = rng if rng is not None else random.SystemRandom()
    if x is None:
        x = rng.randrange(1, group.p - 1)
    elif not 1 <= x < group.p - 1:
        raise CryptoError("private exponent out of range")
    public = PublicKey(group.p, group.g, pow(group.g, x, group.p))
    return KeyPair(public, PrivateKey(public, x))


@dataclass(frozen=True)
class EncryptedRecord:
    key_id: bytes
    c1: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        c1 = self.c1.to_bytes(max(1, (self.c1.bit_length() + 7) // 8), "big")
        return b"".join(
            (
                RECORD_MAGIC,
                bytes([RECORD_VERSION]),
                self.key_id,
                self.nonce,
                struct.pack(">I", len(c1)),
                c1,
                struct.pack(">Q", len(self.ciphertext)),
                self.ciphertext,
                self.tag,
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> EncryptedRecord:
        mv = memoryview(data)
        fixed = 4 + 1 + 32 + NONCE_SIZE
        if len(data) < fixed + 4 or bytes(mv[:4]) != RECORD_MAGIC:
            raise CryptoError("not an encrypted record")
        if mv[4] != RECORD_VERSION:
            raise CryptoError(f"unsupported record version {mv[4]}")
        key_id = bytes(mv[5:37])
        nonce = bytes(mv[37:fixed])
        (c1_len,) = struct.unpack_from(">I", data, fixed)
        pos = fixed + 4
        c1_raw = bytes(mv[pos : pos + c1_len])
        if len(c1_raw) != c1_len or not c1_raw or (c1_len > 1 and c1_raw[0] == 0):
            raise CryptoError("non-canonical encapsulation")
        c1 = int.from_bytes(c1_raw, "big")
        pos += c1_len
        if len(data) < pos + 8:
            raise CryptoError("truncated record")
        (ct_len,) = struct.unpack_from(">Q", data, pos)
        pos += 8
        if len(data) != pos + ct_len + TAG_SIZE:
            raise CryptoError("record length mismatch")
        ciphertext = bytes(mv[pos : pos + ct_len])
        tag = bytes(mv[pos + ct_len :])
        return cls(key_id, c1, nonce, ciphertext, tag)


def derive_record_key(shared: int, nonce: bytes, p: int) -> bytes:
    width = (p.bit_length() + 7) // 8
    return hashlib.sha256(KEM_LABEL + shared.to_bytes(width, "big") + nonce).digest()


def keystream(record_key: bytes, length: int) -> bytes:
    base = hashlib.sha256(record_key)
    blocks = []
    for i in range((length + 31) // 32):
        h = base.copy()
        h.update(i.to_bytes(8, "big"))
        blocks.append(h.digest())
    return b"".join(blocks)[:length]


def _xor(data: bytes, stream: bytes) -> bytes:
    n = len(data)
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")).to_bytes(n, "big")


def _tag(record_key: bytes, ciphertext: bytes) -> bytes:
    return hmac.new(record_key, TAG_LABEL + ciphertext, hashlib.sha256).digest()


def encapsulate(public_key: PublicKey, rng: random.Random) -> tuple[int, bytes, bytes]:
    """Return (c1, nonce, record_key) for a fresh record."""
    p = public_key.p
    r = rng.randrange(1, p - 1)
    nonce = rng.randbytes(NONCE_SIZE)
    c1 = pow(public_key.g, r, p)
    shared = pow(public_key.y, r, p)
    return c1, nonce, derive_record_key(shared, nonce, p)


def encrypt_record(
    public_key: PublicKey, plaintext: bytes, rng: random.Random | None = None
) -> EncryptedRecord:
    if not isinstance(public_key, PublicKey):
        raise TypeError("encrypt_record takes a PublicKey only")
    if not plaintext:
        raise CryptoError("refusing to encrypt an empty record")
    rng = rng if rng is not None else random.SystemRandom()
    c1, nonce, record_key = encapsulate(public_key, rng)
    ciphertext = _xor(plaintext, keystream(record_key, len(plaintext)))
    return EncryptedRecord(public_key.key_id, c1, nonce, ciphertext, _tag(record_key, ciphertext))


def decrypt_record(private_key: PrivateKey, record: EncryptedRecord) -> bytes:
    public = private_key.public
    if record.key_id != public.key_id:
        raise CryptoError("record was encrypted for a different key")
    if not 1 <= record.c1 < public.p:
        raise CryptoError("encapsulation out of range")
    if len(record.nonce) != NONCE_SIZE or len(record.tag) != TAG_SIZE:
        raise CryptoError("malformed record")
    shared = pow(record.c1, private_key.x, public.p)
    record_key = derive_record_key(shared, record.nonce, public.p)
    if not hmac.compare_digest(_tag(record_key, record.ciphertext), record.tag):
        raise CryptoError("record tag verification failed")
    return _xor(record.ciphertext, keystream(record_key, len(record.ciphertext)))

"""Threshold secret sharing over byte strings.

Shamir (polynomial) and Blakley (hyperplane) (k, n) schemes plus an
all-parts XOR splitter, behind :func:`split` / :func:`reconstruct`.

Secrets are cut into fixed-width big-endian chunks, each strictly smaller
than the field prime, and every chunk gets its own random polynomial or
point. Each split draws a random 16-byte share-set id that every share
carries, so pieces of different splits cannot be combined by accident.

Randomness comes from any ``random.Random`` compatible object; the default
is ``random.SystemRandom``. Pass a seeded ``random.Random`` only in tests.
"""

from __future__ import annotations

import enum
import itertools
import math
import random
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from . import canonical
from .errors import (
    CorruptShareError,
    FieldError,
    InconsistentSharesError,
    InsufficientSharesError,
    SharingError,
    ShareMismatchError,
)
from .field import (
    PrimeField,
    eval_mod,
    invert_matrix_mod,
    is_singular_mod,
    lagrange_weights,
    lagrange_weights_at_zero,
)

MAX_CHUNK_WIDTH = 64
BLAKLEY_MAX_ATTEMPTS = 1000
BLAKLEY_MAX_SUBSETS = 100_000
SHARE_FORMAT = "vaultlog-share/1"


class AllPartsRequiredError(InsufficientSharesError):
    pass


class Scheme(str, enum.Enum):
    SHAMIR = "shamir"
    BLAKLEY = "blakley"
    AND = "and"


def _default_rng(rng: random.Random | None) -> random.Random:
    return rng if rng is not None else random.SystemRandom()


@dataclass(frozen=True)
class ThresholdParams:
    k: int
    n: int

    def __post_init__(self) -> None:
        if not (isinstance(self.k, int) and isinstance(self.n, int)):
            raise SharingError("k and n must be integers")
        if not 1 <= self.k <= self.n:
            raise SharingError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")

    @classmethod
    def two_k_minus_one(cls, k: int) -> ThresholdParams:
        """Majority scheme: n = 2k - 1 pieces, any k of them reconstruct."""
        return cls(k, 2 * k - 1)

    @classmethod
    def majority_of(cls, n: int) -> ThresholdParams:
        return cls(math.ceil((n + 1) / 2), n)

    @property
    def insufficient(self) -> int:
        """Largest share count that reveals nothing."""
        return self.k - 1


def chunk_width(p: int) -> int:
    """Bytes per chunk such that every chunk value is < p."""
    width = min(MAX_CHUNK_WIDTH, (p.bit_length() - 1) // 8)
    if width < 1:
        raise FieldError(f"GF({p}) is too small to hold a byte; use integer secrets")
    return width


@dataclass(frozen=True)
class SecretValue:
    """A secret as chunk integers plus what is needed to rebuild the bytes.

    ``length`` is ``None`` for a bare integer secret (a single chunk).
    """

    chunks: tuple[int, ...]
    length: int | None = None
    width: int = 0

    @classmethod
    def from_bytes(cls, data: bytes, width: int) -> SecretValue:
        data = bytes(data)
        chunks = tuple(
            int.from_bytes(data[i : i + width], "big") for i in range(0, len(data), width)
        )
        return cls(chunks, len(data), width)

    @classmethod
    def from_int(cls, value: int) -> SecretValue:
        if value < 0:
            raise SharingError("integer secrets must be nonnegative")
        return cls((value,), None, 0)

    def to_bytes(self) -> bytes:
        if self.length is None:
            raise SharingError("integer secret has no byte form; use as_int()")
        out = bytearray()
        for i, c in enumerate(self.chunks):
            size = min(self.width, self.length - i * self.width)
            out += c.to_bytes(size, "big")
        return bytes(out)

    def as_int(self) -> int:
        if self.length is not None or len(self.chunks) != 1:
            raise SharingError("not an integer secret")
        return self.chunks[0]


def _as_secret(secret: bytes | bytearray | int | SecretValue, p: int) -> SecretValue:
    if isinstance(secret, SecretValue):
        sv = secret
    elif isinstance(secret, int):
        sv = SecretValue.from_int(secret)
    else:
        sv = SecretValue.from_bytes(secret, chunk_width(p))
    if any(c >= p for c in sv.chunks):
        raise FieldError(f"secret chunk does not fit in GF({p}); field too small")
    return sv


@dataclass(frozen=True)
class Share:
    """One participant's piece of a split secret.

    ``payload`` holds one entry per chunk: an int for Shamir (the polynomial
    value at ``participant_index``), a tuple ``(a_1, ..., a_k, c)`` for
    Blakley (hyperplane ``a . x = c``), and for AND parts a single int that
    encodes the whole pad.
    """

    scheme: Scheme
    share_set_id: str
    field_p: int
    k: int
    n: int
    participant_index: int
    payload: tuple
    secret_length: int | None
    chunk_width: int
    policy_path: str = ""

    def __post_init__(self) -> None:
        if not 1 <= self.participant_index <= self.n:
            raise SharingError("participant index out of range")

    @property
    def params(self) -> ThresholdParams:
        return ThresholdParams(self.k, self.n)

    @property
    def share_id(self) -> str:
        return f"{self.share_set_id}/{self.participant_index}"

    def _split_key(self) -> tuple:
        return (
            self.scheme,
            self.share_set_id,
            self.field_p,
            self.k,
            self.n,
            self.secret_length,
            self.chunk_width,
            self.policy_path,
            len(self.payload),
        )

    def to_dict(self) -> dict:
        if self.scheme is Scheme.BLAKLEY:
            payload = [[str(v) for v in chunk] for chunk in self.payload]
        else:
            payload = [str(v) for v in self.payload]
        return canonical.with_digest(
            {
                "chunk_width": self.chunk_width,
                "field_p": str(self.field_p),
                "format": SHARE_FORMAT,
                "k": self.k,
                "n": self.n,
                "participant_index": self.participant_index,
                "payload": payload,
                "policy_path": self.policy_path,
                "scheme": self.scheme.value,
                "secret_length": self.secret_length,
                "share_set_id": self.share_set_id,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> Share:
        if not canonical.check_digest(d):
            raise CorruptShareError("share integrity digest mismatch")
        if d.get("format") != SHARE_FORMAT:
            raise CorruptShareError(f"unknown share format {d.get('format')!r}")
        try:
            scheme = Scheme(d["scheme"])
            if scheme is Scheme.BLAKLEY:
                payload = tuple(tuple(int(v) for v in chunk) for chunk in d["payload"])
            else:
                payload = tuple(int(v) for v in d["payload"])
            return cls(
                scheme=scheme,
                share_set_id=d["share_set_id"],
                field_p=int(d["field_p"]),
                k=d["k"],
                n=d["n"],
                participant_index=d["participant_index"],
                payload=payload,
                secret_length=d["secret_length"],
                chunk_width=d["chunk_width"],
                policy_path=d["policy_path"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptShareError(f"malformed share: {exc}") from exc

    def dumps(self) -> str:
        return canonical.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str | bytes) -> Share:
        try:
            d = canonical.loads(text)
        except ValueError as exc:
            raise CorruptShareError(f"share is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise CorruptShareError("share document must be an object")
        return cls.from_dict(d)


def _check_same_split(shares: Sequence[Share], scheme: Scheme) -> Share:
    if not shares:
        raise InsufficientSharesError("no shares supplied")
    first = shares[0]
    if first.scheme is not scheme:
        raise ShareMismatchError(f"expected {scheme.value} shares, got {first.scheme.value}")
    key = first._split_key()
    for s in shares[1:]:
        if s._split_key() != key:
            raise ShareMismatchError("shares belong to different splits")
    indices = [s.participant_index for s in shares]
    if len(set(indices)) != len(indices):
        raise ShareMismatchError("duplicate participant indices")
    return first


def _secret_from(first: Share, chunks: Iterable[int]) -> SecretValue:
    return SecretValue(tuple(chunks), first.secret_length, first.chunk_width)


def _new_set_id(rng: random.Random) -> str:
    return rng.randbytes(16).hex()


# -- Shamir ------------------------------------------------------------------


def shamir_split(
    secret: bytes | int | SecretValue,
    params: ThresholdParams,
    field: PrimeField,
    rng: random.Random | None = None,
    *,
    policy_path: str = "",
    coefficients: Sequence[Sequence[int]] | None = None,
) -> list[Share]:
    """Split ``secret`` into ``params.n`` Shamir shares.

    ``coefficients`` is a test hook: per chunk, the values a_1..a_{k-1}.
    """
    rng = _default_rng(rng)
    p = field.p
    sv = _as_secret(secret, p)
    k, n = params.k, params.n
    if n >= p:
        raise FieldError(f"GF({p}) has too few nonzero points for n={n}")
    if coefficients is not None and len(coefficients) != len(sv.chunks):
        raise SharingError("coefficient hook must supply one row per chunk")
    set_id = _new_set_id(rng)
    columns = []
    for c, chunk in enumerate(sv.chunks):
        if coefficients is not None:
            rest = [v % p for v in coefficients[c]]
            if len(rest) != k - 1:
                raise SharingError("coefficient hook row must have k-1 entries")
        else:
            rest = [rng.randrange(p) for _ in range(k - 1)]
        poly = [chunk, *rest]
        columns.append([eval_mod(poly, i, p) for i in range(1, n + 1)])
    return [
        Share(
            scheme=Scheme.SHAMIR,
            share_set_id=set_id,
            field_p=p,
            k=k,
            n=n,
            participant_index=i + 1,
            payload=tuple(col[i] for col in columns),
            secret_length=sv.length,
            chunk_width=sv.width,
            policy_path=policy_path,
        )
        for i in range(n)
    ]


def shamir_reconstruct(shares: Sequence[Share], *, check_extra: bool = True) -> SecretValue:
    """Interpolate every chunk at zero from the first k shares.

    Shares beyond k are checked against the recovered polynomials when
    ``check_extra`` is set; a disagreeing share raises
    :class:`InconsistentSharesError` instead of silently being ignored.
    """
    first = _check_same_split(shares, Scheme.SHAMIR)
    if len(shares) < first.k:
        raise InsufficientSharesError(f"need {first.k} shares, got {len(shares)}")
    p = first.field_p
    base = shares[: first.k]
    xs = [s.participant_index for s in base]
    weights = lagrange_weights_at_zero(xs, p)
    chunks = [
        sum(w * y for w, y in zip(weights, ys)) % p
        for ys in zip(*(s.payload for s in base))
    ]
    if check_extra:
        for extra in shares[first.k :]:
            we = lagrange_weights(xs, extra.participant_index, p)
            for ys, ye in zip(zip(*(s.payload for s in base)), extra.payload):
                if sum(w * y for w, y in zip(we, ys)) % p != ye:
                    raise InconsistentSharesError(
                        f"share {extra.share_id} does not lie on the recovered polynomial"
                    )
    return _secret_from(first, chunks)


# -- Blakley -----------------------------------------------------------------


def _all_subsets_nonsingular(rows: Sequence[Sequence[int]], k: int, p: int) -> bool:
    return not any(
        is_singular_mod(list(subset), p) for subset in itertools.combinations(rows, k)
    )


def blakley_split(
    secret: bytes | int | SecretValue,
    params: ThresholdParams,
    field: PrimeField,
    rng: random.Random | None = None,
    *,
    policy_path: str = "",
    candidate_rows: Iterable[Sequence[Sequence[int]]] | None = None,
    points: Sequence[Sequence[int]] | None = None,
) -> list[Share]:
    """Split ``secret`` into ``params.n`` hyperplane shares.

    One coefficient matrix is drawn per split and resampled until every
    k-row subset is nonsingular; each chunk gets a fresh random point whose
    first coordinate is the chunk. Test hooks: ``candidate_rows`` yields
    coefficient matrices to try in order, ``points`` fixes the per-chunk
    points.
    """
    rng = _default_rng(rng)
    p = field.p
    sv = _as_secret(secret, p)
    k, n = params.k, params.n
    if n >= p:
        raise FieldError(f"GF({p}) is too small for n={n} hyperplanes")
    if math.comb(n, k) > BLAKLEY_MAX_SUBSETS:
        raise SharingError(
            f"C({n},{k}) subsets is too many to check for nonsingularity"
        )

    def random_rows() -> Iterator[list[list[int]]]:
        while True:
            yield [[rng.randrange(p) for _ in range(k)] for _ in range(n)]

    candidates = iter(candidate_rows) if candidate_rows is not None else random_rows()
    rows = None
    for _, candidate in zip(range(BLAKLEY_MAX_ATTEMPTS), candidates):
        candidate = [[v % p for v in row] for row in candidate]
        if len(candidate) != n or any(len(r) != k for r in candidate):
            raise SharingError("candidate coefficient matrix has the wrong shape")
        if _all_subsets_nonsingular(candidate, k, p):
            rows = candidate
            break
    if rows is None:
        raise SharingError("could not draw hyperplanes with every k-subset nonsingular")

    if points is not None and len(points) != len(sv.chunks):
        raise SharingError("point hook must supply one point per chunk")
    set_id = _new_set_id(rng)
    per_share: list[list[tuple[int, ...]]] = [[] for _ in range(n)]
    for c, chunk in enumerate(sv.chunks):
        if points is not None:
            point = [v % p for v in points[c]]
            if len(point) != k or point[0] != chunk:
                raise SharingError("hooked point must be k-dimensional with the chunk first")
        else:
            point = [chunk, *(rng.randrange(p) for _ in range(k - 1))]
        for i, row in enumerate(rows):
            const = sum(a * x for a, x in zip(row, point)) % p
            per_share[i].append((*row, const))
    return [
        Share(
            scheme=Scheme.BLAKLEY,
            share_set_id=set_id,
            field_p=p,
            k=k,
            n=n,
            participant_index=i + 1,
            payload=tuple(per_share[i]),
            secret_length=sv.length,
            chunk_width=sv.width,
            policy_path=policy_path,
        )
        for i in range(n)
    ]


def blakley_reconstruct(shares: Sequence[Share], *, check_extra: bool = True) -> SecretValue:
    """Intersect the first k hyperplanes of every chunk; return first coordinates."""
    first = _check_same_split(shares, Scheme.BLAKLEY)
    k = first.k
    if len(shares) < k:
        raise InsufficientSharesError(f"need {k} shares, got {len(shares)}")
    p = first.field_p
    base = shares[:k]
    chunks = []
    cached_rows = None
    inverse: list[list[int]] = []
    for c in range(len(first.payload)):
        eqs = [s.payload[c] for s in base]
        if any(len(e) != k + 1 for e in eqs):
            raise CorruptShareError("hyperplane has the wrong dimension")
        rows = [e[:k] for e in eqs]
        if rows != cached_rows:
            inverse = invert_matrix_mod(rows, p)
            cached_rows = rows
        consts = [e[k] for e in eqs]
        point = [sum(a * b for a, b in zip(inv_row, consts)) % p for inv_row in inverse]
        if check_extra:
            for extra in shares[k:]:
                e = extra.payload[c]
                if sum(a * x for a, x in zip(e[:k], point)) % p != e[k] % p:
                    raise InconsistentSharesError(
                        f"share {extra.share_id} does not contain the recovered point"
                    )
        chunks.append(point[0])
    return _secret_from(first, chunks)


# -- AND (XOR) ---------------------------------------------------------------


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def and_split(
    secret: bytes,
    parts: int,
    rng: random.Random | None = None,
    *,
    policy_path: str = "",
    pads: Sequence[bytes] | None = None,
) -> list[Share]:
    """Split into ``parts`` pieces that XOR back to ``secret``; all are needed.

    ``pads`` is a test hook fixing the first ``parts - 1`` pieces.
    """
    if not isinstance(parts, int) or parts < 1:
        raise SharingError("AND split needs at least one part")
    rng = _default_rng(rng)
    secret = bytes(secret)
    size = len(secret)
    if pads is None:
        pads = [rng.randbytes(size) for _ in range(parts - 1)]
    elif len(pads) != parts - 1 or any(len(x) != size for x in pads):
        raise SharingError("pad hook must supply parts-1 pads of secret length")
    last = secret
    for pad in pads:
        last = _xor(last, pad)
    pieces = [*pads, last]
    set_id = _new_set_id(rng)
    return [
        Share(
            scheme=Scheme.AND,
            share_set_id=set_id,
            field_p=0,
            k=parts,
            n=parts,
            participant_index=i + 1,
            payload=(int.from_bytes(piece, "big"),),
            secret_length=size,
            chunk_width=size,
            policy_path=policy_path,
        )
        for i, piece in enumerate(pieces)
    ]


def and_part_bytes(share: Share) -> bytes:
    return share.payload[0].to_bytes(share.secret_length, "big")


def and_reconstruct(parts: Sequence[Share]) -> SecretValue:
    first = _check_same_split(parts, Scheme.AND)
    if sorted(s.participant_index for s in parts) != list(range(1, first.n + 1)):
        raise AllPartsRequiredError(f"all {first.n} parts are required, got {len(parts)}")
    acc = 0
    for s in parts:
        acc ^= s.payload[0]
    return SecretValue.from_bytes(acc.to_bytes(first.secret_length, "big"), max(first.secret_length, 1))


# -- scheme-agnostic surface -------------------------------------------------


def split(
    secret: bytes | int | SecretValue,
    scheme: Scheme | str,
    params: ThresholdParams,
    field: PrimeField,
    rng: random.Random | None = None,
    *,
    policy_path: str = "",
) -> list[Share]:
    scheme = Scheme(scheme)
    if scheme is Scheme.SHAMIR:
        return shamir_split(secret, params, field, rng, policy_path=policy_path)
    if scheme is Scheme.BLAKLEY:
        return blakley_split(secret, params, field, rng, policy_path=policy_path)
    if params.k != params.n:
        raise SharingError("AND splitting requires k == n")
    if not isinstance(secret, (bytes, bytearray)):
        raise SharingError("AND splitting works on byte strings")
    return and_split(secret, params.n, rng, policy_path=policy_path)


def reconstruct(shares: Sequence[Share]) -> SecretValue:
    if not shares:
        raise InsufficientSharesError("no shares supplied")
    scheme = shares[0].scheme
    if scheme is Scheme.SHAMIR:
        return shamir_reconstruct(shares)
    if scheme is Scheme.BLAKLEY:
        return blakley_reconstruct(shares)
    return and_reconstruct(shares)

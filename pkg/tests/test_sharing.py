import itertools
import math

import pytest
from hypothesis import given, settings, strategies as st

from vaultlog.errors import (
    CorruptShareError,
    FieldError,
    InconsistentSharesError,
    InsufficientSharesError,
    ShareMismatchError,
    SharingError,
    SingularMatrixError,
)
from vaultlog.field import PrimeField, production_field
from vaultlog.sharing import (
    AllPartsRequiredError,
    Scheme,
    SecretValue,
    Share,
    ThresholdParams,
    and_part_bytes,
    and_reconstruct,
    and_split,
    blakley_reconstruct,
    blakley_split,
    chunk_width,
    reconstruct,
    shamir_reconstruct,
    shamir_split,
    split,
)

from conftest import det_mod


# -- Shamir ------------------------------------------------------------------


def test_shamir_vector_p257(f257):
    shares = shamir_split(123, ThresholdParams(2, 3), f257, coefficients=[[94]])
    # q(x) = 123 + 94x evaluated by hand: 217, 311-257, 405-257
    assert [(s.participant_index, s.payload[0]) for s in shares] == [(1, 217), (2, 54), (3, 148)]
    assert shamir_reconstruct(shares[:2]).as_int() == 123


def test_shamir_k1_every_share_is_secret(f257, rng):
    for s in shamir_split(5, ThresholdParams(1, 4), f257, rng):
        assert s.payload == (5,)


def test_two_k_minus_one_constructor():
    assert ThresholdParams.two_k_minus_one(3) == ThresholdParams(3, 5)


@pytest.mark.parametrize("k", range(1, 11))
def test_majority_arithmetic(k):
    params = ThresholdParams.two_k_minus_one(k)
    assert params.n == 2 * k - 1
    assert math.ceil((params.n + 1) / 2) == k
    assert params.n // 2 == k - 1 == params.insufficient
    assert ThresholdParams.majority_of(params.n) == params


def test_shamir_hand_lagrange_p13(f13):
    # q = 7 + 3x + 5x^2 over GF(13): q(1)=2, q(2)=7, q(3)=9
    shares = shamir_split(7, ThresholdParams(3, 3), f13, coefficients=[[3, 5]])
    assert [s.payload[0] for s in shares] == [2, 7, 9]
    assert shamir_reconstruct(shares).as_int() == 7


def test_insufficient_shares(fbig, rng):
    shares = shamir_split(b"key material", ThresholdParams.two_k_minus_one(3), fbig, rng)
    with pytest.raises(InsufficientSharesError):
        shamir_reconstruct(shares[:2])


def test_mixed_share_sets_rejected(f257, rng):
    a = shamir_split(b"ab", ThresholdParams(2, 3), f257, rng)
    b = shamir_split(b"ab", ThresholdParams(2, 3), f257, rng)
    with pytest.raises(ShareMismatchError):
        shamir_reconstruct([a[0], b[1]])


def test_duplicate_indices_rejected(f257, rng):
    a = shamir_split(b"ab", ThresholdParams(2, 3), f257, rng)
    with pytest.raises(ShareMismatchError):
        shamir_reconstruct([a[0], a[0]])


def test_extra_share_consistency_checked(f257, rng):
    a = shamir_split(b"abc", ThresholdParams(2, 3), f257, rng)
    bad = Share(**{**a[2].__dict__, "payload": ((a[2].payload[0] + 1) % 257, *a[2].payload[1:])})
    with pytest.raises(InconsistentSharesError):
        shamir_reconstruct([a[0], a[1], bad])


def test_field_too_small(f13, f257):
    with pytest.raises(FieldError):
        shamir_split(b"x", ThresholdParams(2, 3), f13)
    with pytest.raises(FieldError):
        shamir_split(300, ThresholdParams(2, 3), f257)
    with pytest.raises(FieldError):
        shamir_split(1, ThresholdParams(2, 13), f13)


def test_invalid_params():
    with pytest.raises(SharingError):
        ThresholdParams(4, 3)
    with pytest.raises(SharingError):
        ThresholdParams(0, 3)


def test_chunk_width():
    assert chunk_width(257) == 1
    assert chunk_width(2**521 - 1) == 64
    with pytest.raises(FieldError):
        chunk_width(13)


def test_perfect_secrecy_enumeration_p13():
    # each single share of a (2, n) split is consistent with every secret exactly once
    p = 13
    for x in range(1, 4):
        for y in range(p):
            secrets = [a0 for a0 in range(p) for a1 in range(p) if (a0 + a1 * x) % p == y]
            assert sorted(secrets) == list(range(p))


# -- Blakley -----------------------------------------------------------------


LINES = [[3, -1], [5, -1], [1, -1]]  # y = 3x+10, y = 5x+2, y = x+5 as a.x = c


def test_blakley_vector_lines_through_point(f13):
    shares = blakley_split(
        4, ThresholdParams(2, 3), f13, candidate_rows=[LINES], points=[[4, 9]]
    )
    consts = [s.payload[0][2] for s in shares]
    assert consts == [(-10) % 13, (-2) % 13, (-5) % 13]
    for s in shares:
        a1, a2, c = s.payload[0]
        assert (a1 * 4 + a2 * 9) % 13 == c


def test_blakley_reconstruct_vectors(f13):
    shares = blakley_split(4, ThresholdParams(2, 3), f13, candidate_rows=[LINES], points=[[4, 9]])
    assert blakley_reconstruct(shares[:2]).as_int() == 4
    assert blakley_reconstruct([shares[0], shares[2]]).as_int() == 4


def test_blakley_k1(f257, rng):
    shares = blakley_split(b"\x07\x09", ThresholdParams(1, 3), f257, rng)
    for s in shares:
        assert blakley_reconstruct([s]).to_bytes() == b"\x07\x09"


def test_blakley_duplicate_slope_resampled(f13):
    parallel = [[3, -1], [3, -1], [1, -1]]
    shares = blakley_split(
        4, ThresholdParams(2, 3), f13, candidate_rows=[parallel, LINES], points=[[4, 9]]
    )
    assert [s.payload[0][:2] for s in shares] == [(3, 12), (5, 12), (1, 12)]


def test_blakley_gives_up_when_candidates_all_singular(f13):
    with pytest.raises(SharingError):
        blakley_split(4, ThresholdParams(2, 2), f13, candidate_rows=[[[1, 1], [2, 2]]])


def test_blakley_singular_shares_detected(f13):
    proportional = [
        Share(Scheme.BLAKLEY, "s", 13, 2, 2, 1, ((1, 1, 0),), None, 0),
        Share(Scheme.BLAKLEY, "s", 13, 2, 2, 2, ((2, 2, 0),), None, 0),
    ]
    with pytest.raises(SingularMatrixError):
        blakley_reconstruct(proportional)


def test_blakley_every_subset_nonsingular(f257, rng):
    for _ in range(20):
        shares = blakley_split(b"secret", ThresholdParams(3, 5), f257, rng)
        rows = [s.payload[0][:3] for s in shares]
        for subset in itertools.combinations(rows, 3):
            assert det_mod(subset, 257) != 0


# -- AND -----------------------------------------------------------------------


def test_and_single_part_is_secret():
    (part,) = and_split(b"\x01\x02", 1)
    assert and_part_bytes(part) == b"\x01\x02"
    assert and_reconstruct([part]).to_bytes() == b"\x01\x02"


def test_and_zero_secret_xors_to_zero(rng):
    parts = and_split(bytes(8), 3, rng)
    acc = 0
    for p in parts:
        acc ^= p.payload[0]
    assert acc == 0
    assert and_reconstruct(parts).to_bytes() == bytes(8)


def test_and_hand_vector():
    parts = and_split(b"\xab", 2, pads=[b"\x5c"])
    assert and_part_bytes(parts[1]) == b"\xf7"


def test_and_missing_part(rng):
    parts = and_split(b"abc", 3, rng)
    with pytest.raises(AllPartsRequiredError):
        and_reconstruct(parts[:2])


def test_and_needs_a_part():
    with pytest.raises(SharingError):
        and_split(b"abc", 0)


@given(st.binary(min_size=1, max_size=64), st.integers(1, 6))
def test_and_parts_length_and_xor(secret, m):
    parts = and_split(secret, m)
    assert all(len(and_part_bytes(p)) == len(secret) for p in parts)
    acc = 0
    for p in parts:
        acc ^= p.payload[0]
    assert acc.to_bytes(len(secret), "big") == secret


# -- round trips and serialization ------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    secret=st.binary(min_size=1, max_size=96),
    k=st.integers(1, 4),
    extra=st.integers(0, 2),
    scheme=st.sampled_from([Scheme.SHAMIR, Scheme.BLAKLEY]),
    p=st.sampled_from([257, 2**521 - 1]),
)
def test_every_k_subset_reconstructs(secret, k, extra, scheme, p):
    field = PrimeField(p)
    params = ThresholdParams(k, k + extra)
    shares = split(secret, scheme, params, field)
    for subset in itertools.combinations(shares, k):
        assert reconstruct(list(subset)).to_bytes() == secret


def test_schemes_agree(fbig, rng):
    secret = rng.randbytes(77)
    params = ThresholdParams.two_k_minus_one(3)
    s1 = shamir_split(secret, params, fbig, rng)
    s2 = blakley_split(secret, params, fbig, rng)
    assert shamir_reconstruct(s1[2:]).to_bytes() == blakley_reconstruct(s2[:3]).to_bytes() == secret


def test_empty_secret_round_trip(f257, rng):
    shares = shamir_split(b"", ThresholdParams(2, 3), f257, rng)
    assert shamir_reconstruct(shares[:2]).to_bytes() == b""


@settings(max_examples=30, deadline=None)
@given(st.binary(min_size=0, max_size=80), st.sampled_from(list(Scheme)))
def test_serialization_round_trip(secret, scheme):
    field = production_field()
    if scheme is Scheme.AND:
        shares = and_split(secret, 3, policy_path="/1")
    else:
        shares = split(secret, scheme, ThresholdParams(2, 3), field, policy_path="/1")
    for s in shares:
        text = s.dumps()
        assert text.endswith("\n") and " " not in text
        assert Share.loads(text) == s
        assert Share.loads(text).dumps() == text


def test_share_file_is_canonical(f257):
    (s, *_) = shamir_split(123, ThresholdParams(2, 3), f257, coefficients=[[94]])
    d = s.to_dict()
    import json
    keys = list(json.loads(s.dumps()))
    assert keys == sorted(keys)
    assert d["field_p"] == "257" and d["payload"] == ["217"]


def test_bit_flip_in_share_file_detected(f257, rng):
    (s, *_) = shamir_split(b"hello", ThresholdParams(2, 3), f257, rng)
    raw = bytearray(s.dumps().encode())
    for pos in range(len(raw) - 1):
        for bit in range(8):
            raw[pos] ^= 1 << bit
            with pytest.raises(CorruptShareError):
                Share.loads(bytes(raw))
            raw[pos] ^= 1 << bit


def test_secret_value_round_trip():
    sv = SecretValue.from_bytes(b"abcdefghij", 4)
    assert sv.chunks[-1] == int.from_bytes(b"ij", "big")
    assert sv.to_bytes() == b"abcdefghij"
    assert SecretValue.from_int(9).as_int() == 9

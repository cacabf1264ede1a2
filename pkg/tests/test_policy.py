import itertools
import random

import pytest

from vaultlog.errors import (
    CeremonyError,
    CorruptShareError,
    InconsistentSharesError,
    PolicyError,
    PolicyUnsatisfiedError,
    ShareMismatchError,
)
from vaultlog.field import PrimeField, production_field
from vaultlog.policy import (
    Ceremony,
    CeremonyStatus,
    KeyFragmentationPlan,
    KeyHandle,
    Policy,
    and_of_groups,
    evaluate,
    fragment_key,
    group,
    necessary_group,
    reconstruct_key,
    threshold_of_groups,
)
from vaultlog.sharing import Share


def g(name, k, n):
    return group(name, k, [f"{name}{i}" for i in range(1, n + 1)])


def and_shape():
    return Policy(and_of_groups(g("emp", 2, 3), g("union", 2, 3), g("dpa", 2, 3)))


def threshold_shape():
    return Policy(threshold_of_groups(2, g("emp", 2, 3), g("union", 2, 3), g("dpa", 2, 3)))


def necessary_shape():
    return Policy(necessary_group(g("emp", 2, 3), 1, g("union", 2, 3), g("dpa", 2, 3)))


def pairs(policy, members):
    return [(m, policy.member_slot[m][0]) for m in members]


def oracle(policy, members):
    """Independent brute-force check: count per group, then fold by hand."""
    per_group = {}
    for m in members:
        path, _ = policy.member_slot[m]
        per_group[path] = per_group.get(path, 0) + 1

    def ok(node):
        if node.kind.value == "group":
            return per_group.get(node.path, 0) >= node.k
        flags = [ok(c) for c in node.children]
        if node.kind.value == "and":
            return all(flags)
        return sum(flags) >= node.j

    return ok(policy.root)


def test_and_shape_examples():
    p = and_shape()
    assert evaluate(p, pairs(p, ["emp1", "emp2", "union1", "union3", "dpa2", "dpa3"]))
    assert not evaluate(p, pairs(p, ["emp1", "emp2", "union1", "union3", "dpa2"]))


def test_threshold_shape_examples():
    p = threshold_shape()
    assert evaluate(p, pairs(p, ["union1", "union2", "dpa1", "dpa3"]))
    assert not evaluate(p, pairs(p, ["emp1", "emp2", "emp3", "union1", "dpa1"]))


def test_necessary_shape_examples():
    p = necessary_shape()
    assert evaluate(p, pairs(p, ["emp1", "emp3", "dpa1", "dpa2"]))
    assert not evaluate(p, pairs(p, ["union1", "union2", "dpa1", "dpa2"]))


def test_paths_assigned():
    p = necessary_shape()
    assert set(p.nodes) == {"/", "/0", "/1", "/1/0", "/1/1"}
    assert p.member_slot["union2"] == ("/1/0", 2)


def test_unknown_participant_ignored(caplog):
    p = and_shape()
    assert not evaluate(p, [("mallory", "/0"), ("emp1", "/1")])
    assert "ignored 2" in caplog.text


@pytest.mark.parametrize("policy", [and_shape(), threshold_shape(), necessary_shape()], ids=["and", "thr", "nec"])
def test_evaluate_matches_oracle_exhaustively(policy):
    people = policy.participants
    for r in range(len(people) + 1):
        for subset in itertools.combinations(people, r):
            assert evaluate(policy, pairs(policy, subset)) == oracle(policy, subset)


def test_monotone():
    p = necessary_shape()
    people = p.participants
    rng = random.Random(7)
    for _ in range(300):
        a = {m for m in people if rng.random() < 0.5}
        b = a | {m for m in people if rng.random() < 0.3}
        if evaluate(p, pairs(p, a)):
            assert evaluate(p, pairs(p, b))


def test_threshold_m_of_m_is_and():
    groups = [g("a", 1, 2), g("b", 2, 2)]
    p_and = Policy(and_of_groups(*groups))
    p_thr = Policy(threshold_of_groups(2, *groups))
    people = p_and.participants
    for r in range(len(people) + 1):
        for subset in itertools.combinations(people, r):
            assert evaluate(p_and, pairs(p_and, subset)) == evaluate(p_thr, pairs(p_thr, subset))


@pytest.mark.parametrize(
    "root",
    [
        group("x", 0, ["a"]),
        group("x", 3, ["a", "b"]),
        group("x", 1, ["a", "a"]),
        threshold_of_groups(3, group("x", 1, ["a"]), group("y", 1, ["b"])),
        and_of_groups(),
        and_of_groups(group("x", 1, ["a"]), group("y", 1, ["a"])),
    ],
)
def test_invalid_policies(root):
    with pytest.raises(PolicyError):
        Policy(root)


def test_single_member_group_allowed():
    p = Policy(group("solo", 1, ["only"]))
    assert evaluate(p, [("only", "/")])


def test_policy_round_trip():
    p = necessary_shape()
    text = p.dumps()
    assert Policy.loads(text).dumps() == text
    with pytest.raises(PolicyError):
        Policy.loads("[]")
    with pytest.raises(PolicyError):
        Policy.loads("{not json")


# -- fragmentation and reconstruction -----------------------------------------


KEY = bytes(range(1, 33))


@pytest.fixture(scope="module")
def fragmented():
    out = {}
    for name, policy in (("and", and_shape()), ("thr", threshold_shape()), ("nec", necessary_shape())):
        out[name] = (policy, *fragment_key(KEY, policy, production_field(), random.Random(name)))
    return out


@pytest.mark.parametrize("name", ["and", "thr", "nec"])
def test_reconstruction_sound_and_complete(fragmented, name):
    policy, plan, shares = fragmented[name]
    people = policy.participants
    for r in range(len(people) + 1):
        for subset in itertools.combinations(people, r):
            chosen = [shares[m] for m in subset]
            if oracle(policy, subset):
                assert reconstruct_key(plan, chosen) == KEY
            else:
                with pytest.raises(PolicyUnsatisfiedError):
                    reconstruct_key(plan, chosen)


def test_plan_has_no_key_material(fragmented):
    _, plan, shares = fragmented["nec"]
    text = plan.dumps()
    assert KEY.hex() not in text
    for s in shares.values():
        for v in s.payload:
            assert str(v) not in text
    assert KeyFragmentationPlan.loads(text).dumps() == text


def test_reconstruct_accepts_serialized(fragmented):
    _, plan, shares = fragmented["and"]
    texts = [shares[m].dumps() for m in ("emp1", "emp2", "union1", "union2", "dpa1", "dpa2")]
    assert reconstruct_key(plan, texts) == KEY


def test_foreign_share_rejected(fragmented):
    _, plan, _ = fragmented["and"]
    _, _, other = fragmented["thr"]
    with pytest.raises(ShareMismatchError):
        reconstruct_key(plan, [other["emp1"]])


def test_conflicting_duplicate_rejected(fragmented):
    _, plan, shares = fragmented["and"]
    s = shares["emp1"]
    forged = Share(**{**s.__dict__, "payload": (s.payload[0] ^ 1, *s.payload[1:])})
    with pytest.raises(InconsistentSharesError):
        reconstruct_key(plan, [s, forged])


def test_bit_flipped_share_file(fragmented):
    _, plan, shares = fragmented["and"]
    raw = bytearray(shares["emp1"].dumps().encode())
    raw[len(raw) // 2] ^= 0x04
    with pytest.raises(CorruptShareError):
        reconstruct_key(plan, [bytes(raw)])


def test_small_field_fragmentation():
    policy = necessary_shape()
    plan, shares = fragment_key(b"\x00\x7f\xff", policy, PrimeField(257), random.Random(3))
    assert reconstruct_key(plan, [shares[m] for m in ("emp1", "emp2", "dpa2", "dpa3")]) == b"\x00\x7f\xff"


def test_empty_key_rejected():
    with pytest.raises(PolicyError):
        fragment_key(b"", and_shape(), production_field())


# -- ceremony -----------------------------------------------------------------


def test_ceremony_state_machine(fragmented):
    _, plan, shares = fragmented["nec"]
    seen = []
    c = Ceremony.open(plan, rng=random.Random(1), clock=lambda: 1000, on_event=seen.append)
    assert c.status is CeremonyStatus.OPEN
    with pytest.raises(PolicyUnsatisfiedError):
        c.finish()
    assert c.submit(shares["emp1"]) is CeremonyStatus.OPEN
    with pytest.raises(CeremonyError):
        c.submit(shares["emp1"])
    c.submit(shares["emp3"])
    c.submit(shares["union1"])
    assert c.submit(shares["union2"]) is CeremonyStatus.SATISFIABLE
    handle = c.finish()
    assert handle.material() == KEY
    assert c.status is CeremonyStatus.RECONSTRUCTED
    with pytest.raises(CeremonyError):
        c.submit(shares["dpa1"])
    c.close()
    with pytest.raises(CeremonyError):
        handle.material()
    kinds = [e["event"] for e in seen]
    assert kinds == ["open", "submit", "submit", "submit", "submit", "satisfiable", "finish", "close"]
    assert all(e["at"] == 1000 for e in seen)
    assert "union2" in seen[-2]["participants"]


def test_ceremony_state_hides_payloads(fragmented):
    _, plan, shares = fragmented["and"]
    c = Ceremony.open(plan, rng=random.Random(2))
    c.submit(shares["dpa2"])
    state = repr(c.state())
    assert str(shares["dpa2"].payload[0]) not in state


def test_ceremony_abort(fragmented):
    _, plan, shares = fragmented["and"]
    c = Ceremony.open(plan, rng=random.Random(2))
    c.abort("operator changed their mind")
    assert c.status is CeremonyStatus.ABORTED
    with pytest.raises(CeremonyError):
        c.submit(shares["emp1"])


def test_ceremony_verify_hook_rejects(fragmented):
    _, plan, shares = fragmented["thr"]
    c = Ceremony.open(plan, rng=random.Random(2))
    for m in ("emp1", "emp2", "dpa1", "dpa2"):
        c.submit(shares[m])

    def reject(_key):
        raise ValueError("nope")

    with pytest.raises(ValueError):
        c.finish(verify=reject)
    assert c.events[-1]["event"] == "finish_failed"


def test_key_handle_zeroize():
    h = KeyHandle(b"abc")
    with h:
        assert h.material() == b"abc"
    assert h._buf == bytearray(3)
    assert "abc" not in repr(h)

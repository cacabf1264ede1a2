"""Key fragmentation policies and the reconstruction ceremony.

A policy is a tree. Internal nodes are ``and`` (every child needed; the
secret is XOR-split) or ``threshold`` (any j of the m children; the secret
is Shamir-split with k=j, n=m). Leaves are groups whose members each hold
one Shamir share of the leaf's secret under the group's own (k, n).

Three shapes cover the common deployments::

    and_of_groups(g1, g2, g3)               # every group must agree
    threshold_of_groups(2, g1, g2, g3)      # any 2 of the 3 groups
    necessary_group(g1, 1, g2, g3)          # g1 and any 1 of the others

Node paths are slash-delimited child indices ("/", "/0", "/2/1").
"""

from __future__ import annotations

import enum
import logging
import random
import time
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Iterable, Mapping

from . import canonical
from .errors import (
    CeremonyError,
    InconsistentSharesError,
    PolicyError,
    PolicyUnsatisfiedError,
    ShareMismatchError,
)
from .field import PrimeField
from .sharing import (
    Scheme,
    Share,
    ThresholdParams,
    and_part_bytes,
    and_split,
    chunk_width,
    shamir_reconstruct,
    shamir_split,
)

log = logging.getLogger(__name__)

POLICY_FORMAT = "vaultlog-policy/1"
PLAN_FORMAT = "vaultlog-plan/1"


class NodeKind(str, enum.Enum):
    AND = "and"
    THRESHOLD = "threshold"
    GROUP = "group"


@dataclass(frozen=True)
class PolicyNode:
    kind: NodeKind
    children: tuple[PolicyNode, ...] = ()
    j: int = 0
    name: str = ""
    k: int = 0
    members: tuple[str, ...] = ()
    path: str = ""

    @property
    def m(self) -> int:
        return len(self.children)

    @property
    def n(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        if self.kind is NodeKind.GROUP:
            return {"kind": "group", "name": self.name, "k": self.k, "members": list(self.members)}
        d = {"kind": self.kind.value, "children": [c.to_dict() for c in self.children]}
        if self.kind is NodeKind.THRESHOLD:
            d["j"] = self.j
            d["m"] = self.m
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> PolicyNode:
        try:
            kind = NodeKind(d["kind"])
            if kind is NodeKind.GROUP:
                members = d["members"]
                if "n" in d and d["n"] != len(members):
                    raise PolicyError(f"group {d.get('name')!r}: n does not match member count")
                return group(str(d["name"]), int(d["k"]), members)
            children = tuple(cls.from_dict(c) for c in d["children"])
            if kind is NodeKind.AND:
                return PolicyNode(NodeKind.AND, children)
            if "m" in d and d["m"] != len(children):
                raise PolicyError("threshold m does not match child count")
            return PolicyNode(NodeKind.THRESHOLD, children, j=int(d["j"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyError(f"malformed policy node: {exc}") from exc


def group(name: str, k: int, members: Iterable[str]) -> PolicyNode:
    return PolicyNode(NodeKind.GROUP, name=name, k=k, members=tuple(members))


def and_of_groups(*children: PolicyNode) -> PolicyNode:
    return PolicyNode(NodeKind.AND, tuple(children))


def threshold_of_groups(j: int, *children: PolicyNode) -> PolicyNode:
    return PolicyNode(NodeKind.THRESHOLD, tuple(children), j=j)


def necessary_group(necessary: PolicyNode, j: int, *others: PolicyNode) -> PolicyNode:
    """``necessary`` AND any ``j`` of ``others``."""
    return and_of_groups(necessary, threshold_of_groups(j, *others))


def _child_path(parent: str, i: int) -> str:
    return f"{parent.rstrip('/')}/{i}"


def _with_paths(node: PolicyNode, path: str) -> PolicyNode:
    children = tuple(_with_paths(c, _child_path(path, i)) for i, c in enumerate(node.children))
    return replace(node, children=children, path=path)


class Policy:
    """A validated policy tree with paths assigned and lookup tables built."""

    def __init__(self, root: PolicyNode):
        self.root = _with_paths(root, "/")
        self.nodes: dict[str, PolicyNode] = {}
        self.leaves: dict[str, PolicyNode] = {}
        self.member_slot: dict[str, tuple[str, int]] = {}
        self._index(self.root)

    def _index(self, node: PolicyNode) -> None:
        self.nodes[node.path] = node
        if node.kind is NodeKind.GROUP:
            if node.children:
                raise PolicyError(f"group {node.name!r} cannot have children")
            if not 1 <= node.k <= node.n:
                raise PolicyError(f"group {node.name!r}: need 1 <= k <= n, got k={node.k}, n={node.n}")
            for i, member in enumerate(node.members):
                if not isinstance(member, str) or not member:
                    raise PolicyError(f"group {node.name!r}: member ids must be nonempty strings")
                if member in self.member_slot:
                    raise PolicyError(f"member {member!r} appears more than once")
                self.member_slot[member] = (node.path, i + 1)
            self.leaves[node.path] = node
            return
        if not node.children:
            raise PolicyError(f"{node.kind.value} node at {node.path} has no children")
        if node.kind is NodeKind.THRESHOLD and not 1 <= node.j <= node.m:
            raise PolicyError(f"threshold at {node.path}: need 1 <= j <= m, got j={node.j}, m={node.m}")
        for child in node.children:
            self._index(child)

    @property
    def participants(self) -> list[str]:
        return list(self.member_slot)

    def member_at(self, path: str, index: int) -> str:
        leaf = self.leaves.get(path)
        if leaf is None or not 1 <= index <= leaf.n:
            raise ShareMismatchError(f"no member slot {index} at {path}")
        return leaf.members[index - 1]

    def to_dict(self) -> dict:
        return {"format": POLICY_FORMAT, "root": self.root.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> Policy:
        if d.get("format", POLICY_FORMAT) != POLICY_FORMAT:
            raise PolicyError(f"unknown policy format {d.get('format')!r}")
        if "root" not in d:
            raise PolicyError("policy document has no root")
        return cls(PolicyNode.from_dict(d["root"]))

    def dumps(self) -> str:
        return canonical.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str | bytes) -> Policy:
        try:
            d = canonical.loads(text)
        except ValueError as exc:
            raise PolicyError(f"policy is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise PolicyError("policy document must be an object")
        return cls.from_dict(d)


def _as_policy(policy: Policy | PolicyNode) -> Policy:
    return policy if isinstance(policy, Policy) else Policy(policy)


def evaluate(policy: Policy | PolicyNode, submitted: Iterable[tuple[str, str]]) -> bool:
    """Does the set of (participant, leaf path) pairs satisfy the policy?"""
    policy = _as_policy(policy)
    present: dict[str, set[str]] = {}
    ignored = 0
    for participant, path in submitted:
        slot = policy.member_slot.get(participant)
        if slot is None or slot[0] != path:
            ignored += 1
            continue
        present.setdefault(path, set()).add(participant)
    if ignored:
        log.warning("evaluate ignored %d submissions for unknown participants or paths", ignored)

    def sat(node: PolicyNode) -> bool:
        if node.kind is NodeKind.GROUP:
            return len(present.get(node.path, ())) >= node.k
        hits = sum(1 for c in node.children if sat(c))
        need = node.m if node.kind is NodeKind.AND else node.j
        return hits >= need

    return sat(policy.root)


# -- fragmentation -----------------------------------------------------------


@dataclass(frozen=True)
class SplitInfo:
    share_set_id: str
    secret_length: int
    chunk_width: int

    def to_dict(self) -> dict:
        return {
            "chunk_width": self.chunk_width,
            "secret_length": self.secret_length,
            "share_set_id": self.share_set_id,
        }


@dataclass(frozen=True)
class KeyFragmentationPlan:
    """Public description of how a key was fragmented. Holds no secret material."""

    policy: Policy
    field_p: int
    key_length: int
    splits: Mapping[str, SplitInfo]
    manifest: Mapping[str, tuple[str, str]]  # participant -> (share_id, policy_path)

    @property
    def share_set_id(self) -> str:
        return self.splits["/"].share_set_id

    def to_dict(self) -> dict:
        return {
            "field_p": str(self.field_p),
            "format": PLAN_FORMAT,
            "key_length": self.key_length,
            "manifest": {
                who: {"policy_path": path, "share_id": sid}
                for who, (sid, path) in self.manifest.items()
            },
            "policy": self.policy.to_dict(),
            "splits": {path: info.to_dict() for path, info in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> KeyFragmentationPlan:
        if d.get("format") != PLAN_FORMAT:
            raise PolicyError(f"unknown plan format {d.get('format')!r}")
        try:
            policy = Policy.from_dict(d["policy"])
            splits = {
                path: SplitInfo(s["share_set_id"], s["secret_length"], s["chunk_width"])
                for path, s in d["splits"].items()
            }
            manifest = {
                who: (m["share_id"], m["policy_path"]) for who, m in d["manifest"].items()
            }
            plan = cls(policy, int(d["field_p"]), int(d["key_length"]), splits, manifest)
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyError(f"malformed plan: {exc}") from exc
        if set(plan.splits) != set(policy.nodes) or set(plan.manifest) != set(policy.member_slot):
            raise PolicyError("plan does not cover the policy tree")
        return plan

    def dumps(self) -> str:
        return canonical.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str | bytes) -> KeyFragmentationPlan:
        return cls.from_dict(canonical.loads(text))


def _encode_values(values: Iterable[int], width: int) -> bytes:
    return b"".join(v.to_bytes(width, "big") for v in values)


def _decode_values(data: bytes, width: int) -> tuple[int, ...]:
    if len(data) % width:
        raise InconsistentSharesError("threshold part has a ragged length")
    return tuple(int.from_bytes(data[i : i + width], "big") for i in range(0, len(data), width))


def fragment_key(
    private_key: bytes,
    policy: Policy | PolicyNode,
    field: PrimeField,
    rng: random.Random | None = None,
) -> tuple[KeyFragmentationPlan, dict[str, Share]]:
    """Split ``private_key`` along ``policy``; returns the plan and participant -> share."""
    policy = _as_policy(policy)
    if not private_key:
        raise PolicyError("refusing to fragment an empty key")
    rng = rng if rng is not None else random.SystemRandom()
    width = chunk_width(field.p)
    elem_width = field.byte_length
    splits: dict[str, SplitInfo] = {}
    out: dict[str, Share] = {}

    def descend(node: PolicyNode, secret: bytes) -> None:
        if node.kind is NodeKind.GROUP:
            shares = shamir_split(
                secret, ThresholdParams(node.k, node.n), field, rng, policy_path=node.path
            )
            for member, share in zip(node.members, shares):
                out[member] = share
            splits[node.path] = SplitInfo(shares[0].share_set_id, len(secret), width)
            return
        if node.kind is NodeKind.AND:
            parts = and_split(secret, node.m, rng, policy_path=node.path)
            splits[node.path] = SplitInfo(parts[0].share_set_id, len(secret), len(secret))
            for child, part in zip(node.children, parts):
                descend(child, and_part_bytes(part))
            return
        shares = shamir_split(
            secret, ThresholdParams(node.j, node.m), field, rng, policy_path=node.path
        )
        splits[node.path] = SplitInfo(shares[0].share_set_id, len(secret), width)
        for child, share in zip(node.children, shares):
            descend(child, _encode_values(share.payload, elem_width))

    descend(policy.root, bytes(private_key))
    manifest = {who: (share.share_id, share.policy_path) for who, share in out.items()}
    plan = KeyFragmentationPlan(policy, field.p, len(private_key), splits, manifest)
    return plan, out


def _validated_shares(
    plan: KeyFragmentationPlan, shares: Iterable[Share | str | bytes | Mapping]
) -> dict[str, dict[int, Share]]:
    by_leaf: dict[str, dict[int, Share]] = {}
    for item in shares:
        if isinstance(item, (str, bytes)):
            share = Share.loads(item)
        elif isinstance(item, Mapping):
            share = Share.from_dict(dict(item))
        else:
            share = item
        info = plan.splits.get(share.policy_path)
        leaf = plan.policy.leaves.get(share.policy_path)
        if leaf is None or info is None:
            raise ShareMismatchError(f"share for unknown leaf {share.policy_path!r}")
        if (
            share.scheme is not Scheme.SHAMIR
            or share.share_set_id != info.share_set_id
            or share.field_p != plan.field_p
            or (share.k, share.n) != (leaf.k, leaf.n)
        ):
            raise ShareMismatchError(f"share {share.share_id} does not belong to this plan")
        slot = by_leaf.setdefault(share.policy_path, {})
        prior = slot.get(share.participant_index)
        if prior is not None and prior != share:
            raise InconsistentSharesError(f"two different shares for {share.share_id}")
        slot[share.participant_index] = share
    return by_leaf


def reconstruct_key(
    plan: KeyFragmentationPlan, shares: Iterable[Share | str | bytes | Mapping]
) -> bytes:
    """Rebuild the key bottom-up; raises unless the shares satisfy the policy."""
    by_leaf = _validated_shares(plan, shares)
    policy = plan.policy
    submitted = [
        (policy.member_at(path, idx), path) for path, slot in by_leaf.items() for idx in slot
    ]
    if not evaluate(policy, submitted):
        raise PolicyUnsatisfiedError("submitted shares do not satisfy the access policy")
    elem_width = PrimeField(plan.field_p).byte_length

    def rebuild(node: PolicyNode) -> bytes | None:
        info = plan.splits[node.path]
        if node.kind is NodeKind.GROUP:
            got = by_leaf.get(node.path, {})
            if len(got) < node.k:
                return None
            secret = shamir_reconstruct([got[i] for i in sorted(got)]).to_bytes()
        elif node.kind is NodeKind.AND:
            parts = [rebuild(c) for c in node.children]
            if any(p is None for p in parts):
                return None
            acc = 0
            for part in parts:
                acc ^= int.from_bytes(part, "big")
            secret = acc.to_bytes(info.secret_length, "big")
        else:
            rebuilt = [(i + 1, rebuild(c)) for i, c in enumerate(node.children)]
            present = [(idx, data) for idx, data in rebuilt if data is not None]
            if len(present) < node.j:
                return None
            child_shares = [
                Share(
                    scheme=Scheme.SHAMIR,
                    share_set_id=info.share_set_id,
                    field_p=plan.field_p,
                    k=node.j,
                    n=node.m,
                    participant_index=idx,
                    payload=_decode_values(data, elem_width),
                    secret_length=info.secret_length,
                    chunk_width=info.chunk_width,
                    policy_path=node.path,
                )
                for idx, data in present
            ]
            secret = shamir_reconstruct(child_shares).to_bytes()
        if len(secret) != info.secret_length:
            raise InconsistentSharesError(f"reconstructed part at {node.path} has the wrong length")
        return secret

    key = rebuild(policy.root)
    if key is None:  # evaluate() said yes; this would be a bug
        raise PolicyUnsatisfiedError("policy evaluation and reconstruction disagree")
    return key


# -- ceremony ----------------------------------------------------------------


class CeremonyStatus(str, enum.Enum):
    OPEN = "open"
    SATISFIABLE = "satisfiable"
    RECONSTRUCTED = "reconstructed"
    ABORTED = "aborted"


class KeyHandle:
    """Holds reconstructed key bytes until :meth:`zeroize`.

    Best effort only: Python may keep other copies of the bytes alive.
    """

    def __init__(self, material: bytes):
        self._buf = bytearray(material)
        self.closed = False

    def material(self) -> bytes:
        if self.closed:
            raise CeremonyError("key handle has been zeroized")
        return bytes(self._buf)

    def zeroize(self) -> None:
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self.closed = True

    def __enter__(self) -> KeyHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.zeroize()

    def __repr__(self) -> str:
        return f"KeyHandle(closed={self.closed})"


@dataclass
class Ceremony:
    """Collects shares until the policy is met, then rebuilds the key once.

    ``on_event`` receives a dict for each state change; the site layer
    appends these to the immutable store. Mutations must be serialized by
    the caller.
    """

    plan: KeyFragmentationPlan
    ceremony_id: str = ""
    clock: Callable[[], float] = time.time
    on_event: Callable[[dict], None] | None = None
    status: CeremonyStatus = CeremonyStatus.OPEN
    submitted: dict[tuple[str, str], Share] = dc_field(default_factory=dict)
    events: list[dict] = dc_field(default_factory=list)
    handle: KeyHandle | None = None

    @classmethod
    def open(
        cls,
        plan: KeyFragmentationPlan,
        *,
        rng: random.Random | None = None,
        clock: Callable[[], float] = time.time,
        on_event: Callable[[dict], None] | None = None,
    ) -> Ceremony:
        rng = rng if rng is not None else random.SystemRandom()
        c = cls(plan, rng.randbytes(8).hex(), clock, on_event)
        c._emit("open", share_set_id=plan.share_set_id)
        return c

    def _emit(self, kind: str, **detail) -> None:
        event = {"at": int(self.clock()), "ceremony_id": self.ceremony_id, "event": kind, **detail}
        self.events.append(event)
        if self.on_event is not None:
            self.on_event(event)

    def _accept(self, share: Share | str | bytes | Mapping) -> tuple[str, Share]:
        if self.status not in (CeremonyStatus.OPEN, CeremonyStatus.SATISFIABLE):
            raise CeremonyError(f"ceremony is {self.status.value}; no more submissions")
        (path, slot), = _validated_shares(self.plan, [share]).items()
        (share,) = slot.values()
        participant = self.plan.policy.member_at(path, share.participant_index)
        if (participant, path) in self.submitted:
            raise CeremonyError(f"duplicate submission from {participant!r} for {path}")
        self.submitted[(participant, path)] = share
        if evaluate(self.plan.policy, self.submitted):
            self.status = CeremonyStatus.SATISFIABLE
        return participant, share

    def submit(self, share: Share | str | bytes | Mapping) -> CeremonyStatus:
        before = self.status
        participant, accepted = self._accept(share)
        self._emit("submit", participant=participant, policy_path=accepted.policy_path)
        if before is CeremonyStatus.OPEN and self.status is CeremonyStatus.SATISFIABLE:
            self._emit("satisfiable")
        return self.status

    def restore(self, share: Share | str | bytes | Mapping) -> None:
        """Re-add a previously recorded submission without emitting events."""
        self._accept(share)

    def finish(self, verify: Callable[[bytes], None] | None = None) -> KeyHandle:
        """Reconstruct the key. ``verify`` may reject a key that fails a public check."""
        if self.status is CeremonyStatus.OPEN:
            raise PolicyUnsatisfiedError("ceremony quorum not reached")
        if self.status is not CeremonyStatus.SATISFIABLE:
            raise CeremonyError(f"cannot finish a ceremony that is {self.status.value}")
        try:
            key = reconstruct_key(self.plan, self.submitted.values())
            if verify is not None:
                verify(key)
        except Exception as exc:
            self._emit("finish_failed", reason=type(exc).__name__)
            raise
        self.handle = KeyHandle(key)
        self.status = CeremonyStatus.RECONSTRUCTED
        self._emit("finish", participants=sorted(p for p, _ in self.submitted))
        return self.handle

    def close(self) -> None:
        if self.handle is not None:
            self.handle.zeroize()
        self._emit("close")

    def abort(self, reason: str = "") -> None:
        if self.handle is not None:
            self.handle.zeroize()
        self.status = CeremonyStatus.ABORTED
        self._emit("abort", reason=reason)

    def state(self) -> dict:
        """Serializable summary; never includes share payloads or key bytes."""
        return {
            "ceremony_id": self.ceremony_id,
            "share_set_id": self.plan.share_set_id,
            "status": self.status.value,
            "submissions": [
                {"participant": who, "policy_path": path, "share_id": s.share_id}
                for (who, path), s in sorted(self.submitted.items())
            ],
        }


"""Arithmetic in GF(p) for arbitrary-precision primes.

Two layers live here. ``PrimeField``/``FieldElement``/``Polynomial`` are the
checked, typed surface. The ``*_mod`` helpers work on bare ints and exist so
the sharing code can process many chunks without allocating an element
object per value; both layers share the same algorithms.

Nothing here is constant-time.
"""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import FieldError, SingularMatrixError

MERSENNE_521 = 2**521 - 1

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47)
_MR_ROUNDS = 32  # error <= 4**-32 = 2**-64


def is_probable_prime(n: int, rounds: int = _MR_ROUNDS) -> bool:
    """Miller-Rabin with ``rounds`` random bases (plus small-prime trial division)."""
    if n < 2:
        return False
    for sp in _SMALL_PRIMES:
        if n == sp:
            return True
        if n % sp == 0:
            return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    rng = random.SystemRandom()
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@functools.lru_cache(maxsize=64)
def _checked_prime(p: int) -> bool:
    return is_probable_prime(p)


def inv_mod(a: int, p: int) -> int:
    a %= p
    if a == 0:
        raise FieldError("inversion of zero")
    return pow(a, -1, p)


@dataclass(frozen=True)
class PrimeField:
    p: int

    def __post_init__(self) -> None:
        if not isinstance(self.p, int) or self.p < 3:
            raise FieldError(f"field modulus must be an integer >= 3, got {self.p!r}")
        if not _checked_prime(self.p):
            raise FieldError(f"{self.p} is not prime")

    def __call__(self, value: int) -> FieldElement:
        return FieldElement(value % self.p, self)

    @property
    def zero(self) -> FieldElement:
        return FieldElement(0, self)

    @property
    def one(self) -> FieldElement:
        return FieldElement(1, self)

    @property
    def byte_length(self) -> int:
        """Bytes needed to hold any element."""
        return (self.p.bit_length() + 7) // 8

    def random_element(self, rng: random.Random, nonzero: bool = False) -> FieldElement:
        lo = 1 if nonzero else 0
        return FieldElement(rng.randrange(lo, self.p), self)

    def __repr__(self) -> str:
        if self.p == MERSENNE_521:
            return "PrimeField(2**521 - 1)"
        return f"PrimeField({self.p})"


@functools.lru_cache(maxsize=None)
def production_field() -> PrimeField:
    return PrimeField(MERSENNE_521)


@dataclass(frozen=True)
class FieldElement:
    value: int
    field: PrimeField

    def __post_init__(self) -> None:
        if not 0 <= self.value < self.field.p:
            raise FieldError(f"{self.value} is not reduced mod {self.field.p}")

    def _coerce(self, other: FieldElement | int) -> int:
        if isinstance(other, FieldElement):
            if other.field.p != self.field.p:
                raise FieldError(
                    f"field mismatch: GF({self.field.p}) vs GF({other.field.p})"
                )
            return other.value
        if isinstance(other, int):
            return other % self.field.p
        raise TypeError(f"cannot combine FieldElement with {type(other).__name__}")

    def _new(self, v: int) -> FieldElement:
        return FieldElement(v % self.field.p, self.field)

    def __add__(self, other):
        return self._new(self.value + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self._new(self.value - self._coerce(other))

    def __rsub__(self, other):
        return self._new(self._coerce(other) - self.value)

    def __mul__(self, other):
        return self._new(self.value * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self._new(-self.value)

    def __truediv__(self, other):
        return self * FieldElement(self._coerce(other), self.field).inverse()

    def __pow__(self, exponent: int):
        if exponent < 0:
            return self.inverse() ** -exponent
        return self._new(pow(self.value, exponent, self.field.p))

    def inverse(self) -> FieldElement:
        return self._new(inv_mod(self.value, self.field.p))

    def __int__(self) -> int:
        return self.value

    def __repr__(self) -> str:
        return f"{self.value} (mod {self.field.p})"


def field_add(a: FieldElement, b: FieldElement) -> FieldElement:
    return a + b


def field_sub(a: FieldElement, b: FieldElement) -> FieldElement:
    return a - b


def field_mul(a: FieldElement, b: FieldElement) -> FieldElement:
    return a * b


def field_inv(a: FieldElement) -> FieldElement:
    return a.inverse()


@dataclass(frozen=True)
class Polynomial:
    """Coefficients constant-term first; length is the structural degree bound + 1."""

    coefficients: tuple[FieldElement, ...]

    def __post_init__(self) -> None:
        if not self.coefficients:
            raise FieldError("polynomial needs at least one coefficient")
        p = self.coefficients[0].field.p
        if any(c.field.p != p for c in self.coefficients):
            raise FieldError("polynomial coefficients from different fields")

    @classmethod
    def from_ints(cls, field: PrimeField, coefficients: Iterable[int]) -> Polynomial:
        return cls(tuple(field(c) for c in coefficients))

    @property
    def field(self) -> PrimeField:
        return self.coefficients[0].field

    def __call__(self, x: FieldElement) -> FieldElement:
        return poly_eval(self, x)


def eval_mod(coefficients: Sequence[int], x: int, p: int) -> int:
    """Horner evaluation, constant term first."""
    acc = 0
    for c in reversed(coefficients):
        acc = (acc * x + c) % p
    return acc


def poly_eval(q: Polynomial, x: FieldElement) -> FieldElement:
    if x.field.p != q.field.p:
        raise FieldError("field mismatch between polynomial and point")
    return q.field(eval_mod([c.value for c in q.coefficients], x.value, q.field.p))


def lagrange_weights(xs: Sequence[int], at: int, p: int) -> list[int]:
    """Weights w_i with q(at) = sum(w_i * y_i) for any q of degree < len(xs)."""
    xs = [x % p for x in xs]
    if len(set(xs)) != len(xs):
        raise FieldError("duplicate x-coordinates")
    weights = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i != j:
                num = num * (at - xj) % p
                den = den * (xi - xj) % p
        weights.append(num * inv_mod(den, p) % p)
    return weights


def lagrange_weights_at_zero(xs: Sequence[int], p: int) -> list[int]:
    if any(x % p == 0 for x in xs):
        raise FieldError("x-coordinate 0 is reserved for the secret")
    return lagrange_weights(xs, 0, p)


def lagrange_at_zero(points: Sequence[tuple[FieldElement, FieldElement]]) -> FieldElement:
    if not points:
        raise FieldError("interpolation needs at least one point")
    field = points[0][0].field
    for x, y in points:
        if x.field.p != field.p or y.field.p != field.p:
            raise FieldError("field mismatch among interpolation points")
    weights = lagrange_weights_at_zero([x.value for x, _ in points], field.p)
    return field(sum(w * y.value for w, (_, y) in zip(weights, points)))


def invert_matrix_mod(a: Sequence[Sequence[int]], p: int) -> list[list[int]]:
    """Gauss-Jordan inverse of a square matrix over GF(p)."""
    k = len(a)
    if any(len(row) != k for row in a):
        raise FieldError("matrix is not square")
    aug = [[v % p for v in row] + [int(i == r) for i in range(k)] for r, row in enumerate(a)]
    for col in range(k):
        pivot = next((r for r in range(col, k) if aug[r][col]), None)
        if pivot is None:
            raise SingularMatrixError("determinant is zero mod p")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = inv_mod(aug[col][col], p)
        aug[col] = [v * inv % p for v in aug[col]]
        for r in range(k):
            if r != col and aug[r][col]:
                f = aug[r][col]
                aug[r] = [(v - f * w) % p for v, w in zip(aug[r], aug[col])]
    return [row[k:] for row in aug]


def solve_mod(a: Sequence[Sequence[int]], b: Sequence[int], p: int) -> list[int]:
    k = len(a)
    if len(b) != k:
        raise FieldError("right-hand side length does not match matrix")
    if any(len(row) != k for row in a):
        raise FieldError("matrix is not square")
    aug = [[v % p for v in row] + [bi % p] for row, bi in zip(a, b)]
    for col in range(k):
        pivot = next((r for r in range(col, k) if aug[r][col]), None)
        if pivot is None:
            raise SingularMatrixError("determinant is zero mod p")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = inv_mod(aug[col][col], p)
        aug[col] = [v * inv % p for v in aug[col]]
        for r in range(k):
            if r != col and aug[r][col]:
                f = aug[r][col]
                aug[r] = [(v - f * w) % p for v, w in zip(aug[r], aug[col])]
    return [row[k] for row in aug]


def is_singular_mod(a: Sequence[Sequence[int]], p: int) -> bool:
    try:
        invert_matrix_mod(a, p)
    except SingularMatrixError:
        return True
    return False


def solve_linear_system(
    a: Sequence[Sequence[FieldElement]], b: Sequence[FieldElement]
) -> list[FieldElement]:
    if not a:
        raise FieldError("empty system")
    field = a[0][0].field
    for v in (*(e for row in a for e in row), *b):
        if v.field.p != field.p:
            raise FieldError("field mismatch in linear system")
    x = solve_mod([[e.value for e in row] for row in a], [e.value for e in b], field.p)
    return [field(v) for v in x]

"""Exact enumeration checks for denoising finite observation alphabets.

A distribution over symbols {0..N-1} is pushed through bijective noise
functions; two noise functions are indistinguishable from unpaired samples
exactly when their pushforwards coincide. This module verifies, by brute
force over all Dirac hypothesis pairs, that the minimizers of the
distribution-matching divergence are precisely the inverses of those
indistinguishable noise functions, that their number is the product of
factorials of equal-probability multiplicities, and that attaching rewards
shrinks the indistinguishable set.

Probabilities built from integer ratios are kept as exact rationals so
every comparison is exact; float vectors fall back to a 1e-12 tolerance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

FLOAT_TOL = 1e-12
ENUMERATION_LIMIT = 8     # permutations: N! up to 8!
SOLUTION_LIMIT = 5        # map pairs: N^N * N^N up to 5^5 * 5^5

Prob = Union[Fraction, float]


class EnumerationBudgetError(ValueError):
    """Alphabet too large for the requested exhaustive enumeration."""


def _prob_equal(a: Prob, b: Prob) -> bool:
    if isinstance(a, Fraction) and isinstance(b, Fraction):
        return a == b
    return abs(float(a) - float(b)) <= FLOAT_TOL


@dataclass(frozen=True)
class ProbVector:
    """Strictly positive probabilities over the alphabet {0..N-1}."""

    probs: tuple

    def __post_init__(self):
        if len(self.probs) == 0:
            raise ValueError("empty probability vector")
        for v in self.probs:
            if not isinstance(v, (Fraction, float, int)):
                raise TypeError(f"probability entries must be Fraction or float, got {type(v)}")
            if v <= 0:
                raise ValueError(f"probabilities must be strictly positive, got {v}")
        total = sum(self.probs)
        if self.is_exact:
            if total != 1:
                raise ValueError(f"exact probabilities must sum to 1, got {total}")
        elif abs(float(total) - 1.0) > FLOAT_TOL:
            raise ValueError(f"probabilities must sum to 1 within {FLOAT_TOL}, got {float(total)}")

    @classmethod
    def from_ratios(cls, numerators: Sequence[int], denominator: Optional[int] = None) -> "ProbVector":
        den = sum(numerators) if denominator is None else denominator
        return cls(tuple(Fraction(k, den) for k in numerators))

    @classmethod
    def from_floats(cls, values: Sequence[float]) -> "ProbVector":
        return cls(tuple(float(v) for v in values))

    @property
    def n(self) -> int:
        return len(self.probs)

    @property
    def is_exact(self) -> bool:
        return all(isinstance(v, Fraction) for v in self.probs)

    def as_floats(self) -> np.ndarray:
        return np.array([float(v) for v in self.probs], dtype=np.float64)

    def numerators(self) -> tuple[np.ndarray, int]:
        """Integer numerators over the least common denominator (exact vectors only)."""
        if not self.is_exact:
            raise ValueError("numerators() requires an exact probability vector")
        den = 1
        for v in self.probs:
            den = den * v.denominator // math.gcd(den, v.denominator)
        nums = np.array([int(v * den) for v in self.probs], dtype=np.int64)
        return nums, den


@dataclass(frozen=True)
class NoiseFunctionDiscrete:
    """A bijection clean index -> cluttered index over a shared alphabet."""

    mapping: tuple

    def __post_init__(self):
        if tuple(sorted(self.mapping)) != tuple(range(len(self.mapping))):
            raise ValueError(f"mapping {self.mapping} is not a bijection")

    @property
    def n(self) -> int:
        return len(self.mapping)

    def __call__(self, o: int) -> int:
        return self.mapping[o]

    @classmethod
    def identity(cls, n: int) -> "NoiseFunctionDiscrete":
        return cls(tuple(range(n)))

    def inverse(self) -> "NoiseFunctionDiscrete":
        inv = [0] * self.n
        for o, on in enumerate(self.mapping):
            inv[on] = o
        return NoiseFunctionDiscrete(tuple(inv))


@dataclass(frozen=True)
class DiracMap:
    """A total (not necessarily injective) map over the alphabet."""

    mapping: tuple

    def __post_init__(self):
        n = len(self.mapping)
        for v in self.mapping:
            if not (0 <= v < n):
                raise ValueError(f"mapping value {v} outside alphabet of size {n}")

    @property
    def n(self) -> int:
        return len(self.mapping)

    def __call__(self, o: int) -> int:
        return self.mapping[o]

    def is_injective(self) -> bool:
        return len(set(self.mapping)) == self.n


def _check_sizes(*sized) -> int:
    ns = {s.n for s in sized}
    if len(ns) != 1:
        raise ValueError(f"alphabet sizes differ: {sorted(ns)}")
    return ns.pop()


def pushforward(p: ProbVector, f: NoiseFunctionDiscrete) -> ProbVector:
    """Distribution of f(o) when o ~ p: result[f(o)] = p[o]."""
    n = _check_sizes(p, f)
    out: list = [None] * n
    for o in range(n):
        out[f(o)] = p.probs[o]
    return ProbVector(tuple(out))


def is_homogeneous(p: ProbVector, f1: NoiseFunctionDiscrete,
                   f2: NoiseFunctionDiscrete) -> bool:
    """True when f1 and f2 push p to the same cluttered distribution."""
    _check_sizes(p, f1, f2)
    a = pushforward(p, f1)
    b = pushforward(p, f2)
    return all(_prob_equal(x, y) for x, y in zip(a.probs, b.probs))


def enumerate_homogeneous(p: ProbVector, f_n: NoiseFunctionDiscrete) -> list[NoiseFunctionDiscrete]:
    """All bijections indistinguishable from f_n under p, in sorted order."""
    n = _check_sizes(p, f_n)
    if n > ENUMERATION_LIMIT:
        raise EnumerationBudgetError(
            f"alphabet size {n} exceeds the enumeration budget of {ENUMERATION_LIMIT}")
    target = pushforward(p, f_n).probs
    found = []
    for perm in itertools.permutations(range(n)):
        # pushforward condition: p[o] == target[perm[o]] for every o
        if all(_prob_equal(p.probs[o], target[perm[o]]) for o in range(n)):
            found.append(NoiseFunctionDiscrete(perm))
    found.sort(key=lambda f: f.mapping)
    return found


def homogeneous_count_formula(p: ProbVector) -> int:
    """Product of K_j! over the multiplicities K_j of equal-probability groups."""
    remaining = list(p.probs)
    result = 1
    while remaining:
        head = remaining[0]
        group = [v for v in remaining if _prob_equal(head, v)]
        remaining = [v for v in remaining if not _prob_equal(head, v)]
        result *= math.factorial(len(group))
    return result


def posterior_denoise(f_n: NoiseFunctionDiscrete) -> DiracMap:
    """The exact denoiser for a bijective noise function: its inverse."""
    return DiracMap(f_n.inverse().mapping)


def exact_lkl(p: ProbVector, f_n: NoiseFunctionDiscrete,
              q_de: DiracMap, q_n: DiracMap) -> float:
    """Divergence between the two Dirac-coupled joints; 0 iff they coincide.

    Returns +inf when some reachable cluttered symbol has zero mass under
    the reverse coupling, exact 0.0 when the joints coincide, and a
    strictly positive float otherwise.
    """
    n = _check_sizes(p, f_n, q_de, q_n)
    pn = pushforward(p, f_n).probs
    coincide = True
    acc = 0.0
    for on in range(n):
        o = q_de(on)
        if q_n(o) != on:
            return math.inf
        if not _prob_equal(pn[on], p.probs[o]):
            coincide = False
            acc += float(pn[on]) * math.log(float(pn[on]) / float(p.probs[o]))
    return 0.0 if coincide else acc


def _prob_array(p: ProbVector) -> np.ndarray:
    if p.is_exact:
        nums, _ = p.numerators()
        return nums
    return p.as_floats()


def _array_equal_rows(values: np.ndarray, target: np.ndarray, exact: bool) -> np.ndarray:
    if exact:
        return (values == target).all(axis=1)
    return (np.abs(values - target) <= FLOAT_TOL).all(axis=1)


def _all_maps(n: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n), repeat=n)), dtype=np.int64)


def _zero_attaining(p: ProbVector, f_n: NoiseFunctionDiscrete):
    """Brute force over all N^N x N^N map pairs; yields the zero-divergence set.

    Returns (maps, q_de_indices, pairs) where pairs maps a q_de row index to
    the q_n row indices attaining exact zero with it.
    """
    n = _check_sizes(p, f_n)
    if n > SOLUTION_LIMIT:
        raise EnumerationBudgetError(
            f"alphabet size {n} exceeds the map-pair enumeration budget of {SOLUTION_LIMIT}")
    maps = _all_maps(n)
    parr = _prob_array(p)
    pn = np.empty_like(parr)
    pn[list(f_n.mapping)] = parr
    exact = p.is_exact
    # mass condition per q_de: p[q_de(on)] == p_n(on) for every on
    mass_ok = _array_equal_rows(parr[maps], pn[None, :], exact)
    idx = np.arange(n)
    zero_de: list[int] = []
    pairs: dict[int, np.ndarray] = {}
    for m in np.flatnonzero(mass_ok):
        # support condition per q_n: q_n(q_de(on)) == on for every on
        inv_ok = (maps[:, maps[m]] == idx[None, :]).all(axis=1)
        if inv_ok.any():
            zero_de.append(int(m))
            pairs[int(m)] = np.flatnonzero(inv_ok)
    return maps, zero_de, pairs


def solution_set(p: ProbVector, f_n: NoiseFunctionDiscrete) -> list[DiracMap]:
    """Denoising maps attaining the global divergence minimum, by brute force.

    The minimum over all map pairs must be exactly zero; anything else
    would contradict the constructive inverse achieving it.
    """
    maps, zero_de, _ = _zero_attaining(p, f_n)
    if not zero_de:
        raise RuntimeError("global minimum is not zero: no map pair attains it")
    out = [DiracMap(tuple(int(v) for v in maps[m])) for m in zero_de]
    out.sort(key=lambda d: d.mapping)
    return out


def minimizing_pairs(p: ProbVector, f_n: NoiseFunctionDiscrete) -> list[tuple[DiracMap, DiracMap]]:
    """All (q_de, q_n) map pairs attaining the zero minimum, in sorted order."""
    maps, zero_de, pairs = _zero_attaining(p, f_n)
    result = []
    for m in zero_de:
        de = DiracMap(tuple(int(v) for v in maps[m]))
        for k in pairs[m]:
            result.append((de, DiracMap(tuple(int(v) for v in maps[k]))))
    result.sort(key=lambda pair: (pair[0].mapping, pair[1].mapping))
    return result


def solution_set_reference(p: ProbVector, f_n: NoiseFunctionDiscrete) -> list[DiracMap]:
    """Scalar double loop over all map pairs; slow cross-check for small N."""
    n = _check_sizes(p, f_n)
    if n > 4:
        raise EnumerationBudgetError("reference double loop is restricted to N <= 4")
    all_maps = [DiracMap(m) for m in itertools.product(range(n), repeat=n)]
    best = math.inf
    argmins: list[DiracMap] = []
    for q_de in all_maps:
        value = min(exact_lkl(p, f_n, q_de, q_n) for q_n in all_maps)
        if value < best - FLOAT_TOL:
            best = value
            argmins = [q_de]
        elif value <= best + FLOAT_TOL:
            argmins.append(q_de)
    if best != 0.0:
        raise RuntimeError(f"global minimum is {best}, expected exactly 0")
    argmins.sort(key=lambda d: d.mapping)
    return argmins


# ---------------------------------------------------------------------------
# joint observation-reward alphabets

@dataclass(frozen=True)
class RewardedProbVector:
    """Joint probability table over (observation index, reward index)."""

    joint: tuple  # rows: observations, columns: rewards

    def __post_init__(self):
        total = sum(sum(row) for row in self.joint)
        widths = {len(row) for row in self.joint}
        if len(widths) != 1:
            raise ValueError("ragged joint table")
        for row in self.joint:
            for v in row:
                if v < 0:
                    raise ValueError(f"negative joint probability {v}")
        if isinstance(total, Fraction):
            if total != 1:
                raise ValueError(f"joint table must sum to 1, got {total}")
        elif abs(float(total) - 1.0) > FLOAT_TOL:
            raise ValueError(f"joint table must sum to 1, got {float(total)}")

    @property
    def n_obs(self) -> int:
        return len(self.joint)

    @property
    def n_rew(self) -> int:
        return len(self.joint[0])

    def obs_marginal(self) -> ProbVector:
        return ProbVector(tuple(sum(row) for row in self.joint))

    def pushforward_obs(self, f: NoiseFunctionDiscrete) -> "RewardedProbVector":
        if f.n != self.n_obs:
            raise ValueError("alphabet size mismatch")
        rows: list = [None] * self.n_obs
        for o in range(self.n_obs):
            rows[f(o)] = self.joint[o]
        return RewardedProbVector(tuple(rows))

    def equals(self, other: "RewardedProbVector") -> bool:
        return all(
            _prob_equal(a, b)
            for ra, rb in zip(self.joint, other.joint)
            for a, b in zip(ra, rb))


def rewarded_homogeneous(joint: RewardedProbVector,
                         f_n: NoiseFunctionDiscrete) -> list[NoiseFunctionDiscrete]:
    """Bijections whose pushforward matches f_n's on the (obs, reward) joint."""
    n = joint.n_obs
    if n > ENUMERATION_LIMIT:
        raise EnumerationBudgetError(
            f"alphabet size {n} exceeds the enumeration budget of {ENUMERATION_LIMIT}")
    target = joint.pushforward_obs(f_n)
    out = [NoiseFunctionDiscrete(perm)
           for perm in itertools.permutations(range(n))
           if joint.pushforward_obs(NoiseFunctionDiscrete(perm)).equals(target)]
    out.sort(key=lambda f: f.mapping)
    return out


@dataclass(frozen=True)
class RewardHomogeneityReport:
    marginal_count: int
    with_rewards_count: int
    marginal_functions: tuple
    with_rewards_functions: tuple
    swapped_marginal_count: int
    swapped_with_rewards_count: int


def reward_homogeneity_demo() -> RewardHomogeneityReport:
    """Two equiprobable observations, each welded to its own reward.

    On observation marginals alone both the identity and the swap are
    indistinguishable; once rewards are attached only the identity
    survives. Swapping which reward pairs with which observation leaves
    both counts unchanged.
    """
    half = Fraction(1, 2)
    zero = Fraction(0)
    joint = RewardedProbVector(((half, zero), (zero, half)))
    f_n = NoiseFunctionDiscrete.identity(2)

    marginal = enumerate_homogeneous(joint.obs_marginal(), f_n)
    with_rewards = rewarded_homogeneous(joint, f_n)

    swapped = RewardedProbVector(((zero, half), (half, zero)))
    swapped_marginal = enumerate_homogeneous(swapped.obs_marginal(), f_n)
    swapped_with_rewards = rewarded_homogeneous(swapped, f_n)

    return RewardHomogeneityReport(
        marginal_count=len(marginal),
        with_rewards_count=len(with_rewards),
        marginal_functions=tuple(f.mapping for f in marginal),
        with_rewards_functions=tuple(f.mapping for f in with_rewards),
        swapped_marginal_count=len(swapped_marginal),
        swapped_with_rewards_count=len(swapped_with_rewards),
    )


# ---------------------------------------------------------------------------
# verification grid

def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All tuples of `parts` positive integers summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for head in range(1, total - parts + 2):
        for rest in compositions(total - head, parts - 1):
            yield (head,) + rest


def grid_vectors(n: int, denominator: int = 8) -> list[ProbVector]:
    return [ProbVector.from_ratios(nums, denominator)
            for nums in compositions(denominator, n)]


def _fn_samples(n: int, exhaustive_limit: int = 4, extra: int = 3) -> list[NoiseFunctionDiscrete]:
    if n <= exhaustive_limit:
        return [NoiseFunctionDiscrete(perm) for perm in itertools.permutations(range(n))]
    rng = np.random.default_rng(n)
    picks = [tuple(range(n)), tuple(reversed(range(n)))]
    while len(picks) < 2 + extra:
        cand = tuple(int(v) for v in rng.permutation(n))
        if cand not in picks:
            picks.append(cand)
    return [NoiseFunctionDiscrete(m) for m in picks]


def run_verification(solution_ns: Sequence[int] = (2, 3, 4),
                     counting_ns: Sequence[int] = (2, 3, 4, 5, 6),
                     denominator: int = 8,
                     corrupt_formula: bool = False) -> dict:
    """Full grid check: solution-set equivalence, counts, injectivity, rewards.

    ``corrupt_formula`` deliberately breaks the counting formula; it exists
    as a negative control so a failing report is demonstrably reachable.
    """
    instances = []
    all_pass = True

    for n in solution_ns:
        for p in grid_vectors(n, denominator):
            for f_n in (NoiseFunctionDiscrete(perm)
                        for perm in itertools.permutations(range(n))):
                hom = enumerate_homogeneous(p, f_n)
                formula = homogeneous_count_formula(p)
                if corrupt_formula:
                    formula += 1
                sol = solution_set(p, f_n)
                predicted = sorted((posterior_denoise(f) for f in hom),
                                   key=lambda d: d.mapping)
                pairs = minimizing_pairs(p, f_n)
                inj = all(de.is_injective() and qn.is_injective() for de, qn in pairs)
                entry = {
                    "n": n,
                    "p": [str(v) for v in p.probs],
                    "f_n": list(f_n.mapping),
                    "homogeneous_count": len(hom),
                    "formula_count": formula,
                    "solution_set_size": len(sol),
                    "counts_match": len(hom) == formula,
                    "solution_matches_inverses": sol == predicted,
                    "minimizers_injective": inj,
                }
                ok = entry["counts_match"] and entry["solution_matches_inverses"] and inj
                entry["pass"] = ok
                all_pass = all_pass and ok
                instances.append(entry)

    counting = []
    for n in counting_ns:
        for p in grid_vectors(n, denominator):
            formula = homogeneous_count_formula(p)
            if corrupt_formula:
                formula += 1
            counts = [len(enumerate_homogeneous(p, f_n)) for f_n in _fn_samples(n)]
            ok = all(c == formula for c in counts)
            counting.append({
                "n": n,
                "p": [str(v) for v in p.probs],
                "formula_count": formula,
                "counts_by_fn": counts,
                "pass": ok,
            })
            all_pass = all_pass and ok

    demo = reward_homogeneity_demo()
    demo_ok = (demo.marginal_count == 2 and demo.with_rewards_count == 1
               and demo.swapped_marginal_count == 2
               and demo.swapped_with_rewards_count == 1)
    all_pass = all_pass and demo_ok

    return {
        "pass": all_pass,
        "solution_instances": instances,
        "counting_instances": counting,
        "reward_demo": {
            "marginal_count": demo.marginal_count,
            "with_rewards_count": demo.with_rewards_count,
            "swapped_marginal_count": demo.swapped_marginal_count,
            "swapped_with_rewards_count": demo.swapped_with_rewards_count,
            "pass": demo_ok,
        },
    }

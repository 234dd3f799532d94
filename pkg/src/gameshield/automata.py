"""Total DFAs over interval-labelled scalar outputs.

The safety property is "the DFA never reaches an accepting state" over the
first H outputs: accepting states collect exactly the prefixes that already
violate the property, so they must be absorbing, which is enforced at load.
Labels are intervals partitioning the real output axis; a label may own
several disjoint intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class IntervalPiece:
    label: str
    lo: float
    hi: float
    lo_closed: bool
    hi_closed: bool

    def contains(self, y: float) -> bool:
        if y < self.lo or y > self.hi:
            return False
        if y == self.lo and not self.lo_closed:
            return False
        if y == self.hi and not self.hi_closed:
            return False
        return True

    def intersects_window(self, a: float, b: float) -> bool:
        """Nonempty intersection with the closed window [a, b]."""
        left_ok = self.lo < b or (self.lo == b and self.lo_closed)
        right_ok = self.hi > a or (self.hi == a and self.hi_closed)
        return left_ok and right_ok


@dataclass(frozen=True)
class IntervalLabelling:
    """Ordered interval pieces partitioning the real line."""

    pieces: tuple

    def __post_init__(self):
        ps = tuple(sorted(self.pieces, key=lambda p: (p.lo, not p.lo_closed)))
        object.__setattr__(self, "pieces", ps)
        if not ps:
            raise ConfigError("labelling has no intervals")
        first, last = ps[0], ps[-1]
        if not (math.isinf(first.lo) and first.lo < 0) or first.lo_closed:
            raise ConfigError("labelling must start at (-inf")
        if not (math.isinf(last.hi) and last.hi > 0) or last.hi_closed:
            raise ConfigError("labelling must end at inf)")
        for p in ps:
            if p.lo > p.hi or (p.lo == p.hi and not (p.lo_closed and p.hi_closed)):
                raise ConfigError(f"empty interval for label {p.label}")
        for a, b in zip(ps, ps[1:]):
            if a.hi != b.lo:
                raise ConfigError(
                    f"labelling gap/overlap between {a.label} and {b.label}: {a.hi} vs {b.lo}")
            if a.hi_closed == b.lo_closed:
                raise ConfigError(
                    f"shared endpoint {a.hi} must be closed on exactly one side "
                    f"({a.label}/{b.label})")

    @property
    def labels(self) -> set:
        return {p.label for p in self.pieces}


def label(labelling: IntervalLabelling, y: float) -> str:
    """The unique label whose interval contains y."""
    for p in labelling.pieces:
        if p.contains(y):
            return p.label
    raise AssertionError(f"labelling does not cover y={y}")  # unreachable by invariant


def labels_within(labelling: IntervalLabelling, y_hat: float, eps: float) -> set:
    """All labels attainable by outputs within distance eps of y_hat."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    a, b = y_hat - eps, y_hat + eps
    return {p.label for p in labelling.pieces if p.intersects_window(a, b)}


@dataclass(frozen=True)
class Dfa:
    """Total DFA with absorbing accepting states (bad-prefix semantics)."""

    states: tuple          # state names
    q0: int                # initial state index
    alphabet: tuple        # label names
    delta: dict            # (state index, label) -> state index, total
    accepting: frozenset   # accepting state indices
    state_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        object.__setattr__(self, "accepting", frozenset(self.accepting))
        object.__setattr__(self, "state_index", {s: i for i, s in enumerate(self.states)})
        n = len(self.states)
        if not (0 <= self.q0 < n):
            raise ConfigError("initial state out of range")
        for q in range(n):
            for pi in self.alphabet:
                if (q, pi) not in self.delta:
                    raise ConfigError(f"DFA not total: missing transition ({self.states[q]}, {pi})")
                tgt = self.delta[(q, pi)]
                if not (0 <= tgt < n):
                    raise ConfigError(f"transition target out of range for ({self.states[q]}, {pi})")
        for q in self.accepting:
            for pi in self.alphabet:
                if self.delta[(q, pi)] != q:
                    raise ConfigError(
                        f"accepting state {self.states[q]} not absorbing on {pi}; "
                        "bad-prefix specs require absorbing accepting states")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def is_accepting(self, q: int) -> bool:
        return q in self.accepting


def dfa_step(dfa: Dfa, q: int, pi: str) -> int:
    """One transition; unknown state or label raises."""
    if not (0 <= q < dfa.n_states):
        raise IndexError(f"unknown DFA state index {q}")
    try:
        return dfa.delta[(q, pi)]
    except KeyError:
        raise IndexError(f"unknown label {pi!r}") from None


def reachable_dfa_states(dfa: Dfa, labelling: IntervalLabelling, q: int,
                         y_hat: float, eps: float) -> set:
    """DFA states reachable from q under any label within eps of y_hat."""
    return {dfa_step(dfa, q, pi) for pi in labels_within(labelling, y_hat, eps)}


@dataclass(frozen=True)
class SafetySpec:
    dfa: Dfa
    labelling: IntervalLabelling
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        missing = self.labelling.labels - set(self.dfa.alphabet)
        if missing:
            raise ConfigError(f"labelling uses labels outside the DFA alphabet: {missing}")
        uncovered = set(self.dfa.alphabet) - self.labelling.labels
        if uncovered:
            raise ConfigError(f"alphabet labels with no interval: {uncovered}")


def trace_accepted(spec: SafetySpec, outputs) -> bool:
    """True iff the label trace of the outputs drives the DFA into F.

    Accepting states are absorbing, so hitting F at any prefix is equivalent
    to ending in F after all H outputs.
    """
    outputs = list(outputs)
    if len(outputs) != spec.horizon:
        raise ValueError(f"expected {spec.horizon} outputs, got {len(outputs)}")
    q = spec.dfa.q0
    for y in outputs:
        q = dfa_step(spec.dfa, q, label(spec.labelling, float(y)))
        if spec.dfa.is_accepting(q):
            return True
    return False


# ---------------------------------------------------------------------------
# DFA file format: line-oriented text.
#
#   states q0 q1
#   initial q0
#   accepting q1
#   alphabet p1 p2
#   interval p1 [-0.5 0.5]
#   interval p2 (-inf -0.5)
#   interval p2 (0.5 inf)
#   trans q0 p1 q0
#   ...
#
# Interval brackets mark closed "[ ]" / open "( )" endpoints; inf/-inf allowed.
# ---------------------------------------------------------------------------

def _parse_interval(token_lo: str, token_hi: str):
    lo_closed = token_lo.startswith("[")
    hi_closed = token_hi.endswith("]")
    if token_lo[0] not in "([" or token_hi[-1] not in ")]":
        raise ConfigError(f"bad interval brackets: {token_lo} {token_hi}")
    lo = float(token_lo[1:])
    hi = float(token_hi[:-1])
    return lo, hi, lo_closed, hi_closed


def parse_dfa_text(text: str):
    """Parse the DFA file format; returns (Dfa, IntervalLabelling)."""
    states = None
    initial = None
    accepting = []
    alphabet = None
    pieces = []
    trans = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "states":
                states = parts[1:]
            elif kind == "initial":
                (initial,) = parts[1:]
            elif kind == "accepting":
                accepting = parts[1:]
            elif kind == "alphabet":
                alphabet = parts[1:]
            elif kind == "interval":
                lbl = parts[1]
                lo, hi, lc, hc = _parse_interval(parts[2], parts[3])
                pieces.append(IntervalPiece(lbl, lo, hi, lc, hc))
            elif kind == "trans":
                src, lbl, dst = parts[1:]
                trans.append((src, lbl, dst))
            else:
                raise ConfigError(f"unknown directive {kind!r}")
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"DFA file line {lineno}: {raw!r}: {exc}") from exc
    if states is None or initial is None or alphabet is None:
        raise ConfigError("DFA file must declare states, initial and alphabet")
    index = {s: i for i, s in enumerate(states)}
    if initial not in index:
        raise ConfigError(f"initial state {initial!r} not in states")
    for s in accepting:
        if s not in index:
            raise ConfigError(f"accepting state {s!r} not in states")
    delta = {}
    for src, lbl, dst in trans:
        for name, val in (("source", src), ("target", dst)):
            if val not in index and name != "label":
                if val not in index:
                    raise ConfigError(f"transition {name} state {val!r} not in states")
        if lbl not in alphabet:
            raise ConfigError(f"transition label {lbl!r} not in alphabet")
        key = (index[src], lbl)
        if key in delta:
            raise ConfigError(f"duplicate transition for ({src}, {lbl})")
        delta[key] = index[dst]
    dfa = Dfa(states=tuple(states), q0=index[initial], alphabet=tuple(alphabet),
              delta=delta, accepting=frozenset(index[s] for s in accepting))
    labelling = IntervalLabelling(pieces=tuple(pieces))
    return dfa, labelling


def load_dfa_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dfa_text(fh.read())

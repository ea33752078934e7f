"""Ground-truth trace analysis: period classification and property checking.

Works on complete traces with an omniscient view. A round is *stable* when
every vehicle ended it holding every member's message (reconstructed from the
ack snapshots that each vehicle emits on entering the next round); otherwise
it is unstable. The three checkers verify, over maximal stable/unstable
periods, that disagreement is confined to single isolated rounds, that
unstable periods settle on the default value, and that stable periods carry
uniform non-default decisions after a two-round prefix.

Conventions: the decision "at round t" is the one emitted on entering round
t (it is used during round t). Round 0 produces no decision. The trailing
round whose end is not visible in the trace is excluded and counted in
``RoundView.truncated_outputs``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .protocol import Datum, is_default
from .sim import OutputEvent, Trace


class AnalysisError(ValueError):
    """Raised for traces that cannot be classified (malformed or empty)."""


@dataclass(frozen=True)
class RoundClass:
    """Classification of one completed round."""

    round: int
    stable: bool
    failed: frozenset  # vehicles that ended the round missing at least one ack

    def __post_init__(self) -> None:
        assert self.stable == (not self.failed)


@dataclass(frozen=True)
class Period:
    """Maximal run of equally-classified rounds; kind is 'stable' or 'unstable'."""

    kind: str
    start: int
    end: int
    maximal: bool = True


@dataclass(frozen=True)
class CheckCounterexample:
    round: int
    decisions: tuple
    note: str

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "decisions": [None if is_default(d) else repr(d) for d in self.decisions],
            "note": self.note,
        }


@dataclass
class PropertyReport:
    property_id: str
    passed: bool
    counterexample: Optional[CheckCounterexample] = None
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        assert self.passed == (self.counterexample is None)

    def to_json(self) -> dict:
        out = {"property": self.property_id, "passed": self.passed}
        out.update(self.details)
        if self.counterexample is not None:
            out["counterexample"] = self.counterexample.to_json()
        return out


@dataclass
class RoundView:
    """Per-round tables extracted from a trace.

    ``decisions[t-1]`` is the n-vector entering round t, for t in 1..rounds.
    ``end_acks[r]`` holds each vehicle's ack snapshot at the end of round r,
    for r in 0..rounds-1 (so there are ``rounds`` completed rounds).
    """

    n: int
    rounds: int
    decisions: list[tuple]
    end_acks: list[tuple]
    truncated_outputs: int = 0


def round_view(trace: Trace) -> RoundView:
    n = trace.config.protocol.n
    per_vehicle: list[dict[int, OutputEvent]] = [dict() for _ in range(n)]
    for ev in trace.events:
        if isinstance(ev, OutputEvent):
            per_vehicle[ev.vehicle - 1][ev.output.round] = ev
    tops = []
    for vid, outs in enumerate(per_vehicle, start=1):
        if not outs:
            tops.append(0)
            continue
        top = max(outs)
        if sorted(outs) != list(range(1, top + 1)):
            raise AnalysisError(f"vehicle {vid} has non-consecutive output rounds")
        tops.append(top)
    rounds = min(tops)
    truncated = sum(top - rounds for top in tops)
    decisions = [
        tuple(per_vehicle[i][t].output.decision for i in range(n))
        for t in range(1, rounds + 1)
    ]
    end_acks = [
        tuple(per_vehicle[i][r + 1].output.r for i in range(n))
        for r in range(rounds)
    ]
    return RoundView(n=n, rounds=rounds, decisions=decisions,
                     end_acks=end_acks, truncated_outputs=truncated)


def _as_view(trace_or_view: Union[Trace, RoundView]) -> RoundView:
    if isinstance(trace_or_view, RoundView):
        return trace_or_view
    return round_view(trace_or_view)


def classify_rounds(trace_or_view: Union[Trace, RoundView]) -> list[RoundClass]:
    """Stable/unstable classification for every completed round."""
    view = _as_view(trace_or_view)
    classes = []
    for r, acks in enumerate(view.end_acks):
        failed = frozenset(
            vid for vid, snapshot in enumerate(acks, start=1) if not all(snapshot)
        )
        classes.append(RoundClass(round=r, stable=not failed, failed=failed))
    return classes


def maximal_periods(classes: Sequence[RoundClass]) -> list[Period]:
    """Run-length encode the stable flags into maximal alternating periods."""
    periods: list[Period] = []
    for cls in classes:
        kind = "stable" if cls.stable else "unstable"
        if periods and periods[-1].kind == kind:
            periods[-1] = Period(kind, periods[-1].start, cls.round)
        else:
            periods.append(Period(kind, cls.round, cls.round))
    return periods


def _split(row: tuple) -> bool:
    first = row[0]
    return any(d != first for d in row[1:])


def check_bounded_uncertainty(trace_or_view: Union[Trace, RoundView]) -> PropertyReport:
    """Disagreement rounds are isolated and pinned to the start of unstable periods.

    Fails if two consecutive rounds both show split decisions, or if a split
    happens at any round other than r1+1 for a maximal unstable period
    starting at r1.
    """
    pid = "P3-bounded-uncertainty"
    view = _as_view(trace_or_view)
    classes = classify_rounds(view)
    split_rounds = [t for t in range(1, view.rounds + 1) if _split(view.decisions[t - 1])]
    split_set = set(split_rounds)
    for t in split_rounds:
        if t + 1 in split_set:
            return PropertyReport(pid, False, CheckCounterexample(
                t + 1, view.decisions[t], "consecutive disagreement rounds"))
        starts_unstable = not classes[t - 1].stable and (t - 1 == 0 or classes[t - 2].stable)
        if not starts_unstable:
            return PropertyReport(pid, False, CheckCounterexample(
                t, view.decisions[t - 1],
                "disagreement not at the first round after an unstable period began"))
    return PropertyReport(pid, True, details={"disagreement_rounds": split_rounds})


def check_disagreement_correction(trace_or_view: Union[Trace, RoundView]) -> PropertyReport:
    """Every maximal unstable period [r1, r2] forces all-default decisions on [r1+2, r2+1]."""
    pid = "P2-correction"
    view = _as_view(trace_or_view)
    periods = maximal_periods(classify_rounds(view))
    for p in periods:
        if p.kind != "unstable":
            continue
        for t in range(max(p.start + 2, 1), min(p.end + 1, view.rounds) + 1):
            row = view.decisions[t - 1]
            if any(not is_default(d) for d in row):
                return PropertyReport(pid, False, CheckCounterexample(
                    t, row, f"non-default decision inside correction span of [{p.start},{p.end}]"))
    return PropertyReport(pid, True)


def check_certainty(trace_or_view: Union[Trace, RoundView]) -> PropertyReport:
    """Agreement through recovery, and non-default decisions after a stable prefix.

    For each maximal unstable period [r1, r2] followed by a maximal stable
    period [r2+1, r3], decisions must agree across vehicles on every round in
    [r1+2, r3+1]; a run that starts stable must agree from round 1. Within
    every maximal stable period [a, b], decisions must be non-default on
    [a+2, b+1] (round 1 is startup and exempt; the measured prefix length is
    reported). Assumes the application never reads a default state.
    """
    pid = "P1-certainty"
    view = _as_view(trace_or_view)
    periods = maximal_periods(classify_rounds(view))

    spans = []
    if periods and periods[0].kind == "stable":
        # Startup behaves like a freshly recovered period: agreement from round 1.
        spans.append((1, periods[0].end + 1))
    for i, p in enumerate(periods):
        if p.kind != "unstable":
            continue
        r3 = periods[i + 1].end if i + 1 < len(periods) else p.end
        spans.append((p.start + 2, r3 + 1))
    for lo, hi in spans:
        for t in range(max(lo, 1), min(hi, view.rounds) + 1):
            row = view.decisions[t - 1]
            if _split(row):
                return PropertyReport(pid, False, CheckCounterexample(
                    t, row, "vehicles used different values inside a certainty span"))

    max_prefix = 0
    for p in periods:
        if p.kind != "stable":
            continue
        lo, hi = p.start + 1, min(p.end + 1, view.rounds)
        prefix = 0
        for t in range(lo, hi + 1):
            if all(not is_default(d) for d in view.decisions[t - 1]):
                break
            prefix += 1
        max_prefix = max(max_prefix, prefix)
        for t in range(max(p.start + 2, 2), hi + 1):
            row = view.decisions[t - 1]
            if any(is_default(d) for d in row):
                return PropertyReport(pid, False, CheckCounterexample(
                    t, row, f"default decision past the prefix of stable period [{p.start},{p.end}]"))
    return PropertyReport(pid, True, details={"max_measured_prefix": max_prefix})


def run_all_checks(trace_or_view: Union[Trace, RoundView]) -> list[PropertyReport]:
    view = _as_view(trace_or_view)
    return [
        check_certainty(view),
        check_disagreement_correction(view),
        check_bounded_uncertainty(view),
    ]


def reliability(trace_or_view: Union[Trace, RoundView], highest: Datum) -> float:
    """Fraction of completed rounds in which every vehicle decided ``highest``.

    Round 0 completes without decisions, so a failure-free run scores
    (rounds - 1) / rounds.
    """
    view = _as_view(trace_or_view)
    if view.rounds == 0:
        raise AnalysisError("no completed rounds in trace")
    good = sum(
        1
        for t in range(1, view.rounds)
        if all(d == highest for d in view.decisions[t - 1])
    )
    return good / view.rounds


def effective_delivery(trace_or_view: Union[Trace, RoundView]) -> list[tuple]:
    """Per-round effective delivery matrices observed in a trace.

    Entry [j][i] of matrix r is True iff vehicle i+1 ended round r holding
    vehicle j+1's message (directly or relayed) — exactly the ack snapshot it
    reported on entering round r+1. Feeding these to the abstract model must
    reproduce the simulator's decisions round for round.
    """
    view = _as_view(trace_or_view)
    matrices = []
    for acks in view.end_acks:
        n = view.n
        matrices.append(tuple(
            tuple(acks[i][j] for i in range(n)) for j in range(n)
        ))
    return matrices


def packet_drop_rate(trace: Trace) -> float:
    """Observed drop fraction over all point-to-point transmissions."""
    drops = len(trace.drops())
    delivers = len(trace.delivers())
    if drops + delivers == 0:
        raise AnalysisError("trace contains no transmissions")
    return drops / (drops + delivers)

"""Deterministic discrete-event simulator for the round protocol.

A run drives n protocol instances over a virtual global clock. Each vehicle
sees the global clock plus a fixed per-vehicle offset; gossip broadcasts fan
out into independent point-to-point transmissions, each delivered after a
sampled delay in (0, maximum_delay] or dropped by the loss model. Every send,
delivery, drop, and round output is recorded in a trace that is a pure
function of the configuration, so any trace can be replayed bit-for-bit.

Event order is total: by time, then deliveries before application ticks
before vehicle ticks, then vehicle id, then insertion order. Per transmission
the RNG is consumed in a fixed order (delay first, then the loss decision),
one transmission per receiver in ascending id.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional, Sequence, Union

from .protocol import (
    ConfigError,
    Datum,
    GossipMessage,
    ProtocolConfig,
    RoundOutput,
    VehicleProtocol,
    is_default,
)

TRACE_FORMAT = "lockstep-trace"
TRACE_VERSION = 1


class ReplayMismatch(Exception):
    """Replay diverged from the recorded trace."""

    def __init__(self, line_no: int, expected: str, actual: str) -> None:
        super().__init__(
            f"replay diverged at line {line_no}:\n  recorded: {expected}\n  replayed: {actual}"
        )
        self.line_no = line_no
        self.expected = expected
        self.actual = actual


# ---------------------------------------------------------------------------
# Loss and delay models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropRule:
    """One adversarial drop directive; None fields are wildcards.

    Matches a transmission either by the message's round number or by its
    send time falling inside [t0, t1] (inclusive, microseconds).
    """

    round: Optional[int] = None
    t0: Optional[int] = None
    t1: Optional[int] = None
    sender: Optional[int] = None
    receiver: Optional[int] = None

    def __post_init__(self) -> None:
        has_round = self.round is not None
        has_span = self.t0 is not None and self.t1 is not None
        if has_round == has_span:
            raise ConfigError("drop rule needs exactly one of: round, [t0, t1]")

    def matches(self, msg_round: int, sender: int, receiver: int, send_time: int) -> bool:
        if self.sender is not None and self.sender != sender:
            return False
        if self.receiver is not None and self.receiver != receiver:
            return False
        if self.round is not None:
            return self.round == msg_round
        return self.t0 <= send_time <= self.t1

    def to_json(self) -> dict:
        out: dict = {
            "from": "*" if self.sender is None else self.sender,
            "to": "*" if self.receiver is None else self.receiver,
        }
        if self.round is not None:
            out["round"] = self.round
        else:
            out["t"] = [self.t0, self.t1]
        return out

    @staticmethod
    def from_json(d: dict) -> "DropRule":
        def ref(v):
            return None if v in (None, "*") else int(v)

        if "round" in d:
            return DropRule(round=int(d["round"]), sender=ref(d.get("from")), receiver=ref(d.get("to")))
        t0, t1 = d["t"]
        return DropRule(t0=int(t0), t1=int(t1), sender=ref(d.get("from")), receiver=ref(d.get("to")))


class LossModel:
    """Per-transmission omission behavior. Subclasses document their RNG draws."""

    def decide(self, rng: random.Random, msg_round: int, sender: int, receiver: int,
               send_time: int) -> Optional[str]:
        """Return a drop cause, or None to deliver."""
        raise NotImplementedError

    def validate(self, n: int) -> None:
        pass

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class BernoulliLoss(LossModel):
    """Independent drop with probability p per transmission. One RNG draw each."""

    p: float

    def validate(self, n: int) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"drop probability must be in [0,1], got {self.p}")

    def decide(self, rng, msg_round, sender, receiver, send_time):
        return "bernoulli" if rng.random() < self.p else None

    def to_json(self) -> dict:
        return {"kind": "bernoulli", "p": self.p}


class ScheduleLoss(LossModel):
    """Drops exactly the transmissions matched by a rule list. No RNG draws."""

    def __init__(self, rules: Sequence[DropRule]) -> None:
        self.rules = tuple(rules)
        self._by_round: dict[int, list[DropRule]] = {}
        self._timed: list[DropRule] = []
        for rule in self.rules:
            if rule.round is not None:
                self._by_round.setdefault(rule.round, []).append(rule)
            else:
                self._timed.append(rule)

    def validate(self, n: int) -> None:
        for rule in self.rules:
            for ref in (rule.sender, rule.receiver):
                if ref is not None and not 1 <= ref <= n:
                    raise ConfigError(f"drop rule references vehicle {ref}, valid ids are 1..{n}")

    def decide(self, rng, msg_round, sender, receiver, send_time):
        for rule in self._by_round.get(msg_round, ()):
            if rule.matches(msg_round, sender, receiver, send_time):
                return "schedule"
        for rule in self._timed:
            if rule.matches(msg_round, sender, receiver, send_time):
                return "schedule"
        return None

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ScheduleLoss) and self.rules == other.rules

    def __hash__(self) -> int:
        return hash(self.rules)

    def __repr__(self) -> str:
        return f"ScheduleLoss({len(self.rules)} rules)"

    def to_json(self) -> dict:
        return {"kind": "schedule", "rules": [r.to_json() for r in self.rules]}


@dataclass(frozen=True)
class CompositeLoss(LossModel):
    """Schedule drops on top of Bernoulli noise. Exactly one RNG draw per transmission."""

    p: float
    schedule: ScheduleLoss

    def validate(self, n: int) -> None:
        BernoulliLoss(self.p).validate(n)
        self.schedule.validate(n)

    def decide(self, rng, msg_round, sender, receiver, send_time):
        u = rng.random()  # drawn unconditionally to keep the stream aligned
        if self.schedule.decide(rng, msg_round, sender, receiver, send_time):
            return "schedule"
        return "bernoulli" if u < self.p else None

    def to_json(self) -> dict:
        return {"kind": "composite", "p": self.p, "rules": [r.to_json() for r in self.schedule.rules]}


def loss_from_json(d: dict) -> LossModel:
    kind = d["kind"]
    if kind == "bernoulli":
        return BernoulliLoss(float(d["p"]))
    if kind == "schedule":
        return ScheduleLoss([DropRule.from_json(r) for r in d["rules"]])
    if kind == "composite":
        return CompositeLoss(float(d["p"]), ScheduleLoss([DropRule.from_json(r) for r in d["rules"]]))
    raise ConfigError(f"unknown loss model kind {kind!r}")


def load_schedule(path: Union[str, Path]) -> ScheduleLoss:
    """Load an adversarial schedule file: a JSON array of drop directives."""
    rules = json.loads(Path(path).read_text())
    return ScheduleLoss([DropRule.from_json(r) for r in rules])


class DelayModel:
    def sample(self, rng: random.Random, maximum_delay: int) -> int:
        raise NotImplementedError

    def validate(self, maximum_delay: int) -> None:
        pass

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformDelay(DelayModel):
    """Uniform integer latency in [1, maximum_delay] microseconds. One RNG draw."""

    def sample(self, rng, maximum_delay):
        return 1 + int(rng.random() * maximum_delay)

    def to_json(self) -> dict:
        return {"kind": "uniform"}


@dataclass(frozen=True)
class FixedDelay(DelayModel):
    """Constant latency; handy for fully deterministic schedules. No RNG draws."""

    delay: int

    def validate(self, maximum_delay: int) -> None:
        if not 0 < self.delay <= maximum_delay:
            raise ConfigError(f"fixed delay must be in (0, {maximum_delay}], got {self.delay}")

    def sample(self, rng, maximum_delay):
        return self.delay

    def to_json(self) -> dict:
        return {"kind": "fixed", "delay": self.delay}


def delay_from_json(d: dict) -> DelayModel:
    if d["kind"] == "uniform":
        return UniformDelay()
    if d["kind"] == "fixed":
        return FixedDelay(int(d["delay"]))
    raise ConfigError(f"unknown delay model kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# Simulation configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Everything a run depends on; two equal configs produce identical traces.

    ``duration`` is a local-clock horizon: each vehicle executes every tick
    with local time <= duration. Use a multiple of round_length so the final
    round closes cleanly at every vehicle.
    """

    protocol: ProtocolConfig
    offsets: tuple[int, ...]
    loss: LossModel
    duration: int
    seed: int
    delay: DelayModel = UniformDelay()

    def __post_init__(self) -> None:
        if len(self.offsets) != self.protocol.n:
            raise ConfigError(f"expected {self.protocol.n} offsets, got {len(self.offsets)}")
        if any(o < 0 for o in self.offsets):
            raise ConfigError("clock offsets must be >= 0")
        if max(self.offsets) - min(self.offsets) > self.protocol.sync_bound:
            raise ConfigError(
                f"offset spread {max(self.offsets) - min(self.offsets)} exceeds "
                f"sync_bound {self.protocol.sync_bound}"
            )
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        self.loss.validate(self.protocol.n)
        self.delay.validate(self.protocol.maximum_delay)

    def to_json(self) -> dict:
        p = self.protocol
        return {
            "n": p.n,
            "round_length": p.round_length,
            "sync_bound": p.sync_bound,
            "maximum_delay": p.maximum_delay,
            "gossip_interval": p.gossip_interval,
            "offsets": list(self.offsets),
            "duration": self.duration,
            "seed": self.seed,
            "loss": self.loss.to_json(),
            "delay": self.delay.to_json(),
        }

    @staticmethod
    def from_json(d: dict) -> "SimConfig":
        return SimConfig(
            protocol=ProtocolConfig(
                n=d["n"],
                round_length=d["round_length"],
                sync_bound=d["sync_bound"],
                maximum_delay=d["maximum_delay"],
                gossip_interval=d["gossip_interval"],
            ),
            offsets=tuple(d["offsets"]),
            loss=loss_from_json(d["loss"]),
            duration=d["duration"],
            seed=d["seed"],
            delay=delay_from_json(d["delay"]),
        )


def sample_offsets(seed: int, n: int, sync_bound: int) -> tuple[int, ...]:
    """Per-vehicle clock offsets: uniform in [0, sync_bound], shifted so min is 0."""
    rng = random.Random(f"offsets:{seed}")
    vals = [rng.randrange(sync_bound + 1) if sync_bound > 0 else 0 for _ in range(n)]
    lo = min(vals)
    return tuple(v - lo for v in vals)


def local_clock(vehicle: int, global_time: int, offsets: Sequence[int]) -> int:
    """A vehicle's clock reading at a global instant."""
    return global_time + offsets[vehicle - 1]


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

class SendEvent(NamedTuple):
    t: int
    vehicle: int
    msg: GossipMessage


class DeliverEvent(NamedTuple):
    t: int
    sender: int
    receiver: int
    msg: GossipMessage
    send_time: int
    receiver_round: int  # receiver's round when the message landed (not serialized)


class DropEvent(NamedTuple):
    t: int
    sender: int
    receiver: int
    msg: GossipMessage
    cause: str


class OutputEvent(NamedTuple):
    t: int
    vehicle: int
    output: RoundOutput


TraceEvent = Union[SendEvent, DeliverEvent, DropEvent, OutputEvent]


def datum_to_json(d: Datum):
    if is_default(d):
        return None
    if isinstance(d, Enum):
        return d.name.lower()
    to_json = getattr(d, "to_json", None)
    if to_json is not None:
        return to_json()
    return d


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def event_to_json(ev: TraceEvent) -> str:
    if isinstance(ev, SendEvent):
        m = ev.msg
        return _dumps({"t": ev.t, "ev": "send", "v": ev.vehicle, "round": m.round,
                       "data": [datum_to_json(d) for d in m.data], "ack": list(m.ack)})
    if isinstance(ev, DeliverEvent):
        m = ev.msg
        return _dumps({"t": ev.t, "ev": "deliver", "from": ev.sender, "to": ev.receiver,
                       "round": m.round, "data": [datum_to_json(d) for d in m.data],
                       "ack": list(m.ack)})
    if isinstance(ev, DropEvent):
        m = ev.msg
        return _dumps({"t": ev.t, "ev": "drop", "from": ev.sender, "to": ev.receiver,
                       "round": m.round, "data": [datum_to_json(d) for d in m.data],
                       "ack": list(m.ack), "cause": ev.cause})
    out = ev.output
    return _dumps({"t": ev.t, "ev": "output", "v": ev.vehicle, "round": out.round,
                   "data": [datum_to_json(d) for d in out.s], "ack": list(out.r),
                   "decision": datum_to_json(out.decision)})


@dataclass
class Trace:
    """Complete record of one run: its config, app identity, and ordered events."""

    config: SimConfig
    app_spec: dict
    events: list = field(default_factory=list)

    def header_line(self) -> str:
        return _dumps({"format": TRACE_FORMAT, "version": TRACE_VERSION,
                       "config": self.config.to_json(), "app": self.app_spec})

    def lines(self) -> Iterable[str]:
        yield self.header_line()
        for ev in self.events:
            yield event_to_json(ev)

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line)
                fh.write("\n")

    # Convenience views used throughout analysis and tests.
    def outputs(self) -> list[OutputEvent]:
        return [ev for ev in self.events if isinstance(ev, OutputEvent)]

    def sends(self) -> list[SendEvent]:
        return [ev for ev in self.events if isinstance(ev, SendEvent)]

    def delivers(self) -> list[DeliverEvent]:
        return [ev for ev in self.events if isinstance(ev, DeliverEvent)]

    def drops(self) -> list[DropEvent]:
        return [ev for ev in self.events if isinstance(ev, DropEvent)]


def read_trace_header(path: Union[str, Path]) -> tuple[SimConfig, dict]:
    with open(path) as fh:
        header = json.loads(fh.readline())
    if header.get("format") != TRACE_FORMAT:
        raise ConfigError(f"{path} is not a {TRACE_FORMAT} file")
    return SimConfig.from_json(header["config"]), header["app"]


# ---------------------------------------------------------------------------
# Applications
# ---------------------------------------------------------------------------

class App:
    """Application glue: state source, decision function, and output sink.

    ``app_tick_times`` may yield global times at which ``on_app_tick`` runs
    before any vehicle tick at the same instant (the platoon world advances
    its kinematics there). ``spec`` identifies the app for trace replay;
    registered kinds can be rebuilt from it.
    """

    def read_state(self, vid: int) -> Datum:
        raise NotImplementedError

    def decide(self, s: tuple) -> Datum:
        raise NotImplementedError

    def on_output(self, vid: int, output: RoundOutput, t: int) -> None:
        pass

    def app_tick_times(self) -> Iterable[int]:
        return ()

    def on_app_tick(self, t: int) -> None:
        pass

    def spec(self) -> dict:
        return {"kind": "custom"}


APP_BUILDERS: dict[str, Callable[[dict], App]] = {}


def register_app(kind: str, builder: Callable[[dict], App]) -> None:
    APP_BUILDERS[kind] = builder


def build_app(spec: dict) -> App:
    kind = spec.get("kind")
    if kind not in APP_BUILDERS:
        # App kinds register on import; the standard ones live in platoon.
        from . import platoon  # noqa: F401
    if kind not in APP_BUILDERS:
        raise ConfigError(f"no registered app builder for kind {kind!r}")
    return APP_BUILDERS[kind](spec)


# ---------------------------------------------------------------------------
# The event loop
# ---------------------------------------------------------------------------

_PRIO_DELIVER = 0
_PRIO_APP = 1
_PRIO_TICK = 2


def _tick_times(p: ProtocolConfig, horizon: int) -> Iterable[int]:
    """Local-clock tick instants: each round boundary, then the send cadence."""
    window_end_slack = p.sync_bound + p.maximum_delay
    for k in itertools.count():
        base = k * p.round_length
        if base > horizon:
            return
        if k > 0:
            yield base
        t = base + p.sync_bound
        end = base + p.round_length - window_end_slack
        while t <= end:
            if t > horizon:
                return
            yield t
            t += p.gossip_interval


def run(config: SimConfig, app: App) -> Trace:
    """Execute one simulation; the returned trace is a pure function of the inputs."""
    p = config.protocol
    n = p.n
    offsets = config.offsets
    rng = random.Random(config.seed)
    loss = config.loss
    delay_model = config.delay
    max_delay = p.maximum_delay

    instances = [VehicleProtocol(p, vid, app.read_state(vid)) for vid in range(1, n + 1)]
    readers = [(lambda v: (lambda: app.read_state(v)))(vid) for vid in range(1, n + 1)]
    decide = app.decide

    events: list[TraceEvent] = []
    heap: list = []
    seq = itertools.count()

    tick_iters = []
    for vid in range(1, n + 1):
        it = iter(_tick_times(p, config.duration))
        tick_iters.append(it)
        for local in it:
            g = local - offsets[vid - 1]
            if g >= 0:
                heapq.heappush(heap, (g, _PRIO_TICK, vid, next(seq), None))
                break

    app_ticks = iter(app.app_tick_times())
    for t in app_ticks:
        heapq.heappush(heap, (t, _PRIO_APP, 0, next(seq), None))
        break

    push = heapq.heappush
    pop = heapq.heappop
    append = events.append

    while heap:
        t, prio, vid, _, payload = pop(heap)
        if prio == _PRIO_DELIVER:
            sender, msg, send_time = payload
            inst = instances[vid - 1]
            append(DeliverEvent(t, sender, vid, msg, send_time, inst.my_round))
            inst.on_gossip_receive(msg)
        elif prio == _PRIO_TICK:
            inst = instances[vid - 1]
            sends, output = inst.on_tick(t + offsets[vid - 1], readers[vid - 1], decide)
            for msg in sends:
                append(SendEvent(t, vid, msg))
                rnd = msg.round
                for rcv in range(1, n + 1):
                    if rcv == vid:
                        continue
                    d = delay_model.sample(rng, max_delay)
                    cause = loss.decide(rng, rnd, vid, rcv, t)
                    if cause is None:
                        push(heap, (t + d, _PRIO_DELIVER, rcv, next(seq), (vid, msg, t)))
                    else:
                        append(DropEvent(t, vid, rcv, msg, cause))
            if output is not None:
                append(OutputEvent(t, vid, output))
                app.on_output(vid, output, t)
            for local in tick_iters[vid - 1]:
                g = local - offsets[vid - 1]
                if g >= 0:
                    push(heap, (g, _PRIO_TICK, vid, next(seq), None))
                    break
        else:
            app.on_app_tick(t)
            for nxt in app_ticks:
                push(heap, (nxt, _PRIO_APP, 0, next(seq), None))
                break

    return Trace(config=config, app_spec=app.spec(), events=events)


def replay(source: Union[Trace, str, Path], app: Optional[App] = None) -> Trace:
    """Re-run a trace's config and verify the result is identical.

    Accepts an in-memory trace or a trace file path. The application is
    rebuilt from the recorded app spec unless one is supplied. Raises
    ReplayMismatch at the first divergent line.
    """
    if isinstance(source, Trace):
        config, app_spec = source.config, source.app_spec
        recorded = list(source.lines())
    else:
        config, app_spec = read_trace_header(source)
        recorded = Path(source).read_text().splitlines()
    if app is None:
        app = build_app(app_spec)
    fresh = run(config, app)
    replayed = list(fresh.lines())
    for i, (want, got) in enumerate(itertools.zip_longest(recorded, replayed, fillvalue="<missing>")):
        if want != got:
            raise ReplayMismatch(i + 1, want, got)
    return fresh

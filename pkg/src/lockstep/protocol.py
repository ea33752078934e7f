"""Round-synchronous cooperation state machine for a single vehicle.

Each vehicle runs fixed-length communication rounds. Within a send window it
gossips its view ``<round, data, ack>``; at every round boundary it snapshots
the collected view and either applies the shared decision function (all
members heard from) or falls back to the default value for one round (some
member missing). The fallback value is itself gossiped, which is what pulls
the whole group onto the default within one further round.

Pure and clock-free: callers feed in receive events and tick timestamps and
get back send actions and round outputs. All times are integer microseconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional


class ConfigError(ValueError):
    """Raised for timing or membership parameters that violate the protocol constraints."""


class DecideContractError(Exception):
    """Raised when an application decide() fails to absorb the default value."""


class _Default:
    """The distinguished void/fallback value. A single module-level instance is used."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "DEFAULT"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, _Default)

    def __ne__(self, other: object) -> bool:
        return not isinstance(other, _Default)

    def __hash__(self) -> int:
        return hash(_Default)

    def __reduce__(self):
        # Unpickles to the module singleton (keeps identity across processes).
        return (_restore_default, ())


def _restore_default() -> "_Default":
    return DEFAULT


DEFAULT = _Default()

# A datum is either DEFAULT or an application payload with value equality.
Datum = Any

DecideFn = Callable[[tuple], Datum]
ReadStateFn = Callable[[], Datum]


def is_default(d: Datum) -> bool:
    return isinstance(d, _Default)


@dataclass(frozen=True)
class ProtocolConfig:
    """Timing and membership parameters shared by all vehicles in a run.

    All durations are integer microseconds. The round must be long enough to
    fit the worst-case clock skew on both ends plus the worst-case message
    delay, i.e. round_length > 2 * sync_bound + maximum_delay (strictly,
    otherwise the send window is empty).
    """

    n: int
    round_length: int
    sync_bound: int
    maximum_delay: int
    gossip_interval: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"need at least one vehicle, got n={self.n}")
        if self.sync_bound < 0 or self.maximum_delay <= 0:
            raise ConfigError("sync_bound must be >= 0 and maximum_delay > 0")
        if self.round_length <= 2 * self.sync_bound + self.maximum_delay:
            raise ConfigError(
                f"round_length must exceed 2*sync_bound + maximum_delay "
                f"({self.round_length} <= {2 * self.sync_bound + self.maximum_delay})"
            )
        if not 0 < self.gossip_interval <= self.send_window_length:
            raise ConfigError(
                f"gossip_interval must be in (0, {self.send_window_length}], "
                f"got {self.gossip_interval}"
            )

    @property
    def send_window_length(self) -> int:
        return self.round_length - 2 * self.sync_bound - self.maximum_delay

    def sends_per_round(self) -> int:
        return self.send_window_length // self.gossip_interval + 1


class GossipMessage(NamedTuple):
    """Wire view of a sender's state: its round plus the data/ack vectors."""

    sender: int
    round: int
    data: tuple
    ack: tuple


class RoundOutput(NamedTuple):
    """Emitted on entering ``round``: snapshots of the previous round and the decision.

    ``s`` and ``r`` are the data and ack vectors collected during the round
    that just ended; ``decision`` is DEFAULT exactly when ``r`` has a false
    entry or decide(s) returned DEFAULT.
    """

    round: int
    s: tuple
    r: tuple
    decision: Datum


def in_send_window(config: ProtocolConfig, round_index: int, local_clock: int) -> bool:
    """True iff ``local_clock`` lies in the gossip window of ``round_index``.

    The window leaves sync_bound at the front (latest-clock members must have
    entered the round) and sync_bound + maximum_delay at the back (the message
    must land before the earliest-clock member leaves it).
    """
    lo = config.round_length * round_index + config.sync_bound
    hi = config.round_length * (round_index + 1) - (config.sync_bound + config.maximum_delay)
    return lo <= local_clock <= hi


def checked_decide(decide: DecideFn, s: tuple) -> Datum:
    """Apply ``decide`` and enforce default-absorption: DEFAULT in s forces DEFAULT out."""
    value = decide(s)
    if any(is_default(d) for d in s) and not is_default(value):
        raise DecideContractError(
            f"decide() returned {value!r} for an input containing DEFAULT"
        )
    return value


class VehicleProtocol:
    """Protocol instance for one vehicle.

    Single-threaded by contract: the owner delivers receive events and ticks
    in local-timestamp order. Ticks carry the vehicle's local clock; the
    instance never reads time itself.
    """

    __slots__ = ("config", "vid", "my_round", "data", "ack", "last_send_time")

    def __init__(self, config: ProtocolConfig, vid: int, initial_datum: Datum) -> None:
        if not 1 <= vid <= config.n:
            raise ConfigError(f"vehicle id {vid} outside 1..{config.n}")
        self.config = config
        self.vid = vid
        self.my_round = 0
        # data[k-1]/ack[k-1] are the slot for member k; own slot is primed as
        # if a round transition had just run.
        self.data = [DEFAULT] * config.n
        self.ack = [False] * config.n
        self.data[vid - 1] = initial_datum
        self.ack[vid - 1] = True
        self.last_send_time: Optional[int] = None

    def on_gossip_receive(self, msg: GossipMessage) -> None:
        """Fold a received view into this round's slots.

        Messages from other rounds are ignored. Slot k is taken when the
        sender vouches for it (its ack, excluding our own slot) or when it is
        the sender's own slot; the own slot is therefore never overwritten.
        """
        if msg.round != self.my_round:
            return
        data = self.data
        ack = self.ack
        mdata = msg.data
        mack = msg.ack
        vid = self.vid
        sender = msg.sender
        for k in range(1, self.config.n + 1):
            if (mack[k - 1] and k != vid) or k == sender:
                data[k - 1] = mdata[k - 1]
                ack[k - 1] = True

    def on_tick(
        self,
        local_clock: int,
        read_state: ReadStateFn,
        decide: DecideFn,
    ) -> tuple[list[GossipMessage], Optional[RoundOutput]]:
        """Advance on a clock sample; returns (messages to gossip, round output if any).

        At most one message is emitted per tick, rate-limited to one send per
        gossip_interval within the window (the first tick of a round's window
        always sends). The round transition fires when the clock has crossed
        into a later round; local_clock must be non-decreasing across calls.
        """
        config = self.config
        sends: list[GossipMessage] = []
        if in_send_window(config, self.my_round, local_clock) and (
            self.last_send_time is None
            or local_clock - self.last_send_time >= config.gossip_interval
        ):
            sends.append(
                GossipMessage(self.vid, self.my_round, tuple(self.data), tuple(self.ack))
            )
            self.last_send_time = local_clock

        output: Optional[RoundOutput] = None
        clock_round = local_clock // config.round_length
        if self.my_round < clock_round:
            s = tuple(self.data)
            r = tuple(self.ack)
            self.my_round = clock_round
            n = config.n
            self.data = [DEFAULT] * n
            self.ack = [False] * n
            self.ack[self.vid - 1] = True
            self.last_send_time = None
            if not all(r):
                # Missed someone last round: impose the default for one round
                # and gossip it so everyone else falls back with us.
                self.data[self.vid - 1] = DEFAULT
                output = RoundOutput(clock_round, s, r, DEFAULT)
            else:
                self.data[self.vid - 1] = read_state()
                output = RoundOutput(clock_round, s, r, checked_decide(decide, s))
        return sends, output

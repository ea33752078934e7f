import pytest

from lockstep.platoon import LevelApp, ServiceLevel
from lockstep.protocol import ProtocolConfig
from lockstep.sim import BernoulliLoss, SimConfig, sample_offsets

MS = 1000  # microseconds per millisecond


def make_protocol_config(n=4, round_ms=160, sync_ms=5, delay_ms=100, gossip_ms=50):
    return ProtocolConfig(
        n=n,
        round_length=round_ms * MS,
        sync_bound=sync_ms * MS,
        maximum_delay=delay_ms * MS,
        gossip_interval=gossip_ms * MS,
    )


def make_sim_config(n=4, rounds=25, seed=1, loss=None, round_ms=160, offsets=None, **kw):
    protocol = make_protocol_config(n=n, round_ms=round_ms, **kw)
    if offsets is None:
        offsets = sample_offsets(seed, n, protocol.sync_bound)
    return SimConfig(
        protocol=protocol,
        offsets=tuple(offsets),
        loss=loss if loss is not None else BernoulliLoss(0.0),
        duration=protocol.round_length * rounds,
        seed=seed,
    )


@pytest.fixture
def high_app():
    return LevelApp(ServiceLevel.HIGH)

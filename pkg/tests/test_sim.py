"""Tests for the discrete-event harness: timing, loss, traces, replay."""

import json

import pytest

from lockstep import analysis, oracle
from lockstep.platoon import LevelApp, ServiceLevel
from lockstep.protocol import ConfigError, is_default
from lockstep.sim import (
    BernoulliLoss,
    CompositeLoss,
    DropRule,
    FixedDelay,
    ReplayMismatch,
    ScheduleLoss,
    SimConfig,
    load_schedule,
    local_clock,
    replay,
    run,
    sample_offsets,
)

from conftest import MS, make_protocol_config, make_sim_config

HIGH = ServiceLevel.HIGH
RL = 160 * MS


def run_high(config):
    return run(config, LevelApp(HIGH))


# ---------------------------------------------------------------------------
# Clocks and configuration
# ---------------------------------------------------------------------------

def test_local_clock_with_zero_offsets():
    assert local_clock(1, 10, (0, 0)) == 10
    assert local_clock(2, 10, (0, 0)) == 10


def test_offsets_at_exact_sync_bound_accepted():
    config = make_sim_config(n=2, offsets=(0, 5 * MS))
    assert local_clock(2, 0, config.offsets) - local_clock(1, 0, config.offsets) == 5 * MS


def test_offsets_beyond_sync_bound_rejected():
    with pytest.raises(ConfigError):
        make_sim_config(n=2, offsets=(0, 6 * MS))


def test_sampled_offsets_are_deterministic_and_bounded():
    a = sample_offsets(9, 8, 5 * MS)
    b = sample_offsets(9, 8, 5 * MS)
    assert a == b
    assert min(a) == 0
    assert max(a) - min(a) <= 5 * MS
    assert sample_offsets(10, 8, 5 * MS) != a


def test_duration_must_be_positive():
    with pytest.raises(ConfigError):
        make_sim_config(n=2, rounds=0)


# ---------------------------------------------------------------------------
# Transmission: loss and delay
# ---------------------------------------------------------------------------

def test_bernoulli_zero_never_drops():
    trace = run_high(make_sim_config(n=3, rounds=10, loss=BernoulliLoss(0.0)))
    assert not trace.drops()
    assert len(trace.delivers()) == len(trace.sends()) * 2


def test_bernoulli_one_always_drops():
    trace = run_high(make_sim_config(n=3, rounds=10, loss=BernoulliLoss(1.0)))
    assert not trace.delivers()
    assert len(trace.drops()) == len(trace.sends()) * 2
    assert all(ev.cause == "bernoulli" for ev in trace.drops())


def test_delay_bound_holds_on_every_delivery():
    trace = run_high(make_sim_config(n=4, rounds=30, seed=3, loss=BernoulliLoss(0.2)))
    for ev in trace.delivers():
        assert 0 < ev.t - ev.send_time <= 100 * MS


def test_deliveries_land_in_the_senders_round():
    """roundLength > 2*sync + delay makes the round guard never fire in spec."""
    trace = run_high(make_sim_config(n=4, rounds=30, seed=4, loss=BernoulliLoss(0.3)))
    assert trace.delivers()
    for ev in trace.delivers():
        assert ev.receiver_round == ev.msg.round


def test_transmission_conservation():
    trace = run_high(make_sim_config(n=5, rounds=20, seed=5, loss=BernoulliLoss(0.4)))
    assert len(trace.sends()) * 4 == len(trace.delivers()) + len(trace.drops())


def test_sends_stay_inside_the_window():
    config = make_sim_config(n=4, rounds=12, seed=6, loss=BernoulliLoss(0.1))
    p = config.protocol
    for ev in run_high(config).sends():
        local = ev.t + config.offsets[ev.vehicle - 1]
        lo = p.round_length * ev.msg.round + p.sync_bound
        hi = p.round_length * (ev.msg.round + 1) - p.sync_bound - p.maximum_delay
        assert lo <= local <= hi
        assert ev.msg.round == local // p.round_length


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

def test_failure_free_run_agrees_from_round_one():
    trace = run_high(make_sim_config(n=2, rounds=10))
    view = analysis.round_view(trace)
    assert view.rounds == 10
    for t in range(1, view.rounds + 1):
        row = view.decisions[t - 1]
        assert all(d == HIGH for d in row)


def test_two_sends_per_vehicle_per_round_at_160ms():
    config = make_sim_config(n=4, rounds=10, seed=2)
    per_round: dict = {}
    for ev in run_high(config).sends():
        per_round[(ev.vehicle, ev.msg.round)] = per_round.get((ev.vehicle, ev.msg.round), 0) + 1
    for vid in range(1, 5):
        for rnd in range(10):
            assert per_round[(vid, rnd)] == 2


def single_effective_link_schedule():
    """Round-20 drop of exactly one effective link (3 -> 1) with relays defeated.

    Direct 3->1 copies are dropped all round; the second-window sends of the
    would-be relays (2->1, 4->1) are dropped by time. First-window sends
    cannot relay because nothing has arrived when they fire (zero offsets).
    """
    t0 = 20 * RL + 5 * MS + 1
    t1 = 21 * RL
    return ScheduleLoss([
        DropRule(round=20, sender=3, receiver=1),
        DropRule(t0=t0, t1=t1, sender=2, receiver=1),
        DropRule(t0=t0, t1=t1, sender=4, receiver=1),
    ])


def test_single_link_outage_recovers_in_two_rounds():
    config = make_sim_config(n=4, rounds=25, seed=7, offsets=(0, 0, 0, 0),
                             loss=single_effective_link_schedule())
    view = analysis.round_view(run_high(config))
    d = view.decisions
    assert d[20 - 1] == (HIGH,) * 4
    assert is_default(d[21 - 1][0])
    assert d[21 - 1][1:] == (HIGH, HIGH, HIGH)
    assert all(is_default(x) for x in d[22 - 1])
    assert d[23 - 1] == (HIGH,) * 4


def test_single_link_outage_matches_oracle():
    """The timed run and the abstract model agree decision-for-decision."""
    config = make_sim_config(n=4, rounds=25, seed=8, offsets=(0, 0, 0, 0),
                             loss=single_effective_link_schedule())
    view = analysis.round_view(run_high(config))
    matrices = analysis.effective_delivery(view)
    assert matrices[20] == oracle.matrix_from_missing(4, [(3, 1)])
    assert all(m == oracle.full_matrix(4) for r, m in enumerate(matrices) if r != 20)
    expected = oracle.run_abstract(4, matrices, LevelApp(HIGH).decide, (HIGH,) * 4)
    assert view.decisions == expected


def test_messages_are_well_formed():
    """Every gossiped view acks its sender and carries DEFAULT in unacked slots."""
    trace = run_high(make_sim_config(n=4, rounds=30, seed=20, loss=BernoulliLoss(0.3)))
    for ev in trace.sends():
        msg = ev.msg
        assert msg.ack[msg.sender - 1]
        for d, a in zip(msg.data, msg.ack):
            assert a or is_default(d)


def test_output_law_on_lossy_run():
    """decision is DEFAULT exactly when the ack snapshot has a gap or decide(s) does."""
    trace = run_high(make_sim_config(n=4, rounds=40, seed=21, loss=BernoulliLoss(0.35)))
    from lockstep.platoon import min_level_decide

    for ev in trace.outputs():
        out = ev.output
        expect_default = (not all(out.r)) or is_default(min_level_decide(out.s))
        assert is_default(out.decision) == expect_default


def test_stable_rounds_have_identical_snapshots():
    """If every vehicle ended round r complete, they all hold the same data vector."""
    trace = run_high(make_sim_config(n=4, rounds=40, seed=22, loss=BernoulliLoss(0.3)))
    view = analysis.round_view(trace)
    snapshots: dict = {}
    for ev in trace.outputs():
        snapshots.setdefault(ev.output.round - 1, []).append(ev.output)
    stable_rounds = [c.round for c in analysis.classify_rounds(view) if c.stable]
    assert stable_rounds
    for r in stable_rounds:
        outs = snapshots[r]
        assert len(outs) == 4
        first = outs[0].s
        assert all(o.s == first for o in outs)


def test_repaired_first_send_keeps_round_stable():
    # Only 3's first-window copy toward 1 is lost; its retransmission lands.
    loss = ScheduleLoss([DropRule(t0=20 * RL, t1=20 * RL + 5 * MS, sender=3, receiver=1)])
    config = make_sim_config(n=4, rounds=25, seed=9, offsets=(0, 0, 0, 0), loss=loss)
    trace = run_high(config)
    assert trace.drops()
    classes = analysis.classify_rounds(trace)
    assert all(c.stable for c in classes)


def test_composite_loss_mixes_schedule_and_noise():
    loss = CompositeLoss(0.0, ScheduleLoss([DropRule(round=3, receiver=2)]))
    trace = run_high(make_sim_config(n=3, rounds=8, seed=10, loss=loss))
    causes = {ev.cause for ev in trace.drops()}
    assert causes == {"schedule"}
    assert all(ev.msg.round == 3 and ev.receiver == 2 for ev in trace.drops())


def test_fixed_delay_validated_against_maximum():
    with pytest.raises(ConfigError):
        SimConfig(
            protocol=make_protocol_config(n=2),
            offsets=(0, 0),
            loss=BernoulliLoss(0.0),
            duration=RL,
            seed=1,
            delay=FixedDelay(101 * MS),
        )


# ---------------------------------------------------------------------------
# Schedule files
# ---------------------------------------------------------------------------

def test_schedule_file_round_trip(tmp_path):
    rules = [
        {"round": 20, "from": "*", "to": 1},
        {"t": [100, 200], "from": 2, "to": "*"},
    ]
    path = tmp_path / "sched.json"
    path.write_text(json.dumps(rules))
    loss = load_schedule(path)
    assert loss.rules[0] == DropRule(round=20, receiver=1)
    assert loss.rules[1] == DropRule(t0=100, t1=200, sender=2)
    assert loss.to_json()["rules"] == rules


def test_schedule_rule_requires_round_or_span():
    with pytest.raises(ConfigError):
        DropRule(sender=1, receiver=2)
    with pytest.raises(ConfigError):
        DropRule(round=1, t0=0, t1=5)


def test_schedule_rejects_unknown_vehicle():
    with pytest.raises(ConfigError):
        make_sim_config(n=2, loss=ScheduleLoss([DropRule(round=0, receiver=9)]))


# ---------------------------------------------------------------------------
# Trace format, determinism, replay
# ---------------------------------------------------------------------------

def test_trace_event_fields_and_datum_encoding():
    trace = run_high(make_sim_config(n=2, rounds=3, seed=11, loss=BernoulliLoss(0.3)))
    lines = list(trace.lines())
    header = json.loads(lines[0])
    assert header["format"] == "lockstep-trace"
    assert header["app"] == {"kind": "level", "level": "high"}
    seen = set()
    for line in lines[1:]:
        ev = json.loads(line)
        seen.add(ev["ev"])
        assert isinstance(ev["t"], int)
        if ev["ev"] == "send":
            assert set(ev) == {"t", "ev", "v", "round", "data", "ack"}
            assert all(d in (None, "high") for d in ev["data"])
        elif ev["ev"] in ("deliver", "drop"):
            assert "from" in ev and "to" in ev
        else:
            assert ev["ev"] == "output"
            assert "decision" in ev
    assert seen == {"send", "deliver", "drop", "output"}


def test_trace_timestamps_non_decreasing():
    trace = run_high(make_sim_config(n=3, rounds=10, seed=12, loss=BernoulliLoss(0.2)))
    times = [ev.t for ev in trace.events]
    assert times == sorted(times)


def test_identical_configs_produce_identical_traces():
    a = run_high(make_sim_config(n=4, rounds=15, seed=13, loss=BernoulliLoss(0.25)))
    b = run_high(make_sim_config(n=4, rounds=15, seed=13, loss=BernoulliLoss(0.25)))
    assert list(a.lines()) == list(b.lines())


def test_different_seed_changes_the_trace():
    a = run_high(make_sim_config(n=4, rounds=15, seed=13, loss=BernoulliLoss(0.25)))
    b = run_high(make_sim_config(n=4, rounds=15, seed=14, loss=BernoulliLoss(0.25)))
    assert list(a.lines()) != list(b.lines())


def test_replay_in_memory_and_from_file(tmp_path):
    trace = run_high(make_sim_config(n=3, rounds=12, seed=15, loss=BernoulliLoss(0.2)))
    replay(trace)
    path = tmp_path / "trace.jsonl"
    trace.write(path)
    again = replay(path)
    assert list(again.lines()) == list(trace.lines())


def test_replay_detects_tampered_seed(tmp_path):
    trace = run_high(make_sim_config(n=3, rounds=12, seed=16, loss=BernoulliLoss(0.2)))
    path = tmp_path / "trace.jsonl"
    trace.write(path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["config"]["seed"] = 17
    lines[0] = json.dumps(header, sort_keys=True, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayMismatch) as info:
        replay(path)
    assert info.value.line_no > 1  # config parses; the first RNG-driven event diverges


def test_replay_detects_tampered_event(tmp_path):
    trace = run_high(make_sim_config(n=2, rounds=5, seed=18))
    path = tmp_path / "trace.jsonl"
    trace.write(path)
    lines = path.read_text().splitlines()
    ev = json.loads(lines[3])
    ev["t"] += 1
    lines[3] = json.dumps(ev, sort_keys=True, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayMismatch) as info:
        replay(path)
    assert info.value.line_no == 4

"""Microbatched contrastive gradients vs the whole-batch reference."""

import numpy as np
import pytest

from twotower import numerics as nm
from twotower.encoders import EncoderNet
from twotower.errors import (ConfigError, ShapeError,
                             VarianceUnestimableError)
from twotower.ledger import MemoryLedger
from twotower.microbatch import (BatchPlan, StepCounters, embed_phase,
                                 microbatch_gradients, monolithic_oracle,
                                 oracle_events, replay_events, step_events)

TAU = 0.1


def make_towers(seed, d_in=6, width=8, d_out=4, norms=None):
    rng = nm.Rng(seed)
    f = EncoderNet.build(rng.split("f"), [d_in, width, d_out], norms=norms,
                         name="img")
    g = EncoderNet.build(rng.split("g"), [d_in, width, d_out], norms=norms,
                         name="txt")
    return f, g


def make_batch(seed, b, d_in=6):
    rng = nm.Rng(seed)
    return rng.split("x").normal((b, d_in)), rng.split("y").normal((b, d_in))


def packet_means(packets):
    acc = {"img": {}, "txt": {}}
    counts = {"img": 0, "txt": 0}
    for p in packets:
        counts[p.tower] += 1
        for name, g in p.grads.items():
            acc[p.tower][name] = acc[p.tower].get(name, 0.0) + g
    for tower, grads in acc.items():
        for name in grads:
            grads[name] = grads[name] / counts[tower]
    return acc


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_packet_mean_equals_monolithic_oracle():
    f, g = make_towers(1)
    images, texts = make_batch(2, 8)
    o_loss, o_f, o_g = monolithic_oracle(f, g, images, texts, TAU)
    for m_img, m_txt in [(2, 4), (1, 8), (4, 2), (8, 1)]:
        plan = BatchPlan(8, m_img, m_txt)
        loss, gen = microbatch_gradients(f, g, images, texts, plan, TAU)
        means = packet_means(gen)
        assert loss == o_loss  # same coupling arithmetic, bitwise
        for name, want in o_f.items():
            assert rel_l2(means["img"][name], want) <= 1e-12, name
        for name, want in o_g.items():
            assert rel_l2(means["txt"][name], want) <= 1e-12, name


def test_trivial_plan_is_bitwise_equal_to_oracle():
    f, g = make_towers(3)
    images, texts = make_batch(4, 8)
    _, o_f, o_g = monolithic_oracle(f, g, images, texts, TAU)
    plan = BatchPlan(8, 8, 8)  # K = 1 for both towers
    _, gen = microbatch_gradients(f, g, images, texts, plan, TAU)
    packets = list(gen)
    assert [(p.tower, p.index, p.count) for p in packets] == [
        ("img", 1, 1), ("txt", 1, 1)]
    for name, want in o_f.items():
        assert packets[0].grads[name].tobytes() == want.tobytes()
    for name, want in o_g.items():
        assert packets[1].grads[name].tobytes() == want.tobytes()


def test_each_example_forwarded_exactly_twice():
    f, g = make_towers(5)
    images, texts = make_batch(6, 8)
    counters = StepCounters()
    plan = BatchPlan(8, 2, 4)
    _, gen = microbatch_gradients(f, g, images, texts, plan, TAU,
                                  counters=counters)
    list(gen)
    assert counters.passes("img", 8) == 2.0
    assert counters.passes("txt", 8) == 2.0
    # embed phase: ceil(8/2)=4 calls + 4 re-forward; txt 2 + 2
    assert counters.forward_calls == {"img": 8, "txt": 4}


def test_frozen_tower_embeds_once_and_yields_no_packets():
    f, g = make_towers(6)
    images, texts = make_batch(7, 8)
    counters = StepCounters()
    plan = BatchPlan(8, 4, 4)
    _, gen = microbatch_gradients(f, g, images, texts, plan, TAU,
                                  towers=("txt",), counters=counters)
    packets = list(gen)
    assert {p.tower for p in packets} == {"txt"}
    assert counters.passes("img", 8) == 1.0
    assert counters.passes("txt", 8) == 2.0


def test_replica_split_matches_unsplit_gradients():
    f, g = make_towers(8)
    images, texts = make_batch(9, 8)
    _, gen1 = microbatch_gradients(f, g, images, texts, BatchPlan(8, 4, 4), TAU)
    base = {(p.tower, p.index): p.grads for p in gen1}
    _, gen2 = microbatch_gradients(f, g, images, texts,
                                   BatchPlan(8, 4, 4, replicas=2), TAU,
                                   with_variance=True)
    for p in gen2:
        want = base[(p.tower, p.index)]
        assert set(p.var) == set(p.grads) == set(want)
        for name in want:
            assert rel_l2(p.grads[name], want[name]) <= 1e-12
            assert np.all(p.var[name] >= 0.0)


def test_variance_needs_two_replicas():
    f, g = make_towers(10)
    images, texts = make_batch(11, 8)
    with pytest.raises(VarianceUnestimableError):
        microbatch_gradients(f, g, images, texts, BatchPlan(8, 4, 4), TAU,
                             with_variance=True)


def test_batch_plan_validation():
    with pytest.raises(ConfigError):
        BatchPlan(0, 1, 1)
    with pytest.raises(ConfigError):
        BatchPlan(8, 0, 4)
    with pytest.raises(ConfigError):
        BatchPlan(8, 3, 4)  # 3 does not divide 8
    with pytest.raises(ConfigError):
        BatchPlan(8, 4, 5)
    with pytest.raises(ConfigError):
        BatchPlan(8, 4, 4, replicas=0)
    with pytest.raises(ConfigError):
        BatchPlan(8, 4, 4, replicas=3)  # must divide microbatch sizes
    plan = BatchPlan(8, 2, 4, replicas=2)
    assert (plan.k_img, plan.k_txt) == (4, 2)
    assert plan.k("img") == 4 and plan.k("txt") == 2
    assert plan.m("img") == 2 and plan.m("txt") == 4


def test_input_validation_errors():
    f, g = make_towers(12)
    images, texts = make_batch(13, 8)
    with pytest.raises(ShapeError):
        microbatch_gradients(f, g, images[:4], texts, BatchPlan(8, 2, 2), TAU)
    with pytest.raises(ConfigError):
        microbatch_gradients(f, g, images, texts, BatchPlan(8, 2, 2), TAU,
                             towers=("img", "audio"))
    rng = nm.Rng(14)
    g_wide = EncoderNet.build(rng, [6, 8, 5], name="txt")
    with pytest.raises(ShapeError):
        microbatch_gradients(f, g_wide, images, texts, BatchPlan(8, 2, 2), TAU)
    with pytest.raises(ShapeError):
        monolithic_oracle(f, g, images, texts[:4], TAU)


def test_embed_phase_chunking_is_bitwise_invariant():
    f, _ = make_towers(15)
    images, _ = make_batch(16, 8)
    outs = []
    for m in (1, 2, 4, 8):
        buf = np.empty((8, f.d_out))
        embed_phase(f, images, m, buf, "img")
        outs.append(buf.tobytes())
    assert len(set(outs)) == 1


def test_batchnorm_breaks_chunking_equality():
    # Negative control: batch-coupled statistics make microbatching lossy.
    f, g = make_towers(17, norms=["batchnorm", "none"])
    images, texts = make_batch(18, 8)
    _, o_f, _ = monolithic_oracle(f, g, images, texts, TAU)
    _, gen = microbatch_gradients(f, g, images, texts, BatchPlan(8, 2, 8), TAU)
    means = packet_means(gen)
    worst = max(rel_l2(means["img"][n], o_f[n]) for n in o_f)
    assert worst > 1e-3


def test_packet_elems_and_release_accounting():
    f, g = make_towers(19)
    images, texts = make_batch(20, 8)
    led = MemoryLedger()
    _, gen = microbatch_gradients(f, g, images, texts, BatchPlan(8, 4, 4),
                                  TAU, ledger=led)
    for p in gen:
        assert p.elems() == sum(a.size for a in p.grads.values())
        p.release(led)
    assert led.live_elems() == 0


LEDGER_GRID = [
    (BatchPlan(8, 2, 4), ("img", "txt"), False),
    (BatchPlan(8, 8, 8), ("img", "txt"), False),
    (BatchPlan(8, 4, 4, replicas=2), ("img", "txt"), True),
    (BatchPlan(8, 4, 8, replicas=2), ("img", "txt"), False),
    (BatchPlan(8, 4, 4), ("txt",), False),
]


@pytest.mark.parametrize("plan,towers,with_var", LEDGER_GRID)
def test_instrumented_ledger_matches_analytic_events(plan, towers, with_var):
    f, g = make_towers(21, norms=["layernorm", "none"])
    images, texts = make_batch(22, plan.batch)
    led = MemoryLedger()
    _, gen = microbatch_gradients(f, g, images, texts, plan, TAU,
                                  towers=towers, with_variance=with_var,
                                  ledger=led)
    for p in gen:
        p.release(led)
    want = replay_events(step_events(f, g, plan, towers=towers,
                                     with_variance=with_var))
    assert led.total_peak == want["total_peak"]
    for cat, peak in want["category_peak"].items():
        assert led.category_peak[cat] == peak, cat
    assert led.live_elems() == 0
    assert all(v == 0 for v in want["live"].values())


def test_oracle_ledger_matches_analytic_events():
    f, g = make_towers(23)
    images, texts = make_batch(24, 8)
    led = MemoryLedger()
    _, o_f, o_g = monolithic_oracle(f, g, images, texts, TAU, ledger=led)
    led.free("grad", sum(a.size for a in o_f.values()))
    led.free("grad", sum(a.size for a in o_g.values()))
    want = replay_events(oracle_events(f, g, 8))
    assert led.total_peak == want["total_peak"]
    for cat, peak in want["category_peak"].items():
        assert led.category_peak[cat] == peak, cat
    assert led.live_elems() == 0


def test_ledger_underflow_and_alloc_validation():
    led = MemoryLedger()
    led.alloc("act", 4)
    with pytest.raises(ValueError):
        led.free("act", 5)
    with pytest.raises(ValueError):
        led.alloc("act", -1)
    with led.hold("sim", 10):
        assert led.live_elems("sim") == 10
    assert led.live_elems("sim") == 0
    led.record_gather("img/layer0/w", 12)
    assert led.gather_events == 1
    assert led.gather_elements == 12
    assert led.gathered_names["img/layer0/w"] == 12

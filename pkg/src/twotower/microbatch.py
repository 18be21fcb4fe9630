"""Memory-bounded contrastive gradients via re-forwarded microbatches.

The full-batch contrastive gradient needs every cross-example similarity, so
it cannot be chunked the way plain averaged losses can. The engine splits
the step into two passes per tower:

  1. embed phase: run each microbatch forward WITHOUT a tape, keeping only
     the embedding rows (activation footprint: one microbatch);
  2. couple: build the similarity grid from the full embedding buffers,
     take the loss and its gradient, and chain it to per-row embedding
     gradients dX, dY (footprint: the B x B grid plus the buffers);
  3. re-forward phase: run each microbatch forward again, this time with a
     tape, and backpropagate its slice of dX/dY, streaming out one gradient
     packet per microbatch.

Every example is forwarded exactly twice per tower per step. Yielded
packets are scaled by K (the microbatch count), so their running mean is
the monolithic gradient: sum(packets)/K == whole-batch backprop, and the
packets play the same role as microbatch mean gradients in plain gradient
accumulation. Row-independent towers make the equality exact up to float
re-association; a batch-coupled layer (batchnorm) genuinely breaks it,
which the test suite demonstrates on purpose.

With plan.replicas = R > 1 each microbatch is further split into R replica
slices backpropagated separately; the packet carries their mean and (on
request) the unbiased between-replica variance estimate that feeds the
optimizer's second-moment correction.

Ledger events here and in encoders follow one documented schedule; the
analytic generators at the bottom mirror it event for event. Tests assert
instrumented == analytic, so edit both together or not at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import contrastive as ct
from . import numerics as nm
from .encoders import (EncoderNet, backward_events, forward_events, save_all,
                       save_none)
from .errors import ConfigError, ShapeError, VarianceUnestimableError
from .ledger import NULL_LEDGER

TOWERS = ("img", "txt")


@dataclass(frozen=True)
class BatchPlan:
    """How a batch of B pairs is chunked: microbatch sizes and replicas.

    Both microbatch sizes must divide B, and the replica count must divide
    both microbatch sizes (each replica backpropagates M/R rows).
    """

    batch: int
    m_img: int
    m_txt: int
    replicas: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        for name, m in (("m_img", self.m_img), ("m_txt", self.m_txt)):
            if m < 1:
                raise ConfigError(f"{name} must be >= 1, got {m}")
            if self.batch % m:
                raise ConfigError(f"{name}={m} does not divide batch={self.batch}")
        if self.replicas < 1:
            raise ConfigError(f"replicas must be >= 1, got {self.replicas}")
        if self.m_img % self.replicas or self.m_txt % self.replicas:
            raise ConfigError(
                f"replicas={self.replicas} must divide microbatch sizes "
                f"({self.m_img}, {self.m_txt})"
            )

    @property
    def k_img(self) -> int:
        return self.batch // self.m_img

    @property
    def k_txt(self) -> int:
        return self.batch // self.m_txt

    def k(self, tower: str) -> int:
        return self.k_img if tower == "img" else self.k_txt

    def m(self, tower: str) -> int:
        return self.m_img if tower == "img" else self.m_txt


@dataclass
class EmbeddingBuffers:
    """Full-batch embedding blocks produced by the embed phase."""

    x: np.ndarray
    y: np.ndarray


@dataclass
class StepCounters:
    """Forward-pass accounting, one entry per tower."""

    forward_calls: dict = field(default_factory=lambda: {"img": 0, "txt": 0})
    forward_examples: dict = field(default_factory=lambda: {"img": 0, "txt": 0})

    def record(self, tower: str, n_rows: int):
        self.forward_calls[tower] += 1
        self.forward_examples[tower] += n_rows

    def passes(self, tower: str, batch: int) -> float:
        """Forward passes over the batch (1.0 = each example seen once)."""
        return self.forward_examples[tower] / batch


@dataclass
class GradPacket:
    """One microbatch's contribution: K-scaled gradients and optional variance."""

    tower: str
    index: int  # 1-based within the tower's sequence
    count: int  # K for this tower
    grads: dict[str, np.ndarray]
    var: dict[str, np.ndarray] | None = None

    def elems(self) -> int:
        n = sum(a.size for a in self.grads.values())
        if self.var is not None:
            n += sum(a.size for a in self.var.values())
        return n

    def release(self, ledger):
        ledger.free("grad", self.elems())


def _grad_elems(grads: dict[str, np.ndarray]) -> int:
    return sum(a.size for a in grads.values())


def embed_phase(net: EncoderNet, inputs: np.ndarray, m: int, buffer: np.ndarray,
                tower: str, ledger=NULL_LEDGER, counters: StepCounters | None = None):
    """Fill `buffer` with tapeless microbatch embeddings of `inputs`.

    Chunking cannot change the result: forward is row-independent apart
    from batchnorm, so buffer rows are bitwise equal for any m.
    """
    n = inputs.shape[0]
    for start in range(0, n, m):
        rows = slice(start, start + m)
        out, _ = net.forward(inputs[rows], policy=save_none(net),
                             project=True, ledger=ledger)
        if counters is not None:
            counters.record(tower, out.shape[0])
        buffer[rows] = out
        ledger.free("act", out.size)


def couple_embeddings(x: np.ndarray, y: np.ndarray, tau: float,
                      ledger=NULL_LEDGER):
    """Similarity grid -> loss -> embedding gradients dX, dY.

    Consumes the "embed" buffers x and y (frees them; the caller must drop
    its references) and leaves dx, dy live under "embed". Shared by the
    microbatch engine and the whole-batch reference so both couple through
    bitwise-identical arithmetic.
    """
    a = ct.similarity_matrix(x, y, tau)
    ledger.alloc("sim", a.size)
    loss = ct.contrastive_loss(a)
    da = ct.loss_grad_wrt_a(a)
    ledger.alloc("sim", da.size)
    ledger.free("sim", a.size)
    del a
    dx, dy = ct.grads_to_embeddings(da, x, y, tau)
    ledger.alloc("embed", dx.size)
    ledger.alloc("embed", dy.size)
    ledger.free("sim", da.size)
    del da
    ledger.free("embed", x.size)
    ledger.free("embed", y.size)
    return loss, dx, dy


def microbatch_gradients(f: EncoderNet, g: EncoderNet, images: np.ndarray,
                         texts: np.ndarray, plan: BatchPlan, tau: float, *,
                         towers=TOWERS, with_variance: bool = False,
                         ledger=NULL_LEDGER, counters: StepCounters | None = None):
    """Run one contrastive step; returns (loss, packet generator).

    The generator yields GradPacket objects (image tower first, then text),
    holding ledger-live "grad" buffers until the caller calls release().
    Consume it fully: the embedding gradient buffers are freed when it is
    exhausted. `towers` restricts which towers get re-forwarded (a frozen
    tower is embedded but never backpropagated).
    """
    b = plan.batch
    if images.shape[0] != b or texts.shape[0] != b:
        raise ShapeError(
            f"plan batch {b} != inputs ({images.shape[0]}, {texts.shape[0]})"
        )
    if f.d_out != g.d_out:
        raise ShapeError("towers must share the embedding dimension")
    for t in towers:
        if t not in TOWERS:
            raise ConfigError(f"unknown tower {t!r}")
    if with_variance and plan.replicas < 2:
        raise VarianceUnestimableError(
            "variance correction needs replicas >= 2 to estimate spread"
        )
    d = f.d_out

    # --- embed phase: no tapes, only the embedding rows survive
    x = np.empty((b, d), dtype=np.float64)
    ledger.alloc("embed", x.size)
    embed_phase(f, images, plan.m_img, x, "img", ledger, counters)
    y = np.empty((b, d), dtype=np.float64)
    ledger.alloc("embed", y.size)
    embed_phase(g, texts, plan.m_txt, y, "txt", ledger, counters)

    loss, dx, dy = couple_embeddings(x, y, tau, ledger)
    del x, y

    def packets():
        for tower, net, inputs, dgrad in (("img", f, images, dx),
                                          ("txt", g, texts, dy)):
            if tower not in towers:
                continue
            k = plan.k(tower)
            m = plan.m(tower)
            for i in range(k):
                rows = slice(i * m, (i + 1) * m)
                yield _one_microbatch(net, inputs[rows], dgrad[rows], tower,
                                      i + 1, k, plan.replicas, with_variance,
                                      ledger, counters)
        ledger.free("embed", dx.size)
        ledger.free("embed", dy.size)

    return loss, packets()


def _one_microbatch(net, rows_in, rows_grad, tower, index, k, replicas,
                    with_variance, ledger, counters) -> GradPacket:
    if replicas == 1:
        g_scaled = rows_grad * float(k)
        ledger.alloc("act", g_scaled.size)
        out, tape = net.forward(rows_in, policy=save_all(net), project=True,
                                ledger=ledger)
        if counters is not None:
            counters.record(tower, out.shape[0])
        ledger.free("act", out.size)
        del out
        grads = net.backward(tape, g_scaled, ledger=ledger)
        ledger.free("act", g_scaled.size)
        return GradPacket(tower, index, k, grads)

    # replica split: R separate backprops, averaged; variance estimated
    # across the replica copies. Import here keeps optim decoupled at load.
    from .optim import ReplicaGrads, estimate_microbatch_variance

    m = rows_in.shape[0]
    r = replicas
    per = m // r
    scale = float(k * r)
    replica_grads = []
    for j in range(r):
        sl = slice(j * per, (j + 1) * per)
        g_scaled = rows_grad[sl] * scale
        ledger.alloc("act", g_scaled.size)
        out, tape = net.forward(rows_in[sl], policy=save_all(net),
                                project=True, ledger=ledger)
        if counters is not None:
            counters.record(tower, out.shape[0])
        ledger.free("act", out.size)
        del out
        d_j = net.backward(tape, g_scaled, ledger=ledger)
        size = _grad_elems(d_j)
        ledger.free("grad", size)  # reclassify: replica copy, not packet
        ledger.alloc("replica", size)
        ledger.free("act", g_scaled.size)
        replica_grads.append(d_j)

    rg = ReplicaGrads(replica_grads)
    c_i = {name: sum(d[name] for d in replica_grads) / r for name in replica_grads[0]}
    ledger.alloc("grad", _grad_elems(c_i))
    var = None
    if with_variance:
        var = estimate_microbatch_variance(rg, m)
        ledger.alloc("grad", _grad_elems(var))
    for d_j in replica_grads:
        ledger.free("replica", _grad_elems(d_j))
    return GradPacket(tower, index, k, c_i, var)


def monolithic_oracle(f: EncoderNet, g: EncoderNet, images: np.ndarray,
                      texts: np.ndarray, tau: float, *, ledger=NULL_LEDGER,
                      counters: StepCounters | None = None):
    """Whole-batch reference: full tapes, single backward per tower.

    Returns (loss, grads_f, grads_g). Gradient packets are ledger-live
    under "grad" (caller frees); this is also the data-parallel strategy's
    execution path for the memory comparison.
    """
    b = images.shape[0]
    if texts.shape[0] != b:
        raise ShapeError("image and text batches must have equal rows")
    x, tape_f = f.forward(images, policy=save_all(f), project=True, ledger=ledger)
    if counters is not None:
        counters.record("img", b)
    ledger.free("act", x.size)
    ledger.alloc("embed", x.size)
    y, tape_g = g.forward(texts, policy=save_all(g), project=True, ledger=ledger)
    if counters is not None:
        counters.record("txt", b)
    ledger.free("act", y.size)
    ledger.alloc("embed", y.size)

    loss, dx, dy = couple_embeddings(x, y, tau, ledger)
    del x, y

    grads_f = f.backward(tape_f, dx, ledger=ledger)
    ledger.free("embed", dx.size)
    grads_g = g.backward(tape_g, dy, ledger=ledger)
    ledger.free("embed", dy.size)
    return loss, grads_f, grads_g


# === analytic ledger-event models =====================================
# Mirrors of the execution paths above, event for event, from shapes alone.

def _net_meta(net: EncoderNet):
    dims = net.dims()
    norms = [layer.norm for layer in net.layers]
    return dims, norms


def couple_events(b: int, d: int):
    """Ledger events of couple_embeddings."""
    yield ("sim", b * b)
    yield ("sim", b * b)
    yield ("sim", -b * b)
    yield ("embed", b * d)
    yield ("embed", b * d)
    yield ("sim", -b * b)
    yield ("embed", -b * d)
    yield ("embed", -b * d)


def step_events(f: EncoderNet, g: EncoderNet, plan: BatchPlan, *,
                towers=TOWERS, with_variance: bool = False,
                consume_packets: bool = True):
    """Ledger events of microbatch_gradients + full packet consumption."""
    b = plan.batch
    d = f.d_out
    metas = {"img": _net_meta(f), "txt": _net_meta(g)}
    packet = {"img": f.n_params(), "txt": g.n_params()}

    for tower, net in (("img", f), ("txt", g)):
        dims, _ = metas[tower]
        m = plan.m(tower)
        yield ("embed", b * d)
        for _ in range(plan.k(tower)):
            yield from forward_events(dims, m, [False] * (len(dims) - 1), True)
            yield ("act", -m * d)
    yield from couple_events(b, d)

    for tower in ("img", "txt"):
        if tower not in towers:
            continue
        dims, norms = metas[tower]
        m = plan.m(tower)
        saved = [True] * (len(dims) - 1)
        for _ in range(plan.k(tower)):
            if plan.replicas == 1:
                yield ("act", m * d)
                yield from forward_events(dims, m, saved, True)
                yield ("act", -m * d)
                yield from backward_events(dims, m, saved, True, norms)
                yield ("act", -m * d)
            else:
                per = m // plan.replicas
                for _ in range(plan.replicas):
                    yield ("act", per * d)
                    yield from forward_events(dims, per, saved, True)
                    yield ("act", -per * d)
                    yield from backward_events(dims, per, saved, True, norms)
                    yield ("grad", -packet[tower])
                    yield ("replica", packet[tower])
                    yield ("act", -per * d)
                yield ("grad", packet[tower])
                if with_variance:
                    yield ("grad", packet[tower])
                yield ("replica", -plan.replicas * packet[tower])
            if consume_packets:
                n = packet[tower]
                if plan.replicas > 1 and with_variance:
                    n *= 2
                yield ("grad", -n)
    yield ("embed", -b * d)
    yield ("embed", -b * d)


def oracle_events(f: EncoderNet, g: EncoderNet, b: int, *,
                  consume_packets: bool = True):
    """Ledger events of monolithic_oracle (the data-parallel execution)."""
    d = f.d_out
    for net in (f, g):
        dims, _ = _net_meta(net)
        yield from forward_events(dims, b, [True] * (len(dims) - 1), True)
        yield ("act", -b * d)
        yield ("embed", b * d)
    yield from couple_events(b, d)
    for net in (f, g):
        dims, norms = _net_meta(net)
        saved = [True] * (len(dims) - 1)
        yield from backward_events(dims, b, saved, True, norms)
        yield ("embed", -b * d)
    # both packets are returned together, so the caller can only free them
    # after the call; the grad tail therefore holds both at once
    if consume_packets:
        yield ("grad", -f.n_params())
        yield ("grad", -g.n_params())


def replay_events(events) -> dict:
    """Run an event stream through a scratch ledger; return its peaks."""
    from .ledger import MemoryLedger

    led = MemoryLedger()
    for category, delta in events:
        if delta >= 0:
            led.alloc(category, delta)
        else:
            led.free(category, -delta)
    return {
        "total_peak": led.total_peak,
        "category_peak": dict(led.category_peak),
        "live": dict(led.live),
    }

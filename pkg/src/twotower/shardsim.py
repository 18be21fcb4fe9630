"""Weight sharding, gather-on-use execution, and strategy memory models.

Dense weights are split into per-core pieces along one axis and gathered
just-in-time: a layer's full weight exists only while that layer runs, then
the gathered buffer is discarded. Because np.concatenate restores the exact
bytes of the original tensor and all math goes through the shared layer
primitives, a sharded tower's outputs and gradients are bitwise equal to the
unsharded network's; only ledger traffic changes.

Normalization vectors (gamma/beta) are replicated, never sharded and never
gathered: every core owns a full copy, so recomputing norm and activation
blocks in backward needs no communication. The ledger's gather log makes
that checkable.

Optimizer state is sharded exactly like the weights. Per-core moment slots
are created from the shard arrays themselves, so slot shapes cannot drift
from shard shapes.

Strategy peak models: peak_memory() runs the real execution path for one of
the three strategies against a fresh ledger, replays the matching analytic
event stream, and adds static per-core weight + slot residency. Note the
factorized second moment of a shard differs numerically from a shard of the
full factorized moment (row/col sums run over different index sets), so
sharded vs unsharded optimizer trajectories only coincide with
factor_matrices=False; the bitwise claims here are about forward/backward.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoders import (ActivationTape, EncoderNet, layer_backward,
                       layer_dense, layer_norm_act, project_rows,
                       project_rows_backward, save_all)
from .errors import ConfigError, ShapeError, ShardError
from .ledger import NULL_LEDGER, MemoryLedger
from .microbatch import (BatchPlan, couple_embeddings, couple_events,
                         microbatch_gradients, monolithic_oracle,
                         oracle_events, replay_events, step_events)
from .optim import MomentSlots


@dataclass
class ShardedWeight:
    """One tensor as per-core pieces (or one copy replicated to every core)."""

    name: str
    shards: list[np.ndarray]
    axis: int
    cores: int
    replicated: bool = False

    @property
    def full_shape(self) -> tuple:
        if self.replicated:
            return self.shards[0].shape
        shape = list(self.shards[0].shape)
        shape[self.axis] *= self.cores
        return tuple(shape)

    def full_elems(self) -> int:
        return int(np.prod(self.full_shape))

    def per_core_elems(self) -> int:
        """Elements one core stores: its shard, or the whole replicated copy."""
        return self.shards[0].size

    def full(self) -> np.ndarray:
        """Materialize the whole tensor (no ledger traffic; tests/updates)."""
        if self.replicated:
            return self.shards[0]
        return np.concatenate(self.shards, axis=self.axis)


def shard(w: np.ndarray, cores: int, axis: int = 0, name: str = "w") -> ShardedWeight:
    """Split w into `cores` equal contiguous pieces along `axis`."""
    if cores < 1:
        raise ShardError(f"cores must be >= 1, got {cores}")
    if not 0 <= axis < w.ndim:
        raise ShardError(f"axis {axis} out of range for shape {w.shape}")
    if w.shape[axis] % cores:
        raise ShardError(
            f"{name}: extent {w.shape[axis]} on axis {axis} is not divisible "
            f"by {cores} cores"
        )
    pieces = [np.ascontiguousarray(p) for p in np.split(w, cores, axis=axis)]
    return ShardedWeight(name, pieces, axis, cores)


def replicate(w: np.ndarray, cores: int, name: str) -> ShardedWeight:
    """Mark w as living in full on every core (norm vectors)."""
    if cores < 1:
        raise ShardError(f"cores must be >= 1, got {cores}")
    return ShardedWeight(name, [w.copy()], 0, cores, replicated=True)


@contextmanager
def gathered(sw: ShardedWeight, ledger=NULL_LEDGER):
    """Materialize a sharded tensor for one use, then discard it.

    Replicated tensors come straight from local storage: no gather event,
    no transient. Split tensors log one gather and hold "gathered" elements
    for the duration of the block.
    """
    if sw.replicated:
        yield sw.shards[0]
        return
    full = np.concatenate(sw.shards, axis=sw.axis)
    ledger.record_gather(sw.name, full.size)
    ledger.alloc("gathered", full.size)
    try:
        yield full
    finally:
        ledger.free("gathered", full.size)


class ShardedLayer:
    """Layer whose dense weight is sharded; duck-typed against LayerSpec.

    The shared norm/act primitives only read .norm/.act/.gamma/.beta, so a
    ShardedLayer can stand in for a LayerSpec everywhere the dense weight is
    passed separately. gamma/beta come back as plain arrays because they are
    replicated in full on every core.
    """

    __slots__ = ("w", "act", "norm", "_gamma", "_beta")

    def __init__(self, w: ShardedWeight, act: str, norm: str,
                 gamma: ShardedWeight | None, beta: ShardedWeight | None):
        self.w = w
        self.act = act
        self.norm = norm
        self._gamma = gamma
        self._beta = beta

    @property
    def gamma(self):
        return self._gamma.shards[0] if self._gamma is not None else None

    @property
    def beta(self):
        return self._beta.shards[0] if self._beta is not None else None

    @property
    def d_in(self) -> int:
        return self.w.full_shape[0]

    @property
    def d_out(self) -> int:
        return self.w.full_shape[1]


class ShardedTower:
    """Gather-on-use execution over sharded copies of an EncoderNet.

    forward/backward walk the exact schedules of EncoderNet.forward/backward
    (same primitives, same ledger event order) with gather events woven in
    around each dense-weight use. Gradients come back full-size under the
    unsharded parameter names, bitwise equal to the plain network's.
    """

    def __init__(self, net: EncoderNet, cores: int, axis: int = 0):
        if axis != 0:
            # axis 1 splits d_out; the gather-transpose bookkeeping isn't
            # implemented, and axis 0 already exercises the mechanism.
            raise ShardError("only axis-0 (input dimension) sharding is supported")
        self.name = net.name
        self.cores = cores
        self.axis = axis
        self.layers: list[ShardedLayer] = []
        for l, layer in enumerate(net.layers):
            w = shard(layer.w, cores, axis, name=f"{net.name}/layer{l}/w")
            gamma = beta = None
            if layer.norm != "none":
                gamma = replicate(layer.gamma, cores, f"{net.name}/layer{l}/gamma")
                beta = replicate(layer.beta, cores, f"{net.name}/layer{l}/beta")
            self.layers.append(ShardedLayer(w, layer.act, layer.norm, gamma, beta))

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]

    def sharded_params(self) -> dict[str, ShardedWeight]:
        out = {}
        for layer in self.layers:
            out[layer.w.name] = layer.w
            if layer._gamma is not None:
                out[layer._gamma.name] = layer._gamma
                out[layer._beta.name] = layer._beta
        return out

    def per_core_param_elems(self) -> int:
        return sum(sw.per_core_elems() for sw in self.sharded_params().values())

    def n_params(self) -> int:
        return sum(sw.full_elems() for sw in self.sharded_params().values())

    # --- execution (kept in lockstep with EncoderNet) ------------------

    def forward(self, x: np.ndarray, policy=None, project: bool = True,
                ledger=NULL_LEDGER):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"input shape {x.shape} does not match d_in={self.d_in}")
        if policy is None:
            policy = ("recompute",) * len(self.layers)
        tape = ActivationTape(self, x, policy, project)
        h = x
        for l, layer in enumerate(self.layers):
            with gathered(layer.w, ledger) as w:
                z = layer_dense(h, w)
                if tape.policy[l] == "save":
                    ledger.alloc("act", z.size)
                    tape.saved[l] = z
            h_next = layer_norm_act(z, layer)
            ledger.alloc("act", h_next.size)
            if l > 0:
                ledger.free("act", h.size)
            h = h_next
        if project:
            y = project_rows(h)
            ledger.alloc("act", y.size)
            ledger.free("act", h.size)
            return y, tape
        return h, tape

    def backward(self, tape: ActivationTape, g_out: np.ndarray,
                 ledger=NULL_LEDGER) -> dict[str, np.ndarray]:
        g_out = np.asarray(g_out, dtype=np.float64)
        tape.check(self, g_out.shape[0])
        if g_out.ndim != 2 or g_out.shape[1] != self.d_out:
            raise ShapeError(f"gradient shape {g_out.shape} != (n, {self.d_out})")

        L = len(self.layers)
        zs: list[np.ndarray] = []
        h = tape.inputs
        for l, layer in enumerate(self.layers):
            z = tape.saved.get(l)
            if z is None:
                with gathered(layer.w, ledger) as w:
                    z = layer_dense(h, w)
                    ledger.alloc("act", z.size)
            zs.append(z)
            h_next = layer_norm_act(z, layer)
            ledger.alloc("act", h_next.size)
            if l > 0:
                ledger.free("act", h.size)
            h = h_next

        if tape.projected:
            g_h = project_rows_backward(h, g_out)
            ledger.alloc("act", g_h.size)
            own_g = True
        else:
            g_h = g_out
            own_g = False
        ledger.free("act", h.size)

        grads: dict[str, np.ndarray] = {}
        for l in range(L - 1, -1, -1):
            layer = self.layers[l]
            if l > 0:
                h_in = layer_norm_act(zs[l - 1], self.layers[l - 1])
                ledger.alloc("act", h_in.size)
            else:
                h_in = tape.inputs
            if l > 0:
                with gathered(layer.w, ledger) as w:
                    g_prev, dw, dgamma, dbeta = layer_backward(
                        layer, w, zs[l], h_in, g_h, need_g_prev=True
                    )
            else:
                g_prev, dw, dgamma, dbeta = layer_backward(
                    layer, None, zs[l], h_in, g_h, need_g_prev=False
                )
            ledger.alloc("grad", dw.size)
            grads[f"{self.name}/layer{l}/w"] = dw
            if dgamma is not None:
                ledger.alloc("grad", dgamma.size + dbeta.size)
                grads[f"{self.name}/layer{l}/gamma"] = dgamma
                grads[f"{self.name}/layer{l}/beta"] = dbeta
            if l > 0:
                ledger.alloc("act", g_prev.size)
            if own_g:
                ledger.free("act", g_h.size)
            ledger.free("act", zs[l].size)
            tape.saved.pop(l, None)
            if l > 0:
                ledger.free("act", h_in.size)
            g_h = g_prev
            own_g = l > 0
        return grads


def scatter_grads(tower: ShardedTower,
                  grads: dict[str, np.ndarray]) -> list[dict[str, np.ndarray]]:
    """Split full gradients into per-core dicts matching the shard layout.

    Sharded weights contribute the core's slice; replicated vectors appear
    whole in every core's dict. Slices are views into `grads`; copy before
    mutating.
    """
    out: list[dict[str, np.ndarray]] = [{} for _ in range(tower.cores)]
    for name, sw in tower.sharded_params().items():
        g = grads[name]
        if g.shape != sw.full_shape:
            raise ShapeError(
                f"{name}: gradient shape {g.shape} != weight {sw.full_shape}"
            )
        if sw.replicated:
            for core_dict in out:
                core_dict[name] = g
        else:
            for core, piece in enumerate(np.split(g, tower.cores, axis=sw.axis)):
                out[core][name] = piece
    return out


def make_sharded_slots(tower: ShardedTower, beta1: float, beta2: float,
                       precision_emulation: bool = False,
                       factor_matrices: bool = True) -> list[dict[str, MomentSlots]]:
    """Per-core optimizer slots built from each core's own shard arrays.

    Creating slots from the shards themselves is what enforces that moment
    shapes track shard shapes; there is no separate shape argument to get
    wrong.
    """
    out = []
    for core in range(tower.cores):
        slots = {}
        for name, sw in tower.sharded_params().items():
            arr = sw.shards[0] if sw.replicated else sw.shards[core]
            slots[name] = MomentSlots.create(
                arr.shape, beta1, beta2, precision_emulation, factor_matrices
            )
        out.append(slots)
    return out


# === rematerialization policy =========================================

BLOCK_KINDS = ("dense-block", "norm", "activation", "se-like")
REPLICATED_KINDS = frozenset({"norm", "se-like"})


def remat_policy(kind: str) -> str:
    """Tape decision for one block kind: "save" its output or "recompute".

    Dense block outputs are the checkpoints; the cheap blocks downstream of
    them (normalization, elementwise activations, squeeze-excite style
    gating) are recomputed during backward. Blocks in REPLICATED_KINDS keep
    any weights replicated on every core so recomputation never gathers.
    """
    table = {
        "dense-block": "save",
        "norm": "recompute",
        "activation": "recompute",
        "se-like": "recompute",
    }
    if kind not in table:
        raise ConfigError(f"unknown block kind {kind!r}")
    return table[kind]


def default_policy(net) -> tuple:
    """The standard tape for a tower: one decision per dense block."""
    return tuple(remat_policy("dense-block") for _ in net.layers)


# === strategy runners and peak models =================================

STRATEGIES = ("data-parallel", "pipeline-gradaccum", "spmd-shard")


@dataclass
class MemReport:
    """Per-core memory picture of one training step under a strategy."""

    strategy: str
    batch: int
    m_img: int
    m_txt: int
    replicas: int
    cores: int
    static_elems: int       # weights + optimizer slots resident per core
    dynamic_peak: int       # instrumented ledger high-water mark
    analytic_peak: int      # replayed event-model high-water mark
    gather_elements: int
    category_peaks: dict

    @property
    def peak_elements(self) -> int:
        return self.static_elems + self.dynamic_peak


def _slot_elems(shape: tuple, factor_matrices: bool) -> int:
    return MomentSlots.create(shape, 0.0, 0.0,
                              factor_matrices=factor_matrices).elems()


def static_residency(f: EncoderNet, g: EncoderNet, strategy: str,
                     cores: int = 1, factor_matrices: bool = True) -> int:
    """Per-core elements held across steps: weights plus moment slots.

    Only spmd-shard divides anything: its 2-D weights (and their slots) are
    split along axis 0 across cores, while 1-D vectors stay replicated. The
    other strategies keep full copies everywhere.
    """
    total = 0
    for net in (f, g):
        for name, w in net.param_arrays().items():
            if strategy == "spmd-shard" and w.ndim == 2:
                if w.shape[0] % cores:
                    raise ShardError(
                        f"{name}: axis-0 extent {w.shape[0]} not divisible by "
                        f"{cores} cores"
                    )
                shape = (w.shape[0] // cores, w.shape[1])
            else:
                shape = w.shape
            total += int(np.prod(shape)) + _slot_elems(shape, factor_matrices)
    return total


def sharded_step(tf: ShardedTower, tg: ShardedTower, images: np.ndarray,
                 texts: np.ndarray, tau: float, *, ledger=NULL_LEDGER):
    """Whole-batch contrastive step on sharded towers (the spmd strategy).

    Mirrors monolithic_oracle exactly, with gathers around each dense use.
    Returns (loss, grads_f, grads_g); gradients are full-size and live
    under "grad" until the caller frees them.
    """
    b = images.shape[0]
    if texts.shape[0] != b:
        raise ShapeError("image and text batches must have equal rows")
    x, tape_f = tf.forward(images, policy=save_all(tf), project=True, ledger=ledger)
    ledger.free("act", x.size)
    ledger.alloc("embed", x.size)
    y, tape_g = tg.forward(texts, policy=save_all(tg), project=True, ledger=ledger)
    ledger.free("act", y.size)
    ledger.alloc("embed", y.size)

    loss, dx, dy = couple_embeddings(x, y, tau, ledger)
    del x, y

    grads_f = tf.backward(tape_f, dx, ledger=ledger)
    ledger.free("embed", dx.size)
    grads_g = tg.backward(tape_g, dy, ledger=ledger)
    ledger.free("embed", dy.size)
    return loss, grads_f, grads_g


def peak_memory(strategy: str, f: EncoderNet, g: EncoderNet, batch: int, *,
                m_img: int | None = None, m_txt: int | None = None,
                replicas: int = 1, cores: int = 1, tau: float = 0.1,
                with_variance: bool = False, seed: int = 0,
                factor_matrices: bool = True) -> MemReport:
    """Measure one step's per-core memory under a parallelism strategy.

    Runs the strategy's real execution path with a fresh ledger on synthetic
    inputs, replays the matching analytic event model, and adds static
    weight + slot residency. All strategies consume gradient packets
    immediately (fused optimizer updates hold no extra gradient copy).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; pick from {STRATEGIES}")
    rng = nm.Rng(seed).split("memprobe")
    images = rng.split("img").normal((batch, f.d_in))
    texts = rng.split("txt").normal((batch, g.d_in))
    m_img = m_img or batch
    m_txt = m_txt or batch

    led = MemoryLedger()
    if strategy == "data-parallel":
        _, gf, gg = monolithic_oracle(f, g, images, texts, tau, ledger=led)
        led.free("grad", sum(a.size for a in gf.values()))
        led.free("grad", sum(a.size for a in gg.values()))
        events = oracle_events(f, g, batch)
    elif strategy == "pipeline-gradaccum":
        plan = BatchPlan(batch, m_img, m_txt, replicas)
        _, packets = microbatch_gradients(f, g, images, texts, plan, tau,
                                          with_variance=with_variance,
                                          ledger=led)
        for packet in packets:
            packet.release(led)
        events = step_events(f, g, plan, with_variance=with_variance)
    else:
        tf = ShardedTower(f, cores)
        tg = ShardedTower(g, cores)
        _, gf, gg = sharded_step(tf, tg, images, texts, tau, ledger=led)
        led.free("grad", sum(a.size for a in gf.values()))
        led.free("grad", sum(a.size for a in gg.values()))
        events = spmd_events(f, g, batch)

    replay = replay_events(events)
    if led.live_elems():
        raise RuntimeError(
            f"ledger leak in {strategy} run: {dict(led.live)}"
        )
    return MemReport(
        strategy=strategy,
        batch=batch,
        m_img=m_img,
        m_txt=m_txt,
        replicas=replicas,
        cores=cores,
        static_elems=static_residency(f, g, strategy, cores, factor_matrices),
        dynamic_peak=led.total_peak,
        analytic_peak=replay["total_peak"],
        gather_elements=led.gather_elements,
        category_peaks=dict(led.category_peak),
    )


# === analytic event mirrors for the sharded paths =====================
# Same contract as the generators in encoders/microbatch: these emit the
# exact (category, +/-elements) order that ShardedTower.forward/backward
# and sharded_step announce. Keep in lockstep with the methods.

def sharded_forward_events(dims: list[int], n: int, save_flags, project: bool):
    prev_h = 0
    for l in range(1, len(dims)):
        width = n * dims[l]
        w_full = dims[l - 1] * dims[l]
        yield ("gathered", w_full)
        if save_flags[l - 1]:
            yield ("act", width)
        yield ("gathered", -w_full)
        yield ("act", width)
        if prev_h:
            yield ("act", -prev_h)
        prev_h = width
    if project:
        yield ("act", n * dims[-1])
        yield ("act", -prev_h)


def sharded_backward_events(dims: list[int], n: int, saved_flags,
                            projected: bool, norms):
    L = len(dims) - 1
    prev_h = 0
    for l in range(1, L + 1):
        width = n * dims[l]
        if not saved_flags[l - 1]:
            w_full = dims[l - 1] * dims[l]
            yield ("gathered", w_full)
            yield ("act", width)
            yield ("gathered", -w_full)
        yield ("act", width)
        if prev_h:
            yield ("act", -prev_h)
        prev_h = width
    if projected:
        yield ("act", n * dims[-1])
    yield ("act", -prev_h)
    own_g = projected
    for l in range(L, 0, -1):
        width = n * dims[l]
        d_in = n * dims[l - 1]
        if l > 1:
            yield ("act", d_in)  # h_in recompute
        if l > 1:
            w_full = dims[l - 1] * dims[l]
            yield ("gathered", w_full)
            yield ("gathered", -w_full)
        yield ("grad", dims[l - 1] * dims[l])
        if norms[l - 1] != "none":
            yield ("grad", 2 * dims[l])
        if l > 1:
            yield ("act", d_in)  # g_prev
        if own_g:
            yield ("act", -width)
        yield ("act", -width)  # z consumed
        if l > 1:
            yield ("act", -d_in)
        own_g = l > 1


def spmd_events(f: EncoderNet, g: EncoderNet, b: int, *,
                consume_packets: bool = True):
    """Ledger events of sharded_step plus packet consumption.

    Gather transient sizes are core-count independent (a gather always
    materializes the full tensor), so cores do not appear here; they only
    change static residency.
    """
    d = f.d_out
    for net in (f, g):
        dims = net.dims()
        yield from sharded_forward_events(dims, b, [True] * (len(dims) - 1), True)
        yield ("act", -b * d)
        yield ("embed", b * d)
    yield from couple_events(b, d)
    for net in (f, g):
        dims = net.dims()
        norms = [layer.norm for layer in net.layers]
        yield from sharded_backward_events(dims, b, [True] * (len(dims) - 1),
                                           True, norms)
        yield ("embed", -b * d)
    # grads for both towers are returned together; freed only after the call
    if consume_packets:
        yield ("grad", -f.n_params())
        yield ("grad", -g.n_params())

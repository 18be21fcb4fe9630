"""Feed-forward encoder towers with explicit, replayable backward passes.

An EncoderNet is a stack of dense layers, each `z = h @ W` followed by an
optional normalization and an elementwise activation, with an optional final
projection onto the unit sphere. There is no autograd: forward records (at
most) the dense outputs z_l on an ActivationTape, and backward re-derives
everything else from them. Because every reduction runs through the
fixed-order kernels, a recomputed activation is bitwise equal to the one the
forward pass produced, so the tape can drop activations freely (down to
nothing) without changing a single bit of any gradient.

Layer normalization is per-row and keeps microbatch results identical to
full-batch results. Batch normalization couples rows on purpose; it exists
as the negative control showing what chunked gradients do to a
batch-coupled layer.

Memory instrumentation follows the package-wide convention (see
twotower.ledger): arrays surviving a layer-step boundary are announced to the
ledger under "act" (outputs, tape entries, gradient flows) or "grad" (weight
gradients). The analytic models at the bottom of this file walk the exact
same alloc/free schedule as forward()/backward(); the test suite asserts the
two agree, so keep them in lockstep when editing either.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError, TapeError
from .ledger import NULL_LEDGER

ACTIVATIONS = ("relu", "identity")
NORMS = ("none", "layernorm", "batchnorm")
NORM_EPS = 1e-6


@dataclass
class LayerSpec:
    """One dense layer: weight [d_in, d_out], then norm, then activation."""

    w: np.ndarray
    act: str = "relu"
    norm: str = "none"
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.act!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown normalization {self.norm!r}")
        if self.w.ndim != 2:
            raise ShapeError(f"layer weight must be 2-D, got {self.w.shape}")
        d_out = self.w.shape[1]
        if self.norm != "none":
            if self.gamma is None:
                self.gamma = np.ones(d_out, dtype=np.float64)
            if self.beta is None:
                self.beta = np.zeros(d_out, dtype=np.float64)
            if self.gamma.shape != (d_out,) or self.beta.shape != (d_out,):
                raise ShapeError("gamma/beta must have shape (d_out,)")

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]


class ActivationTape:
    """Record of one forward pass: inputs, save policy, saved dense outputs.

    policy[l] is "save" (keep z_l) or "recompute" (drop it; backward rebuilds
    it). A tape is bound to one (net, inputs, projection mode) triple and
    refuses to be replayed against anything else.
    """

    __slots__ = ("net_id", "inputs", "policy", "saved", "projected", "n")

    def __init__(self, net: "EncoderNet", inputs: np.ndarray, policy, projected: bool):
        if len(policy) != len(net.layers):
            raise TapeError(
                f"policy has {len(policy)} entries for a {len(net.layers)}-layer net"
            )
        for p in policy:
            if p not in ("save", "recompute"):
                raise TapeError(f"unknown tape policy entry {p!r}")
        self.net_id = id(net)
        self.inputs = inputs
        self.policy = tuple(policy)
        self.saved: dict[int, np.ndarray] = {}
        self.projected = projected
        self.n = inputs.shape[0]

    def check(self, net: "EncoderNet", n_rows: int):
        if self.net_id != id(net):
            raise TapeError("tape was recorded by a different network")
        if self.n != n_rows:
            raise TapeError("tape row count does not match the gradient")


def save_all(net: "EncoderNet"):
    return ("save",) * len(net.layers)


def save_none(net: "EncoderNet"):
    return ("recompute",) * len(net.layers)


# === per-layer primitives (shared with the sharding simulator) ===

def layer_dense(h_in: np.ndarray, w: np.ndarray) -> np.ndarray:
    return nm.matmul(h_in, w)


def layer_norm_act(z: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """norm + activation, producing the layer output as a fresh array.

    The expression tree here is byte-identical to the recomputation in
    layer_backward, so relu masks taken there match this output exactly.
    """
    if layer.norm == "layernorm":
        d = z.shape[1]
        mu = nm.row_sum(z) / d
        xc = z - mu[:, None]
        var = nm.row_sum(xc * xc) / d
        inv = 1.0 / np.sqrt(var + NORM_EPS)[:, None]
        h = (xc * inv) * layer.gamma + layer.beta
    elif layer.norm == "batchnorm":
        n = z.shape[0]
        mu = nm.col_sum(z) / n
        xc = z - mu
        var = nm.col_sum(xc * xc) / n
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        h = (xc * inv) * layer.gamma + layer.beta
    else:
        h = z.copy()
    if layer.act == "relu":
        np.maximum(h, 0.0, out=h)
    return h


def layer_backward(layer: LayerSpec, w: np.ndarray, z: np.ndarray,
                   h_in: np.ndarray, g_h: np.ndarray, need_g_prev: bool):
    """Backward through one layer given its dense output z and input h_in.

    Returns (g_prev, dW, dgamma, dbeta); g_prev is None when not requested,
    dgamma/dbeta are None for norm-free layers. Normalization statistics are
    recomputed from z with the same fixed-order reductions the forward used.
    """
    if layer.norm == "layernorm":
        d = z.shape[1]
        mu = nm.row_sum(z) / d
        xc = z - mu[:, None]
        var = nm.row_sum(xc * xc) / d
        inv = 1.0 / np.sqrt(var + NORM_EPS)[:, None]
        zhat = xc * inv
        pre_act = zhat * layer.gamma + layer.beta
        g = g_h * _act_mask(pre_act, layer.act)
        dgamma = nm.col_sum(g * zhat)
        dbeta = nm.col_sum(g)
        dzhat = g * layer.gamma
        m1 = nm.row_sum(dzhat) / d
        m2 = nm.row_sum(dzhat * zhat) / d
        g_z = inv * (dzhat - m1[:, None] - zhat * m2[:, None])
    elif layer.norm == "batchnorm":
        n = z.shape[0]
        mu = nm.col_sum(z) / n
        xc = z - mu
        var = nm.col_sum(xc * xc) / n
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        zhat = xc * inv
        pre_act = zhat * layer.gamma + layer.beta
        g = g_h * _act_mask(pre_act, layer.act)
        dgamma = nm.col_sum(g * zhat)
        dbeta = nm.col_sum(g)
        dzhat = g * layer.gamma
        m1 = nm.col_sum(dzhat) / n
        m2 = nm.col_sum(dzhat * zhat) / n
        g_z = inv * (dzhat - m1 - zhat * m2)
    else:
        g_z = g_h * _act_mask(z, layer.act)
        dgamma = dbeta = None
    dw = nm.matmul(h_in.T, g_z)
    g_prev = nm.matmul(g_z, w.T) if need_g_prev else None
    return g_prev, dw, dgamma, dbeta


def _act_mask(pre_act: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre_act > 0.0).astype(np.float64)
    return np.ones_like(pre_act)


def project_rows(h: np.ndarray) -> np.ndarray:
    return nm.l2_normalize_rows(h)


def project_rows_backward(h: np.ndarray, g_y: np.ndarray) -> np.ndarray:
    """Jacobian-transpose of row-wise sphere projection y = h/|h|."""
    norms = nm.row_norms(h)[:, None]
    y = h / norms
    inner = nm.row_sum(g_y * y)[:, None]
    return (g_y - inner * y) / norms


class EncoderNet:
    """A named stack of LayerSpec with forward/backward and tape remat."""

    def __init__(self, layers: list[LayerSpec], name: str = "enc"):
        if not layers:
            raise ConfigError("encoder needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.d_out != b.d_in:
                raise ShapeError(
                    f"layer widths do not chain: {a.w.shape} then {b.w.shape}"
                )
        self.layers = layers
        self.name = name

    # --- construction ------------------------------------------------

    @classmethod
    def build(cls, rng: nm.Rng, dims: list[int], acts=None, norms=None,
              name: str = "enc") -> "EncoderNet":
        """dims = [d_in, hidden..., d_embed]; weights ~ U(+-1/sqrt(fan_in)).

        Default shape: relu + layernorm on hidden layers, identity and no
        norm on the final layer.
        """
        n_layers = len(dims) - 1
        if n_layers < 1:
            raise ConfigError("dims must list input plus at least one layer")
        if acts is None:
            acts = ["relu"] * (n_layers - 1) + ["identity"]
        if norms is None:
            norms = ["layernorm"] * (n_layers - 1) + ["none"]
        if len(acts) != n_layers or len(norms) != n_layers:
            raise ConfigError("acts/norms must have one entry per layer")
        layers = []
        for l in range(n_layers):
            bound = 1.0 / np.sqrt(dims[l])
            w = rng.split("w", l).uniform(-bound, bound, (dims[l], dims[l + 1]))
            layers.append(LayerSpec(w=w, act=acts[l], norm=norms[l]))
        return cls(layers, name=name)

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Live weight references, keyed 'name/layerN/{w,gamma,beta}'."""
        out = {}
        for l, layer in enumerate(self.layers):
            out[f"{self.name}/layer{l}/w"] = layer.w
            if layer.norm != "none":
                out[f"{self.name}/layer{l}/gamma"] = layer.gamma
                out[f"{self.name}/layer{l}/beta"] = layer.beta
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays().values())

    # --- forward -----------------------------------------------------

    def forward(self, x: np.ndarray, policy=None, project: bool = True,
                ledger=NULL_LEDGER):
        """Run the stack; rows of x are independent examples.

        Returns (output, tape). policy defaults to saving nothing. The
        output is ledger-live under "act" and caller-owned.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"input shape {x.shape} does not match d_in={self.d_in}")
        tape = ActivationTape(self, x, policy or save_none(self), project)
        h = x
        for l, layer in enumerate(self.layers):
            z = layer_dense(h, layer.w)
            if tape.policy[l] == "save":
                ledger.alloc("act", z.size)  # tape entry, persists
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

    # --- backward ----------------------------------------------------

    def backward(self, tape: ActivationTape, g_out: np.ndarray,
                 ledger=NULL_LEDGER) -> dict[str, np.ndarray]:
        """Gradients of every weight given d(loss)/d(output).

        g_out is wrt the projected output when the tape was recorded with
        project=True, else wrt the raw last layer. g_out stays caller-owned
        and is never freed here. Tape entries are consumed as the walk
        passes them; the returned gradient dict is ledger-live under "grad".
        """
        g_out = np.asarray(g_out, dtype=np.float64)
        tape.check(self, g_out.shape[0])
        if g_out.ndim != 2 or g_out.shape[1] != self.d_out:
            raise ShapeError(f"gradient shape {g_out.shape} != (n, {self.d_out})")

        L = len(self.layers)
        # materialize: fetch-or-recompute every dense output; bitwise equal
        # to the forward pass because the ops and their order are identical.
        zs: list[np.ndarray] = []
        h = tape.inputs
        for l, layer in enumerate(self.layers):
            z = tape.saved.get(l)
            if z is None:
                z = layer_dense(h, layer.w)
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
            g_h = g_out  # caller's buffer
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
            g_prev, dw, dgamma, dbeta = layer_backward(
                layer, layer.w, zs[l], h_in, g_h, need_g_prev=(l > 0)
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
            own_g = l > 0  # every g_prev we made is ours to free next round
        return grads


# === analytic memory event models ====================================
# These generators emit the exact (category, +/-elements) sequence that
# forward()/backward() announce to the ledger, derived from dims alone.
# Strategy-level peak models replay them through a scratch MemoryLedger.
# Keep them in lockstep with the methods; tests assert instrumented ==
# analytic for both phases and all policies.

def forward_events(dims: list[int], n: int, save_flags, project: bool):
    """Ledger events of one forward pass. Output stays live (caller frees)."""
    prev_h = 0
    for l in range(1, len(dims)):
        width = n * dims[l]
        if save_flags[l - 1]:
            yield ("act", width)  # tape entry, persists
        yield ("act", width)  # h_l
        if prev_h:
            yield ("act", -prev_h)
        prev_h = width
    if project:
        yield ("act", n * dims[-1])
        yield ("act", -prev_h)


def backward_events(dims: list[int], n: int, saved_flags, projected: bool,
                    norms):
    """Ledger events of backward on a tape whose saved z's are already live.

    Ends with all act buffers freed and one weight-shaped gradient packet
    live under "grad" (caller frees). Raw-mode (projected=False) incoming
    gradients are caller-owned and never appear here.
    """
    L = len(dims) - 1
    # materialize pass
    prev_h = 0
    for l in range(1, L + 1):
        width = n * dims[l]
        if not saved_flags[l - 1]:
            yield ("act", width)  # recomputed z, kept until consumed
        yield ("act", width)  # h_l
        if prev_h:
            yield ("act", -prev_h)
        prev_h = width
    if projected:
        yield ("act", n * dims[-1])  # g_h
    yield ("act", -prev_h)  # h_L
    own_g = projected
    # descending sweep
    for l in range(L, 0, -1):
        width = n * dims[l]
        d_in = n * dims[l - 1]
        if l > 1:
            yield ("act", d_in)  # h_in recompute
        yield ("grad", dims[l - 1] * dims[l])  # dW
        if norms[l - 1] != "none":
            yield ("grad", 2 * dims[l])  # dgamma, dbeta
        if l > 1:
            yield ("act", d_in)  # g_prev
        if own_g:
            yield ("act", -width)  # g_h consumed
        yield ("act", -width)  # z_l consumed
        if l > 1:
            yield ("act", -d_in)  # h_in
        own_g = l > 1


def grad_packet_elems(net: EncoderNet) -> int:
    """Elements in one full gradient packet for this net (= weight count)."""
    return net.n_params()


# === classification head (image-encoder pretraining) =================

class ClassHead:
    """Linear softmax classifier over embeddings; weight shape [C, D]."""

    def __init__(self, w: np.ndarray, name: str = "head"):
        if w.ndim != 2:
            raise ShapeError(f"class head weight must be 2-D, got {w.shape}")
        self.w = w
        self.name = name

    @classmethod
    def build(cls, rng: nm.Rng, n_classes: int, d_embed: int,
              name: str = "head") -> "ClassHead":
        bound = 1.0 / np.sqrt(d_embed)
        return cls(rng.split("head").uniform(-bound, bound, (n_classes, d_embed)),
                   name=name)

    @property
    def n_classes(self) -> int:
        return self.w.shape[0]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.name}/w": self.w}


def classify_loss_grad(head: ClassHead, embeddings: np.ndarray,
                       labels: np.ndarray):
    """Mean softmax cross-entropy over rows, with gradients.

    Returns (loss, grads) where grads maps the head weight name to dW and
    "embeddings" to d(loss)/d(embeddings), the hook for backprop into the
    image tower. Log-sum-exp is max-shifted per row.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    if n == 0:
        raise ShapeError("classify_loss_grad needs at least one row")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    c = head.n_classes
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    logits = nm.matmul(emb, head.w.T)
    m = logits.max(axis=1)
    ex = np.exp(logits - m[:, None])
    z = nm.row_sum(ex)
    rows = np.arange(n)
    loss = float(np.sum((np.log(z) + m) - logits[rows, labels]) / n)
    p = ex / z[:, None]
    p[rows, labels] -= 1.0
    dlogits = p / n
    dw = nm.matmul(dlogits.T, emb)
    demb = nm.matmul(dlogits, head.w)
    return loss, {f"{head.name}/w": dw, "embeddings": demb}

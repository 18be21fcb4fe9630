"""Encoder stacks: forward reference, FD gradients, remat, event mirrors.

The finite-difference fixtures are seeded and then margin-checked: every
relu gate must sit at least 1e-4 from its kink, otherwise central
differences straddle the nondifferentiability and the comparison is void.
"""

import numpy as np
import pytest

from twotower import numerics as nm
from twotower.encoders import (ActivationTape, ClassHead, EncoderNet,
                               LayerSpec, backward_events, classify_loss_grad,
                               forward_events, grad_packet_elems, layer_dense,
                               layer_norm_act, project_rows,
                               project_rows_backward, save_all, save_none)
from twotower.errors import ConfigError, ShapeError, TapeError

EPS = 1e-6  # NORM_EPS mirror for the reference forward


def reference_forward(net, x, project):
    """Plain-numpy replica of the stack, written against the documented math."""
    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        z = h @ layer.w
        if layer.norm == "layernorm":
            mu = z.mean(axis=1, keepdims=True)
            var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
            h = (z - mu) / np.sqrt(var + EPS) * layer.gamma + layer.beta
        elif layer.norm == "batchnorm":
            mu = z.mean(axis=0)
            var = ((z - mu) ** 2).mean(axis=0)
            h = (z - mu) / np.sqrt(var + EPS) * layer.gamma + layer.beta
        else:
            h = z
        if layer.act == "relu":
            h = np.maximum(h, 0.0)
    if project:
        h = h / np.sqrt((h * h).sum(axis=1, keepdims=True))
    return h


def relu_gate_margin(net, x):
    """Smallest |pre-activation| any relu gate sees on this input."""
    h = np.asarray(x, dtype=np.float64)
    margin = np.inf
    for layer in net.layers:
        z = layer_dense(h, layer.w)
        probe = LayerSpec(w=layer.w, act="identity", norm=layer.norm,
                          gamma=layer.gamma, beta=layer.beta)
        pre = layer_norm_act(z, probe)
        if layer.act == "relu":
            margin = min(margin, float(np.abs(pre).min()))
        h = layer_norm_act(z, layer)
    return margin


def phi_and_grads(net, x, r, project):
    out, tape = net.forward(x, policy=save_all(net), project=project)
    grads = net.backward(tape, r)
    return float(np.sum(out * r)), grads


def fd_weight_grad(net, x, r, project, name, arr):
    fd = np.empty_like(arr)
    eps = 1e-6
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + eps
        up = float(np.sum(net.forward(x, project=project)[0] * r))
        arr[idx] = orig - eps
        dn = float(np.sum(net.forward(x, project=project)[0] * r))
        arr[idx] = orig
        fd[idx] = (up - dn) / (2.0 * eps)
    return fd


def build_case(seed, dims, acts, norms):
    rng = nm.Rng(seed)
    net = EncoderNet.build(rng.split("net"), dims, acts=acts, norms=norms,
                           name=f"n{seed}")
    x = rng.split("x").normal((6, dims[0]))
    r = rng.split("r").normal((6, dims[-1]))
    return net, x, r


FD_CASES = [
    # (seed, dims, acts, norms, project)
    (11, [5, 7, 4], None, None, True),               # default layernorm stack
    (12, [4, 6, 3], ["relu", "identity"], ["batchnorm", "none"], False),
    (13, [6, 5], ["identity"], ["none"], True),      # single linear layer
    (14, [5, 8, 8, 3], ["relu", "relu", "identity"],
     ["layernorm", "batchnorm", "none"], False),
]


@pytest.mark.parametrize("seed,dims,acts,norms,project", FD_CASES)
def test_weight_gradients_match_finite_differences(seed, dims, acts, norms,
                                                   project):
    net, x, r = build_case(seed, dims, acts, norms)
    assert relu_gate_margin(net, x) > 1e-4, "fixture straddles a relu kink"
    _, grads = phi_and_grads(net, x, r, project)
    params = net.param_arrays()
    assert set(grads) == set(params)
    for name, arr in params.items():
        fd = fd_weight_grad(net, x, r, project, name, arr)
        scale = max(float(np.abs(fd).max()), 1e-3)
        assert np.abs(grads[name] - fd).max() <= 5e-6 * scale, name


def test_forward_matches_plain_numpy_reference():
    for seed, dims, acts, norms, project in FD_CASES:
        net, x, _ = build_case(seed, dims, acts, norms)
        got, _ = net.forward(x, project=project)
        want = reference_forward(net, x, project)
        assert np.abs(got - want).max() <= 1e-12


def test_projected_rows_are_unit_norm_and_raw_mode_skips():
    net, x, _ = build_case(21, [4, 5, 3], None, None)
    y, _ = net.forward(x, project=True)
    assert np.allclose((y * y).sum(axis=1), 1.0, atol=1e-12)
    h, _ = net.forward(x, project=False)
    assert np.abs(h / np.sqrt((h * h).sum(1))[:, None] - y).max() <= 1e-15


def test_project_rows_backward_matches_finite_differences():
    rng = nm.Rng(31)
    h = rng.split("h").normal((5, 4)) + 0.5
    r = rng.split("r").normal((5, 4))
    got = project_rows_backward(h, r)
    eps = 1e-6
    fd = np.empty_like(h)
    for idx in np.ndindex(*h.shape):
        hp = h.copy(); hp[idx] += eps
        hm = h.copy(); hm[idx] -= eps
        fd[idx] = (np.sum(project_rows(hp) * r)
                   - np.sum(project_rows(hm) * r)) / (2 * eps)
    assert np.abs(got - fd).max() <= 1e-7


# --- rematerialization --------------------------------------------------

def test_recompute_gradients_bitwise_equal_full_save():
    # Mixed policies included: any subset of saved layers must not change
    # a single bit of any gradient.
    for seed, dims, acts, norms, project in FD_CASES:
        net, x, r = build_case(seed, dims, acts, norms)
        out_a, tape_a = net.forward(x, policy=save_all(net), project=project)
        base = net.backward(tape_a, r)
        policies = [save_none(net)]
        if len(net.layers) > 1:
            mixed = ["save"] + ["recompute"] * (len(net.layers) - 1)
            policies.append(tuple(mixed))
            policies.append(tuple(reversed(mixed)))
        for pol in policies:
            out_b, tape_b = net.forward(x, policy=pol, project=project)
            assert out_a.tobytes() == out_b.tobytes()
            got = net.backward(tape_b, r)
            for name in base:
                assert base[name].tobytes() == got[name].tobytes(), (pol, name)


def test_forward_backward_reruns_are_bitwise_stable():
    net, x, r = build_case(41, [5, 7, 4], None, None)
    runs = []
    for _ in range(2):
        out, tape = net.forward(x, policy=save_none(net))
        grads = net.backward(tape, r)
        runs.append((out.tobytes(),
                     {k: v.tobytes() for k, v in grads.items()}))
    assert runs[0] == runs[1]


# --- tape and shape errors ----------------------------------------------

def test_tape_policy_validation():
    net, x, _ = build_case(51, [4, 4, 4], None, None)
    with pytest.raises(TapeError):
        ActivationTape(net, x, ("save",), projected=False)
    with pytest.raises(TapeError):
        ActivationTape(net, x, ("save", "keep"), projected=False)


def test_tape_bound_to_net_and_rows():
    net, x, r = build_case(52, [4, 5, 3], None, None)
    other, _, _ = build_case(53, [4, 5, 3], None, None)
    _, tape = net.forward(x)
    with pytest.raises(TapeError):
        other.backward(tape, r)
    _, tape = net.forward(x)
    with pytest.raises(TapeError):
        net.backward(tape, r[:3])


def test_forward_and_backward_shape_errors():
    net, x, r = build_case(54, [4, 5, 3], None, None)
    with pytest.raises(ShapeError):
        net.forward(x[:, :2])
    with pytest.raises(ShapeError):
        net.forward(x.ravel())
    _, tape = net.forward(x)
    with pytest.raises(ShapeError):
        net.backward(tape, np.ones((6, 5)))  # wrong d_out


def test_build_validation_errors():
    rng = nm.Rng(55)
    with pytest.raises(ConfigError):
        EncoderNet.build(rng, [4])
    with pytest.raises(ConfigError):
        EncoderNet.build(rng, [4, 3], acts=["relu", "relu"])
    with pytest.raises(ConfigError):
        EncoderNet.build(rng, [4, 3], acts=["gelu"])
    with pytest.raises(ConfigError):
        EncoderNet.build(rng, [4, 3], norms=["rmsnorm"])
    with pytest.raises(ConfigError):
        EncoderNet([])
    with pytest.raises(ShapeError):
        EncoderNet([LayerSpec(w=np.ones((4, 3))), LayerSpec(w=np.ones((2, 2)))])
    with pytest.raises(ShapeError):
        LayerSpec(w=np.ones((3, 2)), norm="layernorm", gamma=np.ones(5))
    with pytest.raises(ShapeError):
        LayerSpec(w=np.ones(3))


def test_param_arrays_names_and_counts():
    net, _, _ = build_case(56, [4, 6, 3], None, None)
    params = net.param_arrays()
    assert set(params) == {f"{net.name}/layer0/w", f"{net.name}/layer0/gamma",
                           f"{net.name}/layer0/beta", f"{net.name}/layer1/w"}
    assert net.dims() == [4, 6, 3]
    assert net.n_params() == sum(a.size for a in params.values())
    assert grad_packet_elems(net) == net.n_params()
    # returned dict aliases the real storage: in-place updates must stick
    params[f"{net.name}/layer1/w"][0, 0] = 123.0
    assert net.layers[1].w[0, 0] == 123.0


# --- ledger event mirrors ------------------------------------------------

class RecordingLedger:
    """Captures the (category, +/-elems) stream the real code announces."""

    def __init__(self):
        self.events = []

    def alloc(self, category, nelems):
        self.events.append((category, nelems))

    def free(self, category, nelems):
        self.events.append((category, -nelems))


EVENT_GRID = [
    ([5, 7, 4], ("save", "save"), True),
    ([5, 7, 4], ("recompute", "recompute"), False),
    ([5, 7, 4], ("save", "recompute"), True),
    ([6, 3], ("recompute",), True),
    ([4, 8, 8, 2], ("recompute", "save", "recompute"), False),
]


@pytest.mark.parametrize("dims,policy,project", EVENT_GRID)
def test_forward_event_model_mirrors_instrumented_run(dims, policy, project):
    rng = nm.Rng(61)
    net = EncoderNet.build(rng.split("net"), dims)
    x = rng.split("x").normal((7, dims[0]))
    led = RecordingLedger()
    net.forward(x, policy=policy, project=project, ledger=led)
    flags = [p == "save" for p in policy]
    want = list(forward_events(dims, 7, flags, project))
    assert led.events == want


@pytest.mark.parametrize("dims,policy,project", EVENT_GRID)
def test_backward_event_model_mirrors_instrumented_run(dims, policy, project):
    rng = nm.Rng(62)
    # exercise every norm branch in the grad events
    norms = ["layernorm", "batchnorm", "none"][:len(dims) - 1]
    while len(norms) < len(dims) - 1:
        norms.append("none")
    net = EncoderNet.build(rng.split("net"), dims, norms=norms)
    x = rng.split("x").normal((7, dims[0]))
    r = rng.split("r").normal((7, dims[-1]))
    _, tape = net.forward(x, policy=policy, project=project)
    led = RecordingLedger()
    net.backward(tape, r, ledger=led)
    flags = [p == "save" for p in policy]
    want = list(backward_events(dims, 7, flags, project, norms))
    assert led.events == want


# --- classification head -------------------------------------------------

def reference_class_loss(w, emb, labels):
    logits = emb @ w.T
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def test_classify_loss_matches_reference_and_fd():
    rng = nm.Rng(71)
    head = ClassHead.build(rng.split("head"), 5, 6)
    emb = rng.split("emb").normal((8, 6))
    labels = rng.split("lab").integers(0, 5, 8)
    loss, grads = classify_loss_grad(head, emb, labels)
    assert abs(loss - reference_class_loss(head.w, emb, labels)) <= 1e-12
    eps = 1e-6
    for arr, key in ((head.w, "head/w"), (emb, "embeddings")):
        fd = np.empty_like(arr)
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = classify_loss_grad(head, emb, labels)[0]
            arr[idx] = orig - eps
            dn = classify_loss_grad(head, emb, labels)[0]
            arr[idx] = orig
            fd[idx] = (up - dn) / (2 * eps)
        assert np.abs(grads[key] - fd).max() <= 1e-7, key


def test_classify_loss_error_paths():
    head = ClassHead(np.ones((3, 4)))
    with pytest.raises(ShapeError):
        classify_loss_grad(head, np.empty((0, 4)), np.empty(0, dtype=int))
    with pytest.raises(ShapeError):
        classify_loss_grad(head, np.ones((2, 4)), np.array([[0], [1]]))
    with pytest.raises(ValueError):
        classify_loss_grad(head, np.ones((2, 4)), np.array([0, 3]))
    with pytest.raises(ValueError):
        classify_loss_grad(head, np.ones((2, 4)), np.array([-1, 0]))
    with pytest.raises(ShapeError):
        ClassHead(np.ones(3))


def test_class_head_build_shape_and_name():
    head = ClassHead.build(nm.Rng(72), 7, 3, name="h")
    assert head.w.shape == (7, 3)
    assert head.n_classes == 7
    assert list(head.param_arrays()) == ["h/w"]
    assert np.abs(head.w).max() <= 1.0 / np.sqrt(3)

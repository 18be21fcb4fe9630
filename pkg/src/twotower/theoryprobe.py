"""Normalized train/test losses, the generalization gap, and its bound.

The analysis losses here are scaled so their magnitude survives B -> infinity:

    l_hat_B(x, y)  = -exp(F(x)'G(y)) / ((1/B) sum_k exp(F(x)'G(yhat_k)))
    l_bar_M(x, y)  = -exp(F(x)'G(y)) / E_ybar[exp(F(x)'G(ybar))]

with the test-side expectation replaced by a Monte Carlo mean over M_test
held-out texts. Their population/empirical difference is the generalization
gap; the bound evaluator assembles the closed-form rate

    gap <= Q1/sqrt(m) + Q2/sqrt(2B) + c2 sqrt(ln(2/delta)/(2m))

from constants c1..c9 measured as maxima over the sampled data, plus
Frobenius/row-norm products of the encoder weights. The bound applies to
plain feed-forward towers whose activations are 1-Lipschitz and positive
homogeneous and whose outputs are raw (no normalization layers, no sphere
projection); require_homogeneous() enforces that class.

c9 (the Lipschitz constant of gamma(x), the difference between the test-side
and batch-side mean exponentials) has no closed form; it is estimated as the
maximum finite-difference slope over sampled input pairs and is therefore a
lower estimate. Bound violations that disappear when c9 is inflated are
reported separately by bound_check_trials.

Data sources are duck-typed: anything with sample_pairs(rng, n) -> (X, Y)
and sample_texts(rng, n) -> Y works, where X is [n, kappa] and Y is
[n, d_text] (token sequences must be pooled before they get here). Separate
rng streams make the held-out draws disjoint from the training sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .encoders import EncoderNet, save_none
from .errors import ConfigError, ShapeError

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class GapProbeConfig:
    """Sizes and confidence level for one gap/bound measurement.

    m: training-sample size; batch: reference-batch size B; m_test: texts in
    the Monte Carlo test expectation; kappa: input dimension of x. n_eval
    controls the held-out pairs behind the outer expectation, c9_pairs the
    finite-difference sampling effort.
    """

    m: int
    batch: int
    m_test: int = 4096
    trials: int = 1
    delta: float = 0.05
    kappa: int = 16
    n_eval: int = 512
    c9_pairs: int = 100_000

    def __post_init__(self):
        if min(self.m, self.batch, self.m_test, self.trials, self.kappa) < 1:
            raise ConfigError("m, batch, m_test, trials, kappa must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.n_eval < 2:
            raise ConfigError("n_eval must be >= 2 to report a standard error")
        if self.c9_pairs < 1:
            raise ConfigError("c9_pairs must be >= 1")


def require_homogeneous(net: EncoderNet):
    """Reject encoders outside the bound's class.

    Needed: elementwise 1-Lipschitz positive-homogeneous activations and no
    normalization layers (layernorm/batchnorm are neither elementwise nor
    homogeneous in the required sense). Evaluation must use raw outputs;
    callers of the loss functions get that automatically.
    """
    for l, layer in enumerate(net.layers):
        if layer.norm != "none":
            raise ConfigError(
                f"{net.name}/layer{l}: {layer.norm} is outside the bound's "
                "encoder class (no normalization layers)"
            )
        if layer.act not in ("relu", "identity"):
            raise ConfigError(
                f"{net.name}/layer{l}: activation {layer.act!r} is not "
                "positive homogeneous"
            )


def _raw_embed(net: EncoderNet, arr: np.ndarray) -> np.ndarray:
    out, _ = net.forward(arr, policy=save_none(net), project=False)
    return out


def _shifted_losses(s_pair: np.ndarray, s_refs: np.ndarray) -> np.ndarray:
    """-exp(s_pair)/mean(exp(s_refs)) per row, via a per-row max shift."""
    m = np.maximum(s_pair, s_refs.max(axis=1))
    num = np.exp(s_pair - m)
    den = nm.row_sum(np.exp(s_refs - m[:, None])) / s_refs.shape[1]
    return -num / den


def normalized_train_losses(f: EncoderNet, g: EncoderNet, xs: np.ndarray,
                            ys: np.ndarray, ref_texts: np.ndarray) -> np.ndarray:
    """Vectorized l_hat_B over rows of (xs, ys) against one reference batch."""
    xs, ys, ref_texts = (np.atleast_2d(np.asarray(a, dtype=np.float64))
                         for a in (xs, ys, ref_texts))
    if xs.shape[0] != ys.shape[0]:
        raise ShapeError("xs and ys must pair up row for row")
    fx = _raw_embed(f, xs)
    gy = _raw_embed(g, ys)
    gref = _raw_embed(g, ref_texts)
    s_pair = nm.row_sum(fx * gy)
    s_ref = nm.matmul(fx, gref.T)
    return _shifted_losses(s_pair, s_ref)


def normalized_test_losses(f: EncoderNet, g: EncoderNet, xs: np.ndarray,
                           ys: np.ndarray, test_texts: np.ndarray) -> np.ndarray:
    """Vectorized l_bar_M; identical algebra with held-out reference texts."""
    return normalized_train_losses(f, g, xs, ys, test_texts)


def normalized_train_loss(f: EncoderNet, g: EncoderNet, x: np.ndarray,
                          y: np.ndarray, ref_texts: np.ndarray) -> float:
    return float(normalized_train_losses(f, g, x, y, ref_texts)[0])


def normalized_test_loss(f: EncoderNet, g: EncoderNet, x: np.ndarray,
                         y: np.ndarray, test_texts: np.ndarray) -> float:
    return float(normalized_test_losses(f, g, x, y, test_texts)[0])


def predict_by_similarity(f: EncoderNet, g: EncoderNet, xs: np.ndarray,
                          candidate_texts: np.ndarray) -> np.ndarray:
    """argmax_j F(x)'G(y_j) per row; ties go to the lowest index."""
    s = nm.matmul(_raw_embed(f, np.atleast_2d(xs)),
                  _raw_embed(g, np.atleast_2d(candidate_texts)).T)
    return np.argmax(s, axis=1)


def predict_by_loss(f: EncoderNet, g: EncoderNet, xs: np.ndarray,
                    candidate_texts: np.ndarray) -> np.ndarray:
    """argmin_j l_bar_M(x, y_j), the same candidates forming the mean."""
    xs = np.atleast_2d(xs)
    candidate_texts = np.atleast_2d(candidate_texts)
    fx = _raw_embed(f, xs)
    gt = _raw_embed(g, candidate_texts)
    s = nm.matmul(fx, gt.T)
    m = s.max(axis=1)
    ex = np.exp(s - m[:, None])
    den = nm.row_sum(ex) / candidate_texts.shape[0]
    losses = -ex / den[:, None]
    return np.argmin(losses, axis=1)


# === gap measurement ==================================================

def _samples(cfg: GapProbeConfig, source, rng: nm.Rng) -> dict:
    xs, ys = source.sample_pairs(rng.split("train"), cfg.m)
    ref = source.sample_texts(rng.split("refs"), cfg.batch)
    ex, ey = source.sample_pairs(rng.split("eval"), cfg.n_eval)
    test = source.sample_texts(rng.split("test"), cfg.m_test)
    if xs.shape[1] != cfg.kappa:
        raise ShapeError(
            f"source produced x of width {xs.shape[1]}, cfg.kappa={cfg.kappa}"
        )
    return {"xs": xs, "ys": ys, "ref": ref, "ex": ex, "ey": ey, "test": test}


def _gap_from(f, g, s) -> tuple[float, float, np.ndarray, np.ndarray]:
    l_train = normalized_train_losses(f, g, s["xs"], s["ys"], s["ref"])
    l_test = normalized_test_losses(f, g, s["ex"], s["ey"], s["test"])
    gap = float(l_test.mean() - l_train.mean())
    stderr = float(np.sqrt(l_test.var(ddof=1) / l_test.size
                           + l_train.var(ddof=1) / l_train.size))
    return gap, stderr, l_train, l_test


def empirical_gap(f: EncoderNet, g: EncoderNet, cfg: GapProbeConfig,
                  source, rng: nm.Rng) -> tuple[float, float]:
    """Monte Carlo gap estimate and its standard error.

    Train side: mean l_hat_B over an m-sample against one fresh reference
    batch of B texts. Test side: mean l_bar_M over held-out pairs against
    M_test fresh texts. All four draws use disjoint rng streams.
    """
    gap, stderr, _, _ = _gap_from(f, g, _samples(cfg, source, rng))
    return gap, stderr


# === bound evaluation =================================================

@dataclass
class BoundReport:
    """Everything the closed-form rate is assembled from, plus the value.

    Constants are maxima over the sampled data (c9 a finite-difference
    lower estimate); norm terms come from the weights; q* are the displayed
    intermediate products. recompute_rhs() re-evaluates the rate with a
    substituted c9, which is how c9-attributable violations get classified.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    c6: float
    c7: float
    c8: float
    c9: float
    prod_norms_txt: float
    prod_norms_img: float
    row_sum_txt: float
    row_sum_img: float
    row_rss_txt: float
    q11: float
    q12: float
    q21: float
    q22: float
    q1: float
    q2: float
    e_a: float
    rhs: float
    m: int
    batch: int
    m_test: int
    kappa: int
    delta: float
    c9_pairs: int

    def __post_init__(self):
        bad = [k for k, v in self.to_dict().items()
               if isinstance(v, float) and (v < 0.0 or not np.isfinite(v))]
        if bad:
            raise ValueError(f"bound constants must be finite and >= 0: {bad}")

    def to_dict(self) -> dict:
        return asdict(self)

    def recompute_rhs(self, c9: float) -> float:
        q21 = 2.0 * math.sqrt(2.0) * self.c8 * c9 + self.c1 * math.sqrt(
            self.kappa * math.log(math.sqrt(self.kappa * self.batch) / self.delta)
        )
        q2 = self.c1 * self.e_a * (q21 + self.q22)
        return (self.q1 / math.sqrt(self.m)
                + q2 / math.sqrt(2.0 * self.batch)
                + self.c2 * math.sqrt(math.log(2.0 / self.delta) / (2.0 * self.m)))


def _norm_terms(net: EncoderNet) -> tuple[float, float, float, int]:
    """(prod of non-final Frobenius norms, col-norm sum, col-norm rss, L).

    Weights here are [d_in, d_out] with z = h @ W, so the per-output-unit
    norm vector is over columns.
    """
    ws = [layer.w for layer in net.layers]
    prod = 1.0
    for w in ws[:-1]:
        prod *= float(np.sqrt(np.sum(w * w)))
    cols = np.sqrt(np.sum(ws[-1] * ws[-1], axis=0))
    return prod, float(np.sum(cols)), float(np.sqrt(np.sum(cols * cols))), len(ws)


def _gamma(fx: np.ndarray, gref: np.ndarray, gtest: np.ndarray) -> np.ndarray:
    """gamma per row of fx: mean test exp minus mean reference-batch exp."""
    e_test = np.exp(nm.matmul(fx, gtest.T))
    e_ref = np.exp(nm.matmul(fx, gref.T))
    nm.ensure_finite(e_test, "gamma test exponentials")
    nm.ensure_finite(e_ref, "gamma reference exponentials")
    return (nm.row_sum(e_test) / gtest.shape[0]
            - nm.row_sum(e_ref) / gref.shape[0])


def _estimate_c9(f: EncoderNet, x_pool: np.ndarray, gref: np.ndarray,
                 gtest: np.ndarray, n_pairs: int, rng: nm.Rng) -> float:
    """Max finite-difference slope of gamma over sampled input pairs.

    Two families per chunk: pairs drawn from the pool (global slopes) and
    small perturbations of pool points (local slopes). A sampled maximum can
    only undershoot the true Lipschitz constant; callers treat it as a lower
    estimate.
    """
    n = x_pool.shape[0]
    best = 0.0
    chunk = 2048
    done = 0
    step = 0
    while done < n_pairs:
        take = min(chunk, n_pairs - done)
        r = rng.split("c9", step)
        ia = r.split("a").integers(0, n, take)
        ib = r.split("b").integers(0, n, take)
        xa = x_pool[ia]
        xb = x_pool[ib]
        eps = 1e-3 * (1.0 + np.abs(xa))
        xc = xa + eps * r.split("dir").normal(xa.shape)
        ga = _gamma(_raw_embed(f, xa), gref, gtest)
        gb = _gamma(_raw_embed(f, xb), gref, gtest)
        gc = _gamma(_raw_embed(f, xc), gref, gtest)
        for other_x, other_g in ((xb, gb), (xc, gc)):
            dist = np.sqrt(np.sum((xa - other_x) ** 2, axis=1))
            ok = dist > 1e-12
            if np.any(ok):
                slopes = np.abs(ga[ok] - other_g[ok]) / dist[ok]
                best = max(best, float(slopes.max()))
        done += take
        step += 1
    return best


def theorem1_bound(f: EncoderNet, g: EncoderNet, source, cfg: GapProbeConfig,
                   rng: nm.Rng) -> BoundReport:
    """Measure the constants on fresh draws and assemble the closed rate."""
    _, _, report = gap_and_bound(f, g, cfg, source, rng)
    return report


def gap_and_bound(f: EncoderNet, g: EncoderNet, cfg: GapProbeConfig,
                  source, rng: nm.Rng) -> tuple[float, float, BoundReport]:
    """One trial: the empirical gap and the bound, on shared samples.

    Sharing the draws keeps the comparison honest: c2 is the maximum of the
    very loss values whose means form the gap.
    """
    require_homogeneous(f)
    require_homogeneous(g)
    s = _samples(cfg, source, rng)
    gap, stderr, l_train, _ = _gap_from(f, g, s)

    fx_tr = _raw_embed(f, s["xs"])
    fx_ev = _raw_embed(f, s["ex"])
    gy_tr = _raw_embed(g, s["ys"])
    gy_ev = _raw_embed(g, s["ey"])
    gref = _raw_embed(g, s["ref"])
    gtest = _raw_embed(g, s["test"])

    e_pair_tr = np.exp(nm.row_sum(fx_tr * gy_tr))
    e_pair_ev = np.exp(nm.row_sum(fx_ev * gy_ev))
    s_tr_ref = nm.matmul(fx_tr, gref.T)
    s_ev_ref = nm.matmul(fx_ev, gref.T)
    s_tr_test = nm.matmul(fx_tr, gtest.T)
    s_ev_test = nm.matmul(fx_ev, gtest.T)
    exp_grids = [np.exp(a) for a in (s_tr_ref, s_ev_ref, s_tr_test, s_ev_test)]
    for grid in exp_grids:
        nm.ensure_finite(grid, "bound exponentials")
    nm.ensure_finite(e_pair_tr, "bound exponentials")
    nm.ensure_finite(e_pair_ev, "bound exponentials")

    c1 = max(float(e_pair_tr.max()), float(e_pair_ev.max()),
             *(float(grid.max()) for grid in exp_grids))
    l_eval_vs_ref = _shifted_losses(nm.row_sum(fx_ev * gy_ev), s_ev_ref)
    c2 = max(float(np.abs(l_train).max()), float(np.abs(l_eval_vs_ref).max()))
    c4 = c2  # the ratio c4 caps is exactly |l_hat|, already measured as c2
    norms_tr = nm.row_norms(fx_tr)
    norms_ev = nm.row_norms(fx_ev)
    c3 = max(float(norms_tr.max()), float(norms_ev.max()))
    c5 = float(norms_tr.max())

    c6 = 0.0
    for fx, s_ref in ((fx_tr, s_tr_ref), (fx_ev, s_ev_ref)):
        shift = s_ref.max(axis=1)
        p = np.exp(s_ref - shift[:, None])
        p /= nm.row_sum(p)[:, None]
        v = fx - nm.matmul(p, gref)
        c6 = max(c6, float(nm.row_norms(v).max()))

    text_pool = np.concatenate([s["ys"], s["ey"], s["ref"], s["test"]], axis=0)
    c7 = float(nm.row_norms(text_pool).max())
    x_pool = np.concatenate([s["xs"], s["ex"]], axis=0)
    c8 = float(nm.row_norms(x_pool).max())
    c9 = _estimate_c9(f, x_pool, gref, gtest, cfg.c9_pairs, rng.split("c9"))

    ref_mean = nm.row_sum(exp_grids[1]) / s["ref"].shape[0]
    test_mean = nm.row_sum(exp_grids[3]) / s["test"].shape[0]
    e_a = float(np.mean(e_pair_ev / (ref_mean * test_mean)))

    prod_txt, row_sum_txt, row_rss_txt, l_txt = _norm_terms(g)
    prod_img, row_sum_img, _, l_img = _norm_terms(f)

    depth_txt = math.sqrt(2.0 * _LN2 * l_txt) + 1.0
    depth_img = math.sqrt(2.0 * _LN2 * l_img) + 1.0
    q11 = c7 * depth_txt * prod_txt * row_sum_txt
    q12 = c8 * depth_img * prod_img * row_sum_img
    q21 = (2.0 * math.sqrt(2.0) * c8 * c9
           + c1 * math.sqrt(cfg.kappa * math.log(
               math.sqrt(cfg.kappa * cfg.batch) / cfg.delta)))
    q22 = 2.0 * math.sqrt(2.0) * c3 * c7 * depth_txt * prod_txt * row_rss_txt
    q1 = 2.0 * math.sqrt(2.0) * c4 * math.sqrt(c5 ** 2 + c6 ** 2) * (q11 + q12)
    q2 = c1 * e_a * (q21 + q22)
    rhs = (q1 / math.sqrt(cfg.m)
           + q2 / math.sqrt(2.0 * cfg.batch)
           + c2 * math.sqrt(math.log(2.0 / cfg.delta) / (2.0 * cfg.m)))

    report = BoundReport(
        c1=c1, c2=c2, c3=c3, c4=c4, c5=c5, c6=c6, c7=c7, c8=c8, c9=c9,
        prod_norms_txt=prod_txt, prod_norms_img=prod_img,
        row_sum_txt=row_sum_txt, row_sum_img=row_sum_img,
        row_rss_txt=row_rss_txt,
        q11=q11, q12=q12, q21=q21, q22=q22, q1=q1, q2=q2,
        e_a=e_a, rhs=rhs,
        m=cfg.m, batch=cfg.batch, m_test=cfg.m_test, kappa=cfg.kappa,
        delta=cfg.delta, c9_pairs=cfg.c9_pairs,
    )
    return gap, stderr, report


def bound_check_trials(build, cfg: GapProbeConfig, source, rng: nm.Rng,
                       trials: int | None = None,
                       c9_inflation: float = 4.0) -> dict:
    """Run independent (encoders, data) trials; count how often the bound holds.

    build(rng) -> (f, g) supplies fresh encoders per trial. A violated trial
    that passes once c9 is inflated is listed under "c9_flagged" (the
    estimate, not the inequality, is the suspect there).
    """
    n = trials if trials is not None else cfg.trials
    held = 0
    violations: list[int] = []
    flagged: list[int] = []
    gaps: list[float] = []
    rhss: list[float] = []
    for t in range(n):
        r = rng.split("trial", t)
        f, g = build(r.split("nets"))
        gap, _, report = gap_and_bound(f, g, cfg, source, r.split("data"))
        gaps.append(gap)
        rhss.append(report.rhs)
        if gap <= report.rhs:
            held += 1
        else:
            violations.append(t)
            if gap <= report.recompute_rhs(c9_inflation * report.c9):
                flagged.append(t)
    return {
        "trials": n,
        "held": held,
        "violations": violations,
        "c9_flagged": flagged,
        "gaps": gaps,
        "rhs": rhss,
    }


def fit_loglog_slope(batches, values) -> float:
    """Least-squares slope of ln(value) against ln(batch)."""
    bs = np.asarray(batches, dtype=np.float64)
    vs = np.asarray(values, dtype=np.float64)
    if bs.shape != vs.shape or bs.size < 2:
        raise ShapeError("need matching batch/value arrays with >= 2 points")
    if np.any(vs <= 0.0) or np.any(bs <= 0.0):
        raise ValueError("log-log fit needs strictly positive values")
    return float(np.polyfit(np.log(bs), np.log(vs), 1)[0])

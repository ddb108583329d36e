"""Finite-difference checks of the loss gradients.

Each check draws a small random problem, computes analytic gradients with
respect to every embedding tensor and tau, and compares them against
central differences.  The error reported per input is the max-norm relative
error ``max|a - n| / max(max|n|, max|a|, floor)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .losses import BatchEmbeddings, LossWeights, hna_loss, htc_loss, info_nce_symmetric, rpa_loss, total_loss, vic_loss

LOSS_NAMES = ("global", "rpa", "hna", "vic", "htc", "total")
DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-5
_FLOOR = 1e-8


def relative_error(analytic, numeric) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)), _FLOOR)
    return float(np.abs(a - n).max(initial=0.0)) / scale


def numeric_grad(fn, arrays: list, index: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = np.array(arrays[index], dtype=np.float64)
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        args = list(arrays)
        plus, minus = base.copy(), base.copy()
        plus.reshape(-1)[i] += eps
        minus.reshape(-1)[i] -= eps
        args[index] = plus
        f_plus = float(fn(*args))
        args[index] = minus
        f_minus = float(fn(*args))
        flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return out


def analytic_grads(fn, arrays: list) -> tuple[float, list]:
    """Value and gradients of ``fn`` evaluated on tape with every array a leaf."""
    with ag.Tape() as tape:
        leaves = [ag.Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
    grads = tape.backward(out)
    return float(out.data), [grads[t] for t in leaves]


def check(fn, arrays: list, eps: float = DEFAULT_EPS) -> list[float]:
    """Relative error per input for a function of Tensors returning a scalar Tensor."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    _, grads = analytic_grads(fn, arrays)

    def value(*xs):
        return fn(*[ag.Tensor(x) for x in xs]).data

    return [relative_error(g, numeric_grad(value, arrays, i, eps)) for i, g in enumerate(grads)]


def random_problem(rng: np.random.Generator, name: str, max_n: int = 4, max_k: int = 3,
                   max_q: int = 4, max_d: int = 8):
    """``(fn, arrays, labels)`` for one random instance of loss ``name``."""
    N = int(rng.integers(1, max_n + 1))
    K = int(rng.integers(1, max_k + 1))
    Q = int(rng.integers(2, max_q + 1))
    d = int(rng.integers(2, max_d + 1))
    tau = np.array(rng.uniform(0.05, 1.0))

    def emb(*shape):
        return rng.standard_normal(shape)

    if name == "global":
        return (lambda a, b, t: info_nce_symmetric(a, b, t)), [emb(N, d), emb(N, d), tau], ["V_g", "T_b", "tau"]
    if name == "rpa":
        # repeat a phrase now and then so the duplicate mask is exercised
        keys = [f"p{int(rng.integers(0, max(1, K - 1)))}" for _ in range(K)]
        return (lambda v, t, s: rpa_loss(v, t, s, keys)), [emb(K, d), emb(K, d), tau], ["V_r", "T_r", "tau"]
    if name == "hna":
        return hna_loss, [emb(K, d), emb(K, Q, d), tau], ["V_r", "T_neg", "tau"]
    if name == "vic":
        return vic_loss, [emb(K, d), emb(K, d)], ["V_r", "V_crop"]
    if name == "htc":
        return htc_loss, [emb(N, d), emb(N, d), emb(N, d), tau], ["V_g", "T_b", "T_d", "tau"]
    if name == "total":
        lambdas = tuple(rng.uniform(0.1, 2.0, size=5))
        weights = LossWeights(lambdas=lambdas, stage="StageII", keep_global=True)
        keys = [f"p{int(rng.integers(0, K))}" for _ in range(K)]

        def fn(vg, tb, td, vr, tneg, vc, t):
            batch = BatchEmbeddings(V_g=vg, T_b=tb, T_d=td, tau=t, V_r=vr, T_r=tneg[:, 0, :],
                                    T_neg=tneg, V_crop=vc, phrase_keys=keys)
            return total_loss(batch, weights)[0]

        arrays = [emb(N, d), emb(N, d), emb(N, d), emb(K, d), emb(K, Q, d), emb(K, d), tau]
        return fn, arrays, ["V_g", "T_b", "T_d", "V_r", "T_neg", "V_crop", "tau"]
    raise ValueError(f"unknown loss {name!r}; expected one of {', '.join(LOSS_NAMES)}")


@dataclass
class GradcheckRow:
    loss: str
    trials: int
    max_rel_error: float
    worst_input: str
    passed: bool
    seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def loss_gradcheck(names=LOSS_NAMES, trials: int = 20, seed: int = 0, eps: float = DEFAULT_EPS,
                   tol: float = DEFAULT_TOL) -> list[GradcheckRow]:
    """Run ``trials`` random instances per loss; one summary row each."""
    rows = []
    for name in names:
        rng = np.random.default_rng([seed, LOSS_NAMES.index(name) if name in LOSS_NAMES else 99])
        t0 = time.perf_counter()
        worst, worst_label = 0.0, ""
        for _ in range(trials):
            fn, arrays, labels = random_problem(rng, name)
            for label, err in zip(labels, check(fn, arrays, eps)):
                if err > worst or not np.isfinite(err):
                    worst, worst_label = err, label
        rows.append(GradcheckRow(name, trials, worst, worst_label, bool(worst <= tol), time.perf_counter() - t0))
    return rows


def format_table(rows) -> str:
    lines = [f"{'loss':<8} {'trials':>6} {'max_rel_err':>12} {'worst':>7}  result"]
    for r in rows:
        lines.append(f"{r.loss:<8} {r.trials:>6} {r.max_rel_error:>12.3e} {r.worst_input:>7}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

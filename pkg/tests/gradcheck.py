"""Central finite-difference gradient oracle (float64, h = 1e-4).

``check(fn, arrays)`` builds float64 leaves, reduces ``fn``'s output with a
fixed random projection to a scalar, back-propagates, and compares every
leaf gradient with central differences. Large leaves can be sampled.
"""

from __future__ import annotations

import numpy as np

from fplive import tensor as T
from fplive.tensor import Tensor

H = 1e-4
REL_TOL = 1e-4


class Kink(Exception):
    """The finite-difference stencil straddles a non-differentiable point."""


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(weights)))


def check(fn, arrays, rng: np.random.Generator, leaves: list[Tensor] | None = None, max_entries: int | None = None):
    """Return the worst relative error over all inputs (and extra ``leaves``).

    ``fn`` maps float64 Tensors built from ``arrays`` to a Tensor. ``leaves``
    are pre-built float64 parameters that ``fn`` closes over.
    """
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    leaves = list(leaves or [])
    out = fn(*inputs)
    weights = rng.normal(size=out.shape)
    for t in inputs + leaves:
        t.grad = None
    _project(out, weights).backward()
    worst = 0.0
    for t in inputs + leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(len(idx))
        centre = float(_project(fn(*inputs), weights).data)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + H
            up = float(_project(fn(*inputs), weights).data)
            flat[i] = orig - H
            down = float(_project(fn(*inputs), weights).data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * H)
            # one-sided slopes of a smooth function agree to O(h)
            if abs((up - centre) - (centre - down)) / H > 1e-2 * max(1.0, abs(numeric[j])):
                raise Kink(f"entry {i} sits on a kink")
        worst = max(worst, rel_error(analytic.reshape(-1)[idx], numeric))
    return worst


def run_case(name: str, instances: int = 20, seed: int = 0) -> tuple[float, int]:
    """Worst relative error over ``instances`` smooth random instances of a
    registered case, and the number of kink draws that were replaced."""
    build = CASES[name]
    worst, done, skipped, k = 0.0, 0, 0, 0
    while done < instances:
        rng = np.random.default_rng([seed, k])
        k += 1
        fn, arrays, leaves, max_entries = build(rng)
        try:
            worst = max(worst, check(fn, arrays, rng, leaves, max_entries))
        except Kink:
            skipped += 1
            if skipped > instances:
                raise
            continue
        done += 1
    return worst, skipped


def to64(module) -> list[Tensor]:
    """Cast every tensor of a module to float64 in place; return the trainable ones."""
    for _, t in module.named_tensors():
        t.data = t.data.astype(np.float64)
    return module.parameters()


def away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Normal samples pushed away from relu's kink."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def distinct(rng: np.random.Generator, shape, gap: float = 1e-2) -> np.ndarray:
    """Values with pairwise gaps >= ``gap`` (no ties for max-pool)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 4, n)).reshape(shape) - n * gap / 2


# --------------------------------------------------------------- registry
# Each builder takes a numpy Generator and returns (fn, arrays, leaves, max_entries).


def _ops():
    from fplive import nn
    from fplive.tensor import RngStream
    from fplive.train import cross_entropy, distill_loss, mutual_losses

    def seed(rng):
        return int(rng.integers(2**31))

    def hard(rng, n):
        y = rng.integers(0, 2, n)
        y[0], y[-1] = 0, 1
        return y

    cases = {
        "add": lambda r: (T.add, [r.normal(size=(3, 4)), r.normal(size=(3, 4))], [], None),
        "add-scalar": lambda r: (lambda a: T.add(a, 1.5), [r.normal(size=(2, 3))], [], None),
        "sub": lambda r: (T.sub, [r.normal(size=(3, 4)), r.normal(size=(3, 4))], [], None),
        "mul": lambda r: (T.mul, [r.normal(size=(3, 4)), r.normal(size=(3, 4))], [], None),
        "div": lambda r: (T.div, [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, (3, 4))], [], None),
        "scale": lambda r: (lambda a: T.scale(a, -2.5), [r.normal(size=(5,))], [], None),
        "relu": lambda r: (T.relu, [away_from_zero(r, (4, 5))], [], None),
        "sigmoid": lambda r: (T.sigmoid, [r.normal(size=(4, 5))], [], None),
        "exp": lambda r: (T.exp, [r.normal(size=(4, 5))], [], None),
        "log": lambda r: (T.log, [r.uniform(0.2, 3.0, (4, 5))], [], None),
        "square": lambda r: (T.square, [r.normal(size=(4, 5))], [], None),
        "reshape": lambda r: (lambda a: T.reshape(a, (6, 2)), [r.normal(size=(3, 4))], [], None),
        "flatten": lambda r: (T.flatten, [r.normal(size=(2, 3, 2, 2))], [], None),
        "transpose": lambda r: (T.transpose, [r.normal(size=(3, 5))], [], None),
        "expand": lambda r: (lambda a: T.expand(a, (4, 3)), [r.normal(size=(1, 3))], [], None),
        "sum-all": lambda r: (lambda a: T.sum(a), [r.normal(size=(3, 4))], [], None),
        "sum-axis": lambda r: (lambda a: T.sum(a, axis=1), [r.normal(size=(3, 4))], [], None),
        "mean-axis": lambda r: (lambda a: T.mean(a, axis=0, keepdims=True), [r.normal(size=(3, 4))], [], None),
        "concat": lambda r: (lambda a, b: T.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))], [], None),
        "log_softmax": lambda r: (T.log_softmax, [3 * r.normal(size=(4, 3))], [], None),
        "softmax": lambda r: (T.softmax, [2 * r.normal(size=(4, 2))], [], None),
        "matmul": lambda r: (T.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))], [], None),
        "conv2d": lambda r: (
            lambda x, w: T.conv2d(x, w, stride=1, padding=1),
            [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3))], [], None),
        "conv2d-stride2": lambda r: (
            lambda x, w: T.conv2d(x, w, stride=2, padding=0),
            [r.normal(size=(1, 1, 6, 6)), r.normal(size=(2, 1, 2, 2))], [], None),
        "maxpool": lambda r: (lambda x: T.pool2d(x, "max", 2), [distinct(r, (2, 2, 4, 4))], [], None),
        "avgpool": lambda r: (lambda x: T.pool2d(x, "avg", 2), [r.normal(size=(2, 2, 4, 4))], [], None),
        "global-avg": lambda r: (T.global_avg_pool, [r.normal(size=(2, 3, 3, 3))], [], None),
        "channel_scale": lambda r: (T.channel_scale, [r.normal(size=(2, 3, 2, 2)), r.uniform(0.1, 1, (2, 3))], [], None),
        "batch_norm-train": lambda r: _bn(r, True),
        "batch_norm-eval": lambda r: _bn(r, False),
        "se_block": lambda r: (nn.se_block, [r.normal(size=(2, 4, 3, 3)), r.normal(size=(4, 2)), r.normal(size=(2, 4))], [], None),
    }

    def _bn(r, training):
        g, b = r.uniform(0.5, 1.5, 3), r.normal(size=3)
        rm, rv = r.normal(size=3), r.uniform(0.5, 2.0, 3)

        def fn(x, gamma, beta):
            return T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)

        return fn, [r.normal(size=(4, 3, 2, 2)), g, b], [], None

    def layer(make, shape, max_entries=None):
        def build(r):
            mod = make(RngStream(seed(r)))
            params = to64(mod)
            return mod, [r.normal(size=shape)], params, max_entries
        return build

    def run(build):
        def b(r):
            mod, arrays, params, me = build(r)
            return (lambda x: mod(x)), arrays, params, me
        return b

    cases["Conv2d"] = run(layer(lambda g: nn.Conv2d(2, 3, 3, g, padding=1), (2, 2, 4, 4)))
    cases["Linear"] = run(layer(lambda g: nn.Linear(5, 3, g), (4, 5)))
    cases["BatchNorm"] = run(layer(lambda g: nn.BatchNorm(3), (4, 3, 2, 2)))
    cases["SEBlock"] = run(layer(lambda g: nn.SEBlock(8, 4, g), (2, 8, 3, 3)))

    def dropout(r):
        s = seed(r)

        def fn(x):
            return nn.Dropout(0.3, RngStream(s))(x)

        return fn, [r.normal(size=(4, 6))], [], None

    cases["Dropout"] = dropout

    def stage(r):
        st = nn.Stage(2, 4, RngStream(seed(r)), se=True, pool=True)
        params = to64(st)
        return (lambda x: st(x)), [distinct(r, (2, 2, 4, 4), 0.05)], params, 8

    cases["Stage"] = stage

    def model(r):
        m = nn.build_model("tiny", embed_dim=8, seed=seed(r), input_shape=(1, 16, 16))
        params = to64(m)
        return (lambda x: m(x)[1]), [r.normal(size=(2, 1, 16, 16))], params, 4

    cases["LivenessModel"] = model

    def ce(r):
        y = hard(r, 4)
        return (lambda z: T.reshape(cross_entropy(z, y).total, (1,))), [2 * r.normal(size=(4, 2))], [], None

    def ce_soft(r):
        p = r.uniform(size=(4, 1))
        t = np.hstack([p, 1 - p])
        return (lambda z: T.reshape(cross_entropy(z, t).total, (1,))), [r.normal(size=(4, 2))], [], None

    def distill(r):
        y, teacher = hard(r, 4), 3 * r.normal(size=(4, 2))
        return (lambda z: T.reshape(distill_loss(z, teacher, y, 5.0, 0.5).total, (1,))), [r.normal(size=(4, 2))], [], None

    def mutual(r):
        y, other = hard(r, 4), Tensor(r.normal(size=(4, 2)))
        return (lambda z: T.reshape(mutual_losses(z, other, y)[0].total, (1,))), [r.normal(size=(4, 2))], [], None

    cases.update({"cross_entropy": ce, "cross_entropy-soft": ce_soft, "distill_loss": distill, "mutual_loss": mutual})
    return cases


CASES = _ops()

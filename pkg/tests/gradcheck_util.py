"""Central finite-difference gradient checking shared by the test modules.

Leaky ReLU is piecewise linear, so a difference quotient whose step pushes
some pre-activation across zero measures a blend of two slopes.  With one
parameter moving and every activation sign held fixed, the network output is
affine in that parameter and the pose loss quadratic, so the central quotient
is exact up to rounding.  The checker therefore records the sign pattern of
every leaky ReLU input and shrinks the step until ``x - h`` and ``x + h``
reproduce the pattern seen at ``x``.
"""

from contextlib import contextmanager

import numpy as np

from pcodom.network import tensor as T

STEPS = (1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


def rel_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@contextmanager
def recording_signs(log: list):
    original = T.leaky_relu

    def recorded(x, slope=0.1):
        log.append(np.packbits(x.data > 0))
        return original(x, slope)

    T.leaky_relu = recorded
    try:
        yield
    finally:
        T.leaky_relu = original


def _eval(loss_fn):
    log = []
    with recording_signs(log):
        value = float(loss_fn().data)
    return value, b"".join(a.tobytes() for a in log)


def central_difference(loss_fn, flat, i, steps=STEPS):
    """Kink-free central difference of ``loss_fn`` in ``flat[i]``.

    Falls back to the smallest step when no step keeps the sign pattern.
    """
    _, base = _eval(loss_fn)
    old = flat[i]
    try:
        for h in steps:
            flat[i] = old + h
            up, s_up = _eval(loss_fn)
            flat[i] = old - h
            down, s_down = _eval(loss_fn)
            if s_up == base and s_down == base:
                break
    finally:
        flat[i] = old
    return (up - down) / (2 * h)


def check_param(loss_fn, param, n_samples: int, rng, steps=STEPS) -> list[float]:
    """Relative errors of ``param.grad`` against central differences.

    ``loss_fn()`` must rebuild the graph and return a scalar tensor; the
    caller has already run ``backward`` so that ``param.grad`` is filled.
    """
    flat = param.data.reshape(-1)
    grad = param.grad.reshape(-1)
    picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
    return [rel_error(float(grad[i]), central_difference(loss_fn, flat, i, steps)) for i in picks]


def model_gradcheck(model, x, y, k=100.0, per_kind=50, seed=0, steps=STEPS):
    """Max relative gradient error per parameter kind of a composed model.

    Dropout stays active with a re-seeded generator so every evaluation sees
    the same mask.
    """
    from pcodom.network.model import total_loss

    def loss():
        out = model.forward(x, training=True, rng=np.random.default_rng(seed))
        return total_loss(out, y, k)[0]

    model.zero_grad()
    loss().backward()
    kinds = {"conv.weight": [], "conv.bias": [], "fc.weight": [], "fc.bias": []}
    for name, p in model.named_parameters():
        layer = "conv" if ".conv" in name else "fc"
        kinds[f"{layer}.{name.rsplit('.', 1)[1]}"].append(p)
    rng = np.random.default_rng(seed + 1)
    result = {}
    for kind, params in kinds.items():
        sizes = np.array([p.data.size for p in params], dtype=float)
        counts = np.bincount(rng.choice(len(params), size=per_kind, p=sizes / sizes.sum()), minlength=len(params))
        # at least one sample per tensor so every layer is visited
        counts = np.maximum(counts, 1)
        errs = []
        for p, n in zip(params, counts):
            errs += check_param(loss, p, int(n), rng, steps)
        result[kind] = (max(errs), len(errs))
    return result

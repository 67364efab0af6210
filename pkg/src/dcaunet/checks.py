"""Verification utilities: finite-difference gradient checking plus the
independent oracles and property checks behind the ``check`` command.

Oracles here intentionally re-derive results along a different route than the
library code they judge: global differential attention is recomputed with
plain ndarray arithmetic, and Hausdorff distances with a dense O(n^2)
pairwise distance matrix instead of a distance transform.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .dca import DcaConfig, DifferentialCrossAttention, attention_flops, lambda_init
from .errors import UsageError
from .tensor import Tensor


def gradcheck(run, tensors, h: float = 1e-5, coords_per_tensor=None, rng=None,
              kink_tol: float = 1e-2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``run`` must be a pure callable returning a fresh scalar Tensor from the
    current contents of ``tensors`` (whose data is perturbed in place).
    When ``coords_per_tensor`` is set, that many coordinates are sampled per
    tensor instead of checking all of them. Requires 64-bit tensors.

    Central differences only estimate the derivative where the function is
    smooth on the +/- h interval. Coordinates whose two one-sided slopes
    disagree (a ReLU/max kink inside the interval) are therefore skipped;
    the detector uses function values only, never the analytic gradient. If
    more than half the coordinates are skipped the check aborts.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        if t.dtype != np.float64:
            raise UsageError(f"gradcheck requires float64 tensors, got {t.dtype}")
        t.zero_grad()
    loss = run()
    loss.backward()
    f_zero = loss.item()
    worst = 0.0
    checked = 0
    skipped = 0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        total = t.size
        if coords_per_tensor is None or total <= coords_per_tensor:
            indices = range(total)
        else:
            indices = sorted(rng.choice(total, size=coords_per_tensor, replace=False))
        for i in indices:
            original = float(t.data.flat[i])
            t.data.flat[i] = original + h
            with T.no_grad():
                f_plus = run().item()
            t.data.flat[i] = original - h
            with T.no_grad():
                f_minus = run().item()
            t.data.flat[i] = original
            d_plus = (f_plus - f_zero) / h
            d_minus = (f_zero - f_minus) / h
            if abs(d_plus - d_minus) > kink_tol * max(abs(d_plus), abs(d_minus)) + 1e-7:
                skipped += 1
                continue
            checked += 1
            fd = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-4)
            worst = max(worst, rel)
    if skipped > checked:
        raise UsageError(
            f"gradcheck skipped {skipped} of {checked + skipped} coordinates "
            f"(non-smooth at this point); choose a different evaluation point"
        )
    return worst


def scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    """Project a tensor output to a scalar with fixed weights (for gradcheck)."""
    return (out * Tensor(weights)).sum()


# -- independent oracles -------------------------------------------------------


def global_differential_attention_oracle(x: np.ndarray,
                                         module: DifferentialCrossAttention) -> np.ndarray:
    """Direct single-summary-token differential attention, plain ndarray math.

    Valid when the module's window equals the full feature map, i.e. the
    summaries collapse to one global token. Shares only the parameter arrays
    with the module, not its code path.
    """
    cfg = module.cfg
    height, width, channels = x.shape
    d, heads = cfg.head_dim, cfg.heads
    n = height * width
    wq = module.wq.weight.data
    wk = module.wk.weight.data
    wv = module.wv.weight.data
    wo = module.wo.weight.data
    token = x.reshape(n, channels).mean(axis=0)

    q = (x.reshape(n, channels) @ wq).reshape(n, heads, 2 * d)
    k = (token @ wk).reshape(heads, 2 * d)
    v = (token @ wv).reshape(heads, 2 * d)
    lam = (math.exp(float(module.lambda_q1.data @ module.lambda_k1.data))
           - math.exp(float(module.lambda_q2.data @ module.lambda_k2.data))
           + module.lambda_anchor)

    merged = np.empty((n, heads, 2 * d))
    for i in range(heads):
        # softmax over a single key is identically 1 for both maps
        s1 = np.ones((n, 1))
        s2 = np.ones((n, 1))
        head = (s1 - lam * s2) @ v[i][None, :]
        rms = np.sqrt((head * head).mean(axis=-1, keepdims=True) + 1e-6)
        normed = head / rms * module.head_gain.data[i]
        merged[:, i, :] = (1.0 - module.lambda_anchor) * normed
    out = merged.reshape(n, channels) @ wo
    return out.reshape(height, width, channels)


def brute_force_boundary(binary: np.ndarray) -> list:
    """Loop-based boundary extraction (4-adjacency, border counts as outside)."""
    height, width = binary.shape
    points = []
    for r in range(height):
        for c in range(width):
            if not binary[r, c]:
                continue
            on_border = r == 0 or c == 0 or r == height - 1 or c == width - 1
            if on_border or not (binary[r - 1, c] and binary[r + 1, c]
                                 and binary[r, c - 1] and binary[r, c + 1]):
                points.append((r, c))
    return points


def brute_force_hausdorff(pred: np.ndarray, ref: np.ndarray, class_id: int,
                          percentile: int = 95) -> float:
    """O(n^2) pairwise-distance Hausdorff oracle; NaN when a side is empty."""
    p = np.asarray(pred) == class_id
    r = np.asarray(ref) == class_id
    if not p.any() or not r.any():
        return float("nan")
    a = np.array(brute_force_boundary(p), dtype=float)
    b = np.array(brute_force_boundary(r), dtype=float)
    pairwise = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    d_ab = pairwise.min(axis=1)
    d_ba = pairwise.min(axis=0)
    if percentile == 100:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


def brute_force_dice(pred: np.ndarray, ref: np.ndarray, class_id: int) -> float:
    """Pixel-counting Dice oracle."""
    p = np.asarray(pred) == class_id
    r = np.asarray(ref) == class_id
    intersection = int(np.logical_and(p, r).sum())
    total = int(p.sum()) + int(r.sum())
    return 1.0 if total == 0 else 2.0 * intersection / total


# -- verification suite ----------------------------------------------------------


def _check_lambda_schedule() -> tuple:
    ok = lambda_init(1) == 0.2
    values = [lambda_init(l) for l in range(1, 60)]
    ok = ok and all(b > a for a, b in zip(values, values[1:]))
    ok = ok and max(values) < 0.8
    return ok, f"lambda_init(1)={lambda_init(1)}, sup~{values[-1]:.6f}"


def _check_row_sums(seed: int, trials: int = 20) -> tuple:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg = DcaConfig(channels=4, head_dim=1, window=2, block_index=int(rng.integers(1, 9)))
        module = DifferentialCrossAttention(cfg, rng)
        module.capture = True
        x = Tensor(rng.normal(size=(4, 4, 4)))
        module(x)
        cap = module.captured
        rows = (cap["s1"] - cap["lambda"] * cap["s2"]).sum(axis=-1)
        worst = max(worst, float(np.abs(rows - (1.0 - cap["lambda"])).max()))
    return worst < 1e-6, f"max |row sum - (1-lambda)| = {worst:.3e}"


def _check_collapse(seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    cfg = DcaConfig(channels=8, head_dim=2, window=6, block_index=3)
    module = DifferentialCrossAttention(cfg, rng)
    x = rng.normal(size=(6, 6, 8))
    with T.no_grad():
        ours = module(Tensor(x)).data
    oracle = global_differential_attention_oracle(x, module)
    gap = float(np.abs(ours - oracle).max())
    return gap < 1e-10, f"max |dca - direct global oracle| = {gap:.3e}"


def _check_flop_ratio() -> tuple:
    cases = [(7, 56, 56), (7, 28, 28), (1, 8, 8), (4, 16, 16), (2, 6, 6)]
    details = []
    ok = True
    for window, height, width in cases:
        cfg = DcaConfig(channels=8, head_dim=2, window=window)
        ratio = attention_flops(cfg, height, width)["ratio_vs_pixelwise"]
        ok = ok and ratio == window * window
        details.append(f"M={window}:{ratio}")
    return ok, "score ratios " + ", ".join(details)


def _check_metric_parity(seed: int, trials: int = 25) -> tuple:
    from .metrics import dice as dice_impl
    from .metrics import hausdorff as hausdorff_impl

    rng = np.random.default_rng(seed)
    for _ in range(trials):
        size = int(rng.integers(4, 17))
        pred = rng.integers(0, 3, size=(size, size))
        ref = rng.integers(0, 3, size=(size, size))
        for class_id in (1, 2):
            if dice_impl(pred, ref, class_id) != brute_force_dice(pred, ref, class_id):
                return False, f"dice mismatch on class {class_id}"
            fast = hausdorff_impl(pred, ref, class_id, percentile=100)
            slow = brute_force_hausdorff(pred, ref, class_id, percentile=100)
            if math.isnan(fast) != math.isnan(slow):
                return False, "hausdorff emptiness mismatch"
            if not math.isnan(fast) and fast != slow:
                return False, f"hausdorff mismatch: {fast} vs {slow}"
    return True, f"{trials} random mask pairs matched exactly"


def _check_gradients(seed: int) -> tuple:
    from .blocks import DcaBlock
    from .csff import CsffBlock
    from .train import segmentation_loss

    rng = np.random.default_rng(seed)
    worst = {}

    cfg = DcaConfig(channels=4, head_dim=1, window=2, block_index=2)
    module = DifferentialCrossAttention(cfg, rng)
    x = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    weights = rng.normal(size=(4, 4, 4))
    tensors = [x] + module.parameters()
    worst["dca"] = gradcheck(lambda: scalarize(module(x), weights), tensors, rng=rng)

    block_cfg = DcaConfig(channels=4, head_dim=1, window=3, block_index=1)
    block = DcaBlock(block_cfg, rng)
    bx = Tensor(rng.normal(size=(6, 6, 4)), requires_grad=True)
    bw = rng.normal(size=(6, 6, 4))
    worst["block"] = gradcheck(lambda: scalarize(block(bx), bw),
                               [bx] + block.parameters(), coords_per_tensor=24, rng=rng)

    csff = CsffBlock(4, rng)
    ce = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    cd = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    cw = rng.normal(size=(1, 4, 4, 4))
    worst["csff"] = gradcheck(lambda: scalarize(csff(ce, cd), cw),
                              [ce, cd] + csff.parameters(), coords_per_tensor=24, rng=rng)

    logits = Tensor(rng.normal(size=(1, 4, 4, 3)), requires_grad=True)
    masks = rng.integers(0, 3, size=(1, 4, 4))
    worst["loss"] = gradcheck(lambda: segmentation_loss(logits, masks)[0], [logits], rng=rng)

    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    return not bad, detail


def run_verification(seed: int = 0) -> list:
    """Run every check in 64-bit verification mode; (name, passed, detail) rows."""
    checks = [
        ("lambda_schedule", _check_lambda_schedule),
        ("differential_row_sums", lambda: _check_row_sums(seed)),
        ("degenerate_collapse", lambda: _check_collapse(seed)),
        ("flop_ratio", _check_flop_ratio),
        ("metric_oracle_parity", lambda: _check_metric_parity(seed)),
        ("gradient_checks", lambda: _check_gradients(seed)),
    ]
    results = []
    with T.default_dtype(np.float64):
        for name, fn in checks:
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure, not an abort
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            results.append((name, ok, detail))
    return results

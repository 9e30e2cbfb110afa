"""Central finite-difference checks for every differentiable op and block.

Each check builds a small float64 problem, reduces the output to a scalar
with a fixed random weighting, and compares the analytic gradient of every
input/parameter with ``(f(p + h) - f(p - h)) / 2h`` on a sample of entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

H = 1e-5
TOL = 1e-4
# entries whose gradients are this many times smaller than the largest in their group are compared absolutely
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    group: str
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR * max|n|, 1e-12)."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(REL_FLOOR * scale, 1e-12))
    return float((np.abs(a - n) / denom).max(initial=0.0))


def _scalar(t: Tensor):
    # keep the array dtype; .item() would round longdouble to a Python float
    return t.data.reshape(-1)[0]


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], rng: np.random.Generator,
                    max_entries: int = 8, h: float = H) -> dict[str, float]:
    """Compare analytic and numeric gradients of scalar ``fn()`` w.r.t. each tensor."""
    for t in tensors.values():
        t.grad = None
    fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    errs = {}
    with T.no_grad():
        for k, t in tensors.items():
            if t.data.dtype != T.default_dtype():
                raise TypeError(f"{k} has dtype {t.data.dtype}, expected {T.default_dtype()}")
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size) if flat.size <= max_entries else rng.choice(flat.size, max_entries, replace=False)
            num = np.zeros(len(idx), dtype=t.data.dtype)
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = _scalar(fn())
                flat[i] = old - h
                fm = _scalar(fn())
                flat[i] = old
                num[j] = (fp - fm) / (2 * h)
            a = analytic[k].reshape(-1)[idx]
            # the floor uses the full analytic gradient's scale, not just the sampled entries
            full_scale = float(np.abs(analytic[k]).max(initial=0.0))
            a_ext = np.append(a, full_scale)
            n_ext = np.append(num, full_scale)
            errs[k] = rel_error(a_ext, n_ext)
    return errs


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_(T.mul(out, Tensor(w)))


# ---------------------------------------------------------------------------
# check builders; each returns (fn, tensors)
# ---------------------------------------------------------------------------


def _rand(rng, *shape, scale=1.0, grad=True):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=grad)


def _op_check(op, inputs: dict, rng, out_shape_fn=None):
    probe = op(**inputs)
    w = rng.normal(size=probe.shape)
    return (lambda: _weighted_sum(op(**inputs), w)), {k: v for k, v in inputs.items() if isinstance(v, Tensor)}


def _tensor_checks(rng):
    c = {}
    c["linear"] = _op_check(lambda x, W, b: T.linear(x, W, b),
                            dict(x=_rand(rng, 2, 3, 4), W=_rand(rng, 5, 4), b=_rand(rng, 5)), rng)
    c["conv1d_causal_dense"] = _op_check(lambda x, w, b: T.conv1d(x, w, b, 1, "causal"),
                                         dict(x=_rand(rng, 2, 3, 7), w=_rand(rng, 4, 3, 3), b=_rand(rng, 4)), rng)
    c["conv1d_causal_depthwise"] = _op_check(lambda x, w, b: T.conv1d(x, w, b, 3, "causal"),
                                             dict(x=_rand(rng, 2, 3, 7), w=_rand(rng, 3, 1, 4), b=_rand(rng, 3)), rng)
    c["conv1d_same_grouped"] = _op_check(lambda x, w, b: T.conv1d(x, w, b, 2, "same"),
                                         dict(x=_rand(rng, 2, 4, 6), w=_rand(rng, 6, 2, 3), b=_rand(rng, 6)), rng)
    c["layer_norm_channels"] = _op_check(lambda x, g, b: T.layer_norm_channels(x, g, b),
                                         dict(x=_rand(rng, 2, 5, 4), g=_rand(rng, 5), b=_rand(rng, 5)), rng)
    for mode in ("relu", "silu", "sigmoid", "softplus", "exp"):
        x = Tensor(rng.normal(size=(3, 4)) + np.where(rng.random((3, 4)) < 0.5, 0.3, -0.3), requires_grad=True)
        c[f"pointwise_{mode}"] = _op_check(lambda x, m=mode: T.pointwise(x, m), dict(x=x), rng)
    # distinct values keep the max-pool argmax away from ties
    xp = Tensor(rng.permutation(2 * 3 * 7).reshape(2, 3, 7) * 0.1, requires_grad=True)
    c["pool_max_k3s2p1"] = _op_check(lambda x: T.pool_time(x, "max_k3s2p1"), dict(x=xp), rng)
    c["pool_adaptive_avg"] = _op_check(lambda x: T.pool_time(x, "adaptive_avg", 3), dict(x=_rand(rng, 2, 3, 7)), rng)
    c["pool_mean_all"] = _op_check(lambda x: T.pool_time(x, "mean_all"), dict(x=_rand(rng, 2, 3, 5)), rng)
    c["axis_ops"] = _op_check(
        lambda x: T.concat([T.flip_time(T.chunk2_channels(x)[1]), T.chunk2_channels(x)[0]], axis=1),
        dict(x=_rand(rng, 2, 4, 5)), rng)
    c["transpose_cl"] = _op_check(lambda x: T.transpose_cl(x), dict(x=_rand(rng, 2, 3, 5)), rng)
    c["drop_path"] = _op_check(lambda x: T.drop_path(x, 0.5, True, np.random.default_rng(3)),
                               dict(x=_rand(rng, 6, 2, 3)), rng)
    c["arith"] = _op_check(lambda a, b: T.div(T.mul(T.sub(a, b), a), T.add(T.exp(b), 1.0)),
                           dict(a=_rand(rng, 3, 4), b=_rand(rng, 1, 4)), rng)
    return c


def _excite(module, rng) -> None:
    """Move S6 parameters off their init so the step sizes are O(1).

    At init the step size is ~1e-3 and the gradients of ``A_log`` and
    ``b_delta`` drop to ~1e-10, below central-difference round-off.
    """
    from .s6 import S6Parameters

    for m in module.modules():
        if isinstance(m, S6Parameters):
            m.A_log.data += rng.normal(0, 0.3, m.A_log.shape)
            m.b_delta.data = rng.normal(0, 0.5, m.b_delta.shape).astype(m.b_delta.data.dtype)
            if m.D_skip is not None:
                m.D_skip.data = rng.normal(0, 1.0, m.D_skip.shape).astype(m.D_skip.data.dtype)
            m.W_B.data *= 3.0
            m.W_C.data *= 3.0


def _s6_checks(rng):
    from .s6 import S6Parameters, s6_forward

    c = {}
    for name, shape, n, impl in (("s6_seq_toy", (1, 4, 2), 2, "sequential"),
                                 ("s6_chunked", (2, 9, 3), 3, "chunked")):
        p = S6Parameters(shape[2], n, rng)
        _excite(p, rng)
        x = _rand(rng, *shape)
        w = rng.normal(size=shape)
        fn = (lambda x=x, p=p, w=w, impl=impl: _weighted_sum(s6_forward(x, p, impl=impl, chunk=4), w))
        c[name] = (fn, {"x": x, **dict(p.named_parameters())})
    return c


def _block_checks(rng):
    from .blocks import BiS6Block, BlockConfig

    c = {}
    cfgs = {
        "tfa_block": BlockConfig(4, (2, 3), "time", "sum", state_dim=2),
        "tfa_block_concat": BlockConfig(4, (1, 2), "time", "concat", state_dim=2),
        "tfa_block_shared": BlockConfig(4, (2,), "time", "sum", state_dim=2, share_directions=True),
        "cfa_block": BlockConfig(4, (2, 4), "channel", "sum", pooled_len=4, state_dim=2),
        "cfa_block_time_axis": BlockConfig(4, (2,), "channel", "sum", pooled_len=4, state_dim=2,
                                           cfa_scan_axis="time"),
    }
    for name, cfg in cfgs.items():
        blk = BiS6Block(cfg, rng)
        for q in blk.parameters():
            q.data += rng.normal(0, 0.05, q.shape)
        _excite(blk, rng)
        z = _rand(rng, 2, 4, 6)
        probe = blk(z)
        w = rng.normal(size=probe.shape)
        c[name] = ((lambda blk=blk, z=z, w=w: _weighted_sum(blk(z), w)), {"z": z, **dict(blk.named_parameters())})
    return c


def _loss_checks(rng):
    from .heads import focal_loss, iou_reg_loss

    c = {}
    logits = _rand(rng, 2, 3, 5, scale=2.0)
    y = (rng.random((2, 3, 5)) < 0.3).astype(float)
    mask = rng.random((2, 1, 5)) < 0.8
    c["focal_loss"] = ((lambda: focal_loss(logits, y, mask)), {"logits": logits})
    pred = Tensor(rng.uniform(0.2, 3.0, (2, 2, 6)), requires_grad=True)
    tgt = rng.uniform(0.2, 3.0, (2, 2, 6))
    m = rng.random((2, 6)) < 0.7
    m[0, 0] = True
    c["iou_reg_loss"] = ((lambda: iou_reg_loss(pred, tgt, m)), {"pred": pred})
    return c


def _model_checks(rng):
    from .backbone import ModelConfig
    from .model import ActionLocalizer

    cfg = ModelConfig(c_in=3, c_emb=4, num_classes=2, state_dim=2, r=2, k_tfa=(2,), k_cfa=(2,), k_branch=(2,),
                      pooled_len=4, pyramid_depth=2, drop_path_rate=0.0, layer_scale_init=0.5, head_layers=1)
    model = ActionLocalizer(cfg, rng=rng)
    _excite(model, rng)
    x = _rand(rng, 1, 3, 8)
    probe = model(x)
    ws = [rng.normal(size=t.shape) for t in probe.cls_logits + probe.reg_offsets]

    def fn():
        out = model(x)
        total = None
        for t, w in zip(out.cls_logits + out.reg_offsets, ws):
            term = _weighted_sum(t, w)
            total = term if total is None else T.add(total, term)
        return total

    return {"tiny_model": (fn, {"x": x, **dict(model.named_parameters())})}


GROUPS: dict[str, Callable] = {
    "tensor": _tensor_checks,
    "s6": _s6_checks,
    "blocks": _block_checks,
    "losses": _loss_checks,
    "model": _model_checks,
}


# Whole-model gradients of deep S6 parameters sit near 1e-7 against an O(10)
# objective, so float64 central differences at h=1e-5 are round-off bound.
EXTENDED = {"model": np.longdouble}

OP_NAMES = ("add", "sub", "mul", "div", "sum", "relu", "sigmoid", "silu", "softplus", "exp", "reshape",
            "permute", "flip", "slice", "concat", "linear", "conv1d", "layer_norm", "max_pool", "adaptive_avg",
            "selective_scan", "focal_loss", "iou_loss")


def run(selector: str = "all", seed: int = 0, max_entries: int = 8, corrupt: str | None = None) -> list[CheckResult]:
    """Run the selected check groups in float64.

    ``corrupt`` names an op whose backward output is scaled by 1.5, a
    negative control that must make every check touching that op fail.
    """
    groups = list(GROUPS) if selector == "all" else selector.split(",")
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown gradcheck group(s) {unknown}; choose from {list(GROUPS)} or 'all'")
    if corrupt and corrupt not in OP_NAMES:
        raise ValueError(f"unknown op {corrupt!r}; choose from {OP_NAMES}")
    if corrupt:
        T.GRAD_HOOKS[corrupt] = lambda gs: [None if g is None else g * 1.5 for g in gs]
    results = []
    try:
        with T.precision(np.float64):
            for g in groups:
                rng = np.random.default_rng([seed, list(GROUPS).index(g)])
                with T.precision(EXTENDED.get(g, np.float64)):
                    for name, (fn, tensors) in GROUPS[g](rng).items():
                        t0 = time.perf_counter()
                        errs = check_gradients(fn, tensors, rng, max_entries=max_entries)
                        results.append(CheckResult(name, g, max(errs.values()), errs, time.perf_counter() - t0))
    finally:
        if corrupt:
            T.GRAD_HOOKS.pop(corrupt, None)
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  group    max_rel_err  status"]
    for r in results:
        worst = max(r.per_param, key=r.per_param.get)
        status = "PASS" if r.passed else f"FAIL (worst: {worst})"
        lines.append(f"{r.name.ljust(width)}  {r.group.ljust(7)}  {r.max_rel_err:11.3e}  {status}")
    return "\n".join(lines)

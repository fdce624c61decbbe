"""Weight clipping fine tuning.

After ordinary training every scaling group is clipped to just below the
power of two under its maximum magnitude, which halves ``2**E`` and so
doubles the group's scale factor. Fine tuning then runs with a
straight-through estimator: the forward pass sees the clipped weights and a
weight's gradient is cancelled once its magnitude exceeds the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grouping import group_matrix, parse_grouping
from .net import PIXEL_MAX, DivergenceError, ToyAutoencoder, TrainConfig, batches, evaluate, sgd_step, train
from .quantizer import exponents_of, parse_scheme, quantize_model
from .store import FloatModel, Scheme, WeightTensor

EPS_REL = 1e-6


def clip_threshold(weights, eps_rel: float = EPS_REL) -> float | None:
    """``2**E - eps`` with ``E = floor(log2(max|w|))`` and ``eps = 2**E * eps_rel``.

    Returns None for an all-zero group, which has nothing to clip.
    """
    m = float(np.max(np.abs(weights)))
    if m == 0.0:
        return None
    e = int(exponents_of(m))
    return math.ldexp(1.0 - eps_rel, e)


def clip_weights(weights, t):
    w = np.asarray(weights, dtype=np.float64)
    if t is None:
        return w.copy()
    return np.clip(w, -t, t)


def ste_mask(weights, t):
    w = np.asarray(weights, dtype=np.float64)
    if t is None:
        return np.ones_like(w)
    return (np.abs(w) <= t).astype(np.float64)


@dataclass
class ClipPlan:
    """Per layer, one threshold per group (``inf`` for all-zero groups)."""

    grouping: object
    thresholds: list[np.ndarray]
    clipped_counts: list[np.ndarray]
    eps_rel: float = EPS_REL

    def full(self, k: int, shape) -> np.ndarray:
        """Layer ``k`` thresholds broadcast to the weight shape."""
        gm_shape = group_matrix(np.empty(shape), self.grouping).shape
        return np.broadcast_to(self.thresholds[k][:, None], gm_shape).reshape(shape)

    def apply(self, model: FloatModel) -> FloatModel:
        out = []
        for k, t in enumerate(model.tensors):
            lim = self.full(k, t.values.shape)
            out.append(WeightTensor(np.clip(t.values, -lim, lim)))
        return FloatModel(out)

    def masks(self, model: FloatModel) -> list[np.ndarray]:
        return [
            (np.abs(t.values) <= self.full(k, t.values.shape)).astype(np.float64)
            for k, t in enumerate(model.tensors)
        ]


def make_clip_plan(model: FloatModel, grouping, eps_rel: float = EPS_REL) -> ClipPlan:
    grouping = parse_grouping(grouping)
    thresholds, counts = [], []
    for t in model.tensors:
        gm = group_matrix(t.values, grouping)
        mx = np.max(np.abs(gm), axis=1)
        th = np.where(mx > 0, np.ldexp(1.0 - eps_rel, exponents_of(mx)), np.inf)
        thresholds.append(th)
        counts.append(np.count_nonzero(np.abs(gm) > th[:, None], axis=1))
    return ClipPlan(grouping, thresholds, counts, eps_rel)


def finetune(net: ToyAutoencoder, plan: ClipPlan, cfg: TrainConfig, iters: int | None = None,
             images=None, log=None, log_every: int = 100) -> ToyAutoencoder:
    """STE fine tuning; returns the network carrying the clipped effective weights."""
    iters = cfg.i2 if iters is None else iters
    images = cfg.train_images() if images is None else images
    latent = net.copy()
    idx_stream = batches(cfg, 2)
    good = None
    for it in range(iters):
        eff = latent.with_weights(plan.apply(latent.weights_model()))
        x = images[next(idx_stream)]
        with np.errstate(over="ignore", invalid="ignore"):
            eff.forward(x)
            loss, grads = eff.backward(x, cfg.lam)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite fine-tuning loss at iteration {it}", last_good=good, iteration=it)
        good = eff
        try:
            sgd_step(latent, grads, cfg.lr, masks=plan.masks(latent.weights_model()))
        except DivergenceError as e:
            raise DivergenceError(str(e), last_good=good, iteration=it) from None
        if log is not None and (it % log_every == 0 or it == iters - 1):
            log({"phase": "finetune", "iteration": it, "loss": loss, "mse": loss / (cfg.lam * PIXEL_MAX**2)})
    return latent.with_weights(plan.apply(latent.weights_model()))


@dataclass
class ArmResult:
    name: str
    float_mse: float
    quant_mse: float
    quant_psnr: float
    zero_fraction: float
    group_exponents: list[np.ndarray]
    group_zero_fractions: list[np.ndarray]

    def record(self) -> dict:
        return {
            "record": "arm",
            "arm": self.name,
            "float_mse": self.float_mse,
            "quant_mse": self.quant_mse,
            "quant_psnr": self.quant_psnr,
            "zero_fraction": self.zero_fraction,
        }


def assess(name: str, net: ToyAutoencoder, images, scheme, grouping) -> ArmResult:
    scheme = parse_scheme(scheme)
    qm = quantize_model(net.weights_model(), scheme, grouping)
    q = evaluate(net, images, quantized=qm)
    f = evaluate(net, images)
    zero_groups = [
        np.mean(group_matrix(c.reshape(s.dims), grouping) == 0, axis=1)
        for c, s in zip(qm.codes, qm.manifest.layers)
    ]
    total_zero = sum(int(np.count_nonzero(c == 0)) for c in qm.codes) / qm.manifest.num_params
    return ArmResult(name, f.mse, q.mse, q.psnr, total_zero, [e.copy() for e in qm.exponents], zero_groups)


@dataclass
class WcftReport:
    scheme: Scheme
    grouping: object
    arms: dict[str, ArmResult]
    exponent_deltas: list[np.ndarray]
    clipped_counts: list[np.ndarray]
    extra: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [a.record() for a in self.arms.values()]
        for k, (d, c) in enumerate(zip(self.exponent_deltas, self.clipped_counts)):
            out.append({
                "record": "layer",
                "layer": k,
                "exponent_deltas": [int(v) for v in d],
                "clipped_weights": [int(v) for v in c],
            })
        return out

    def table(self) -> str:
        lines = [
            f"WCFT report  scheme={self.scheme.name}  grouping={parse_grouping(self.grouping).name}",
            f"{'arm':<16}{'float MSE':>14}{'quant MSE':>14}{'quant PSNR':>12}{'zero frac':>11}",
        ]
        for a in self.arms.values():
            lines.append(
                f"{a.name:<16}{a.float_mse:>14.6e}{a.quant_mse:>14.6e}{a.quant_psnr:>12.3f}{a.zero_fraction:>11.4f}"
            )
        for k, d in enumerate(self.exponent_deltas):
            lines.append(f"layer {k}: exponent deltas {sorted(set(int(v) for v in d))}, "
                         f"clipped {int(np.sum(self.clipped_counts[k]))} weights")
        return "\n".join(lines)


def wcft_from_trained(trained: ToyAutoencoder, cfg: TrainConfig, grouping="cw", scheme="nlq", log=None):
    """Clip and fine tune an already trained network.

    Returns ``(clipped, finetuned, report)``. The report compares the
    trained network, the clipped network and the clipped + fine-tuned
    network, each after quantization.
    """
    scheme = parse_scheme(scheme)
    if scheme is Scheme.LLOYD:
        raise ValueError("weight clipping fine tuning supports the lq and nlq schemes")
    grouping = parse_grouping(grouping)
    plan = make_clip_plan(trained.weights_model(), grouping)
    clipped = trained.with_weights(plan.apply(trained.weights_model()))
    tuned = finetune(clipped, plan, cfg, log=log)
    ev = cfg.eval_images()
    arms = {
        "trained": assess("trained", trained, ev, scheme, grouping),
        "clipped": assess("clipped", clipped, ev, scheme, grouping),
        "clipped+ft": assess("clipped+ft", tuned, ev, scheme, grouping),
    }
    deltas = [c - t for c, t in zip(arms["clipped"].group_exponents, arms["trained"].group_exponents)]
    report = WcftReport(scheme, grouping, arms, deltas, plan.clipped_counts)
    return clipped, tuned, report


def run_wcft(net: ToyAutoencoder, cfg: TrainConfig, grouping="cw", scheme="nlq", log=None):
    """Train for ``cfg.i1`` steps, clip, fine tune for ``cfg.i2`` steps.

    Returns ``(trained, finetuned, report)``; ``net`` itself is left untouched.
    """
    trained = train(net.copy(), cfg, log=log)
    _, tuned, report = wcft_from_trained(trained, cfg, grouping, scheme, log=log)
    return trained, tuned, report

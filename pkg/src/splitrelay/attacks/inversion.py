"""UNSplit-style input reconstruction and the SSIM similarity metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..dp import clip_l1, clip_l1_backward
from ..nn import Segment, init_segment, segment_backward, segment_forward, sgd_step

log = logging.getLogger(__name__)


class InversionDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"inversion loss became {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class InversionOutcome:
    reconstructions: np.ndarray
    surrogate: Segment
    mse: np.ndarray
    ssim: np.ndarray | None = None
    loss_history: list = field(default_factory=list)

    @property
    def mean_ssim(self) -> float:
        if self.ssim is None:
            raise ValueError("no SSIM recorded (inputs were not scored as images)")
        return float(np.mean(self.ssim))


def _surrogate_out(surrogate, x, clip_radius):
    act, trace = segment_forward(surrogate, x)
    out = clip_l1(act, clip_radius) if clip_radius else act
    return act, out, trace


def _loss_and_grads(surrogate, x, observed, clip_radius):
    act, out, trace = _surrogate_out(surrogate, x, clip_radius)
    resid = out - observed
    loss = 0.5 * float(np.sum(resid * resid)) / len(x)
    g = resid / len(x)
    if clip_radius:
        g = clip_l1_backward(act, g, clip_radius)
    param_grads, input_grad = segment_backward(surrogate, trace, g)
    return loss, param_grads, input_grad


def attack_loss(surrogate: Segment, x, observed, clip_radius: float | None = None) -> float:
    """0.5 * mean over samples of ||M(W, x) - observed||^2."""
    _, out, _ = _surrogate_out(surrogate, x, clip_radius)
    resid = out - np.asarray(observed, dtype=np.float64)
    return 0.5 * float(np.sum(resid * resid)) / len(out)


def unsplit_invert(observed, surrogate_widths, iters: int = 2000, lr: float = 5.0,
                   weight_lr: float = 0.05, seed: int = 0, init: Segment | None = None,
                   freeze_weights: bool = False, clip_radius: float | None = None,
                   x_init: float | np.ndarray = 0.5, bounds: tuple | None = None,
                   targets=None, image_shape: tuple | None = None,
                   data_range: float = 1.0) -> InversionOutcome:
    """Jointly fit inputs and a surrogate encoder to observed activations.

    Each outer iteration is one gradient step on the inputs followed by one
    on the surrogate weights. ``lr`` applies to the per-sample objective, so
    the input step does not shrink with the batch size; ``weight_lr`` applies
    to the batch-mean loss. The attacker knows the architecture
    (``surrogate_widths``). Without ``init`` the surrogate starts from a
    fresh random draw; passing ``init`` models prior knowledge of a starting
    checkpoint. When ``clip_radius`` is given the surrogate output is clipped
    the same way as the released activations.

    The iterate with the lowest loss is returned. When ``targets`` is given,
    per-sample MSE (and SSIM if ``image_shape`` is set) are scored against it.
    """
    obs = np.asarray(getattr(observed, "values", observed), dtype=np.float64)
    if obs.ndim != 2:
        raise ValueError("observed activations must be a 2-D batch")
    if init is not None:
        surrogate = init.copy()
        surrogate.frozen = False
    else:
        surrogate = init_segment(surrogate_widths, seed, name="unsplit-surrogate")
    if surrogate.n_out != obs.shape[1]:
        raise ValueError(f"surrogate emits {surrogate.n_out} values, observed rows have {obs.shape[1]}")
    x = np.empty((len(obs), surrogate.n_in))
    x[...] = x_init
    n = len(obs)

    history = []
    best_loss, best_x = np.inf, x.copy()
    for it in range(iters):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, _, gx = _loss_and_grads(surrogate, x, obs, clip_radius)
        if not np.isfinite(loss):
            raise InversionDiverged(it, loss)
        if loss < best_loss:
            best_loss, best_x = loss, x.copy()
        history.append(loss)
        x = x - lr * n * gx
        if bounds is not None:
            np.clip(x, bounds[0], bounds[1], out=x)
        if not freeze_weights and weight_lr > 0:
            _, gw, _ = _loss_and_grads(surrogate, x, obs, clip_radius)
            sgd_step(surrogate, gw, weight_lr)
    with np.errstate(over="ignore", invalid="ignore"):
        final = attack_loss(surrogate, x, obs, clip_radius)
    if not np.isfinite(final):
        raise InversionDiverged(iters, final)
    history.append(final)
    if final < best_loss:
        best_x = x.copy()
    log.debug("inversion: loss %.6g -> %.6g over %d iterations", history[0], min(history), iters)

    outcome = InversionOutcome(best_x, surrogate.freeze(), mse=np.array([]), loss_history=history)
    if targets is not None:
        t = np.asarray(targets, dtype=np.float64)
        outcome.mse = ((best_x - t) ** 2).mean(axis=1)
        if image_shape is not None:
            outcome.ssim = np.array([
                ssim(r.reshape(image_shape), o.reshape(image_shape), data_range)
                for r, o in zip(best_x, t)
            ])
    return outcome


def _window_sums(img: np.ndarray, win: int) -> np.ndarray:
    """Sum over every ``win x win`` window (valid positions, stride 1)."""
    c = np.pad(img, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    return c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]


def ssim(a, b, data_range: float = 1.0, win: int = 8) -> float:
    """Mean SSIM over all ``win x win`` sliding windows (uniform weights).

    Window statistics use population (1/N) moments and the usual stabilizers
    C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = ``data_range``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < win:
        raise ValueError(f"images smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    area = win * win
    mu_a = _window_sums(a, win) / area
    mu_b = _window_sums(b, win) / area
    var_a = _window_sums(a * a, win) / area - mu_a**2
    var_b = _window_sums(b * b, win) / area - mu_b**2
    cov = _window_sums(a * b, win) / area - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))

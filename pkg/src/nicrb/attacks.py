"""White-box attacks on differentiable codecs.

Every attack maximizes a loss target under an L∞ budget and returns the
best iterate seen. Inputs are single images (3, H, W) or batches
(N, 3, H, W); batched losses are summed so each image gets its own
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .color import luma_t, rgb_to_lab, lab_to_rgb_t
from .metrics import ms_ssim_t

LOSS_IDS = ("ftda-default", "added-noises", "reconstruction", "ftda-msssim",
            "reconstruction-msssim", "bpp-increase")
ALGORITHMS = ("ftda", "ifgsm", "pgd", "madc", "ssah", "cadv", "random-noise")
GRADIENT_ATTACKS = ("ftda", "ifgsm", "pgd", "madc", "ssah", "cadv")
PRESETS = ((4 / 255, 1 / 255, 10), (8 / 255, 1 / 255, 20), (8 / 255, 2 / 255, 40), (16 / 255, 2 / 255, 40))
NOISE_SIGMA_RANGE = (5 / 255, 14 / 255)
BUDGET_TOL = 1e-9


@dataclass(frozen=True)
class LossTarget:
    """One optimization target, always in maximize form.

    ``bpp_direction`` is "increase" (maximize bpp) or "printed" (maximize
    1 - bpp, the literal tabulated form). ``msssim_win`` shrinks the
    MS-SSIM window for tiny images.
    """

    id: str = "ftda-default"
    y_only: bool = False
    bpp_direction: str = "increase"
    msssim_win: int = 11

    def __post_init__(self):
        if self.id not in LOSS_IDS:
            raise ValueError(f"unknown loss target {self.id!r}")
        if self.y_only and self.id == "bpp-increase":
            raise ValueError("y-only projection does not apply to the bpp target")
        if self.bpp_direction not in ("increase", "printed"):
            raise ValueError(f"unknown bpp direction {self.bpp_direction!r}")

    @property
    def label(self) -> str:
        return self.id + ("-y" if self.y_only else "")


@dataclass(frozen=True)
class AttackSpec:
    algorithm: str
    loss: LossTarget = field(default_factory=LossTarget)
    epsilon: float = 8 / 255
    step: float = 1 / 255
    iterations: int = 20
    seed: int = 0
    options: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown attack {self.algorithm!r}")
        if isinstance(self.loss, str):
            object.__setattr__(self, "loss", LossTarget(self.loss))
        if self.epsilon < 0 or not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite and non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @classmethod
    def from_preset(cls, algorithm: str, loss, preset: int, seed: int = 0, **options) -> AttackSpec:
        eps, step, iters = PRESETS[preset]
        loss = LossTarget(loss) if isinstance(loss, str) else loss
        return cls(algorithm, loss, eps, step, iters, seed, options)


@dataclass
class AdversarialExample:
    x: np.ndarray
    x_adv: np.ndarray
    loss_trace: list[float]
    spec: AttackSpec
    info: dict = field(default_factory=dict)

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    @property
    def l2(self) -> float:
        return float(np.sqrt(np.sum(self.delta ** 2)))

    @property
    def best_loss(self) -> float:
        return max(self.loss_trace)


# -------------------------------------------------------------------- losses


def _codec_out(model, x):
    return model.forward(x)


def loss_per_image(target: LossTarget, model, x: np.ndarray, x_adv, ref: np.ndarray | None = None) -> ad.Tensor:
    """Per-image values of ``target`` at ``x_adv``; shape (N,).

    ``ref`` is C(x) and is recomputed when omitted.
    """
    x_adv = ad.as_tensor(x_adv)
    out = _codec_out(model, x_adv)
    if target.id == "bpp-increase":
        return out.bpp if target.bpp_direction == "increase" else 1.0 - out.bpp
    rec = out.x_hat
    if target.id in ("ftda-default", "added-noises", "ftda-msssim") and ref is None:
        ref = _codec_out(model, ad.Tensor(x)).x_hat.data
    proj = luma_t if target.y_only else (lambda t: ad.as_tensor(t))
    axes = (1, 2, 3)
    if target.id == "ftda-default":
        return ad.l2norm(proj(rec) - proj(ref), axis=axes)
    if target.id == "added-noises":
        return ad.l2norm(proj(rec) - proj(ref) - (proj(x_adv) - proj(x)), axis=axes)
    if target.id == "reconstruction":
        return ad.l2norm(proj(rec) - proj(x_adv), axis=axes)
    if target.id == "ftda-msssim":
        return 1.0 - ms_ssim_t(proj(ref), proj(rec), win=target.msssim_win)
    if target.id == "reconstruction-msssim":
        return 1.0 - ms_ssim_t(proj(x_adv), proj(rec), win=target.msssim_win)
    raise ValueError(f"unknown loss target {target.id!r}")


def eval_loss(target: LossTarget | str, model, x, x_adv) -> ad.Tensor:
    """Scalar loss on the graph (summed over a batch)."""
    target = LossTarget(target) if isinstance(target, str) else target
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    xa = ad.as_tensor(x_adv)
    if xa.ndim == 3:
        xa = ad.reshape(xa, (1,) + xa.shape)
    return ad.sum_(loss_per_image(target, model, xb, xa))


class _Objective:
    """Loss values and input gradients for a batch of iterates."""

    def __init__(self, target: LossTarget, model, x: np.ndarray):
        self.target, self.model, self.x = target, model, x
        needs_ref = target.id in ("ftda-default", "added-noises", "ftda-msssim")
        self.ref = _codec_out(model, ad.Tensor(x)).x_hat.data if needs_ref else None

    def value(self, xa: np.ndarray) -> np.ndarray:
        return loss_per_image(self.target, self.model, self.x, ad.Tensor(xa), self.ref).data.copy()

    def value_and_grad(self, xa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = ad.Tensor(xa, requires_grad=True)
        per = loss_per_image(self.target, self.model, self.x, t, self.ref)
        ad.sum_(per).backward()
        g = t.grad if t.grad is not None else np.zeros_like(xa)
        return per.data.copy(), g


# ------------------------------------------------------------------- helpers


def _project(xa: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(xa, 0.0, 1.0), x - eps, x + eps)


def _per_image(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def _rms_normalize(g: np.ndarray) -> np.ndarray:
    # per-image scaling to unit root-mean-square, direction unchanged
    m = np.sqrt(np.mean(_per_image(g) ** 2, axis=1))
    m = np.where(m > 0, m, 1.0)
    return g / m[:, None, None, None]


def _finite_rows(g: np.ndarray) -> np.ndarray:
    return np.all(np.isfinite(_per_image(g)), axis=1)


class _Tracker:
    """Best-so-far bookkeeping; only strict improvements replace the best."""

    def __init__(self, x0: np.ndarray, loss0: np.ndarray):
        self.best = x0.copy()
        self.best_loss = loss0.copy()
        self.trace = [loss0.copy()]

    def update(self, xa: np.ndarray, loss: np.ndarray, active: np.ndarray) -> None:
        loss = np.where(active, loss, np.nan)
        self.trace.append(loss)
        better = active & np.isfinite(loss) & (loss > self.best_loss)
        self.best[better] = xa[better]
        self.best_loss[better] = loss[better]

    def examples(self, x: np.ndarray, spec: AttackSpec, info: list[dict] | None = None) -> list[AdversarialExample]:
        trace = np.stack(self.trace, axis=1)
        out = []
        for i in range(x.shape[0]):
            t = [float(v) for v in trace[i] if np.isfinite(v)]
            out.append(AdversarialExample(x[i].copy(), self.best[i].copy(), t, spec,
                                          dict(info[i]) if info else {}))
        return out


def _escape(g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # a zero gradient at the clean point (a norm at 0) gets a random sign kick
    dead = ~np.any(_per_image(g) != 0, axis=1)
    if np.any(dead):
        g = g.copy()
        g[dead] = rng.choice([-1.0, 1.0], size=g[dead].shape)
    return g


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ad.ShapeError("attack", x.shape, detail="expected (3,H,W) or (N,3,H,W)")
    return x, False


def _finish(examples, single):
    return examples[0] if single else examples


# ------------------------------------------------------------------ attacks


def _sign_loop(spec: AttackSpec, model, x: np.ndarray, x0: np.ndarray, escape: bool) -> _Tracker:
    obj = _Objective(spec.loss, model, x)
    rng = np.random.default_rng(spec.seed)
    xa = x0.copy()
    active = np.ones(x.shape[0], dtype=bool)
    loss, g = obj.value_and_grad(xa)
    if x0 is x:
        tracker = _Tracker(xa, loss)
    else:
        # a random start must beat the clean point to be kept
        tracker = _Tracker(x, obj.value(x))
        tracker.update(xa, loss, active)
    for it in range(spec.iterations):
        active &= _finite_rows(g)
        if escape and it == 0:
            g = _escape(g, rng)
        step = spec.step * np.sign(np.nan_to_num(g))
        xa = np.where(active[:, None, None, None], _project(xa + step, x, spec.epsilon), xa)
        if it == spec.iterations - 1:
            loss = obj.value(xa)
        else:
            loss, g = obj.value_and_grad(xa)
        tracker.update(xa, loss, active)
    return tracker


def ifgsm_attack(spec: AttackSpec, model, x):
    xb, single = _batch(x)
    tr = _sign_loop(spec, model, xb, xb, escape=True)
    return _finish(tr.examples(xb, spec), single)


def pgd_attack(spec: AttackSpec, model, x):
    xb, single = _batch(x)
    rng = np.random.default_rng(spec.seed)
    x0 = _project(xb + rng.uniform(-spec.epsilon, spec.epsilon, xb.shape), xb, spec.epsilon)
    spec_run = AttackSpec(spec.algorithm, spec.loss, spec.epsilon, spec.step, spec.iterations,
                          spec.seed + 1, spec.options)
    tr = _sign_loop(spec_run, model, xb, x0, escape=False)
    return _finish(tr.examples(xb, spec), single)


def ftda_attack(spec: AttackSpec, model, x):
    """Normalized-gradient ascent (per-pixel RMS step = step size); a step
    that fails to improve is undone and the step size halved."""
    xb, single = _batch(x)
    obj = _Objective(spec.loss, model, xb)
    rng = np.random.default_rng(spec.seed)
    cur = xb.copy()
    cur_loss, cur_g = obj.value_and_grad(cur)
    tracker = _Tracker(cur, cur_loss)
    eta = np.full(xb.shape[0], float(spec.step))
    active = np.ones(xb.shape[0], dtype=bool)
    for it in range(spec.iterations):
        active &= _finite_rows(cur_g)
        g = _escape(cur_g, rng) if it == 0 else cur_g
        prop = _project(cur + eta[:, None, None, None] * _rms_normalize(np.nan_to_num(g)), xb, spec.epsilon)
        prop = np.where(active[:, None, None, None], prop, cur)
        loss, grad = obj.value_and_grad(prop)
        tracker.update(prop, loss, active)
        ok = active & np.isfinite(loss) & (loss > cur_loss)
        cur[ok], cur_loss[ok], cur_g[ok] = prop[ok], loss[ok], grad[ok]
        eta = np.where(ok | ~active, eta, eta / 2)
    return _finish(tracker.examples(xb, spec), single)


def madc_attack(spec: AttackSpec, model, x):
    """Ascent on the target while holding the MSE proxy at its budget.

    Once MSE(x, x') reaches the budget, the attack gradient is projected
    orthogonally to the proxy gradient; after each step δ is rescaled if
    it overshoots the budget.
    """
    xb, single = _batch(x)
    budget = float(spec.options.get("proxy_budget", spec.epsilon ** 2 / 3))
    obj = _Objective(spec.loss, model, xb)
    rng = np.random.default_rng(spec.seed)
    xa = xb.copy()
    loss, g = obj.value_and_grad(xa)
    tracker = _Tracker(xa, loss)
    active = np.ones(xb.shape[0], dtype=bool)
    projected = np.zeros(xb.shape[0], dtype=int)
    for it in range(spec.iterations):
        active &= _finite_rows(g)
        g = np.nan_to_num(_escape(g, rng) if it == 0 else g)
        delta = xa - xb
        mse = np.mean(_per_image(delta) ** 2, axis=1)
        for i in np.flatnonzero(mse >= budget * (1 - 1e-9)):
            p = 2.0 * delta[i] / delta[i].size
            pp = float(np.sum(p * p))
            if pp < 1e-12:
                continue
            g[i] = project_orthogonal(g[i], p)
            projected[i] += 1
        xn = _project(xa + spec.step * _rms_normalize(g), xb, spec.epsilon)
        xn = _rescale_to_budget(xn, xb, budget)
        xa = np.where(active[:, None, None, None], xn, xa)
        if it == spec.iterations - 1:
            loss = obj.value(xa)
        else:
            loss, g = obj.value_and_grad(xa)
        tracker.update(xa, loss, active)
    info = [{"proxy_budget": budget, "projected_steps": int(k)} for k in projected]
    return _finish(tracker.examples(xb, spec, info), single)


def project_orthogonal(g: np.ndarray, p: np.ndarray) -> np.ndarray:
    """g minus its component along p."""
    pp = float(np.sum(p * p))
    if pp < 1e-12:
        return g
    return g - (float(np.sum(g * p)) / pp) * p


def _rescale_to_budget(xa: np.ndarray, x: np.ndarray, budget: float) -> np.ndarray:
    # shrinking δ toward 0 stays inside both the ε-ball and [0, 1]
    delta = xa - x
    mse = np.mean(_per_image(delta) ** 2, axis=1)
    scale = np.where(mse > budget, np.sqrt(budget / np.maximum(mse, 1e-300)), 1.0)
    return x + delta * scale[:, None, None, None]


def ssah_attack(spec: AttackSpec, model, x):
    """Sign ascent on the high-frequency Haar bands only.

    The perturbation lives in the LH/HL/HH coefficients. Coefficients are
    bounded by 2ε/3, so the pixel-space δ stays inside the ε-ball before
    the final [0, 1] clip and the LL band of δ is exactly zero.
    """
    xb, single = _batch(x)
    n, c, h, w = xb.shape
    ph, pw = h % 2, w % 2
    xp = ad.pad_reflect(xb, 0, ph, 0, pw).data if ph or pw else xb
    bands = ad.haar2d(xp).data
    hf = np.zeros_like(bands)
    hf_mask = np.zeros(bands.shape[1], dtype=bool)
    hf_mask[c:] = True  # channels [LL | LH | HL | HH], c each
    bound = 2.0 * spec.epsilon / 3.0
    rng = np.random.default_rng(spec.seed)

    def pixels(d):
        full = ad.ihaar2d(bands + d).data[:, :, :h, :w]
        return np.clip(full, 0.0, 1.0)

    obj = _Objective(spec.loss, model, xb)
    xa = xb.copy()
    loss, g = obj.value_and_grad(xa)
    tracker = _Tracker(xa, loss)
    active = np.ones(n, dtype=bool)
    for it in range(spec.iterations):
        active &= _finite_rows(g)
        gp = np.zeros_like(xp)
        gp[:, :, :h, :w] = np.nan_to_num(g)
        gb = ad.haar2d(gp).data * hf_mask[None, :, None, None]
        if it == 0:
            gb = _escape(gb, rng) * hf_mask[None, :, None, None]
        hf_new = np.clip(hf + spec.step * np.sign(gb), -bound, bound)
        hf = np.where(active[:, None, None, None], hf_new, hf)
        xa = pixels(hf)
        if it == spec.iterations - 1:
            loss = obj.value(xa)
        else:
            loss, g = obj.value_and_grad(xa)
        tracker.update(xa, loss, active)
    return _finish(tracker.examples(xb, spec), single)


# --------------------------------------------------------------------- cAdv

CADV_KNOTS = 8
CADV_RANGE = 128.0


def _hat_integral_basis(t: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """B[i, k] = integral from knots[0] to t[i] of the k-th hat function."""
    h = knots[1] - knots[0]
    t = np.clip(t, knots[0], knots[-1])[:, None]
    k = knots[None, :]
    # left half of hat k covers [k-h, k], right half [k, k+h]
    left = np.clip(t - (k - h), 0.0, h)
    right = np.clip(t - k, 0.0, h)
    area_left = np.where(k - h >= knots[0] - 1e-12, left ** 2 / (2 * h), 0.0)
    area_right = np.where(k + h <= knots[-1] + 1e-12, right - right ** 2 / (2 * h), 0.0)
    return area_left + area_right


def _cadv_knots(k: int = CADV_KNOTS) -> np.ndarray:
    return np.linspace(-1.0, 1.0, k)


def cadv_curve(t: np.ndarray, theta, knots: np.ndarray | None = None) -> ad.Tensor:
    """Monotone curve on [-1, 1] with c(-1) = -1, c(1) = 1.

    Slopes at the knots are softplus(theta)/softplus(0) and interpolate
    linearly, so theta = 0 is the identity and the curve is C¹.
    """
    knots = _cadv_knots(len(ad.as_tensor(theta).data)) if knots is None else knots
    basis = _hat_integral_basis(np.ravel(t), knots)
    total = _hat_integral_basis(np.array([knots[-1]]), knots)
    s = ad.softplus(theta) * (1.0 / np.log(2.0))
    s_col = ad.reshape(s, (-1, 1))
    num = ad.matmul(basis, s_col)
    den = ad.matmul(total, s_col)
    return ad.reshape(num / den * 2.0 - 1.0, np.shape(t))


_DEV_GRID = np.linspace(-1.0, 1.0, 513)


def cadv_deviation(theta: np.ndarray) -> float:
    """max |c(t) - t| in Lab units for one channel's control points."""
    c = cadv_curve(_DEV_GRID, ad.Tensor(theta)).data
    return float(np.max(np.abs(c - _DEV_GRID)) * CADV_RANGE)


def _shrink_to_bound(theta: np.ndarray, bound: float) -> np.ndarray:
    if max(cadv_deviation(theta[0]), cadv_deviation(theta[1])) <= bound:
        return theta
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if max(cadv_deviation(mid * theta[0]), cadv_deviation(mid * theta[1])) <= bound:
            lo = mid
        else:
            hi = mid
    return lo * theta


def _cadv_image(lab: np.ndarray, theta) -> ad.Tensor:
    """Apply the a/b curves of ``theta`` (2, K) to one Lab image (3, H, W)."""
    theta = ad.as_tensor(theta)
    chans = []
    for j in (1, 2):
        t = lab[j] / CADV_RANGE
        inside = np.abs(t) <= 1.0
        c = cadv_curve(t, theta[j - 1]) * CADV_RANGE
        # values beyond ±128 are left untouched (c(±1) = ±1 keeps this continuous)
        c = ad.add(ad.mul(c, inside.astype(float)), ad.Tensor(np.where(inside, 0.0, lab[j])))
        chans.append(ad.reshape(c, (1, 1) + t.shape))
    light = lab[0][None, None]
    return lab_to_rgb_t(light, chans[0], chans[1])


def cadv_attack(spec: AttackSpec, model, x):
    """Colour-curve attack in Lab; ε does not apply.

    Options: ``max_deviation`` (Lab units, default 20), ``lr`` (default
    0.5, ∞-norm-normalized steps on the control points).
    """
    xb, single = _batch(x)
    bound = float(spec.options.get("max_deviation", 20.0))
    lr = float(spec.options.get("lr", 0.5))
    k = int(spec.options.get("knots", CADV_KNOTS))
    rng = np.random.default_rng(spec.seed)
    obj = _Objective(spec.loss, model, xb)
    labs = [rgb_to_lab(img) for img in xb]
    thetas = np.zeros((xb.shape[0], 2, k))

    def render(th, grad: bool):
        ts = [ad.Tensor(t, requires_grad=grad) for t in th]
        imgs = ad.concat([_cadv_image(lab, t) for lab, t in zip(labs, ts)], axis=0)
        return ts, imgs

    def loss_grad(th):
        ts, imgs = render(th, True)
        per = loss_per_image(spec.loss, model, xb, imgs, obj.ref)
        ad.sum_(per).backward()
        gs = np.stack([t.grad if t.grad is not None else np.zeros((2, k)) for t in ts])
        return per.data.copy(), gs, imgs.data

    loss, g, xa = loss_grad(thetas)
    tracker = _Tracker(xa, loss)
    active = np.ones(xb.shape[0], dtype=bool)
    for it in range(spec.iterations):
        active &= np.all(np.isfinite(g.reshape(len(g), -1)), axis=1)
        g = np.nan_to_num(g)
        if it == 0:
            dead = ~np.any(g.reshape(len(g), -1) != 0, axis=1)
            g[dead] = rng.choice([-1.0, 1.0], size=g[dead].shape)
        m = np.max(np.abs(g.reshape(len(g), -1)), axis=1)
        step = g / np.where(m > 0, m, 1.0)[:, None, None]
        for i in np.flatnonzero(active):
            thetas[i] = _shrink_to_bound(thetas[i] + lr * step[i], bound)
        loss, g, xa = loss_grad(thetas)
        tracker.update(xa, loss, active)
    info = [{"theta": th.tolist(), "deviation": max(cadv_deviation(th[0]), cadv_deviation(th[1]))}
            for th in thetas]
    return _finish(tracker.examples(xb, spec, info), single)


# ------------------------------------------------------------- random noise


def noise_sigma(spec: AttackSpec) -> float:
    """σ for the noise baseline: ``options['sigma']`` or a seeded uniform draw."""
    if "sigma" in spec.options:
        return float(spec.options["sigma"])
    return float(np.random.default_rng(spec.seed).uniform(*NOISE_SIGMA_RANGE))


def random_noise_attack(spec: AttackSpec, model, x):
    """Gaussian noise clipped to the ε-ball and [0, 1]; no optimization."""
    xb, single = _batch(x)
    sigma = noise_sigma(spec)
    rng = np.random.default_rng([spec.seed, 1])
    xa = _project(xb + rng.normal(0.0, sigma, xb.shape), xb, spec.epsilon)
    loss = _Objective(spec.loss, model, xb).value(xa) if model is not None else np.zeros(len(xb))
    tr = _Tracker(xa, loss)
    return _finish(tr.examples(xb, spec, [{"sigma": sigma}] * len(xb)), single)


ATTACKS: dict[str, Callable] = {
    "ifgsm": ifgsm_attack,
    "pgd": pgd_attack,
    "ftda": ftda_attack,
    "madc": madc_attack,
    "ssah": ssah_attack,
    "cadv": cadv_attack,
    "random-noise": random_noise_attack,
}


def run_attack(spec: AttackSpec, model, x):
    return ATTACKS[spec.algorithm](spec, model, x)


def attack_defended(spec: AttackSpec, model, defense, x, defense_seed: int | None = None):
    """Attack g = T⁻¹∘C∘T instead of C (defense-aware attacker)."""
    from .defenses import DefendedCodec

    seed = spec.seed if defense_seed is None else defense_seed
    return run_attack(spec, DefendedCodec(model, defense, seed=seed), x)

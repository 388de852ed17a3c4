"""Reversible purification defenses wrapped around a codec.

A defense samples a list of actions, applies them before the codec and the
inverse actions (in reverse order) after it. Geometric actions are linear
resamplings, so they stay differentiable for defense-aware attacks.
"""

from __future__ import annotations

import hashlib
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .codecs import CodecOutput
from .imageio import load_image, save_png

log = logging.getLogger(__name__)

DEFENSE_IDS = ("none", "flip", "random-roll", "random-rotate", "color-reorder",
               "random-ensemble", "geometric-self-ensemble", "external-purifier")
ENSEMBLE_WEIGHTS = {"roll": 4, "rotate": 4, "reorder": 1}
ENSEMBLE_ACTIONS = 10
PERMUTATIONS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


class DefenseMismatch(ValueError):
    """Postprocess called with parameters from a different sample."""


class PurifierError(RuntimeError):
    pass


# ------------------------------------------------------------------ actions
#
# An action is a plain tuple so it can be logged and hashed:
#   ("flip", axes)         axes subset of (2, 3)
#   ("roll", dim, size)    dim in {2, 3}
#   ("rotate", theta, h, w)  degrees; (h, w) is the pre-rotation size
#   ("reorder", perm)


_EXACT_TRIG = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}


def _trig(theta: float) -> tuple[float, float]:
    t = float(theta) % 360.0
    if t in _EXACT_TRIG:
        return _EXACT_TRIG[t]
    r = np.deg2rad(t)
    return float(np.cos(r)), float(np.sin(r))


def _keys(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(t < 1, ((a + 2) * t - (a + 3)) * t * t + 1,
                    np.where(t < 2, ((a * t - 5 * a) * t + 8 * a) * t - 4 * a, 0.0))


def _lanczos3(t: np.ndarray) -> np.ndarray:
    return np.where(np.abs(t) < 3, np.sinc(t) * np.sinc(t / 3), 0.0)


_KERNELS = {
    # name: (tap offsets relative to floor(coordinate), weight function)
    "bilinear": ((0, 1), lambda t: np.maximum(1 - np.abs(t), 0.0)),
    "bicubic": ((-1, 0, 1, 2), _keys),
    "lanczos3": ((-2, -1, 0, 1, 2, 3), _lanczos3),
}


@lru_cache(maxsize=4)
def rotation_matrix(size: int, theta: float, interp: str = "bicubic") -> sparse.csr_matrix:
    """Rotation of a size×size square about its centre as a sparse operator.

    Output pixel p samples the input at R(-theta)(p - c) + c; taps outside
    the square are clamped to the border. Lattice angles give 0/1 weights.
    """
    taps, kern = _KERNELS[interp]
    cos, sin = _trig(theta)
    c = (size - 1) / 2.0
    ii, jj = np.mgrid[0:size, 0:size]
    di, dj = ii.ravel() - c, jj.ravel() - c
    si = np.clip(c + cos * di - sin * dj, 0, size - 1)
    sj = np.clip(c + sin * di + cos * dj, 0, size - 1)
    if theta % 90 == 0:
        si, sj = np.round(si), np.round(sj)
    i0, j0 = np.floor(si).astype(int), np.floor(sj).astype(int)
    wi = [kern(si - (i0 + o)) for o in taps]
    wj = [kern(sj - (j0 + o)) for o in taps]
    ci = [np.clip(i0 + o, 0, size - 1) * size for o in taps]
    cj = [np.clip(j0 + o, 0, size - 1) for o in taps]
    k = len(taps)
    # fixed tap count per row: build CSR arrays directly; clamped duplicates
    # and zero weights are harmless in products
    data = np.empty((size * size, k * k))
    cols = np.empty((size * size, k * k), dtype=np.int64)
    for a in range(k):
        for b in range(k):
            data[:, a * k + b] = wi[a] * wj[b]
            cols[:, a * k + b] = ci[a] + cj[b]
    # lanczos weights only approximately sum to one
    data /= data.sum(axis=1, keepdims=True)
    indptr = np.arange(0, size * size * k * k + 1, k * k, dtype=np.int64)
    return sparse.csr_matrix((data.ravel(), cols.ravel(), indptr), shape=(size * size, size * size))


def rotate_pad_size(h: int, w: int) -> int:
    return max(h, w, int(np.ceil(np.hypot(h, w))))


def _pads(h: int, w: int, d: int) -> tuple[int, int, int, int]:
    top, left = (d - h) // 2, (d - w) // 2
    return top, d - h - top, left, d - w - left


def _roll(x: ad.Tensor, dim: int, size: int) -> ad.Tensor:
    n = x.shape[dim - 4] if x.ndim == 4 else x.shape[dim - 3]
    idx = (np.arange(n) - size) % n
    key = (Ellipsis, idx, slice(None)) if dim == 2 else (Ellipsis, idx)
    return ad.getitem(x, key)


def _flip(x: ad.Tensor, axes: Sequence[int]) -> ad.Tensor:
    key = [slice(None)] * x.ndim
    for a in axes:
        key[a - 4] = slice(None, None, -1)
    return ad.getitem(x, tuple(key))


def apply_action(x, action: tuple, interp: str = "bicubic") -> ad.Tensor:
    """Forward half of an action on a (N, C, H, W) tensor."""
    x = ad.as_tensor(x)
    kind = action[0]
    if kind == "flip":
        return _flip(x, action[1])
    if kind == "roll":
        return _roll(x, action[1], action[2])
    if kind == "reorder":
        return ad.channel_select(x, list(action[1]))
    if kind == "rotate":
        theta, h, w = action[1:]
        d = rotate_pad_size(h, w)
        padded = ad.pad_reflect(x, *_pads(h, w, d))
        return ad.resample(padded, rotation_matrix(d, theta, interp), (d, d))
    raise ValueError(f"unknown action {kind!r}")


def invert_action(y, action: tuple, interp: str = "bicubic") -> ad.Tensor:
    """Inverse half: undo ``action`` on the codec output."""
    y = ad.as_tensor(y)
    kind = action[0]
    if kind == "flip":
        return _flip(y, action[1])
    if kind == "roll":
        return _roll(y, action[1], -action[2])
    if kind == "reorder":
        inv = np.argsort(action[1])
        return ad.channel_select(y, [int(i) for i in inv])
    if kind == "rotate":
        theta, h, w = action[1:]
        d = rotate_pad_size(h, w)
        back = ad.resample(y, rotation_matrix(d, (360 - theta) % 360, interp), (d, d))
        top, _, left, _ = _pads(h, w, d)
        return ad.getitem(back, (Ellipsis, slice(top, top + h), slice(left, left + w)))
    raise ValueError(f"unknown action {kind!r}")


def _shape_after(action: tuple, hw: tuple[int, int]) -> tuple[int, int]:
    if action[0] == "rotate":
        d = rotate_pad_size(*hw)
        return d, d
    return hw


# ----------------------------------------------------------------- defenses


@dataclass(frozen=True)
class Sample:
    """Realized parameters of one defense invocation."""

    defense: str
    actions: tuple
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]

    @property
    def sample_id(self) -> str:
        return hashlib.sha256(repr((self.defense, self.actions, self.in_hw)).encode()).hexdigest()[:16]


def _sample_roll(rng, hw):
    dim = int(rng.integers(2, 4))
    return ("roll", dim, int(rng.integers(0, hw[dim - 2])))


def _sample_rotate(rng, hw):
    return ("rotate", int(rng.integers(0, 360)), hw[0], hw[1])


def _sample_reorder(rng, hw):
    return ("reorder", PERMUTATIONS[int(rng.integers(0, len(PERMUTATIONS)))])


_SAMPLERS = {"roll": _sample_roll, "rotate": _sample_rotate, "reorder": _sample_reorder}


@dataclass
class Defense:
    """A (possibly randomized) reversible transform T with inverse T⁻¹.

    ``id`` selects the family. Randomized families draw fresh parameters on
    each call to :meth:`sample`.
    """

    id: str
    flip_axes: tuple[int, ...] = (2, 3)
    seed: int = 0
    interp: str = "bicubic"
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.id not in DEFENSE_IDS or self.id in ("geometric-self-ensemble", "external-purifier"):
            raise ValueError(f"{self.id!r} is not an action-list defense")
        self.rng = np.random.default_rng(self.seed)

    @property
    def randomized(self) -> bool:
        return self.id in ("random-roll", "random-rotate", "color-reorder", "random-ensemble")

    def sample(self, hw: tuple[int, int], rng: np.random.Generator | None = None) -> Sample:
        rng = self.rng if rng is None else rng
        hw = tuple(int(v) for v in hw)
        if self.id == "none":
            actions = ()
        elif self.id == "flip":
            actions = (("flip", tuple(self.flip_axes)),)
        elif self.id == "random-roll":
            actions = (_sample_roll(rng, hw),)
        elif self.id == "random-rotate":
            actions = (_sample_rotate(rng, hw),)
        elif self.id == "color-reorder":
            actions = (_sample_reorder(rng, hw),)
        elif self.id == "random-ensemble":
            actions = sample_ensemble_actions(rng, hw)
        else:
            raise ValueError(f"{self.id} has no action list")
        out = hw
        for a in actions:
            out = _shape_after(a, out)
        return Sample(self.id, actions, hw, out)

    def preprocess(self, x, sample: Sample) -> ad.Tensor:
        x = ad.as_tensor(x)
        self._check(sample, tuple(x.shape[-2:]), sample.in_hw)
        for a in sample.actions:
            x = apply_action(x, a, self.interp)
        return x

    def postprocess(self, y, sample: Sample) -> ad.Tensor:
        y = ad.as_tensor(y)
        self._check(sample, tuple(y.shape[-2:]), sample.out_hw)
        for a in reversed(sample.actions):
            y = invert_action(y, a, self.interp)
        return y

    def round_trip(self, x, sample: Sample | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        xb = x[None] if x.ndim == 3 else x
        sample = sample or self.sample(xb.shape[-2:])
        out = self.postprocess(self.preprocess(xb, sample), sample).data
        return out[0] if x.ndim == 3 else out

    def _check(self, sample: Sample, got: tuple, want: tuple) -> None:
        if sample.defense != self.id:
            raise DefenseMismatch(f"sample {sample.sample_id} belongs to {sample.defense!r}, not {self.id!r}")
        if tuple(got) != tuple(want):
            raise DefenseMismatch(f"sample {sample.sample_id} expects spatial size {want}, got {got}")


def sample_ensemble_actions(rng: np.random.Generator, hw: tuple[int, int],
                            n: int = ENSEMBLE_ACTIONS) -> tuple:
    kinds = list(ENSEMBLE_WEIGHTS)
    p = np.array([ENSEMBLE_WEIGHTS[k] for k in kinds], dtype=float)
    p /= p.sum()
    actions = []
    for _ in range(n):
        kind = kinds[int(rng.choice(len(kinds), p=p))]
        a = _SAMPLERS[kind](rng, hw)
        actions.append(a)
        hw = _shape_after(a, hw)
    return tuple(actions)


def _dihedral_actions(index: int) -> tuple:
    # index = 4 * flip + k, where k counts quarter turns
    f, k = divmod(index, 4)
    acts = [("flip", (3,))] if f else []
    if k:
        acts.append(("rot90", k))
    return tuple(acts)


def _rot90(x: ad.Tensor, k: int) -> ad.Tensor:
    # exact quarter turn as an index map on the last two axes
    h, w = x.shape[-2:]
    idx = np.rot90(np.arange(h * w).reshape(h, w), k)
    flat = ad.reshape(x, x.shape[:-2] + (h * w,))
    out = ad.getitem(flat, (Ellipsis, idx.ravel()))
    return ad.reshape(out, x.shape[:-2] + idx.shape)


def _apply_dihedral(x, index: int) -> ad.Tensor:
    x = ad.as_tensor(x)
    for a in _dihedral_actions(index):
        x = _flip(x, a[1]) if a[0] == "flip" else _rot90(x, a[1])
    return x


def _invert_dihedral(y, index: int) -> ad.Tensor:
    y = ad.as_tensor(y)
    for a in reversed(_dihedral_actions(index)):
        y = _flip(y, a[1]) if a[0] == "flip" else _rot90(y, -a[1])
    return y


@dataclass
class ExternalPurifier:
    """Shells out to ``command`` with input/output PNG paths.

    ``command`` is a string or argv list; ``{input}`` and ``{output}`` are
    substituted, otherwise both paths are appended. ``fallback`` is "abort"
    (raise) or "skip" (pass the image through unchanged).
    """

    command: str | Sequence[str]
    timeout: float = 60.0
    fallback: str = "abort"
    failures: int = 0
    id: str = "external-purifier"

    def argv(self, inp: Path, out: Path) -> list[str]:
        parts = shlex.split(self.command) if isinstance(self.command, str) else list(self.command)
        if any("{input}" in p or "{output}" in p for p in parts):
            return [p.format(input=inp, output=out) for p in parts]
        return parts + [str(inp), str(out)]

    def purify(self, x: np.ndarray) -> np.ndarray:
        """Purify one (3, H, W) image."""
        with tempfile.TemporaryDirectory() as tmp:
            inp, out = Path(tmp) / "in.png", Path(tmp) / "out.png"
            save_png(inp, x)
            argv = self.argv(inp, out)
            try:
                subprocess.run(argv, check=True, timeout=self.timeout, capture_output=True)
                y = load_image(out)
                if y.shape != x.shape:
                    raise PurifierError(f"purifier changed shape {x.shape} -> {y.shape}")
                return y
            except (OSError, subprocess.SubprocessError, PurifierError, ValueError) as exc:
                self.failures += 1
                msg = f"external purifier failed: {shlex.join(argv)}: {exc}"
                if self.fallback == "skip":
                    log.warning("%s; passing image through", msg)
                    return np.asarray(x, dtype=np.float64)
                raise PurifierError(msg) from exc

    def preprocess(self, x) -> ad.Tensor:
        # straight-through: forward value is purified, gradient is identity
        x = ad.as_tensor(x)
        data = x.data if x.ndim == 4 else x.data[None]
        purified = np.stack([self.purify(img) for img in data]).reshape(x.shape)
        return ad.add(x, ad.Tensor(purified - x.data))


def make_defense(spec, seed: int = 0):
    """Build a defense from an id string or a mapping with an ``id`` key."""
    if isinstance(spec, Defense | ExternalPurifier | GeometricSelfEnsemble):
        return spec
    if isinstance(spec, str):
        spec = {"id": spec}
    spec = dict(spec)
    did = spec.pop("id")
    if did == "external-purifier":
        return ExternalPurifier(**spec)
    if did == "geometric-self-ensemble":
        return GeometricSelfEnsemble()
    if "flip_axes" in spec:
        spec["flip_axes"] = tuple(spec["flip_axes"])
    return Defense(did, seed=spec.pop("seed", seed), **spec)


@dataclass
class GeometricSelfEnsemble:
    """Pick the dihedral variant whose defended output has the lowest MSE."""

    id: str = "geometric-self-ensemble"


@dataclass
class DefendedCodec:
    """g(x) = T⁻¹(C(T(x))). Randomized defenses resample on every call.

    ``last_samples`` holds the realized parameters of the latest call, one
    per image, so evaluations can record them.
    """

    codec: object
    defense: object
    seed: int = 0
    last_samples: list = field(default_factory=list)

    def __post_init__(self):
        self.defense = make_defense(self.defense, self.seed)
        self.rng = np.random.default_rng(self.seed)
        self.id = f"{getattr(self.codec, 'id', 'codec')}+{self.defense.id}"

    def forward(self, x, mode=None, rng=None, params=None) -> CodecOutput:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        d = self.defense
        if isinstance(d, ExternalPurifier):
            self.last_samples = [None] * x.shape[0]
            return self.codec.forward(d.preprocess(x), mode, rng, params)
        if isinstance(d, GeometricSelfEnsemble):
            return self._self_ensemble(x, mode, rng, params)
        outs, rates, samples = [], [], []
        for i in range(x.shape[0]):
            xi = ad.getitem(x, slice(i, i + 1))
            s = d.sample(x.shape[-2:], self.rng)
            o = self.codec.forward(d.preprocess(xi, s), mode, rng, params)
            outs.append(d.postprocess(o.x_hat, s))
            rates.append(o.bpp)
            samples.append(s)
        self.last_samples = samples
        return CodecOutput(ad.concat(outs, axis=0), ad.concat(rates, axis=0))

    def _self_ensemble(self, x, mode, rng, params) -> CodecOutput:
        xd = x.data
        best = np.full(x.shape[0], np.inf)
        choice = np.zeros(x.shape[0], dtype=int)
        for t in range(8):
            o = self.codec.forward(_apply_dihedral(xd, t), mode, rng, params)
            err = ((_invert_dihedral(o.x_hat, t).data - xd) ** 2).mean(axis=(1, 2, 3))
            better = err < best
            best[better], choice[better] = err[better], t
        outs, rates = [], []
        for i in range(x.shape[0]):
            xi = ad.getitem(x, slice(i, i + 1))
            o = self.codec.forward(_apply_dihedral(xi, int(choice[i])), mode, rng, params)
            outs.append(_invert_dihedral(o.x_hat, int(choice[i])))
            rates.append(o.bpp)
        self.last_samples = [int(c) for c in choice]
        return CodecOutput(ad.concat(outs, axis=0), ad.concat(rates, axis=0))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self.forward(x[None] if x.ndim == 3 else x).x_hat.data
        return out[0] if x.ndim == 3 else out


def geometric_self_ensemble(model, x) -> tuple[int, np.ndarray]:
    """Returns (chosen dihedral index, defended reconstruction) for one image."""
    dc = DefendedCodec(model, GeometricSelfEnsemble())
    out = dc(np.asarray(x, dtype=np.float64))
    return dc.last_samples[0], out

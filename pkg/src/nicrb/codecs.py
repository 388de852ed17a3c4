"""Toy differentiable neural image codecs.

Two architectures are provided:

``factorized``
    four stride-2 convolutions down, four transposed convolutions up, and a
    per-channel piecewise-linear CDF as the entropy model of the latent.
``hyperprior``
    the same transforms plus a small hyper-latent (itself coded with a
    piecewise-linear CDF) that predicts a Gaussian scale for every latent.

Both expose ``reconstruct`` and ``bpp`` that are differentiable with
respect to the input image, and are trained on ``lam * bpp + MSE``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import RDPoint, get_metric

log = logging.getLogger(__name__)

MAGIC = b"NICRB1"
FORMAT_VERSION = 1
PROB_FLOOR = 1e-9
ARCHITECTURES = ("factorized", "hyperprior")
DEFAULT_LAMBDAS = (0.001, 0.005, 0.02, 0.08)


class CodecOutput(NamedTuple):
    x_hat: ad.Tensor
    bpp: ad.Tensor  # one value per image


class NonFiniteInput(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(arch: str, seed: int, channels: int = 32, latent: int = 32,
                hyper: int = 16, kernel: int = 5, knots: int = 33, gdn: bool = True) -> dict[str, np.ndarray]:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    k = kernel
    enc = [3, channels, channels, channels, latent]
    for i in range(4):
        cin, cout = enc[i], enc[i + 1]
        p[f"enc{i}.w"] = _he(rng, (cout, cin, k, k), cin * k * k)
        p[f"enc{i}.b"] = np.zeros(cout)
    dec = [latent, channels, channels, channels, 3]
    for i in range(4):
        cin, cout = dec[i], dec[i + 1]
        p[f"dec{i}.w"] = _he(rng, (cin, cout, k, k), cin * k * k / 4)
        p[f"dec{i}.b"] = np.zeros(cout)
    if gdn:
        # generalized divisive normalization after the three inner layers;
        # gamma = g*g and beta = b*b + 1e-6 keep the denominator positive
        for side in ("enc", "dec"):
            for i in range(3):
                p[f"{side}{i}.gdn.g"] = np.sqrt(0.1) * np.eye(channels)
                p[f"{side}{i}.gdn.b"] = np.ones(channels)
    # start with latents well above the quantization step
    p["enc3.w"] *= 8.0
    p["dec0.w"] /= 8.0
    p["dec3.w"] *= 0.1
    p["dec3.b"] += 0.5
    grid = np.linspace(-1, 1, knots - 1)
    if arch == "factorized":
        p["cdf.logits"] = np.tile(-4.0 * np.abs(grid), (latent, 1))
    else:
        p["ha0.w"] = _he(rng, (hyper, latent, 3, 3), latent * 9)
        p["ha0.b"] = np.zeros(hyper)
        p["ha1.w"] = _he(rng, (hyper, hyper, 3, 3), hyper * 9)
        p["ha1.b"] = np.zeros(hyper)
        p["hs0.w"] = _he(rng, (hyper, hyper, 3, 3), hyper * 9 / 4)
        p["hs0.b"] = np.zeros(hyper)
        p["hs1.w"] = 0.1 * _he(rng, (latent, hyper, 3, 3), hyper * 9)
        p["hs1.b"] = np.full(latent, 1.0)
        p["cdf.logits"] = np.tile(-4.0 * np.abs(grid), (hyper, 1))
    return p


@dataclass
class CodecModel:
    """Parameters plus configuration of one toy codec.

    ``quant_mode`` selects how the latent is quantized when the codec is
    used as a black box: ``ste`` rounds (identity gradient), ``noise``
    adds seeded uniform noise. Training always uses noise.
    """

    arch: str
    params: dict[str, np.ndarray]
    lam: float = 0.0
    seed: int = 0
    id: str = ""
    quant_mode: str = "ste"
    bitrate_label: str = ""
    symbol_range: float = 16.0
    noise_seed: int = 0
    underflow_count: int = 0
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if not self.id:
            self.id = f"{self.arch}-{self.lam:g}"

    @property
    def factor(self) -> int:
        return 16 if self.arch == "factorized" else 32

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, trainable: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=trainable) for k, v in self.params.items()}

    # -- forward -------------------------------------------------------------

    def forward(self, x, mode: str | None = None, rng: np.random.Generator | None = None,
                params: dict[str, ad.Tensor] | None = None) -> CodecOutput:
        """Run the full codec on an NCHW tensor in [0, 1]."""
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteInput("codec input contains non-finite values")
        mode = mode or self.quant_mode
        # seeded black-box noise is per image, so results do not depend on batch makeup
        shared = mode == "noise" and rng is None
        if shared:
            rng = np.random.default_rng(self.noise_seed)
        p = params if params is not None else self.tensors()
        n, _, h, w = x.shape
        ph, pw = (-h) % self.factor, (-w) % self.factor
        xp = ad.pad_reflect(x, 0, ph, 0, pw) if ph or pw else x

        y = xp - 0.5
        for i in range(4):
            y = ad.conv2d(y, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=2)
            if i < 3:
                y = self._act(y, p, f"enc{i}", inverse=False)
        y_hat = self._quantize(y, mode, rng, shared)
        bits = self._latent_bits(y, y_hat, p, mode, rng, shared)

        r = y_hat
        for i in range(4):
            r = ad.conv_transpose2d(r, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=2, padding=2, output_padding=1)
            if i < 3:
                r = self._act(r, p, f"dec{i}", inverse=True)
        if ph or pw:
            r = r[:, :, :h, :w]
        x_hat = ad.clamp(r, 0.0, 1.0)
        return CodecOutput(x_hat, bits * (1.0 / (h * w)))

    @staticmethod
    def _act(v, p, name: str, inverse: bool) -> ad.Tensor:
        if f"{name}.gdn.g" not in p:
            return ad.leaky_relu(v)
        g, b = p[f"{name}.gdn.g"], p[f"{name}.gdn.b"]
        c = g.shape[0]
        gamma = ad.reshape(g * g, (c, c, 1, 1))
        beta = b * b + 1e-6
        norm = ad.sqrt(ad.conv2d(v * v, gamma, beta))
        return v * norm if inverse else v / norm

    @staticmethod
    def _quantize(v, mode, rng, shared=False):
        if mode == "ste":
            return ad.round_ste(v)
        if mode == "noise":
            return ad.uniform_noise(v, rng, shared)
        raise ValueError(f"unknown quantization mode {mode!r}")

    def _floor(self, prob: ad.Tensor) -> ad.Tensor:
        low = int(np.count_nonzero(prob.data < PROB_FLOOR))
        if low:
            self.underflow_count += low
            log.debug("%s: %d symbol probabilities clamped to %g", self.id, low, PROB_FLOOR)
        return ad.clamp(prob, PROB_FLOOR, None)

    def _pwl_bits(self, v_hat, logits) -> ad.Tensor:
        lim = self.symbol_range
        prob = ad.pwl_cdf(v_hat + 0.5, logits, -lim, lim) - ad.pwl_cdf(v_hat - 0.5, logits, -lim, lim)
        return ad.sum_(ad.log(self._floor(prob)), axis=(1, 2, 3)) * (-1.0 / np.log(2.0))

    def _latent_bits(self, y, y_hat, p, mode, rng, shared=False) -> ad.Tensor:
        if self.arch == "factorized":
            return self._pwl_bits(y_hat, p["cdf.logits"])
        z = ad.leaky_relu(ad.conv2d(ad.abs_(y), p["ha0.w"], p["ha0.b"], stride=1, padding=1))
        z = ad.conv2d(z, p["ha1.w"], p["ha1.b"], stride=2, padding=1)
        z_hat = self._quantize(z, mode, rng, shared)
        z_bits = self._pwl_bits(z_hat, p["cdf.logits"])
        s = ad.leaky_relu(ad.conv_transpose2d(z_hat, p["hs0.w"], p["hs0.b"], stride=2, padding=1,
                                              output_padding=1))
        scale = ad.softplus(ad.conv2d(s, p["hs1.w"], p["hs1.b"], stride=1, padding=1)) + 0.11
        mag = ad.abs_(y_hat)
        prob = ad.normal_cdf((0.5 - mag) / scale) - ad.normal_cdf((-0.5 - mag) / scale)
        y_bits = ad.sum_(ad.log(self._floor(prob)), axis=(1, 2, 3)) * (-1.0 / np.log(2.0))
        return y_bits + z_bits

    # -- numpy conveniences ----------------------------------------------------

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return reconstruct(self, x)


class IdentityCodec:
    """C(x) = x with zero rate; handy as a reference point."""

    id = "identity"

    def forward(self, x, mode=None, rng=None, params=None) -> CodecOutput:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        return CodecOutput(x, ad.Tensor(np.zeros(x.shape[0])))

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64)


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    return x, False


def reconstruct(model: CodecModel, x) -> np.ndarray:
    """C(x) as an array with the input's shape."""
    xb, single = _batched(x)
    out = model.forward(xb).x_hat.data
    return out[0] if single else out


def bpp(model: CodecModel, x):
    """Latent rate in bits per pixel (float for one image, array for a batch)."""
    xb, single = _batched(x)
    out = model.forward(xb).bpp.data
    return float(out[0]) if single else out


# ---------------------------------------------------------------- training


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _random_crops(corpus: Sequence[np.ndarray], rng: np.random.Generator, batch: int, crop: int) -> np.ndarray:
    out = np.empty((batch, 3, crop, crop))
    for b in range(batch):
        img = corpus[rng.integers(len(corpus))]
        _, h, w = img.shape
        top = rng.integers(0, h - crop + 1)
        left = rng.integers(0, w - crop + 1)
        patch = img[:, top:top + crop, left:left + crop]
        if rng.random() < 0.5:
            patch = patch[:, :, ::-1]
        out[b] = patch
    return out


def rd_loss(model: CodecModel, params, xb: np.ndarray, lam: float, rng) -> tuple[ad.Tensor, float, float]:
    out = model.forward(ad.Tensor(xb), mode="noise", rng=rng, params=params)
    dist = ad.mean((out.x_hat - xb) ** 2)
    rate = ad.mean(out.bpp)
    return rate * lam + dist, float(rate.data), float(dist.data)


def train(model: CodecModel, corpus: Sequence[np.ndarray], lam: float | None = None, steps: int = 1000,
          batch: int = 8, crop: int = 64, lr: float = 3e-3, seed: int | None = None,
          log_every: int = 0, checkpoint_every: int = 50) -> CodecModel:
    """Minimise ``lam * bpp + MSE`` with Adam on random crops of ``corpus``.

    Returns a new model; the input model is left untouched. If the loss
    becomes non-finite, training stops and the last good parameters are
    returned with ``manifest['diverged'] = True``.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    if steps <= 0:
        raise ValueError("steps must be positive")
    lam = model.lam if lam is None else lam
    seed = model.seed if seed is None else seed
    crop = min(crop, min(min(img.shape[1:]) for img in corpus))
    rng = np.random.default_rng(seed + 7919)
    params = {k: v.copy() for k, v in model.params.items()}
    good = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, lr)
    # fixed evaluation batch for the before/after comparison
    probe = _random_crops(corpus, np.random.default_rng(seed + 1), batch, crop)
    probe_rng = lambda: np.random.default_rng(seed + 2)  # noqa: E731
    init_loss = float(rd_loss(model, model.tensors(), probe, lam, probe_rng())[0].data)
    history = []
    diverged = False
    for step in range(steps):
        xb = _random_crops(corpus, rng, batch, crop)
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        loss, rate, dist = rd_loss(model, tensors, xb, lam, rng)
        if not np.isfinite(loss.data):
            diverged = True
            log.warning("%s: non-finite loss at step %d, restoring last good parameters", model.id, step)
            params = good
            break
        ad.backward(loss)
        grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            diverged = True
            params = good
            break
        # cosine decay to 10% of the base rate
        frac = step / steps
        opt.step(params, grads, lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac))))
        if (step + 1) % checkpoint_every == 0:
            good = {k: v.copy() for k, v in params.items()}
        if log_every and (step + 1) % log_every == 0:
            log.info("%s step %d: loss %.5f bpp %.4f mse %.6f", model.id, step + 1, float(loss.data), rate, dist)
            history.append({"step": step + 1, "loss": float(loss.data), "bpp": rate, "mse": dist})
    trained = copy.copy(model)
    trained.params = params
    trained.lam = lam
    trained.seed = seed
    trained.underflow_count = 0
    final_loss = float(rd_loss(trained, trained.tensors(), probe, lam, probe_rng())[0].data)
    trained.manifest = {
        "seed": seed, "lambda": lam, "steps": steps, "batch": batch, "crop": crop, "lr": lr,
        "initial_loss": init_loss, "final_loss": final_loss, "diverged": diverged,
        "corpus_size": len(corpus), "history": history,
    }
    return trained


def train_family(arch: str, corpus: Sequence[np.ndarray], lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                 seed: int = 0, **kwargs) -> list[CodecModel]:
    """One model per rate-distortion weight, all from the same initialization."""
    models = []
    for i, lam in enumerate(lambdas):
        base = CodecModel(arch, init_params(arch, seed), lam=lam, seed=seed,
                          id=f"{arch}-q{len(lambdas) - i}", bitrate_label=f"q{len(lambdas) - i}")
        models.append(train(base, corpus, lam=lam, seed=seed, **kwargs))
    return models


# ------------------------------------------------------------- checkpoints


def save(model: CodecModel, path) -> Path:
    """Write the binary checkpoint and a JSON manifest next to it."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION, "arch": model.arch, "id": model.id, "lambda": model.lam,
        "seed": model.seed, "quant_mode": model.quant_mode, "bitrate_label": model.bitrate_label,
        "symbol_range": model.symbol_range, "noise_seed": model.noise_seed, "params": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(blobs)
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(payload)
    manifest = dict(model.manifest)
    manifest.update({"checkpoint": path.name, "arch": model.arch, "id": model.id, "lambda": model.lam,
                     "seed": model.seed, "num_params": model.num_params(),
                     "sha256": hashlib.sha256(payload).hexdigest()})
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def load(path) -> CodecModel:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC) + 1) != MAGIC + b"\n":
            raise ValueError(f"{path}: not a NICRB1 checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        payload = f.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    params = {}
    for e in header["params"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    manifest = {}
    mpath = path.with_suffix(".json")
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    return CodecModel(header["arch"], params, lam=header["lambda"], seed=header["seed"], id=header["id"],
                      quant_mode=header["quant_mode"], bitrate_label=header.get("bitrate_label", ""),
                      symbol_range=header["symbol_range"], noise_seed=header.get("noise_seed", 0),
                      manifest=manifest)


# --------------------------------------------------------------- RD curves


@dataclass
class RDCurve:
    points: list[RDPoint]
    flat: bool = False

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]


def rd_curve(models: Sequence[CodecModel], corpus: Sequence[np.ndarray], metric="psnr") -> RDCurve:
    """Mean (bpp, quality) per model over the corpus, sorted by bpp."""
    if len(models) < 2:
        raise ValueError("an RD curve needs at least 2 models")
    m = get_metric(metric)
    batch = np.stack(corpus)
    points = []
    for model in models:
        out = model.forward(batch)
        rec = out.x_hat.data
        q = float(np.mean([m(x, r) for x, r in zip(batch, rec)]))
        points.append(RDPoint(float(np.mean(out.bpp.data)), q, m.id))
    points.sort(key=lambda p: (p.bpp, p.quality))
    qs = [p.quality for p in points]
    return RDCurve(points, flat=bool(np.ptp(qs) < 1e-12))


Codec = Callable[[np.ndarray], np.ndarray]

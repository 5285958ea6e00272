"""Conditional variational U-Net generator and patch discriminator.

The encoder maps the 2.5D DWI stack plus condition channels to a latent
Gaussian; the sampled code is spatially broadcast, concatenated with the
inputs and a coordinate grid, and decoded by a U-Net into one imputed slice.
A conditional 3-block discriminator provides the adversarial term. Training
math is exact reverse-mode autodiff from this package; no framework.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, CorruptError, FormatError, IoError, NumericalError, ShapeError, ValidationError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

CHECKPOINT_MAGIC = b"FOVX0001"

SHELL_B0 = "b0"
SHELL_WEIGHTED = "weighted"


@dataclass(frozen=True)
class Hyper:
    """Architecture and loss configuration. The defaults are the desk-scale
    model; paper_scale() returns the 256x256 preset."""

    z_dim: int = 32
    base_channels: int = 32
    depth: int = 4
    x_channels: int = 11
    cond_channels: int = 6
    lambda_rec: float = 100.0
    lambda_kl: float = 1.0
    lambda_gan: float = 1.0

    @staticmethod
    def paper_scale() -> "Hyper":
        return Hyper(z_dim=64, base_channels=64)

    def to_dict(self) -> dict:
        return {
            "z_dim": self.z_dim,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "x_channels": self.x_channels,
            "cond_channels": self.cond_channels,
            "lambda_rec": self.lambda_rec,
            "lambda_kl": self.lambda_kl,
            "lambda_gan": self.lambda_gan,
        }

    @staticmethod
    def from_dict(d: dict) -> "Hyper":
        return Hyper(
            z_dim=int(d["z_dim"]),
            base_channels=int(d["base_channels"]),
            depth=int(d["depth"]),
            x_channels=int(d["x_channels"]),
            cond_channels=int(d["cond_channels"]),
            lambda_rec=float(d["lambda_rec"]),
            lambda_kl=float(d["lambda_kl"]),
            lambda_gan=float(d["lambda_gan"]),
        )


@dataclass
class LatentCode:
    mu: ad.Tensor
    log_var: ad.Tensor  # already clamped to [LOGVAR_MIN, LOGVAR_MAX]
    z: ad.Tensor
    eps: np.ndarray


def _check_finite(t: ad.Tensor, label: str):
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite activation at {label}")


class _Store:
    """Ordered parameter registry shared by the three subnetworks."""

    def __init__(self, seed, dtype):
        self.params = {}
        self.seed = seed
        self.dtype = dtype
        self._counter = 0

    def _rng(self):
        self._counter += 1
        return np.random.default_rng(np.random.SeedSequence((self.seed, self._counter)))

    def tensor(self, name, data):
        t = ad.Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name}")
        self.params[name] = t
        return t

    def conv(self, name, cin, cout, k, std=None):
        fan_in = cin * k * k
        if std is None:
            std = np.sqrt(2.0 / (1.04 * fan_in))  # He for leaky slope 0.2
        w = self.tensor(f"{name}.w", self._rng().normal(0.0, std, (cout, cin, k, k)))
        b = self.tensor(f"{name}.b", np.zeros(cout))
        return w, b

    def linear(self, name, din, dout, std):
        w = self.tensor(f"{name}.w", self._rng().normal(0.0, std, (din, dout)))
        b = self.tensor(f"{name}.b", np.zeros(dout))
        return w, b

    def inorm(self, name, c):
        g = self.tensor(f"{name}.g", np.ones(c))
        b = self.tensor(f"{name}.b", np.zeros(c))
        return g, b


def coordinate_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(2, H, W): row and column positions mapped linearly onto [-1, 1]."""
    rows = np.linspace(-1.0, 1.0, h, dtype=dtype) if h > 1 else np.zeros(1, dtype=dtype)
    cols = np.linspace(-1.0, 1.0, w, dtype=dtype) if w > 1 else np.zeros(1, dtype=dtype)
    g = np.empty((2, h, w), dtype=dtype)
    g[0] = rows[:, None]
    g[1] = cols[None, :]
    return g


class ImputationModel:
    """One shell's generator + discriminator with all parameters."""

    def __init__(self, shell: str, hyper: Hyper = Hyper(), seed: int = 0, dtype=np.float32):
        if shell not in (SHELL_B0, SHELL_WEIGHTED):
            raise ValidationError(f"shell must be '{SHELL_B0}' or '{SHELL_WEIGHTED}', got {shell!r}")
        self.shell = shell
        self.hyper = hyper
        self.dtype = dtype
        self.logvar_clamp_events = 0
        st = _Store(seed, dtype)
        hc = hyper.base_channels
        cin = hyper.x_channels + hyper.cond_channels

        self.enc = []
        widths = [cin] + [hc * (2**i) for i in range(hyper.depth)]
        for i in range(hyper.depth):
            conv = st.conv(f"enc{i}", widths[i], widths[i + 1], 3)
            norm = st.inorm(f"enc{i}.n", widths[i + 1])
            self.enc.append((conv, norm))
        feat = widths[-1]
        self.head_mu = st.linear("mu", feat, hyper.z_dim, std=0.01)
        self.head_lv = st.linear("lv", feat, hyper.z_dim, std=0.01)

        dec_in = hyper.z_dim + cin + 2
        self.dec_in_channels = dec_in
        self.down = []
        dwidths = [dec_in] + [hc * (2**i) for i in range(hyper.depth)]
        for i in range(hyper.depth):
            conv = st.conv(f"down{i}", dwidths[i], dwidths[i + 1], 3)
            norm = st.inorm(f"down{i}.n", dwidths[i + 1])
            self.down.append((conv, norm))
        self.up = []
        for i in range(hyper.depth - 1, -1, -1):
            skip = dwidths[i]
            cout = dwidths[i + 1] // 2 if i > 0 else hc
            conv = st.conv(f"up{i}", dwidths[i + 1] + skip, cout, 3)
            norm = st.inorm(f"up{i}.n", cout)
            self.up.append((conv, norm))
        self.out_conv = st.conv("out", hc, 1, 1, std=np.sqrt(1.0 / hc))

        dcin = 1 + hyper.cond_channels
        self.disc = []
        dw = [dcin, hc, hc * 2, hc * 4]
        for i in range(3):
            conv = st.conv(f"disc{i}", dw[i], dw[i + 1], 3)
            norm = st.inorm(f"disc{i}.n", dw[i + 1]) if i > 0 else None
            self.disc.append((conv, norm))
        self.disc_out = st.conv("disc_out", dw[3], 1, 3, std=np.sqrt(1.0 / (dw[3] * 9)))

        self._store = st

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> dict:
        return dict(self._store.params)

    def parameters(self) -> list:
        return list(self._store.params.values())

    def generator_parameters(self) -> list:
        return [t for n, t in self._store.params.items() if not n.startswith("disc")]

    def discriminator_parameters(self) -> list:
        return [t for n, t in self._store.params.items() if n.startswith("disc")]

    # -- forward ------------------------------------------------------------

    def _block(self, t, conv, norm, stride, label):
        w, b = conv
        t = ad.conv2d(t, w, b, stride=stride, pad=1)
        if norm is not None:
            g, bb = norm
            t = ad.instance_norm(t, g, bb)
        t = ad.leaky_relu(t, 0.2)
        _check_finite(t, label)
        return t

    def _as_tensor(self, a):
        return a if isinstance(a, ad.Tensor) else ad.Tensor(np.asarray(a, dtype=self.dtype))

    def encode(self, x_plus, cond, eps=None) -> LatentCode:
        """x_plus (N,11,H,W), cond (N,cond,H,W) -> latent code. eps None
        means deterministic inference (eps = 0)."""
        x_plus = self._as_tensor(x_plus)
        cond = self._as_tensor(cond)
        t = ad.concat([x_plus, cond], axis=1)
        for i, (conv, norm) in enumerate(self.enc):
            t = self._block(t, conv, norm, 2, f"encoder block {i}")
        g = ad.global_avg_pool(t)
        mu = ad.linear(g, *self.head_mu)
        lv_raw = ad.linear(g, *self.head_lv)
        self.logvar_clamp_events += int((np.abs(lv_raw.data) >= LOGVAR_MAX).sum())
        lv = ad.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
        if eps is None:
            eps = np.zeros(mu.shape, dtype=self.dtype)
        eps = np.asarray(eps, dtype=self.dtype).reshape(mu.shape)
        std = ad.exp(ad.mul(lv, ad.Tensor(np.asarray(0.5, dtype=self.dtype))))
        z = ad.add(mu, ad.mul(std, ad.Tensor(eps)))
        _check_finite(z, "latent head")
        return LatentCode(mu=mu, log_var=lv, z=z, eps=eps)

    def build_decoder_stack(self, z, x_plus, cond):
        """Broadcast z over H, W and concatenate x_plus, cond and the
        coordinate grid: (N, Z+x+cond+2, H, W)."""
        x_plus = self._as_tensor(x_plus)
        cond = self._as_tensor(cond)
        z = z if isinstance(z, ad.Tensor) else ad.Tensor(np.asarray(z, dtype=self.dtype))
        n, _, h, w = x_plus.shape
        zt = ad.broadcast_hw(z, h, w)
        coords = np.broadcast_to(coordinate_grid(h, w, self.dtype)[None], (n, 2, h, w))
        return ad.concat([zt, x_plus, cond, ad.Tensor(coords.copy())], axis=1)

    def decode(self, stack) -> ad.Tensor:
        """U-Net over the broadcast stack -> (N,1,H,W) in (0,1)."""
        stack = self._as_tensor(stack)
        n, c, h, w = stack.shape
        if c != self.dec_in_channels:
            raise ShapeError(f"decoder expects {self.dec_in_channels} channels, got {c}")
        div = 2**self.hyper.depth
        if h % div or w % div:
            raise ShapeError(f"spatial dims ({h},{w}) not divisible by 2^depth = {div}")
        feats = [stack]
        t = stack
        for i, (conv, norm) in enumerate(self.down):
            t = self._block(t, conv, norm, 2, f"decoder down block {i}")
            feats.append(t)
        for j, (conv, norm) in enumerate(self.up):
            skip = feats[self.hyper.depth - 1 - j]
            t = ad.concat([ad.upsample2x(t), skip], axis=1)
            t = self._block(t, conv, norm, 1, f"decoder up block {j}")
        w_, b_ = self.out_conv
        out = ad.sigmoid(ad.conv2d(t, w_, b_, stride=1, pad=0))
        _check_finite(out, "decoder output")
        return out

    def generate(self, x_plus, cond, eps=None):
        """Full generator pass. Returns (pred (N,1,H,W) Tensor, LatentCode)."""
        code = self.encode(x_plus, cond, eps)
        stack = self.build_decoder_stack(code.z, x_plus, cond)
        return self.decode(stack), code

    def discriminate(self, slice_t, cond) -> ad.Tensor:
        """(N,1,H,W) x (N,cond,H,W) -> (N,1,H/8,W/8) patch logits."""
        slice_t = self._as_tensor(slice_t)
        cond = self._as_tensor(cond)
        t = ad.concat([slice_t, cond], axis=1)
        for i, (conv, norm) in enumerate(self.disc):
            t = self._block(t, conv, norm, 2, f"discriminator block {i}")
        w, b = self.disc_out
        return ad.conv2d(t, w, b, stride=1, pad=1)


# -- single-sample channel-last wrappers -------------------------------------


def _chw(a):
    return np.transpose(np.asarray(a), (2, 0, 1))[None]


def encode(model: ImputationModel, x_plus_hw, cond_hw, eps=None) -> LatentCode:
    """Channel-last single-sample encode: x (H,W,11), cond (H,W,cond)."""
    e = None if eps is None else np.asarray(eps).reshape(1, -1)
    return model.encode(_chw(x_plus_hw), _chw(cond_hw), e)


def broadcast_and_concat(z, x_plus_hw, cond_hw) -> np.ndarray:
    """(Z,) + (H,W,11) + (H,W,cond) -> (H, W, Z+11+cond+2) with coordinate
    channels appended."""
    z = np.asarray(z).reshape(-1)
    h, w = np.asarray(x_plus_hw).shape[:2]
    zt = np.broadcast_to(z[:, None, None], (z.size, h, w))
    stack = np.concatenate([zt, _chw(x_plus_hw)[0], _chw(cond_hw)[0], coordinate_grid(h, w, np.asarray(x_plus_hw).dtype)], axis=0)
    return np.transpose(stack, (1, 2, 0))


def decode(model: ImputationModel, stack_hwc) -> np.ndarray:
    """Channel-last single-sample decode -> (H,W,1)."""
    out = model.decode(_chw(stack_hwc))
    return np.transpose(out.data[0], (1, 2, 0))


def discriminate(model: ImputationModel, slice_hw1, cond_hw) -> np.ndarray:
    out = model.discriminate(_chw(slice_hw1), _chw(cond_hw))
    return np.transpose(out.data[0], (1, 2, 0))


# -- losses -------------------------------------------------------------------


def kl_divergence(code: LatentCode) -> ad.Tensor:
    """Closed-form KL against N(0, I): 0.5 sum(mu^2 + e^lv - 1 - lv),
    averaged over the batch."""
    mu, lv = code.mu, code.log_var
    one = ad.Tensor(np.asarray(1.0, dtype=mu.dtype))
    per = ad.tsum(ad.sub(ad.add(ad.mul(mu, mu), ad.exp(lv)), ad.add(one, lv)), axis=1)
    return ad.mul(ad.tmean(per), ad.Tensor(np.asarray(0.5, dtype=mu.dtype)))


def reconstruction_loss(pred: ad.Tensor, truth, missing_mask_2d) -> ad.Tensor:
    """Mean absolute error over missing-region pixels only."""
    return ad.masked_l1(pred, truth, missing_mask_2d)


def gan_losses(d_real: ad.Tensor, d_fake: ad.Tensor):
    """Logit-form adversarial objectives: the discriminator descends
    loss_D = mean[softplus(-d_real) + softplus(d_fake)]; the generator
    descends the non-saturating loss_G = mean[softplus(-d_fake)]."""
    loss_d = ad.add(ad.tmean(ad.softplus(ad.mul(d_real, ad.Tensor(np.asarray(-1.0, dtype=d_real.dtype))))),
                    ad.tmean(ad.softplus(d_fake)))
    loss_g = generator_gan_loss(d_fake)
    return loss_d, loss_g


def generator_gan_loss(d_fake: ad.Tensor) -> ad.Tensor:
    return ad.tmean(ad.softplus(ad.mul(d_fake, ad.Tensor(np.asarray(-1.0, dtype=d_fake.dtype)))))


def total_loss(rec: ad.Tensor, kl: ad.Tensor, loss_g: ad.Tensor, hyper: Hyper) -> ad.Tensor:
    """Generator objective: lambda_rec*rec + lambda_kl*KL + lambda_gan*G."""
    dt = rec.dtype
    return ad.add(
        ad.add(ad.mul(rec, ad.Tensor(np.asarray(hyper.lambda_rec, dtype=dt))),
               ad.mul(kl, ad.Tensor(np.asarray(hyper.lambda_kl, dtype=dt)))),
        ad.mul(loss_g, ad.Tensor(np.asarray(hyper.lambda_gan, dtype=dt))),
    )


# -- optimizers ---------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


class SGD:
    def __init__(self, params, lr=2e-4):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - (self.lr * p.grad).astype(p.data.dtype)


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ConfigError(f"unknown optimizer {name!r}")


# -- checkpoint I/O ------------------------------------------------------------


def save_model(path: str, model: ImputationModel, extra: dict | None = None):
    """Binary checkpoint: magic, array manifest, float32 payloads, then a
    JSON trailer with shell and hyperparameters."""
    named = model.named_parameters()
    meta = {"shell": model.shell, "hyper": model.hyper.to_dict()}
    if extra:
        meta["extra"] = extra
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(named)))
            for name, t in named.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", t.data.ndim))
                f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            for t in named.values():
                f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
            f.write(json.dumps(meta, sort_keys=True).encode("utf-8"))
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_model(path: str) -> ImputationModel:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    off = 8
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        manifest.append((name, tuple(int(s) for s in shape)))
    arrays = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        if len(raw) < off + 4 * n:
            raise CorruptError(f"{path}: payload truncated at {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    try:
        meta = json.loads(raw[off:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptError(f"{path}: bad JSON trailer ({e})") from e
    model = ImputationModel(meta["shell"], Hyper.from_dict(meta["hyper"]), seed=0)
    named = model.named_parameters()
    if set(named) != set(arrays):
        raise CorruptError(f"{path}: parameter names do not match the architecture")
    for name, t in named.items():
        if t.data.shape != arrays[name].shape:
            raise CorruptError(f"{path}: shape mismatch for {name}")
        t.data = arrays[name].astype(np.float32).copy()
    return model


def clone_model(model: ImputationModel) -> ImputationModel:
    """Deep copy of shell, hyper and parameter values."""
    out = ImputationModel(model.shell, model.hyper, seed=0, dtype=model.dtype)
    src = model.named_parameters()
    for name, t in out.named_parameters().items():
        t.data = src[name].data.copy()
    return out

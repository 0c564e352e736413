"""Convex and weakly convex network regularizers.

``R(x, y) = ICNN(x) + mu * ||x||^2 + IWCNN(y)`` where the IWCNN is a convex
Lipschitz ICNN composed with a smooth SiLU network.  The composition is
weakly convex with modulus at most ``L * beta`` (outer Lipschitz constant
times inner gradient-Lipschitz constant); ``bound_lipschitz_curvature``
computes both by layer recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensors import read_tensor, write_tensor

# sup |silu'| is attained near x = 2.3994; sup |silu''| = silu''(0) = 1/2.
SILU_D1_SUP = 1.0998393
SILU_D2_SUP = 0.5

DEFAULT_SLOPE = 0.2


class ConvexityError(ValueError):
    pass


class LeakyRectifier(nn.Module):
    """Leaky ReLU whose derivative at 0 is the right derivative (1)."""

    def __init__(self, slope: float = DEFAULT_SLOPE):
        super().__init__()
        if not 0 < slope < 1:
            raise ValueError("slope must lie in (0, 1)")
        self.slope = slope

    def forward(self, x):
        return torch.where(x >= 0, x, self.slope * x)


class SiLU(nn.Module):
    d1_sup = SILU_D1_SUP
    d2_sup = SILU_D2_SUP

    def forward(self, x):
        return F.silu(x)


class ICNN(nn.Module):
    """Input convex network.

    ``z1 = act(Wx0 x + b0)``, ``z_{k+1} = act(Wz_k z_k + Wx_k x + b_k)`` and a
    final affine scalar readout.  Every ``Wz`` must stay entrywise
    nonnegative; subclasses provide the layers and the readout.
    """

    input_shape: tuple[int, ...]

    def __init__(self, slope: float, constrained: bool):
        super().__init__()
        self.act = LeakyRectifier(slope)
        self.constrained = constrained

    def z_weights(self):
        return [m.weight for m in self.wz]

    def check_constraint(self):
        for w in self.z_weights():
            if bool((w < 0).any()):
                raise ConvexityError("convexity constraint violated")

    def _prep(self, x):
        raise NotImplementedError

    def _readout(self, out):
        raise NotImplementedError

    def forward(self, x):
        if self.constrained:
            self.check_constraint()
        x = self._prep(x)
        z = self.act(self.wx[0](x))
        for k, lz in enumerate(self.wz[:-1], start=1):
            z = self.act(lz(z) + self.wx[k](x))
        return self._readout(self.wz[-1](z) + self.wx[-1](x))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _init_z(weight, fan_in):
    with torch.no_grad():
        weight.uniform_(0.0, 2.0 / fan_in)


class DenseICNN(ICNN):
    def __init__(self, in_dim: int, hidden=(48, 48, 48, 48), slope=DEFAULT_SLOPE, constrained=True):
        super().__init__(slope, constrained)
        if len(hidden) < 1:
            raise ValueError("ICNN needs at least one hidden layer")
        self.input_shape = (in_dim,)
        self.hidden = tuple(int(h) for h in hidden)
        widths = list(self.hidden) + [1]
        self.wx = nn.ModuleList(nn.Linear(in_dim, w) for w in widths)
        self.wz = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(widths[:-1], widths[1:]))
        for m in self.wz:
            _init_z(m.weight, m.in_features)

    def arch(self) -> dict:
        return {"kind": "dense", "in_dim": self.input_shape[0], "hidden": list(self.hidden),
                "slope": self.act.slope, "constrained": self.constrained}

    def _prep(self, x):
        return x.reshape(x.shape[0], -1)

    def _readout(self, out):
        return out[:, 0]


class ConvICNN(ICNN):
    """Convolutional ICNN on single-channel images; the readout averages pixels."""

    def __init__(self, input_shape, channels=48, n_layers=4, kernel=5, slope=DEFAULT_SLOPE, constrained=True):
        super().__init__(slope, constrained)
        if n_layers < 1:
            raise ValueError("ICNN needs at least one hidden layer")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.channels, self.n_layers, self.kernel = channels, n_layers, kernel
        pad = kernel // 2
        widths = [channels] * n_layers + [1]
        self.wx = nn.ModuleList(nn.Conv2d(1, w, kernel, padding=pad) for w in widths)
        self.wz = nn.ModuleList(
            nn.Conv2d(a, b, kernel, padding=pad, bias=False) for a, b in zip(widths[:-1], widths[1:])
        )
        for m in self.wz:
            _init_z(m.weight, m.in_channels * kernel * kernel)

    def arch(self) -> dict:
        return {"kind": "conv", "input_shape": list(self.input_shape), "channels": self.channels,
                "n_layers": self.n_layers, "kernel": self.kernel, "slope": self.act.slope,
                "constrained": self.constrained}

    def _prep(self, x):
        return x.reshape(x.shape[0], 1, *self.input_shape)

    def _readout(self, out):
        return out.mean(dim=(1, 2, 3))


class SmoothNet(nn.Module):
    """Feed-forward map with SiLU activations; ``layers`` are the linear parts."""

    activate_last = False

    def __init__(self):
        super().__init__()
        self.act = SiLU()

    def activated(self, k: int) -> bool:
        return k < len(self.layers) - 1 or self.activate_last

    def forward(self, x):
        x = self._prep(x)
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if self.activated(k):
                x = self.act(x)
        return self._readout(x)

    def _prep(self, x):
        raise NotImplementedError

    def _readout(self, x):
        return x.reshape(x.shape[0], -1)


class DenseSmoothNet(SmoothNet):
    def __init__(self, in_dim: int, hidden=(32, 32, 32, 32), out_dim: int = 64, activate_last=False):
        super().__init__()
        self.input_shape = (in_dim,)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = out_dim
        self.activate_last = activate_last
        widths = [in_dim, *self.hidden, out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def arch(self) -> dict:
        return {"kind": "dense", "in_dim": self.input_shape[0], "hidden": list(self.hidden),
                "out_dim": self.out_dim, "activate_last": self.activate_last}

    def _prep(self, x):
        return x.reshape(x.shape[0], -1)

    def linear_maps(self):
        return [(lambda v, m=m: F.linear(v, m.weight), (m.in_features,)) for m in self.layers]


class _ConvHead(nn.Module):
    def __init__(self, channels, head_channels, kernel, grid):
        super().__init__()
        self.conv = nn.Conv2d(channels, head_channels, kernel, padding=kernel // 2)
        self.grid = grid

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.conv(x), self.grid)


class ConvSmoothNet(SmoothNet):
    """Convolutional SiLU network with an average-pooled head of size ``out_dim``."""

    def __init__(self, input_shape, channels=32, n_layers=5, kernel=5, out_dim=64):
        super().__init__()
        if n_layers < 1:
            raise ValueError("smooth net needs at least one layer")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.channels, self.n_layers, self.kernel, self.out_dim = channels, n_layers, kernel, out_dim
        grid = (4, 4) if out_dim % 16 == 0 else (1, 1)
        head = out_dim // (grid[0] * grid[1])
        layers = []
        c_in = 1
        for _ in range(n_layers - 1):
            layers.append(nn.Conv2d(c_in, channels, kernel, padding=kernel // 2))
            c_in = channels
        layers.append(_ConvHead(c_in, head, kernel, grid))
        self.layers = nn.ModuleList(layers)

    def arch(self) -> dict:
        return {"kind": "conv", "input_shape": list(self.input_shape), "channels": self.channels,
                "n_layers": self.n_layers, "kernel": self.kernel, "out_dim": self.out_dim}

    def _prep(self, x):
        return x.reshape(x.shape[0], 1, *self.input_shape)

    def linear_maps(self):
        maps = []
        shape = (1, *self.input_shape)
        for layer in self.layers:
            if isinstance(layer, _ConvHead):
                fn = (lambda v, h=layer: F.adaptive_avg_pool2d(
                    F.conv2d(v, h.conv.weight, padding=h.conv.padding), h.grid))
            else:
                fn = lambda v, c=layer: F.conv2d(v, c.weight, padding=c.padding)  # noqa: E731
            maps.append((fn, shape))
            c_out = layer.conv.out_channels if isinstance(layer, _ConvHead) else layer.out_channels
            shape = (c_out, *self.input_shape)
        return maps


class IWCNN(nn.Module):
    """Convex outer ICNN applied to the output of a smooth inner network."""

    def __init__(self, outer: ICNN, inner: SmoothNet):
        super().__init__()
        if outer.input_shape != (inner.out_dim,):
            raise ValueError(
                f"outer ICNN input {outer.input_shape} does not match smooth output dim {inner.out_dim}"
            )
        self.outer = outer
        self.inner = inner

    @property
    def input_shape(self):
        return self.inner.input_shape

    def forward(self, y):
        return self.outer(self.inner(y))


# ---------------------------------------------------------------------------
# spectral bounds


def linear_map_norm(fn, in_shape, iters: int = 100, seed: int = 0) -> float:
    """Power iteration for the spectral norm of a linear map given as a torch function."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, *in_shape), generator=gen, dtype=torch.float64)
    x /= x.norm()
    est = 0.0
    for _ in range(iters):
        x = x.detach().requires_grad_(True)
        y = fn(x)
        (z,) = torch.autograd.grad(y, x, grad_outputs=y)
        nz = float(z.norm())
        if nz == 0.0:
            return 0.0
        x = z / nz
        new = math.sqrt(nz)
        if abs(new - est) <= 1e-10 * new:
            est = new
            break
        est = new
    return est


def _as_f64(fn, module):
    def wrapped(v):
        return fn(v.to(next(module.parameters()).dtype)).to(torch.float64)

    return wrapped


def _weight_norm(m) -> float:
    w = m.weight.detach().to(torch.float64)
    if w.ndim == 2:
        return float(torch.linalg.matrix_norm(w, ord=2))
    raise TypeError("dense layers only")


def _icnn_layer_norms(net: ICNN):
    """Spectral norms of the x-skip and z-path linear maps, readout included."""
    if isinstance(net, DenseICNN):
        return [_weight_norm(m) for m in net.wx], [_weight_norm(m) for m in net.wz]
    shape_x = (1, *net.input_shape)
    shape_z = (net.channels, *net.input_shape)
    n = len(net.wx)

    def conv_fn(m, last):
        def fn(v):
            out = F.conv2d(v.to(m.weight.dtype), m.weight, padding=m.padding)
            if last:
                out = out.mean(dim=(1, 2, 3))
            return out.to(torch.float64)

        return fn

    wx = [linear_map_norm(conv_fn(m, k == n - 1), shape_x) for k, m in enumerate(net.wx)]
    wz = [linear_map_norm(conv_fn(m, k == n - 2), shape_z) for k, m in enumerate(net.wz)]
    return wx, wz


def bound_lipschitz_curvature(net) -> tuple[float, float]:
    """Layer-recursive ``(L, beta)`` bounds for a smooth net or an ICNN.

    Smooth nets chain ``Lip(g o f) = Lip(g) Lip(f)`` and
    ``gradLip(g o f) = gradLip(g) Lip(f)^2 + Lip(g) gradLip(f)``.  For an
    ICNN the skip connections give ``Lip(z_{k+1}) <= |Wz_k| Lip(z_k) + |Wx_k|``;
    its curvature is undefined and reported as ``nan``.
    """
    if isinstance(net, ICNN):
        wx, wz = _icnn_layer_norms(net)
        lip = wx[0]
        for k, nz in enumerate(wz):
            lip = nz * lip + wx[k + 1]
        return lip, float("nan")
    if not isinstance(net, SmoothNet):
        raise TypeError(f"cannot bound {type(net).__name__}")
    lip, beta = 1.0, 0.0
    for k, (fn, shape) in enumerate(net.linear_maps()):
        w = linear_map_norm(_as_f64(fn, net), shape) if isinstance(net, ConvSmoothNet) else None
        if w is None:
            w = _weight_norm(net.layers[k])
        if net.activated(k):
            l_k, b_k = w * net.act.d1_sup, w * w * net.act.d2_sup
        else:
            l_k, b_k = w, 0.0
        beta = b_k * lip * lip + l_k * beta
        lip = l_k * lip
    return lip, beta


# ---------------------------------------------------------------------------
# regularizer


def _to_torch(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class RegularizerCNC(nn.Module):
    """``R(x, y) = ICNN(x) + mu ||x||^2 + IWCNN(y)``.

    Either network may be ``None`` and then contributes zero.  ``mu`` is a
    fixed coefficient, not a trained parameter.
    """

    def __init__(self, convex: ICNN | None, weak: IWCNN | None, mu: float, image_shape, data_shape):
        super().__init__()
        if mu < 0:
            raise ValueError("mu must be nonnegative")
        self.convex = convex
        self.weak = weak
        self.mu = float(mu)
        self.image_shape = tuple(image_shape)
        self.data_shape = tuple(data_shape)
        if convex is not None and tuple(convex.input_shape) != (math.prod(self.image_shape),) \
                and tuple(convex.input_shape) != self.image_shape:
            raise ValueError("convex network input does not match image shape")
        if weak is not None and tuple(weak.input_shape) != (math.prod(self.data_shape),) \
                and tuple(weak.input_shape) != self.data_shape:
            raise ValueError("weak network input does not match data shape")

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return torch.float64

    def convex_value(self, x):
        """Batched ``R^c`` on a torch tensor of shape ``(B, *image_shape)``."""
        quad = self.mu * x.reshape(x.shape[0], -1).pow(2).sum(dim=1)
        if self.convex is None:
            return quad
        return self.convex(x) + quad

    def weak_value(self, y):
        if self.weak is None:
            return torch.zeros(y.shape[0], dtype=y.dtype)
        return self.weak(y)

    def _check(self, x, y):
        if tuple(np.shape(x)) != self.image_shape:
            raise ValueError(f"x has shape {np.shape(x)}, expected {self.image_shape}")
        if tuple(np.shape(y)) != self.data_shape:
            raise ValueError(f"y has shape {np.shape(y)}, expected {self.data_shape}")

    def value(self, x, y) -> float:
        self._check(x, y)
        if self.convex is None and self.weak is None:
            return self.mu * float(np.sum(np.square(x, dtype=np.float64)))
        dt = self.dtype
        with torch.no_grad():
            xt = _to_torch(x, dt)[None]
            yt = _to_torch(y, dt)[None]
            return float(self.convex_value(xt)[0] + self.weak_value(yt)[0])

    def value_and_gradient(self, x, y) -> tuple[float, np.ndarray, np.ndarray]:
        """Value and ``(g_x, g_y)``; kinks use the right derivative of the rectifier."""
        self._check(x, y)
        if self.convex is None and self.weak is None:
            x = np.asarray(x, dtype=np.float64)
            return self.mu * float(np.sum(x * x)), 2 * self.mu * x, np.zeros(self.data_shape)
        dt = self.dtype
        xt = _to_torch(x, dt)[None].requires_grad_(True)
        yt = _to_torch(y, dt)[None].requires_grad_(True)
        total = self.convex_value(xt).sum() + self.weak_value(yt).sum()
        if total.requires_grad:
            gx, gy = torch.autograd.grad(total, (xt, yt), allow_unused=True)
        else:
            gx = gy = None
        gx = np.zeros(self.image_shape) if gx is None else gx[0].detach().double().numpy()
        gy = np.zeros(self.data_shape) if gy is None else gy[0].detach().double().numpy()
        return float(total.detach()), gx, gy

    def gradient(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        _, gx, gy = self.value_and_gradient(x, y)
        return gx, gy

    def n_params(self) -> int:
        """Trainable scalars of both networks plus one for ``mu``."""
        return sum(p.numel() for p in self.parameters()) + 1

    def modulus_bound(self) -> tuple[float, float]:
        """``(L, beta)`` for the weak part; ``(0, 0)`` when it is absent."""
        if self.weak is None:
            return 0.0, 0.0
        lip, _ = bound_lipschitz_curvature(self.weak.outer)
        _, beta = bound_lipschitz_curvature(self.weak.inner)
        return lip, beta

    def arch(self) -> dict:
        return {
            "mu": self.mu,
            "image_shape": list(self.image_shape),
            "data_shape": list(self.data_shape),
            "convex": None if self.convex is None else self.convex.arch(),
            "weak.outer": None if self.weak is None else self.weak.outer.arch(),
            "weak.inner": None if self.weak is None else self.weak.inner.arch(),
        }


def icnn_forward(net: ICNN, x) -> float:
    with torch.no_grad():
        return float(net(_to_torch(x, _net_dtype(net))[None])[0])


def smoothnet_forward(net: SmoothNet, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != tuple(net.input_shape):
        raise ValueError(f"input shape {x.shape} does not match {net.input_shape}")
    with torch.no_grad():
        return net(_to_torch(x, _net_dtype(net))[None])[0].double().numpy()


def iwcnn_forward(net: IWCNN, y) -> float:
    y = np.asarray(y)
    if y.shape != tuple(net.input_shape):
        raise ValueError(f"input shape {y.shape} does not match {net.input_shape}")
    with torch.no_grad():
        return float(net(_to_torch(y, _net_dtype(net))[None])[0])


def regularizer_value(reg: RegularizerCNC, x, y) -> float:
    return reg.value(x, y)


def regularizer_gradient(reg: RegularizerCNC, x, y):
    return reg.gradient(x, y)


def _net_dtype(net):
    return next(net.parameters()).dtype


def project_icnn_weights(net: ICNN) -> ICNN:
    """Clamp every z-path weight at zero, in place."""
    with torch.no_grad():
        for w in net.z_weights():
            w.clamp_(min=0.0)
    return net


def project_regularizer(reg: RegularizerCNC) -> RegularizerCNC:
    for net in (reg.convex, None if reg.weak is None else reg.weak.outer):
        if net is not None and net.constrained:
            project_icnn_weights(net)
    return reg


@dataclass
class ModulusCertificate:
    L: float
    beta: float
    rho_bound: float
    empirical_rho: float

    @property
    def holds(self) -> bool:
        return self.empirical_rho <= self.rho_bound * (1 + 1e-3) + 1e-12


def torch_batch_fn(net, shape):
    """Wrap a batched torch scalar network as ``f(X: (n, d) array) -> (n,) array``."""
    dt = _net_dtype(net) if any(True for _ in net.parameters()) else torch.float64

    def f(xs):
        with torch.no_grad():
            t = _to_torch(xs, dt).reshape(-1, *shape)
            out = []
            for chunk in torch.split(t, 4096):
                out.append(net(chunk).double().numpy())
            return np.concatenate(out)

    return f


def certify_weak_convexity(reg: RegularizerCNC, samples: int = 1000, seed=0, box=(-1.0, 1.0),
                           scales=(None, 0.3, 0.03)) -> ModulusCertificate:
    """Pair the ``L * beta`` bound of the weak part with a sampled lower bound.

    Samples are split over ``scales``: ``None`` draws both points uniformly
    from ``box``; a number draws the second point within that distance
    (per coordinate) of the first.
    """
    from .theory import estimate_weak_convexity_modulus

    if samples < 100:
        raise ValueError("samples must be >= 100")
    lip, beta = reg.modulus_bound()
    if reg.weak is None:
        return ModulusCertificate(lip, beta, 0.0, 0.0)
    f = torch_batch_fn(reg.weak, reg.data_shape)
    d = math.prod(reg.data_shape)
    per = max(100, samples // len(scales))
    emp = 0.0
    for i, s in enumerate(scales):
        emp = max(emp, estimate_weak_convexity_modulus(
            f, (np.full(d, box[0]), np.full(d, box[1])), per, seed=(seed, i), scale=s, batched=True))
    return ModulusCertificate(lip, beta, lip * beta, emp)


# ---------------------------------------------------------------------------
# construction and checkpoints


def _build_icnn(a: dict | None):
    if a is None:
        return None
    if a["kind"] == "dense":
        return DenseICNN(a["in_dim"], a["hidden"], a["slope"], a["constrained"])
    return ConvICNN(a["input_shape"], a["channels"], a["n_layers"], a["kernel"], a["slope"], a["constrained"])


def _build_smooth(a: dict | None):
    if a is None:
        return None
    if a["kind"] == "dense":
        return DenseSmoothNet(a["in_dim"], a["hidden"], a["out_dim"], a["activate_last"])
    return ConvSmoothNet(a["input_shape"], a["channels"], a["n_layers"], a["kernel"], a["out_dim"])


def build_regularizer(arch: dict) -> RegularizerCNC:
    convex = _build_icnn(arch.get("convex"))
    weak = None
    if arch.get("weak.outer") is not None:
        weak = IWCNN(_build_icnn(arch["weak.outer"]), _build_smooth(arch["weak.inner"]))
    return RegularizerCNC(convex, weak, arch["mu"], arch["image_shape"], arch["data_shape"])


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}{k}.", v, out)
    else:
        out[prefix[:-1]] = obj


def _encode(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(int(i)) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


LIST_KEYS = {"hidden", "input_shape", "image_shape", "data_shape"}


def _decode(key: str, s: str):
    leaf = key.rsplit(".", 1)[-1]
    if s == "none":
        return None
    if s in ("true", "false"):
        return s == "true"
    if leaf in LIST_KEYS:
        return [int(i) for i in s.split(",")] if s else []
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def save_checkpoint(reg: RegularizerCNC, directory, extra: dict | None = None, opt_state=None) -> Path:
    """Write parameters as CNCT files plus a ``key=value`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat: dict = {}
    _flatten("arch.", reg.arch(), flat)
    lines = ["format=cncreg-checkpoint", "version=1"]
    lines += [f"{k}={_encode(v)}" for k, v in flat.items()]
    lines.append(f"n_params={reg.n_params()}")
    for name, t in reg.state_dict().items():
        fname = f"param.{name}.cnct"
        write_tensor(t.detach().cpu().float().numpy().reshape(t.shape or (1,)), directory / fname)
        lines.append(f"tensor.{name}={','.join(str(s) for s in t.shape)}")
    if opt_state is not None:
        lines.append(f"optimizer.step={opt_state.step}")
        for name, v in opt_state.sq_avg.items():
            write_tensor(v.detach().cpu().float().numpy().reshape(v.shape or (1,)), directory / f"opt.{name}.cnct")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={_encode(v)}")
    tmp = directory / ".manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(directory / "manifest.txt")
    return directory


def read_manifest(directory) -> dict:
    out = {}
    for line in (Path(directory) / "manifest.txt").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(directory, dtype=torch.float32):
    """Return ``(regularizer, manifest, optimizer_state_or_None)``."""
    directory = Path(directory)
    if not (directory / "manifest.txt").is_file():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    man = read_manifest(directory)
    if man.get("format") != "cncreg-checkpoint":
        raise ValueError(f"{directory} is not a cncreg checkpoint")
    arch: dict = {}
    for k, v in man.items():
        if not k.startswith("arch."):
            continue
        parts = k[len("arch."):].split(".")
        if parts[0] == "weak" and len(parts) > 1:
            parts = ["weak." + parts[1], *parts[2:]]
        node = arch
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _decode(k, v)
    reg = build_regularizer(arch).to(dtype)
    state = {}
    for name, t in reg.state_dict().items():
        arr = read_tensor(directory / f"param.{name}.cnct").reshape(t.shape)
        state[name] = torch.as_tensor(arr).to(dtype)
    reg.load_state_dict(state)
    opt = None
    if "optimizer.step" in man:
        from .training import OptimizerState

        sq = {}
        for name, p in reg.named_parameters():
            arr = read_tensor(directory / f"opt.{name}.cnct").reshape(p.shape)
            sq[name] = torch.as_tensor(arr).to(dtype)
        opt = OptimizerState(sq_avg=sq, step=int(man["optimizer.step"]))
    return reg, man, opt

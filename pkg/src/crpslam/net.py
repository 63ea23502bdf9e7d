"""Noise-conditioned U-net forecaster.

A single latent vector ``z ~ N(0, I)`` per member is mapped by one linear
layer to a shared embedding; every conditional layer norm in the network has
its own pair of linear heads turning that embedding into per-channel scale and
shift.  One forward pass yields one ensemble member.

Layout for ``channels = (c0, c1)``::

    in_conv                       C_in -> c0            (H x W)
    enc0: 2 x [conv, CLN, SiLU]   c0                    (H x W)    -> skip0
    down0: stride-2 conv          c0 -> c1              (H/2)
    enc1: 2 x [conv, CLN, SiLU]   c1                              -> skip1
    down1: stride-2 conv          c1 -> c1              (H/4)
    mid:  1x1 MLP (c1 -> hidden -> c1), CLN, residual
    up1:  upsample, conv c1 -> c1, concat skip1, 2 blocks -> c1   (H/2)
    up0:  upsample, conv c1 -> c0, concat skip0, 2 blocks -> c0   (H)
    out_conv                      c0 -> d_x, cropped to the interior
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .domain import DomainSpec, ModelInputWindow
from .errors import ConfigError, DimensionError, NumericError
from .rng import Stream


@dataclass(frozen=True)
class ForecasterConfig:
    d_z: int = 32
    channels: tuple[int, ...] = (32, 64)
    embed_dim: int = 128
    mlp_hidden: int = 128
    blocks_per_level: int = 2
    residual: bool = True
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.d_z < 1:
            raise ConfigError("d_z must be at least 1")
        if len(self.channels) != 2:
            raise ConfigError("the forecaster has exactly two resolution levels")
        if self.blocks_per_level < 1:
            raise ConfigError("need at least one block per level")

    @property
    def depth(self) -> int:
        return len(self.channels)

    def check_domain(self, domain: DomainSpec) -> None:
        f = 2**self.depth
        if domain.height % f or domain.width % f:
            raise ConfigError(f"grid {domain.height}x{domain.width} not divisible by {f}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class NoiseVector:
    z: np.ndarray
    member: int
    step: int


class ForwardCounter:
    """Counts network evaluations (one per ensemble member per call)."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.calls = 0
        self.member_evaluations = 0


COUNTER = ForwardCounter()


def _cln_sites(cfg: ForecasterConfig) -> list[tuple[str, int]]:
    c0, c1 = cfg.channels
    sites = []
    for lvl, c in (("enc0", c0), ("enc1", c1)):
        sites += [(f"{lvl}.{i}", c) for i in range(cfg.blocks_per_level)]
    sites.append(("mid", c1))
    for lvl, c in (("dec1", c1), ("dec0", c0)):
        sites += [(f"{lvl}.{i}", c) for i in range(cfg.blocks_per_level)]
    return sites


def param_shapes(cfg: ForecasterConfig, domain: DomainSpec) -> dict[str, tuple[int, ...]]:
    c0, c1 = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    conv("in_conv", domain.n_input_channels, c0)
    for i in range(cfg.blocks_per_level):
        conv(f"enc0.{i}.conv", c0, c0)
    conv("down0", c0, c1)
    for i in range(cfg.blocks_per_level):
        conv(f"enc1.{i}.conv", c1, c1)
    conv("down1", c1, c1)
    conv("mid.fc1", c1, cfg.mlp_hidden, k=1)
    conv("mid.fc2", cfg.mlp_hidden, c1, k=1)
    conv("up1.conv", c1, c1)
    for i in range(cfg.blocks_per_level):
        conv(f"dec1.{i}.conv", 2 * c1 if i == 0 else c1, c1)
    conv("up0.conv", c1, c0)
    for i in range(cfg.blocks_per_level):
        conv(f"dec0.{i}.conv", 2 * c0 if i == 0 else c0, c0)
    conv("out_conv", c0, domain.d_x)
    shapes["noise.w"] = (cfg.embed_dim, cfg.d_z)
    shapes["noise.b"] = (cfg.embed_dim,)
    for site, c in _cln_sites(cfg):
        for head in ("scale", "shift"):
            shapes[f"{site}.{head}.w"] = (c, cfg.embed_dim)
            shapes[f"{site}.{head}.b"] = (c,)
    return shapes


def init_params(cfg: ForecasterConfig, domain: DomainSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal convolutions, small conditioning heads and output layer, zero biases."""
    cfg.check_domain(domain)
    params = {}
    for name, shape in param_shapes(cfg, domain).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        stream = Stream.for_purpose(seed, f"init/{name}")
        fan_in = int(np.prod(shape[1:]))
        if name.startswith("noise."):
            std = 1.0 / np.sqrt(fan_in)
        elif name.endswith((".scale.w", ".shift.w")):
            std = 0.5 / np.sqrt(fan_in)
        elif name.startswith("out_conv"):
            std = 0.1 / np.sqrt(fan_in)
        else:
            std = np.sqrt(2.0 / fan_in)
        params[name] = (stream.normal(int(np.prod(shape))).reshape(shape) * std).astype(np.float32)
    return params


def zero_params(cfg: ForecasterConfig, domain: DomainSpec) -> dict[str, np.ndarray]:
    return {k: np.zeros(s, dtype=np.float32) for k, s in param_shapes(cfg, domain).items()}


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, dtype=v.dtype) for k, v in params.items()}


def sample_noise(seed: int, member: int, step: int, d_z: int = 32, dtype=np.float32) -> NoiseVector:
    """z for one (member, step): ``d_z`` normals from that pair's own stream."""
    stream = Stream.for_purpose(seed, "noise", member=member, step=step)
    return NoiseVector(stream.normal(d_z).astype(dtype), member, step)


def encode_noise(z: Tensor, p: dict[str, Tensor]) -> Tensor:
    return ad.linear(z, p["noise.w"], p["noise.b"])


def _checked(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activation in layer {layer}")
    return t


def _cln(h: Tensor, emb: Tensor, p: dict[str, Tensor], site: str, eps: float) -> Tensor:
    scale = ad.linear(emb, p[f"{site}.scale.w"], p[f"{site}.scale.b"])
    shift = ad.linear(emb, p[f"{site}.shift.w"], p[f"{site}.shift.b"])
    return ad.cond_layer_norm(h, scale, shift, eps)


def _conv(h: Tensor, p: dict[str, Tensor], name: str, stride: int = 1) -> Tensor:
    return ad.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], padding="same", stride=stride)


def _block(h, emb, p, site, eps):
    try:
        out = ad.silu(_cln(_conv(h, p, f"{site}.conv"), emb, p, site, eps))
    except NumericError as exc:
        raise NumericError(f"layer {site}: {exc}") from exc
    return out


def forward_batch(
    p: dict[str, Tensor],
    inputs: np.ndarray | Tensor,
    z: np.ndarray,
    current_interior: np.ndarray | Tensor,
    domain: DomainSpec,
    cfg: ForecasterConfig,
) -> Tensor:
    """Network on a batch: ``inputs [B, C_in, H, W]``, ``z [B, d_z]`` -> ``[B, d_x, H_I, W_I]``.

    ``inputs`` and ``current_interior`` may be tensors carrying gradient
    (autoregressive training feeds predictions back in).
    """
    dtype = p["in_conv.w"].data.dtype
    if inputs.ndim != 4 or inputs.shape[1:] != (domain.n_input_channels, domain.height, domain.width):
        raise DimensionError(f"inputs shape {inputs.shape} does not match {domain}")
    if z.shape != (inputs.shape[0], cfg.d_z):
        raise DimensionError(f"noise batch shape {z.shape}, expected {(inputs.shape[0], cfg.d_z)}")
    COUNTER.calls += 1
    COUNTER.member_evaluations += inputs.shape[0]
    eps = cfg.epsilon
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs, dtype=dtype)
    emb = _checked(encode_noise(Tensor(z, dtype=dtype), p), "noise")

    h = _checked(_conv(x, p, "in_conv"), "in_conv")
    for i in range(cfg.blocks_per_level):
        h = _block(h, emb, p, f"enc0.{i}", eps)
    skip0 = h
    h = _checked(_conv(h, p, "down0", stride=2), "down0")
    for i in range(cfg.blocks_per_level):
        h = _block(h, emb, p, f"enc1.{i}", eps)
    skip1 = h
    h = _checked(_conv(h, p, "down1", stride=2), "down1")

    m = ad.silu(_conv(h, p, "mid.fc1"))
    m = _conv(m, p, "mid.fc2")
    h = _checked(ad.add(h, _cln(m, emb, p, "mid", eps)), "mid")

    h = _checked(_conv(ad.nearest_upsample2x(h), p, "up1.conv"), "up1")
    h = ad.concat_channels([h, skip1])
    for i in range(cfg.blocks_per_level):
        h = _block(h, emb, p, f"dec1.{i}", eps)
    h = _checked(_conv(ad.nearest_upsample2x(h), p, "up0.conv"), "up0")
    h = ad.concat_channels([h, skip0])
    for i in range(cfg.blocks_per_level):
        h = _block(h, emb, p, f"dec0.{i}", eps)

    out = _checked(_conv(h, p, "out_conv"), "out_conv")
    b = domain.boundary
    out = ad.crop(out, b, b, domain.interior_height, domain.interior_width)
    if cfg.residual:
        if not isinstance(current_interior, Tensor):
            current_interior = Tensor(current_interior, dtype=dtype)
        out = ad.add(out, current_interior)
    return out


def forward(
    window: ModelInputWindow,
    z: NoiseVector | np.ndarray,
    params: dict[str, Tensor] | dict[str, np.ndarray],
    domain: DomainSpec,
    cfg: ForecasterConfig,
) -> np.ndarray:
    """One member's prediction of the interior, ``[d_x, H_I, W_I]``."""
    return forward_ensemble(window, [z], params, domain, cfg)[0]


def forward_ensemble(window, z_batch, params, domain, cfg) -> np.ndarray:
    """All members in one batched pass, ``[N, d_x, H_I, W_I]``."""
    zs = np.stack([zz.z if isinstance(zz, NoiseVector) else np.asarray(zz) for zz in z_batch])
    if zs.shape[0] < 1:
        raise ConfigError("need at least one noise vector")
    p = _tensorize(params)
    n = zs.shape[0]
    inputs = np.repeat(window.channels()[None], n, axis=0)
    cur = np.repeat(window.current_interior[None], n, axis=0)
    return forward_batch(p, inputs, zs.astype(inputs.dtype), cur, domain, cfg).data


def _tensorize(params) -> dict[str, Tensor]:
    first = next(iter(params.values()))
    return params if isinstance(first, Tensor) else as_tensors(params)

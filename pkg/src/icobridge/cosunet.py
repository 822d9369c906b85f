"""Conditional spherical U-Net denoiser over icosphere feature maps.

The network estimates the bridge regression target from the single-channel
state x_beta. Covariates (time, age, sex, baseline and optional target
diagnosis) enter as five cross-attention tokens at every stage; the bridge
step index enters separately through a sinusoidal embedding added inside
each residual block, so the step stays disentangled from the condition.

Layout per encoder stage: two residual blocks (one-hop spherical conv ->
group norm -> SiLU, twice, with the step embedding added between the two
convolutions and a 1x1 shortcut projection when widths change), then
cross-attention, then mean-pool restriction to the next coarser level.
The bottleneck runs one residual block plus attention. Decoder stages mirror
the encoder: interpolating upsample followed by a one-hop conv (together the
transposed convolution), skip concatenation, two residual blocks, attention.
A final group norm -> SiLU -> zero-initialized conv maps back to one channel,
so a freshly initialized network outputs exactly zero.

Masking: convolutions gather zeros from masked vertices and write zeros to
them. Group-norm statistics are computed over all vertices including the
masked zeros; whatever nonzero values normalization shifts onto masked rows
are flushed back to zero by the next convolution, and the loss and the
sampler only ever read unmasked vertices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bridge import BridgeSchedule
from .cohort import Condition
from .icosphere import IcosphereMesh, mesh_stack, pooling_indices, upsample_indices
from .rng import derive_rng

SEX_CODES = {"F": 0, "M": 1}
DX_CODES = {"CN": 0, "MCI": 1, "AD": 2}
NULL_DX_CODE = 3  # row of the target-diagnosis table used when dxt is absent
TIME_SCALE_MONTHS = 120.0
AGE_CENTER = 70.0
AGE_SCALE = 15.0


@dataclass(frozen=True)
class CoSUNetConfig:
    level_top: int = 2
    depth: int = 2
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 2)
    embed_dim: int = 32
    heads: int = 4
    sex_vocab: int = 2
    dx_vocab: int = 3

    def __post_init__(self):
        if self.level_top < 0:
            raise ValueError("level_top must be >= 0")
        if not 0 <= self.depth <= self.level_top:
            raise ValueError(f"depth must lie in [0, level_top]; pooling below level 0 "
                             f"is impossible (depth={self.depth}, level_top={self.level_top})")
        if len(self.channel_mults) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} channel multipliers, got {len(self.channel_mults)}")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and >= 2")
        for w in self.stage_widths + (self.bottleneck_width,):
            if w < 1 or w % self._groups(w):
                raise ValueError(f"stage width {w} incompatible with group norm")

    @property
    def stage_widths(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_mults[:self.depth])

    @property
    def bottleneck_width(self) -> int:
        return self.base_channels * self.channel_mults[self.depth]

    @staticmethod
    def _groups(channels: int) -> int:
        return min(8, channels)


def norm_groups(channels: int) -> int:
    """Group count for group norm: 8, or the channel count when narrower."""
    return min(8, channels)


# ---------------------------------------------------------------------------
# parameter inventory


def _res_block_specs(prefix: str, cin: int, cout: int, d: int) -> list:
    specs = [
        (f"{prefix}.conv1.w", (7, cin, cout), "glorot", (7 * cin, 7 * cout)),
        (f"{prefix}.gn1.scale", (cout,), "ones", None),
        (f"{prefix}.gn1.shift", (cout,), "zeros", None),
        (f"{prefix}.emb.w", (d, cout), "glorot", (d, cout)),
        (f"{prefix}.emb.b", (cout,), "zeros", None),
        (f"{prefix}.conv2.w", (7, cout, cout), "glorot", (7 * cout, 7 * cout)),
        (f"{prefix}.gn2.scale", (cout,), "ones", None),
        (f"{prefix}.gn2.shift", (cout,), "zeros", None),
    ]
    if cin != cout:
        specs.append((f"{prefix}.shortcut.w", (cin, cout), "glorot", (cin, cout)))
    return specs


def _attention_specs(prefix: str, width: int, d: int) -> list:
    return [
        (f"{prefix}.attn.wq", (width, d), "glorot", (width, d)),
        (f"{prefix}.attn.wk", (d, d), "glorot", (d, d)),
        (f"{prefix}.attn.wv", (d, d), "glorot", (d, d)),
        (f"{prefix}.attn.wo", (d, width), "glorot", (d, width)),
    ]


def param_specs(config: CoSUNetConfig) -> list:
    """The fixed named-tensor inventory: (name, shape, init kind, glorot fans).

    This list is the single source of truth; initialization, checkpoints and
    the parameter count all derive from it.
    """
    d = config.embed_dim
    widths = config.stage_widths
    wb = config.bottleneck_width
    specs = [
        ("cond.time.w", (d,), "glorot", (1, d)),
        ("cond.time.b", (d,), "zeros", None),
        ("cond.age.w", (d,), "glorot", (1, d)),
        ("cond.age.b", (d,), "zeros", None),
        ("cond.sex.table", (config.sex_vocab, d), "embed", None),
        ("cond.dx0.table", (config.dx_vocab, d), "embed", None),
        ("cond.dxt.table", (config.dx_vocab + 1, d), "embed", None),
        ("step.mlp1.w", (d, d), "glorot", (d, d)),
        ("step.mlp1.b", (d,), "zeros", None),
        ("step.mlp2.w", (d, d), "glorot", (d, d)),
        ("step.mlp2.b", (d,), "zeros", None),
    ]
    cin = 1
    for i, w in enumerate(widths):
        specs += _res_block_specs(f"enc{i}.block1", cin, w, d)
        specs += _res_block_specs(f"enc{i}.block2", w, w, d)
        specs += _attention_specs(f"enc{i}", w, d)
        cin = w
    specs += _res_block_specs("mid.block", cin, wb, d)
    specs += _attention_specs("mid", wb, d)
    cprev = wb
    for j in range(config.depth - 1, -1, -1):
        w = widths[j]
        prefix = f"dec{j}"
        specs.append((f"{prefix}.up.w", (7, cprev, w), "glorot", (7 * cprev, 7 * w)))
        specs += _res_block_specs(f"{prefix}.block1", 2 * w, w, d)
        specs += _res_block_specs(f"{prefix}.block2", w, w, d)
        specs += _attention_specs(prefix, w, d)
        cprev = w
    head = widths[0] if config.depth else wb
    specs += [
        ("final.gn.scale", (head,), "ones", None),
        ("final.gn.shift", (head,), "zeros", None),
        ("final.conv.w", (7, head, 1), "final_zero", None),
    ]
    return specs


def parameter_count(config: CoSUNetConfig) -> int:
    """Closed-form parameter count, independent of the spec enumeration.

    With embed dim d, stage widths w_0..w_{depth-1}, bottleneck width w_b:
      condition tokens: 4d (time) + 4d (age)... precisely 2(2d) + (2+3+4)d = 13d
      step MLP: 2 d(d+1)
      residual block (cin -> cout): 7 cin cout + 7 cout^2 + d cout + 5 cout
                                    (+ cin cout if cin != cout)
      attention at width w: 2 w d + 2 d^2
      up conv (cin -> w): 7 cin w
      head at width w: 2w + 7w
    summed over the encoder stages, bottleneck, decoder stages and head.
    """
    d = config.embed_dim
    widths = config.stage_widths
    wb = config.bottleneck_width

    def block(cin, cout):
        n = 7 * cin * cout + 7 * cout * cout + d * cout + 5 * cout
        return n + (cin * cout if cin != cout else 0)

    def attn(w):
        return 2 * w * d + 2 * d * d

    total = 13 * d + 2 * d * (d + 1)
    cin = 1
    for w in widths:
        total += block(cin, w) + block(w, w) + attn(w)
        cin = w
    total += block(cin, wb) + attn(wb)
    cprev = wb
    for j in range(config.depth - 1, -1, -1):
        w = widths[j]
        total += 7 * cprev * w + block(2 * w, w) + block(w, w) + attn(w)
        cprev = w
    head = widths[0] if config.depth else wb
    total += 2 * head + 7 * head
    return total


def init_params(config: CoSUNetConfig, seed: int) -> dict:
    """Named parameter tensors: Glorot-uniform kernels and projections,
    N(0, 0.02) embedding tables, unit/zero norms, zero final convolution.
    Each tensor draws from its own named stream, so the inventory order does
    not affect values."""
    params = {}
    for name, shape, kind, fans in param_specs(config):
        rng = derive_rng(seed, f"init/{name}")
        if kind == "glorot":
            s = math.sqrt(6.0 / (fans[0] + fans[1]))
            data = rng.uniform(-s, s, size=shape)
        elif kind == "embed":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind in ("zeros", "final_zero"):
            data = np.zeros(shape)
        else:  # pragma: no cover
            raise AssertionError(kind)
        params[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
    return params


def inference_params(params: dict) -> dict:
    """Graph-free view of the parameters (shared storage, no gradients)."""
    return {name: Tensor(p.data if isinstance(p, Tensor) else p) for name, p in params.items()}


# ---------------------------------------------------------------------------
# embeddings


def embed_condition(t_months: float, cond: Condition, params: dict,
                    config: CoSUNetConfig) -> Tensor:
    """Five condition tokens (5 x d): time, age, sex, dx0, dxt."""
    if t_months < 0:
        raise ValueError("time must be >= 0 months")
    if cond.sex not in SEX_CODES:
        raise ValueError(f"unknown sex code {cond.sex!r}")
    if cond.dx0 not in DX_CODES:
        raise ValueError(f"unknown diagnosis {cond.dx0!r}")
    if cond.dxt is not None and cond.dxt not in DX_CODES:
        raise ValueError(f"unknown diagnosis {cond.dxt!r}")
    d = config.embed_dim
    t_norm = float(t_months) / TIME_SCALE_MONTHS
    a_norm = (float(cond.age) - AGE_CENTER) / AGE_SCALE
    time_tok = ad.add(ad.scale(params["cond.time.w"], t_norm), params["cond.time.b"])
    age_tok = ad.add(ad.scale(params["cond.age.w"], a_norm), params["cond.age.b"])
    sex_tok = ad.gather_rows(params["cond.sex.table"], np.array([SEX_CODES[cond.sex]]))
    dx0_tok = ad.gather_rows(params["cond.dx0.table"], np.array([DX_CODES[cond.dx0]]))
    dxt_code = NULL_DX_CODE if cond.dxt is None else DX_CODES[cond.dxt]
    dxt_tok = ad.gather_rows(params["cond.dxt.table"], np.array([dxt_code]))
    return ad.concat([ad.reshape(time_tok, (1, d)), ad.reshape(age_tok, (1, d)),
                      sex_tok, dx0_tok, dxt_tok], axis=0)


def sinusoidal_encoding(beta: int, dim: int) -> np.ndarray:
    """[sin | cos] halves over a geometric frequency ladder from 1 to 1e-4."""
    half = dim // 2
    if half > 1:
        freqs = np.power(1e-4, np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    angles = float(beta) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def embed_step(beta: int, sched: BridgeSchedule, params: dict,
               config: CoSUNetConfig) -> Tensor:
    """Step embedding (1 x d): sinusoid -> linear -> SiLU -> linear."""
    if not 0 <= beta <= sched.horizon:
        raise ValueError(f"step {beta} outside [0, {sched.horizon}]")
    d = config.embed_dim
    z = sinusoidal_encoding(int(beta), d).reshape(1, d)
    h = ad.silu(ad.add(ad.matmul(Tensor(z), params["step.mlp1.w"]), params["step.mlp1.b"]))
    return ad.add(ad.matmul(h, params["step.mlp2.w"]), params["step.mlp2.b"])


# ---------------------------------------------------------------------------
# layers


def spherical_conv(x, mesh: IcosphereMesh, kernel, mask: np.ndarray):
    """One-hop ring convolution: gather the padded 7-ring and contract with a
    (7, Cin, Cout) kernel. Masked vertices contribute zeros and produce zeros."""
    x = ad.as_tensor(x)
    kernel = ad.as_tensor(kernel)
    v, cin = x.data.shape
    if v != mesh.vertex_count:
        raise ValueError(f"field has {v} rows but mesh level {mesh.level} has {mesh.vertex_count}")
    if kernel.data.shape[:2] != (7, cin):
        raise ValueError(f"kernel shape {kernel.data.shape} does not match 7x{cin}xCout")
    cout = kernel.data.shape[2]
    gathered = ad.gather_rows(x, mesh.ring7)                      # (V, 7, Cin)
    gathered = ad.mul(gathered, mask[mesh.ring7][:, :, None].astype(np.float64))
    flat = ad.reshape(gathered, (v, 7 * cin))
    out = ad.matmul(flat, ad.reshape(kernel, (7 * cin, cout)))
    return ad.mul(out, mask[:, None].astype(np.float64))


def cross_attention(x, tokens, prefix: str, params: dict, config: CoSUNetConfig):
    """Multi-head scaled dot-product attention from vertex queries onto the
    five condition tokens, added residually."""
    x = ad.as_tensor(x)
    v, width = x.data.shape
    d, heads = config.embed_dim, config.heads
    dh = d // heads
    wq, wk, wv, wo = (params[f"{prefix}.attn.{n}"] for n in ("wq", "wk", "wv", "wo"))
    if wq.data.shape != (width, d):
        raise ValueError(f"query projection {wq.data.shape} does not match width {width}")
    q = ad.matmul(x, wq)                                          # (V, d)
    k = ad.matmul(ad.as_tensor(tokens), wv Tensor := None) if False else ad.matmul(ad.as_tensor(tokens), wk)
    val = ad.matmul(ad.as_tensor(tokens), wv)                     # (5, d)
    qh = ad.transpose(ad.reshape(q, (v, heads, dh)), (1, 0, 2))   # (H, V, dh)
    kh = ad.transpose(ad.reshape(k, (-1, heads, dh)), (1, 2, 0))  # (H, dh, 5)
    vh = ad.transpose(ad.reshape(val, (-1, heads, dh)), (1, 0, 2))
    scores = ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dh))     # (H, V, 5)
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, vh)                                     # (H, V, dh)
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (v, d))
    return ad.add(x, ad.matmul(ctx, wo))


def _res_block(x, emb, prefix: str, params: dict, mesh, mask):
    cout = params[f"{prefix}.conv1.w"].data.shape[2]
    g = norm_groups(cout)
    h = spherical_conv(x, mesh, params[f"{prefix}.conv1.w"], mask)
    h = ad.silu(ad.group_norm(h, params[f"{prefix}.gn1.scale"], params[f"{prefix}.gn1.shift"], g))
    e = ad.add(ad.matmul(emb, params[f"{prefix}.emb.w"]), params[f"{prefix}.emb.b"])
    h = ad.add(h, e)
    h = spherical_conv(h, mesh, params[f"{prefix}.conv2.w"], mask)
    h = ad.silu(ad.group_norm(h, params[f"{prefix}.gn2.scale"], params[f"{prefix}.gn2.shift"], g))
    name = f"{prefix}.shortcut.w"
    shortcut = ad.matmul(ad.as_tensor(x), params[name]) if name in params else x
    return ad.add(h, shortcut)


def _pool(x, fine, coarse):
    idx, w = pooling_indices(fine, coarse)
    gathered = ad.gather_rows(x, idx)                 # (Vc, 7, C)
    return ad.sum_reduce(ad.mul(gathered, w[:, :, None]), axis=1)


def _upsample(x, coarse, fine):
    src = upsample_indices(coarse, fine)
    return ad.mean_reduce(ad.gather_rows(x, src), axis=1)


def forward(x, beta: int, t_months: float, cond: Condition, params: dict,
            config: CoSUNetConfig, sched: BridgeSchedule,
            mask: np.ndarray | None = None) -> Tensor:
    """Denoiser output (V x 1) at level_top for state x (V,) or (V, 1)."""
    meshes = mesh_stack(config.level_top)
    top = meshes[-1]
    x = ad.as_tensor(x)
    if x.data.ndim == 1:
        x = ad.reshape(x, (x.data.shape[0], 1))
    if x.data.shape != (top.vertex_count, 1):
        raise ValueError(f"input shape {x.data.shape} does not match level {config.level_top} "
                         f"({top.vertex_count} vertices)")
    if mask is None:
        mask = np.ones(top.vertex_count, dtype=bool)
    if mask.shape != (top.vertex_count,):
        raise ValueError("mask length does not match the top-level mesh")
    masks = [mask[:m.vertex_count] for m in meshes]

    tokens = embed_condition(t_months, cond, params, config)
    emb = embed_step(beta, sched, params, config)

    level = config.level_top
    h = x
    skips = []
    for i in range(config.depth):
        mesh = meshes[level]
        h = _res_block(h, emb, f"enc{i}.block1", params, mesh, masks[level])
        h = _res_block(h, emb, f"enc{i}.block2", params, mesh, masks[level])
        h = cross_attention(h, tokens, f"enc{i}", params, config)
        skips.append(h)
        h = _pool(h, meshes[level], meshes[level - 1])
        level -= 1

    mesh = meshes[level]
    h = _res_block(h, emb, "mid.block", params, mesh, masks[level])
    h = cross_attention(h, tokens, "mid", params, config)

    for j in range(config.depth - 1, -1, -1):
        h = _upsample(h, meshes[level], meshes[level + 1])
        level += 1
        mesh = meshes[level]
        h = spherical_conv(h, mesh, params[f"dec{j}.up.w"], masks[level])
        h = ad.concat([h, skips.pop()], axis=1)
        h = _res_block(h, emb, f"dec{j}.block1", params, mesh, masks[level])
        h = _res_block(h, emb, f"dec{j}.block2", params, mesh, masks[level])
        h = cross_attention(h, tokens, f"dec{j}", params, config)

    head = params["final.conv.w"].data.shape[1]
    h = ad.group_norm(h, params["final.gn.scale"], params["final.gn.shift"], norm_groups(head))
    h = ad.silu(h)
    return spherical_conv(h, meshes[config.level_top], params["final.conv.w"],
                          masks[config.level_top])

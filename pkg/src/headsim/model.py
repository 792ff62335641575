"""Dual-CLS transformer encoder with hand-written forward/backward passes.

The encoder patchifies a square RGB image, prepends one or two learnable
tokens, runs pre-norm transformer blocks, and projects token states through
affine maps followed by L2 normalization into two unit embeddings:

- ``z_id``: the identity embedding, the only inference-time output;
- ``z_head``: the appearance-sensitive embedding, used during training only.

Variants:

- ``dual_cls``: two prepended tokens, token 0 -> z_id, token 1 -> z_head;
- ``shared``: one token, one projection, z_head aliases z_id;
- ``dual_head_split`` / ``dual_head_both``: one token feeding both
  projections (they differ only in how the objectives are routed).

Everything is plain numpy (matmuls via BLAS, elementwise/reduction kernels
via :mod:`headsim.kernels`), with gradients implemented manually so they can
be verified against finite differences at float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import kernels
from .seeding import derive_rng

VARIANTS = ("dual_cls", "shared", "dual_head_split", "dual_head_both")

NORM_EPS = 1e-12
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    variant: str = "dual_cls"
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choices {VARIANTS}")
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch_size must divide image_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide embed_dim")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if int(self.embed_dim * self.mlp_ratio) < 1:
            raise ValueError("mlp hidden dim must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_prefix_tokens(self) -> int:
        return 2 if self.variant == "dual_cls" else 1

    @property
    def seq_len(self) -> int:
        return self.num_prefix_tokens + self.num_patches

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def has_head_projection(self) -> bool:
        return self.variant != "shared"


@dataclass
class EmbeddingPair:
    """Unit-norm identity/appearance embeddings for a batch, shape (B, d)."""

    z_id: np.ndarray
    z_head: np.ndarray


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d = config.embed_dim
    h = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "cls_tokens": (config.num_prefix_tokens, d),
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.seq_len, d),
    }
    for i in range(config.depth):
        p = f"block{i}."
        shapes[p + "norm1.gamma"] = (d,)
        shapes[p + "norm1.beta"] = (d,)
        shapes[p + "attn.qkv_weight"] = (d, 3 * d)
        shapes[p + "attn.qkv_bias"] = (3 * d,)
        shapes[p + "attn.out_weight"] = (d, d)
        shapes[p + "attn.out_bias"] = (d,)
        shapes[p + "norm2.gamma"] = (d,)
        shapes[p + "norm2.beta"] = (d,)
        shapes[p + "mlp.weight1"] = (d, h)
        shapes[p + "mlp.bias1"] = (h,)
        shapes[p + "mlp.weight2"] = (h, d)
        shapes[p + "mlp.bias2"] = (d,)
    shapes["final_norm.gamma"] = (d,)
    shapes["final_norm.beta"] = (d,)
    shapes["proj_id.weight"] = (d, d)
    shapes["proj_id.bias"] = (d,)
    if config.has_head_projection:
        shapes["proj_head.weight"] = (d, d)
        shapes["proj_head.bias"] = (d,)
    return shapes


def parameter_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 sigma."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def parameter_init(config: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated-normal weights (std 0.02), zero biases, unit norm scales.

    Each parameter draws from its own name-keyed stream (cls token rows get
    one stream per row), so values are independent of iteration order and the
    prefix tokens start distinct.
    """
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name == "cls_tokens":
            rows = [
                _trunc_normal(derive_rng(seed, name, r), (shape[1],)) for r in range(shape[0])
            ]
            arr = np.stack(rows)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        elif "bias" in name or name.endswith(".beta"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(derive_rng(seed, name), shape)
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    return params


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, S, S, 3) -> (B, N, patch_size^2 * 3), patches in row-major order."""
    b, s, s2, c = images.shape
    if s != s2 or c != 3:
        raise ValueError(f"expected square RGB images, got shape {images.shape}")
    g = s // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, g * g, patch_size * patch_size * c)


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Rows scaled to unit norm: v / max(||v||, eps)."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norms, eps)


def project_and_normalize(token_state: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Affine map then epsilon-guarded L2 normalization.

    Accepts a single vector or a (B, d) batch; returns the same shape.
    """
    single = token_state.ndim == 1
    t = np.atleast_2d(token_state)
    v = t @ weight + bias
    z = l2_normalize(v)
    return z[0] if single else z


def _ln(x3d: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    b, t, d = x3d.shape
    flat = np.ascontiguousarray(x3d).reshape(b * t, d)
    y, mean, rstd = kernels.layer_norm_forward(flat, gamma, beta, LN_EPS)
    return y.reshape(b, t, d), flat, mean, rstd


def _ln_backward(dy3d, flat_x, gamma, mean, rstd):
    b, t, d = dy3d.shape
    dy = np.ascontiguousarray(dy3d).reshape(b * t, d)
    dx, dgamma, dbeta = kernels.layer_norm_backward(dy, flat_x, gamma, mean, rstd)
    return dx.reshape(b, t, d), dgamma, dbeta


def _block_forward(x: np.ndarray, params, prefix: str, config: EncoderConfig, want_cache: bool):
    b, t, d = x.shape
    nh, dh = config.num_heads, config.head_dim
    scale = 1.0 / np.sqrt(dh)

    h1, x_flat, mean1, rstd1 = _ln(x, params[prefix + "norm1.gamma"], params[prefix + "norm1.beta"])
    qkv = h1.reshape(b * t, d) @ params[prefix + "attn.qkv_weight"] + params[prefix + "attn.qkv_bias"]
    # contiguous (3, B, H, T, dh): batched matmuls on strided views are slow
    qkv = np.ascontiguousarray(qkv.reshape(b, t, 3, nh, dh).transpose(2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # (B, H, T, dh)

    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    probs = kernels.softmax_lastdim(scores.reshape(b * nh * t, t))
    probs = probs.reshape(b, nh, t, t)
    ctx = np.ascontiguousarray((probs @ v).transpose(0, 2, 1, 3)).reshape(b, t, d)
    attn_out = ctx.reshape(b * t, d) @ params[prefix + "attn.out_weight"] + params[prefix + "attn.out_bias"]
    x2 = x + attn_out.reshape(b, t, d)

    h2, x2_flat, mean2, rstd2 = _ln(x2, params[prefix + "norm2.gamma"], params[prefix + "norm2.beta"])
    u1 = h2.reshape(b * t, d) @ params[prefix + "mlp.weight1"] + params[prefix + "mlp.bias1"]
    act = kernels.gelu_forward(u1.reshape(-1)).reshape(u1.shape)
    u2 = act @ params[prefix + "mlp.weight2"] + params[prefix + "mlp.bias2"]
    out = x2 + u2.reshape(b, t, d)

    cache = None
    if want_cache:
        cache = {
            "x_flat": x_flat,
            "mean1": mean1,
            "rstd1": rstd1,
            "h1": h1,
            "q": q,
            "k": k,
            "v": v,
            "probs": probs,
            "ctx": ctx,
            "x2_flat": x2_flat,
            "mean2": mean2,
            "rstd2": rstd2,
            "h2": h2,
            "u1": u1,
            "act": act,
        }
    return out, cache


def _block_backward(dout, cache, params, grads, prefix: str, config: EncoderConfig):
    b, t, d = dout.shape
    nh, dh = config.num_heads, config.head_dim
    scale = 1.0 / np.sqrt(dh)

    # MLP branch: out = x2 + mlp(ln2(x2))
    du2 = np.ascontiguousarray(dout).reshape(b * t, d)
    act = cache["act"]
    grads[prefix + "mlp.weight2"] += act.T @ du2
    grads[prefix + "mlp.bias2"] += du2.sum(axis=0)
    dact = du2 @ params[prefix + "mlp.weight2"].T
    du1 = kernels.gelu_backward(dact.reshape(-1), cache["u1"].reshape(-1)).reshape(cache["u1"].shape)
    h2_flat = cache["h2"].reshape(b * t, d)
    grads[prefix + "mlp.weight1"] += h2_flat.T @ du1
    grads[prefix + "mlp.bias1"] += du1.sum(axis=0)
    dh2 = (du1 @ params[prefix + "mlp.weight1"].T).reshape(b, t, d)
    dx2_ln, dg2, db2 = _ln_backward(
        dh2, cache["x2_flat"], params[prefix + "norm2.gamma"], cache["mean2"], cache["rstd2"]
    )
    grads[prefix + "norm2.gamma"] += dg2
    grads[prefix + "norm2.beta"] += db2
    dx2 = dout + dx2_ln

    # Attention branch: x2 = x + attn(ln1(x))
    dattn = np.ascontiguousarray(dx2).reshape(b * t, d)
    grads[prefix + "attn.out_weight"] += cache["ctx"].reshape(b * t, d).T @ dattn
    grads[prefix + "attn.out_bias"] += dattn.sum(axis=0)
    dctx = np.ascontiguousarray(
        (dattn @ params[prefix + "attn.out_weight"].T).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
    )

    probs = cache["probs"]
    dprobs = dctx @ cache["v"].transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = kernels.softmax_backward(
        dprobs.reshape(b * nh * t, t), probs.reshape(b * nh * t, t)
    ).reshape(b, nh, t, t) * scale
    dq = dscores @ cache["k"]
    dk = dscores.transpose(0, 1, 3, 2) @ cache["q"]

    dqkv = np.stack([dq, dk, dv])  # (3, B, H, T, dh)
    dqkv = dqkv.transpose(1, 3, 0, 2, 4).reshape(b * t, 3 * d)
    h1_flat = cache["h1"].reshape(b * t, d)
    grads[prefix + "attn.qkv_weight"] += h1_flat.T @ dqkv
    grads[prefix + "attn.qkv_bias"] += dqkv.sum(axis=0)
    dh1 = (dqkv @ params[prefix + "attn.qkv_weight"].T).reshape(b, t, d)
    dx_ln, dg1, db1 = _ln_backward(
        dh1, cache["x_flat"], params[prefix + "norm1.gamma"], cache["mean1"], cache["rstd1"]
    )
    grads[prefix + "norm1.gamma"] += dg1
    grads[prefix + "norm1.beta"] += db1
    return dx2 + dx_ln


def _forward(config: EncoderConfig, params, images: np.ndarray, *, want_cache: bool, want_head: bool):
    dtype = params["patch_embed.weight"].dtype
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (config.image_size, config.image_size, 3):
        raise ValueError(
            f"expected images (B, {config.image_size}, {config.image_size}, 3), got {images.shape}"
        )
    images = images.astype(dtype, copy=False)
    b = images.shape[0]

    # Center [0,1] inputs to [-1,1]: all-positive patches share a dominant
    # DC direction that collapses token states at init.
    patches = patchify(images * 2.0 - 1.0, config.patch_size)
    tok = patches.reshape(b * config.num_patches, config.patch_dim) @ params["patch_embed.weight"]
    tok = (tok + params["patch_embed.bias"]).reshape(b, config.num_patches, config.embed_dim)
    cls = np.broadcast_to(params["cls_tokens"], (b,) + params["cls_tokens"].shape)
    x = np.concatenate([cls, tok], axis=1) + params["pos_embed"]

    block_caches = []
    for i in range(config.depth):
        x, c = _block_forward(x, params, f"block{i}.", config, want_cache)
        block_caches.append(c)

    xf, xlast_flat, mean_f, rstd_f = _ln(x, params["final_norm.gamma"], params["final_norm.beta"])

    tok_id = xf[:, 0]
    v_id = tok_id @ params["proj_id.weight"] + params["proj_id.bias"]
    r_id = np.maximum(np.linalg.norm(v_id, axis=1, keepdims=True), NORM_EPS)
    z_id = v_id / r_id

    cache = None
    tok_head = v_head = r_head = z_head = None
    if want_head:
        if config.variant == "shared":
            z_head = z_id
        else:
            tok_head = xf[:, 1] if config.variant == "dual_cls" else tok_id
            v_head = tok_head @ params["proj_head.weight"] + params["proj_head.bias"]
            r_head = np.maximum(np.linalg.norm(v_head, axis=1, keepdims=True), NORM_EPS)
            z_head = v_head / r_head
        if not np.isfinite(z_head).all():
            raise ValueError("non-finite head embedding (check parameters)")
    if not np.isfinite(z_id).all():
        raise ValueError("non-finite identity embedding (check parameters)")

    if want_cache:
        cache = {
            "patches": patches,
            "blocks": block_caches,
            "xlast_flat": xlast_flat,
            "mean_f": mean_f,
            "rstd_f": rstd_f,
            "tok_id": tok_id,
            "z_id": z_id,
            "r_id": r_id,
            "tok_head": tok_head,
            "z_head": z_head,
            "r_head": r_head,
            "batch": b,
        }
    return z_id, z_head, cache


def encode(config: EncoderConfig, params, images: np.ndarray, *, want_cache: bool = False):
    """Forward pass producing both unit embeddings.

    Returns ``(EmbeddingPair, cache)``; the cache feeds
    :func:`encode_backward` and is ``None`` unless requested. Deterministic:
    there is no train/eval stochasticity in this encoder.
    """
    z_id, z_head, cache = _forward(config, params, images, want_cache=want_cache, want_head=True)
    return EmbeddingPair(z_id=z_id, z_head=z_head), cache


def encode_identity(config: EncoderConfig, params, images: np.ndarray) -> np.ndarray:
    """Inference path: identity embeddings only, never touching the head
    projection."""
    z_id, _, _ = _forward(config, params, images, want_cache=False, want_head=False)
    return z_id


def _normalize_backward(dz, z, r):
    return (dz - z * (z * dz).sum(axis=1, keepdims=True)) / r


def encode_backward(
    config: EncoderConfig,
    params,
    cache,
    d_z_id: Optional[np.ndarray],
    d_z_head: Optional[np.ndarray] = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients on the embeddings.

    For the ``shared`` variant both incoming gradients flow through the
    single projection. Image gradients are not computed (inputs are data).
    """
    dtype = params["patch_embed.weight"].dtype
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    b = cache["batch"]
    d = config.embed_dim

    dxf = np.zeros((b, config.seq_len, d), dtype=dtype)

    dz_id = None
    if d_z_id is not None:
        dz_id = np.asarray(d_z_id, dtype=dtype)
    if config.variant == "shared" and d_z_head is not None:
        dz_id = d_z_head if dz_id is None else dz_id + d_z_head

    if dz_id is not None:
        dv = _normalize_backward(dz_id, cache["z_id"], cache["r_id"])
        grads["proj_id.weight"] += cache["tok_id"].T @ dv
        grads["proj_id.bias"] += dv.sum(axis=0)
        dxf[:, 0] += dv @ params["proj_id.weight"].T

    if config.variant != "shared" and d_z_head is not None:
        dz_head = np.asarray(d_z_head, dtype=dtype)
        dv = _normalize_backward(dz_head, cache["z_head"], cache["r_head"])
        grads["proj_head.weight"] += cache["tok_head"].T @ dv
        grads["proj_head.bias"] += dv.sum(axis=0)
        slot = 1 if config.variant == "dual_cls" else 0
        dxf[:, slot] += dv @ params["proj_head.weight"].T

    dx, dgf, dbf = _ln_backward(
        dxf, cache["xlast_flat"], params["final_norm.gamma"], cache["mean_f"], cache["rstd_f"]
    )
    grads["final_norm.gamma"] += dgf
    grads["final_norm.beta"] += dbf

    for i in reversed(range(config.depth)):
        dx = _block_backward(dx, cache["blocks"][i], params, grads, f"block{i}.", config)

    grads["pos_embed"] += dx.sum(axis=0)
    p = config.num_prefix_tokens
    grads["cls_tokens"] += dx[:, :p].sum(axis=0)
    dtok = dx[:, p:].reshape(b * config.num_patches, d)
    grads["patch_embed.weight"] += cache["patches"].reshape(b * config.num_patches, -1).T @ dtok
    grads["patch_embed.bias"] += dtok.sum(axis=0)
    return grads


def save_checkpoint(
    path,
    config: EncoderConfig,
    params: dict[str, np.ndarray],
    *,
    opt_m: Optional[dict[str, np.ndarray]] = None,
    opt_v: Optional[dict[str, np.ndarray]] = None,
    opt_count: int = 0,
    epoch: int = 0,
    step: int = 0,
    extra: Optional[dict] = None,
) -> None:
    """Versioned npz archive: encoder config, parameters, optimizer moments,
    and epoch/step counters."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "encoder": asdict(config),
        "epoch": int(epoch),
        "step": int(step),
        "opt_count": int(opt_count),
        "extra": extra or {},
    }
    arrays = {"param:" + k: v for k, v in params.items()}
    if opt_m is not None:
        arrays.update({"opt_m:" + k: v for k, v in opt_m.items()})
        arrays.update({"opt_v:" + k: v for k, v in opt_v.items()})
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)  # uncompressed: checkpoints are small, writes are hot


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    opt_m: Optional[dict[str, np.ndarray]]
    opt_v: Optional[dict[str, np.ndarray]]
    opt_count: int
    epoch: int
    step: int
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {}
        opt_m = {}
        opt_v = {}
        for key in data.files:
            if key.startswith("param:"):
                params[key[6:]] = data[key]
            elif key.startswith("opt_m:"):
                opt_m[key[6:]] = data[key]
            elif key.startswith("opt_v:"):
                opt_v[key[6:]] = data[key]
    config = EncoderConfig(**meta["encoder"])
    return Checkpoint(
        config=config,
        params=params,
        opt_m=opt_m or None,
        opt_v=opt_v or None,
        opt_count=meta["opt_count"],
        epoch=meta["epoch"],
        step=meta["step"],
        extra=meta.get("extra", {}),
    )

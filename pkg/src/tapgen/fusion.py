"""Forward-only numerics of the two-pathway snippet representation.

Per snippet: a backbone feature map feeds an environment pathway (global
average pool, fully connected stack, softmax) and an agent pathway
(RoIAlign patches per detected agent, fused through a self-attention
encoder); the two results are fused by a second encoder into one feature
vector per snippet.

All math is float64. Encoders use pre-normalization and carry no
positional encodings: agent sets are unordered, which makes the fusion
permutation-invariant by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from tapgen.errors import ConfigError, DataError, InvalidInputError
from tapgen.tensorio import Tensor, read_tensor, write_tensor, atomic_write_bytes
from tapgen.timeline import build_grid

LN_EPS = 1e-5

__all__ = [
    "FeatureMap",
    "FusionConfig",
    "EncoderLayerWeights",
    "EncoderWeights",
    "FusionWeights",
    "stub_backbone",
    "environment_pathway",
    "roi_align",
    "attention_encoder",
    "agent_fusion",
    "ae_fuse",
    "featurize_video",
    "random_weights",
    "save_weights",
    "load_weights",
    "StubFeatureSource",
    "FileFeatureSource",
]


@dataclass(frozen=True)
class FeatureMap:
    """Backbone output for one snippet: values of shape [C, H, W]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise InvalidInputError(f"feature map must be [C, H, W], got shape {v.shape}")
        if any(d < 1 for d in v.shape):
            raise InvalidInputError(f"feature map dims must be positive, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def C(self) -> int:
        return self.values.shape[0]

    @property
    def H(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class FusionConfig:
    """Architecture hyperparameters; defaults are desk-scale."""

    channels: int = 8
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 1
    ff_dim: int = 128
    env_hidden: tuple[int, ...] = ()
    roi_grid: tuple[int, int] = (4, 4)  # (gh, gw)
    roi_samples: tuple[int, int] = (2, 2)  # (sh, sw)
    env_softmax: bool = True  # False exposes pre-softmax logits

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        for name in ("channels", "d_model", "num_heads", "num_layers", "ff_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if any(g < 1 for g in self.roi_grid) or any(s < 1 for s in self.roi_samples):
            raise ConfigError("roi grid and sample counts must be positive")


@dataclass(frozen=True)
class EncoderLayerWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ff1_w: np.ndarray
    ff1_b: np.ndarray
    ff2_w: np.ndarray
    ff2_b: np.ndarray
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray


@dataclass(frozen=True)
class EncoderWeights:
    layers: tuple[EncoderLayerWeights, ...]
    num_heads: int

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("encoder needs at least one layer")
        d = self.layers[0].wq.shape[0]
        if d % self.num_heads != 0:
            raise ConfigError(f"d_model {d} not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class FusionWeights:
    """All learnable parameters of the two pathways and the fusion stage."""

    config: FusionConfig
    env_affine: tuple[tuple[np.ndarray, np.ndarray], ...]  # (weight [out, in], bias [out])
    patch_proj: tuple[np.ndarray, np.ndarray]  # C*gh*gw -> d_model
    agent_encoder: EncoderWeights
    fuse_encoder: EncoderWeights

    def __post_init__(self):
        d = self.config.d_model
        in_dim = self.config.channels
        for i, (w, b) in enumerate(self.env_affine):
            if w.shape[1] != in_dim or w.shape[0] != b.shape[0]:
                raise ConfigError(
                    f"env_affine[{i}] shape {w.shape} incompatible with input dim {in_dim}"
                )
            in_dim = w.shape[0]
        if in_dim != d:
            raise ConfigError(f"env_affine output dim {in_dim} != d_model {d}")
        gh, gw = self.config.roi_grid
        flat = self.config.channels * gh * gw
        pw, pb = self.patch_proj
        if pw.shape != (d, flat) or pb.shape != (d,):
            raise ConfigError(
                f"patch_proj shape {pw.shape} incompatible with C*gh*gw={flat}, d_model={d}"
            )


def stub_backbone(
    video_id: str, snippet_index: int, dims: tuple[int, int, int], seed: int
) -> FeatureMap:
    """Deterministic stand-in for the convolutional backbone.

    A counter-mode generator keyed on (seed, video_id, snippet_index)
    produces bit-identical maps across platforms and processes.
    """
    c, h, w = dims
    if c < 1 or h < 1 or w < 1:
        raise InvalidInputError(f"stub dims must be positive, got {dims}")
    key_material = f"{seed}\x00{video_id}\x00{snippet_index}".encode("utf-8")
    digest = hashlib.sha256(key_material).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    values = rng.random((c, h, w), dtype=np.float64)
    return FeatureMap(values=values)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def environment_pathway(fmap: FeatureMap, w: FusionWeights) -> np.ndarray:
    """Global average pool over H x W, fully connected stack, softmax.

    Returns the scene descriptor as a probability vector of length d_model
    (or raw logits when config.env_softmax is off).
    """
    if fmap.C != w.config.channels:
        raise ConfigError(
            f"feature map has {fmap.C} channels, weights expect {w.config.channels}"
        )
    x = fmap.values.mean(axis=(1, 2))
    last = len(w.env_affine) - 1
    for i, (mat, bias) in enumerate(w.env_affine):
        x = mat @ x + bias
        if i < last:
            x = np.maximum(x, 0.0)
    return _softmax(x) if w.config.env_softmax else x


def _bilinear(values: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample values [C, H, W] at continuous points; pixel centers sit at
    integer index + 0.5. Returns [C, n]."""
    _, h, w = values.shape
    u = np.clip(xs - 0.5, 0.0, w - 1.0)
    v = np.clip(ys - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = u - x0
    fy = v - y0
    v00 = values[:, y0, x0]
    v01 = values[:, y0, x1]
    v10 = values[:, y1, x0]
    v11 = values[:, y1, x1]
    return (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )


def roi_align(
    fmap: FeatureMap,
    box: tuple[float, float, float, float],
    out_grid: tuple[int, int] = (4, 4),
    samples_per_bin: tuple[int, int] = (2, 2),
) -> np.ndarray:
    """Average-pooled bilinear sampling of a normalized box, shape [C, gh, gw].

    The box is scaled to continuous feature coordinates (x * W, y * H);
    each output bin averages sh x sw samples at regular fractional
    offsets, with no coordinate rounding anywhere.
    """
    gh, gw = out_grid
    sh, sw = samples_per_bin
    x1, y1, x2, y2 = box
    x1 *= fmap.W
    x2 *= fmap.W
    y1 *= fmap.H
    y2 *= fmap.H
    bin_h = (y2 - y1) / gh
    bin_w = (x2 - x1) / gw
    # sample centers for every (bin, sub-sample) pair along each axis
    ys = y1 + (np.arange(gh)[:, None] + (np.arange(sh)[None, :] + 0.5) / sh) * bin_h
    xs = x1 + (np.arange(gw)[:, None] + (np.arange(sw)[None, :] + 0.5) / sw) * bin_w
    yy = np.repeat(ys.ravel(), gw * sw)  # gh*sh blocks
    xx = np.tile(xs.ravel(), gh * sh)
    sampled = _bilinear(fmap.values, yy, xx)  # [C, gh*sh*gw*sw]
    sampled = sampled.reshape(fmap.C, gh, sh, gw, sw)
    return sampled.mean(axis=(2, 4))


def _layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * scale + shift


def _self_attention(
    x: np.ndarray, lw: EncoderLayerWeights, num_heads: int
) -> tuple[np.ndarray, np.ndarray]:
    n, d = x.shape
    dh = d // num_heads
    q = (x @ lw.wq.T + lw.bq).reshape(n, num_heads, dh)
    k = (x @ lw.wk.T + lw.bk).reshape(n, num_heads, dh)
    v = (x @ lw.wv.T + lw.bv).reshape(n, num_heads, dh)
    scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(dh)
    attn = _softmax(scores, axis=-1)  # [heads, n, n]
    mixed = np.einsum("hqk,khd->qhd", attn, v).reshape(n, d)
    return mixed @ lw.wo.T + lw.bo, attn


def attention_encoder(
    tokens: np.ndarray, w: EncoderWeights, return_attn: bool = False
):
    """Pre-norm self-attention encoder over an unordered token set.

    tokens: [n, d_model]. With no positional encodings, the map is
    permutation-equivariant. When return_attn is set, also returns the
    per-layer attention tensors [num_heads, n, n].
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] < 1:
        raise InvalidInputError("attention_encoder needs at least one token")
    d = w.layers[0].wq.shape[0]
    if x.shape[1] != d:
        raise ConfigError(f"token dim {x.shape[1]} != encoder d_model {d}")
    attns = []
    for lw in w.layers:
        h = _layer_norm(x, lw.ln1_scale, lw.ln1_shift)
        mixed, attn = _self_attention(h, lw, w.num_heads)
        attns.append(attn)
        x = x + mixed
        h = _layer_norm(x, lw.ln2_scale, lw.ln2_shift)
        ff = np.maximum(h @ lw.ff1_w.T + lw.ff1_b, 0.0) @ lw.ff2_w.T + lw.ff2_b
        x = x + ff
    if return_attn:
        return x, attns
    return x


def agent_fusion(patches: list[np.ndarray], w: FusionWeights) -> np.ndarray | None:
    """Fuse per-agent RoI patches into one vector; None when no agents."""
    if not patches:
        return None
    gh, gw = w.config.roi_grid
    expected = (w.config.channels, gh, gw)
    for p in patches:
        if p.shape != expected:
            raise InvalidInputError(
                f"patch shape {p.shape} != expected {expected} (mixed or wrong dims)"
            )
    pw, pb = w.patch_proj
    tokens = np.stack([pw @ p.ravel() + pb for p in patches])
    encoded = attention_encoder(tokens, w.agent_encoder)
    return encoded.mean(axis=0)


def ae_fuse(env: np.ndarray, agents: np.ndarray | None, w: FusionWeights) -> np.ndarray:
    """Re-weight scene vs agent information through the fusion encoder."""
    d = w.config.d_model
    if env.shape != (d,):
        raise ConfigError(f"env vector shape {env.shape} != ({d},)")
    if agents is None:
        tokens = env[None, :]
    else:
        if agents.shape != (d,):
            raise ConfigError(f"agents vector shape {agents.shape} != ({d},)")
        tokens = np.stack([env, agents])
    encoded = attention_encoder(tokens, w.fuse_encoder)
    return encoded.mean(axis=0)


# ---------------------------------------------------------------------------
# Feature-map sources and the per-video pipeline
# ---------------------------------------------------------------------------

class StubFeatureSource:
    """Seeded deterministic maps, keyed per (video, snippet)."""

    def __init__(self, seed: int, dims: tuple[int, int, int]):
        self.seed = seed
        self.dims = dims

    def get(self, video_id: str, snippet_index: int, entry) -> FeatureMap:
        return stub_backbone(video_id, snippet_index, self.dims, self.seed)


class FileFeatureSource:
    """Feature maps read from tensor files named in the manifest."""

    def __init__(self, base_dir: str | os.PathLike):
        self.base_dir = os.fspath(base_dir)

    def get(self, video_id: str, snippet_index: int, entry) -> FeatureMap:
        if entry is None or entry.feature_file is None:
            raise DataError(
                f"video {video_id!r}: no feature file for snippet {snippet_index}"
            )
        path = os.path.join(self.base_dir, entry.feature_file)
        if not os.path.exists(path):
            raise DataError(
                f"video {video_id!r}: feature file {path} for snippet "
                f"{snippet_index} is missing"
            )
        return FeatureMap(values=read_tensor(path).to_array())


def featurize_video(manifest, w: FusionWeights, source) -> np.ndarray:
    """Run the full two-pathway pipeline over every snippet.

    Returns the [T, d_model] feature matrix with rows in snippet order.
    Snippets absent from the manifest contribute no agent boxes.
    """
    grid = build_grid(manifest.video)
    smap = manifest.snippet_map()
    gh_gw = w.config.roi_grid
    samples = w.config.roi_samples
    out = np.empty((grid.T, w.config.d_model), dtype=np.float64)
    for i in range(grid.T):
        entry = smap.get(i)
        fmap = source.get(manifest.video.video_id, i, entry)
        env = environment_pathway(fmap, w)
        boxes = entry.agent_boxes if entry is not None else ()
        patches = [roi_align(fmap, b, gh_gw, samples) for b in boxes]
        agents = agent_fusion(patches, w)
        out[i] = ae_fuse(env, agents, w)
    return out


# ---------------------------------------------------------------------------
# Weight construction and bundles
# ---------------------------------------------------------------------------

def _rand(rng: np.random.Generator, shape: tuple[int, ...], scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def _random_encoder(rng, cfg: FusionConfig, scale: float) -> EncoderWeights:
    d, ff = cfg.d_model, cfg.ff_dim
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            EncoderLayerWeights(
                wq=_rand(rng, (d, d), scale),
                bq=_rand(rng, (d,), scale),
                wk=_rand(rng, (d, d), scale),
                bk=_rand(rng, (d,), scale),
                wv=_rand(rng, (d, d), scale),
                bv=_rand(rng, (d,), scale),
                wo=_rand(rng, (d, d), scale),
                bo=_rand(rng, (d,), scale),
                ff1_w=_rand(rng, (ff, d), scale),
                ff1_b=_rand(rng, (ff,), scale),
                ff2_w=_rand(rng, (d, ff), scale),
                ff2_b=_rand(rng, (d,), scale),
                ln1_scale=np.ones(d),
                ln1_shift=np.zeros(d),
                ln2_scale=np.ones(d),
                ln2_shift=np.zeros(d),
            )
        )
    return EncoderWeights(layers=tuple(layers), num_heads=cfg.num_heads)


def random_weights(cfg: FusionConfig, seed: int) -> FusionWeights:
    """Seeded weights, uniform in [-1/sqrt(d_model), +1/sqrt(d_model)]."""
    rng = np.random.Generator(np.random.Philox(seed))
    scale = 1.0 / np.sqrt(cfg.d_model)
    dims = [cfg.channels, *cfg.env_hidden, cfg.d_model]
    env_affine = tuple(
        (_rand(rng, (dims[i + 1], dims[i]), scale), _rand(rng, (dims[i + 1],), scale))
        for i in range(len(dims) - 1)
    )
    gh, gw = cfg.roi_grid
    patch_proj = (
        _rand(rng, (cfg.d_model, cfg.channels * gh * gw), scale),
        _rand(rng, (cfg.d_model,), scale),
    )
    agent_encoder = _random_encoder(rng, cfg, scale)
    fuse_encoder = _random_encoder(rng, cfg, scale)
    return FusionWeights(
        config=cfg,
        env_affine=env_affine,
        patch_proj=patch_proj,
        agent_encoder=agent_encoder,
        fuse_encoder=fuse_encoder,
    )


_LAYER_PARAMS = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ff1_w", "ff1_b", "ff2_w", "ff2_b",
    "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift",
)


def _named_params(w: FusionWeights) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for i, (mat, bias) in enumerate(w.env_affine):
        params[f"env_affine.{i}.weight"] = mat
        params[f"env_affine.{i}.bias"] = bias
    params["patch_proj.weight"], params["patch_proj.bias"] = w.patch_proj
    for enc_name, enc in (("agent_encoder", w.agent_encoder), ("fuse_encoder", w.fuse_encoder)):
        for li, layer in enumerate(enc.layers):
            for p in _LAYER_PARAMS:
                params[f"{enc_name}.{li}.{p}"] = getattr(layer, p)
    return params


def save_weights(w: FusionWeights, directory: str | os.PathLike) -> None:
    """Write the bundle: one tensor file per parameter plus a JSON index."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    cfg = w.config
    index = {
        "config": {
            "channels": cfg.channels,
            "d_model": cfg.d_model,
            "num_heads": cfg.num_heads,
            "num_layers": cfg.num_layers,
            "ff_dim": cfg.ff_dim,
            "env_hidden": list(cfg.env_hidden),
            "roi_grid": list(cfg.roi_grid),
            "roi_samples": list(cfg.roi_samples),
            "env_softmax": cfg.env_softmax,
        },
        "params": {},
    }
    for name, arr in sorted(_named_params(w).items()):
        fname = name.replace(".", "_") + ".aent"
        write_tensor(Tensor.from_array(arr), os.path.join(directory, fname))
        index["params"][name] = fname
    payload = json.dumps(index, indent=2, sort_keys=True).encode("utf-8")
    atomic_write_bytes(os.path.join(directory, "index.json"), payload + b"\n")


def load_weights(directory: str | os.PathLike) -> FusionWeights:
    directory = os.fspath(directory)
    with open(os.path.join(directory, "index.json"), "r", encoding="utf-8") as fh:
        index = json.load(fh)
    c = index["config"]
    cfg = FusionConfig(
        channels=c["channels"],
        d_model=c["d_model"],
        num_heads=c["num_heads"],
        num_layers=c["num_layers"],
        ff_dim=c["ff_dim"],
        env_hidden=tuple(c["env_hidden"]),
        roi_grid=tuple(c["roi_grid"]),
        roi_samples=tuple(c["roi_samples"]),
        env_softmax=c["env_softmax"],
    )

    def load(name: str) -> np.ndarray:
        fname = index["params"].get(name)
        if fname is None:
            raise ConfigError(f"weight bundle {directory}: missing parameter {name}")
        return read_tensor(os.path.join(directory, fname)).to_array()

    n_env = 1 + len(cfg.env_hidden)
    env_affine = tuple(
        (load(f"env_affine.{i}.weight"), load(f"env_affine.{i}.bias")) for i in range(n_env)
    )
    patch_proj = (load("patch_proj.weight"), load("patch_proj.bias"))

    def load_encoder(enc_name: str) -> EncoderWeights:
        layers = []
        for li in range(cfg.num_layers):
            kwargs = {p: load(f"{enc_name}.{li}.{p}") for p in _LAYER_PARAMS}
            layers.append(EncoderLayerWeights(**kwargs))
        return EncoderWeights(layers=tuple(layers), num_heads=cfg.num_heads)

    return FusionWeights(
        config=cfg,
        env_affine=env_affine,
        patch_proj=patch_proj,
        agent_encoder=load_encoder("agent_encoder"),
        fuse_encoder=load_encoder("fuse_encoder"),
    )

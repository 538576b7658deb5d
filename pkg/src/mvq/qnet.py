"""Single- and multi-view Q-function architectures.

All six share one factorization: image towers produce a visual embedding f,
a dense branch embeds the gripper state (g) and another the action (h), and a
trunk maps concat(f, g, h) to a scalar. They differ only in how f is built:

    SV_Shoulder  f = tower(view 0 RGB)
    SV_RGBD      f = concat(tower_rgb(view 0 RGB), tower_depth(view 0 depth))
    MV_Towers    f = mean_i tower_i(view i)
    MV_Siamese   f = mean_i tower(view i)            (one shared tower)
    MV_Dropout   f = sum_i d_i tower_i(view i) / C   (d = view mask, C = sum d)
    MV_Q_Agg     Q = mean_i Q_i(view i), each Q_i a complete SV network

The action branch is broadcast over K candidate actions per observation, so
a CEM search over actions reuses the image embeddings.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .nn import LayerSpec, QNetworkParams
from .render import VIEW_NAMES, MultiViewObservation
from .world import ActionCommand

ACTION_DIM = 6


class Arch(str, enum.Enum):
    SV_Shoulder = "SV_Shoulder"
    SV_RGBD = "SV_RGBD"
    MV_Towers = "MV_Towers"
    MV_Siamese = "MV_Siamese"
    MV_Dropout = "MV_Dropout"
    MV_Q_Agg = "MV_Q_Agg"

    @property
    def multi_view(self) -> bool:
        return self.value.startswith("MV_")

    @property
    def uses_depth(self) -> bool:
        return self is Arch.SV_RGBD


@dataclass(frozen=True)
class ArchConfig:
    n_views: int = 3
    resolution: int = 32
    conv_channels: tuple[int, ...] = (8, 16, 16)
    embed_units: int = 64
    branch_units: int = 32
    trunk_units: int = 64

    def tower(self) -> list[LayerSpec]:
        specs: list[LayerSpec] = []
        for ch in self.conv_channels:
            specs += [LayerSpec("conv2d", channels=ch, kernel=3, stride=2), LayerSpec("relu")]
        return specs + [LayerSpec("dense", units=self.embed_units, init="xavier")]

    def branch(self) -> list[LayerSpec]:
        return [LayerSpec("dense", units=self.branch_units), LayerSpec("relu")]

    def trunk(self) -> list[LayerSpec]:
        return [LayerSpec("dense", units=self.trunk_units), LayerSpec("relu"), LayerSpec("dense", units=1, init="xavier")]

    def to_meta(self) -> dict:
        return {"n_views": self.n_views, "resolution": self.resolution, "conv_channels": list(self.conv_channels),
                "embed_units": self.embed_units, "branch_units": self.branch_units, "trunk_units": self.trunk_units}

    @classmethod
    def from_meta(cls, meta: dict) -> "ArchConfig":
        keys = ("n_views", "resolution", "conv_channels", "embed_units", "branch_units", "trunk_units")
        kw = {k: meta[k] for k in keys if k in meta}
        if "conv_channels" in kw:
            kw["conv_channels"] = tuple(kw["conv_channels"])
        return cls(**kw)


class ContractViolation(ValueError):
    """Call violates an architecture's preconditions (bad mask, wrong view count)."""


# ---------------------------------------------------------------- view masks


@dataclass(frozen=True)
class ViewMask:
    selected: tuple[bool, ...]

    def __post_init__(self):
        if not any(self.selected):
            raise ContractViolation("view mask must select at least one view")

    @property
    def count(self) -> int:
        return sum(self.selected)

    @property
    def weights(self) -> np.ndarray:
        return np.array(self.selected, dtype=np.float64)

    @classmethod
    def all(cls, n: int) -> "ViewMask":
        return cls((True,) * n)

    @classmethod
    def only(cls, n: int, *views: int) -> "ViewMask":
        return cls(tuple(i in views for i in range(n)))

    def label(self, names: Sequence[str] = VIEW_NAMES) -> str:
        if all(self.selected):
            return "All"
        return "+".join(names[i] if i < len(names) else f"View{i}" for i, s in enumerate(self.selected) if s)


def all_view_masks(n: int) -> list[ViewMask]:
    """Every nonempty subset, largest first, then in index order (All, S+L, S+R, L+R, S, L, R for n=3)."""
    masks = []
    for size in range(n, 0, -1):
        for combo in itertools.combinations(range(n), size):
            masks.append(ViewMask.only(n, *combo))
    return masks


def sample_view_mask(n: int, seed) -> ViewMask:
    """Uniform draw over the 2**n - 1 nonempty subsets of n views."""
    if n < 1:
        raise ValueError("need at least one view")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    code = int(rng.integers(1, 2 ** n))
    return ViewMask(tuple(bool(code >> i & 1) for i in range(n)))


# ---------------------------------------------------------------- parameters


def _tower_names(arch: Arch, cfg: ArchConfig) -> list[str]:
    if arch is Arch.SV_RGBD:
        return ["tower_rgb/", "tower_depth/"]
    if arch in (Arch.MV_Towers, Arch.MV_Dropout):
        return [f"tower{i}/" for i in range(cfg.n_views)]
    return ["tower/"]


def _heads(arch: Arch, cfg: ArchConfig) -> list[str]:
    return [f"net{i}/" for i in range(cfg.n_views)] if arch is Arch.MV_Q_Agg else [""]


def _visual_width(arch: Arch, cfg: ArchConfig) -> int:
    return cfg.embed_units * (2 if arch is Arch.SV_RGBD else 1)


def init_params(arch: Arch | str, seed=0, config: ArchConfig = ArchConfig(), dtype=np.float32) -> QNetworkParams:
    arch = Arch(arch)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = config.resolution
    tensors: dict[str, np.ndarray] = {}
    fw = _visual_width(arch, config)
    for head in _heads(arch, config):
        for name in _tower_names(arch, config):
            channels = 1 if name == "tower_depth/" else 3
            tensors.update(nn.init_chain(config.tower(), (r, r, channels), rng, head + name, dtype))
        tensors.update(nn.init_chain(config.branch(), (1,), rng, head + "g/", dtype))
        tensors.update(nn.init_chain(config.branch(), (ACTION_DIM,), rng, head + "h/", dtype))
        tensors.update(nn.init_chain(config.trunk(), (fw + 2 * config.branch_units,), rng, head + "trunk/", dtype))
    return QNetworkParams(arch.value, tensors, {"arch_config": config.to_meta()})


def arch_config_of(params: QNetworkParams) -> ArchConfig:
    return ArchConfig.from_meta(params.meta.get("arch_config", {}))


def expected_parameter_count(arch: Arch | str, config: ArchConfig = ArchConfig()) -> int:
    arch = Arch(arch)
    r = config.resolution
    total = 0
    for _head in _heads(arch, config):
        for name in _tower_names(arch, config):
            total += nn.parameter_count(config.tower(), (r, r, 1 if name == "tower_depth/" else 3))
        total += nn.parameter_count(config.branch(), (1,)) + nn.parameter_count(config.branch(), (ACTION_DIM,))
        total += nn.parameter_count(config.trunk(), (_visual_width(arch, config) + 2 * config.branch_units,))
    return total


def tower_parameters(params: QNetworkParams, view: int) -> dict[str, np.ndarray]:
    """The convolutional tower weights that process ``view`` (shared objects for MV_Siamese)."""
    arch, cfg = Arch(params.arch), arch_config_of(params)
    if arch in (Arch.MV_Towers, Arch.MV_Dropout):
        prefix = f"tower{view}/"
    elif arch is Arch.MV_Q_Agg:
        prefix = f"net{view}/tower/"
    elif arch is Arch.MV_Siamese or view == 0:
        prefix = "tower/" if arch is not Arch.SV_RGBD else "tower_rgb/"
    else:
        raise ContractViolation(f"{arch.value} has no tower for view {view}")
    return {k[len(prefix):]: v for k, v in params.tensors.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- forward / backward


@dataclass
class ForwardCache:
    arch: Arch
    token: int
    heads: list = field(default_factory=list)
    n_heads: int = 1
    action_shape: tuple = ()


def _as_images(obs_images: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(obs_images)
    if x.dtype == np.uint8:
        return x.astype(dtype) / dtype(255)
    return x.astype(dtype, copy=False)


def _visual_forward(arch: Arch, cfg: ArchConfig, p, head: str, images: np.ndarray, weights: Optional[np.ndarray], cache: bool = True):
    """Returns (f, record) where record lets :func:`_visual_backward` run."""
    tower = cfg.tower()
    if arch is Arch.SV_Shoulder:
        f, c = nn.chain_forward(tower, p, head + "tower/", images[:, 0, :, :, :3])
        return f, ("single", c)
    if arch is Arch.MV_Q_Agg:
        view = int(head[3:-1])
        f, c = nn.chain_forward(tower, p, head + "tower/", images[:, view, :, :, :3])
        return f, ("single", c)
    if arch is Arch.SV_RGBD:
        fr, cr = nn.chain_forward(tower, p, "tower_rgb/", images[:, 0, :, :, :3])
        fd, cd = nn.chain_forward(tower, p, "tower_depth/", images[:, 0, :, :, 3:4])
        f, widths = nn.concat_forward([fr, fd])
        return f, ("rgbd", cr, cd, widths)
    n_views = cfg.n_views
    if images.shape[1] != n_views:
        raise ContractViolation(f"{arch.value} expects {n_views} views, got {images.shape[1]}")
    if arch is Arch.MV_Siamese:
        n = images.shape[0]
        stacked = images[..., :3].reshape(n * n_views, *images.shape[2:4], 3)
        emb, c = nn.chain_forward(tower, p, "tower/", stacked)
        emb = emb.reshape(n, n_views, -1)
        f, coef = nn.mean_merge_forward([emb[:, i] for i in range(n_views)])
        return f, ("siamese", c, coef, n)
    w = np.ones(n_views) if weights is None else weights
    embs, caches = [], []
    for i in range(n_views):
        if w[i] == 0:
            embs.append(None)
            caches.append(None)
            continue
        e, c = nn.chain_forward(tower, p, f"tower{i}/", images[:, i, :, :, :3])
        embs.append(e)
        caches.append(c)
    f, coef = nn.mean_merge_forward([e if e is not None else 0 for e in embs], w)
    return f, ("towers", caches, coef)


def _visual_backward(arch: Arch, cfg: ArchConfig, p, record, df: np.ndarray, grads: dict) -> None:
    tower = cfg.tower()
    kind = record[0]
    if kind == "single":
        nn.chain_backward(tower, p, record[1], df, grads)
    elif kind == "rgbd":
        _, cr, cd, widths = record
        dr, dd = nn.concat_backward(df, widths)
        nn.chain_backward(tower, p, cr, dr, grads)
        nn.chain_backward(tower, p, cd, dd, grads)
    elif kind == "siamese":
        _, c, coef, n = record
        parts = nn.mean_merge_backward(df, coef)
        demb = np.stack(parts, axis=1).reshape(n * len(coef), -1)
        nn.chain_backward(tower, p, c, demb, grads)
    else:
        _, caches, coef = record
        for c, d in zip(caches, nn.mean_merge_backward(df, coef)):
            if c is not None:
                nn.chain_backward(tower, p, c, d, grads)


def _action_head(p, cfg: ArchConfig, head: str, fw: int, state_pre: np.ndarray, actions: np.ndarray):
    """Trunk output for (N, K) candidate actions given the (N, trunk) state pre-activation."""
    n, k, _ = actions.shape
    bu = cfg.branch_units
    h, hc = nn.chain_forward(cfg.branch(), p, head + "h/", actions.reshape(n * k, ACTION_DIM))
    h = h.reshape(n, k, bu)
    pre = state_pre[:, None, :] + h @ p[head + "trunk/0.w"][fw + bu:]
    z = np.maximum(pre, 0)
    q = (z @ p[head + "trunk/2.w"])[..., 0] + p[head + "trunk/2.b"][0]
    return q, h, hc, pre, z


def _prepare(params: QNetworkParams, images, gripper_closed, mask):
    arch, cfg = Arch(params.arch), arch_config_of(params)
    if mask is not None and arch is not Arch.MV_Dropout:
        raise ContractViolation(f"view masks are only accepted by MV_Dropout, not {arch.value}")
    dtype = params.dtype.type
    x = _as_images(images, dtype)
    grip = np.asarray(gripper_closed, dtype=dtype).reshape(x.shape[0], 1)
    return arch, cfg, dtype, x, grip


def _state_part(p, arch, cfg, head, x, grip, weights, fw):
    # concat(f, g, h) @ w1 is split by row blocks so f and g are not repeated K times
    f, vis = _visual_forward(arch, cfg, p, head, x, weights, True)
    g, gc = nn.chain_forward(cfg.branch(), p, head + "g/", grip)
    w1 = p[head + "trunk/0.w"]
    bu = cfg.branch_units
    state_pre = f @ w1[:fw] + g @ w1[fw:fw + bu] + p[head + "trunk/0.b"]
    return state_pre, f, vis, g, gc


@dataclass
class StateEncoding:
    """Action-independent part of the network, reusable across candidate-action batches."""

    params: QNetworkParams
    state_pre: list[np.ndarray]

    def __call__(self, actions: np.ndarray) -> np.ndarray:
        """Q-values of shape (N, K) for actions of shape (N, K, 6)."""
        p = self.params.tensors
        arch, cfg = Arch(self.params.arch), arch_config_of(self.params)
        fw = _visual_width(arch, cfg)
        actions = np.asarray(actions, dtype=self.params.dtype)
        total = None
        for head, sp in zip(_heads(arch, cfg), self.state_pre):
            q = _action_head(p, cfg, head, fw, sp, actions)[0]
            total = q if total is None else total + q
        return total / self.params.dtype.type(len(self.state_pre)) if len(self.state_pre) > 1 else total


def encode_state(params: QNetworkParams, images: np.ndarray, gripper_closed: np.ndarray,
                 mask: Optional[ViewMask] = None) -> StateEncoding:
    arch, cfg, dtype, x, grip = _prepare(params, images, gripper_closed, mask)
    weights = mask.weights if mask is not None else None
    fw = _visual_width(arch, cfg)
    parts = [_state_part(params.tensors, arch, cfg, head, x, grip, weights, fw)[0] for head in _heads(arch, cfg)]
    return StateEncoding(params, parts)


def q_forward(params: QNetworkParams, images: np.ndarray, gripper_closed: np.ndarray, actions: np.ndarray,
              mask: Optional[ViewMask] = None, keep_cache: bool = True):
    """Batched Q-values.

    images: (N, V, H, W, C) float in [0,1] or uint8; gripper_closed: (N,);
    actions: (N, K, 6). Returns (q of shape (N, K), cache); for MV_Q_Agg the
    per-view values are in ``cache.heads[i]["q"]``.
    """
    arch, cfg, dtype, x, grip = _prepare(params, images, gripper_closed, mask)
    p = params.tensors
    n = x.shape[0]
    actions = np.asarray(actions, dtype=dtype)
    if actions.ndim != 3 or actions.shape[0] != n or actions.shape[2] != ACTION_DIM:
        raise nn.ShapeError(f"actions must have shape ({n}, K, {ACTION_DIM}), got {actions.shape}")
    weights = mask.weights if mask is not None else None
    heads = _heads(arch, cfg)
    fw = _visual_width(arch, cfg)
    q_total = None
    records = []
    for head in heads:
        state_pre, f, vis, g, gc = _state_part(p, arch, cfg, head, x, grip, weights, fw)
        q, h, hc, pre, z = _action_head(p, cfg, head, fw, state_pre, actions)
        q_total = q if q_total is None else q_total + q
        if keep_cache:
            records.append({"f": f, "vis": vis, "g": g, "gc": gc, "h": h, "hc": hc, "pre": pre, "z": z, "q": q})
        else:
            records.append({"q": q})
    q_total = q_total / dtype(len(heads)) if len(heads) > 1 else q_total
    return q_total, ForwardCache(arch, id(p), records, len(heads), actions.shape[:2])


def q_backward(params: QNetworkParams, cache: ForwardCache, dq: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(dq * q) w.r.t. every parameter."""
    p = params.tensors
    if cache.token != id(p) or cache.arch is not Arch(params.arch) or not cache.heads or "pre" not in cache.heads[0]:
        raise nn.StaleCacheError("forward cache does not match these parameters")
    arch, cfg = cache.arch, arch_config_of(params)
    n, k = cache.action_shape
    dq = np.asarray(dq, dtype=params.dtype).reshape(n, k) / params.dtype.type(cache.n_heads)
    fw, bu = _visual_width(arch, cfg), cfg.branch_units
    grads: dict[str, np.ndarray] = {}
    for head, r in zip(_heads(arch, cfg), cache.heads):
        w1, w2 = p[head + "trunk/0.w"], p[head + "trunk/2.w"]
        grads[head + "trunk/2.w"] = np.einsum("nkj,nk->j", r["z"], dq).reshape(w2.shape)
        grads[head + "trunk/2.b"] = np.array([dq.sum()], dtype=params.dtype)
        dpre = (dq[..., None] * w2[:, 0]) * (r["pre"] > 0)
        dstate = dpre.sum(axis=1)
        dh = dpre @ w1[fw + bu:].T
        grads[head + "trunk/0.w"] = np.concatenate([
            r["f"].T @ dstate,
            r["g"].T @ dstate,
            r["h"].reshape(n * k, bu).T @ dpre.reshape(n * k, -1),
        ])
        grads[head + "trunk/0.b"] = dpre.sum(axis=(0, 1))
        nn.chain_backward(cfg.branch(), p, r["hc"], dh.reshape(n * k, bu), grads)
        nn.chain_backward(cfg.branch(), p, r["gc"], dstate @ w1[fw:fw + bu].T, grads)
        _visual_backward(arch, cfg, p, r["vis"], dstate @ w1[:fw].T, grads)
    for key, w in p.items():
        if key not in grads:
            grads[key] = np.zeros_like(w)
    return grads


def activation_pattern(cache: ForwardCache) -> bytes:
    """Packed ReLU on/off pattern of a cached forward pass (for kink-aware gradient checks)."""
    masks = []

    def visit(obj):
        if isinstance(obj, np.ndarray) and obj.dtype == bool:
            masks.append(np.packbits(obj.reshape(-1)).tobytes())
        elif isinstance(obj, nn.ChainCache):
            for e in obj.entries:
                visit(e)
        elif isinstance(obj, (list, tuple)):
            for e in obj:
                visit(e)

    for r in cache.heads:
        visit([r["vis"], r["gc"], r["hc"], r["pre"] > 0])
    return b"".join(masks)


# ---------------------------------------------------------------- observation helpers


@dataclass(frozen=True)
class QEvaluation:
    q_value: float
    per_view_q: Optional[tuple[float, ...]] = None


def stack_observations(observations: Sequence[MultiViewObservation]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([o.stacked() for o in observations])
    grip = np.array([o.gripper_closed for o in observations], dtype=np.float32)
    return images, grip


def _check_views(arch: Arch, cfg: ArchConfig, images: np.ndarray) -> None:
    need = cfg.n_views if arch.multi_view else 1
    if images.shape[1] < need:
        raise ContractViolation(f"{arch.value} needs {need} views, observation has {images.shape[1]}")
    if arch.uses_depth and images.shape[-1] < 4:
        raise ContractViolation("SV_RGBD needs a depth channel")


def q_value(arch: Arch | str, params: QNetworkParams, obs: MultiViewObservation, action: ActionCommand,
            mask: Optional[ViewMask] = None) -> QEvaluation:
    return q_value_batch(arch, params, [obs], [action], "none" if mask is None else ("fixed", mask))[0]


def q_value_batch(arch: Arch | str, params: QNetworkParams, obs_batch, action_batch, mask_policy="none",
                  seed=None) -> list[QEvaluation]:
    """``mask_policy``: "none", "per_batch_sample", or ("fixed", ViewMask)."""
    arch = Arch(arch)
    if arch.value != params.arch:
        raise ContractViolation(f"parameters are for {params.arch}, not {arch.value}")
    cfg = arch_config_of(params)
    if isinstance(obs_batch, tuple):
        images, grip = obs_batch
    else:
        images, grip = stack_observations(obs_batch)
    _check_views(arch, cfg, images)
    actions = np.stack([a.to_vector() if isinstance(a, ActionCommand) else np.asarray(a) for a in action_batch])[:, None, :]
    mask = resolve_mask(arch, cfg, mask_policy, seed)
    q, cache = q_forward(params, images, grip, actions, mask, keep_cache=False)
    per_view = None
    if arch is Arch.MV_Q_Agg:
        per_view = np.stack([h["q"][:, 0] for h in cache.heads], axis=1)
    return [QEvaluation(float(q[i, 0]), None if per_view is None else tuple(float(v) for v in per_view[i]))
            for i in range(q.shape[0])]


def resolve_mask(arch: Arch, cfg: ArchConfig, mask_policy, seed=None) -> Optional[ViewMask]:
    if mask_policy in (None, "none"):
        return None
    if arch is not Arch.MV_Dropout:
        raise ContractViolation(f"view masks are only accepted by MV_Dropout, not {arch.value}")
    if mask_policy == "per_batch_sample":
        return sample_view_mask(cfg.n_views, seed)
    kind, mask = mask_policy
    if kind != "fixed":
        raise ValueError(f"unknown mask policy {mask_policy!r}")
    if len(mask.selected) != cfg.n_views:
        raise ContractViolation("mask length does not match view count")
    return mask


def gradient_check(arch: Arch | str, seed: int = 0, config: ArchConfig = ArchConfig(resolution=16),
                   n_obs: int = 2, n_actions: int = 3, coords_per_tensor: int = 3,
                   mask: Optional[ViewMask] = None) -> dict[str, float]:
    """Relative error of q_backward against central differences on a random float64 network and input.

    Biases are randomized so every parameter carries gradient; coordinates
    whose perturbation flips a ReLU or max-pool are redrawn.
    """
    arch = Arch(arch)
    rng = np.random.default_rng(seed)
    p = init_params(arch, seed, config, np.float64)
    for k, v in p.tensors.items():
        if k.endswith(".b"):
            v[:] = rng.normal(0, 0.1, v.shape)
    views = config.n_views if arch.multi_view else 1
    images = rng.uniform(0, 1, (n_obs, views, config.resolution, config.resolution, 4))
    grip = rng.integers(0, 2, n_obs).astype(np.float64)
    actions = rng.uniform(-1, 1, (n_obs, n_actions, ACTION_DIM))
    dq = rng.normal(size=(n_obs, n_actions))
    _, cache = q_forward(p, images, grip, actions, mask)
    grads = q_backward(p, cache, dq)
    last = {}

    def loss():
        q, c = q_forward(p, images, grip, actions, mask)
        last["pattern"] = activation_pattern(c)
        return float((q * dq).sum())

    return nn.finite_difference_check(loss, p.tensors, grads, rng, coords_per_tensor, 1e-5, lambda: last["pattern"])
